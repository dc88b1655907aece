// Image classification datasets: the KDTD binary format, synthetic
// generators, the external 100-class archive reader, splits and batching.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kdas/random.hpp"
#include "kdas/tensor.hpp"

namespace kdas {

/// Raw u8 images with u16 labels, channel-major per record.
struct Dataset {
  int channels = 3;
  int height = 16;
  int width = 16;
  int num_classes = 10;
  std::vector<std::uint16_t> labels;
  std::vector<std::uint8_t> pixels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  void validate() const;
  /// Records at `indices`, in that order.
  Dataset subset(std::span<const std::size_t> indices) const;
};

std::string encode_dataset(const Dataset& d);
Dataset decode_dataset(const std::string& bytes);
void save_dataset(const std::string& path, const Dataset& d);
Dataset load_dataset(const std::string& path);

/// Generator settings. `separation` and `noise` are in units of the pixel
/// noise scale; `mix` is the amplitude of the distractor texture.
struct DataSpec {
  std::string kind = "synthetic-textured-patches";
  int classes = 10;
  int channels = 3;
  int height = 16;
  int width = 16;
  int train_per_class = 200;
  int test_per_class = 100;
  double separation = 3.0;
  double noise = 2.5;
  double mix = 1.2;
  double val_fraction = 0.1;
  std::string external_train;
  std::string external_test;

  void validate() const;
};

struct DataSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Per-pixel class means with sign patterns of +-separation/2 plus unit noise.
/// Class prototypes come from `prototype_seed`, samples from `rng`.
Dataset gaussian_classes(const DataSpec& spec, int per_class, std::uint64_t prototype_seed, Rng& rng);
/// Oriented coloured gratings per class, mixed with a weaker grating of
/// another class and pixel noise.
Dataset textured_patches(const DataSpec& spec, int per_class, std::uint64_t prototype_seed, Rng& rng);
/// Records of 2 label bytes (coarse, fine) + 3072 pixel bytes; the fine label is kept.
Dataset read_external_binary(const std::string& bytes, const std::string& what);

/// Moves round(val_fraction * |train_total|) shuffled records into the validation split.
DataSplits split_train_val(const Dataset& train_total, Dataset test, double val_fraction, Rng& rng);

/// Generates (or reads) all three splits with the "data" stream of `seeds`.
DataSplits make_splits(const DataSpec& spec, const SeedStreams& seeds);

void save_splits(const std::string& dir, const DataSplits& s);
DataSplits load_splits(const std::string& dir);

struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;

  /// Per-channel statistics over all pixels of `train` (in [0,1] units).
  static Normalization fit(const Dataset& train);
};

/// Normalized float images ready for the network.
struct TensorDataset {
  int channels = 0;
  int height = 0;
  int width = 0;
  int num_classes = 0;
  Array images;  // [N*C*H*W]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
};

TensorDataset to_tensor_dataset(const Dataset& d, const Normalization& norm);

/// Random crop from a zero-padded image plus random horizontal flip, per image.
Tensor augment(const Tensor& images, int padding, Rng& rng);

/// Indices 0..n-1 in a fresh random order.
std::vector<std::size_t> permutation(std::size_t n, Rng& rng);

}  // namespace kdas
