#include "kdas/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <stdexcept>

#include "kdas/binary_io.hpp"

namespace kdas {

namespace {

constexpr char kMagic[4] = {'K', 'D', 'T', 'D'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kExternalPixels = 3072;

std::uint8_t to_pixel(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

Dataset empty_like(const DataSpec& spec) {
  Dataset d;
  d.channels = spec.channels;
  d.height = spec.height;
  d.width = spec.width;
  d.num_classes = spec.classes;
  return d;
}

}  // namespace

void Dataset::validate() const {
  if (channels < 1 || channels > 255 || height < 1 || height > 65535 || width < 1 || width > 65535) {
    throw std::invalid_argument("dataset: invalid image dimensions");
  }
  if (num_classes < 2 || num_classes > 65535) throw std::invalid_argument("dataset: invalid class count");
  if (pixels.size() != labels.size() * image_size()) {
    throw std::invalid_argument("dataset: " + std::to_string(pixels.size()) + " pixel bytes for " +
                                std::to_string(labels.size()) + " records of " + std::to_string(image_size()));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw std::invalid_argument("dataset: record " + std::to_string(i) + " has label " + std::to_string(labels[i]) +
                                  " >= " + std::to_string(num_classes));
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out = *this;
  out.labels.clear();
  out.pixels.clear();
  const auto n = image_size();
  for (auto i : indices) {
    if (i >= size()) throw std::out_of_range("dataset: record index out of range");
    out.labels.push_back(labels[i]);
    out.pixels.insert(out.pixels.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i * n),
                      pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  }
  return out;
}

std::string encode_dataset(const Dataset& d) {
  d.validate();
  std::string out(kMagic, 4);
  binio::put<std::uint32_t>(out, kVersion);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(d.size()));
  binio::put<std::uint8_t>(out, static_cast<std::uint8_t>(d.channels));
  binio::put<std::uint16_t>(out, static_cast<std::uint16_t>(d.height));
  binio::put<std::uint16_t>(out, static_cast<std::uint16_t>(d.width));
  binio::put<std::uint16_t>(out, static_cast<std::uint16_t>(d.num_classes));
  const auto n = d.image_size();
  for (std::size_t i = 0; i < d.size(); ++i) {
    binio::put<std::uint16_t>(out, d.labels[i]);
    out.append(reinterpret_cast<const char*>(d.pixels.data() + i * n), n);
  }
  return out;
}

Dataset decode_dataset(const std::string& bytes) {
  binio::Reader r(bytes, "dataset");
  if (r.bytes(4) != std::string(kMagic, 4)) r.fail("bad magic (expected KDTD)");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  Dataset d;
  d.channels = r.get<std::uint8_t>();
  d.height = r.get<std::uint16_t>();
  d.width = r.get<std::uint16_t>();
  d.num_classes = r.get<std::uint16_t>();
  const auto n = d.image_size();
  d.labels.reserve(count);
  d.pixels.reserve(count * n);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto label = r.get<std::uint16_t>();
    if (label >= d.num_classes) r.fail("label " + std::to_string(label) + " out of range");
    d.labels.push_back(label);
    const auto px = r.bytes(n);
    d.pixels.insert(d.pixels.end(), px.begin(), px.end());
  }
  if (!r.done()) r.fail("trailing bytes after " + std::to_string(count) + " records");
  d.validate();
  return d;
}

void save_dataset(const std::string& path, const Dataset& d) { binio::write_file(path, encode_dataset(d)); }

Dataset load_dataset(const std::string& path) { return decode_dataset(binio::read_file(path)); }

void DataSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw std::invalid_argument("dataset." + field + ": " + msg);
  };
  if (kind != "synthetic-gaussian-classes" && kind != "synthetic-textured-patches" && kind != "external-binary") {
    fail("kind", "unknown kind '" + kind + "'");
  }
  if (classes < 2 || classes > 65535) fail("classes", "must be in [2, 65535]");
  if (channels < 1 || channels > 255) fail("channels", "must be in [1, 255]");
  if (height < 1 || width < 1) fail("height/width", "must be positive");
  if (train_per_class < 1) fail("train_per_class", "must be positive");
  if (test_per_class < 1) fail("test_per_class", "must be positive");
  if (!(separation >= 0.0) || !(noise >= 0.0) || !(mix >= 0.0)) fail("separation/noise/mix", "must be >= 0");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) fail("val_fraction", "must be in [0, 1)");
  if (kind == "external-binary" && (external_train.empty() || external_test.empty())) {
    fail("external_train", "external-binary needs external_train and external_test paths");
  }
}

Dataset gaussian_classes(const DataSpec& spec, int per_class, std::uint64_t prototype_seed, Rng& rng) {
  Dataset d = empty_like(spec);
  const auto n = d.image_size();
  Rng proto(prototype_seed);
  std::vector<std::vector<double>> means(static_cast<std::size_t>(spec.classes), std::vector<double>(n));
  for (auto& m : means)
    for (auto& v : m) v = (proto() & 1 ? 0.5 : -0.5) * spec.separation;
  constexpr double scale = 20.0;
  for (int k = 0; k < per_class; ++k) {
    for (int c = 0; c < spec.classes; ++c) {
      d.labels.push_back(static_cast<std::uint16_t>(c));
      for (std::size_t p = 0; p < n; ++p) {
        d.pixels.push_back(to_pixel(128.0 + scale * (means[static_cast<std::size_t>(c)][p] + normal(rng))));
      }
    }
  }
  return d;
}

Dataset textured_patches(const DataSpec& spec, int per_class, std::uint64_t prototype_seed, Rng& rng) {
  struct Prototype {
    double angle, freq;
    std::vector<double> colour;
  };
  constexpr double pi = std::numbers::pi;
  Rng proto(prototype_seed);
  std::vector<Prototype> protos;
  for (int c = 0; c < spec.classes; ++c) {
    Prototype p;
    p.angle = pi * c / spec.classes + uniform(proto, -0.1, 0.1);
    p.freq = uniform(proto, 0.12, 0.32);
    double norm = 0.0;
    for (int ch = 0; ch < spec.channels; ++ch) {
      p.colour.push_back(uniform(proto, -1.0, 1.0));
      norm += p.colour.back() * p.colour.back();
    }
    norm = std::sqrt(std::max(norm, 1e-12) / spec.channels);
    for (auto& v : p.colour) v /= norm;
    protos.push_back(std::move(p));
  }

  Dataset d = empty_like(spec);
  const int h = spec.height, w = spec.width;
  std::vector<double> main(static_cast<std::size_t>(h * w)), other(static_cast<std::size_t>(h * w));
  auto grating = [&](const Prototype& p, double jitter, double phase, double amp, std::vector<double>& out) {
    const double a = p.angle + jitter;
    const double ca = std::cos(a), sa = std::sin(a);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        out[static_cast<std::size_t>(y * w + x)] = amp * std::sin(2.0 * pi * p.freq * (x * ca + y * sa) + phase);
      }
  };
  constexpr double scale = 48.0;
  for (int k = 0; k < per_class; ++k) {
    for (int c = 0; c < spec.classes; ++c) {
      const auto& pc = protos[static_cast<std::size_t>(c)];
      grating(pc, normal(rng, 0.0, 0.08), uniform(rng, 0.0, 2.0 * pi), uniform(rng, 0.7, 1.3), main);
      int other_class = static_cast<int>(rng() % static_cast<unsigned>(spec.classes - 1));
      if (other_class >= c) ++other_class;
      const auto& po = protos[static_cast<std::size_t>(other_class)];
      grating(po, normal(rng, 0.0, 0.08), uniform(rng, 0.0, 2.0 * pi), spec.mix * uniform(rng, 0.0, 1.0), other);
      d.labels.push_back(static_cast<std::uint16_t>(c));
      for (int ch = 0; ch < spec.channels; ++ch) {
        const double cm = pc.colour[static_cast<std::size_t>(ch)];
        const double co = po.colour[static_cast<std::size_t>(ch)];
        for (std::size_t p = 0; p < main.size(); ++p) {
          d.pixels.push_back(to_pixel(128.0 + scale * (cm * main[p] + co * other[p] + spec.noise * normal(rng))));
        }
      }
    }
  }
  return d;
}

Dataset read_external_binary(const std::string& bytes, const std::string& what) {
  constexpr std::size_t record = 2 + kExternalPixels;
  if (bytes.empty() || bytes.size() % record != 0) {
    throw std::runtime_error(what + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                             std::to_string(record) + "-byte record (malformed at byte offset " +
                             std::to_string(bytes.size() - bytes.size() % record) + ")");
  }
  Dataset d;
  d.channels = 3;
  d.height = 32;
  d.width = 32;
  d.num_classes = 100;
  const std::size_t count = bytes.size() / record;
  d.pixels.reserve(count * kExternalPixels);
  for (std::size_t i = 0; i < count; ++i) {
    const auto fine = static_cast<std::uint8_t>(bytes[i * record + 1]);
    if (fine >= 100) {
      throw std::runtime_error(what + ": fine label " + std::to_string(fine) + " out of range at byte offset " +
                               std::to_string(i * record + 1));
    }
    d.labels.push_back(fine);
    const auto* px = reinterpret_cast<const std::uint8_t*>(bytes.data() + i * record + 2);
    d.pixels.insert(d.pixels.end(), px, px + kExternalPixels);
  }
  return d;
}

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  // Fisher-Yates with explicit modulo draws, so the order does not depend on
  // the standard library's distribution implementation.
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  return idx;
}

DataSplits split_train_val(const Dataset& train_total, Dataset test, double val_fraction, Rng& rng) {
  const auto n = train_total.size();
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  auto order = permutation(n, rng);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {train_total.subset(train), train_total.subset(val), std::move(test)};
}

DataSplits make_splits(const DataSpec& spec, const SeedStreams& seeds) {
  spec.validate();
  const SeedStreams data = seeds.child("data");
  Rng split_rng = data.stream("split");
  if (spec.kind == "external-binary") {
    Dataset train = read_external_binary(binio::read_file(spec.external_train), spec.external_train);
    Dataset test = read_external_binary(binio::read_file(spec.external_test), spec.external_test);
    return split_train_val(train, std::move(test), spec.val_fraction, split_rng);
  }
  const auto proto = data.seed("prototypes");
  Rng train_rng = data.stream("train");
  Rng test_rng = data.stream("test");
  const bool gaussian = spec.kind == "synthetic-gaussian-classes";
  auto gen = [&](int per_class, Rng& rng) {
    return gaussian ? gaussian_classes(spec, per_class, proto, rng) : textured_patches(spec, per_class, proto, rng);
  };
  Dataset train = gen(spec.train_per_class, train_rng);
  Dataset test = gen(spec.test_per_class, test_rng);
  return split_train_val(train, std::move(test), spec.val_fraction, split_rng);
}

void save_splits(const std::string& dir, const DataSplits& s) {
  std::filesystem::create_directories(dir);
  save_dataset(dir + "/train.kdtd", s.train);
  save_dataset(dir + "/val.kdtd", s.val);
  save_dataset(dir + "/test.kdtd", s.test);
}

DataSplits load_splits(const std::string& dir) {
  return {load_dataset(dir + "/train.kdtd"), load_dataset(dir + "/val.kdtd"), load_dataset(dir + "/test.kdtd")};
}

Normalization Normalization::fit(const Dataset& train) {
  if (train.size() == 0) throw std::invalid_argument("normalization: empty training split");
  Normalization out;
  const std::size_t plane = static_cast<std::size_t>(train.height) * static_cast<std::size_t>(train.width);
  for (int c = 0; c < train.channels; ++c) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      const auto* px = train.pixels.data() + i * train.image_size() + static_cast<std::size_t>(c) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = px[p] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    const double n = static_cast<double>(plane * train.size());
    const double mean = sum / n;
    out.mean.push_back(mean);
    out.stddev.push_back(std::sqrt(std::max(sq / n - mean * mean, 1e-12)));
  }
  return out;
}

TensorDataset to_tensor_dataset(const Dataset& d, const Normalization& norm) {
  d.validate();
  if (norm.mean.size() != static_cast<std::size_t>(d.channels)) {
    throw std::invalid_argument("normalization has " + std::to_string(norm.mean.size()) + " channels, dataset has " +
                                std::to_string(d.channels));
  }
  TensorDataset out;
  out.channels = d.channels;
  out.height = d.height;
  out.width = d.width;
  out.num_classes = d.num_classes;
  out.images.resize(static_cast<Eigen::Index>(d.pixels.size()));
  const std::size_t plane = static_cast<std::size_t>(d.height) * static_cast<std::size_t>(d.width);
  for (std::size_t i = 0; i < d.pixels.size(); ++i) {
    const auto c = (i / plane) % static_cast<std::size_t>(d.channels);
    out.images[static_cast<Eigen::Index>(i)] = (d.pixels[i] / 255.0 - norm.mean[c]) / norm.stddev[c];
  }
  out.labels.assign(d.labels.begin(), d.labels.end());
  return out;
}

Tensor TensorDataset::batch(std::span<const std::size_t> indices) const {
  const auto n = static_cast<Eigen::Index>(channels) * height * width;
  Array v(n * static_cast<Eigen::Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) throw std::out_of_range("batch: example index out of range");
    v.segment(static_cast<Eigen::Index>(k) * n, n) = images.segment(static_cast<Eigen::Index>(indices[k]) * n, n);
  }
  return Tensor({static_cast<std::int64_t>(indices.size()), channels, height, width}, std::move(v));
}

std::vector<int> TensorDataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Tensor augment(const Tensor& images, int padding, Rng& rng) {
  const auto b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  Array out = Array::Zero(images.size());
  const Array& in = images.values();
  const auto span = static_cast<unsigned>(2 * padding + 1);
  for (std::int64_t n = 0; n < b; ++n) {
    const auto dy = static_cast<std::int64_t>(rng() % span) - padding;
    const auto dx = static_cast<std::int64_t>(rng() % span) - padding;
    const bool flip = (rng() & 1) != 0;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const auto base = (n * c + ch) * h * w;
      for (std::int64_t y = 0; y < h; ++y) {
        const auto sy = y + dy;
        if (sy < 0 || sy >= h) continue;
        for (std::int64_t x = 0; x < w; ++x) {
          const auto xx = flip ? w - 1 - x : x;
          const auto sx = xx + dx;
          if (sx < 0 || sx >= w) continue;
          out[base + y * w + x] = in[base + sy * w + sx];
        }
      }
    }
  }
  return Tensor(images.shape(), std::move(out));
}

}  // namespace kdas
