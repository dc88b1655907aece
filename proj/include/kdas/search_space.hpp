// Backbone-anchored search space: residual backbones split into stages,
// add-on slots at the end of every stage, and the genomes that fill them.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdas/tensor.hpp"

namespace kdas {

/// The add-on vocabulary. Every op maps [B,C,H,W] to [B,C,H,W].
enum class AddOnOp : int {
  kIdentity = 0,
  kConv3x3 = 1,
  kConv5x5 = 2,
  kSepConv3x3 = 3,
  kSepConv5x5 = 4,
  kMaxPool3x3 = 5,
  kAvgPool3x3 = 6,
};

inline constexpr int kNumAddOnOps = 7;

std::string to_string(AddOnOp op);
AddOnOp add_on_op_from_int(int id);
bool is_parametric(AddOnOp op);

struct StageSpec {
  int channels = 16;
  int blocks = 1;
  int stride = 1;  // stride of the stage's first block
};

/// ResNet-style backbone: 3x3 stem, residual stages of basic blocks, global
/// pooling + dense classifier. The classifier is never searched.
struct BackboneSpec {
  std::string id;
  int in_channels = 3;
  int stem_channels = 16;
  std::vector<StageSpec> stages;
  int num_classes = 10;

  void validate() const;
};

/// Known ids: "mini-resnet" (2 stages, 8/16 channels, 2 blocks each),
/// "resnet<6n+2>" for the CIFAR family (e.g. resnet32, resnet110), and
/// "<id>+deep<k>" which adds k blocks to every stage of <id>.
BackboneSpec make_backbone(const std::string& id, int num_classes, int in_channels = 3);
/// Manual enlargement: `extra` more blocks in every stage.
BackboneSpec deepen(const BackboneSpec& base, int extra);

struct SlotLayout {
  std::vector<int> slots_per_stage;

  int total() const;
  std::size_t stages() const { return slots_per_stage.size(); }
  bool operator==(const SlotLayout&) const = default;
};

/// `total_slots` spread evenly over the backbone's stages.
SlotLayout even_layout(int total_slots, std::size_t num_stages);

inline int skip_pairs(int slots) { return slots * (slots - 1) / 2; }
/// Position of pair (a, b), a < b, in lexicographic order over `slots` slots.
int skip_index(int a, int b, int slots);

struct StageGenome {
  std::vector<AddOnOp> ops;
  std::vector<std::uint8_t> skips;  // lexicographic (a,b) order, one bit per pair

  bool operator==(const StageGenome&) const = default;
};

struct ArchitectureGenome {
  std::string backbone_id;
  std::vector<StageGenome> stages;

  SlotLayout layout() const;
  /// Throws on out-of-range op ids, wrong skip-bit counts or non-binary bits.
  void validate(const SlotLayout& expected) const;
  bool is_neutral() const;

  bool operator==(const ArchitectureGenome&) const = default;
  bool operator<(const ArchitectureGenome& o) const;
};

ArchitectureGenome neutral_genome(const SlotLayout& layout, const std::string& backbone_id);

nlohmann::json genome_to_json(const ArchitectureGenome& g);
ArchitectureGenome genome_from_json(const nlohmann::json& j);
/// Canonical, byte-stable serialization used for hashing and dedup.
std::string canonical_genome(const ArchitectureGenome& g);

/// kHeUniform: U(+-sqrt(6/fan_in)); kFanInUniform: U(+-1/sqrt(fan_in)).
enum class ParamInit { kHeUniform, kFanInUniform, kZeros, kOnes };

struct ParamSpec {
  std::string name;
  Shape shape;
  std::int64_t fan_in = 1;
  ParamInit init = ParamInit::kZeros;
};

/// Batch-norm running statistics without affine parameters (pooling add-ons).
struct NormSpec {
  std::string name;
  std::int64_t channels = 0;
};

enum class LayerKind { kConv, kDepthwiseConv, kBatchNorm, kDense, kMaxPool, kAvgPool, kIdentity, kGlobalPool };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::kIdentity;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int stage = -1;
  int slot = -1;  // global add-on slot, -1 for backbone layers
  AddOnOp op = AddOnOp::kIdentity;
};

struct SkipJunction {
  int stage = 0;
  int from_slot = 0;  // local slot indices within the stage
  int to_slot = 0;
};

/// A genome decoded against a backbone. Skip (a, b) adds the output of slot a
/// to the output of slot b, so slots a+1..b form a residual branch.
struct CandidateNetwork {
  BackboneSpec backbone;
  ArchitectureGenome genome;
  SlotLayout layout;
  std::vector<LayerSpec> layers;
  std::vector<SkipJunction> skips;
  std::vector<ParamSpec> params;
  std::vector<NormSpec> norms;
  std::int64_t param_count = 0;
};

CandidateNetwork decode(const ArchitectureGenome& genome, const BackboneSpec& backbone, const SlotLayout& layout);
/// Rebuilds the genome from the decoded layer graph.
ArchitectureGenome encode(const CandidateNetwork& network);

std::int64_t param_count(const CandidateNetwork& network);
std::int64_t param_count(const BackboneSpec& backbone);

/// Parameters of one add-on op at global slot `slot` on a `channels`-wide stage.
std::vector<ParamSpec> add_on_params(int slot, AddOnOp op, int channels);
/// Parameter-free normalizers of one add-on op (pooling ops only).
std::vector<NormSpec> add_on_norms(int slot, AddOnOp op, int channels);
/// Backbone parameters followed by every (slot, op) pair's parameters.
std::vector<ParamSpec> pool_param_specs(const BackboneSpec& backbone, const SlotLayout& layout);
std::vector<NormSpec> pool_norm_specs(const BackboneSpec& backbone, const SlotLayout& layout);
std::string add_on_prefix(int slot, AddOnOp op);

/// Product over stages of 2^(L_i(L_i-1)/2) * 7^L_i. Throws on u64 overflow.
std::uint64_t search_space_size(const SlotLayout& layout);

inline constexpr std::uint64_t kEnumerationCap = 1'000'000;

/// Visits every genome once in lexicographic order (stage-major, ops before skips).
void for_each_genome(const SlotLayout& layout, const std::string& backbone_id,
                     const std::function<void(const ArchitectureGenome&)>& visit);
std::vector<ArchitectureGenome> enumerate_genomes(const SlotLayout& layout, const std::string& backbone_id);

}  // namespace kdas
