#include "kdas/search_space.hpp"

#include <limits>
#include <regex>
#include <stdexcept>

namespace kdas {

std::string to_string(AddOnOp op) {
  switch (op) {
    case AddOnOp::kIdentity: return "identity";
    case AddOnOp::kConv3x3: return "conv3x3";
    case AddOnOp::kConv5x5: return "conv5x5";
    case AddOnOp::kSepConv3x3: return "sepconv3x3";
    case AddOnOp::kSepConv5x5: return "sepconv5x5";
    case AddOnOp::kMaxPool3x3: return "maxpool3x3";
    case AddOnOp::kAvgPool3x3: return "avgpool3x3";
  }
  return "?";
}

AddOnOp add_on_op_from_int(int id) {
  if (id < 0 || id >= kNumAddOnOps) {
    throw std::invalid_argument("genome: op id " + std::to_string(id) + " outside [0," +
                                std::to_string(kNumAddOnOps) + ")");
  }
  return static_cast<AddOnOp>(id);
}

bool is_parametric(AddOnOp op) {
  return op != AddOnOp::kIdentity && op != AddOnOp::kMaxPool3x3 && op != AddOnOp::kAvgPool3x3;
}

void BackboneSpec::validate() const {
  if (stages.empty()) throw std::invalid_argument("backbone '" + id + "': needs at least one stage");
  if (in_channels < 1 || stem_channels < 1 || num_classes < 2) {
    throw std::invalid_argument("backbone '" + id + "': invalid channel or class count");
  }
  for (const auto& s : stages) {
    if (s.channels < 1 || s.blocks < 1 || s.stride < 1) {
      throw std::invalid_argument("backbone '" + id + "': invalid stage spec");
    }
  }
}

BackboneSpec deepen(const BackboneSpec& base, int extra) {
  if (extra < 0) throw std::invalid_argument("deepen: negative block count");
  BackboneSpec out = base;
  for (auto& s : out.stages) s.blocks += extra;
  out.id = base.id + "+deep" + std::to_string(extra);
  return out;
}

BackboneSpec make_backbone(const std::string& id, int num_classes, int in_channels) {
  static const std::regex deep_re(R"((.+)\+deep(\d+))");
  static const std::regex resnet_re(R"(resnet(\d+))");
  std::smatch m;
  if (std::regex_match(id, m, deep_re)) {
    return deepen(make_backbone(m[1].str(), num_classes, in_channels), std::stoi(m[2].str()));
  }
  BackboneSpec spec;
  spec.id = id;
  spec.in_channels = in_channels;
  spec.num_classes = num_classes;
  if (id == "mini-resnet") {
    spec.stem_channels = 8;
    spec.stages = {{8, 2, 1}, {16, 2, 2}};
  } else if (std::regex_match(id, m, resnet_re)) {
    const int depth = std::stoi(m[1].str());
    if (depth < 8 || (depth - 2) % 6 != 0) {
      throw std::invalid_argument("backbone '" + id + "': CIFAR ResNet depth must be 6n+2");
    }
    const int n = (depth - 2) / 6;
    spec.stem_channels = 16;
    spec.stages = {{16, n, 1}, {32, n, 2}, {64, n, 2}};
  } else {
    throw std::invalid_argument("unknown backbone id '" + id + "'");
  }
  spec.validate();
  return spec;
}

int SlotLayout::total() const {
  int n = 0;
  for (int s : slots_per_stage) n += s;
  return n;
}

SlotLayout even_layout(int total_slots, std::size_t num_stages) {
  if (num_stages == 0 || total_slots < 0 || total_slots % static_cast<int>(num_stages) != 0) {
    throw std::invalid_argument("slot layout: " + std::to_string(total_slots) + " slots cannot be split evenly over " +
                                std::to_string(num_stages) + " stages");
  }
  return SlotLayout{std::vector<int>(num_stages, total_slots / static_cast<int>(num_stages))};
}

int skip_index(int a, int b, int slots) {
  if (!(0 <= a && a < b && b < slots)) {
    throw std::invalid_argument("skip pair (" + std::to_string(a) + "," + std::to_string(b) + ") invalid for " +
                                std::to_string(slots) + " slots");
  }
  // Pairs with first element < a come first: sum_{k<a} (slots-1-k).
  return a * (2 * slots - a - 1) / 2 + (b - a - 1);
}

SlotLayout ArchitectureGenome::layout() const {
  SlotLayout l;
  for (const auto& s : stages) l.slots_per_stage.push_back(static_cast<int>(s.ops.size()));
  return l;
}

void ArchitectureGenome::validate(const SlotLayout& expected) const {
  if (stages.size() != expected.stages()) {
    throw std::invalid_argument("genome: " + std::to_string(stages.size()) + " stages, layout expects " +
                                std::to_string(expected.stages()));
  }
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const int slots = expected.slots_per_stage[s];
    if (static_cast<int>(stages[s].ops.size()) != slots) {
      throw std::invalid_argument("genome: stage " + std::to_string(s) + " has " +
                                  std::to_string(stages[s].ops.size()) + " ops, layout expects " +
                                  std::to_string(slots));
    }
    for (auto op : stages[s].ops) add_on_op_from_int(static_cast<int>(op));
    if (static_cast<int>(stages[s].skips.size()) != skip_pairs(slots)) {
      throw std::invalid_argument("genome: stage " + std::to_string(s) + " has " +
                                  std::to_string(stages[s].skips.size()) + " skip bits, expected " +
                                  std::to_string(skip_pairs(slots)));
    }
    for (auto bit : stages[s].skips) {
      if (bit > 1) throw std::invalid_argument("genome: skip bits must be 0 or 1");
    }
  }
}

bool ArchitectureGenome::is_neutral() const {
  for (const auto& s : stages) {
    for (auto op : s.ops)
      if (op != AddOnOp::kIdentity) return false;
    for (auto bit : s.skips)
      if (bit) return false;
  }
  return true;
}

bool ArchitectureGenome::operator<(const ArchitectureGenome& o) const {
  if (backbone_id != o.backbone_id) return backbone_id < o.backbone_id;
  const auto n = std::min(stages.size(), o.stages.size());
  for (std::size_t s = 0; s < n; ++s) {
    const auto& a = stages[s];
    const auto& b = o.stages[s];
    if (a.ops != b.ops) return a.ops < b.ops;
    if (a.skips != b.skips) return a.skips < b.skips;
  }
  return stages.size() < o.stages.size();
}

ArchitectureGenome neutral_genome(const SlotLayout& layout, const std::string& backbone_id) {
  ArchitectureGenome g;
  g.backbone_id = backbone_id;
  for (int slots : layout.slots_per_stage) {
    g.stages.push_back({std::vector<AddOnOp>(static_cast<std::size_t>(slots), AddOnOp::kIdentity),
                        std::vector<std::uint8_t>(static_cast<std::size_t>(skip_pairs(slots)), 0)});
  }
  return g;
}

nlohmann::json genome_to_json(const ArchitectureGenome& g) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : g.stages) {
    nlohmann::json ops = nlohmann::json::array();
    for (auto op : s.ops) ops.push_back(static_cast<int>(op));
    nlohmann::json skips = nlohmann::json::array();
    for (auto bit : s.skips) skips.push_back(static_cast<int>(bit));
    stages.push_back({{"ops", ops}, {"skips", skips}});
  }
  return {{"backbone_id", g.backbone_id}, {"stages", stages}};
}

ArchitectureGenome genome_from_json(const nlohmann::json& j) {
  ArchitectureGenome g;
  try {
    g.backbone_id = j.at("backbone_id").get<std::string>();
    for (const auto& s : j.at("stages")) {
      StageGenome sg;
      for (const auto& op : s.at("ops")) sg.ops.push_back(add_on_op_from_int(op.get<int>()));
      for (const auto& bit : s.at("skips")) {
        const int b = bit.get<int>();
        if (b != 0 && b != 1) throw std::invalid_argument("genome: skip bits must be 0 or 1");
        sg.skips.push_back(static_cast<std::uint8_t>(b));
      }
      g.stages.push_back(std::move(sg));
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("genome json: ") + e.what());
  }
  g.validate(g.layout());
  return g;
}

std::string canonical_genome(const ArchitectureGenome& g) { return genome_to_json(g).dump(); }

std::string add_on_prefix(int slot, AddOnOp op) {
  return "slot" + std::to_string(slot) + ".op" + std::to_string(static_cast<int>(op));
}

namespace {

ParamSpec he(std::string name, Shape shape, std::int64_t fan_in) {
  return {std::move(name), std::move(shape), fan_in, ParamInit::kHeUniform};
}
ParamSpec zeros(std::string name, std::int64_t n) { return {std::move(name), {n}, 1, ParamInit::kZeros}; }
ParamSpec ones(std::string name, std::int64_t n) { return {std::move(name), {n}, 1, ParamInit::kOnes}; }

void conv_bn(std::vector<ParamSpec>& out, const std::string& conv, const std::string& bn, int in, int outc, int k,
             bool bias) {
  out.push_back(he(conv + ".weight", {outc, in, k, k}, static_cast<std::int64_t>(in) * k * k));
  if (bias) out.push_back(zeros(conv + ".bias", outc));
  out.push_back(ones(bn + ".gamma", outc));
  out.push_back(zeros(bn + ".beta", outc));
}

struct Builder {
  CandidateNetwork& net;

  void layer(LayerSpec l) { net.layers.push_back(std::move(l)); }
};

int kernel_of(AddOnOp op) {
  switch (op) {
    case AddOnOp::kConv5x5:
    case AddOnOp::kSepConv5x5: return 5;
    case AddOnOp::kIdentity: return 1;
    default: return 3;
  }
}

}  // namespace

std::vector<ParamSpec> add_on_params(int slot, AddOnOp op, int channels) {
  std::vector<ParamSpec> out;
  const auto p = add_on_prefix(slot, op);
  const int k = kernel_of(op);
  const std::int64_t c = channels;
  switch (op) {
    case AddOnOp::kConv3x3:
    case AddOnOp::kConv5x5: conv_bn(out, p + ".conv", p + ".bn", channels, channels, k, true); break;
    case AddOnOp::kSepConv3x3:
    case AddOnOp::kSepConv5x5:
      out.push_back(he(p + ".dw.weight", {c, 1, k, k}, static_cast<std::int64_t>(k) * k));
      out.push_back(zeros(p + ".dw.bias", c));
      out.push_back(he(p + ".pw.weight", {c, c, 1, 1}, c));
      out.push_back(zeros(p + ".pw.bias", c));
      out.push_back(ones(p + ".bn.gamma", c));
      out.push_back(zeros(p + ".bn.beta", c));
      break;
    default: break;
  }
  return out;
}

std::vector<NormSpec> add_on_norms(int slot, AddOnOp op, int channels) {
  if (op != AddOnOp::kMaxPool3x3 && op != AddOnOp::kAvgPool3x3) return {};
  return {{add_on_prefix(slot, op) + ".bn", channels}};
}

namespace {

std::vector<ParamSpec> backbone_params(const BackboneSpec& b) {
  std::vector<ParamSpec> out;
  conv_bn(out, "stem.conv", "stem.bn", b.in_channels, b.stem_channels, 3, false);
  int in = b.stem_channels;
  for (std::size_t s = 0; s < b.stages.size(); ++s) {
    const auto& st = b.stages[s];
    for (int k = 0; k < st.blocks; ++k) {
      const auto p = "stage" + std::to_string(s) + ".block" + std::to_string(k);
      conv_bn(out, p + ".conv1", p + ".bn1", in, st.channels, 3, false);
      conv_bn(out, p + ".conv2", p + ".bn2", st.channels, st.channels, 3, false);
      in = st.channels;
    }
  }
  out.push_back({"head.fc.weight", {b.num_classes, in}, in, ParamInit::kFanInUniform});
  out.push_back(zeros("head.fc.bias", b.num_classes));
  return out;
}

void append(std::vector<ParamSpec>& dst, std::vector<ParamSpec> src) {
  for (auto& p : src) dst.push_back(std::move(p));
}

}  // namespace

CandidateNetwork decode(const ArchitectureGenome& genome, const BackboneSpec& backbone, const SlotLayout& layout) {
  backbone.validate();
  if (layout.stages() != backbone.stages.size()) {
    throw std::invalid_argument("decode: layout has " + std::to_string(layout.stages()) + " stages, backbone '" +
                                backbone.id + "' has " + std::to_string(backbone.stages.size()));
  }
  genome.validate(layout);
  CandidateNetwork net;
  net.backbone = backbone;
  net.genome = genome;
  net.layout = layout;
  Builder b{net};
  std::vector<ParamSpec> params = backbone_params(backbone);

  b.layer({"stem.conv", LayerKind::kConv, backbone.in_channels, backbone.stem_channels, 3, 1, -1, -1});
  b.layer({"stem.bn", LayerKind::kBatchNorm, backbone.stem_channels, backbone.stem_channels, 1, 1, -1, -1});
  int in = backbone.stem_channels;
  int slot = 0;
  for (std::size_t s = 0; s < backbone.stages.size(); ++s) {
    const auto& st = backbone.stages[s];
    const int si = static_cast<int>(s);
    for (int k = 0; k < st.blocks; ++k) {
      const auto p = "stage" + std::to_string(s) + ".block" + std::to_string(k);
      const int stride = k == 0 ? st.stride : 1;
      b.layer({p + ".conv1", LayerKind::kConv, in, st.channels, 3, stride, si, -1});
      b.layer({p + ".bn1", LayerKind::kBatchNorm, st.channels, st.channels, 1, 1, si, -1});
      b.layer({p + ".conv2", LayerKind::kConv, st.channels, st.channels, 3, 1, si, -1});
      b.layer({p + ".bn2", LayerKind::kBatchNorm, st.channels, st.channels, 1, 1, si, -1});
      in = st.channels;
    }
    const auto& sg = genome.stages[s];
    for (std::size_t local = 0; local < sg.ops.size(); ++local, ++slot) {
      const AddOnOp op = sg.ops[local];
      const auto p = add_on_prefix(slot, op);
      const int c = st.channels;
      const int k = kernel_of(op);
      switch (op) {
        case AddOnOp::kIdentity: b.layer({p, LayerKind::kIdentity, c, c, 1, 1, si, slot, op}); break;
        case AddOnOp::kMaxPool3x3:
        case AddOnOp::kAvgPool3x3:
          b.layer({p + ".pool", op == AddOnOp::kMaxPool3x3 ? LayerKind::kMaxPool : LayerKind::kAvgPool, c, c, 3, 1, si,
                   slot, op});
          b.layer({p + ".bn", LayerKind::kBatchNorm, c, c, 1, 1, si, slot, op});
          break;
        case AddOnOp::kConv3x3:
        case AddOnOp::kConv5x5:
          b.layer({p + ".conv", LayerKind::kConv, c, c, k, 1, si, slot, op});
          b.layer({p + ".bn", LayerKind::kBatchNorm, c, c, 1, 1, si, slot, op});
          break;
        case AddOnOp::kSepConv3x3:
        case AddOnOp::kSepConv5x5:
          b.layer({p + ".dw", LayerKind::kDepthwiseConv, c, c, k, 1, si, slot, op});
          b.layer({p + ".pw", LayerKind::kConv, c, c, 1, 1, si, slot, op});
          b.layer({p + ".bn", LayerKind::kBatchNorm, c, c, 1, 1, si, slot, op});
          break;
      }
      append(params, add_on_params(slot, op, c));
      for (auto& n : add_on_norms(slot, op, c)) net.norms.push_back(std::move(n));
    }
    const int slots = static_cast<int>(sg.ops.size());
    for (int a = 0; a < slots; ++a)
      for (int bb = a + 1; bb < slots; ++bb)
        if (sg.skips[static_cast<std::size_t>(skip_index(a, bb, slots))]) net.skips.push_back({si, a, bb});
  }
  b.layer({"head.pool", LayerKind::kGlobalPool, in, in, 1, 1, -1, -1});
  b.layer({"head.fc", LayerKind::kDense, in, backbone.num_classes, 1, 1, -1, -1});
  net.params = std::move(params);
  net.param_count = 0;
  for (const auto& p : net.params) net.param_count += numel(p.shape);
  return net;
}

ArchitectureGenome encode(const CandidateNetwork& network) {
  ArchitectureGenome g;
  g.backbone_id = network.backbone.id;
  g.stages.resize(network.layout.stages());
  int last_slot = -1;
  for (const auto& l : network.layers) {
    if (l.slot < 0 || l.slot == last_slot) continue;
    last_slot = l.slot;
    g.stages.at(static_cast<std::size_t>(l.stage)).ops.push_back(l.op);
  }
  for (auto& s : g.stages) {
    const int slots = static_cast<int>(s.ops.size());
    s.skips.assign(static_cast<std::size_t>(skip_pairs(slots)), 0);
  }
  for (const auto& j : network.skips) {
    auto& s = g.stages.at(static_cast<std::size_t>(j.stage));
    s.skips.at(static_cast<std::size_t>(skip_index(j.from_slot, j.to_slot, static_cast<int>(s.ops.size())))) = 1;
  }
  return g;
}

std::int64_t param_count(const CandidateNetwork& network) {
  std::int64_t n = 0;
  for (const auto& p : network.params) n += numel(p.shape);
  return n;
}

std::int64_t param_count(const BackboneSpec& backbone) {
  std::int64_t n = 0;
  for (const auto& p : backbone_params(backbone)) n += numel(p.shape);
  return n;
}

std::vector<ParamSpec> pool_param_specs(const BackboneSpec& backbone, const SlotLayout& layout) {
  if (layout.stages() != backbone.stages.size()) {
    throw std::invalid_argument("pool: layout/backbone stage count mismatch");
  }
  std::vector<ParamSpec> out = backbone_params(backbone);
  int slot = 0;
  for (std::size_t s = 0; s < layout.stages(); ++s) {
    for (int local = 0; local < layout.slots_per_stage[s]; ++local, ++slot) {
      for (int op = 0; op < kNumAddOnOps; ++op) {
        append(out, add_on_params(slot, static_cast<AddOnOp>(op), backbone.stages[s].channels));
      }
    }
  }
  return out;
}

std::vector<NormSpec> pool_norm_specs(const BackboneSpec& backbone, const SlotLayout& layout) {
  if (layout.stages() != backbone.stages.size()) {
    throw std::invalid_argument("pool: layout/backbone stage count mismatch");
  }
  std::vector<NormSpec> out;
  int slot = 0;
  for (std::size_t s = 0; s < layout.stages(); ++s) {
    for (int local = 0; local < layout.slots_per_stage[s]; ++local, ++slot) {
      for (int op = 0; op < kNumAddOnOps; ++op) {
        for (auto& n : add_on_norms(slot, static_cast<AddOnOp>(op), backbone.stages[s].channels)) {
          out.push_back(std::move(n));
        }
      }
    }
  }
  return out;
}

std::uint64_t search_space_size(const SlotLayout& layout) {
  constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
  std::uint64_t total = 1;
  auto times = [&](std::uint64_t f) {
    if (total > kMax / f) throw std::overflow_error("search_space_size: exceeds 64-bit range");
    total *= f;
  };
  for (int slots : layout.slots_per_stage) {
    if (slots < 0) throw std::invalid_argument("search_space_size: negative slot count");
    for (int i = 0; i < skip_pairs(slots); ++i) times(2);
    for (int i = 0; i < slots; ++i) times(kNumAddOnOps);
  }
  return total;
}

void for_each_genome(const SlotLayout& layout, const std::string& backbone_id,
                     const std::function<void(const ArchitectureGenome&)>& visit) {
  const auto size = search_space_size(layout);
  if (size > kEnumerationCap) {
    throw std::invalid_argument("enumerate_genomes: search space of " + std::to_string(size) +
                                " genomes exceeds the cap of " + std::to_string(kEnumerationCap));
  }
  // Mixed-radix odometer over the flat decision list.
  std::vector<int> radix;
  for (int slots : layout.slots_per_stage) {
    radix.insert(radix.end(), static_cast<std::size_t>(slots), kNumAddOnOps);
    radix.insert(radix.end(), static_cast<std::size_t>(skip_pairs(slots)), 2);
  }
  std::vector<int> digit(radix.size(), 0);
  ArchitectureGenome g = neutral_genome(layout, backbone_id);
  while (true) {
    std::size_t d = 0;
    for (std::size_t s = 0; s < g.stages.size(); ++s) {
      for (auto& op : g.stages[s].ops) op = static_cast<AddOnOp>(digit[d++]);
      for (auto& bit : g.stages[s].skips) bit = static_cast<std::uint8_t>(digit[d++]);
    }
    visit(g);
    std::size_t pos = digit.size();
    while (pos > 0) {
      --pos;
      if (++digit[pos] < radix[pos]) break;
      digit[pos] = 0;
      if (pos == 0) return;
    }
    if (digit.empty()) return;
  }
}

std::vector<ArchitectureGenome> enumerate_genomes(const SlotLayout& layout, const std::string& backbone_id) {
  std::vector<ArchitectureGenome> out;
  for_each_genome(layout, backbone_id, [&](const ArchitectureGenome& g) { out.push_back(g); });
  return out;
}

}  // namespace kdas
