#include "kdas/network.hpp"

#include <cmath>
#include <stdexcept>

namespace kdas {

namespace {

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string strip(const std::string& s, std::string_view suffix) { return s.substr(0, s.size() - suffix.size()); }

}  // namespace

void ParamStore::add(const ParamSpec& spec, Rng& rng) {
  if (contains(spec.name)) return;
  const auto n = numel(spec.shape);
  Array v(n);
  switch (spec.init) {
    case ParamInit::kZeros: v.setZero(); break;
    case ParamInit::kOnes: v.setOnes(); break;
    case ParamInit::kHeUniform: {
      const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in));
      for (Eigen::Index i = 0; i < n; ++i) v[i] = uniform(rng, -bound, bound);
      break;
    }
    case ParamInit::kFanInUniform: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      for (Eigen::Index i = 0; i < n; ++i) v[i] = uniform(rng, -bound, bound);
      break;
    }
  }
  insert(spec.name, Tensor(spec.shape, std::move(v), true));
}

void ParamStore::insert(const std::string& name, Tensor value) {
  value.set_requires_grad(true);
  if (ends_with(name, ".gamma")) {
    norms_.try_emplace(strip(name, ".gamma"), std::make_shared<BatchNormState>(BatchNormState::fresh(value.size())));
  }
  params_[name] = std::move(value);
}

void ParamStore::add_norm(const NormSpec& spec) {
  norms_.try_emplace(spec.name, std::make_shared<BatchNormState>(BatchNormState::fresh(spec.channels)));
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("missing parameter entry '" + name + "'");
  return it->second;
}

BatchNormState& ParamStore::norm(const std::string& prefix) {
  auto it = norms_.find(prefix);
  if (it == norms_.end()) throw std::invalid_argument("missing batch-norm state '" + prefix + "'");
  return *it->second;
}

const BatchNormState& ParamStore::norm(const std::string& prefix) const {
  return const_cast<ParamStore*>(this)->norm(prefix);
}

NamedTensors ParamStore::to_named() const {
  NamedTensors out;
  for (const auto& [name, t] : params_) out.emplace_back(name, t);
  for (const auto& [prefix, st] : norms_) {
    const auto c = st->running_mean.size();
    out.emplace_back(prefix + ".running_mean", Tensor({c}, st->running_mean));
    out.emplace_back(prefix + ".running_var", Tensor({c}, st->running_var));
  }
  return out;
}

ParamStore ParamStore::from_named(const NamedTensors& entries) {
  ParamStore store;
  std::map<std::string, Array> means, vars;
  for (const auto& [name, t] : entries) {
    if (ends_with(name, ".running_mean")) {
      means[strip(name, ".running_mean")] = t.values();
    } else if (ends_with(name, ".running_var")) {
      vars[strip(name, ".running_var")] = t.values();
    } else {
      store.insert(name, t.clone(true));
    }
  }
  for (const auto& [prefix, m] : means) {
    if (!store.has_norm(prefix)) store.add_norm({prefix, m.size()});
  }
  for (auto& [prefix, state] : store.norms_) {
    BatchNormState& st = *state;
    auto m = means.find(prefix);
    auto v = vars.find(prefix);
    if (m == means.end() || v == vars.end()) {
      throw std::invalid_argument("checkpoint: missing running statistics for '" + prefix + "'");
    }
    if (m->second.size() != st.running_mean.size() || v->second.size() != st.running_var.size()) {
      throw std::invalid_argument("checkpoint: running statistics size mismatch for '" + prefix + "'");
    }
    st.running_mean = m->second;
    st.running_var = v->second;
  }
  return store;
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : params_) out.params_[name] = t.clone(true);
  for (const auto& [prefix, st] : norms_) out.norms_[prefix] = std::make_shared<BatchNormState>(*st);
  return out;
}

ParamStore ParamStore::view(const std::vector<std::string>& names, const std::vector<std::string>& norms) const {
  ParamStore out;
  for (const auto& prefix : norms) {
    auto it = norms_.find(prefix);
    if (it == norms_.end()) throw std::invalid_argument("missing batch-norm state '" + prefix + "'");
    out.norms_[prefix] = it->second;
  }
  for (const auto& name : names) {
    out.params_[name] = get(name);
    if (ends_with(name, ".gamma")) {
      const auto prefix = strip(name, ".gamma");
      auto it = norms_.find(prefix);
      if (it == norms_.end()) throw std::invalid_argument("missing batch-norm state '" + prefix + "'");
      out.norms_[prefix] = it->second;
    }
  }
  return out;
}

ParamStore init_params(const std::vector<ParamSpec>& specs, Rng& rng) {
  ParamStore store;
  for (const auto& s : specs) store.add(s, rng);
  return store;
}

ParamStore init_params(const CandidateNetwork& net, Rng& rng) {
  ParamStore store = init_params(net.params, rng);
  for (const auto& n : net.norms) store.add_norm(n);
  return store;
}

std::vector<Tensor> collect_params(const CandidateNetwork& net, const ParamStore& store) {
  std::vector<Tensor> out;
  out.reserve(net.params.size());
  for (const auto& p : net.params) {
    const Tensor& t = store.get(p.name);
    if (t.shape() != p.shape) {
      throw std::invalid_argument("parameter '" + p.name + "' has shape " + shape_str(t.shape()) + ", network expects " +
                                  shape_str(p.shape));
    }
    out.push_back(t);
  }
  return out;
}

namespace {

class Runner {
 public:
  Runner(ParamStore& store, NormMode mode) : store_(store), mode_(mode) {}

  Tensor conv(const Tensor& x, const std::string& name, int stride, int padding, bool bias, int groups = 1) {
    const Tensor& w = store_.get(name + ".weight");
    const Tensor b = bias ? store_.get(name + ".bias") : Tensor();
    return conv2d(x, w, b, {stride, padding, groups});
  }

  Tensor bn(const Tensor& x, const std::string& name) {
    return batch_norm(x, store_.get(name + ".gamma"), store_.get(name + ".beta"), store_.norm(name), {mode_});
  }

  Tensor plain_bn(const Tensor& x, const std::string& name) {
    const auto c = x.dim(1);
    return batch_norm(x, Tensor({c}, Array::Ones(c)), Tensor({c}, Array::Zero(c)), store_.norm(name), {mode_});
  }

  Tensor add_on(const Tensor& x, int slot, AddOnOp op) {
    const auto p = add_on_prefix(slot, op);
    switch (op) {
      case AddOnOp::kIdentity: return x;
      case AddOnOp::kMaxPool3x3: return plain_bn(max_pool2d(x, {3, 1, 1}), p + ".bn");
      case AddOnOp::kAvgPool3x3: return plain_bn(avg_pool2d(x, {3, 1, 1}), p + ".bn");
      case AddOnOp::kConv3x3: return relu(bn(conv(x, p + ".conv", 1, 1, true), p + ".bn"));
      case AddOnOp::kConv5x5: return relu(bn(conv(x, p + ".conv", 1, 2, true), p + ".bn"));
      case AddOnOp::kSepConv3x3:
      case AddOnOp::kSepConv5x5: {
        const int pad = op == AddOnOp::kSepConv3x3 ? 1 : 2;
        const auto channels = static_cast<int>(x.dim(1));
        Tensor h = conv(x, p + ".dw", 1, pad, true, channels);
        return relu(bn(conv(h, p + ".pw", 1, 0, true), p + ".bn"));
      }
    }
    throw std::invalid_argument("forward: bad add-on op");
  }

 private:
  ParamStore& store_;
  NormMode mode_;
};

}  // namespace

Tensor forward(const CandidateNetwork& net, ParamStore& store, const Tensor& images, NormMode mode) {
  const auto& bb = net.backbone;
  if (images.rank() != 4 || images.dim(1) != bb.in_channels) {
    throw std::invalid_argument("forward: images " + shape_str(images.shape()) + " do not match backbone '" + bb.id +
                                "' with " + std::to_string(bb.in_channels) + " input channels");
  }
  Runner run(store, mode);
  Tensor x = relu(run.bn(run.conv(images, "stem.conv", 1, 1, false), "stem.bn"));
  int in = bb.stem_channels;
  int slot = 0;
  for (std::size_t s = 0; s < bb.stages.size(); ++s) {
    const auto& st = bb.stages[s];
    for (int k = 0; k < st.blocks; ++k) {
      const auto p = "stage" + std::to_string(s) + ".block" + std::to_string(k);
      const int stride = k == 0 ? st.stride : 1;
      Tensor h = relu(run.bn(run.conv(x, p + ".conv1", stride, 1, false), p + ".bn1"));
      h = run.bn(run.conv(h, p + ".conv2", 1, 1, false), p + ".bn2");
      Tensor shortcut = (stride != 1 || in != st.channels) ? shortcut_pad(x, stride, st.channels) : x;
      x = relu(add(h, shortcut));
      in = st.channels;
    }
    const auto& sg = net.genome.stages[s];
    std::vector<Tensor> outputs;
    for (std::size_t local = 0; local < sg.ops.size(); ++local, ++slot) {
      Tensor y = run.add_on(x, slot, sg.ops[local]);
      for (const auto& j : net.skips) {
        if (j.stage == static_cast<int>(s) && j.to_slot == static_cast<int>(local)) {
          y = add(y, outputs[static_cast<std::size_t>(j.from_slot)]);
        }
      }
      outputs.push_back(y);
      x = y;
    }
  }
  return linear(global_avg_pool(x), store.get("head.fc.weight"), store.get("head.fc.bias"));
}

}  // namespace kdas
