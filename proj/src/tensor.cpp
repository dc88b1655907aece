#include "kdas/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace kdas {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Array values, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension in " + shape_str(shape));
  }
  if (numel(shape) != values.size()) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " holds " +
                                std::to_string(numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), Array::Constant(n, value), requires_grad);
}

Tensor Tensor::of(Shape shape, std::initializer_list<double> values, bool requires_grad) {
  Array a(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double v : values) a[i++] = v;
  return Tensor(std::move(shape), std::move(a), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, Array::Constant(1, value), requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl_->values[0];
}

Tensor Tensor::clone(bool requires_grad) const { return Tensor(shape(), values(), requires_grad); }

namespace {
thread_local Tape* g_active_tape = nullptr;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }
Tape* active_tape() { return g_active_tape; }

Tensor GradientMap::of(const Tensor& t) const {
  auto it = grads_.find(t.id());
  if (it == grads_.end()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), it->second);
}

Array* GradientMap::find(const TensorImpl* id) {
  auto it = grads_.find(id);
  return it == grads_.end() ? nullptr : &it->second;
}

Array& GradientMap::slot(const Tensor& t) {
  auto [it, inserted] = grads_.try_emplace(t.id());
  if (inserted) it->second = Array::Zero(t.size());
  return it->second;
}

GradientMap backward(const Tape& tape, const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  GradientMap grads;
  grads.slot(loss)[0] = 1.0;
  const auto& recs = tape.records();
  std::vector<Array*> slots;
  for (auto it = recs.rbegin(); it != recs.rend(); ++it) {
    Array* g_out = grads.find(it->output.id());
    if (g_out == nullptr) continue;  // unreached from loss
    slots.assign(it->inputs.size(), nullptr);
    for (std::size_t k = 0; k < it->inputs.size(); ++k) {
      if (it->inputs[k].requires_grad()) slots[k] = &grads.slot(it->inputs[k]);
    }
    // unordered_map keeps element references stable across rehashing.
    it->adjoint(*g_out, std::span<Array*>(slots));
  }
  return grads;
}

namespace detail {

Tensor record_op(std::string_view op, Shape shape, Array values, std::vector<Tensor> inputs, Adjoint adjoint) {
  Tape* tape = active_tape();
  bool track = false;
  if (tape != nullptr) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  Tensor out(std::move(shape), std::move(values), track);
  if (track) tape->record(TapeRecord{std::string(op), std::move(inputs), out, std::move(adjoint)});
  return out;
}

}  // namespace detail

}  // namespace kdas
