// Dense f64 tensors with a reverse-mode tape.
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kdas {

using Shape = std::vector<std::int64_t>;
using Array = Eigen::ArrayXd;
using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrixRM = Eigen::Map<MatrixRM>;
using ConstMapMatrixRM = Eigen::Map<const MatrixRM>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  Array values;
  bool requires_grad = false;
};

/// Shared handle to an immutable dense array. Copies alias the same storage;
/// parameters are the only tensors mutated in place (by the optimizer).
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Array values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor of(Shape shape, std::initializer_list<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::int64_t size() const { return static_cast<std::int64_t>(impl_->values.size()); }

  const Array& values() const { return impl_->values; }
  // Only the single writer of a parameter (the optimizer, checkpoint loader) may call this.
  Array& mutable_values() { return impl_->values; }
  double operator[](std::int64_t i) const { return impl_->values[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  const TensorImpl* id() const { return impl_.get(); }

  /// Deep copy with fresh identity.
  Tensor clone(bool requires_grad = false) const;
  /// Same values, new identity, never tracked.
  Tensor detach() const { return clone(false); }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

class GradientMap;

/// Adjoint of one recorded op. `grad_inputs[k]` is null when input k does not
/// need a gradient; otherwise the adjoint accumulates into it.
using Adjoint = std::function<void(const Array& grad_output, std::span<Array*> grad_inputs)>;

struct TapeRecord {
  std::string op;
  std::vector<Tensor> inputs;
  Tensor output;
  Adjoint adjoint;
};

/// Ordered log of executed ops. Records are appended in execution order, so the
/// inputs of every record are produced by earlier records or are leaves.
class Tape {
 public:
  void record(TapeRecord rec) { records_.push_back(std::move(rec)); }
  const std::vector<TapeRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

 private:
  std::vector<TapeRecord> records_;
};

/// Makes `tape` the recording target of the current thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

class GradientMap {
 public:
  /// Gradient of `t`; zeros of matching shape when `t` was not reached.
  Tensor of(const Tensor& t) const;
  bool reached(const Tensor& t) const { return grads_.count(t.id()) != 0; }
  Array* find(const TensorImpl* id);
  Array& slot(const Tensor& t);

 private:
  std::unordered_map<const TensorImpl*, Array> grads_;
};

/// Reverse sweep over `tape` seeded with d(loss)/d(loss) = 1.
GradientMap backward(const Tape& tape, const Tensor& loss);

namespace detail {

/// Builds an op result and records it on the active tape when any input
/// requires a gradient. Every differentiable op goes through here.
Tensor record_op(std::string_view op, Shape shape, Array values, std::vector<Tensor> inputs,
                 Adjoint adjoint);

}  // namespace detail

}  // namespace kdas
