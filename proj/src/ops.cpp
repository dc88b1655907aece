#include "kdas/ops.hpp"

#include <cmath>
#include <stdexcept>

namespace kdas {

namespace {

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_error(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(std::string_view op, const Tensor& x, std::size_t rank, const char* what) {
  if (x.rank() != rank) {
    shape_error(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
  }
}

Tensor unary(std::string_view op, const Tensor& x, Array out, std::function<Array(const Array& g)> local) {
  return detail::record_op(op, x.shape(), std::move(out), {x},
                           [local = std::move(local)](const Array& g, std::span<Array*> gi) {
                             if (gi[0]) *gi[0] += local(g);
                           });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  return detail::record_op("add", a.shape(), a.values() + b.values(), {a, b},
                           [](const Array& g, std::span<Array*> gi) {
                             if (gi[0]) *gi[0] += g;
                             if (gi[1]) *gi[1] += g;
                           });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  return detail::record_op("sub", a.shape(), a.values() - b.values(), {a, b},
                           [](const Array& g, std::span<Array*> gi) {
                             if (gi[0]) *gi[0] += g;
                             if (gi[1]) *gi[1] -= g;
                           });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Array av = a.values(), bv = b.values();
  return detail::record_op("mul", a.shape(), av * bv, {a, b},
                           [av, bv](const Array& g, std::span<Array*> gi) {
                             if (gi[0]) *gi[0] += g * bv;
                             if (gi[1]) *gi[1] += g * av;
                           });
}

Tensor scale(const Tensor& x, double factor) {
  return unary("scale", x, x.values() * factor, [factor](const Array& g) -> Array { return g * factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary("add_scalar", x, x.values() + offset, [](const Array& g) -> Array { return g; });
}

Tensor identity(const Tensor& x) {
  return unary("identity", x, x.values(), [](const Array& g) -> Array { return g; });
}

Tensor sum(const Tensor& x) {
  return detail::record_op("sum", {1}, Array::Constant(1, x.values().sum()), {x},
                           [](const Array& g, std::span<Array*> gi) {
                             if (gi[0]) *gi[0] += g[0];
                           });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.size());
  return detail::record_op("mean", {1}, Array::Constant(1, x.values().sum() / n), {x},
                           [n](const Array& g, std::span<Array*> gi) {
                             if (gi[0]) *gi[0] += g[0] / n;
                           });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    shape_error("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return detail::record_op("reshape", std::move(shape), x.values(), {x},
                           [](const Array& g, std::span<Array*> gi) {
                             if (gi[0]) *gi[0] += g;
                           });
}

Tensor relu(const Tensor& x) {
  Array mask = (x.values() > 0.0).cast<double>();
  return unary("relu", x, x.values() * mask, [mask](const Array& g) -> Array { return g * mask; });
}

Tensor sigmoid(const Tensor& x) {
  Array y = 1.0 / (1.0 + (-x.values()).exp());
  return unary("sigmoid", x, y, [y](const Array& g) -> Array { return g * y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  Array y = x.values().tanh();
  return unary("tanh", x, y, [y](const Array& g) -> Array { return g * (1.0 - y.square()); });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank("linear", x, 2, "input");
  require_rank("linear", w, 2, "weight");
  const auto batch = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in) {
    shape_error("linear", "input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  if (b.defined() && b.shape() != Shape{out}) {
    shape_error("linear", "bias " + shape_str(b.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  ConstMapMatrixRM xm(x.values().data(), batch, in);
  ConstMapMatrixRM wm(w.values().data(), out, in);
  Array y(batch * out);
  MapMatrixRM ym(y.data(), batch, out);
  ym.noalias() = xm * wm.transpose();
  if (b.defined()) ym.rowwise() += b.values().matrix().transpose();

  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  Array xv = x.values(), wv = w.values();
  return detail::record_op(
      "linear", {batch, out}, std::move(y), std::move(inputs),
      [xv, wv, batch, in, out](const Array& g, std::span<Array*> gi) {
        ConstMapMatrixRM gm(g.data(), batch, out);
        if (gi[0]) {
          MapMatrixRM(gi[0]->data(), batch, in).noalias() += gm * ConstMapMatrixRM(wv.data(), out, in);
        }
        if (gi[1]) {
          MapMatrixRM(gi[1]->data(), out, in).noalias() += gm.transpose() * ConstMapMatrixRM(xv.data(), batch, in);
        }
        if (gi.size() > 2 && gi[2]) *gi[2] += gm.colwise().sum().transpose().array();
      });
}

Tensor row(const Tensor& table, std::int64_t index) {
  require_rank("row", table, 2, "table");
  if (index < 0 || index >= table.dim(0)) {
    shape_error("row", "index " + std::to_string(index) + " out of range for " + shape_str(table.shape()));
  }
  const auto d = table.dim(1);
  return detail::record_op("row", {1, d}, table.values().segment(index * d, d), {table},
                           [index, d](const Array& g, std::span<Array*> gi) {
                             if (gi[0]) gi[0]->segment(index * d, d) += g;
                           });
}

Tensor pick(const Tensor& x, std::int64_t index) {
  if (index < 0 || index >= x.size()) {
    shape_error("pick", "index " + std::to_string(index) + " out of range for " + shape_str(x.shape()));
  }
  return detail::record_op("pick", {1}, Array::Constant(1, x[index]), {x},
                           [index](const Array& g, std::span<Array*> gi) {
                             if (gi[0]) (*gi[0])[index] += g[0];
                           });
}

namespace {

// Row-wise log-softmax of a [rows, cols] row-major block.
Array log_softmax_rows(const Array& v, std::int64_t rows, std::int64_t cols) {
  Array out(v.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    auto in = v.segment(r * cols, cols);
    const double m = in.maxCoeff();
    const double lse = m + std::log((in - m).exp().sum());
    out.segment(r * cols, cols) = in - lse;
  }
  return out;
}

}  // namespace

Tensor log_softmax(const Tensor& x) {
  require_rank("log_softmax", x, 2, "input");
  const auto rows = x.dim(0), cols = x.dim(1);
  Array y = log_softmax_rows(x.values(), rows, cols);
  Array p = y.exp();
  return detail::record_op("log_softmax", x.shape(), std::move(y), {x},
                           [p, rows, cols](const Array& g, std::span<Array*> gi) {
                             if (!gi[0]) return;
                             for (std::int64_t r = 0; r < rows; ++r) {
                               auto gr = g.segment(r * cols, cols);
                               gi[0]->segment(r * cols, cols) += gr - p.segment(r * cols, cols) * gr.sum();
                             }
                           });
}

Tensor softmax(const Tensor& x) {
  require_rank("softmax", x, 2, "input");
  const auto rows = x.dim(0), cols = x.dim(1);
  Array p = log_softmax_rows(x.values(), rows, cols).exp();
  return detail::record_op("softmax", x.shape(), p, {x},
                           [p, rows, cols](const Array& g, std::span<Array*> gi) {
                             if (!gi[0]) return;
                             for (std::int64_t r = 0; r < rows; ++r) {
                               auto pr = p.segment(r * cols, cols);
                               auto gr = g.segment(r * cols, cols);
                               gi[0]->segment(r * cols, cols) += pr * (gr - (gr * pr).sum());
                             }
                           });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4, "input");
  const auto b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Array y(b * c);
  for (std::int64_t i = 0; i < b * c; ++i) y[i] = x.values().segment(i * hw, hw).mean();
  return detail::record_op("global_avg_pool", {b, c}, std::move(y), {x},
                           [b, c, hw](const Array& g, std::span<Array*> gi) {
                             if (!gi[0]) return;
                             for (std::int64_t i = 0; i < b * c; ++i) {
                               gi[0]->segment(i * hw, hw) += g[i] / static_cast<double>(hw);
                             }
                           });
}

Tensor shortcut_pad(const Tensor& x, int stride, std::int64_t out_channels) {
  require_rank("shortcut_pad", x, 4, "input");
  const auto b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (stride < 1 || out_channels < c) {
    shape_error("shortcut_pad", "cannot map " + shape_str(x.shape()) + " to " + std::to_string(out_channels) +
                                    " channels at stride " + std::to_string(stride));
  }
  const auto ho = (h + stride - 1) / stride, wo = (w + stride - 1) / stride;
  const auto offset = (out_channels - c) / 2;
  // Flat source index for every output element, -1 for padded channels.
  std::vector<std::int64_t> src(static_cast<std::size_t>(b * out_channels * ho * wo), -1);
  Array y = Array::Zero(b * out_channels * ho * wo);
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < ho; ++i)
        for (std::int64_t j = 0; j < wo; ++j) {
          const auto o = ((n * out_channels + ch + offset) * ho + i) * wo + j;
          const auto s = ((n * c + ch) * h + i * stride) * w + j * stride;
          src[o] = s;
          y[o] = x[s];
        }
  return detail::record_op("shortcut_pad", {b, out_channels, ho, wo}, std::move(y), {x},
                           [src = std::move(src)](const Array& g, std::span<Array*> gi) {
                             if (!gi[0]) return;
                             for (std::size_t o = 0; o < src.size(); ++o) {
                               if (src[o] >= 0) (*gi[0])[src[o]] += g[static_cast<Eigen::Index>(o)];
                             }
                           });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  BatchNormOptions opt) {
  if (x.rank() != 2 && x.rank() != 4) shape_error("batch_norm", "input must be [B,C] or [B,C,H,W], got " + shape_str(x.shape()));
  const auto b = x.dim(0), c = x.dim(1);
  const auto inner = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    shape_error("batch_norm", "affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                                  " do not match input " + shape_str(x.shape()));
  }
  if (state.running_mean.size() != c || state.running_var.size() != c) {
    shape_error("batch_norm", "running statistics sized " + std::to_string(state.running_mean.size()) +
                                  " for input " + shape_str(x.shape()));
  }
  const double count = static_cast<double>(b * inner);
  const auto& xv = x.values();
  Array mean_c(c), invstd(c);
  const bool batch_stats = opt.mode != NormMode::kRunning;
  if (batch_stats && count < 2) shape_error("batch_norm", "batch statistics need more than one value per channel");
  for (std::int64_t ch = 0; ch < c; ++ch) {
    if (batch_stats) {
      double s = 0.0;
      for (std::int64_t n = 0; n < b; ++n) s += xv.segment((n * c + ch) * inner, inner).sum();
      const double m = s / count;
      double v = 0.0;
      for (std::int64_t n = 0; n < b; ++n) v += (xv.segment((n * c + ch) * inner, inner) - m).square().sum();
      v /= count;
      mean_c[ch] = m;
      invstd[ch] = 1.0 / std::sqrt(v + opt.eps);
      if (opt.mode == NormMode::kTrain) {
        state.running_mean[ch] = (1.0 - opt.momentum) * state.running_mean[ch] + opt.momentum * m;
        state.running_var[ch] = (1.0 - opt.momentum) * state.running_var[ch] + opt.momentum * v * count / (count - 1.0);
      }
    } else {
      mean_c[ch] = state.running_mean[ch];
      invstd[ch] = 1.0 / std::sqrt(state.running_var[ch] + opt.eps);
    }
  }
  Array xhat(xv.size()), y(xv.size());
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const auto off = (n * c + ch) * inner;
      xhat.segment(off, inner) = (xv.segment(off, inner) - mean_c[ch]) * invstd[ch];
      y.segment(off, inner) = xhat.segment(off, inner) * gamma[ch] + beta[ch];
    }
  Array gv = gamma.values();
  return detail::record_op(
      "batch_norm", x.shape(), std::move(y), {x, gamma, beta},
      [xhat = std::move(xhat), invstd, gv, b, c, inner, count, batch_stats](const Array& g, std::span<Array*> gi) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::int64_t n = 0; n < b; ++n) {
            const auto off = (n * c + ch) * inner;
            sum_g += g.segment(off, inner).sum();
            sum_gx += (g.segment(off, inner) * xhat.segment(off, inner)).sum();
          }
          if (gi[1]) (*gi[1])[ch] += sum_gx;
          if (gi[2]) (*gi[2])[ch] += sum_g;
          if (!gi[0]) continue;
          const double k = gv[ch] * invstd[ch];
          for (std::int64_t n = 0; n < b; ++n) {
            const auto off = (n * c + ch) * inner;
            if (batch_stats) {
              gi[0]->segment(off, inner) +=
                  k * (g.segment(off, inner) - sum_g / count - xhat.segment(off, inner) * (sum_gx / count));
            } else {
              gi[0]->segment(off, inner) += k * g.segment(off, inner);
            }
          }
        }
      });
}

}  // namespace kdas
