// Convolution and pooling over NCHW tensors. Dense convolutions run as
// im2col + GEMM per batch item; depthwise convolutions and pooling are direct loops.
#include <algorithm>
#include <limits>
#include <stdexcept>

#include "kdas/ops.hpp"

namespace kdas {

namespace {

struct Geometry {
  std::int64_t batch, channels, height, width;
  std::int64_t kernel, stride, padding;
  std::int64_t out_h, out_w;
};

Geometry geometry(std::string_view op, const Tensor& x, std::int64_t kernel, std::int64_t stride,
                  std::int64_t padding) {
  if (x.rank() != 4) {
    throw std::invalid_argument(std::string(op) + ": input must be [B,C,H,W], got " + shape_str(x.shape()));
  }
  if (stride < 1 || padding < 0 || kernel < 1) {
    throw std::invalid_argument(std::string(op) + ": invalid kernel/stride/padding");
  }
  Geometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel, stride, padding, 0, 0};
  g.out_h = (g.height + 2 * padding - kernel) / stride + 1;
  g.out_w = (g.width + 2 * padding - kernel) / stride + 1;
  if (g.out_h < 1 || g.out_w < 1) {
    throw std::invalid_argument(std::string(op) + ": kernel " + std::to_string(kernel) + " too large for input " +
                                shape_str(x.shape()));
  }
  return g;
}

// Column range [lo, hi) of output positions whose input tap ox*stride + k - pad is inside [0, size).
void valid_range(std::int64_t k, std::int64_t size, std::int64_t out, const Geometry& g, std::int64_t& lo,
                 std::int64_t& hi) {
  lo = 0;
  while (lo < out && lo * g.stride + k - g.padding < 0) ++lo;
  hi = out;
  while (hi > lo && (hi - 1) * g.stride + k - g.padding >= size) --hi;
}

// Images per im2col chunk, sized so the column buffer stays cache resident.
std::int64_t chunk_size(const Geometry& g) {
  const auto per_image = g.channels * g.kernel * g.kernel * g.out_h * g.out_w;
  return std::clamp<std::int64_t>(32768 / std::max<std::int64_t>(per_image, 1), 1, g.batch);
}

// cols [C*K*K, nb*OH*OW] for images n0..n0+nb-1: column n*OH*OW + oy*OW + ox
// holds the patch of output (n0 + n, oy, ox).
void im2col(const double* x, const Geometry& g, std::int64_t n0, std::int64_t nb, MatrixRM& cols) {
  const auto plane = g.out_h * g.out_w;
  cols.setZero(g.channels * g.kernel * g.kernel, nb * plane);
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t ki = 0; ki < g.kernel; ++ki)
      for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
        double* row = cols.row((c * g.kernel + ki) * g.kernel + kj).data();
        std::int64_t x_lo, x_hi;
        valid_range(kj, g.width, g.out_w, g, x_lo, x_hi);
        for (std::int64_t n = 0; n < nb; ++n) {
          const double* src = x + ((n0 + n) * g.channels + c) * g.height * g.width;
          double* dst = row + n * plane;
          for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
            const auto iy = oy * g.stride + ki - g.padding;
            if (iy < 0 || iy >= g.height) continue;
            const double* in = src + iy * g.width + kj - g.padding;
            double* out = dst + oy * g.out_w;
            for (std::int64_t ox = x_lo; ox < x_hi; ++ox) out[ox] = in[ox * g.stride];
          }
        }
      }
}

void col2im_add(const MatrixRM& cols, const Geometry& g, std::int64_t n0, std::int64_t nb, double* dx) {
  const auto plane = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t ki = 0; ki < g.kernel; ++ki)
      for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = cols.row((c * g.kernel + ki) * g.kernel + kj).data();
        std::int64_t x_lo, x_hi;
        valid_range(kj, g.width, g.out_w, g, x_lo, x_hi);
        for (std::int64_t n = 0; n < nb; ++n) {
          double* dst = dx + ((n0 + n) * g.channels + c) * g.height * g.width;
          const double* src = row + n * plane;
          for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
            const auto iy = oy * g.stride + ki - g.padding;
            if (iy < 0 || iy >= g.height) continue;
            double* out = dst + iy * g.width + kj - g.padding;
            const double* in = src + oy * g.out_w;
            for (std::int64_t ox = x_lo; ox < x_hi; ++ox) out[ox * g.stride] += in[ox];
          }
        }
      }
}

Tensor dense_conv(const Tensor& x, const Tensor& w, const Tensor& b, const Geometry& g) {
  const auto out_c = w.dim(0);
  const auto patch = g.channels * g.kernel * g.kernel;
  const auto plane = g.out_h * g.out_w;
  const auto chunk = chunk_size(g);
  ConstMapMatrixRM wm(w.values().data(), out_c, patch);
  MatrixRM cols, ym;
  Array y(g.batch * out_c * plane);
  for (std::int64_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const auto nb = std::min(chunk, g.batch - n0);
    im2col(x.values().data(), g, n0, nb, cols);
    ym.noalias() = wm * cols;
    if (b.defined()) ym.colwise() += b.values().matrix();
    for (std::int64_t n = 0; n < nb; ++n) {
      MapMatrixRM(y.data() + (n0 + n) * out_c * plane, out_c, plane) = ym.middleCols(n * plane, plane);
    }
  }
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  Array xv = x.values(), wv = w.values();
  return detail::record_op(
      "conv2d", {g.batch, out_c, g.out_h, g.out_w}, std::move(y), std::move(inputs),
      [xv, wv, g, out_c, patch, plane, chunk](const Array& grad, std::span<Array*> gi) {
        ConstMapMatrixRM wm(wv.data(), out_c, patch);
        MatrixRM gm, cols, dcols;
        for (std::int64_t n0 = 0; n0 < g.batch; n0 += chunk) {
          const auto nb = std::min(chunk, g.batch - n0);
          gm.resize(out_c, nb * plane);
          for (std::int64_t n = 0; n < nb; ++n) {
            gm.middleCols(n * plane, plane) = ConstMapMatrixRM(grad.data() + (n0 + n) * out_c * plane, out_c, plane);
          }
          if (gi[1]) {
            im2col(xv.data(), g, n0, nb, cols);
            MapMatrixRM(gi[1]->data(), out_c, patch).noalias() += gm * cols.transpose();
          }
          if (gi[0]) {
            dcols.noalias() = wm.transpose() * gm;
            col2im_add(dcols, g, n0, nb, gi[0]->data());
          }
          if (gi.size() > 2 && gi[2]) *gi[2] += gm.rowwise().sum().array();
        }
      });
}

Tensor depthwise_conv(const Tensor& x, const Tensor& w, const Tensor& b, const Geometry& g) {
  const auto C = g.channels, K = g.kernel, H = g.height, W = g.width, OH = g.out_h, OW = g.out_w;
  const auto& xv = x.values();
  const auto& wv = w.values();
  Array y(g.batch * C * OH * OW);
  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const double* xp = xv.data() + (n * C + c) * H * W;
      const double* wp = wv.data() + c * K * K;
      double* yp = y.data() + (n * C + c) * OH * OW;
      const double bias = b.defined() ? b[c] : 0.0;
      for (std::int64_t oy = 0; oy < OH; ++oy)
        for (std::int64_t ox = 0; ox < OW; ++ox) {
          double acc = bias;
          for (std::int64_t ki = 0; ki < K; ++ki) {
            const auto iy = oy * g.stride + ki - g.padding;
            if (iy < 0 || iy >= H) continue;
            for (std::int64_t kj = 0; kj < K; ++kj) {
              const auto ix = ox * g.stride + kj - g.padding;
              if (ix < 0 || ix >= W) continue;
              acc += wp[ki * K + kj] * xp[iy * W + ix];
            }
          }
          yp[oy * OW + ox] = acc;
        }
    }
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  Array xs = xv, ws = wv;
  return detail::record_op(
      "depthwise_conv2d", {g.batch, C, OH, OW}, std::move(y), std::move(inputs),
      [xs, ws, g](const Array& grad, std::span<Array*> gi) {
        const auto C = g.channels, K = g.kernel, H = g.height, W = g.width, OH = g.out_h, OW = g.out_w;
        for (std::int64_t n = 0; n < g.batch; ++n)
          for (std::int64_t c = 0; c < C; ++c) {
            const double* xp = xs.data() + (n * C + c) * H * W;
            const double* wp = ws.data() + c * K * K;
            const double* gp = grad.data() + (n * C + c) * OH * OW;
            double* dx = gi[0] ? gi[0]->data() + (n * C + c) * H * W : nullptr;
            double* dw = gi[1] ? gi[1]->data() + c * K * K : nullptr;
            for (std::int64_t oy = 0; oy < OH; ++oy)
              for (std::int64_t ox = 0; ox < OW; ++ox) {
                const double go = gp[oy * OW + ox];
                if (gi.size() > 2 && gi[2]) (*gi[2])[c] += go;
                for (std::int64_t ki = 0; ki < K; ++ki) {
                  const auto iy = oy * g.stride + ki - g.padding;
                  if (iy < 0 || iy >= H) continue;
                  for (std::int64_t kj = 0; kj < K; ++kj) {
                    const auto ix = ox * g.stride + kj - g.padding;
                    if (ix < 0 || ix >= W) continue;
                    if (dw) dw[ki * K + kj] += go * xp[iy * W + ix];
                    if (dx) dx[iy * W + ix] += go * wp[ki * K + kj];
                  }
                }
              }
          }
      });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, Conv2dOptions opt) {
  if (w.rank() != 4 || w.dim(2) != w.dim(3)) {
    throw std::invalid_argument("conv2d: weight must be [O,C/groups,K,K], got " + shape_str(w.shape()));
  }
  const Geometry g = geometry("conv2d", x, w.dim(2), opt.stride, opt.padding);
  const auto out_c = w.dim(0);
  if (b.defined() && b.shape() != Shape{out_c}) {
    throw std::invalid_argument("conv2d: bias " + shape_str(b.shape()) + " does not match weight " +
                                shape_str(w.shape()));
  }
  if (opt.groups == 1) {
    if (w.dim(1) != g.channels) {
      throw std::invalid_argument("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                                  shape_str(w.shape()));
    }
    return dense_conv(x, w, b, g);
  }
  if (opt.groups == g.channels && out_c == g.channels && w.dim(1) == 1) return depthwise_conv(x, w, b, g);
  throw std::invalid_argument("conv2d: groups=" + std::to_string(opt.groups) + " unsupported for input " +
                              shape_str(x.shape()) + " and weight " + shape_str(w.shape()));
}

Tensor max_pool2d(const Tensor& x, Pool2dOptions opt) {
  const Geometry g = geometry("max_pool2d", x, opt.kernel, opt.stride, opt.padding);
  const auto planes = g.batch * g.channels;
  const auto out_plane = g.out_h * g.out_w;
  Array y(planes * out_plane);
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(y.size()));
  const auto& xv = x.values();
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t oy = 0; oy < g.out_h; ++oy)
      for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::int64_t best_idx = -1;
        for (std::int64_t ki = 0; ki < g.kernel; ++ki) {
          const auto iy = oy * g.stride + ki - g.padding;
          if (iy < 0 || iy >= g.height) continue;
          for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
            const auto ix = ox * g.stride + kj - g.padding;
            if (ix < 0 || ix >= g.width) continue;
            const auto idx = (p * g.height + iy) * g.width + ix;
            if (best_idx < 0 || xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
            }
          }
        }
        const auto o = p * out_plane + oy * g.out_w + ox;
        y[o] = best;
        argmax[static_cast<std::size_t>(o)] = best_idx;
      }
  return detail::record_op("max_pool2d", {g.batch, g.channels, g.out_h, g.out_w}, std::move(y), {x},
                           [argmax = std::move(argmax)](const Array& grad, std::span<Array*> gi) {
                             if (!gi[0]) return;
                             for (std::size_t o = 0; o < argmax.size(); ++o) {
                               (*gi[0])[argmax[o]] += grad[static_cast<Eigen::Index>(o)];
                             }
                           });
}

Tensor avg_pool2d(const Tensor& x, Pool2dOptions opt) {
  const Geometry g = geometry("avg_pool2d", x, opt.kernel, opt.stride, opt.padding);
  const auto planes = g.batch * g.channels;
  const auto out_plane = g.out_h * g.out_w;
  // Number of in-bounds cells under each output window.
  Array counts(out_plane);
  for (std::int64_t oy = 0; oy < g.out_h; ++oy)
    for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
      int n = 0;
      for (std::int64_t ki = 0; ki < g.kernel; ++ki)
        for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
          const auto iy = oy * g.stride + ki - g.padding, ix = ox * g.stride + kj - g.padding;
          n += (iy >= 0 && iy < g.height && ix >= 0 && ix < g.width) ? 1 : 0;
        }
      counts[oy * g.out_w + ox] = n;
    }
  const auto& xv = x.values();
  Array y(planes * out_plane);
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t oy = 0; oy < g.out_h; ++oy)
      for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
        double acc = 0.0;
        for (std::int64_t ki = 0; ki < g.kernel; ++ki) {
          const auto iy = oy * g.stride + ki - g.padding;
          if (iy < 0 || iy >= g.height) continue;
          for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
            const auto ix = ox * g.stride + kj - g.padding;
            if (ix < 0 || ix >= g.width) continue;
            acc += xv[(p * g.height + iy) * g.width + ix];
          }
        }
        y[p * out_plane + oy * g.out_w + ox] = acc / counts[oy * g.out_w + ox];
      }
  return detail::record_op(
      "avg_pool2d", {g.batch, g.channels, g.out_h, g.out_w}, std::move(y), {x},
      [counts, g, planes, out_plane](const Array& grad, std::span<Array*> gi) {
        if (!gi[0]) return;
        for (std::int64_t p = 0; p < planes; ++p)
          for (std::int64_t oy = 0; oy < g.out_h; ++oy)
            for (std::int64_t ox = 0; ox < g.out_w; ++ox) {
              const double share = grad[p * out_plane + oy * g.out_w + ox] / counts[oy * g.out_w + ox];
              for (std::int64_t ki = 0; ki < g.kernel; ++ki) {
                const auto iy = oy * g.stride + ki - g.padding;
                if (iy < 0 || iy >= g.height) continue;
                for (std::int64_t kj = 0; kj < g.kernel; ++kj) {
                  const auto ix = ox * g.stride + kj - g.padding;
                  if (ix < 0 || ix >= g.width) continue;
                  (*gi[0])[(p * g.height + iy) * g.width + ix] += share;
                }
              }
            }
      });
}

}  // namespace kdas
