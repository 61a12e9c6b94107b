#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "seamless/autograd.hpp"
#include "seamless/tensor.hpp"

namespace seamless::ops {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using StridedRowMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStridedRowMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

// ---------------------------------------------------------------------------
// Convolution

struct ConvGeometry {
  int in_c, in_h, in_w;
  int k, stride, pad;
  int out_h, out_w;

  int cols_rows() const { return in_c * k * k; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, int stride, int pad) {
  if (w.c != x.c || w.h != w.w) {
    throw ShapeError("conv2d: weight " + w.str() + " incompatible with input " + x.str());
  }
  ConvGeometry g{x.c, x.h, x.w, w.h, stride, pad, 0, 0};
  g.out_h = (x.h + 2 * pad - w.h) / stride + 1;
  g.out_w = (x.w + 2 * pad - w.w) / stride + 1;
  if (g.out_h <= 0 || g.out_w <= 0) throw ShapeError("conv2d: input " + x.str() + " too small");
  return g;
}

namespace detail {

// Columns [p0, p0 + count) of the unfolded input, laid out as cols_rows x count.
inline void im2col(const double* x, const ConvGeometry& g, int p0, int count, double* cols) {
  for (int ci = 0; ci < g.in_c; ++ci) {
    const double* plane = x + static_cast<std::size_t>(ci) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = cols + (static_cast<std::size_t>(ci * g.k + ky) * g.k + kx) * count;
        for (int j = 0; j < count; ++j) {
          const int p = p0 + j;
          const int iy = (p / g.out_w) * g.stride - g.pad + ky;
          const int ix = (p % g.out_w) * g.stride - g.pad + kx;
          row[j] = (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w)
                       ? plane[static_cast<std::size_t>(iy) * g.in_w + ix]
                       : 0.0;
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, int p0, int count, double* dx) {
  for (int ci = 0; ci < g.in_c; ++ci) {
    double* plane = dx + static_cast<std::size_t>(ci) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = cols + (static_cast<std::size_t>(ci * g.k + ky) * g.k + kx) * count;
        for (int j = 0; j < count; ++j) {
          const int p = p0 + j;
          const int iy = (p / g.out_w) * g.stride - g.pad + ky;
          const int ix = (p % g.out_w) * g.stride - g.pad + kx;
          if (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w) {
            plane[static_cast<std::size_t>(iy) * g.in_w + ix] += row[j];
          }
        }
      }
    }
  }
}

// Bounded unfold buffer: ~32 MB of doubles.
inline int chunk_columns(const ConvGeometry& g) {
  constexpr std::size_t kBudget = std::size_t{1} << 22;
  const std::size_t rows = static_cast<std::size_t>(g.cols_rows());
  const int total = g.out_h * g.out_w;
  return static_cast<int>(std::clamp<std::size_t>(kBudget / rows, 1, static_cast<std::size_t>(total)));
}

}  // namespace detail

/// Running multiply-accumulate tally of conv2d/linear forwards on this thread.
inline std::uint64_t& mac_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

/// Multiply-accumulate count of one conv2d forward.
inline std::uint64_t conv_macs(const Shape& x, const Shape& w, int stride, int pad) {
  const ConvGeometry g = conv_geometry(x, w, stride, pad);
  return static_cast<std::uint64_t>(x.n) * w.n * g.out_h * g.out_w * g.cols_rows();
}

/// 2-D cross-correlation. Weight is (out_c, in_c, k, k); bias may be undefined or (1, out_c, 1, 1).
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  const ConvGeometry g = conv_geometry(xs, ws, stride, pad);
  const int out_c = ws.n;
  const int K = g.cols_rows();
  const int P = g.out_h * g.out_w;
  Tensor y({xs.n, out_c, g.out_h, g.out_w});
  ConstRowMap W(weight.value().raw(), out_c, K);
  const int chunk = detail::chunk_columns(g);
  std::vector<double> cols(g.pointwise() ? 0 : static_cast<std::size_t>(K) * chunk);
  mac_counter() += static_cast<std::uint64_t>(xs.n) * out_c * P * K;

  for (int n = 0; n < xs.n; ++n) {
    const double* xp = x.value().raw() + static_cast<std::size_t>(n) * xs.c * xs.h * xs.w;
    double* yp = y.raw() + static_cast<std::size_t>(n) * out_c * P;
    for (int p0 = 0; p0 < P; p0 += chunk) {
      const int count = std::min(chunk, P - p0);
      StridedRowMap out(yp + p0, out_c, count, Eigen::OuterStride<>(P));
      if (g.pointwise()) {
        ConstStridedRowMap in(xp + p0, K, count, Eigen::OuterStride<>(P));
        out.noalias() = W * in;
      } else {
        detail::im2col(xp, g, p0, count, cols.data());
        ConstRowMap in(cols.data(), K, count);
        out.noalias() = W * in;
      }
    }
    if (bias.defined()) {
      for (int c = 0; c < out_c; ++c) {
        const double b = bias.value()[c];
        double* row = yp + static_cast<std::size_t>(c) * P;
        for (int p = 0; p < P; ++p) row[p] += b;
      }
    }
  }

  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Var::make(std::move(y), std::move(inputs),
                   [g, out_c, K, P, chunk](const Tensor& gy, std::span<const NodePtr> in) {
                     const Node& xn = *in[0];
                     const Node& wn = *in[1];
                     const Shape xs = xn.value.shape();
                     const bool want_x = xn.requires_grad;
                     const bool want_w = wn.requires_grad;
                     Tensor dx = want_x ? Tensor(xs) : Tensor();
                     Tensor dw = want_w ? Tensor(wn.value.shape()) : Tensor();
                     ConstRowMap W(wn.value.raw(), out_c, K);
                     std::vector<double> cols(static_cast<std::size_t>(K) * chunk);
                     std::vector<double> dcols(static_cast<std::size_t>(K) * chunk);
                     for (int n = 0; n < xs.n; ++n) {
                       const std::size_t xoff = static_cast<std::size_t>(n) * xs.c * xs.h * xs.w;
                       const double* gp = gy.raw() + static_cast<std::size_t>(n) * out_c * P;
                       for (int p0 = 0; p0 < P; p0 += chunk) {
                         const int count = std::min(chunk, P - p0);
                         ConstStridedRowMap G(gp + p0, out_c, count, Eigen::OuterStride<>(P));
                         if (want_w) {
                           RowMap dW(dw.raw(), out_c, K);
                           if (g.pointwise()) {
                             ConstStridedRowMap in_cols(xn.value.raw() + xoff + p0, K, count,
                                                        Eigen::OuterStride<>(P));
                             dW.noalias() += G * in_cols.transpose();
                           } else {
                             detail::im2col(xn.value.raw() + xoff, g, p0, count, cols.data());
                             ConstRowMap in_cols(cols.data(), K, count);
                             dW.noalias() += G * in_cols.transpose();
                           }
                         }
                         if (want_x) {
                           if (g.pointwise()) {
                             StridedRowMap dX(dx.raw() + xoff + p0, K, count, Eigen::OuterStride<>(P));
                             dX.noalias() += W.transpose() * G;
                           } else {
                             RowMap dC(dcols.data(), K, count);
                             dC.noalias() = W.transpose() * G;
                             detail::col2im_add(dcols.data(), g, p0, count, dx.raw() + xoff);
                           }
                         }
                       }
                     }
                     if (want_x) accumulate_into(in[0], dx);
                     if (want_w) accumulate_into(in[1], dw);
                     if (in.size() > 2 && in[2]->requires_grad) {
                       Tensor db({1, out_c, 1, 1});
                       for (int n = 0; n < xs.n; ++n) {
                         for (int c = 0; c < out_c; ++c) {
                           const double* row = gy.raw() + (static_cast<std::size_t>(n) * out_c + c) * P;
                           double s = 0.0;
                           for (int p = 0; p < P; ++p) s += row[p];
                           db[c] += s;
                         }
                       }
                       accumulate_into(in[2], db);
                     }
                   });
}

// ---------------------------------------------------------------------------
// Normalization and activations

/// Per-channel batch normalization. In training mode batch statistics are used
/// and the running buffers are updated; otherwise the running buffers are used.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                      Tensor& running_var, bool training, double momentum, double eps) {
  const Shape s = x.shape();
  const int C = s.c;
  const std::size_t HW = s.plane();
  const double M = static_cast<double>(s.n) * static_cast<double>(HW);
  std::vector<double> mean(C), invstd(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      double sum = 0.0;
      for (int n = 0; n < s.n; ++n)
        for (double v : x.value().plane(n, c)) sum += v;
      const double mu = sum / M;
      double sq = 0.0;
      for (int n = 0; n < s.n; ++n)
        for (double v : x.value().plane(n, c)) sq += (v - mu) * (v - mu);
      const double var = sq / M;
      mean[c] = mu;
      invstd[c] = 1.0 / std::sqrt(var + eps);
      const double unbiased = M > 1 ? sq / (M - 1) : var;
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      invstd[c] = 1.0 / std::sqrt(running_var[c] + eps);
    }
  }
  Tensor xhat(s);
  Tensor y(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < C; ++c) {
      auto in = x.value().plane(n, c);
      auto xh = xhat.plane(n, c);
      auto out = y.plane(n, c);
      const double ga = gamma.value()[c], be = beta.value()[c];
      for (std::size_t i = 0; i < HW; ++i) {
        xh[i] = (in[i] - mean[c]) * invstd[c];
        out[i] = ga * xh[i] + be;
      }
    }
  }
  return Var::make(std::move(y), {x, gamma, beta},
                   [xhat = std::move(xhat), invstd = std::move(invstd), training, M](
                       const Tensor& gy, std::span<const NodePtr> in) {
                     const Shape s = gy.shape();
                     const int C = s.c;
                     const std::size_t HW = s.plane();
                     const Tensor& gamma = in[1]->value;
                     std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
                     for (int n = 0; n < s.n; ++n) {
                       for (int c = 0; c < C; ++c) {
                         auto g = gy.plane(n, c);
                         auto xh = xhat.plane(n, c);
                         for (std::size_t i = 0; i < HW; ++i) {
                           sum_dy[c] += g[i];
                           sum_dy_xhat[c] += g[i] * xh[i];
                         }
                       }
                     }
                     if (in[0]->requires_grad) {
                       Tensor dx(s);
                       for (int n = 0; n < s.n; ++n) {
                         for (int c = 0; c < C; ++c) {
                           auto g = gy.plane(n, c);
                           auto xh = xhat.plane(n, c);
                           auto d = dx.plane(n, c);
                           const double k = gamma[c] * invstd[c];
                           for (std::size_t i = 0; i < HW; ++i) {
                             d[i] = training ? k * (g[i] - sum_dy[c] / M - xh[i] * sum_dy_xhat[c] / M)
                                             : k * g[i];
                           }
                         }
                       }
                       accumulate_into(in[0], dx);
                     }
                     if (in[1]->requires_grad) {
                       Tensor dg({1, C, 1, 1});
                       for (int c = 0; c < C; ++c) dg[c] = sum_dy_xhat[c];
                       accumulate_into(in[1], dg);
                     }
                     if (in[2]->requires_grad) {
                       Tensor db({1, C, 1, 1});
                       for (int c = 0; c < C; ++c) db[c] = sum_dy[c];
                       accumulate_into(in[2], db);
                     }
                   });
}

inline Var relu(const Var& x) {
  Tensor y = x.value();
  for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
  return Var::make(std::move(y), {x}, [](const Tensor& gy, std::span<const NodePtr> in) {
    Tensor dx = gy;
    const Tensor& xv = in[0]->value;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (!(xv[i] > 0.0)) dx[i] = 0.0;
    accumulate_into(in[0], dx);
  });
}

inline double sigmoid_scalar(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
  Tensor y = x.value();
  for (double& v : y.data()) v = sigmoid_scalar(v);
  Tensor yc = y;
  return Var::make(std::move(y), {x}, [yc = std::move(yc)](const Tensor& gy, std::span<const NodePtr> in) {
    Tensor dx = gy;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= yc[i] * (1.0 - yc[i]);
    accumulate_into(in[0], dx);
  });
}

/// Max pooling with implicit -inf padding.
inline Var max_pool2d(const Var& x, int k, int stride, int pad) {
  const Shape s = x.shape();
  const int oh = (s.h + 2 * pad - k) / stride + 1;
  const int ow = (s.w + 2 * pad - k) / stride + 1;
  Tensor y({s.n, s.c, oh, ow});
  std::vector<std::size_t> argmax(y.size());
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t where = 0;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= s.h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= s.w) continue;
              const std::size_t idx = x.value().index(n, c, iy, ix);
              if (x.value()[idx] > best) {
                best = x.value()[idx];
                where = idx;
              }
            }
          }
          y[o] = best;
          argmax[o] = where;
        }
      }
    }
  }
  return Var::make(std::move(y), {x},
                   [argmax = std::move(argmax)](const Tensor& gy, std::span<const NodePtr> in) {
                     Tensor dx(in[0]->value.shape());
                     for (std::size_t i = 0; i < gy.size(); ++i) dx[argmax[i]] += gy[i];
                     accumulate_into(in[0], dx);
                   });
}

// ---------------------------------------------------------------------------
// Elementwise and structural

inline Var add(const Var& a, const Var& b) {
  a.value().require_same(b.value(), "add");
  Tensor y = a.value();
  y += b.value();
  return Var::make(std::move(y), {a, b}, [](const Tensor& gy, std::span<const NodePtr> in) {
    accumulate_into(in[0], gy);
    accumulate_into(in[1], gy);
  });
}

inline Var mul(const Var& a, const Var& b) {
  a.value().require_same(b.value(), "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return Var::make(std::move(y), {a, b}, [](const Tensor& gy, std::span<const NodePtr> in) {
    if (in[0]->requires_grad) {
      Tensor da = gy;
      for (std::size_t i = 0; i < da.size(); ++i) da[i] *= in[1]->value[i];
      accumulate_into(in[0], da);
    }
    if (in[1]->requires_grad) {
      Tensor db = gy;
      for (std::size_t i = 0; i < db.size(); ++i) db[i] *= in[0]->value[i];
      accumulate_into(in[1], db);
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor y = a.value();
  y *= s;
  return Var::make(std::move(y), {a}, [s](const Tensor& gy, std::span<const NodePtr> in) {
    Tensor d = gy;
    d *= s;
    accumulate_into(in[0], d);
  });
}

/// Sum of every element, as a scalar.
inline Var sum_all(const Var& a) {
  return Var::make(Tensor::scalar(a.value().sum()), {a}, [](const Tensor& gy, std::span<const NodePtr> in) {
    accumulate_into(in[0], Tensor(in[0]->value.shape(), gy[0]));
  });
}

/// Sum of scalar (1,1,1,1) terms.
inline Var add_scalars(std::span<const Var> terms) {
  double total = 0.0;
  std::vector<Var> inputs(terms.begin(), terms.end());
  for (const Var& t : inputs) total += t.value()[0];
  return Var::make(Tensor::scalar(total), inputs, [](const Tensor& gy, std::span<const NodePtr> in) {
    for (const NodePtr& p : in) accumulate_into(p, gy);
  });
}

inline Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape s = parts.front().shape();
  int total_c = 0;
  for (const Var& p : parts) {
    const Shape ps = p.shape();
    if (ps.n != s.n || ps.h != s.h || ps.w != s.w) {
      throw ShapeError("concat: " + ps.str() + " vs " + s.str());
    }
    total_c += ps.c;
  }
  Tensor y({s.n, total_c, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    int c0 = 0;
    for (const Var& p : parts) {
      for (int c = 0; c < p.shape().c; ++c) {
        auto src = p.value().plane(n, c);
        std::copy(src.begin(), src.end(), y.plane(n, c0 + c).begin());
      }
      c0 += p.shape().c;
    }
  }
  return Var::make(std::move(y), std::vector<Var>(parts.begin(), parts.end()),
                   [](const Tensor& gy, std::span<const NodePtr> in) {
                     int c0 = 0;
                     for (const NodePtr& p : in) {
                       const Shape ps = p->value.shape();
                       if (p->requires_grad) {
                         Tensor d(ps);
                         for (int n = 0; n < ps.n; ++n)
                           for (int c = 0; c < ps.c; ++c) {
                             auto src = gy.plane(n, c0 + c);
                             std::copy(src.begin(), src.end(), d.plane(n, c).begin());
                           }
                         accumulate_into(p, d);
                       }
                       c0 += ps.c;
                     }
                   });
}

/// Mean over channels: (N, C, H, W) -> (N, 1, H, W).
inline Var channel_mean(const Var& x) {
  const Shape s = x.shape();
  Tensor y({s.n, 1, s.h, s.w});
  const double inv = 1.0 / s.c;
  for (int n = 0; n < s.n; ++n) {
    auto out = y.plane(n, 0);
    for (int c = 0; c < s.c; ++c) {
      auto in = x.value().plane(n, c);
      for (std::size_t i = 0; i < in.size(); ++i) out[i] += in[i];
    }
    for (double& v : out) v *= inv;
  }
  return Var::make(std::move(y), {x}, [inv](const Tensor& gy, std::span<const NodePtr> in) {
    const Shape s = in[0]->value.shape();
    Tensor dx(s);
    for (int n = 0; n < s.n; ++n) {
      auto g = gy.plane(n, 0);
      for (int c = 0; c < s.c; ++c) {
        auto d = dx.plane(n, c);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * inv;
      }
    }
    accumulate_into(in[0], dx);
  });
}

// ---------------------------------------------------------------------------
// Resampling

/// Source taps of 1-D linear interpolation with half-pixel centers
/// (the corner-aligned=false convention).
struct LinearTaps {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

inline LinearTaps linear_taps(int in, int out) {
  LinearTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double ratio = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    const double src = std::max(ratio * (i + 0.5) - 0.5, 0.0);
    const int lo = std::min(static_cast<int>(src), in - 1);
    t.lo[i] = lo;
    t.hi[i] = lo < in - 1 ? lo + 1 : lo;
    t.frac[i] = src - lo;
  }
  return t;
}

inline Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  const Shape s = x.shape();
  if (s.h == out_h && s.w == out_w) return x;
  const LinearTaps ty = linear_taps(s.h, out_h);
  const LinearTaps tx = linear_taps(s.w, out_w);
  Tensor y({s.n, s.c, out_h, out_w});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      auto in = x.plane(n, c);
      auto out = y.plane(n, c);
      for (int oy = 0; oy < out_h; ++oy) {
        const double fy = ty.frac[oy];
        const double* r0 = in.data() + static_cast<std::size_t>(ty.lo[oy]) * s.w;
        const double* r1 = in.data() + static_cast<std::size_t>(ty.hi[oy]) * s.w;
        for (int ox = 0; ox < out_w; ++ox) {
          const double fx = tx.frac[ox];
          const int x0 = tx.lo[ox], x1 = tx.hi[ox];
          out[static_cast<std::size_t>(oy) * out_w + ox] =
              (1 - fy) * ((1 - fx) * r0[x0] + fx * r0[x1]) + fy * ((1 - fx) * r1[x0] + fx * r1[x1]);
        }
      }
    }
  }
  return y;
}

/// Adjoint of resize_bilinear: scatters output gradients back onto the source grid.
inline Tensor resize_bilinear_adjoint(const Tensor& gy, int in_h, int in_w) {
  const Shape s = gy.shape();
  if (s.h == in_h && s.w == in_w) return gy;
  const LinearTaps ty = linear_taps(in_h, s.h);
  const LinearTaps tx = linear_taps(in_w, s.w);
  Tensor dx({s.n, s.c, in_h, in_w});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      auto g = gy.plane(n, c);
      auto d = dx.plane(n, c);
      for (int oy = 0; oy < s.h; ++oy) {
        const double fy = ty.frac[oy];
        double* r0 = d.data() + static_cast<std::size_t>(ty.lo[oy]) * in_w;
        double* r1 = d.data() + static_cast<std::size_t>(ty.hi[oy]) * in_w;
        for (int ox = 0; ox < s.w; ++ox) {
          const double v = g[static_cast<std::size_t>(oy) * s.w + ox];
          const double fx = tx.frac[ox];
          const int x0 = tx.lo[ox], x1 = tx.hi[ox];
          r0[x0] += (1 - fy) * (1 - fx) * v;
          r0[x1] += (1 - fy) * fx * v;
          r1[x0] += fy * (1 - fx) * v;
          r1[x1] += fy * fx * v;
        }
      }
    }
  }
  return dx;
}

inline Var resize_bilinear(const Var& x, int out_h, int out_w) {
  if (x.shape().h == out_h && x.shape().w == out_w) return x;
  return Var::make(resize_bilinear(x.value(), out_h, out_w), {x},
                   [](const Tensor& gy, std::span<const NodePtr> in) {
                     const Shape s = in[0]->value.shape();
                     accumulate_into(in[0], resize_bilinear_adjoint(gy, s.h, s.w));
                   });
}

/// Nearest-neighbour resize (floor(dst * in / out) source index).
inline Tensor resize_nearest(const Tensor& x, int out_h, int out_w) {
  const Shape s = x.shape();
  if (s.h == out_h && s.w == out_w) return x;
  Tensor y({s.n, s.c, out_h, out_w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int oy = 0; oy < out_h; ++oy) {
        const int iy = std::min(static_cast<int>(std::floor(oy * static_cast<double>(s.h) / out_h)), s.h - 1);
        for (int ox = 0; ox < out_w; ++ox) {
          const int ix = std::min(static_cast<int>(std::floor(ox * static_cast<double>(s.w) / out_w)), s.w - 1);
          y.at(n, c, oy, ox) = x.at(n, c, iy, ix);
        }
      }
  return y;
}

/// Horizontal mirror of every plane.
inline Tensor flip_horizontal(const Tensor& x) {
  const Shape s = x.shape();
  Tensor y(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int r = 0; r < s.h; ++r)
        for (int q = 0; q < s.w; ++q) y.at(n, c, r, q) = x.at(n, c, r, s.w - 1 - q);
  return y;
}

// ---------------------------------------------------------------------------
// Pooling and dense heads

/// Adaptive average pooling with cell bounds [floor(i*H/o), ceil((i+1)*H/o)).
inline Var adaptive_avg_pool(const Var& x, int out_h, int out_w) {
  const Shape s = x.shape();
  if (s.h < out_h || s.w < out_w) {
    throw ShapeError("adaptive_avg_pool: input " + s.str() + " smaller than target");
  }
  auto bounds = [](int i, int in, int out) {
    const int a = (i * in) / out;
    const int b = ((i + 1) * in + out - 1) / out;
    return std::pair{a, b};
  };
  Tensor y({s.n, s.c, out_h, out_w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int oy = 0; oy < out_h; ++oy) {
        const auto [y0, y1] = bounds(oy, s.h, out_h);
        for (int ox = 0; ox < out_w; ++ox) {
          const auto [x0, x1] = bounds(ox, s.w, out_w);
          double sum = 0.0;
          for (int r = y0; r < y1; ++r)
            for (int q = x0; q < x1; ++q) sum += x.value().at(n, c, r, q);
          y.at(n, c, oy, ox) = sum / ((y1 - y0) * (x1 - x0));
        }
      }
  return Var::make(std::move(y), {x}, [bounds](const Tensor& gy, std::span<const NodePtr> in) {
    const Shape s = in[0]->value.shape();
    const Shape o = gy.shape();
    Tensor dx(s);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int oy = 0; oy < o.h; ++oy) {
          const auto [y0, y1] = bounds(oy, s.h, o.h);
          for (int ox = 0; ox < o.w; ++ox) {
            const auto [x0, x1] = bounds(ox, s.w, o.w);
            const double g = gy.at(n, c, oy, ox) / ((y1 - y0) * (x1 - x0));
            for (int r = y0; r < y1; ++r)
              for (int q = x0; q < x1; ++q) dx.at(n, c, r, q) += g;
          }
        }
    accumulate_into(in[0], dx);
  });
}

/// (N, C, H, W) -> (N, C*H*W, 1, 1).
inline Var flatten(const Var& x) {
  const Shape s = x.shape();
  return Var::make(x.value().reshaped({s.n, s.c * s.h * s.w, 1, 1}), {x},
                   [s](const Tensor& gy, std::span<const NodePtr> in) {
                     accumulate_into(in[0], gy.reshaped(s));
                   });
}

/// Affine map of row vectors: x (N, K, 1, 1), weight (D, K, 1, 1), bias (1, D, 1, 1).
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (xs.h != 1 || xs.w != 1 || ws.c != xs.c) {
    throw ShapeError("linear: input " + xs.str() + " incompatible with weight " + ws.str());
  }
  const int N = xs.n, K = xs.c, D = ws.n;
  mac_counter() += static_cast<std::uint64_t>(N) * K * D;
  Tensor y({N, D, 1, 1});
  RowMap Y(y.raw(), N, D);
  Y.noalias() = ConstRowMap(x.value().raw(), N, K) * ConstRowMap(weight.value().raw(), D, K).transpose();
  for (int n = 0; n < N; ++n)
    for (int d = 0; d < D; ++d) Y(n, d) += bias.value()[d];
  return Var::make(std::move(y), {x, weight, bias}, [N, K, D](const Tensor& gy, std::span<const NodePtr> in) {
    ConstRowMap G(gy.raw(), N, D);
    if (in[0]->requires_grad) {
      Tensor dx(in[0]->value.shape());
      RowMap(dx.raw(), N, K).noalias() = G * ConstRowMap(in[1]->value.raw(), D, K);
      accumulate_into(in[0], dx);
    }
    if (in[1]->requires_grad) {
      Tensor dw(in[1]->value.shape());
      RowMap(dw.raw(), D, K).noalias() = G.transpose() * ConstRowMap(in[0]->value.raw(), N, K);
      accumulate_into(in[1], dw);
    }
    if (in[2]->requires_grad) {
      Tensor db(in[2]->value.shape());
      for (int n = 0; n < N; ++n)
        for (int d = 0; d < D; ++d) db[d] += G(n, d);
      accumulate_into(in[2], db);
    }
  });
}

/// Weighted global average pooling: g[n,c] = sum(x*w) / max(sum(w), eps).
/// Samples whose weight mass is below eps fall back to the unweighted mean;
/// they are counted in *degenerate when the pointer is given.
inline Var masked_avg_pool(const Var& x, const Tensor& weights, double eps, int* degenerate = nullptr) {
  const Shape s = x.shape();
  const Shape ms = weights.shape();
  if (ms.n != s.n || ms.c != 1 || ms.h != s.h || ms.w != s.w) {
    throw ShapeError("masked_avg_pool: weights " + ms.str() + " vs features " + s.str());
  }
  Tensor eff(ms);
  for (int n = 0; n < s.n; ++n) {
    auto w = weights.plane(n, 0);
    double mass = 0.0;
    for (double v : w) mass += v;
    auto e = eff.plane(n, 0);
    if (mass < eps) {
      if (degenerate) ++*degenerate;
      std::fill(e.begin(), e.end(), 1.0 / static_cast<double>(e.size()));
    } else {
      const double inv = 1.0 / std::max(mass, eps);
      for (std::size_t i = 0; i < e.size(); ++i) e[i] = w[i] * inv;
    }
  }
  Tensor y({s.n, s.c, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    auto e = eff.plane(n, 0);
    for (int c = 0; c < s.c; ++c) {
      auto in = x.value().plane(n, c);
      double acc = 0.0;
      for (std::size_t i = 0; i < in.size(); ++i) acc += in[i] * e[i];
      y.at(n, c, 0, 0) = acc;
    }
  }
  return Var::make(std::move(y), {x}, [eff = std::move(eff)](const Tensor& gy, std::span<const NodePtr> in) {
    const Shape s = in[0]->value.shape();
    Tensor dx(s);
    for (int n = 0; n < s.n; ++n) {
      auto e = eff.plane(n, 0);
      for (int c = 0; c < s.c; ++c) {
        const double g = gy.at(n, c, 0, 0);
        auto d = dx.plane(n, c);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = g * e[i];
      }
    }
    accumulate_into(in[0], dx);
  });
}

}  // namespace seamless::ops
