#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "seamless/autograd.hpp"
#include "seamless/cdp.hpp"
#include "seamless/ops.hpp"

namespace seamless {

struct LossConfig {
  double bce_eps = 1e-7;
  double iou_eps = 1.0;
  int ssim_window = 11;
  double ssim_sigma = 1.5;
  double ssim_c1 = 0.01 * 0.01;
  double ssim_c2 = 0.03 * 0.03;
};

namespace detail {

inline void require_same_resolution(const Tensor& pred, const Tensor& target, const char* what) {
  if (!(pred.shape() == target.shape())) {
    throw ShapeError(std::string(what) + ": prediction " + pred.shape().str() + " vs target " +
                     target.shape().str());
  }
}

/// Builds a scalar op whose gradient with respect to pred was computed during
/// the forward pass.
inline Var scalar_with_gradient(double value, const Var& pred, Tensor grad) {
  return Var::make(Tensor::scalar(value), {pred}, [grad = std::move(grad)](const Tensor& gy, std::span<const NodePtr> in) {
    Tensor d = grad;
    d *= gy[0];
    accumulate_into(in[0], d);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Binary cross-entropy

struct LossWithGradient {
  double value = 0.0;
  Tensor grad;  // d value / d pred
};

inline LossWithGradient bce_forward(const Tensor& pred, const Tensor& target, double eps) {
  detail::require_same_resolution(pred, target, "bce_loss");
  LossWithGradient r;
  r.grad = Tensor(pred.shape());
  const double M = static_cast<double>(pred.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p_raw = pred[i];
    const double p = std::clamp(p_raw, eps, 1.0 - eps);
    const double t = target[i];
    acc += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
    const bool inside = p_raw > eps && p_raw < 1.0 - eps;
    r.grad[i] = inside ? (-t / p + (1.0 - t) / (1.0 - p)) / M : 0.0;
  }
  r.value = acc / M;
  return r;
}

/// Mean binary cross-entropy with the prediction clamped to [eps, 1 - eps].
inline double bce_loss(const Tensor& pred, const Tensor& target, double eps = 1e-7) {
  return bce_forward(pred, target, eps).value;
}
inline Var bce_loss(const Var& pred, const Tensor& target, double eps = 1e-7) {
  LossWithGradient r = bce_forward(pred.value(), target, eps);
  return detail::scalar_with_gradient(r.value, pred, std::move(r.grad));
}

// ---------------------------------------------------------------------------
// Structural similarity (single scale, Gaussian window, zero padding)

inline std::vector<double> gaussian_kernel(int window, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(window));
  const double r = (window - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < window; ++i) {
    k[i] = std::exp(-((i - r) * (i - r)) / (2.0 * sigma * sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

/// Separable 'same' filtering with zero padding. The kernel is symmetric, so
/// this operator is self-adjoint.
inline void gaussian_filter(const double* in, int h, int w, const std::vector<double>& k, double* out,
                            std::vector<double>& scratch) {
  const int r = static_cast<int>(k.size()) / 2;
  scratch.assign(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int j = -r; j <= r; ++j) {
        const int xx = x + j;
        if (xx >= 0 && xx < w) acc += k[j + r] * in[static_cast<std::size_t>(y) * w + xx];
      }
      scratch[static_cast<std::size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int j = -r; j <= r; ++j) {
        const int yy = y + j;
        if (yy >= 0 && yy < h) acc += k[j + r] * scratch[static_cast<std::size_t>(yy) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
}

/// 1 - mean SSIM over every pixel of every plane, with d/d(pred).
inline LossWithGradient ssim_forward(const Tensor& pred, const Tensor& target, const LossConfig& cfg = {}) {
  detail::require_same_resolution(pred, target, "ssim_loss");
  const Shape s = pred.shape();
  if (std::min(s.h, s.w) < cfg.ssim_window) {
    throw ShapeError("ssim_loss: image " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " smaller than window " + std::to_string(cfg.ssim_window));
  }
  const auto k = gaussian_kernel(cfg.ssim_window, cfg.ssim_sigma);
  const double C1 = cfg.ssim_c1, C2 = cfg.ssim_c2;
  const std::size_t P = s.plane();
  const double M = static_cast<double>(pred.size());
  std::vector<double> scratch, mu_x(P), mu_y(P), e_xx(P), e_yy(P), e_xy(P), tmp(P);
  std::vector<double> d_mu(P), d_xx(P), d_xy(P), g_mu(P), g_xx(P), g_xy(P);
  LossWithGradient r;
  r.grad = Tensor(s);
  double ssim_sum = 0.0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      auto x = pred.plane(n, c);
      auto y = target.plane(n, c);
      gaussian_filter(x.data(), s.h, s.w, k, mu_x.data(), scratch);
      gaussian_filter(y.data(), s.h, s.w, k, mu_y.data(), scratch);
      for (std::size_t i = 0; i < P; ++i) tmp[i] = x[i] * x[i];
      gaussian_filter(tmp.data(), s.h, s.w, k, e_xx.data(), scratch);
      for (std::size_t i = 0; i < P; ++i) tmp[i] = y[i] * y[i];
      gaussian_filter(tmp.data(), s.h, s.w, k, e_yy.data(), scratch);
      for (std::size_t i = 0; i < P; ++i) tmp[i] = x[i] * y[i];
      gaussian_filter(tmp.data(), s.h, s.w, k, e_xy.data(), scratch);
      for (std::size_t i = 0; i < P; ++i) {
        const double mx = mu_x[i], my = mu_y[i];
        const double sxx = e_xx[i] - mx * mx;
        const double syy = e_yy[i] - my * my;
        const double sxy = e_xy[i] - mx * my;
        const double A1 = 2 * mx * my + C1, A2 = 2 * sxy + C2;
        const double B1 = mx * mx + my * my + C1, B2 = sxx + syy + C2;
        const double S = (A1 * A2) / (B1 * B2);
        ssim_sum += S;
        d_mu[i] = S * (2 * my / A1 - 2 * my / A2 - 2 * mx / B1 + 2 * mx / B2);
        d_xx[i] = -S / B2;
        d_xy[i] = 2 * S / A2;
      }
      gaussian_filter(d_mu.data(), s.h, s.w, k, g_mu.data(), scratch);
      gaussian_filter(d_xx.data(), s.h, s.w, k, g_xx.data(), scratch);
      gaussian_filter(d_xy.data(), s.h, s.w, k, g_xy.data(), scratch);
      auto g = r.grad.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) g[i] = -(g_mu[i] + 2 * x[i] * g_xx[i] + y[i] * g_xy[i]) / M;
    }
  }
  r.value = 1.0 - ssim_sum / M;
  return r;
}

inline double ssim_loss(const Tensor& pred, const Tensor& target, const LossConfig& cfg = {}) {
  return ssim_forward(pred, target, cfg).value;
}
inline Var ssim_loss(const Var& pred, const Tensor& target, const LossConfig& cfg = {}) {
  LossWithGradient r = ssim_forward(pred.value(), target, cfg);
  return detail::scalar_with_gradient(r.value, pred, std::move(r.grad));
}

// ---------------------------------------------------------------------------
// Soft IoU, averaged over samples

inline LossWithGradient iou_forward(const Tensor& pred, const Tensor& target, double eps) {
  detail::require_same_resolution(pred, target, "iou_loss");
  const Shape s = pred.shape();
  const std::size_t per = static_cast<std::size_t>(s.c) * s.plane();
  LossWithGradient r;
  r.grad = Tensor(s);
  double acc = 0.0;
  for (int n = 0; n < s.n; ++n) {
    const double* p = pred.raw() + n * per;
    const double* t = target.raw() + n * per;
    double inter = 0.0, sp = 0.0, st = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      inter += p[i] * t[i];
      sp += p[i];
      st += t[i];
    }
    const double I = inter + eps;
    const double U = sp + st - inter + eps;
    acc += 1.0 - I / U;
    double* g = r.grad.raw() + n * per;
    for (std::size_t i = 0; i < per; ++i) g[i] = -(t[i] * U - I * (1.0 - t[i])) / (U * U) / s.n;
  }
  r.value = acc / s.n;
  return r;
}

inline double iou_loss(const Tensor& pred, const Tensor& target, double eps = 1.0) {
  return iou_forward(pred, target, eps).value;
}
inline Var iou_loss(const Var& pred, const Tensor& target, double eps = 1.0) {
  LossWithGradient r = iou_forward(pred.value(), target, eps);
  return detail::scalar_with_gradient(r.value, pred, std::move(r.grad));
}

// ---------------------------------------------------------------------------
// Total objective

struct LossBreakdown {
  double l_bce = 0.0;
  double l_ssim = 0.0;
  double l_iou = 0.0;
  double l_neg = 0.0;
  double total = 0.0;

  double l_d() const { return l_bce + l_ssim + l_iou; }
};

struct Objective {
  LossBreakdown breakdown;
  Var total;
};

/// Sum of BCE, SSIM and IoU terms on the activated map, plus the contrastive
/// term when enabled. The same formula serves ground truth and pseudo masks.
inline Objective total_loss(const Var& t_act, const Tensor& supervision, const Var& fg, const Var& bg,
                            bool cdp_enabled, const LossConfig& cfg = {}, double cos_eps = 1e-6) {
  std::vector<Var> terms{bce_loss(t_act, supervision, cfg.bce_eps), ssim_loss(t_act, supervision, cfg),
                         iou_loss(t_act, supervision, cfg.iou_eps)};
  if (cdp_enabled) terms.push_back(contrastive_loss(fg, bg, cos_eps));
  Objective out;
  out.breakdown.l_bce = terms[0].value()[0];
  out.breakdown.l_ssim = terms[1].value()[0];
  out.breakdown.l_iou = terms[2].value()[0];
  out.breakdown.l_neg = cdp_enabled ? terms[3].value()[0] : 0.0;
  out.breakdown.total = out.breakdown.l_bce + out.breakdown.l_ssim + out.breakdown.l_iou + out.breakdown.l_neg;
  out.total = ops::add_scalars(terms);
  return out;
}

}  // namespace seamless
