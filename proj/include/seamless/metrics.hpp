#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "seamless/errors.hpp"
#include "seamless/tensor.hpp"

namespace seamless::metrics {

inline constexpr int kThresholds = 256;
inline constexpr double kBeta2 = 0.3;
inline constexpr double kAlpha = 0.5;
inline constexpr double kEps = std::numeric_limits<double>::epsilon();

/// pred in [0, 1] and a binary gt of the same shape (one image).
struct EvalPair {
  Tensor pred;
  Tensor gt;
  std::string id;
};

inline void validate(const EvalPair& p) {
  if (!(p.pred.shape() == p.gt.shape())) {
    throw ShapeError("eval pair '" + p.id + "': pred " + p.pred.shape().str() + " vs gt " + p.gt.shape().str());
  }
  if (p.pred.empty()) throw ShapeError("eval pair '" + p.id + "' is empty");
  for (double v : p.gt.data())
    if (v != 0.0 && v != 1.0) throw ShapeError("eval pair '" + p.id + "': gt is not binary");
  for (double v : p.pred.data())
    if (!(v >= 0.0 && v <= 1.0)) throw ShapeError("eval pair '" + p.id + "': pred outside [0, 1]");
}

/// Maps a loaded ground-truth map to {0, 1} at 0.5.
inline Tensor binarize_gt(Tensor gt) {
  for (double& v : gt.data()) v = v >= 0.5 ? 1.0 : 0.0;
  return gt;
}

inline double threshold_at(int k) { return static_cast<double>(k) / 255.0; }

enum class FVariant { max, mean, adaptive };

inline FVariant parse_f_variant(const std::string& s) {
  if (s == "max") return FVariant::max;
  if (s == "mean") return FVariant::mean;
  if (s == "adaptive") return FVariant::adaptive;
  throw ConfigError("unknown F-measure variant '" + s + "' (expected max|mean|adaptive)");
}
inline std::string to_string(FVariant v) {
  switch (v) {
    case FVariant::max: return "max";
    case FVariant::mean: return "mean";
    case FVariant::adaptive: return "adaptive";
  }
  return "?";
}

struct PrPoint {
  double precision = 0.0;
  double recall = 0.0;
};

inline double f_beta(double precision, double recall, double beta2 = kBeta2) {
  const double denom = beta2 * precision + recall;
  return denom > 0.0 ? (1.0 + beta2) * precision * recall / denom : 0.0;
}

inline double mae(const EvalPair& p) {
  validate(p);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.pred.size(); ++i) acc += std::abs(p.pred[i] - p.gt[i]);
  return acc / static_cast<double>(p.pred.size());
}

/// Precision and recall of {pred > k/255} for k = 0..255. Precision of an
/// empty prediction is 1.
inline std::vector<PrPoint> pr_curve(const EvalPair& p) {
  validate(p);
  const double positives = p.gt.sum();
  if (positives == 0.0) throw EmptyGroundTruthError("image '" + p.id + "' has an empty ground truth");
  // hist[k]: pixels whose largest exceeded threshold index is k
  std::array<double, kThresholds> tp_hist{}, all_hist{};
  for (std::size_t i = 0; i < p.pred.size(); ++i) {
    const double v = p.pred[i];
    int k = std::clamp(static_cast<int>(std::floor(v * 255.0)), -1, kThresholds - 1);
    while (k >= 0 && !(v > threshold_at(k))) --k;
    while (k + 1 < kThresholds && v > threshold_at(k + 1)) ++k;
    if (k < 0) continue;
    all_hist[k] += 1.0;
    tp_hist[k] += p.gt[i];
  }
  std::vector<PrPoint> curve(kThresholds);
  double tp = 0.0, predicted = 0.0;
  for (int k = kThresholds - 1; k >= 0; --k) {
    tp += tp_hist[k];
    predicted += all_hist[k];
    curve[k].precision = predicted > 0.0 ? tp / predicted : 1.0;
    curve[k].recall = tp / positives;
  }
  return curve;
}

/// min(2 * mean(pred), 1).
inline double adaptive_threshold(const Tensor& pred) { return std::min(2.0 * pred.mean(), 1.0); }

inline double f_measure_from_curve(std::span<const PrPoint> curve, FVariant variant) {
  double best = 0.0, total = 0.0;
  for (const auto& pt : curve) {
    const double f = f_beta(pt.precision, pt.recall);
    best = std::max(best, f);
    total += f;
  }
  if (variant == FVariant::mean) return total / static_cast<double>(curve.size());
  return best;
}

inline double f_measure(const EvalPair& p, FVariant variant) {
  if (variant != FVariant::adaptive) return f_measure_from_curve(pr_curve(p), variant);
  validate(p);
  const double positives = p.gt.sum();
  if (positives == 0.0) throw EmptyGroundTruthError("image '" + p.id + "' has an empty ground truth");
  const double thr = adaptive_threshold(p.pred);
  double tp = 0.0, predicted = 0.0;
  for (std::size_t i = 0; i < p.pred.size(); ++i) {
    if (p.pred[i] >= thr) {
      predicted += 1.0;
      tp += p.gt[i];
    }
  }
  return f_beta(predicted > 0.0 ? tp / predicted : 1.0, tp / positives);
}

// ---------------------------------------------------------------------------
// Structure measure

namespace detail {

/// Mean and sample standard deviation of values selected by mask == 1.
inline double object_similarity(const std::vector<double>& values) {
  const double n = static_cast<double>(values.size());
  if (values.empty()) return 0.0;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  double sigma = 0.0;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    sigma = std::sqrt(ss / (n - 1.0));
  }
  return 2.0 * mean / (mean * mean + 1.0 + sigma + kEps);
}

/// Structural similarity of one region, computed over the whole region.
inline double region_ssim(const Tensor& pred, const Tensor& gt, int y0, int y1, int x0, int x1) {
  const int w = pred.shape().w;
  const double N = static_cast<double>(y1 - y0) * (x1 - x0);
  if (N <= 0.0) return 0.0;
  double mx = 0.0, my = 0.0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      mx += pred[static_cast<std::size_t>(y) * w + x];
      my += gt[static_cast<std::size_t>(y) * w + x];
    }
  mx /= N;
  my /= N;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      const double a = pred[static_cast<std::size_t>(y) * w + x] - mx;
      const double b = gt[static_cast<std::size_t>(y) * w + x] - my;
      sxx += a * a;
      syy += b * b;
      sxy += a * b;
    }
  sxx /= N - 1.0 + kEps;
  syy /= N - 1.0 + kEps;
  sxy /= N - 1.0 + kEps;
  const double alpha = 4.0 * mx * my * sxy;
  const double beta = (mx * mx + my * my) * (sxx + syy);
  if (alpha != 0.0) return alpha / (beta + kEps);
  return beta == 0.0 ? 1.0 : 0.0;
}

/// Round half to even, independent of the current rounding mode.
inline double round_even(double v) {
  const double r = std::round(v);
  if (std::abs(v - std::trunc(v)) == 0.5) return 2.0 * std::round(v / 2.0);
  return r;
}

}  // namespace detail

/// Region split point: the foreground centroid in continuous pixel
/// coordinates (pixel i spans [i, i+1)), rounded half-to-even.
inline std::pair<int, int> centroid_split(const Tensor& gt) {
  const int h = gt.shape().h, w = gt.shape().w;
  double sx = 0.0, sy = 0.0, count = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (gt[static_cast<std::size_t>(y) * w + x] > 0.0) {
        sx += x + 0.5;
        sy += y + 0.5;
        count += 1.0;
      }
  if (count == 0.0) return {static_cast<int>(detail::round_even(w / 2.0)), static_cast<int>(detail::round_even(h / 2.0))};
  return {static_cast<int>(detail::round_even(sx / count)), static_cast<int>(detail::round_even(sy / count))};
}

inline double s_object(const EvalPair& p) {
  std::vector<double> fg, bg;
  for (std::size_t i = 0; i < p.pred.size(); ++i) {
    if (p.gt[i] == 1.0) {
      fg.push_back(p.pred[i]);
    } else {
      bg.push_back(1.0 - p.pred[i]);
    }
  }
  const double u = p.gt.mean();
  return u * detail::object_similarity(fg) + (1.0 - u) * detail::object_similarity(bg);
}

inline double s_region(const EvalPair& p) {
  const int h = p.pred.shape().h, w = p.pred.shape().w;
  const auto [X, Y] = centroid_split(p.gt);
  const double area = static_cast<double>(h) * w;
  const double w1 = static_cast<double>(X) * Y / area;
  const double w2 = static_cast<double>(w - X) * Y / area;
  const double w3 = static_cast<double>(X) * (h - Y) / area;
  const double w4 = 1.0 - w1 - w2 - w3;
  return w1 * detail::region_ssim(p.pred, p.gt, 0, Y, 0, X) + w2 * detail::region_ssim(p.pred, p.gt, 0, Y, X, w) +
         w3 * detail::region_ssim(p.pred, p.gt, Y, h, 0, X) + w4 * detail::region_ssim(p.pred, p.gt, Y, h, X, w);
}

/// alpha * S_object + (1 - alpha) * S_region, clamped to [0, 1]. All-background
/// ground truth scores 1 - mean(pred); all-foreground scores mean(pred).
inline double s_measure(const EvalPair& p, double alpha = kAlpha) {
  validate(p);
  if (p.pred.shape().n != 1 || p.pred.shape().c != 1) throw ShapeError("s_measure expects one single-channel map");
  const double y = p.gt.mean();
  if (y == 0.0) return 1.0 - p.pred.mean();
  if (y == 1.0) return p.pred.mean();
  return std::clamp(alpha * s_object(p) + (1.0 - alpha) * s_region(p), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Enhanced-alignment measure

/// pred binarized at min(2 * mean, 1); mean over pixels of the quadratic
/// enhanced alignment between the bias-removed maps.
inline double e_measure(const EvalPair& p) {
  validate(p);
  const std::size_t n = p.pred.size();
  const double thr = adaptive_threshold(p.pred);
  std::vector<double> bin(n);
  for (std::size_t i = 0; i < n; ++i) bin[i] = p.pred[i] >= thr ? 1.0 : 0.0;
  const double fg = p.gt.sum();
  double total = 0.0;
  if (fg == 0.0) {
    for (double b : bin) total += 1.0 - b;
  } else if (fg == static_cast<double>(n)) {
    for (double b : bin) total += b;
  } else {
    double mb = 0.0;
    for (double b : bin) mb += b;
    mb /= static_cast<double>(n);
    const double mg = fg / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = bin[i] - mb, g = p.gt[i] - mg;
      const double align = 2.0 * a * g / (a * a + g * g + kEps);
      total += (align + 1.0) * (align + 1.0) / 4.0;
    }
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Reports

struct MetricsReport {
  std::string id;
  double mae = 0.0;
  double f_beta = 0.0;
  FVariant variant = FVariant::max;
  double s_measure = 0.0;
  double e_measure = 0.0;
  std::vector<PrPoint> pr_curve;
  int excluded = 0;  // images skipped for empty ground truth (aggregates only)
};

/// All metrics of one image. Throws EmptyGroundTruthError for empty gt.
inline MetricsReport evaluate_pair(const EvalPair& p, FVariant variant = FVariant::max) {
  MetricsReport r;
  r.id = p.id;
  r.variant = variant;
  r.pr_curve = pr_curve(p);
  r.f_beta = variant == FVariant::adaptive ? f_measure(p, variant) : f_measure_from_curve(r.pr_curve, variant);
  r.mae = mae(p);
  r.s_measure = s_measure(p);
  r.e_measure = e_measure(p);
  return r;
}

/// Arithmetic mean of every field in list order; pr curves are averaged per
/// threshold.
inline MetricsReport aggregate(std::span<const MetricsReport> reports, int excluded = 0, const std::string& id = "mean") {
  if (reports.empty()) throw Error("aggregate: no reports (all images excluded or none given)");
  MetricsReport out;
  out.id = id;
  out.variant = reports.front().variant;
  out.excluded = excluded;
  const double n = static_cast<double>(reports.size());
  const bool curves = std::all_of(reports.begin(), reports.end(),
                                  [](const MetricsReport& r) { return r.pr_curve.size() == kThresholds; });
  if (curves) out.pr_curve.assign(kThresholds, PrPoint{0.0, 0.0});
  for (const auto& r : reports) {
    if (r.variant != out.variant) throw Error("aggregate: reports mix F-measure variants");
    out.mae += r.mae;
    out.f_beta += r.f_beta;
    out.s_measure += r.s_measure;
    out.e_measure += r.e_measure;
    if (curves)
      for (int k = 0; k < kThresholds; ++k) {
        out.pr_curve[k].precision += r.pr_curve[k].precision;
        out.pr_curve[k].recall += r.pr_curve[k].recall;
      }
  }
  out.mae /= n;
  out.f_beta /= n;
  out.s_measure /= n;
  out.e_measure /= n;
  for (auto& pt : out.pr_curve) {
    pt.precision /= n;
    pt.recall /= n;
  }
  return out;
}

}  // namespace seamless::metrics
