#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "seamless/backbone.hpp"
#include "seamless/nn.hpp"

namespace seamless {

enum class FgHeadKind { pool8, flatten };

inline FgHeadKind parse_fg_head(const std::string& s) {
  if (s == "pool8") return FgHeadKind::pool8;
  if (s == "flatten") return FgHeadKind::flatten;
  throw ConfigError("unknown cdp.fg_head '" + s + "' (expected pool8|flatten)");
}
inline std::string to_string(FgHeadKind k) { return k == FgHeadKind::pool8 ? "pool8" : "flatten"; }

struct CdpConfig {
  bool enabled = true;
  int bg_level = 2;
  FgHeadKind fg_head = FgHeadKind::pool8;
  double cos_eps = 1e-6;   // clamp floor of 1 - cos
  double mask_eps = 1e-6;  // minimum background weight mass
};

/// Embedding size of the semantic vectors.
inline int semantic_dim(BackboneProfile p) { return p == BackboneProfile::full ? 64 : 16; }

enum class VectorKind { foreground, background };

struct SemanticVector {
  std::vector<double> values;
  VectorKind kind = VectorKind::foreground;
  int sample_id = 0;
};

/// Splits an (N, D, 1, 1) batch into per-sample vectors.
inline std::vector<SemanticVector> to_semantic_vectors(const Tensor& batch, VectorKind kind) {
  const Shape s = batch.shape();
  std::vector<SemanticVector> out(static_cast<std::size_t>(s.n));
  for (int n = 0; n < s.n; ++n) {
    out[n].kind = kind;
    out[n].sample_id = n;
    out[n].values.assign(batch.raw() + static_cast<std::size_t>(n) * s.c, batch.raw() + static_cast<std::size_t>(n + 1) * s.c);
  }
  return out;
}

/// Foreground semantics from the pre-activation map t_half: adaptive pooling
/// to 8x8 (or a literal flatten) followed by an affine map.
class ForegroundHead final : public nn::Module {
 public:
  /// flatten_inputs is the t_half pixel count; only used by the flatten variant.
  ForegroundHead(FgHeadKind kind, int dim, int flatten_inputs, std::mt19937_64& rng)
      : kind_(kind), fc_(kind == FgHeadKind::pool8 ? 64 : flatten_inputs, dim, rng) {
    register_module("fc", fc_);
  }

  Var forward(const Var& t_half) const {
    if (kind_ == FgHeadKind::pool8) return fc_.forward(ops::flatten(ops::adaptive_avg_pool(t_half, 8, 8)));
    const Shape s = t_half.shape();
    if (s.c * s.h * s.w != fc_.in_features()) {
      throw ShapeError("flatten foreground head built for " + std::to_string(fc_.in_features()) +
                       " inputs, got t_half " + s.str());
    }
    return fc_.forward(ops::flatten(t_half));
  }

  nn::Linear& fc() { return fc_; }

 private:
  FgHeadKind kind_;
  nn::Linear fc_;
};

/// Background semantics: encoder features pooled with weights 1 - dw(mask),
/// then an affine map. dw is bilinear downsampling to the feature grid.
class BackgroundHead final : public nn::Module {
 public:
  BackgroundHead(int in_channels, int dim, double mask_eps, std::mt19937_64& rng)
      : mask_eps_(mask_eps), fc_(in_channels, dim, rng) {
    register_module("fc", fc_);
  }

  /// Background weights at the feature resolution.
  static Tensor background_weights(const Tensor& mask, int h, int w) {
    Tensor weights = ops::resize_bilinear(mask, h, w);
    for (double& v : weights.data()) v = 1.0 - std::clamp(v, 0.0, 1.0);
    return weights;
  }

  Var forward(const Var& features, const Tensor& mask) {
    const Shape fs = features.shape();
    const Shape ms = mask.shape();
    if (ms.n != fs.n || ms.c != 1) throw ShapeError("background mask " + ms.str() + " vs features " + fs.str());
    const Tensor weights = background_weights(mask, fs.h, fs.w);
    return fc_.forward(ops::masked_avg_pool(features, weights, mask_eps_, &degenerate_count_));
  }

  /// Number of samples so far whose mask left no background (all-foreground).
  int degenerate_count() const { return degenerate_count_; }
  void reset_degenerate_count() { degenerate_count_ = 0; }

  nn::Linear& fc() { return fc_; }

 private:
  double mask_eps_;
  nn::Linear fc_;
  int degenerate_count_ = 0;
};

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0.0 ? dot / denom : 0.0;
}

/// Per-sample contrastive term -log(clamp(1 - cos, eps, 2)).
inline double contrastive_term(double cos, double eps) { return -std::log(std::clamp(1.0 - cos, eps, 2.0)); }

/// Batch contrastive loss between foreground rows and background rows of two
/// (N, D, 1, 1) tensors. The double sum over (i, j) has a j-independent
/// summand, so the 1/n^2 normalization reduces to the per-sample mean.
inline Var contrastive_loss(const Var& fg, const Var& bg, double eps) {
  const Shape fs = fg.shape();
  if (!(fs == bg.shape()) || fs.h != 1 || fs.w != 1 || fs.n < 1) {
    throw ShapeError("contrastive_loss: fg " + fs.str() + " vs bg " + bg.shape().str());
  }
  const int N = fs.n, D = fs.c;
  double total = 0.0;
  for (int n = 0; n < N; ++n) {
    std::span<const double> f(fg.value().raw() + static_cast<std::size_t>(n) * D, D);
    std::span<const double> b(bg.value().raw() + static_cast<std::size_t>(n) * D, D);
    total += contrastive_term(cosine_similarity(b, f), eps);
  }
  return Var::make(Tensor::scalar(total / N), {fg, bg}, [N, D, eps](const Tensor& gy, std::span<const NodePtr> in) {
    const Tensor& F = in[0]->value;
    const Tensor& B = in[1]->value;
    Tensor dF(F.shape()), dB(B.shape());
    for (int n = 0; n < N; ++n) {
      const double* f = F.raw() + static_cast<std::size_t>(n) * D;
      const double* b = B.raw() + static_cast<std::size_t>(n) * D;
      double dot = 0.0, nf2 = 0.0, nb2 = 0.0;
      for (int d = 0; d < D; ++d) {
        dot += f[d] * b[d];
        nf2 += f[d] * f[d];
        nb2 += b[d] * b[d];
      }
      const double nf = std::sqrt(nf2), nb = std::sqrt(nb2);
      if (nf == 0.0 || nb == 0.0) continue;
      const double cos = dot / (nf * nb);
      const double u = 1.0 - cos;
      if (u < eps || u > 2.0) continue;  // clamped: flat
      const double dl_dcos = gy[0] / (u * N);
      for (int d = 0; d < D; ++d) {
        dF[static_cast<std::size_t>(n) * D + d] = dl_dcos * (b[d] / (nf * nb) - cos * f[d] / nf2);
        dB[static_cast<std::size_t>(n) * D + d] = dl_dcos * (f[d] / (nf * nb) - cos * b[d] / nb2);
      }
    }
    accumulate_into(in[0], dF);
    accumulate_into(in[1], dB);
  });
}

/// Value-level form over per-sample vectors aligned by sample_id.
inline double contrastive_loss(std::span<const SemanticVector> fg, std::span<const SemanticVector> bg,
                               double eps = 1e-6) {
  if (fg.empty() || fg.size() != bg.size()) {
    throw ShapeError("contrastive_loss: need equal non-empty lists, got " + std::to_string(fg.size()) + " and " +
                     std::to_string(bg.size()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < fg.size(); ++i) {
    if (fg[i].sample_id != bg[i].sample_id) {
      throw ShapeError("contrastive_loss: sample ids out of order at position " + std::to_string(i));
    }
    if (fg[i].values.size() != bg[i].values.size() || fg[i].values.empty()) {
      throw ShapeError("contrastive_loss: dimension mismatch for sample " + std::to_string(fg[i].sample_id));
    }
    total += contrastive_term(cosine_similarity(bg[i].values, fg[i].values), eps);
  }
  return total / static_cast<double>(fg.size());
}

}  // namespace seamless
