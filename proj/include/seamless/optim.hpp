#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "seamless/archive.hpp"
#include "seamless/nn.hpp"

namespace seamless {

/// SGD with heavy-ball momentum and L2 weight decay:
///   g <- grad + wd * p;  buf <- mu * buf + g;  p <- p - lr * buf.
/// Parameters without a gradient are skipped.
class Sgd {
 public:
  Sgd(std::vector<nn::Named<Var>> params, double lr, double momentum, double weight_decay)
      : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) buffers_.emplace_back(p.item->shape(), 0.0);
  }

  /// Scales all gradients so their global L2 norm is at most max_norm.
  /// Returns the norm before clipping.
  double clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (const auto& p : params_) {
      for (double v : p.item->node()->grad.data()) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (std::isfinite(norm) && norm > max_norm) {
      const double scale = max_norm / (norm + 1e-6);
      for (const auto& p : params_) {
        p.item->node()->grad *= scale;
      }
    }
    return norm;
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var& p = *params_[i].item;
      if (!p.requires_grad() || p.node()->grad.empty()) continue;
      const Tensor& g = p.node()->grad;
      Tensor& w = p.mutable_value();
      Tensor& buf = buffers_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double d = g[k] + weight_decay_ * w[k];
        buf[k] = momentum_ * buf[k] + d;
        w[k] -= lr_ * buf[k];
      }
    }
  }

  double lr() const { return lr_; }

  archive::TensorMap state() const {
    archive::TensorMap m;
    for (std::size_t i = 0; i < params_.size(); ++i) m.emplace(params_[i].name, buffers_[i]);
    return m;
  }

  void load_state(const archive::TensorMap& m) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto it = m.find(params_[i].name);
      if (it == m.end()) throw IoError("optimizer state lacks '" + params_[i].name + "'");
      if (!(it->second.shape() == buffers_[i].shape())) throw IoError("optimizer state shape mismatch for '" + params_[i].name + "'");
      buffers_[i] = it->second;
    }
  }

 private:
  std::vector<nn::Named<Var>> params_;
  std::vector<Tensor> buffers_;
  double lr_, momentum_, weight_decay_;
};

}  // namespace seamless
