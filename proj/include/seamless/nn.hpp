#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "seamless/autograd.hpp"
#include "seamless/ops.hpp"

namespace seamless::nn {

/// A named learnable tensor or persistent buffer of a module tree.
template <typename T>
struct Named {
  std::string name;
  T* item;
};

/// Base of every layer. Children and parameters are registered by pointer,
/// so modules are pinned in memory (non-copyable, non-movable).
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  Module(Module&&) = delete;
  Module& operator=(Module&&) = delete;
  virtual ~Module() = default;

  std::vector<Named<Var>> named_parameters() const {
    std::vector<Named<Var>> out;
    collect_parameters("", out);
    return out;
  }
  std::vector<Named<Tensor>> named_buffers() const {
    std::vector<Named<Tensor>> out;
    collect_buffers("", out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : named_parameters()) total += p.item->value().size();
    return total;
  }

  void set_training(bool on) {
    training_ = on;
    for (auto& [_, child] : children_) child->set_training(on);
  }
  bool training() const { return training_; }

  void zero_grad() {
    for (auto& p : named_parameters()) p.item->zero_grad();
  }

  /// Turns gradient tracking on or off for every parameter below this module.
  void set_requires_grad(bool on) {
    for (auto& p : named_parameters()) p.item->node()->requires_grad = on;
  }

 protected:
  void register_parameter(std::string name, Var& v) { params_.emplace_back(std::move(name), &v); }
  void register_buffer(std::string name, Tensor& t) { buffers_.emplace_back(std::move(name), &t); }
  void register_module(std::string name, Module& m) { children_.emplace_back(std::move(name), &m); }

 private:
  void collect_parameters(const std::string& prefix, std::vector<Named<Var>>& out) const {
    for (const auto& [name, v] : params_) out.push_back({prefix + name, v});
    for (const auto& [name, child] : children_) child->collect_parameters(prefix + name + ".", out);
  }
  void collect_buffers(const std::string& prefix, std::vector<Named<Tensor>>& out) const {
    for (const auto& [name, t] : buffers_) out.push_back({prefix + name, t});
    for (const auto& [name, child] : children_) child->collect_buffers(prefix + name + ".", out);
  }

  bool training_ = true;
  std::vector<std::pair<std::string, Var*>> params_;
  std::vector<std::pair<std::string, Tensor*>> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
};

/// He-uniform style initialization: U(-b, b) with b = sqrt(6 / fan_in) * gain.
inline Tensor uniform_init(Shape s, int fan_in, std::mt19937_64& rng, double gain = 1.0) {
  Tensor t(s);
  const double bound = gain * std::sqrt(6.0 / std::max(fan_in, 1));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

class Conv2d : public Module {
 public:
  Conv2d(int in_c, int out_c, int k, int stride, int pad, bool with_bias, std::mt19937_64& rng)
      : stride_(stride), pad_(pad) {
    weight_ = Var(uniform_init({out_c, in_c, k, k}, in_c * k * k, rng), true);
    register_parameter("weight", weight_);
    if (with_bias) {
      bias_ = Var(uniform_init({1, out_c, 1, 1}, in_c * k * k, rng, 1.0 / std::sqrt(3.0)), true);
      register_parameter("bias", bias_);
    }
  }

  Var forward(const Var& x) const { return ops::conv2d(x, weight_, bias_, stride_, pad_); }

  std::uint64_t macs(const Shape& in) const { return ops::conv_macs(in, weight_.shape(), stride_, pad_); }
  Shape output_shape(const Shape& in) const {
    const auto g = ops::conv_geometry(in, weight_.shape(), stride_, pad_);
    return {in.n, weight_.shape().n, g.out_h, g.out_w};
  }

  Var& weight() { return weight_; }
  Var& bias() { return bias_; }

 private:
  int stride_, pad_;
  Var weight_;
  Var bias_;
};

class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5)
      : momentum_(momentum),
        eps_(eps),
        gamma_(Tensor({1, channels, 1, 1}, 1.0), true),
        beta_(Tensor({1, channels, 1, 1}, 0.0), true),
        running_mean_({1, channels, 1, 1}, 0.0),
        running_var_({1, channels, 1, 1}, 1.0) {
    register_parameter("gamma", gamma_);
    register_parameter("beta", beta_);
    register_buffer("running_mean", running_mean_);
    register_buffer("running_var", running_var_);
  }

  Var forward(const Var& x) {
    return ops::batch_norm(x, gamma_, beta_, running_mean_, running_var_, training(), momentum_, eps_);
  }

  Var& gamma() { return gamma_; }
  Var& beta() { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }

 private:
  double momentum_, eps_;
  Var gamma_, beta_;
  Tensor running_mean_, running_var_;
};

class Linear : public Module {
 public:
  Linear(int in_features, int out_features, std::mt19937_64& rng) {
    weight_ = Var(uniform_init({out_features, in_features, 1, 1}, in_features, rng, 1.0 / std::sqrt(3.0)), true);
    bias_ = Var(uniform_init({1, out_features, 1, 1}, in_features, rng, 1.0 / std::sqrt(3.0)), true);
    register_parameter("weight", weight_);
    register_parameter("bias", bias_);
  }

  Var forward(const Var& x) const { return ops::linear(x, weight_, bias_); }

  int in_features() const { return weight_.shape().c; }
  int out_features() const { return weight_.shape().n; }
  Var& weight() { return weight_; }
  Var& bias() { return bias_; }

 private:
  Var weight_, bias_;
};

/// Convolution followed by batch normalization and an optional ReLU.
class ConvBnAct : public Module {
 public:
  ConvBnAct(int in_c, int out_c, int k, int stride, bool relu, std::mt19937_64& rng, bool conv_bias = true)
      : conv_(in_c, out_c, k, stride, k / 2, conv_bias, rng), bn_(out_c), relu_(relu) {
    register_module("conv", conv_);
    register_module("bn", bn_);
  }

  Var forward(const Var& x) {
    Var y = bn_.forward(conv_.forward(x));
    return relu_ ? ops::relu(y) : y;
  }

  Conv2d& conv() { return conv_; }
  BatchNorm2d& bn() { return bn_; }

 private:
  Conv2d conv_;
  BatchNorm2d bn_;
  bool relu_;
};

}  // namespace seamless::nn
