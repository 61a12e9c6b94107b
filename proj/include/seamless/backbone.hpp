#pragma once

#include <array>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "seamless/archive.hpp"
#include "seamless/nn.hpp"

namespace seamless {

enum class BackboneProfile { full, toy };

inline BackboneProfile parse_profile(const std::string& name) {
  if (name == "full") return BackboneProfile::full;
  if (name == "toy") return BackboneProfile::toy;
  throw ConfigError("unknown backbone profile '" + name + "' (expected full|toy)");
}

inline std::string to_string(BackboneProfile p) { return p == BackboneProfile::full ? "full" : "toy"; }

inline std::array<int, 5> profile_channels(BackboneProfile p) {
  if (p == BackboneProfile::full) return {64, 256, 512, 1024, 2048};
  return {8, 16, 32, 64, 128};
}

/// Checks the image contract: (N, 3, H, W), H and W multiples of 32, finite.
inline void validate_image(const Tensor& image) {
  const Shape s = image.shape();
  if (s.n < 1 || s.c != 3) throw ShapeError("image must be (N,3,H,W), got " + s.str());
  if (s.h % 32 != 0 || s.w % 32 != 0 || s.h == 0 || s.w == 0) {
    throw ShapeError("image size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " is not divisible by 32");
  }
  if (!image.all_finite()) throw ShapeError("image contains non-finite values");
}

/// Encoder levels E0..E4; level i is (N, C_i, H / 2^(i+1), W / 2^(i+1)).
struct PyramidFeatures {
  std::array<Var, 5> levels;
};

class Backbone : public nn::Module {
 public:
  virtual PyramidFeatures forward(const Var& image) = 0;
  virtual BackboneProfile profile() const = 0;
  std::array<int, 5> channels() const { return profile_channels(profile()); }

  /// Loads "backbone."-free parameter names from an SWTS file; every
  /// parameter and buffer must be present with a matching shape.
  void load_pretrained(const std::string& path) {
    const archive::TensorMap tensors = archive::load_weights(path);
    auto assign = [&](const std::string& name, Tensor& dst) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw IoError(path + ": missing tensor '" + name + "'");
      if (!(it->second.shape() == dst.shape())) {
        throw IoError(path + ": tensor '" + name + "' has shape " + it->second.shape().str() +
                      ", expected " + dst.shape().str());
      }
      dst = it->second;
    };
    for (auto& p : named_parameters()) assign(p.name, p.item->mutable_value());
    for (auto& b : named_buffers()) assign(b.name, *b.item);
    pretrained_ = true;
  }
  bool pretrained() const { return pretrained_; }
  /// Marks weights restored from elsewhere (e.g. a checkpoint) as pretrained.
  void set_pretrained(bool on) { pretrained_ = on; }

 protected:
  /// Natural-image mean/std normalization, applied only with pretrained weights.
  Var normalize(const Var& image) const {
    if (!pretrained_) return image;
    static constexpr std::array<double, 3> kMean{0.485, 0.456, 0.406};
    static constexpr std::array<double, 3> kStd{0.229, 0.224, 0.225};
    const Shape s = image.shape();
    Tensor scale_t(s), shift_t(s);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < 3; ++c) {
        for (double& v : scale_t.plane(n, c)) v = 1.0 / kStd[c];
        for (double& v : shift_t.plane(n, c)) v = -kMean[c] / kStd[c];
      }
    return ops::add(ops::mul(image, Var(std::move(scale_t))), Var(std::move(shift_t)));
  }

 private:
  bool pretrained_ = false;
};

/// Small strided-convolution encoder with the same level geometry as the
/// full network and channels [8, 16, 32, 64, 128].
class ToyEncoder final : public Backbone {
 public:
  explicit ToyEncoder(std::mt19937_64& rng) {
    const auto ch = profile_channels(BackboneProfile::toy);
    stem_ = std::make_unique<nn::ConvBnAct>(3, ch[0], 3, 2, true, rng);
    register_module("stem", *stem_);
    for (int i = 1; i < 5; ++i) {
      down_[i - 1] = std::make_unique<nn::ConvBnAct>(ch[i - 1], ch[i], 3, 2, true, rng);
      refine_[i - 1] = std::make_unique<nn::ConvBnAct>(ch[i], ch[i], 3, 1, true, rng);
      register_module("stage" + std::to_string(i) + ".down", *down_[i - 1]);
      register_module("stage" + std::to_string(i) + ".refine", *refine_[i - 1]);
    }
  }

  PyramidFeatures forward(const Var& image) override {
    validate_image(image.value());
    PyramidFeatures out;
    out.levels[0] = stem_->forward(normalize(image));
    for (int i = 1; i < 5; ++i) out.levels[i] = refine_[i - 1]->forward(down_[i - 1]->forward(out.levels[i - 1]));
    return out;
  }
  BackboneProfile profile() const override { return BackboneProfile::toy; }

 private:
  std::unique_ptr<nn::ConvBnAct> stem_;
  std::array<std::unique_ptr<nn::ConvBnAct>, 4> down_;
  std::array<std::unique_ptr<nn::ConvBnAct>, 4> refine_;
};

/// ResNet-50 bottleneck (stride on the 3x3 convolution).
class Bottleneck final : public nn::Module {
 public:
  Bottleneck(int in_c, int planes, int stride, std::mt19937_64& rng)
      : reduce_(in_c, planes, 1, 1, true, rng, false),
        spatial_(planes, planes, 3, stride, true, rng, false),
        expand_(planes, planes * 4, 1, 1, false, rng, false) {
    register_module("conv1", reduce_);
    register_module("conv2", spatial_);
    register_module("conv3", expand_);
    if (stride != 1 || in_c != planes * 4) {
      shortcut_ = std::make_unique<nn::ConvBnAct>(in_c, planes * 4, 1, stride, false, rng, false);
      register_module("downsample", *shortcut_);
    }
  }

  Var forward(const Var& x) {
    Var y = expand_.forward(spatial_.forward(reduce_.forward(x)));
    Var identity = shortcut_ ? shortcut_->forward(x) : x;
    return ops::relu(ops::add(y, identity));
  }

 private:
  nn::ConvBnAct reduce_, spatial_, expand_;
  std::unique_ptr<nn::ConvBnAct> shortcut_;
};

class ResNet50Encoder final : public Backbone {
 public:
  explicit ResNet50Encoder(std::mt19937_64& rng) : stem_(3, 64, 7, 2, true, rng, false) {
    register_module("stem", stem_);
    constexpr std::array<int, 4> kBlocks{3, 4, 6, 3};
    constexpr std::array<int, 4> kPlanes{64, 128, 256, 512};
    int in_c = 64;
    for (int s = 0; s < 4; ++s) {
      for (int b = 0; b < kBlocks[s]; ++b) {
        const int stride = (b == 0 && s > 0) ? 2 : 1;
        stages_[s].push_back(std::make_unique<Bottleneck>(in_c, kPlanes[s], stride, rng));
        register_module("layer" + std::to_string(s + 1) + "." + std::to_string(b), *stages_[s].back());
        in_c = kPlanes[s] * 4;
      }
    }
  }

  PyramidFeatures forward(const Var& image) override {
    validate_image(image.value());
    PyramidFeatures out;
    out.levels[0] = stem_.forward(normalize(image));
    Var x = ops::max_pool2d(out.levels[0], 3, 2, 1);
    for (int s = 0; s < 4; ++s) {
      for (auto& block : stages_[s]) x = block->forward(x);
      out.levels[s + 1] = x;
    }
    return out;
  }
  BackboneProfile profile() const override { return BackboneProfile::full; }

 private:
  nn::ConvBnAct stem_;
  std::array<std::vector<std::unique_ptr<Bottleneck>>, 4> stages_;
};

inline std::unique_ptr<Backbone> make_backbone(BackboneProfile profile, std::mt19937_64& rng) {
  if (profile == BackboneProfile::full) return std::make_unique<ResNet50Encoder>(rng);
  return std::make_unique<ToyEncoder>(rng);
}

/// Runs the encoder without recording a graph.
inline std::array<Tensor, 5> extract_pyramid(Backbone& backbone, const Tensor& image) {
  NoGradGuard no_grad;
  PyramidFeatures p = backbone.forward(Var(image));
  std::array<Tensor, 5> out;
  for (int i = 0; i < 5; ++i) out[i] = p.levels[i].value();
  return out;
}

}  // namespace seamless
