#pragma once

#include <array>
#include <memory>
#include <random>

#include "seamless/backbone.hpp"
#include "seamless/nn.hpp"

namespace seamless {

struct DecoderConfig {
  int kernel = 3;          // 3 or 1
  bool fuse_relu = false;  // ReLU after the two context-fusion blocks
};

/// Channel count shared by all unified levels.
inline int decoder_width(BackboneProfile p) { return p == BackboneProfile::full ? 64 : 8; }

/// F0..F4: every encoder level mapped to the decoder width.
struct UnifiedFeatures {
  std::array<Var, 5> levels;
};

/// fcex1 at E1 resolution, fcex2 and their product fcex at E0 resolution.
struct ContextFeatures {
  Var fcex1;
  Var fcex2;
  Var fcex;
};

/// t_half: channel mean of fcex (pre-activation). t_act: sigmoid of t_half
/// bilinearly upsampled to the image size.
struct InferenceMap {
  Var t_half;
  Var t_act;
};

struct DecoderOutput {
  UnifiedFeatures unified;
  ContextFeatures context;
  InferenceMap inference;
};

/// Interval-layer and global-context decoder. Levels two apart (F0/F2 and
/// F1/F3) are fused with the deepest level F4 in two branches whose outputs
/// are multiplied elementwise; the channel mean of the product is the map.
class IgcDecoder final : public nn::Module {
 public:
  IgcDecoder(const std::array<int, 5>& in_channels, int width, const DecoderConfig& cfg, std::mt19937_64& rng)
      : width_(width) {
    if (cfg.kernel != 1 && cfg.kernel != 3) throw ConfigError("decoder.kernel must be 1 or 3");
    for (int i = 0; i < 5; ++i) {
      unify_[i] = std::make_unique<nn::ConvBnAct>(in_channels[i], width, cfg.kernel, 1, true, rng);
      register_module("unify" + std::to_string(i), *unify_[i]);
    }
    fuse_deep_ = std::make_unique<nn::ConvBnAct>(3 * width, width, cfg.kernel, 1, cfg.fuse_relu, rng);
    fuse_shallow_ = std::make_unique<nn::ConvBnAct>(3 * width, width, cfg.kernel, 1, cfg.fuse_relu, rng);
    register_module("fuse1", *fuse_deep_);
    register_module("fuse2", *fuse_shallow_);
  }

  int width() const { return width_; }

  UnifiedFeatures unify_channels(const PyramidFeatures& pyr) {
    UnifiedFeatures uf;
    for (int i = 0; i < 5; ++i) uf.levels[i] = unify_[i]->forward(pyr.levels[i]);
    return uf;
  }

  ContextFeatures fuse_context(const UnifiedFeatures& uf) {
    const auto& F = uf.levels;
    auto up_to = [](const Var& v, const Var& ref) { return ops::resize_bilinear(v, ref.shape().h, ref.shape().w); };
    ContextFeatures cf;
    const std::array<Var, 3> deep{F[1], up_to(F[3], F[1]), up_to(F[4], F[1])};
    const std::array<Var, 3> shallow{F[0], up_to(F[2], F[0]), up_to(F[4], F[0])};
    cf.fcex1 = fuse_deep_->forward(ops::concat_channels(deep));
    cf.fcex2 = fuse_shallow_->forward(ops::concat_channels(shallow));
    cf.fcex = combine(cf.fcex1, cf.fcex2);
    return cf;
  }

  /// fcex = upsample(fcex1 -> size of fcex2) * fcex2.
  static Var combine(const Var& fcex1, const Var& fcex2) {
    return ops::mul(ops::resize_bilinear(fcex1, fcex2.shape().h, fcex2.shape().w), fcex2);
  }

  static InferenceMap infer_map(const ContextFeatures& cf, int out_h, int out_w) {
    InferenceMap m;
    m.t_half = ops::channel_mean(cf.fcex);
    m.t_act = ops::sigmoid(ops::resize_bilinear(m.t_half, out_h, out_w));
    return m;
  }

  DecoderOutput forward(const PyramidFeatures& pyr, int out_h, int out_w) {
    DecoderOutput out;
    out.unified = unify_channels(pyr);
    out.context = fuse_context(out.unified);
    out.inference = infer_map(out.context, out_h, out_w);
    return out;
  }

  nn::ConvBnAct& unify_block(int i) { return *unify_[i]; }
  nn::ConvBnAct& fuse_block(int branch) { return branch == 1 ? *fuse_deep_ : *fuse_shallow_; }

 private:
  int width_;
  std::array<std::unique_ptr<nn::ConvBnAct>, 5> unify_;
  std::unique_ptr<nn::ConvBnAct> fuse_deep_, fuse_shallow_;
};

}  // namespace seamless
