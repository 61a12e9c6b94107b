#pragma once

#include <memory>
#include <random>

#include "seamless/backbone.hpp"
#include "seamless/cdp.hpp"
#include "seamless/config.hpp"
#include "seamless/igc_decoder.hpp"

namespace seamless {

/// Encoder, decoder and the two semantic heads. Only the encoder and decoder
/// run at inference time; the heads exist for the contrastive term.
class SeamlessModel final : public nn::Module {
 public:
  struct Output {
    PyramidFeatures pyramid;
    DecoderOutput decoder;
  };

  explicit SeamlessModel(const Config& cfg) : cdp_(cfg.cdp) {
    std::mt19937_64 rng(cfg.train.seed);
    const BackboneProfile profile = cfg.backbone.profile;
    backbone_ = make_backbone(profile, rng);
    decoder_ = std::make_unique<IgcDecoder>(profile_channels(profile), decoder_width(profile), cfg.decoder, rng);
    const int half = cfg.train.image_size / 2;
    fg_head_ = std::make_unique<ForegroundHead>(cfg.cdp.fg_head, semantic_dim(profile), half * half, rng);
    bg_head_ = std::make_unique<BackgroundHead>(profile_channels(profile)[cfg.cdp.bg_level], semantic_dim(profile),
                                                cfg.cdp.mask_eps, rng);
    register_module("backbone", *backbone_);
    register_module("decoder", *decoder_);
    register_module("fg_head", *fg_head_);
    register_module("bg_head", *bg_head_);
    if (!cfg.backbone.weights_path.empty()) backbone_->load_pretrained(cfg.backbone.weights_path);
    if (cfg.backbone.freeze) backbone_->set_requires_grad(false);
  }

  Output forward(const Tensor& images) {
    Output out;
    out.pyramid = backbone_->forward(Var(images));
    out.decoder = decoder_->forward(out.pyramid, images.shape().h, images.shape().w);
    return out;
  }

  /// v^f from the pre-activation map.
  Var foreground(const Output& out) const { return fg_head_->forward(out.decoder.inference.t_half); }

  /// v^b from the configured encoder level masked by 1 - mask.
  Var background(const Output& out, const Tensor& masks) {
    return bg_head_->forward(out.pyramid.levels[cdp_.bg_level], masks);
  }

  /// t_act in eval mode without a graph. The previous mode is restored.
  Tensor predict(const Tensor& images) {
    const bool was_training = training();
    set_training(false);
    NoGradGuard no_grad;
    Tensor t = forward(images).decoder.inference.t_act.value();
    set_training(was_training);
    return t;
  }

  /// Multiply-accumulate count of one inference forward pass.
  std::uint64_t inference_macs(const Tensor& images) {
    const std::uint64_t before = ops::mac_counter();
    predict(images);
    return ops::mac_counter() - before;
  }

  const CdpConfig& cdp() const { return cdp_; }
  Backbone& backbone() { return *backbone_; }
  IgcDecoder& decoder() { return *decoder_; }
  ForegroundHead& fg_head() { return *fg_head_; }
  BackgroundHead& bg_head() { return *bg_head_; }

 private:
  CdpConfig cdp_;
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<IgcDecoder> decoder_;
  std::unique_ptr<ForegroundHead> fg_head_;
  std::unique_ptr<BackgroundHead> bg_head_;
};

}  // namespace seamless
