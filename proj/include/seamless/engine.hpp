#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "seamless/checkpoint.hpp"
#include "seamless/config.hpp"
#include "seamless/data_pipeline.hpp"
#include "seamless/losses.hpp"
#include "seamless/model.hpp"
#include "seamless/optim.hpp"
#include "seamless/pseudo_labels.hpp"

namespace seamless {

struct StepRecord {
  std::int64_t step = 0;  // 1-based
  int epoch = 0;          // 1-based
  LossBreakdown loss;
  double grad_norm = 0.0;
};

inline std::string history_header() { return "step,l_bce,l_ssim,l_iou,l_neg,total"; }

inline std::string history_row(const StepRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g,%.17g", static_cast<long long>(r.step), r.loss.l_bce,
                r.loss.l_ssim, r.loss.l_iou, r.loss.l_neg, r.loss.total);
  return buf;
}

/// Copies named tensors into a module; every parameter and buffer must exist.
inline void load_module_state(nn::Module& m, const archive::TensorMap& params, const archive::TensorMap& buffers) {
  auto assign = [](const archive::TensorMap& src, const std::string& name, Tensor& dst) {
    auto it = src.find(name);
    if (it == src.end()) throw IoError("state lacks tensor '" + name + "'");
    if (!(it->second.shape() == dst.shape())) {
      throw IoError("tensor '" + name + "' has shape " + it->second.shape().str() + ", expected " + dst.shape().str());
    }
    dst = it->second;
  };
  for (auto& p : m.named_parameters()) assign(params, p.name, p.item->mutable_value());
  for (auto& b : m.named_buffers()) assign(buffers, b.name, *b.item);
}

inline archive::TensorMap parameter_map(const nn::Module& m) {
  archive::TensorMap out;
  for (const auto& p : m.named_parameters()) out.emplace(p.name, p.item->value());
  return out;
}

inline archive::TensorMap buffer_map(const nn::Module& m) {
  archive::TensorMap out;
  for (const auto& b : m.named_buffers()) out.emplace(b.name, *b.item);
  return out;
}

/// State of the epoch-plan generator, stored in checkpoints as a consistency
/// check of seed and epoch on resume.
inline std::string plan_rng_state(std::uint64_t seed, int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::ostringstream os;
  os << rng;
  return os.str();
}

struct TrainerOptions {
  bool write_files = true;  // history.csv and checkpoints under runs/<name>
  std::ostream* log = nullptr;
};

/// Owns model, optimizer and data stream. One step function serves both
/// regimes; the only difference is where supervision masks come from.
class Trainer {
 public:
  Trainer(Config cfg, std::vector<ManifestEntry> train_entries, TrainerOptions opts = {})
      : cfg_((cfg.validate(), std::move(cfg))),
        digest_(config_digest(cfg_)),
        opts_(opts),
        model_(std::make_unique<SeamlessModel>(cfg_)),
        loader_(std::move(train_entries), cfg_.train.batch_size, cfg_.train.seed, cfg_.train.flip_enabled(),
                cfg_.train.image_size),
        optimizer_(model_->named_parameters(), cfg_.train.lr, cfg_.train.momentum, cfg_.train.weight_decay) {
    if (cfg_.train.mode == TrainMode::unsupervised) {
      store_ = std::make_shared<MaskStore>(run_dir() / "pseudo_masks", cfg_.pseudo.lambda);
    }
  }

  const Config& config() const { return cfg_; }
  const std::string& digest() const { return digest_; }
  SeamlessModel& model() { return *model_; }
  MixedLoader& loader() { return loader_; }
  MaskStore* pseudo_store() { return store_.get(); }
  const std::vector<StepRecord>& history() const { return history_; }
  std::int64_t steps_done() const { return step_; }
  int epochs_done() const { return static_cast<int>(step_ / loader_.batches_per_epoch()); }
  std::int64_t total_steps() const { return static_cast<std::int64_t>(cfg_.train.epochs) * loader_.batches_per_epoch(); }

  std::filesystem::path run_dir() const { return std::filesystem::path(cfg_.train.runs_dir) / cfg_.name; }
  std::filesystem::path checkpoint_path(int epoch) const {
    return run_dir() / ("ckpt_" + std::to_string(epoch) + ".bin");
  }

  /// Every training image must have a stored mask before unsupervised training.
  void require_pseudo_masks() const {
    if (!store_) return;
    for (const auto& e : loader_.entries()) {
      if (!store_->contains(e.id)) throw NotFoundError("missing pseudo mask for training image '" + e.id + "'");
    }
  }

  /// One optimizer step on the next batch. Completing an epoch triggers the
  /// pseudo-mask refresh (unsupervised) and checkpointing.
  StepRecord step() {
    if (step_ == 0 && history_.empty()) start_history();
    if (step_ == 0) require_pseudo_masks();
    const int bpe = loader_.batches_per_epoch();
    const int epoch = static_cast<int>(step_ / bpe) + 1;
    const int index = static_cast<int>(step_ % bpe);
    Batch batch = loader_.batch(epoch, index, store_.get());

    model_->set_training(true);
    model_->zero_grad();
    const SeamlessModel::Output out = model_->forward(batch.images);
    Var fg, bg;
    if (cfg_.cdp.enabled) {
      fg = model_->foreground(out);
      bg = model_->background(out, batch.masks);
    }
    const Objective obj = total_loss(out.decoder.inference.t_act, batch.masks, fg, bg, cfg_.cdp.enabled, cfg_.loss,
                                     cfg_.cdp.cos_eps);
    StepRecord rec;
    rec.step = step_ + 1;
    rec.epoch = epoch;
    rec.loss = obj.breakdown;
    if (!std::isfinite(obj.breakdown.total)) throw DivergenceError(divergence_message(rec, "loss"));
    backward(obj.total);
    rec.grad_norm = optimizer_.clip_grad_norm(cfg_.train.clip_norm);
    if (!std::isfinite(rec.grad_norm)) throw DivergenceError(divergence_message(rec, "gradient norm"));
    optimizer_.step();
    model_->zero_grad();

    ++step_;
    history_.push_back(rec);
    append_history(rec);
    if (step_ % bpe == 0) end_epoch(epoch);
    return rec;
  }

  /// Runs until all configured epochs are done, or max_steps more steps.
  const std::vector<StepRecord>& fit(std::int64_t max_steps = -1) {
    std::int64_t budget = max_steps;
    while (step_ < total_steps() && budget != 0) {
      step();
      if (budget > 0) --budget;
    }
    return history_;
  }

  /// Blends every stored mask with the current prediction (epochs > 2).
  void refresh_pseudo_masks(int epoch) {
    if (!store_ || epoch <= 2) return;
    const auto& entries = loader_.entries();
    const int chunk = cfg_.train.batch_size;
    for (std::size_t first = 0; first < entries.size(); first += static_cast<std::size_t>(chunk)) {
      const std::size_t last = std::min(entries.size(), first + static_cast<std::size_t>(chunk));
      std::vector<Tensor> images;
      for (std::size_t i = first; i < last; ++i) images.push_back(loader_.sample(i).image);
      const Tensor pred = model_->predict(stack(images));
      for (std::size_t i = first; i < last; ++i) {
        const PseudoMaskRecord prev = store_->get(entries[i].id);
        const Tensor p = pred.sample(static_cast<int>(i - first));
        store_->put(update_mask(prev, resize_soft(p, prev.mask.shape().h), epoch, cfg_.pseudo.lambda));
      }
    }
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.config_json = to_json(cfg_).dump();
    ck.config_digest = digest_;
    ck.epoch = epochs_done();
    ck.step = step_;
    ck.rng_state = plan_rng_state(cfg_.train.seed, static_cast<int>(step_ / loader_.batches_per_epoch()) + 1);
    ck.parameters = parameter_map(*model_);
    ck.buffers = buffer_map(*model_);
    ck.optimizer = optimizer_.state();
    return ck;
  }

  void save(const std::filesystem::path& path) const { save_checkpoint(path, checkpoint()); }

  /// Restores model, optimizer and step counter. The history file is cut back
  /// to the restored step.
  void resume(const Checkpoint& ck) {
    if (ck.config_digest != digest_) {
      throw ConfigError("checkpoint config digest " + ck.config_digest + " does not match " + digest_);
    }
    load_module_state(*model_, ck.parameters, ck.buffers);
    optimizer_.load_state(ck.optimizer);
    step_ = ck.step;
    const int epoch = static_cast<int>(step_ / loader_.batches_per_epoch()) + 1;
    if (ck.rng_state != plan_rng_state(cfg_.train.seed, epoch)) {
      throw ConfigError("checkpoint generator state does not match seed/epoch");
    }
    history_.clear();
    if (opts_.write_files) {
      std::ifstream in(run_dir() / "history.csv");
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        StepRecord r;
        std::istringstream ls(line);
        char comma;
        long long s = 0;
        ls >> s >> comma >> r.loss.l_bce >> comma >> r.loss.l_ssim >> comma >> r.loss.l_iou >> comma >> r.loss.l_neg >>
            comma >> r.loss.total;
        if (!ls || s > step_) break;
        r.step = s;
        r.epoch = static_cast<int>((s - 1) / loader_.batches_per_epoch()) + 1;
        history_.push_back(r);
      }
      rewrite_history();
    }
  }

 private:
  std::string divergence_message(const StepRecord& r, const char* what) const {
    std::ostringstream os;
    os << "non-finite " << what << " at step " << r.step << " (epoch " << r.epoch << "): l_bce=" << r.loss.l_bce
       << " l_ssim=" << r.loss.l_ssim << " l_iou=" << r.loss.l_iou << " l_neg=" << r.loss.l_neg
       << " grad_norm=" << r.grad_norm;
    return os.str();
  }

  void start_history() {
    if (!opts_.write_files) return;
    rewrite_history();
  }

  void rewrite_history() {
    std::filesystem::create_directories(run_dir());
    std::ofstream out(run_dir() / "history.csv", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (run_dir() / "history.csv").string());
    out << history_header() << '\n';
    for (const auto& r : history_) out << history_row(r) << '\n';
  }

  void append_history(const StepRecord& r) {
    if (!opts_.write_files) return;
    std::ofstream out(run_dir() / "history.csv", std::ios::app);
    out << history_row(r) << '\n';
    if (!out) throw IoError("cannot append to history.csv");
  }

  void end_epoch(int epoch) {
    refresh_pseudo_masks(epoch);
    if (opts_.log) {
      const StepRecord& r = history_.back();
      *opts_.log << "epoch " << epoch << " step " << r.step << " total " << r.loss.total << " l_d " << r.loss.l_d()
                 << '\n';
    }
    if (opts_.write_files && (epoch % cfg_.train.checkpoint_every == 0 || epoch == cfg_.train.epochs)) {
      save(checkpoint_path(epoch));
    }
  }

  Config cfg_;
  std::string digest_;
  TrainerOptions opts_;
  std::unique_ptr<SeamlessModel> model_;
  MixedLoader loader_;
  Sgd optimizer_;
  std::shared_ptr<MaskStore> store_;
  std::int64_t step_ = 0;
  std::vector<StepRecord> history_;
};

struct TrainResult {
  std::vector<StepRecord> history;
  std::filesystem::path last_checkpoint;
};

inline TrainResult train_supervised(const Config& cfg, std::vector<ManifestEntry> entries, TrainerOptions opts = {}) {
  if (cfg.train.mode != TrainMode::supervised) throw ConfigError("train_supervised needs train.mode = supervised");
  for (const auto& e : entries)
    if (!e.mask_path) throw NotFoundError("supervised training image '" + e.id + "' has no mask");
  Trainer t(cfg, std::move(entries), opts);
  t.fit();
  return {t.history(), opts.write_files ? t.checkpoint_path(cfg.train.epochs) : std::filesystem::path()};
}

inline TrainResult train_unsupervised(const Config& cfg, std::vector<ManifestEntry> entries, TrainerOptions opts = {}) {
  if (cfg.train.mode != TrainMode::unsupervised) throw ConfigError("train_unsupervised needs train.mode = unsupervised");
  Trainer t(cfg, std::move(entries), opts);
  t.require_pseudo_masks();
  t.fit();
  return {t.history(), opts.write_files ? t.checkpoint_path(cfg.train.epochs) : std::filesystem::path()};
}

// ---------------------------------------------------------------------------
// Inference

/// Model rebuilt from a checkpoint's own config and state.
inline std::unique_ptr<SeamlessModel> model_from_checkpoint(const Checkpoint& ck, Config* config_out = nullptr) {
  Config cfg = config_from_json(json::parse(ck.config_json));
  const bool pretrained = !cfg.backbone.weights_path.empty();
  Config build = cfg;
  build.backbone.weights_path.clear();  // weights come from the checkpoint
  auto model = std::make_unique<SeamlessModel>(build);
  model->backbone().set_pretrained(pretrained);
  load_module_state(*model, ck.parameters, ck.buffers);
  model->set_training(false);
  if (config_out) *config_out = cfg;
  return model;
}

/// Mean absolute error of eval-mode predictions against each entry's mask.
inline double dataset_mae(SeamlessModel& model, MixedLoader& loader) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < loader.entries().size(); ++i) {
    const Sample& s = loader.sample(i);
    if (s.mask.empty()) throw NotFoundError("no mask for '" + s.id + "'");
    const Tensor p = model.predict(s.image);
    for (std::size_t k = 0; k < p.size(); ++k) total += std::abs(p[k] - s.mask[k]);
    count += p.size();
  }
  return total / static_cast<double>(count);
}

/// Predicts one image at the model resolution and resizes back to native.
/// The model must already be in eval mode; safe to call from several threads.
inline Tensor predict_native(SeamlessModel& model, const Tensor& image, int image_size) {
  NoGradGuard no_grad;
  const Tensor input = resize_image(image, image_size);
  const Tensor t_act = model.forward(input).decoder.inference.t_act.value();
  const Shape s = image.shape();
  if (s.h == image_size && s.w == image_size) return t_act;
  Tensor out = ops::resize_bilinear(t_act, s.h, s.w);
  for (double& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

/// Writes <out_dir>/<stem>.png (8-bit) for every image in images_dir.
/// Returns the written paths in lexicographic stem order.
inline std::vector<std::string> infer_directory(SeamlessModel& model, int image_size, const std::string& images_dir,
                                                const std::string& out_dir, int jobs = 1) {
  const auto files = files_by_stem(images_dir);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw IoError("cannot create output directory " + out_dir);
  std::vector<std::pair<std::string, std::string>> work;
  for (const auto& [stem, path] : files) work.emplace_back(stem, path.string());
  std::vector<std::string> written(work.size());
  model.set_training(false);
  std::vector<std::exception_ptr> errors(work.size());
  auto run = [&](std::size_t i) {
    try {
      const Tensor image = image_io::read_rgb(work[i].second);
      const Tensor pred = predict_native(model, image, image_size);
      written[i] = (std::filesystem::path(out_dir) / (work[i].first + ".png")).string();
      image_io::write_gray8(written[i], pred);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const int n_jobs = std::max(1, jobs);
  if (n_jobs == 1) {
    for (std::size_t i = 0; i < work.size(); ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_jobs; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = static_cast<std::size_t>(t); i < work.size(); i += static_cast<std::size_t>(n_jobs)) run(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return written;
}

// ---------------------------------------------------------------------------
// Throughput

struct BenchReport {
  BackboneProfile profile = BackboneProfile::toy;
  int size = 0;
  int n = 0;
  std::size_t parameters = 0;            // every learnable scalar
  std::size_t inference_parameters = 0;  // backbone + decoder
  std::uint64_t macs = 0;                // per image, convolutions and affine maps
  double seconds = 0.0;
  double images_per_sec = 0.0;
};

inline BenchReport bench(SeamlessModel& model, BackboneProfile profile, int n, int size, std::uint64_t seed = 0) {
  if (n <= 0) throw Error("bench: n must be >= 1 (empty report)");
  validate_image(Tensor({1, 3, size, size}));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor image({1, 3, size, size});
  for (double& v : image.data()) v = u(rng);
  BenchReport r;
  r.profile = profile;
  r.size = size;
  r.n = n;
  r.parameters = model.parameter_count();
  r.inference_parameters = model.backbone().parameter_count() + model.decoder().parameter_count();
  r.macs = model.inference_macs(image);
  for (int i = 0; i < 3; ++i) model.predict(image);
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < n; ++i) model.predict(image);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.images_per_sec = r.seconds > 0.0 ? n / r.seconds : 0.0;
  return r;
}

}  // namespace seamless
