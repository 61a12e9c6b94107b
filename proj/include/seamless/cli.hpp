#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <openssl/evp.h>

#include "CLI11.hpp"
#include "seamless/engine.hpp"
#include "seamless/metrics.hpp"

namespace seamless::cli {

/// Bad invocation: unknown flag, missing or invalid config. Exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

inline std::string sha256_hex(const std::string& text) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

inline Config load_config_or_usage(const std::string& path) {
  if (!std::filesystem::exists(path)) throw UsageError("config file not found: " + path);
  try {
    return load_config(path);
  } catch (const ConfigError& e) {
    throw UsageError(path + ": " + e.what());
  }
}

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string resume;
  long long max_steps = -1;
  bool dry_run = false;
};

inline int run_train(const TrainArgs& a, Streams io) {
  const Config cfg = load_config_or_usage(a.config);
  const std::string digest = config_digest(cfg);
  io.out << "config digest: " << digest << '\n';
  std::vector<std::string> warnings;
  std::vector<ManifestEntry> entries;
  for (const auto& spec : cfg.datasets_with_role(DatasetRole::train)) {
    auto part = scan_dataset(spec, &warnings);
    io.out << "dataset " << spec.name << ": " << part.size() << " images\n";
    entries.insert(entries.end(), part.begin(), part.end());
  }
  for (const auto& spec : cfg.datasets_with_role(DatasetRole::eval)) {
    io.out << "dataset " << spec.name << " (eval): " << scan_dataset(spec, &warnings).size() << " images\n";
  }
  for (const auto& w : warnings) io.err << "warning: " << w << '\n';
  if (entries.empty()) throw UsageError("no training images in the configured datasets");
  if (cfg.train.mode == TrainMode::supervised) {
    for (const auto& e : entries)
      if (!e.mask_path) throw UsageError("supervised training needs masks_dir for '" + e.id + "'");
  }
  if (static_cast<std::size_t>(cfg.train.batch_size) > entries.size()) {
    throw UsageError("train.batch_size " + std::to_string(cfg.train.batch_size) + " exceeds " +
                     std::to_string(entries.size()) + " training images");
  }
  io.out << "training images: " << entries.size() << '\n';
  if (a.dry_run) return kExitOk;

  Trainer trainer(cfg, std::move(entries), {true, &io.out});
  if (!a.resume.empty()) {
    trainer.resume(load_checkpoint(a.resume));
    io.out << "resumed at step " << trainer.steps_done() << '\n';
  }
  trainer.fit(a.max_steps);
  const auto& h = trainer.history();
  if (!h.empty()) io.out << "final total " << h.back().loss.total << " l_d " << h.back().loss.l_d() << '\n';
  io.out << "run directory: " << trainer.run_dir().string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// infer

struct InferArgs {
  std::string checkpoint;
  std::string images_dir;
  std::string out_dir;
  int jobs = 1;
  bool dry_run = false;
};

inline int run_infer(const InferArgs& a, Streams io) {
  if (!std::filesystem::exists(a.checkpoint)) throw UsageError("checkpoint not found: " + a.checkpoint);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  io.out << "config digest: " << ck.config_digest << '\n';
  const auto files = files_by_stem(a.images_dir);
  io.out << "images: " << files.size() << '\n';
  if (a.dry_run) return kExitOk;
  Config cfg;
  auto model = model_from_checkpoint(ck, &cfg);
  const auto written = infer_directory(*model, cfg.train.image_size, a.images_dir, a.out_dir, a.jobs);
  io.out << "wrote " << written.size() << " maps to " << a.out_dir << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string pred_dir;
  std::string gt_dir;
  std::string metrics = "mae,fbeta,sm,em";
  std::string fbeta_variant = "max";
  std::string report = "json";
  std::string pr_out;
  std::string out;
  int jobs = 1;
  bool dry_run = false;
};

struct MetricSelection {
  bool mae = false, fbeta = false, sm = false, em = false;
};

inline MetricSelection parse_metrics(const std::string& list) {
  MetricSelection m;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "mae") {
      m.mae = true;
    } else if (item == "fbeta") {
      m.fbeta = true;
    } else if (item == "sm") {
      m.sm = true;
    } else if (item == "em") {
      m.em = true;
    } else {
      throw UsageError("--metrics: unknown metric '" + item + "' (expected mae,fbeta,sm,em)");
    }
  }
  if (!(m.mae || m.fbeta || m.sm || m.em)) throw UsageError("--metrics selects nothing");
  return m;
}

inline json report_row(const metrics::MetricsReport& r, const MetricSelection& sel) {
  auto pick = [](bool on, double v) { return on ? json(v) : json(nullptr); };
  return {{"id", r.id},
          {"mae", pick(sel.mae, r.mae)},
          {"f_beta", pick(sel.fbeta, r.f_beta)},
          {"s_measure", pick(sel.sm, r.s_measure)},
          {"e_measure", pick(sel.em, r.e_measure)}};
}

inline std::string csv_cell(bool on, double v) {
  if (!on) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Reports for every gt image, pairing pred files by stem. Images whose
/// ground truth is empty are skipped and their ids returned in *excluded.
inline std::vector<metrics::MetricsReport> evaluate_directories(const std::string& pred_dir, const std::string& gt_dir,
                                                                const MetricSelection& sel, metrics::FVariant variant,
                                                                int jobs, std::vector<std::string>* excluded,
                                                                std::ostream* warn = nullptr) {
  const auto preds = files_by_stem(pred_dir);
  const auto gts = files_by_stem(gt_dir);
  std::vector<std::pair<std::string, std::pair<std::string, std::string>>> work;
  for (const auto& [stem, gt] : gts) {
    auto it = preds.find(stem);
    if (it == preds.end()) throw OrphanImageError(stem, "no prediction for ground truth '" + stem + "' in " + pred_dir);
    work.push_back({stem, {it->second.string(), gt.string()}});
  }
  if (warn)
    for (const auto& [stem, _] : preds)
      if (!gts.count(stem)) *warn << "warning: prediction '" << stem << "' has no ground truth\n";

  std::vector<std::optional<metrics::MetricsReport>> slots(work.size());
  std::vector<std::exception_ptr> errors(work.size());
  auto run = [&](std::size_t i) {
    try {
      metrics::EvalPair p;
      p.id = work[i].first;
      p.gt = metrics::binarize_gt(image_io::read_gray(work[i].second.second));
      p.pred = image_io::read_gray(work[i].second.first);
      if (!(p.pred.shape() == p.gt.shape())) {
        p.pred = ops::resize_bilinear(p.pred, p.gt.shape().h, p.gt.shape().w);
        for (double& v : p.pred.data()) v = std::clamp(v, 0.0, 1.0);
      }
      if (p.gt.sum() == 0.0) return;  // excluded
      metrics::MetricsReport r;
      r.id = p.id;
      r.variant = variant;
      r.pr_curve = metrics::pr_curve(p);
      if (sel.fbeta) {
        r.f_beta = variant == metrics::FVariant::adaptive ? metrics::f_measure(p, variant)
                                                          : metrics::f_measure_from_curve(r.pr_curve, variant);
      }
      if (sel.mae) r.mae = metrics::mae(p);
      if (sel.sm) r.s_measure = metrics::s_measure(p);
      if (sel.em) r.e_measure = metrics::e_measure(p);
      slots[i] = std::move(r);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const int n_jobs = std::max(1, jobs);
  std::vector<std::thread> pool;
  for (int t = 0; t < n_jobs; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = static_cast<std::size_t>(t); i < work.size(); i += static_cast<std::size_t>(n_jobs)) run(i);
    });
  }
  for (auto& th : pool) th.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<metrics::MetricsReport> out;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i]) {
      out.push_back(std::move(*slots[i]));
    } else if (excluded) {
      excluded->push_back(work[i].first);
    }
  }
  return out;
}

inline int run_evaluate(const EvaluateArgs& a, Streams io) {
  const MetricSelection sel = parse_metrics(a.metrics);
  metrics::FVariant variant;
  try {
    variant = metrics::parse_f_variant(a.fbeta_variant);
  } catch (const ConfigError& e) {
    throw UsageError(std::string("--fbeta-variant: ") + e.what());
  }
  if (a.report != "json" && a.report != "csv") throw UsageError("--report must be json or csv");
  const json resolved = {{"pred_dir", a.pred_dir}, {"gt_dir", a.gt_dir},         {"metrics", a.metrics},
                         {"fbeta_variant", a.fbeta_variant}, {"report", a.report}};
  io.err << "config digest: " << sha256_hex(resolved.dump()) << '\n';
  if (!std::filesystem::is_directory(a.pred_dir)) throw UsageError("--pred-dir not found: " + a.pred_dir);
  if (!std::filesystem::is_directory(a.gt_dir)) throw UsageError("--gt-dir not found: " + a.gt_dir);
  if (a.dry_run) {
    io.err << "predictions: " << files_by_stem(a.pred_dir).size() << ", ground truth: " << files_by_stem(a.gt_dir).size()
           << '\n';
    return kExitOk;
  }
  std::vector<std::string> excluded;
  const auto reports = evaluate_directories(a.pred_dir, a.gt_dir, sel, variant, a.jobs, &excluded, &io.err);
  if (!excluded.empty()) io.err << "excluded " << excluded.size() << " image(s) with empty ground truth\n";
  const metrics::MetricsReport mean = metrics::aggregate(reports, static_cast<int>(excluded.size()));

  std::ostringstream text;
  if (a.report == "json") {
    json rows = json::array();
    for (const auto& r : reports) rows.push_back(report_row(r, sel));
    rows.push_back(report_row(mean, sel));
    const json doc = {{"rows", rows},
                      {"excluded_empty_gt", excluded.size()},
                      {"excluded_ids", excluded},
                      {"f_beta_variant", metrics::to_string(variant)}};
    text << doc.dump(2) << '\n';
  } else {
    text << "id,mae,f_beta,s_measure,e_measure\n";
    auto line = [&](const metrics::MetricsReport& r) {
      text << r.id << ',' << csv_cell(sel.mae, r.mae) << ',' << csv_cell(sel.fbeta, r.f_beta) << ','
           << csv_cell(sel.sm, r.s_measure) << ',' << csv_cell(sel.em, r.e_measure) << '\n';
    };
    for (const auto& r : reports) line(r);
    line(mean);
  }
  if (a.out.empty()) {
    io.out << text.str();
  } else {
    std::ofstream f(a.out);
    if (!f) throw IoError("cannot write " + a.out);
    f << text.str();
  }
  if (!a.pr_out.empty()) {
    std::ofstream f(a.pr_out);
    if (!f) throw IoError("cannot write " + a.pr_out);
    f << "threshold,precision,recall\n";
    char buf[128];
    for (int k = 0; k < metrics::kThresholds; ++k) {
      std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", k, mean.pr_curve[k].precision, mean.pr_curve[k].recall);
      f << buf;
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// pseudo-init / pseudo-update

struct PseudoArgs {
  std::string config;
  std::string checkpoint;
  int epoch = 0;
  bool dry_run = false;
};

inline std::vector<ManifestEntry> train_manifest(const Config& cfg, Streams io) {
  std::vector<std::string> warnings;
  auto entries = scan_datasets(cfg.datasets_with_role(DatasetRole::train), &warnings);
  for (const auto& w : warnings) io.err << "warning: " << w << '\n';
  io.out << "training images: " << entries.size() << '\n';
  return entries;
}

inline std::filesystem::path pseudo_root(const Config& cfg) {
  return std::filesystem::path(cfg.train.runs_dir) / cfg.name / "pseudo_masks";
}

/// Writes epoch-0 masks for every training image from dense features
/// (pca1x1) or from precomputed mask files (file).
inline int run_pseudo_init(const PseudoArgs& a, Streams io) {
  const Config cfg = load_config_or_usage(a.config);
  io.out << "config digest: " << config_digest(cfg) << '\n';
  const auto entries = train_manifest(cfg, io);
  const int S = cfg.train.image_size;
  std::vector<std::filesystem::path> sources;
  for (const auto& e : entries) {
    if (cfg.pseudo.source == MaskSource::pca1x1) {
      if (cfg.pseudo.features_path.empty()) throw UsageError("pseudo.features_path is required for source pca1x1");
      sources.push_back(std::filesystem::path(cfg.pseudo.features_path) / (e.id + ".sdfg"));
    } else {
      if (cfg.pseudo.masks_path.empty()) throw UsageError("pseudo.masks_path is required for source file");
      const auto dir = std::filesystem::path(cfg.pseudo.masks_path) / std::filesystem::path(e.id).parent_path();
      const auto by_stem = files_by_stem(dir);
      auto it = by_stem.find(e.stem);
      if (it == by_stem.end()) throw OrphanImageError(e.stem, "no initial mask for '" + e.id + "' in " + dir.string());
      sources.push_back(it->second);
    }
    if (!std::filesystem::exists(sources.back())) throw NotFoundError("missing " + sources.back().string());
  }
  io.out << "mask source: " << to_string(cfg.pseudo.source) << '\n';
  if (a.dry_run) return kExitOk;

  MaskStore store(pseudo_root(cfg), cfg.pseudo.lambda);
  if (cfg.pseudo.source == MaskSource::pca1x1) {
    std::vector<DenseFeatureGrid> grids;
    for (const auto& p : sources) grids.push_back(read_feature_grid(p.string()));
    const MaskHead head = fit_pca_head(grids);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      store.put({entries[i].id, initial_mask(grids[i], head, S, S), 0, MaskOrigin::initial});
    }
  } else {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      store.put({entries[i].id, resize_soft(image_io::read_gray(sources[i].string()), S), 0, MaskOrigin::initial});
    }
  }
  io.out << "wrote " << entries.size() << " initial masks under " << store.root().string() << '\n';
  return kExitOk;
}

/// Applies one moving-average refresh with a checkpoint's predictions.
inline int run_pseudo_update(const PseudoArgs& a, Streams io) {
  const Config cfg = load_config_or_usage(a.config);
  io.out << "config digest: " << config_digest(cfg) << '\n';
  if (a.epoch < 1) throw UsageError("--epoch must be >= 1");
  if (!std::filesystem::exists(a.checkpoint)) throw UsageError("checkpoint not found: " + a.checkpoint);
  const auto entries = train_manifest(cfg, io);
  const auto root = pseudo_root(cfg);
  if (!std::filesystem::exists(root / "manifest.json")) throw NotFoundError("no pseudo-mask store at " + root.string());
  if (a.dry_run) return kExitOk;
  MaskStore store(root, cfg.pseudo.lambda);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  auto model = model_from_checkpoint(ck);
  int changed = 0;
  for (const auto& e : entries) {
    const PseudoMaskRecord prev = store.get(e.id);
    if (a.epoch <= 2) continue;
    const Tensor image = resize_image(image_io::read_rgb(e.image_path), cfg.train.image_size);
    const Tensor pred = resize_soft(model->predict(image), prev.mask.shape().h);
    store.put(update_mask(prev, pred, a.epoch, cfg.pseudo.lambda));
    ++changed;
  }
  io.out << "updated " << changed << " masks at epoch " << a.epoch << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::string config;
  std::string checkpoint;
  int n = 10;
  int size = 0;
  bool dry_run = false;
};

inline int run_bench(const BenchArgs& a, Streams io) {
  if (a.config.empty() == a.checkpoint.empty()) throw UsageError("bench needs exactly one of --config, --checkpoint");
  Config cfg;
  std::unique_ptr<SeamlessModel> model;
  if (!a.checkpoint.empty()) {
    if (!std::filesystem::exists(a.checkpoint)) throw UsageError("checkpoint not found: " + a.checkpoint);
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    io.err << "config digest: " << ck.config_digest << '\n';
    if (a.dry_run) return kExitOk;
    model = model_from_checkpoint(ck, &cfg);
  } else {
    cfg = load_config_or_usage(a.config);
    io.err << "config digest: " << config_digest(cfg) << '\n';
    if (a.dry_run) return kExitOk;
    model = std::make_unique<SeamlessModel>(cfg);
  }
  const int size = a.size > 0 ? a.size : cfg.train.image_size;
  const BenchReport r = bench(*model, cfg.backbone.profile, a.n, size);
  const json doc = {{"profile", to_string(r.profile)},
                    {"size", r.size},
                    {"n", r.n},
                    {"parameters", r.parameters},
                    {"inference_parameters", r.inference_parameters},
                    {"macs", r.macs},
                    {"seconds", r.seconds},
                    {"images_per_sec", r.images_per_sec}};
  io.out << doc.dump(2) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// dispatch

/// Parses argv and runs one subcommand. Returns 0 on success, 2 on usage
/// errors and 1 on runtime errors.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Unified salient / camouflaged object detection", "seamless"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "train a model from a config file");
  c_train->add_option("--config", train.config, "TOML or JSON config")->required();
  c_train->add_option("--resume", train.resume, "checkpoint to continue from");
  c_train->add_option("--max-steps", train.max_steps, "stop after this many steps");
  c_train->add_flag("--dry-run", train.dry_run, "validate config and datasets only");

  InferArgs infer;
  auto* c_infer = app.add_subcommand("infer", "write prediction maps for a directory of images");
  c_infer->add_option("--checkpoint", infer.checkpoint)->required();
  c_infer->add_option("--images-dir", infer.images_dir)->required();
  c_infer->add_option("--out-dir", infer.out_dir)->required();
  c_infer->add_option("--jobs", infer.jobs)->check(CLI::PositiveNumber);
  c_infer->add_flag("--dry-run", infer.dry_run);

  EvaluateArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "score prediction maps against ground truth");
  c_eval->add_option("--pred-dir", ev.pred_dir)->required();
  c_eval->add_option("--gt-dir", ev.gt_dir)->required();
  c_eval->add_option("--metrics", ev.metrics, "comma list of mae,fbeta,sm,em");
  c_eval->add_option("--fbeta-variant", ev.fbeta_variant, "max|mean|adaptive");
  c_eval->add_option("--report", ev.report, "json|csv");
  c_eval->add_option("--pr-out", ev.pr_out, "CSV of the dataset-mean PR curve");
  c_eval->add_option("--out", ev.out, "write the report here instead of stdout");
  c_eval->add_option("--jobs", ev.jobs)->check(CLI::PositiveNumber);
  c_eval->add_flag("--dry-run", ev.dry_run);

  PseudoArgs pinit;
  auto* c_pinit = app.add_subcommand("pseudo-init", "write epoch-0 pseudo masks");
  c_pinit->add_option("--config", pinit.config)->required();
  c_pinit->add_flag("--dry-run", pinit.dry_run);

  PseudoArgs pupd;
  auto* c_pupd = app.add_subcommand("pseudo-update", "blend stored pseudo masks with a checkpoint's predictions");
  c_pupd->add_option("--config", pupd.config)->required();
  c_pupd->add_option("--checkpoint", pupd.checkpoint)->required();
  c_pupd->add_option("--epoch", pupd.epoch)->required();
  c_pupd->add_flag("--dry-run", pupd.dry_run);

  BenchArgs bn;
  auto* c_bench = app.add_subcommand("bench", "parameter count, MACs and throughput");
  c_bench->add_option("--config", bn.config);
  c_bench->add_option("--checkpoint", bn.checkpoint);
  c_bench->add_option("--n", bn.n, "timed runs after 3 warm-up runs");
  c_bench->add_option("--size", bn.size, "square input size (default: train.image_size)");
  c_bench->add_flag("--dry-run", bn.dry_run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    CLI::App* sub = nullptr;
    for (CLI::App* s : app.get_subcommands()) sub = s;
    out << (sub ? sub->help() : app.help());
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    CLI::App* sub = nullptr;
    for (CLI::App* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return kExitUsage;
  }

  const Streams io{out, err};
  try {
    if (*c_train) return run_train(train, io);
    if (*c_infer) return run_infer(infer, io);
    if (*c_eval) return run_evaluate(ev, io);
    if (*c_pinit) return run_pseudo_init(pinit, io);
    if (*c_pupd) return run_pseudo_update(pupd, io);
    if (*c_bench) return run_bench(bn, io);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace seamless::cli
