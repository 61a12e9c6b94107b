// Acceptance runner. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "metric_oracles.hpp"
#include "seamless/seamless.hpp"
#include "synthetic.hpp"

using namespace seamless;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects the first few failure messages of one criterion.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    if (failures_++ < 3) notes_ << (notes_.tellp() > 0 ? "; " : "") << what;
  }
  void note(const std::string& s) { info_ << (info_.tellp() > 0 ? ", " : "") << s; }
  Outcome done() const {
    std::string d = info_.str();
    if (failures_ > 0) d += (d.empty() ? "" : "; ") + std::to_string(failures_) + " failure(s): " + notes_.str();
    return {failures_ == 0, d};
  }

 private:
  int failures_ = 0;
  std::ostringstream notes_, info_;
};

std::string fmt(double v, const char* spec = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double mean_abs(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

// The 8-image synthetic set shared by the training criteria.
struct SyntheticRun {
  fs::path root;
  Config cfg;
  std::vector<ManifestEntry> entries;
};

SyntheticRun synthetic_run(const std::string& name, TrainMode mode, int size = 64) {
  SyntheticRun r;
  r.root = synth::scratch_dir("acceptance_" + name);
  synth::write_synthetic_set(r.root / "data", 8, size, 1);
  r.cfg.name = name;
  r.cfg.backbone.profile = BackboneProfile::toy;
  r.cfg.train.mode = mode;
  r.cfg.train.image_size = size;
  r.cfg.train.seed = 7;
  r.cfg.train.runs_dir = (r.root / "runs").string();
  r.cfg.train.checkpoint_every = 1000;
  DatasetSpec d{"synthetic", (r.root / "data" / "images").string(), (r.root / "data" / "masks").string(),
                DatasetRole::train};
  r.cfg.datasets = {d};
  r.entries = scan_dataset(d);
  return r;
}

// ---------------------------------------------------------------------------

Outcome shape_suite() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  for (BackboneProfile profile : {BackboneProfile::toy, BackboneProfile::full}) {
    for (int size : {64, 320}) {
      Config cfg;
      cfg.backbone.profile = profile;
      cfg.train.image_size = size;
      SeamlessModel model(cfg);
      model.set_training(false);
      NoGradGuard no_grad;
      std::mt19937_64 rng(1);
      const Tensor image = testing::random_tensor({1, 3, size, size}, rng, 0.0, 1.0);
      const auto out = model.forward(image);
      const auto ch = profile_channels(profile);
      const int width = decoder_width(profile);
      const std::string tag = to_string(profile) + "@" + std::to_string(size);
      for (int i = 0; i < 5; ++i) {
        const int s = size >> (i + 1);
        c.expect(out.pyramid.levels[i].shape() == Shape{1, ch[i], s, s}, tag + " E" + std::to_string(i));
        c.expect(out.decoder.unified.levels[i].shape() == Shape{1, width, s, s}, tag + " F" + std::to_string(i));
      }
      c.expect(out.decoder.context.fcex1.shape() == Shape{1, width, size / 4, size / 4}, tag + " fcex1");
      c.expect(out.decoder.context.fcex2.shape() == Shape{1, width, size / 2, size / 2}, tag + " fcex2");
      c.expect(out.decoder.context.fcex.shape() == Shape{1, width, size / 2, size / 2}, tag + " fcex");
      c.expect(out.decoder.inference.t_half.shape() == Shape{1, 1, size / 2, size / 2}, tag + " t_half");
      const Tensor& t_act = out.decoder.inference.t_act.value();
      c.expect(t_act.shape() == Shape{1, 1, size, size}, tag + " t_act");
      bool in_range = true;
      for (double v : t_act.data()) in_range = in_range && v >= 0.0 && v <= 1.0;
      c.expect(in_range, tag + " t_act outside [0, 1]");
      const Var fg = model.foreground(out);
      const Var bg = model.background(out, Tensor({1, 1, size, size}));
      c.expect(fg.shape() == Shape{1, semantic_dim(profile), 1, 1}, tag + " v^f");
      c.expect(bg.shape() == fg.shape(), tag + " v^b");
    }
  }
  const double secs = seconds_since(t0);
  c.expect(secs < 60.0, "runtime " + fmt(secs) + " s >= 60 s");
  c.note("toy+full at 64 and 320 in " + fmt(secs, "%.1f") + " s");
  return c.done();
}

Outcome gradient_suite() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  auto record = [&](const std::string& name, const testing::GradCheckResult& r) {
    worst = std::max(worst, r.max_rel_error);
    c.expect(r.max_rel_error < 1e-3, name + " rel err " + fmt(r.max_rel_error) + " (" + r.worst + ")");
  };
  const Shape s{2, 1, 16, 16};
  const std::vector<std::pair<std::string, std::function<Var(const Var&, const Tensor&)>>> single{
      {"L_B", [](const Var& p, const Tensor& t) { return bce_loss(p, t); }},
      {"L_S", [](const Var& p, const Tensor& t) { return ssim_loss(p, t); }},
      {"L_I", [](const Var& p, const Tensor& t) { return iou_loss(p, t); }},
  };
  std::mt19937_64 rng(31);
  for (const auto& [name, loss] : single) {
    const Tensor target = testing::random_binary(s, rng);
    Var pred(testing::random_tensor(s, rng, 0.05, 0.95), true);
    backward(loss(pred, target));
    const Tensor analytic = pred.grad();
    auto f = [&] {
      NoGradGuard g;
      return loss(pred, target).value()[0];
    };
    record(name, testing::check_gradient(f, pred.mutable_value(), analytic));
  }

  {
    Var fg(testing::random_tensor({4, 16, 1, 1}, rng), true);
    Var bg(testing::random_tensor({4, 16, 1, 1}, rng), true);
    backward(contrastive_loss(fg, bg, 1e-6));
    const Tensor gf = fg.grad(), gb = bg.grad();
    auto f = [&] {
      NoGradGuard g;
      return contrastive_loss(fg, bg, 1e-6).value()[0];
    };
    record("L_NEG v^f", testing::check_gradient(f, fg.mutable_value(), gf));
    record("L_NEG v^b", testing::check_gradient(f, bg.mutable_value(), gb));
  }

  {
    ForegroundHead fg_head(FgHeadKind::pool8, 16, 0, rng);
    BackgroundHead bg_head(4, 16, 1e-6, rng);
    Var z(testing::random_tensor(s, rng, -2.0, 2.0), true);
    Var e(testing::random_tensor({2, 4, 16, 16}, rng), true);
    const Tensor mask = testing::random_binary(s, rng, 0.4);
    auto objective = [&] {
      return total_loss(ops::sigmoid(z), mask, fg_head.forward(z), bg_head.forward(e, mask), true).total;
    };
    backward(objective());
    auto f = [&] {
      NoGradGuard g;
      return objective().value()[0];
    };
    std::vector<std::pair<std::string, Var*>> all{{"z", &z}, {"E", &e}};
    for (auto& p : fg_head.named_parameters()) all.emplace_back("fg." + p.name, p.item);
    for (auto& p : bg_head.named_parameters()) all.emplace_back("bg." + p.name, p.item);
    for (auto& [name, v] : all) {
      const Tensor analytic = v->grad();
      record("total/" + name, testing::check_gradient(f, v->mutable_value(), analytic));
    }
  }
  const double secs = seconds_since(t0);
  c.expect(secs < 300.0, "runtime " + fmt(secs) + " s >= 300 s");
  c.note("max rel err " + fmt(worst) + " in " + fmt(secs, "%.1f") + " s");
  return c.done();
}

Outcome cdp_suite() {
  Check c;
  std::mt19937_64 rng(41);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.01, 100.0);
  const double eps = 1e-6;
  double drift = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + trial % 5, d = 16;
    Tensor f({n, d, 1, 1}), b({n, d, 1, 1});
    for (double& v : f.data()) v = normal(rng);
    for (double& v : b.data()) v = normal(rng);
    const double base = contrastive_loss(Var(f), Var(b), eps).value()[0];
    Tensor f2 = f, b2 = b;
    f2 *= scale(rng);
    b2 *= scale(rng);
    drift = std::max(drift, std::abs(contrastive_loss(Var(f2), Var(b2), eps).value()[0] - base));
  }
  c.expect(drift <= 1e-6, "scale drift " + fmt(drift));

  double lo = 1e9, hi = -1e9;
  for (int k = 0; k <= 2000; ++k) {
    const double cos = -1.0 + 2.0 * k / 2000.0;
    const double t = contrastive_term(cos, eps);
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  c.expect(lo >= -std::log(2.0) - 1e-12 && hi <= -std::log(eps) + 1e-12, "range [" + fmt(lo) + ", " + fmt(hi) + "]");
  c.expect(std::abs(lo + std::log(2.0)) < 1e-12 && std::abs(hi + std::log(eps)) < 1e-12, "range endpoints not attained");

  // Monotonicity through the vector API with constructed cosines.
  bool increasing = true;
  double prev = -1e300;
  const int d = 8;
  for (int k = 0; k <= 100; ++k) {
    const double cos = -1.0 + 2.0 * k / 100.0;
    const double sin = std::sqrt(std::max(0.0, 1.0 - cos * cos));
    SemanticVector fv{std::vector<double>(d, 0.0), VectorKind::foreground, 0};
    SemanticVector bv{std::vector<double>(d, 0.0), VectorKind::background, 0};
    bv.values[0] = 2.0;
    fv.values[0] = 3.0 * cos;
    fv.values[1] = 3.0 * sin;
    const double loss = contrastive_loss(std::span<const SemanticVector>(&fv, 1), std::span<const SemanticVector>(&bv, 1), eps);
    if (k > 0 && !(loss > prev)) increasing = false;
    prev = loss;
  }
  c.expect(increasing, "not strictly increasing on the 101-point grid");
  c.note("scale drift " + fmt(drift) + ", range [" + fmt(lo) + ", " + fmt(hi) + "], 101-point grid increasing");
  return c.done();
}

Outcome metric_suite() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  double err_exact = 0.0, err_soft = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const metrics::EvalPair p = oracle::random_pair(rng);
    err_exact = std::max(err_exact, std::abs(metrics::mae(p) - oracle::oracle_mae(p.pred, p.gt)));
    const auto curve = metrics::pr_curve(p);
    for (int k = 0; k < metrics::kThresholds; ++k) {
      const auto o = oracle::oracle_pr(p.pred, p.gt, k);
      err_exact = std::max({err_exact, std::abs(curve[k].precision - o.precision), std::abs(curve[k].recall - o.recall)});
    }
    err_soft = std::max({err_soft,
                         std::abs(metrics::f_measure(p, metrics::FVariant::max) - oracle::oracle_fmax(p.pred, p.gt)),
                         std::abs(metrics::f_measure(p, metrics::FVariant::mean) - oracle::oracle_fmax(p.pred, p.gt, true)),
                         std::abs(metrics::f_measure(p, metrics::FVariant::adaptive) -
                                  oracle::oracle_f_adaptive(p.pred, p.gt)),
                         std::abs(metrics::s_measure(p) - oracle::oracle_s(p.pred, p.gt)),
                         std::abs(metrics::e_measure(p) - oracle::oracle_e(p.pred, p.gt))});
  }
  c.expect(err_exact <= 1e-12, "MAE/PR error " + fmt(err_exact));
  c.expect(err_soft <= 1e-6, "F/S/E error " + fmt(err_soft));

  double self_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    metrics::EvalPair p = oracle::random_pair(rng);
    p.pred = p.gt;
    self_err = std::max({self_err, std::abs(metrics::s_measure(p) - 1.0), std::abs(metrics::e_measure(p) - 1.0),
                         std::abs(metrics::f_measure(p, metrics::FVariant::max) - 1.0)});
  }
  c.expect(self_err <= 1e-6, "self-similarity error " + fmt(self_err));
  const double secs = seconds_since(t0);
  c.expect(secs < 120.0, "runtime " + fmt(secs) + " s");
  c.note("100 pairs: exact err " + fmt(err_exact) + ", F/S/E err " + fmt(err_soft) + ", self err " + fmt(self_err));
  return c.done();
}

Outcome pseudo_update_suite() {
  Check c;
  const double lam = 0.4;
  std::mt19937_64 rng(51);
  const Shape s{1, 1, 16, 16};
  auto linf = [](const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
  };
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor pm0 = testing::random_tensor(s, rng, 0.0, 1.0);
    const Tensor t = testing::random_tensor(s, rng, 0.0, 1.0);
    const PseudoMaskRecord prev{"x", pm0, 0, MaskOrigin::initial};

    for (int e : {1, 2}) c.expect(linf(update_mask(prev, t, e, lam).mask, pm0) == 0.0, "epoch <= 2 changed the mask");

    const Tensor fixed = update_mask({"x", t, 2, MaskOrigin::updated}, t, 3, lam).mask;
    c.expect(linf(fixed, t) <= 1e-15, "fixed point moved");

    const Tensor next = update_mask(prev, t, 3, lam).mask;
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double a = std::min(pm0[i], t[i]), b = std::max(pm0[i], t[i]);
      if (next[i] < a - 1e-15 || next[i] > b + 1e-15) {
        c.expect(false, "not between the inputs");
        break;
      }
    }

    const double d0 = linf(pm0, t);
    PseudoMaskRecord cur = prev;
    double worst = 0.0;
    for (int k = 1; k <= 10; ++k) {
      cur = update_mask(cur, t, k, lam);
      const double expected = k <= 2 ? d0 : std::pow(lam, k - 2) * d0;
      worst = std::max(worst, std::abs(linf(cur.mask, t) - expected));
    }
    c.expect(worst <= 1e-12 * std::max(d0, 1e-300), "geometric rate off by " + fmt(worst));
  }
  c.note("freeze, fixed point, convexity and lambda^(k-2) contraction over 10 epochs, 50 trials");
  return c.done();
}

Outcome supervised_smoke() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticRun run = synthetic_run("supervised", TrainMode::supervised);
  run.cfg.train.lr = 0.02;
  run.cfg.train.batch_size = 4;
  run.cfg.train.epochs = 100;  // 2 steps per epoch, 200 steps
  Trainer t(run.cfg, run.entries, {false, nullptr});
  t.fit();
  const auto& h = t.history();
  c.expect(h.size() == 200, "ran " + std::to_string(h.size()) + " steps");
  // One epoch covers all 8 images; compare the first and the last epoch.
  const double first = (h[0].loss.l_d() + h[1].loss.l_d()) / 2.0;
  const double last = (h[h.size() - 2].loss.l_d() + h[h.size() - 1].loss.l_d()) / 2.0;
  const double mae = dataset_mae(t.model(), t.loader());
  const double secs = seconds_since(t0);
  c.expect(last < 0.3 * first, "L_D ratio " + fmt(last / first));
  c.expect(mae < 0.10, "train MAE " + fmt(mae));
  c.expect(secs < 600.0, "runtime " + fmt(secs) + " s");
  c.note("L_D " + fmt(first) + " -> " + fmt(last) + " (ratio " + fmt(last / first) + "), MAE " + fmt(mae) + ", " +
         fmt(secs, "%.1f") + " s");
  return c.done();
}

// GT dilated by a disc of the given radius, then each pixel set to 1 with
// probability `salt`.
Tensor corrupt(const Tensor& gt, int radius, double salt, std::mt19937_64& rng) {
  const int h = gt.shape().h, w = gt.shape().w;
  Tensor out(gt.shape());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double m = 0.0;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (dx * dx + dy * dy > radius * radius || yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          m = std::max(m, gt.at(0, 0, yy, xx));
        }
      out.at(0, 0, y, x) = m;
    }
  std::bernoulli_distribution b(salt);
  for (double& v : out.data())
    if (b(rng)) v = 1.0;
  return out;
}

Outcome unsupervised_smoke() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticRun run = synthetic_run("unsupervised", TrainMode::unsupervised, 128);
  run.cfg.train.lr = 0.1;
  run.cfg.train.batch_size = 1;
  run.cfg.train.epochs = 5;
  Trainer t(run.cfg, run.entries, {false, nullptr});
  std::mt19937_64 rng(99);
  std::vector<Tensor> pm0;
  for (std::size_t i = 0; i < run.entries.size(); ++i) {
    pm0.push_back(corrupt(t.loader().sample(i).mask, 3, 0.2, rng));
    t.pseudo_store()->put({run.entries[i].id, pm0.back(), 0, MaskOrigin::initial});
  }
  std::vector<double> maes;
  for (int e = 1; e <= 5; ++e) {
    t.fit(t.loader().batches_per_epoch());
    maes.push_back(dataset_mae(t.model(), t.loader()));
  }
  int closer = 0;
  double l1_pm0 = 0.0, l1_pm5 = 0.0;
  for (std::size_t i = 0; i < run.entries.size(); ++i) {
    const Tensor& gt = t.loader().sample(i).mask;
    const PseudoMaskRecord r = t.pseudo_store()->get(run.entries[i].id);
    const double a = mean_abs(r.mask, gt), b = mean_abs(pm0[i], gt);
    l1_pm5 += a / 8.0;
    l1_pm0 += b / 8.0;
    closer += a < b;
  }
  const double secs = seconds_since(t0);
  c.expect(maes.back() <= maes.front(), "MAE epoch 5 " + fmt(maes.back()) + " > epoch 1 " + fmt(maes.front()));
  c.expect(closer >= 6, std::to_string(closer) + "/8 stored masks closer to GT than PM0");
  c.expect(secs < 900.0, "runtime " + fmt(secs) + " s");
  c.note("MAE epoch 1 " + fmt(maes.front()) + " -> epoch 5 " + fmt(maes.back()) + ", mean L1 PM0 " + fmt(l1_pm0) +
         " vs PM5 " + fmt(l1_pm5) + ", closer " + std::to_string(closer) + "/8, " + fmt(secs, "%.1f") + " s");
  return c.done();
}

Outcome ablation_suite() {
  Check c;
  SyntheticRun run = synthetic_run("ablation", TrainMode::supervised);
  run.cfg.train.lr = 0.02;
  run.cfg.train.batch_size = 4;
  run.cfg.train.epochs = 2;
  {
    Config off = run.cfg;
    off.cdp.enabled = false;
    Trainer t(off, run.entries, {false, nullptr});
    bool zero = true;
    for (const auto& r : t.fit()) zero = zero && r.loss.l_neg == 0.0 && r.loss.total == r.loss.l_d();
    c.expect(zero, "l_neg non-zero with cdp.enabled=false");
  }
  for (int level = 0; level <= 4; ++level) {
    Config cfg = run.cfg;
    cfg.cdp.bg_level = level;
    try {
      Trainer t(cfg, run.entries, {false, nullptr});
      const auto& h = t.fit();
      c.expect(h.size() == 4 && std::isfinite(h.back().loss.total), "bg_level " + std::to_string(level));
    } catch (const std::exception& e) {
      c.expect(false, "bg_level " + std::to_string(level) + ": " + e.what());
    }
  }
  c.note("cdp off keeps l_neg at 0; bg_level 0..4 complete");
  return c.done();
}

Outcome determinism_suite() {
  Check c;
  SyntheticRun run = synthetic_run("determinism", TrainMode::supervised);
  run.cfg.train.lr = 0.02;
  run.cfg.train.batch_size = 4;
  run.cfg.train.epochs = 2;
  std::vector<std::string> histories;
  std::vector<std::vector<std::string>> pngs;
  for (int k = 0; k < 2; ++k) {
    Trainer t(run.cfg, run.entries, {false, nullptr});
    std::string text;
    for (const auto& r : t.fit()) text += history_row(r) + "\n";
    histories.push_back(text);
    const fs::path out = run.root / ("pred" + std::to_string(k));
    const auto written = infer_directory(t.model(), run.cfg.train.image_size, (run.root / "data" / "images").string(),
                                         out.string());
    std::vector<std::string> bytes;
    for (const auto& p : written) {
      std::ifstream in(p, std::ios::binary);
      bytes.emplace_back(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    pngs.push_back(bytes);
  }
  c.expect(histories[0] == histories[1], "loss histories differ");
  c.expect(pngs[0].size() == 8 && pngs[0] == pngs[1], "inference PNGs differ");
  c.note("histories and 8 PNGs identical");
  return c.done();
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"shape_suite", shape_suite},
      {"gradient_suite", gradient_suite},
      {"cdp_property_suite", cdp_suite},
      {"metric_oracle_suite", metric_suite},
      {"pseudo_update_suite", pseudo_update_suite},
      {"supervised_overfit_smoke", supervised_smoke},
      {"unsupervised_loop_smoke", unsupervised_smoke},
      {"ablation_plumbing", ablation_suite},
      {"determinism", determinism_suite},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
