#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "seamless/cli.hpp"
#include "synthetic.hpp"

using namespace seamless;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "seamless");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = cli::dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Writes a toy supervised config over a fresh synthetic set.
fs::path toy_config(const fs::path& root, const std::string& extra_train = "") {
  synth::write_synthetic_set(root / "data", 4, 64, 4);
  const fs::path path = root / "run.toml";
  std::ofstream(path) << "name = \"cli\"\n"
                      << "[train]\nimage_size = 64\nbatch_size = 2\nepochs = 1\nlr = 0.01\n"
                      << "runs_dir = \"" << (root / "runs").string() << "\"\n"
                      << extra_train << "[[datasets]]\nname = \"sod\"\n"
                      << "images_dir = \"" << (root / "data" / "images").string() << "\"\n"
                      << "masks_dir = \"" << (root / "data" / "masks").string() << "\"\n";
  return path;
}

std::string digest_line(const std::string& text) {
  const std::string key = "config digest: ";
  const auto at = text.find(key);
  if (at == std::string::npos) return "";
  return text.substr(at + key.size(), 64);
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run({"--help"}).code, 0);
  const CliRun sub_help = run({"evaluate", "--help"});
  EXPECT_EQ(sub_help.code, 0);
  EXPECT_NE(sub_help.out.find("--pred-dir"), std::string::npos);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  const CliRun unknown = run({"train", "--config", "x.toml", "--bogus"});
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.err.find("--bogus"), std::string::npos);
  EXPECT_EQ(run({"bench"}).code, 2);
}

TEST(Cli, MissingConfigNamesPath) {
  const CliRun r = run({"train", "--config", "/nonexistent/seamless.toml"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("/nonexistent/seamless.toml"), std::string::npos);
}

TEST(Cli, InvalidConfigIsUsageError) {
  const auto root = synth::scratch_dir("cli_badcfg");
  std::ofstream(root / "bad.toml") << "[train]\nlr = -1\n";
  const CliRun r = run({"train", "--config", (root / "bad.toml").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("train.lr"), std::string::npos);
}

TEST(Cli, DryRunCreatesNothing) {
  const auto root = synth::scratch_dir("cli_dry");
  const fs::path cfg = toy_config(root);
  const CliRun r = run({"train", "--config", cfg.string(), "--dry-run"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("training images: 4"), std::string::npos);
  EXPECT_FALSE(fs::exists(root / "runs"));
}

TEST(Cli, TrainInferBenchShareDigest) {
  const auto root = synth::scratch_dir("cli_train");
  const fs::path cfg = toy_config(root);
  const CliRun t = run({"train", "--config", cfg.string()});
  ASSERT_EQ(t.code, 0) << t.err;
  const std::string digest = digest_line(t.out);
  ASSERT_EQ(digest.size(), 64u);
  const fs::path ck = root / "runs" / "cli" / "ckpt_1.bin";
  ASSERT_TRUE(fs::exists(ck));
  EXPECT_EQ(load_checkpoint(ck).config_digest, digest);
  EXPECT_TRUE(fs::exists(root / "runs" / "cli" / "history.csv"));

  const CliRun i = run({"infer", "--checkpoint", ck.string(), "--images-dir", (root / "data" / "images").string(),
                     "--out-dir", (root / "pred").string()});
  ASSERT_EQ(i.code, 0) << i.err;
  EXPECT_EQ(digest_line(i.out), digest);
  for (int k = 0; k < 4; ++k) EXPECT_TRUE(fs::exists(root / "pred" / ("img" + std::to_string(k) + ".png")));

  const CliRun b = run({"bench", "--checkpoint", ck.string(), "--n", "1"});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(digest_line(b.err), digest);
  const json doc = json::parse(b.out);
  EXPECT_EQ(doc["profile"], "toy");
  EXPECT_EQ(doc["size"], 64);
  EXPECT_GT(doc["parameters"].get<long long>(), 0);
}

TEST(Cli, EvaluateJsonCsvAndPrCurve) {
  const auto root = synth::scratch_dir("cli_eval");
  fs::create_directories(root / "pred");
  fs::create_directories(root / "gt");
  double mae_sum = 0.0;
  for (int k = 0; k < 3; ++k) {
    const auto s = synth::make_synthetic(k, 32, 32, 8);
    Tensor pred = s.mask;
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = 0.8 * pred[i] + 0.1;
    const std::string stem = "p" + std::to_string(k);
    image_io::write_gray8((root / "pred" / (stem + ".png")).string(), pred);
    image_io::write_gray8((root / "gt" / (stem + ".png")).string(), s.mask);
    const Tensor stored = image_io::read_gray((root / "pred" / (stem + ".png")).string());
    double err = 0.0;
    for (std::size_t i = 0; i < stored.size(); ++i) err += std::abs(stored[i] - s.mask[i]);
    mae_sum += err / static_cast<double>(stored.size());
  }
  image_io::write_gray8((root / "pred" / "blank.png").string(), Tensor({1, 1, 32, 32}, 0.5));
  image_io::write_gray8((root / "gt" / "blank.png").string(), Tensor({1, 1, 32, 32}, 0.0));

  const CliRun j = run({"evaluate", "--pred-dir", (root / "pred").string(), "--gt-dir", (root / "gt").string(),
                     "--pr-out", (root / "pr.csv").string()});
  ASSERT_EQ(j.code, 0) << j.err;
  EXPECT_EQ(digest_line(j.err).size(), 64u);
  const json doc = json::parse(j.out);
  ASSERT_EQ(doc["rows"].size(), 4u);
  EXPECT_EQ(doc["excluded_empty_gt"], 1);
  EXPECT_EQ(doc["excluded_ids"][0], "blank");
  EXPECT_EQ(doc["f_beta_variant"], "max");
  EXPECT_NEAR(doc["rows"][3]["mae"].get<double>(), mae_sum / 3, 1e-12);
  EXPECT_GT(doc["rows"][3]["f_beta"].get<double>(), 0.99);

  std::istringstream pr(slurp(root / "pr.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(pr, line)) ++lines;
  EXPECT_EQ(lines, 1 + metrics::kThresholds);

  const CliRun c = run({"evaluate", "--pred-dir", (root / "pred").string(), "--gt-dir", (root / "gt").string(),
                     "--report", "csv", "--metrics", "mae,sm"});
  ASSERT_EQ(c.code, 0) << c.err;
  std::istringstream csv(c.out);
  std::getline(csv, line);
  EXPECT_EQ(line, "id,mae,f_beta,s_measure,e_measure");
  std::getline(csv, line);
  EXPECT_EQ(line.rfind("p0,", 0), 0u);
  EXPECT_NE(line.find(",,"), std::string::npos);

  EXPECT_EQ(run({"evaluate", "--pred-dir", (root / "pred").string(), "--gt-dir", (root / "gt").string(), "--metrics",
                 "mae,psnr"})
                .code,
            2);
  EXPECT_EQ(run({"evaluate", "--pred-dir", (root / "nope").string(), "--gt-dir", (root / "gt").string()}).code, 2);
}

TEST(Cli, PseudoInitAndUpdateFromFiles) {
  const auto root = synth::scratch_dir("cli_pseudo");
  synth::write_synthetic_set(root / "data", 2, 64, 6);
  fs::create_directories(root / "init" / "sod");
  for (int k = 0; k < 2; ++k) {
    image_io::write_gray8((root / "init" / "sod" / ("img" + std::to_string(k) + ".png")).string(),
                          Tensor({1, 1, 64, 64}, 0.6));
  }
  const fs::path cfg = root / "u.toml";
  std::ofstream(cfg) << "name = \"u\"\n[pseudo]\nsource = \"file\"\nmasks_path = \"" << (root / "init").string()
                     << "\"\n[train]\nmode = \"unsupervised\"\nimage_size = 64\nbatch_size = 2\nepochs = 1\n"
                     << "runs_dir = \"" << (root / "runs").string() << "\"\n[[datasets]]\nname = \"sod\"\n"
                     << "images_dir = \"" << (root / "data" / "images").string() << "\"\n";
  EXPECT_EQ(run({"pseudo-update", "--config", cfg.string(), "--checkpoint", "x", "--epoch", "0"}).code, 2);
  const CliRun init = run({"pseudo-init", "--config", cfg.string()});
  ASSERT_EQ(init.code, 0) << init.err;
  MaskStore store(root / "runs" / "u" / "pseudo_masks");
  EXPECT_EQ(store.get("sod/img0").epoch, 0);
  EXPECT_NEAR(store.get("sod/img1").mask[0], std::lround(0.6 * 255) / 255.0, 1.0 / 65535);

  const CliRun t = run({"train", "--config", cfg.string()});
  ASSERT_EQ(t.code, 0) << t.err;
  const fs::path ck = root / "runs" / "u" / "ckpt_1.bin";
  const CliRun frozen = run({"pseudo-update", "--config", cfg.string(), "--checkpoint", ck.string(), "--epoch", "2"});
  ASSERT_EQ(frozen.code, 0) << frozen.err;
  EXPECT_NE(frozen.out.find("updated 0 masks"), std::string::npos);
  const CliRun upd = run({"pseudo-update", "--config", cfg.string(), "--checkpoint", ck.string(), "--epoch", "3"});
  ASSERT_EQ(upd.code, 0) << upd.err;
  MaskStore after(root / "runs" / "u" / "pseudo_masks");
  EXPECT_EQ(after.get("sod/img0").epoch, 3);
}
