#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "seamless/config.hpp"
#include "synthetic.hpp"

using namespace seamless;

namespace {

const char* kToml = R"(
# toy run
name = "demo"

[backbone]
profile = "toy"

[cdp]
enabled = false
bg_level = 2

[train]
mode = "unsupervised"
lr = 0.01
batch_size = 4
epochs = 3
image_size = 64
seed = 11
flip = true

[[datasets]]
name = "sod"
images_dir = "data/sod/images"
masks_dir = "data/sod/masks"

[[datasets]]
name = "cod"
images_dir = "data/cod/images"
role = "eval"
)";

const char* kJson = R"({
  "name": "demo",
  "backbone": {"profile": "toy"},
  "cdp": {"enabled": false, "bg_level": 2},
  "train": {"mode": "unsupervised", "lr": 0.01, "batch_size": 4, "epochs": 3,
            "image_size": 64, "seed": 11, "flip": true},
  "datasets": [
    {"name": "sod", "images_dir": "data/sod/images", "masks_dir": "data/sod/masks"},
    {"name": "cod", "images_dir": "data/cod/images", "role": "eval"}
  ]
})";

struct EnvGuard {
  explicit EnvGuard(const char* value) {
    if (value) {
      setenv("SEAMLESS_SEED", value, 1);
    } else {
      unsetenv("SEAMLESS_SEED");
    }
  }
  ~EnvGuard() { unsetenv("SEAMLESS_SEED"); }
};

}  // namespace

TEST(Config, Defaults) {
  const Config c;
  EXPECT_DOUBLE_EQ(c.pseudo.lambda, 0.4);
  EXPECT_DOUBLE_EQ(c.loss.iou_eps, 1.0);
  EXPECT_DOUBLE_EQ(c.loss.bce_eps, 1e-7);
  EXPECT_EQ(c.loss.ssim_window, 11);
  EXPECT_DOUBLE_EQ(c.loss.ssim_sigma, 1.5);
  EXPECT_DOUBLE_EQ(c.cdp.cos_eps, 1e-6);
  EXPECT_EQ(c.train.image_size, 320);
  EXPECT_TRUE(c.train.flip_enabled());
  Config u;
  u.train.mode = TrainMode::unsupervised;
  EXPECT_FALSE(u.train.flip_enabled());
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, TomlAndJsonAgree) {
  const Config a = parse_config(kToml, true);
  const Config b = parse_config(kJson, false);
  EXPECT_EQ(to_json(a), to_json(b));
  EXPECT_EQ(config_digest(a), config_digest(b));
  EXPECT_EQ(a.name, "demo");
  EXPECT_FALSE(a.cdp.enabled);
  EXPECT_EQ(a.cdp.bg_level, 2);
  EXPECT_EQ(a.train.mode, TrainMode::unsupervised);
  EXPECT_TRUE(a.train.flip_enabled());
  ASSERT_EQ(a.datasets.size(), 2u);
  EXPECT_EQ(a.datasets[0].masks_dir.value(), "data/sod/masks");
  EXPECT_FALSE(a.datasets[1].masks_dir.has_value());
  EXPECT_EQ(a.datasets_with_role(DatasetRole::eval).size(), 1u);
}

TEST(Config, JsonRoundTrip) {
  const Config a = parse_config(kToml, true);
  const Config b = config_from_json(to_json(a));
  EXPECT_EQ(to_json(a), to_json(b));
}

TEST(Config, RejectsUnknownKeys) {
  EXPECT_THROW(parse_config("[train]\nlearning_rate = 0.1\n", true), ConfigError);
  EXPECT_THROW(parse_config(R"({"extra": 1})", false), ConfigError);
  try {
    parse_config(R"({"cdp": {"bogus": true}})", false);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("cdp.bogus"), std::string::npos);
  }
}

TEST(Config, RejectsWrongTypesAndEnums) {
  EXPECT_THROW(parse_config(R"({"train": {"lr": "fast"}})", false), ConfigError);
  EXPECT_THROW(parse_config(R"({"train": {"mode": "semi"}})", false), ConfigError);
  EXPECT_THROW(parse_config(R"({"backbone": {"profile": "huge"}})", false), ConfigError);
  EXPECT_THROW(parse_config(R"({"datasets": [{"name": "a", "images_dir": "x", "role": "test"}]})", false),
               ConfigError);
  EXPECT_THROW(parse_config("{not json", false), ConfigError);
}

TEST(Config, ValidationErrors) {
  auto bad = [](auto mutate) {
    Config c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](Config& c) { c.train.lr = 0.0; });
  bad([](Config& c) { c.pseudo.lambda = 1.0; });
  bad([](Config& c) { c.pseudo.lambda = 0.0; });
  bad([](Config& c) { c.train.image_size = 100; });
  bad([](Config& c) { c.train.batch_size = 0; });
  bad([](Config& c) { c.cdp.bg_level = 5; });
  bad([](Config& c) { c.decoder.kernel = 2; });
  bad([](Config& c) { c.loss.ssim_window = 10; });
  bad([](Config& c) { c.name = "a/b"; });
  bad([](Config& c) { c.datasets.push_back({"x", "", std::nullopt, DatasetRole::train}); });
}

TEST(Config, SeedFromEnvironment) {
  const auto dir = synth::scratch_dir("config_env");
  const auto path = (dir / "run.json").string();
  std::ofstream(path) << kJson;
  {
    EnvGuard g("12345");
    EXPECT_EQ(load_config(path).train.seed, 12345u);
  }
  {
    EnvGuard g(nullptr);
    EXPECT_EQ(load_config(path).train.seed, 11u);
  }
  {
    EnvGuard g("12x");
    EXPECT_THROW(load_config(path), ConfigError);
  }
}

TEST(Config, LoadErrors) {
  EXPECT_THROW(load_config("/nonexistent/run.toml"), NotFoundError);
  const auto dir = synth::scratch_dir("config_ext");
  std::ofstream(dir / "run.yaml") << "name: x\n";
  EXPECT_THROW(load_config((dir / "run.yaml").string()), ConfigError);
}

TEST(Config, DigestTracksContent) {
  Config a;
  const std::string d = config_digest(a);
  EXPECT_EQ(d.size(), 64u);
  EXPECT_EQ(d, config_digest(Config{}));
  a.train.seed = 1;
  EXPECT_NE(config_digest(a), d);
}

TEST(Toml, Values) {
  const json j = toml_lite::parse(R"(
a = 1
b = -2.5e-3
c = 'lit\n'
d = "esc\t\"q\""
e = [1, 2,
     3]  # trailing comment
f = { x = 1, y = "z" }
g.h = true
"quoted key" = false
[t.u]
v = 1_000
)");
  EXPECT_EQ(j["a"], 1);
  EXPECT_DOUBLE_EQ(j["b"].get<double>(), -2.5e-3);
  EXPECT_EQ(j["c"], "lit\\n");
  EXPECT_EQ(j["d"], "esc\t\"q\"");
  EXPECT_EQ(j["e"], json({1, 2, 3}));
  EXPECT_EQ(j["f"]["y"], "z");
  EXPECT_EQ(j["g"]["h"], true);
  EXPECT_EQ(j["quoted key"], false);
  EXPECT_EQ(j["t"]["u"]["v"], 1000);
}

TEST(Toml, Errors) {
  EXPECT_THROW(toml_lite::parse("a = \n"), ConfigError);
  EXPECT_THROW(toml_lite::parse("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(toml_lite::parse("[t\nx = 1\n"), ConfigError);
  EXPECT_THROW(toml_lite::parse("a = \"open\n"), ConfigError);
  EXPECT_THROW(toml_lite::parse("a = 1 b = 2\n"), ConfigError);
  EXPECT_THROW(toml_lite::parse("a = 0x10\n"), ConfigError);
}
