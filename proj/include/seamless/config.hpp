#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"
#include "seamless/cdp.hpp"
#include "seamless/igc_decoder.hpp"
#include "seamless/losses.hpp"
#include "seamless/toml_lite.hpp"

namespace seamless {

using json = nlohmann::json;

enum class TrainMode { supervised, unsupervised };

inline TrainMode parse_mode(const std::string& s) {
  if (s == "supervised") return TrainMode::supervised;
  if (s == "unsupervised") return TrainMode::unsupervised;
  throw ConfigError("unknown train.mode '" + s + "' (expected supervised|unsupervised)");
}
inline std::string to_string(TrainMode m) { return m == TrainMode::supervised ? "supervised" : "unsupervised"; }

enum class MaskSource { pca1x1, file };

inline MaskSource parse_mask_source(const std::string& s) {
  if (s == "pca1x1") return MaskSource::pca1x1;
  if (s == "file") return MaskSource::file;
  throw ConfigError("unknown pseudo.source '" + s + "' (expected pca1x1|file)");
}
inline std::string to_string(MaskSource m) { return m == MaskSource::pca1x1 ? "pca1x1" : "file"; }

enum class DatasetRole { train, eval };

struct DatasetSpec {
  std::string name;
  std::string images_dir;
  std::optional<std::string> masks_dir;
  DatasetRole role = DatasetRole::train;
};

struct BackboneConfig {
  BackboneProfile profile = BackboneProfile::toy;
  std::string weights_path;
  bool freeze = false;
};

struct PseudoConfig {
  double lambda = 0.4;
  MaskSource source = MaskSource::pca1x1;
  std::string features_path;  // <features_path>/<dataset>/<stem>.sdfg dense feature grids
  std::string masks_path;     // <masks_path>/<dataset>/<stem>.png initial masks (source = file)
};

struct TrainConfig {
  TrainMode mode = TrainMode::supervised;
  double lr = 0.005;
  int batch_size = 20;
  int epochs = 50;
  int image_size = 320;
  std::uint64_t seed = 0;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double clip_norm = 10.0;
  std::optional<bool> flip;  // unset: on for supervised, off for unsupervised
  std::string runs_dir = "runs";
  int checkpoint_every = 1;  // epochs; the last epoch is always written

  bool flip_enabled() const { return flip.value_or(mode == TrainMode::supervised); }
};

struct Config {
  std::string name = "run";
  BackboneConfig backbone;
  DecoderConfig decoder;
  CdpConfig cdp;
  LossConfig loss;
  PseudoConfig pseudo;
  TrainConfig train;
  std::vector<DatasetSpec> datasets;

  void validate() const {
    if (name.empty() || name.find('/') != std::string::npos) throw ConfigError("name must be a non-empty path component");
    if (!(train.lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (!(pseudo.lambda > 0.0 && pseudo.lambda < 1.0)) throw ConfigError("pseudo.lambda must lie in (0, 1)");
    if (train.epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (train.image_size < 32 || train.image_size % 32 != 0) {
      throw ConfigError("train.image_size must be a positive multiple of 32");
    }
    if (train.momentum < 0.0 || train.momentum >= 1.0) throw ConfigError("train.momentum must lie in [0, 1)");
    if (train.weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    if (!(train.clip_norm > 0.0)) throw ConfigError("train.clip_norm must be > 0");
    if (train.checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be >= 1");
    if (cdp.bg_level < 0 || cdp.bg_level > 4) throw ConfigError("cdp.bg_level must lie in 0..4");
    if (!(cdp.cos_eps > 0.0) || !(cdp.mask_eps > 0.0)) throw ConfigError("cdp eps values must be > 0");
    if (decoder.kernel != 1 && decoder.kernel != 3) throw ConfigError("decoder.kernel must be 1 or 3");
    if (loss.ssim_window < 1 || loss.ssim_window % 2 == 0) throw ConfigError("loss.ssim_window must be odd");
    if (!(loss.ssim_sigma > 0.0) || !(loss.bce_eps > 0.0) || loss.bce_eps >= 0.5 || loss.iou_eps < 0.0) {
      throw ConfigError("loss constants out of range");
    }
    for (const auto& d : datasets) {
      if (d.name.empty() || d.name.find('/') != std::string::npos) {
        throw ConfigError("dataset name must be a non-empty path component");
      }
      if (d.images_dir.empty()) throw ConfigError("dataset '" + d.name + "' has no images_dir");
    }
  }

  std::vector<DatasetSpec> datasets_with_role(DatasetRole role) const {
    std::vector<DatasetSpec> out;
    for (const auto& d : datasets)
      if (d.role == role) out.push_back(d);
    return out;
  }
};

// ---------------------------------------------------------------------------
// JSON mapping

namespace detail {

/// Reads fields from one JSON table and rejects keys it did not consume.
class TableReader {
 public:
  TableReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be a table");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.emplace_back(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  const json* sub(const char* key) {
    seen_.emplace_back(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end()) {
        throw ConfigError("unknown config key '" + where(it.key().c_str()) + "'");
      }
    }
  }

  std::string where(const char* key = nullptr) const {
    std::string base = path_.empty() ? "" : path_;
    if (!key) return base.empty() ? "config" : base;
    return base.empty() ? key : base + "." + key;
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

}  // namespace detail

inline Config config_from_json(const json& j) {
  Config c;
  detail::TableReader root(j, "");
  root.get("name", c.name);
  if (const json* b = root.sub("backbone")) {
    detail::TableReader r(*b, "backbone");
    std::string profile = to_string(c.backbone.profile);
    r.get("profile", profile);
    c.backbone.profile = parse_profile(profile);
    r.get("weights_path", c.backbone.weights_path);
    r.get("freeze", c.backbone.freeze);
    r.finish();
  }
  if (const json* d = root.sub("decoder")) {
    detail::TableReader r(*d, "decoder");
    r.get("kernel", c.decoder.kernel);
    r.get("fuse_relu", c.decoder.fuse_relu);
    r.finish();
  }
  if (const json* d = root.sub("cdp")) {
    detail::TableReader r(*d, "cdp");
    r.get("enabled", c.cdp.enabled);
    r.get("bg_level", c.cdp.bg_level);
    std::string head = to_string(c.cdp.fg_head);
    r.get("fg_head", head);
    c.cdp.fg_head = parse_fg_head(head);
    r.get("cos_eps", c.cdp.cos_eps);
    r.get("mask_eps", c.cdp.mask_eps);
    r.finish();
  }
  if (const json* d = root.sub("loss")) {
    detail::TableReader r(*d, "loss");
    r.get("bce_eps", c.loss.bce_eps);
    r.get("iou_eps", c.loss.iou_eps);
    r.get("ssim_window", c.loss.ssim_window);
    r.get("ssim_sigma", c.loss.ssim_sigma);
    r.get("ssim_c1", c.loss.ssim_c1);
    r.get("ssim_c2", c.loss.ssim_c2);
    r.finish();
  }
  if (const json* d = root.sub("pseudo")) {
    detail::TableReader r(*d, "pseudo");
    r.get("lambda", c.pseudo.lambda);
    std::string source = to_string(c.pseudo.source);
    r.get("source", source);
    c.pseudo.source = parse_mask_source(source);
    r.get("features_path", c.pseudo.features_path);
    r.get("masks_path", c.pseudo.masks_path);
    r.finish();
  }
  if (const json* d = root.sub("train")) {
    detail::TableReader r(*d, "train");
    std::string mode = to_string(c.train.mode);
    r.get("mode", mode);
    c.train.mode = parse_mode(mode);
    r.get("lr", c.train.lr);
    r.get("batch_size", c.train.batch_size);
    r.get("epochs", c.train.epochs);
    r.get("image_size", c.train.image_size);
    r.get("seed", c.train.seed);
    r.get("momentum", c.train.momentum);
    r.get("weight_decay", c.train.weight_decay);
    r.get("clip_norm", c.train.clip_norm);
    if (const json* f = r.sub("flip")) {
      if (!f->is_boolean()) throw ConfigError("train.flip has the wrong type");
      c.train.flip = f->get<bool>();
    }
    r.get("runs_dir", c.train.runs_dir);
    r.get("checkpoint_every", c.train.checkpoint_every);
    r.finish();
  }
  if (const json* d = root.sub("datasets")) {
    if (!d->is_array()) throw ConfigError("datasets must be an array of tables");
    for (std::size_t i = 0; i < d->size(); ++i) {
      detail::TableReader r((*d)[i], "datasets[" + std::to_string(i) + "]");
      DatasetSpec s;
      r.get("name", s.name);
      r.get("images_dir", s.images_dir);
      std::string masks;
      r.get("masks_dir", masks);
      if (!masks.empty()) s.masks_dir = masks;
      std::string role = "train";
      r.get("role", role);
      if (role == "train") {
        s.role = DatasetRole::train;
      } else if (role == "eval") {
        s.role = DatasetRole::eval;
      } else {
        throw ConfigError("dataset role must be train|eval, got '" + role + "'");
      }
      r.finish();
      c.datasets.push_back(std::move(s));
    }
  }
  root.finish();
  return c;
}

inline json to_json(const Config& c) {
  json datasets = json::array();
  for (const auto& d : c.datasets) {
    datasets.push_back({{"name", d.name},
                        {"images_dir", d.images_dir},
                        {"masks_dir", d.masks_dir ? json(*d.masks_dir) : json(nullptr)},
                        {"role", d.role == DatasetRole::train ? "train" : "eval"}});
  }
  return {
      {"name", c.name},
      {"backbone",
       {{"profile", to_string(c.backbone.profile)},
        {"weights_path", c.backbone.weights_path},
        {"freeze", c.backbone.freeze}}},
      {"decoder", {{"kernel", c.decoder.kernel}, {"fuse_relu", c.decoder.fuse_relu}}},
      {"cdp",
       {{"enabled", c.cdp.enabled},
        {"bg_level", c.cdp.bg_level},
        {"fg_head", to_string(c.cdp.fg_head)},
        {"cos_eps", c.cdp.cos_eps},
        {"mask_eps", c.cdp.mask_eps}}},
      {"loss",
       {{"bce_eps", c.loss.bce_eps},
        {"iou_eps", c.loss.iou_eps},
        {"ssim_window", c.loss.ssim_window},
        {"ssim_sigma", c.loss.ssim_sigma},
        {"ssim_c1", c.loss.ssim_c1},
        {"ssim_c2", c.loss.ssim_c2}}},
      {"pseudo",
       {{"lambda", c.pseudo.lambda},
        {"source", to_string(c.pseudo.source)},
        {"features_path", c.pseudo.features_path},
        {"masks_path", c.pseudo.masks_path}}},
      {"train",
       {{"mode", to_string(c.train.mode)},
        {"lr", c.train.lr},
        {"batch_size", c.train.batch_size},
        {"epochs", c.train.epochs},
        {"image_size", c.train.image_size},
        {"seed", c.train.seed},
        {"momentum", c.train.momentum},
        {"weight_decay", c.train.weight_decay},
        {"clip_norm", c.train.clip_norm},
        {"flip", c.train.flip ? json(*c.train.flip) : json(nullptr)},
        {"runs_dir", c.train.runs_dir},
        {"checkpoint_every", c.train.checkpoint_every}}},
      {"datasets", datasets},
  };
}

/// Hex SHA-256 of the canonical (sorted-key, compact) JSON form.
inline std::string config_digest(const Config& c) {
  const std::string text = to_json(c).dump();
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

/// Applies SEAMLESS_SEED when set.
inline void apply_environment(Config& c) {
  if (const char* s = std::getenv("SEAMLESS_SEED"); s && *s) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(s, &used);
      if (used != std::string(s).size()) throw std::invalid_argument("trailing");
      c.train.seed = v;
    } catch (const std::exception&) {
      throw ConfigError(std::string("SEAMLESS_SEED is not an unsigned integer: '") + s + "'");
    }
  }
}

/// Parses TOML or JSON text; the format follows the file extension.
inline Config parse_config(const std::string& text, bool toml) {
  json j;
  if (toml) {
    j = toml_lite::parse(text);
  } else {
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("JSON parse error: ") + e.what());
    }
  }
  return config_from_json(j);
}

/// Loads, applies the environment override, and validates.
inline Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string ext = std::filesystem::path(path).extension().string();
  bool toml = false;
  if (ext == ".toml") {
    toml = true;
  } else if (ext != ".json") {
    throw ConfigError("config '" + path + "' must end in .toml or .json");
  }
  Config c = parse_config(ss.str(), toml);
  apply_environment(c);
  c.validate();
  return c;
}

}  // namespace seamless
