#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "seamless/archive.hpp"
#include "seamless/image_io.hpp"
#include "seamless/ops.hpp"

namespace seamless {

// ---------------------------------------------------------------------------
// Dense self-supervised features

/// P x P patch tokens of dimension D, row-major (y, x, d).
struct DenseFeatureGrid {
  int P = 0;
  int D = 0;
  int patch_size = 0;
  std::vector<double> values;

  const double* token(int y, int x) const { return values.data() + (static_cast<std::size_t>(y) * P + x) * D; }
  double* token(int y, int x) { return values.data() + (static_cast<std::size_t>(y) * P + x) * D; }

  void validate() const {
    if (P <= 0 || D <= 0 || patch_size <= 0) throw ShapeError("feature grid needs P, D, patch_size > 0");
    if (values.size() != static_cast<std::size_t>(P) * P * D) throw ShapeError("feature grid size mismatch");
  }
};

/// File layout: "SDFG", u32 P, u32 D, u32 patch_size, then P*P*D float32.
inline void write_feature_grid(const std::string& path, const DenseFeatureGrid& g) {
  g.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  archive::write_magic(os, "SDFG");
  archive::write_u32(os, static_cast<std::uint32_t>(g.P));
  archive::write_u32(os, static_cast<std::uint32_t>(g.D));
  archive::write_u32(os, static_cast<std::uint32_t>(g.patch_size));
  for (double v : g.values) {
    const float f = static_cast<float>(v);
    os.write(reinterpret_cast<const char*>(&f), sizeof f);
  }
  if (!os) throw IoError("write failed: " + path);
}

inline DenseFeatureGrid read_feature_grid(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("cannot open feature grid " + path);
  archive::expect_magic(is, "SDFG", path);
  DenseFeatureGrid g;
  g.P = static_cast<int>(archive::read_u32(is));
  g.D = static_cast<int>(archive::read_u32(is));
  g.patch_size = static_cast<int>(archive::read_u32(is));
  if (g.P <= 0 || g.D <= 0 || g.patch_size <= 0 || g.P > 4096 || g.D > 65536) {
    throw DecodeError(path + ": implausible feature grid header");
  }
  std::vector<float> raw(static_cast<std::size_t>(g.P) * g.P * g.D);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)))) {
    throw DecodeError(path + ": truncated feature grid");
  }
  g.values.assign(raw.begin(), raw.end());
  return g;
}

// ---------------------------------------------------------------------------
// Initial pseudo masks

/// 1x1 projection D -> 1 applied to every patch token before a sigmoid.
struct MaskHead {
  std::vector<double> weight;
  double bias = 0.0;
};

/// Fits the projection from the first principal component of all tokens in
/// `grids`. The direction is sign-canonical (largest |component| positive),
/// centred on the token mean and scaled so projections have std 4.
inline MaskHead fit_pca_head(std::span<const DenseFeatureGrid> grids) {
  if (grids.empty()) throw ShapeError("fit_pca_head: no feature grids");
  const int D = grids.front().D;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(D);
  std::size_t count = 0;
  for (const auto& g : grids) {
    g.validate();
    if (g.D != D) throw ShapeError("fit_pca_head: feature dimensions differ");
    for (int i = 0; i < g.P * g.P; ++i) mean += Eigen::Map<const Eigen::VectorXd>(g.values.data() + i * D, D);
    count += static_cast<std::size_t>(g.P) * g.P;
  }
  mean /= static_cast<double>(count);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(D, D);
  for (const auto& g : grids)
    for (int i = 0; i < g.P * g.P; ++i) {
      const Eigen::VectorXd d = Eigen::Map<const Eigen::VectorXd>(g.values.data() + i * D, D) - mean;
      cov.noalias() += d * d.transpose();
    }
  cov /= static_cast<double>(count);

  MaskHead head;
  head.weight.assign(static_cast<std::size_t>(D), 0.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const double top = eig.eigenvalues()(D - 1);
  if (!(top > 1e-12)) return head;  // constant features: zero projection
  Eigen::VectorXd pc = eig.eigenvectors().col(D - 1);
  Eigen::Index arg = 0;
  pc.cwiseAbs().maxCoeff(&arg);
  if (pc(arg) < 0) pc = -pc;
  pc *= 4.0 / std::sqrt(top);
  for (int d = 0; d < D; ++d) head.weight[d] = pc(d);
  head.bias = -pc.dot(mean);
  return head;
}

/// Flips a map whose >= 0.5 region covers most of the image border. Maps
/// lying entirely on one side of 0.5 are returned unchanged.
inline Tensor normalize_polarity(Tensor mask) {
  const Shape s = mask.shape();
  bool below = false, above = false;
  for (double v : mask.data()) (v >= 0.5 ? above : below) = true;
  if (!(below && above)) return mask;
  std::size_t border = 0, fg = 0;
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      if (y != 0 && y != s.h - 1 && x != 0 && x != s.w - 1) continue;
      ++border;
      fg += mask.at(0, 0, y, x) >= 0.5;
    }
  if (2 * fg > border)
    for (double& v : mask.data()) v = 1.0 - v;
  return mask;
}

/// sigmoid(head . token) on the P x P grid, bilinearly upsampled to
/// (out_h, out_w), then polarity-normalized. Shape (1, 1, out_h, out_w).
inline Tensor initial_mask(const DenseFeatureGrid& g, const MaskHead& head, int out_h, int out_w) {
  g.validate();
  if (static_cast<int>(head.weight.size()) != g.D) throw ShapeError("initial_mask: head/grid dimension mismatch");
  Tensor logits({1, 1, g.P, g.P});
  for (int y = 0; y < g.P; ++y)
    for (int x = 0; x < g.P; ++x) {
      const double* t = g.token(y, x);
      double z = head.bias;
      for (int d = 0; d < g.D; ++d) z += head.weight[d] * t[d];
      logits.at(0, 0, y, x) = ops::sigmoid_scalar(z);
    }
  return normalize_polarity(ops::resize_bilinear(logits, out_h, out_w));
}

/// Single-grid convenience: the head is fitted on this grid alone.
inline Tensor initial_mask(const DenseFeatureGrid& g, int out_h, int out_w) {
  const DenseFeatureGrid* one = &g;
  return initial_mask(g, fit_pca_head(std::span<const DenseFeatureGrid>(one, 1)), out_h, out_w);
}

// ---------------------------------------------------------------------------
// Records and the moving-average update

enum class MaskOrigin { initial, updated };

inline std::string to_string(MaskOrigin o) { return o == MaskOrigin::initial ? "initial" : "updated"; }
inline MaskOrigin parse_mask_origin(const std::string& s) {
  if (s == "initial") return MaskOrigin::initial;
  if (s == "updated") return MaskOrigin::updated;
  throw IoError("unknown mask source '" + s + "'");
}

struct PseudoMaskRecord {
  std::string image_id;
  Tensor mask;  // (1, 1, H, W) in [0, 1]
  int epoch = 0;
  MaskOrigin source = MaskOrigin::initial;
};

/// Epochs 1 and 2 keep the previous mask; later epochs blend
/// lam * prev + (1 - lam) * pred, clamped to [0, 1].
inline PseudoMaskRecord update_mask(const PseudoMaskRecord& prev, const Tensor& pred, int epoch, double lam) {
  if (epoch < 1) throw ConfigError("update_mask: epoch must be >= 1");
  if (!(lam > 0.0 && lam < 1.0)) throw ConfigError("update_mask: lambda must lie in (0, 1)");
  prev.mask.require_same(pred, "update_mask");
  PseudoMaskRecord out{prev.image_id, prev.mask, epoch, MaskOrigin::updated};
  if (epoch <= 2) return out;
  for (std::size_t i = 0; i < out.mask.size(); ++i) {
    out.mask[i] = std::clamp(lam * prev.mask[i] + (1.0 - lam) * pred[i], 0.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

/// One 16-bit PNG per record under <root>/epoch_<k>/<image_id>.png plus
/// <root>/manifest.json holding lambda and the latest epoch/source per id.
/// Readers share a lock; writes are serialized.
class MaskStore {
 public:
  explicit MaskStore(std::filesystem::path root, double lambda = 0.4) : root_(std::move(root)), lambda_(lambda) {
    std::error_code ec;
    std::filesystem::create_directories(root_, ec);
    if (ec) throw IoError("cannot create mask store " + root_.string() + ": " + ec.message());
    load_manifest();
  }

  const std::filesystem::path& root() const { return root_; }
  double lambda() const { return lambda_; }

  void put(const PseudoMaskRecord& r) {
    check_id(r.image_id);
    if (r.epoch < 0) throw ConfigError("mask epoch must be >= 0");
    const Shape s = r.mask.shape();
    if (s.n != 1 || s.c != 1 || s.h < 1 || s.w < 1) throw ShapeError("mask must be (1,1,H,W), got " + s.str());
    std::unique_lock lock(mutex_);
    if (auto it = index_.find(r.image_id); it != index_.end() && r.epoch < it->second.epoch) {
      throw Error("mask for '" + r.image_id + "' at epoch " + std::to_string(r.epoch) +
                  " would overwrite newer epoch " + std::to_string(it->second.epoch));
    }
    image_io::write_gray16(path_for(r.image_id, r.epoch).string(), r.mask);
    index_[r.image_id] = Entry{r.epoch, r.source};
    save_manifest();
  }

  PseudoMaskRecord get(const std::string& image_id) const {
    std::shared_lock lock(mutex_);
    auto it = index_.find(image_id);
    if (it == index_.end()) throw NotFoundError("no pseudo mask for '" + image_id + "'");
    PseudoMaskRecord r;
    r.image_id = image_id;
    r.epoch = it->second.epoch;
    r.source = it->second.source;
    r.mask = image_io::read_gray(path_for(image_id, r.epoch).string());
    return r;
  }

  bool contains(const std::string& image_id) const {
    std::shared_lock lock(mutex_);
    return index_.count(image_id) > 0;
  }

  /// Latest epoch of an id, or -1.
  int epoch_of(const std::string& image_id) const {
    std::shared_lock lock(mutex_);
    auto it = index_.find(image_id);
    return it == index_.end() ? -1 : it->second.epoch;
  }

  std::vector<std::string> ids() const {
    std::shared_lock lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [id, _] : index_) out.push_back(id);
    return out;
  }

  std::filesystem::path path_for(const std::string& image_id, int epoch) const {
    return root_ / ("epoch_" + std::to_string(epoch)) / (image_id + ".png");
  }

 private:
  struct Entry {
    int epoch = 0;
    MaskOrigin source = MaskOrigin::initial;
  };

  static void check_id(const std::string& id) {
    if (id.empty()) throw ConfigError("image_id must be non-empty");
    for (const auto& part : std::filesystem::path(id)) {
      if (part == ".." || part == "." || part.empty()) throw ConfigError("invalid image_id '" + id + "'");
    }
    if (id.front() == '/') throw ConfigError("invalid image_id '" + id + "'");
  }

  std::filesystem::path manifest_path() const { return root_ / "manifest.json"; }

  void load_manifest() {
    const auto path = manifest_path();
    if (!std::filesystem::exists(path)) return;
    std::ifstream in(path);
    nlohmann::json j;
    try {
      in >> j;
      lambda_ = j.at("lambda").get<double>();
      for (const auto& [id, rec] : j.at("records").items()) {
        index_[id] = Entry{rec.at("epoch").get<int>(), parse_mask_origin(rec.at("source").get<std::string>())};
      }
    } catch (const nlohmann::json::exception& e) {
      throw IoError("corrupt mask manifest " + path.string() + ": " + e.what());
    }
  }

  void save_manifest() const {
    nlohmann::json records = nlohmann::json::object();
    for (const auto& [id, e] : index_) records[id] = {{"epoch", e.epoch}, {"source", to_string(e.source)}};
    const nlohmann::json j = {{"lambda", lambda_}, {"records", records}};
    const auto tmp = root_ / "manifest.json.tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw IoError("cannot write " + tmp.string());
      out << j.dump(2) << '\n';
      if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, manifest_path(), ec);
    if (ec) throw IoError("cannot replace manifest: " + ec.message());
  }

  std::filesystem::path root_;
  double lambda_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, Entry> index_;
};

}  // namespace seamless
