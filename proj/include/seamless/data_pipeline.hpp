#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "seamless/config.hpp"
#include "seamless/image_io.hpp"
#include "seamless/ops.hpp"
#include "seamless/pseudo_labels.hpp"

namespace seamless {

inline bool is_image_extension(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

/// Files with an image extension keyed by stem. Duplicate stems are an error.
inline std::map<std::string, std::filesystem::path> files_by_stem(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw NotFoundError("directory not found: " + dir.string());
  std::map<std::string, std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file() || !is_image_extension(e.path())) continue;
    const std::string stem = e.path().stem().string();
    auto [it, fresh] = out.emplace(stem, e.path());
    if (!fresh) {
      throw ConfigError("stem '" + stem + "' appears twice in " + dir.string() + " (" + it->second.filename().string() +
                        ", " + e.path().filename().string() + ")");
    }
  }
  return out;
}

struct ManifestEntry {
  std::string id;  // "<dataset>/<stem>"
  std::string stem;
  std::string image_path;
  std::optional<std::string> mask_path;
};

/// Lexicographic (image, mask?) pairs of one dataset. Warnings, e.g. for an
/// empty directory, are appended to *warnings when given.
inline std::vector<ManifestEntry> scan_dataset(const DatasetSpec& spec, std::vector<std::string>* warnings = nullptr) {
  const auto images = files_by_stem(spec.images_dir);
  std::map<std::string, std::filesystem::path> masks;
  if (spec.masks_dir) masks = files_by_stem(*spec.masks_dir);
  std::vector<ManifestEntry> out;
  for (const auto& [stem, path] : images) {
    ManifestEntry e{spec.name + "/" + stem, stem, path.string(), std::nullopt};
    if (spec.masks_dir) {
      auto it = masks.find(stem);
      if (it == masks.end()) {
        throw OrphanImageError(stem, "dataset '" + spec.name + "': image '" + stem + "' has no mask in " +
                                         *spec.masks_dir);
      }
      e.mask_path = it->second.string();
    }
    out.push_back(std::move(e));
  }
  if (out.empty() && warnings) warnings->push_back("dataset '" + spec.name + "': no images in " + spec.images_dir);
  return out;
}

/// Concatenated manifests of every spec with the given role.
inline std::vector<ManifestEntry> scan_datasets(const std::vector<DatasetSpec>& specs,
                                                std::vector<std::string>* warnings = nullptr) {
  std::vector<ManifestEntry> all;
  std::set<std::string> names;
  for (const auto& s : specs) {
    if (!names.insert(s.name).second) throw ConfigError("dataset name '" + s.name + "' used twice");
    auto part = scan_dataset(s, warnings);
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

inline Tensor resize_image(const Tensor& image, int size) {
  if (image.shape().h == size && image.shape().w == size) return image;
  return ops::resize_bilinear(image, size, size);
}

/// Nearest resize followed by thresholding at 0.5.
inline Tensor resize_gt(const Tensor& mask, int size) {
  Tensor m = (mask.shape().h == size && mask.shape().w == size) ? mask : ops::resize_nearest(mask, size, size);
  for (double& v : m.data()) v = v >= 0.5 ? 1.0 : 0.0;
  return m;
}

/// Soft masks keep their values; bilinear is used when a resize is needed.
inline Tensor resize_soft(const Tensor& mask, int size) {
  if (mask.shape().h == size && mask.shape().w == size) return mask;
  Tensor m = ops::resize_bilinear(mask, size, size);
  for (double& v : m.data()) v = std::clamp(v, 0.0, 1.0);
  return m;
}

struct Sample {
  std::string id;
  Tensor image;  // (1, 3, S, S) in [0, 1]
  Tensor mask;   // (1, 1, S, S) in {0, 1}, empty without a mask file
  int native_h = 0;
  int native_w = 0;
};

inline Sample load_sample(const ManifestEntry& e, int target_size) {
  Sample s;
  s.id = e.id;
  const Tensor image = image_io::read_rgb(e.image_path);
  s.native_h = image.shape().h;
  s.native_w = image.shape().w;
  s.image = resize_image(image, target_size);
  if (e.mask_path) s.mask = resize_gt(image_io::read_gray(*e.mask_path), target_size);
  return s;
}

struct Batch {
  Tensor images;  // (n, 3, S, S)
  Tensor masks;   // (n, 1, S, S)
  std::vector<std::string> ids;
  std::vector<bool> flipped;
  int n = 0;
};

/// Epoch plan: a permutation and per-position flip decisions, a pure function
/// of (seed, epoch).
struct EpochPlan {
  std::vector<std::size_t> order;
  std::vector<bool> flip;
};

inline EpochPlan make_epoch_plan(std::size_t count, std::uint64_t seed, int epoch, bool flip) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  EpochPlan plan;
  plan.order.resize(count);
  std::iota(plan.order.begin(), plan.order.end(), std::size_t{0});
  // Fisher-Yates with an explicit draw so the permutation does not depend on
  // the standard library's shuffle implementation.
  for (std::size_t i = count; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(plan.order[i - 1], plan.order[j]);
  }
  plan.flip.assign(count, false);
  if (flip)
    for (std::size_t i = 0; i < count; ++i) plan.flip[i] = (rng() >> 63) != 0;
  return plan;
}

/// One task-blind stream over the concatenation of all training manifests.
/// Batches are fixed-size; the trailing partial batch is dropped.
class MixedLoader {
 public:
  MixedLoader(std::vector<ManifestEntry> entries, int batch_size, std::uint64_t seed, bool flip, int image_size)
      : entries_(std::move(entries)), batch_(batch_size), seed_(seed), flip_(flip), size_(image_size) {
    if (batch_ < 1) throw ConfigError("batch size must be >= 1");
    if (static_cast<std::size_t>(batch_) > entries_.size()) {
      throw ConfigError("batch size " + std::to_string(batch_) + " exceeds dataset size " +
                        std::to_string(entries_.size()));
    }
    // Cache decoded samples when they fit comfortably in memory.
    const double bytes = static_cast<double>(entries_.size()) * size_ * size_ * 4 * sizeof(double);
    cache_enabled_ = bytes < 512.0 * 1024 * 1024;
  }

  const std::vector<ManifestEntry>& entries() const { return entries_; }
  int batch_size() const { return batch_; }
  int image_size() const { return size_; }
  int batches_per_epoch() const { return static_cast<int>(entries_.size() / static_cast<std::size_t>(batch_)); }

  EpochPlan plan(int epoch) const { return make_epoch_plan(entries_.size(), seed_, epoch, flip_); }

  /// Batch `index` of `epoch`. Masks come from the pseudo store when given,
  /// otherwise from the ground-truth files.
  Batch batch(int epoch, int index, const MaskStore* store = nullptr) {
    if (index < 0 || index >= batches_per_epoch()) throw Error("batch index out of range");
    const EpochPlan p = plan(epoch);
    std::vector<Tensor> images, masks;
    Batch b;
    for (int k = 0; k < batch_; ++k) {
      const std::size_t pos = static_cast<std::size_t>(index) * batch_ + k;
      const ManifestEntry& e = entries_[p.order[pos]];
      const Sample& s = sample(p.order[pos]);
      Tensor mask;
      if (store) {
        mask = resize_soft(store->get(e.id).mask, size_);
      } else {
        if (s.mask.empty()) throw NotFoundError("no ground-truth mask for '" + e.id + "'");
        mask = s.mask;
      }
      const bool flip = p.flip[pos];
      images.push_back(flip ? ops::flip_horizontal(s.image) : s.image);
      masks.push_back(flip ? ops::flip_horizontal(mask) : mask);
      b.ids.push_back(e.id);
      b.flipped.push_back(flip);
    }
    b.images = stack(images);
    b.masks = stack(masks);
    b.n = batch_;
    return b;
  }

  /// Decoded sample at manifest position i (cached when enabled).
  const Sample& sample(std::size_t i) {
    std::lock_guard lock(mutex_);
    auto it = cache_.find(i);
    if (it != cache_.end()) return it->second;
    Sample s = load_sample(entries_.at(i), size_);
    if (!cache_enabled_) {
      scratch_ = std::move(s);
      return scratch_;
    }
    return cache_.emplace(i, std::move(s)).first->second;
  }

 private:
  std::vector<ManifestEntry> entries_;
  int batch_;
  std::uint64_t seed_;
  bool flip_;
  int size_;
  bool cache_enabled_ = true;
  std::mutex mutex_;
  std::map<std::size_t, Sample> cache_;
  Sample scratch_;
};

}  // namespace seamless
