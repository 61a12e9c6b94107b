#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include "seamless/archive.hpp"

namespace seamless {

/// Full training state. Parameters, buffers (e.g. batch-norm statistics) and
/// optimizer momentum are keyed by dotted module path.
struct Checkpoint {
  std::string config_json;
  std::string config_digest;
  int epoch = 0;          // completed epochs
  std::int64_t step = 0;  // completed optimizer steps
  std::string rng_state;
  archive::TensorMap parameters;
  archive::TensorMap buffers;
  archive::TensorMap optimizer;
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + path.string());
    archive::write_magic(os, "SCKP");
    archive::write_u32(os, 1);
    archive::write_string(os, ck.config_json);
    archive::write_string(os, ck.config_digest);
    archive::write_i64(os, ck.epoch);
    archive::write_i64(os, ck.step);
    archive::write_string(os, ck.rng_state);
    archive::write_tensors(os, ck.parameters);
    archive::write_tensors(os, ck.buffers);
    archive::write_tensors(os, ck.optimizer);
    if (!os) throw IoError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("cannot open checkpoint " + path.string());
  archive::expect_magic(is, "SCKP", path.string());
  if (archive::read_u32(is) != 1) throw IoError(path.string() + ": unsupported checkpoint version");
  Checkpoint ck;
  ck.config_json = archive::read_string(is);
  ck.config_digest = archive::read_string(is);
  ck.epoch = static_cast<int>(archive::read_i64(is));
  ck.step = archive::read_i64(is);
  ck.rng_state = archive::read_string(is);
  ck.parameters = archive::read_tensors(is);
  ck.buffers = archive::read_tensors(is);
  ck.optimizer = archive::read_tensors(is);
  return ck;
}

}  // namespace seamless
