#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "seamless/errors.hpp"
#include "seamless/tensor.hpp"

namespace seamless::image_io {

namespace detail {

inline cv::Mat read_raw(const std::string& path) {
  if (!std::filesystem::exists(path)) throw NotFoundError("no such file: " + path);
  cv::Mat m;
  try {
    m = cv::imread(path, cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    throw DecodeError("cannot decode " + path + ": " + e.what());
  }
  if (m.empty()) throw DecodeError("cannot decode image file " + path);
  return m;
}

inline double unit_scale(int depth, const std::string& path) {
  if (depth == CV_8U) return 1.0 / 255.0;
  if (depth == CV_16U) return 1.0 / 65535.0;
  throw DecodeError("unsupported bit depth in " + path);
}

inline void write_mat(const std::string& path, const cv::Mat& m) {
  const auto parent = std::filesystem::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty()) std::filesystem::create_directories(parent, ec);
  bool ok = false;
  try {
    ok = cv::imwrite(path, m);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write " + path + ": " + e.what());
  }
  if (!ok) throw IoError("cannot write " + path);
}

}  // namespace detail

/// RGB image as (1, 3, H, W) in [0, 1]. Gray inputs are replicated.
inline Tensor read_rgb(const std::string& path) {
  const cv::Mat m = detail::read_raw(path);
  const double scale = detail::unit_scale(m.depth(), path);
  const int ch = m.channels();
  Tensor t({1, 3, m.rows, m.cols});
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x)
      for (int c = 0; c < 3; ++c) {
        // OpenCV stores BGR(A)
        const int src = ch >= 3 ? 2 - c : 0;
        const double v = m.depth() == CV_8U ? m.ptr<unsigned char>(y)[x * ch + src]
                                            : m.ptr<unsigned short>(y)[x * ch + src];
        t.at(0, c, y, x) = v * scale;
      }
  return t;
}

/// Single-channel map as (1, 1, H, W) in [0, 1]; colour inputs use the first
/// (blue) channel, which equals the others for grayscale-as-RGB files.
inline Tensor read_gray(const std::string& path) {
  const cv::Mat m = detail::read_raw(path);
  const double scale = detail::unit_scale(m.depth(), path);
  const int ch = m.channels();
  Tensor t({1, 1, m.rows, m.cols});
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) {
      const double v = m.depth() == CV_8U ? m.ptr<unsigned char>(y)[x * ch] : m.ptr<unsigned short>(y)[x * ch];
      t.at(0, 0, y, x) = v * scale;
    }
  return t;
}

/// Writes plane (0, 0) of a [0, 1] map with round(v * 255).
inline void write_gray8(const std::string& path, const Tensor& map) {
  const Shape s = map.shape();
  cv::Mat m(s.h, s.w, CV_8UC1);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      m.at<unsigned char>(y, x) = static_cast<unsigned char>(std::lround(std::clamp(map.at(0, 0, y, x), 0.0, 1.0) * 255.0));
  detail::write_mat(path, m);
}

/// Writes plane (0, 0) of a [0, 1] map with round(v * 65535).
inline void write_gray16(const std::string& path, const Tensor& map) {
  const Shape s = map.shape();
  cv::Mat m(s.h, s.w, CV_16UC1);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      m.at<unsigned short>(y, x) =
          static_cast<unsigned short>(std::lround(std::clamp(map.at(0, 0, y, x), 0.0, 1.0) * 65535.0));
  detail::write_mat(path, m);
}

/// Writes a (1, 3, H, W) [0, 1] image as 8-bit.
inline void write_rgb8(const std::string& path, const Tensor& image) {
  const Shape s = image.shape();
  if (s.c != 3) throw ShapeError("write_rgb8 expects 3 channels, got " + s.str());
  cv::Mat m(s.h, s.w, CV_8UC3);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < 3; ++c)
        m.ptr<unsigned char>(y)[x * 3 + (2 - c)] =
            static_cast<unsigned char>(std::lround(std::clamp(image.at(0, c, y, x), 0.0, 1.0) * 255.0));
  detail::write_mat(path, m);
}

}  // namespace seamless::image_io
