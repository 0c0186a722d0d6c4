#pragma once

// 8-bit PNG I/O, pixel normalisation and base64 helpers.

#include <openssl/evp.h>
#include <png.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "lapig/tensor.hpp"

namespace lapig {

// 8-bit planar image, (C, H, W) with C in {1, 3}.
using ByteImage = Tensor<std::uint8_t>;

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::uint8_t> interleave(const ByteImage& img) {
  const std::size_t c = img.dim(0), hw = img.dim(1) * img.dim(2);
  std::vector<std::uint8_t> out(c * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t k = 0; k < c; ++k) out[i * c + k] = img[k * hw + i];
  return out;
}

inline png_image png_header(const ByteImage& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
    throw ImageIoError("PNG images must be (1|3, H, W), got " + shape_str(img.shape()));
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.dim(2));
  im.height = static_cast<png_uint_32>(img.dim(1));
  im.format = img.dim(0) == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  return im;
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const ByteImage& img) {
  png_image im = detail::png_header(img);
  const auto pixels = detail::interleave(img);
  if (!png_image_write_to_file(&im, path.string().c_str(), 0, pixels.data(), 0, nullptr))
    throw ImageIoError("cannot write " + path.string() + ": " + im.message);
}

inline std::vector<std::uint8_t> encode_png(const ByteImage& img) {
  png_image im = detail::png_header(img);
  const auto pixels = detail::interleave(img);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&im, nullptr, &size, 0, pixels.data(), 0, nullptr))
    throw ImageIoError(std::string("PNG encode failed: ") + im.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&im, out.data(), &size, 0, pixels.data(), 0, nullptr))
    throw ImageIoError(std::string("PNG encode failed: ") + im.message);
  out.resize(size);
  return out;
}

// Grey files load as one channel; anything else is converted to RGB.
inline ByteImage read_png(const std::filesystem::path& path) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.string().c_str()))
    throw ImageIoError("cannot read " + path.string() + ": " + im.message);
  const bool gray = (im.format & PNG_FORMAT_FLAG_COLOR) == 0;
  im.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const std::size_t c = gray ? 1 : 3, h = im.height, w = im.width;
  std::vector<std::uint8_t> buf(c * h * w);
  if (!png_image_finish_read(&im, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&im);
    throw ImageIoError("cannot decode " + path.string() + ": " + im.message);
  }
  ByteImage out({c, h, w});
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t k = 0; k < c; ++k) out[k * h * w + i] = buf[i * c + k];
  return out;
}

// [0, 255] -> [-1, 1]
template <class T = float>
Tensor<T> normalize(const ByteImage& img) {
  Tensor<T> out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<T>(img[i]) / T(127.5) - T(1);
  return out;
}

// [-1, 1] -> [0, 255], clamped and rounded.
template <class T>
ByteImage denormalize(const Tensor<T>& x) {
  ByteImage out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = std::round((static_cast<double>(x[i]) + 1.0) * 127.5);
    out[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return out;
}

// (1,H,W) -> (3,H,W) by copying the single plane.
template <class T>
Tensor<T> replicate_to_rgb(const Tensor<T>& x) {
  if (x.dim(0) == 3) return x;
  if (x.dim(0) != 1) throw ShapeError("replicate_to_rgb expects 1 or 3 channels");
  const std::size_t hw = x.dim(1) * x.dim(2);
  Tensor<T> out({3, x.dim(1), x.dim(2)});
  for (std::size_t k = 0; k < 3; ++k) std::copy(x.data(), x.data() + hw, out.data() + k * hw);
  return out;
}

// (C,H,W) -> (1,H,W) by averaging channels.
template <class T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor<T> out({1, x.dim(1), x.dim(2)});
  for (std::size_t i = 0; i < hw; ++i) {
    T acc = 0;
    for (std::size_t k = 0; k < c; ++k) acc += x[k * hw + i];
    out[i] = acc / static_cast<T>(c);
  }
  return out;
}

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

}  // namespace lapig
