#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace hallucheck {

/// Interleaved RGB image, float samples in [0, 1].
class Image {
 public:
  Image() = default;
  Image(int height, int width, float fill = 0.0f)
      : height_(height), width_(width), data_(static_cast<std::size_t>(height) * width * 3, fill) {}

  int height() const { return height_; }
  int width() const { return width_; }
  static constexpr int channels() { return 3; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& at(int y, int x, int c) { return data_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c]; }
  float at(int y, int x, int c) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c];
  }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  bool same_shape(const Image& o) const { return height_ == o.height_ && width_ == o.width_; }
  bool operator==(const Image& o) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

/// Single-channel float plane, row-major.
struct Plane {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  double& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

/// BT.601 luma in the image's own range.
Plane luma(const Image& img);

enum class Interp { Nearest, Linear, Cubic, Area };

/// Decodes PNG or JPEG to RGB in [0,1] with 8-bit value i mapped to i/255.
Image decode_image(const std::filesystem::path& path);
Image decode_image_bytes(std::span<const unsigned char> bytes);

void write_png(const Image& img, const std::filesystem::path& path);
std::vector<unsigned char> encode_png(const Image& img);

/// JPEG encode/decode round trip through the codec at the given quality.
Image jpeg_roundtrip(const Image& img, int quality);

Image resize(const Image& img, int height, int width, Interp interp);
Image crop(const Image& img, int top, int left, int height, int width);

/// Quantizes to 8 bits (round-half-up, clamped), as written to disk.
Image quantize8(const Image& img);

}  // namespace hallucheck
