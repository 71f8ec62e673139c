#include "hallucheck/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "hallucheck/error.hpp"

namespace hallucheck {
namespace {

cv::Mat to_mat(const Image& img) {
  cv::Mat m(img.height(), img.width(), CV_32FC3);
  std::copy(img.data().begin(), img.data().end(), m.ptr<float>());
  return m;
}

Image from_mat(const cv::Mat& m) {
  cv::Mat f;
  if (m.type() != CV_32FC3) m.convertTo(f, CV_32FC3);
  else f = m.isContinuous() ? m : m.clone();
  Image out(f.rows, f.cols);
  std::copy(f.ptr<float>(), f.ptr<float>() + out.size(), out.data().begin());
  return out;
}

cv::Mat to_bgr8(const Image& img) {
  cv::Mat rgb8(img.height(), img.width(), CV_8UC3);
  auto* p = rgb8.ptr<unsigned char>();
  const auto src = img.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const float v = std::clamp(src[i], 0.0f, 1.0f);
    p[i] = static_cast<unsigned char>(std::floor(v * 255.0f + 0.5f));
  }
  cv::Mat bgr;
  cv::cvtColor(rgb8, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

bool is_png(std::span<const unsigned char> b) {
  static constexpr unsigned char sig[] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  return b.size() >= 8 && std::equal(std::begin(sig), std::end(sig), b.begin());
}

bool is_jpeg(std::span<const unsigned char> b) {
  return b.size() >= 3 && b[0] == 0xff && b[1] == 0xd8 && b[2] == 0xff;
}

int cv_interp(Interp i) {
  switch (i) {
    case Interp::Nearest: return cv::INTER_NEAREST;
    case Interp::Linear: return cv::INTER_LINEAR;
    case Interp::Cubic: return cv::INTER_CUBIC;
    case Interp::Area: return cv::INTER_AREA;
  }
  return cv::INTER_LINEAR;
}

}  // namespace

Plane luma(const Image& img) {
  Plane p{img.height(), img.width(), std::vector<double>(static_cast<std::size_t>(img.height()) * img.width())};
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      p.at(y, x) = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
  return p;
}

Image decode_image_bytes(std::span<const unsigned char> bytes) {
  if (!is_png(bytes) && !is_jpeg(bytes)) throw IoError("unsupported image format (expected PNG or JPEG)");
  cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<unsigned char*>(bytes.data()));
  cv::Mat m = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw IoError("failed to decode image");
  if (m.channels() != 3) throw IoError("expected 3-channel RGB image, got " + std::to_string(m.channels()) + " channels");
  double scale = 1.0 / 255.0;
  if (m.depth() == CV_16U) scale = 1.0 / 65535.0;
  else if (m.depth() != CV_8U) throw IoError("unsupported sample depth");
  cv::Mat rgb;
  cv::cvtColor(m, rgb, cv::COLOR_BGR2RGB);
  // Divide rather than multiply so 8-bit i maps exactly to the float nearest i/255.
  Image out(rgb.rows, rgb.cols);
  auto dst = out.data();
  if (rgb.depth() == CV_8U) {
    const auto* p = rgb.ptr<unsigned char>();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(p[i] / 255.0);
  } else {
    const auto* p = rgb.ptr<std::uint16_t>();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(p[i] * scale);
  }
  return out;
}

Image decode_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (!std::filesystem::exists(path)) throw FileNotFound(path.string());
    throw IoError("cannot read " + path.string());
  }
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_image_bytes(bytes);
  } catch (const FileNotFound&) {
    throw;
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::vector<unsigned char> encode_png(const Image& img) {
  std::vector<unsigned char> out;
  if (!cv::imencode(".png", to_bgr8(img), out, {cv::IMWRITE_PNG_COMPRESSION, 6}))
    throw IoError("PNG encoding failed");
  return out;
}

void write_png(const Image& img, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write " + path.string());
}

Image jpeg_roundtrip(const Image& img, int quality) {
  std::vector<unsigned char> buf;
  if (!cv::imencode(".jpg", to_bgr8(img), buf, {cv::IMWRITE_JPEG_QUALITY, std::clamp(quality, 0, 100)}))
    throw IoError("JPEG encoding failed");
  return decode_image_bytes(buf);
}

Image resize(const Image& img, int height, int width, Interp interp) {
  if (height <= 0 || width <= 0) throw ValidationError("resize target must be positive");
  if (height == img.height() && width == img.width()) return img;
  cv::Mat out;
  cv::resize(to_mat(img), out, cv::Size(width, height), 0, 0, cv_interp(interp));
  return from_mat(out);
}

Image crop(const Image& img, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || height <= 0 || width <= 0 || top + height > img.height() ||
      left + width > img.width())
    throw ValidationError("crop window outside image");
  Image out(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(top + y, left + x, c);
  return out;
}

Image quantize8(const Image& img) {
  Image out = img;
  for (auto& v : out.data()) {
    const float q = std::floor(std::clamp(v, 0.0f, 1.0f) * 255.0f + 0.5f);
    v = static_cast<float>(q / 255.0);
  }
  return out;
}

}  // namespace hallucheck
