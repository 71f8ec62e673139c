#pragma once

#include <memory>
#include <string>
#include <vector>

#include "hallucheck/image.hpp"
#include "hallucheck/metrics.hpp"

namespace hallucheck::adapters {

/// Extracts object tags from an image (e.g. a Recognize-Anything service).
class Tagger {
 public:
  virtual ~Tagger() = default;
  virtual std::vector<std::string> tags(const Image& img) = 0;
};

/// Open-vocabulary segmenter returning per-pixel distributions over `tags`.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual metrics::SegmentationDistribution segment(const Image& img, const std::vector<std::string>& tags) = 0;
};

/// Validates inputs and output around a segmenter call.
metrics::SegmentationDistribution segment(const Image& img, const std::vector<std::string>& tags, Segmenter& adapter);

/// Returns a fixed tag list.
class StubTagger : public Tagger {
 public:
  explicit StubTagger(std::vector<std::string> tags) : tags_(std::move(tags)) {}
  std::vector<std::string> tags(const Image&) override { return tags_; }

 private:
  std::vector<std::string> tags_;
};

/// Every pixel gets [1/K, ..., 1/K].
class UniformSegmenter : public Segmenter {
 public:
  metrics::SegmentationDistribution segment(const Image& img, const std::vector<std::string>& tags) override;
};

/// One-hot maps: pixel class = floor(luma * K) clamped. Deterministic and
/// sensitive to content, so SR/GT differences show up in SSD.
class OneHotSegmenter : public Segmenter {
 public:
  metrics::SegmentationDistribution segment(const Image& img, const std::vector<std::string>& tags) override;
};

/// Soft variant of OneHotSegmenter: softmax over negative squared distance of
/// the pixel luma to K evenly spaced class centres.
class SoftLumaSegmenter : public Segmenter {
 public:
  explicit SoftLumaSegmenter(double temperature = 0.05) : temperature_(temperature) {}
  metrics::SegmentationDistribution segment(const Image& img, const std::vector<std::string>& tags) override;

 private:
  double temperature_;
};

/// Client for an external model served over HTTP. Images travel as base64 PNG.
///   scalar metric:  POST {url}  {"metric", "sr", "gt"?}          -> {"value": real}
///   tagger:         POST {url}  {"image"}                         -> {"tags": [string]}
///   segmenter:      POST {url}  {"image", "tags"}                 -> {"height", "width", "probs": [[...K]...]}
struct HttpEndpoint {
  std::string url;  // scheme://host[:port]/path
  int timeout_s = 120;
};

double http_scalar_metric(const HttpEndpoint& ep, const std::string& metric, const Image& sr, const Image* gt);

class HttpTagger : public Tagger {
 public:
  explicit HttpTagger(HttpEndpoint ep) : ep_(std::move(ep)) {}
  std::vector<std::string> tags(const Image& img) override;

 private:
  HttpEndpoint ep_;
};

class HttpSegmenter : public Segmenter {
 public:
  explicit HttpSegmenter(HttpEndpoint ep) : ep_(std::move(ep)) {}
  metrics::SegmentationDistribution segment(const Image& img, const std::vector<std::string>& tags) override;

 private:
  HttpEndpoint ep_;
};

/// Splits "scheme://host:port/path" into (scheme://host:port, /path).
std::pair<std::string, std::string> split_url(const std::string& url);

}  // namespace hallucheck::adapters
