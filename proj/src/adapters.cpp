#include "hallucheck/adapters.hpp"

#include <algorithm>
#include <cmath>

#include <httplib.h>
#include <json.hpp>

#include "hallucheck/error.hpp"
#include "hallucheck/util.hpp"

namespace hallucheck::adapters {

using metrics::SegmentationDistribution;
using nlohmann::json;

namespace {

SegmentationDistribution empty_like(const Image& img, const std::vector<std::string>& tags) {
  SegmentationDistribution s;
  s.labels = tags;
  s.height = img.height();
  s.width = img.width();
  s.probs.assign(static_cast<std::size_t>(s.height) * s.width * tags.size(), 0.0);
  return s;
}

json post_json(const HttpEndpoint& ep, const json& body) {
  auto [host, path] = split_url(ep.url);
  httplib::Client cli(host);
  cli.set_connection_timeout(ep.timeout_s);
  cli.set_read_timeout(ep.timeout_s);
  auto res = cli.Post(path, body.dump(), "application/json");
  if (!res) throw Unavailable("adapter " + ep.url + " unreachable: " + httplib::to_string(res.error()));
  if (res->status != 200)
    throw Unavailable("adapter " + ep.url + " returned HTTP " + std::to_string(res->status));
  try {
    return json::parse(res->body);
  } catch (const json::parse_error& e) {
    throw ParseError("adapter " + ep.url + " returned invalid JSON: " + e.what());
  }
}

std::string png_b64(const Image& img) { return util::base64_encode(encode_png(img)); }

}  // namespace

std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  const auto start = scheme == std::string::npos ? 0 : scheme + 3;
  const auto slash = url.find('/', start);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

SegmentationDistribution segment(const Image& img, const std::vector<std::string>& tags, Segmenter& adapter) {
  if (tags.empty()) throw ValidationError("segment: empty tag list");
  auto out = adapter.segment(img, tags);
  if (out.labels != tags) throw ValidationError("segment: adapter returned a different label list");
  if (out.height != img.height() || out.width != img.width())
    throw ShapeMismatch("segment: adapter output size differs from the image");
  out.validate();
  return out;
}

SegmentationDistribution UniformSegmenter::segment(const Image& img, const std::vector<std::string>& tags) {
  auto s = empty_like(img, tags);
  std::fill(s.probs.begin(), s.probs.end(), 1.0 / static_cast<double>(tags.size()));
  return s;
}

SegmentationDistribution OneHotSegmenter::segment(const Image& img, const std::vector<std::string>& tags) {
  auto s = empty_like(img, tags);
  const int k = static_cast<int>(tags.size());
  const Plane y = luma(img);
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c)
      s.at(r, c, std::clamp(static_cast<int>(y.at(r, c) * k), 0, k - 1)) = 1.0;
  return s;
}

SegmentationDistribution SoftLumaSegmenter::segment(const Image& img, const std::vector<std::string>& tags) {
  auto s = empty_like(img, tags);
  const int k = static_cast<int>(tags.size());
  const Plane y = luma(img);
  std::vector<double> logits(k);
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c) {
      double mx = -1e300;
      for (int j = 0; j < k; ++j) {
        const double centre = (j + 0.5) / k;
        const double d = y.at(r, c) - centre;
        logits[j] = -d * d / temperature_;
        mx = std::max(mx, logits[j]);
      }
      double total = 0.0;
      for (int j = 0; j < k; ++j) total += (logits[j] = std::exp(logits[j] - mx));
      for (int j = 0; j < k; ++j) s.at(r, c, j) = logits[j] / total;
    }
  return s;
}

double http_scalar_metric(const HttpEndpoint& ep, const std::string& metric, const Image& sr, const Image* gt) {
  json body{{"metric", metric}, {"sr", png_b64(sr)}};
  if (gt) body["gt"] = png_b64(*gt);
  const json res = post_json(ep, body);
  if (!res.contains("value") || !res["value"].is_number())
    throw ParseError("adapter " + ep.url + " response lacks numeric 'value'");
  return res["value"].get<double>();
}

std::vector<std::string> HttpTagger::tags(const Image& img) {
  const json res = post_json(ep_, json{{"image", png_b64(img)}});
  if (!res.contains("tags") || !res["tags"].is_array()) throw ParseError("tagger response lacks 'tags'");
  return res["tags"].get<std::vector<std::string>>();
}

SegmentationDistribution HttpSegmenter::segment(const Image& img, const std::vector<std::string>& tags) {
  const json res = post_json(ep_, json{{"image", png_b64(img)}, {"tags", tags}});
  SegmentationDistribution s;
  s.labels = tags;
  try {
    s.height = res.at("height").get<int>();
    s.width = res.at("width").get<int>();
    for (const auto& px : res.at("probs"))
      for (const auto& v : px) s.probs.push_back(v.get<double>());
  } catch (const json::exception& e) {
    throw ParseError(std::string("segmenter response malformed: ") + e.what());
  }
  return s;
}

}  // namespace hallucheck::adapters
