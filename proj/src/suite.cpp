#include "hallucheck/suite.hpp"

#include <cmath>

#include "hallucheck/error.hpp"
#include "hallucheck/log.hpp"
#include "hallucheck/metrics.hpp"

namespace hallucheck::metrics {

using features::TokenKind;

const MetricEntry& MetricRegistry::register_metric(const std::string& name, MetricFn fn, MetricKind kind,
                                                   Direction direction) {
  if (name.empty()) throw ValidationError("metric name must be non-empty");
  if (!fn) throw ValidationError("metric '" + name + "' registered without a callable");
  auto it = entries_.find(name);
  if (it != entries_.end()) {
    if (it->second.available()) throw ValidationError("metric '" + name + "' is already registered");
    it->second = MetricEntry{name, kind, direction, std::move(fn)};
    return it->second;
  }
  return entries_.emplace(name, MetricEntry{name, kind, direction, std::move(fn)}).first->second;
}

void MetricRegistry::declare_slot(const std::string& name, MetricKind kind, Direction direction) {
  entries_.try_emplace(name, MetricEntry{name, kind, direction, {}});
}

const MetricEntry& MetricRegistry::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw UnknownName("unknown metric '" + name + "'");
  return it->second;
}

std::vector<std::string> MetricRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

std::map<std::string, Direction> MetricRegistry::directions() const {
  std::map<std::string, Direction> out;
  for (const auto& [k, e] : entries_) out[k] = e.direction;
  return out;
}

Direction default_direction(const std::string& m) {
  static const std::map<std::string, Direction> higher = {
      {"psnr", Direction::Higher},    {"ssim", Direction::Higher},   {"musiq", Direction::Higher},
      {"clipiqa", Direction::Higher}, {"qalign", Direction::Higher}, {"sharpness", Direction::Higher},
      {"hs", Direction::Higher},      {"hs_mean", Direction::Higher}};
  return higher.contains(m) ? Direction::Higher : Direction::Lower;
}

MetricRegistry default_registry(const SuiteResources& res) {
  MetricRegistry reg;
  reg.register_metric("mse", [](const MetricInput& in) { return mse(*in.sr, *in.gt); }, MetricKind::FR);
  reg.register_metric("psnr", [](const MetricInput& in) { return psnr(*in.sr, *in.gt); }, MetricKind::FR,
                      Direction::Higher);
  reg.register_metric("ssim", [](const MetricInput& in) { return ssim(*in.sr, *in.gt); }, MetricKind::FR,
                      Direction::Higher);
  reg.register_metric("sharpness", [](const MetricInput& in) { return sharpness(*in.sr); }, MetricKind::NR,
                      Direction::Higher);

  for (const std::string family : {"dino", "clip"}) {
    for (const auto& [suffix, kind, interm] :
         {std::tuple{"st", TokenKind::ST, false}, std::tuple{"cls", TokenKind::CLS, false},
          std::tuple{"st_interm", TokenKind::ST, true}, std::tuple{"cls_interm", TokenKind::CLS, true}}) {
      const std::string name = family + "_" + suffix;
      auto it = res.backends.find(family);
      if (it == res.backends.end() || !it->second) {
        reg.declare_slot(name, MetricKind::FR, Direction::Lower);
        continue;
      }
      auto backend = it->second;
      auto layers = interm ? res.interm_layers : std::vector<int>{backend->depth() - 1};
      reg.register_metric(
          name,
          [backend, kind, layers](const MetricInput& in) {
            const auto fs = features::embed(*backend, *in.sr, kind, layers);
            const auto fg = features::embed(*backend, *in.gt, kind, layers);
            return features::feature_distance(fg, fs);
          },
          MetricKind::FR);
    }
  }

  if (res.tagger && res.segmenter) {
    auto tagger = res.tagger;
    auto segmenter = res.segmenter;
    reg.register_metric(
        "ssd",
        [tagger, segmenter](const MetricInput& in) {
          const auto tags = tagger->tags(*in.gt);
          const auto sg = adapters::segment(*in.gt, tags, *segmenter);
          const auto ss = adapters::segment(*in.sr, tags, *segmenter);
          return ssd(sg, ss);
        },
        MetricKind::FR);
  } else {
    reg.declare_slot("ssd", MetricKind::FR, Direction::Lower);
  }

  for (const auto& [name, kind] : {std::pair{"lpips", MetricKind::FR}, std::pair{"dists", MetricKind::FR},
                                   std::pair{"musiq", MetricKind::NR}, std::pair{"clipiqa", MetricKind::NR},
                                   std::pair{"qalign", MetricKind::NR}, std::pair{"tlr", MetricKind::FR},
                                   std::pair{"deepvit", MetricKind::FR}})
    reg.declare_slot(name, kind, default_direction(name));
  return reg;
}

void check_metric_names(const MetricRegistry& reg, const std::vector<std::string>& names) {
  for (const auto& n : names)
    if (!reg.known(n)) throw UnknownName("unknown metric '" + n + "'");
}

MetricVector run_metric_suite(const std::string& triplet_id, const Image& lr, const Image& sr, const Image& gt,
                              int scale, const SuiteConfig& cfg, const MetricRegistry& reg) {
  check_metric_names(reg, cfg.metrics);
  if (!sr.same_shape(gt)) throw ValidationError("triplet '" + triplet_id + "': sr and gt dimensions differ");
  if (!lr.empty() && (gt.height() != lr.height() * scale || gt.width() != lr.width() * scale))
    throw ValidationError("triplet '" + triplet_id + "': gt size is not lr size x" + std::to_string(scale));

  MetricVector out;
  out.triplet_id = triplet_id;
  for (const auto& name : cfg.metrics) {
    const auto& e = reg.at(name);
    if (!e.available()) {
      const std::string reason = "no adapter configured for '" + name + "'";
      log::warn("skipping " + name + " on " + triplet_id + ": " + reason);
      out.skipped.emplace_back(name, reason);
      continue;
    }
    MetricInput in;
    in.triplet_id = triplet_id;
    in.sr = &sr;
    if (e.kind == MetricKind::FR) {
      in.gt = &gt;
      in.lr = lr.empty() ? nullptr : &lr;
    }
    double v;
    try {
      v = e.fn(in);
    } catch (const Unavailable& ex) {
      log::warn("skipping " + name + " on " + triplet_id + ": " + ex.what());
      out.skipped.emplace_back(name, ex.what());
      continue;
    }
    if (!std::isfinite(v)) {
      if (name == "psnr" && v > 0) {
        out.skipped.emplace_back(name, "infinite (identical images)");
        continue;
      }
      throw ValidationError("metric '" + name + "' produced a non-finite value on " + triplet_id);
    }
    out.values[name] = v;
  }
  return out;
}

MetricVector run_metric_suite(const ImageTriplet& t, const EvalManifest& m, const SuiteConfig& cfg,
                              const MetricRegistry& reg) {
  check_metric_names(reg, cfg.metrics);
  const Image sr = decode_image(m.resolve(t.sr));
  const Image gt = decode_image(m.resolve(t.gt));
  const Image lr = decode_image(m.resolve(t.lr));
  return run_metric_suite(t.id, lr, sr, gt, t.scale, cfg, reg);
}

}  // namespace hallucheck::metrics
