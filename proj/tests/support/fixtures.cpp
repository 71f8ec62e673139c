#include "fixtures.hpp"

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "hallucheck/rng.hpp"
#include "hallucheck/safetensors.hpp"

namespace fs = std::filesystem;

namespace hallucheck::fixtures {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hallucheck_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Image textured_image(int height, int width, std::uint64_t seed) {
  Rng rng(derive_key(seed, {0x746578ULL}));
  double f[3][2], ph[3];
  for (int c = 0; c < 3; ++c) {
    f[c][0] = rng.uniform(0.05, 0.6);
    f[c][1] = rng.uniform(0.05, 0.6);
    ph[c] = rng.uniform(0.0, 6.28);
  }
  const int edge = static_cast<int>(rng.uniform_int(width / 4, 3 * width / 4));
  Image img(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = 0.5 + 0.25 * std::sin(f[c][0] * x + f[c][1] * y + ph[c]) +
                   0.1 * std::cos(0.9 * f[c][1] * x - 1.3 * f[c][0] * y);
        if (x >= edge) v += 0.12;
        img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return quantize8(img);
}

Image add_noise(const Image& img, double sigma, std::uint64_t seed) {
  Rng rng(derive_key(seed, {0x6e6f69ULL}));
  Image out = img;
  for (auto& v : out.data()) v = static_cast<float>(std::clamp(v + sigma * rng.normal(), 0.0, 1.0));
  return quantize8(out);
}

TripletFixture make_triplets(const fs::path& dir, int count, int size, int scale,
                             const std::vector<std::string>& models, std::uint64_t seed) {
  TripletFixture fx;
  fx.dir = dir;
  for (const char* sub : {"gt", "sr", "lr"}) fs::create_directories(dir / sub);
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "t%03d", i);
    const Image gt = textured_image(size, size, derive_key(seed, {static_cast<std::uint64_t>(i)}));
    const Image sr = add_noise(gt, 0.01 + 0.02 * i, derive_key(seed, {static_cast<std::uint64_t>(i), 1}));
    const Image lr = quantize8(resize(gt, size / scale, size / scale, Interp::Area));
    write_png(gt, dir / "gt" / (std::string(id) + ".png"));
    write_png(sr, dir / "sr" / (std::string(id) + ".png"));
    write_png(lr, dir / "lr" / (std::string(id) + ".png"));
    ImageTriplet t;
    t.id = id;
    t.gt = {id, fs::path("gt") / (std::string(id) + ".png"), Role::GT, size, size};
    t.sr = {id, fs::path("sr") / (std::string(id) + ".png"), Role::SR, size, size};
    t.lr = {id, fs::path("lr") / (std::string(id) + ".png"), Role::LR, size / scale, size / scale};
    t.model_tag = models[static_cast<std::size_t>(i) % models.size()];
    t.dataset_tag = "fixture";
    t.scale = scale;
    fx.manifest.entries.push_back(t);
  }
  fx.manifest_path = dir / "manifest.jsonl";
  save_manifest(fx.manifest, fx.manifest_path);
  fx.manifest = load_manifest(fx.manifest_path);
  return fx;
}

void write_jpeg(const Image& img, const fs::path& path, int quality) {
  cv::Mat m(img.height(), img.width(), CV_8UC3);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c)  // OpenCV stores BGR
        m.at<cv::Vec3b>(y, x)[2 - c] = static_cast<unsigned char>(std::lround(img.at(y, x, c) * 255.0f));
  if (!cv::imwrite(path.string(), m, {cv::IMWRITE_JPEG_QUALITY, quality})) throw std::runtime_error("imwrite failed");
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<hs::HSRecord> swin2sr_records() {
  // 654 + 1284 + 3320 + 3066 + 1676 = 10000 runs, mean 3.3826
  const int counts[5] = {654, 1284, 3320, 3066, 1676};
  std::vector<int> scores;
  for (int s = 1; s <= 5; ++s) scores.insert(scores.end(), counts[s - 1], s);
  std::vector<hs::HSRecord> out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    hs::HSRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "swin%04zu", i / 5);
    r.triplet_id = id;
    r.run_index = static_cast<int>(i % 5);
    r.score = scores[i];
    r.reasoning = "fixture";
    r.model_id = "fixture";
    out.push_back(std::move(r));
  }
  return out;
}

void write_tiny_vit(const fs::path& path, const TinyVit& s) {
  Rng rng(s.seed);
  std::map<std::string, Tensor> t;
  auto rnd = [&](std::vector<std::int64_t> shape, double scale, double offset = 0.0) {
    Tensor x;
    x.shape = std::move(shape);
    x.data.resize(static_cast<std::size_t>(x.numel()));
    for (auto& v : x.data) v = static_cast<float>(offset + scale * rng.normal());
    return x;
  };
  const std::int64_t d = s.dim, m = s.mlp, np = std::int64_t(s.pos_grid) * s.pos_grid + 1;
  const std::string root = s.clip ? "vision_model." : "";
  auto norm = [&](const std::string& name) {
    t[name + ".weight"] = rnd({d}, 0.1, 1.0);
    t[name + ".bias"] = rnd({d}, 0.1);
  };
  auto lin = [&](const std::string& name, std::int64_t out, std::int64_t in) {
    t[name + ".weight"] = rnd({out, in}, 1.0 / std::sqrt(double(in)));
    t[name + ".bias"] = rnd({out}, 0.05);
  };
  if (s.clip) {
    t[root + "embeddings.patch_embedding.weight"] = rnd({d, 3, s.patch, s.patch}, 0.1);
    t[root + "embeddings.class_embedding"] = rnd({d}, 0.5);
    t[root + "embeddings.position_embedding.weight"] = rnd({np, d}, 0.3);
    norm(root + "pre_layrnorm");
    norm(root + "post_layernorm");
  } else {
    t["embeddings.patch_embeddings.projection.weight"] = rnd({d, 3, s.patch, s.patch}, 0.1);
    t["embeddings.patch_embeddings.projection.bias"] = rnd({d}, 0.05);
    t["embeddings.cls_token"] = rnd({1, 1, d}, 0.5);
    t["embeddings.mask_token"] = rnd({1, d}, 0.5);
    t["embeddings.position_embeddings"] = rnd({1, np, d}, 0.3);
    if (s.registers > 0) t["embeddings.register_tokens"] = rnd({1, s.registers, d}, 0.5);
    norm("layernorm");
  }
  for (int i = 0; i < s.depth; ++i) {
    if (s.clip) {
      const std::string p = root + "encoder.layers." + std::to_string(i) + ".";
      norm(p + "layer_norm1");
      norm(p + "layer_norm2");
      for (const char* n : {"q_proj", "k_proj", "v_proj", "out_proj"}) lin(p + "self_attn." + n, d, d);
      lin(p + "mlp.fc1", m, d);
      lin(p + "mlp.fc2", d, m);
    } else {
      const std::string p = "encoder.layer." + std::to_string(i) + ".";
      norm(p + "norm1");
      norm(p + "norm2");
      for (const char* n : {"query", "key", "value"}) lin(p + "attention.attention." + n, d, d);
      lin(p + "attention.output.dense", d, d);
      lin(p + "mlp.fc1", m, d);
      lin(p + "mlp.fc2", d, m);
      t[p + "layer_scale1.lambda1"] = rnd({d}, 0.2, 0.5);
      t[p + "layer_scale2.lambda1"] = rnd({d}, 0.2, 0.5);
    }
  }
  std::map<std::string, std::string> meta{{"num_heads", std::to_string(s.heads)}};
  if (s.clip) meta["hidden_act"] = "quick_gelu";
  save_safetensors(path, t, meta);
}

}  // namespace hallucheck::fixtures

namespace hallucheck::fixtures {

GradCheck reward_gradient_check(align::ToyAdapter& adapter, const Image& lr, const Image& gt,
                                const align::RewardModels& models, const align::RewardConfig& reward,
                                std::uint64_t key, int coords, double h) {
  const int size = adapter.options().size;
  auto eval = [&](bool grads) {
    auto& ps = adapter.lora();
    if (grads)
      for (auto& p : ps) p.zero_grad();
    ad::Tape tape;
    Rng rng(key);
    auto sr = adapter.sample_differentiable(tape, lr, rng);
    auto r = align::combined_reward(tape, sr, size, size, gt, models, reward);
    const double v = r.scalar();
    if (grads) tape.backward(r);
    return v;
  };
  eval(true);
  std::vector<ad::Mat> grads;
  for (const auto& p : adapter.lora()) grads.push_back(p.grad);

  Rng pick(derive_key(key, {0x6664}));
  double num = 0, den = 0;
  for (int k = 0; k < coords; ++k) {
    const auto pi = static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(adapter.lora().size()) - 1));
    auto& v = adapter.lora()[pi].value;
    const auto i = static_cast<Eigen::Index>(pick.uniform_int(0, v.size() - 1));
    const double x0 = v.data()[i];
    v.data()[i] = x0 + h;
    const double up = eval(false);
    v.data()[i] = x0 - h;
    const double dn = eval(false);
    v.data()[i] = x0;
    const double fd = (up - dn) / (2 * h);
    num += std::pow(fd - grads[pi].data()[i], 2);
    den += fd * fd;
  }
  return {std::sqrt(num / std::max(den, 1e-300)), std::sqrt(den), coords};
}

}  // namespace hallucheck::fixtures
