#include "hallucheck/vit.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "hallucheck/error.hpp"

namespace hallucheck::features {

namespace {

Eigen::RowVectorXf row_vector(const Tensor& t) {
  Eigen::RowVectorXf v(t.numel());
  std::copy(t.data.begin(), t.data.end(), v.data());
  return v;
}

TokenMatrix matrix(const Tensor& t, Eigen::Index rows, Eigen::Index cols) {
  if (t.numel() != rows * cols) throw ValidationError("weight tensor has unexpected size");
  TokenMatrix m(rows, cols);
  std::copy(t.data.begin(), t.data.end(), m.data());
  return m;
}

// Torch linear weights are [out, in]; stored transposed for x * W.
TokenMatrix transposed_linear(const Tensor& w) {
  if (w.shape.size() != 2) throw ValidationError("linear weight must be 2-D");
  return matrix(w, w.shape[0], w.shape[1]).transpose();
}

float gelu(float x) { return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752f)); }
float quick_gelu(float x) { return x / (1.0f + std::exp(-1.702f * x)); }

double cubic_a75(double x) {
  constexpr double A = -0.75;
  x = std::abs(x);
  if (x <= 1.0) return ((A + 2) * x - (A + 3)) * x * x + 1;
  if (x < 2.0) return ((A * x - 5 * A) * x + 8 * A) * x - 4 * A;
  return 0.0;
}

double cubic_a50(double x) {
  constexpr double A = -0.5;
  x = std::abs(x);
  if (x < 1.0) return ((A + 2) * x - (A + 3)) * x * x + 1;
  if (x < 2.0) return (((x - 5) * x + 8) * x - 4) * A;
  return 0.0;
}

// Per output index: list of (source index, weight).
using Taps = std::vector<std::vector<std::pair<int, double>>>;

Taps taps_plain(int in, int out) {
  Taps taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double real = scale * (o + 0.5) - 0.5;
    const int i0 = static_cast<int>(std::floor(real));
    const double t = real - i0;
    const double w[4] = {cubic_a75(t + 1), cubic_a75(t), cubic_a75(1 - t), cubic_a75(2 - t)};
    for (int k = 0; k < 4; ++k) taps[o].emplace_back(std::clamp(i0 - 1 + k, 0, in - 1), w[k]);
  }
  return taps;
}

Taps taps_antialias(int in, int out) {
  Taps taps(out);
  const double scale = static_cast<double>(in) / out;
  const double support = scale >= 1.0 ? 2.0 * scale : 2.0;
  const double invscale = scale >= 1.0 ? 1.0 / scale : 1.0;
  for (int o = 0; o < out; ++o) {
    const double center = scale * (o + 0.5);
    const int xmin = std::max(static_cast<int>(center - support + 0.5), 0);
    const int xmax = std::min(static_cast<int>(center + support + 0.5), in);
    double total = 0.0;
    for (int j = xmin; j < xmax; ++j) {
      const double w = cubic_a50((j - center + 0.5) * invscale);
      taps[o].emplace_back(j, w);
      total += w;
    }
    if (total != 0.0)
      for (auto& [j, w] : taps[o]) w /= total;
  }
  return taps;
}

}  // namespace

TokenMatrix resample_grid(const TokenMatrix& grid, int gh, int gw, int oh, int ow, bool antialias) {
  if (grid.rows() != static_cast<Eigen::Index>(gh) * gw) throw ShapeMismatch("resample_grid: grid size");
  const Taps ty = antialias ? taps_antialias(gh, oh) : taps_plain(gh, oh);
  const Taps tx = antialias ? taps_antialias(gw, ow) : taps_plain(gw, ow);
  const Eigen::Index d = grid.cols();
  // Horizontal pass then vertical, accumulating in double.
  Eigen::MatrixXd tmp = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(gh) * ow, d);
  for (int y = 0; y < gh; ++y)
    for (int x = 0; x < ow; ++x)
      for (const auto& [j, w] : tx[x]) tmp.row(y * ow + x) += w * grid.row(y * gw + j).cast<double>();
  TokenMatrix out(static_cast<Eigen::Index>(oh) * ow, d);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(d);
      for (const auto& [j, w] : ty[y]) acc += w * tmp.row(j * ow + x);
      out.row(y * ow + x) = acc.cast<float>();
    }
  return out;
}

VitBackend VitBackend::load(std::string id, const std::filesystem::path& weights) {
  auto st = SafeTensors::load(weights);
  return VitBackend(std::move(id), st);
}

VitBackend::VitBackend(std::string id, const SafeTensors& src) : id_(std::move(id)) {
  SafeTensors st = src;
  st.strip_prefix("dinov2_with_registers.");
  st.strip_prefix("dinov2.");
  st.strip_prefix("vision_model.");
  const auto& meta = st.metadata();
  auto meta_int = [&](const char* key, int fallback) {
    auto it = meta.find(key);
    return it == meta.end() ? fallback : std::stoi(it->second);
  };

  if (st.contains("embeddings.cls_token")) cfg_.flavor = VitFlavor::Dino;
  else if (st.contains("embeddings.class_embedding")) cfg_.flavor = VitFlavor::Clip;
  else throw Unavailable("weights for '" + id_ + "' are neither DINOv2 nor CLIP vision layout");
  const bool dino = cfg_.flavor == VitFlavor::Dino;

  const Tensor& pe = st.get(dino ? "embeddings.patch_embeddings.projection.weight" : "embeddings.patch_embedding.weight");
  if (pe.shape.size() != 4 || pe.shape[1] != 3 || pe.shape[2] != pe.shape[3])
    throw ValidationError("patch embedding weight must be [dim, 3, p, p]");
  cfg_.dim = static_cast<int>(pe.shape[0]);
  cfg_.patch = static_cast<int>(pe.shape[2]);
  cfg_.heads = meta_int("num_heads", cfg_.dim / 64 > 0 ? cfg_.dim / 64 : 1);
  if (auto it = meta.find("layer_norm_eps"); it != meta.end()) cfg_.ln_eps = std::stod(it->second);
  else cfg_.ln_eps = dino ? 1e-6 : 1e-5;
  if (auto it = meta.find("hidden_act"); it != meta.end()) cfg_.quick_gelu = it->second == "quick_gelu";
  if (!dino) {
    cfg_.mean = {0.48145466f, 0.4578275f, 0.40821073f};
    cfg_.std = {0.26862954f, 0.26130258f, 0.27577711f};
  }
  if (meta.contains("image_mean") && meta.contains("image_std")) {
    auto m = nlohmann::json::parse(meta.at("image_mean")).get<std::vector<float>>();
    auto s = nlohmann::json::parse(meta.at("image_std")).get<std::vector<float>>();
    if (m.size() == 3 && s.size() == 3) {
      std::copy(m.begin(), m.end(), cfg_.mean.begin());
      std::copy(s.begin(), s.end(), cfg_.std.begin());
    }
  }

  const int in = 3 * cfg_.patch * cfg_.patch;
  patch_embed_.wt = matrix(pe, cfg_.dim, in).transpose();
  if (dino) patch_embed_.b = row_vector(st.get("embeddings.patch_embeddings.projection.bias"));
  else patch_embed_.b = Eigen::RowVectorXf::Zero(cfg_.dim);

  if (dino) {
    cls_ = row_vector(st.get("embeddings.cls_token"));
    const Tensor& pos = st.get("embeddings.position_embeddings");
    pos_ = matrix(pos, pos.numel() / cfg_.dim, cfg_.dim);
    if (st.contains("embeddings.register_tokens")) {
      const Tensor& reg = st.get("embeddings.register_tokens");
      cfg_.registers = static_cast<int>(reg.numel() / cfg_.dim);
      registers_ = matrix(reg, cfg_.registers, cfg_.dim);
    }
    final_norm_ = {row_vector(st.get("layernorm.weight")), row_vector(st.get("layernorm.bias"))};
  } else {
    cls_ = row_vector(st.get("embeddings.class_embedding"));
    const Tensor& pos = st.get("embeddings.position_embedding.weight");
    pos_ = matrix(pos, pos.numel() / cfg_.dim, cfg_.dim);
    pre_norm_ = {row_vector(st.get("pre_layrnorm.weight")), row_vector(st.get("pre_layrnorm.bias"))};
  }
  cfg_.pos_grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(pos_.rows() - 1))));
  if (cfg_.pos_grid * cfg_.pos_grid + 1 != pos_.rows()) throw ValidationError("positional embedding is not a square grid");

  for (int i = 0;; ++i) {
    const std::string p = dino ? "encoder.layer." + std::to_string(i) + "." : "encoder.layers." + std::to_string(i) + ".";
    if (!st.contains(p + (dino ? "norm1.weight" : "layer_norm1.weight"))) break;
    Block b;
    auto lin = [&](const std::string& name) {
      return Linear{transposed_linear(st.get(name + ".weight")), row_vector(st.get(name + ".bias"))};
    };
    auto norm = [&](const std::string& name) {
      return Norm{row_vector(st.get(name + ".weight")), row_vector(st.get(name + ".bias"))};
    };
    Linear q, k, v;
    if (dino) {
      b.ln1 = norm(p + "norm1");
      b.ln2 = norm(p + "norm2");
      q = lin(p + "attention.attention.query");
      k = lin(p + "attention.attention.key");
      v = lin(p + "attention.attention.value");
      b.proj = lin(p + "attention.output.dense");
      b.fc1 = lin(p + "mlp.fc1");
      b.fc2 = lin(p + "mlp.fc2");
      if (st.contains(p + "layer_scale1.lambda1")) {
        b.ls1 = row_vector(st.get(p + "layer_scale1.lambda1"));
        b.ls2 = row_vector(st.get(p + "layer_scale2.lambda1"));
      }
    } else {
      b.ln1 = norm(p + "layer_norm1");
      b.ln2 = norm(p + "layer_norm2");
      q = lin(p + "self_attn.q_proj");
      k = lin(p + "self_attn.k_proj");
      v = lin(p + "self_attn.v_proj");
      b.proj = lin(p + "self_attn.out_proj");
      b.fc1 = lin(p + "mlp.fc1");
      b.fc2 = lin(p + "mlp.fc2");
    }
    b.qkv.wt.resize(cfg_.dim, 3 * cfg_.dim);
    b.qkv.wt << q.wt, k.wt, v.wt;
    b.qkv.b.resize(3 * cfg_.dim);
    b.qkv.b << q.b, k.b, v.b;
    blocks_.push_back(std::move(b));
  }
  cfg_.depth = static_cast<int>(blocks_.size());
  if (cfg_.depth == 0) throw ValidationError("no transformer blocks found in weights for '" + id_ + "'");
  if (cfg_.dim % cfg_.heads != 0) throw ValidationError("dim is not divisible by head count");
}

TokenMatrix VitBackend::layer_norm(const TokenMatrix& x, const Norm& n) const {
  TokenMatrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Eigen::RowVectorXd row = x.row(r).cast<double>();
    const double mean = row.mean();
    const double var = (row.array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + cfg_.ln_eps);
    out.row(r) = (((row.array() - mean) * inv).cast<float>() * n.w.array() + n.b.array()).matrix();
  }
  return out;
}

TokenMatrix VitBackend::attention(const TokenMatrix& x, const Block& b) const {
  const Eigen::Index n = x.rows();
  const int hd = cfg_.dim / cfg_.heads;
  TokenMatrix qkv = x * b.qkv.wt;
  qkv.rowwise() += b.qkv.b;
  TokenMatrix ctx(n, cfg_.dim);
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  for (int h = 0; h < cfg_.heads; ++h) {
    const auto q = qkv.middleCols(h * hd, hd);
    const auto k = qkv.middleCols(cfg_.dim + h * hd, hd);
    const auto v = qkv.middleCols(2 * cfg_.dim + h * hd, hd);
    TokenMatrix s = (q * k.transpose()) * scale;
    for (Eigen::Index r = 0; r < n; ++r) {
      auto row = s.row(r);
      const float m = row.maxCoeff();
      row = (row.array() - m).exp().matrix();
      row /= row.sum();
    }
    ctx.middleCols(h * hd, hd) = s * v;
  }
  TokenMatrix out = ctx * b.proj.wt;
  out.rowwise() += b.proj.b;
  return out;
}

TokenMatrix VitBackend::position_embedding(int gh, int gw) const {
  if (gh == cfg_.pos_grid && gw == cfg_.pos_grid) return pos_;
  const TokenMatrix grid = pos_.bottomRows(pos_.rows() - 1);
  // DINOv2 resizes with antialiasing, CLIP without.
  TokenMatrix resized = resample_grid(grid, cfg_.pos_grid, cfg_.pos_grid, gh, gw, cfg_.flavor == VitFlavor::Dino);
  TokenMatrix out(resized.rows() + 1, cfg_.dim);
  out.row(0) = pos_.row(0);
  out.bottomRows(resized.rows()) = resized;
  return out;
}

std::vector<TokenMatrix> VitBackend::forward(const Image& img, const std::vector<int>& layers) const {
  const int p = cfg_.patch;
  if (img.height() % p != 0 || img.width() % p != 0) throw ValidationError("input size must be a multiple of the patch size");
  const int gh = img.height() / p, gw = img.width() / p;
  const int np = gh * gw;

  // Patch vectors follow the conv weight layout (channel, ky, kx).
  TokenMatrix patches(np, 3 * p * p);
  for (int r = 0; r < gh; ++r)
    for (int c = 0; c < gw; ++c)
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < p; ++y)
          for (int x = 0; x < p; ++x)
            patches(r * gw + c, (ch * p + y) * p + x) =
                (img.at(r * p + y, c * p + x, ch) - cfg_.mean[ch]) / cfg_.std[ch];
  TokenMatrix emb = patches * patch_embed_.wt;
  emb.rowwise() += patch_embed_.b;

  TokenMatrix seq(np + 1, cfg_.dim);
  seq.row(0) = cls_;
  seq.bottomRows(np) = emb;
  seq += position_embedding(gh, gw);

  TokenMatrix x;
  if (cfg_.flavor == VitFlavor::Dino && cfg_.registers > 0) {
    x.resize(np + 1 + cfg_.registers, cfg_.dim);
    x.row(0) = seq.row(0);
    x.middleRows(1, cfg_.registers) = registers_;
    x.bottomRows(np) = seq.bottomRows(np);
  } else {
    x = std::move(seq);
  }
  if (cfg_.flavor == VitFlavor::Clip) x = layer_norm(x, pre_norm_);

  std::vector<TokenMatrix> out;
  std::size_t next = 0;
  for (int l = 0; l < cfg_.depth && next < layers.size(); ++l) {
    const Block& b = blocks_[l];
    TokenMatrix a = attention(layer_norm(x, b.ln1), b);
    if (b.ls1.size() > 0) a.array().rowwise() *= b.ls1.array();
    x += a;
    TokenMatrix h = layer_norm(x, b.ln2) * b.fc1.wt;
    h.rowwise() += b.fc1.b;
    float (*act)(float) = cfg_.quick_gelu ? quick_gelu : gelu;
    h = h.unaryExpr(act);
    TokenMatrix m = h * b.fc2.wt;
    m.rowwise() += b.fc2.b;
    if (b.ls2.size() > 0) m.array().rowwise() *= b.ls2.array();
    x += m;
    if (layers[next] != l) continue;
    if (cfg_.flavor == VitFlavor::Dino) {
      out.push_back(layer_norm(x, final_norm_));
    } else {
      TokenMatrix t = x;
      for (Eigen::Index r = 0; r < t.rows(); ++r) {
        const float norm = t.row(r).norm();
        if (norm > 0.0f) t.row(r) /= norm;
      }
      out.push_back(std::move(t));
    }
    ++next;
  }
  return out;
}

FeatureBundle VitBackend::extract(const Image& src, TokenKind kind, const std::vector<int>& layers) {
  const Image img = resize(src, input_side(src.height()), input_side(src.width()), Interp::Cubic);
  auto all = forward(img, layers);
  const int gh = img.height() / cfg_.patch, gw = img.width() / cfg_.patch;
  const int skip = 1 + (cfg_.flavor == VitFlavor::Dino ? cfg_.registers : 0);
  FeatureBundle out;
  out.backend_id = id_;
  out.token_kind = kind;
  out.layers = layers;
  for (auto& t : all) {
    if (kind == TokenKind::CLS) out.tokens.emplace_back(t.topRows(1));
    else out.tokens.emplace_back(t.bottomRows(t.rows() - skip));
  }
  if (kind == TokenKind::ST) {
    out.grid_rows = gh;
    out.grid_cols = gw;
  }
  return out;
}

}  // namespace hallucheck::features
