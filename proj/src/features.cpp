#include "hallucheck/features.hpp"

#include <algorithm>
#include <cmath>

#include "hallucheck/error.hpp"
#include "hallucheck/rng.hpp"

namespace hallucheck::features {

std::string to_string(TokenKind k) { return k == TokenKind::CLS ? "CLS" : "ST"; }

TokenKind token_kind_from_string(const std::string& s) {
  if (s == "CLS" || s == "cls") return TokenKind::CLS;
  if (s == "ST" || s == "st") return TokenKind::ST;
  throw ValidationError("unknown token kind '" + s + "'");
}

bool FeatureBundle::operator==(const FeatureBundle& o) const {
  if (backend_id != o.backend_id || token_kind != o.token_kind || layers != o.layers ||
      grid_rows != o.grid_rows || grid_cols != o.grid_cols || tokens.size() != o.tokens.size())
    return false;
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i].rows() != o.tokens[i].rows() || tokens[i].cols() != o.tokens[i].cols() ||
        tokens[i] != o.tokens[i])
      return false;
  return true;
}

std::vector<int> layer_preset(const std::string& name) {
  if (name == "interm" || name == "interm6") return kIntermLayers;
  if (name == "interm5") return kIntermLayersAlt;
  if (name == "last") return kLastLayer;
  throw UnknownName("unknown layer preset '" + name + "'");
}

int patch_aligned(int side, int patch) { return ((side + patch - 1) / patch) * patch; }

FeatureBundle embed(Backend& backend, const Image& img, TokenKind kind, std::vector<int> layers) {
  if (img.empty()) throw ValidationError("embed: empty image");
  if (layers.empty()) throw ValidationError("embed: no layers requested");
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  for (int l : layers)
    if (l < 0 || l >= backend.depth())
      throw ValidationError("embed: layer " + std::to_string(l) + " invalid for backend '" + backend.id() +
                            "' of depth " + std::to_string(backend.depth()));
  return backend.extract(img, kind, layers);
}

double feature_distance(const FeatureBundle& a, const FeatureBundle& b) {
  if (a.backend_id != b.backend_id) throw ShapeMismatch("feature_distance: backends differ");
  if (a.token_kind != b.token_kind) throw ShapeMismatch("feature_distance: token kinds differ");
  if (a.layers != b.layers) throw ShapeMismatch("feature_distance: layer sets differ");
  if (a.grid_rows != b.grid_rows || a.grid_cols != b.grid_cols)
    throw ShapeMismatch("feature_distance: token grids differ");
  if (a.tokens.size() != a.layers.size() || b.tokens.size() != b.layers.size())
    throw ShapeMismatch("feature_distance: malformed bundle");
  const int n = a.positions();
  if (n == 0) throw ShapeMismatch("feature_distance: empty bundle");
  for (std::size_t l = 0; l < a.tokens.size(); ++l)
    if (a.tokens[l].rows() != n || b.tokens[l].rows() != n || a.tokens[l].cols() != b.tokens[l].cols())
      throw ShapeMismatch("feature_distance: token matrix shapes differ");

  double total = 0.0;
  for (int p = 0; p < n; ++p) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t l = 0; l < a.tokens.size(); ++l) {
      const auto ra = a.tokens[l].row(p).cast<double>();
      const auto rb = b.tokens[l].row(p).cast<double>();
      dot += ra.dot(rb);
      na += ra.dot(ra);  // same kernel as dot, so identical rows give dot == na exactly
      nb += rb.dot(rb);
    }
    double d;
    if (na == 0.0 && nb == 0.0) d = 0.0;
    else if (na == 0.0 || nb == 0.0) d = 1.0;
    else d = 1.0 - dot / std::sqrt(na * nb);
    total += std::clamp(d, 0.0, 2.0);
  }
  return total / n;
}

ProjectionBackend::ProjectionBackend(Options opts) : opts_(std::move(opts)) {
  Rng rng(derive_key(opts_.seed, {1}));
  const int in = opts_.patch * opts_.patch * 3;
  embed_.resize(in, opts_.dim);
  const double s0 = 1.0 / std::sqrt(static_cast<double>(in));
  for (int i = 0; i < embed_.size(); ++i) embed_.data()[i] = static_cast<float>(rng.normal() * s0);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(opts_.dim));
  for (int l = 0; l < opts_.depth; ++l) {
    TokenMatrix w(opts_.dim, opts_.dim);
    for (int i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(rng.normal() * s1);
    blocks_.push_back(std::move(w));
  }
}

namespace {

void layer_norm_rows(TokenMatrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const float mean = row.mean();
    row.array() -= mean;
    const float var = row.squaredNorm() / static_cast<float>(row.size());
    row /= std::sqrt(var + 1e-6f);
  }
}

}  // namespace

FeatureBundle ProjectionBackend::extract(const Image& src, TokenKind kind, const std::vector<int>& layers) {
  const int p = opts_.patch;
  const Image img = resize(src, patch_aligned(src.height(), p), patch_aligned(src.width(), p), Interp::Cubic);
  const int gr = img.height() / p, gc = img.width() / p;
  TokenMatrix patches(gr * gc, p * p * 3);
  for (int r = 0; r < gr; ++r)
    for (int c = 0; c < gc; ++c)
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          for (int ch = 0; ch < 3; ++ch)
            patches(r * gc + c, (y * p + x) * 3 + ch) = img.at(r * p + y, c * p + x, ch) - 0.5f;

  FeatureBundle out;
  out.backend_id = opts_.id;
  out.token_kind = kind;
  out.layers = layers;
  if (kind == TokenKind::ST) {
    out.grid_rows = gr;
    out.grid_cols = gc;
  }
  TokenMatrix h = patches * embed_;
  std::size_t next = 0;
  for (int l = 0; l < opts_.depth && next < layers.size(); ++l) {
    h = (h + (h * blocks_[l]).array().tanh().matrix()).eval();
    if (layers[next] != l) continue;
    TokenMatrix t = kind == TokenKind::ST ? h : TokenMatrix(h.colwise().mean());
    layer_norm_rows(t);
    out.tokens.push_back(std::move(t));
    ++next;
  }
  return out;
}

}  // namespace hallucheck::features
