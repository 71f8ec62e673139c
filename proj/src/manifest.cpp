#include "hallucheck/manifest.hpp"

#include <fstream>
#include <set>

#include "hallucheck/error.hpp"

namespace hallucheck {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Role r) {
  switch (r) {
    case Role::LR: return "lr";
    case Role::SR: return "sr";
    case Role::GT: return "gt";
  }
  return "?";
}

Role role_from_string(const std::string& s) {
  if (s == "lr" || s == "LR") return Role::LR;
  if (s == "sr" || s == "SR") return Role::SR;
  if (s == "gt" || s == "GT") return Role::GT;
  throw ValidationError("unknown image role '" + s + "'");
}

fs::path EvalManifest::resolve(const ImageRef& ref) const {
  if (ref.path.is_absolute() || base_dir.empty()) return ref.path;
  return base_dir / ref.path;
}

const ImageTriplet& EvalManifest::at(const std::string& id) const {
  for (const auto& t : entries)
    if (t.id == id) return t;
  throw UnknownName("no triplet '" + id + "' in manifest");
}

json to_json(const ImageTriplet& t) {
  return json{{"id", t.id},
              {"scale", t.scale},
              {"model_tag", t.model_tag},
              {"dataset_tag", t.dataset_tag},
              {"lr", {{"path", t.lr.path.generic_string()}}},
              {"sr", {{"path", t.sr.path.generic_string()}}},
              {"gt", {{"path", t.gt.path.generic_string()}}}};
}

namespace {

std::string require_string(const json& j, const char* key, const std::string& ctx) {
  if (!j.contains(key)) throw ParseError(ctx + "missing field '" + key + "'");
  if (!j[key].is_string()) throw ParseError(ctx + "field '" + key + "' must be a string");
  return j[key].get<std::string>();
}

ImageRef ref_from_json(const json& j, const char* key, const std::string& id, Role role) {
  const std::string ctx = "triplet '" + id + "': ";
  if (!j.contains(key) || !j[key].is_object()) throw ParseError(ctx + "missing object '" + key + "'");
  ImageRef r;
  r.id = id + "/" + key;
  r.path = require_string(j[key], "path", ctx + key + ".");
  r.role = role;
  return r;
}

std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | p[3];
}

}  // namespace

ImageTriplet triplet_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("expected a JSON object");
  ImageTriplet t;
  t.id = require_string(j, "id", "");
  const std::string ctx = "triplet '" + t.id + "': ";
  if (j.contains("scale")) {
    if (!j["scale"].is_number_integer()) throw ParseError(ctx + "field 'scale' must be an integer");
    t.scale = j["scale"].get<int>();
  }
  t.model_tag = j.value("model_tag", "");
  t.dataset_tag = j.value("dataset_tag", "");
  t.lr = ref_from_json(j, "lr", t.id, Role::LR);
  t.sr = ref_from_json(j, "sr", t.id, Role::SR);
  t.gt = ref_from_json(j, "gt", t.id, Role::GT);
  return t;
}

std::optional<std::pair<int, int>> probe_dimensions(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return std::nullopt;
  unsigned char head[24];
  in.read(reinterpret_cast<char*>(head), sizeof head);
  if (in.gcount() >= 24 && head[0] == 0x89 && head[1] == 'P' && head[2] == 'N' && head[3] == 'G') {
    const int w = static_cast<int>(be32(head + 16));
    const int h = static_cast<int>(be32(head + 20));
    return std::pair{w, h};
  }
  if (in.gcount() < 3 || head[0] != 0xff || head[1] != 0xd8) return std::nullopt;
  // Walk JPEG markers to the first start-of-frame segment.
  in.clear();
  in.seekg(2);
  while (in) {
    int c = in.get();
    if (c != 0xff) continue;
    int marker = in.get();
    while (marker == 0xff) marker = in.get();
    if (marker == 0xd8 || (marker >= 0xd0 && marker <= 0xd7) || marker == 0x01) continue;
    unsigned char len[2];
    in.read(reinterpret_cast<char*>(len), 2);
    const int seglen = (len[0] << 8) | len[1];
    const bool sof = marker >= 0xc0 && marker <= 0xcf && marker != 0xc4 && marker != 0xc8 && marker != 0xcc;
    if (sof) {
      unsigned char sofd[5];
      in.read(reinterpret_cast<char*>(sofd), 5);
      if (!in) return std::nullopt;
      return std::pair{(sofd[3] << 8) | sofd[4], (sofd[1] << 8) | sofd[2]};
    }
    in.seekg(seglen - 2, std::ios::cur);
  }
  return std::nullopt;
}

void validate_manifest(EvalManifest& m, const ManifestOptions& opts) {
  std::set<std::string> seen;
  for (auto& t : m.entries) {
    if (t.id.empty()) throw ValidationError("triplet with empty id");
    if (!seen.insert(t.id).second) throw ValidationError("duplicate triplet id '" + t.id + "'");
    if (t.scale < 1) throw ValidationError("triplet '" + t.id + "': scale must be >= 1");
    for (ImageRef* r : {&t.lr, &t.sr, &t.gt}) {
      const auto p = m.resolve(*r);
      if (!fs::exists(p))
        throw ValidationError("triplet '" + t.id + "': " + to_string(r->role) + " path does not exist: " + p.string());
      if (opts.check_dimensions) {
        auto dims = probe_dimensions(p);
        if (!dims)
          throw ValidationError("triplet '" + t.id + "': cannot read " + to_string(r->role) + " image header");
        r->width = dims->first;
        r->height = dims->second;
      }
    }
    if (!opts.check_dimensions) continue;
    if (t.sr.width != t.gt.width || t.sr.height != t.gt.height)
      throw ValidationError("triplet '" + t.id + "': dimension mismatch, sr is " + std::to_string(t.sr.width) + "x" +
                            std::to_string(t.sr.height) + " but gt is " + std::to_string(t.gt.width) + "x" +
                            std::to_string(t.gt.height));
    if (t.gt.width != t.lr.width * t.scale || t.gt.height != t.lr.height * t.scale)
      throw ValidationError("triplet '" + t.id + "': gt size is not lr size x" + std::to_string(t.scale));
  }
}

EvalManifest load_manifest(const fs::path& path, const ManifestOptions& opts) {
  if (!fs::exists(path)) throw FileNotFound(path.string());
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  EvalManifest m;
  m.base_dir = path.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), lineno);
    }
    if (j.is_object() && j.contains("manifest")) {
      m.created_at = j["manifest"].value("created_at", "");
      m.source_note = j["manifest"].value("source_note", "");
      continue;
    }
    try {
      m.entries.push_back(triplet_from_json(j));
    } catch (const ParseError& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  validate_manifest(m, opts);
  return m;
}

void save_manifest(const EvalManifest& m, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  if (!m.created_at.empty() || !m.source_note.empty())
    out << json{{"manifest", {{"created_at", m.created_at}, {"source_note", m.source_note}}}}.dump() << '\n';
  for (const auto& t : m.entries) out << to_json(t).dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace hallucheck
