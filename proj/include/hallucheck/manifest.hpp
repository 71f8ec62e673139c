#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace hallucheck {

enum class Role { LR, SR, GT };

std::string to_string(Role r);
Role role_from_string(const std::string& s);

struct ImageRef {
  std::string id;
  std::filesystem::path path;  // as written in the manifest
  Role role = Role::GT;
  int width = 0;   // filled by validation
  int height = 0;

  bool operator==(const ImageRef&) const = default;
};

struct ImageTriplet {
  std::string id;
  ImageRef lr, sr, gt;
  std::string model_tag;
  std::string dataset_tag;
  int scale = 4;

  bool operator==(const ImageTriplet&) const = default;
};

struct EvalManifest {
  std::vector<ImageTriplet> entries;
  std::string created_at;
  std::string source_note;
  /// Directory relative paths are resolved against.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ImageRef& ref) const;
  const ImageTriplet& at(const std::string& id) const;
  bool operator==(const EvalManifest& o) const { return entries == o.entries; }
};

struct ManifestOptions {
  /// Open each image to check dimensions (requires decodable files).
  bool check_dimensions = true;
};

/// Reads a JSON-lines manifest; paths resolve relative to the manifest's directory.
/// Optional header line: {"manifest": {"created_at": ..., "source_note": ...}}.
EvalManifest load_manifest(const std::filesystem::path& path, const ManifestOptions& opts = {});
void save_manifest(const EvalManifest& m, const std::filesystem::path& path);

/// Throws ValidationError naming the offending triplet id on the first violation.
void validate_manifest(EvalManifest& m, const ManifestOptions& opts = {});

nlohmann::json to_json(const ImageTriplet& t);
ImageTriplet triplet_from_json(const nlohmann::json& j);

/// Reads image dimensions from the PNG/JPEG header without a full decode.
std::optional<std::pair<int, int>> probe_dimensions(const std::filesystem::path& p);

}  // namespace hallucheck
