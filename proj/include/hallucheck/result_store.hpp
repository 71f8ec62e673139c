#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <vector>

namespace hallucheck {

struct ResultRecord {
  std::string triplet_id;
  std::string metric_name;
  double value = 0.0;
  std::map<std::string, std::string> meta;

  bool operator==(const ResultRecord&) const = default;
};

/// Append-only JSON-lines result file. The uniqueness key is
/// (triplet_id, metric_name, meta); a later record with the same key
/// supersedes the earlier one on read-back. Appends are serialized
/// internally, so one store may be shared by several producer threads.
class ResultStore {
 public:
  explicit ResultStore(std::filesystem::path path);

  /// Throws ValidationError for non-finite values, IoError on write failure.
  void append(const ResultRecord& record);

  /// Latest record per key, in order of first appearance.
  std::vector<ResultRecord> records() const;
  bool contains(const std::string& triplet_id, const std::string& metric_name,
                const std::map<std::string, std::string>& meta = {}) const;
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

  /// Parses a store file without opening it for writing.
  static std::vector<ResultRecord> read(const std::filesystem::path& path);

 private:
  using Key = std::string;
  static Key key_of(const ResultRecord& r);

  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::ofstream out_;
  std::vector<Key> order_;
  std::map<Key, ResultRecord> latest_;
};

}  // namespace hallucheck
