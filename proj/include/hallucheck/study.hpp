#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "hallucheck/analysis.hpp"
#include "hallucheck/error.hpp"
#include "hallucheck/manifest.hpp"

namespace httplib {
class Server;
}

namespace hallucheck::study {

struct StudySession {
  std::string study_id;
  std::string rater_id;
  std::vector<std::string> assignment;  // per-rater permutation of the study's triplets
  int cursor = 0;                       // number of rated items
};

struct RatingRecord {
  std::string study_id;
  std::string rater_id;
  std::string triplet_id;
  int score = 0;
  double elapsed_ms = 0.0;
  std::string submitted_at;  // filled by the service when empty
};

nlohmann::json to_json(const RatingRecord& r);
RatingRecord rating_from_json(const nlohmann::json& j);

/// One line of the append-only ratings log. `replaces` holds the earlier
/// score when a rater revised a cell.
struct AuditEvent {
  RatingRecord record;
  std::optional<int> replaces;
};

struct NextItem {
  bool done = false;
  std::string triplet_id;  // empty when done
  int index = 0;           // position in the rater's assignment
  int rated = 0;
  int total = 0;
};

enum class AckStatus { Stored, Duplicate, Revised };
std::string to_string(AckStatus s);

struct RatingAck {
  AckStatus status = AckStatus::Stored;
  int rated = 0;
  int total = 0;
};

struct StudyExport {
  std::string study_id;
  std::vector<std::string> triplet_ids;  // manifest order
  analysis::RaterTable table;
  std::vector<RatingRecord> records;     // latest per cell, triplet-major
  std::vector<std::pair<std::string, std::string>> missing;  // (rater, triplet)
  std::vector<std::string> warnings;
};

/// JSON-lines of the latest records (rater_id, triplet_id, score, ...).
std::string export_jsonl(const StudyExport& e);
/// Pivot: header "triplet_id,<raters>", one row per triplet, blank = missing.
std::string export_csv(const StudyExport& e);
/// Writes ratings.jsonl, ratings.csv and missing.csv into `dir`.
void write_export(const StudyExport& e, const std::filesystem::path& dir);

/// Fisher-Yates shuffle of `ids` keyed on (seed, rater).
std::vector<std::string> assignment_for(const std::vector<std::string>& ids, const std::string& rater,
                                        std::uint64_t seed);

/// Study state persisted under `root`: one directory per study holding
/// study.json, manifest.jsonl (absolute paths) and the ratings log.
/// Existing studies are reloaded by replaying their logs.
class StudyService {
 public:
  explicit StudyService(std::filesystem::path root);
  ~StudyService();
  StudyService(const StudyService&) = delete;
  StudyService& operator=(const StudyService&) = delete;

  /// The id is derived from the triplet set, raters and seed, so an identical
  /// request returns the existing study.
  std::string create_study(const EvalManifest& manifest, const std::vector<std::string>& raters, std::uint64_t seed);

  std::vector<std::string> study_ids() const;
  bool has_study(const std::string& id) const;
  std::vector<std::string> raters(const std::string& study_id) const;
  const EvalManifest& manifest(const std::string& study_id) const;

  StudySession session(const std::string& study_id, const std::string& rater_id) const;
  NextItem next_item(const std::string& study_id, const std::string& rater_id) const;
  /// Identical resubmission (same score) is a no-op; a different score is
  /// logged as a revision and replaces the stored value.
  RatingAck record_rating(RatingRecord record);
  StudyExport export_ratings(const std::string& study_id) const;
  std::vector<AuditEvent> audit_log(const std::string& study_id) const;

  /// Number of cells currently holding a rating.
  std::size_t stored_ratings(const std::string& study_id) const;

  /// Resolved image path; `study_id` narrows the lookup when several studies
  /// share a triplet id.
  std::filesystem::path image_path(const std::string& triplet_id, Role role,
                                   const std::string& study_id = {}) const;

  const std::filesystem::path& root() const { return root_; }

 private:
  struct Study;
  Study& find(const std::string& id) const;
  void load(const std::filesystem::path& dir);

  std::filesystem::path root_;
  mutable std::mutex mu_;  // guards the study map only
  std::map<std::string, std::unique_ptr<Study>> studies_;
};

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8765;  // 0 = any free port
};

/// HTTP front end:
///   POST /studies                     {"manifest_path" | "manifest": [...], "raters", "seed"}
///   GET  /studies/{id}/next?rater=
///   POST /studies/{id}/ratings        {"rater_id", "triplet_id", "score", "elapsed_ms"}
///   GET  /studies/{id}/export[?format=jsonl|csv]
///   GET  /images/{triplet_id}/{role}[?study=]
///   GET  /health
class StudyServer {
 public:
  StudyServer(StudyService& service, ServerOptions opts = {});
  ~StudyServer();

  /// Binds and serves on a background thread; returns the bound port.
  int start();
  /// Binds and serves on the calling thread until stop().
  void run();
  void stop();
  int port() const { return port_; }

 private:
  void routes();
  int bind();

  StudyService& service_;
  ServerOptions opts_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace hallucheck::study
