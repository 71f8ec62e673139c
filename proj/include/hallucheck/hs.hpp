#pragma once

#include <array>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "hallucheck/error.hpp"
#include "hallucheck/image.hpp"
#include "hallucheck/manifest.hpp"

namespace hallucheck::hs {

extern const std::string_view kRubricPrompt;
inline constexpr std::string_view kRubricSha256 =
    "194296e4f073f90fc3675ff772011666cba4ef13ae94da0295a543202fba9ae2";
inline constexpr std::string_view kDefaultModel = "gpt-4o-2024-08-06";

struct PromptBundle {
  std::string system_text;
  std::array<Role, 3> image_order{Role::GT, Role::LR, Role::SR};
  std::string model_id{kDefaultModel};
  double temperature = 0.0;
  int max_retries = 3;
};

struct PromptConfig {
  std::optional<std::string> model_id;
  std::optional<double> temperature;
  std::optional<int> max_retries;
  /// Setting this is an error: the rubric is frozen.
  std::optional<std::string> rubric_override;
};

/// Returns the frozen rubric with the configured model settings.
/// Throws ValidationError on a rubric override.
PromptBundle build_prompt(const PromptConfig& cfg = {});

// --- response parsing ------------------------------------------------------

class ResponseError : public ParseError {
 public:
  using ParseError::ParseError;
};
class NoJsonFound : public ResponseError {
 public:
  using ResponseError::ResponseError;
};
class ScoreOutOfRange : public ResponseError {
 public:
  using ResponseError::ResponseError;
};
class MissingField : public ResponseError {
 public:
  using ResponseError::ResponseError;
};

struct ParsedResponse {
  int score = 0;
  std::string reasoning;
};

/// Extracts the first complete JSON object from `text` (markdown fences and
/// surrounding prose are tolerated) and validates "score" (integer 1..5) and
/// "reasoning" (non-empty string).
ParsedResponse parse_response(std::string_view text);

// --- records ---------------------------------------------------------------

struct HSRecord {
  std::string triplet_id;
  int run_index = 0;
  std::optional<int> score;  // empty for a failed run
  std::string reasoning;
  std::string raw_response;
  double latency_ms = 0.0;
  std::string model_id;
  int retries = 0;
  std::string error;  // set for failed runs

  bool ok() const { return score.has_value(); }
  bool operator==(const HSRecord&) const = default;
};

nlohmann::json to_json(const HSRecord& r);
HSRecord record_from_json(const nlohmann::json& j);
std::vector<HSRecord> read_records(const std::filesystem::path& path);
void append_record(const std::filesystem::path& path, const HSRecord& r);

// --- clients ---------------------------------------------------------------

struct EncodedImage {
  Role role;
  std::vector<unsigned char> png;
};

class TransportError : public Error {
 public:
  using Error::Error;
};

class RateLimited : public TransportError {
 public:
  RateLimited(const std::string& what, double retry_after_s) : TransportError(what), retry_after_s_(retry_after_s) {}
  double retry_after_s() const { return retry_after_s_; }

 private:
  double retry_after_s_;
};

/// A multimodal chat model. Implementations must be safe to call from several threads.
class MllmClient {
 public:
  virtual ~MllmClient() = default;
  /// Returns the raw text of the model's reply. Throws TransportError (or
  /// RateLimited) on service failures.
  virtual std::string complete(const PromptBundle& prompt, const std::vector<EncodedImage>& images) = 0;
};

/// Replays scripted replies in call order, cycling when exhausted. Records
/// what it was sent so tests can inspect request composition.
class StubClient : public MllmClient {
 public:
  explicit StubClient(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  /// Reply chosen per (triplet-independent) call by a function of the call index.
  explicit StubClient(std::function<std::string(std::size_t call)> fn) : fn_(std::move(fn)) {}

  std::string complete(const PromptBundle& prompt, const std::vector<EncodedImage>& images) override;

  std::size_t calls() const;
  std::vector<std::vector<Role>> sent_orders() const;

 private:
  std::vector<std::string> replies_;
  std::function<std::string(std::size_t)> fn_;
  mutable std::mutex mutex_;
  std::size_t calls_ = 0;
  std::vector<std::vector<Role>> orders_;
};

/// Deterministic offline scorer: the reply is a pure function of the three
/// images (score from SR-GT mean absolute difference) so stub-mode pipelines
/// produce repeatable, content-dependent scores.
class HeuristicStubClient : public MllmClient {
 public:
  std::string complete(const PromptBundle& prompt, const std::vector<EncodedImage>& images) override;
};

struct HttpClientConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string api_key;
  int timeout_s = 120;
};

/// Chat-completions client: one user message with the rubric as a text part
/// followed by the three images as base64 PNG data URLs.
class ChatCompletionsClient : public MllmClient {
 public:
  explicit ChatCompletionsClient(HttpClientConfig cfg);
  std::string complete(const PromptBundle& prompt, const std::vector<EncodedImage>& images) override;

  /// Request body without transport, for inspection.
  static nlohmann::json request_body(const PromptBundle& prompt, const std::vector<EncodedImage>& images);

 private:
  HttpClientConfig cfg_;
};

/// Token bucket: `rate_per_s` sustained, `burst` capacity. Thread-safe.
class TokenBucket {
 public:
  TokenBucket(double rate_per_s, double burst);
  void acquire();

 private:
  std::mutex mutex_;
  double rate_, capacity_, tokens_;
  std::chrono::steady_clock::time_point last_;
};

// --- scoring ---------------------------------------------------------------

struct ScoreOptions {
  int runs = 1;
  int transport_retries = 3;
  double backoff_s = 1.0;
  int max_side = 512;  // images are downscaled so the long side is at most this
  std::function<void(double seconds)> sleep;  // injectable for tests
};

/// Encodes (GT, LR, SR) in the prompt's order, downscaling to max_side.
std::vector<EncodedImage> encode_triplet(const Image& gt, const Image& lr, const Image& sr,
                                         const PromptBundle& prompt, int max_side);

/// Submits the triplet `opts.runs` times. Unparseable replies are retried up
/// to prompt.max_retries times, then recorded as failed runs. Transport
/// failures are retried with backoff; after `transport_retries` the error
/// propagates.
std::vector<HSRecord> score_triplet(MllmClient& client, const std::string& triplet_id,
                                    const std::vector<EncodedImage>& images, const PromptBundle& prompt,
                                    const ScoreOptions& opts, int first_run = 0);

struct BatchOptions {
  ScoreOptions score;
  int max_in_flight = 4;
  double requests_per_s = 2.0;
  double burst = 4.0;
};

/// Scores every triplet in `ids` with bounded parallelism and rate limiting.
/// `sink` receives each record (called under a lock, so it may append to a
/// single-writer store). `done(triplet, run)` lets callers skip finished runs.
void score_batch(MllmClient& client, const EvalManifest& manifest, const std::vector<std::string>& ids,
                 const PromptBundle& prompt, const BatchOptions& opts,
                 const std::function<void(const HSRecord&)>& sink,
                 const std::function<bool(const std::string&, int)>& done = {});

// --- statistics ------------------------------------------------------------

struct HSStats {
  std::string model_tag;
  double mean_score = 0.0;
  std::map<int, double> pct;  // score level -> percentage of run scores
  std::size_t images = 0;
  std::size_t runs = 0;
  std::size_t failed = 0;
};

/// Per model: mean over images of the per-image mean run score, and the
/// percentage of raw run scores at each level 1..5. Failed runs are excluded
/// and counted. `model_of` maps triplet id -> model tag.
std::vector<HSStats> hs_statistics(const std::vector<HSRecord>& records,
                                   const std::map<std::string, std::string>& model_of);

/// Per-image mean score over successful runs.
std::map<std::string, double> per_image_mean(const std::vector<HSRecord>& records);

struct RunSummary {
  int run_index = 0;
  std::size_t count = 0;
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

struct StabilityReport {
  struct Image {
    std::string triplet_id;
    double mean = 0.0;
    std::map<int, double> diffs;  // run index -> score - mean
  };
  std::vector<Image> images;
  std::vector<RunSummary> runs;
};

/// Throws ValidationError if any image has fewer than two scored runs.
StabilityReport stability_report(const std::vector<HSRecord>& records);

/// Fixed-layout text table: Method | Mean Score | 1 | 2 | 3 | 4 | 5.
std::string render_stats_table(const std::vector<HSStats>& stats);
std::string render_stats_csv(const std::vector<HSStats>& stats);

/// Linear-interpolated quantile (numpy default) of sorted data.
double quantile_sorted(const std::vector<double>& sorted, double q);

}  // namespace hallucheck::hs
