#include "hallucheck/study.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <httplib.h>

#include "hallucheck/hs.hpp"
#include "hallucheck/image.hpp"
#include "hallucheck/log.hpp"
#include "hallucheck/rng.hpp"
#include "hallucheck/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace hallucheck::study {

namespace {

// FNV-1a; stable across platforms, used only to key rater streams.
std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void check_score(int score) {
  if (score < 1 || score > 5) throw ValidationError("score must be in 1..5, got " + std::to_string(score));
}

}  // namespace

json to_json(const RatingRecord& r) {
  return {{"study_id", r.study_id}, {"rater_id", r.rater_id},     {"triplet_id", r.triplet_id},
          {"score", r.score},       {"elapsed_ms", r.elapsed_ms}, {"submitted_at", r.submitted_at}};
}

RatingRecord rating_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("rating must be a JSON object");
  RatingRecord r;
  auto str = [&](const char* k, bool required) {
    if (!j.contains(k)) {
      if (required) throw ValidationError(std::string("rating: missing '") + k + "'");
      return std::string();
    }
    if (!j[k].is_string()) throw ValidationError(std::string("rating: '") + k + "' must be a string");
    return j[k].get<std::string>();
  };
  r.study_id = str("study_id", false);
  r.rater_id = str("rater_id", true);
  r.triplet_id = str("triplet_id", true);
  r.submitted_at = str("submitted_at", false);
  if (!j.contains("score") || !j["score"].is_number_integer())
    throw ValidationError("rating: 'score' must be an integer");
  r.score = j["score"].get<int>();
  if (j.contains("elapsed_ms")) {
    if (!j["elapsed_ms"].is_number()) throw ValidationError("rating: 'elapsed_ms' must be a number");
    r.elapsed_ms = j["elapsed_ms"].get<double>();
  }
  return r;
}

std::string to_string(AckStatus s) {
  switch (s) {
    case AckStatus::Stored: return "stored";
    case AckStatus::Duplicate: return "duplicate";
    case AckStatus::Revised: return "revised";
  }
  return "?";
}

std::vector<std::string> assignment_for(const std::vector<std::string>& ids, const std::string& rater,
                                        std::uint64_t seed) {
  std::vector<std::string> out = ids;
  Rng rng(derive_key(seed, {fnv1a(rater)}));
  for (std::size_t i = out.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(out[i - 1], out[j]);
  }
  return out;
}

// --- export ---------------------------------------------------------------------

std::string export_jsonl(const StudyExport& e) {
  std::string out;
  for (const auto& r : e.records) out += to_json(r).dump() + "\n";
  return out;
}

std::string export_csv(const StudyExport& e) {
  std::string out = "triplet_id";
  for (const auto& r : e.table.rater_ids) out += "," + util::csv_escape(r);
  out += "\n";
  for (const auto& t : e.triplet_ids) {
    out += util::csv_escape(t);
    for (const auto& r : e.table.rater_ids) {
      out += ",";
      auto it = e.table.scores.find({r, t});
      if (it != e.table.scores.end()) out += std::to_string(it->second);
    }
    out += "\n";
  }
  return out;
}

void write_export(const StudyExport& e, const fs::path& dir) {
  fs::create_directories(dir);
  auto put = [&](const char* name, const std::string& text) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw IoError("cannot write " + (dir / name).string());
    f << text;
  };
  put("ratings.jsonl", export_jsonl(e));
  put("ratings.csv", export_csv(e));
  std::string miss = "rater_id,triplet_id\n";
  for (const auto& [r, t] : e.missing) miss += util::csv_escape(r) + "," + util::csv_escape(t) + "\n";
  put("missing.csv", miss);
}

// --- service ----------------------------------------------------------------------

struct RaterState {
  std::mutex mu;
  StudySession session;
  std::map<std::string, RatingRecord> latest;  // triplet -> record
};

struct StudyService::Study {
  std::string id;
  std::uint64_t seed = 0;
  std::string created_at;
  fs::path dir;
  EvalManifest manifest;
  std::vector<std::string> triplet_ids;
  std::set<std::string> triplet_set;
  std::vector<std::string> rater_ids;
  std::map<std::string, std::unique_ptr<RaterState>> raters;
  std::mutex log_mu;  // single writer for ratings.jsonl

  RaterState& rater(const std::string& r) const {
    auto it = raters.find(r);
    if (it == raters.end()) throw UnknownName("unknown rater '" + r + "' in study " + id);
    return *it->second;
  }

  void append(const AuditEvent& ev) {
    json j = to_json(ev.record);
    j["replaces"] = ev.replaces ? json(*ev.replaces) : json(nullptr);
    std::lock_guard lk(log_mu);
    std::ofstream f(dir / "ratings.jsonl", std::ios::app | std::ios::binary);
    if (!f) throw IoError("cannot append to " + (dir / "ratings.jsonl").string());
    f << j.dump() << "\n";
    f.flush();
    if (!f) throw IoError("write failed: " + (dir / "ratings.jsonl").string());
  }
};

StudyService::StudyService(fs::path root) : root_(std::move(root)) {
  fs::create_directories(root_);
  for (const auto& entry : fs::directory_iterator(root_))
    if (entry.is_directory() && fs::exists(entry.path() / "study.json")) load(entry.path());
}

StudyService::~StudyService() = default;

void StudyService::load(const fs::path& dir) {
  std::ifstream f(dir / "study.json");
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ParseError("study.json in " + dir.string() + ": " + e.what());
  }
  auto s = std::make_unique<Study>();
  s->id = j.at("study_id").get<std::string>();
  s->seed = j.at("seed").get<std::uint64_t>();
  s->created_at = j.value("created_at", "");
  s->dir = dir;
  s->manifest = load_manifest(dir / "manifest.jsonl", {.check_dimensions = false});
  for (const auto& e : s->manifest.entries) s->triplet_ids.push_back(e.id);
  s->triplet_set.insert(s->triplet_ids.begin(), s->triplet_ids.end());
  for (const auto& [rater, ids] : j.at("assignments").items()) {
    auto st = std::make_unique<RaterState>();
    st->session = {s->id, rater, ids.get<std::vector<std::string>>(), 0};
    s->raters.emplace(rater, std::move(st));
  }
  s->rater_ids = j.at("raters").get<std::vector<std::string>>();

  std::ifstream log(dir / "ratings.jsonl");
  std::string line;
  int lineno = 0;
  while (std::getline(log, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    RatingRecord r;
    try {
      r = rating_from_json(json::parse(line));
    } catch (const std::exception& e) {
      throw ParseError(std::string("ratings log: ") + e.what(), lineno);
    }
    auto& st = s->rater(r.rater_id);
    st.latest[r.triplet_id] = r;
  }
  for (auto& [_, st] : s->raters) st->session.cursor = static_cast<int>(st->latest.size());
  log::debug("loaded study " + s->id + " from " + dir.string());
  studies_.emplace(s->id, std::move(s));
}

std::string StudyService::create_study(const EvalManifest& manifest, const std::vector<std::string>& raters,
                                       std::uint64_t seed) {
  if (manifest.entries.empty()) throw ValidationError("create_study: manifest is empty");
  if (raters.empty()) throw ValidationError("create_study: no raters");
  std::set<std::string> seen;
  for (const auto& r : raters) {
    if (r.empty()) throw ValidationError("create_study: empty rater id");
    if (!seen.insert(r).second) throw ValidationError("create_study: duplicate rater '" + r + "'");
  }
  std::vector<std::string> ids;
  std::set<std::string> id_set;
  for (const auto& e : manifest.entries) {
    if (!id_set.insert(e.id).second) throw ValidationError("create_study: duplicate triplet id '" + e.id + "'");
    ids.push_back(e.id);
  }

  json key = {{"triplets", ids}, {"raters", raters}, {"seed", seed}};
  const std::string id = "s" + util::sha256_hex(key.dump()).substr(0, 12);

  std::lock_guard lk(mu_);
  if (studies_.count(id)) return id;

  auto s = std::make_unique<Study>();
  s->id = id;
  s->seed = seed;
  s->created_at = util::utc_now();
  s->dir = root_ / id;
  s->manifest = manifest;
  for (auto& e : s->manifest.entries)
    for (ImageRef* r : {&e.lr, &e.sr, &e.gt}) r->path = fs::absolute(manifest.resolve(*r));
  s->manifest.base_dir.clear();
  s->triplet_ids = ids;
  s->triplet_set = id_set;
  s->rater_ids = raters;
  json assignments = json::object();
  for (const auto& r : raters) {
    auto st = std::make_unique<RaterState>();
    st->session = {id, r, assignment_for(ids, r, seed), 0};
    assignments[r] = st->session.assignment;
    s->raters.emplace(r, std::move(st));
  }

  fs::create_directories(s->dir);
  save_manifest(s->manifest, s->dir / "manifest.jsonl");
  {
    std::ofstream f(s->dir / "ratings.jsonl", std::ios::app);
  }
  json meta = {{"study_id", id},     {"seed", seed},          {"created_at", s->created_at},
               {"raters", raters},   {"assignments", assignments}};
  std::ofstream f(s->dir / "study.json");
  if (!f) throw IoError("cannot write " + (s->dir / "study.json").string());
  f << meta.dump(2) << "\n";
  log::info("created study " + id + ": " + std::to_string(ids.size()) + " triplets, " +
            std::to_string(raters.size()) + " raters");
  studies_.emplace(id, std::move(s));
  return id;
}

StudyService::Study& StudyService::find(const std::string& id) const {
  std::lock_guard lk(mu_);
  auto it = studies_.find(id);
  if (it == studies_.end()) throw UnknownName("unknown study '" + id + "'");
  return *it->second;
}

std::vector<std::string> StudyService::study_ids() const {
  std::lock_guard lk(mu_);
  std::vector<std::string> out;
  for (const auto& [k, _] : studies_) out.push_back(k);
  return out;
}

bool StudyService::has_study(const std::string& id) const {
  std::lock_guard lk(mu_);
  return studies_.count(id) > 0;
}

std::vector<std::string> StudyService::raters(const std::string& study_id) const { return find(study_id).rater_ids; }

const EvalManifest& StudyService::manifest(const std::string& study_id) const { return find(study_id).manifest; }

StudySession StudyService::session(const std::string& study_id, const std::string& rater_id) const {
  auto& st = find(study_id).rater(rater_id);
  std::lock_guard lk(st.mu);
  return st.session;
}

NextItem StudyService::next_item(const std::string& study_id, const std::string& rater_id) const {
  auto& st = find(study_id).rater(rater_id);
  std::lock_guard lk(st.mu);
  NextItem n;
  n.total = static_cast<int>(st.session.assignment.size());
  n.rated = st.session.cursor;
  for (std::size_t i = 0; i < st.session.assignment.size(); ++i) {
    const auto& t = st.session.assignment[i];
    if (!st.latest.count(t)) {
      n.triplet_id = t;
      n.index = static_cast<int>(i);
      return n;
    }
  }
  n.done = true;
  n.index = n.total;
  return n;
}

RatingAck StudyService::record_rating(RatingRecord record) {
  auto& s = find(record.study_id);
  auto& st = s.rater(record.rater_id);
  check_score(record.score);
  if (!s.triplet_set.count(record.triplet_id))
    throw ValidationError("triplet '" + record.triplet_id + "' is not part of study " + s.id);
  if (!(record.elapsed_ms >= 0.0)) throw ValidationError("elapsed_ms must be non-negative");

  std::lock_guard lk(st.mu);
  RatingAck ack;
  ack.total = static_cast<int>(st.session.assignment.size());
  AuditEvent ev{record, std::nullopt};
  auto it = st.latest.find(record.triplet_id);
  if (it != st.latest.end()) {
    if (it->second.score == record.score) {
      ack.status = AckStatus::Duplicate;
      ack.rated = st.session.cursor;
      return ack;
    }
    ev.replaces = it->second.score;
    ack.status = AckStatus::Revised;
  }
  if (ev.record.submitted_at.empty()) ev.record.submitted_at = util::utc_now();
  s.append(ev);  // persist before mutating memory
  st.latest[record.triplet_id] = ev.record;
  st.session.cursor = static_cast<int>(st.latest.size());
  ack.rated = st.session.cursor;
  return ack;
}

StudyExport StudyService::export_ratings(const std::string& study_id) const {
  auto& s = find(study_id);
  StudyExport e;
  e.study_id = s.id;
  e.triplet_ids = s.triplet_ids;
  e.table.rater_ids = s.rater_ids;
  std::map<std::string, std::map<std::string, RatingRecord>> snapshot;
  for (const auto& r : s.rater_ids) {
    auto& st = s.rater(r);
    std::lock_guard lk(st.mu);
    snapshot[r] = st.latest;
  }
  for (const auto& t : s.triplet_ids)
    for (const auto& r : s.rater_ids) {
      auto it = snapshot[r].find(t);
      if (it == snapshot[r].end()) {
        e.missing.emplace_back(r, t);
        continue;
      }
      e.table.scores[{r, t}] = it->second.score;
      e.records.push_back(it->second);
    }
  if (e.records.empty()) e.warnings.push_back("study " + s.id + " has no ratings yet");
  else if (!e.missing.empty())
    e.warnings.push_back(std::to_string(e.missing.size()) + " of " +
                         std::to_string(s.triplet_ids.size() * s.rater_ids.size()) + " cells unrated");
  for (const auto& w : e.warnings) log::warn(w);
  return e;
}

std::vector<AuditEvent> StudyService::audit_log(const std::string& study_id) const {
  auto& s = find(study_id);
  std::lock_guard lk(s.log_mu);
  std::vector<AuditEvent> out;
  std::ifstream f(s.dir / "ratings.jsonl");
  std::string line;
  while (std::getline(f, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json j = json::parse(line);
    AuditEvent ev{rating_from_json(j), std::nullopt};
    if (j.contains("replaces") && !j["replaces"].is_null()) ev.replaces = j["replaces"].get<int>();
    out.push_back(std::move(ev));
  }
  return out;
}

std::size_t StudyService::stored_ratings(const std::string& study_id) const {
  auto& s = find(study_id);
  std::size_t n = 0;
  for (const auto& r : s.rater_ids) {
    auto& st = s.rater(r);
    std::lock_guard lk(st.mu);
    n += st.latest.size();
  }
  return n;
}

fs::path StudyService::image_path(const std::string& triplet_id, Role role, const std::string& study_id) const {
  auto pick = [&](const Study& s) -> std::optional<fs::path> {
    if (!s.triplet_set.count(triplet_id)) return std::nullopt;
    const auto& t = s.manifest.at(triplet_id);
    const ImageRef& r = role == Role::LR ? t.lr : role == Role::SR ? t.sr : t.gt;
    return s.manifest.resolve(r);
  };
  if (!study_id.empty()) {
    if (auto p = pick(find(study_id))) return *p;
  } else {
    std::lock_guard lk(mu_);
    for (const auto& [_, s] : studies_)
      if (auto p = pick(*s)) return *p;
  }
  throw UnknownName("unknown triplet '" + triplet_id + "'");
}

// --- HTTP -----------------------------------------------------------------------

namespace {

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, int status, const std::string& msg) { reply(res, status, {{"error", msg}}); }

template <class F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const UnknownName& e) {
    reply_error(res, 404, e.what());
  } catch (const FileNotFound& e) {
    reply_error(res, 404, e.what());
  } catch (const ValidationError& e) {
    reply_error(res, 400, e.what());
  } catch (const ParseError& e) {
    reply_error(res, 400, e.what());
  } catch (const json::exception& e) {
    reply_error(res, 400, std::string("bad JSON: ") + e.what());
  } catch (const std::exception& e) {
    log::error(std::string("study server: ") + e.what());
    reply_error(res, 500, e.what());
  }
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw ParseError(std::string("request body is not JSON: ") + e.what());
  }
}

std::string image_url(const std::string& study, const std::string& triplet, const char* role) {
  return "/images/" + triplet + "/" + role + "?study=" + study;
}

}  // namespace

StudyServer::StudyServer(StudyService& service, ServerOptions opts)
    : service_(service), opts_(std::move(opts)), server_(std::make_unique<httplib::Server>()) {
  routes();
}

StudyServer::~StudyServer() { stop(); }

void StudyServer::routes() {
  auto& srv = *server_;

  srv.Get("/health", [](const httplib::Request&, httplib::Response& res) { reply(res, 200, {{"status", "ok"}}); });

  srv.Post("/studies", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json body = parse_body(req);
      EvalManifest m;
      if (body.contains("manifest_path")) {
        m = load_manifest(body["manifest_path"].get<std::string>());
      } else if (body.contains("manifest") && body["manifest"].is_array()) {
        for (const auto& t : body["manifest"]) m.entries.push_back(triplet_from_json(t));
        m.base_dir = fs::current_path();
        validate_manifest(m);
      } else {
        throw ValidationError("body needs 'manifest_path' or a 'manifest' array");
      }
      if (!body.contains("raters") || !body["raters"].is_array()) throw ValidationError("'raters' must be an array");
      const auto raters = body["raters"].get<std::vector<std::string>>();
      const auto seed = body.value("seed", std::uint64_t{0});
      const auto id = service_.create_study(m, raters, seed);
      reply(res, 201, {{"study_id", id}, {"triplets", m.entries.size()}, {"raters", raters}});
    });
  });

  srv.Get("/studies/:id/next", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto& id = req.path_params.at("id");
      if (!req.has_param("rater")) throw ValidationError("missing ?rater=");
      const auto n = service_.next_item(id, req.get_param_value("rater"));
      json body = {{"done", n.done}, {"progress", {{"rated", n.rated}, {"total", n.total}}}};
      if (!n.done) {
        body["triplet_id"] = n.triplet_id;
        body["index"] = n.index;
        body["images"] = {{"lr", image_url(id, n.triplet_id, "lr")},
                          {"sr", image_url(id, n.triplet_id, "sr")},
                          {"gt", image_url(id, n.triplet_id, "gt")}};
        body["rubric"] = std::string(hs::kRubricPrompt);
      }
      reply(res, 200, body);
    });
  });

  srv.Post("/studies/:id/ratings", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      json body = parse_body(req);
      const auto& id = req.path_params.at("id");
      if (body.is_object() && body.contains("study_id") && body["study_id"] != id)
        throw ValidationError("study_id in body does not match the URL");
      RatingRecord r = rating_from_json(body);
      r.study_id = id;
      r.submitted_at.clear();  // server clock only
      const auto ack = service_.record_rating(r);
      reply(res, ack.status == AckStatus::Stored ? 201 : 200,
            {{"status", to_string(ack.status)}, {"rated", ack.rated}, {"total", ack.total}});
    });
  });

  srv.Get("/studies/:id/export", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto e = service_.export_ratings(req.path_params.at("id"));
      const auto fmt = req.has_param("format") ? req.get_param_value("format") : "json";
      if (fmt == "jsonl") {
        res.set_content(export_jsonl(e), "application/x-ndjson");
      } else if (fmt == "csv") {
        res.set_content(export_csv(e), "text/csv");
      } else if (fmt == "json") {
        json missing = json::array();
        for (const auto& [r, t] : e.missing) missing.push_back({{"rater_id", r}, {"triplet_id", t}});
        json records = json::array();
        for (const auto& r : e.records) records.push_back(to_json(r));
        reply(res, 200,
              {{"study_id", e.study_id},
               {"raters", e.table.rater_ids},
               {"triplets", e.triplet_ids},
               {"records", records},
               {"missing", missing},
               {"complete", e.missing.empty()},
               {"warnings", e.warnings}});
      } else {
        throw ValidationError("format must be json, jsonl or csv");
      }
    });
  });

  srv.Get("/images/:triplet/:role", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const Role role = role_from_string(req.path_params.at("role"));
      const auto study = req.has_param("study") ? req.get_param_value("study") : std::string();
      const auto path = service_.image_path(req.path_params.at("triplet"), role, study);
      if (!fs::exists(path)) throw FileNotFound(path.string());
      std::string ext = path.extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      std::string bytes;
      if (ext == ".png") {
        std::ifstream f(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(f), {});
      } else {
        const auto png = encode_png(decode_image(path));
        bytes.assign(png.begin(), png.end());
      }
      res.set_content(std::move(bytes), "image/png");
    });
  });
}

int StudyServer::bind() {
  if (opts_.port == 0) {
    port_ = server_->bind_to_any_port(opts_.host);
  } else {
    port_ = server_->bind_to_port(opts_.host, opts_.port) ? opts_.port : -1;
  }
  if (port_ < 0) throw IoError("cannot bind " + opts_.host + ":" + std::to_string(opts_.port));
  return port_;
}

int StudyServer::start() {
  bind();
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port_;
}

void StudyServer::run() {
  bind();
  log::info("study server listening on " + opts_.host + ":" + std::to_string(port_));
  server_->listen_after_bind();
}

void StudyServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace hallucheck::study
