#include "hallucheck/result_store.hpp"

#include <cmath>

#include <json.hpp>

#include "hallucheck/error.hpp"
#include "hallucheck/log.hpp"

namespace hallucheck {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ResultRecord record_from_json(const json& j, int line) {
  try {
    ResultRecord r;
    r.triplet_id = j.at("triplet_id").get<std::string>();
    r.metric_name = j.at("metric_name").get<std::string>();
    r.value = j.at("value").get<double>();
    if (j.contains("meta")) r.meta = j["meta"].get<std::map<std::string, std::string>>();
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("bad result record: ") + e.what(), line);
  }
}

}  // namespace

ResultStore::Key ResultStore::key_of(const ResultRecord& r) {
  return json{r.triplet_id, r.metric_name, r.meta}.dump();
}

std::vector<ResultRecord> ResultStore::read(const fs::path& path) {
  std::vector<ResultRecord> out;
  std::map<Key, std::size_t> index;
  std::ifstream in(path);
  if (!in) {
    if (!fs::exists(path)) throw FileNotFound(path.string());
    throw IoError("cannot read " + path.string());
  }
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
    auto r = record_from_json(j, lineno);
    const auto k = key_of(r);
    if (auto it = index.find(k); it != index.end()) out[it->second] = std::move(r);
    else {
      index.emplace(k, out.size());
      out.push_back(std::move(r));
    }
  }
  return out;
}

ResultStore::ResultStore(fs::path path) : path_(std::move(path)) {
  if (fs::exists(path_)) {
    for (auto& r : read(path_)) {
      auto k = key_of(r);
      order_.push_back(k);
      latest_.emplace(std::move(k), std::move(r));
    }
  } else if (path_.has_parent_path()) {
    fs::create_directories(path_.parent_path());
  }
  out_.open(path_, std::ios::app);
  if (!out_) throw IoError("cannot open result store " + path_.string());
}

void ResultStore::append(const ResultRecord& record) {
  if (!std::isfinite(record.value))
    throw ValidationError("non-finite value for " + record.triplet_id + "/" + record.metric_name);
  std::lock_guard lock(mutex_);
  const json j{{"triplet_id", record.triplet_id},
               {"metric_name", record.metric_name},
               {"value", record.value},
               {"meta", record.meta}};
  out_ << j.dump() << '\n';
  out_.flush();
  if (!out_) throw IoError("append failed: " + path_.string());
  auto k = key_of(record);
  if (auto it = latest_.find(k); it != latest_.end()) {
    log::warn("result " + record.triplet_id + "/" + record.metric_name + " overwritten by newer value");
    it->second = record;
  } else {
    order_.push_back(k);
    latest_.emplace(std::move(k), record);
  }
}

std::vector<ResultRecord> ResultStore::records() const {
  std::lock_guard lock(mutex_);
  std::vector<ResultRecord> out;
  out.reserve(order_.size());
  for (const auto& k : order_) out.push_back(latest_.at(k));
  return out;
}

bool ResultStore::contains(const std::string& triplet_id, const std::string& metric_name,
                           const std::map<std::string, std::string>& meta) const {
  std::lock_guard lock(mutex_);
  return latest_.contains(key_of(ResultRecord{triplet_id, metric_name, 0.0, meta}));
}

std::size_t ResultStore::size() const {
  std::lock_guard lock(mutex_);
  return latest_.size();
}

}  // namespace hallucheck
