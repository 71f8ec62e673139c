#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <thread>

#include "fixtures.hpp"
#include "hallucheck/analysis.hpp"
#include "hallucheck/error.hpp"
#include "hallucheck/study.hpp"

#include <httplib.h>  // after Eigen users: resolv.h defines _res

using namespace hallucheck;
using namespace hallucheck::study;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kRaters{"r01", "r02", "r03"};

struct Env {
  fs::path dir;
  fixtures::TripletFixture fx;
};

Env make_env(const std::string& name, int count = 6) {
  Env e;
  e.dir = fixtures::temp_dir(name);
  e.fx = fixtures::make_triplets(e.dir / "data", count, 32);
  return e;
}

RatingRecord rating(const std::string& study, const std::string& rater, const std::string& triplet, int score) {
  return {study, rater, triplet, score, 1200.0, ""};
}

std::vector<std::string> ids_of(const EvalManifest& m) {
  std::vector<std::string> out;
  for (const auto& t : m.entries) out.push_back(t.id);
  return out;
}

// Deterministic score per cell so exports can be checked against the source.
int cell_score(const std::string& rater, const std::string& triplet) {
  return static_cast<int>(std::hash<std::string>{}(rater + "/" + triplet) % 5) + 1;
}

void rate_all(StudyService& s, const std::string& id) {
  for (const auto& r : s.raters(id))
    while (true) {
      const auto n = s.next_item(id, r);
      if (n.done) break;
      s.record_rating(rating(id, r, n.triplet_id, cell_score(r, n.triplet_id)));
    }
}

}  // namespace

TEST(Assignment, IsAPermutationKeyedOnRaterAndSeed) {
  std::vector<std::string> ids;
  for (int i = 0; i < 40; ++i) ids.push_back("t" + std::to_string(i));
  std::set<std::vector<std::string>> distinct;
  for (const auto& r : {"a", "b", "c", "d"}) {
    for (std::uint64_t seed : {0u, 1u}) {
      auto p = assignment_for(ids, r, seed);
      EXPECT_EQ(p, assignment_for(ids, r, seed));
      distinct.insert(p);
      std::sort(p.begin(), p.end());
      auto sorted = ids;
      std::sort(sorted.begin(), sorted.end());
      EXPECT_EQ(p, sorted);
    }
  }
  EXPECT_EQ(distinct.size(), 8u);
  EXPECT_TRUE(assignment_for({}, "a", 0).empty());
}

TEST(Service, CreateIsIdempotentAndValidates) {
  auto env = make_env("create");
  StudyService s(env.dir / "studies");
  const auto id = s.create_study(env.fx.manifest, kRaters, 3);
  EXPECT_EQ(s.create_study(env.fx.manifest, kRaters, 3), id);
  EXPECT_EQ(s.study_ids().size(), 1u);
  EXPECT_NE(s.create_study(env.fx.manifest, kRaters, 4), id);
  EXPECT_NE(s.create_study(env.fx.manifest, {"r01", "r02"}, 3), id);
  EXPECT_EQ(s.raters(id), kRaters);
  EXPECT_EQ(s.manifest(id).entries.size(), 6u);
  EXPECT_THROW(s.create_study(env.fx.manifest, {}, 0), ValidationError);
  EXPECT_THROW(s.create_study(env.fx.manifest, {"a", "a"}, 0), ValidationError);
  EXPECT_THROW(s.create_study(EvalManifest{}, kRaters, 0), ValidationError);
  EXPECT_THROW(s.raters("nope"), UnknownName);
}

TEST(Service, SessionsWalkTheAssignment) {
  auto env = make_env("walk");
  StudyService s(env.dir / "studies");
  const auto id = s.create_study(env.fx.manifest, kRaters, 1);
  const auto sess = s.session(id, "r02");
  EXPECT_EQ(sess.assignment, assignment_for(ids_of(env.fx.manifest), "r02", 1));
  std::vector<std::string> seen;
  for (int i = 0; i < 6; ++i) {
    const auto n = s.next_item(id, "r02");
    ASSERT_FALSE(n.done);
    EXPECT_EQ(n.index, i);
    EXPECT_EQ(n.rated, i);
    EXPECT_EQ(n.total, 6);
    EXPECT_EQ(n.triplet_id, sess.assignment[i]);
    const auto ack = s.record_rating(rating(id, "r02", n.triplet_id, 3));
    EXPECT_EQ(ack.status, AckStatus::Stored);
    EXPECT_EQ(ack.rated, i + 1);
    seen.push_back(n.triplet_id);
  }
  EXPECT_TRUE(s.next_item(id, "r02").done);
  EXPECT_EQ(seen, sess.assignment);
  EXPECT_THROW(s.next_item(id, "ghost"), UnknownName);
}

TEST(Service, DuplicatesAreNoOpsRevisionsAreLogged) {
  auto env = make_env("dup");
  StudyService s(env.dir / "studies");
  const auto id = s.create_study(env.fx.manifest, kRaters, 1);
  const auto t = env.fx.manifest.entries[2].id;
  EXPECT_EQ(s.record_rating(rating(id, "r01", t, 4)).status, AckStatus::Stored);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(s.record_rating(rating(id, "r01", t, 4)).status, AckStatus::Duplicate);
  EXPECT_EQ(s.stored_ratings(id), 1u);
  EXPECT_EQ(s.audit_log(id).size(), 1u);
  const auto ack = s.record_rating(rating(id, "r01", t, 2));
  EXPECT_EQ(ack.status, AckStatus::Revised);
  EXPECT_EQ(ack.rated, 1);
  EXPECT_EQ(s.stored_ratings(id), 1u);
  const auto log = s.audit_log(id);
  ASSERT_EQ(log.size(), 2u);
  EXPECT_FALSE(log[0].replaces.has_value());
  EXPECT_EQ(log[1].replaces, 4);
  EXPECT_FALSE(log[1].record.submitted_at.empty());
  EXPECT_EQ(s.export_ratings(id).table.scores.at({"r01", t}), 2);

  EXPECT_THROW(s.record_rating(rating(id, "r01", t, 6)), ValidationError);
  EXPECT_THROW(s.record_rating(rating(id, "r01", "t999", 3)), ValidationError);
  EXPECT_THROW(s.record_rating(rating(id, "zz", t, 3)), UnknownName);
  auto neg = rating(id, "r01", t, 3);
  neg.elapsed_ms = -1;
  EXPECT_THROW(s.record_rating(neg), ValidationError);
  EXPECT_EQ(s.audit_log(id).size(), 2u);
}

TEST(Service, RatingsSurviveRestartByLogReplay) {
  auto env = make_env("replay");
  std::string id;
  std::size_t stored = 0;
  StudyExport before;
  {
    StudyService s(env.dir / "studies");
    id = s.create_study(env.fx.manifest, kRaters, 9);
    rate_all(s, id);
    s.record_rating(rating(id, "r03", env.fx.manifest.entries[0].id, 5));
    s.record_rating(rating(id, "r03", env.fx.manifest.entries[0].id, 1));
    stored = s.stored_ratings(id);
    before = s.export_ratings(id);
  }
  StudyService again(env.dir / "studies");
  ASSERT_TRUE(again.has_study(id));
  EXPECT_EQ(again.stored_ratings(id), stored);
  const auto after = again.export_ratings(id);
  EXPECT_EQ(after.table.scores, before.table.scores);
  EXPECT_EQ(export_jsonl(after), export_jsonl(before));
  EXPECT_TRUE(again.next_item(id, "r01").done);
}

TEST(Service, ConcurrentRatersConserveEveryRating) {
  auto env = make_env("conc", 12);
  StudyService s(env.dir / "studies");
  std::vector<std::string> raters;
  for (int i = 0; i < 8; ++i) raters.push_back("p" + std::to_string(i));
  const auto id = s.create_study(env.fx.manifest, raters, 2);
  std::vector<std::thread> threads;
  for (const auto& r : raters)
    threads.emplace_back([&s, &id, r] {
      while (true) {
        const auto n = s.next_item(id, r);
        if (n.done) break;
        s.record_rating(rating(id, r, n.triplet_id, cell_score(r, n.triplet_id)));
        s.record_rating(rating(id, r, n.triplet_id, cell_score(r, n.triplet_id)));  // duplicate
      }
    });
  for (auto& t : threads) t.join();
  EXPECT_EQ(s.stored_ratings(id), 96u);
  EXPECT_EQ(s.audit_log(id).size(), 96u);
  const auto e = s.export_ratings(id);
  EXPECT_TRUE(e.missing.empty());
  for (const auto& [cell, score] : e.table.scores) EXPECT_EQ(score, cell_score(cell.first, cell.second));
}

TEST(Export, RoundTripsThroughRaterTableLoaders) {
  auto env = make_env("export");
  StudyService s(env.dir / "studies");
  const auto id = s.create_study(env.fx.manifest, kRaters, 5);
  rate_all(s, id);
  const auto e = s.export_ratings(id);
  EXPECT_TRUE(e.missing.empty());
  EXPECT_TRUE(e.warnings.empty());
  EXPECT_EQ(e.triplet_ids, ids_of(env.fx.manifest));
  EXPECT_EQ(e.records.size(), 18u);
  write_export(e, env.dir / "out");
  const auto from_jsonl = analysis::rater_table_from_jsonl(env.dir / "out" / "ratings.jsonl");
  const auto from_csv = analysis::rater_table_from_csv(env.dir / "out" / "ratings.csv");
  EXPECT_EQ(from_jsonl.scores, e.table.scores);
  EXPECT_EQ(from_csv.scores, e.table.scores);
  EXPECT_EQ(from_csv.rater_ids, kRaters);
  EXPECT_NO_THROW(from_csv.check_complete());
  const auto csv = export_csv(e);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "triplet_id,r01,r02,r03");
}

TEST(Export, PartialStudyListsMissingCells) {
  auto env = make_env("partial");
  StudyService s(env.dir / "studies");
  const auto id = s.create_study(env.fx.manifest, kRaters, 5);
  EXPECT_FALSE(s.export_ratings(id).warnings.empty());
  s.record_rating(rating(id, "r02", env.fx.manifest.entries[1].id, 3));
  const auto e = s.export_ratings(id);
  EXPECT_EQ(e.missing.size(), 17u);
  EXPECT_EQ(e.records.size(), 1u);
  ASSERT_EQ(e.warnings.size(), 1u);
  // blank cells in the pivot
  const auto csv = export_csv(e);
  EXPECT_NE(csv.find(env.fx.manifest.entries[0].id + ",,,\n"), std::string::npos);
  write_export(e, env.dir / "out");
  EXPECT_TRUE(fs::exists(env.dir / "out" / "missing.csv"));
  EXPECT_THROW(analysis::rater_table_from_csv(env.dir / "out" / "ratings.csv").check_complete(), ValidationError);
}

TEST(RatingJson, Validation) {
  const json good = {{"rater_id", "a"}, {"triplet_id", "t"}, {"score", 3}, {"elapsed_ms", 10}};
  const auto r = rating_from_json(good);
  EXPECT_EQ(r.score, 3);
  EXPECT_EQ(rating_from_json(to_json(r)).triplet_id, "t");
  auto bad = good;
  bad["score"] = 3.5;
  EXPECT_THROW(rating_from_json(bad), ValidationError);
  bad = good;
  bad.erase("rater_id");
  EXPECT_THROW(rating_from_json(bad), ValidationError);
  bad = good;
  bad["elapsed_ms"] = "fast";
  EXPECT_THROW(rating_from_json(bad), ValidationError);
  EXPECT_THROW(rating_from_json(json::array()), ValidationError);
}

class ServerTest : public ::testing::Test {
 protected:
  void SetUp() override {
    env_ = make_env("http");
    service_ = std::make_unique<StudyService>(env_.dir / "studies");
    server_ = std::make_unique<StudyServer>(*service_, ServerOptions{"127.0.0.1", 0});
    port_ = server_->start();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
  }
  void TearDown() override { server_->stop(); }

  std::string create() {
    const json body = {{"manifest_path", env_.fx.manifest_path.string()}, {"raters", kRaters}, {"seed", 4}};
    auto res = client_->Post("/studies", body.dump(), "application/json");
    EXPECT_TRUE(res);
    EXPECT_EQ(res->status, 201);
    return json::parse(res->body)["study_id"].get<std::string>();
  }

  Env env_;
  std::unique_ptr<StudyService> service_;
  std::unique_ptr<StudyServer> server_;
  std::unique_ptr<httplib::Client> client_;
  int port_ = 0;
};

TEST_F(ServerTest, HealthAndCreate) {
  auto h = client_->Get("/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  const auto id = create();
  EXPECT_EQ(create(), id);
  auto bad = client_->Post("/studies", "{not json", "application/json");
  EXPECT_EQ(bad->status, 400);
  bad = client_->Post("/studies", json{{"raters", kRaters}}.dump(), "application/json");
  EXPECT_EQ(bad->status, 400);
  bad = client_->Post("/studies", json{{"manifest_path", "/no/such.jsonl"}, {"raters", kRaters}}.dump(),
                      "application/json");
  EXPECT_EQ(bad->status, 404);
}

TEST_F(ServerTest, FullRaterSessionOverHttp) {
  const auto id = create();
  for (const auto& r : kRaters) {
    int steps = 0;
    while (true) {
      auto res = client_->Get("/studies/" + id + "/next?rater=" + r);
      ASSERT_TRUE(res);
      ASSERT_EQ(res->status, 200);
      const auto n = json::parse(res->body);
      if (n["done"].get<bool>()) break;
      const auto t = n["triplet_id"].get<std::string>();
      EXPECT_EQ(n["progress"]["rated"], steps);
      // images resolve
      auto img = client_->Get(n["images"]["sr"].get<std::string>());
      ASSERT_TRUE(img);
      EXPECT_EQ(img->status, 200);
      EXPECT_EQ(img->body.substr(1, 3), "PNG");
      EXPECT_FALSE(n["rubric"].get<std::string>().empty());
      const json rating = {{"rater_id", r}, {"triplet_id", t}, {"score", cell_score(r, t)}, {"elapsed_ms", 900}};
      auto post = client_->Post("/studies/" + id + "/ratings", rating.dump(), "application/json");
      ASSERT_TRUE(post);
      EXPECT_EQ(post->status, 201);
      auto again = client_->Post("/studies/" + id + "/ratings", rating.dump(), "application/json");
      EXPECT_EQ(again->status, 200);
      EXPECT_EQ(json::parse(again->body)["status"], "duplicate");
      ++steps;
    }
    EXPECT_EQ(steps, 6);
  }
  auto ex = client_->Get("/studies/" + id + "/export");
  ASSERT_EQ(ex->status, 200);
  const auto body = json::parse(ex->body);
  EXPECT_TRUE(body["complete"].get<bool>());
  EXPECT_EQ(body["records"].size(), 18u);
  auto csv = client_->Get("/studies/" + id + "/export?format=csv");
  EXPECT_EQ(csv->body, export_csv(service_->export_ratings(id)));
  auto jl = client_->Get("/studies/" + id + "/export?format=jsonl");
  EXPECT_EQ(jl->body, export_jsonl(service_->export_ratings(id)));
  EXPECT_EQ(client_->Get("/studies/" + id + "/export?format=xml")->status, 400);
}

TEST_F(ServerTest, ErrorStatuses) {
  const auto id = create();
  const auto t = env_.fx.manifest.entries[0].id;
  EXPECT_EQ(client_->Get("/studies/nope/next?rater=r01")->status, 404);
  EXPECT_EQ(client_->Get("/studies/" + id + "/next")->status, 400);
  EXPECT_EQ(client_->Get("/studies/" + id + "/next?rater=ghost")->status, 404);
  auto post = [&](const json& j) { return client_->Post("/studies/" + id + "/ratings", j.dump(), "application/json")->status; };
  EXPECT_EQ(post({{"rater_id", "r01"}, {"triplet_id", t}, {"score", 0}}), 400);
  EXPECT_EQ(post({{"rater_id", "r01"}, {"triplet_id", t}}), 400);
  EXPECT_EQ(post({{"rater_id", "r01"}, {"triplet_id", t}, {"score", 2}, {"study_id", "other"}}), 400);
  EXPECT_EQ(post({{"rater_id", "r01"}, {"triplet_id", t}, {"score", 2}}), 201);
  EXPECT_EQ(post({{"rater_id", "r01"}, {"triplet_id", t}, {"score", 4}}), 200);
  EXPECT_EQ(client_->Get("/images/" + t + "/xx")->status, 400);
  EXPECT_EQ(client_->Get("/images/zzz/gt")->status, 404);
  EXPECT_EQ(client_->Get("/images/" + t + "/gt?study=" + id)->status, 200);
}
