#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "hallucheck/align.hpp"
#include "hallucheck/error.hpp"

using namespace hallucheck;
using namespace hallucheck::align;
namespace fs = std::filesystem;

namespace {

ToyAdapter small_adapter(std::uint64_t seed = 1234) {
  ToyAdapterOptions o;
  o.size = 16;
  o.seed = seed;
  return ToyAdapter(adapter_preset("toy"), o);
}

// LoRA B starts at zero, which hides every A gradient; give it some mass.
void perturb_lora(ToyAdapter& a, std::uint64_t seed) {
  Rng r(seed);
  for (auto& p : a.lora())
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += 0.05 * r.normal();
}

TrainConfig tiny_train(int steps) {
  TrainConfig c;
  c.total_steps = steps;
  c.batch = 2;
  c.grad_accum = 2;
  c.lr = 1e-3;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(Presets, RewardPresetsMatchPublishedLambdas) {
  const auto ps = reward_presets();
  ASSERT_EQ(ps.size(), 3u);
  EXPECT_EQ(ps[0].name, "dino-st");
  EXPECT_EQ(ps[0].config.semantic_backend, "dino");
  EXPECT_EQ(ps[0].config.token_kind, features::TokenKind::ST);
  EXPECT_EQ(ps[0].config.lambda, 0.05);
  EXPECT_EQ(ps[1].name, "clip-st");
  EXPECT_EQ(ps[1].config.semantic_backend, "clip");
  EXPECT_EQ(ps[1].config.token_kind, features::TokenKind::ST);
  EXPECT_EQ(ps[1].config.lambda, 0.1);
  EXPECT_EQ(ps[2].name, "clip-cls");
  EXPECT_EQ(ps[2].config.token_kind, features::TokenKind::CLS);
  EXPECT_EQ(ps[2].config.lambda, 0.05);
  EXPECT_THROW(reward_preset("dino-cls"), UnknownName);
}

TEST(Presets, RewardConfigJson) {
  for (const auto& p : reward_presets()) {
    const auto back = reward_config_from_json(to_json(p.config));
    EXPECT_EQ(to_json(back), to_json(p.config));
  }
  const auto c = reward_config_from_json({{"preset", "clip-st"}, {"lambda", 0.3}, {"layers", "last"}});
  EXPECT_EQ(c.semantic_backend, "clip");
  EXPECT_EQ(c.lambda, 0.3);
  EXPECT_EQ(c.layers, features::layer_preset("last"));
  EXPECT_THROW(reward_config_from_json({{"lambda", -0.1}}), ValidationError);
  EXPECT_THROW(reward_config_from_json({{"quality_term", "brisque"}}), ValidationError);
  EXPECT_THROW(reward_config_from_json({{"lambda", "big"}}), ValidationError);
}

TEST(Presets, AdapterPresets) {
  for (const auto& s : adapter_presets()) {
    EXPECT_NO_THROW(s.validate()) << s.name;
    EXPECT_EQ(s.trainable_scope, "lora_unet_only");
    EXPECT_NE(std::find(s.frozen_parts.begin(), s.frozen_parts.end(), "controlnet"), s.frozen_parts.end());
  }
  const auto seesr = adapter_preset("seesr-like");
  EXPECT_EQ(seesr.sampler, Sampler::DDIM);
  EXPECT_EQ(seesr.steps, 50);
  EXPECT_EQ(seesr.cfg_weight, 5.5);
  const auto pasd = adapter_preset("pasd-like");
  EXPECT_EQ(pasd.sampler, Sampler::UniPC);
  EXPECT_EQ(pasd.steps, 20);
  EXPECT_EQ(pasd.cfg_weight, 9.0);
  EXPECT_THROW(ToyAdapter{seesr}, Unavailable);
  auto bad = adapter_preset("toy");
  bad.frozen_parts.clear();
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = adapter_preset("toy");
  bad.trainable_scope = "full";
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(TrainConfigJson, TruncationAndValidation) {
  EXPECT_FALSE(train_config_from_json({{"truncation", "full"}}).truncation.has_value());
  EXPECT_EQ(*train_config_from_json({{"truncation", 2}}).truncation, 2);
  EXPECT_THROW(train_config_from_json({{"truncation", "half"}}), ValidationError);
  EXPECT_THROW(train_config_from_json({{"truncation", 0}}), ValidationError);
  const auto c = train_config_from_json({{"batch", 8}, {"grad_accum", 4}});
  EXPECT_EQ(c.effective_batch(), 32);
  EXPECT_EQ(to_json(train_config_from_json(to_json(c))), to_json(c));
}

TEST(Conversion, MatImageRoundTrip) {
  const Image img = fixtures::textured_image(8, 12, 3);
  const Mat m = to_mat(img);
  EXPECT_EQ(m.rows(), 96);
  EXPECT_EQ(m(2 * 12 + 5, 1), img.at(2, 5, 1));
  const Image back = to_image(m, 8, 12);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(back.data()[i], img.data()[i]);
}

TEST(Reward, SemanticOfIdenticalImagesIsOne) {
  const Image gt = fixtures::textured_image(16, 16, 2);
  for (const auto& p : reward_presets()) {
    const auto models = toy_reward_models(p.config);
    ad::Tape t;
    Var r = semantic_reward(t, t.constant(to_mat(gt)), 16, 16, gt, *models.semantic, p.config);
    EXPECT_NEAR(r.scalar(), 1.0, 1e-12) << p.name;
  }
}

TEST(Reward, LinearInLambda) {
  const Image gt = fixtures::textured_image(16, 16, 2);
  const Image sr = fixtures::add_noise(gt, 0.1, 3);
  for (const auto& p : reward_presets()) {
    const auto models = toy_reward_models(p.config);
    auto value = [&](double lambda, Mat* grad) {
      auto cfg = p.config;
      cfg.lambda = lambda;
      ad::Param x{"x", to_mat(sr), {}};
      x.zero_grad();
      ad::Tape t;
      Var r = combined_reward(t, t.param(x), 16, 16, gt, models, cfg);
      t.backward(r);
      if (grad) *grad = x.grad;
      return r.scalar();
    };
    Mat g0, g1, gl;
    const double r0 = value(0.0, &g0), r1 = value(1.0, &g1);
    for (double lambda : {0.05, 0.1, 0.37, 2.0}) {
      EXPECT_NEAR(value(lambda, &gl), r0 + lambda * (r1 - r0), 1e-9) << p.name << " " << lambda;
      EXPECT_LT((gl - (g0 + lambda * (g1 - g0))).cwiseAbs().maxCoeff(), 1e-9);
    }
    // the quality term is Q/Q_max
    auto semantic_only = p.config;
    semantic_only.quality = QualityTerm::None;
    ad::Tape t;
    const double sem = combined_reward(t, t.constant(to_mat(sr)), 16, 16, gt, models, semantic_only).scalar();
    EXPECT_NEAR(r0, sem, 1e-15);
    EXPECT_NEAR(r1 - r0, models.quality->score_value(sr) / models.quality->q_max(), 1e-12);
  }
}

TEST(Reward, LiteralCosineOfScalarsIsConstant) {
  const Image gt = fixtures::textured_image(16, 16, 2);
  LaplacianQuality q;
  ad::Param x{"x", to_mat(fixtures::add_noise(gt, 0.05, 1)), {}};
  x.zero_grad();
  ad::Tape t;
  Var r = quality_reward(t, t.param(x), 16, 16, gt, q, QualityForm::LiteralCosine);
  EXPECT_NEAR(r.scalar(), 1.0, 1e-12);
  t.backward(r);
  EXPECT_LT(x.grad.cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Reward, LaplacianQualityBoundedAndSharpnessDriven) {
  LaplacianQuality q;
  const Image flat(16, 16, 0.4f);
  EXPECT_EQ(q.score_value(flat), 0.0);
  const Image tex = fixtures::textured_image(16, 16, 1);
  const double s = q.score_value(tex);
  EXPECT_GT(s, 0.0);
  EXPECT_LT(s, q.q_max());
  EXPECT_GT(q.score_value(fixtures::add_noise(tex, 0.2, 1)), s);
}

TEST(Reward, ShapeAndBackendErrors) {
  const Image gt = fixtures::textured_image(16, 16, 2);
  const auto cfg = reward_preset("dino-st");
  const auto models = toy_reward_models(cfg);
  ad::Tape t;
  EXPECT_THROW(combined_reward(t, t.constant(Mat::Zero(64, 3)), 8, 8, gt, models, cfg), ShapeMismatch);
  auto bad = cfg;
  bad.semantic_backend = "siglip";
  EXPECT_THROW(toy_reward_models(bad), Unavailable);
  bad = cfg;
  bad.layers = {40};
  EXPECT_THROW(combined_reward(t, t.constant(to_mat(gt)), 16, 16, gt, models, bad), std::exception);
  EXPECT_THROW(combined_reward(t, t.constant(to_mat(gt)), 16, 16, gt, RewardModels{}, cfg), Unavailable);
}

TEST(Adapter, SampleDeterministicInRangeAndLoraStartsAsIdentity) {
  auto a = small_adapter();
  const auto data = synthetic_train_data(2, a, 1);
  Rng r1(9), r2(9);
  const Image x = a.sample(data.lr[0], r1), y = a.sample(data.lr[0], r2);
  ASSERT_EQ(x.height(), 16);
  for (std::size_t i = 0; i < x.size(); ++i) {
    ASSERT_EQ(x.data()[i], y.data()[i]);
    ASSERT_GE(x.data()[i], 0.0f);
    ASSERT_LE(x.data()[i], 1.0f);
  }
  // B = 0 means LoRA contributes nothing: the gradient through A is zero.
  ad::Tape t;
  Rng r3(9);
  Var sr = a.sample_differentiable(t, data.lr[0], r3);
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_FLOAT_EQ(to_image(sr.value(), 16, 16).data()[i], x.data()[i]);
  for (auto& p : a.lora()) p.zero_grad();
  t.backward(ad::mean(sr));
  EXPECT_EQ(a.lora()[0].grad.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(a.lora()[1].grad.cwiseAbs().maxCoeff(), 0.0);
  Rng r4(0);
  EXPECT_THROW(a.sample(Image(5, 5), r4), ShapeMismatch);
}

TEST(Adapter, RewardGradientMatchesFiniteDifferences) {
  auto a = small_adapter();
  perturb_lora(a, 3);
  const auto data = synthetic_train_data(1, a, 2);
  for (const auto& p : reward_presets()) {
    const auto models = toy_reward_models(p.config);
    const auto g = fixtures::reward_gradient_check(a, data.lr[0], data.gt[0], models, p.config, 17);
    EXPECT_GT(g.fd_norm, 0.0) << p.name;
    EXPECT_LT(g.rel_error, 1e-4) << p.name;
  }
}

TEST(Adapter, TruncationLimitsGradientPathAndMemory) {
  auto a = small_adapter();
  perturb_lora(a, 4);
  const auto data = synthetic_train_data(1, a, 2);
  auto bytes = [&](std::optional<int> k) {
    ad::Tape t;
    Rng r(1);
    SampleOptions so;
    so.truncation = k;
    Var sr = a.sample_differentiable(t, data.lr[0], r, so);
    return std::make_pair(t.bytes(), sr.value());
  };
  const auto [full_bytes, full_val] = bytes(std::nullopt);
  const auto [one_bytes, one_val] = bytes(1);
  EXPECT_LT(one_bytes, full_bytes);
  EXPECT_LT((full_val - one_val).cwiseAbs().maxCoeff(), 1e-12);  // same forward pass

  SampleOptions tight;
  tight.memory_budget = one_bytes + (full_bytes - one_bytes) / 3;
  ad::Tape t;
  Rng r(1);
  try {
    a.sample_differentiable(t, data.lr[0], r, tight);
    FAIL() << "expected MemoryBudgetExceeded";
  } catch (const MemoryBudgetExceeded& e) {
    EXPECT_GE(e.max_truncation(), 1);
    EXPECT_LT(e.max_truncation(), a.spec().steps);
    tight.truncation = e.max_truncation();
    ad::Tape t2;
    Rng r2(1);
    EXPECT_NO_THROW(a.sample_differentiable(t2, data.lr[0], r2, tight));
  }
}

TEST(Finetune, BaseFrozenLoraMovesAndLogIsComplete) {
  auto a = small_adapter();
  const auto before = a.param_hashes();
  const auto data = synthetic_train_data(3, a, 2);
  const auto cfg = reward_preset("dino-st");
  const auto dir = fixtures::temp_dir("ft");
  FinetuneOutputs out;
  out.log_csv = dir / "log.csv";
  out.checkpoint = dir / "lora.safetensors";
  int calls = 0;
  out.on_step = [&](const TrainLogRow&) { ++calls; };
  const auto run = finetune(a, data, toy_reward_models(cfg), cfg, tiny_train(4), out);
  EXPECT_EQ(calls, 4);
  ASSERT_EQ(run.log.size(), 4u);
  EXPECT_EQ(run.base_hash_before, run.base_hash_after);
  const auto after = a.param_hashes();
  for (const auto& p : a.base()) EXPECT_EQ(before.at(p.name), after.at(p.name)) << p.name;
  EXPECT_NE(before.at("lora.1.b"), after.at("lora.1.b"));
  for (const auto& row : run.log) {
    EXPECT_EQ(row.loss, -row.reward_mean);
    EXPECT_TRUE(std::isfinite(row.grad_norm));
  }
  EXPECT_EQ(fixtures::read_file(out.log_csv), train_log_csv(run.log));

  // checkpoint reload into a fresh adapter with the same base
  auto b = small_adapter();
  load_checkpoint(b, out.checkpoint);
  for (std::size_t k = 0; k < a.lora().size(); ++k)
    EXPECT_LT((a.lora()[k].value - b.lora()[k].value).cwiseAbs().maxCoeff(), 1e-6);
  auto other = small_adapter(99);
  EXPECT_THROW(load_checkpoint(other, out.checkpoint), ValidationError);
}

TEST(Finetune, ResumeMatchesUninterruptedRun) {
  const auto cfg = reward_preset("clip-st");
  const auto models = toy_reward_models(cfg);
  const auto dir = fixtures::temp_dir("resume");
  auto ref = small_adapter();
  const auto data = synthetic_train_data(3, ref, 2);
  const auto full = finetune(ref, data, models, cfg, tiny_train(5));

  auto part = small_adapter();
  FinetuneOutputs out;
  out.state = dir / "state.json";
  out.state_every = 1;
  finetune(part, data, models, cfg, tiny_train(2), out);
  const auto state = load_train_state(out.state);
  EXPECT_EQ(state.next_step, 2);
  auto cont = small_adapter();
  const auto rest = finetune(cont, data, models, cfg, tiny_train(5), {}, &state);
  ASSERT_EQ(rest.log.size(), full.log.size());
  for (std::size_t i = 0; i < full.log.size(); ++i) {
    EXPECT_EQ(rest.log[i].reward_mean, full.log[i].reward_mean) << i;
    EXPECT_EQ(rest.log[i].grad_norm, full.log[i].grad_norm) << i;
  }
  for (std::size_t k = 0; k < ref.lora().size(); ++k) EXPECT_EQ(ref.lora()[k].value, cont.lora()[k].value);

  auto foreign = small_adapter(77);
  EXPECT_THROW(finetune(foreign, data, models, cfg, tiny_train(5), {}, &state), ValidationError);
}

TEST(Finetune, RejectsBadInputs) {
  auto a = small_adapter();
  const auto cfg = reward_preset("dino-st");
  const auto models = toy_reward_models(cfg);
  EXPECT_THROW(finetune(a, TrainData{}, models, cfg, tiny_train(1)), ValidationError);
  const auto data = synthetic_train_data(1, a, 1);
  auto neg = cfg;
  neg.lambda = -1;
  EXPECT_THROW(finetune(a, data, models, neg, tiny_train(1)), ValidationError);
  auto t = tiny_train(1);
  t.batch = 0;
  EXPECT_THROW(finetune(a, data, models, cfg, t), ValidationError);
}

TEST(Finetune, SmoothedRewardWindow) {
  std::vector<TrainLogRow> log;
  for (int i = 0; i < 30; ++i) log.push_back({i, static_cast<double>(i), 0, 0, 0});
  EXPECT_EQ(smoothed_reward(log, 0), 0.0);
  EXPECT_EQ(smoothed_reward(log, 3), 1.5);
  EXPECT_EQ(smoothed_reward(log, 29), 19.5);  // mean of 10..29
  EXPECT_THROW(smoothed_reward(log, 30), ValidationError);
}
