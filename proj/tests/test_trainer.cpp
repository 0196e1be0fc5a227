#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace cgpo;
using namespace cgpo::testing;

namespace {

std::vector<PreferenceTriplet> make_triplets(const Policy& policy, std::size_t n_prompts,
                                             int max_tokens = 12, std::uint64_t seed = 4) {
  PairBuilderConfig c;
  c.sampling.max_new_tokens = max_tokens;
  c.max_branch_tokens = max_tokens / 2;
  c.seed = seed;
  auto ds = build_dataset(policy, IdReward{}, small_problems(n_prompts, seed), c);
  return ds.triplets;
}

template <class T>
BasicCheckpoint<T> tiny_checkpoint(int n_layers = 1, int d_model = 16, std::uint64_t seed = 3) {
  return BasicCheckpoint<T>{Transformer<T>::initialized(tiny_config(n_layers, d_model, 64, seed))};
}

}  // namespace

TEST(Loss, ScalarValues) {
  EXPECT_NEAR(cgpo_pair_loss(0.0, 0.4), std::log(2.0), 1e-15);
  // ln(1 + e^-2)
  EXPECT_NEAR(cgpo_pair_loss(2.0, 1.0), 0.1269280110429725, 1e-15);
  EXPECT_NEAR(cgpo_pair_grad(0.0, 0.4), -0.2, 1e-15);
  // Extreme arguments stay finite.
  EXPECT_NEAR(cgpo_pair_loss(-1000.0, 1.0), 1000.0, 1e-9);
  EXPECT_EQ(cgpo_pair_loss(1000.0, 1.0), 0.0);
  EXPECT_TRUE(std::isfinite(cgpo_pair_grad(-1e6, 1.0)));
}

TEST(Loss, DecreasesWithPositiveMarginAndBeta) {
  double prev = cgpo_pair_loss(1.0, 0.05);
  for (double beta = 0.1; beta <= 2.0; beta += 0.05) {
    const double l = cgpo_pair_loss(1.0, beta);
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_GT(cgpo_pair_loss(-1.0, 0.8), cgpo_pair_loss(-1.0, 0.4));
}

TEST(Loss, SwapIdentity) {
  Rng rng(8);
  for (int i = 0; i < 500; ++i) {
    const double delta = 20.0 * (rng.uniform() - 0.5);
    const double beta = 0.01 + rng.uniform();
    // -log s(bD) - (-log s(-bD)) = -bD
    EXPECT_NEAR(cgpo_pair_loss(delta, beta) - cgpo_pair_loss(-delta, beta), -beta * delta, 1e-12);
  }
}

TEST(Loss, PolicyEqualsReferenceGivesLn2) {
  const auto ckpt = tiny_checkpoint<double>();
  const auto batch = make_triplets(ckpt.model, 10);
  ASSERT_GE(batch.size(), 4u);
  const BatchStats s = cgpo_loss(ckpt, ckpt, std::span<const PreferenceTriplet>(batch), 0.4);
  EXPECT_NEAR(s.loss, std::log(2.0), 1e-9);
  EXPECT_EQ(s.mean_delta, 0.0);
  EXPECT_EQ(s.margin_accuracy, 0.0);
}

TEST(Loss, SwappedSegmentsFlipTheSign) {
  const auto policy = tiny_checkpoint<double>(1, 16, 3);
  const auto reference = tiny_checkpoint<double>(1, 16, 5);
  const auto batch = make_triplets(policy.model, 10);
  auto swapped = batch;
  for (auto& t : swapped) std::swap(t.chosen_tokens, t.rejected_tokens);
  const double beta = 0.7;
  const auto lp = pair_logprobs(policy.model, std::span<const PreferenceTriplet>(batch));
  const auto ref = pair_logprobs(reference.model, std::span<const PreferenceTriplet>(batch));
  double expected = 0;
  for (std::size_t i = 0; i < batch.size(); ++i)
    expected += cgpo_pair_loss(-(lp[i].delta() - ref[i].delta()), beta);
  expected /= static_cast<double>(batch.size());
  const BatchStats s = cgpo_loss(policy, reference, std::span<const PreferenceTriplet>(swapped), beta);
  EXPECT_NEAR(s.loss, expected, 1e-12);
  const BatchStats o = cgpo_loss(policy, reference, std::span<const PreferenceTriplet>(batch), beta);
  EXPECT_NEAR(s.mean_delta, -o.mean_delta, 1e-12);
}

TEST(Loss, SharedLogitShiftLeavesDeltaUnchanged) {
  const auto ckpt = tiny_checkpoint<double>();
  const auto batch = make_triplets(ckpt.model, 8);
  Model64 shifted = ckpt.model;
  const auto& lay = shifted.layout();
  for (int v = 0; v < shifted.config().vocab_size; ++v)
    shifted.weights()[lay.b_head + static_cast<std::size_t>(v)] += 2.5;
  for (const auto& t : batch) {
    const auto a = pair_logprobs(ckpt.model, t);
    const auto b = pair_logprobs(shifted, t);
    EXPECT_NEAR(a.delta(), b.delta(), 1e-10);
  }
  const PairLogprobs p{-3.0, -5.0}, q{-3.0 + 1.25, -5.0 + 1.25};
  EXPECT_EQ(p.delta(), q.delta());
}

TEST(Loss, TokenizerMismatch) {
  auto a = tiny_checkpoint<double>();
  auto b = a;
  b.tokenizer_fingerprint = "other";
  const auto batch = make_triplets(a.model, 4);
  try {
    cgpo_loss(a, b, std::span<const PreferenceTriplet>(batch), 0.4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::FingerprintMismatch);
  }
}

TEST(Gradient, MatchesFiniteDifferences) {
  const auto policy = Model64::initialized(tiny_config(1, 16, 64, 3));
  const auto reference = Model64::initialized(tiny_config(1, 16, 64, 9));
  auto batch = make_triplets(policy, 6);
  ASSERT_GE(batch.size(), 2u);
  batch.resize(2);
  const double err = grad_check(policy, reference, std::span<const PreferenceTriplet>(batch), 0.4,
                                30, 1e-5);
  EXPECT_LT(err, 1e-4);
}

TEST(Gradient, ScalesWithBeta) {
  const auto policy = Model64::initialized(tiny_config());
  auto batch = make_triplets(policy, 6);
  const auto ref = pair_logprobs(policy, std::span<const PreferenceTriplet>(batch));
  auto grad_at = [&](double beta) {
    std::vector<double> g(policy.num_params(), 0.0);
    cgpo_loss_and_grad(policy, std::span<const PreferenceTriplet>(batch),
                       std::span<const PairLogprobs>(ref), beta, std::span<double>(g));
    return g;
  };
  const auto g1 = grad_at(1e-8), g2 = grad_at(2e-8), g3 = grad_at(0.4);
  double n1 = 0, n2 = 0, n3 = 0;
  for (std::size_t i = 0; i < g1.size(); ++i) {
    n1 += g1[i] * g1[i];
    n2 += g2[i] * g2[i];
    n3 += g3[i] * g3[i];
  }
  ASSERT_GT(n1, 0.0);
  // Policy equals reference, so every Delta is 0 and dL/dDelta_theta = -beta/2.
  EXPECT_NEAR(std::sqrt(n2 / n1), 2.0, 1e-9);
  EXPECT_NEAR(std::sqrt(n3 / n1), 0.4 / 1e-8, 1e-9 * 0.4 / 1e-8);
}

TEST(Train, ZeroEpochsIsIdentity) {
  const auto init = tiny_checkpoint<float>();
  const auto batch = make_triplets(init.model, 6);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto out = train(init, std::span<const PreferenceTriplet>(batch), cfg);
  EXPECT_TRUE(std::equal(out.model.weights().begin(), out.model.weights().end(),
                         init.model.weights().begin()));
}

TEST(Train, OverfitsASingleBatch) {
  const auto init = tiny_checkpoint<float>();
  auto batch = make_triplets(init.model, 6);
  batch.resize(std::min<std::size_t>(batch.size(), 4));
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 10;
  cfg.batch_size = 4;
  const std::span<const PreferenceTriplet> span(batch);
  const double before = preference_margin(init, init, span).mean_delta_theta;
  std::vector<TrainStep> steps;
  const auto out = train(init, span, cfg, [&](const TrainStep& s) { steps.push_back(s); });
  const BatchStats after = preference_margin(out, init, span);
  EXPECT_GT(after.mean_delta_theta, before);
  EXPECT_GT(after.mean_delta, 0.0);
  EXPECT_EQ(static_cast<std::int64_t>(steps.size()), train_total_steps(batch.size(), cfg));
  EXPECT_NEAR(steps.front().stats.loss, std::log(2.0), 1e-5);
  EXPECT_LT(steps.back().stats.loss, steps.front().stats.loss);
  EXPECT_EQ(out.provenance.at("stage"), "cgpo-train");
}

TEST(Train, SeedDeterminism) {
  const auto init = tiny_checkpoint<float>();
  const auto data = make_triplets(init.model, 12);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 2;
  cfg.batch_size = 3;
  cfg.seed = 77;
  auto run = [&] {
    std::vector<double> log;
    auto out = train(init, std::span<const PreferenceTriplet>(data), cfg, [&](const TrainStep& s) {
      log.insert(log.end(), {s.stats.loss, s.stats.mean_delta_theta, s.stats.mean_delta,
                             s.stats.margin_accuracy, s.lr});
    });
    return std::make_pair(log, std::vector<float>(out.model.weights().begin(), out.model.weights().end()));
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  cfg.seed = 78;
  const auto c = run();
  EXPECT_NE(a.first, c.first);
}

TEST(Train, InvalidConfig) {
  const auto init = tiny_checkpoint<float>();
  const auto data = make_triplets(init.model, 4);
  TrainConfig cfg;
  cfg.beta = 0;
  EXPECT_THROW(train(init, std::span<const PreferenceTriplet>(data), cfg), Error);
  cfg = {};
  cfg.warmup_ratio = 1.0;
  EXPECT_THROW(validate(cfg), Error);
  EXPECT_THROW(train(init, std::span<const PreferenceTriplet>(), TrainConfig{}), Error);
}

TEST(Train, NonFiniteLossIsDivergence) {
  auto init = tiny_checkpoint<float>();
  const auto data = make_triplets(init.model, 4);
  init.model.weights()[init.model.layout().b_head] = std::numeric_limits<float>::infinity();
  TrainConfig cfg;
  cfg.epochs = 1;
  try {
    train(init, std::span<const PreferenceTriplet>(data), cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DivergenceDetected);
  }
}
