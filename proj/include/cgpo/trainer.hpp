#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "checkpoint.hpp"
#include "error.hpp"
#include "likelihood.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "pairs.hpp"
#include "rng.hpp"

namespace cgpo {

enum class Schedule { Cosine };

struct TrainConfig {
  double beta = 0.4;
  double learning_rate = 5e-7;
  int epochs = 4;
  int batch_size = 128;
  double warmup_ratio = 0.1;
  Schedule schedule = Schedule::Cosine;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
};

inline void validate(const TrainConfig& c) {
  require(c.beta > 0 && std::isfinite(c.beta), ErrorKind::Config, "beta must be positive");
  require(c.learning_rate > 0, ErrorKind::Config, "learning_rate must be positive");
  require(c.epochs >= 0 && c.batch_size >= 1, ErrorKind::Config, "invalid epochs/batch_size");
  require(c.warmup_ratio >= 0 && c.warmup_ratio < 1, ErrorKind::Config,
          "warmup_ratio must be in [0, 1)");
}

struct BatchStats {
  double loss = 0;
  double mean_delta_theta = 0;
  double mean_delta = 0;
  double margin_accuracy = 0;  // fraction with delta > 0
};

/// Segment log-likelihood sums for one triplet under one model, each taken
/// from the branch token onward and conditioned on prompt + s_init.
struct PairLogprobs {
  double chosen = 0;
  double rejected = 0;
  double delta() const { return chosen - rejected; }
};

// -log sigma(x) = log(1 + exp(-x)), computed without overflow.
inline double neg_log_sigmoid(double x) {
  return x >= 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Per-triplet objective as a function of Delta = Delta_theta - Delta_ref.
inline double cgpo_pair_loss(double delta, double beta) { return neg_log_sigmoid(beta * delta); }

/// d loss / d Delta_theta = -beta * sigma(-beta * Delta).
inline double cgpo_pair_grad(double delta, double beta) { return -beta * sigmoid(-beta * delta); }

template <class T>
PairLogprobs pair_logprobs(const Transformer<T>& model, const PreferenceTriplet& t) {
  const Tokens ctx = t.context();
  typename Transformer<T>::Activations acts;
  return {segment_forward(model, ctx, t.chosen_tokens, acts),
          segment_forward(model, ctx, t.rejected_tokens, acts)};
}

template <class T>
std::vector<PairLogprobs> pair_logprobs(const Transformer<T>& model,
                                        std::span<const PreferenceTriplet> triplets,
                                        int workers = 1) {
  std::vector<PairLogprobs> out(triplets.size());
  parallel_for(triplets.size(), workers,
               [&](std::size_t i) { out[i] = pair_logprobs(model, triplets[i]); });
  return out;
}

inline BatchStats batch_stats(std::span<const PairLogprobs> policy,
                              std::span<const PairLogprobs> reference, double beta) {
  BatchStats s;
  if (policy.empty()) return s;
  std::size_t positive = 0;
  for (std::size_t i = 0; i < policy.size(); ++i) {
    const double dtheta = policy[i].delta();
    const double delta = dtheta - reference[i].delta();
    s.loss += cgpo_pair_loss(delta, beta);
    s.mean_delta_theta += dtheta;
    s.mean_delta += delta;
    if (delta > 0) ++positive;
  }
  const auto n = static_cast<double>(policy.size());
  s.loss /= n;
  s.mean_delta_theta /= n;
  s.mean_delta /= n;
  s.margin_accuracy = static_cast<double>(positive) / n;
  return s;
}

inline void require_same_tokenizer(const std::string& a, const std::string& b) {
  require(a == b, ErrorKind::FingerprintMismatch,
          "policy and reference tokenizer fingerprints differ: " + a + " vs " + b);
}

/// Mean over the batch of -log sigma(beta * (Delta_theta - Delta_ref)). No
/// length normalization.
template <class T>
BatchStats cgpo_loss(const BasicCheckpoint<T>& policy, const BasicCheckpoint<T>& reference,
                     std::span<const PreferenceTriplet> batch, double beta) {
  require(!batch.empty(), ErrorKind::Config, "batch is empty");
  require_same_tokenizer(policy.tokenizer_fingerprint, reference.tokenizer_fingerprint);
  const auto lp = pair_logprobs(policy.model, batch);
  const auto ref = pair_logprobs(reference.model, batch);
  return batch_stats(lp, ref, beta);
}

/// Batch loss and its gradient with respect to the policy weights (mean over
/// the batch); the reference enters only through its precomputed log-probs.
template <class T>
BatchStats cgpo_loss_and_grad(const Transformer<T>& policy, std::span<const PreferenceTriplet> batch,
                              std::span<const PairLogprobs> reference, double beta,
                              std::span<T> grad) {
  require(!batch.empty() && batch.size() == reference.size(), ErrorKind::Config,
          "batch and reference log-probs must be nonempty and aligned");
  typename Transformer<T>::Activations acts_pos, acts_neg;
  std::vector<PairLogprobs> lp(batch.size());
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& t = batch[i];
    const Tokens ctx = t.context();
    lp[i].chosen = segment_forward(policy, ctx, t.chosen_tokens, acts_pos);
    lp[i].rejected = segment_forward(policy, ctx, t.rejected_tokens, acts_neg);
    const double delta = lp[i].delta() - reference[i].delta();
    const double g = cgpo_pair_grad(delta, beta) * inv_n;
    segment_backward(policy, ctx.size(), t.chosen_tokens, acts_pos, g, grad);
    segment_backward(policy, ctx.size(), t.rejected_tokens, acts_neg, -g, grad);
  }
  return batch_stats(lp, reference, beta);
}

struct TrainStep {
  std::int64_t step;
  int epoch;
  BatchStats stats;
  double lr;
};

inline std::int64_t train_total_steps(std::size_t n, const TrainConfig& cfg) {
  const auto per_epoch = static_cast<std::int64_t>(
      (n + static_cast<std::size_t>(cfg.batch_size) - 1) / static_cast<std::size_t>(cfg.batch_size));
  return per_epoch * cfg.epochs;
}

/// CGPO fine-tuning. The reference is a frozen copy of `initial`; its segment
/// log-probs are computed once up front. Stats in each TrainStep describe the
/// batch before that step's update.
template <class T>
BasicCheckpoint<T> train(const BasicCheckpoint<T>& initial, std::span<const PreferenceTriplet> dataset,
                         const TrainConfig& cfg,
                         const std::function<void(const TrainStep&)>& on_step = {}) {
  validate(cfg);
  require(!dataset.empty(), ErrorKind::Config, "preference dataset is empty");
  BasicCheckpoint<T> policy = initial;
  const std::vector<PairLogprobs> ref = pair_logprobs(initial.model, dataset);

  OptimizerConfig oc;
  oc.learning_rate = cfg.learning_rate;
  oc.weight_decay = cfg.weight_decay;
  oc.warmup_ratio = cfg.warmup_ratio;
  oc.grad_clip = cfg.grad_clip;
  AdamW<T> opt(policy.model.num_params(), oc);
  std::vector<T> grad(policy.model.num_params());

  const std::int64_t total = train_total_steps(dataset.size(), cfg);
  std::vector<std::size_t> order(dataset.size());
  std::vector<PreferenceTriplet> batch;
  std::vector<PairLogprobs> batch_ref;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, {0xd90, static_cast<std::uint64_t>(epoch)}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      batch.clear();
      batch_ref.clear();
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(dataset[order[i]]);
        batch_ref.push_back(ref[order[i]]);
      }
      std::fill(grad.begin(), grad.end(), T(0));
      const BatchStats stats = cgpo_loss_and_grad(policy.model, std::span<const PreferenceTriplet>(batch),
                                                  std::span<const PairLogprobs>(batch_ref), cfg.beta,
                                                  std::span<T>(grad));
      require(std::isfinite(stats.loss), ErrorKind::DivergenceDetected,
              "CGPO loss became non-finite at step " + std::to_string(step));
      clip_grad_norm(std::span<T>(grad), cfg.grad_clip);
      const double lr = scheduled_lr(cfg.learning_rate, step, total, cfg.warmup_ratio);
      opt.step(policy.model.weights(), grad, lr);
      if (on_step) on_step({step, epoch, stats, lr});
      ++step;
    }
  }
  policy.provenance = {{"stage", "cgpo-train"},
                       {"initial_model_id", initial.model_id()},
                       {"beta", cfg.beta},
                       {"learning_rate", cfg.learning_rate},
                       {"epochs", cfg.epochs},
                       {"batch_size", cfg.batch_size},
                       {"warmup_ratio", cfg.warmup_ratio},
                       {"weight_decay", cfg.weight_decay},
                       {"grad_clip", cfg.grad_clip},
                       {"seed", cfg.seed},
                       {"steps", step},
                       {"n_triplets", dataset.size()}};
  return policy;
}

/// Worst relative error between the analytic CGPO gradient and central finite
/// differences over `n_probes` uniformly drawn parameters. Intended for
/// 64-bit models. Relative error uses max(|analytic|, |numeric|) floored at
/// `abs_floor` so parameters with vanishing gradient do not dominate.
inline double grad_check(const Model64& policy, const Model64& reference,
                         std::span<const PreferenceTriplet> batch, double beta, int n_probes,
                         double epsilon, std::uint64_t seed = 0, double abs_floor = 1e-8) {
  require(n_probes >= 1, ErrorKind::Config, "n_probes must be >= 1");
  const std::vector<PairLogprobs> ref = pair_logprobs(reference, batch);
  std::vector<double> grad(policy.num_params(), 0.0);
  cgpo_loss_and_grad(policy, batch, std::span<const PairLogprobs>(ref), beta, std::span<double>(grad));

  Model64 probe = policy;
  auto loss_at = [&]() {
    return batch_stats(pair_logprobs(probe, batch), ref, beta).loss;
  };
  Rng rng(seed);
  double worst = 0;
  for (int i = 0; i < n_probes; ++i) {
    const std::size_t idx = rng.below(policy.num_params());
    const double w0 = probe.weights()[idx];
    probe.weights()[idx] = w0 + epsilon;
    const double up = loss_at();
    probe.weights()[idx] = w0 - epsilon;
    const double down = loss_at();
    probe.weights()[idx] = w0;
    const double numeric = (up - down) / (2 * epsilon);
    const double denom = std::max({std::abs(grad[idx]), std::abs(numeric), abs_floor});
    worst = std::max(worst, std::abs(grad[idx] - numeric) / denom);
  }
  return worst;
}

}  // namespace cgpo
