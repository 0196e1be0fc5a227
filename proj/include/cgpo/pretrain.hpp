#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "checkpoint.hpp"
#include "corpus.hpp"
#include "error.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "rng.hpp"

namespace cgpo {

struct PretrainConfig {
  OptimizerConfig optim{.learning_rate = 3e-3, .weight_decay = 0.01};
  int epochs = 1;
  int batch_size = 32;
  std::uint64_t seed = 0;
  // Stop after this many optimizer steps when > 0; the schedule still spans it.
  std::int64_t max_steps = 0;
};

struct PretrainStep {
  std::int64_t step;
  int epoch;
  double loss;
  double lr;
  double grad_norm;
};

/// One training example: "BOS expression SEP solution EOS"; the loss covers
/// the solution tokens only.
struct LmExample {
  Tokens tokens;
  std::size_t first_target = 0;  // index of the first token that is scored
};

inline LmExample make_lm_example(const ProblemInstance& p, const Tokenizer& tok = Tokenizer{}) {
  LmExample ex;
  ex.tokens = prompt_tokens(p, tok);
  ex.first_target = ex.tokens.size();
  const Tokens sol = solution_tokens(p, tok);
  ex.tokens.insert(ex.tokens.end(), sol.begin(), sol.end());
  return ex;
}

struct LossSum {
  double sum = 0;
  std::size_t count = 0;
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

/// Masked next-token cross entropy of one example. When `grad` is nonempty,
/// accumulates grad_scale * d(sum of token losses)/d(weights) into it.
template <class T>
LossSum lm_loss(const Transformer<T>& model, const LmExample& ex, std::span<T> grad,
                double grad_scale, typename Transformer<T>::Activations& acts) {
  require(ex.tokens.size() >= 2 && ex.first_target >= 1 && ex.first_target < ex.tokens.size(),
          ErrorKind::Config, "example has no target tokens");
  const std::span<const TokenId> input(ex.tokens.data(), ex.tokens.size() - 1);
  model.forward(input, acts);
  const auto V = static_cast<std::size_t>(model.vocab_size());
  LossSum out;
  std::vector<T> dlogits;
  if (!grad.empty()) dlogits.assign(acts.logits.size(), T(0));
  for (std::size_t t = ex.first_target - 1; t < input.size(); ++t) {
    const auto target = static_cast<std::size_t>(ex.tokens[t + 1]);
    const std::span<const T> row(&acts.logits[t * V], V);
    out.sum -= log_softmax_at(row, target);
    out.count += 1;
    if (!grad.empty()) {
      double mx = -INFINITY;
      for (T v : row) mx = std::max(mx, static_cast<double>(v));
      double z = 0;
      for (T v : row) z += std::exp(static_cast<double>(v) - mx);
      for (std::size_t i = 0; i < V; ++i) {
        const double p = std::exp(static_cast<double>(row[i]) - mx) / z;
        dlogits[t * V + i] = static_cast<T>(grad_scale * (p - (i == target ? 1.0 : 0.0)));
      }
    }
  }
  if (!grad.empty()) model.backward(acts, dlogits, grad);
  return out;
}

/// Mean per-token loss over a set of problems (no gradient).
template <class T>
double mean_lm_loss(const Transformer<T>& model, const std::vector<ProblemInstance>& problems) {
  typename Transformer<T>::Activations acts;
  LossSum total;
  for (const auto& p : problems) {
    const LossSum s = lm_loss(model, make_lm_example(p), std::span<T>{}, 0.0, acts);
    total.sum += s.sum;
    total.count += s.count;
  }
  return total.mean();
}

inline std::int64_t pretrain_total_steps(std::size_t n_examples, const PretrainConfig& cfg) {
  const auto per_epoch = static_cast<std::int64_t>(
      (n_examples + static_cast<std::size_t>(cfg.batch_size) - 1) /
      static_cast<std::size_t>(cfg.batch_size));
  std::int64_t total = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
  return total;
}

/// Trains from the config's seeded initialization with AdamW, warmup plus
/// cosine decay and global-norm clipping. Single-threaded and deterministic.
template <class T = float>
BasicCheckpoint<T> pretrain(const std::vector<ProblemInstance>& corpus, const ModelConfig& model_config,
                            const PretrainConfig& cfg,
                            const std::function<void(const PretrainStep&)>& on_step = {}) {
  validate(cfg.optim);
  require(cfg.batch_size >= 1 && cfg.epochs >= 0, ErrorKind::Config, "invalid batch/epochs");
  require(!corpus.empty(), ErrorKind::Config, "pretraining corpus is empty");

  BasicCheckpoint<T> ckpt{Transformer<T>::initialized(model_config)};
  auto& model = ckpt.model;
  std::vector<LmExample> examples;
  examples.reserve(corpus.size());
  for (const auto& p : corpus) {
    examples.push_back(make_lm_example(p));
    require(examples.back().tokens.size() - 1 <= static_cast<std::size_t>(model_config.context_len),
            ErrorKind::ContextOverflow, "corpus example longer than context_len: " + p.expression);
  }

  const std::int64_t total = pretrain_total_steps(examples.size(), cfg);
  AdamW<T> opt(model.num_params(), cfg.optim);
  std::vector<T> grad(model.num_params());
  typename Transformer<T>::Activations acts;
  std::vector<std::size_t> order(examples.size());
  std::int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, {0x5eed, static_cast<std::uint64_t>(epoch)}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    for (std::size_t start = 0; start < order.size() && step < total;
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::size_t n_targets = 0;
      for (std::size_t i = start; i < end; ++i)
        n_targets += examples[order[i]].tokens.size() - examples[order[i]].first_target;
      std::fill(grad.begin(), grad.end(), T(0));
      LossSum batch;
      for (std::size_t i = start; i < end; ++i) {
        const LossSum s = lm_loss(model, examples[order[i]], std::span<T>(grad),
                                  1.0 / static_cast<double>(n_targets), acts);
        batch.sum += s.sum;
        batch.count += s.count;
      }
      const double loss = batch.mean();
      require(std::isfinite(loss), ErrorKind::DivergenceDetected,
              "pretraining loss became non-finite at step " + std::to_string(step));
      const double norm = clip_grad_norm(std::span<T>(grad), cfg.optim.grad_clip);
      const double lr = scheduled_lr(cfg.optim.learning_rate, step, total, cfg.optim.warmup_ratio);
      opt.step(model.weights(), grad, lr);
      if (on_step) on_step({step, epoch, loss, lr, norm});
      ++step;
    }
  }

  ckpt.provenance = {{"stage", "pretrain"},
                     {"steps", step},
                     {"epochs", cfg.epochs},
                     {"batch_size", cfg.batch_size},
                     {"learning_rate", cfg.optim.learning_rate},
                     {"seed", cfg.seed},
                     {"n_examples", examples.size()}};
  return ckpt;
}

}  // namespace cgpo
