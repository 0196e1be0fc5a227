#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "error.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "sampling.hpp"
#include "tokenizer.hpp"

namespace cgpo {

struct RewardConfig {
  int n_rollouts = 4;
  double rollout_temperature = 0.7;
  int rollout_max_tokens = 192;
  std::uint64_t seed = 0;
  // Argmax rollouts; with n_rollouts = 1 this gives a deterministic 0/1 score.
  bool greedy = false;
};

inline void validate(const RewardConfig& c) {
  require(c.n_rollouts >= 1, ErrorKind::Config, "n_rollouts must be >= 1");
  require(c.rollout_temperature > 0, ErrorKind::Config, "rollout_temperature must be positive");
  require(c.rollout_max_tokens >= 1, ErrorKind::Config, "rollout_max_tokens must be >= 1");
}

struct CandidateScore {
  TokenId token = 0;
  double logit = 0;
  double score = 0;  // in [0, 1]

  bool operator==(const CandidateScore&) const = default;
};

/// R(x, s_init, v): how promising it is to continue (x, s_init) with token v.
class RewardModel {
 public:
  virtual ~RewardModel() = default;
  virtual double score(const ProblemInstance& problem, std::span<const TokenId> x_tokens,
                       std::span<const TokenId> s_init, TokenId candidate,
                       std::uint64_t stream_seed) const = 0;
};

/// Fraction of sampled continuations of (x, s_init, candidate) whose final
/// answer verifies. Deterministic given config.seed.
inline double mc_reward(const Policy& policy, const ProblemInstance& problem,
                        std::span<const TokenId> x_tokens, std::span<const TokenId> s_init,
                        TokenId candidate, const RewardConfig& cfg) {
  validate(cfg);
  require(candidate >= 0 && candidate < policy.vocab_size(), ErrorKind::Config,
          "candidate token out of range");
  const Tokenizer tok;
  Tokens context(x_tokens.begin(), x_tokens.end());
  context.insert(context.end(), s_init.begin(), s_init.end());
  Tokens prefix(s_init.begin(), s_init.end());
  prefix.push_back(candidate);

  if (candidate == Tokenizer::kEos) {
    // Nothing to roll out: every rollout ends here.
    return verify_answer(problem, tok.completion_text(prefix)) ? 1.0 : 0.0;
  }
  context.push_back(candidate);
  require(context.size() <= static_cast<std::size_t>(policy.context_len()),
          ErrorKind::ContextOverflow, "reward context exceeds context_len");

  SamplingConfig sc;
  sc.temperature = cfg.rollout_temperature;
  sc.greedy = cfg.greedy;
  const auto root = policy.open(context);
  int correct = 0;
  for (int r = 0; r < cfg.n_rollouts; ++r) {
    Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(r)}));
    Tokens completion = prefix;
    std::vector<double> conf;
    auto dec = root->clone();
    continue_sampling(*dec, sc, rng, cfg.rollout_max_tokens, 0.0, completion, conf,
                      policy.context_len());
    if (verify_answer(problem, tok.completion_text(completion))) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(cfg.n_rollouts);
}

/// Monte-Carlo rollout reward backed by a policy (usually pi_0 itself).
class MonteCarloReward final : public RewardModel {
 public:
  MonteCarloReward(const Policy& policy, RewardConfig cfg) : policy_(policy), cfg_(cfg) {
    validate(cfg_);
  }

  double score(const ProblemInstance& problem, std::span<const TokenId> x_tokens,
               std::span<const TokenId> s_init, TokenId candidate,
               std::uint64_t stream_seed) const override {
    RewardConfig c = cfg_;
    c.seed = derive_seed(cfg_.seed, {stream_seed});
    return mc_reward(policy_, problem, x_tokens, s_init, candidate, c);
  }

  const RewardConfig& config() const { return cfg_; }

 private:
  const Policy& policy_;
  RewardConfig cfg_;
};

/// 1 if s_init + candidate is a prefix of the gold solution text, else 0.
/// A cheap heuristic reward for comparisons; it never looks at a policy.
class GoldPrefixReward final : public RewardModel {
 public:
  double score(const ProblemInstance& problem, std::span<const TokenId>,
               std::span<const TokenId> s_init, TokenId candidate,
               std::uint64_t) const override {
    Tokens prefix(s_init.begin(), s_init.end());
    prefix.push_back(candidate);
    const Tokens gold = solution_tokens(problem);
    if (prefix.size() > gold.size()) return 0.0;
    return std::equal(prefix.begin(), prefix.end(), gold.begin()) ? 1.0 : 0.0;
  }
};

/// Scores each candidate on its own substream derived from (stream_seed,
/// candidate index); output order follows input order.
inline std::vector<CandidateScore> score_candidates(
    const RewardModel& reward, const ProblemInstance& problem, std::span<const TokenId> x_tokens,
    std::span<const TokenId> s_init, std::span<const std::pair<TokenId, double>> candidates,
    std::uint64_t stream_seed) {
  require(!candidates.empty(), ErrorKind::Config, "no candidates to score");
  std::vector<CandidateScore> out;
  out.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto [token, logit] = candidates[i];
    const double s = reward.score(problem, x_tokens, s_init, token,
                                  derive_seed(stream_seed, {static_cast<std::uint64_t>(i)}));
    out.push_back({token, logit, s});
  }
  return out;
}

}  // namespace cgpo
