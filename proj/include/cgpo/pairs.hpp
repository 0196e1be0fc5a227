#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "confidence.hpp"
#include "corpus.hpp"
#include "error.hpp"
#include "model.hpp"
#include "reward.hpp"
#include "rng.hpp"
#include "sampling.hpp"
#include "tokenizer.hpp"

namespace cgpo {

struct PairBuilderConfig {
  int k = 8;
  Thresholds thresholds;
  SamplingConfig sampling;
  int samples_per_prompt = 1;  // m
  int max_branch_tokens = 192;
  double min_score_gap = 0.0;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string model_id;
};

inline void validate(const PairBuilderConfig& c) {
  require(c.k >= 2, ErrorKind::Config, "k must be >= 2");
  require(c.samples_per_prompt >= 1, ErrorKind::Config, "samples_per_prompt must be >= 1");
  require(c.max_branch_tokens >= 1, ErrorKind::Config, "max_branch_tokens must be >= 1");
  require(c.min_score_gap >= 0, ErrorKind::Config, "min_score_gap must be >= 0");
  require(c.workers >= 1, ErrorKind::Config, "workers must be >= 1");
  validate(c.sampling);
}

struct PreferenceTriplet {
  std::string prompt;
  Tokens prompt_tokens;
  Tokens s_init_tokens;
  Tokens chosen_tokens;
  Tokens rejected_tokens;
  double chosen_score = 0;
  double rejected_score = 0;
  std::size_t branch_index = 0;
  StopReason stop_chosen = StopReason::Eos;
  StopReason stop_rejected = StopReason::Eos;
  std::string model_id;
  double tau_split = 0;
  double tau_stop = 0;
  std::uint64_t seed = 0;

  bool operator==(const PreferenceTriplet&) const = default;

  /// Conditioning context for both segments: prompt followed by s_init.
  Tokens context() const {
    Tokens c = prompt_tokens;
    c.insert(c.end(), s_init_tokens.begin(), s_init_tokens.end());
    return c;
  }
};

enum class SkipReason { ScoreTie, IdenticalSegments, EmptyGeneration };

inline const char* to_string(SkipReason r) {
  switch (r) {
    case SkipReason::ScoreTie: return "ScoreTie";
    case SkipReason::IdenticalSegments: return "IdenticalSegments";
    case SkipReason::EmptyGeneration: return "EmptyGeneration";
  }
  return "?";
}

struct BuildReport {
  std::size_t n_prompts = 0;
  int samples_per_prompt = 1;
  std::size_t n_built = 0;
  std::map<std::string, std::size_t> skip_counts{
      {"ScoreTie", 0}, {"IdenticalSegments", 0}, {"EmptyGeneration", 0}};

  std::size_t total_skips() const {
    std::size_t s = 0;
    for (const auto& [_, n] : skip_counts) s += n;
    return s;
  }
};

struct PairDataset {
  std::vector<PreferenceTriplet> triplets;
  BuildReport report;
};

// ---------------------------------------------------------------------------

/// The k highest-logit next tokens after (x, s_init), by descending logit
/// with ties broken by ascending token id.
inline std::vector<std::pair<TokenId, double>> top_k_from_logits(std::span<const double> logits,
                                                                 int k) {
  require(k >= 1 && k <= static_cast<int>(logits.size()), ErrorKind::Config,
          "k must be in [1, vocab_size]");
  std::vector<std::pair<TokenId, double>> all;
  all.reserve(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) all.emplace_back(static_cast<TokenId>(i), logits[i]);
  std::stable_sort(all.begin(), all.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  all.resize(static_cast<std::size_t>(k));
  return all;
}

inline std::vector<std::pair<TokenId, double>> top_k_candidates(const Policy& policy,
                                                                std::span<const TokenId> x_tokens,
                                                                std::span<const TokenId> s_init,
                                                                int k) {
  Tokens context(x_tokens.begin(), x_tokens.end());
  context.insert(context.end(), s_init.begin(), s_init.end());
  auto dec = policy.open(context);
  return top_k_from_logits(dec->logits(), k);
}

/// Indices of (y+, y-): highest score (ties: higher logit) and lowest score
/// (ties: lower logit). Empty when max - min <= min_score_gap.
inline std::optional<std::pair<std::size_t, std::size_t>> select_pair(
    std::span<const CandidateScore> scores, double min_score_gap) {
  require(scores.size() >= 2, ErrorKind::Config, "select_pair needs at least two candidates");
  std::size_t best = 0, worst = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    const auto& c = scores[i];
    if (c.score > scores[best].score ||
        (c.score == scores[best].score && c.logit > scores[best].logit))
      best = i;
    if (c.score < scores[worst].score ||
        (c.score == scores[worst].score && c.logit < scores[worst].logit))
      worst = i;
  }
  if (scores[best].score - scores[worst].score <= min_score_gap) return std::nullopt;
  return std::make_pair(best, worst);
}

struct Branch {
  Tokens segment;                    // first token is the forced branch token
  std::vector<double> confidences;   // one per segment token; [0] is the forced token's probability
  StopReason stop_reason = StopReason::MaxLen;
};

/// Forces `first_token`, then samples until EOS (kept), a sampled token with
/// confidence < tau_stop (kept), or max_branch_tokens in total. The forced
/// token never triggers the confidence stop.
inline Branch rollout_branch(const Policy& policy, std::span<const TokenId> x_tokens,
                             std::span<const TokenId> s_init, TokenId first_token,
                             const Thresholds& thresholds, const SamplingConfig& sampling,
                             int max_branch_tokens) {
  require(first_token >= 0 && first_token < policy.vocab_size(), ErrorKind::Config,
          "branch token out of range");
  require(max_branch_tokens >= 1, ErrorKind::Config, "max_branch_tokens must be >= 1");
  Tokens context(x_tokens.begin(), x_tokens.end());
  context.insert(context.end(), s_init.begin(), s_init.end());
  auto dec = policy.open(context);

  Branch b;
  const std::vector<double> p = sampling.greedy ? softmax(dec->logits())
                                                : softmax(dec->logits(), sampling.temperature);
  b.segment.push_back(first_token);
  b.confidences.push_back(p[static_cast<std::size_t>(first_token)]);
  if (first_token == Tokenizer::kEos) {
    b.stop_reason = StopReason::Eos;
    return b;
  }
  if (max_branch_tokens == 1 || dec->length() >= policy.context_len()) {
    b.stop_reason = StopReason::MaxLen;
    return b;
  }
  dec->append(first_token);
  Rng rng(sampling.seed);
  b.stop_reason = continue_sampling(*dec, sampling, rng, max_branch_tokens - 1, thresholds.tau_stop,
                                    b.segment, b.confidences, policy.context_len());
  return b;
}

struct TripletOutcome {
  std::optional<PreferenceTriplet> triplet;
  std::optional<SkipReason> skip;
  SampledSequence sample;
  std::vector<CandidateScore> scores;
};

/// One pass of pair construction for a single sampled output of one prompt.
inline TripletOutcome build_triplet(const Policy& policy, const RewardModel& reward,
                                    const ProblemInstance& problem,
                                    std::span<const TokenId> x_tokens,
                                    const PairBuilderConfig& cfg, std::uint64_t sample_seed) {
  TripletOutcome out;
  SamplingConfig sc = cfg.sampling;
  sc.seed = derive_seed(sample_seed, {1});
  out.sample = sample(policy, x_tokens, sc);
  const auto& y = out.sample.generated_tokens;
  if (y.empty()) {
    out.skip = SkipReason::EmptyGeneration;
    return out;
  }

  // The minimum-confidence token heads the most uncertain step; s_init stops
  // just before it and the branch candidates replace it.
  const std::size_t branch = min_confidence_index(out.sample.confidences);
  const std::span<const TokenId> s_init(y.data(), branch);

  const auto candidates = top_k_candidates(policy, x_tokens, s_init, cfg.k);
  out.scores = score_candidates(reward, problem, x_tokens, s_init, candidates,
                                derive_seed(sample_seed, {2}));
  const auto picked = select_pair(out.scores, cfg.min_score_gap);
  if (!picked) {
    out.skip = SkipReason::ScoreTie;
    return out;
  }
  const auto& chosen = out.scores[picked->first];
  const auto& rejected = out.scores[picked->second];

  SamplingConfig chosen_sc = cfg.sampling, rejected_sc = cfg.sampling;
  chosen_sc.seed = derive_seed(sample_seed, {3});
  rejected_sc.seed = derive_seed(sample_seed, {4});
  Branch pos = rollout_branch(policy, x_tokens, s_init, chosen.token, cfg.thresholds, chosen_sc,
                              cfg.max_branch_tokens);
  Branch neg = rollout_branch(policy, x_tokens, s_init, rejected.token, cfg.thresholds,
                              rejected_sc, cfg.max_branch_tokens);
  if (pos.segment == neg.segment) {
    out.skip = SkipReason::IdenticalSegments;
    return out;
  }

  PreferenceTriplet t;
  t.prompt = problem.expression;
  t.prompt_tokens.assign(x_tokens.begin(), x_tokens.end());
  t.s_init_tokens.assign(s_init.begin(), s_init.end());
  t.chosen_tokens = std::move(pos.segment);
  t.rejected_tokens = std::move(neg.segment);
  t.chosen_score = chosen.score;
  t.rejected_score = rejected.score;
  t.branch_index = branch;
  t.stop_chosen = pos.stop_reason;
  t.stop_rejected = neg.stop_reason;
  t.model_id = cfg.model_id;
  t.tau_split = cfg.thresholds.tau_split;
  t.tau_stop = cfg.thresholds.tau_stop;
  t.seed = sample_seed;
  out.triplet = std::move(t);
  return out;
}

/// Runs fn(i) for i in [0, n) on `workers` threads. Each index is handled by
/// exactly one thread; the first exception is rethrown after all joins.
template <class Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  for (std::size_t w = 0; w < n_threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// m samples per prompt, each yielding at most one triplet. Randomness comes
/// from (seed, prompt index, sample index) only, so the output is the same for
/// any worker count.
inline PairDataset build_dataset(const Policy& policy, const RewardModel& reward,
                                 std::span<const ProblemInstance> prompts,
                                 const PairBuilderConfig& cfg) {
  validate(cfg);
  require(!prompts.empty(), ErrorKind::Config, "no prompts to build pairs from");
  const auto m = static_cast<std::size_t>(cfg.samples_per_prompt);
  const std::size_t n_items = prompts.size() * m;
  std::vector<TripletOutcome> outcomes(n_items);
  parallel_for(n_items, cfg.workers, [&](std::size_t item) {
    const std::size_t p = item / m, s = item % m;
    const Tokens x = prompt_tokens(prompts[p]);
    const std::uint64_t seed = derive_seed(cfg.seed, {p, s});
    TripletOutcome o = build_triplet(policy, reward, prompts[p], x, cfg, seed);
    o.sample = {};  // keep memory bounded
    outcomes[item] = std::move(o);
  });

  PairDataset ds;
  ds.report.n_prompts = prompts.size();
  ds.report.samples_per_prompt = cfg.samples_per_prompt;
  for (auto& o : outcomes) {
    if (o.triplet) {
      ds.triplets.push_back(std::move(*o.triplet));
    } else {
      ds.report.skip_counts[to_string(*o.skip)] += 1;
    }
  }
  ds.report.n_built = ds.triplets.size();
  return ds;
}

// ---------------------------------------------------------------------------
// Resegmentation of externally produced step-wise pairs.

struct ExternalPair {
  std::string prompt;
  std::string init_text;
  std::string chosen_text;
  std::string rejected_text;
};

namespace detail {

// Keeps tokens up to and including the first one (after the first) whose
// probability is below tau; mirrors the branch rollout stop rule.
inline std::pair<Tokens, StopReason> truncate_below(const Tokens& seg,
                                                    const std::vector<double>& probs, double tau) {
  for (std::size_t i = 1; i < seg.size(); ++i) {
    if (probs[i] < tau) {
      return {Tokens(seg.begin(), seg.begin() + static_cast<std::ptrdiff_t>(i + 1)),
              StopReason::BelowTauStop};
    }
  }
  const StopReason r = !seg.empty() && seg.back() == Tokenizer::kEos ? StopReason::Eos
                                                                      : StopReason::MaxLen;
  return {seg, r};
}

}  // namespace detail

/// Re-cuts human-segmented pairs at the policy's own confidence points: the
/// initial step is truncated before its lowest-probability token, and each
/// continuation stops after its first below-tau_stop token. Probabilities are
/// teacher-forced under the policy at the sampling temperature.
inline std::vector<PreferenceTriplet> resegment_external_pairs(
    const Policy& policy, std::span<const ExternalPair> pairs, const Thresholds& thresholds,
    const SamplingConfig& sampling, const std::string& model_id = {}) {
  const Tokenizer tok;
  const double temperature = sampling.greedy ? 1.0 : sampling.temperature;
  std::vector<PreferenceTriplet> out;
  out.reserve(pairs.size());
  for (const auto& ep : pairs) {
    PreferenceTriplet t;
    t.prompt = ep.prompt;
    t.prompt_tokens = {Tokenizer::kBos};
    const Tokens body = tok.tokenize(ep.prompt);
    t.prompt_tokens.insert(t.prompt_tokens.end(), body.begin(), body.end());
    t.prompt_tokens.push_back(Tokenizer::kSep);

    const Tokens init = tok.tokenize(ep.init_text);
    Tokens context = t.prompt_tokens;
    if (!init.empty()) {
      const auto probs = teacher_forced_probs(policy, t.prompt_tokens, init, temperature);
      t.branch_index = min_confidence_index(probs);
      t.s_init_tokens.assign(init.begin(), init.begin() + static_cast<std::ptrdiff_t>(t.branch_index));
      context.insert(context.end(), init.begin(), init.end());
    }

    auto cut = [&](const std::string& text) {
      const Tokens seg = tok.tokenize(text);
      require(!seg.empty(), ErrorKind::EmptySegment, "external pair has an empty continuation");
      const auto probs = teacher_forced_probs(policy, context, seg, temperature);
      return detail::truncate_below(seg, probs, thresholds.tau_stop);
    };
    std::tie(t.chosen_tokens, t.stop_chosen) = cut(ep.chosen_text);
    std::tie(t.rejected_tokens, t.stop_rejected) = cut(ep.rejected_text);
    t.chosen_score = 1.0;
    t.rejected_score = 0.0;
    t.model_id = model_id;
    t.tau_split = thresholds.tau_split;
    t.tau_stop = thresholds.tau_stop;
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::ordered_json to_json(const PreferenceTriplet& t) {
  nlohmann::ordered_json j;
  j["prompt"] = t.prompt;
  j["prompt_tokens"] = t.prompt_tokens;
  j["s_init_tokens"] = t.s_init_tokens;
  j["chosen_tokens"] = t.chosen_tokens;
  j["rejected_tokens"] = t.rejected_tokens;
  j["chosen_score"] = t.chosen_score;
  j["rejected_score"] = t.rejected_score;
  j["branch_index"] = t.branch_index;
  j["stop_chosen"] = to_string(t.stop_chosen);
  j["stop_rejected"] = to_string(t.stop_rejected);
  j["model_id"] = t.model_id;
  j["tau_split"] = t.tau_split;
  j["tau_stop"] = t.tau_stop;
  j["seed"] = t.seed;
  return j;
}

inline PreferenceTriplet triplet_from_json(const nlohmann::json& j) {
  PreferenceTriplet t;
  t.prompt = j.at("prompt").get<std::string>();
  t.prompt_tokens = j.at("prompt_tokens").get<Tokens>();
  t.s_init_tokens = j.at("s_init_tokens").get<Tokens>();
  t.chosen_tokens = j.at("chosen_tokens").get<Tokens>();
  t.rejected_tokens = j.at("rejected_tokens").get<Tokens>();
  t.chosen_score = j.at("chosen_score").get<double>();
  t.rejected_score = j.at("rejected_score").get<double>();
  t.branch_index = j.at("branch_index").get<std::size_t>();
  t.stop_chosen = stop_reason_from_string(j.at("stop_chosen").get<std::string>());
  t.stop_rejected = stop_reason_from_string(j.at("stop_rejected").get<std::string>());
  t.model_id = j.at("model_id").get<std::string>();
  t.tau_split = j.at("tau_split").get<double>();
  t.tau_stop = j.at("tau_stop").get<double>();
  t.seed = j.at("seed").get<std::uint64_t>();
  return t;
}

inline void write_triplets(const std::filesystem::path& path,
                           std::span<const PreferenceTriplet> triplets) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::Io, "cannot open for writing: " + path.string());
  for (const auto& t : triplets) out << to_json(t).dump() << '\n';
  out.flush();
  require(out.good(), ErrorKind::Io, "write failed: " + path.string());
}

inline std::vector<PreferenceTriplet> read_triplets(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open: " + path.string());
  std::vector<PreferenceTriplet> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(triplet_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Io, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline nlohmann::ordered_json to_json(const BuildReport& r) {
  nlohmann::ordered_json j;
  j["n_prompts"] = r.n_prompts;
  j["samples_per_prompt"] = r.samples_per_prompt;
  j["n_built"] = r.n_built;
  j["skip_counts"] = r.skip_counts;
  return j;
}

inline BuildReport build_report_from_json(const nlohmann::json& j) {
  BuildReport r;
  r.n_prompts = j.at("n_prompts").get<std::size_t>();
  r.samples_per_prompt = j.at("samples_per_prompt").get<int>();
  r.n_built = j.at("n_built").get<std::size_t>();
  r.skip_counts = j.at("skip_counts").get<std::map<std::string, std::size_t>>();
  return r;
}

inline std::vector<ExternalPair> read_external_pairs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open: " + path.string());
  std::vector<ExternalPair> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("prompt").get<std::string>(), j.at("initial").get<std::string>(),
                     j.at("chosen").get<std::string>(), j.at("rejected").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Io, path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cgpo
