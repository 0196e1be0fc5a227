#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "confidence.hpp"
#include "corpus.hpp"
#include "error.hpp"
#include "model.hpp"
#include "pairs.hpp"
#include "reward.hpp"
#include "sampling.hpp"
#include "tokenizer.hpp"
#include "trainer.hpp"

namespace cgpo {

struct EvalReport {
  std::size_t n_problems = 0;
  std::size_t n_correct = 0;
  double accuracy = 0;
  std::string decode_mode = "Greedy";
  std::string model_id;
};

struct EvalOptions {
  int max_new_tokens = 192;
  int workers = 1;
};

/// Greedy decodes every problem and returns the sampled sequences in input
/// order.
inline std::vector<SampledSequence> greedy_samples(const Policy& policy,
                                                   std::span<const ProblemInstance> problems,
                                                   const EvalOptions& opt = {}) {
  SamplingConfig sc;
  sc.greedy = true;
  sc.max_new_tokens = opt.max_new_tokens;
  std::vector<SampledSequence> out(problems.size());
  parallel_for(problems.size(), opt.workers, [&](std::size_t i) {
    const Tokens x = prompt_tokens(problems[i]);
    require(x.size() <= static_cast<std::size_t>(policy.context_len()), ErrorKind::ContextOverflow,
            "prompt longer than context_len: " + problems[i].expression);
    out[i] = sample(policy, x, sc);
  });
  return out;
}

/// One temperature sample per problem; sample i draws from derive(seed, {i}).
inline std::vector<SampledSequence> sample_problems(const Policy& policy,
                                                    std::span<const ProblemInstance> problems,
                                                    const SamplingConfig& cfg, int workers = 1) {
  std::vector<SampledSequence> out(problems.size());
  parallel_for(problems.size(), workers, [&](std::size_t i) {
    SamplingConfig sc = cfg;
    sc.seed = derive_seed(cfg.seed, {i});
    out[i] = sample(policy, prompt_tokens(problems[i]), sc);
  });
  return out;
}

/// Pooled per-token confidences of one sample per prompt: the calibration set
/// for the step and stop thresholds.
inline std::vector<double> collect_confidences(const Policy& policy,
                                               std::span<const ProblemInstance> prompts,
                                               const SamplingConfig& cfg, int workers = 1) {
  std::vector<double> pooled;
  for (const auto& s : sample_problems(policy, prompts, cfg, workers))
    pooled.insert(pooled.end(), s.confidences.begin(), s.confidences.end());
  return pooled;
}

inline EvalReport evaluate_accuracy(const Policy& policy, std::span<const ProblemInstance> problems,
                                    const std::string& model_id = "", const EvalOptions& opt = {}) {
  require(!problems.empty(), ErrorKind::Config, "eval set is empty");
  const auto samples = greedy_samples(policy, problems, opt);
  const Tokenizer tok;
  EvalReport r;
  r.n_problems = problems.size();
  r.model_id = model_id;
  for (std::size_t i = 0; i < problems.size(); ++i)
    if (verify_answer(problems[i], tok.completion_text(samples[i].generated_tokens))) ++r.n_correct;
  r.accuracy = static_cast<double>(r.n_correct) / static_cast<double>(r.n_problems);
  return r;
}

template <class T>
EvalReport evaluate_accuracy(const BasicCheckpoint<T>& ckpt, std::span<const ProblemInstance> problems,
                             const EvalOptions& opt = {}) {
  return evaluate_accuracy(ckpt.model, problems, ckpt.model_id(), opt);
}

/// The trainer's Delta quantities without any weight update.
template <class T>
BatchStats preference_margin(const BasicCheckpoint<T>& policy, const BasicCheckpoint<T>& reference,
                             std::span<const PreferenceTriplet> triplets, double beta = 0.4,
                             int workers = 1) {
  require(!triplets.empty(), ErrorKind::Config, "no triplets");
  require_same_tokenizer(policy.tokenizer_fingerprint, reference.tokenizer_fingerprint);
  const auto lp = pair_logprobs(policy.model, triplets, workers);
  const auto ref = pair_logprobs(reference.model, triplets, workers);
  return batch_stats(lp, ref, beta);
}

// ---------------------------------------------------------------------------

struct PositionalReport {
  std::size_t n_incorrect_samples = 0;
  std::size_t before = 0;
  std::size_t same = 0;
  std::size_t after = 0;
  // "before" samples whose minimum still lies on the erroneous line. Errors
  // are located at line starts, so a wrong digit late in the line lands here.
  std::size_t before_same_line = 0;

  // Two-bucket view: ties count as "after".
  std::size_t merged_after() const { return same + after; }
  double after_fraction() const { return share(merged_after()); }
  // The same view at line granularity.
  std::size_t line_after() const { return merged_after() + before_same_line; }
  double line_after_fraction() const { return share(line_after()); }

 private:
  double share(std::size_t n) const {
    return n_incorrect_samples ? static_cast<double>(n) / static_cast<double>(n_incorrect_samples) : 0.0;
  }
};

/// Where the first wrong line starts relative to the least confident token,
/// over samples that fail verification and have a locatable error.
inline PositionalReport positional_stats(std::span<const SampledSequence> samples,
                                         std::span<const ProblemInstance> problems) {
  require(samples.size() == problems.size(), ErrorKind::Config,
          "every sample needs its problem");
  const Tokenizer tok;
  PositionalReport r;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.generated_tokens.empty()) continue;
    if (verify_answer(problems[i], tok.completion_text(s.generated_tokens))) continue;
    const auto err = first_error_index(problems[i], s.generated_tokens, tok);
    if (!err) continue;
    const std::size_t low = min_confidence_index(s.confidences);
    ++r.n_incorrect_samples;
    if (*err < low) {
      ++r.before;
      const auto first = s.generated_tokens.begin();
      if (std::find(first + static_cast<std::ptrdiff_t>(*err), first + static_cast<std::ptrdiff_t>(low),
                    tok.token_of('\n')) == first + static_cast<std::ptrdiff_t>(low))
        ++r.before_same_line;
    } else if (*err == low) ++r.same;
    else ++r.after;
  }
  return r;
}

inline double avg_tokens_per_pair(std::span<const PreferenceTriplet> triplets) {
  require(!triplets.empty(), ErrorKind::Config, "dataset is empty");
  double total = 0;
  for (const auto& t : triplets)
    total += static_cast<double>(t.chosen_tokens.size() + t.rejected_tokens.size());
  return total / static_cast<double>(triplets.size());
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepSetup {
  PairBuilderConfig builder;
  TrainConfig train;
  EvalOptions eval;
  bool run_training = true;
};

struct ThresholdRow {
  double q_stop = 0;
  double tau_stop = 0;
  std::size_t n_triplets = 0;
  double avg_tokens_per_pair = 0;
  double accuracy = std::numeric_limits<double>::quiet_NaN();
};

/// Rebuilds the dataset for each q_stop from the same seeds (and retrains
/// when setup.run_training is set). `calibration` holds the confidence
/// values the stop thresholds are drawn from.
template <class T>
std::vector<ThresholdRow> threshold_sweep(const BasicCheckpoint<T>& initial, const RewardModel& reward,
                                          std::span<const ProblemInstance> prompts,
                                          std::span<const ProblemInstance> eval_problems,
                                          std::span<const double> calibration,
                                          std::span<const double> q_stops, const SweepSetup& setup) {
  require(q_stops.size() >= 2, ErrorKind::Config, "threshold sweep needs >= 2 values");
  std::vector<ThresholdRow> rows;
  for (double q : q_stops) {
    PairBuilderConfig bc = setup.builder;
    bc.thresholds.q_stop = q;
    bc.thresholds.tau_stop = calibrate_threshold(calibration, q);
    const PairDataset ds = build_dataset(initial.model, reward, prompts, bc);
    ThresholdRow row{q, bc.thresholds.tau_stop, ds.triplets.size()};
    if (!ds.triplets.empty()) row.avg_tokens_per_pair = avg_tokens_per_pair(ds.triplets);
    if (setup.run_training && !ds.triplets.empty()) {
      const auto trained = train(initial, std::span<const PreferenceTriplet>(ds.triplets), setup.train);
      row.accuracy = evaluate_accuracy(trained, eval_problems, setup.eval).accuracy;
    }
    rows.push_back(row);
  }
  return rows;
}

struct ScalingRow {
  int m = 1;
  std::size_t n_triplets = 0;
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double mean_delta_theta = std::numeric_limits<double>::quiet_NaN();
};

/// Builds at each m from one base seed, trains, and measures accuracy plus
/// mean Delta_theta on the held-out triplets.
template <class T>
std::vector<ScalingRow> scaling_sweep(const BasicCheckpoint<T>& initial, const RewardModel& reward,
                                      std::span<const ProblemInstance> prompts,
                                      std::span<const ProblemInstance> eval_problems,
                                      std::span<const PreferenceTriplet> heldout,
                                      std::span<const int> ms, const SweepSetup& setup) {
  require(!ms.empty(), ErrorKind::Config, "scaling sweep needs m values");
  std::vector<ScalingRow> rows;
  for (int m : ms) {
    require(m >= 1, ErrorKind::Config, "m must be >= 1");
    PairBuilderConfig bc = setup.builder;
    bc.samples_per_prompt = m;
    const PairDataset ds = build_dataset(initial.model, reward, prompts, bc);
    ScalingRow row{m, ds.triplets.size()};
    if (setup.run_training && !ds.triplets.empty()) {
      const auto trained = train(initial, std::span<const PreferenceTriplet>(ds.triplets), setup.train);
      if (!eval_problems.empty())
        row.accuracy = evaluate_accuracy(trained, eval_problems, setup.eval).accuracy;
      if (!heldout.empty())
        row.mean_delta_theta =
            preference_margin(trained, initial, heldout, setup.train.beta).mean_delta_theta;
    }
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report output

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  return {{"n_problems", r.n_problems}, {"n_correct", r.n_correct}, {"accuracy", r.accuracy},
          {"decode_mode", r.decode_mode}, {"model_id", r.model_id}};
}

inline nlohmann::ordered_json to_json(const PositionalReport& r) {
  return {{"n_incorrect_samples", r.n_incorrect_samples},
          {"before", r.before},
          {"same", r.same},
          {"after", r.after},
          {"two_bucket", {{"before", r.before}, {"after", r.merged_after()}}},
          {"after_fraction", r.after_fraction()},
          {"before_same_line", r.before_same_line},
          {"line_after_fraction", r.line_after_fraction()}};
}

inline nlohmann::ordered_json to_json(const BatchStats& s) {
  return {{"loss", s.loss},
          {"mean_delta_theta", s.mean_delta_theta},
          {"mean_delta", s.mean_delta},
          {"margin_accuracy", s.margin_accuracy}};
}

// NaN has no JSON spelling; unmeasured cells become null.
inline nlohmann::json json_number(double v) {
  return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v);
}

inline nlohmann::ordered_json to_json(const ThresholdRow& r) {
  return {{"q_stop", r.q_stop},
          {"tau_stop", r.tau_stop},
          {"n_triplets", r.n_triplets},
          {"avg_tokens_per_pair", r.avg_tokens_per_pair},
          {"accuracy", json_number(r.accuracy)}};
}

inline nlohmann::ordered_json to_json(const ScalingRow& r) {
  return {{"m", r.m},
          {"n_triplets", r.n_triplets},
          {"accuracy", json_number(r.accuracy)},
          {"mean_delta_theta", json_number(r.mean_delta_theta)}};
}

using TableRows = std::vector<std::vector<std::string>>;

inline std::string fmt(double v, int precision = 4) {
  if (std::isnan(v)) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

/// Left-aligned plain-text table, two spaces between columns.
inline std::string text_table(const std::vector<std::string>& header, const TableRows& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c)
      width[c] = std::max(width[c], r[c].size());
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      s += cells[c];
      if (c + 1 < cells.size()) s += std::string(width[c] - cells[c].size() + 2, ' ');
    }
    os << s << '\n';
  };
  line(header);
  std::vector<std::string> rule;
  for (auto w : width) rule.emplace_back(w, '-');
  line(rule);
  for (const auto& r : rows) line(r);
  return os.str();
}

inline std::string csv(const std::vector<std::string>& header, const TableRows& rows) {
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) os << (c ? "," : "") << cells[c];
    os << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return os.str();
}

inline const std::vector<std::string>& threshold_header() {
  static const std::vector<std::string> h{"q_stop", "tau_stop", "n_triplets", "avg_tokens_per_pair",
                                          "accuracy"};
  return h;
}

inline TableRows table_rows(const std::vector<ThresholdRow>& rows) {
  TableRows out;
  for (const auto& r : rows)
    out.push_back({fmt(r.q_stop, 3), fmt(r.tau_stop, 6), std::to_string(r.n_triplets),
                   fmt(r.avg_tokens_per_pair, 3), fmt(r.accuracy)});
  return out;
}

inline const std::vector<std::string>& scaling_header() {
  static const std::vector<std::string> h{"m", "n_triplets", "accuracy", "mean_delta_theta"};
  return h;
}

inline TableRows table_rows(const std::vector<ScalingRow>& rows) {
  TableRows out;
  for (const auto& r : rows)
    out.push_back({std::to_string(r.m), std::to_string(r.n_triplets), fmt(r.accuracy),
                   fmt(r.mean_delta_theta)});
  return out;
}

/// Before/after layout with the tie bucket shown separately and merged.
inline std::string positional_table(const PositionalReport& r) {
  const auto pct = [&](std::size_t n) {
    return r.n_incorrect_samples
               ? fmt(100.0 * static_cast<double>(n) / static_cast<double>(r.n_incorrect_samples), 1) + "%"
               : std::string("-");
  };
  TableRows rows{{"before", std::to_string(r.before), pct(r.before)},
                 {"same", std::to_string(r.same), pct(r.same)},
                 {"after", std::to_string(r.after), pct(r.after)},
                 {"after (incl. same)", std::to_string(r.merged_after()), pct(r.merged_after())},
                 {"total", std::to_string(r.n_incorrect_samples), "100.0%"},
                 {"before, minimum on the error line", std::to_string(r.before_same_line),
                  pct(r.before_same_line)},
                 {"after at line granularity", std::to_string(r.line_after()), pct(r.line_after())}};
  return text_table({"first error vs lowest confidence", "count", "share"}, rows);
}

}  // namespace cgpo
