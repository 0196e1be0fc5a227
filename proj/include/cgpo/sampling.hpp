#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "tokenizer.hpp"

namespace cgpo {

// Which distribution the recorded confidence is read from.
enum class ConfidenceMode { PostTemperature, PreTemperature };

struct SamplingConfig {
  double temperature = 0.7;
  int max_new_tokens = 192;
  std::uint64_t seed = 0;
  // temperature -> 0 limit: argmax decoding, confidence = max softmax prob.
  bool greedy = false;
  ConfidenceMode confidence_mode = ConfidenceMode::PostTemperature;
};

inline void validate(const SamplingConfig& c) {
  require(c.temperature > 0.0 && std::isfinite(c.temperature), ErrorKind::Config,
          "temperature must be positive");
  require(c.max_new_tokens >= 1, ErrorKind::Config, "max_new_tokens must be >= 1");
}

enum class StopReason { Eos, BelowTauStop, MaxLen };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::Eos: return "EOS";
    case StopReason::BelowTauStop: return "BelowTauStop";
    case StopReason::MaxLen: return "MaxLen";
  }
  return "?";
}

inline StopReason stop_reason_from_string(const std::string& s) {
  if (s == "EOS") return StopReason::Eos;
  if (s == "BelowTauStop") return StopReason::BelowTauStop;
  if (s == "MaxLen") return StopReason::MaxLen;
  fail(ErrorKind::Io, "unknown stop reason: " + s);
}

struct SampledSequence {
  Tokens prompt_tokens;
  Tokens generated_tokens;
  std::vector<double> confidences;  // one per generated token
  StopReason stopped_by = StopReason::MaxLen;
};

struct Draw {
  TokenId token;
  double confidence;
};

/// Draws one token from logits. Greedy picks the lowest-id argmax.
inline Draw draw_token(std::span<const double> logits, const SamplingConfig& cfg, Rng& rng) {
  if (cfg.greedy) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
      if (logits[i] > logits[best]) best = i;
    }
    return {static_cast<TokenId>(best), softmax(logits)[best]};
  }
  const std::vector<double> p = softmax(logits, cfg.temperature);
  const double u = rng.uniform();
  double cum = 0;
  std::size_t pick = p.size() - 1;
  for (std::size_t i = 0; i < p.size(); ++i) {
    cum += p[i];
    if (u < cum) {
      pick = i;
      break;
    }
  }
  // Guard against rounding leaving u >= cum: fall back to the last token with mass.
  while (p[pick] <= 0.0 && pick > 0) --pick;
  const double conf = cfg.confidence_mode == ConfidenceMode::PostTemperature
                          ? p[pick]
                          : softmax(logits)[pick];
  return {static_cast<TokenId>(pick), conf};
}

/// Continues an open decoder for up to max_tokens tokens, stopping at EOS,
/// at the context limit, or when `stop_below` > confidence of a sampled token.
/// Returns the reason generation ended.
inline StopReason continue_sampling(Decoder& dec, const SamplingConfig& cfg, Rng& rng,
                                    int max_tokens, double stop_below, Tokens& out,
                                    std::vector<double>& confidences, int context_len) {
  for (int n = 0; n < max_tokens; ++n) {
    const Draw d = draw_token(dec.logits(), cfg, rng);
    out.push_back(d.token);
    confidences.push_back(d.confidence);
    if (d.token == Tokenizer::kEos) return StopReason::Eos;
    if (d.confidence < stop_below) return StopReason::BelowTauStop;
    if (n + 1 == max_tokens || dec.length() >= context_len) return StopReason::MaxLen;
    dec.append(d.token);
  }
  return StopReason::MaxLen;
}

/// Samples a continuation of `prompt`, recording the confidence of every
/// sampled token. Reproducible for a given (policy, prompt, config).
inline SampledSequence sample(const Policy& policy, std::span<const TokenId> prompt,
                              const SamplingConfig& cfg) {
  validate(cfg);
  SampledSequence seq;
  seq.prompt_tokens.assign(prompt.begin(), prompt.end());
  auto dec = policy.open(prompt);
  Rng rng(cfg.seed);
  seq.stopped_by = continue_sampling(*dec, cfg, rng, cfg.max_new_tokens, 0.0,
                                     seq.generated_tokens, seq.confidences, policy.context_len());
  return seq;
}

/// Teacher-forced probability of each segment token given the context, at
/// the given temperature (1.0 for likelihoods).
inline std::vector<double> teacher_forced_probs(const Policy& policy,
                                                std::span<const TokenId> context,
                                                std::span<const TokenId> segment,
                                                double temperature = 1.0) {
  std::vector<double> out;
  out.reserve(segment.size());
  if (segment.empty()) return out;
  require(context.size() + segment.size() <= static_cast<std::size_t>(policy.context_len()) + 1,
          ErrorKind::ContextOverflow, "context + segment exceeds context_len");
  auto dec = policy.open(context);
  for (std::size_t i = 0; i < segment.size(); ++i) {
    out.push_back(softmax(dec->logits(), temperature)[static_cast<std::size_t>(segment[i])]);
    if (i + 1 < segment.size()) dec->append(segment[i]);
  }
  return out;
}

}  // namespace cgpo
