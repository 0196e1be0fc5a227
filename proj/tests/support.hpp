#pragma once

// Hand-written policies for exercising the pipeline without a trained model.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "cgpo/cgpo.hpp"

namespace cgpo::testing {

using LogitFn = std::function<std::vector<double>(std::span<const TokenId> context)>;

class FnDecoder final : public Decoder {
 public:
  FnDecoder(const LogitFn* fn, Tokens context) : fn_(fn), ctx_(std::move(context)) { refresh(); }
  std::span<const double> logits() const override { return logits_; }
  void append(TokenId t) override {
    ctx_.push_back(t);
    refresh();
  }
  int length() const override { return static_cast<int>(ctx_.size()); }
  std::unique_ptr<Decoder> clone() const override { return std::make_unique<FnDecoder>(*this); }

 private:
  void refresh() { logits_ = (*fn_)(ctx_); }
  const LogitFn* fn_;
  Tokens ctx_;
  std::vector<double> logits_;
};

/// Logits are an arbitrary function of the full context.
class FnPolicy final : public Policy {
 public:
  FnPolicy(LogitFn fn, int vocab = Tokenizer{}.vocab_size(), int context_len = 256)
      : fn_(std::move(fn)), vocab_(vocab), ctx_len_(context_len) {}
  std::unique_ptr<Decoder> open(std::span<const TokenId> context) const override {
    return std::make_unique<FnDecoder>(&fn_, Tokens(context.begin(), context.end()));
  }
  int vocab_size() const override { return vocab_; }
  int context_len() const override { return ctx_len_; }

 private:
  LogitFn fn_;
  int vocab_, ctx_len_;
};

inline std::vector<double> peaked(TokenId target, double height = 60.0, int vocab = Tokenizer{}.vocab_size()) {
  std::vector<double> l(static_cast<std::size_t>(vocab), 0.0);
  l[static_cast<std::size_t>(target)] = height;
  return l;
}

/// Splits "BOS expr SEP generated..." into the problem and the generated part.
inline std::pair<ProblemInstance, Tokens> split_context(std::span<const TokenId> ctx) {
  const Tokenizer tok;
  std::size_t sep = 0;
  while (sep < ctx.size() && ctx[sep] != Tokenizer::kSep) ++sep;
  const std::string expr = tok.completion_text(ctx.subspan(1, sep - 1));
  return {parse_problem(expr), Tokens(ctx.begin() + static_cast<std::ptrdiff_t>(std::min(sep + 1, ctx.size())), ctx.end())};
}

/// Continues the gold solution while the generated text is a prefix of it;
/// once it has diverged, emits `fallback` tokens (EOS by default).
inline FnPolicy oracle_policy(TokenId fallback = Tokenizer::kEos) {
  return FnPolicy([fallback](std::span<const TokenId> ctx) {
    const auto [problem, generated] = split_context(ctx);
    const Tokens gold = solution_tokens(problem);
    const bool on_track = generated.size() < gold.size() &&
                          std::equal(generated.begin(), generated.end(), gold.begin());
    return peaked(on_track ? gold[generated.size()] : fallback);
  });
}

/// Stops immediately: every completion is empty.
inline FnPolicy silent_policy() {
  return FnPolicy([](std::span<const TokenId>) { return peaked(Tokenizer::kEos); });
}

// Scores depend only on token ids, so pairs exist even for an untrained model.
class IdReward final : public RewardModel {
 public:
  double score(const ProblemInstance&, std::span<const TokenId>, std::span<const TokenId> s_init,
               TokenId candidate, std::uint64_t) const override {
    return static_cast<double>((candidate + static_cast<TokenId>(s_init.size())) % 3) / 2.0;
  }
};

inline ModelConfig tiny_config(int n_layers = 1, int d_model = 16, int context_len = 64,
                               std::uint64_t seed = 3) {
  ModelConfig c;
  c.n_layers = n_layers;
  c.n_heads = 2;
  c.d_model = d_model;
  c.d_ff = 2 * d_model;
  c.context_len = context_len;
  c.seed = seed;
  return c;
}

inline std::vector<ProblemInstance> small_problems(std::size_t n, std::uint64_t seed = 7,
                                                   std::string ops = "+-", int max_ops = 2) {
  CorpusConfig cc;
  cc.n_train = static_cast<std::int64_t>(n);
  cc.n_eval = 1;
  cc.ops = std::move(ops);
  cc.n_ops_hi = max_ops;
  cc.seed = seed;
  return generate_corpus(cc).train;
}

}  // namespace cgpo::testing
