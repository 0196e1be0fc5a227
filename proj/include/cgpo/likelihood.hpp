#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "error.hpp"
#include "model.hpp"
#include "tokenizer.hpp"

namespace cgpo {

struct SegmentLogprob {
  std::vector<double> per_token;
  double sum = 0;
};

namespace detail {

inline Tokens joined_input(std::span<const TokenId> context, std::span<const TokenId> segment,
                           int context_len) {
  require(!segment.empty(), ErrorKind::EmptySegment, "segment must be nonempty");
  require(!context.empty(), ErrorKind::Config, "context must be nonempty");
  // The last segment token is scored but never fed back in.
  const std::size_t fed = context.size() + segment.size() - 1;
  require(fed <= static_cast<std::size_t>(context_len), ErrorKind::ContextOverflow,
          "context + segment of " + std::to_string(fed) + " tokens exceeds context_len " +
              std::to_string(context_len));
  Tokens input(context.begin(), context.end());
  input.insert(input.end(), segment.begin(), segment.end() - 1);
  return input;
}

}  // namespace detail

/// log pi(segment_t | context, segment_<t) for every t, natural log, at
/// temperature 1, plus their sum.
template <class T>
SegmentLogprob sequence_logprob(const Transformer<T>& model, std::span<const TokenId> context,
                                std::span<const TokenId> segment) {
  const Tokens input = detail::joined_input(context, segment, model.context_len());
  typename Transformer<T>::Activations acts;
  model.forward(input, acts);
  const auto V = static_cast<std::size_t>(model.vocab_size());
  SegmentLogprob out;
  out.per_token.reserve(segment.size());
  for (std::size_t i = 0; i < segment.size(); ++i) {
    const std::size_t pos = context.size() - 1 + i;
    const double lp = log_softmax_at(std::span<const T>(&acts.logits[pos * V], V),
                                     static_cast<std::size_t>(segment[i]));
    out.per_token.push_back(lp);
    out.sum += lp;
  }
  return out;
}

/// Forward pass over context + segment keeping activations for
/// segment_backward(); returns the segment log-prob sum.
template <class T>
double segment_forward(const Transformer<T>& model, std::span<const TokenId> context,
                       std::span<const TokenId> segment,
                       typename Transformer<T>::Activations& acts) {
  const Tokens input = detail::joined_input(context, segment, model.context_len());
  model.forward(input, acts);
  const auto V = static_cast<std::size_t>(model.vocab_size());
  double sum = 0;
  for (std::size_t i = 0; i < segment.size(); ++i) {
    const std::size_t pos = context.size() - 1 + i;
    sum += log_softmax_at(std::span<const T>(&acts.logits[pos * V], V),
                          static_cast<std::size_t>(segment[i]));
  }
  return sum;
}

/// Accumulates coef * d(segment log-prob sum)/d(weights) into grad, using the
/// activations of a matching segment_forward() call.
template <class T>
void segment_backward(const Transformer<T>& model, std::size_t context_size,
                      std::span<const TokenId> segment,
                      const typename Transformer<T>::Activations& acts, double coef,
                      std::span<T> grad) {
  if (coef == 0.0) return;
  const auto V = static_cast<std::size_t>(model.vocab_size());
  std::vector<T> dlogits(acts.logits.size(), T(0));
  for (std::size_t i = 0; i < segment.size(); ++i) {
    const std::size_t pos = context_size - 1 + i;
    const std::span<const T> row(&acts.logits[pos * V], V);
    const auto target = static_cast<std::size_t>(segment[i]);
    double mx = -INFINITY;
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    double z = 0;
    for (T v : row) z += std::exp(static_cast<double>(v) - mx);
    // d log p(target) / d logit_j = [j == target] - p_j
    for (std::size_t j = 0; j < V; ++j) {
      const double p = std::exp(static_cast<double>(row[j]) - mx) / z;
      dlogits[pos * V + j] = static_cast<T>(coef * ((j == target ? 1.0 : 0.0) - p));
    }
  }
  model.backward(acts, dlogits, grad);
}

}  // namespace cgpo
