#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "error.hpp"

namespace cgpo {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double warmup_ratio = 0.1;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
};

inline void validate(const OptimizerConfig& c) {
  require(c.learning_rate > 0, ErrorKind::Config, "learning_rate must be positive");
  require(c.warmup_ratio >= 0 && c.warmup_ratio < 1, ErrorKind::Config,
          "warmup_ratio must be in [0, 1)");
  require(c.weight_decay >= 0, ErrorKind::Config, "weight_decay must be >= 0");
}

/// Linear warmup over ceil(warmup_ratio * total) steps, then cosine decay to 0.
/// `step` is zero-based.
inline double scheduled_lr(double base, std::int64_t step, std::int64_t total, double warmup_ratio) {
  if (total <= 0) return base;
  const auto warmup = static_cast<std::int64_t>(std::ceil(warmup_ratio * static_cast<double>(total)));
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const std::int64_t span = total - warmup;
  if (span <= 0) return base;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

template <class T>
double global_norm(std::span<const T> g) {
  double s = 0;
  for (T v : g) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

/// Scales g in place so its global norm is at most max_norm; returns the
/// norm before clipping.
template <class T>
double clip_grad_norm(std::span<T> g, double max_norm) {
  const double norm = global_norm(std::span<const T>(g));
  if (max_norm > 0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / (norm + 1e-12));
    for (T& v : g) v *= scale;
  }
  return norm;
}

/// AdamW with decoupled weight decay applied to every parameter.
template <class T>
class AdamW {
 public:
  AdamW(std::size_t n, const OptimizerConfig& cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<T> w, std::span<const T> g, double lr) {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m_[i] = b1 * m_[i] + (1 - b1) * gi;
      v_[i] = b2 * v_[i] + (1 - b2) * gi * gi;
      const double update = (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
      double wi = static_cast<double>(w[i]);
      wi -= lr * (update + cfg_.weight_decay * wi);
      w[i] = static_cast<T>(wi);
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<double> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace cgpo
