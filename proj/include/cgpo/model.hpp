#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "error.hpp"
#include "rng.hpp"
#include "tokenizer.hpp"

namespace cgpo {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int context_len = 256;
  int vocab_size = Tokenizer{}.vocab_size();
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& c) {
  require(c.n_layers >= 1 && c.n_heads >= 1 && c.d_model >= 1 && c.d_ff >= 1,
          ErrorKind::Config, "model dimensions must be positive");
  require(c.d_model % c.n_heads == 0, ErrorKind::Config, "d_model must be divisible by n_heads");
  require(c.context_len >= 2, ErrorKind::Config, "context_len must be >= 2");
  require(c.vocab_size >= 2, ErrorKind::Config, "vocab_size must be >= 2");
}

/// Offsets of every tensor inside the flat weight array. All matrices are
/// row-major with shape [in][out], so y = x W.
struct ParamLayout {
  struct Tensor {
    std::string name;
    std::size_t offset;
    std::size_t rows, cols;
    std::size_t size() const { return rows * cols; }
  };

  struct Layer {
    std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_proj, b_proj;
    std::size_t ln2_g, ln2_b, w_fc, b_fc, w_out, b_out;
  };

  std::size_t wte = 0, wpe = 0, lnf_g = 0, lnf_b = 0, w_head = 0, b_head = 0;
  std::vector<Layer> layers;
  std::vector<Tensor> tensors;
  std::size_t total = 0;

  static ParamLayout for_config(const ModelConfig& c) {
    ParamLayout p;
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto f = static_cast<std::size_t>(c.d_ff);
    const auto v = static_cast<std::size_t>(c.vocab_size);
    auto add = [&p](std::string name, std::size_t rows, std::size_t cols) {
      const std::size_t off = p.total;
      p.tensors.push_back({std::move(name), off, rows, cols});
      p.total += rows * cols;
      return off;
    };
    p.wte = add("wte", v, d);
    p.wpe = add("wpe", static_cast<std::size_t>(c.context_len), d);
    for (int l = 0; l < c.n_layers; ++l) {
      const std::string pre = "h" + std::to_string(l) + ".";
      Layer L{};
      L.ln1_g = add(pre + "ln1.g", 1, d);
      L.ln1_b = add(pre + "ln1.b", 1, d);
      L.w_qkv = add(pre + "attn.w_qkv", d, 3 * d);
      L.b_qkv = add(pre + "attn.b_qkv", 1, 3 * d);
      L.w_proj = add(pre + "attn.w_proj", d, d);
      L.b_proj = add(pre + "attn.b_proj", 1, d);
      L.ln2_g = add(pre + "ln2.g", 1, d);
      L.ln2_b = add(pre + "ln2.b", 1, d);
      L.w_fc = add(pre + "mlp.w_fc", d, f);
      L.b_fc = add(pre + "mlp.b_fc", 1, f);
      L.w_out = add(pre + "mlp.w_out", f, d);
      L.b_out = add(pre + "mlp.b_out", 1, d);
      p.layers.push_back(L);
    }
    p.lnf_g = add("lnf.g", 1, d);
    p.lnf_b = add("lnf.b", 1, d);
    p.w_head = add("head.w", d, v);
    p.b_head = add("head.b", 1, v);
    return p;
  }
};

// ---------------------------------------------------------------------------
// Dense kernels. Loop orders are fixed so results do not depend on call site.

namespace kernel {

template <class T>
inline void axpy(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// Eight independent partial sums, combined in a fixed order.
template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T s[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) s[k] += a[i + k] * b[i + k];
  }
  for (; i < n; ++i) s[0] += a[i] * b[i];
  return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
}

// y = b + x W, W is [in][out].
template <class T>
inline void affine(const T* x, const T* W, const T* b, T* y, std::size_t in, std::size_t out) {
  std::copy(b, b + out, y);
  for (std::size_t i = 0; i < in; ++i) axpy(x[i], W + i * out, y, out);
}

// dx = W dy (dx[i] = sum_o W[i][o] dy[o]); overwrites dx.
template <class T>
inline void affine_backward_input(const T* W, const T* dy, T* dx, std::size_t in, std::size_t out) {
  for (std::size_t i = 0; i < in; ++i) dx[i] = dot(W + i * out, dy, out);
}

// dW += x^T dy, db += dy.
template <class T>
inline void affine_backward_params(const T* x, const T* dy, T* dW, T* db, std::size_t in,
                                   std::size_t out) {
  for (std::size_t i = 0; i < in; ++i) axpy(x[i], dy, dW + i * out, out);
  for (std::size_t o = 0; o < out; ++o) db[o] += dy[o];
}

constexpr double kLnEps = 1e-5;

template <class T>
inline void layer_norm(const T* x, const T* g, const T* b, T* y, T* mean_out, T* rstd_out,
                       std::size_t n) {
  T mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i];
  mean /= static_cast<T>(n);
  T var = 0;
  for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
  var /= static_cast<T>(n);
  const T rstd = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
  for (std::size_t i = 0; i < n; ++i) y[i] = (x[i] - mean) * rstd * g[i] + b[i];
  *mean_out = mean;
  *rstd_out = rstd;
}

// Accumulates dx (+=), dg, db.
template <class T>
inline void layer_norm_backward(const T* x, T mean, T rstd, const T* g, const T* dy, T* dx,
                                T* dg, T* db, std::size_t n) {
  T sum_dxhat = 0, sum_dxhat_xhat = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T xhat = (x[i] - mean) * rstd;
    const T dxhat = dy[i] * g[i];
    dg[i] += dy[i] * xhat;
    db[i] += dy[i];
    sum_dxhat += dxhat;
    sum_dxhat_xhat += dxhat * xhat;
  }
  const T inv_n = T(1) / static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T xhat = (x[i] - mean) * rstd;
    const T dxhat = dy[i] * g[i];
    dx[i] += rstd * (dxhat - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n);
  }
}

// tanh approximation of GELU.
template <class T>
inline T gelu(T x) {
  constexpr T k = static_cast<T>(0.7978845608028654);
  constexpr T c = static_cast<T>(0.044715);
  return static_cast<T>(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x)));
}

template <class T>
inline T gelu_grad(T x) {
  constexpr T k = static_cast<T>(0.7978845608028654);
  constexpr T c = static_cast<T>(0.044715);
  const T u = k * (x + c * x * x * x);
  const T th = std::tanh(u);
  const T du = k * (T(1) + T(3) * c * x * x);
  return static_cast<T>(0.5) * (T(1) + th) + static_cast<T>(0.5) * x * (T(1) - th * th) * du;
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Policy interface: anything that yields next-token logits for a growing
// context. The transformer implements it; tests plug in scripted policies.

class Decoder {
 public:
  virtual ~Decoder() = default;
  // Logits for the token following the current context.
  virtual std::span<const double> logits() const = 0;
  virtual void append(TokenId token) = 0;
  virtual int length() const = 0;
  virtual std::unique_ptr<Decoder> clone() const = 0;
};

class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::unique_ptr<Decoder> open(std::span<const TokenId> context) const = 0;
  virtual int vocab_size() const = 0;
  virtual int context_len() const = 0;
};

// ---------------------------------------------------------------------------

template <class T>
class Transformer final : public Policy {
 public:
  using Scalar = T;

  /// Key/value rows of every layer for positions [0, length).
  struct KvCache {
    std::vector<std::vector<T>> k, v;
    int length = 0;
  };

  /// Everything the backward pass needs for one sequence.
  struct Activations {
    int len = 0;
    Tokens tokens;
    std::vector<std::vector<T>> resid;  // n_layers + 1 entries, [len][d]
    std::vector<std::vector<T>> ln1, ln1_mean, ln1_rstd, qkv, att, att_out, x_mid;
    std::vector<std::vector<T>> ln2, ln2_mean, ln2_rstd, h_pre, h_act;
    std::vector<T> lnf, lnf_mean, lnf_rstd;
    std::vector<T> logits;  // [len][vocab]
  };

  explicit Transformer(const ModelConfig& config)
      : config_(config), layout_(ParamLayout::for_config(config)) {
    validate(config_);
    weights_.assign(layout_.total, T(0));
  }

  /// GPT-2 style init: N(0, 0.02), residual projections scaled by
  /// 1/sqrt(2 n_layers), unit LayerNorm gains, zero biases.
  static Transformer initialized(const ModelConfig& config) {
    Transformer m(config);
    Rng rng(derive_seed(config.seed, {0x1417}));
    const double std_base = 0.02;
    const double std_resid = 0.02 / std::sqrt(2.0 * config.n_layers);
    auto fill_normal = [&](std::size_t off, std::size_t n, double std) {
      for (std::size_t i = 0; i < n; ++i) m.weights_[off + i] = static_cast<T>(std * rng.normal());
    };
    auto fill_const = [&](std::size_t off, std::size_t n, T value) {
      std::fill_n(m.weights_.begin() + static_cast<std::ptrdiff_t>(off), n, value);
    };
    for (const auto& t : m.layout_.tensors) {
      const bool is_gain = t.name.ends_with(".g");
      const bool is_bias = t.name.ends_with(".b") || t.name.ends_with("b_qkv") ||
                           t.name.ends_with("b_proj") || t.name.ends_with("b_fc") ||
                           t.name.ends_with("b_out");
      const bool is_resid = t.name.ends_with("w_proj") || t.name.ends_with("w_out");
      if (is_gain) fill_const(t.offset, t.size(), T(1));
      else if (is_bias) fill_const(t.offset, t.size(), T(0));
      else fill_normal(t.offset, t.size(), is_resid ? std_resid : std_base);
    }
    return m;
  }

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t num_params() const { return layout_.total; }
  std::vector<T>& weights() { return weights_; }
  const std::vector<T>& weights() const { return weights_; }

  int vocab_size() const override { return config_.vocab_size; }
  int context_len() const override { return config_.context_len; }

  template <class U>
  Transformer<U> cast() const {
    Transformer<U> out(config_);
    std::transform(weights_.begin(), weights_.end(), out.weights().begin(),
                   [](T w) { return static_cast<U>(w); });
    return out;
  }

  KvCache make_cache() const {
    KvCache c;
    const auto n = static_cast<std::size_t>(config_.context_len * config_.d_model);
    c.k.assign(static_cast<std::size_t>(config_.n_layers), std::vector<T>(n));
    c.v.assign(static_cast<std::size_t>(config_.n_layers), std::vector<T>(n));
    return c;
  }

  /// Per-position working buffers; reuse across step() calls.
  struct Scratch {
    std::vector<T> x, ln, qkv, att_out, tmp, h_pre, h_act, scores, logits;
    explicit Scratch(const ModelConfig& c)
        : x(static_cast<std::size_t>(c.d_model)),
          ln(x.size()),
          qkv(3 * x.size()),
          att_out(x.size()),
          tmp(x.size()),
          h_pre(static_cast<std::size_t>(c.d_ff)),
          h_act(h_pre.size()),
          scores(static_cast<std::size_t>(c.context_len)),
          logits(static_cast<std::size_t>(c.vocab_size)) {}
  };

  /// Feeds one token at position cache.length; returns next-token logits,
  /// which live in `s` until the next call.
  std::span<const T> step(KvCache& cache, TokenId token, Scratch& s) const {
    require(cache.length < config_.context_len, ErrorKind::ContextOverflow,
            "sequence exceeds context_len " + std::to_string(config_.context_len));
    require(token >= 0 && token < config_.vocab_size, ErrorKind::Config,
            "token id out of range: " + std::to_string(token));
    position_forward(cache, token, s, nullptr);
    return s.logits;
  }

  void step(KvCache& cache, TokenId token, std::span<T> logits) const {
    require(cache.length < config_.context_len, ErrorKind::ContextOverflow,
            "sequence exceeds context_len " + std::to_string(config_.context_len));
    require(token >= 0 && token < config_.vocab_size, ErrorKind::Config,
            "token id out of range: " + std::to_string(token));
    Scratch s(config_);
    position_forward(cache, token, s, nullptr);
    std::copy(s.logits.begin(), s.logits.end(), logits.begin());
  }

  /// Teacher-forced logits for every position, flat [len][vocab].
  std::vector<T> forward_logits(std::span<const TokenId> tokens) const {
    Activations acts;
    forward(tokens, acts);
    return std::move(acts.logits);
  }

  /// Full forward pass recording activations. Uses the same per-position
  /// kernels as incremental decoding, so logits match step() bit for bit.
  void forward(std::span<const TokenId> tokens, Activations& acts) const {
    const int len = static_cast<int>(tokens.size());
    require(len <= config_.context_len, ErrorKind::ContextOverflow,
            "sequence of " + std::to_string(len) + " tokens exceeds context_len " +
                std::to_string(config_.context_len));
    allocate(acts, len);
    acts.tokens.assign(tokens.begin(), tokens.end());
    KvCache cache = make_cache();
    Scratch s(config_);
    for (int t = 0; t < len; ++t) {
      require(tokens[static_cast<std::size_t>(t)] >= 0 &&
                  tokens[static_cast<std::size_t>(t)] < config_.vocab_size,
              ErrorKind::Config, "token id out of range");
      position_forward(cache, tokens[static_cast<std::size_t>(t)], s, &acts);
    }
  }

  /// Accumulates d(loss)/d(weights) into grad given d(loss)/d(logits).
  void backward(const Activations& acts, std::span<const T> dlogits, std::span<T> grad) const {
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto f = static_cast<std::size_t>(config_.d_ff);
    const auto V = static_cast<std::size_t>(config_.vocab_size);
    const auto H = static_cast<std::size_t>(config_.n_heads);
    const std::size_t hd = d / H;
    const auto len = static_cast<std::size_t>(acts.len);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const T* W = weights_.data();
    T* G = grad.data();

    std::vector<T> dx(len * d, T(0));
    std::vector<T> tmp(std::max({d, f, 3 * d}));

    for (std::size_t t = 0; t < len; ++t) {
      const T* dl = dlogits.data() + t * V;
      kernel::affine_backward_params(&acts.lnf[t * d], dl, G + layout_.w_head, G + layout_.b_head,
                                     d, V);
      kernel::affine_backward_input(W + layout_.w_head, dl, tmp.data(), d, V);
      kernel::layer_norm_backward(&acts.resid.back()[t * d], acts.lnf_mean[t], acts.lnf_rstd[t],
                                  W + layout_.lnf_g, tmp.data(), &dx[t * d], G + layout_.lnf_g,
                                  G + layout_.lnf_b, d);
    }

    std::vector<T> dmid(len * d), dqkv(len * 3 * d), datt(len * d), dp(len);
    for (int li = config_.n_layers - 1; li >= 0; --li) {
      const auto l = static_cast<std::size_t>(li);
      const auto& L = layout_.layers[l];

      // MLP block: out = mid + W_out gelu(W_fc ln2(mid)).
      std::vector<T> dh(f);
      for (std::size_t t = 0; t < len; ++t) {
        const T* g = &dx[t * d];
        kernel::affine_backward_params(&acts.h_act[l][t * f], g, G + L.w_out, G + L.b_out, f, d);
        kernel::affine_backward_input(W + L.w_out, g, dh.data(), f, d);
        for (std::size_t i = 0; i < f; ++i) dh[i] *= kernel::gelu_grad(acts.h_pre[l][t * f + i]);
        kernel::affine_backward_params(&acts.ln2[l][t * d], dh.data(), G + L.w_fc, G + L.b_fc, d,
                                       f);
        kernel::affine_backward_input(W + L.w_fc, dh.data(), tmp.data(), d, f);
        std::copy(g, g + d, &dmid[t * d]);
        kernel::layer_norm_backward(&acts.x_mid[l][t * d], acts.ln2_mean[l][t],
                                    acts.ln2_rstd[l][t], W + L.ln2_g, tmp.data(), &dmid[t * d],
                                    G + L.ln2_g, G + L.ln2_b, d);
      }

      // Attention block: mid = in + W_proj attn(ln1(in)).
      for (std::size_t t = 0; t < len; ++t) {
        kernel::affine_backward_params(&acts.att_out[l][t * d], &dmid[t * d], G + L.w_proj,
                                       G + L.b_proj, d, d);
        kernel::affine_backward_input(W + L.w_proj, &dmid[t * d], &datt[t * d], d, d);
      }
      std::fill(dqkv.begin(), dqkv.end(), T(0));
      const T* qkv = acts.qkv[l].data();
      for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t h = 0; h < H; ++h) {
          const T* p = &acts.att[l][(h * len + t) * len];
          const T* dout = &datt[t * d + h * hd];
          T sum = 0;
          for (std::size_t j = 0; j <= t; ++j) {
            const T* vj = qkv + j * 3 * d + 2 * d + h * hd;
            dp[j] = kernel::dot(dout, vj, hd);
            sum += p[j] * dp[j];
            kernel::axpy(p[j], dout, &dqkv[j * 3 * d + 2 * d + h * hd], hd);
          }
          const T* qt = qkv + t * 3 * d + h * hd;
          T* dqt = &dqkv[t * 3 * d + h * hd];
          for (std::size_t j = 0; j <= t; ++j) {
            const T ds = p[j] * (dp[j] - sum) * scale;
            const T* kj = qkv + j * 3 * d + d + h * hd;
            kernel::axpy(ds, kj, dqt, hd);
            kernel::axpy(ds, qt, &dqkv[j * 3 * d + d + h * hd], hd);
          }
        }
      }
      for (std::size_t t = 0; t < len; ++t) {
        kernel::affine_backward_params(&acts.ln1[l][t * d], &dqkv[t * 3 * d], G + L.w_qkv,
                                       G + L.b_qkv, d, 3 * d);
        kernel::affine_backward_input(W + L.w_qkv, &dqkv[t * 3 * d], tmp.data(), d, 3 * d);
        std::copy(&dmid[t * d], &dmid[t * d] + d, &dx[t * d]);
        kernel::layer_norm_backward(&acts.resid[l][t * d], acts.ln1_mean[l][t], acts.ln1_rstd[l][t],
                                    W + L.ln1_g, tmp.data(), &dx[t * d], G + L.ln1_g,
                                    G + L.ln1_b, d);
      }
    }

    for (std::size_t t = 0; t < len; ++t) {
      const auto tok = static_cast<std::size_t>(acts.tokens[t]);
      kernel::axpy(T(1), &dx[t * d], G + layout_.wte + tok * d, d);
      kernel::axpy(T(1), &dx[t * d], G + layout_.wpe + t * d, d);
    }
  }

  std::unique_ptr<Decoder> open(std::span<const TokenId> context) const override;

 private:
  void allocate(Activations& a, int len) const {
    const auto L = static_cast<std::size_t>(config_.n_layers);
    const auto n = static_cast<std::size_t>(len);
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto f = static_cast<std::size_t>(config_.d_ff);
    const auto H = static_cast<std::size_t>(config_.n_heads);
    a.len = len;
    a.resid.assign(L + 1, std::vector<T>(n * d));
    a.ln1.assign(L, std::vector<T>(n * d));
    a.ln1_mean.assign(L, std::vector<T>(n));
    a.ln1_rstd.assign(L, std::vector<T>(n));
    a.qkv.assign(L, std::vector<T>(n * 3 * d));
    a.att.assign(L, std::vector<T>(H * n * n, T(0)));
    a.att_out.assign(L, std::vector<T>(n * d));
    a.x_mid.assign(L, std::vector<T>(n * d));
    a.ln2.assign(L, std::vector<T>(n * d));
    a.ln2_mean.assign(L, std::vector<T>(n));
    a.ln2_rstd.assign(L, std::vector<T>(n));
    a.h_pre.assign(L, std::vector<T>(n * f));
    a.h_act.assign(L, std::vector<T>(n * f));
    a.lnf.assign(n * d, T(0));
    a.lnf_mean.assign(n, T(0));
    a.lnf_rstd.assign(n, T(0));
    a.logits.assign(n * static_cast<std::size_t>(config_.vocab_size), T(0));
  }

  void position_forward(KvCache& cache, TokenId token, Scratch& s, Activations* acts) const {
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto f = static_cast<std::size_t>(config_.d_ff);
    const auto V = static_cast<std::size_t>(config_.vocab_size);
    const auto H = static_cast<std::size_t>(config_.n_heads);
    const std::size_t hd = d / H;
    const auto t = static_cast<std::size_t>(cache.length);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    const T* W = weights_.data();

    const T* te = W + layout_.wte + static_cast<std::size_t>(token) * d;
    const T* pe = W + layout_.wpe + t * d;
    for (std::size_t i = 0; i < d; ++i) s.x[i] = te[i] + pe[i];

    for (std::size_t l = 0; l < layout_.layers.size(); ++l) {
      const auto& L = layout_.layers[l];
      if (acts) std::copy(s.x.begin(), s.x.end(), &acts->resid[l][t * d]);
      T mean, rstd;
      kernel::layer_norm(s.x.data(), W + L.ln1_g, W + L.ln1_b, s.ln.data(), &mean, &rstd, d);
      kernel::affine(s.ln.data(), W + L.w_qkv, W + L.b_qkv, s.qkv.data(), d, 3 * d);
      std::copy(s.qkv.begin() + static_cast<std::ptrdiff_t>(d),
                s.qkv.begin() + static_cast<std::ptrdiff_t>(2 * d), &cache.k[l][t * d]);
      std::copy(s.qkv.begin() + static_cast<std::ptrdiff_t>(2 * d), s.qkv.end(),
                &cache.v[l][t * d]);
      if (acts) {
        std::copy(s.ln.begin(), s.ln.end(), &acts->ln1[l][t * d]);
        acts->ln1_mean[l][t] = mean;
        acts->ln1_rstd[l][t] = rstd;
        std::copy(s.qkv.begin(), s.qkv.end(), &acts->qkv[l][t * 3 * d]);
      }

      for (std::size_t h = 0; h < H; ++h) {
        const T* q = s.qkv.data() + h * hd;
        T mx = -INFINITY;
        for (std::size_t j = 0; j <= t; ++j) {
          s.scores[j] = kernel::dot(q, &cache.k[l][j * d + h * hd], hd) * scale;
          mx = std::max(mx, s.scores[j]);
        }
        T sum = 0;
        for (std::size_t j = 0; j <= t; ++j) {
          s.scores[j] = std::exp(s.scores[j] - mx);
          sum += s.scores[j];
        }
        const T inv = T(1) / sum;
        T* out = s.att_out.data() + h * hd;
        std::fill(out, out + hd, T(0));
        for (std::size_t j = 0; j <= t; ++j) {
          s.scores[j] *= inv;
          kernel::axpy(s.scores[j], &cache.v[l][j * d + h * hd], out, hd);
        }
        if (acts) {
          const auto n = static_cast<std::size_t>(acts->len);
          std::copy(s.scores.begin(), s.scores.begin() + static_cast<std::ptrdiff_t>(t + 1),
                    &acts->att[l][(h * n + t) * n]);
        }
      }
      kernel::affine(s.att_out.data(), W + L.w_proj, W + L.b_proj, s.tmp.data(), d, d);
      for (std::size_t i = 0; i < d; ++i) s.x[i] += s.tmp[i];
      if (acts) {
        std::copy(s.att_out.begin(), s.att_out.end(), &acts->att_out[l][t * d]);
        std::copy(s.x.begin(), s.x.end(), &acts->x_mid[l][t * d]);
      }

      kernel::layer_norm(s.x.data(), W + L.ln2_g, W + L.ln2_b, s.ln.data(), &mean, &rstd, d);
      kernel::affine(s.ln.data(), W + L.w_fc, W + L.b_fc, s.h_pre.data(), d, f);
      for (std::size_t i = 0; i < f; ++i) s.h_act[i] = kernel::gelu(s.h_pre[i]);
      kernel::affine(s.h_act.data(), W + L.w_out, W + L.b_out, s.tmp.data(), f, d);
      for (std::size_t i = 0; i < d; ++i) s.x[i] += s.tmp[i];
      if (acts) {
        std::copy(s.ln.begin(), s.ln.end(), &acts->ln2[l][t * d]);
        acts->ln2_mean[l][t] = mean;
        acts->ln2_rstd[l][t] = rstd;
        std::copy(s.h_pre.begin(), s.h_pre.end(), &acts->h_pre[l][t * f]);
        std::copy(s.h_act.begin(), s.h_act.end(), &acts->h_act[l][t * f]);
      }
    }

    T mean, rstd;
    kernel::layer_norm(s.x.data(), W + layout_.lnf_g, W + layout_.lnf_b, s.ln.data(), &mean,
                       &rstd, d);
    kernel::affine(s.ln.data(), W + layout_.w_head, W + layout_.b_head, s.logits.data(), d, V);
    if (acts) {
      std::copy(s.x.begin(), s.x.end(), &acts->resid.back()[t * d]);
      std::copy(s.ln.begin(), s.ln.end(), &acts->lnf[t * d]);
      acts->lnf_mean[t] = mean;
      acts->lnf_rstd[t] = rstd;
      std::copy(s.logits.begin(), s.logits.end(), &acts->logits[t * V]);
    }
    cache.length += 1;
  }

  ModelConfig config_;
  ParamLayout layout_;
  std::vector<T> weights_;
};

template <class T>
class TransformerDecoder final : public Decoder {
 public:
  TransformerDecoder(const Transformer<T>& model, std::span<const TokenId> context)
      : model_(model),
        cache_(model.make_cache()),
        scratch_(model.config()),
        logits_(static_cast<std::size_t>(model.vocab_size())) {
    require(!context.empty(), ErrorKind::Config, "decoder context must be nonempty");
    require(static_cast<int>(context.size()) <= model.context_len(), ErrorKind::ContextOverflow,
            "context of " + std::to_string(context.size()) + " tokens exceeds context_len " +
                std::to_string(model.context_len()));
    for (TokenId t : context) append(t);
  }

  std::span<const double> logits() const override { return logits_; }

  void append(TokenId token) override {
    const auto raw = model_.step(cache_, token, scratch_);
    std::transform(raw.begin(), raw.end(), logits_.begin(),
                   [](T v) { return static_cast<double>(v); });
  }

  int length() const override { return cache_.length; }

  std::unique_ptr<Decoder> clone() const override {
    return std::make_unique<TransformerDecoder>(*this);
  }

 private:
  const Transformer<T>& model_;
  typename Transformer<T>::KvCache cache_;
  typename Transformer<T>::Scratch scratch_;
  std::vector<double> logits_;
};

template <class T>
std::unique_ptr<Decoder> Transformer<T>::open(std::span<const TokenId> context) const {
  return std::make_unique<TransformerDecoder<T>>(*this, context);
}

using Model = Transformer<float>;
using Model64 = Transformer<double>;

// ---------------------------------------------------------------------------
// Probability helpers shared by sampling, scoring and losses.

/// Softmax of logits / temperature, computed in double.
inline std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0) {
  std::vector<double> p(logits.size());
  double mx = -INFINITY;
  for (double v : logits) mx = std::max(mx, v / temperature);
  double sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] / temperature - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

template <class T>
inline double log_softmax_at(std::span<const T> logits, std::size_t index) {
  double mx = -INFINITY;
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0;
  for (T v : logits) sum += std::exp(static_cast<double>(v) - mx);
  return static_cast<double>(logits[index]) - mx - std::log(sum);
}

}  // namespace cgpo
