#pragma once

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "hash.hpp"
#include "rng.hpp"
#include "tokenizer.hpp"

namespace cgpo {

struct ProblemInstance {
  std::string expression;
  std::int64_t gold_answer = 0;
  int n_ops = 0;
  // Generation substream seed; zero when loaded from a corpus file.
  std::uint64_t seed = 0;
};

struct CorpusConfig {
  int n_train = 50000;
  int n_eval = 1000;
  std::int64_t operand_lo = 0;
  std::int64_t operand_hi = 9;
  std::string ops = "+-*";
  int n_ops_lo = 2;
  int n_ops_hi = 4;
  std::uint64_t seed = 7;
};

namespace detail {

struct ExprNode {
  char op = 0;  // 0 for a literal
  std::int64_t value = 0;
  std::unique_ptr<ExprNode> left, right;
};

inline std::optional<std::int64_t> apply_op(char op, std::int64_t a, std::int64_t b) {
  std::int64_t r = 0;
  bool overflow = false;
  switch (op) {
    case '+': overflow = __builtin_add_overflow(a, b, &r); break;
    case '-': overflow = __builtin_sub_overflow(a, b, &r); break;
    case '*': overflow = __builtin_mul_overflow(a, b, &r); break;
    default: return std::nullopt;
  }
  if (overflow) return std::nullopt;
  return r;
}

inline std::optional<std::int64_t> parse_int(std::string_view s) {
  if (s.empty()) return std::nullopt;
  std::size_t digits_from = s.front() == '-' ? 1 : 0;
  if (digits_from == s.size()) return std::nullopt;
  for (std::size_t i = digits_from; i < s.size(); ++i) {
    if (s[i] < '0' || s[i] > '9') return std::nullopt;
  }
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// Recursive-descent parser for: expr := int | '(' expr op expr ')'.
class ExprParser {
 public:
  explicit ExprParser(std::string_view text) : text_(text) {}

  std::unique_ptr<ExprNode> parse() {
    auto node = parse_expr();
    if (!node || pos_ != text_.size()) return nullptr;
    return node;
  }

 private:
  std::unique_ptr<ExprNode> parse_expr() {
    if (pos_ >= text_.size()) return nullptr;
    if (text_[pos_] == '(') {
      ++pos_;
      auto node = std::make_unique<ExprNode>();
      node->left = parse_expr();
      if (!node->left || pos_ >= text_.size()) return nullptr;
      node->op = text_[pos_++];
      if (node->op != '+' && node->op != '-' && node->op != '*') return nullptr;
      node->right = parse_expr();
      if (!node->right || pos_ >= text_.size() || text_[pos_] != ')') return nullptr;
      ++pos_;
      return node;
    }
    const std::size_t start = pos_;
    if (text_[pos_] == '-') ++pos_;
    while (pos_ < text_.size() && text_[pos_] >= '0' && text_[pos_] <= '9') ++pos_;
    auto v = parse_int(text_.substr(start, pos_ - start));
    if (!v) return nullptr;
    auto node = std::make_unique<ExprNode>();
    node->value = *v;
    return node;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

inline std::optional<std::int64_t> evaluate(const ExprNode& node) {
  if (node.op == 0) return node.value;
  auto a = evaluate(*node.left);
  auto b = evaluate(*node.right);
  if (!a || !b) return std::nullopt;
  return apply_op(node.op, *a, *b);
}

inline int count_ops(const ExprNode& node) {
  return node.op == 0 ? 0 : 1 + count_ops(*node.left) + count_ops(*node.right);
}

inline std::string render_expr(const ExprNode& node) {
  if (node.op == 0) return std::to_string(node.value);
  return "(" + render_expr(*node.left) + node.op + render_expr(*node.right) + ")";
}

// Post-order reduction: left subtree, right subtree, then this node.
inline std::int64_t reduce_lines(const ExprNode& node, std::vector<std::string>& lines) {
  if (node.op == 0) return node.value;
  const std::int64_t a = reduce_lines(*node.left, lines);
  const std::int64_t b = reduce_lines(*node.right, lines);
  const std::int64_t c = *apply_op(node.op, a, b);
  lines.push_back(std::to_string(a) + node.op + std::to_string(b) + "=" + std::to_string(c));
  return c;
}

inline std::unique_ptr<ExprNode> random_tree(const CorpusConfig& cfg, int n_ops, Rng& rng) {
  auto node = std::make_unique<ExprNode>();
  if (n_ops == 0) {
    node->value = rng.between(cfg.operand_lo, cfg.operand_hi);
    return node;
  }
  const int left_ops = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_ops)));
  node->op = cfg.ops[rng.below(cfg.ops.size())];
  node->left = random_tree(cfg, left_ops, rng);
  node->right = random_tree(cfg, n_ops - 1 - left_ops, rng);
  return node;
}

// Largest magnitude any intermediate can reach with n binary operators over
// operands bounded by m in absolute value. Saturates at INT64_MAX.
inline std::int64_t magnitude_bound(std::int64_t m, int n, bool has_mul) {
  std::vector<std::int64_t> bound(static_cast<std::size_t>(n) + 1, 0);
  bound[0] = m;
  for (int k = 1; k <= n; ++k) {
    std::int64_t best = 0;
    for (int a = 0; a < k; ++a) {
      const std::int64_t x = bound[static_cast<std::size_t>(a)];
      const std::int64_t y = bound[static_cast<std::size_t>(k - 1 - a)];
      std::int64_t s = 0, p = 0;
      if (__builtin_add_overflow(x, y, &s)) s = INT64_MAX;
      if (!has_mul) p = 0;
      else if (__builtin_mul_overflow(x, y, &p)) p = INT64_MAX;
      best = std::max({best, s, p});
    }
    bound[static_cast<std::size_t>(k)] = best;
  }
  return bound.back();
}

// Eval problems are those whose expression hash lands in this bucket; this
// makes train/eval disjoint while keeping generation a pure function of index.
constexpr std::uint64_t kEvalBuckets = 8;
constexpr int kMaxSplitAttempts = 4096;

inline bool in_eval_bucket(std::string_view expression) {
  return fnv1a(expression) % kEvalBuckets == 0;
}

}  // namespace detail

inline void validate(const CorpusConfig& cfg) {
  require(cfg.n_train >= 0 && cfg.n_eval >= 0, ErrorKind::Config, "corpus counts must be >= 0");
  require(cfg.operand_lo <= cfg.operand_hi, ErrorKind::Config, "operand_range lo > hi");
  require(cfg.n_ops_lo >= 2 && cfg.n_ops_hi <= 6 && cfg.n_ops_lo <= cfg.n_ops_hi,
          ErrorKind::Config, "n_ops_range must satisfy 2 <= lo <= hi <= 6");
  require(!cfg.ops.empty(), ErrorKind::Config, "ops must be nonempty");
  for (char op : cfg.ops) {
    require(op == '+' || op == '-' || op == '*', ErrorKind::Config,
            std::string("unsupported operator '") + op + "'");
  }
  require(cfg.operand_lo > INT32_MIN && cfg.operand_hi < INT32_MAX, ErrorKind::Config,
          "operand_range out of bounds");
  const std::int64_t m = std::max(std::abs(cfg.operand_lo), std::abs(cfg.operand_hi));
  const bool has_mul = cfg.ops.find('*') != std::string::npos;
  require(detail::magnitude_bound(m, cfg.n_ops_hi, has_mul) < INT64_MAX, ErrorKind::Config,
          "operand_range and n_ops_range allow 64-bit overflow");
}

/// Deterministic in (config, index). Indices below n_train fall in the train
/// split, the rest in the eval split; the two never share an expression.
inline ProblemInstance generate_problem(const CorpusConfig& cfg, std::int64_t index) {
  const bool want_eval = index >= cfg.n_train;
  for (int attempt = 0; attempt < detail::kMaxSplitAttempts; ++attempt) {
    const std::uint64_t seed = derive_seed(
        cfg.seed, {static_cast<std::uint64_t>(index), static_cast<std::uint64_t>(attempt)});
    Rng rng(seed);
    const int n_ops = static_cast<int>(rng.between(cfg.n_ops_lo, cfg.n_ops_hi));
    auto tree = detail::random_tree(cfg, n_ops, rng);
    std::string expr = detail::render_expr(*tree);
    if (detail::in_eval_bucket(expr) != want_eval) continue;
    return ProblemInstance{std::move(expr), *detail::evaluate(*tree), n_ops, seed};
  }
  fail(ErrorKind::Config, "expression space too small to draw a disjoint train/eval split");
}

/// Parses and evaluates a fully parenthesized expression.
inline ProblemInstance parse_problem(std::string_view expression) {
  auto tree = detail::ExprParser(expression).parse();
  require(tree != nullptr, ErrorKind::Config, "malformed expression: " + std::string(expression));
  auto value = detail::evaluate(*tree);
  require(value.has_value(), ErrorKind::Config, "expression overflows 64-bit arithmetic");
  return ProblemInstance{std::string(expression), *value, detail::count_ops(*tree), 0};
}

inline std::string render_solution(const ProblemInstance& problem) {
  auto tree = detail::ExprParser(problem.expression).parse();
  require(tree != nullptr, ErrorKind::Config, "malformed expression: " + problem.expression);
  std::vector<std::string> lines;
  const std::int64_t answer = detail::reduce_lines(*tree, lines);
  std::string out;
  for (const auto& line : lines) out += line + "\n";
  out += "#### " + std::to_string(answer);
  return out;
}

namespace detail {

inline std::optional<std::int64_t> parse_answer_line(std::string_view line) {
  constexpr std::string_view kMarker = "#### ";
  if (line.substr(0, kMarker.size()) != kMarker) return std::nullopt;
  return parse_int(line.substr(kMarker.size()));
}

// "a op b=c" with optional leading '-' on each number.
inline bool reduction_line_correct(std::string_view line) {
  std::size_t pos = 0;
  auto number = [&]() -> std::optional<std::int64_t> {
    const std::size_t start = pos;
    if (pos < line.size() && line[pos] == '-') ++pos;
    while (pos < line.size() && line[pos] >= '0' && line[pos] <= '9') ++pos;
    return parse_int(line.substr(start, pos - start));
  };
  const auto a = number();
  if (!a || pos >= line.size()) return false;
  const char op = line[pos++];
  const auto b = number();
  if (!b || pos >= line.size() || line[pos] != '=') return false;
  ++pos;
  const auto c = number();
  if (!c || pos != line.size()) return false;
  const auto expect = apply_op(op, *a, *b);
  return expect && *expect == *c;
}

}  // namespace detail

/// True iff the last "#### <int>" line of the completion equals the gold answer.
inline bool verify_answer(const ProblemInstance& problem, std::string_view completion) {
  std::optional<std::int64_t> last;
  std::size_t start = 0;
  while (start <= completion.size()) {
    std::size_t end = completion.find('\n', start);
    if (end == std::string_view::npos) end = completion.size();
    if (auto v = detail::parse_answer_line(completion.substr(start, end - start))) last = v;
    start = end + 1;
  }
  return last.has_value() && *last == problem.gold_answer;
}

/// Token index of the first erroneous line of a generated solution, or empty
/// when every line is correct and the final answer matches. Scanning stops at
/// EOS. A "#### n" line is wrong when n differs from the gold answer. When no
/// answer line appears before EOS, the EOS token itself is reported.
inline std::optional<std::size_t> first_error_index(const ProblemInstance& problem,
                                                    std::span<const TokenId> tokens,
                                                    const Tokenizer& tok = Tokenizer{}) {
  std::string line;
  std::size_t line_start = 0;
  bool malformed = false;
  bool answered = false;

  auto check = [&]() -> bool {  // true if the current line is an error
    if (malformed) return true;
    if (auto v = detail::parse_answer_line(line)) {
      answered = true;
      return *v != problem.gold_answer;
    }
    return !detail::reduction_line_correct(line);
  };

  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId id = tokens[i];
    if (id == Tokenizer::kEos) {
      if ((!line.empty() || malformed) && check()) return line_start;
      if (!answered) return i;
      return std::nullopt;
    }
    if (tok.is_special(id) || !tok.valid(id)) {
      malformed = true;
      continue;
    }
    const char ch = tok.char_of(id);
    if (ch == '\n') {
      if (check()) return line_start;
      line.clear();
      malformed = false;
      line_start = i + 1;
      continue;
    }
    line += ch;
  }
  // No EOS: a trailing partial line is checked as-is.
  if ((!line.empty() || malformed) && check()) return line_start;
  return std::nullopt;
}

inline Tokens prompt_tokens(const ProblemInstance& problem, const Tokenizer& tok = Tokenizer{}) {
  Tokens out{Tokenizer::kBos};
  const Tokens body = tok.tokenize(problem.expression);
  out.insert(out.end(), body.begin(), body.end());
  out.push_back(Tokenizer::kSep);
  return out;
}

// Solution tokens followed by EOS; the pretraining target.
inline Tokens solution_tokens(const ProblemInstance& problem, const Tokenizer& tok = Tokenizer{}) {
  Tokens out = tok.tokenize(render_solution(problem));
  out.push_back(Tokenizer::kEos);
  return out;
}

// ---------------------------------------------------------------------------
// Corpus files

inline std::string corpus_line(const ProblemInstance& p) {
  nlohmann::ordered_json j;
  j["expression"] = p.expression;
  j["gold_answer"] = p.gold_answer;
  j["solution_text"] = render_solution(p);
  return j.dump();
}

inline void write_problems(const std::filesystem::path& path,
                           const std::vector<ProblemInstance>& problems) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::Io, "cannot open for writing: " + path.string());
  for (const auto& p : problems) out << corpus_line(p) << '\n';
  out.flush();
  require(out.good(), ErrorKind::Io, "write failed: " + path.string());
}

struct CorpusSplit {
  std::vector<ProblemInstance> train;
  std::vector<ProblemInstance> eval;
};

inline CorpusSplit generate_corpus(const CorpusConfig& cfg) {
  validate(cfg);
  CorpusSplit split;
  split.train.reserve(static_cast<std::size_t>(cfg.n_train));
  split.eval.reserve(static_cast<std::size_t>(cfg.n_eval));
  for (int i = 0; i < cfg.n_train; ++i) split.train.push_back(generate_problem(cfg, i));
  for (int i = 0; i < cfg.n_eval; ++i)
    split.eval.push_back(generate_problem(cfg, cfg.n_train + i));
  return split;
}

/// Writes train.jsonl and eval.jsonl under `dir`.
inline CorpusSplit build_corpus(const CorpusConfig& cfg, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorKind::Io, "cannot create directory: " + dir.string());
  CorpusSplit split = generate_corpus(cfg);
  write_problems(dir / "train.jsonl", split.train);
  write_problems(dir / "eval.jsonl", split.eval);
  return split;
}

inline std::vector<ProblemInstance> read_problems(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open: " + path.string());
  std::vector<ProblemInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Io, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    require(j.contains("expression") && j["expression"].is_string(), ErrorKind::Io,
            path.string() + ":" + std::to_string(line_no) + ": missing expression");
    ProblemInstance p = parse_problem(j["expression"].get<std::string>());
    if (j.contains("gold_answer")) {
      require(j["gold_answer"].get<std::int64_t>() == p.gold_answer, ErrorKind::Io,
              path.string() + ":" + std::to_string(line_no) + ": gold_answer mismatch");
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace cgpo
