#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cgpo/corpus.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace cgpo;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cgpo_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Tokenizer, RoundTrip) {
  const Tokenizer tok;
  EXPECT_EQ(tok.detokenize(tok.tokenize("3+5=8")), "3+5=8");
  const std::string all(Tokenizer::kAlphabet);
  EXPECT_EQ(tok.detokenize(tok.tokenize(all)), all);
  EXPECT_TRUE(tok.tokenize("").empty());
}

TEST(Tokenizer, RandomTextRoundTrips) {
  const Tokenizer tok;
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    std::string s;
    const auto n = rng.below(40);
    for (std::uint64_t j = 0; j < n; ++j) s += Tokenizer::kAlphabet[rng.below(Tokenizer::kAlphabet.size())];
    EXPECT_EQ(tok.detokenize(tok.tokenize(s)), s);
  }
}

TEST(Tokenizer, UnknownCharacterReportsPosition) {
  const Tokenizer tok;
  try {
    tok.tokenize("12\xc3\xa9");
    FAIL() << "expected UnknownCharacter";
  } catch (const UnknownCharacterError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnknownCharacter);
    EXPECT_EQ(e.position(), 2u);
  }
  EXPECT_THROW(tok.tokenize("a"), UnknownCharacterError);
}

TEST(Tokenizer, StableIdsAndSingleEos) {
  const Tokenizer tok;
  EXPECT_EQ(tok.vocab_size(), 23);
  EXPECT_EQ(tok.token_of('0'), 4);
  EXPECT_EQ(tok.token_of('#'), 21);
  int eos = 0;
  for (TokenId id = 0; id < tok.vocab_size(); ++id) eos += tok.piece(id) == "<EOS>";
  EXPECT_EQ(eos, 1);
  EXPECT_EQ(tok.fingerprint(), Tokenizer{}.fingerprint());
}

TEST(Tokenizer, CompletionTextStopsAtEos) {
  const Tokenizer tok;
  Tokens t = tok.tokenize("#### 4");
  t.push_back(Tokenizer::kEos);
  const Tokens tail = tok.tokenize("99");
  t.insert(t.end(), tail.begin(), tail.end());
  EXPECT_EQ(tok.completion_text(t), "#### 4");
}

TEST(Corpus, GenerateIsDeterministic) {
  CorpusConfig cfg;
  const auto a = generate_problem(cfg, 0), b = generate_problem(cfg, 0);
  EXPECT_EQ(a.expression, b.expression);
  EXPECT_EQ(a.gold_answer, b.gold_answer);
  EXPECT_EQ(a.seed, b.seed);
}

TEST(Corpus, EvaluatesByHand) {
  EXPECT_EQ(parse_problem("((3+5)*2)").gold_answer, 16);
  EXPECT_EQ(parse_problem("((3+5)*2)").n_ops, 2);
  EXPECT_EQ(parse_problem("(4-1)").gold_answer, 3);
  EXPECT_EQ(parse_problem("(2-(7*3))").gold_answer, -19);
  EXPECT_THROW(parse_problem("(3+5"), Error);
  EXPECT_THROW(parse_problem("3+5"), Error);
}

TEST(Corpus, RespectsConfiguredRanges) {
  CorpusConfig cfg;
  cfg.ops = "+";
  cfg.operand_lo = 2;
  cfg.operand_hi = 6;
  cfg.n_ops_lo = 3;
  cfg.n_ops_hi = 5;
  for (int i = 0; i < 300; ++i) {
    const auto p = generate_problem(cfg, i);
    EXPECT_EQ(p.expression.find('*'), std::string::npos);
    EXPECT_EQ(p.expression.find('-'), std::string::npos);
    EXPECT_GE(p.n_ops, 3);
    EXPECT_LE(p.n_ops, 5);
    for (char ch : p.expression)
      if (std::isdigit(static_cast<unsigned char>(ch))) EXPECT_TRUE(ch >= '2' && ch <= '6');
    EXPECT_EQ(parse_problem(p.expression).gold_answer, p.gold_answer);
  }
}

TEST(Corpus, RejectsInvalidConfig) {
  CorpusConfig cfg;
  cfg.n_ops_lo = 1;
  EXPECT_THROW(validate(cfg), Error);
  cfg = {};
  cfg.n_ops_hi = 7;
  EXPECT_THROW(validate(cfg), Error);
  cfg = {};
  cfg.ops = "/";
  EXPECT_THROW(validate(cfg), Error);
  cfg = {};
  cfg.operand_hi = 2000000000;
  cfg.n_ops_hi = 6;
  EXPECT_THROW(validate(cfg), Error);  // 6 multiplications of ~2e9 overflow
}

TEST(Corpus, RenderSolution) {
  EXPECT_EQ(render_solution(parse_problem("((3+5)*2)")), "3+5=8\n8*2=16\n#### 16");
  EXPECT_EQ(render_solution(parse_problem("(4-1)")), "4-1=3\n#### 3");
  // Both operands of the outer node are reduced left subtree first.
  EXPECT_EQ(render_solution(parse_problem("((1+2)*(6-4))")), "1+2=3\n6-4=2\n3*2=6\n#### 6");
}

TEST(Corpus, VerifyAnswer) {
  const auto p = parse_problem("((3+5)*2)");
  EXPECT_TRUE(verify_answer(p, "3+5=8\n8*2=16\n#### 16"));
  EXPECT_FALSE(verify_answer(p, "3+5=8\n8*2=16\n#### 15"));
  EXPECT_FALSE(verify_answer(p, "no marker"));
  EXPECT_FALSE(verify_answer(p, ""));
  // The last marker decides.
  EXPECT_TRUE(verify_answer(p, "#### 3\n#### 16"));
  EXPECT_FALSE(verify_answer(p, "#### 16\n#### 3"));
}

TEST(Corpus, FirstErrorIndex) {
  const Tokenizer tok;
  const auto p = parse_problem("((3+5)*2)");
  EXPECT_EQ(first_error_index(p, tok.tokenize("3+5=9\n9*2=18\n#### 18")), 0u);
  // Line 1 starts after "3+5=8\n", which is six tokens.
  EXPECT_EQ(first_error_index(p, tok.tokenize("3+5=8\n8*2=15\n#### 15")), 6u);
  EXPECT_FALSE(first_error_index(p, solution_tokens(p)).has_value());
  // Correct lines but a wrong final answer: the answer line is the error.
  EXPECT_EQ(first_error_index(p, tok.tokenize("3+5=8\n8*2=16\n#### 17")), 13u);
  // Malformed line.
  EXPECT_EQ(first_error_index(p, tok.tokenize("3+5=8\n8**2=16\n#### 16")), 6u);
}

TEST(Corpus, FirstErrorAtEosWithoutAnswer) {
  const Tokenizer tok;
  const auto p = parse_problem("((3+5)*2)");
  Tokens t = tok.tokenize("3+5=8\n");
  t.push_back(Tokenizer::kEos);
  EXPECT_EQ(first_error_index(p, t), 6u);
}

TEST(Corpus, SoundnessAndSingleDigitCorruption) {
  const Tokenizer tok;
  CorpusConfig cfg;
  Rng rng(5);
  for (int i = 0; i < 300; ++i) {
    const auto p = generate_problem(cfg, i);
    const std::string sol = render_solution(p);
    ASSERT_TRUE(verify_answer(p, sol));
    ASSERT_FALSE(first_error_index(p, solution_tokens(p)).has_value());

    // Corrupt one digit of the result of line j; the error lands inside line j.
    std::vector<std::size_t> starts{0};
    for (std::size_t k = 0; k + 1 < sol.size(); ++k)
      if (sol[k] == '\n') starts.push_back(k + 1);
    const std::size_t j = rng.below(starts.size() - 1);  // a reduction line
    const std::size_t eq = sol.find('=', starts[j]);
    const std::size_t end = sol.find('\n', starts[j]);
    std::size_t pos = eq + 1;
    if (sol[pos] == '-') ++pos;
    pos += rng.below(end - pos);
    std::string bad = sol;
    bad[pos] = static_cast<char>('0' + (bad[pos] - '0' + 1 + static_cast<int>(rng.below(9))) % 10);
    const auto idx = first_error_index(p, tok.tokenize(bad));
    ASSERT_TRUE(idx.has_value()) << bad;
    EXPECT_GE(*idx, starts[j]);
    EXPECT_LT(*idx, end);
  }
}

TEST(Corpus, BuildCorpusFiles) {
  CorpusConfig cfg;
  cfg.n_train = 2000;
  cfg.n_eval = 300;
  const fs::path a = scratch_dir("corpus_a"), b = scratch_dir("corpus_b");
  build_corpus(cfg, a);
  build_corpus(cfg, b);
  EXPECT_EQ(slurp(a / "train.jsonl"), slurp(b / "train.jsonl"));
  EXPECT_EQ(slurp(a / "eval.jsonl"), slurp(b / "eval.jsonl"));

  const auto train = read_problems(a / "train.jsonl");
  const auto eval = read_problems(a / "eval.jsonl");
  EXPECT_EQ(train.size(), 2000u);
  EXPECT_EQ(eval.size(), 300u);
  std::set<std::string> train_set;
  for (const auto& p : train) train_set.insert(p.expression);
  for (const auto& p : eval) EXPECT_FALSE(train_set.count(p.expression)) << p.expression;

  std::ifstream in(a / "train.jsonl");
  std::string line;
  std::getline(in, line);
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.at("solution_text").get<std::string>(), render_solution(train[0]));
  EXPECT_EQ(j.at("gold_answer").get<std::int64_t>(), train[0].gold_answer);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Corpus, ReadMissingFileIsIoError) {
  try {
    read_problems("/nonexistent/cgpo/train.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
  }
}

TEST(Corpus, PromptAndSolutionTokens) {
  const Tokenizer tok;
  const auto p = parse_problem("(4-1)");
  const Tokens x = prompt_tokens(p);
  EXPECT_EQ(x.front(), Tokenizer::kBos);
  EXPECT_EQ(x.back(), Tokenizer::kSep);
  EXPECT_EQ(tok.completion_text(std::span<const TokenId>(x).subspan(1, x.size() - 2)), "(4-1)");
  const Tokens y = solution_tokens(p);
  EXPECT_EQ(y.back(), Tokenizer::kEos);
  EXPECT_EQ(tok.completion_text(y), "4-1=3\n#### 3");
}
