// cgpo: command-line driver for the corpus -> pretrain -> calibrate ->
// build-pairs -> train -> eval pipeline, plus analysis and inspection.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgpo/cgpo.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace cgpo;

namespace {

// ---------------------------------------------------------------------------
// Configuration: one flat JSON object. Defaults below, then the --config file,
// then --set key=value and the named flags (flags win).

ordered_json default_config() {
  return {
      // corpus
      {"n_train", 50000}, {"n_eval", 1000}, {"operand_lo", 0}, {"operand_hi", 9},
      {"ops", "+-*"}, {"n_ops_lo", 2}, {"n_ops_hi", 4}, {"corpus_seed", 7},
      // model
      {"n_layers", 4}, {"n_heads", 4}, {"d_model", 128}, {"d_ff", 512}, {"context_len", 256},
      {"model_seed", 0},
      // pretraining
      {"pretrain_lr", 3e-3}, {"pretrain_epochs", 1}, {"pretrain_batch", 32},
      {"pretrain_weight_decay", 0.01}, {"pretrain_warmup_ratio", 0.1}, {"pretrain_seed", 0},
      // sampling
      {"temperature", 0.7}, {"max_new_tokens", 192}, {"confidence_mode", "post"},
      // calibration
      {"q_split", 0.02}, {"q_stop", 0.02}, {"calibration_prompts", 1000}, {"calibration_seed", 11},
      // pair building
      {"k", 8}, {"m", 1}, {"max_branch_tokens", 192}, {"min_score_gap", 0.0}, {"reward", "mc"},
      {"n_rollouts", 4}, {"rollout_temperature", 0.7}, {"n_prompts", 0}, {"build_seed", 0},
      // CGPO training
      {"beta", 0.4}, {"lr", 5e-7}, {"epochs", 4}, {"batch", 128}, {"warmup_ratio", 0.1},
      {"weight_decay", 0.0}, {"grad_clip", 1.0}, {"train_seed", 0},
      // evaluation and analysis
      {"eval_max_tokens", 192}, {"positional_samples", 0}, {"positional_seed", 5},
      {"workers", 1},
  };
}

const std::vector<std::string> kCorpusKeys{"n_train", "n_eval", "operand_lo", "operand_hi",
                                           "ops", "n_ops_lo", "n_ops_hi", "corpus_seed"};
const std::vector<std::string> kModelKeys{"n_layers", "n_heads", "d_model", "d_ff", "context_len",
                                          "model_seed"};
const std::vector<std::string> kPretrainKeys{"pretrain_lr", "pretrain_epochs", "pretrain_batch",
                                             "pretrain_weight_decay", "pretrain_warmup_ratio",
                                             "pretrain_seed"};
const std::vector<std::string> kSamplingKeys{"temperature", "max_new_tokens", "confidence_mode"};
const std::vector<std::string> kCalibrateKeys{"q_split", "q_stop", "calibration_prompts",
                                              "calibration_seed"};
const std::vector<std::string> kPairKeys{"k", "m", "max_branch_tokens", "min_score_gap", "reward",
                                         "n_rollouts", "rollout_temperature", "n_prompts",
                                         "build_seed"};
const std::vector<std::string> kTrainKeys{"beta", "lr", "epochs", "batch", "warmup_ratio",
                                          "weight_decay", "grad_clip", "train_seed"};

// Parses a --set value as JSON when possible ("3", "0.5", "true"), else as a
// bare string ("+-").
json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

class Config {
 public:
  void load_file(const std::string& path) {
    if (path.empty()) return;
    std::ifstream in(path);
    require(in.good(), ErrorKind::Io, "cannot open config " + path);
    json file;
    try {
      in >> file;
    } catch (const json::exception& e) {
      fail(ErrorKind::Config, "config " + path + " is not valid JSON: " + e.what());
    }
    require(file.is_object(), ErrorKind::Config, "config must be a flat JSON object");
    for (const auto& [key, value] : file.items()) set(key, value);
  }

  void set(const std::string& key, const json& value) {
    require(values_.contains(key), ErrorKind::Config, "unknown config key: " + key);
    const json& current = values_[key];
    const bool numeric_ok = current.is_number() && value.is_number();
    require(numeric_ok || current.type() == value.type(), ErrorKind::Config,
            "config key " + key + " has the wrong type");
    if (current.is_number_integer())
      require(value.is_number_integer(), ErrorKind::Config, "config key " + key + " must be an integer");
    values_[key] = value;
  }

  void set_text(const std::string& assignment) {
    const auto eq = assignment.find('=');
    require(eq != std::string::npos, ErrorKind::Config, "--set expects key=value, got " + assignment);
    set(assignment.substr(0, eq), parse_value(assignment.substr(eq + 1)));
  }

  template <class T>
  T get(const std::string& key) const {
    return values_.at(key).get<T>();
  }

  const ordered_json& all() const { return values_; }

  ordered_json subset(const std::vector<std::vector<std::string>>& groups) const {
    ordered_json out = ordered_json::object();
    for (const auto& g : groups)
      for (const auto& k : g) out[k] = values_.at(k);
    return out;
  }

 private:
  ordered_json values_ = default_config();
};

CorpusConfig corpus_config(const Config& c) {
  CorpusConfig cc;
  cc.n_train = c.get<std::int64_t>("n_train");
  cc.n_eval = c.get<std::int64_t>("n_eval");
  cc.operand_lo = c.get<std::int64_t>("operand_lo");
  cc.operand_hi = c.get<std::int64_t>("operand_hi");
  cc.ops = c.get<std::string>("ops");
  cc.n_ops_lo = c.get<int>("n_ops_lo");
  cc.n_ops_hi = c.get<int>("n_ops_hi");
  cc.seed = c.get<std::uint64_t>("corpus_seed");
  return cc;
}

ModelConfig model_config(const Config& c) {
  ModelConfig mc;
  mc.n_layers = c.get<int>("n_layers");
  mc.n_heads = c.get<int>("n_heads");
  mc.d_model = c.get<int>("d_model");
  mc.d_ff = c.get<int>("d_ff");
  mc.context_len = c.get<int>("context_len");
  mc.seed = c.get<std::uint64_t>("model_seed");
  return mc;
}

PretrainConfig pretrain_config(const Config& c) {
  PretrainConfig pc;
  pc.optim.learning_rate = c.get<double>("pretrain_lr");
  pc.optim.weight_decay = c.get<double>("pretrain_weight_decay");
  pc.optim.warmup_ratio = c.get<double>("pretrain_warmup_ratio");
  pc.epochs = c.get<int>("pretrain_epochs");
  pc.batch_size = c.get<int>("pretrain_batch");
  pc.seed = c.get<std::uint64_t>("pretrain_seed");
  return pc;
}

SamplingConfig sampling_config(const Config& c) {
  SamplingConfig sc;
  sc.temperature = c.get<double>("temperature");
  sc.max_new_tokens = c.get<int>("max_new_tokens");
  const auto mode = c.get<std::string>("confidence_mode");
  require(mode == "post" || mode == "pre", ErrorKind::Config, "confidence_mode must be post or pre");
  sc.confidence_mode = mode == "post" ? ConfidenceMode::PostTemperature : ConfidenceMode::PreTemperature;
  validate(sc);
  return sc;
}

RewardConfig reward_config(const Config& c) {
  RewardConfig rc;
  rc.n_rollouts = c.get<int>("n_rollouts");
  rc.rollout_temperature = c.get<double>("rollout_temperature");
  rc.rollout_max_tokens = c.get<int>("max_new_tokens");
  rc.seed = derive_seed(c.get<std::uint64_t>("build_seed"), {0x7e3a});
  validate(rc);
  return rc;
}

PairBuilderConfig builder_config(const Config& c, const Thresholds& th, const std::string& model_id) {
  PairBuilderConfig bc;
  bc.k = c.get<int>("k");
  bc.thresholds = th;
  bc.sampling = sampling_config(c);
  bc.samples_per_prompt = c.get<int>("m");
  bc.max_branch_tokens = c.get<int>("max_branch_tokens");
  bc.min_score_gap = c.get<double>("min_score_gap");
  bc.seed = c.get<std::uint64_t>("build_seed");
  bc.workers = c.get<int>("workers");
  bc.model_id = model_id;
  validate(bc);
  return bc;
}

TrainConfig train_config(const Config& c) {
  TrainConfig tc;
  tc.beta = c.get<double>("beta");
  tc.learning_rate = c.get<double>("lr");
  tc.epochs = c.get<int>("epochs");
  tc.batch_size = c.get<int>("batch");
  tc.warmup_ratio = c.get<double>("warmup_ratio");
  tc.weight_decay = c.get<double>("weight_decay");
  tc.grad_clip = c.get<double>("grad_clip");
  tc.seed = c.get<std::uint64_t>("train_seed");
  validate(tc);
  return tc;
}

std::unique_ptr<RewardModel> make_reward(const Config& c, const Policy& policy) {
  const auto kind = c.get<std::string>("reward");
  if (kind == "mc") return std::make_unique<MonteCarloReward>(policy, reward_config(c));
  if (kind == "gold_prefix") return std::make_unique<GoldPrefixReward>();
  fail(ErrorKind::Config, "reward must be mc or gold_prefix, got " + kind);
}

// ---------------------------------------------------------------------------
// Run directory bookkeeping

std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot read " + p.string());
  Fnv1a h;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  require(out.good(), ErrorKind::Io, "cannot write " + p.string());
  out << text;
  require(out.good(), ErrorKind::Io, "write failed for " + p.string());
}

void write_json(const fs::path& p, const ordered_json& j) { write_text(p, j.dump(2) + "\n"); }

/// One stage invocation inside a run directory. The resolved config is
/// snapshotted before anything runs; a stage record names the config hash,
/// seed, inputs and outputs, and doubles as the cache entry.
class Stage {
 public:
  Stage(std::string name, const Config& cfg, ordered_json config_subset, fs::path out_dir,
        std::vector<fs::path> inputs, std::uint64_t seed)
      : name_(std::move(name)), out_(std::move(out_dir)), seed_(seed) {
    std::error_code ec;
    fs::create_directories(out_, ec);
    require(!ec, ErrorKind::Io, "cannot create " + out_.string() + ": " + ec.message());
    write_json(out_ / "config.json", cfg.all());
    config_hash_ = Fnv1a::to_hex(fnv1a(config_subset.dump()));
    ordered_json in = ordered_json::object();
    Fnv1a key;
    key.update(name_);
    key.update(config_subset.dump());
    for (const auto& p : inputs) {
      const std::string h = file_hash(p);
      in[p.string()] = h;
      key.update(h);
    }
    inputs_ = std::move(in);
    cache_key_ = key.hex();
    config_subset_ = std::move(config_subset);
  }

  const std::string& config_hash() const { return config_hash_; }
  const fs::path& dir() const { return out_; }
  fs::path record_path() const { return out_ / ("stage." + name_ + ".json"); }

  /// True when a previous run with the same key left all its outputs intact.
  bool cached() const {
    std::ifstream in(record_path());
    if (!in.good()) return false;
    json rec;
    try {
      in >> rec;
    } catch (const json::exception&) {
      return false;
    }
    if (rec.value("cache_key", "") != cache_key_) return false;
    for (const auto& f : rec.value("outputs", json::array()))
      if (!fs::exists(out_ / f.get<std::string>())) return false;
    return true;
  }

  ordered_json header() const {
    return {{"stage", name_}, {"config_hash", config_hash_}, {"seed", seed_}};
  }

  void finish(const std::vector<std::string>& outputs) const {
    ordered_json rec = header();
    rec["cache_key"] = cache_key_;
    rec["config"] = config_subset_;
    rec["inputs"] = inputs_;
    rec["outputs"] = outputs;
    write_json(record_path(), rec);
  }

 private:
  std::string name_;
  fs::path out_;
  std::uint64_t seed_;
  std::string config_hash_;
  std::string cache_key_;
  ordered_json inputs_;
  ordered_json config_subset_;
};

// Appends src's members to dst. Takes src by value so temporaries are safe.
void merge(ordered_json& dst, ordered_json src) {
  for (auto& [k, v] : src.items()) dst[k] = std::move(v);
}

void report_cache_hit(const Stage& s) {
  ordered_json j = s.header();
  j["cache"] = "hit";
  std::cout << j.dump() << "\n";
}

void report_done(const Stage& s, ordered_json summary) {
  ordered_json j = s.header();
  merge(j, summary);
  std::cout << j.dump() << "\n";
}

Checkpoint load_model(const std::string& path) {
  return load_checkpoint<float>(path, Tokenizer{}.fingerprint());
}

std::vector<ProblemInstance> load_problems(const std::string& path, std::size_t limit = 0) {
  auto problems = read_problems(path);
  require(!problems.empty(), ErrorKind::Io, "no problems in " + path);
  if (limit > 0 && problems.size() > limit) problems.resize(limit);
  return problems;
}

template <class Rows>
void write_table_files(const fs::path& dir, const std::string& stem, const std::vector<std::string>& header,
                       const Rows& rows, ordered_json j) {
  const auto cells = table_rows(rows);
  write_json(dir / (stem + ".json"), j);
  write_text(dir / (stem + ".txt"), text_table(header, cells));
  write_text(dir / (stem + ".csv"), csv(header, cells));
  std::cout << text_table(header, cells);
}

template <class T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      if constexpr (std::is_integral_v<T>) out.push_back(static_cast<T>(std::stoll(item)));
      else out.push_back(static_cast<T>(std::stod(item)));
    } catch (const std::exception&) {
      fail(ErrorKind::Config, "bad list element: " + item);
    }
  }
  require(!out.empty(), ErrorKind::Config, "empty list: " + text);
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

struct Args {
  std::string config_file;
  std::vector<std::string> sets;
  std::string out, corpus, model, prompts, calibration, pairs, eval_set, reference;
  std::string q_stops = "0.02,0.04,0.06,0.08";
  std::string ms = "1,2,4,8";
  std::size_t index = 0;
  bool no_train = false;
  std::string heldout;
};

Config resolve(const Args& a, const std::vector<std::pair<std::string, json>>& flags) {
  Config c;
  c.load_file(a.config_file);
  for (const auto& s : a.sets) c.set_text(s);
  for (const auto& [k, v] : flags) c.set(k, v);
  return c;
}

int cmd_gen_corpus(const Config& c, const Args& a) {
  const CorpusConfig cc = corpus_config(c);
  validate(cc);
  Stage st("gen-corpus", c, c.subset({kCorpusKeys}), a.out, {}, cc.seed);
  if (st.cached()) return report_cache_hit(st), 0;
  const CorpusSplit split = build_corpus(cc, a.out);
  st.finish({"train.jsonl", "eval.jsonl"});
  report_done(st, {{"n_train", split.train.size()}, {"n_eval", split.eval.size()}});
  return 0;
}

int cmd_pretrain(const Config& c, const Args& a) {
  const fs::path train_file = fs::path(a.corpus) / "train.jsonl";
  const PretrainConfig pc = pretrain_config(c);
  Stage st("pretrain", c, c.subset({kModelKeys, kPretrainKeys}), a.out, {train_file}, pc.seed);
  if (st.cached()) return report_cache_hit(st), 0;
  const auto corpus = load_problems(train_file.string());
  std::ofstream log(st.dir() / "pretrain_metrics.jsonl");
  auto ckpt = pretrain<float>(corpus, model_config(c), pc, [&](const PretrainStep& s) {
    log << ordered_json{{"step", s.step}, {"epoch", s.epoch}, {"loss", s.loss}, {"lr", s.lr},
                        {"grad_norm", s.grad_norm}}.dump()
        << "\n";
  });
  ckpt.provenance["config_hash"] = st.config_hash();
  save_checkpoint(ckpt, st.dir() / "model.ckpt");
  st.finish({"model.ckpt", "pretrain_metrics.jsonl"});
  report_done(st, {{"model_id", ckpt.model_id()}, {"steps", ckpt.provenance["steps"]}});
  return 0;
}

int cmd_calibrate(const Config& c, const Args& a) {
  const std::uint64_t seed = c.get<std::uint64_t>("calibration_seed");
  Stage st("calibrate", c, c.subset({kSamplingKeys, kCalibrateKeys}), a.out, {a.model, a.prompts}, seed);
  if (st.cached()) return report_cache_hit(st), 0;
  const auto model = load_model(a.model);
  const auto prompts = load_problems(a.prompts, c.get<std::size_t>("calibration_prompts"));
  SamplingConfig sc = sampling_config(c);
  sc.seed = seed;
  const auto conf = collect_confidences(model.model, prompts, sc, c.get<int>("workers"));
  const Thresholds th = calibrate(conf, c.get<double>("q_split"), c.get<double>("q_stop"));
  ordered_json report = st.header();
  merge(report, calibration_report(th, model.model_id()));
  report["n_prompts"] = prompts.size();
  write_json(st.dir() / "calibration.json", report);
  st.finish({"calibration.json"});
  report_done(st, {{"tau_split", th.tau_split}, {"tau_stop", th.tau_stop},
                   {"calibration_size", th.calibration_size}});
  return 0;
}

Thresholds load_thresholds(const std::string& path, const Config& c) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Io, "cannot open calibration " + path);
  json j;
  try {
    in >> j;
    Thresholds th = thresholds_from_json(j);
    // q values in the active config win only when they match the calibrated
    // ones; a mismatch means the calibration is stale.
    require(th.q_split == c.get<double>("q_split") && th.q_stop == c.get<double>("q_stop"),
            ErrorKind::Config, "calibration file was made with different q_split/q_stop");
    return th;
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, "malformed calibration " + path + ": " + e.what());
  }
}

int cmd_build_pairs(const Config& c, const Args& a) {
  Stage st("build-pairs", c, c.subset({kSamplingKeys, kPairKeys}), a.out,
           {a.model, a.prompts, a.calibration}, c.get<std::uint64_t>("build_seed"));
  if (st.cached()) return report_cache_hit(st), 0;
  const auto model = load_model(a.model);
  const auto prompts = load_problems(a.prompts, c.get<std::size_t>("n_prompts"));
  const Thresholds th = load_thresholds(a.calibration, c);
  const auto reward = make_reward(c, model.model);
  const auto ds = build_dataset(model.model, *reward, prompts, builder_config(c, th, model.model_id()));
  write_triplets(st.dir() / "pairs.jsonl", ds.triplets);
  ordered_json report = st.header();
  merge(report, to_json(ds.report));
  write_json(st.dir() / "build_report.json", report);
  st.finish({"pairs.jsonl", "build_report.json"});
  report_done(st, to_json(ds.report));
  return 0;
}

int cmd_train(const Config& c, const Args& a) {
  const TrainConfig tc = train_config(c);
  Stage st("train", c, c.subset({kTrainKeys}), a.out, {a.model, a.pairs}, tc.seed);
  if (st.cached()) return report_cache_hit(st), 0;
  const auto initial = load_model(a.model);
  const auto triplets = read_triplets(a.pairs);
  require(!triplets.empty(), ErrorKind::Io, "pair dataset is empty: " + a.pairs);
  std::ofstream log(st.dir() / "metrics.jsonl");
  auto trained = train(initial, std::span<const PreferenceTriplet>(triplets), tc, [&](const TrainStep& s) {
    log << ordered_json{{"step", s.step},
                        {"loss", s.stats.loss},
                        {"mean_delta_theta", s.stats.mean_delta_theta},
                        {"mean_delta", s.stats.mean_delta},
                        {"margin_accuracy", s.stats.margin_accuracy},
                        {"lr", s.lr}}.dump()
        << "\n";
  });
  log.close();
  trained.provenance["config_hash"] = st.config_hash();
  save_checkpoint(trained, st.dir() / "model.ckpt");
  st.finish({"model.ckpt", "metrics.jsonl"});
  report_done(st, {{"model_id", trained.model_id()}, {"steps", trained.provenance["steps"]}});
  return 0;
}

int cmd_eval(const Config& c, const Args& a) {
  std::vector<fs::path> inputs{a.model, a.eval_set};
  if (!a.reference.empty()) inputs.insert(inputs.end(), {a.reference, a.pairs});
  Stage st("eval", c, c.subset({{"eval_max_tokens", "beta"}}), a.out, inputs, 0);
  if (st.cached()) return report_cache_hit(st), 0;
  const auto model = load_model(a.model);
  const auto problems = load_problems(a.eval_set);
  const EvalOptions eo{c.get<int>("eval_max_tokens"), c.get<int>("workers")};
  ordered_json report = st.header();
  merge(report, to_json(evaluate_accuracy(model, problems, eo)));
  if (!a.reference.empty()) {
    require(!a.pairs.empty(), ErrorKind::Config, "--reference needs --pairs");
    const auto reference = load_model(a.reference);
    const auto triplets = read_triplets(a.pairs);
    require(!triplets.empty(), ErrorKind::Io, "pair dataset is empty: " + a.pairs);
    report["margin"] = to_json(preference_margin(model, reference, triplets, c.get<double>("beta"),
                                                 c.get<int>("workers")));
  }
  write_json(st.dir() / "eval_report.json", report);
  st.finish({"eval_report.json"});
  std::cout << report.dump() << "\n";
  return 0;
}

int cmd_analyze_positional(const Config& c, const Args& a) {
  const std::uint64_t seed = c.get<std::uint64_t>("positional_seed");
  Stage st("analyze-positional", c,
           c.subset({kSamplingKeys, {"positional_samples", "positional_seed"}}), a.out,
           {a.model, a.eval_set}, seed);
  if (st.cached()) return report_cache_hit(st), 0;
  const auto model = load_model(a.model);
  const auto problems = load_problems(a.eval_set, c.get<std::size_t>("positional_samples"));
  SamplingConfig sc = sampling_config(c);
  sc.seed = seed;
  const auto samples = sample_problems(model.model, problems, sc, c.get<int>("workers"));
  const PositionalReport r = positional_stats(samples, problems);
  ordered_json j = st.header();
  merge(j, to_json(r));
  j["n_samples"] = samples.size();
  write_json(st.dir() / "positional.json", j);
  write_text(st.dir() / "positional.txt", positional_table(r));
  st.finish({"positional.json", "positional.txt"});
  std::cout << positional_table(r);
  return 0;
}

int cmd_analyze_tokens(const Config& c, const Args& a) {
  Stage st("analyze-tokens", c, ordered_json::object(), a.out, {a.pairs}, 0);
  if (st.cached()) return report_cache_hit(st), 0;
  const auto triplets = read_triplets(a.pairs);
  require(!triplets.empty(), ErrorKind::Io, "pair dataset is empty: " + a.pairs);
  ordered_json j = st.header();
  j["n_triplets"] = triplets.size();
  j["avg_tokens_per_pair"] = avg_tokens_per_pair(triplets);
  write_json(st.dir() / "tokens.json", j);
  st.finish({"tokens.json"});
  std::cout << j.dump() << "\n";
  return 0;
}

SweepSetup sweep_setup(const Config& c, const Thresholds& th, const std::string& model_id, bool no_train) {
  SweepSetup s;
  s.builder = builder_config(c, th, model_id);
  s.train = train_config(c);
  s.eval = {c.get<int>("eval_max_tokens"), c.get<int>("workers")};
  s.run_training = !no_train;
  return s;
}

int cmd_sweep_threshold(const Config& c, const Args& a) {
  const auto q_stops = parse_list<double>(a.q_stops);
  ordered_json subset = c.subset({kSamplingKeys, kCalibrateKeys, kPairKeys, kTrainKeys, {"eval_max_tokens"}});
  subset["q_stops"] = q_stops;
  subset["train"] = !a.no_train;
  std::vector<fs::path> inputs{a.model, a.prompts};
  if (!a.no_train) inputs.push_back(a.eval_set);
  Stage st("sweep-threshold", c, subset, a.out, inputs, c.get<std::uint64_t>("build_seed"));
  if (st.cached()) return report_cache_hit(st), 0;
  const auto model = load_model(a.model);
  const auto prompts = load_problems(a.prompts, c.get<std::size_t>("n_prompts"));
  std::vector<ProblemInstance> eval_problems;
  if (!a.no_train) eval_problems = load_problems(a.eval_set);
  SamplingConfig sc = sampling_config(c);
  sc.seed = c.get<std::uint64_t>("calibration_seed");
  const auto calib_prompts = load_problems(a.prompts, c.get<std::size_t>("calibration_prompts"));
  const auto conf = collect_confidences(model.model, calib_prompts, sc, c.get<int>("workers"));
  const Thresholds th = calibrate(conf, c.get<double>("q_split"), c.get<double>("q_stop"));
  const auto reward = make_reward(c, model.model);
  const auto rows = threshold_sweep(model, *reward, prompts, eval_problems, conf, q_stops,
                                    sweep_setup(c, th, model.model_id(), a.no_train));
  ordered_json j = st.header();
  j["rows"] = ordered_json::array();
  for (const auto& r : rows) j["rows"].push_back(to_json(r));
  write_table_files(st.dir(), "sweep_threshold", threshold_header(), rows, j);
  st.finish({"sweep_threshold.json", "sweep_threshold.txt", "sweep_threshold.csv"});
  return 0;
}

int cmd_sweep_scale(const Config& c, const Args& a) {
  const auto ms = parse_list<int>(a.ms);
  ordered_json subset = c.subset({kSamplingKeys, kPairKeys, kTrainKeys, {"eval_max_tokens"}});
  subset["ms"] = ms;
  std::vector<fs::path> inputs{a.model, a.prompts, a.calibration, a.eval_set};
  if (!a.heldout.empty()) inputs.push_back(a.heldout);
  Stage st("sweep-scale", c, subset, a.out, inputs, c.get<std::uint64_t>("build_seed"));
  if (st.cached()) return report_cache_hit(st), 0;
  const auto model = load_model(a.model);
  const auto prompts = load_problems(a.prompts, c.get<std::size_t>("n_prompts"));
  const auto eval_problems = load_problems(a.eval_set);
  const Thresholds th = load_thresholds(a.calibration, c);
  std::vector<PreferenceTriplet> heldout;
  if (!a.heldout.empty()) heldout = read_triplets(a.heldout);
  const auto reward = make_reward(c, model.model);
  const auto rows = scaling_sweep(model, *reward, prompts, eval_problems, heldout, ms,
                                  sweep_setup(c, th, model.model_id(), false));
  ordered_json j = st.header();
  j["rows"] = ordered_json::array();
  for (const auto& r : rows) j["rows"].push_back(to_json(r));
  write_table_files(st.dir(), "sweep_scale", scaling_header(), rows, j);
  st.finish({"sweep_scale.json", "sweep_scale.txt", "sweep_scale.csv"});
  return 0;
}

int cmd_inspect(const Args& a) {
  const auto triplets = read_triplets(a.pairs);
  require(!triplets.empty(), ErrorKind::Io, "pair dataset is empty: " + a.pairs);
  require(a.index < triplets.size(), ErrorKind::Config,
          "index " + std::to_string(a.index) + " out of range (dataset has " +
              std::to_string(triplets.size()) + " triplets)");
  const auto& t = triplets[a.index];
  const Tokenizer tok;
  auto show = [&](const Tokens& ts) {
    std::string s = tok.detokenize(ts);
    std::string out;
    for (char ch : s) out += ch == '\n' ? std::string("\\n") : std::string(1, ch);
    return out;
  };
  std::cout << "triplet " << a.index << " of " << triplets.size() << "\n"
            << "prompt        " << t.prompt << "\n"
            << "s_init        " << show(t.s_init_tokens) << "\n"
            << "branch_index  " << t.branch_index << "\n"
            << "chosen        " << show(t.chosen_tokens) << "\n"
            << "  score " << t.chosen_score << ", stop " << to_string(t.stop_chosen) << ", "
            << t.chosen_tokens.size() << " tokens\n"
            << "rejected      " << show(t.rejected_tokens) << "\n"
            << "  score " << t.rejected_score << ", stop " << to_string(t.stop_rejected) << ", "
            << t.rejected_tokens.size() << " tokens\n"
            << "tau_split     " << t.tau_split << "\n"
            << "tau_stop      " << t.tau_stop << "\n"
            << "model_id      " << t.model_id << "\n"
            << "seed          " << t.seed << "\n";
  return 0;
}

void print_error(const std::string& kind, const std::string& message, int code) {
  std::cerr << ordered_json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Confidence-guided step preference optimization on synthetic arithmetic"};
  app.require_subcommand(1);
  Args a;
  std::vector<std::pair<std::string, json>> flags;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", a.config_file, "Flat JSON config file");
    sub->add_option("--set", a.sets, "Override a config key: key=value (repeatable)");
  };
  // Named flags write straight into the config overlay.
  auto flag = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(
        name, [&flags, key](const std::string& v) { flags.emplace_back(key, parse_value(v)); }, help);
  };

  auto* gen = app.add_subcommand("gen-corpus", "Generate train/eval problem files");
  common(gen);
  gen->add_option("--out", a.out, "Output directory")->required();

  auto* pre = app.add_subcommand("pretrain", "Train the initial policy on gold solutions");
  common(pre);
  pre->add_option("--corpus", a.corpus, "Corpus directory from gen-corpus")->required();
  pre->add_option("--out", a.out, "Output directory")->required();

  auto* cal = app.add_subcommand("calibrate", "Sample once per prompt and compute thresholds");
  common(cal);
  cal->add_option("--model", a.model, "Checkpoint")->required();
  cal->add_option("--prompts", a.prompts, "Problems JSONL")->required();
  flag(cal, "--q-split", "q_split", "Split quantile");
  flag(cal, "--q-stop", "q_stop", "Stop quantile");
  cal->add_option("--out", a.out, "Output directory")->required();

  auto* bp = app.add_subcommand("build-pairs", "Build preference triplets");
  common(bp);
  bp->add_option("--model", a.model, "Checkpoint")->required();
  bp->add_option("--prompts", a.prompts, "Problems JSONL")->required();
  bp->add_option("--calibration", a.calibration, "calibration.json")->required();
  flag(bp, "--k", "k", "Candidates per branch point");
  flag(bp, "--m", "m", "Samples per prompt");
  flag(bp, "--q-split", "q_split", "Expected split quantile of the calibration");
  flag(bp, "--q-stop", "q_stop", "Expected stop quantile of the calibration");
  bp->add_option("--out", a.out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Fine-tune on preference triplets");
  common(tr);
  tr->add_option("--model", a.model, "Initial checkpoint (also the frozen reference)")->required();
  tr->add_option("--pairs", a.pairs, "Triplet JSONL")->required();
  flag(tr, "--beta", "beta", "Inverse temperature");
  flag(tr, "--lr", "lr", "Peak learning rate");
  flag(tr, "--epochs", "epochs", "Epochs");
  flag(tr, "--batch", "batch", "Batch size");
  tr->add_option("--out", a.out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Greedy accuracy (and optional preference margin)");
  common(ev);
  ev->add_option("--model", a.model, "Checkpoint")->required();
  ev->add_option("--eval-set", a.eval_set, "Problems JSONL")->required();
  ev->add_option("--reference", a.reference, "Reference checkpoint for the margin report");
  ev->add_option("--pairs", a.pairs, "Triplets for the margin report");
  ev->add_option("--out", a.out, "Output directory")->required();

  auto* an = app.add_subcommand("analyze", "Analysis reports");
  an->require_subcommand(1);
  auto* pos = an->add_subcommand("positional", "First error vs lowest confidence position");
  common(pos);
  pos->add_option("--model", a.model, "Checkpoint")->required();
  pos->add_option("--eval-set", a.eval_set, "Problems JSONL")->required();
  pos->add_option("--out", a.out, "Output directory")->required();
  auto* tokens = an->add_subcommand("tokens", "Average tokens per pair");
  common(tokens);
  tokens->add_option("--pairs", a.pairs, "Triplet JSONL")->required();
  tokens->add_option("--out", a.out, "Output directory")->required();
  auto* sth = an->add_subcommand("sweep-threshold", "Rebuild (and retrain) across q_stop values");
  common(sth);
  sth->add_option("--model", a.model, "Initial checkpoint")->required();
  sth->add_option("--prompts", a.prompts, "Problems JSONL")->required();
  sth->add_option("--eval-set", a.eval_set, "Problems JSONL for accuracy");
  sth->add_option("--q-stops", a.q_stops, "Comma-separated q_stop values")->capture_default_str();
  sth->add_flag("--no-train", a.no_train, "Only rebuild datasets");
  sth->add_option("--out", a.out, "Output directory")->required();
  auto* ssc = an->add_subcommand("sweep-scale", "Build and train across samples per prompt");
  common(ssc);
  ssc->add_option("--model", a.model, "Initial checkpoint")->required();
  ssc->add_option("--prompts", a.prompts, "Problems JSONL")->required();
  ssc->add_option("--calibration", a.calibration, "calibration.json")->required();
  ssc->add_option("--eval-set", a.eval_set, "Problems JSONL for accuracy")->required();
  ssc->add_option("--heldout", a.heldout, "Held-out triplets for mean delta_theta");
  ssc->add_option("--ms", a.ms, "Comma-separated m values")->capture_default_str();
  ssc->add_option("--out", a.out, "Output directory")->required();

  auto* ins = app.add_subcommand("inspect", "Pretty-print one triplet");
  ins->add_option("--pairs", a.pairs, "Triplet JSONL")->required();
  ins->add_option("--index", a.index, "Triplet index")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("Config", e.what(), 2);
    return 2;
  }

  try {
    if (*ins) return cmd_inspect(a);
    if (sth->parsed() && !a.no_train && a.eval_set.empty())
      fail(ErrorKind::Config, "sweep-threshold needs --eval-set unless --no-train");
    const Config c = resolve(a, flags);
    if (*gen) return cmd_gen_corpus(c, a);
    if (*pre) return cmd_pretrain(c, a);
    if (*cal) return cmd_calibrate(c, a);
    if (*bp) return cmd_build_pairs(c, a);
    if (*tr) return cmd_train(c, a);
    if (*ev) return cmd_eval(c, a);
    if (*pos) return cmd_analyze_positional(c, a);
    if (*tokens) return cmd_analyze_tokens(c, a);
    if (*sth) return cmd_sweep_threshold(c, a);
    if (*ssc) return cmd_sweep_scale(c, a);
  } catch (const Error& e) {
    print_error(to_string(e.kind()), e.what(), exit_code(e.kind()));
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    print_error("Config", e.what(), 2);
    return 2;
  } catch (const fs::filesystem_error& e) {
    print_error("Io", e.what(), 3);
    return 3;
  }
  return 2;
}
