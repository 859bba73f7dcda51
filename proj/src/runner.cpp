// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "forge/runner.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "forge/diagnostics.hpp"
#include "forge/error.hpp"
#include "forge/eval.hpp"
#include "forge/random.hpp"

#ifndef FORGE_DATA_DIR
#define FORGE_DATA_DIR "data"
#endif

namespace forge {
namespace {

using nlohmann::json;

[[noreturn]] void bad(const std::string& path, const std::string& what) {
  fail(ErrorKind::config, (path.empty() ? std::string("/") : path) + ": " + what);
}

template <class T>
T as(const json& v, const std::string& path);

template <>
std::size_t as<std::size_t>(const json& v, const std::string& path) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    bad(path, "expected a non-negative integer, got " + v.dump());
  }
  return v.get<std::size_t>();
}

template <>
std::int64_t as<std::int64_t>(const json& v, const std::string& path) {
  if (!v.is_number_integer()) bad(path, "expected an integer, got " + v.dump());
  return v.get<std::int64_t>();
}

template <>
double as<double>(const json& v, const std::string& path) {
  if (!v.is_number()) bad(path, "expected a number, got " + v.dump());
  return v.get<double>();
}

template <>
bool as<bool>(const json& v, const std::string& path) {
  if (!v.is_boolean()) bad(path, "expected true or false, got " + v.dump());
  return v.get<bool>();
}

template <>
std::string as<std::string>(const json& v, const std::string& path) {
  if (!v.is_string()) bad(path, "expected a string, got " + v.dump());
  return v.get<std::string>();
}

// Object reader that remembers which keys were consumed so leftovers can be
// rejected as unknown.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) bad(path_, "expected an object, got " + j_.dump());
  }

  std::string at(std::string_view key) const { return path_ + "/" + std::string(key); }
  const std::string& path() const { return path_; }

  bool has(std::string_view key) const {
    const auto it = j_.find(std::string(key));
    return it != j_.end() && !it->is_null();
  }

  const json& raw(std::string_view key) {
    used_.insert(std::string(key));
    const auto it = j_.find(std::string(key));
    if (it == j_.end()) bad(at(key), "required field is missing");
    return *it;
  }

  void touch(std::string_view key) { used_.insert(std::string(key)); }

  template <class T>
  T need(std::string_view key) {
    return as<T>(raw(key), at(key));
  }

  template <class T>
  T get(std::string_view key, T fallback) {
    used_.insert(std::string(key));
    return has(key) ? as<T>(j_.at(std::string(key)), at(key)) : fallback;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.contains(key)) bad(at(key), "unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string, std::less<>> used_;
};

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string grid_value_label(const json& v) {
  std::string out;
  if (v.is_string()) {
    out = v.get<std::string>();
  } else if (v.is_array() || v.is_object()) {
    for (const auto& e : v) out += (out.empty() ? "" : ":") + grid_value_label(e);
  } else {
    out = v.dump();
  }
  std::ranges::replace_if(out, [](char c) { return c == ',' || c == '"' || c == '\n' || c == '/'; }, '_');
  return out;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

json parse_model(Fields f, ModelConfig& m, bool& vocab_from_tokenizer) {
  const ModelConfig defaults;
  m.n_layers = f.get<Index>("n_layers", defaults.n_layers);
  m.d_model = f.get<Index>("d_model", defaults.d_model);
  m.n_heads = f.get<Index>("n_heads", defaults.n_heads);
  m.d_ff = f.get<Index>("d_ff", defaults.d_ff);
  m.max_seq_len = f.get<Index>("max_seq_len", defaults.max_seq_len);
  vocab_from_tokenizer = !f.has("vocab_size");
  m.vocab_size = f.get<Index>("vocab_size", defaults.vocab_size);
  m.seed = f.get<std::uint64_t>("seed", 0);
  f.finish();
  try {
    m.validate();
  } catch (const Error& e) {
    bad(f.path(), e.what());
  }
  json out = to_json(m);
  if (vocab_from_tokenizer) out.erase("vocab_size");
  return out;
}

json parse_dataset(Fields f, DatasetSpec& d, const std::set<std::string, std::less<>>& known,
                   const std::filesystem::path& base) {
  d.id = f.need<std::string>("id");
  if (d.id.empty()) bad(f.at("id"), "dataset id must be nonempty");
  if (known.contains(d.id)) bad(f.at("id"), "duplicate dataset id '" + d.id + "'");
  d.generator = f.need<std::string>("generator");
  d.seed = f.get<std::uint64_t>("seed", 0);
  json p = json::object();
  const auto positive = [&](std::string_view key, std::size_t v) {
    if (v == 0) bad(f.at(key), "must be >= 1");
    return v;
  };
  if (d.generator == "kvr" || d.generator == "kvr_disjoint") {
    p["n"] = positive("n", f.need<std::size_t>("n"));
    p["key_len"] = positive("key_len", f.get<std::size_t>("key_len", 8));
    p["val_len"] = positive("val_len", f.get<std::size_t>("val_len", 8));
    if (d.generator == "kvr_disjoint") {
      const auto& ex = f.raw("exclude");
      if (!ex.is_array() || ex.empty()) bad(f.at("exclude"), "expected a nonempty array of dataset ids");
      for (std::size_t i = 0; i < ex.size(); ++i) {
        const auto id = as<std::string>(ex[i], f.at("exclude") + "/" + std::to_string(i));
        if (!known.contains(id)) {
          bad(f.at("exclude") + "/" + std::to_string(i), "undefined dataset id '" + id + "' (define it earlier)");
        }
      }
      p["exclude"] = ex;
    }
  } else if (d.generator == "templated_factoids") {
    p["n"] = positive("n", f.need<std::size_t>("n"));
    p["n_subjects"] = positive("n_subjects", f.need<std::size_t>("n_subjects"));
    p["n_relations"] = positive("n_relations", f.need<std::size_t>("n_relations"));
  } else if (d.generator == "random_words") {
    p["n"] = positive("n", f.need<std::size_t>("n"));
    p["words_per_seq"] = positive("words_per_seq", f.need<std::size_t>("words_per_seq"));
    p["wordlist"] = f.has("wordlist") ? resolve(base, f.need<std::string>("wordlist")).string()
                                      : (data_dir() / "words.txt").string();
    p["max_word_len"] = f.get<std::size_t>("max_word_len", 0);
  } else if (d.generator == "generic_corpus") {
    p["n"] = positive("n", f.need<std::size_t>("n"));
    p["words_per_passage"] = positive("words_per_passage", f.get<std::size_t>("words_per_passage", 50));
    const double split = f.get<double>("split_fraction", 0.5);
    if (!(split > 0.0 && split < 1.0)) bad(f.at("split_fraction"), "must lie strictly between 0 and 1");
    p["split_fraction"] = split;
    p["path"] = f.has("path") ? resolve(base, f.need<std::string>("path")).string()
                              : (data_dir() / "generic_corpus.txt").string();
  } else if (d.generator == "arithmetic") {
    p["n"] = positive("n", f.need<std::size_t>("n"));
    p["max_operand"] = f.get<std::size_t>("max_operand", 99);
  } else if (d.generator == "jsonl") {
    p["path"] = resolve(base, f.need<std::string>("path")).string();
  } else {
    bad(f.at("generator"), "unknown generator '" + d.generator +
                               "' (expected kvr, kvr_disjoint, templated_factoids, random_words, generic_corpus, "
                               "arithmetic or jsonl)");
  }
  f.finish();
  d.params = p;
  json out = {{"id", d.id}, {"generator", d.generator}, {"seed", d.seed}};
  out.update(p);
  return out;
}

json parse_strategy(Fields f, StrategySpec& s, const std::set<std::string, std::less<>>& known) {
  s.kind = StrategyKind::none;
  try {
    s.kind = strategy_kind_from_string(f.get<std::string>("kind", "none"));
  } catch (const Error& e) {
    bad(f.at("kind"), e.what());
  }
  json out = {{"kind", std::string(to_string(s.kind))}};
  if (s.kind == StrategyKind::replay) {
    s.replay_ratio = f.need<double>("replay_ratio");
    if (!(s.replay_ratio >= 0.0 && s.replay_ratio <= 1.0)) bad(f.at("replay_ratio"), "must lie in [0, 1]");
    out["replay_ratio"] = s.replay_ratio;
  } else if (s.kind == StrategyKind::remix) {
    s.mix_source = f.need<std::string>("mix_source");
    if (!known.contains(s.mix_source)) bad(f.at("mix_source"), "undefined dataset id '" + s.mix_source + "'");
    if (f.has("mix_ratio")) {
      const auto& r = f.raw("mix_ratio");
      if (!r.is_array() || r.size() != 2) bad(f.at("mix_ratio"), "expected [a, b]");
      s.mix_ratio.a = as<std::size_t>(r[0], f.at("mix_ratio") + "/0");
      s.mix_ratio.b = as<std::size_t>(r[1], f.at("mix_ratio") + "/1");
      if (s.mix_ratio.a == 0) bad(f.at("mix_ratio") + "/0", "a must be >= 1");
    }
    out["mix_source"] = s.mix_source;
    out["mix_ratio"] = {s.mix_ratio.a, s.mix_ratio.b};
  }
  f.finish();
  return out;
}

json parse_stage(Fields f, StageSpec& s, std::size_t index, const std::set<std::string, std::less<>>& known,
                 bool factoid_before) {
  s.dataset = f.need<std::string>("dataset");
  if (!known.contains(s.dataset)) bad(f.at("dataset"), "undefined dataset id '" + s.dataset + "'");
  json out = {{"dataset", s.dataset}};

  if (f.has("strategy")) {
    out["strategy"] = parse_strategy(Fields(f.raw("strategy"), f.at("strategy")), s.strategy, known);
  } else {
    f.touch("strategy");
    out["strategy"] = {{"kind", "none"}};
  }
  if (s.strategy.kind == StrategyKind::replay && !factoid_before) {
    bad(f.at("strategy"), "replay needs a factoid dataset trained in an earlier stage");
  }

  s.stop = index == 0 ? StopRule::stage1_default() : StopRule::stage2_default();
  if (f.has("stop")) {
    Fields g(f.raw("stop"), f.at("stop"));
    if (g.has("mode")) {
      try {
        s.stop.mode = stop_mode_from_string(g.need<std::string>("mode"));
      } catch (const Error& e) {
        bad(g.at("mode"), e.what());
      }
    }
    s.stop.threshold = g.get<double>("threshold", s.stop.threshold);
    s.stop.max_epochs = g.get<std::size_t>("max_epochs", s.stop.max_epochs);
    if (s.stop.max_epochs == 0) bad(g.at("max_epochs"), "must be >= 1");
    g.touch("mode");
    g.finish();
  } else {
    f.touch("stop");
  }
  out["stop"] = {{"mode", std::string(to_string(s.stop.mode))},
                 {"threshold", s.stop.threshold},
                 {"max_epochs", s.stop.max_epochs}};

  if (f.has("optimizer")) {
    Fields g(f.raw("optimizer"), f.at("optimizer"));
    auto& o = s.optimizer;
    o.learning_rate = g.get<double>("learning_rate", o.learning_rate);
    if (g.has("betas")) {
      const auto& b = g.raw("betas");
      if (!b.is_array() || b.size() != 2) bad(g.at("betas"), "expected [beta1, beta2]");
      o.beta1 = as<double>(b[0], g.at("betas") + "/0");
      o.beta2 = as<double>(b[1], g.at("betas") + "/1");
    }
    o.epsilon = g.get<double>("epsilon", o.epsilon);
    o.batch_size = g.get<std::size_t>("batch_size", o.batch_size);
    o.seed = g.get<std::uint64_t>("seed", o.seed);
    g.touch("betas");
    g.finish();
    try {
      o.validate();
    } catch (const Error& e) {
      bad(f.at("optimizer"), e.what());
    }
  } else {
    f.touch("optimizer");
  }
  const auto& o = s.optimizer;
  out["optimizer"] = {{"learning_rate", o.learning_rate},
                      {"betas", {o.beta1, o.beta2}},
                      {"epsilon", o.epsilon},
                      {"batch_size", o.batch_size},
                      {"seed", o.seed}};
  f.finish();
  return out;
}

json parse_diagnostics(Fields f, DiagnosticsConfig& d) {
  json out = json::object();
  // Each probe is either absent/false (off), true (defaults) or an object.
  auto section = [&](std::string_view key) -> std::optional<Fields> {
    if (!f.has(key)) {
      f.get<bool>(key, false);
      return std::nullopt;
    }
    const auto& v = f.raw(key);
    if (v.is_boolean()) {
      if (!v.get<bool>()) return std::nullopt;
      static const json empty = json::object();
      return Fields(empty, f.at(key));
    }
    return Fields(v, f.at(key));
  };
  if (auto g = section("logit_lens")) {
    d.logit_lens_k = g->get<std::size_t>("k", 10);
    if (*d.logit_lens_k == 0) bad(g->at("k"), "must be >= 1");
    g->finish();
    out["logit_lens"] = {{"k", *d.logit_lens_k}};
  }
  if (auto g = section("grad_alignment")) {
    d.grad_sample = g->get<std::size_t>("sample", kDefaultGradSample);
    g->finish();
    out["grad_alignment"] = {{"sample", *d.grad_sample}};
  }
  if (auto g = section("delta2")) {
    d.delta2_sample = g->get<std::size_t>("sample", kDefaultGradSample);
    out["delta2"] = {{"sample", *d.delta2_sample}};
    if (g->has("eta")) {
      d.delta2_eta = g->need<double>("eta");
      if (!(*d.delta2_eta > 0.0)) bad(g->at("eta"), "must be > 0");
      out["delta2"]["eta"] = *d.delta2_eta;
    }
    g->touch("eta");
    g->finish();
  }
  f.finish();
  return out;
}

// Parses one grid-free config object; returns its normalized form.
json parse_experiment(const json& raw, const std::filesystem::path& base, ExperimentConfig& cfg) {
  Fields f(raw, "");
  cfg.base_dir = base;
  json out = json::object();
  cfg.run_id = f.need<std::string>("run_id");
  if (cfg.run_id.empty() || cfg.run_id.find_first_of(",\"\n") != std::string::npos) {
    bad("/run_id", "must be nonempty and free of commas, quotes and newlines");
  }
  out["run_id"] = cfg.run_id;

  try {
    cfg.tokenizer = tokenizer_mode_from_string(f.get<std::string>("tokenizer", "char"));
  } catch (const Error& e) {
    bad("/tokenizer", e.what());
  }
  out["tokenizer"] = std::string(to_string(cfg.tokenizer));

  static const json empty = json::object();
  out["model"] = parse_model(Fields(f.has("model") ? f.raw("model") : empty, "/model"), cfg.model,
                             cfg.vocab_from_tokenizer);
  f.touch("model");

  std::set<std::string, std::less<>> known;
  std::map<std::string, DatasetKind, std::less<>> kinds;
  const auto& ds = f.raw("datasets");
  if (!ds.is_array() || ds.empty()) bad("/datasets", "expected a nonempty array");
  out["datasets"] = json::array();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    DatasetSpec spec;
    out["datasets"].push_back(parse_dataset(Fields(ds[i], "/datasets/" + std::to_string(i)), spec, known, base));
    known.insert(spec.id);
    const auto& g = spec.generator;
    kinds[spec.id] = (g == "kvr" || g == "kvr_disjoint" || g == "templated_factoids") ? DatasetKind::factoid
                     : g == "random_words"                                             ? DatasetKind::mix_random
                     : g == "generic_corpus"                                           ? DatasetKind::mix_generic
                     : g == "arithmetic"                                               ? DatasetKind::nonfactoid
                                                                                       : DatasetKind::factoid;
    cfg.datasets.push_back(std::move(spec));
  }

  const auto& st = f.raw("stages");
  if (!st.is_array() || st.empty()) bad("/stages", "expected a nonempty array");
  out["stages"] = json::array();
  bool factoid_before = false;
  for (std::size_t i = 0; i < st.size(); ++i) {
    StageSpec s;
    out["stages"].push_back(parse_stage(Fields(st[i], "/stages/" + std::to_string(i)), s, i, known, factoid_before));
    // jsonl datasets may hold factoids; their kind is only known once loaded.
    const auto& spec = *std::ranges::find(cfg.datasets, s.dataset, &DatasetSpec::id);
    factoid_before = factoid_before || kinds[s.dataset] == DatasetKind::factoid || spec.generator == "jsonl";
    cfg.stages.push_back(std::move(s));
  }

  cfg.eval_on = f.get<std::string>("eval_on", cfg.stages.front().dataset);
  if (!known.contains(cfg.eval_on)) bad("/eval_on", "undefined dataset id '" + cfg.eval_on + "'");
  out["eval_on"] = cfg.eval_on;

  if (f.has("seeds")) {
    const auto& s = f.raw("seeds");
    if (!s.is_array() || s.empty()) bad("/seeds", "expected a nonempty array of integers");
    cfg.seeds.clear();
    for (std::size_t i = 0; i < s.size(); ++i) cfg.seeds.push_back(as<std::int64_t>(s[i], "/seeds/" + std::to_string(i)));
  } else {
    f.touch("seeds");
  }
  out["seeds"] = cfg.seeds;

  cfg.workers = f.get<std::size_t>("workers", 1);
  if (cfg.workers == 0) bad("/workers", "must be >= 1");
  out["workers"] = cfg.workers;

  out["diagnostics"] = parse_diagnostics(Fields(f.has("diagnostics") ? f.raw("diagnostics") : empty, "/diagnostics"),
                                         cfg.diagnostics);
  f.touch("diagnostics");

  cfg.save_checkpoints = f.get<bool>("save_checkpoints", true);
  out["save_checkpoints"] = cfg.save_checkpoints;

  f.touch("grid");  // handled by parse_plan
  f.finish();
  return out;
}

std::vector<GridAxis> parse_grid(const json& raw) {
  std::vector<GridAxis> grid;
  const auto it = raw.find("grid");
  if (it == raw.end() || it->is_null()) return grid;
  if (!it->is_array()) bad("/grid", "expected an array of {name, path, values}");
  for (std::size_t i = 0; i < it->size(); ++i) {
    const std::string at = "/grid/" + std::to_string(i);
    Fields f((*it)[i], at);
    GridAxis axis;
    axis.path = f.need<std::string>("path");
    axis.name = f.get<std::string>("name", axis.path);
    const auto& values = f.raw("values");
    if (!values.is_array() || values.empty()) bad(at + "/values", "expected a nonempty array");
    axis.values.assign(values.begin(), values.end());
    if (f.has("labels")) {
      const auto& labels = f.raw("labels");
      if (!labels.is_array() || labels.size() != axis.values.size()) {
        bad(at + "/labels", "expected one label per value");
      }
      for (std::size_t j = 0; j < labels.size(); ++j) {
        axis.labels.push_back(grid_value_label(as<std::string>(labels[j], at + "/labels/" + std::to_string(j))));
      }
    }
    f.touch("labels");
    f.finish();
    grid.push_back(std::move(axis));
  }
  return grid;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  require(static_cast<bool>(out), ErrorKind::io, "failed writing " + path.string());
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

constexpr std::string_view kCsvHeader = "run_id,seed,stage_index,stage_dataset,strategy,metric,value";

}  // namespace

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::filesystem::path data_dir() { return FORGE_DATA_DIR; }

std::filesystem::path default_out_dir() {
  if (const char* env = std::getenv("FACTOID_FORGE_OUT"); env != nullptr && *env != '\0') return env;
  return "forge_out";
}

ExperimentPlan parse_plan(const json& raw, const std::filesystem::path& base_dir) {
  if (!raw.is_object()) bad("", "config must be a JSON object");
  ExperimentPlan plan;
  plan.grid = parse_grid(raw);
  ExperimentConfig base;
  plan.normalized = parse_experiment(raw, base_dir, base);
  if (!plan.grid.empty()) {
    json g = json::array();
    for (const auto& a : plan.grid) {
      g.push_back({{"name", a.name}, {"path", a.path}, {"values", a.values}});
      if (!a.labels.empty()) g.back()["labels"] = a.labels;
    }
    plan.normalized["grid"] = g;
  }
  plan.config_hash = fnv1a_hex(plan.normalized.dump());
  if (plan.grid.empty()) {
    plan.cells.push_back(std::move(base));
    return plan;
  }

  json cell_base = plan.normalized;
  cell_base.erase("grid");
  std::vector<std::size_t> pick(plan.grid.size(), 0);
  while (true) {
    json cell = cell_base;
    std::string label;
    for (std::size_t a = 0; a < plan.grid.size(); ++a) {
      const auto& axis = plan.grid[a];
      const std::string at = "/grid/" + std::to_string(a) + "/path";
      json::json_pointer ptr;
      try {
        ptr = json::json_pointer(axis.path);
      } catch (const json::exception& e) {
        bad(at, std::string("invalid JSON pointer: ") + e.what());
      }
      if (!cell.contains(ptr)) bad(at, "'" + axis.path + "' does not name a field of the config");
      cell[ptr] = axis.values[pick[a]];
      label += "/" + axis.name + "=" +
               (axis.labels.empty() ? grid_value_label(axis.values[pick[a]]) : axis.labels[pick[a]]);
    }
    cell["run_id"] = cell_base["run_id"].get<std::string>() + label;
    ExperimentConfig cfg;
    parse_experiment(cell, base_dir, cfg);
    plan.cells.push_back(std::move(cfg));

    std::size_t a = plan.grid.size();
    while (a > 0) {
      --a;
      if (++pick[a] < plan.grid[a].values.size()) break;
      pick[a] = 0;
      if (a == 0) return plan;
    }
  }
}

ExperimentPlan load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::config, "cannot read config file " + path.string());
  json raw;
  try {
    raw = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::config, path.string() + ": invalid JSON: " + e.what());
  }
  return parse_plan(raw, path.parent_path());
}

std::uint64_t dataset_seed(std::int64_t run_seed, std::size_t dataset_index, std::uint64_t spec_seed) {
  return derive_seed(derive_seed(static_cast<std::uint64_t>(run_seed), 100 + dataset_index), spec_seed);
}

std::uint64_t model_seed(std::int64_t run_seed, std::uint64_t spec_seed) {
  return derive_seed(derive_seed(static_cast<std::uint64_t>(run_seed), 1), spec_seed);
}

std::uint64_t stage_seed(std::int64_t run_seed, std::size_t stage_index, std::uint64_t spec_seed) {
  return derive_seed(derive_seed(static_cast<std::uint64_t>(run_seed), 200 + stage_index), spec_seed);
}

DatasetRegistry build_datasets(const ExperimentConfig& cfg, std::int64_t run_seed) {
  DatasetRegistry reg;
  std::map<std::filesystem::path, std::vector<std::string>> wordlists;
  for (std::size_t i = 0; i < cfg.datasets.size(); ++i) {
    const auto& spec = cfg.datasets[i];
    const auto& p = spec.params;
    const auto seed = dataset_seed(run_seed, i, spec.seed);
    Dataset d;
    if (spec.generator == "kvr") {
      d = gen_kvr(p["n"], p["key_len"], p["val_len"], seed, spec.id);
    } else if (spec.generator == "kvr_disjoint") {
      std::vector<const Dataset*> exclude;
      for (const auto& id : p["exclude"]) exclude.push_back(&reg.at(id.get<std::string>()));
      d = gen_kvr_disjoint(p["n"], p["key_len"], p["val_len"], seed, exclude, spec.id);
    } else if (spec.generator == "templated_factoids") {
      d = gen_templated_factoids(p["n"], p["n_subjects"], p["n_relations"], seed, spec.id);
    } else if (spec.generator == "random_words") {
      const std::filesystem::path path = p["wordlist"].get<std::string>();
      auto [it, fresh] = wordlists.try_emplace(path);
      if (fresh) it->second = load_wordlist(path);
      std::vector<std::string> words = it->second;
      if (const std::size_t cap = p["max_word_len"]; cap > 0) {
        std::erase_if(words, [cap](const std::string& w) { return w.size() > cap; });
      }
      d = gen_random_word_sequences(p["n"], p["words_per_seq"], words, seed, spec.id);
    } else if (spec.generator == "generic_corpus") {
      d = load_generic_corpus(p["path"].get<std::string>(), p["n"], p["words_per_passage"], p["split_fraction"], seed,
                              spec.id);
    } else if (spec.generator == "arithmetic") {
      d = gen_arithmetic_nonfactoid(p["n"], p["max_operand"], seed, spec.id);
    } else {
      d = load_dataset(p["path"].get<std::string>());
      d.id = spec.id;
    }
    reg.emplace(spec.id, std::move(d));
  }
  return reg;
}

Tokenizer build_tokenizer(const ExperimentConfig& cfg, const DatasetRegistry& registry) {
  std::vector<std::string> texts;
  if (cfg.tokenizer == TokenizerMode::words) {
    for (const auto& [id, d] : registry) {
      for (const auto& e : d.examples) {
        texts.push_back(e.prompt);
        texts.push_back(e.response);
      }
    }
  }
  return Tokenizer::build(cfg.tokenizer, texts);
}

std::vector<StageSpec> seeded_stages(const ExperimentConfig& cfg, std::int64_t run_seed) {
  auto stages = cfg.stages;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    stages[k].optimizer.seed = stage_seed(run_seed, k, stages[k].optimizer.seed);
  }
  return stages;
}

ModelConfig seeded_model(const ExperimentConfig& cfg, const Tokenizer& tok, std::int64_t run_seed) {
  ModelConfig m = cfg.model;
  const auto vocab = static_cast<Index>(tok.vocab_size());
  if (cfg.vocab_from_tokenizer) {
    m.vocab_size = vocab;
  } else {
    require(m.vocab_size == vocab, ErrorKind::config,
            "/model/vocab_size: " + std::to_string(m.vocab_size) + " does not match the tokenizer's " +
                std::to_string(vocab));
  }
  m.seed = model_seed(run_seed, m.seed);
  return m;
}

SeedRun run_seed(const ExperimentConfig& cfg, std::int64_t seed, const RunOptions& options) {
  SeedRun run;
  run.run_id = cfg.run_id;
  run.seed = seed;
  run.detail = {{"run_id", cfg.run_id}, {"seed", seed}, {"stages", json::array()}, {"diagnostics", json::array()}};
  std::map<std::size_t, std::vector<MetricRow>> diag_rows;
  std::vector<PipelineRecord> records;
  std::vector<StageSpec> stages;
  std::vector<double> stage_data_acc;
  try {
    const auto registry = build_datasets(cfg, seed);
    const auto tok = build_tokenizer(cfg, registry);
    const auto model_cfg = seeded_model(cfg, tok, seed);
    stages = seeded_stages(cfg, seed);
    const Dataset& eval_set = registry.at(cfg.eval_on);

    PipelineOptions po;
    if (!options.out_dir.empty() && cfg.save_checkpoints) {
      const auto dir = options.out_dir / cfg.run_id / ("seed" + std::to_string(seed));
      po.checkpoint_dir = dir;
      std::filesystem::create_directories(dir / "data");
      tok.save(dir / "tokenizer.json");
      for (const auto& [id, d] : registry) save_dataset(d, dir / "data");
    }

    const auto& diag = cfg.diagnostics;
    auto add = [&](std::size_t stage, std::string metric, double value) {
      diag_rows[stage].push_back({cfg.run_id, seed, stage, stages[stage - 1].dataset,
                                  stages[stage - 1].strategy.label(), std::move(metric), value});
    };
    std::optional<double> prev_eval_loss;

    po.before_stage = [&](std::size_t k, const Model& model, const StageData& data) {
      if (k < 2) return;
      const Dataset& d_b = registry.at(stages[k - 1].dataset);
      const auto probe_seed = derive_seed(static_cast<std::uint64_t>(seed), 300 + k);
      if (diag.grad_sample) {
        const auto n = std::min({*diag.grad_sample, eval_set.size(), d_b.size()});
        const auto a = grad_alignment(model, tok, eval_set, d_b, n, probe_seed);
        add(k, "grad_dot", a.dot);
        add(k, "grad_cosine", a.cosine);
        add(k, "grad_norm_a", a.norm_a);
        add(k, "grad_norm_b", a.norm_b);
        run.detail["diagnostics"].push_back({{"stage_index", k}, {"grad_alignment", to_json(a)}});
      }
      if (diag.delta2_sample) {
        Dataset d_m{"mix", d_b.kind, {}, 0};
        for (const auto& e : data.data.examples) {
          if (!e.origin.empty() && e.origin != d_b.id) d_m.examples.push_back(e);
        }
        const double eta = diag.delta2_eta.value_or(stages[k - 1].optimizer.learning_rate);
        const auto est = delta2_estimate(model, tok, eval_set, d_b, d_m.empty() ? nullptr : &d_m, eta,
                                         *diag.delta2_sample, probe_seed);
        add(k, "delta2", est.delta2);
        run.detail["diagnostics"].push_back({{"stage_index", k}, {"delta2", to_json(est)}});
      }
    };
    po.after_stage = [&](std::size_t k, const Model& model) {
      stage_data_acc.push_back(accuracy(model, tok, registry.at(stages[k - 1].dataset)));
      if (diag.logit_lens_k) {
        const auto h = logit_lens(model, tok, eval_set, *diag.logit_lens_k);
        for (std::size_t l = 0; l < h.per_layer_frequency.size(); ++l) {
          add(k, "probe_frequency@L" + std::to_string(l), h.per_layer_frequency[l]);
        }
        add(k, "probe_coverage", h.coverage);
        run.detail["diagnostics"].push_back({{"stage_index", k}, {"logit_lens", to_json(h)}});
      }
      if (diag.delta2_sample) {
        const double l = TransformerObjective(model, tok).loss(eval_set);
        add(k, "eval_loss", l);
        if (prev_eval_loss) add(k, "delta1", *prev_eval_loss - l);
        prev_eval_loss = l;
      }
      if (options.log) {
        options.log(cfg.run_id + " seed " + std::to_string(seed) + ": stage " + std::to_string(k) + " done");
      }
    };
    records = run_pipeline(model_cfg, tok, stages, registry, cfg.eval_on, po);
  } catch (const Error& e) {
    run.ok = false;
    run.error_kind = std::string(to_string(e.kind()));
    run.error = e.what();
  } catch (const std::exception& e) {
    run.ok = false;
    run.error_kind = "runtime";
    run.error = e.what();
  }

  for (const auto& rec : records) {
    const auto& stage = stages[rec.stage_index - 1];
    run.rows.push_back({cfg.run_id, seed, rec.stage_index, stage.dataset, stage.strategy.label(), "accuracy",
                        rec.accuracy});
    for (auto& r : diag_rows[rec.stage_index]) run.rows.push_back(std::move(r));
    run.detail["stages"].push_back({{"stage_index", rec.stage_index},
                                    {"dataset", stage.dataset},
                                    {"strategy", stage.strategy.label()},
                                    {"accuracy", rec.accuracy},
                                    {"stage_data_accuracy", stage_data_acc.at(rec.stage_index - 1)},
                                    {"result", to_json(rec.result)}});
  }
  run.detail["ok"] = run.ok;
  if (!run.ok) {
    run.detail["error_kind"] = run.error_kind;
    run.detail["error"] = run.error;
    if (options.log) options.log(cfg.run_id + " seed " + std::to_string(seed) + " failed: " + run.error);
  }
  return run;
}

bool ExperimentReport::all_ok() const {
  return std::ranges::all_of(runs, [](const SeedRun& r) { return r.ok; });
}

ExperimentReport run_experiment(const ExperimentPlan& plan, const RunOptions& options) {
  struct Job {
    const ExperimentConfig* cfg;
    std::int64_t seed;
  };
  std::vector<Job> jobs;
  std::size_t workers = 1;
  for (const auto& cell : plan.cells) {
    workers = std::max(workers, cell.workers);
    for (auto s : options.seeds.value_or(cell.seeds)) jobs.push_back({&cell, s});
  }
  workers = std::clamp<std::size_t>(options.workers.value_or(workers), 1, std::max<std::size_t>(jobs.size(), 1));

  ExperimentReport report;
  report.config_hash = plan.config_hash;
  report.config = plan.normalized;
  report.runs.resize(jobs.size());

  std::mutex log_mutex;
  RunOptions job_options = options;
  if (options.log) {
    job_options.log = [&](const std::string& line) {
      std::lock_guard lock(log_mutex);
      options.log(line);
    };
  }
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      report.runs[i] = run_seed(*jobs[i].cfg, jobs[i].seed, job_options);
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }

  for (const auto& r : report.runs) report.rows.insert(report.rows.end(), r.rows.begin(), r.rows.end());
  report.summary = summarize(report.rows);
  return report;
}

std::vector<SummaryRow> summarize(const std::vector<MetricRow>& rows) {
  std::vector<SummaryRow> out;
  std::map<std::tuple<std::string, std::size_t, std::string, std::string, std::string>, std::size_t> index;
  std::vector<std::vector<double>> values;
  for (const auto& r : rows) {
    const auto key = std::make_tuple(r.run_id, r.stage_index, r.stage_dataset, r.strategy, r.metric);
    auto [it, fresh] = index.try_emplace(key, out.size());
    if (fresh) {
      out.push_back({r.run_id, r.stage_index, r.stage_dataset, r.strategy, r.metric, 0, 0.0, 0.0});
      values.emplace_back();
    }
    values[it->second].push_back(r.value);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& v = values[i];
    double sum = 0.0;
    for (double x : v) sum += x;
    const double mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    out[i].n = v.size();
    out[i].mean = mean;
    out[i].std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  }
  return out;
}

std::string results_csv(const std::vector<MetricRow>& rows) {
  std::string out(kCsvHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += csv_field(r.run_id) + ',' + std::to_string(r.seed) + ',' + std::to_string(r.stage_index) + ',' +
           csv_field(r.stage_dataset) + ',' + csv_field(r.strategy) + ',' + csv_field(r.metric) + ',' +
           format_double(r.value) + '\n';
  }
  return out;
}

std::vector<MetricRow> parse_results_csv(std::string_view text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n') {
      fields.push_back(std::move(field));
      field.clear();
      records.push_back(std::move(fields));
      fields.clear();
      any = false;
    } else if (c != '\r') {
      field += c;
      any = true;
    }
  }
  if (any) {
    fields.push_back(std::move(field));
    records.push_back(std::move(fields));
  }
  require(!records.empty(), ErrorKind::io, "results CSV is empty");
  std::string header;
  for (std::size_t i = 0; i < records[0].size(); ++i) header += (i ? "," : "") + records[0][i];
  require(header == kCsvHeader, ErrorKind::io, "unexpected results CSV header: " + header);

  std::vector<MetricRow> rows;
  for (std::size_t i = 1; i < records.size(); ++i) {
    const auto& f = records[i];
    require(f.size() == 7, ErrorKind::io, "results CSV line " + std::to_string(i + 1) + " has " +
                                              std::to_string(f.size()) + " fields, expected 7");
    MetricRow r;
    r.run_id = f[0];
    r.stage_dataset = f[3];
    r.strategy = f[4];
    r.metric = f[5];
    const auto parse_num = [&](const std::string& s, auto& out) {
      const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
      require(res.ec == std::errc() && res.ptr == s.data() + s.size(), ErrorKind::io,
              "results CSV line " + std::to_string(i + 1) + ": bad number '" + s + "'");
    };
    parse_num(f[1], r.seed);
    parse_num(f[2], r.stage_index);
    parse_num(f[6], r.value);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<MetricRow> read_results_csv(const std::filesystem::path& path) {
  return parse_results_csv(read_text(path));
}

nlohmann::json to_json(const ExperimentReport& r) {
  json runs = json::array();
  json failures = json::array();
  for (const auto& run : r.runs) {
    runs.push_back(run.detail);
    if (!run.ok) {
      failures.push_back({{"run_id", run.run_id}, {"seed", run.seed}, {"kind", run.error_kind}, {"error", run.error}});
    }
  }
  json summary = json::array();
  for (const auto& s : r.summary) {
    summary.push_back({{"run_id", s.run_id},
                       {"stage_index", s.stage_index},
                       {"stage_dataset", s.stage_dataset},
                       {"strategy", s.strategy},
                       {"metric", s.metric},
                       {"n", s.n},
                       {"mean", s.mean},
                       {"std", s.std}});
  }
  return {{"version", kVersion}, {"config_hash", r.config_hash}, {"summary", summary},
          {"failures", failures}, {"runs", runs}};
}

void emit_report(const ExperimentReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec, ErrorKind::io, "cannot create output directory " + out_dir.string() + ": " + ec.message());
  write_text(out_dir / "results.csv", results_csv(report.rows));
  write_text(out_dir / "report.json", to_json(report).dump(2) + "\n");
  const json manifest = {{"tool", "factoid-forge"},
                         {"version", kVersion},
                         {"config_hash", report.config_hash},
                         {"config", report.config},
                         {"files", {"results.csv", "report.json"}}};
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace forge
