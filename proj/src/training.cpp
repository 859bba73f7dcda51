// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "forge/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <sstream>

#include "forge/eval.hpp"
#include "forge/random.hpp"

namespace forge {
namespace {

constexpr std::uint64_t kShuffleStream = 0;
constexpr std::uint64_t kAssembleStream = 1;

template <class Enum, std::size_t N>
Enum parse_enum(std::string_view name, const std::array<std::pair<std::string_view, Enum>, N>& table,
                std::string_view what) {
  for (const auto& [text, value] : table) {
    if (text == name) return value;
  }
  std::string options;
  for (const auto& [text, value] : table) options += (options.empty() ? "" : ", ") + std::string(text);
  fail(ErrorKind::config, "unknown " + std::string(what) + " '" + std::string(name) + "' (expected one of " +
                              options + ")");
}

constexpr std::array<std::pair<std::string_view, StrategyKind>, 3> kStrategyNames{
    {{"none", StrategyKind::none}, {"replay", StrategyKind::replay}, {"remix", StrategyKind::remix}}};
constexpr std::array<std::pair<std::string_view, StopMode>, 3> kStopNames{
    {{"loss_threshold", StopMode::loss_threshold},
     {"fixed_epochs", StopMode::fixed_epochs},
     {"accuracy_target", StopMode::accuracy_target}}};

Example tagged(const Example& e, const std::string& origin) {
  Example out = e;
  if (out.origin.empty()) out.origin = origin;
  return out;
}

std::string format_ratio(double r) {
  std::ostringstream os;
  os << r;
  return os.str();
}

}  // namespace

std::string_view to_string(StrategyKind kind) {
  for (const auto& [text, value] : kStrategyNames) {
    if (value == kind) return text;
  }
  return "?";
}

StrategyKind strategy_kind_from_string(std::string_view name) {
  return parse_enum(name, kStrategyNames, "strategy");
}

std::string_view to_string(StopMode mode) {
  for (const auto& [text, value] : kStopNames) {
    if (value == mode) return text;
  }
  return "?";
}

StopMode stop_mode_from_string(std::string_view name) { return parse_enum(name, kStopNames, "stop mode"); }

void StrategySpec::validate() const {
  switch (kind) {
    case StrategyKind::none:
      break;
    case StrategyKind::replay:
      require(replay_ratio >= 0.0 && replay_ratio <= 1.0, ErrorKind::config,
              "replay_ratio must lie in [0, 1], got " + format_ratio(replay_ratio));
      break;
    case StrategyKind::remix:
      require(!mix_source.empty(), ErrorKind::config, "remix strategy needs a mix_source");
      require(mix_ratio.a >= 1, ErrorKind::config, "mix_ratio a must be >= 1");
      break;
  }
}

std::string StrategySpec::label() const {
  switch (kind) {
    case StrategyKind::replay:
      return "replay(" + format_ratio(replay_ratio) + ")";
    case StrategyKind::remix:
      return "remix(" + mix_source + "@" + std::to_string(mix_ratio.a) + ":" + std::to_string(mix_ratio.b) + ")";
    default:
      return "none";
  }
}

void StopRule::validate() const {
  require(max_epochs >= 1, ErrorKind::config, "stop rule max_epochs must be >= 1");
  require(std::isfinite(threshold), ErrorKind::config, "stop rule threshold must be finite");
}

void OptimizerConfig::validate() const {
  require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorKind::config,
          "learning_rate must be > 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::config,
          "optimizer betas must lie in [0, 1)");
  require(epsilon > 0.0, ErrorKind::config, "optimizer epsilon must be > 0");
  require(batch_size >= 1, ErrorKind::config, "batch_size must be >= 1");
}

Adam::Adam(const OptimizerConfig& config, Index n_params)
    : config_(config), m_(Vector::Zero(n_params)), v_(Vector::Zero(n_params)) {
  config_.validate();
}

void Adam::step(Vector& params, const Vector& grad) {
  require(grad.size() == params.size() && params.size() == m_.size(), ErrorKind::config,
          "optimizer state and gradient sizes differ");
  ++t_;
  beta1_pow_ *= config_.beta1;
  beta2_pow_ *= config_.beta2;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  m_ = b1 * m_ + (1.0 - b1) * grad;
  v_ = b2 * v_ + (1.0 - b2) * grad.cwiseAbs2();
  const double c1 = 1.0 / (1.0 - beta1_pow_);
  const double c2 = 1.0 / (1.0 - beta2_pow_);
  params.array() -= config_.learning_rate * (m_.array() * c1) / ((v_.array() * c2).sqrt() + config_.epsilon);
}

nlohmann::json to_json(const StageResult& r) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : r.train_curve) curve.push_back({p.step, p.loss});
  return {{"model_checkpoint", r.model_checkpoint.string()},
          {"epochs_run", r.epochs_run},
          {"stop_reason", r.stop_reason},
          {"train_examples", r.train_examples},
          {"mix_cycles", r.mix_cycles},
          {"epoch_losses", r.epoch_losses},
          {"train_curve", curve}};
}

MixResult mix(const Dataset& d, const Dataset& m, MixRatio ratio, std::uint64_t seed) {
  require(ratio.a >= 1, ErrorKind::config, "mix ratio a must be >= 1");
  const std::size_t need = (ratio.b * d.size() + ratio.a - 1) / ratio.a;
  require(need == 0 || !m.empty(), ErrorKind::capacity,
          "mixing pool '" + m.id + "' is empty but " + std::to_string(need) + " examples are needed");
  Rng rng(seed);
  MixResult out;
  out.data.id = d.id + "+" + m.id;
  out.data.kind = d.kind;
  out.data.seed = seed;
  out.data.examples.reserve(d.size() + need);
  for (const auto& e : d.examples) out.data.examples.push_back(tagged(e, d.id));

  std::size_t taken = 0;
  bool first = true;
  while (taken < need) {
    if (!first) ++out.cycles;
    first = false;
    const std::size_t chunk = std::min(need - taken, m.size());
    for (auto i : sample_without_replacement(m.size(), chunk, rng)) {
      out.data.examples.push_back(tagged(m.examples[i], m.id));
    }
    taken += chunk;
  }
  std::ranges::shuffle(out.data.examples, rng);
  return out;
}

Dataset replay_subset(const Dataset& d_a, double r, std::uint64_t seed) {
  require(r >= 0.0 && r <= 1.0, ErrorKind::config, "replay ratio must lie in [0, 1]");
  const auto k = static_cast<std::size_t>(std::floor(r * static_cast<double>(d_a.size()) + 1e-9));
  Rng rng(seed);
  Dataset out{d_a.id, d_a.kind, {}, seed};
  for (auto i : sample_without_replacement(d_a.size(), k, rng)) {
    out.examples.push_back(tagged(d_a.examples[i], d_a.id));
  }
  return out;
}

StageData assemble_stage_data(const StageSpec& stage, const Dataset* prior_factoids,
                              const DatasetRegistry& registry, std::uint64_t seed) {
  stage.strategy.validate();
  const auto it = registry.find(stage.dataset);
  require(it != registry.end(), ErrorKind::config, "stage references undefined dataset '" + stage.dataset + "'");
  const Dataset& base = it->second;
  switch (stage.strategy.kind) {
    case StrategyKind::none:
      return {base, 0};
    case StrategyKind::replay: {
      require(prior_factoids != nullptr, ErrorKind::config,
              "replay on stage dataset '" + stage.dataset + "' needs factoids from an earlier stage");
      StageData out{base, 0};
      const auto replayed = replay_subset(*prior_factoids, stage.strategy.replay_ratio, seed);
      if (!replayed.empty()) {
        for (auto& e : out.data.examples) {
          if (e.origin.empty()) e.origin = base.id;
        }
        out.data.examples.insert(out.data.examples.end(), replayed.examples.begin(), replayed.examples.end());
      }
      return out;
    }
    case StrategyKind::remix: {
      const auto src = registry.find(stage.strategy.mix_source);
      require(src != registry.end(), ErrorKind::config,
              "remix references undefined mix_source '" + stage.strategy.mix_source + "'");
      auto mixed = mix(base, src->second, stage.strategy.mix_ratio, seed);
      return {std::move(mixed.data), mixed.cycles};
    }
  }
  fail(ErrorKind::config, "unhandled strategy");
}

StageResult train_stage(Model& model, const Tokenizer& tok, const Dataset& data, const StageSpec& stage,
                        const TrainOptions& options) {
  stage.stop.validate();
  stage.optimizer.validate();
  require(!data.empty(), ErrorKind::empty_dataset, "stage dataset '" + data.id + "' is empty");
  require(tok.vocab_size() == static_cast<std::size_t>(model.config().vocab_size), ErrorKind::config,
          "tokenizer vocabulary (" + std::to_string(tok.vocab_size()) + ") does not match model vocab_size (" +
              std::to_string(model.config().vocab_size) + ")");

  std::vector<TrainingSequence> seqs;
  seqs.reserve(data.size());
  for (const auto& e : data.examples) {
    seqs.push_back(make_training_sequence(tok.encode(e.prompt), tok.encode(e.response)));
    require(static_cast<Index>(seqs.back().inputs.size()) <= model.config().max_seq_len, ErrorKind::length,
            "example of " + std::to_string(seqs.back().inputs.size()) + " tokens in '" + data.id +
                "' exceeds max_seq_len " + std::to_string(model.config().max_seq_len) + ": " + e.prompt);
  }
  const Dataset& acc_set = options.accuracy_on ? *options.accuracy_on : data;

  Rng rng(derive_seed(stage.optimizer.seed, kShuffleStream));
  Adam adam(stage.optimizer, model.parameters().size());
  StageResult result;
  result.train_examples = data.size();
  const std::size_t bs = stage.optimizer.batch_size;
  std::vector<TrainingSequence> batch;

  for (std::size_t epoch = 1; epoch <= stage.stop.max_epochs; ++epoch) {
    const auto order = shuffled_indices(seqs.size(), rng);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(seqs[order[i]]);
      auto lg = loss_and_gradient(model, batch);
      if (!std::isfinite(lg.loss) || !lg.gradient.allFinite()) {
        throw DivergenceError("non-finite loss at step " + std::to_string(adam.steps() + 1) + " of stage on '" +
                                  data.id + "'",
                              result.train_curve);
      }
      adam.step(model.parameters(), lg.gradient);
      result.train_curve.push_back({adam.steps(), lg.loss});
      loss_sum += lg.loss;
      ++n_batches;
    }
    const double epoch_loss = loss_sum / static_cast<double>(n_batches);
    result.epoch_losses.push_back(epoch_loss);
    result.epochs_run = epoch;
    if (options.on_epoch) options.on_epoch(epoch, epoch_loss);

    if (stage.stop.mode == StopMode::loss_threshold && epoch_loss < stage.stop.threshold) {
      result.stop_reason = "loss_threshold";
      break;
    }
    if (stage.stop.mode == StopMode::accuracy_target && accuracy(model, tok, acc_set) >= stage.stop.threshold) {
      result.stop_reason = "accuracy_target";
      break;
    }
  }
  if (result.stop_reason.empty()) result.stop_reason = "max_epochs";

  if (!options.checkpoint.empty()) {
    save_checkpoint(model, options.checkpoint);
    result.model_checkpoint = options.checkpoint;
  }
  return result;
}

std::optional<Dataset> prior_factoids(const std::vector<StageSpec>& stages, std::size_t stage_index,
                                      const DatasetRegistry& registry) {
  std::optional<Dataset> out;
  for (std::size_t k = 0; k < stage_index && k < stages.size(); ++k) {
    const auto it = registry.find(stages[k].dataset);
    if (it == registry.end() || it->second.kind != DatasetKind::factoid) continue;
    if (!out) {
      out = Dataset{it->second.id, DatasetKind::factoid, {}, it->second.seed};
    } else {
      out->id += "+" + it->second.id;
    }
    for (const auto& e : it->second.examples) out->examples.push_back(tagged(e, it->second.id));
  }
  return out;
}

std::vector<PipelineRecord> run_pipeline(const ModelConfig& initial, const Tokenizer& tok,
                                         const std::vector<StageSpec>& stages,
                                         const DatasetRegistry& registry, std::string_view eval_on,
                                         const PipelineOptions& options) {
  require(!stages.empty(), ErrorKind::config, "pipeline needs at least one stage");
  const auto eval_it = registry.find(eval_on);
  require(eval_it != registry.end(), ErrorKind::config,
          "eval_on references undefined dataset '" + std::string(eval_on) + "'");

  Model model = init_model(initial);
  std::vector<PipelineRecord> records;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    const auto& stage = stages[k];
    const auto prior = prior_factoids(stages, k, registry);
    const auto data = assemble_stage_data(stage, prior ? &*prior : nullptr, registry,
                                          derive_seed(stage.optimizer.seed, kAssembleStream));
    if (options.before_stage) options.before_stage(k + 1, model, data);

    TrainOptions train;
    train.accuracy_on = &registry.find(stage.dataset)->second;
    if (!options.checkpoint_dir.empty()) {
      train.checkpoint = options.checkpoint_dir / ("stage" + std::to_string(k + 1) + ".ckpt");
    }
    PipelineRecord rec;
    rec.stage_index = k + 1;
    rec.result = train_stage(model, tok, data.data, stage, train);
    rec.result.mix_cycles = data.mix_cycles;
    rec.accuracy = accuracy(model, tok, eval_it->second);
    if (options.after_stage) options.after_stage(k + 1, model);
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace forge
