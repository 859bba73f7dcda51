// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "forge/corpus.hpp"
#include "forge/error.hpp"
#include "forge/model.hpp"
#include "forge/tokenizer.hpp"

namespace forge {

enum class StrategyKind { none, replay, remix };
std::string_view to_string(StrategyKind kind);
StrategyKind strategy_kind_from_string(std::string_view name);

/// a:b means |D| : |D_M|.
struct MixRatio {
  std::size_t a = 1;
  std::size_t b = 2;

  friend bool operator==(const MixRatio&, const MixRatio&) = default;
};

struct StrategySpec {
  StrategyKind kind = StrategyKind::none;
  double replay_ratio = 0.0;
  std::string mix_source;
  MixRatio mix_ratio;

  static StrategySpec none() { return {}; }
  static StrategySpec replay(double r) { return {StrategyKind::replay, r, {}, {}}; }
  static StrategySpec remix(std::string source, MixRatio ratio = {}) {
    return {StrategyKind::remix, 0.0, std::move(source), ratio};
  }

  void validate() const;
  std::string label() const;
};

enum class StopMode { loss_threshold, fixed_epochs, accuracy_target };
std::string_view to_string(StopMode mode);
StopMode stop_mode_from_string(std::string_view name);

struct StopRule {
  StopMode mode = StopMode::accuracy_target;
  double threshold = 1.0;
  std::size_t max_epochs = 200;

  static StopRule stage1_default() { return {StopMode::accuracy_target, 1.0, 200}; }
  static StopRule stage2_default() { return {StopMode::loss_threshold, 1e-4, 200}; }

  void validate() const;
};

struct OptimizerConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Bias-corrected Adam.
class Adam {
 public:
  Adam(const OptimizerConfig& config, Index n_params);

  void step(Vector& params, const Vector& grad);
  std::size_t steps() const noexcept { return t_; }

 private:
  OptimizerConfig config_;
  Vector m_, v_;
  std::size_t t_ = 0;
  double beta1_pow_ = 1.0;
  double beta2_pow_ = 1.0;
};

struct StageSpec {
  std::string dataset;
  StrategySpec strategy;
  StopRule stop;
  OptimizerConfig optimizer;
};

struct CurvePoint {
  std::size_t step = 0;
  double loss = 0.0;
};

struct StageResult {
  std::filesystem::path model_checkpoint;  // empty when not persisted
  std::vector<CurvePoint> train_curve;
  std::vector<double> epoch_losses;
  std::size_t epochs_run = 0;
  std::string stop_reason;
  std::size_t train_examples = 0;
  std::size_t mix_cycles = 0;
};

nlohmann::json to_json(const StageResult& r);

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::vector<CurvePoint> curve)
      : Error(ErrorKind::divergence, what), curve_(std::move(curve)) {}

  const std::vector<CurvePoint>& last_finite_curve() const noexcept { return curve_; }

 private:
  std::vector<CurvePoint> curve_;
};

struct MixResult {
  Dataset data;
  std::size_t cycles = 0;  // extra passes over a pool that was too small
};

/// Every example of `d` plus ceil(b * |d| / a) examples of `m`, shuffled.
/// Examples keep their source id in `origin`.
MixResult mix(const Dataset& d, const Dataset& m, MixRatio ratio, std::uint64_t seed);

/// floor(r * |d_a|) examples drawn without replacement.
Dataset replay_subset(const Dataset& d_a, double r, std::uint64_t seed);

using DatasetRegistry = std::map<std::string, Dataset, std::less<>>;

struct StageData {
  Dataset data;
  std::size_t mix_cycles = 0;
};

StageData assemble_stage_data(const StageSpec& stage, const Dataset* prior_factoids,
                              const DatasetRegistry& registry, std::uint64_t seed);

struct TrainOptions {
  // Dataset whose greedy exact match drives accuracy_target; defaults to the
  // training data itself.
  const Dataset* accuracy_on = nullptr;
  std::filesystem::path checkpoint;
  std::function<void(std::size_t epoch, double loss)> on_epoch;
};

StageResult train_stage(Model& model, const Tokenizer& tok, const Dataset& data, const StageSpec& stage,
                        const TrainOptions& options = {});

struct PipelineRecord {
  std::size_t stage_index = 0;  // 1-based
  double accuracy = 0.0;
  StageResult result;
};

struct PipelineOptions {
  std::filesystem::path checkpoint_dir;  // empty: keep checkpoints in memory only
  // Invoked after every stage with the trained model, before the next starts.
  std::function<void(std::size_t stage_index, const Model&)> after_stage;
  // Invoked before every stage with the model it starts from and its data.
  std::function<void(std::size_t stage_index, const Model&, const StageData&)> before_stage;
};

/// Union of the factoid datasets trained in stages before `stage_index`.
std::optional<Dataset> prior_factoids(const std::vector<StageSpec>& stages, std::size_t stage_index,
                                      const DatasetRegistry& registry);

std::vector<PipelineRecord> run_pipeline(const ModelConfig& initial, const Tokenizer& tok,
                                         const std::vector<StageSpec>& stages,
                                         const DatasetRegistry& registry, std::string_view eval_on,
                                         const PipelineOptions& options = {});

}  // namespace forge
