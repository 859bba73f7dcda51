// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forge/corpus.hpp"
#include "forge/model.hpp"
#include "forge/tokenizer.hpp"
#include "forge/training.hpp"

namespace forge {

struct DatasetSpec {
  std::string id;
  std::string generator;
  std::uint64_t seed = 0;
  nlohmann::json params;  // generator-specific fields, validated on load
};

struct DiagnosticsConfig {
  std::optional<std::size_t> logit_lens_k;
  std::optional<std::size_t> grad_sample;
  std::optional<std::size_t> delta2_sample;
  std::optional<double> delta2_eta;  // defaults to the stage learning rate
};

struct GridAxis {
  std::string name;
  std::string path;  // JSON pointer into the config
  std::vector<nlohmann::json> values;
  std::vector<std::string> labels;  // optional, one per value
};

/// One fully resolved experiment (a single grid cell).
struct ExperimentConfig {
  std::string run_id;
  TokenizerMode tokenizer = TokenizerMode::chars;
  ModelConfig model;
  bool vocab_from_tokenizer = true;
  std::vector<DatasetSpec> datasets;
  std::vector<StageSpec> stages;
  std::string eval_on;
  std::vector<std::int64_t> seeds{1, 2, 3};
  std::size_t workers = 1;
  DiagnosticsConfig diagnostics;
  bool save_checkpoints = true;
  std::filesystem::path base_dir;  // relative data paths resolve against this
};

/// A config file: the base experiment plus the grid cells derived from it.
struct ExperimentPlan {
  nlohmann::json normalized;  // base config with defaults filled in
  std::string config_hash;
  std::vector<GridAxis> grid;
  std::vector<ExperimentConfig> cells;  // one per grid point, in grid order
};

/// Parses and validates; errors are ErrorKind::config with a JSON-pointer
/// path to the offending field.
ExperimentPlan parse_plan(const nlohmann::json& raw, const std::filesystem::path& base_dir = {});
ExperimentPlan load_config(const std::filesystem::path& path);

/// 64-bit FNV-1a of the text, as 16 hex digits.
std::string fnv1a_hex(std::string_view text);

/// Effective seeds for one run of one experiment.
std::uint64_t dataset_seed(std::int64_t run_seed, std::size_t dataset_index, std::uint64_t spec_seed);
std::uint64_t model_seed(std::int64_t run_seed, std::uint64_t spec_seed);
std::uint64_t stage_seed(std::int64_t run_seed, std::size_t stage_index, std::uint64_t spec_seed);

DatasetRegistry build_datasets(const ExperimentConfig& cfg, std::int64_t run_seed);
Tokenizer build_tokenizer(const ExperimentConfig& cfg, const DatasetRegistry& registry);

/// Stages and model config with the run seed folded into every seed field.
std::vector<StageSpec> seeded_stages(const ExperimentConfig& cfg, std::int64_t run_seed);
ModelConfig seeded_model(const ExperimentConfig& cfg, const Tokenizer& tok, std::int64_t run_seed);

struct MetricRow {
  std::string run_id;
  std::int64_t seed = 0;
  std::size_t stage_index = 0;
  std::string stage_dataset;
  std::string strategy;
  std::string metric;
  double value = 0.0;

  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

struct SummaryRow {
  std::string run_id;
  std::size_t stage_index = 0;
  std::string stage_dataset;
  std::string strategy;
  std::string metric;
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 when n == 1
};

struct SeedRun {
  std::string run_id;
  std::int64_t seed = 0;
  bool ok = true;
  std::string error_kind;
  std::string error;
  std::vector<MetricRow> rows;
  nlohmann::json detail;  // per-stage results and diagnostic records
};

struct ExperimentReport {
  std::string config_hash;
  nlohmann::json config;
  std::vector<SeedRun> runs;  // grid order, then seed order
  std::vector<MetricRow> rows;
  std::vector<SummaryRow> summary;

  bool all_ok() const;
};

struct RunOptions {
  std::filesystem::path out_dir;  // checkpoints and data land here when set
  std::optional<std::size_t> workers;
  std::optional<std::vector<std::int64_t>> seeds;
  std::function<void(const std::string&)> log;
};

/// One pipeline run with diagnostics. Never throws for stage failures; they
/// are recorded in the result.
SeedRun run_seed(const ExperimentConfig& cfg, std::int64_t seed, const RunOptions& options = {});

ExperimentReport run_experiment(const ExperimentPlan& plan, const RunOptions& options = {});

std::vector<SummaryRow> summarize(const std::vector<MetricRow>& rows);

std::string results_csv(const std::vector<MetricRow>& rows);
std::vector<MetricRow> parse_results_csv(std::string_view text);
std::vector<MetricRow> read_results_csv(const std::filesystem::path& path);

nlohmann::json to_json(const ExperimentReport& r);

/// Writes results.csv, report.json and manifest.json into out_dir.
void emit_report(const ExperimentReport& report, const std::filesystem::path& out_dir);

/// `FACTOID_FORGE_OUT` when set, else ./forge_out.
std::filesystem::path default_out_dir();

/// Location of the bundled word list and corpus.
std::filesystem::path data_dir();

inline constexpr std::string_view kVersion = "0.1.0";

}  // namespace forge
