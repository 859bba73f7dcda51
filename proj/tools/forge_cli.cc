// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: data generation, training, evaluation, probes and
// full experiment runs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "forge/corpus.hpp"
#include "forge/diagnostics.hpp"
#include "forge/error.hpp"
#include "forge/eval.hpp"
#include "forge/model.hpp"
#include "forge/runner.hpp"
#include "forge/tokenizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeError = 1;
constexpr int kConfigError = 2;

void log_line(const std::string& line) { std::cerr << line << std::endl; }

fs::path out_dir_or_default(const std::string& out) { return out.empty() ? forge::default_out_dir() : fs::path(out); }

forge::Tokenizer tokenizer_for(const fs::path& checkpoint, const std::string& explicit_path) {
  const fs::path path = explicit_path.empty() ? checkpoint.parent_path() / "tokenizer.json" : fs::path(explicit_path);
  return forge::Tokenizer::load(path);
}

void emit(const json& j, const std::string& out_file) {
  if (out_file.empty()) {
    std::cout << j.dump(2) << std::endl;
    return;
  }
  const fs::path path(out_file);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  forge::require(static_cast<bool>(out), forge::ErrorKind::io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual memorization experiments on small transformers", "forge"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(forge::kVersion));

  std::string config, out, tokenizer, checkpoint, dataset, dataset_a, dataset_b, dataset_m, out_file;
  std::optional<std::int64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<double> eta;
  std::size_t k = 10;
  std::size_t sample = forge::kDefaultGradSample;

  auto* gen = app.add_subcommand("gen-data", "Generate the datasets of a config and write them as JSONL");
  gen->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "Output directory (default: $FACTOID_FORGE_OUT or ./forge_out)");
  gen->add_option("--seed", seed, "Run seed (default: every seed in the config)");

  auto* train = app.add_subcommand("train", "Train every stage of a config for one seed and keep the checkpoints");
  train->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "Output directory");
  train->add_option("--seed", seed, "Run seed (default: first seed in the config)");

  auto* eval = app.add_subcommand("eval", "Greedy exact-match evaluation of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--dataset", dataset, "Dataset JSONL")->required()->check(CLI::ExistingFile);
  eval->add_option("--tokenizer", tokenizer, "Tokenizer JSON (default: next to the checkpoint)");
  eval->add_option("--out", out_file, "Write the report here instead of stdout");

  auto* probe = app.add_subcommand("probe", "Logit-lens layer histogram of a checkpoint");
  probe->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  probe->add_option("--dataset", dataset, "Dataset JSONL")->required()->check(CLI::ExistingFile);
  probe->add_option("--tokenizer", tokenizer, "Tokenizer JSON (default: next to the checkpoint)");
  probe->add_option("--k", k, "Top-k cut")->check(CLI::PositiveNumber);
  probe->add_option("--out", out_file, "Write the histogram here instead of stdout");

  auto* grad = app.add_subcommand("grad", "Gradient alignment and the mixing term of the one-step loss change");
  grad->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  grad->add_option("--dataset-a", dataset_a, "Earlier-stage dataset")->required()->check(CLI::ExistingFile);
  grad->add_option("--dataset-b", dataset_b, "Current-stage dataset")->required()->check(CLI::ExistingFile);
  grad->add_option("--dataset-m", dataset_m, "Mixing dataset")->check(CLI::ExistingFile);
  grad->add_option("--tokenizer", tokenizer, "Tokenizer JSON (default: next to the checkpoint)");
  grad->add_option("--sample", sample, "Examples per gradient (0: all)");
  grad->add_option("--seed", seed, "Subsample seed");
  grad->add_option("--eta", eta, "Step size for the mixing term (omit to skip it)");
  grad->add_option("--out", out_file, "Write the record here instead of stdout");

  auto* run = app.add_subcommand("run", "Run a full experiment and write results.csv, report.json, manifest.json");
  run->add_option("--config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "Output directory");
  run->add_option("--workers", workers, "Concurrent runs")->check(CLI::PositiveNumber);
  run->add_option("--seed", seed, "Run only this seed");

  auto* report = app.add_subcommand("report", "Recompute per-cell mean and std from a results.csv");
  report->add_option("--out", out, "Directory holding results.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen) {
      const auto plan = forge::load_config(config);
      const auto dir = out_dir_or_default(out);
      for (const auto& cell : plan.cells) {
        for (auto s : seed ? std::vector<std::int64_t>{*seed} : cell.seeds) {
          const auto registry = forge::build_datasets(cell, s);
          const auto target = dir / cell.run_id / ("seed" + std::to_string(s)) / "data";
          for (const auto& [id, d] : registry) std::cout << forge::save_dataset(d, target).string() << '\n';
        }
      }
    } else if (*train) {
      const auto plan = forge::load_config(config);
      forge::RunOptions options;
      options.out_dir = out_dir_or_default(out);
      options.log = log_line;
      json runs = json::array();
      bool ok = true;
      for (const auto& cell : plan.cells) {
        auto forced = cell;
        forced.save_checkpoints = true;
        const auto result = forge::run_seed(forced, seed.value_or(cell.seeds.front()), options);
        ok = ok && result.ok;
        runs.push_back(result.detail);
      }
      for (auto& r : runs) {
        for (auto& s : r["stages"]) s["result"].erase("train_curve");
      }
      std::cout << runs.dump(2) << std::endl;
      return ok ? kOk : kRuntimeError;
    } else if (*eval) {
      const auto model = forge::load_checkpoint(checkpoint);
      const auto tok = tokenizer_for(checkpoint, tokenizer);
      emit(forge::to_json(forge::exact_match(model, tok, forge::load_dataset(dataset))), out_file);
    } else if (*probe) {
      const auto model = forge::load_checkpoint(checkpoint);
      const auto tok = tokenizer_for(checkpoint, tokenizer);
      emit(forge::to_json(forge::logit_lens(model, tok, forge::load_dataset(dataset), k)), out_file);
    } else if (*grad) {
      const auto model = forge::load_checkpoint(checkpoint);
      const auto tok = tokenizer_for(checkpoint, tokenizer);
      const auto a = forge::load_dataset(dataset_a);
      const auto b = forge::load_dataset(dataset_b);
      const auto s = static_cast<std::uint64_t>(seed.value_or(0));
      const auto n = sample == 0 ? 0 : std::min({sample, a.size(), b.size()});
      json result = {{"grad_alignment", forge::to_json(forge::grad_alignment(model, tok, a, b, n, s))}};
      if (eta) {
        std::optional<forge::Dataset> m;
        if (!dataset_m.empty()) m = forge::load_dataset(dataset_m);
        result["delta2"] =
            forge::to_json(forge::delta2_estimate(model, tok, a, b, m ? &*m : nullptr, *eta, sample, s));
      }
      emit(result, out_file);
    } else if (*run) {
      const auto plan = forge::load_config(config);
      const auto dir = out_dir_or_default(out);
      forge::RunOptions options;
      options.out_dir = dir;
      options.workers = workers;
      if (seed) options.seeds = std::vector<std::int64_t>{*seed};
      options.log = log_line;
      const auto result = forge::run_experiment(plan, options);
      forge::emit_report(result, dir);
      std::cout << (dir / "results.csv").string() << std::endl;
      return result.all_ok() ? kOk : kRuntimeError;
    } else if (*report) {
      const auto dir = out_dir_or_default(out);
      const auto rows = forge::read_results_csv(dir / "results.csv");
      std::printf("%-40s %5s %-14s %-24s %-22s %3s %12s %12s\n", "run_id", "stage", "dataset", "strategy", "metric",
                  "n", "mean", "std");
      for (const auto& s : forge::summarize(rows)) {
        std::printf("%-40s %5zu %-14s %-24s %-22s %3zu %12.6g %12.6g\n", s.run_id.c_str(), s.stage_index,
                    s.stage_dataset.c_str(), s.strategy.c_str(), s.metric.c_str(), s.n, s.mean, s.std);
      }
    }
  } catch (const forge::Error& e) {
    std::cerr << "error (" << forge::to_string(e.kind()) << "): " << e.what() << std::endl;
    return e.kind() == forge::ErrorKind::config ? kConfigError : kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kRuntimeError;
  }
  return kOk;
}
