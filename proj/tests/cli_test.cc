// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Result {
  int code = -1;
  std::string out;
};

Result Forge(const std::string& args, const std::string& env = {}) {
  const std::string cmd = env + " " + FORGE_CLI + " " + args + " 2>/dev/null";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  for (std::size_t n; (n = fread(buf, 1, sizeof buf, pipe)) > 0;) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("forge_cli_" + std::string(info->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path WriteConfig(json cfg, const std::string& name = "cfg.json") {
    const auto p = dir_ / name;
    std::ofstream(p) << cfg.dump(2);
    return p;
  }

  static json Tiny() {
    return json::parse(R"({
      "run_id": "cli",
      "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32, "max_seq_len": 40},
      "datasets": [
        {"id": "a", "generator": "kvr", "n": 5, "key_len": 3, "val_len": 2},
        {"id": "b", "generator": "kvr_disjoint", "n": 5, "key_len": 3, "val_len": 2, "exclude": ["a"]}
      ],
      "stages": [
        {"dataset": "a", "stop": {"mode": "fixed_epochs", "max_epochs": 1}},
        {"dataset": "b", "stop": {"mode": "fixed_epochs", "max_epochs": 1}}
      ],
      "seeds": [1]
    })");
  }

  fs::path dir_;
};

TEST_F(CliTest, RunHonoursOutEnvironmentVariable) {
  const auto cfg = WriteConfig(Tiny());
  const auto out = dir_ / "envout";
  const auto r = Forge("run --config " + cfg.string(), "FACTOID_FORGE_OUT=" + out.string());
  EXPECT_EQ(r.code, 0);
  EXPECT_TRUE(fs::exists(out / "results.csv"));
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
  EXPECT_TRUE(fs::exists(out / "cli" / "seed1" / "stage2.ckpt"));

  const auto rep = Forge("report --out " + out.string());
  EXPECT_EQ(rep.code, 0);
  EXPECT_NE(rep.out.find("accuracy"), std::string::npos);
}

TEST_F(CliTest, ConfigErrorsExitTwo) {
  json bad = Tiny();
  bad["stages"][0]["dataset"] = "ghost";
  EXPECT_EQ(Forge("run --config " + WriteConfig(bad).string() + " --out " + dir_.string()).code, 2);
  EXPECT_EQ(Forge("run --out " + dir_.string()).code, 2);
  EXPECT_EQ(Forge("run --config " + (dir_ / "missing.json").string()).code, 2);
  EXPECT_EQ(Forge("frobnicate").code, 2);
  EXPECT_EQ(Forge("--version").code, 0);
}

TEST_F(CliTest, RuntimeFailuresExitOne) {
  json cfg = Tiny();
  cfg["model"]["max_seq_len"] = 8;
  const auto out = dir_ / "fail";
  EXPECT_EQ(Forge("run --config " + WriteConfig(cfg).string() + " --out " + out.string()).code, 1);
  // The report is still written, with the failure recorded.
  std::ifstream in(out / "report.json");
  const auto report = json::parse(in);
  EXPECT_EQ(report["failures"].size(), 1u);
}

TEST_F(CliTest, TrainThenEvalProbeGrad) {
  const auto cfg = WriteConfig(Tiny());
  const auto out = dir_ / "train";
  EXPECT_EQ(Forge("gen-data --config " + cfg.string() + " --out " + out.string()).code, 0);
  const auto data = out / "cli" / "seed1" / "data";
  EXPECT_TRUE(fs::exists(data / "a.jsonl"));

  const auto t = Forge("train --config " + cfg.string() + " --out " + out.string());
  ASSERT_EQ(t.code, 0);
  EXPECT_NO_THROW(json::parse(t.out));
  const auto ckpt = out / "cli" / "seed1" / "stage1.ckpt";
  ASSERT_TRUE(fs::exists(ckpt));

  const auto e = Forge("eval --checkpoint " + ckpt.string() + " --dataset " + (data / "a.jsonl").string());
  ASSERT_EQ(e.code, 0);
  const auto report = json::parse(e.out);
  EXPECT_EQ(report["per_example"].size(), 5u);

  const auto p = Forge("probe --k 5 --checkpoint " + ckpt.string() + " --dataset " + (data / "a.jsonl").string());
  ASSERT_EQ(p.code, 0);
  EXPECT_EQ(json::parse(p.out)["per_layer_frequency"].size(), 2u);

  const auto g = Forge("grad --sample 3 --eta 0.001 --checkpoint " + ckpt.string() + " --dataset-a " +
                     (data / "a.jsonl").string() + " --dataset-b " + (data / "b.jsonl").string());
  ASSERT_EQ(g.code, 0);
  const auto gj = json::parse(g.out);
  EXPECT_TRUE(gj.contains("grad_alignment"));
  EXPECT_EQ(gj["delta2"]["delta2"], 0.0);

  EXPECT_EQ(Forge("eval --checkpoint " + ckpt.string() + " --dataset " + (data / "a.jsonl").string() +
                " --tokenizer " + (dir_ / "none.json").string())
                .code,
            1);
}

}  // namespace
