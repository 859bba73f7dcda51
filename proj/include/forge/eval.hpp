// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "forge/corpus.hpp"
#include "forge/model.hpp"
#include "forge/tokenizer.hpp"

namespace forge {

struct ExampleOutcome {
  std::string prompt;
  std::string prediction;
  std::string target;
  bool correct = false;
};

struct EvalReport {
  double accuracy = 0.0;
  std::vector<ExampleOutcome> per_example;
};

nlohmann::json to_json(const EvalReport& r);

/// Greedy decoding from `BOS prompt SEP` until EOS, `max_new_tokens`, or the
/// model's context limit. Specials are dropped from the returned text.
std::string predict(const Model& m, const Tokenizer& tok, std::string_view prompt,
                    std::size_t max_new_tokens);

/// Batched form of predict; one budget per prompt.
std::vector<std::string> predict_batch(const Model& m, const Tokenizer& tok,
                                       std::span<const std::string> prompts,
                                       std::span<const std::size_t> max_new_tokens);

/// Whitespace-trimmed, case-sensitive comparison.
bool matches(std::string_view prediction, std::string_view target);

/// Decoding budget used by exact_match: response length plus this slack.
inline constexpr std::size_t kDecodeSlack = 8;

EvalReport exact_match(const Model& m, const Tokenizer& tok, const Dataset& d);

/// Per-example correctness with the same outcome as exact_match, computed
/// from one teacher-forced pass. Greedy decoding is only run for examples
/// whose first divergent token could vanish under trimming.
std::vector<bool> correctness(const Model& m, const Tokenizer& tok, const Dataset& d);
double accuracy(const Model& m, const Tokenizer& tok, const Dataset& d);

/// The examples of `d` the model currently gets wrong.
Dataset filter_unfamiliar(const Model& m, const Tokenizer& tok, const Dataset& d);

}  // namespace forge
