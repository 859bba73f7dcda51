// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace forge {

enum class DatasetKind { factoid, nonfactoid, mix_random, mix_generic };

std::string_view to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(std::string_view name);

struct Triple {
  std::string subject;
  std::string relation;
  std::string object;

  friend bool operator==(const Triple&, const Triple&) = default;
};

struct Example {
  std::string prompt;
  std::string response;
  std::optional<Triple> triple;
  // Id of the dataset this example was drawn from when it was merged into
  // another one (replay, mixing); empty for generator output.
  std::string origin;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
  std::string id;
  DatasetKind kind = DatasetKind::factoid;
  std::vector<Example> examples;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return examples.size(); }
  bool empty() const noexcept { return examples.empty(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline constexpr std::string_view kKvrAlphabet = "abcdefghijklmnopqrstuvwxyz0123456789";

/// Random key-value recall pairs: "The value of key {key} is?" -> value.
/// Keys are pairwise distinct; values are independent draws.
Dataset gen_kvr(std::size_t n, std::size_t key_len, std::size_t val_len, std::uint64_t seed,
                std::string id = "kvr");

/// Same generator, but keys already present in `exclude` are rejected. Used to
/// build in-domain stage-2 splits that share no prompt with stage 1.
Dataset gen_kvr_disjoint(std::size_t n, std::size_t key_len, std::size_t val_len,
                         std::uint64_t seed, std::span<const Dataset* const> exclude,
                         std::string id = "kvr");

/// "The {relation} of {subject} is?" over generated nonsense words.
Dataset gen_templated_factoids(std::size_t n, std::size_t n_subjects, std::size_t n_relations,
                               std::uint64_t seed, std::string id = "templated");

/// Words are drawn uniformly with replacement.
Dataset gen_random_word_sequences(std::size_t n, std::size_t words_per_seq,
                                  std::span<const std::string> wordlist, std::uint64_t seed,
                                  std::string id = "random_words");

/// Passages of `words_per_passage` consecutive words cut from the documents of
/// a plain-text file (one document per line). Every distinct window is a
/// candidate; `n` of them are drawn without replacement.
Dataset load_generic_corpus(const std::filesystem::path& path, std::size_t n,
                            std::size_t words_per_passage, double split_fraction,
                            std::uint64_t seed, std::string id = "generic");

/// "What is {a} plus {b}?" -> decimal sum, operands in [0, max_operand].
Dataset gen_arithmetic_nonfactoid(std::size_t n, std::size_t max_operand, std::uint64_t seed,
                                  std::string id = "arithmetic");

std::vector<std::string> load_wordlist(const std::filesystem::path& path);

struct OverlapReport {
  struct Collision {
    std::string subject;
    std::string object;
    std::size_t factoid_index = 0;
    std::size_t source_index = 0;
  };
  double fraction = 0.0;
  std::size_t total_pairs = 0;
  std::vector<Collision> colliding_pairs;
};

/// Fraction of factoid (subject, object) pairs whose members both occur
/// verbatim inside a single example of `mix` (prompt or response).
OverlapReport check_overlap(const Dataset& factoids, const Dataset& mix);

/// JSON-lines body plus a `<stem>.manifest.json` sidecar holding id, kind and
/// seed. Returns the path of the jsonl file.
std::filesystem::path save_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& jsonl_path);

std::string dataset_to_jsonl(const Dataset& d);
std::vector<Example> examples_from_jsonl(std::string_view text);

bool prompts_disjoint(const Dataset& a, const Dataset& b);

}  // namespace forge
