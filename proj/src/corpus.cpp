// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "forge/corpus.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "forge/error.hpp"
#include "forge/random.hpp"

namespace forge {
namespace {

using ordered_json = nlohmann::ordered_json;

std::string random_string(Rng& rng, std::string_view alphabet, std::size_t len) {
  std::string s(len, ' ');
  for (auto& c : s) c = alphabet[uniform_index(rng, alphabet.size())];
  return s;
}

// Number of distinct strings of `len` symbols, saturating at SIZE_MAX.
std::size_t string_capacity(std::size_t alphabet, std::size_t len) {
  std::size_t cap = 1;
  for (std::size_t i = 0; i < len; ++i) {
    if (cap > std::numeric_limits<std::size_t>::max() / alphabet) {
      return std::numeric_limits<std::size_t>::max();
    }
    cap *= alphabet;
  }
  return cap;
}

std::string kvr_prompt(const std::string& key) { return "The value of key " + key + " is?"; }

constexpr std::string_view kConsonants = "bdfgklmnprstvz";
constexpr std::string_view kVowels = "aeiou";

// Pronounceable but meaningless: CV syllables.
std::string nonsense_word(Rng& rng, std::size_t syllables) {
  std::string w;
  for (std::size_t i = 0; i < syllables; ++i) {
    w.push_back(kConsonants[uniform_index(rng, kConsonants.size())]);
    w.push_back(kVowels[uniform_index(rng, kVowels.size())]);
  }
  return w;
}

std::vector<std::string> unique_nonsense(Rng& rng, std::size_t count, std::size_t min_syllables) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  std::size_t syllables = min_syllables;
  std::size_t misses = 0;
  while (out.size() < count) {
    auto w = nonsense_word(rng, syllables);
    if (seen.insert(w).second) {
      out.push_back(std::move(w));
      misses = 0;
    } else if (++misses > 64) {
      // Short words are running out; lengthen the rest.
      ++syllables;
      misses = 0;
    }
  }
  return out;
}

std::vector<std::string> split_whitespace(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(std::move(w));
  return words;
}

std::string join(const std::vector<std::string>& words, std::size_t begin, std::size_t end) {
  std::string out;
  for (std::size_t i = begin; i < end; ++i) {
    if (i > begin) out.push_back(' ');
    out += words[i];
  }
  return out;
}

void check_id(const std::string& id) {
  require(!id.empty(), ErrorKind::config, "dataset id must be nonempty");
  for (unsigned char c : id) {
    require(std::isalnum(c) || c == '_' || c == '-' || c == '.', ErrorKind::config,
            "dataset id '" + id + "' may only contain letters, digits, '_', '-' and '.'");
  }
}

Dataset gen_kvr_impl(std::size_t n, std::size_t key_len, std::size_t val_len, std::uint64_t seed,
                     std::span<const Dataset* const> exclude, std::string id) {
  require(key_len >= 1 && val_len >= 1, ErrorKind::config, "key_len and val_len must be >= 1");
  std::unordered_set<std::string> used;
  for (const Dataset* d : exclude) {
    for (const auto& ex : d->examples) {
      if (ex.triple) used.insert(ex.triple->subject);
    }
  }
  const std::size_t capacity = string_capacity(kKvrAlphabet.size(), key_len);
  require(capacity >= used.size() && n <= capacity - used.size(), ErrorKind::capacity,
          "cannot draw " + std::to_string(n) + " distinct keys of length " +
              std::to_string(key_len) + " (capacity " + std::to_string(capacity - used.size()) +
              ")");
  Rng rng(seed);
  Dataset d{std::move(id), DatasetKind::factoid, {}, seed};
  d.examples.reserve(n);
  while (d.examples.size() < n) {
    auto key = random_string(rng, kKvrAlphabet, key_len);
    if (!used.insert(key).second) continue;
    auto value = random_string(rng, kKvrAlphabet, val_len);
    d.examples.push_back({kvr_prompt(key), value, Triple{key, "value", value}, {}});
  }
  return d;
}

}  // namespace

std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::factoid: return "factoid";
    case DatasetKind::nonfactoid: return "nonfactoid";
    case DatasetKind::mix_random: return "mix_random";
    case DatasetKind::mix_generic: return "mix_generic";
  }
  return "factoid";
}

DatasetKind dataset_kind_from_string(std::string_view name) {
  if (name == "factoid") return DatasetKind::factoid;
  if (name == "nonfactoid") return DatasetKind::nonfactoid;
  if (name == "mix_random") return DatasetKind::mix_random;
  if (name == "mix_generic") return DatasetKind::mix_generic;
  fail(ErrorKind::config, "unknown dataset kind '" + std::string(name) + "'");
}

Dataset gen_kvr(std::size_t n, std::size_t key_len, std::size_t val_len, std::uint64_t seed,
                std::string id) {
  return gen_kvr_impl(n, key_len, val_len, seed, {}, std::move(id));
}

Dataset gen_kvr_disjoint(std::size_t n, std::size_t key_len, std::size_t val_len,
                         std::uint64_t seed, std::span<const Dataset* const> exclude,
                         std::string id) {
  return gen_kvr_impl(n, key_len, val_len, seed, exclude, std::move(id));
}

Dataset gen_templated_factoids(std::size_t n, std::size_t n_subjects, std::size_t n_relations,
                               std::uint64_t seed, std::string id) {
  require(n_subjects == 0 || n_relations <= std::numeric_limits<std::size_t>::max() / n_subjects,
          ErrorKind::capacity, "subject x relation grid too large");
  const std::size_t grid = n_subjects * n_relations;
  require(n <= grid, ErrorKind::capacity,
          "cannot draw " + std::to_string(n) + " distinct (subject, relation) pairs from a " +
              std::to_string(n_subjects) + "x" + std::to_string(n_relations) + " grid");
  Rng rng(seed);
  const auto subjects = unique_nonsense(rng, n_subjects, 3);
  const auto relations = unique_nonsense(rng, n_relations, 2);
  Dataset d{std::move(id), DatasetKind::factoid, {}, seed};
  d.examples.reserve(n);
  for (std::size_t cell : sample_without_replacement(grid, n, rng)) {
    const auto& subject = subjects[cell / n_relations];
    const auto& relation = relations[cell % n_relations];
    auto object = nonsense_word(rng, 2 + uniform_index(rng, 2));
    d.examples.push_back({"The " + relation + " of " + subject + " is?", object,
                          Triple{subject, relation, object}, {}});
  }
  return d;
}

Dataset gen_random_word_sequences(std::size_t n, std::size_t words_per_seq,
                                  std::span<const std::string> wordlist, std::uint64_t seed,
                                  std::string id) {
  require(!wordlist.empty(), ErrorKind::config, "random word sequences need a nonempty wordlist");
  Rng rng(seed);
  Dataset d{std::move(id), DatasetKind::mix_random, {}, seed};
  d.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::string seq;
    for (std::size_t w = 0; w < words_per_seq; ++w) {
      if (w > 0) seq.push_back(' ');
      seq += wordlist[uniform_index(rng, wordlist.size())];
    }
    d.examples.push_back({"Memorize the following random-string passage: " + seq, seq, {}, {}});
  }
  return d;
}

Dataset load_generic_corpus(const std::filesystem::path& path, std::size_t n,
                            std::size_t words_per_passage, double split_fraction,
                            std::uint64_t seed, std::string id) {
  require(split_fraction > 0.0 && split_fraction < 1.0, ErrorKind::config,
          "split_fraction must lie strictly between 0 and 1");
  require(words_per_passage >= 1, ErrorKind::config, "words_per_passage must be >= 1");
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read generic corpus " + path.string());

  std::vector<std::vector<std::string>> docs;
  std::vector<std::size_t> window_start;  // prefix sums of window counts
  std::size_t total_windows = 0;
  for (std::string line; std::getline(in, line);) {
    auto words = split_whitespace(line);
    if (words.size() < words_per_passage) continue;
    window_start.push_back(total_windows);
    total_windows += words.size() - words_per_passage + 1;
    docs.push_back(std::move(words));
  }
  require(!in.bad(), ErrorKind::io, "failed reading " + path.string());
  require(n <= total_windows, ErrorKind::capacity,
          path.string() + " yields only " + std::to_string(total_windows) + " passages of " +
              std::to_string(words_per_passage) + " words, " + std::to_string(n) + " requested");

  const auto prompt_words = static_cast<std::size_t>(
      std::floor(split_fraction * static_cast<double>(words_per_passage) + 1e-9));
  Rng rng(seed);
  Dataset d{std::move(id), DatasetKind::mix_generic, {}, seed};
  d.examples.reserve(n);
  for (std::size_t w : sample_without_replacement(total_windows, n, rng)) {
    const auto doc = static_cast<std::size_t>(
        std::upper_bound(window_start.begin(), window_start.end(), w) - window_start.begin() - 1);
    const std::size_t begin = w - window_start[doc];
    const auto& words = docs[doc];
    d.examples.push_back(
        {"Complete the following partial passage: " + join(words, begin, begin + prompt_words),
         join(words, begin + prompt_words, begin + words_per_passage),
         {},
         {}});
  }
  return d;
}

Dataset gen_arithmetic_nonfactoid(std::size_t n, std::size_t max_operand, std::uint64_t seed,
                                  std::string id) {
  Rng rng(seed);
  Dataset d{std::move(id), DatasetKind::nonfactoid, {}, seed};
  d.examples.reserve(n);
  std::uniform_int_distribution<std::size_t> operand(0, max_operand);
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = operand(rng);
    const auto b = operand(rng);
    d.examples.push_back({"What is " + std::to_string(a) + " plus " + std::to_string(b) + "?",
                          std::to_string(a + b), {}, {}});
  }
  return d;
}

std::vector<std::string> load_wordlist(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read wordlist " + path.string());
  std::vector<std::string> words;
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) words.push_back(std::move(line));
  }
  return words;
}

OverlapReport check_overlap(const Dataset& factoids, const Dataset& mix) {
  require(factoids.kind == DatasetKind::factoid, ErrorKind::config,
          "check_overlap expects a factoid dataset, got " + std::string(to_string(factoids.kind)));
  std::vector<std::string> texts;
  texts.reserve(mix.size());
  for (const auto& ex : mix.examples) texts.push_back(ex.prompt + "\n" + ex.response);

  OverlapReport report;
  report.total_pairs = factoids.size();
  for (std::size_t i = 0; i < factoids.size(); ++i) {
    const auto& ex = factoids.examples[i];
    const std::string& subject = ex.triple ? ex.triple->subject : ex.prompt;
    const std::string& object = ex.triple ? ex.triple->object : ex.response;
    for (std::size_t j = 0; j < texts.size(); ++j) {
      if (texts[j].find(subject) != std::string::npos &&
          texts[j].find(object) != std::string::npos) {
        report.colliding_pairs.push_back({subject, object, i, j});
        break;
      }
    }
  }
  report.fraction = report.total_pairs == 0
                        ? 0.0
                        : static_cast<double>(report.colliding_pairs.size()) /
                              static_cast<double>(report.total_pairs);
  return report;
}

std::string dataset_to_jsonl(const Dataset& d) {
  std::string out;
  for (const auto& ex : d.examples) {
    ordered_json j;
    j["prompt"] = ex.prompt;
    j["response"] = ex.response;
    if (ex.triple) {
      j["subject"] = ex.triple->subject;
      j["relation"] = ex.triple->relation;
      j["object"] = ex.triple->object;
    }
    if (!ex.origin.empty()) j["origin"] = ex.origin;
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

std::vector<Example> examples_from_jsonl(std::string_view text) {
  std::vector<Example> examples;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Example ex;
      ex.prompt = j.at("prompt").get<std::string>();
      ex.response = j.at("response").get<std::string>();
      const bool has_triple = j.contains("subject") || j.contains("relation") || j.contains("object");
      if (has_triple) {
        ex.triple = Triple{j.at("subject").get<std::string>(), j.at("relation").get<std::string>(),
                           j.at("object").get<std::string>()};
      }
      if (j.contains("origin")) ex.origin = j.at("origin").get<std::string>();
      examples.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::config, "jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return examples;
}

std::filesystem::path save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  check_id(d.id);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
  const auto body = dir / (d.id + ".jsonl");
  const auto manifest = dir / (d.id + ".manifest.json");
  {
    std::ofstream out(body, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + body.string());
    out << dataset_to_jsonl(d);
    require(static_cast<bool>(out), ErrorKind::io, "failed writing " + body.string());
  }
  {
    ordered_json j;
    j["id"] = d.id;
    j["kind"] = std::string(to_string(d.kind));
    j["seed"] = d.seed;
    j["size"] = d.size();
    std::ofstream out(manifest, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + manifest.string());
    out << j.dump(2) << '\n';
    require(static_cast<bool>(out), ErrorKind::io, "failed writing " + manifest.string());
  }
  return body;
}

Dataset load_dataset(const std::filesystem::path& jsonl_path) {
  std::ifstream in(jsonl_path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read " + jsonl_path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();

  auto manifest_path = jsonl_path;
  manifest_path.replace_extension(".manifest.json");
  std::ifstream min(manifest_path, std::ios::binary);
  require(static_cast<bool>(min), ErrorKind::io, "cannot read " + manifest_path.string());
  Dataset d;
  try {
    const auto m = nlohmann::json::parse(min);
    d.id = m.at("id").get<std::string>();
    d.kind = dataset_kind_from_string(m.at("kind").get<std::string>());
    d.seed = m.at("seed").get<std::uint64_t>();
    d.examples = examples_from_jsonl(buffer.str());
    require(d.examples.size() == m.at("size").get<std::size_t>(), ErrorKind::config,
            manifest_path.string() + ": size does not match " + jsonl_path.string());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, manifest_path.string() + ": " + e.what());
  }
  return d;
}

bool prompts_disjoint(const Dataset& a, const Dataset& b) {
  std::unordered_set<std::string> prompts;
  for (const auto& ex : a.examples) prompts.insert(ex.prompt);
  for (const auto& ex : b.examples) {
    if (prompts.contains(ex.prompt)) return false;
  }
  return true;
}

}  // namespace forge
