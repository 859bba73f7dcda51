// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "forge/corpus.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "forge/error.hpp"

namespace forge {
namespace {

namespace fs = std::filesystem;

const fs::path kData = FORGE_DATA_DIR;

ErrorKind KindOf(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::config;
}

std::size_t WordCount(const std::string& s) {
  std::istringstream in(s);
  std::size_t n = 0;
  for (std::string w; in >> w;) ++n;
  return n;
}

fs::path WriteTemp(const std::string& name, const std::string& body) {
  const auto path = fs::temp_directory_path() / name;
  std::ofstream(path) << body;
  return path;
}

TEST(CorpusTest, KvrShapeAndUniqueness) {
  const auto d = gen_kvr(2000, 8, 8, 11);
  ASSERT_EQ(d.size(), 2000u);
  EXPECT_EQ(d.kind, DatasetKind::factoid);
  std::set<std::string> keys;
  for (const auto& ex : d.examples) {
    ASSERT_TRUE(ex.triple);
    const auto& key = ex.triple->subject;
    EXPECT_EQ(key.size(), 8u);
    EXPECT_EQ(ex.response.size(), 8u);
    EXPECT_EQ(ex.response, ex.triple->object);
    EXPECT_EQ(ex.prompt, "The value of key " + key + " is?");
    for (char c : key + ex.response) EXPECT_NE(kKvrAlphabet.find(c), std::string_view::npos);
    keys.insert(key);
  }
  EXPECT_EQ(keys.size(), 2000u);
}

TEST(CorpusTest, KvrEmptyAndDeterministic) {
  EXPECT_TRUE(gen_kvr(0, 8, 8, 1).empty());
  EXPECT_EQ(gen_kvr(3, 1, 1, 7), gen_kvr(3, 1, 1, 7));
  EXPECT_NE(gen_kvr(50, 8, 8, 7), gen_kvr(50, 8, 8, 8));
}

TEST(CorpusTest, KvrCapacity) {
  EXPECT_NO_THROW(gen_kvr(36, 1, 1, 3));
  EXPECT_EQ(KindOf([] { gen_kvr(37, 1, 1, 3); }), ErrorKind::capacity);
}

TEST(CorpusTest, KvrDisjointSplit) {
  const auto a = gen_kvr(200, 8, 8, 1, "a");
  const Dataset* exclude[] = {&a};
  const auto b = gen_kvr_disjoint(200, 8, 8, 1, exclude, "b");
  EXPECT_TRUE(prompts_disjoint(a, b));
  // Same seed without exclusion collides completely.
  EXPECT_FALSE(prompts_disjoint(a, gen_kvr(200, 8, 8, 1)));

  const auto small = gen_kvr(30, 1, 1, 2);
  const Dataset* tight[] = {&small};
  EXPECT_EQ(gen_kvr_disjoint(6, 1, 1, 5, tight).size(), 6u);
  EXPECT_EQ(KindOf([&] { gen_kvr_disjoint(7, 1, 1, 5, tight); }), ErrorKind::capacity);
}

TEST(CorpusTest, TemplatedExhaustiveGrid) {
  const auto d = gen_templated_factoids(4, 2, 2, 1);
  ASSERT_EQ(d.size(), 4u);
  std::set<std::string> subjects, relations;
  std::set<std::pair<std::string, std::string>> cells;
  for (const auto& ex : d.examples) {
    subjects.insert(ex.triple->subject);
    relations.insert(ex.triple->relation);
    cells.emplace(ex.triple->subject, ex.triple->relation);
    EXPECT_EQ(ex.prompt, "The " + ex.triple->relation + " of " + ex.triple->subject + " is?");
    EXPECT_EQ(ex.response, ex.triple->object);
    EXPECT_FALSE(ex.response.empty());
  }
  EXPECT_EQ(subjects.size(), 2u);
  EXPECT_EQ(relations.size(), 2u);
  EXPECT_EQ(cells.size(), 4u);
  EXPECT_EQ(KindOf([] { gen_templated_factoids(5, 2, 2, 1); }), ErrorKind::capacity);
}

TEST(CorpusTest, TemplatedPopulationShape) {
  const auto d = gen_templated_factoids(2000, 500, 16, 9);
  std::set<std::string> relations, prompts;
  for (const auto& ex : d.examples) {
    relations.insert(ex.triple->relation);
    prompts.insert(ex.prompt);
  }
  EXPECT_EQ(relations.size(), 16u);
  EXPECT_EQ(prompts.size(), 2000u);
  EXPECT_EQ(d, gen_templated_factoids(2000, 500, 16, 9));
}

TEST(CorpusTest, RandomWordSequences) {
  const auto words = load_wordlist(kData / "words.txt");
  ASSERT_GT(words.size(), 1000u);
  const auto d = gen_random_word_sequences(20, 50, words, 4);
  EXPECT_EQ(d.kind, DatasetKind::mix_random);
  const std::string prefix = "Memorize the following random-string passage: ";
  for (const auto& ex : d.examples) {
    EXPECT_EQ(WordCount(ex.response), 50u);
    EXPECT_EQ(ex.prompt, prefix + ex.response);
  }
  const std::vector<std::string> one{"a"};
  const auto k = gen_random_word_sequences(5, 1, one, 0);
  for (const auto& ex : k.examples) EXPECT_EQ(ex.response, "a");
  EXPECT_EQ(KindOf([] { gen_random_word_sequences(1, 1, {}, 0); }), ErrorKind::config);
}

TEST(CorpusTest, GenericSplit) {
  std::string doc;
  for (int i = 1; i <= 100; ++i) doc += (i > 1 ? " w" : "w") + std::to_string(i);
  const auto path = WriteTemp("forge_generic_one.txt", doc + "\nshort line\n");
  const auto d = load_generic_corpus(path, 1, 100, 0.5, 3);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.kind, DatasetKind::mix_generic);
  std::string first, second;
  for (int i = 1; i <= 50; ++i) first += (i > 1 ? " w" : "w") + std::to_string(i);
  for (int i = 51; i <= 100; ++i) second += (i > 51 ? " w" : "w") + std::to_string(i);
  EXPECT_EQ(d.examples[0].prompt, "Complete the following partial passage: " + first);
  EXPECT_EQ(d.examples[0].response, second);

  EXPECT_TRUE(load_generic_corpus(path, 0, 100, 0.5, 3).empty());
  EXPECT_EQ(KindOf([&] { load_generic_corpus(path, 2, 100, 0.5, 3); }), ErrorKind::capacity);
  EXPECT_EQ(KindOf([&] { load_generic_corpus(path, 1, 100, 1.0, 3); }), ErrorKind::config);
  EXPECT_EQ(KindOf([] { load_generic_corpus("/nonexistent/forge.txt", 1, 5, 0.5, 3); }),
            ErrorKind::io);
  fs::remove(path);
}

TEST(CorpusTest, BundledGenericCorpusSuppliesFullMix) {
  const auto d = load_generic_corpus(kData / "generic_corpus.txt", 2000, 50, 0.5, 1);
  ASSERT_EQ(d.size(), 2000u);
  std::set<std::string> distinct;
  for (const auto& ex : d.examples) {
    EXPECT_EQ(WordCount(ex.response), 25u);
    distinct.insert(ex.prompt + ex.response);
  }
  EXPECT_EQ(distinct.size(), 2000u);
}

TEST(CorpusTest, ArithmeticIsExact) {
  const auto d = gen_arithmetic_nonfactoid(500, 99, 5);
  EXPECT_EQ(d.kind, DatasetKind::nonfactoid);
  EXPECT_EQ(d, gen_arithmetic_nonfactoid(500, 99, 5));
  for (const auto& ex : d.examples) {
    int a = -1, b = -1;
    ASSERT_EQ(std::sscanf(ex.prompt.c_str(), "What is %d plus %d?", &a, &b), 2) << ex.prompt;
    EXPECT_LE(a, 99);
    EXPECT_LE(b, 99);
    EXPECT_EQ(ex.response, std::to_string(a + b));
  }
}

TEST(CorpusTest, OverlapDisjointIsZero) {
  const auto kvr = gen_kvr(100, 8, 8, 1);
  const std::vector<std::string> words{"alpha", "beta", "gamma"};
  EXPECT_EQ(check_overlap(kvr, gen_random_word_sequences(50, 10, words, 2)).fraction, 0.0);
}

TEST(CorpusTest, OverlapCountsPlantedCollision) {
  const auto kvr = gen_kvr(100, 8, 8, 1);
  const std::vector<std::string> words{"alpha", "beta"};
  auto mix = gen_random_word_sequences(30, 10, words, 2);
  const auto& planted = kvr.examples[42].triple.value();
  mix.examples[17].response += " " + planted.subject + " and " + planted.object;
  const auto report = check_overlap(kvr, mix);
  EXPECT_DOUBLE_EQ(report.fraction, 0.01);
  ASSERT_EQ(report.colliding_pairs.size(), 1u);
  EXPECT_EQ(report.colliding_pairs[0].factoid_index, 42u);
  EXPECT_EQ(report.colliding_pairs[0].source_index, 17u);
}

TEST(CorpusTest, OverlapWithItselfIsOne) {
  const auto kvr = gen_kvr(50, 8, 8, 1);
  EXPECT_EQ(check_overlap(kvr, kvr).fraction, 1.0);
  EXPECT_EQ(KindOf([&] { check_overlap(gen_arithmetic_nonfactoid(3, 9, 1), kvr); }),
            ErrorKind::config);
}

// Brute force: every key and every value of a large KVR set against every
// substring of every word of the bundled list and passage of the bundled text.
TEST(CorpusTest, KvrNeverOverlapsBundledText) {
  const auto kvr = gen_kvr(2000, 8, 8, 123);
  std::set<std::string> grams;
  const auto add_grams = [&](const std::string& text) {
    for (std::size_t i = 0; i + 8 <= text.size(); ++i) grams.insert(text.substr(i, 8));
  };
  for (const auto& w : load_wordlist(kData / "words.txt")) add_grams(w);
  std::ifstream in(kData / "generic_corpus.txt");
  for (std::string line; std::getline(in, line);) add_grams(line);
  std::size_t hits = 0;
  for (const auto& ex : kvr.examples) {
    hits += grams.contains(ex.triple->subject) && grams.contains(ex.triple->object);
  }
  EXPECT_EQ(hits, 0u);

  const auto words = load_wordlist(kData / "words.txt");
  EXPECT_EQ(check_overlap(kvr, gen_random_word_sequences(2000, 50, words, 9)).fraction, 0.0);
  EXPECT_EQ(check_overlap(kvr, load_generic_corpus(kData / "generic_corpus.txt", 2000, 50, 0.5, 9))
                .fraction,
            0.0);
}

TEST(CorpusTest, JsonlRoundTrip) {
  auto d = gen_templated_factoids(20, 10, 3, 2, "tmpl");
  d.examples[3].origin = "elsewhere";
  d.examples.push_back({"quote \" and \\ and\nnewline", "ünï", {}, {}});
  const auto dir = fs::temp_directory_path() / "forge_corpus_rt";
  fs::create_directories(dir);
  const auto path = save_dataset(d, dir);
  EXPECT_TRUE(fs::exists(dir / "tmpl.manifest.json"));
  EXPECT_EQ(load_dataset(path), d);
  EXPECT_EQ(dataset_to_jsonl(load_dataset(path)), dataset_to_jsonl(d));
  fs::remove_all(dir);
}

}  // namespace
}  // namespace forge
