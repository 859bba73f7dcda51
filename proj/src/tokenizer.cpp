// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "forge/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "forge/error.hpp"

namespace forge {
namespace {

const std::vector<std::string>& special_names() {
  static const std::vector<std::string> names = {"<pad>", "<bos>", "<eos>", "<sep>"};
  return names;
}

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> words;
  if (text.empty()) return words;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(' ', start);
    if (pos == std::string_view::npos) {
      words.push_back(text.substr(start));
      break;
    }
    words.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
  return words;
}

std::string describe_symbol(std::string_view s) {
  std::string out = "'";
  for (unsigned char c : s) {
    if (c >= 32 && c < 127) {
      out.push_back(static_cast<char>(c));
    } else {
      static const char* hex = "0123456789abcdef";
      out += "\\x";
      out.push_back(hex[c >> 4]);
      out.push_back(hex[c & 15]);
    }
  }
  return out + "'";
}

}  // namespace

std::string_view to_string(TokenizerMode mode) {
  return mode == TokenizerMode::chars ? "char" : "word";
}

TokenizerMode tokenizer_mode_from_string(std::string_view name) {
  if (name == "char") return TokenizerMode::chars;
  if (name == "word") return TokenizerMode::words;
  fail(ErrorKind::config, "unknown tokenizer mode '" + std::string(name) + "'");
}

Tokenizer::Tokenizer(TokenizerMode mode, std::vector<std::string> vocab)
    : mode_(mode), vocab_(std::move(vocab)) {
  for (std::size_t i = kNumSpecial; i < vocab_.size(); ++i) {
    const auto [it, inserted] = token_to_id_.emplace(vocab_[i], static_cast<TokenId>(i));
    require(inserted, ErrorKind::config, "duplicate vocabulary entry " + describe_symbol(vocab_[i]));
  }
}

Tokenizer Tokenizer::build(TokenizerMode mode, std::span<const std::string> corpus_samples) {
  std::vector<std::string> vocab = special_names();
  if (mode == TokenizerMode::chars) {
    for (int c = 32; c < 127; ++c) vocab.emplace_back(1, static_cast<char>(c));
    return Tokenizer(mode, std::move(vocab));
  }
  require(!corpus_samples.empty(), ErrorKind::config,
          "word tokenizer needs at least one corpus sample");
  std::set<std::string, std::less<>> words;
  for (const auto& sample : corpus_samples) {
    for (auto w : split_words(sample)) {
      if (w.empty()) continue;
      require(std::find(special_names().begin(), special_names().end(), w) == special_names().end(),
              ErrorKind::config, "corpus word collides with special token " + describe_symbol(w));
      words.emplace(w);
    }
  }
  vocab.insert(vocab.end(), words.begin(), words.end());
  return Tokenizer(mode, std::move(vocab));
}

bool Tokenizer::contains(std::string_view symbol) const {
  return token_to_id_.find(std::string(symbol)) != token_to_id_.end();
}

TokenSequence Tokenizer::encode(std::string_view text) const {
  TokenSequence ids;
  if (mode_ == TokenizerMode::chars) {
    ids.reserve(text.size());
    for (unsigned char c : text) {
      if (c < 32 || c >= 127) {
        fail(ErrorKind::oov, "out-of-vocabulary symbol " + describe_symbol(std::string_view(
                                 reinterpret_cast<const char*>(&c), 1)));
      }
      ids.push_back(static_cast<TokenId>(kNumSpecial + (c - 32)));
    }
    return ids;
  }
  for (auto w : split_words(text)) {
    const auto it = token_to_id_.find(std::string(w));
    if (it == token_to_id_.end()) fail(ErrorKind::oov, "out-of-vocabulary symbol " + describe_symbol(w));
    ids.push_back(it->second);
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  bool first = true;
  for (TokenId id : ids) {
    if (is_special(id)) continue;
    require(id >= 0 && static_cast<std::size_t>(id) < vocab_.size(), ErrorKind::oov,
            "token id " + std::to_string(id) + " outside vocabulary");
    if (mode_ == TokenizerMode::words && !first) out.push_back(' ');
    out += vocab_[static_cast<std::size_t>(id)];
    first = false;
  }
  return out;
}

nlohmann::json Tokenizer::to_json() const {
  return {{"mode", std::string(to_string(mode_))}, {"vocab", vocab_}};
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  const auto mode = tokenizer_mode_from_string(j.at("mode").get<std::string>());
  auto vocab = j.at("vocab").get<std::vector<std::string>>();
  require(vocab.size() >= static_cast<std::size_t>(kNumSpecial) &&
              std::equal(special_names().begin(), special_names().end(), vocab.begin()),
          ErrorKind::config, "tokenizer vocabulary must start with the special tokens");
  if (mode == TokenizerMode::chars) {
    require(vocab == build(TokenizerMode::chars).vocab(), ErrorKind::config,
            "char tokenizer vocabulary does not match the printable ASCII alphabet");
  }
  return Tokenizer(mode, std::move(vocab));
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write tokenizer to " + path.string());
  out << to_json().dump() << '\n';
  require(static_cast<bool>(out), ErrorKind::io, "failed writing " + path.string());
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read tokenizer from " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, path.string() + ": " + e.what());
  }
}

}  // namespace forge
