// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace forge {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kNumSpecial = 4;

enum class TokenizerMode { chars, words };

std::string_view to_string(TokenizerMode mode);
TokenizerMode tokenizer_mode_from_string(std::string_view name);

/// Closed-vocabulary text <-> id mapping.
///
/// Ids 0..3 are PAD, BOS, EOS and SEP. In `chars` mode the remaining ids cover
/// the 95 printable ASCII characters; in `words` mode they cover the sorted set
/// of space-separated words found in the construction samples.
class Tokenizer {
 public:
  static Tokenizer build(TokenizerMode mode,
                         std::span<const std::string> corpus_samples = {});

  TokenSequence encode(std::string_view text) const;
  /// Special ids are skipped.
  std::string decode(std::span<const TokenId> ids) const;

  bool is_special(TokenId id) const noexcept { return id >= 0 && id < kNumSpecial; }
  bool contains(std::string_view symbol) const;

  TokenizerMode mode() const noexcept { return mode_; }
  std::size_t vocab_size() const noexcept { return vocab_.size(); }
  const std::vector<std::string>& vocab() const noexcept { return vocab_; }

  nlohmann::json to_json() const;
  static Tokenizer from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Tokenizer load(const std::filesystem::path& path);

  friend bool operator==(const Tokenizer& a, const Tokenizer& b) {
    return a.mode_ == b.mode_ && a.vocab_ == b.vocab_;
  }

 private:
  Tokenizer(TokenizerMode mode, std::vector<std::string> vocab);

  TokenizerMode mode_;
  std::vector<std::string> vocab_;
  // Only non-special symbols live here.
  std::unordered_map<std::string, TokenId> token_to_id_;
};

}  // namespace forge
