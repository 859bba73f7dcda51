// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "forge/linalg.hpp"
#include "forge/tokenizer.hpp"

namespace forge {

struct ModelConfig {
  Index n_layers = 2;
  Index d_model = 128;
  Index n_heads = 4;
  Index d_ff = 512;
  Index max_seq_len = 128;
  Index vocab_size = 99;
  std::uint64_t seed = 0;

  void validate() const;
  Index head_dim() const { return d_model / n_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// A named, row-major block of the flat parameter vector.
struct Segment {
  std::string name;
  Index offset = 0;
  Index rows = 0;
  Index cols = 0;

  Index size() const { return rows * cols; }
  friend bool operator==(const Segment&, const Segment&) = default;
};

/// Offsets of every parameter block, derived from a config alone.
struct ParameterLayout {
  struct Block {
    Index ln1_gain, ln1_bias, qkv_weight, qkv_bias, attn_out_weight, attn_out_bias;
    Index ln2_gain, ln2_bias, mlp_in_weight, mlp_in_bias, mlp_out_weight, mlp_out_bias;
  };

  explicit ParameterLayout(const ModelConfig& config);

  Index token_embedding = 0;
  Index position_embedding = 0;
  std::vector<Block> blocks;
  Index final_norm_gain = 0;
  Index final_norm_bias = 0;
  Index output_weight = 0;
  Index total = 0;
  std::vector<Segment> segments;
};

/// Closed-form parameter count.
Index parameter_count(const ModelConfig& config);

/// Decoder-only pre-norm transformer with learned positions and an untied
/// output embedding. All weights live in one flat vector.
class Model {
 public:
  explicit Model(const ModelConfig& config);
  Model(const ModelConfig& config, Vector parameters);

  const ModelConfig& config() const noexcept { return config_; }
  const ParameterLayout& layout() const noexcept { return layout_; }
  const std::vector<Segment>& segments() const noexcept { return layout_.segments; }

  const Vector& parameters() const noexcept { return params_; }
  Vector& parameters() noexcept { return params_; }

  const Segment& segment(std::string_view name) const;
  MatrixMap segment_view(std::string_view name);
  ConstMatrixMap segment_view(std::string_view name) const;

 private:
  ModelConfig config_;
  ParameterLayout layout_;
  Vector params_;
};

/// Seeded init: weight matrices N(0, 1/fan_in), embeddings N(0, 1), zero
/// biases, unit norm gains.
Model init_model(const ModelConfig& config);

/// Activations for a batch of variable-length sequences packed row-wise:
/// rows offsets[b] .. offsets[b+1] belong to sequence b.
struct ForwardTrace {
  std::vector<Index> offsets;
  Matrix logits;               // total_tokens x vocab
  std::vector<Matrix> hidden;  // n_layers + 1 entries, total_tokens x d_model each

  Index batch_size() const { return static_cast<Index>(offsets.size()) - 1; }
  Index length(Index b) const { return offsets[b + 1] - offsets[b]; }
  auto logits_of(Index b) const { return logits.middleRows(offsets[b], length(b)); }
  auto hidden_of(std::size_t layer, Index b) const {
    return hidden[layer].middleRows(offsets[b], length(b));
  }
};

ForwardTrace forward(const Model& model, std::span<const TokenSequence> batch);

/// Logits only; skips keeping intermediate states.
Matrix forward_logits(const Model& model, std::span<const TokenSequence> batch,
                      std::vector<Index>* offsets = nullptr);

/// Input ids and next-token targets; targets < 0 are masked out of the loss.
struct TrainingSequence {
  TokenSequence inputs;
  std::vector<TokenId> targets;
};

/// BOS prompt SEP response EOS, with only the response tokens and the closing
/// EOS as targets.
TrainingSequence make_training_sequence(const TokenSequence& prompt, const TokenSequence& response);

struct LossAndGradient {
  Scalar loss = 0;
  Vector gradient;
};

/// Mean token cross-entropy over all unmasked targets in the batch.
Scalar loss(const Model& model, std::span<const TrainingSequence> batch);
LossAndGradient loss_and_gradient(const Model& model, std::span<const TrainingSequence> batch);
Vector gradient(const Model& model, std::span<const TrainingSequence> batch);

/// Row-wise final norm applied to probe states, as the output head sees them.
Matrix final_norm(const Model& model, const Matrix& states);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace forge
