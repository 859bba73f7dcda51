// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "forge/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "forge/error.hpp"
#include "forge/nn_ops.hpp"
#include "forge/random.hpp"

namespace forge {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

constexpr char kCheckpointMagic[8] = {'F', 'F', 'C', 'K', 'P', 'T', '0', '1'};

using ConstRowMap = Eigen::Map<const RowVector>;
using RowMap = Eigen::Map<RowVector>;

struct Packed {
  std::vector<Index> offsets{0};
  std::vector<TokenId> ids;
  std::vector<Index> positions;

  Index total() const { return offsets.back(); }
  Index batch() const { return static_cast<Index>(offsets.size()) - 1; }
};

Packed pack(const ModelConfig& config, std::span<const TokenSequence> batch) {
  Packed p;
  for (const auto& seq : batch) {
    const auto len = static_cast<Index>(seq.size());
    require(len <= config.max_seq_len, ErrorKind::length,
            "sequence of " + std::to_string(len) + " tokens exceeds max_seq_len " +
                std::to_string(config.max_seq_len));
    for (Index t = 0; t < len; ++t) {
      const TokenId id = seq[static_cast<std::size_t>(t)];
      require(id >= 0 && id < config.vocab_size, ErrorKind::oov,
              "token id " + std::to_string(id) + " outside vocabulary of size " +
                  std::to_string(config.vocab_size));
      p.ids.push_back(id);
      p.positions.push_back(t);
    }
    p.offsets.push_back(p.offsets.back() + len);
  }
  return p;
}

struct LayerCache {
  Matrix xhat1, h1, qkv, att, x_mid, xhat2, h2, u, t, g;
  Vector rstd1, rstd2;
  std::vector<Matrix> probs;  // one causal attention matrix per (sequence, head)
};

struct Cache {
  std::vector<Matrix> residual;  // n_layers + 1 residual-stream states
  std::vector<LayerCache> layers;
  Matrix xhatf, hf;
  Vector rstdf;
};

Matrix run_forward(const Model& model, const Packed& p, Cache& cache) {
  const auto& cfg = model.config();
  const auto& lay = model.layout();
  const Scalar* w = model.parameters().data();
  const Index n = p.total();
  const Index d = cfg.d_model;
  const Index heads = cfg.n_heads;
  const Index dh = cfg.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  const ConstMatrixMap tok(w + lay.token_embedding, cfg.vocab_size, d);
  const ConstMatrixMap pos(w + lay.position_embedding, cfg.max_seq_len, d);

  cache.residual.assign(static_cast<std::size_t>(cfg.n_layers + 1), Matrix());
  cache.layers.assign(static_cast<std::size_t>(cfg.n_layers), LayerCache());

  Matrix x(n, d);
  for (Index i = 0; i < n; ++i) {
    x.row(i) = tok.row(p.ids[static_cast<std::size_t>(i)]) + pos.row(p.positions[static_cast<std::size_t>(i)]);
  }

  for (Index l = 0; l < cfg.n_layers; ++l) {
    const auto& b = lay.blocks[static_cast<std::size_t>(l)];
    auto& c = cache.layers[static_cast<std::size_t>(l)];
    cache.residual[static_cast<std::size_t>(l)] = x;

    c.h1.resize(n, d);
    c.xhat1.resize(n, d);
    c.rstd1.resize(n);
    nn::layer_norm(x, ConstRowMap(w + b.ln1_gain, d), ConstRowMap(w + b.ln1_bias, d), c.h1, c.xhat1,
                   c.rstd1);

    c.qkv.noalias() = c.h1 * ConstMatrixMap(w + b.qkv_weight, d, 3 * d);
    c.qkv.rowwise() += ConstRowMap(w + b.qkv_bias, 3 * d);

    c.att.resize(n, d);
    c.probs.resize(static_cast<std::size_t>(p.batch() * heads));
    for (Index s = 0; s < p.batch(); ++s) {
      const Index r0 = p.offsets[static_cast<std::size_t>(s)];
      const Index len = p.offsets[static_cast<std::size_t>(s + 1)] - r0;
      for (Index h = 0; h < heads; ++h) {
        auto& probs = c.probs[static_cast<std::size_t>(s * heads + h)];
        probs.noalias() = c.qkv.block(r0, h * dh, len, dh) * c.qkv.block(r0, d + h * dh, len, dh).transpose();
        probs *= scale;
        nn::causal_softmax(probs);
        c.att.block(r0, h * dh, len, dh).noalias() = probs * c.qkv.block(r0, 2 * d + h * dh, len, dh);
      }
    }

    c.x_mid = x;
    c.x_mid.noalias() += c.att * ConstMatrixMap(w + b.attn_out_weight, d, d);
    c.x_mid.rowwise() += ConstRowMap(w + b.attn_out_bias, d);

    c.h2.resize(n, d);
    c.xhat2.resize(n, d);
    c.rstd2.resize(n);
    nn::layer_norm(c.x_mid, ConstRowMap(w + b.ln2_gain, d), ConstRowMap(w + b.ln2_bias, d), c.h2,
                   c.xhat2, c.rstd2);

    c.u.noalias() = c.h2 * ConstMatrixMap(w + b.mlp_in_weight, d, cfg.d_ff);
    c.u.rowwise() += ConstRowMap(w + b.mlp_in_bias, cfg.d_ff);
    c.t.resize(n, cfg.d_ff);
    c.g.resize(n, cfg.d_ff);
    nn::gelu_forward(c.u, c.t, c.g);

    x = c.x_mid;
    x.noalias() += c.g * ConstMatrixMap(w + b.mlp_out_weight, cfg.d_ff, d);
    x.rowwise() += ConstRowMap(w + b.mlp_out_bias, d);
  }
  cache.residual.back() = x;

  cache.hf.resize(n, d);
  cache.xhatf.resize(n, d);
  cache.rstdf.resize(n);
  nn::layer_norm(x, ConstRowMap(w + lay.final_norm_gain, d), ConstRowMap(w + lay.final_norm_bias, d),
                 cache.hf, cache.xhatf, cache.rstdf);
  Matrix logits = cache.hf * ConstMatrixMap(w + lay.output_weight, d, cfg.vocab_size);
  return logits;
}

void run_backward(const Model& model, const Packed& p, const Cache& cache, const Matrix& dlogits,
                  Vector& grad) {
  const auto& cfg = model.config();
  const auto& lay = model.layout();
  const Scalar* w = model.parameters().data();
  Scalar* gw = grad.data();
  const Index d = cfg.d_model;
  const Index ff = cfg.d_ff;
  const Index heads = cfg.n_heads;
  const Index dh = cfg.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  MatrixMap(gw + lay.output_weight, d, cfg.vocab_size).noalias() += cache.hf.transpose() * dlogits;
  const Matrix dhf = dlogits * ConstMatrixMap(w + lay.output_weight, d, cfg.vocab_size).transpose();

  Matrix dx(dhf.rows(), d);
  {
    RowMap dg(gw + lay.final_norm_gain, d);
    RowMap db(gw + lay.final_norm_bias, d);
    nn::layer_norm_backward(dhf, cache.xhatf, cache.rstdf, ConstRowMap(w + lay.final_norm_gain, d), dx,
                            dg, db);
  }

  Matrix dln(dx.rows(), d);
  for (Index l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& b = lay.blocks[static_cast<std::size_t>(l)];
    const auto& c = cache.layers[static_cast<std::size_t>(l)];

    // MLP sublayer; dx holds the gradient w.r.t. the block output.
    MatrixMap(gw + b.mlp_out_weight, ff, d).noalias() += c.g.transpose() * dx;
    RowMap(gw + b.mlp_out_bias, d) += dx.colwise().sum();
    Matrix du = dx * ConstMatrixMap(w + b.mlp_out_weight, ff, d).transpose();
    nn::gelu_backward(c.u, c.t, du);
    MatrixMap(gw + b.mlp_in_weight, d, ff).noalias() += c.h2.transpose() * du;
    RowMap(gw + b.mlp_in_bias, ff) += du.colwise().sum();
    const Matrix dh2 = du * ConstMatrixMap(w + b.mlp_in_weight, d, ff).transpose();
    {
      RowMap dg(gw + b.ln2_gain, d);
      RowMap db(gw + b.ln2_bias, d);
      nn::layer_norm_backward(dh2, c.xhat2, c.rstd2, ConstRowMap(w + b.ln2_gain, d), dln, dg, db);
    }
    dx += dln;  // gradient w.r.t. x_mid

    // Attention sublayer.
    MatrixMap(gw + b.attn_out_weight, d, d).noalias() += c.att.transpose() * dx;
    RowMap(gw + b.attn_out_bias, d) += dx.colwise().sum();
    const Matrix datt = dx * ConstMatrixMap(w + b.attn_out_weight, d, d).transpose();

    Matrix dqkv(c.qkv.rows(), 3 * d);
    Matrix dprobs;
    for (Index s = 0; s < p.batch(); ++s) {
      const Index r0 = p.offsets[static_cast<std::size_t>(s)];
      const Index len = p.offsets[static_cast<std::size_t>(s + 1)] - r0;
      for (Index h = 0; h < heads; ++h) {
        const auto& probs = c.probs[static_cast<std::size_t>(s * heads + h)];
        const auto q = c.qkv.block(r0, h * dh, len, dh);
        const auto k = c.qkv.block(r0, d + h * dh, len, dh);
        const auto v = c.qkv.block(r0, 2 * d + h * dh, len, dh);
        const auto dout = datt.block(r0, h * dh, len, dh);
        dqkv.block(r0, 2 * d + h * dh, len, dh).noalias() = probs.transpose() * dout;
        dprobs.noalias() = dout * v.transpose();
        // softmax backward; masked entries have probs == 0 and drop out.
        for (Index i = 0; i < len; ++i) {
          const Scalar dot = dprobs.row(i).head(i + 1).dot(probs.row(i).head(i + 1));
          dprobs.row(i).head(i + 1) =
              probs.row(i).head(i + 1).cwiseProduct((dprobs.row(i).head(i + 1).array() - dot).matrix());
          dprobs.row(i).tail(len - i - 1).setZero();
        }
        dprobs *= scale;
        dqkv.block(r0, h * dh, len, dh).noalias() = dprobs * k;
        dqkv.block(r0, d + h * dh, len, dh).noalias() = dprobs.transpose() * q;
      }
    }
    MatrixMap(gw + b.qkv_weight, d, 3 * d).noalias() += c.h1.transpose() * dqkv;
    RowMap(gw + b.qkv_bias, 3 * d) += dqkv.colwise().sum();
    const Matrix dh1 = dqkv * ConstMatrixMap(w + b.qkv_weight, d, 3 * d).transpose();
    {
      RowMap dg(gw + b.ln1_gain, d);
      RowMap db(gw + b.ln1_bias, d);
      nn::layer_norm_backward(dh1, c.xhat1, c.rstd1, ConstRowMap(w + b.ln1_gain, d), dln, dg, db);
    }
    dx += dln;  // gradient w.r.t. the block input
  }

  MatrixMap dtok(gw + lay.token_embedding, cfg.vocab_size, d);
  MatrixMap dpos(gw + lay.position_embedding, cfg.max_seq_len, d);
  for (Index i = 0; i < dx.rows(); ++i) {
    dtok.row(p.ids[static_cast<std::size_t>(i)]) += dx.row(i);
    dpos.row(p.positions[static_cast<std::size_t>(i)]) += dx.row(i);
  }
}

struct PackedTargets {
  std::vector<TokenSequence> inputs;
  std::vector<TokenId> targets;
};

PackedTargets split_batch(std::span<const TrainingSequence> batch) {
  PackedTargets out;
  out.inputs.reserve(batch.size());
  for (const auto& seq : batch) {
    require(seq.inputs.size() == seq.targets.size(), ErrorKind::config,
            "training sequence inputs and targets differ in length");
    out.inputs.push_back(seq.inputs);
    out.targets.insert(out.targets.end(), seq.targets.begin(), seq.targets.end());
  }
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  require(n_layers >= 1 && d_model >= 1 && n_heads >= 1 && d_ff >= 1 && max_seq_len >= 1 &&
              vocab_size >= 1,
          ErrorKind::config, "model dimensions must all be >= 1");
  require(d_model % n_heads == 0, ErrorKind::config,
          "d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
              std::to_string(n_heads) + ")");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model},         {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},         {"max_seq_len", c.max_seq_len}, {"vocab_size", c.vocab_size},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<Index>();
  c.d_model = j.at("d_model").get<Index>();
  c.n_heads = j.at("n_heads").get<Index>();
  c.d_ff = j.at("d_ff").get<Index>();
  c.max_seq_len = j.at("max_seq_len").get<Index>();
  c.vocab_size = j.at("vocab_size").get<Index>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

ParameterLayout::ParameterLayout(const ModelConfig& config) {
  config.validate();
  const Index d = config.d_model;
  const Index ff = config.d_ff;
  auto add = [this](std::string name, Index rows, Index cols) {
    const Index offset = total;
    segments.push_back({std::move(name), offset, rows, cols});
    total += rows * cols;
    return offset;
  };
  token_embedding = add("token_embedding", config.vocab_size, d);
  position_embedding = add("position_embedding", config.max_seq_len, d);
  for (Index l = 0; l < config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Block b{};
    b.ln1_gain = add(p + "ln1.gain", 1, d);
    b.ln1_bias = add(p + "ln1.bias", 1, d);
    b.qkv_weight = add(p + "attn.qkv.weight", d, 3 * d);
    b.qkv_bias = add(p + "attn.qkv.bias", 1, 3 * d);
    b.attn_out_weight = add(p + "attn.out.weight", d, d);
    b.attn_out_bias = add(p + "attn.out.bias", 1, d);
    b.ln2_gain = add(p + "ln2.gain", 1, d);
    b.ln2_bias = add(p + "ln2.bias", 1, d);
    b.mlp_in_weight = add(p + "mlp.in.weight", d, ff);
    b.mlp_in_bias = add(p + "mlp.in.bias", 1, ff);
    b.mlp_out_weight = add(p + "mlp.out.weight", ff, d);
    b.mlp_out_bias = add(p + "mlp.out.bias", 1, d);
    blocks.push_back(b);
  }
  final_norm_gain = add("final_norm.gain", 1, d);
  final_norm_bias = add("final_norm.bias", 1, d);
  output_weight = add("output.weight", d, config.vocab_size);
}

Index parameter_count(const ModelConfig& c) {
  c.validate();
  const Index d = c.d_model;
  return 2 * c.vocab_size * d + c.max_seq_len * d +
         c.n_layers * (4 * d * d + 2 * d * c.d_ff + 9 * d + c.d_ff) + 2 * d;
}

Model::Model(const ModelConfig& config)
    : config_(config), layout_(config), params_(Vector::Zero(layout_.total)) {}

Model::Model(const ModelConfig& config, Vector parameters)
    : config_(config), layout_(config), params_(std::move(parameters)) {
  require(params_.size() == layout_.total, ErrorKind::config,
          "parameter vector has " + std::to_string(params_.size()) + " entries, config needs " +
              std::to_string(layout_.total));
}

const Segment& Model::segment(std::string_view name) const {
  for (const auto& s : layout_.segments) {
    if (s.name == name) return s;
  }
  fail(ErrorKind::config, "no parameter segment named '" + std::string(name) + "'");
}

MatrixMap Model::segment_view(std::string_view name) {
  const auto& s = segment(name);
  return MatrixMap(params_.data() + s.offset, s.rows, s.cols);
}

ConstMatrixMap Model::segment_view(std::string_view name) const {
  const auto& s = segment(name);
  return ConstMatrixMap(params_.data() + s.offset, s.rows, s.cols);
}

Model init_model(const ModelConfig& config) {
  Model model(config);
  Rng rng(config.seed);
  std::normal_distribution<Scalar> normal(0.0, 1.0);
  auto& w = model.parameters();
  for (const auto& s : model.segments()) {
    if (s.name.ends_with(".gain")) {
      w.segment(s.offset, s.size()).setOnes();
      continue;
    }
    if (s.name.ends_with(".bias")) continue;
    // Weights are stored fan_in x fan_out; embeddings are lookup tables.
    const Scalar scale = s.name.ends_with("embedding") ? Scalar(1) : Scalar(1) / std::sqrt(static_cast<Scalar>(s.rows));
    for (Index i = 0; i < s.size(); ++i) w[s.offset + i] = scale * normal(rng);
  }
  return model;
}

ForwardTrace forward(const Model& model, std::span<const TokenSequence> batch) {
  const auto packed = pack(model.config(), batch);
  Cache cache;
  ForwardTrace trace;
  trace.logits = run_forward(model, packed, cache);
  trace.offsets = packed.offsets;
  trace.hidden = std::move(cache.residual);
  return trace;
}

Matrix forward_logits(const Model& model, std::span<const TokenSequence> batch,
                      std::vector<Index>* offsets) {
  const auto packed = pack(model.config(), batch);
  Cache cache;
  Matrix logits = run_forward(model, packed, cache);
  if (offsets) *offsets = packed.offsets;
  return logits;
}

TrainingSequence make_training_sequence(const TokenSequence& prompt, const TokenSequence& response) {
  TrainingSequence seq;
  seq.inputs.reserve(prompt.size() + response.size() + 3);
  seq.inputs.push_back(kBos);
  seq.inputs.insert(seq.inputs.end(), prompt.begin(), prompt.end());
  seq.inputs.push_back(kSep);
  seq.inputs.insert(seq.inputs.end(), response.begin(), response.end());
  seq.inputs.push_back(kEos);
  seq.targets.assign(seq.inputs.size(), -1);
  const std::size_t sep = prompt.size() + 1;
  for (std::size_t i = 0; i < response.size(); ++i) seq.targets[sep + i] = response[i];
  seq.targets[sep + response.size()] = kEos;
  return seq;
}

Scalar loss(const Model& model, std::span<const TrainingSequence> batch) {
  const auto split = split_batch(batch);
  const Matrix logits = forward_logits(model, split.inputs);
  Index count = 0;
  const Scalar value = nn::masked_cross_entropy(logits, split.targets, count);
  require(count > 0, ErrorKind::degenerate_batch, "batch has no unmasked target tokens");
  return value;
}

LossAndGradient loss_and_gradient(const Model& model, std::span<const TrainingSequence> batch) {
  const auto split = split_batch(batch);
  const auto packed = pack(model.config(), split.inputs);
  Cache cache;
  const Matrix logits = run_forward(model, packed, cache);
  Index count = 0;
  Matrix dlogits;
  LossAndGradient out;
  out.loss = nn::masked_cross_entropy(logits, split.targets, count, &dlogits);
  require(count > 0, ErrorKind::degenerate_batch, "batch has no unmasked target tokens");
  out.gradient = Vector::Zero(model.parameters().size());
  run_backward(model, packed, cache, dlogits, out.gradient);
  return out;
}

Vector gradient(const Model& model, std::span<const TrainingSequence> batch) {
  return loss_and_gradient(model, batch).gradient;
}

Matrix final_norm(const Model& model, const Matrix& states) {
  const auto& lay = model.layout();
  const Index d = model.config().d_model;
  const Scalar* w = model.parameters().data();
  Matrix out(states.rows(), d);
  Matrix xhat(states.rows(), d);
  Vector rstd(states.rows());
  nn::layer_norm(states, ConstRowMap(w + lay.final_norm_gain, d), ConstRowMap(w + lay.final_norm_bias, d),
                 out, xhat, rstd);
  return out;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : model.segments()) {
    segs.push_back({{"name", s.name}, {"offset", s.offset}, {"rows", s.rows}, {"cols", s.cols}});
  }
  const std::string header =
      nlohmann::json{{"config", to_json(model.config())}, {"segments", segs},
                     {"count", model.parameters().size()}, {"dtype", "f64le"}}
          .dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write checkpoint " + path.string());
  const std::uint64_t header_len = header.size();
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(model.parameters().data()),
            static_cast<std::streamsize>(sizeof(Scalar) * static_cast<std::size_t>(model.parameters().size())));
  require(static_cast<bool>(out), ErrorKind::io, "failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read checkpoint " + path.string());
  char magic[sizeof kCheckpointMagic];
  std::uint64_t header_len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  require(static_cast<bool>(in) && std::memcmp(magic, kCheckpointMagic, sizeof magic) == 0,
          ErrorKind::io, path.string() + " is not a checkpoint file");
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  require(static_cast<bool>(in), ErrorKind::io, "truncated checkpoint header in " + path.string());
  ModelConfig config;
  Index count = 0;
  try {
    const auto j = nlohmann::json::parse(header);
    config = model_config_from_json(j.at("config"));
    count = j.at("count").get<Index>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::io, path.string() + ": bad checkpoint header: " + e.what());
  }
  Vector params(count);
  in.read(reinterpret_cast<char*>(params.data()),
          static_cast<std::streamsize>(sizeof(Scalar) * static_cast<std::size_t>(count)));
  require(static_cast<bool>(in), ErrorKind::io, "truncated checkpoint payload in " + path.string());
  return Model(config, std::move(params));
}

}  // namespace forge
