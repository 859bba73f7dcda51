// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "forge/corpus.hpp"
#include "forge/error.hpp"
#include "forge/model.hpp"
#include "forge/tokenizer.hpp"

namespace forge {

struct ProbeHistogram {
  std::vector<double> per_layer_frequency;  // n_layers + 1 probe points
  std::vector<std::size_t> first_hits;      // raw earliest-index counts
  double coverage = 0.0;
  std::size_t k = 0;
};

nlohmann::json to_json(const ProbeHistogram& h);

/// For each example, probes the residual stream at the position that predicts
/// the first response token, after every block and at the embedding, through
/// the final norm and output embedding. Records the earliest probe point whose
/// top-k (ties to the lowest id) contains that token.
ProbeHistogram logit_lens(const Model& m, const Tokenizer& tok, const Dataset& d, std::size_t k);

/// Whether `token` is among the k largest entries of `logits`, where equal
/// values rank by lower id first.
template <class V>
bool in_top_k(const Eigen::DenseBase<V>& logits, Index token, std::size_t k) {
  const auto value = logits(token);
  std::size_t ahead = 0;
  for (Index v = 0; v < logits.size(); ++v) {
    if (logits(v) > value || (logits(v) == value && v < token)) {
      if (++ahead >= k) return false;
    }
  }
  return true;
}

struct GradAlignment {
  double dot = 0.0;
  double cosine = 0.0;
  double norm_a = 0.0;
  double norm_b = 0.0;
};

nlohmann::json to_json(const GradAlignment& a);

template <class A, class B>
GradAlignment alignment(const Eigen::MatrixBase<A>& g_a, const Eigen::MatrixBase<B>& g_b) {
  require(g_a.size() == g_b.size(), ErrorKind::config, "gradient vectors differ in length");
  GradAlignment out;
  out.dot = g_a.dot(g_b);
  out.norm_a = g_a.norm();
  out.norm_b = g_b.norm();
  require(out.norm_a > 0.0 && out.norm_b > 0.0, ErrorKind::degenerate_gradient,
          "zero-norm gradient; cosine is undefined");
  out.cosine = std::clamp(out.dot / (out.norm_a * out.norm_b), -1.0, 1.0);
  return out;
}

/// Seeded subsample of at most `sample` examples; 0 keeps the whole dataset.
Dataset subsample(const Dataset& d, std::size_t sample, std::uint64_t seed);

inline constexpr std::size_t kDefaultGradSample = 64;

GradAlignment grad_alignment(const Model& m, const Tokenizer& tok, const Dataset& d_a, const Dataset& d_b,
                             std::size_t sample = kDefaultGradSample, std::uint64_t seed = 0);

struct DeltaEstimate {
  double delta2 = 0.0;
  double eta = 0.0;
  double mixed = 0.0;  // grad L(D_B u D_M) . grad L(D_A)
  double plain = 0.0;  // grad L(D_B) . grad L(D_A)
};

nlohmann::json to_json(const DeltaEstimate& e);

/// A differentiable training objective over some data type, at a fixed point
/// in parameter space.
template <class O>
concept Objective = requires(const O& o, const typename O::Data& d, const Vector& delta) {
  { o.loss(d) } -> std::convertible_to<double>;
  { o.gradient(d) } -> std::convertible_to<Vector>;
  { o.unite(d, d) } -> std::convertible_to<typename O::Data>;
  { o.shifted(delta) } -> std::convertible_to<O>;
};

template <Objective O>
DeltaEstimate delta2_estimate(const O& f, const typename O::Data& d_a, const typename O::Data& d_b,
                              const std::optional<typename O::Data>& d_m, double eta) {
  require(eta > 0.0, ErrorKind::config, "eta must be > 0");
  const Vector g_a = f.gradient(d_a);
  const Vector g_b = f.gradient(d_b);
  DeltaEstimate out;
  out.eta = eta;
  out.plain = g_b.dot(g_a);
  out.mixed = d_m ? Vector(f.gradient(f.unite(d_b, *d_m))).dot(g_a) : out.plain;
  out.delta2 = eta * (out.mixed - out.plain);
  return out;
}

struct OneStepChange {
  double actual = 0.0;     // L(theta - eta g_train; d_eval) - L(theta; d_eval)
  double predicted = 0.0;  // -eta g_train . g_eval
};

template <Objective O>
OneStepChange one_step_change(const O& f, const typename O::Data& d_train, const typename O::Data& d_eval,
                              double eta) {
  const Vector g_train = f.gradient(d_train);
  const Vector g_eval = f.gradient(d_eval);
  const O stepped = f.shifted(-eta * g_train);
  return {stepped.loss(d_eval) - f.loss(d_eval), -eta * g_train.dot(g_eval)};
}

/// L(theta; D) = mean over c in D of (theta - c)^T H (theta - c) / 2, with H
/// symmetric positive definite. Gradients are exact and a step changes the
/// loss by the first-order term plus exactly eta^2/2 g^T H g.
class QuadraticObjective {
 public:
  using Data = std::vector<Vector>;

  QuadraticObjective(Matrix hessian, Vector theta) : h_(std::move(hessian)), theta_(std::move(theta)) {}

  double loss(const Data& d) const {
    require(!d.empty(), ErrorKind::empty_dataset, "quadratic objective over empty data");
    double total = 0.0;
    for (const auto& c : d) total += 0.5 * (theta_ - c).dot(h_ * (theta_ - c));
    return total / static_cast<double>(d.size());
  }
  Vector gradient(const Data& d) const {
    require(!d.empty(), ErrorKind::empty_dataset, "quadratic objective over empty data");
    Vector mean = Vector::Zero(theta_.size());
    for (const auto& c : d) mean += c;
    mean /= static_cast<double>(d.size());
    return h_ * (theta_ - mean);
  }
  Data unite(const Data& a, const Data& b) const {
    Data out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
  }
  QuadraticObjective shifted(const Vector& delta) const { return {h_, theta_ + delta}; }

  const Matrix& hessian() const noexcept { return h_; }
  const Vector& theta() const noexcept { return theta_; }

 private:
  Matrix h_;
  Vector theta_;
};

/// The transformer's masked LM loss as an Objective over datasets.
class TransformerObjective {
 public:
  using Data = Dataset;

  TransformerObjective(Model model, const Tokenizer& tok) : model_(std::move(model)), tok_(&tok) {}

  double loss(const Dataset& d) const;
  Vector gradient(const Dataset& d) const;
  Dataset unite(const Dataset& a, const Dataset& b) const;
  TransformerObjective shifted(const Vector& delta) const;

  const Model& model() const noexcept { return model_; }

 private:
  std::vector<TrainingSequence> encode(const Dataset& d) const;

  Model model_;
  const Tokenizer* tok_;
};

/// Delta_2 at a checkpoint on seeded subsamples. D_B is cut to `sample`
/// examples and D_M to the size that keeps its proportion to D_B.
DeltaEstimate delta2_estimate(const Model& m, const Tokenizer& tok, const Dataset& d_a, const Dataset& d_b,
                              const Dataset* d_m, double eta, std::size_t sample = kDefaultGradSample,
                              std::uint64_t seed = 0);

}  // namespace forge
