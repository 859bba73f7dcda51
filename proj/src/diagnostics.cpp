// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "forge/diagnostics.hpp"

#include <algorithm>
#include <cmath>

#include "forge/random.hpp"

namespace forge {
namespace {

constexpr std::size_t kProbeChunk = 128;

}  // namespace

nlohmann::json to_json(const ProbeHistogram& h) {
  return {{"per_layer_frequency", h.per_layer_frequency},
          {"first_hits", h.first_hits},
          {"coverage", h.coverage},
          {"k", h.k}};
}

ProbeHistogram logit_lens(const Model& m, const Tokenizer& tok, const Dataset& d, std::size_t k) {
  require(!d.empty(), ErrorKind::empty_dataset, "cannot probe empty dataset '" + d.id + "'");
  require(k >= 1, ErrorKind::config, "logit lens k must be >= 1");
  const auto points = static_cast<std::size_t>(m.config().n_layers) + 1;
  const ConstMatrixMap unembed = m.segment_view("output.weight");

  ProbeHistogram h;
  h.k = k;
  h.first_hits.assign(points, 0);
  std::size_t events = 0;

  for (std::size_t start = 0; start < d.size(); start += kProbeChunk) {
    const std::size_t stop = std::min(d.size(), start + kProbeChunk);
    std::vector<TokenSequence> batch;
    std::vector<TokenId> answers;
    for (std::size_t i = start; i < stop; ++i) {
      TokenSequence seq{kBos};
      const auto p = tok.encode(d.examples[i].prompt);
      seq.insert(seq.end(), p.begin(), p.end());
      seq.push_back(kSep);
      batch.push_back(std::move(seq));
      const auto r = tok.encode(d.examples[i].response);
      answers.push_back(r.empty() ? kEos : r.front());
    }
    const auto trace = forward(m, batch);
    const auto rows = static_cast<Index>(batch.size());
    std::vector<int> earliest(batch.size(), -1);
    for (std::size_t layer = 0; layer < points; ++layer) {
      Matrix states(rows, m.config().d_model);
      for (Index b = 0; b < rows; ++b) states.row(b) = trace.hidden[layer].row(trace.offsets[b + 1] - 1);
      const Matrix logits = final_norm(m, states) * unembed;
      for (Index b = 0; b < rows; ++b) {
        auto& e = earliest[static_cast<std::size_t>(b)];
        if (e < 0 && in_top_k(logits.row(b), answers[static_cast<std::size_t>(b)], k)) {
          e = static_cast<int>(layer);
        }
      }
    }
    for (int e : earliest) {
      if (e < 0) continue;
      ++h.first_hits[static_cast<std::size_t>(e)];
      ++events;
    }
  }

  h.per_layer_frequency.assign(points, 0.0);
  if (events > 0) {
    for (std::size_t l = 0; l < points; ++l) {
      h.per_layer_frequency[l] = static_cast<double>(h.first_hits[l]) / static_cast<double>(events);
    }
  }
  h.coverage = static_cast<double>(events) / static_cast<double>(d.size());
  return h;
}

nlohmann::json to_json(const GradAlignment& a) {
  return {{"dot", a.dot}, {"cosine", a.cosine}, {"norm_a", a.norm_a}, {"norm_b", a.norm_b}};
}

nlohmann::json to_json(const DeltaEstimate& e) {
  return {{"delta2", e.delta2}, {"eta", e.eta}, {"mixed", e.mixed}, {"plain", e.plain}};
}

Dataset subsample(const Dataset& d, std::size_t sample, std::uint64_t seed) {
  if (sample == 0 || sample >= d.size()) return d;
  Rng rng(seed);
  auto idx = sample_without_replacement(d.size(), sample, rng);
  std::ranges::sort(idx);
  Dataset out{d.id, d.kind, {}, d.seed};
  for (auto i : idx) out.examples.push_back(d.examples[i]);
  return out;
}

GradAlignment grad_alignment(const Model& m, const Tokenizer& tok, const Dataset& d_a, const Dataset& d_b,
                             std::size_t sample, std::uint64_t seed) {
  require(sample <= std::min(d_a.size(), d_b.size()), ErrorKind::config,
          "gradient sample of " + std::to_string(sample) + " exceeds a dataset size (" + std::to_string(d_a.size()) +
              ", " + std::to_string(d_b.size()) + ")");
  const TransformerObjective f(m, tok);
  return alignment(f.gradient(subsample(d_a, sample, seed)), f.gradient(subsample(d_b, sample, seed)));
}

std::vector<TrainingSequence> TransformerObjective::encode(const Dataset& d) const {
  require(!d.empty(), ErrorKind::empty_dataset, "objective evaluated on empty dataset '" + d.id + "'");
  std::vector<TrainingSequence> out;
  out.reserve(d.size());
  for (const auto& e : d.examples) out.push_back(make_training_sequence(tok_->encode(e.prompt), tok_->encode(e.response)));
  return out;
}

double TransformerObjective::loss(const Dataset& d) const { return forge::loss(model_, encode(d)); }

Vector TransformerObjective::gradient(const Dataset& d) const { return forge::gradient(model_, encode(d)); }

Dataset TransformerObjective::unite(const Dataset& a, const Dataset& b) const {
  Dataset out{a.id + "+" + b.id, a.kind, a.examples, a.seed};
  out.examples.insert(out.examples.end(), b.examples.begin(), b.examples.end());
  return out;
}

TransformerObjective TransformerObjective::shifted(const Vector& delta) const {
  Model moved = model_;
  moved.parameters() += delta;
  return TransformerObjective(std::move(moved), *tok_);
}

DeltaEstimate delta2_estimate(const Model& m, const Tokenizer& tok, const Dataset& d_a, const Dataset& d_b,
                              const Dataset* d_m, double eta, std::size_t sample, std::uint64_t seed) {
  const TransformerObjective f(m, tok);
  const Dataset sub_a = subsample(d_a, sample, derive_seed(seed, 0));
  const Dataset sub_b = subsample(d_b, sample, derive_seed(seed, 1));
  std::optional<Dataset> sub_m;
  if (d_m != nullptr && !d_m->empty()) {
    std::size_t keep = 0;
    if (sample != 0 && sub_b.size() < d_b.size()) {
      keep = static_cast<std::size_t>(std::llround(static_cast<double>(sub_b.size()) * static_cast<double>(d_m->size()) /
                                                   static_cast<double>(d_b.size())));
      keep = std::max<std::size_t>(keep, 1);
    }
    sub_m = subsample(*d_m, keep, derive_seed(seed, 2));
  }
  return delta2_estimate(f, sub_a, sub_b, sub_m, eta);
}

}  // namespace forge
