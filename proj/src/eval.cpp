// Copyright 2026 The Factoid Forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "forge/eval.hpp"

#include <algorithm>
#include <cctype>
#include <functional>

#include "forge/error.hpp"
#include "forge/nn_ops.hpp"

namespace forge {
namespace {

constexpr std::size_t kEvalChunk = 128;

std::string_view trim(std::string_view s) {
  const auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

TokenSequence prompt_prefix(const Tokenizer& tok, std::string_view prompt) {
  TokenSequence seq{kBos};
  const auto ids = tok.encode(prompt);
  seq.insert(seq.end(), ids.begin(), ids.end());
  seq.push_back(kSep);
  return seq;
}

struct Decoded {
  TokenSequence ids;
  bool abandoned = false;
};

// Batched greedy decoding. `keep_going(i, ids)` may stop prompt i early, in
// which case its output is marked abandoned.
std::vector<Decoded> greedy_decode(const Model& m, const Tokenizer& tok, std::span<const std::string> prompts,
                                   std::span<const std::size_t> max_new_tokens,
                                   const std::function<bool(std::size_t, const TokenSequence&)>& keep_going) {
  const auto limit = static_cast<std::size_t>(m.config().max_seq_len);
  struct Live {
    std::size_t index;
    TokenSequence seq;
    TokenSequence out;
  };
  std::vector<Decoded> outputs(prompts.size());
  std::vector<Live> live;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    auto seq = prompt_prefix(tok, prompts[i]);
    if (max_new_tokens[i] > 0) live.push_back({i, std::move(seq), {}});
  }

  std::vector<TokenSequence> batch;
  std::vector<Index> offsets;
  while (!live.empty()) {
    std::vector<Live> next_live;
    for (std::size_t start = 0; start < live.size(); start += kEvalChunk) {
      const std::size_t stop = std::min(live.size(), start + kEvalChunk);
      batch.clear();
      for (std::size_t b = start; b < stop; ++b) batch.push_back(live[b].seq);
      const Matrix logits = forward_logits(m, batch, &offsets);
      for (std::size_t b = start; b < stop; ++b) {
        auto& l = live[b];
        const auto row = offsets[b - start + 1] - 1;
        const auto next = static_cast<TokenId>(nn::argmax(logits.row(row)));
        bool done = next == kEos;
        bool abandoned = false;
        if (!done) {
          l.out.push_back(next);
          abandoned = keep_going && !keep_going(l.index, l.out);
          done = abandoned || l.out.size() >= max_new_tokens[l.index] || l.seq.size() + 1 > limit;
          if (!done) l.seq.push_back(next);
        }
        if (done) {
          outputs[l.index] = {std::move(l.out), abandoned};
        } else {
          next_live.push_back(std::move(l));
        }
      }
    }
    live = std::move(next_live);
  }
  return outputs;
}

// Whether some continuation of `text` can still match `target` after trimming.
bool can_still_match(std::string_view text, std::string_view target) {
  const auto t = trim(target);
  auto l = text;
  while (!l.empty() && std::isspace(static_cast<unsigned char>(l.front()))) l.remove_prefix(1);
  return t.starts_with(l) || trim(l) == t;
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : r.per_example) {
    rows.push_back({{"prompt", e.prompt},
                    {"prediction", e.prediction},
                    {"target", e.target},
                    {"correct", e.correct}});
  }
  return {{"accuracy", r.accuracy}, {"per_example", rows}};
}

std::vector<std::string> predict_batch(const Model& m, const Tokenizer& tok,
                                       std::span<const std::string> prompts,
                                       std::span<const std::size_t> max_new_tokens) {
  require(prompts.size() == max_new_tokens.size(), ErrorKind::config,
          "predict_batch needs one token budget per prompt");
  const auto outputs = greedy_decode(m, tok, prompts, max_new_tokens, {});
  std::vector<std::string> texts;
  texts.reserve(outputs.size());
  for (const auto& d : outputs) texts.push_back(tok.decode(d.ids));
  return texts;
}

std::string predict(const Model& m, const Tokenizer& tok, std::string_view prompt,
                    std::size_t max_new_tokens) {
  const std::string p(prompt);
  return predict_batch(m, tok, std::span(&p, 1), std::span(&max_new_tokens, 1)).front();
}

bool matches(std::string_view prediction, std::string_view target) {
  return trim(prediction) == trim(target);
}

EvalReport exact_match(const Model& m, const Tokenizer& tok, const Dataset& d) {
  require(!d.empty(), ErrorKind::empty_dataset, "cannot evaluate empty dataset '" + d.id + "'");
  std::vector<std::string> prompts;
  std::vector<std::size_t> budgets;
  for (const auto& e : d.examples) {
    prompts.push_back(e.prompt);
    budgets.push_back(tok.encode(e.response).size() + kDecodeSlack);
  }
  const auto predictions = predict_batch(m, tok, prompts, budgets);
  EvalReport report;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& e = d.examples[i];
    const bool ok = matches(predictions[i], e.response);
    hits += ok;
    report.per_example.push_back({e.prompt, predictions[i], e.response, ok});
  }
  report.accuracy = static_cast<double>(hits) / static_cast<double>(d.size());
  return report;
}

std::vector<bool> correctness(const Model& m, const Tokenizer& tok, const Dataset& d) {
  require(!d.empty(), ErrorKind::empty_dataset, "cannot evaluate empty dataset '" + d.id + "'");
  const auto limit = static_cast<std::size_t>(m.config().max_seq_len);
  std::vector<bool> correct(d.size(), false);
  std::vector<std::size_t> undecided;

  std::vector<TokenSequence> batch;
  std::vector<TokenSequence> responses;
  std::vector<std::size_t> members;
  std::vector<Index> offsets;
  auto flush = [&] {
    if (batch.empty()) return;
    const Matrix logits = forward_logits(m, batch, &offsets);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::size_t i = members[b];
      const auto& r = responses[b];
      const Index sep = offsets[b] + static_cast<Index>(batch[b].size() - r.size()) - 1;
      std::size_t j = 0;
      TokenId got = kEos;
      for (; j <= r.size(); ++j) {
        const TokenId want = j < r.size() ? r[j] : kEos;
        got = static_cast<TokenId>(nn::argmax(logits.row(sep + static_cast<Index>(j))));
        if (got != want) break;
      }
      const auto& target = d.examples[i].response;
      if (j > r.size()) {
        correct[i] = matches(tok.decode(r), target);
      } else if (trim(tok.decode(std::span(&got, 1))).empty() || trim(target).size() != target.size()) {
        undecided.push_back(i);
      }
    }
    batch.clear();
    responses.clear();
    members.clear();
  };

  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& e = d.examples[i];
    auto seq = prompt_prefix(tok, e.prompt);
    auto r = tok.encode(e.response);
    if (seq.size() + r.size() > limit) {
      undecided.push_back(i);
      continue;
    }
    seq.insert(seq.end(), r.begin(), r.end());
    batch.push_back(std::move(seq));
    responses.push_back(std::move(r));
    members.push_back(i);
    if (batch.size() == kEvalChunk) flush();
  }
  flush();

  if (!undecided.empty()) {
    std::sort(undecided.begin(), undecided.end());
    std::vector<std::string> prompts;
    std::vector<std::size_t> budgets;
    for (auto i : undecided) {
      prompts.push_back(d.examples[i].prompt);
      budgets.push_back(tok.encode(d.examples[i].response).size() + kDecodeSlack);
    }
    const auto decoded = greedy_decode(m, tok, prompts, budgets, [&](std::size_t u, const TokenSequence& ids) {
      return can_still_match(tok.decode(ids), d.examples[undecided[u]].response);
    });
    for (std::size_t u = 0; u < undecided.size(); ++u) {
      correct[undecided[u]] =
          !decoded[u].abandoned && matches(tok.decode(decoded[u].ids), d.examples[undecided[u]].response);
    }
  }
  return correct;
}

double accuracy(const Model& m, const Tokenizer& tok, const Dataset& d) {
  const auto c = correctness(m, tok, d);
  return static_cast<double>(std::count(c.begin(), c.end(), true)) / static_cast<double>(c.size());
}

Dataset filter_unfamiliar(const Model& m, const Tokenizer& tok, const Dataset& d) {
  require(d.kind == DatasetKind::factoid, ErrorKind::config,
          "familiarity is defined for factoid datasets; '" + d.id + "' is " +
              std::string(to_string(d.kind)));
  Dataset out{d.id, d.kind, {}, d.seed};
  if (d.empty()) return out;
  const auto c = correctness(m, tok, d);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!c[i]) out.examples.push_back(d.examples[i]);
  }
  return out;
}

}  // namespace forge
