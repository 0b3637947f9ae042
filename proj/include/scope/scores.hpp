// SPDX-License-Identifier: Apache-2.0
//
// Autoregressive and classifier scores, generation, and the differentiable
// score graphs the attribution engine differentiates.

#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "scope/graph.hpp"
#include "scope/model.hpp"

namespace scope {

// A scalar model score as a graph over one differentiable leaf holding
// token-embedding rows. Everything else (weights, positions, fixed context
// outside the leaf) is constant.
struct ScoreGraph {
  Graph graph;
  NodeId embeddings = 0;
  NodeId output = 0;
  Tensor actual;                // token-embedding rows at the actual input
  std::vector<int> row_tokens;  // token occupying each leaf row

  double value() const { return value_at(actual); }
  double value_at(const Tensor& rows) const;
  // Score and d(score)/d(rows) at `rows`.
  std::pair<double, Tensor> value_and_grad(const Tensor& rows) const;
};

// ---- autoregressive ------------------------------------------------------

std::vector<double> ar_next_log_probs(const ModelParams& params, std::span<const int> prompt,
                                      std::span<const int> prefix);

// log p(target | prompt, prefix). Leaf rows: prompt then prefix.
ScoreGraph token_log_prob_graph(const ModelParams& params, std::span<const int> prompt, std::span<const int> prefix,
                                int target);
double token_log_prob(const ModelParams& params, std::span<const int> prompt, std::span<const int> prefix, int target);

// log p(span | prompt) = sum_t log p(span_t | prompt, span_<t), from one causal pass.
// Leaf rows: prompt then span[0 .. T-2].
ScoreGraph span_log_prob_graph(const ModelParams& params, std::span<const int> prompt, std::span<const int> span);
double span_log_prob(const ModelParams& params, std::span<const int> prompt, std::span<const int> span);

struct DecodePolicy {
  enum class Kind { greedy, sample };
  Kind kind = Kind::greedy;
  double temperature = 1.0;

  static DecodePolicy greedy() { return {}; }
  static DecodePolicy sample(double temperature) { return {Kind::sample, temperature}; }
};

// Stops after emitting EOS or after max_len tokens.
std::vector<int> ar_generate(const ModelParams& params, std::span<const int> prompt, int max_len,
                             DecodePolicy policy, std::uint64_t seed);

// ---- classifier ----------------------------------------------------------

std::vector<double> classifier_log_probs(const ModelParams& params, std::span<const int> tokens);
ScoreGraph classifier_log_prob_graph(const ModelParams& params, std::span<const int> tokens, int cls);
double classifier_log_prob(const ModelParams& params, std::span<const int> tokens, int cls);

// ---- instrumentation -------------------------------------------------------

// Process-wide counters of generation entry points, used to audit that an
// evaluation re-scores rather than regenerates.
struct GenerationStats {
  std::uint64_t ar_generate_calls = 0;
  std::uint64_t chain_runs = 0;
  std::vector<std::uint64_t> chain_seeds;
};

GenerationStats generation_stats();
void reset_generation_stats();
void record_ar_generate();
void record_chain_run(std::uint64_t seed);

// Picks a token from log-probabilities: argmax (lowest index on ties) for
// greedy, otherwise a temperature-scaled draw. `excluded` tokens are never picked.
int choose_token(std::span<const double> log_probs, DecodePolicy policy, double u, std::span<const int> excluded = {});

}  // namespace scope
