// SPDX-License-Identifier: Apache-2.0

#include "scope/scores.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>

#include "scope/rng.hpp"

namespace scope {

double ScoreGraph::value_at(const Tensor& rows) const {
  LeafValues values;
  values.emplace(embeddings, rows);
  return Evaluation(graph, values).value(output).item();
}

std::pair<double, Tensor> ScoreGraph::value_and_grad(const Tensor& rows) const {
  LeafValues values;
  values.emplace(embeddings, rows);
  Evaluation ev(graph, values);
  auto grads = ev.backward(output, {embeddings});
  return {ev.value(output).item(), std::move(grads.at(embeddings))};
}

namespace {

std::vector<int> concat(std::span<const int> a, std::span<const int> b) {
  std::vector<int> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

// Leaf over `rows` tokens, full forward pass, returns log-prob node [L, V].
NodeId lm_pass(ScoreGraph& sg, const ModelParams& params, std::span<const int> tokens, bool causal) {
  const BoundParams w = bind_constants(sg.graph, params);
  sg.row_tokens.assign(tokens.begin(), tokens.end());
  sg.actual = token_embedding_rows(params, tokens);
  sg.embeddings = sg.graph.leaf("embeddings", sg.actual.shape(), true);
  return lm_log_probs(sg.graph, w, encode(sg.graph, params, w, sg.embeddings, causal));
}

std::vector<double> row_of(const Tensor& t, std::size_t r) {
  auto row = t.row(r);
  return {row.begin(), row.end()};
}

}  // namespace

std::vector<double> ar_next_log_probs(const ModelParams& params, std::span<const int> prompt,
                                      std::span<const int> prefix) {
  require_kind(params, ModelKind::autoregressive, "ar_next_log_probs");
  if (prompt.empty()) throw std::invalid_argument("prompt must be non-empty");
  const auto tokens = concat(prompt, prefix);
  check_tokens(params, tokens, "context");
  check_context(params, tokens.size());
  ScoreGraph sg;
  const NodeId lp = lm_pass(sg, params, tokens, true);
  LeafValues values;
  values.emplace(sg.embeddings, sg.actual);
  Evaluation ev(sg.graph, values);
  return row_of(ev.value(lp), tokens.size() - 1);
}

ScoreGraph token_log_prob_graph(const ModelParams& params, std::span<const int> prompt, std::span<const int> prefix,
                                int target) {
  require_kind(params, ModelKind::autoregressive, "token_log_prob");
  if (prompt.empty()) throw std::invalid_argument("prompt must be non-empty");
  const auto tokens = concat(prompt, prefix);
  check_tokens(params, tokens, "context");
  check_tokens(params, std::span<const int>(&target, 1), "target");
  check_context(params, tokens.size());
  ScoreGraph sg;
  const NodeId lp = lm_pass(sg, params, tokens, true);
  sg.output = sg.graph.pick(lp, tokens.size() - 1, static_cast<std::size_t>(target));
  return sg;
}

double token_log_prob(const ModelParams& params, std::span<const int> prompt, std::span<const int> prefix, int target) {
  return token_log_prob_graph(params, prompt, prefix, target).value();
}

ScoreGraph span_log_prob_graph(const ModelParams& params, std::span<const int> prompt, std::span<const int> span) {
  require_kind(params, ModelKind::autoregressive, "span_log_prob");
  if (prompt.empty()) throw std::invalid_argument("prompt must be non-empty");
  if (span.empty()) throw std::invalid_argument("span must be non-empty");
  check_tokens(params, span, "span");
  const auto tokens = concat(prompt, span.first(span.size() - 1));
  check_tokens(params, tokens, "context");
  check_context(params, tokens.size());
  ScoreGraph sg;
  const NodeId lp = lm_pass(sg, params, tokens, true);
  NodeId total = 0;
  for (std::size_t t = 0; t < span.size(); ++t) {
    const NodeId term = sg.graph.pick(lp, prompt.size() - 1 + t, static_cast<std::size_t>(span[t]));
    total = t == 0 ? term : sg.graph.add(total, term);
  }
  sg.output = total;
  return sg;
}

double span_log_prob(const ModelParams& params, std::span<const int> prompt, std::span<const int> span) {
  return span_log_prob_graph(params, prompt, span).value();
}

int choose_token(std::span<const double> log_probs, DecodePolicy policy, double u, std::span<const int> excluded) {
  auto allowed = [&](std::size_t i) {
    return std::find(excluded.begin(), excluded.end(), static_cast<int>(i)) == excluded.end();
  };
  if (policy.kind == DecodePolicy::Kind::greedy) {
    int best = -1;
    for (std::size_t i = 0; i < log_probs.size(); ++i) {
      if (allowed(i) && (best < 0 || log_probs[i] > log_probs[static_cast<std::size_t>(best)])) {
        best = static_cast<int>(i);
      }
    }
    if (best < 0) throw std::invalid_argument("no token available to decode");
    return best;
  }
  if (!(policy.temperature > 0.0)) throw std::invalid_argument("sampling temperature must be positive");
  double mx = -INFINITY;
  for (std::size_t i = 0; i < log_probs.size(); ++i) {
    if (allowed(i)) mx = std::max(mx, log_probs[i] / policy.temperature);
  }
  if (!std::isfinite(mx)) throw std::invalid_argument("no token available to decode");
  std::vector<double> w(log_probs.size(), 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < log_probs.size(); ++i) {
    if (allowed(i)) w[i] = std::exp(log_probs[i] / policy.temperature - mx);
    z += w[i];
  }
  double acc = 0.0;
  const double target = u * z;
  int last = -1;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] <= 0.0) continue;
    last = static_cast<int>(i);
    acc += w[i];
    if (target < acc) return last;
  }
  return last;
}

std::vector<int> ar_generate(const ModelParams& params, std::span<const int> prompt, int max_len,
                             DecodePolicy policy, std::uint64_t seed) {
  require_kind(params, ModelKind::autoregressive, "ar_generate");
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  record_ar_generate();
  Rng rng(derive_seed(seed, 0xa7));
  std::vector<int> out;
  const int excluded[] = {params.vocab().mask()};
  for (int step = 0; step < max_len; ++step) {
    const auto lp = ar_next_log_probs(params, prompt, out);
    const int tok = choose_token(lp, policy, rng.uniform(), excluded);
    out.push_back(tok);
    if (tok == params.vocab().eos()) break;
  }
  return out;
}

std::vector<double> classifier_log_probs(const ModelParams& params, std::span<const int> tokens) {
  require_kind(params, ModelKind::classifier, "classifier_log_prob");
  check_tokens(params, tokens, "input");
  check_context(params, tokens.size());
  Graph g;
  const BoundParams w = bind_constants(g, params);
  const NodeId leaf = g.leaf("embeddings", {tokens.size(), static_cast<std::size_t>(params.hyper().width)});
  const NodeId lp = class_log_probs(g, w, encode(g, params, w, leaf, false));
  LeafValues values;
  values.emplace(leaf, token_embedding_rows(params, tokens));
  return row_of(Evaluation(g, values).value(lp), 0);
}

ScoreGraph classifier_log_prob_graph(const ModelParams& params, std::span<const int> tokens, int cls) {
  require_kind(params, ModelKind::classifier, "classifier_log_prob");
  if (cls < 0 || cls >= params.hyper().num_classes) {
    throw std::out_of_range("class index " + std::to_string(cls) + " outside [0, " +
                            std::to_string(params.hyper().num_classes) + ")");
  }
  check_tokens(params, tokens, "input");
  check_context(params, tokens.size());
  ScoreGraph sg;
  const BoundParams w = bind_constants(sg.graph, params);
  sg.row_tokens.assign(tokens.begin(), tokens.end());
  sg.actual = token_embedding_rows(params, tokens);
  sg.embeddings = sg.graph.leaf("embeddings", sg.actual.shape(), true);
  const NodeId lp = class_log_probs(sg.graph, w, encode(sg.graph, params, w, sg.embeddings, false));
  sg.output = sg.graph.pick(lp, 0, static_cast<std::size_t>(cls));
  return sg;
}

double classifier_log_prob(const ModelParams& params, std::span<const int> tokens, int cls) {
  return classifier_log_prob_graph(params, tokens, cls).value();
}

namespace {
std::mutex stats_mutex;
GenerationStats stats;
}  // namespace

GenerationStats generation_stats() {
  std::lock_guard lock(stats_mutex);
  return stats;
}

void reset_generation_stats() {
  std::lock_guard lock(stats_mutex);
  stats = {};
}

void record_ar_generate() {
  std::lock_guard lock(stats_mutex);
  ++stats.ar_generate_calls;
}

void record_chain_run(std::uint64_t seed) {
  std::lock_guard lock(stats_mutex);
  ++stats.chain_runs;
  stats.chain_seeds.push_back(seed);
}

}  // namespace scope
