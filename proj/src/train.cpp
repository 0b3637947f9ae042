// SPDX-License-Identifier: Apache-2.0

#include "scope/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "scope/rng.hpp"

namespace scope {

namespace {

struct LossGraph {
  Graph graph;
  LeafValues values;
  BoundParams weights;
  NodeId loss = 0;
};

std::vector<int> diffusion_mask(const Example& ex, int response_len, Rng& rng) {
  const double rate = 1.0 - rng.uniform();  // (0, 1]
  std::vector<int> masked;
  for (int i = 0; i < response_len; ++i) {
    if (rng.uniform() < rate) masked.push_back(i);
  }
  if (masked.empty()) masked.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(response_len))));
  (void)ex;
  return masked;
}

// Adds one example's summed log-likelihood terms to the graph; returns (node, count).
std::pair<NodeId, int> example_terms(Graph& g, const ModelParams& params, const BoundParams& w, const Example& ex,
                                     int response_len, Rng& rng) {
  const Vocab& vocab = params.vocab();
  std::vector<std::size_t> ids;
  auto push = [&](int t) { ids.push_back(static_cast<std::size_t>(t)); };

  std::vector<std::pair<std::size_t, int>> targets;  // (row, token)
  bool causal = false;
  switch (params.kind()) {
    case ModelKind::autoregressive: {
      causal = true;
      for (int t : ex.prompt) push(t);
      for (std::size_t i = 0; i + 1 < ex.response.size(); ++i) push(ex.response[i]);
      for (std::size_t i = 0; i < ex.response.size(); ++i) targets.emplace_back(ex.prompt.size() - 1 + i, ex.response[i]);
      break;
    }
    case ModelKind::masked_diffusion: {
      std::vector<int> response = ex.response;
      response.resize(static_cast<std::size_t>(response_len), vocab.pad());
      const auto masked = diffusion_mask(ex, response_len, rng);
      std::vector<int> seq = response;
      for (int m : masked) seq[static_cast<std::size_t>(m)] = vocab.mask();
      for (int t : ex.prompt) push(t);
      for (int t : seq) push(t);
      for (int m : masked) targets.emplace_back(ex.prompt.size() + static_cast<std::size_t>(m), response[static_cast<std::size_t>(m)]);
      break;
    }
    case ModelKind::classifier: {
      for (int t : ex.prompt) push(t);
      break;
    }
  }
  check_context(params, ids.size());
  const NodeId emb = g.gather_rows(w("tok_emb"), ids);
  const NodeId hidden = encode(g, params, w, emb, causal);
  if (params.kind() == ModelKind::classifier) {
    return {g.pick(class_log_probs(g, w, hidden), 0, static_cast<std::size_t>(ex.label)), 1};
  }
  const NodeId lp = lm_log_probs(g, w, hidden);
  NodeId total = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const NodeId term = g.pick(lp, targets[i].first, static_cast<std::size_t>(targets[i].second));
    total = i == 0 ? term : g.add(total, term);
  }
  return {total, static_cast<int>(targets.size())};
}

NodeId batch_loss(Graph& g, const ModelParams& params, const BoundParams& w, const std::vector<const Example*>& batch,
                  int response_len, Rng& rng) {
  NodeId total = 0;
  int count = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto [node, n] = example_terms(g, params, w, *batch[i], response_len, rng);
    total = i == 0 ? node : g.add(total, node);
    count += n;
  }
  return g.scale(total, -1.0 / static_cast<double>(count));
}

void check_corpus(const ModelParams& params, const std::vector<Example>& corpus, int response_len) {
  if (corpus.empty()) throw std::invalid_argument("training corpus is empty");
  for (const auto& ex : corpus) {
    if (ex.prompt.empty()) throw std::invalid_argument("corpus example with empty prompt");
    check_tokens(params, ex.prompt, "corpus");
    check_tokens(params, ex.response, "corpus");
    switch (params.kind()) {
      case ModelKind::autoregressive:
        if (ex.response.empty()) throw std::invalid_argument("autoregressive example with empty response");
        check_context(params, ex.prompt.size() + ex.response.size() - 1);
        break;
      case ModelKind::masked_diffusion:
        if (ex.response.empty() || ex.response.size() > static_cast<std::size_t>(response_len)) {
          throw std::invalid_argument("diffusion example response longer than response_len");
        }
        check_context(params, ex.prompt.size() + static_cast<std::size_t>(response_len));
        break;
      case ModelKind::classifier:
        if (ex.label < 0 || ex.label >= params.hyper().num_classes) throw std::invalid_argument("label out of range");
        check_context(params, ex.prompt.size());
        break;
    }
  }
}

int resolve_response_len(const std::vector<Example>& corpus, int requested) {
  if (requested > 0) return requested;
  std::size_t longest = 1;
  for (const auto& ex : corpus) longest = std::max(longest, ex.response.size());
  return static_cast<int>(longest);
}

}  // namespace

double corpus_loss(const ModelParams& params, const std::vector<Example>& examples, int response_len,
                   std::uint64_t mask_seed) {
  if (examples.empty()) throw std::invalid_argument("no examples to evaluate");
  Graph g;
  const BoundParams w = bind_constants(g, params);
  Rng rng(mask_seed);
  std::vector<const Example*> batch;
  for (const auto& ex : examples) batch.push_back(&ex);
  const NodeId loss = batch_loss(g, params, w, batch, resolve_response_len(examples, response_len), rng);
  return Evaluation(g, LeafValues{}).value(loss).item();
}

TrainResult train(const Hyperparams& hp, const Vocab& vocab, const std::vector<Example>& corpus,
                  const TrainConfig& config, std::uint64_t seed) {
  if (config.steps < 1 || config.batch_size < 1 || !(config.learning_rate > 0.0) || config.eval_every < 1) {
    throw std::invalid_argument("invalid training configuration");
  }
  ModelParams params = ModelParams::initialize(hp, vocab, seed, config.init_std);
  const int response_len = resolve_response_len(corpus, config.response_len);
  check_corpus(params, corpus, response_len);

  std::vector<Example> eval_set(corpus.begin(),
                                corpus.begin() + std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(corpus.size()),
                                                                          std::max(1, config.eval_examples)));
  const std::uint64_t eval_seed = derive_seed(seed, 0xe7a1);

  TrainResult result{params, {}, 0.0};
  auto checkpoint = [&](int step) {
    const double loss = corpus_loss(params, eval_set, response_len, eval_seed);
    result.checkpoints.push_back({step, loss});
    return loss;
  };
  checkpoint(0);

  Rng order_rng(derive_seed(seed, 0x0d3e));
  Rng mask_rng(derive_seed(seed, 0x3a5c));
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  order_rng.shuffle(order);
  std::size_t cursor = 0;

  for (int step = 1; step <= config.steps; ++step) {
    std::vector<const Example*> batch;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(&corpus[order[cursor++]]);
    }

    LossGraph lg;
    lg.weights = bind_leaves(lg.graph, params, lg.values);
    double loss = 0.0;
    Gradients grads;
    try {
      lg.loss = batch_loss(lg.graph, params, lg.weights, batch, response_len, mask_rng);
      Evaluation ev(lg.graph, lg.values);
      loss = ev.value(lg.loss).item();
      grads = ev.backward(lg.loss);
    } catch (const NumericError& e) {
      throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": " + e.what());
    }

    double norm2 = 0.0;
    for (const auto& [id, gt] : grads) {
      for (double v : gt.data()) norm2 += v * v;
    }
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm) || !std::isfinite(loss)) {
      throw TrainingDiverged("training diverged at step " + std::to_string(step) + ": loss " + std::to_string(loss));
    }
    const double clip = (config.clip_norm > 0.0 && norm > config.clip_norm) ? config.clip_norm / norm : 1.0;
    const double lr = config.learning_rate * 0.5 *
                      (1.0 + std::cos(std::numbers::pi * static_cast<double>(step - 1) / config.steps));

    ModelParams::Weights updated;
    for (const auto& [name, tensor] : params.weights()) {
      const Tensor& gt = grads.at(lg.weights(name));
      Tensor next = *tensor;
      auto d = next.data();
      auto gd = gt.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * clip * gd[i];
      updated.emplace(name, std::make_shared<const Tensor>(std::move(next)));
    }
    params = params.with_weights(std::move(updated));

    if (step % config.eval_every == 0 || step == config.steps) {
      if (!std::isfinite(checkpoint(step))) throw TrainingDiverged("evaluation loss is not finite");
    }
  }
  result.params = params;
  result.final_loss = result.checkpoints.back().loss;
  return result;
}

}  // namespace scope
