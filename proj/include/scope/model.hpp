// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale transformer parameters and the graph builders shared by the
// autoregressive, masked-diffusion and classifier models.

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "scope/graph.hpp"
#include "scope/tensor.hpp"
#include "scope/vocab.hpp"

namespace scope {

enum class ModelKind { autoregressive, masked_diffusion, classifier };

const char* to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& text);

class ModelKindError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContextOverflow : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Hyperparams {
  ModelKind kind = ModelKind::autoregressive;
  int layers = 2;
  int heads = 2;
  int width = 64;
  int context = 64;
  int ff_width = 128;
  int num_classes = 2;  // classifier only

  void validate() const;
  bool operator==(const Hyperparams&) const = default;
};

// Immutable weights plus the content hash that identifies them.
class ModelParams {
 public:
  using Weights = std::map<std::string, std::shared_ptr<const Tensor>>;

  ModelParams(Hyperparams hp, Vocab vocab, Weights weights);

  // Small normal initialization, deterministic in `seed`.
  static ModelParams initialize(const Hyperparams& hp, const Vocab& vocab, std::uint64_t seed, double init_std = 0.02);
  // Every weight name with its shape, in serialization order.
  static std::vector<std::pair<std::string, Shape>> layout(const Hyperparams& hp, int vocab_size);

  ModelKind kind() const { return hp_.kind; }
  const Hyperparams& hyper() const { return hp_; }
  const Vocab& vocab() const { return vocab_; }
  const Weights& weights() const { return weights_; }
  const Tensor& weight(const std::string& name) const;
  std::shared_ptr<const Tensor> shared_weight(const std::string& name) const;
  std::uint64_t model_id() const { return model_id_; }

  ModelParams with_weights(Weights weights) const { return ModelParams(hp_, vocab_, std::move(weights)); }
  ModelParams with_weight(const std::string& name, Tensor value) const;

  // Canonical header text covering kind, hyperparameters, vocab and layout.
  std::string header_text() const;

 private:
  Hyperparams hp_;
  Vocab vocab_;
  Weights weights_;
  std::uint64_t model_id_ = 0;
};

// Graph node ids of the model weights inside one graph.
struct BoundParams {
  std::map<std::string, NodeId> ids;
  NodeId operator()(const std::string& name) const;
};

BoundParams bind_constants(Graph& g, const ModelParams& params);
// Weights become differentiable leaves; their values are added to `values`.
BoundParams bind_leaves(Graph& g, const ModelParams& params, LeafValues& values);

// Token-embedding rows for a sequence, without positional information.
Tensor token_embedding_rows(const ModelParams& params, std::span<const int> tokens);

// Embedding rows (token embeddings) -> final layer-normed hidden states [L, width].
// Positional embeddings are added inside.
NodeId encode(Graph& g, const ModelParams& params, const BoundParams& w, NodeId token_embeddings, bool causal);
// Hidden states -> per-position log-probabilities over the vocab [L, V].
NodeId lm_log_probs(Graph& g, const BoundParams& w, NodeId hidden);
// Hidden states -> mean-pooled class log-probabilities [1, C].
NodeId class_log_probs(Graph& g, const BoundParams& w, NodeId hidden);

void check_tokens(const ModelParams& params, std::span<const int> tokens, const char* what);
void check_context(const ModelParams& params, std::size_t length);
void require_kind(const ModelParams& params, ModelKind kind, const char* op);

}  // namespace scope
