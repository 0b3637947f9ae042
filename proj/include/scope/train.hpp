// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "scope/model.hpp"

namespace scope {

// One corpus item. Autoregressive and diffusion models learn `response`
// given `prompt`; classifiers learn `label` given `prompt`.
struct Example {
  std::vector<int> prompt;
  std::vector<int> response;
  int label = -1;

  bool operator==(const Example&) const = default;
};

struct TrainConfig {
  int steps = 1000;
  int batch_size = 16;
  double learning_rate = 0.1;
  double clip_norm = 1.0;
  int eval_every = 50;
  int eval_examples = 64;
  int response_len = 0;  // diffusion only; 0 picks the longest response
  double init_std = 0.02;
};

struct LossCheckpoint {
  int step = 0;
  double loss = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<LossCheckpoint> checkpoints;
  double final_loss = 0.0;
};

class TrainingDiverged : public NumericError {
 public:
  using NumericError::NumericError;
};

// Minibatch SGD with cosine learning-rate decay and global-norm clipping.
// Deterministic in `seed`.
TrainResult train(const Hyperparams& hp, const Vocab& vocab, const std::vector<Example>& corpus,
                  const TrainConfig& config, std::uint64_t seed);

// Mean per-token negative log-likelihood over `examples` (fixed masks for diffusion).
double corpus_loss(const ModelParams& params, const std::vector<Example>& examples, int response_len,
                   std::uint64_t mask_seed);

}  // namespace scope
