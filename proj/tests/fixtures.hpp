// SPDX-License-Identifier: Apache-2.0
//
// Small random models shared by the attribution and evaluation tests.

#pragma once

#include "scope/diffusion.hpp"
#include "scope/instance.hpp"
#include "scope/model.hpp"
#include "scope/scores.hpp"

namespace scope::testing {

inline Vocab small_vocab() { return Vocab::with_specials({"a", "b", "c", "d", "e", "f"}); }

inline Hyperparams small_hp(ModelKind kind) {
  Hyperparams hp;
  hp.kind = kind;
  hp.width = 16;
  hp.ff_width = 24;
  hp.context = 24;
  return hp;
}

inline ModelParams random_model(ModelKind kind, std::uint64_t seed) {
  return ModelParams::initialize(small_hp(kind), small_vocab(), seed, 0.3);
}

inline PromptedInstance generated_diffusion_instance(const ModelParams& params, std::vector<int> prompt, int len,
                                                     int steps, std::uint64_t seed,
                                                     DiffusionPolicy policy = {}) {
  auto tr = diffusion_generate(params, prompt, len, steps, seed, policy);
  return PromptedInstance::diffusion(std::move(prompt), std::move(tr));
}

}  // namespace scope::testing
