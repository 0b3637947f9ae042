// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "scope/diffusion.hpp"

namespace scope {

// A prompt together with what the model did with it: an autoregressive
// generation, a diffusion trajectory, or a class to explain.
struct PromptedInstance {
  std::vector<int> prompt;
  std::optional<std::vector<int>> generation;
  std::optional<DenoisingTrajectory> trajectory;
  std::optional<int> class_target;
  std::uint64_t seed = 0;

  static PromptedInstance autoregressive(std::vector<int> prompt, std::vector<int> generation, std::uint64_t seed = 0);
  static PromptedInstance diffusion(std::vector<int> prompt, DenoisingTrajectory trajectory);
  static PromptedInstance classified(std::vector<int> input, int cls);

  ModelKind kind() const;
  // Throws std::invalid_argument unless exactly one payload is set, the prompt
  // is non-empty and every token is inside the vocab.
  void check(const Vocab& vocab) const;
  // Content hash of prompt, payload and seed.
  std::uint64_t digest() const;
};

}  // namespace scope
