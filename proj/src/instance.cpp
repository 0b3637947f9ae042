// SPDX-License-Identifier: Apache-2.0

#include "scope/instance.hpp"

#include "scope/hash.hpp"

namespace scope {

PromptedInstance PromptedInstance::autoregressive(std::vector<int> prompt, std::vector<int> generation,
                                                  std::uint64_t seed) {
  PromptedInstance in;
  in.prompt = std::move(prompt);
  in.generation = std::move(generation);
  in.seed = seed;
  return in;
}

PromptedInstance PromptedInstance::diffusion(std::vector<int> prompt, DenoisingTrajectory trajectory) {
  PromptedInstance in;
  in.prompt = std::move(prompt);
  in.seed = trajectory.seed();
  in.trajectory = std::move(trajectory);
  return in;
}

PromptedInstance PromptedInstance::classified(std::vector<int> input, int cls) {
  PromptedInstance in;
  in.prompt = std::move(input);
  in.class_target = cls;
  return in;
}

ModelKind PromptedInstance::kind() const {
  if (trajectory) return ModelKind::masked_diffusion;
  if (class_target) return ModelKind::classifier;
  return ModelKind::autoregressive;
}

void PromptedInstance::check(const Vocab& vocab) const {
  const int payloads = (generation ? 1 : 0) + (trajectory ? 1 : 0) + (class_target ? 1 : 0);
  if (payloads != 1) throw std::invalid_argument("instance must carry exactly one of generation, trajectory, class");
  if (prompt.empty()) throw std::invalid_argument("instance prompt is empty");
  auto in_vocab = [&](const std::vector<int>& tokens, const char* what) {
    for (int t : tokens) {
      if (t < 0 || t >= vocab.size()) {
        throw std::invalid_argument(std::string(what) + " token " + std::to_string(t) + " outside vocab");
      }
    }
  };
  in_vocab(prompt, "prompt");
  if (generation) {
    if (generation->empty()) throw std::invalid_argument("instance generation is empty");
    in_vocab(*generation, "generation");
  }
  if (trajectory) in_vocab(trajectory->final_output(), "trajectory");
  if (class_target && *class_target < 0) throw std::invalid_argument("negative class target");
}

std::uint64_t PromptedInstance::digest() const {
  Fnv1a h;
  h.text("instance");
  h.u64(prompt.size());
  for (int t : prompt) h.u64(static_cast<std::uint64_t>(t));
  if (generation) {
    h.text("generation").u64(generation->size());
    for (int t : *generation) h.u64(static_cast<std::uint64_t>(t));
  }
  if (trajectory) {
    h.text("trajectory").u64(static_cast<std::uint64_t>(trajectory->num_steps()));
    h.u64(static_cast<std::uint64_t>(trajectory->response_len()));
    for (const auto& c : trajectory->commitments()) {
      h.u64(static_cast<std::uint64_t>(c.slot)).u64(static_cast<std::uint64_t>(c.token)).u64(static_cast<std::uint64_t>(c.step));
    }
    h.text(to_string(trajectory->policy()));
  }
  if (class_target) h.text("class").u64(static_cast<std::uint64_t>(*class_target));
  h.u64(seed);
  return h.value();
}

}  // namespace scope
