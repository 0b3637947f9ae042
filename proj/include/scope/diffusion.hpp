// SPDX-License-Identifier: Apache-2.0
//
// Masked-diffusion generation over a fixed-length response region.
//
// Indexing follows the denoising convention: the chain runs z_T -> ... -> z_0
// and higher t is earlier. Step t turns z_t into z_{t-1} by committing k_t
// masked slots, so tokens committed at step t are conditioned on z_t, which
// already holds every commitment of steps t+1..T.

#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "scope/scores.hpp"

namespace scope {

struct Slot {
  static constexpr int kMasked = -1;
  int token = kMasked;
  int committed_at = 0;  // step that committed the slot; 0 while masked

  bool masked() const { return token == kMasked; }
  bool operator==(const Slot&) const = default;
};

using DiffusionState = std::vector<Slot>;

struct DiffusionPolicy {
  enum class Rule { confidence, random_position, sample };
  Rule rule = Rule::confidence;
  double temperature = 1.0;

  bool operator==(const DiffusionPolicy&) const = default;
};

std::string to_string(const DiffusionPolicy& policy);
DiffusionPolicy parse_diffusion_policy(const std::string& text);

struct Commitment {
  int slot = 0;
  int token = 0;
  int step = 0;
};

class TrajectoryError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DenoisingTrajectory {
 public:
  // `states` runs z_T first, z_0 last. Validates every trajectory invariant.
  DenoisingTrajectory(int num_steps, std::vector<DiffusionState> states, std::uint64_t seed,
                      DiffusionPolicy policy = {});
  static DenoisingTrajectory from_commitments(int response_len, int num_steps, const std::vector<Commitment>& events,
                                              std::uint64_t seed, DiffusionPolicy policy = {});

  int num_steps() const { return num_steps_; }
  int response_len() const { return static_cast<int>(final_output_.size()); }
  const std::vector<DiffusionState>& states() const { return states_; }
  const DiffusionState& state(int t) const;  // z_t
  const std::vector<int>& final_output() const { return final_output_; }
  std::uint64_t seed() const { return seed_; }
  const DiffusionPolicy& policy() const { return policy_; }

  // Slots committed at `step`, ascending.
  std::vector<int> committed_at(int step) const;
  // k_t for t = 1..T; index 0 is unused.
  std::vector<int> schedule() const;
  std::vector<Commitment> commitments() const;

  bool operator==(const DenoisingTrajectory& other) const;

 private:
  int num_steps_;
  std::vector<DiffusionState> states_;
  std::vector<int> final_output_;
  std::uint64_t seed_;
  DiffusionPolicy policy_;
};

// Even schedule: k_t = ceil(remaining / stages_left), applied from t = T down to 1.
std::vector<int> even_schedule(int response_len, int num_steps);

// Log-probabilities [response_len, V] for every response slot given a state
// (masked slots fed as MASK). Bidirectional attention.
Tensor diffusion_slot_log_probs(const ModelParams& params, std::span<const int> prompt, const DiffusionState& state);

// Sum of log p(tokens[j] | prompt, cond) at `slots[j]`, with those slots fed
// as MASK. Leaf rows: prompt then every response slot.
ScoreGraph slot_score_graph(const ModelParams& params, std::span<const int> prompt, const DiffusionState& cond,
                            std::span<const int> slots, std::span<const int> tokens);

// Directives for a single chain execution.
struct ChainControl {
  std::vector<int> schedule;                      // k_t, index 1..T; empty means even
  std::map<int, DiffusionPolicy> step_policy;     // per-step decode policy overrides
  const DenoisingTrajectory* replay = nullptr;    // steps > replay_above copy its commitments
  int replay_above = 0;
  std::set<std::pair<int, int>> blocked;          // (step, slot) may not commit at that step
  std::map<std::pair<int, int>, int> forced;      // (step, slot) -> token committed at that step
  int stop_after = 1;                             // last step executed
};

// Runs steps T..stop_after and returns states z_T .. z_{stop_after-1}.
// Step 1 always commits every remaining masked slot.
std::vector<DiffusionState> run_chain(const ModelParams& params, std::span<const int> prompt, int response_len,
                                      int num_steps, std::uint64_t seed, const DiffusionPolicy& policy,
                                      const ChainControl& control);

DenoisingTrajectory diffusion_generate(const ModelParams& params, std::span<const int> prompt, int response_len,
                                       int num_steps, std::uint64_t seed, DiffusionPolicy policy = {});

// log p(z_t | x, z_{>t}): the committed tokens of step t given z_t.
ScoreGraph state_log_prob_graph(const ModelParams& params, std::span<const int> prompt,
                                const DenoisingTrajectory& trajectory, int step);
double state_log_prob(const ModelParams& params, std::span<const int> prompt, const DenoisingTrajectory& trajectory,
                      int step);

// Realized-trajectory surrogate for log p(y | x): sum of state_log_prob over all steps.
double trajectory_score(const ModelParams& params, std::span<const int> prompt,
                        const DenoisingTrajectory& trajectory);

// Scores `reference`'s tokens along its own commitment schedule, conditioning
// step s on cond_states[T - s] (z_s of another chain) with the scored slots masked.
double teacher_forced_score(const ModelParams& params, std::span<const int> prompt,
                            const std::vector<DiffusionState>& cond_states, const DenoisingTrajectory& reference);
// Differentiable form with the prompt rows as the leaf.
ScoreGraph teacher_forced_graph(const ModelParams& params, std::span<const int> prompt,
                                const std::vector<DiffusionState>& cond_states, const DenoisingTrajectory& reference);

// ---- stage perturbations ----------------------------------------------------

enum class StageKind { ablate, noise_schedule, substitute_step };

const char* to_string(StageKind kind);
StageKind parse_stage_kind(const std::string& text);

struct StagePerturbation {
  int stage = 1;
  StageKind kind = StageKind::ablate;
  int commit_count = 0;           // noise_schedule: replacement k_t
  DiffusionPolicy alternative{};  // substitute_step: decode policy at that stage

  static StagePerturbation ablate(int stage) { return {stage, StageKind::ablate, 0, {}}; }
  static StagePerturbation noise_schedule(int stage, int commit_count) {
    return {stage, StageKind::noise_schedule, commit_count, {}};
  }
  static StagePerturbation substitute(int stage, DiffusionPolicy alternative) {
    return {stage, StageKind::substitute_step, 0, alternative};
  }
};

class InfeasiblePerturbation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Replaces k_stage with `new_count` and moves the difference onto the later
// stages (stage-1 .. 1): evenly, with the remainder on the latest stages.
std::vector<int> rebalance_schedule(const std::vector<int>& schedule, int stage, int new_count);

struct PerturbedChain {
  DenoisingTrajectory trajectory;
  double score = 0.0;  // original y teacher-forced under the perturbed chain
};

PerturbedChain run_perturbed_chain(const ModelParams& params, std::span<const int> prompt,
                                   const DenoisingTrajectory& trajectory, const StagePerturbation& perturbation);

}  // namespace scope
