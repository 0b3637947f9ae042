// SPDX-License-Identifier: Apache-2.0
//
// Contract-dispatched attribution: integrated gradients with held-fixed path
// semantics, gradient x input, occlusion and denoising-stage perturbation.

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scope/contract.hpp"

namespace scope {

enum class BaselineKind { pad_token, mask_token, zero_embedding };

const char* to_string(BaselineKind kind);
std::optional<BaselineKind> parse_baseline_kind(std::string_view text);

// PAD for autoregressive and classifier contracts, MASK for diffusion.
BaselineKind default_baseline(ProcessKind process);

enum class MethodKind { integrated_gradients, grad_times_input, occlusion, stage };

struct MethodConfig {
  MethodKind kind = MethodKind::integrated_gradients;
  int ig_steps = 64;
  BaselineKind baseline = BaselineKind::pad_token;
  StageKind stage_kind = StageKind::ablate;
  int commit_delta = -1;  // noise_schedule: k_t becomes k_t + commit_delta
  DiffusionPolicy alternative{DiffusionPolicy::Rule::random_position, 1.0};  // substitute_step

  bool operator==(const MethodConfig&) const = default;
};

// e.g. "ig steps=64 baseline=pad_token", "stage noise_schedule delta=-1".
std::string describe(const MethodConfig& config);
std::optional<MethodConfig> parse_method(std::string_view text);

struct MapEntry {
  FeatureRef ref;
  std::optional<double> score;  // empty: the perturbation is infeasible for this feature

  bool operator==(const MapEntry&) const = default;
};

struct AttributionMap {
  std::vector<MapEntry> entries;  // ascending by ref, one per eligible feature
  ContractId contract_id;
  MethodConfig method;
  std::uint64_t model_id = 0;
  std::uint64_t instance_digest = 0;
  std::uint64_t seed = 0;

  std::optional<double> score_of(const FeatureRef& ref) const;
  bool operator==(const AttributionMap& other) const {
    return entries == other.entries && contract_id == other.contract_id && method == other.method &&
           model_id == other.model_id && instance_digest == other.instance_digest && seed == other.seed;
  }
};

class AttributionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// The contract's score as a graph over token-embedding rows, with the feature
// each row stands for (empty for rows that are not features, such as masked slots).
struct ContractScore {
  ScoreGraph score;
  std::vector<std::optional<FeatureRef>> row_refs;

  // Leaf row of an eligible or held-fixed token feature; throws if absent.
  std::size_t row_of(const FeatureRef& ref) const;
};

// Throws AttributionError for stage_delta contracts, invalid contracts and
// model/process mismatches.
ContractScore contract_score_graph(const ModelParams& params, const PromptedInstance& instance,
                                   const AttributionContract& contract);
double contract_score(const ModelParams& params, const PromptedInstance& instance,
                      const AttributionContract& contract);

// Embedding row used in place of a feature under `kind`.
std::vector<double> baseline_row(const ModelParams& params, BaselineKind kind);
// Token substituted by occlusion; throws AttributionError for zero_embedding.
int baseline_token(const ModelParams& params, BaselineKind kind);

// Midpoint-rule integrated gradients for the given leaf rows of a score graph:
// only those rows move along the straight path, every other row stays at its
// actual value. One summed score per row.
std::vector<double> path_attributions(const ScoreGraph& score, const std::vector<std::size_t>& rows,
                                      std::span<const double> baseline, int steps);
std::vector<double> gradient_input_products(const ScoreGraph& score, const std::vector<std::size_t>& rows);

AttributionMap integrated_gradients(const ModelParams& params, const PromptedInstance& instance,
                                    const AttributionContract& contract, BaselineKind baseline, int steps = 64);
AttributionMap grad_times_input(const ModelParams& params, const PromptedInstance& instance,
                                const AttributionContract& contract);
AttributionMap occlusion(const ModelParams& params, const PromptedInstance& instance,
                         const AttributionContract& contract, BaselineKind baseline);

// The perturbation `config` applies to stage t of the instance's trajectory.
StagePerturbation stage_perturbation(const MethodConfig& config, const DenoisingTrajectory& trajectory, int stage);
AttributionMap stage_attribution(const ModelParams& params, const PromptedInstance& instance,
                                 const AttributionContract& contract, const MethodConfig& config);

AttributionMap attribute(const ModelParams& params, const PromptedInstance& instance,
                         const AttributionContract& contract, const MethodConfig& config);

// Share of absolute attribution on generated-prefix features; 0 when the map
// has no mass. Throws AttributionError for stage maps.
double prefix_mass(const AttributionMap& map);

}  // namespace scope
