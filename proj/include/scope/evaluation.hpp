// SPDX-License-Identifier: Apache-2.0
//
// Contract-matched faithfulness evaluation: perturbation of eligible features,
// deletion and insertion curves, AOPC and random-ordering baselines.

#pragma once

#include <functional>
#include <optional>
#include <set>
#include <vector>

#include "scope/attribution.hpp"

namespace scope {

enum class PerturbMode { delete_to_baseline, insert_from_baseline };
enum class Rescoring { rescore_fixed_output, regenerate_chain };

const char* to_string(PerturbMode mode);
const char* to_string(Rescoring rescoring);
std::optional<PerturbMode> parse_perturb_mode(std::string_view text);
std::optional<Rescoring> parse_rescoring(std::string_view text);

struct PerturbationPolicy {
  PerturbMode mode = PerturbMode::delete_to_baseline;
  BaselineKind replacement = BaselineKind::pad_token;
  Rescoring rescoring = Rescoring::rescore_fixed_output;

  bool operator==(const PerturbationPolicy&) const = default;
};

// PAD or MASK by process. Diffusion prompt-to-output contracts regenerate the
// chain under the perturbed prompt; everything else re-scores the fixed output.
PerturbationPolicy default_policy(const AttributionContract& contract);

class EvaluationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// One measurement of the contract score with some eligible features replaced.
struct PerturbedContext {
  PromptedInstance instance;  // prompt and prefix tokens after replacement (unchanged for zero_embedding)
  std::set<FeatureRef> replaced;
  std::optional<DenoisingTrajectory> regenerated;  // prompt-to-output with regenerate_chain
  std::vector<DiffusionState> continued;           // state-level: chain z_T .. z_t after replaced commitments
  double score = 0.0;
};

using PerturbObserver = std::function<void(const PerturbedContext&)>;

// Replaces `features` with the policy's baseline and measures the contract
// score. Held-fixed features keep their actual values. Commitments replaced
// under a state-level contract re-run the chain from the highest replaced step
// down to step t+1 (MASK leaves the slot open at that step, PAD commits PAD).
// Stage features apply stage ablation and score the perturbed chain.
PerturbedContext perturb(const ModelParams& params, const PromptedInstance& instance,
                         const AttributionContract& contract, const std::vector<FeatureRef>& features,
                         const PerturbationPolicy& policy);

enum class CurveDirection { deletion, insertion };
enum class OrderingSource { map, random };

const char* to_string(CurveDirection d);
const char* to_string(OrderingSource s);

struct FaithfulnessCurve {
  CurveDirection direction = CurveDirection::deletion;
  OrderingSource source = OrderingSource::map;
  std::uint64_t ordering_seed = 0;  // random orderings only
  PerturbationPolicy policy;
  std::vector<FeatureRef> order;  // the K features, most important first
  std::vector<double> scores;     // k = 0..K

  int k() const { return static_cast<int>(order.size()); }
  bool operator==(const FaithfulnessCurve&) const = default;
};

// Eligible features by (|score| desc, ref asc); infeasible entries last.
std::vector<FeatureRef> ranked_features(const AttributionMap& map);

// Deletion: point k replaces the first k features of `order`.
// Insertion: point k starts from every eligible feature at the baseline and
// restores the first k.
FaithfulnessCurve ordered_curve(const ModelParams& params, const PromptedInstance& instance,
                                const AttributionContract& contract, const std::vector<FeatureRef>& order, int k,
                                CurveDirection direction, const PerturbationPolicy& policy,
                                const PerturbObserver& observe = {});

FaithfulnessCurve deletion_curve(const AttributionMap& map, const ModelParams& params, const PromptedInstance& instance,
                                 const AttributionContract& contract, int k, const PerturbationPolicy& policy,
                                 const PerturbObserver& observe = {});
FaithfulnessCurve insertion_curve(const AttributionMap& map, const ModelParams& params,
                                  const PromptedInstance& instance, const AttributionContract& contract, int k,
                                  const PerturbationPolicy& policy, const PerturbObserver& observe = {});

// Deletion: mean over k >= 1 of score(0) - score(k). Insertion: score(k) - score(0).
double aopc(const FaithfulnessCurve& curve);

struct EvaluationOptions {
  std::optional<int> k;  // default min(|eligible|, 10)
  std::optional<PerturbationPolicy> policy;  // default_policy(contract)
  int n_random = 10;
  std::uint64_t seed = 0;
  PerturbObserver observe;
};

struct FaithfulnessReport {
  ContractId contract_id;
  MethodConfig method;
  PerturbationPolicy policy;
  int k = 0;
  std::uint64_t seed = 0;
  AttributionMap map;
  // Token contracts only; stage contracts report the per-stage map alone.
  std::optional<FaithfulnessCurve> deletion;
  std::optional<FaithfulnessCurve> insertion;
  std::vector<FaithfulnessCurve> random_deletion;
  std::vector<FaithfulnessCurve> random_insertion;
  // Empty when K = 0.
  std::optional<double> deletion_aopc;
  std::optional<double> insertion_aopc;
  std::optional<double> random_deletion_aopc;  // mean over random orderings
  std::optional<double> random_insertion_aopc;

  bool operator==(const FaithfulnessReport&) const = default;
};

FaithfulnessReport faithfulness_report(const ModelParams& params, const PromptedInstance& instance,
                                       const AttributionContract& contract, const MethodConfig& method,
                                       const EvaluationOptions& options = {});

// Random ordering r of the eligible set under `seed`.
std::vector<FeatureRef> random_ordering(const AttributionContract& contract, std::uint64_t seed, int r);

// One-sided sign test: P(X >= wins) for X ~ Binomial(trials, 1/2).
double sign_test_p(int wins, int trials);

}  // namespace scope
