// SPDX-License-Identifier: Apache-2.0

#include "scope/evaluation.hpp"

#include <algorithm>
#include <cmath>

#include "scope/rng.hpp"

namespace scope {

namespace {

bool token_baseline(BaselineKind kind) { return kind != BaselineKind::zero_embedding; }

void check_policy(const AttributionContract& contract, const PerturbationPolicy& policy) {
  if (policy.rescoring == Rescoring::regenerate_chain &&
      !(contract.process == ProcessKind::diffusion && contract.score == ScoreKind::output_log_prob)) {
    throw EvaluationError("policy/contract mismatch: regenerate_chain needs a diffusion prompt-to-output contract");
  }
}

void check_instance(const ModelParams& params, const PromptedInstance& instance, const AttributionContract& contract) {
  const auto problems = validate(contract, instance);
  if (!problems.empty()) throw EvaluationError("contract invalid for instance: " + problems.front().name);
  instance.check(params.vocab());
}

DenoisingTrajectory rerun_prompt(const ModelParams& params, std::span<const int> prompt,
                                 const DenoisingTrajectory& tr, std::vector<DiffusionState>& states) {
  ChainControl control;
  control.schedule = tr.schedule();
  states = run_chain(params, prompt, tr.response_len(), tr.num_steps(), tr.seed(), tr.policy(), control);
  return DenoisingTrajectory(tr.num_steps(), states, tr.seed(), tr.policy());
}

}  // namespace

const char* to_string(PerturbMode mode) {
  return mode == PerturbMode::delete_to_baseline ? "delete_to_baseline" : "insert_from_baseline";
}

const char* to_string(Rescoring rescoring) {
  return rescoring == Rescoring::rescore_fixed_output ? "rescore_fixed_output" : "regenerate_chain";
}

std::optional<PerturbMode> parse_perturb_mode(std::string_view text) {
  if (text == "delete_to_baseline") return PerturbMode::delete_to_baseline;
  if (text == "insert_from_baseline") return PerturbMode::insert_from_baseline;
  return std::nullopt;
}

std::optional<Rescoring> parse_rescoring(std::string_view text) {
  if (text == "rescore_fixed_output") return Rescoring::rescore_fixed_output;
  if (text == "regenerate_chain") return Rescoring::regenerate_chain;
  return std::nullopt;
}

const char* to_string(CurveDirection d) { return d == CurveDirection::deletion ? "deletion" : "insertion"; }
const char* to_string(OrderingSource s) { return s == OrderingSource::map ? "map" : "random"; }

PerturbationPolicy default_policy(const AttributionContract& contract) {
  PerturbationPolicy p;
  p.replacement = default_baseline(contract.process);
  if (contract.process == ProcessKind::diffusion && contract.score == ScoreKind::output_log_prob) {
    p.rescoring = Rescoring::regenerate_chain;
  }
  return p;
}

PerturbedContext perturb(const ModelParams& params, const PromptedInstance& instance,
                         const AttributionContract& contract, const std::vector<FeatureRef>& features,
                         const PerturbationPolicy& policy) {
  check_instance(params, instance, contract);
  check_policy(contract, policy);
  PerturbedContext ctx;
  ctx.instance = instance;
  for (const auto& f : features) {
    if (!contract.eligible.count(f)) throw EvaluationError("feature outside eligible set: " + to_string(f));
    ctx.replaced.insert(f);
  }

  if (contract.score == ScoreKind::stage_delta) {
    const auto& tr = *instance.trajectory;
    if (ctx.replaced.size() > 1) throw EvaluationError("stage features are perturbed one at a time");
    if (ctx.replaced.empty()) {
      ctx.score = trajectory_score(params, instance.prompt, tr);
    } else {
      auto pc = run_perturbed_chain(params, instance.prompt, tr, StagePerturbation::ablate(ctx.replaced.begin()->index));
      ctx.score = pc.score;
      ctx.regenerated = std::move(pc.trajectory);
    }
    return ctx;
  }

  int highest_commit = 0;
  if (token_baseline(policy.replacement)) {
    const int tok = baseline_token(params, policy.replacement);
    for (const auto& f : ctx.replaced) {
      if (f.kind == FeatureKind::prompt_token) ctx.instance.prompt[static_cast<std::size_t>(f.index)] = tok;
      if (f.kind == FeatureKind::prefix_token) (*ctx.instance.generation)[static_cast<std::size_t>(f.index)] = tok;
    }
  }
  for (const auto& f : ctx.replaced) {
    if (f.kind == FeatureKind::state_commitment) highest_commit = std::max(highest_commit, f.step);
  }
  const bool rerun = highest_commit > 0 || policy.rescoring == Rescoring::regenerate_chain;
  if (rerun && !token_baseline(policy.replacement)) {
    throw EvaluationError("policy/contract mismatch: re-running the chain needs a token baseline");
  }

  if (highest_commit > 0) {
    const auto& tr = *instance.trajectory;
    const int t = contract.target.index;
    ChainControl control;
    control.schedule = tr.schedule();
    control.replay = &tr;
    control.replay_above = highest_commit;
    control.stop_after = t + 1;
    for (const auto& f : ctx.replaced) {
      if (f.kind != FeatureKind::state_commitment) continue;
      if (policy.replacement == BaselineKind::mask_token) {
        control.blocked.insert({f.step, f.index});
      } else {
        control.forced[{f.step, f.index}] = params.vocab().pad();
      }
    }
    ctx.continued = run_chain(params, ctx.instance.prompt, tr.response_len(), tr.num_steps(), tr.seed(), tr.policy(),
                              control);
    const auto slots = tr.committed_at(t);
    std::vector<int> tokens;
    for (int s : slots) tokens.push_back(tr.final_output()[static_cast<std::size_t>(s)]);
    ctx.score = slot_score_graph(params, ctx.instance.prompt, ctx.continued.back(), slots, tokens).value();
    return ctx;
  }

  if (policy.rescoring == Rescoring::regenerate_chain) {
    std::vector<DiffusionState> states;
    ctx.regenerated = rerun_prompt(params, ctx.instance.prompt, *instance.trajectory, states);
    ctx.score = teacher_forced_score(params, ctx.instance.prompt, states, *instance.trajectory);
    return ctx;
  }

  // Everything else is a re-score of the contract's own graph with rows swapped.
  const ContractScore cs = contract_score_graph(params, instance, contract);
  const auto base = baseline_row(params, policy.replacement);
  Tensor rows = cs.score.actual;
  for (const auto& f : ctx.replaced) std::copy(base.begin(), base.end(), rows.row(cs.row_of(f)).begin());
  ctx.score = cs.score.value_at(rows);
  return ctx;
}

std::vector<FeatureRef> ranked_features(const AttributionMap& map) {
  std::vector<MapEntry> entries = map.entries;
  std::stable_sort(entries.begin(), entries.end(), [](const MapEntry& a, const MapEntry& b) {
    if (a.score.has_value() != b.score.has_value()) return a.score.has_value();
    if (!a.score) return a.ref < b.ref;
    const double x = std::abs(*a.score), y = std::abs(*b.score);
    if (x != y) return x > y;
    return a.ref < b.ref;
  });
  std::vector<FeatureRef> out;
  for (const auto& e : entries) out.push_back(e.ref);
  return out;
}

FaithfulnessCurve ordered_curve(const ModelParams& params, const PromptedInstance& instance,
                                const AttributionContract& contract, const std::vector<FeatureRef>& order, int k,
                                CurveDirection direction, const PerturbationPolicy& policy,
                                const PerturbObserver& observe) {
  if (contract.score == ScoreKind::stage_delta) throw EvaluationError("curves are not defined for stage contracts");
  if (k < 0 || static_cast<std::size_t>(k) > order.size()) {
    throw EvaluationError("K=" + std::to_string(k) + " outside [0, " + std::to_string(order.size()) + "]");
  }
  FaithfulnessCurve curve;
  curve.direction = direction;
  curve.policy = policy;
  curve.policy.mode =
      direction == CurveDirection::deletion ? PerturbMode::delete_to_baseline : PerturbMode::insert_from_baseline;
  curve.order.assign(order.begin(), order.begin() + k);
  for (int kk = 0; kk <= k; ++kk) {
    std::vector<FeatureRef> feats;
    if (direction == CurveDirection::deletion) {
      feats.assign(order.begin(), order.begin() + kk);
    } else {
      const std::set<FeatureRef> restored(order.begin(), order.begin() + kk);
      for (const auto& f : contract.eligible) {
        if (!restored.count(f)) feats.push_back(f);
      }
    }
    const auto ctx = perturb(params, instance, contract, feats, curve.policy);
    if (observe) observe(ctx);
    curve.scores.push_back(ctx.score);
  }
  return curve;
}

namespace {

FaithfulnessCurve map_curve(const AttributionMap& map, const ModelParams& params, const PromptedInstance& instance,
                            const AttributionContract& contract, int k, CurveDirection direction,
                            const PerturbationPolicy& policy, const PerturbObserver& observe) {
  if (map.contract_id != canonical_id(contract)) throw EvaluationError("map/contract mismatch");
  return ordered_curve(params, instance, contract, ranked_features(map), k, direction, policy, observe);
}

}  // namespace

FaithfulnessCurve deletion_curve(const AttributionMap& map, const ModelParams& params, const PromptedInstance& instance,
                                 const AttributionContract& contract, int k, const PerturbationPolicy& policy,
                                 const PerturbObserver& observe) {
  return map_curve(map, params, instance, contract, k, CurveDirection::deletion, policy, observe);
}

FaithfulnessCurve insertion_curve(const AttributionMap& map, const ModelParams& params,
                                  const PromptedInstance& instance, const AttributionContract& contract, int k,
                                  const PerturbationPolicy& policy, const PerturbObserver& observe) {
  return map_curve(map, params, instance, contract, k, CurveDirection::insertion, policy, observe);
}

double aopc(const FaithfulnessCurve& curve) {
  if (curve.scores.size() < 2) throw EvaluationError("AOPC needs at least two curve points");
  const double s0 = curve.scores.front();
  double total = 0.0;
  for (std::size_t k = 1; k < curve.scores.size(); ++k) {
    total += curve.direction == CurveDirection::deletion ? s0 - curve.scores[k] : curve.scores[k] - s0;
  }
  return total / static_cast<double>(curve.scores.size() - 1);
}

std::vector<FeatureRef> random_ordering(const AttributionContract& contract, std::uint64_t seed, int r) {
  std::vector<FeatureRef> order(contract.eligible.begin(), contract.eligible.end());
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
  rng.shuffle(order);
  return order;
}

FaithfulnessReport faithfulness_report(const ModelParams& params, const PromptedInstance& instance,
                                       const AttributionContract& contract, const MethodConfig& method,
                                       const EvaluationOptions& options) {
  if (options.n_random < 0) throw EvaluationError("negative number of random orderings");
  FaithfulnessReport report;
  report.contract_id = canonical_id(contract);
  report.method = method;
  report.policy = options.policy.value_or(default_policy(contract));
  report.seed = options.seed;
  check_policy(contract, report.policy);
  report.map = attribute(params, instance, contract, method);
  if (contract.score == ScoreKind::stage_delta) return report;

  const int eligible = static_cast<int>(contract.eligible.size());
  report.k = options.k.value_or(std::min(eligible, 10));
  if (report.k < 0 || report.k > eligible) {
    throw EvaluationError("K=" + std::to_string(report.k) + " exceeds the eligible set size " +
                          std::to_string(eligible));
  }
  report.deletion = deletion_curve(report.map, params, instance, contract, report.k, report.policy, options.observe);
  report.insertion = insertion_curve(report.map, params, instance, contract, report.k, report.policy, options.observe);
  double rd = 0.0, ri = 0.0;
  for (int r = 0; r < options.n_random; ++r) {
    const auto order = random_ordering(contract, options.seed, r);
    for (auto dir : {CurveDirection::deletion, CurveDirection::insertion}) {
      auto c = ordered_curve(params, instance, contract, order, report.k, dir, report.policy, options.observe);
      c.source = OrderingSource::random;
      c.ordering_seed = derive_seed(options.seed, static_cast<std::uint64_t>(r));
      (dir == CurveDirection::deletion ? report.random_deletion : report.random_insertion).push_back(std::move(c));
    }
    if (report.k > 0) {
      rd += aopc(report.random_deletion.back());
      ri += aopc(report.random_insertion.back());
    }
  }
  if (report.k > 0) {
    report.deletion_aopc = aopc(*report.deletion);
    report.insertion_aopc = aopc(*report.insertion);
    if (options.n_random > 0) {
      report.random_deletion_aopc = rd / options.n_random;
      report.random_insertion_aopc = ri / options.n_random;
    }
  }
  return report;
}

double sign_test_p(int wins, int trials) {
  if (trials < 0 || wins < 0 || wins > trials) throw std::invalid_argument("sign test needs 0 <= wins <= trials");
  double p = 0.0;
  const double n = trials;
  for (int i = wins; i <= trials; ++i) {
    p += std::exp(std::lgamma(n + 1) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1) - n * std::log(2.0));
  }
  return std::min(p, 1.0);
}

}  // namespace scope
