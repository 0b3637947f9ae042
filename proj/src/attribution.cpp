// SPDX-License-Identifier: Apache-2.0

#include "scope/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace scope {

namespace {

constexpr std::pair<BaselineKind, const char*> kBaselines[] = {
    {BaselineKind::pad_token, "pad_token"},
    {BaselineKind::mask_token, "mask_token"},
    {BaselineKind::zero_embedding, "zero_embedding"},
};

ModelKind model_kind_for(ProcessKind p) {
  switch (p) {
    case ProcessKind::classifier: return ModelKind::classifier;
    case ProcessKind::diffusion: return ModelKind::masked_diffusion;
    default: return ModelKind::autoregressive;
  }
}

void check_request(const ModelParams& params, const PromptedInstance& instance, const AttributionContract& contract) {
  const auto problems = validate(contract, instance);
  if (!problems.empty()) {
    throw AttributionError("contract invalid for instance: " + problems.front().name + " (" + problems.front().detail +
                           ")");
  }
  if (params.kind() != model_kind_for(contract.process)) {
    throw AttributionError(std::string("contract process ") + to_string(contract.process) + " does not match a " +
                           to_string(params.kind()) + " model");
  }
  instance.check(params.vocab());
}

AttributionMap empty_map(const ModelParams& params, const PromptedInstance& instance,
                         const AttributionContract& contract, const MethodConfig& method) {
  AttributionMap map;
  map.contract_id = canonical_id(contract);
  map.method = method;
  map.model_id = params.model_id();
  map.instance_digest = instance.digest();
  map.seed = instance.seed;
  return map;
}

// Leaf rows of every eligible feature, in eligible (ascending) order.
std::vector<std::size_t> eligible_rows(const ContractScore& cs, const AttributionContract& contract) {
  std::vector<std::size_t> rows;
  for (const auto& ref : contract.eligible) rows.push_back(cs.row_of(ref));
  return rows;
}

void finish(AttributionMap& map, const AttributionContract& contract, const std::vector<double>& scores) {
  std::size_t i = 0;
  for (const auto& ref : contract.eligible) {
    const double s = scores[i++];
    if (!std::isfinite(s)) throw NumericError("non-finite attribution for " + to_string(ref));
    map.entries.push_back({ref, s});
  }
}

}  // namespace

const char* to_string(BaselineKind kind) {
  for (const auto& [k, name] : kBaselines) {
    if (k == kind) return name;
  }
  return "?";
}

std::optional<BaselineKind> parse_baseline_kind(std::string_view text) {
  for (const auto& [k, name] : kBaselines) {
    if (text == name) return k;
  }
  if (text == "pad") return BaselineKind::pad_token;
  if (text == "mask") return BaselineKind::mask_token;
  if (text == "zero") return BaselineKind::zero_embedding;
  return std::nullopt;
}

BaselineKind default_baseline(ProcessKind process) {
  return process == ProcessKind::diffusion ? BaselineKind::mask_token : BaselineKind::pad_token;
}

std::string describe(const MethodConfig& c) {
  switch (c.kind) {
    case MethodKind::integrated_gradients:
      return "ig steps=" + std::to_string(c.ig_steps) + " baseline=" + to_string(c.baseline);
    case MethodKind::grad_times_input: return "gxi";
    case MethodKind::occlusion: return std::string("occlusion baseline=") + to_string(c.baseline);
    case MethodKind::stage:
      switch (c.stage_kind) {
        case StageKind::ablate: return "stage ablate";
        case StageKind::noise_schedule: return "stage noise_schedule delta=" + std::to_string(c.commit_delta);
        case StageKind::substitute_step: return "stage substitute_step policy=" + to_string(c.alternative);
      }
  }
  return "?";
}

std::optional<MethodConfig> parse_method(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  if (words.empty()) return std::nullopt;
  auto value = [&](std::size_t i, const std::string& key) -> std::optional<std::string> {
    if (i >= words.size() || words[i].rfind(key + "=", 0) != 0) return std::nullopt;
    return words[i].substr(key.size() + 1);
  };
  auto integer = [](const std::string& s, int& out) {
    if (s.empty() || s.size() > 9) return false;
    std::size_t pos = 0;
    try {
      out = std::stoi(s, &pos);
    } catch (...) {
      return false;
    }
    return pos == s.size();
  };
  MethodConfig c;
  const std::string& head = words[0];
  if (head == "ig") {
    c.kind = MethodKind::integrated_gradients;
    auto steps = value(1, "steps");
    auto base = value(2, "baseline");
    if (words.size() != 3 || !steps || !base || !integer(*steps, c.ig_steps) || c.ig_steps < 1) return std::nullopt;
    auto b = parse_baseline_kind(*base);
    if (!b || *base != to_string(*b)) return std::nullopt;
    c.baseline = *b;
  } else if (head == "gxi") {
    if (words.size() != 1) return std::nullopt;
    c.kind = MethodKind::grad_times_input;
  } else if (head == "occlusion") {
    auto base = value(1, "baseline");
    if (words.size() != 2 || !base) return std::nullopt;
    auto b = parse_baseline_kind(*base);
    if (!b || *base != to_string(*b)) return std::nullopt;
    c.kind = MethodKind::occlusion;
    c.baseline = *b;
  } else if (head == "stage") {
    c.kind = MethodKind::stage;
    if (words.size() < 2) return std::nullopt;
    try {
      c.stage_kind = parse_stage_kind(words[1]);
    } catch (const std::invalid_argument&) {
      return std::nullopt;
    }
    if (c.stage_kind == StageKind::ablate) {
      if (words.size() != 2) return std::nullopt;
    } else if (c.stage_kind == StageKind::noise_schedule) {
      auto d = value(2, "delta");
      if (words.size() != 3 || !d || !integer(*d, c.commit_delta)) return std::nullopt;
    } else {
      auto p = value(2, "policy");
      if (words.size() != 3 || !p) return std::nullopt;
      try {
        c.alternative = parse_diffusion_policy(*p);
      } catch (const std::invalid_argument&) {
        return std::nullopt;
      }
    }
  } else {
    return std::nullopt;
  }
  if (describe(c) != text) return std::nullopt;
  return c;
}

std::optional<double> AttributionMap::score_of(const FeatureRef& ref) const {
  for (const auto& e : entries) {
    if (e.ref == ref) return e.score;
  }
  throw std::out_of_range("feature " + to_string(ref) + " not in map");
}

std::size_t ContractScore::row_of(const FeatureRef& ref) const {
  for (std::size_t i = 0; i < row_refs.size(); ++i) {
    if (row_refs[i] == ref) return i;
  }
  throw AttributionError("feature " + to_string(ref) + " is not an input row of the score");
}

ContractScore contract_score_graph(const ModelParams& params, const PromptedInstance& instance,
                                   const AttributionContract& contract) {
  check_request(params, instance, contract);
  ContractScore cs;
  const auto& prompt = instance.prompt;
  auto prompt_rows = [&] {
    for (int i = 0; i < static_cast<int>(prompt.size()); ++i) cs.row_refs.push_back(FeatureRef::prompt(i));
  };
  const int t = contract.target.index;
  switch (contract.score) {
    case ScoreKind::class_log_prob:
      cs.score = classifier_log_prob_graph(params, prompt, t);
      prompt_rows();
      break;
    case ScoreKind::token_log_prob: {
      const auto& y = *instance.generation;
      const std::span<const int> prefix(y.data(), static_cast<std::size_t>(t - 1));
      cs.score = token_log_prob_graph(params, prompt, prefix, y[static_cast<std::size_t>(t - 1)]);
      prompt_rows();
      for (int j = 0; j < t - 1; ++j) cs.row_refs.push_back(FeatureRef::prefix(j));
      break;
    }
    case ScoreKind::span_log_prob: {
      const auto& y = *instance.generation;
      cs.score = span_log_prob_graph(params, prompt, std::span<const int>(y.data(), static_cast<std::size_t>(t)));
      prompt_rows();
      for (int j = 0; j < t - 1; ++j) cs.row_refs.push_back(FeatureRef::prefix(j));
      break;
    }
    case ScoreKind::state_log_prob: {
      const auto& tr = *instance.trajectory;
      cs.score = state_log_prob_graph(params, prompt, tr, t);
      prompt_rows();
      for (std::size_t i = 0; i < tr.state(t).size(); ++i) {
        const Slot& s = tr.state(t)[i];
        if (s.masked()) {
          cs.row_refs.push_back(std::nullopt);
        } else {
          cs.row_refs.push_back(FeatureRef::state(s.committed_at, static_cast<int>(i)));
        }
      }
      break;
    }
    case ScoreKind::output_log_prob: {
      const auto& tr = *instance.trajectory;
      cs.score = teacher_forced_graph(params, prompt, tr.states(), tr);
      prompt_rows();
      break;
    }
    case ScoreKind::stage_delta:
      throw AttributionError("stage_delta is not a single differentiable score; use stage attribution");
  }
  if (cs.row_refs.size() != cs.score.actual.rows()) throw std::logic_error("row map does not cover the score leaf");
  return cs;
}

double contract_score(const ModelParams& params, const PromptedInstance& instance,
                      const AttributionContract& contract) {
  return contract_score_graph(params, instance, contract).score.value();
}

std::vector<double> baseline_row(const ModelParams& params, BaselineKind kind) {
  const auto width = static_cast<std::size_t>(params.hyper().width);
  if (kind == BaselineKind::zero_embedding) return std::vector<double>(width, 0.0);
  const auto row = params.weight("tok_emb").row(static_cast<std::size_t>(baseline_token(params, kind)));
  return {row.begin(), row.end()};
}

int baseline_token(const ModelParams& params, BaselineKind kind) {
  switch (kind) {
    case BaselineKind::pad_token: return params.vocab().pad();
    case BaselineKind::mask_token: return params.vocab().mask();
    case BaselineKind::zero_embedding: break;
  }
  throw AttributionError("zero_embedding has no token; occlusion needs pad_token or mask_token");
}

std::vector<double> path_attributions(const ScoreGraph& score, const std::vector<std::size_t>& rows,
                                      std::span<const double> baseline, int steps) {
  if (steps < 1) throw AttributionError("integrated gradients needs at least one step");
  const Tensor& actual = score.actual;
  const std::size_t width = actual.cols();
  if (baseline.size() != width) throw ShapeError("baseline row width differs from the embedding width");
  if (rows.empty()) return {};
  Tensor mean_grad({rows.size(), width});
  Tensor point = actual;
  for (int k = 1; k <= steps; ++k) {
    const double alpha = (static_cast<double>(k) - 0.5) / static_cast<double>(steps);
    for (std::size_t r : rows) {
      for (std::size_t d = 0; d < width; ++d) point.at(r, d) = baseline[d] + alpha * (actual.at(r, d) - baseline[d]);
    }
    const Tensor g = score.value_and_grad(point).second;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t d = 0; d < width; ++d) mean_grad.at(i, d) += g.at(rows[i], d);
    }
  }
  std::vector<double> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double s = 0.0;
    for (std::size_t d = 0; d < width; ++d) {
      s += (actual.at(rows[i], d) - baseline[d]) * mean_grad.at(i, d) / static_cast<double>(steps);
    }
    out.push_back(s);
  }
  return out;
}

std::vector<double> gradient_input_products(const ScoreGraph& score, const std::vector<std::size_t>& rows) {
  const Tensor& actual = score.actual;
  const Tensor g = score.value_and_grad(actual).second;
  std::vector<double> out;
  for (std::size_t r : rows) {
    double s = 0.0;
    for (std::size_t d = 0; d < actual.cols(); ++d) s += actual.at(r, d) * g.at(r, d);
    out.push_back(s);
  }
  return out;
}

AttributionMap integrated_gradients(const ModelParams& params, const PromptedInstance& instance,
                                    const AttributionContract& contract, BaselineKind baseline, int steps) {
  if (steps < 1) throw AttributionError("integrated gradients needs at least one step");
  MethodConfig method;
  method.kind = MethodKind::integrated_gradients;
  method.ig_steps = steps;
  method.baseline = baseline;
  const ContractScore cs = contract_score_graph(params, instance, contract);
  AttributionMap map = empty_map(params, instance, contract, method);
  finish(map, contract, path_attributions(cs.score, eligible_rows(cs, contract), baseline_row(params, baseline), steps));
  return map;
}

AttributionMap grad_times_input(const ModelParams& params, const PromptedInstance& instance,
                                const AttributionContract& contract) {
  MethodConfig method;
  method.kind = MethodKind::grad_times_input;
  const ContractScore cs = contract_score_graph(params, instance, contract);
  AttributionMap map = empty_map(params, instance, contract, method);
  finish(map, contract, gradient_input_products(cs.score, eligible_rows(cs, contract)));
  return map;
}

AttributionMap occlusion(const ModelParams& params, const PromptedInstance& instance,
                         const AttributionContract& contract, BaselineKind baseline) {
  MethodConfig method;
  method.kind = MethodKind::occlusion;
  method.baseline = baseline;
  baseline_token(params, baseline);
  const auto base = baseline_row(params, baseline);
  const ContractScore cs = contract_score_graph(params, instance, contract);
  AttributionMap map = empty_map(params, instance, contract, method);
  const double full = cs.score.value();
  std::vector<double> scores;
  for (std::size_t r : eligible_rows(cs, contract)) {
    Tensor rows = cs.score.actual;
    std::copy(base.begin(), base.end(), rows.row(r).begin());
    scores.push_back(full - cs.score.value_at(rows));
  }
  finish(map, contract, scores);
  return map;
}

StagePerturbation stage_perturbation(const MethodConfig& config, const DenoisingTrajectory& trajectory, int stage) {
  switch (config.stage_kind) {
    case StageKind::ablate: return StagePerturbation::ablate(stage);
    case StageKind::noise_schedule:
      return StagePerturbation::noise_schedule(
          stage, trajectory.schedule()[static_cast<std::size_t>(stage)] + config.commit_delta);
    case StageKind::substitute_step: return StagePerturbation::substitute(stage, config.alternative);
  }
  throw std::logic_error("unknown stage kind");
}

AttributionMap stage_attribution(const ModelParams& params, const PromptedInstance& instance,
                                 const AttributionContract& contract, const MethodConfig& config) {
  if (!instance.trajectory) throw AttributionError("stage attribution needs a diffusion instance");
  if (contract.score != ScoreKind::stage_delta) throw AttributionError("stage attribution needs a stage_delta contract");
  check_request(params, instance, contract);
  MethodConfig method = config;
  method.kind = MethodKind::stage;
  AttributionMap map = empty_map(params, instance, contract, method);
  const auto& tr = *instance.trajectory;
  const double actual = trajectory_score(params, instance.prompt, tr);
  for (const auto& ref : contract.eligible) {
    std::optional<double> delta;
    try {
      const auto pc = run_perturbed_chain(params, instance.prompt, tr, stage_perturbation(method, tr, ref.index));
      delta = actual - pc.score;
      if (!std::isfinite(*delta)) throw NumericError("non-finite stage delta at " + to_string(ref));
    } catch (const InfeasiblePerturbation&) {
    }
    map.entries.push_back({ref, delta});
  }
  return map;
}

AttributionMap attribute(const ModelParams& params, const PromptedInstance& instance,
                         const AttributionContract& contract, const MethodConfig& config) {
  switch (config.kind) {
    case MethodKind::integrated_gradients:
      return integrated_gradients(params, instance, contract, config.baseline, config.ig_steps);
    case MethodKind::grad_times_input: return grad_times_input(params, instance, contract);
    case MethodKind::occlusion: return occlusion(params, instance, contract, config.baseline);
    case MethodKind::stage: return stage_attribution(params, instance, contract, config);
  }
  throw std::logic_error("unknown method");
}

double prefix_mass(const AttributionMap& map) {
  double prefix = 0.0, total = 0.0;
  for (const auto& e : map.entries) {
    if (!e.ref.is_token()) throw AttributionError("prefix mass is undefined for stage maps");
    const double a = std::abs(e.score.value_or(0.0));
    total += a;
    if (e.ref.kind == FeatureKind::prefix_token) prefix += a;
  }
  return total == 0.0 ? 0.0 : prefix / total;
}

}  // namespace scope
