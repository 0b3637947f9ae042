// SPDX-License-Identifier: Apache-2.0

#include "scope/diffusion.hpp"

#include <algorithm>
#include <cstdlib>

#include "scope/rng.hpp"

namespace scope {

std::string to_string(const DiffusionPolicy& policy) {
  switch (policy.rule) {
    case DiffusionPolicy::Rule::confidence: return "confidence";
    case DiffusionPolicy::Rule::random_position: return "random_position";
    case DiffusionPolicy::Rule::sample: {
      char buf[64];
      std::snprintf(buf, sizeof buf, "sample:%.17g", policy.temperature);
      return buf;
    }
  }
  return "?";
}

DiffusionPolicy parse_diffusion_policy(const std::string& text) {
  if (text == "confidence") return {};
  if (text == "random_position") return {DiffusionPolicy::Rule::random_position, 1.0};
  if (text.rfind("sample:", 0) == 0) {
    char* end = nullptr;
    const double t = std::strtod(text.c_str() + 7, &end);
    if (end && *end == '\0' && t > 0.0) return {DiffusionPolicy::Rule::sample, t};
  }
  throw std::invalid_argument("unknown diffusion decode policy '" + text + "'");
}

DenoisingTrajectory::DenoisingTrajectory(int num_steps, std::vector<DiffusionState> states, std::uint64_t seed,
                                         DiffusionPolicy policy)
    : num_steps_(num_steps), states_(std::move(states)), seed_(seed), policy_(policy) {
  if (num_steps_ < 1) throw TrajectoryError("trajectory needs at least one step");
  if (states_.size() != static_cast<std::size_t>(num_steps_) + 1) {
    throw TrajectoryError("trajectory with T=" + std::to_string(num_steps_) + " needs " +
                          std::to_string(num_steps_ + 1) + " states, got " + std::to_string(states_.size()));
  }
  const std::size_t len = states_.front().size();
  if (len == 0) throw TrajectoryError("empty response region");
  for (const auto& z : states_) {
    if (z.size() != len) throw TrajectoryError("states differ in length");
  }
  for (const Slot& s : states_.front()) {
    if (!s.masked() || s.committed_at != 0) throw TrajectoryError("z_T must be fully masked");
  }
  for (std::size_t k = 1; k < states_.size(); ++k) {
    const int step = num_steps_ - static_cast<int>(k) + 1;  // step producing states_[k]
    for (std::size_t i = 0; i < len; ++i) {
      const Slot& before = states_[k - 1][i];
      const Slot& after = states_[k][i];
      if (after.masked()) {
        if (!before.masked()) throw TrajectoryError("slot " + std::to_string(i) + " un-committed");
        if (after.committed_at != 0) throw TrajectoryError("masked slot carries a commitment step");
      } else if (before.masked()) {
        if (after.committed_at != step) {
          throw TrajectoryError("slot " + std::to_string(i) + " committed at step " + std::to_string(step) +
                                " but labelled " + std::to_string(after.committed_at));
        }
        if (after.token < 0) throw TrajectoryError("invalid committed token");
      } else if (!(before == after)) {
        throw TrajectoryError("slot " + std::to_string(i) + " changed after commitment");
      }
    }
  }
  for (const Slot& s : states_.back()) {
    if (s.masked()) throw TrajectoryError("z_0 must be fully committed");
    final_output_.push_back(s.token);
  }
}

DenoisingTrajectory DenoisingTrajectory::from_commitments(int response_len, int num_steps,
                                                          const std::vector<Commitment>& events, std::uint64_t seed,
                                                          DiffusionPolicy policy) {
  if (response_len < 1 || num_steps < 1) throw TrajectoryError("invalid trajectory dimensions");
  std::vector<DiffusionState> states;
  DiffusionState z(static_cast<std::size_t>(response_len));
  states.push_back(z);
  for (int step = num_steps; step >= 1; --step) {
    for (const auto& e : events) {
      if (e.step != step) continue;
      if (e.slot < 0 || e.slot >= response_len) throw TrajectoryError("commitment slot out of range");
      auto& s = z[static_cast<std::size_t>(e.slot)];
      if (!s.masked()) throw TrajectoryError("slot " + std::to_string(e.slot) + " committed twice");
      s = Slot{e.token, step};
    }
    states.push_back(z);
  }
  for (const auto& e : events) {
    if (e.step < 1 || e.step > num_steps) throw TrajectoryError("commitment step out of range");
  }
  return DenoisingTrajectory(num_steps, std::move(states), seed, policy);
}

const DiffusionState& DenoisingTrajectory::state(int t) const {
  if (t < 0 || t > num_steps_) throw std::out_of_range("state index " + std::to_string(t) + " outside [0, T]");
  return states_[static_cast<std::size_t>(num_steps_ - t)];
}

std::vector<int> DenoisingTrajectory::committed_at(int step) const {
  if (step < 1 || step > num_steps_) throw std::out_of_range("step " + std::to_string(step) + " outside [1, T]");
  std::vector<int> out;
  const auto& z0 = states_.back();
  for (std::size_t i = 0; i < z0.size(); ++i) {
    if (z0[i].committed_at == step) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<int> DenoisingTrajectory::schedule() const {
  std::vector<int> k(static_cast<std::size_t>(num_steps_) + 1, 0);
  for (const Slot& s : states_.back()) ++k[static_cast<std::size_t>(s.committed_at)];
  return k;
}

std::vector<Commitment> DenoisingTrajectory::commitments() const {
  std::vector<Commitment> out;
  for (int step = num_steps_; step >= 1; --step) {
    for (int slot : committed_at(step)) {
      out.push_back({slot, final_output_[static_cast<std::size_t>(slot)], step});
    }
  }
  return out;
}

bool DenoisingTrajectory::operator==(const DenoisingTrajectory& other) const {
  return num_steps_ == other.num_steps_ && states_ == other.states_ && seed_ == other.seed_ &&
         policy_ == other.policy_;
}

std::vector<int> even_schedule(int response_len, int num_steps) {
  if (num_steps < 1) throw std::invalid_argument("num_steps must be >= 1");
  if (num_steps > response_len) {
    throw std::invalid_argument("num_steps " + std::to_string(num_steps) + " exceeds response length " +
                                std::to_string(response_len));
  }
  std::vector<int> k(static_cast<std::size_t>(num_steps) + 1, 0);
  int remaining = response_len;
  for (int t = num_steps; t >= 1; --t) {
    k[static_cast<std::size_t>(t)] = (remaining + t - 1) / t;
    remaining -= k[static_cast<std::size_t>(t)];
  }
  return k;
}

namespace {

std::vector<int> state_tokens(const ModelParams& params, std::span<const int> prompt, const DiffusionState& state) {
  std::vector<int> tokens(prompt.begin(), prompt.end());
  for (const Slot& s : state) tokens.push_back(s.masked() ? params.vocab().mask() : s.token);
  return tokens;
}

void check_prompt(const ModelParams& params, std::span<const int> prompt) {
  require_kind(params, ModelKind::masked_diffusion, "diffusion scoring");
  if (prompt.empty()) throw std::invalid_argument("prompt must be non-empty");
  check_tokens(params, prompt, "prompt");
}

NodeId add_terms(Graph& g, NodeId lp, std::size_t offset, std::span<const int> slots, std::span<const int> tokens,
                 bool& any, NodeId total) {
  for (std::size_t j = 0; j < slots.size(); ++j) {
    const NodeId term = g.pick(lp, offset + static_cast<std::size_t>(slots[j]), static_cast<std::size_t>(tokens[j]));
    total = any ? g.add(total, term) : term;
    any = true;
  }
  return total;
}

}  // namespace

Tensor diffusion_slot_log_probs(const ModelParams& params, std::span<const int> prompt, const DiffusionState& state) {
  check_prompt(params, prompt);
  const auto tokens = state_tokens(params, prompt, state);
  check_tokens(params, tokens, "state");
  check_context(params, tokens.size());
  Graph g;
  const BoundParams w = bind_constants(g, params);
  const NodeId leaf = g.leaf("embeddings", {tokens.size(), static_cast<std::size_t>(params.hyper().width)});
  const NodeId lp = lm_log_probs(g, w, encode(g, params, w, leaf, false));
  LeafValues values;
  values.emplace(leaf, token_embedding_rows(params, tokens));
  const Evaluation ev(g, values);
  const Tensor& all = ev.value(lp);
  const std::size_t v = all.cols();
  Tensor out({state.size(), v});
  for (std::size_t i = 0; i < state.size(); ++i) {
    auto src = all.row(prompt.size() + i);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

ScoreGraph slot_score_graph(const ModelParams& params, std::span<const int> prompt, const DiffusionState& cond,
                            std::span<const int> slots, std::span<const int> tokens) {
  check_prompt(params, prompt);
  if (slots.size() != tokens.size()) throw std::invalid_argument("slots and tokens differ in length");
  DiffusionState masked = cond;
  for (int s : slots) {
    if (s < 0 || static_cast<std::size_t>(s) >= masked.size()) throw std::out_of_range("slot out of range");
    masked[static_cast<std::size_t>(s)] = Slot{};
  }
  check_tokens(params, tokens, "target");
  const auto seq = state_tokens(params, prompt, masked);
  check_tokens(params, seq, "state");
  check_context(params, seq.size());

  ScoreGraph sg;
  const BoundParams w = bind_constants(sg.graph, params);
  sg.row_tokens = seq;
  sg.actual = token_embedding_rows(params, seq);
  sg.embeddings = sg.graph.leaf("embeddings", sg.actual.shape(), true);
  if (slots.empty()) {
    sg.output = sg.graph.constant(Tensor::scalar(0.0));
    return sg;
  }
  const NodeId lp = lm_log_probs(sg.graph, w, encode(sg.graph, params, w, sg.embeddings, false));
  bool any = false;
  sg.output = add_terms(sg.graph, lp, prompt.size(), slots, tokens, any, 0);
  return sg;
}

namespace {

std::vector<int> tokens_at(const std::vector<int>& output, const std::vector<int>& slots) {
  std::vector<int> out;
  for (int s : slots) out.push_back(output[static_cast<std::size_t>(s)]);
  return out;
}

struct Candidate {
  int slot;
  int token;
  double confidence;
};

}  // namespace

std::vector<DiffusionState> run_chain(const ModelParams& params, std::span<const int> prompt, int response_len,
                                      int num_steps, std::uint64_t seed, const DiffusionPolicy& policy,
                                      const ChainControl& control) {
  check_prompt(params, prompt);
  check_context(params, prompt.size() + static_cast<std::size_t>(std::max(response_len, 0)));
  const std::vector<int> schedule = control.schedule.empty() ? even_schedule(response_len, num_steps) : control.schedule;
  if (schedule.size() != static_cast<std::size_t>(num_steps) + 1) throw std::invalid_argument("schedule length mismatch");
  if (control.stop_after < 1 || control.stop_after > num_steps) throw std::out_of_range("stop_after outside [1, T]");
  if (control.replay && (control.replay->num_steps() != num_steps || control.replay->response_len() != response_len)) {
    throw std::invalid_argument("replay trajectory has different dimensions");
  }
  record_chain_run(seed);

  const int mask_token = params.vocab().mask();
  const int excluded[] = {mask_token};
  std::vector<DiffusionState> states;
  DiffusionState z(static_cast<std::size_t>(response_len));
  states.push_back(z);

  for (int step = num_steps; step >= control.stop_after; --step) {
    if (control.replay && step > control.replay_above) {
      for (int slot : control.replay->committed_at(step)) {
        auto& s = z[static_cast<std::size_t>(slot)];
        if (s.masked()) s = Slot{control.replay->final_output()[static_cast<std::size_t>(slot)], step};
      }
      states.push_back(z);
      continue;
    }

    int quota = schedule[static_cast<std::size_t>(step)];
    for (const auto& [key, token] : control.forced) {
      if (key.first != step) continue;
      auto& s = z[static_cast<std::size_t>(key.second)];
      if (s.masked()) {
        s = Slot{token, step};
        --quota;
      }
    }

    std::vector<int> open;
    for (int i = 0; i < response_len; ++i) {
      if (!z[static_cast<std::size_t>(i)].masked()) continue;
      if (step > 1 && control.blocked.count({step, i})) continue;
      open.push_back(i);
    }
    if (step == 1) quota = static_cast<int>(open.size());
    quota = std::clamp(quota, 0, static_cast<int>(open.size()));
    if (quota == 0) {
      states.push_back(z);
      continue;
    }

    auto it = control.step_policy.find(step);
    const DiffusionPolicy& rule = it != control.step_policy.end() ? it->second : policy;
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(step)));
    const Tensor lp = diffusion_slot_log_probs(params, prompt, z);

    std::vector<Candidate> chosen;
    if (rule.rule == DiffusionPolicy::Rule::random_position) {
      rng.shuffle(open);
      open.resize(static_cast<std::size_t>(quota));
      std::sort(open.begin(), open.end());
      for (int slot : open) {
        auto row = lp.row(static_cast<std::size_t>(slot));
        const int tok = choose_token(row, DecodePolicy::greedy(), 0.0, excluded);
        chosen.push_back({slot, tok, row[static_cast<std::size_t>(tok)]});
      }
    } else {
      std::vector<Candidate> cands;
      for (int slot : open) {
        auto row = lp.row(static_cast<std::size_t>(slot));
        const DecodePolicy dp = rule.rule == DiffusionPolicy::Rule::sample ? DecodePolicy::sample(rule.temperature)
                                                                           : DecodePolicy::greedy();
        const int tok = choose_token(row, dp, rng.uniform(), excluded);
        cands.push_back({slot, tok, row[static_cast<std::size_t>(tok)]});
      }
      std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return a.slot < b.slot;
      });
      chosen.assign(cands.begin(), cands.begin() + quota);
    }
    for (const auto& c : chosen) z[static_cast<std::size_t>(c.slot)] = Slot{c.token, step};
    states.push_back(z);
  }
  return states;
}

DenoisingTrajectory diffusion_generate(const ModelParams& params, std::span<const int> prompt, int response_len,
                                       int num_steps, std::uint64_t seed, DiffusionPolicy policy) {
  if (num_steps < 1 || num_steps > response_len) {
    throw std::invalid_argument("need 1 <= T <= response_len, got T=" + std::to_string(num_steps) +
                                ", response_len=" + std::to_string(response_len));
  }
  ChainControl control;
  auto states = run_chain(params, prompt, response_len, num_steps, seed, policy, control);
  return DenoisingTrajectory(num_steps, std::move(states), seed, policy);
}

ScoreGraph state_log_prob_graph(const ModelParams& params, std::span<const int> prompt,
                                const DenoisingTrajectory& trajectory, int step) {
  if (step < 1 || step > trajectory.num_steps()) {
    throw std::out_of_range("state step " + std::to_string(step) + " outside [1, " +
                            std::to_string(trajectory.num_steps()) + "]");
  }
  const auto slots = trajectory.committed_at(step);
  return slot_score_graph(params, prompt, trajectory.state(step), slots, tokens_at(trajectory.final_output(), slots));
}

double state_log_prob(const ModelParams& params, std::span<const int> prompt, const DenoisingTrajectory& trajectory,
                      int step) {
  return state_log_prob_graph(params, prompt, trajectory, step).value();
}

double trajectory_score(const ModelParams& params, std::span<const int> prompt,
                        const DenoisingTrajectory& trajectory) {
  double total = 0.0;
  for (int t = trajectory.num_steps(); t >= 1; --t) total += state_log_prob(params, prompt, trajectory, t);
  return total;
}

double teacher_forced_score(const ModelParams& params, std::span<const int> prompt,
                            const std::vector<DiffusionState>& cond_states, const DenoisingTrajectory& reference) {
  const int T = reference.num_steps();
  if (cond_states.size() < static_cast<std::size_t>(T)) throw std::invalid_argument("too few conditioning states");
  double total = 0.0;
  for (int t = T; t >= 1; --t) {
    const auto slots = reference.committed_at(t);
    const auto& cond = cond_states[static_cast<std::size_t>(T - t)];
    if (cond.size() != static_cast<std::size_t>(reference.response_len())) {
      throw std::invalid_argument("conditioning state length mismatch");
    }
    total += slot_score_graph(params, prompt, cond, slots, tokens_at(reference.final_output(), slots)).value();
  }
  return total;
}

ScoreGraph teacher_forced_graph(const ModelParams& params, std::span<const int> prompt,
                                const std::vector<DiffusionState>& cond_states, const DenoisingTrajectory& reference) {
  check_prompt(params, prompt);
  const int T = reference.num_steps();
  if (cond_states.size() < static_cast<std::size_t>(T)) throw std::invalid_argument("too few conditioning states");
  check_context(params, prompt.size() + static_cast<std::size_t>(reference.response_len()));

  ScoreGraph sg;
  const BoundParams w = bind_constants(sg.graph, params);
  sg.row_tokens.assign(prompt.begin(), prompt.end());
  sg.actual = token_embedding_rows(params, prompt);
  sg.embeddings = sg.graph.leaf("prompt_embeddings", sg.actual.shape(), true);

  bool any = false;
  NodeId total = 0;
  for (int t = T; t >= 1; --t) {
    const auto slots = reference.committed_at(t);
    if (slots.empty()) continue;
    DiffusionState cond = cond_states[static_cast<std::size_t>(T - t)];
    for (int s : slots) cond[static_cast<std::size_t>(s)] = Slot{};
    std::vector<int> response;
    for (const Slot& s : cond) response.push_back(s.masked() ? params.vocab().mask() : s.token);
    check_tokens(params, response, "state");
    const NodeId rows = sg.graph.concat_rows({sg.embeddings, sg.graph.constant(token_embedding_rows(params, response))});
    const NodeId lp = lm_log_probs(sg.graph, w, encode(sg.graph, params, w, rows, false));
    bool step_any = false;
    const NodeId step_total =
        add_terms(sg.graph, lp, prompt.size(), slots, tokens_at(reference.final_output(), slots), step_any, 0);
    total = any ? sg.graph.add(total, step_total) : step_total;
    any = true;
  }
  sg.output = any ? total : sg.graph.constant(Tensor::scalar(0.0));
  return sg;
}

// ---------------------------------------------------------------------------

const char* to_string(StageKind kind) {
  switch (kind) {
    case StageKind::ablate: return "ablate";
    case StageKind::noise_schedule: return "noise_schedule";
    case StageKind::substitute_step: return "substitute_step";
  }
  return "?";
}

StageKind parse_stage_kind(const std::string& text) {
  if (text == "ablate") return StageKind::ablate;
  if (text == "noise_schedule") return StageKind::noise_schedule;
  if (text == "substitute_step") return StageKind::substitute_step;
  throw std::invalid_argument("unknown stage perturbation '" + text + "'");
}

std::vector<int> rebalance_schedule(const std::vector<int>& schedule, int stage, int new_count) {
  const int T = static_cast<int>(schedule.size()) - 1;
  if (stage < 1 || stage > T) throw std::out_of_range("stage " + std::to_string(stage) + " outside [1, T]");
  int open = 0;  // masked slots when `stage` begins
  for (int s = 1; s <= stage; ++s) open += schedule[static_cast<std::size_t>(s)];
  if (new_count < 0 || new_count > open) {
    throw InfeasiblePerturbation("stage " + std::to_string(stage) + " cannot commit " + std::to_string(new_count) +
                                 " of " + std::to_string(open) + " open slots");
  }
  std::vector<int> out = schedule;
  const int diff = out[static_cast<std::size_t>(stage)] - new_count;
  out[static_cast<std::size_t>(stage)] = new_count;
  if (diff == 0) return out;
  const int later = stage - 1;
  if (later == 0) {
    throw InfeasiblePerturbation("stage " + std::to_string(stage) + " has no later stage to absorb " +
                                 std::to_string(diff) + " commitment(s)");
  }
  if (diff > 0) {
    for (int s = 1; s <= later; ++s) out[static_cast<std::size_t>(s)] += diff / later;
    for (int s = 1; s <= diff % later; ++s) out[static_cast<std::size_t>(s)] += 1;
  } else {
    int remove = -diff;
    while (remove > 0) {
      for (int s = 1; s <= later && remove > 0; ++s) {
        if (out[static_cast<std::size_t>(s)] > 0) {
          --out[static_cast<std::size_t>(s)];
          --remove;
        }
      }
    }
  }
  return out;
}

PerturbedChain run_perturbed_chain(const ModelParams& params, std::span<const int> prompt,
                                   const DenoisingTrajectory& trajectory, const StagePerturbation& perturbation) {
  const int T = trajectory.num_steps();
  if (perturbation.stage < 1 || perturbation.stage > T) {
    throw std::out_of_range("stage " + std::to_string(perturbation.stage) + " outside [1, " + std::to_string(T) + "]");
  }
  ChainControl control;
  control.schedule = trajectory.schedule();
  control.replay = &trajectory;
  control.replay_above = perturbation.stage;
  switch (perturbation.kind) {
    case StageKind::ablate:
      control.schedule = rebalance_schedule(control.schedule, perturbation.stage, 0);
      break;
    case StageKind::noise_schedule:
      control.schedule = rebalance_schedule(control.schedule, perturbation.stage, perturbation.commit_count);
      break;
    case StageKind::substitute_step:
      control.step_policy[perturbation.stage] = perturbation.alternative;
      break;
  }
  auto states = run_chain(params, prompt, trajectory.response_len(), T, trajectory.seed(), trajectory.policy(), control);
  DenoisingTrajectory perturbed(T, std::move(states), trajectory.seed(), trajectory.policy());
  const double score = teacher_forced_score(params, prompt, perturbed.states(), trajectory);
  return {std::move(perturbed), score};
}

}  // namespace scope
