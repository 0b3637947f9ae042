// SPDX-License-Identifier: Apache-2.0
//
// Attribution contracts: score, held-fixed set, target, process and eligible
// features, bound to one concrete instance.
//
// Index conventions used throughout:
//   prompt:i      prompt token x_{i+1} (0-based position i)
//   prefix:j      generated token y_{j+1}; the prefix of target y_t is prefix:0 .. prefix:t-2
//   state:s.i     the commitment of response slot i made at denoising step s
//   stage:t       denoising stage t in 1..T
// Token and state targets are 1-based, as are stages.

#pragma once

#include <compare>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "scope/instance.hpp"

namespace scope {

class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class FeatureKind { prompt_token, prefix_token, state_commitment, stage };

struct FeatureRef {
  FeatureKind kind = FeatureKind::prompt_token;
  int step = 0;   // state_commitment only
  int index = 0;  // position, slot or stage

  static FeatureRef prompt(int i) { return {FeatureKind::prompt_token, 0, i}; }
  static FeatureRef prefix(int j) { return {FeatureKind::prefix_token, 0, j}; }
  static FeatureRef state(int step, int slot) { return {FeatureKind::state_commitment, step, slot}; }
  static FeatureRef stage_ref(int t) { return {FeatureKind::stage, 0, t}; }

  bool is_token() const { return kind != FeatureKind::stage; }
  auto operator<=>(const FeatureRef&) const = default;
};

std::string to_string(const FeatureRef& ref);
// Parses the to_string form; nullopt on any malformed input.
std::optional<FeatureRef> parse_feature_ref(std::string_view text);

enum class ScoreKind { class_log_prob, token_log_prob, span_log_prob, state_log_prob, stage_delta, output_log_prob };
enum class TargetKind { class_label, token, span, state, final_output };
enum class ProcessKind { classifier, autoregressive, diffusion };
enum class EligibleSelector { input_features, prompt_tokens, prompt_and_prefix, prompt_and_states, stage_indices, custom };

const char* to_string(ScoreKind kind);
const char* to_string(TargetKind kind);
const char* to_string(ProcessKind kind);
const char* to_string(EligibleSelector kind);
std::optional<ScoreKind> parse_score_kind(std::string_view text);
std::optional<TargetKind> parse_target_kind(std::string_view text);
std::optional<ProcessKind> parse_process_kind(std::string_view text);
std::optional<EligibleSelector> parse_eligible_selector(std::string_view text);

struct Target {
  TargetKind kind = TargetKind::token;
  int index = 0;  // class c, token t, span length T, state step t; 0 for final output

  bool operator==(const Target&) const = default;
};

struct AttributionContract {
  ScoreKind score = ScoreKind::token_log_prob;
  std::set<FeatureRef> held_fixed;
  Target target;
  ProcessKind process = ProcessKind::autoregressive;
  EligibleSelector selector = EligibleSelector::custom;
  std::set<FeatureRef> eligible;

  bool operator==(const AttributionContract&) const = default;
};

enum class Setting {
  classifier,
  local_next_token,
  prompt_conditioned,
  span_level,
  state_level,
  denoising_stage,
  prompt_to_output,
};

const char* to_string(Setting setting);
std::optional<Setting> parse_setting(std::string_view text);
const std::vector<Setting>& all_settings();
// Whether the setting's target takes an index t from the caller.
bool setting_takes_target(Setting setting);

// The contract of one named setting bound to `instance`. `t` is the target
// token (autoregressive) or state step (diffusion) and is ignored by the other
// settings. Throws ContractError on an incompatible instance or bad t.
AttributionContract make_named(Setting setting, const PromptedInstance& instance, int t = 0);

// Which named setting a contract is, if any.
std::optional<Setting> identify_setting(const AttributionContract& contract, const PromptedInstance& instance);

// The eligible set a selector denotes for a target on an instance.
std::set<FeatureRef> select_eligible(EligibleSelector selector, const Target& target, const PromptedInstance& instance);

// The features the contract's score reads as inputs (prompt rows plus, per
// score, prefix tokens or earlier commitments).
std::set<FeatureRef> score_inputs(const AttributionContract& contract, const PromptedInstance& instance);

struct Violation {
  std::string name;    // e.g. "eligible/fixed overlap"
  std::string detail;
};

// Empty when the contract is valid for the instance.
std::vector<Violation> validate(const AttributionContract& contract, const PromptedInstance& instance);
// Structural checks that need no instance.
std::vector<Violation> validate_structure(const AttributionContract& contract);

// Canonical, order-insensitive text form; parse_contract inverts it.
std::string serialize_contract(const AttributionContract& contract);
AttributionContract parse_contract(std::string_view text);  // throws ContractError

struct ContractId {
  std::string canonical;
  std::uint64_t hash = 0;

  std::string hex() const;
  bool operator==(const ContractId& other) const { return canonical == other.canonical; }
};

// Throws ContractError when the contract is structurally invalid.
ContractId canonical_id(const AttributionContract& contract);

}  // namespace scope
