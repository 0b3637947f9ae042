// SPDX-License-Identifier: Apache-2.0

#include "scope/contract.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <sstream>

#include "scope/hash.hpp"

namespace scope {

namespace {

bool parse_int(std::string_view s, int& out) {
  if (s.empty() || s.size() > 9) return false;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc{} && p == end && out >= 0 && (s.size() == 1 || s[0] != '0');
}

template <typename Enum, std::size_t N>
std::optional<Enum> lookup(std::string_view text, const std::pair<Enum, const char*> (&table)[N]) {
  for (const auto& [value, name] : table) {
    if (text == name) return value;
  }
  return std::nullopt;
}

template <typename Enum, std::size_t N>
const char* name_of(Enum value, const std::pair<Enum, const char*> (&table)[N]) {
  for (const auto& [v, name] : table) {
    if (v == value) return name;
  }
  return "?";
}

constexpr std::pair<ScoreKind, const char*> kScores[] = {
    {ScoreKind::class_log_prob, "class_log_prob"}, {ScoreKind::token_log_prob, "token_log_prob"},
    {ScoreKind::span_log_prob, "span_log_prob"},   {ScoreKind::state_log_prob, "state_log_prob"},
    {ScoreKind::stage_delta, "stage_delta"},       {ScoreKind::output_log_prob, "output_log_prob"},
};
constexpr std::pair<TargetKind, const char*> kTargets[] = {
    {TargetKind::class_label, "class"}, {TargetKind::token, "token"}, {TargetKind::span, "span"},
    {TargetKind::state, "state"},       {TargetKind::final_output, "final_output"},
};
constexpr std::pair<ProcessKind, const char*> kProcesses[] = {
    {ProcessKind::classifier, "classifier"},
    {ProcessKind::autoregressive, "autoregressive"},
    {ProcessKind::diffusion, "diffusion"},
};
constexpr std::pair<EligibleSelector, const char*> kSelectors[] = {
    {EligibleSelector::input_features, "input_features"},
    {EligibleSelector::prompt_tokens, "prompt_tokens"},
    {EligibleSelector::prompt_and_prefix, "prompt_and_prefix"},
    {EligibleSelector::prompt_and_states, "prompt_and_states"},
    {EligibleSelector::stage_indices, "stage_indices"},
    {EligibleSelector::custom, "custom"},
};
constexpr std::pair<Setting, const char*> kSettings[] = {
    {Setting::classifier, "classifier"},
    {Setting::local_next_token, "local next-token"},
    {Setting::prompt_conditioned, "prompt-conditioned"},
    {Setting::span_level, "span-level prompt"},
    {Setting::state_level, "state-level"},
    {Setting::denoising_stage, "denoising-stage"},
    {Setting::prompt_to_output, "prompt-to-output"},
};

TargetKind target_for(ScoreKind s) {
  switch (s) {
    case ScoreKind::class_log_prob: return TargetKind::class_label;
    case ScoreKind::token_log_prob: return TargetKind::token;
    case ScoreKind::span_log_prob: return TargetKind::span;
    case ScoreKind::state_log_prob: return TargetKind::state;
    case ScoreKind::stage_delta:
    case ScoreKind::output_log_prob: return TargetKind::final_output;
  }
  return TargetKind::final_output;
}

ProcessKind process_for(ScoreKind s) {
  switch (s) {
    case ScoreKind::class_log_prob: return ProcessKind::classifier;
    case ScoreKind::token_log_prob:
    case ScoreKind::span_log_prob: return ProcessKind::autoregressive;
    default: return ProcessKind::diffusion;
  }
}

bool selector_fits(EligibleSelector e, ScoreKind s) {
  switch (e) {
    case EligibleSelector::input_features: return s == ScoreKind::class_log_prob;
    case EligibleSelector::prompt_tokens:
      return s != ScoreKind::class_log_prob && s != ScoreKind::stage_delta;
    case EligibleSelector::prompt_and_prefix: return s == ScoreKind::token_log_prob;
    case EligibleSelector::prompt_and_states: return s == ScoreKind::state_log_prob;
    case EligibleSelector::stage_indices: return s == ScoreKind::stage_delta;
    case EligibleSelector::custom: return true;
  }
  return false;
}

ProcessKind process_of(const PromptedInstance& in) {
  switch (in.kind()) {
    case ModelKind::classifier: return ProcessKind::classifier;
    case ModelKind::masked_diffusion: return ProcessKind::diffusion;
    default: return ProcessKind::autoregressive;
  }
}

void add_prompt(std::set<FeatureRef>& out, const PromptedInstance& in) {
  for (int i = 0; i < static_cast<int>(in.prompt.size()); ++i) out.insert(FeatureRef::prompt(i));
}

void add_prefix(std::set<FeatureRef>& out, int count) {
  for (int j = 0; j < count; ++j) out.insert(FeatureRef::prefix(j));
}

// Commitments made at steps above `step`.
void add_states_above(std::set<FeatureRef>& out, const PromptedInstance& in, int step) {
  if (!in.trajectory) return;
  for (const auto& c : in.trajectory->commitments()) {
    if (c.step > step) out.insert(FeatureRef::state(c.step, c.slot));
  }
}

bool ref_exists(const FeatureRef& r, const PromptedInstance& in) {
  switch (r.kind) {
    case FeatureKind::prompt_token: return r.step == 0 && r.index >= 0 && r.index < static_cast<int>(in.prompt.size());
    case FeatureKind::prefix_token:
      return r.step == 0 && in.generation && r.index >= 0 && r.index < static_cast<int>(in.generation->size());
    case FeatureKind::state_commitment: {
      if (!in.trajectory || r.step < 1 || r.step > in.trajectory->num_steps()) return false;
      const auto slots = in.trajectory->committed_at(r.step);
      return std::find(slots.begin(), slots.end(), r.index) != slots.end();
    }
    case FeatureKind::stage:
      return r.step == 0 && in.trajectory && r.index >= 1 && r.index <= in.trajectory->num_steps();
  }
  return false;
}

std::string join_refs(const std::set<FeatureRef>& refs) {
  std::string out;
  for (const auto& r : refs) {
    if (!out.empty()) out += ' ';
    out += to_string(r);
  }
  return out;
}

std::string target_text(const Target& t) {
  if (t.kind == TargetKind::final_output) return "final_output";
  return std::string(to_string(t.kind)) + " " + std::to_string(t.index);
}

}  // namespace

std::string to_string(const FeatureRef& ref) {
  switch (ref.kind) {
    case FeatureKind::prompt_token: return "prompt:" + std::to_string(ref.index);
    case FeatureKind::prefix_token: return "prefix:" + std::to_string(ref.index);
    case FeatureKind::state_commitment: return "state:" + std::to_string(ref.step) + "." + std::to_string(ref.index);
    case FeatureKind::stage: return "stage:" + std::to_string(ref.index);
  }
  return "?";
}

std::optional<FeatureRef> parse_feature_ref(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) return std::nullopt;
  const auto kind = text.substr(0, colon);
  const auto rest = text.substr(colon + 1);
  int a = 0, b = 0;
  if (kind == "state") {
    const auto dot = rest.find('.');
    if (dot == std::string_view::npos || !parse_int(rest.substr(0, dot), a) || !parse_int(rest.substr(dot + 1), b)) {
      return std::nullopt;
    }
    return FeatureRef::state(a, b);
  }
  if (!parse_int(rest, a)) return std::nullopt;
  if (kind == "prompt") return FeatureRef::prompt(a);
  if (kind == "prefix") return FeatureRef::prefix(a);
  if (kind == "stage") return FeatureRef::stage_ref(a);
  return std::nullopt;
}

const char* to_string(ScoreKind kind) { return name_of(kind, kScores); }
const char* to_string(TargetKind kind) { return name_of(kind, kTargets); }
const char* to_string(ProcessKind kind) { return name_of(kind, kProcesses); }
const char* to_string(EligibleSelector kind) { return name_of(kind, kSelectors); }
const char* to_string(Setting setting) { return name_of(setting, kSettings); }
std::optional<ScoreKind> parse_score_kind(std::string_view text) { return lookup(text, kScores); }
std::optional<TargetKind> parse_target_kind(std::string_view text) { return lookup(text, kTargets); }
std::optional<ProcessKind> parse_process_kind(std::string_view text) { return lookup(text, kProcesses); }
std::optional<EligibleSelector> parse_eligible_selector(std::string_view text) { return lookup(text, kSelectors); }

std::optional<Setting> parse_setting(std::string_view text) {
  if (auto s = lookup(text, kSettings)) return s;
  static const std::map<std::string_view, Setting> aliases = {
      {"local", Setting::local_next_token},          {"local-next-token", Setting::local_next_token},
      {"span-level", Setting::span_level},           {"span-level-prompt", Setting::span_level},
      {"state", Setting::state_level},               {"stage", Setting::denoising_stage},
      {"prompt-conditioned", Setting::prompt_conditioned},
  };
  auto it = aliases.find(text);
  if (it == aliases.end()) return std::nullopt;
  return it->second;
}

const std::vector<Setting>& all_settings() {
  static const std::vector<Setting> settings = {Setting::classifier,      Setting::local_next_token,
                                                Setting::prompt_conditioned, Setting::span_level,
                                                Setting::state_level,     Setting::denoising_stage,
                                                Setting::prompt_to_output};
  return settings;
}

bool setting_takes_target(Setting setting) {
  return setting == Setting::local_next_token || setting == Setting::prompt_conditioned ||
         setting == Setting::state_level;
}

std::set<FeatureRef> select_eligible(EligibleSelector selector, const Target& target,
                                     const PromptedInstance& instance) {
  std::set<FeatureRef> out;
  switch (selector) {
    case EligibleSelector::input_features:
    case EligibleSelector::prompt_tokens: add_prompt(out, instance); break;
    case EligibleSelector::prompt_and_prefix:
      add_prompt(out, instance);
      add_prefix(out, std::max(0, target.index - 1));
      break;
    case EligibleSelector::prompt_and_states:
      add_prompt(out, instance);
      add_states_above(out, instance, target.index);
      break;
    case EligibleSelector::stage_indices:
      if (instance.trajectory) {
        for (int t = 1; t <= instance.trajectory->num_steps(); ++t) out.insert(FeatureRef::stage_ref(t));
      }
      break;
    case EligibleSelector::custom: break;
  }
  return out;
}

std::set<FeatureRef> score_inputs(const AttributionContract& c, const PromptedInstance& instance) {
  std::set<FeatureRef> out;
  switch (c.score) {
    case ScoreKind::class_log_prob:
    case ScoreKind::output_log_prob: add_prompt(out, instance); break;
    case ScoreKind::token_log_prob:
    case ScoreKind::span_log_prob:
      add_prompt(out, instance);
      add_prefix(out, std::max(0, c.target.index - 1));
      break;
    case ScoreKind::state_log_prob:
      add_prompt(out, instance);
      add_states_above(out, instance, c.target.index);
      break;
    case ScoreKind::stage_delta:
      return select_eligible(EligibleSelector::stage_indices, c.target, instance);
  }
  return out;
}

AttributionContract make_named(Setting setting, const PromptedInstance& instance, int t) {
  auto need = [&](ModelKind kind) {
    if (instance.kind() != kind) {
      throw ContractError(std::string("setting '") + to_string(setting) + "' needs a " + scope::to_string(kind) +
                          " instance, got " + scope::to_string(instance.kind()));
    }
  };
  auto need_range = [&](int hi, const char* what) {
    if (t < 1 || t > hi) {
      throw ContractError(std::string(what) + " t=" + std::to_string(t) + " outside [1, " + std::to_string(hi) + "]");
    }
  };
  AttributionContract c;
  switch (setting) {
    case Setting::classifier:
      need(ModelKind::classifier);
      c.score = ScoreKind::class_log_prob;
      c.target = {TargetKind::class_label, *instance.class_target};
      c.process = ProcessKind::classifier;
      c.selector = EligibleSelector::input_features;
      break;
    case Setting::local_next_token:
    case Setting::prompt_conditioned:
      need(ModelKind::autoregressive);
      need_range(static_cast<int>(instance.generation->size()), "target token");
      c.score = ScoreKind::token_log_prob;
      c.target = {TargetKind::token, t};
      c.process = ProcessKind::autoregressive;
      if (setting == Setting::local_next_token) {
        c.selector = EligibleSelector::prompt_and_prefix;
      } else {
        c.selector = EligibleSelector::prompt_tokens;
        add_prefix(c.held_fixed, t - 1);
      }
      break;
    case Setting::span_level: {
      need(ModelKind::autoregressive);
      const int len = static_cast<int>(instance.generation->size());
      c.score = ScoreKind::span_log_prob;
      c.target = {TargetKind::span, len};
      c.process = ProcessKind::autoregressive;
      c.selector = EligibleSelector::prompt_tokens;
      add_prefix(c.held_fixed, len);
      break;
    }
    case Setting::state_level:
      need(ModelKind::masked_diffusion);
      need_range(instance.trajectory->num_steps(), "state step");
      c.score = ScoreKind::state_log_prob;
      c.target = {TargetKind::state, t};
      c.process = ProcessKind::diffusion;
      c.selector = EligibleSelector::prompt_and_states;
      break;
    case Setting::denoising_stage:
    case Setting::prompt_to_output:
      need(ModelKind::masked_diffusion);
      c.score = setting == Setting::denoising_stage ? ScoreKind::stage_delta : ScoreKind::output_log_prob;
      c.target = {TargetKind::final_output, 0};
      c.process = ProcessKind::diffusion;
      c.selector = setting == Setting::denoising_stage ? EligibleSelector::stage_indices
                                                       : EligibleSelector::prompt_tokens;
      break;
  }
  c.eligible = select_eligible(c.selector, c.target, instance);
  return c;
}

std::optional<Setting> identify_setting(const AttributionContract& contract, const PromptedInstance& instance) {
  for (Setting s : all_settings()) {
    try {
      if (make_named(s, instance, contract.target.index) == contract) return s;
    } catch (const ContractError&) {
    }
  }
  return std::nullopt;
}

std::vector<Violation> validate_structure(const AttributionContract& c) {
  std::vector<Violation> out;
  if (target_for(c.score) != c.target.kind) {
    out.push_back({"score/target mismatch", std::string(to_string(c.score)) + " cannot explain a " +
                                                to_string(c.target.kind) + " target"});
  }
  if (process_for(c.score) != c.process) {
    out.push_back({"process/score mismatch",
                   std::string(to_string(c.score)) + " is not a " + to_string(c.process) + " score"});
  }
  if (!selector_fits(c.selector, c.score)) {
    out.push_back({"process/eligible mismatch", std::string("selector ") + to_string(c.selector) +
                                                    " does not apply to " + to_string(c.score)});
  }
  std::set<FeatureRef> both;
  std::set_intersection(c.eligible.begin(), c.eligible.end(), c.held_fixed.begin(), c.held_fixed.end(),
                        std::inserter(both, both.begin()));
  if (!both.empty()) out.push_back({"eligible/fixed overlap", join_refs(both)});
  if (c.target.kind == TargetKind::final_output ? c.target.index != 0
                                                 : (c.target.index < (c.target.kind == TargetKind::class_label ? 0 : 1))) {
    out.push_back({"target out of range", target_text(c.target)});
  }
  const bool stage_score = c.score == ScoreKind::stage_delta;
  for (const auto& r : c.eligible) {
    if ((r.kind == FeatureKind::stage) != stage_score) {
      out.push_back({"process/eligible mismatch", to_string(r) + " cannot be eligible for " + to_string(c.score)});
      break;
    }
  }
  if (stage_score && !c.held_fixed.empty()) {
    out.push_back({"process/eligible mismatch", "stage contracts hold nothing fixed"});
  }
  return out;
}

std::vector<Violation> validate(const AttributionContract& c, const PromptedInstance& instance) {
  std::vector<Violation> out = validate_structure(c);
  if (process_of(instance) != c.process) {
    out.push_back({"instance kind mismatch", std::string("contract process ") + to_string(c.process) +
                                                 " but instance is " + scope::to_string(instance.kind())});
    return out;
  }
  switch (c.target.kind) {
    case TargetKind::class_label:
      if (!instance.class_target || *instance.class_target != c.target.index) {
        out.push_back({"target out of range", "class target differs from the instance class"});
      }
      break;
    case TargetKind::token:
    case TargetKind::span:
      if (!instance.generation || c.target.index < 1 || c.target.index > static_cast<int>(instance.generation->size())) {
        out.push_back({"target out of range", target_text(c.target) + " outside the generation"});
      }
      break;
    case TargetKind::state:
      if (!instance.trajectory || c.target.index < 1 || c.target.index > instance.trajectory->num_steps()) {
        out.push_back({"target out of range", target_text(c.target) + " outside the trajectory"});
      }
      break;
    case TargetKind::final_output: break;
  }
  for (const auto* set : {&c.eligible, &c.held_fixed}) {
    for (const auto& r : *set) {
      if (!ref_exists(r, instance)) out.push_back({"feature out of range", to_string(r)});
    }
  }
  const auto inputs = score_inputs(c, instance);
  for (const auto& r : c.eligible) {
    if (ref_exists(r, instance) && !inputs.count(r)) {
      out.push_back({"eligible feature not read by score", to_string(r)});
    }
  }
  if (c.selector != EligibleSelector::custom && c.eligible != select_eligible(c.selector, c.target, instance)) {
    out.push_back({"eligible selector mismatch",
                   std::string("eligible set differs from what ") + to_string(c.selector) + " selects"});
  }
  return out;
}

std::string serialize_contract(const AttributionContract& c) {
  std::string out;
  out += "score: " + std::string(to_string(c.score)) + "\n";
  out += "fixed: " + (c.held_fixed.empty() ? std::string("none") : join_refs(c.held_fixed)) + "\n";
  out += "target: " + target_text(c.target) + "\n";
  out += "process: " + std::string(to_string(c.process)) + "\n";
  out += "eligible: " + std::string(to_string(c.selector));
  if (!c.eligible.empty()) out += " " + join_refs(c.eligible);
  out += "\n";
  return out;
}

AttributionContract parse_contract(std::string_view text) {
  std::map<std::string, std::vector<std::string>> fields;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw ContractError("malformed contract line '" + line + "'");
    const std::string key = line.substr(0, colon);
    if (fields.count(key)) throw ContractError("duplicate contract field '" + key + "'");
    std::istringstream words(line.substr(colon + 1));
    std::vector<std::string> parts;
    for (std::string w; words >> w;) parts.push_back(w);
    fields[key] = parts;
  }
  auto get = [&](const char* key) -> const std::vector<std::string>& {
    auto it = fields.find(key);
    if (it == fields.end() || it->second.empty()) throw ContractError(std::string("missing contract field '") + key + "'");
    return it->second;
  };
  for (const auto& [key, _] : fields) {
    if (key != "score" && key != "fixed" && key != "target" && key != "process" && key != "eligible") {
      throw ContractError("unknown contract field '" + key + "'");
    }
  }
  AttributionContract c;
  auto refs = [](const std::vector<std::string>& words, std::size_t from, std::set<FeatureRef>& into) {
    for (std::size_t i = from; i < words.size(); ++i) {
      auto r = parse_feature_ref(words[i]);
      if (!r) throw ContractError("bad feature reference '" + words[i] + "'");
      if (!into.insert(*r).second) throw ContractError("repeated feature reference '" + words[i] + "'");
    }
  };
  const auto& score = get("score");
  auto s = parse_score_kind(score[0]);
  if (!s || score.size() != 1) throw ContractError("unknown score '" + score[0] + "'");
  c.score = *s;
  const auto& fixed = get("fixed");
  if (!(fixed.size() == 1 && fixed[0] == "none")) refs(fixed, 0, c.held_fixed);
  const auto& target = get("target");
  auto tk = parse_target_kind(target[0]);
  if (!tk) throw ContractError("unknown target '" + target[0] + "'");
  c.target.kind = *tk;
  if (*tk == TargetKind::final_output) {
    if (target.size() != 1) throw ContractError("final_output target takes no index");
  } else if (target.size() != 2 || !parse_int(target[1], c.target.index)) {
    throw ContractError("target needs one non-negative index");
  }
  const auto& process = get("process");
  auto p = parse_process_kind(process[0]);
  if (!p || process.size() != 1) throw ContractError("unknown process '" + process[0] + "'");
  c.process = *p;
  const auto& eligible = get("eligible");
  auto sel = parse_eligible_selector(eligible[0]);
  if (!sel) throw ContractError("unknown eligible selector '" + eligible[0] + "'");
  c.selector = *sel;
  refs(eligible, 1, c.eligible);
  return c;
}

std::string ContractId::hex() const { return hex64(hash); }

ContractId canonical_id(const AttributionContract& contract) {
  const auto problems = validate_structure(contract);
  if (!problems.empty()) {
    throw ContractError("invalid contract: " + problems.front().name + " (" + problems.front().detail + ")");
  }
  ContractId id;
  id.canonical = serialize_contract(contract);
  id.hash = fnv1a(id.canonical);
  return id;
}

}  // namespace scope
