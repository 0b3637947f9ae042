// SPDX-License-Identifier: Apache-2.0

#include "scope/contract_file.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include "scope/diffusion.hpp"
#include "scope/scores.hpp"

namespace scope {

namespace {

const char* const kRequired[] = {"score", "fixed", "output", "process", "eligible"};
const char* const kOptional[] = {"setting", "model", "prompt", "generation", "generate", "seed"};

bool known_field(const std::string& key) {
  for (const char* k : kRequired) {
    if (key == k) return true;
  }
  for (const char* k : kOptional) {
    if (key == k) return true;
  }
  return false;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::optional<int> small_int(std::string_view s) {
  if (s.empty() || s.size() > 9 || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return std::nullopt;
  }
  int v = 0;
  std::from_chars(s.data(), s.data() + s.size(), v);
  return v;
}

std::optional<std::uint64_t> parse_u64(std::string_view s) {
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) return std::nullopt;
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

struct Field {
  std::string value;
  int line = 0;
};

class Parser {
 public:
  explicit Parser(std::string_view text) : text_(text) {}

  ContractFileParse run() {
    split();
    ContractFileParse out;
    ContractSpec spec;
    for (const char* key : kRequired) {
      if (!fields_.count(key)) diag("SC001", 0, std::string("missing required field: ") + key);
    }
    for (const auto& [key, f] : fields_) spec.lines[key] = f.line;
    bool have_target = false;
    if (auto f = get("score")) {
      if (auto s = parse_score_kind(f->value)) {
        spec.score = *s;
      } else {
        diag("SC004", f->line, "unknown score name '" + f->value + "'");
      }
    }
    if (auto f = get("process")) {
      if (auto p = parse_process_kind(f->value)) {
        spec.process = *p;
      } else {
        diag("SC005", f->line, "unknown process '" + f->value + "'");
      }
    }
    if (auto f = get("output")) have_target = parse_output(*f, spec);
    if (auto f = get("fixed")) parse_fixed(*f, spec);
    if (auto f = get("eligible")) parse_eligible(*f, spec);
    if (auto f = get("setting")) {
      if (auto s = parse_setting(f->value)) {
        spec.setting = *s;
      } else {
        diag("SC005", f->line, "unknown setting '" + f->value + "'");
      }
    }
    if (auto f = get("model")) spec.model = f->value;
    if (auto f = get("prompt")) spec.prompt = f->value;
    if (auto f = get("seed")) {
      if (auto v = parse_u64(f->value)) {
        spec.seed = *v;
      } else {
        diag("SC005", f->line, "seed must be a non-negative integer, got '" + f->value + "'");
      }
    }
    parse_generation(spec);
    if (have_target && fields_.count("fixed") && fields_.count("eligible")) check_overlap(spec);
    out.diagnostics = std::move(diags_);
    if (out.diagnostics.empty()) out.spec = std::move(spec);
    return out;
  }

 private:
  void diag(const char* code, int line, std::string message) { diags_.push_back({code, line, std::move(message)}); }

  const Field* get(const char* key) const {
    auto it = fields_.find(key);
    return it == fields_.end() ? nullptr : &it->second;
  }

  void split() {
    int line_no = 0;
    std::size_t pos = 0;
    while (pos <= text_.size()) {
      const auto nl = text_.find('\n', pos);
      const std::string_view raw = text_.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
      pos = nl == std::string_view::npos ? text_.size() + 1 : nl + 1;
      ++line_no;
      const std::string line = trim(raw);
      if (line.empty() || line[0] == '#') continue;
      if (std::any_of(line.begin(), line.end(), [](char c) { return static_cast<unsigned char>(c) < 0x20 && c != '\t'; })) {
        diag("SC003", line_no, "control character in line");
        continue;
      }
      const auto colon = line.find(':');
      if (colon == std::string::npos || colon == 0) {
        diag("SC003", line_no, "expected 'key: value'");
        continue;
      }
      const std::string key = trim(std::string_view(line).substr(0, colon));
      const std::string value = trim(std::string_view(line).substr(colon + 1));
      if (!known_field(key)) {
        diag("SC002", line_no, "unknown field '" + key + "'");
        continue;
      }
      if (fields_.count(key)) {
        diag("SC009", line_no, "duplicate field '" + key + "' (first on line " + std::to_string(fields_[key].line) + ")");
        continue;
      }
      if (value.empty()) {
        diag("SC005", line_no, "field '" + key + "' has no value");
        continue;
      }
      fields_[key] = {value, line_no};
    }
  }

  bool parse_output(const Field& f, ContractSpec& spec) {
    const auto w = words(f.value);
    if (w[0] == "final_output") {
      if (w.size() != 1) {
        diag("SC005", f.line, "final_output takes no index");
        return false;
      }
      spec.output = {TargetKind::final_output, 0};
      return true;
    }
    const auto kind = parse_target_kind(w[0]);
    if (!kind) {
      diag("SC005", f.line, "unknown output kind '" + w[0] + "'");
      return false;
    }
    if (w.size() < 2) {
      diag("SC007", f.line, "missing target index for output '" + w[0] + "'");
      return false;
    }
    const auto idx = small_int(w[1]);
    if (!idx || w.size() != 2) {
      diag("SC005", f.line, "bad target index '" + w[1] + "'");
      return false;
    }
    spec.output = {*kind, *idx};
    return true;
  }

  bool parse_refs(const Field& f, const std::vector<std::string>& w, std::set<FeatureRef>& into) {
    for (const auto& s : w) {
      auto r = parse_feature_ref(s);
      if (!r) {
        diag("SC005", f.line, "bad feature reference '" + s + "'");
        return false;
      }
      if (!into.insert(*r).second) {
        diag("SC005", f.line, "feature '" + s + "' listed twice");
        return false;
      }
    }
    return true;
  }

  void parse_fixed(const Field& f, ContractSpec& spec) {
    const auto w = words(f.value);
    if (w.size() == 1 && w[0] == "none") {
      spec.fixed = FixedGroup::none;
    } else if (w.size() == 1 && w[0] == "prefix") {
      spec.fixed = FixedGroup::prefix;
    } else if (w.size() == 1 && w[0] == "span") {
      spec.fixed = FixedGroup::span;
    } else {
      spec.fixed = FixedGroup::refs;
      parse_refs(f, w, spec.fixed_refs);
    }
  }

  void parse_eligible(const Field& f, ContractSpec& spec) {
    const auto w = words(f.value);
    static const std::pair<const char*, EligibleGroup> groups[] = {
        {"input", EligibleGroup::input},           {"prompt", EligibleGroup::prompt},
        {"prompt+prefix", EligibleGroup::prompt_prefix}, {"prompt+states", EligibleGroup::prompt_states},
        {"stages", EligibleGroup::stages},
    };
    if (w.size() == 1) {
      for (const auto& [name, g] : groups) {
        if (w[0] == name) {
          spec.eligible = g;
          return;
        }
      }
    }
    spec.eligible = EligibleGroup::refs;
    parse_refs(f, w, spec.eligible_refs);
  }

  void parse_generation(ContractSpec& spec) {
    const Field* lit = get("generation");
    const Field* gen = get("generate");
    if (lit && gen) {
      diag("SC005", gen->line, "give either 'generation' or 'generate', not both");
      return;
    }
    if (lit) {
      spec.generation.kind = GenerationSource::Kind::literal;
      spec.generation.tokens = words(lit->value);
      return;
    }
    if (!gen) return;
    const auto w = words(gen->value);
    if (w[0] == "greedy" && w.size() == 2 && small_int(w[1])) {
      spec.generation.kind = GenerationSource::Kind::greedy;
      spec.generation.length = *small_int(w[1]);
      return;
    }
    if (w[0] == "diffusion" && (w.size() == 3 || w.size() == 4) && small_int(w[1]) && small_int(w[2])) {
      spec.generation.kind = GenerationSource::Kind::diffusion;
      spec.generation.length = *small_int(w[1]);
      spec.generation.steps = *small_int(w[2]);
      if (w.size() == 4) {
        try {
          spec.generation.policy = parse_diffusion_policy(w[3]);
        } catch (const std::exception&) {
          diag("SC005", gen->line, "unknown decode policy '" + w[3] + "'");
        }
      }
      return;
    }
    diag("SC005", gen->line, "expected 'greedy N' or 'diffusion LEN STEPS [policy]'");
  }

  // Prefix features read by the score, when the target says.
  static int prefix_count(const Target& t) {
    if (t.kind == TargetKind::token) return std::max(0, t.index - 1);
    if (t.kind == TargetKind::span) return t.index;
    return 0;
  }

  void check_overlap(const ContractSpec& spec) {
    auto eligible_has = [&](const FeatureRef& r) {
      switch (spec.eligible) {
        case EligibleGroup::input:
        case EligibleGroup::prompt: return r.kind == FeatureKind::prompt_token;
        case EligibleGroup::prompt_prefix:
          return r.kind == FeatureKind::prompt_token ||
                 (r.kind == FeatureKind::prefix_token && r.index < std::max(0, spec.output.index - 1));
        case EligibleGroup::prompt_states:
          return r.kind == FeatureKind::prompt_token ||
                 (r.kind == FeatureKind::state_commitment && r.step > spec.output.index);
        case EligibleGroup::stages: return r.kind == FeatureKind::stage;
        case EligibleGroup::refs: return spec.eligible_refs.count(r) > 0;
      }
      return false;
    };
    std::vector<FeatureRef> fixed(spec.fixed_refs.begin(), spec.fixed_refs.end());
    if (spec.fixed == FixedGroup::prefix || spec.fixed == FixedGroup::span) {
      const int n = prefix_count(spec.output);
      // Symbolic groups overlap whenever both name the prefix.
      if (spec.eligible == EligibleGroup::prompt_prefix) {
        diag("SC006", spec.lines.at("eligible"), "eligible/fixed overlap: both include the generated prefix");
        return;
      }
      for (int j = 0; j < n; ++j) fixed.push_back(FeatureRef::prefix(j));
    }
    for (const auto& r : fixed) {
      if (eligible_has(r)) {
        diag("SC006", spec.lines.at("eligible"), "eligible/fixed overlap: " + to_string(r));
        return;
      }
    }
  }

  std::string_view text_;
  std::map<std::string, Field> fields_;
  std::vector<Diagnostic> diags_;
};

std::string join(const std::vector<Diagnostic>& ds) {
  std::string out;
  for (const auto& d : ds) out += (out.empty() ? "" : "; ") + to_string(d);
  return out;
}

int line_of(const ContractSpec& spec, const char* key) {
  auto it = spec.lines.find(key);
  return it == spec.lines.end() ? 0 : it->second;
}

[[noreturn]] void fail(const char* code, int line, std::string message) {
  throw ContractFileError({{code, line, std::move(message)}});
}

}  // namespace

std::string to_string(const Diagnostic& d) {
  return (d.line > 0 ? "line " + std::to_string(d.line) + ": " : std::string()) + d.code + " " + d.message;
}

ContractFileError::ContractFileError(std::vector<Diagnostic> diagnostics)
    : std::invalid_argument(join(diagnostics)), diagnostics_(std::move(diagnostics)) {}

ContractFileParse parse_contract_file(std::string_view text) {
  try {
    return Parser(text).run();
  } catch (const std::exception& e) {
    ContractFileParse out;
    out.diagnostics.push_back({"SC003", 0, std::string("unreadable contract file: ") + e.what()});
    return out;
  }
}

PromptedInstance bind_instance(const ContractSpec& spec, const ModelParams& params) {
  if (!spec.prompt) fail("SC001", 0, "missing required field: prompt");
  const int prompt_line = line_of(spec, "prompt");
  std::vector<int> prompt;
  try {
    prompt = params.vocab().encode(*spec.prompt);
  } catch (const std::exception& e) {
    fail("SC011", prompt_line, std::string("prompt: ") + e.what());
  }
  const ModelKind want = spec.process == ProcessKind::classifier ? ModelKind::classifier
                         : spec.process == ProcessKind::diffusion ? ModelKind::masked_diffusion
                                                                  : ModelKind::autoregressive;
  if (params.kind() != want) {
    fail("SC011", line_of(spec, "process"),
         std::string("process ") + to_string(spec.process) + " needs a " + to_string(want) + " model, got " +
             to_string(params.kind()));
  }
  const auto& g = spec.generation;
  const int gen_line = std::max(line_of(spec, "generation"), line_of(spec, "generate"));
  try {
    switch (spec.process) {
      case ProcessKind::classifier:
        if (g.kind != GenerationSource::Kind::none) fail("SC005", gen_line, "a classifier instance has no generation");
        if (spec.output.kind != TargetKind::class_label) fail("SC005", line_of(spec, "output"), "classifier output must be 'class c'");
        return PromptedInstance::classified(prompt, spec.output.index);
      case ProcessKind::autoregressive: {
        std::vector<int> y;
        if (g.kind == GenerationSource::Kind::literal) {
          for (const auto& tok : g.tokens) {
            const auto id = params.vocab().find(tok);
            if (!id) fail("SC011", gen_line, "unknown token '" + tok + "' in generation");
            y.push_back(*id);
          }
        } else if (g.kind == GenerationSource::Kind::greedy) {
          y = ar_generate(params, prompt, g.length, DecodePolicy::greedy(), spec.seed);
        } else {
          fail(g.kind == GenerationSource::Kind::none ? "SC001" : "SC005", gen_line,
               g.kind == GenerationSource::Kind::none ? "missing required field: generation"
                                                      : "autoregressive instances need 'generation' or 'generate: greedy N'");
        }
        auto in = PromptedInstance::autoregressive(prompt, y, spec.seed);
        in.check(params.vocab());
        return in;
      }
      case ProcessKind::diffusion: {
        if (g.kind != GenerationSource::Kind::diffusion) {
          fail(g.kind == GenerationSource::Kind::none ? "SC001" : "SC005", gen_line,
               g.kind == GenerationSource::Kind::none ? "missing required field: generate"
                                                      : "diffusion instances need 'generate: diffusion LEN STEPS'");
        }
        return PromptedInstance::diffusion(prompt,
                                           diffusion_generate(params, prompt, g.length, g.steps, spec.seed, g.policy));
      }
    }
  } catch (const ContractFileError&) {
    throw;
  } catch (const std::exception& e) {
    fail("SC011", gen_line, e.what());
  }
  fail("SC011", 0, "unknown process");
}

AttributionContract resolve_contract(const ContractSpec& spec, const PromptedInstance& instance) {
  AttributionContract c;
  c.score = spec.score;
  c.target = spec.output;
  c.process = spec.process;
  const int t = spec.output.index;
  auto prompt_refs = [&] {
    for (int i = 0; i < static_cast<int>(instance.prompt.size()); ++i) c.eligible.insert(FeatureRef::prompt(i));
  };
  switch (spec.fixed) {
    case FixedGroup::none: break;
    case FixedGroup::prefix:
    case FixedGroup::span: {
      if (spec.fixed == FixedGroup::span && spec.output.kind != TargetKind::span) {
        fail("SC005", line_of(spec, "fixed"), "'fixed: span' needs a span output");
      }
      const int n = spec.output.kind == TargetKind::span ? t : spec.output.kind == TargetKind::token ? t - 1 : -1;
      if (n < 0) fail("SC005", line_of(spec, "fixed"), "'fixed: prefix' needs a token or span output");
      for (int j = 0; j < n; ++j) c.held_fixed.insert(FeatureRef::prefix(j));
      break;
    }
    case FixedGroup::refs: c.held_fixed = spec.fixed_refs; break;
  }
  switch (spec.eligible) {
    case EligibleGroup::input:
      c.selector = EligibleSelector::input_features;
      prompt_refs();
      break;
    case EligibleGroup::prompt:
      c.selector = EligibleSelector::prompt_tokens;
      prompt_refs();
      break;
    case EligibleGroup::prompt_prefix:
      c.selector = EligibleSelector::prompt_and_prefix;
      prompt_refs();
      for (int j = 0; j < t - 1; ++j) c.eligible.insert(FeatureRef::prefix(j));
      break;
    case EligibleGroup::prompt_states:
      c.selector = EligibleSelector::prompt_and_states;
      prompt_refs();
      if (!instance.trajectory) fail("SC011", line_of(spec, "eligible"), "prompt+states needs a diffusion instance");
      for (int s = t + 1; s <= instance.trajectory->num_steps(); ++s) {
        for (int slot : instance.trajectory->committed_at(s)) c.eligible.insert(FeatureRef::state(s, slot));
      }
      break;
    case EligibleGroup::stages:
      c.selector = EligibleSelector::stage_indices;
      if (!instance.trajectory) fail("SC011", line_of(spec, "eligible"), "stages need a diffusion instance");
      for (int s = 1; s <= instance.trajectory->num_steps(); ++s) c.eligible.insert(FeatureRef::stage_ref(s));
      break;
    case EligibleGroup::refs:
      c.selector = EligibleSelector::custom;
      c.eligible = spec.eligible_refs;
      break;
  }
  std::vector<Diagnostic> problems;
  for (const auto& v : validate(c, instance)) {
    problems.push_back({"SC008", line_of(spec, "eligible"), v.name + ": " + v.detail});
  }
  if (!problems.empty()) throw ContractFileError(problems);
  if (spec.setting) {
    std::optional<AttributionContract> named;
    try {
      named = make_named(*spec.setting, instance, setting_takes_target(*spec.setting) ? t : 0);
    } catch (const std::exception& e) {
      fail("SC010", line_of(spec, "setting"), std::string("setting does not apply: ") + e.what());
    }
    if (!(*named == c)) {
      fail("SC010", line_of(spec, "setting"),
           std::string("fields do not spell the '") + to_string(*spec.setting) + "' contract");
    }
  }
  return c;
}

}  // namespace scope
