// SPDX-License-Identifier: Apache-2.0
//
// Contract spec files: line-oriented "key: value" documents naming the five
// contract fields plus the instance they bind to.
//
//   setting: prompt-conditioned      optional; checked against the fields below
//   score: token_log_prob
//   fixed: prefix                    none | prefix | span | feature refs
//   output: token 2                  token t | span n | class c | state t | final_output
//   process: autoregressive
//   eligible: prompt                 input | prompt | prompt+prefix | prompt+states | stages | feature refs
//   model: model.bin
//   prompt: TR: s3 s1 SEP
//   generation: t3 t1 EOS            or  generate: greedy 8  |  generate: diffusion 6 3 confidence
//   seed: 7
//
// Diagnostic codes:
//   SC001 missing required field     SC007 missing target index
//   SC002 unknown field              SC008 contract invalid for the instance
//   SC003 malformed line             SC009 duplicate field
//   SC004 unknown score name         SC010 setting does not match the fields
//   SC005 bad value                  SC011 instance binding failed
//   SC006 eligible/fixed overlap

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "scope/contract.hpp"

namespace scope {

struct Diagnostic {
  std::string code;
  int line = 0;  // 1-based; 0 when the problem is the file as a whole
  std::string message;

  bool operator==(const Diagnostic&) const = default;
};

std::string to_string(const Diagnostic& d);

enum class FixedGroup { none, prefix, span, refs };
enum class EligibleGroup { input, prompt, prompt_prefix, prompt_states, stages, refs };

struct GenerationSource {
  enum class Kind { none, literal, greedy, diffusion };
  Kind kind = Kind::none;
  std::vector<std::string> tokens;  // literal
  int length = 0;                   // greedy max length, diffusion response length
  int steps = 0;                    // diffusion
  DiffusionPolicy policy;

  bool operator==(const GenerationSource&) const = default;
};

struct ContractSpec {
  ScoreKind score = ScoreKind::token_log_prob;
  FixedGroup fixed = FixedGroup::none;
  std::set<FeatureRef> fixed_refs;
  Target output;
  ProcessKind process = ProcessKind::autoregressive;
  EligibleGroup eligible = EligibleGroup::prompt;
  std::set<FeatureRef> eligible_refs;
  std::optional<Setting> setting;

  std::optional<std::string> model;
  std::optional<std::string> prompt;
  GenerationSource generation;
  std::uint64_t seed = 0;

  std::map<std::string, int> lines;  // field -> line number
};

struct ContractFileParse {
  std::optional<ContractSpec> spec;
  std::vector<Diagnostic> diagnostics;

  bool ok() const { return spec.has_value() && diagnostics.empty(); }
};

// Total: never throws, every problem is a diagnostic.
ContractFileParse parse_contract_file(std::string_view text);

class ContractFileError : public std::invalid_argument {
 public:
  explicit ContractFileError(std::vector<Diagnostic> diagnostics);
  const std::vector<Diagnostic>& diagnostics() const { return diagnostics_; }

 private:
  std::vector<Diagnostic> diagnostics_;
};

// Builds the instance the file describes, generating with `params` when the
// file asks for it. Throws ContractFileError (SC001, SC005, SC011).
PromptedInstance bind_instance(const ContractSpec& spec, const ModelParams& params);

// Expands the symbolic fields against the instance and validates the result.
// Throws ContractFileError (SC008, SC010, SC011).
AttributionContract resolve_contract(const ContractSpec& spec, const PromptedInstance& instance);

}  // namespace scope
