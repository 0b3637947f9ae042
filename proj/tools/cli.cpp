// SPDX-License-Identifier: Apache-2.0

#include "scope/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "scope/artifacts.hpp"
#include "scope/contract_file.hpp"
#include "scope/corpus.hpp"
#include "scope/fileutil.hpp"
#include "scope/hash.hpp"
#include "scope/heatmap.hpp"
#include "scope/manifest.hpp"
#include "scope/model_io.hpp"
#include "scope/train.hpp"

namespace scope {

namespace fs = std::filesystem;

namespace {

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Options {
  // shared
  std::string out;
  std::string model;
  std::string contract;
  std::uint64_t seed = 0;
  // gen-corpus
  int lexicon = 8;
  int min_len = 1;
  int max_len = 4;
  int pairs = 3000;
  double heldout = 0.2;
  // train
  std::string corpus;
  std::string kind = "autoregressive";
  Hyperparams hp{ModelKind::autoregressive, 2, 2, 32, 16, 64, 2};
  TrainConfig train;
  // generate
  std::string prompt;
  int gen_max_len = 8;
  int gen_len = 0;
  int gen_steps = 0;
  std::string policy = "confidence";
  // attribute / evaluate / demo-fallacy
  std::string method = "ig";
  int ig_steps = 64;
  std::string baseline;
  std::string stage_kind = "ablate";
  std::optional<int> k;
  int random_orderings = 10;
  // render
  std::string map;
  // rerun
  std::string manifest;
};

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// The argument list a manifest records: input paths made absolute, the
// output directory dropped so a rerun can choose its own.
std::vector<std::string> recorded_args(const std::vector<std::string>& raw) {
  static const std::set<std::string> path_flags = {"--model", "--contract", "--corpus", "--map"};
  auto absolute = [](const std::string& p) { return fs::absolute(p).lexically_normal().string(); };
  std::vector<std::string> out;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const std::string& a = raw[i];
    const auto eq = a.find('=');
    const std::string flag = a.substr(0, eq);
    if (flag == "--out") {
      if (eq == std::string::npos) ++i;
      continue;
    }
    if (path_flags.count(flag)) {
      if (eq != std::string::npos) {
        out.push_back(flag);
        out.push_back(absolute(a.substr(eq + 1)));
      } else if (i + 1 < raw.size()) {
        out.push_back(flag);
        out.push_back(absolute(raw[++i]));
      }
      continue;
    }
    out.push_back(a);
  }
  return out;
}

class Run {
 public:
  Run(const std::vector<std::string>& raw, const std::string& out_dir) : dir_(out_dir) {
    manifest_.command = raw.at(0);
    manifest_.args = recorded_args(raw);
    manifest_.out_dir = out_dir;
    fs::create_directories(dir_);
  }

  RunManifest& manifest() { return manifest_; }

  void input(const std::string& path) {
    manifest_.inputs[fs::absolute(path).lexically_normal().string()] = file_digest(path);
  }
  void output(const std::string& name, const std::string& contents) {
    write_file_atomic(dir_ / name, contents);
    manifest_.outputs[name] = hex64(Fnv1a().text(contents).value());
  }
  void finish() {
    manifest_.created = utc_timestamp();
    write_file_atomic(dir_ / "manifest.json", manifest_to_json(manifest_));
  }

 private:
  fs::path dir_;
  RunManifest manifest_;
};

ModelKind model_kind_option(const std::string& kind) {
  if (kind == "autoregressive") return ModelKind::autoregressive;
  if (kind == "diffusion") return ModelKind::masked_diffusion;
  throw ValidationError("--kind must be autoregressive or diffusion");
}

MethodConfig method_config(const Options& o, ProcessKind process) {
  MethodConfig m;
  if (o.method == "ig") {
    m.kind = MethodKind::integrated_gradients;
  } else if (o.method == "gxi") {
    m.kind = MethodKind::grad_times_input;
  } else if (o.method == "occlusion") {
    m.kind = MethodKind::occlusion;
  } else {
    m.kind = MethodKind::stage;
  }
  m.ig_steps = o.ig_steps;
  m.baseline = default_baseline(process);
  if (o.baseline == "pad") m.baseline = BaselineKind::pad_token;
  if (o.baseline == "mask") m.baseline = BaselineKind::mask_token;
  if (o.baseline == "zero") m.baseline = BaselineKind::zero_embedding;
  m.stage_kind = parse_stage_kind(o.stage_kind);
  return m;
}

// A contract file bound to its model and instance.
struct Bound {
  ContractSpec spec;
  std::string model_path;
  ModelParams params;
  PromptedInstance instance;
  AttributionContract contract;
};

ContractSpec read_contract_spec(const std::string& path) {
  const auto parsed = parse_contract_file(read_file(path));
  if (!parsed.ok()) throw ContractFileError(parsed.diagnostics);
  return *parsed.spec;
}

Bound bind_contract(const Options& o, Run* run) {
  ContractSpec spec = read_contract_spec(o.contract);
  std::string model_path = o.model;
  if (model_path.empty()) {
    if (!spec.model) throw ValidationError("no model: pass --model or name one in the contract file");
    model_path = (fs::path(o.contract).parent_path() / *spec.model).string();
  }
  ModelParams params = load_model(model_path);
  if (run) {
    run->input(o.contract);
    run->input(model_path);
  }
  PromptedInstance instance = bind_instance(spec, params);
  AttributionContract contract = resolve_contract(spec, instance);
  return {std::move(spec), model_path, std::move(params), std::move(instance), std::move(contract)};
}

void check_finite(const AttributionMap& map) {
  for (const auto& e : map.entries) {
    if (e.score && !std::isfinite(*e.score)) throw NumericError("non-finite attribution for " + to_string(e.ref));
  }
}

void describe_bound(Run& run, const Bound& b, const MethodConfig& method) {
  auto& m = run.manifest();
  m.model_id = hex64(b.params.model_id());
  m.contract_id = hex64(canonical_id(b.contract).hash);
  m.method = describe(method);
  m.seeds = {b.spec.seed};
}

std::string feature_token(const FeatureRef& ref, const PromptedInstance& in, const Vocab& vocab) {
  switch (ref.kind) {
    case FeatureKind::prompt_token: return vocab.token(in.prompt.at(static_cast<std::size_t>(ref.index)));
    case FeatureKind::prefix_token: return vocab.token(in.generation->at(static_cast<std::size_t>(ref.index)));
    case FeatureKind::state_commitment: {
      const int tok = in.trajectory->final_output().at(static_cast<std::size_t>(ref.index));
      return vocab.token(tok);
    }
    case FeatureKind::stage: return "-";
  }
  return "?";
}

std::string top_features(const AttributionMap& map, const PromptedInstance& in, const Vocab& vocab, std::size_t n) {
  std::vector<const MapEntry*> scored;
  for (const auto& e : map.entries) {
    if (e.score) scored.push_back(&e);
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const MapEntry* a, const MapEntry* b) { return std::abs(*a->score) > std::abs(*b->score); });
  std::string out;
  for (std::size_t i = 0; i < std::min(n, scored.size()); ++i) {
    out += "  " + to_string(scored[i]->ref) + " " + feature_token(scored[i]->ref, in, vocab) + " " +
           fixed4(*scored[i]->score) + "\n";
  }
  return out;
}

// ---- commands -------------------------------------------------------------------

int cmd_gen_corpus(const Options& o, const std::vector<std::string>& raw, std::ostream& out) {
  const SynCorpus c = make_syn_corpus(o.lexicon, o.min_len, o.max_len, o.pairs, o.seed, o.heldout);
  Run run(raw, o.out);
  run.manifest().seeds = {o.seed};
  run.output("corpus.txt", serialize_corpus(c));
  run.finish();
  out << "corpus: " << c.train.size() << " training pairs, " << c.heldout.size() << " held-out sentences, vocab "
      << c.vocab.size() << "\n";
  return kExitOk;
}

int cmd_train(const Options& o, const std::vector<std::string>& raw, std::ostream& out) {
  const SynCorpus c = parse_corpus(read_file(o.corpus));
  Hyperparams hp = o.hp;
  hp.kind = model_kind_option(o.kind);
  hp.validate();
  Run run(raw, o.out);
  run.input(o.corpus);
  const TrainResult r = train(hp, c.vocab, c.train, o.train, o.seed);
  std::string log;
  for (const auto& cp : r.checkpoints) log += "step " + std::to_string(cp.step) + " loss " + format_double(cp.loss) + "\n";
  if (hp.kind == ModelKind::autoregressive && !c.heldout.empty()) {
    int exact = 0;
    for (const auto& ex : c.heldout) {
      exact += ar_generate(r.params, ex.prompt, static_cast<int>(ex.response.size()) + 2, DecodePolicy::greedy(), 0) ==
               ex.response;
    }
    log += "heldout_exact_match " + std::to_string(exact) + "/" + std::to_string(c.heldout.size()) + "\n";
  }
  run.manifest().model_id = hex64(r.params.model_id());
  run.manifest().seeds = {o.seed};
  run.output("model.bin", serialize_model(r.params));
  run.output("train_log.txt", log);
  run.finish();
  out << "model " << hex64(r.params.model_id()) << ", final loss " << fixed4(r.final_loss) << "\n";
  if (log.find("heldout_exact_match") != std::string::npos) out << log.substr(log.find("heldout_exact_match"));
  return kExitOk;
}

int cmd_generate(const Options& o, const std::vector<std::string>& raw, std::ostream& out) {
  const ModelParams params = load_model(o.model);
  const Vocab& v = params.vocab();
  const std::vector<int> prompt = v.encode(o.prompt);
  if (prompt.empty()) throw ValidationError("empty prompt");
  Run run(raw, o.out);
  run.input(o.model);
  run.manifest().model_id = hex64(params.model_id());
  run.manifest().seeds = {o.seed};
  std::string text;
  switch (params.kind()) {
    case ModelKind::autoregressive:
      text = v.decode(ar_generate(params, prompt, o.gen_max_len, DecodePolicy::greedy(), o.seed)) + "\n";
      break;
    case ModelKind::masked_diffusion: {
      if (o.gen_len < 1 || o.gen_steps < 1) throw ValidationError("diffusion generation needs --len and --steps");
      const auto tr = diffusion_generate(params, prompt, o.gen_len, o.gen_steps, o.seed, parse_diffusion_policy(o.policy));
      for (int t = tr.num_steps(); t >= 0; --t) {
        text += "z" + std::to_string(t) + ":";
        for (const Slot& s : tr.state(t)) text += " " + (s.masked() ? std::string("_") : v.token(s.token));
        text += "\n";
      }
      break;
    }
    case ModelKind::classifier: {
      const auto lp = classifier_log_probs(params, prompt);
      for (std::size_t c = 0; c < lp.size(); ++c) text += "class " + std::to_string(c) + " " + format_double(lp[c]) + "\n";
      break;
    }
  }
  run.output("generation.txt", text);
  run.finish();
  out << text;
  return kExitOk;
}

int cmd_attribute(const Options& o, const std::vector<std::string>& raw, std::ostream& out) {
  Run run(raw, o.out);
  const Bound b = bind_contract(o, &run);
  const MethodConfig method = method_config(o, b.contract.process);
  const AttributionMap map = attribute(b.params, b.instance, b.contract, method);
  check_finite(map);
  describe_bound(run, b, method);
  const Heatmap h = render_heatmap(map, b.instance, b.contract, b.params.vocab());
  run.output("map.txt", serialize_map(map));
  run.output("heatmap.html", h.html);
  run.output("heatmap.txt", h.text);
  run.finish();
  out << h.text;
  return kExitOk;
}

int cmd_evaluate(const Options& o, const std::vector<std::string>& raw, std::ostream& out) {
  Run run(raw, o.out);
  const Bound b = bind_contract(o, &run);
  const MethodConfig method = method_config(o, b.contract.process);
  EvaluationOptions opt;
  opt.k = o.k;
  opt.n_random = o.random_orderings;
  opt.seed = o.seed;
  if (!o.baseline.empty()) {
    PerturbationPolicy policy = default_policy(b.contract);
    policy.replacement = method.baseline;
    opt.policy = policy;
  }
  const FaithfulnessReport rep = faithfulness_report(b.params, b.instance, b.contract, method, opt);
  check_finite(rep.map);
  describe_bound(run, b, method);
  run.manifest().seeds = {b.spec.seed, o.seed};
  const Heatmap h = render_heatmap(rep.map, b.instance, b.contract, b.params.vocab());
  run.output("map.txt", serialize_map(rep.map));
  run.output("report.txt", serialize_report(rep));
  run.output("heatmap.html", h.html);
  run.output("heatmap.txt", h.text);
  run.finish();
  auto line = [&](const char* name, const std::optional<double>& v) {
    out << name << " " << (v ? fixed4(*v) : std::string("n/a")) << "\n";
  };
  out << "k " << rep.k << "\n";
  line("deletion_aopc", rep.deletion_aopc);
  line("random_deletion_aopc", rep.random_deletion_aopc);
  line("insertion_aopc", rep.insertion_aopc);
  line("random_insertion_aopc", rep.random_insertion_aopc);
  return kExitOk;
}

int cmd_render(const Options& o, const std::vector<std::string>& raw, std::ostream& out) {
  Run run(raw, o.out);
  const Bound b = bind_contract(o, &run);
  const AttributionMap map = parse_map(read_file(o.map));
  run.input(o.map);
  if (!(map.contract_id == canonical_id(b.contract))) {
    throw ValidationError("map was computed under a different contract (" + hex64(map.contract_id.hash) + " vs " +
                          hex64(canonical_id(b.contract).hash) + ")");
  }
  if (map.model_id != b.params.model_id()) throw ValidationError("map was computed with a different model");
  describe_bound(run, b, map.method);
  const Heatmap h = render_heatmap(map, b.instance, b.contract, b.params.vocab());
  run.output("heatmap.html", h.html);
  run.output("heatmap.txt", h.text);
  run.finish();
  out << h.text;
  return kExitOk;
}

int cmd_demo_fallacy(const Options& o, const std::vector<std::string>& raw, std::ostream& out) {
  Run run(raw, o.out);
  const Bound b = bind_contract(o, &run);
  if (b.contract.process != ProcessKind::autoregressive || b.contract.target.kind != TargetKind::token) {
    throw ValidationError("demo-fallacy needs an autoregressive contract with a token target");
  }
  if (o.method == "stage") throw ValidationError("demo-fallacy compares token maps; stage attribution does not apply");
  const int t = b.contract.target.index;
  const Vocab& v = b.params.vocab();
  const MethodConfig method = method_config(o, b.contract.process);
  describe_bound(run, b, method);

  std::ostringstream summary;
  summary << "prompt: " << v.decode(b.instance.prompt) << "\n"
          << "generation: " << v.decode(*b.instance.generation) << "\n"
          << "target: prefix:" << t - 1 << " " << v.token(b.instance.generation->at(static_cast<std::size_t>(t - 1)))
          << "\n"
          << "method: " << describe(method) << "\n\n";
  for (const Setting s : {Setting::local_next_token, Setting::prompt_conditioned}) {
    const AttributionContract c = make_named(s, b.instance, t);
    const AttributionMap map = attribute(b.params, b.instance, c, method);
    check_finite(map);
    const Heatmap h = render_heatmap(map, b.instance, c, v);
    const std::string name = s == Setting::local_next_token ? "local_next_token" : "prompt_conditioned";
    run.output(name + ".map.txt", serialize_map(map));
    run.output(name + ".heatmap.html", h.html);
    run.output(name + ".heatmap.txt", h.text);
    summary << to_string(s) << " (contract " << hex64(canonical_id(c).hash) << ")\n"
            << "  prefix_mass " << fixed4(prefix_mass(map)) << "\n"
            << "  strongest features:\n"
            << top_features(map, b.instance, v, 3);
  }
  run.output("fallacy.txt", summary.str());
  run.finish();
  out << summary.str();
  return kExitOk;
}

int cmd_rerun(const Options& o, std::ostream& out, std::ostream& err) {
  RunManifest m;
  try {
    m = manifest_from_json(read_file(o.manifest));
  } catch (const std::invalid_argument& e) {
    throw ValidationError(std::string("bad manifest: ") + e.what());
  }
  if (m.tool != "scope" || m.version != kToolVersion) {
    throw ValidationError("manifest was written by " + m.tool + " " + m.version + ", this is scope " + kToolVersion);
  }
  if (m.args.empty() || m.args[0] == "rerun") throw ValidationError("manifest records no rerunnable command");
  for (const auto& [path, digest] : m.inputs) {
    if (file_digest(path) != digest) throw ValidationError("input changed since the recorded run: " + path);
  }
  std::vector<std::string> args = m.args;
  args.push_back("--out");
  args.push_back(o.out);
  std::ostringstream inner;
  const int code = run_cli(args, inner, err);
  if (code != kExitOk) return code;
  int differ = 0;
  for (const auto& [name, digest] : m.outputs) {
    const bool same = file_digest(fs::path(o.out) / name) == digest;
    differ += !same;
    out << (same ? "identical " : "DIFFERS   ") << name << "\n";
  }
  if (differ > 0) {
    err << "error: " << differ << " output file(s) differ from the recorded run\n";
    return kExitValidation;
  }
  out << "reproduced " << m.outputs.size() << " file(s)\n";
  return kExitOk;
}

void add_contract_options(CLI::App* cmd, Options& o) {
  cmd->add_option("--contract", o.contract, "contract spec file")->required();
  cmd->add_option("--model", o.model, "model file (default: the contract file's model field)");
  cmd->add_option("--out", o.out, "output directory")->required();
}

void add_method_options(CLI::App* cmd, Options& o, bool allow_stage) {
  std::vector<std::string> methods = {"ig", "gxi", "occlusion"};
  if (allow_stage) methods.push_back("stage");
  cmd->add_option("--method", o.method, "attribution method")->check(CLI::IsMember(methods))->capture_default_str();
  cmd->add_option("--ig-steps", o.ig_steps, "integrated gradients steps")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--baseline", o.baseline, "baseline (default: pad, mask for diffusion)")
      ->check(CLI::IsMember({"pad", "mask", "zero"}));
  if (allow_stage) {
    cmd->add_option("--stage-kind", o.stage_kind, "stage perturbation")
        ->check(CLI::IsMember({"ablate", "noise_schedule", "substitute_step"}))
        ->capture_default_str();
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Contract-scoped attribution for small sequence models", "scope"};
  app.require_subcommand(1, 1);

  auto* gen = app.add_subcommand("gen-corpus", "write a synthetic translation corpus");
  gen->add_option("--lexicon", o.lexicon, "lexicon size K")->capture_default_str();
  gen->add_option("--min-len", o.min_len, "shortest sentence")->capture_default_str();
  gen->add_option("--max-len", o.max_len, "longest sentence")->capture_default_str();
  gen->add_option("--pairs", o.pairs, "sentences drawn")->capture_default_str();
  gen->add_option("--heldout", o.heldout, "held-out share of sentence types")->capture_default_str();
  gen->add_option("--seed", o.seed, "random seed")->capture_default_str();
  gen->add_option("--out", o.out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train a model on a corpus");
  tr->add_option("--corpus", o.corpus, "corpus file")->required();
  tr->add_option("--kind", o.kind, "model kind")->check(CLI::IsMember({"autoregressive", "diffusion"}))->capture_default_str();
  tr->add_option("--layers", o.hp.layers)->capture_default_str();
  tr->add_option("--heads", o.hp.heads)->capture_default_str();
  tr->add_option("--width", o.hp.width)->capture_default_str();
  tr->add_option("--ff-width", o.hp.ff_width)->capture_default_str();
  tr->add_option("--context", o.hp.context)->capture_default_str();
  tr->add_option("--steps", o.train.steps)->capture_default_str();
  tr->add_option("--batch", o.train.batch_size)->capture_default_str();
  tr->add_option("--lr", o.train.learning_rate, "peak learning rate")->capture_default_str();
  tr->add_option("--clip", o.train.clip_norm, "gradient norm clip")->capture_default_str();
  tr->add_option("--init-std", o.train.init_std)->capture_default_str();
  tr->add_option("--seed", o.seed, "random seed")->capture_default_str();
  tr->add_option("--out", o.out, "output directory")->required();
  o.train.steps = 2000;
  o.train.init_std = 0.1;
  o.train.eval_every = 100;

  auto* gn = app.add_subcommand("generate", "decode from a model");
  gn->add_option("--model", o.model, "model file")->required();
  gn->add_option("--prompt", o.prompt, "prompt text, whitespace separated tokens")->required();
  gn->add_option("--max-len", o.gen_max_len, "autoregressive length limit")->capture_default_str();
  gn->add_option("--len", o.gen_len, "diffusion response length");
  gn->add_option("--steps", o.gen_steps, "diffusion steps T");
  gn->add_option("--policy", o.policy, "diffusion decode policy")->capture_default_str();
  gn->add_option("--seed", o.seed, "random seed")->capture_default_str();
  gn->add_option("--out", o.out, "output directory")->required();

  auto* at = app.add_subcommand("attribute", "attribution map for a contract file");
  add_contract_options(at, o);
  add_method_options(at, o, true);

  auto* ev = app.add_subcommand("evaluate", "attribution map plus faithfulness report");
  add_contract_options(ev, o);
  add_method_options(ev, o, true);
  ev->add_option("--k", o.k, "features perturbed (default min(|E|, 10))");
  ev->add_option("--random-orderings", o.random_orderings, "random orderings compared")->capture_default_str();
  ev->add_option("--seed", o.seed, "seed of the random orderings")->capture_default_str();

  auto* rd = app.add_subcommand("render", "heatmap for an existing map");
  rd->add_option("--map", o.map, "map file")->required();
  add_contract_options(rd, o);

  auto* df = app.add_subcommand("demo-fallacy", "prefix mass under local vs prompt-conditioned contracts");
  add_contract_options(df, o);
  add_method_options(df, o, false);

  auto* rr = app.add_subcommand("rerun", "repeat a run from its manifest and compare the outputs");
  rr->add_option("--manifest", o.manifest, "manifest.json of the earlier run")->required();
  rr->add_option("--out", o.out, "output directory for the repeat")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*gen) return cmd_gen_corpus(o, args, out);
    if (*tr) return cmd_train(o, args, out);
    if (*gn) return cmd_generate(o, args, out);
    if (*at) return cmd_attribute(o, args, out);
    if (*ev) return cmd_evaluate(o, args, out);
    if (*rd) return cmd_render(o, args, out);
    if (*df) return cmd_demo_fallacy(o, args, out);
    if (*rr) return cmd_rerun(o, out, err);
  } catch (const ContractFileError& e) {
    for (const auto& d : e.diagnostics()) err << o.contract << ": " << to_string(d) << "\n";
    return kExitValidation;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ModelFormatError& e) {
    err << "i/o error: unreadable model: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}

}  // namespace scope
