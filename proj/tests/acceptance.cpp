// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion A1..A9. Exit status is 0
// only when every criterion passes within its time limit.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>

#include <unistd.h>

#include "chain_oracle.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "instances.hpp"
#include "reference_model.hpp"
#include "scope/artifacts.hpp"
#include "scope/cli.hpp"
#include "scope/contract_file.hpp"
#include "scope/corpus.hpp"
#include "scope/fileutil.hpp"
#include "scope/manifest.hpp"

namespace scope {
namespace {

namespace fs = std::filesystem;
using testing::random_ids;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string ratio(int a, int b) { return std::to_string(a) + "/" + std::to_string(b); }

double sum_scores(const AttributionMap& m) {
  double s = 0.0;
  for (const auto& e : m.entries) s += e.score.value();
  return s;
}

// Largest signed score; ties resolve to the lowest reference.
FeatureRef argmax(const AttributionMap& m) {
  const MapEntry* best = nullptr;
  for (const auto& e : m.entries) {
    if (e.score && (!best || *e.score > *best->score)) best = &e;
  }
  return best->ref;
}

ModelParams two_layer_model(ModelKind kind, std::uint64_t seed) {
  Hyperparams hp = testing::small_hp(kind);
  hp.layers = 2;
  return ModelParams::initialize(hp, testing::small_vocab(), seed, 0.3);
}

// Log-probability of `token` at row `row` from the scalar reference forward pass.
double ref_lp(const ModelParams& p, const std::vector<int>& seq, std::size_t row, int token, bool causal = true) {
  return testing::reference_lm(p, seq, causal)[row][static_cast<std::size_t>(token)];
}

std::vector<int> concat(std::vector<int> a, const std::vector<int>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// y_t given prompt and prefix y_{<t}, scored by the reference model.
double ref_token(const ModelParams& p, const std::vector<int>& prompt, const std::vector<int>& prefix, int y) {
  return ref_lp(p, concat(prompt, prefix), prompt.size() + prefix.size() - 1, y);
}

double ref_span(const ModelParams& p, const std::vector<int>& prompt, const std::vector<int>& y) {
  double total = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    total += ref_token(p, prompt, std::vector<int>(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(j)), y[j]);
  }
  return total;
}

// ---- the trained translation model shared by A4 and A6 ------------------------------

struct SynSetup {
  SynCorpus corpus;
  ModelParams params;
  int exact = 0;
};

const SynSetup& syn_setup() {
  static const SynSetup s = [] {
    SynCorpus c = make_syn_corpus(8, 1, 4, 3000, 1);
    Hyperparams hp;
    hp.width = 32;
    hp.ff_width = 64;
    hp.context = 16;
    TrainConfig tc;
    tc.steps = 2000;
    tc.learning_rate = 0.1;
    tc.batch_size = 16;
    tc.eval_every = 500;
    tc.init_std = 0.1;
    ModelParams params = train(hp, c.vocab, c.train, tc, 3).params;
    int exact = 0;
    for (const auto& ex : c.heldout) {
      exact += ar_generate(params, ex.prompt, static_cast<int>(ex.response.size()) + 2, DecodePolicy::greedy(), 0) ==
               ex.response;
    }
    return SynSetup{std::move(c), std::move(params), exact};
  }();
  return s;
}

// Held-out instance i: the model's own greedy output and a target position
// among the translated tokens.
struct SynInstance {
  PromptedInstance instance;
  int t = 0;
};

std::vector<SynInstance> syn_instances(int n, std::uint64_t seed) {
  const auto& s = syn_setup();
  Rng rng(seed);
  std::vector<SynInstance> out;
  for (const auto& ex : s.corpus.heldout) {
    if (static_cast<int>(out.size()) == n) break;
    const int len = static_cast<int>(ex.prompt.size()) - 2;
    const auto y = ar_generate(s.params, ex.prompt, len + 2, DecodePolicy::greedy(), 0);
    out.push_back({PromptedInstance::autoregressive(ex.prompt, y), 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(len)))});
  }
  return out;
}

// ---- criteria -------------------------------------------------------------------

Outcome a1_gradients() {
  Rng rng(101);
  double worst = 0.0;
  std::size_t checked = 0;
  std::string where;
  for (const auto& [name, build] : testing::primitive_builders()) {
    auto c = build(rng);
    const auto r = testing::finite_difference_check(c.graph, c.out, c.values, 1e-4);
    checked += r.checked;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      where = name + ": " + r.worst;
    }
  }
  const std::size_t primitive_entries = checked;
  // Full 2-layer transformer score, weights and input embeddings as leaves.
  const auto params = two_layer_model(ModelKind::autoregressive, 102);
  Graph g;
  LeafValues values;
  const BoundParams w = bind_leaves(g, params, values);
  const std::vector<int> tokens{4, 7, 2, 5, 9};
  const Tensor emb = token_embedding_rows(params, tokens);
  const NodeId x = g.leaf("input_embeddings", emb.shape());
  values.emplace(x, emb);
  const NodeId lp = lm_log_probs(g, w, encode(g, params, w, x, true));
  const NodeId score = g.add(g.pick(lp, 2, 5), g.pick(lp, 3, 9));
  const auto r = testing::finite_difference_check(g, score, values, 1e-4, 100, &rng);
  checked += r.checked;
  if (r.max_rel_error > worst) {
    worst = r.max_rel_error;
    where = "transformer: " + r.worst;
  }
  return {worst <= 1e-4 && r.checked == 100,
          "max relative error " + num(worst) + " (limit 1e-4) over " + std::to_string(primitive_entries) +
              " primitive entries and " + std::to_string(r.checked) + " transformer entries" +
              (worst > 1e-4 ? "; worst " + where : "")};
}

Outcome a2_span_sum() {
  Rng rng(201);
  const auto params = two_layer_model(ModelKind::autoregressive, 202);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto prompt = random_ids(rng, 1 + rng.below(5), 0, 10);
    const auto y = random_ids(rng, 1 + rng.below(6), 0, 10);
    double sum = 0.0;
    for (std::size_t j = 0; j < y.size(); ++j) {
      sum += token_log_prob(params, prompt, std::span<const int>(y.data(), j), y[j]);
    }
    worst = std::max(worst, std::abs(span_log_prob(params, prompt, y) - sum));
  }
  return {worst <= 1e-10, "max |span - sum of tokens| " + num(worst) + " (limit 1e-10) on 100 instances"};
}

Outcome a3_completeness() {
  Rng rng(301);
  const auto ar = testing::random_model(ModelKind::autoregressive, 302);
  const auto diff = testing::random_model(ModelKind::masked_diffusion, 303);
  const int pad = ar.vocab().pad();
  const int mask = diff.vocab().mask();
  std::map<std::string, double> worst;  // |gap error| / (1 + |gap|)
  auto record = [&](const std::string& name, const AttributionMap& m, double gap) {
    worst[name] = std::max(worst[name], std::abs(sum_scores(m) - gap) / (1.0 + std::abs(gap)));
  };
  for (int i = 0; i < 20; ++i) {
    const auto prompt = random_ids(rng, 2 + rng.below(4), 4, 10);
    const auto y = random_ids(rng, 2 + rng.below(4), 4, 10);
    const auto in = PromptedInstance::autoregressive(prompt, y);
    const int t = 1 + static_cast<int>(rng.below(y.size()));
    const std::vector<int> prefix(y.begin(), y.begin() + t - 1);
    const int yt = y[static_cast<std::size_t>(t - 1)];
    const std::vector<int> pad_prompt(prompt.size(), pad), pad_prefix(prefix.size(), pad);
    const double actual = ref_token(ar, prompt, prefix, yt);

    record("local", integrated_gradients(ar, in, make_named(Setting::local_next_token, in, t), BaselineKind::pad_token, 256),
           actual - ref_token(ar, pad_prompt, pad_prefix, yt));
    record("prompt-conditioned",
           integrated_gradients(ar, in, make_named(Setting::prompt_conditioned, in, t), BaselineKind::pad_token, 256),
           actual - ref_token(ar, pad_prompt, prefix, yt));
    record("span", integrated_gradients(ar, in, make_named(Setting::span_level, in), BaselineKind::pad_token, 256),
           ref_span(ar, prompt, y) - ref_span(ar, pad_prompt, y));

    // State-level at the MASK baseline: prompt and visible commitments all
    // read as MASK, so the baseline conditions on a fully masked sequence.
    const auto din = testing::generated_diffusion_instance(diff, random_ids(rng, 2 + rng.below(3), 4, 10),
                                                           3 + static_cast<int>(rng.below(3)),
                                                           2 + static_cast<int>(rng.below(2)), rng.next());
    const auto& tr = *din.trajectory;
    const int step = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(tr.num_steps())));
    std::vector<int> cond = din.prompt, blank(din.prompt.size(), mask);
    for (const auto& s : tr.state(step)) cond.push_back(s.masked() ? mask : s.token);
    for (int k = 0; k < tr.response_len(); ++k) blank.push_back(mask);
    double s_actual = 0.0, s_base = 0.0;
    for (int slot : tr.committed_at(step)) {
      const std::size_t row = din.prompt.size() + static_cast<std::size_t>(slot);
      const int tok = tr.final_output()[static_cast<std::size_t>(slot)];
      s_actual += ref_lp(diff, cond, row, tok, false);
      s_base += ref_lp(diff, blank, row, tok, false);
    }
    record("state",
           integrated_gradients(diff, din, make_named(Setting::state_level, din, step), BaselineKind::mask_token, 256),
           s_actual - s_base);
  }
  bool ok = true;
  std::string detail = "max |sum map - gap| / (1 + |gap|) at m=256, 20 instances each:";
  for (const auto& [name, w] : worst) {
    ok = ok && w <= 1e-3;
    detail += " " + name + " " + num(w);
  }
  return {ok, detail + " (limit 1e-3)"};
}

Outcome a4_contract_separation() {
  const auto& s = syn_setup();
  const double match = static_cast<double>(s.exact) / static_cast<double>(s.corpus.heldout.size());
  int aligned = 0, differ = 0, with_prefix = 0, local_positive = 0, pc_zero = 0;
  const auto instances = syn_instances(50, 401);
  for (const auto& [in, t] : instances) {
    const auto local = integrated_gradients(s.params, in, make_named(Setting::local_next_token, in, t),
                                            BaselineKind::pad_token, 64);
    const auto pc = integrated_gradients(s.params, in, make_named(Setting::prompt_conditioned, in, t),
                                         BaselineKind::pad_token, 64);
    // Prompt index 0 is "TR:", so y_t aligns with prompt position t.
    aligned += argmax(pc) == FeatureRef::prompt(t);
    differ += !(argmax(pc) == argmax(local));
    if (t > 1) {
      ++with_prefix;
      local_positive += prefix_mass(local) > 0.0;
    }
    pc_zero += prefix_mass(pc) == 0.0;
  }
  const int n = static_cast<int>(instances.size());
  const bool ok = match >= 0.95 && n == 50 && aligned >= 40 && local_positive == with_prefix && pc_zero == n &&
                  2 * differ >= n;
  return {ok, "held-out exact match " + ratio(s.exact, static_cast<int>(s.corpus.heldout.size())) +
                  " (need 95%); (i) prompt-conditioned argmax aligned " + ratio(aligned, n) +
                  " (need 80%); (ii) local prefix mass > 0 " + ratio(local_positive, with_prefix) +
                  ", prompt-conditioned prefix mass == 0 " + ratio(pc_zero, n) +
                  "; (iii) argmax differs " + ratio(differ, n) + " (need 50%)"};
}

Outcome a5_occlusion() {
  Rng rng(501);
  const auto ar = two_layer_model(ModelKind::autoregressive, 502);
  const auto cls = two_layer_model(ModelKind::classifier, 503);
  const int pad = ar.vocab().pad();
  double worst = 0.0;
  int entries = 0;
  auto check = [&](const AttributionMap& m, const FeatureRef& ref, double expect) {
    worst = std::max(worst, std::abs(m.score_of(ref).value() - expect));
    ++entries;
  };
  for (int i = 0; i < 20; ++i) {
    const auto prompt = random_ids(rng, 2 + rng.below(4), 4, 10);
    const auto y = random_ids(rng, 2 + rng.below(4), 4, 10);
    const auto in = PromptedInstance::autoregressive(prompt, y);
    const int t = 1 + static_cast<int>(rng.below(y.size()));
    const std::vector<int> prefix(y.begin(), y.begin() + t - 1);
    const int yt = y[static_cast<std::size_t>(t - 1)];
    const double full = ref_token(ar, prompt, prefix, yt);
    const auto local = occlusion(ar, in, make_named(Setting::local_next_token, in, t), BaselineKind::pad_token);
    for (std::size_t k = 0; k < prompt.size(); ++k) {
      auto x = prompt;
      x[k] = pad;
      check(local, FeatureRef::prompt(static_cast<int>(k)), full - ref_token(ar, x, prefix, yt));
    }
    for (std::size_t k = 0; k < prefix.size(); ++k) {
      auto p = prefix;
      p[k] = pad;
      check(local, FeatureRef::prefix(static_cast<int>(k)), full - ref_token(ar, prompt, p, yt));
    }
    const auto span = occlusion(ar, in, make_named(Setting::span_level, in), BaselineKind::pad_token);
    const double full_span = ref_span(ar, prompt, y);
    for (std::size_t k = 0; k < prompt.size(); ++k) {
      auto x = prompt;
      x[k] = pad;
      check(span, FeatureRef::prompt(static_cast<int>(k)), full_span - ref_span(ar, x, y));
    }
    const int c = static_cast<int>(rng.below(2));
    const auto cin = PromptedInstance::classified(prompt, c);
    const auto cm = occlusion(cls, cin, make_named(Setting::classifier, cin), BaselineKind::pad_token);
    const double cfull = testing::reference_classifier(cls, prompt)[static_cast<std::size_t>(c)];
    for (std::size_t k = 0; k < prompt.size(); ++k) {
      auto x = prompt;
      x[k] = pad;
      check(cm, FeatureRef::prompt(static_cast<int>(k)),
            cfull - testing::reference_classifier(cls, x)[static_cast<std::size_t>(c)]);
    }
  }
  return {worst <= 1e-10, "max |occlusion - replace-and-rescore| " + num(worst) + " (limit 1e-10) over " +
                              std::to_string(entries) + " entries on 20 instances"};
}

Outcome a6_faithfulness() {
  const auto& s = syn_setup();
  const auto instances = syn_instances(20, 601);
  MethodConfig ig;
  ig.ig_steps = 64;
  EvaluationOptions opt;
  opt.n_random = 10;
  opt.seed = 602;

  // Span-level evaluation only re-scores.
  reset_generation_stats();
  for (const auto& [in, t] : instances) faithfulness_report(s.params, in, make_named(Setting::span_level, in), ig, opt);
  const auto span_stats = generation_stats();
  const bool no_generation = span_stats.ar_generate_calls == 0 && span_stats.chain_runs == 0;

  // Prompt-conditioned evaluation never touches the prefix.
  bool prefix_untouched = true;
  EvaluationOptions watch = opt;
  for (const auto& [in, t] : instances) {
    watch.observe = [&](const PerturbedContext& ctx) {
      prefix_untouched = prefix_untouched && ctx.instance.generation == in.generation;
      for (const auto& ref : ctx.replaced) prefix_untouched = prefix_untouched && ref.kind == FeatureKind::prompt_token;
    };
    faithfulness_report(s.params, in, make_named(Setting::prompt_conditioned, in, t), ig, watch);
  }

  // Stage evaluation re-runs chains with the trajectory's own seed.
  const auto diff = testing::random_model(ModelKind::masked_diffusion, 603);
  bool seeds_kept = true;
  std::uint64_t chains = 0;
  MethodConfig stage;
  stage.kind = MethodKind::stage;
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    const auto din = testing::generated_diffusion_instance(diff, {4, 6, 8}, 5, 4, seed);
    reset_generation_stats();
    faithfulness_report(diff, din, make_named(Setting::denoising_stage, din), stage, opt);
    const auto st = generation_stats();
    chains += st.chain_runs;
    seeds_kept = seeds_kept && st.chain_runs > 0;
    for (auto used : st.chain_seeds) seeds_kept = seeds_kept && used == seed;
  }

  // Signal: map-ordered deletion beats the random orderings.
  std::string signal;
  bool signal_ok = true;
  for (const Setting setting : {Setting::local_next_token, Setting::prompt_conditioned, Setting::span_level}) {
    int wins = 0;
    for (const auto& [in, t] : instances) {
      const auto c = setting_takes_target(setting) ? make_named(setting, in, t) : make_named(setting, in);
      const auto rep = faithfulness_report(s.params, in, c, ig, opt);
      wins += rep.deletion_aopc && *rep.deletion_aopc > *rep.random_deletion_aopc;
    }
    const double p = sign_test_p(wins, static_cast<int>(instances.size()));
    signal_ok = signal_ok && p < 0.05;
    signal += std::string(" ") + to_string(setting) + " " + ratio(wins, static_cast<int>(instances.size())) +
              " p=" + num(p) + ";";
  }
  return {no_generation && prefix_untouched && seeds_kept && signal_ok,
          std::string("span-level generate calls ") + std::to_string(span_stats.ar_generate_calls) + ", chain runs " +
              std::to_string(span_stats.chain_runs) + "; prefix never perturbed: " + (prefix_untouched ? "yes" : "no") +
              "; stage chains " + std::to_string(chains) + " all with the original seed: " +
              (seeds_kept ? "yes" : "no") + "; deletion AOPC beats random mean (sign test, p < 0.05):" + signal};
}

Outcome a7_stage() {
  const auto diff = testing::random_model(ModelKind::masked_diffusion, 701);
  Rng rng(702);
  MethodConfig identity;
  identity.kind = MethodKind::stage;
  identity.stage_kind = StageKind::noise_schedule;
  identity.commit_delta = 0;
  MethodConfig ablate;
  ablate.kind = MethodKind::stage;
  MethodConfig sub = ablate;
  sub.stage_kind = StageKind::substitute_step;
  MethodConfig fewer = ablate;
  fewer.stage_kind = StageKind::noise_schedule;
  fewer.commit_delta = -1;

  bool identity_zero = true;
  double worst = 0.0;
  int compared = 0;
  bool feasibility_agrees = true;
  for (int i = 0; i < 10; ++i) {
    const int steps = 2 + i % 4;  // T in 2..5
    const DiffusionPolicy policy = i % 2 ? DiffusionPolicy{DiffusionPolicy::Rule::random_position, 1.0} : DiffusionPolicy{};
    const auto din = testing::generated_diffusion_instance(diff, random_ids(rng, 2 + rng.below(3), 4, 10),
                                                           steps + static_cast<int>(rng.below(3)), steps, rng.next(),
                                                           policy);
    const auto& tr = *din.trajectory;
    const auto c = make_named(Setting::denoising_stage, din);
    for (const auto& e : attribute(diff, din, c, identity).entries) identity_zero = identity_zero && e.score == 0.0;
    for (const auto& cfg : {ablate, sub, fewer}) {
      const auto m = attribute(diff, din, c, cfg);
      for (int t = 1; t <= tr.num_steps(); ++t) {
        const auto expect = testing::oracle_stage_delta(diff, din.prompt, tr, stage_perturbation(cfg, tr, t));
        const auto got = m.score_of(FeatureRef::stage_ref(t));
        if (got.has_value() != expect.has_value()) {
          feasibility_agrees = false;
        } else if (got) {
          worst = std::max(worst, std::abs(*got - *expect));
          ++compared;
        }
      }
    }
  }
  const auto single = testing::generated_diffusion_instance(diff, {4, 5}, 3, 1, 9);
  const auto m1 = attribute(diff, single, make_named(Setting::denoising_stage, single), ablate);
  const bool t1_infeasible = m1.entries.size() == 1 && !m1.entries[0].score;
  return {identity_zero && t1_infeasible && feasibility_agrees && worst <= 1e-10,
          std::string("identity schedule map all zero: ") + (identity_zero ? "yes" : "no") +
              "; T=1 ablation infeasible: " + (t1_infeasible ? "yes" : "no") + "; max |stage - oracle| " + num(worst) +
              " (limit 1e-10) over " + std::to_string(compared) + " entries on 10 trajectories, T <= 5"};
}

Outcome a8_manifests() {
  const fs::path dir = fs::temp_directory_path() / ("scope_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto run = [](std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    if (code != 0) std::cerr << err.str();
    return code;
  };
  auto p = [&](const std::string& s) { return (dir / s).string(); };
  bool ok = run({"gen-corpus", "--lexicon", "4", "--max-len", "3", "--pairs", "300", "--seed", "2", "--out", p("c")}) == 0 &&
            run({"train", "--corpus", p("c/corpus.txt"), "--width", "16", "--ff-width", "32", "--steps", "150",
                 "--seed", "3", "--out", p("m")}) == 0;
  write_file_atomic(dir / "span.contract",
                    "setting: span-level\nscore: span_log_prob\nfixed: span\noutput: span 3\n"
                    "process: autoregressive\neligible: prompt\nmodel: m/model.bin\nprompt: TR: s2 s4 SEP\n"
                    "generate: greedy 3\n");
  ok = ok && run({"evaluate", "--contract", p("span.contract"), "--random-orderings", "4", "--seed", "8", "--out",
                  p("orig")}) == 0;
  ok = ok && run({"rerun", "--manifest", p("orig/manifest.json"), "--out", p("rerun1")}) == 0;
  ok = ok && run({"rerun", "--manifest", p("orig/manifest.json"), "--out", p("rerun2")}) == 0;
  int identical = 0;
  const std::vector<std::string> files = {"map.txt", "report.txt", "heatmap.html", "heatmap.txt"};
  if (ok) {
    for (const auto& f : files) {
      const std::string a = read_file(dir / "rerun1" / f), b = read_file(dir / "rerun2" / f);
      identical += a == b && a == read_file(dir / "orig" / f);
    }
  }
  fs::remove_all(dir);
  return {ok && identical == static_cast<int>(files.size()),
          "two runs from one manifest: " + ratio(identical, static_cast<int>(files.size())) +
              " output files bit-identical (map, report, heatmap html/text)"};
}

Outcome a9_parsers() {
  Rng rng(901);
  const std::string contract_seed =
      "setting: prompt-conditioned\nscore: token_log_prob\nfixed: prefix\noutput: token 2\n"
      "process: autoregressive\neligible: prompt\nprompt: a b c\ngeneration: d e f\n";
  AttributionMap sample;
  {
    const auto in = PromptedInstance::autoregressive({4, 5, 6}, {7, 8, 9});
    const auto c = make_named(Setting::local_next_token, in, 3);
    sample.contract_id = canonical_id(c);
    for (const auto& ref : c.eligible) sample.entries.push_back({ref, rng.uniform(-1.0, 1.0)});
  }
  const std::string map_seed = serialize_map(sample);
  int crashes = 0, unstructured = 0;
  for (int i = 0; i < 10000; ++i) {
    std::string s;
    if (i % 2 == 0) {
      s.assign(rng.below(256), '\0');
      for (char& ch : s) ch = static_cast<char>(rng.below(256));
    } else {
      s = i % 4 == 1 ? contract_seed : map_seed;
      for (int k = 0; k < 1 + static_cast<int>(rng.below(4)) && !s.empty(); ++k) {
        s[rng.below(s.size())] = static_cast<char>(rng.below(256));
      }
    }
    try {
      const auto p = parse_contract_file(s);
      for (const auto& d : p.diagnostics) unstructured += d.code.size() != 5 || d.code.rfind("SC", 0) != 0;
    } catch (...) {
      ++crashes;
    }
    try {
      parse_map(s);
    } catch (const FormatError&) {
    } catch (...) {
      ++crashes;
    }
  }
  auto first = [](std::string_view text) {
    const auto p = parse_contract_file(text);
    return p.diagnostics.empty() ? Diagnostic{} : p.diagnostics.front();
  };
  std::string fixed_prefix = contract_seed;
  fixed_prefix.replace(fixed_prefix.find("eligible: prompt\n"), 17, "eligible: prompt+prefix\n");
  const Diagnostic overlap = first(fixed_prefix);
  const Diagnostic empty = first("");
  const auto named = parse_contract_file(contract_seed);
  bool named_ok = named.ok();
  if (named_ok) {
    const auto params = testing::random_model(ModelKind::autoregressive, 902);
    const auto in = bind_instance(*named.spec, params);
    named_ok = resolve_contract(*named.spec, in) == make_named(Setting::prompt_conditioned, in, 2);
  }
  const bool diag_ok = overlap.code == "SC006" && overlap.message.find("eligible/fixed overlap") != std::string::npos &&
                       empty.code == "SC001" && empty.message == "missing required field: score" && named_ok;
  return {crashes == 0 && unstructured == 0 && diag_ok,
          "10000 fuzz inputs per parser: " + std::to_string(crashes) + " crashes, " + std::to_string(unstructured) +
              " unstructured diagnostics; canonical cases: [" + to_string(overlap) + "] [" + to_string(empty) +
              "] prompt-conditioned file equals constructor: " + (named_ok ? "yes" : "no")};
}

}  // namespace
}  // namespace scope

int main() {
  using namespace scope;
  struct Criterion {
    const char* id;
    const char* name;
    double limit_seconds;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {"A1", "gradient correctness", 60, a1_gradients},
      {"A2", "span score consistency", 10, a2_span_sum},
      {"A3", "integrated gradients completeness", 300, a3_completeness},
      {"A4", "contract separation on the translation task", 600, a4_contract_separation},
      {"A5", "occlusion oracle equivalence", 30, a5_occlusion},
      {"A6", "faithfulness discipline", 300, a6_faithfulness},
      {"A7", "stage attribution sanity", 120, a7_stage},
      {"A8", "determinism and manifests", 60, a8_manifests},
      {"A9", "parser robustness", 60, a9_parsers},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.limit_seconds;
    const bool pass = o.pass && in_time;
    failed += !pass;
    char timing[64];
    std::snprintf(timing, sizeof timing, "%.1f s, limit %.0f s", secs, c.limit_seconds);
    std::cout << c.id << " " << (pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail << " [" << timing
              << (in_time ? "" : ", over time") << "]" << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
