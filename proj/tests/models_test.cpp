// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "chain_oracle.hpp"
#include "gradcheck.hpp"
#include "reference_model.hpp"
#include "scope/diffusion.hpp"
#include "scope/model_io.hpp"
#include "scope/scores.hpp"
#include "scope/train.hpp"

namespace scope {
namespace {

using testing::reference_classifier;
using testing::reference_lm;

Vocab small_vocab() { return Vocab::with_specials({"a", "b", "c", "d", "e", "f"}); }

Hyperparams small_hp(ModelKind kind) {
  Hyperparams hp;
  hp.kind = kind;
  hp.width = 16;
  hp.ff_width = 24;
  hp.context = 24;
  return hp;
}

// Random weights large enough that the model is far from uniform.
ModelParams random_model(ModelKind kind, std::uint64_t seed) {
  return ModelParams::initialize(small_hp(kind), small_vocab(), seed, 0.3);
}

std::vector<int> random_tokens(Rng& rng, std::size_t n, int lo = 4, int hi = 10) {
  std::vector<int> out(n);
  for (int& t : out) t = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo)));
  return out;
}

double log_sum_exp(const std::vector<double>& v) {
  double hi = v[0];
  for (double x : v) hi = std::max(hi, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - hi);
  return hi + std::log(s);
}

// ---- vocab and parameters ----------------------------------------------------

TEST(Vocab, SpecialsComeFirst) {
  const Vocab v = small_vocab();
  EXPECT_EQ(v.size(), 10);
  EXPECT_EQ(v.token(v.pad()), "PAD");
  EXPECT_EQ(v.token(v.mask()), "MASK");
  EXPECT_EQ(v.encode("a SEP  b"), (std::vector<int>{4, 2, 5}));
  EXPECT_EQ(v.decode(std::vector<int>{4, 5}), "a b");
  EXPECT_THROW(v.id("zz"), std::invalid_argument);
}

TEST(Vocab, RejectsInvalidTables) {
  EXPECT_THROW(Vocab({"a", "a", "b", "c"}, {}), std::invalid_argument);
  EXPECT_THROW(Vocab({"a", "b c", "d", "e"}, {}), std::invalid_argument);
  EXPECT_THROW(Vocab({"a", "b", "c"}, {}), std::invalid_argument);  // eos out of range
  EXPECT_THROW(Vocab({"a", "b", "c", "d"}, SpecialTokens{0, 0, 2, 3}), std::invalid_argument);
}

TEST(ModelParams, IdTracksContent) {
  const auto a = ModelParams::initialize(small_hp(ModelKind::autoregressive), small_vocab(), 3);
  const auto b = ModelParams::initialize(small_hp(ModelKind::autoregressive), small_vocab(), 3);
  EXPECT_EQ(a.model_id(), b.model_id());
  Tensor w = a.weight("l0.wq");
  w[5] += 1e-12;
  EXPECT_NE(a.with_weight("l0.wq", w).model_id(), a.model_id());
  Hyperparams hp = small_hp(ModelKind::autoregressive);
  hp.context = 25;
  EXPECT_NE(ModelParams::initialize(hp, small_vocab(), 3).model_id(), a.model_id());
  EXPECT_NE(ModelParams::initialize(small_hp(ModelKind::autoregressive), small_vocab(), 4).model_id(), a.model_id());
}

TEST(ModelParams, RejectsInconsistentWeights) {
  const auto a = ModelParams::initialize(small_hp(ModelKind::autoregressive), small_vocab(), 3);
  EXPECT_ANY_THROW(a.with_weight("l0.wq", Tensor::zeros({3, 3})));
  Hyperparams bad = small_hp(ModelKind::autoregressive);
  bad.heads = 3;
  EXPECT_ANY_THROW(bad.validate());
}

TEST(ModelIo, RoundTripAndTamper) {
  const auto a = random_model(ModelKind::masked_diffusion, 9);
  const std::string bytes = serialize_model(a);
  const ModelParams b = parse_model(bytes);
  EXPECT_EQ(b.model_id(), a.model_id());
  EXPECT_EQ(b.weight("out.w"), a.weight("out.w"));
  EXPECT_EQ(b.vocab(), a.vocab());

  std::string tampered = bytes;
  tampered[tampered.size() - 3] ^= 0x10;
  EXPECT_THROW(parse_model(tampered), ModelFormatError);
  EXPECT_THROW(parse_model(bytes + "x"), ModelFormatError);
  EXPECT_THROW(parse_model(bytes.substr(0, bytes.size() / 2)), ModelFormatError);
  EXPECT_THROW(parse_model(""), ModelFormatError);

  const auto path = std::filesystem::temp_directory_path() / "scope_model_io_test.bin";
  save_model(path, a);
  EXPECT_EQ(load_model(path).model_id(), a.model_id());
  std::filesystem::remove(path);
}

// ---- autoregressive scores -------------------------------------------------------

TEST(Autoregressive, UntrainedModelIsNearUniform) {
  const auto params = ModelParams::initialize(Hyperparams{}, small_vocab(), 0);
  const std::vector<int> prompt{4, 5, 2};
  const auto lp = ar_next_log_probs(params, prompt, std::vector<int>{6});
  const auto [lo, hi] = std::minmax_element(lp.begin(), lp.end());
  EXPECT_LT(*hi - *lo, 0.5);
}

TEST(Autoregressive, HandSetModelAlwaysEmitsTokenOne) {
  const Vocab vocab = Vocab::with_specials({"x", "y"});
  const auto init = ModelParams::initialize(small_hp(ModelKind::autoregressive), vocab, 1);
  Tensor bias = Tensor::zeros(init.weight("out.b").shape());
  bias[1] = 20.0;
  const auto params = init.with_weight("out.w", Tensor::zeros(init.weight("out.w").shape())).with_weight("out.b", bias);
  Rng rng(4);
  for (int i = 0; i < 10; ++i) {
    const auto prompt = random_tokens(rng, 1 + rng.below(4), 4, 6);
    EXPECT_GT(token_log_prob(params, prompt, {}, 1), -1e-3);
  }
}

TEST(Autoregressive, LogProbsNormalizeAndMatchOracle) {
  const auto params = random_model(ModelKind::autoregressive, 21);
  Rng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    const auto prompt = random_tokens(rng, 1 + rng.below(5));
    const auto prefix = random_tokens(rng, rng.below(4));
    const auto lp = ar_next_log_probs(params, prompt, prefix);
    EXPECT_NEAR(log_sum_exp(lp), 0.0, 1e-10);

    std::vector<int> seq = prompt;
    seq.insert(seq.end(), prefix.begin(), prefix.end());
    const auto oracle = reference_lm(params, seq, true).back();
    double total = 0.0;
    for (int v = 0; v < params.vocab().size(); ++v) {
      const double s = token_log_prob(params, prompt, prefix, v);
      EXPECT_EQ(s, lp[static_cast<std::size_t>(v)]);
      EXPECT_NEAR(s, oracle[static_cast<std::size_t>(v)], 1e-10);
      total += std::exp(s);
    }
    EXPECT_NEAR(total, 1.0, 1e-10);
  }
}

TEST(Autoregressive, SpanEqualsSumOfTokenScores) {
  const auto params = random_model(ModelKind::autoregressive, 31);
  Rng rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    const auto prompt = random_tokens(rng, 1 + rng.below(5));
    const auto span = random_tokens(rng, 1 + rng.below(6), 3, 10);
    double sum = 0.0;
    for (std::size_t t = 0; t < span.size(); ++t) {
      sum += token_log_prob(params, prompt, std::span<const int>(span).first(t), span[t]);
    }
    EXPECT_NEAR(span_log_prob(params, prompt, span), sum, 1e-10);
  }
  const std::vector<int> prompt{4, 5};
  const std::vector<int> one{7};
  EXPECT_NEAR(span_log_prob(params, prompt, one), token_log_prob(params, prompt, {}, 7), 1e-12);
  EXPECT_THROW(span_log_prob(params, prompt, {}), std::invalid_argument);
}

TEST(Autoregressive, ErrorsAreSignalled) {
  const auto params = random_model(ModelKind::autoregressive, 1);
  const std::vector<int> long_prompt(25, 4);
  EXPECT_THROW(ar_next_log_probs(params, long_prompt, {}), ContextOverflow);
  EXPECT_THROW(ar_next_log_probs(params, std::vector<int>{99}, {}), std::out_of_range);
  const auto diff = random_model(ModelKind::masked_diffusion, 1);
  EXPECT_THROW(token_log_prob(diff, std::vector<int>{4}, {}, 5), ModelKindError);
  EXPECT_THROW(ar_generate(params, std::vector<int>{4}, 0, DecodePolicy::greedy(), 0), std::invalid_argument);
}

TEST(Autoregressive, GenerationIsDeterministic) {
  const auto params = random_model(ModelKind::autoregressive, 41);
  const std::vector<int> prompt{4, 6, 2};
  const auto g1 = ar_generate(params, prompt, 8, DecodePolicy::greedy(), 1);
  EXPECT_EQ(g1, ar_generate(params, prompt, 8, DecodePolicy::greedy(), 999));
  const auto s1 = ar_generate(params, prompt, 8, DecodePolicy::sample(1.0), 5);
  EXPECT_EQ(s1, ar_generate(params, prompt, 8, DecodePolicy::sample(1.0), 5));
  for (const auto& out : {g1, s1}) {
    EXPECT_LE(out.size(), 8u);
    EXPECT_GE(out.size(), 1u);
    for (std::size_t i = 0; i + 1 < out.size(); ++i) EXPECT_NE(out[i], params.vocab().eos());
    for (int t : out) EXPECT_NE(t, params.vocab().mask());
  }
}

TEST(Autoregressive, GenerationStopsAtEos) {
  const auto init = random_model(ModelKind::autoregressive, 2);
  Tensor bias = Tensor::zeros(init.weight("out.b").shape());
  bias[static_cast<std::size_t>(init.vocab().eos())] = 50.0;
  const auto params = init.with_weight("out.w", Tensor::zeros(init.weight("out.w").shape())).with_weight("out.b", bias);
  EXPECT_EQ(ar_generate(params, std::vector<int>{4}, 5, DecodePolicy::greedy(), 0), std::vector<int>{3});
}

TEST(Autoregressive, ScoreGraphGradientMatchesFiniteDifferences) {
  const auto params = random_model(ModelKind::autoregressive, 51);
  const std::vector<int> prompt{4, 5, 6}, prefix{7, 8};
  const ScoreGraph sg = span_log_prob_graph(params, prompt, prefix);
  LeafValues values{{sg.embeddings, sg.actual}};
  Rng rng(52);
  const auto check = testing::finite_difference_check(sg.graph, sg.output, values, 1e-4, 60, &rng);
  EXPECT_LT(check.max_rel_error, 1e-4) << check.worst;
}

TEST(Autoregressive, WeightGradientsMatchFiniteDifferences) {
  const auto params = random_model(ModelKind::autoregressive, 53);
  Graph g;
  LeafValues values;
  const BoundParams w = bind_leaves(g, params, values);
  const std::vector<std::size_t> ids{4, 5, 2, 7};
  const NodeId lp = lm_log_probs(g, w, encode(g, params, w, g.gather_rows(w("tok_emb"), ids), true));
  const NodeId score = g.add(g.pick(lp, 2, 7), g.pick(lp, 3, 8));
  Rng rng(54);
  const auto check = testing::finite_difference_check(g, score, values, 1e-4, 100, &rng);
  EXPECT_EQ(check.checked, 100u);
  EXPECT_LT(check.max_rel_error, 1e-4) << check.worst;
}

// ---- classifier -----------------------------------------------------------------

TEST(Classifier, ZeroHeadIsUniform) {
  const auto init = random_model(ModelKind::classifier, 61);
  const auto params = init.with_weight("cls.w", Tensor::zeros(init.weight("cls.w").shape()))
                          .with_weight("cls.b", Tensor::zeros(init.weight("cls.b").shape()));
  const std::vector<int> x{4, 5, 6};
  EXPECT_NEAR(classifier_log_prob(params, x, 0), -std::log(2.0), 1e-15);
  EXPECT_NEAR(classifier_log_prob(params, x, 1), -std::log(2.0), 1e-15);
  EXPECT_THROW(classifier_log_prob(params, x, 2), std::out_of_range);
  EXPECT_THROW(classifier_log_prob(params, x, -1), std::out_of_range);
}

TEST(Classifier, MatchesOracleOnOneLayerModel) {
  Hyperparams hp = small_hp(ModelKind::classifier);
  hp.layers = 1;
  hp.num_classes = 3;
  const auto params = ModelParams::initialize(hp, small_vocab(), 62, 0.4);
  Rng rng(63);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = random_tokens(rng, 1 + rng.below(6));
    const auto oracle = reference_classifier(params, x);
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double s = classifier_log_prob(params, x, c);
      EXPECT_NEAR(s, oracle[static_cast<std::size_t>(c)], 1e-10);
      total += std::exp(s);
    }
    EXPECT_NEAR(total, 1.0, 1e-10);
  }
}

// ---- masked diffusion -------------------------------------------------------------

TEST(Diffusion, EvenSchedule) {
  EXPECT_EQ(even_schedule(5, 5), (std::vector<int>{0, 1, 1, 1, 1, 1}));
  EXPECT_EQ(even_schedule(5, 1), (std::vector<int>{0, 5}));
  EXPECT_EQ(even_schedule(7, 3), (std::vector<int>{0, 2, 2, 3}));
  EXPECT_THROW(even_schedule(2, 3), std::invalid_argument);
}

TEST(Diffusion, OneCommitPerStepWhenStepsEqualLength) {
  const auto params = random_model(ModelKind::masked_diffusion, 71);
  const std::vector<int> prompt{4, 5, 2};
  const auto tr = diffusion_generate(params, prompt, 4, 4, 7);
  for (int t = 1; t <= 4; ++t) EXPECT_EQ(tr.committed_at(t).size(), 1u);
  EXPECT_EQ(tr.states().size(), 5u);
}

TEST(Diffusion, SingleStepCommitsEverything) {
  const auto params = random_model(ModelKind::masked_diffusion, 72);
  const std::vector<int> prompt{4, 5, 2};
  const auto tr = diffusion_generate(params, prompt, 3, 1, 7);
  ASSERT_EQ(tr.states().size(), 2u);
  for (const Slot& s : tr.state(1)) EXPECT_TRUE(s.masked());
  for (const Slot& s : tr.state(0)) EXPECT_EQ(s.committed_at, 1);
  EXPECT_NEAR(state_log_prob(params, prompt, tr, 1), trajectory_score(params, prompt, tr), 1e-15);

  // One-shot masked prediction of y from an all-masked response.
  const auto lp = reference_lm(params, std::vector<int>{4, 5, 2, 1, 1, 1}, false);
  double oneshot = 0.0;
  for (std::size_t i = 0; i < 3; ++i) oneshot += lp[3 + i][static_cast<std::size_t>(tr.final_output()[i])];
  EXPECT_NEAR(trajectory_score(params, prompt, tr), oneshot, 1e-10);
}

TEST(Diffusion, GenerationIsDeterministicAndMonotone) {
  const auto params = random_model(ModelKind::masked_diffusion, 73);
  Rng rng(74);
  for (int trial = 0; trial < 10; ++trial) {
    const auto prompt = random_tokens(rng, 1 + rng.below(4));
    const int len = 1 + static_cast<int>(rng.below(6));
    const int steps = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(len)));
    for (const auto& policy : {DiffusionPolicy{}, DiffusionPolicy{DiffusionPolicy::Rule::random_position, 1.0},
                               DiffusionPolicy{DiffusionPolicy::Rule::sample, 0.7}}) {
      const auto a = diffusion_generate(params, prompt, len, steps, 100 + trial, policy);
      const auto b = diffusion_generate(params, prompt, len, steps, 100 + trial, policy);
      EXPECT_TRUE(a == b);
      const auto k = a.schedule();
      EXPECT_EQ(k, even_schedule(len, steps));
      for (std::size_t s = 1; s < a.states().size(); ++s) {
        for (std::size_t i = 0; i < static_cast<std::size_t>(len); ++i) {
          const Slot& before = a.states()[s - 1][i];
          if (!before.masked()) {
            EXPECT_EQ(a.states()[s][i], before);
          }
        }
      }
      std::vector<int> z0;
      for (const Slot& s : a.state(0)) z0.push_back(s.token);
      EXPECT_EQ(z0, a.final_output());
      for (int t : z0) EXPECT_NE(t, params.vocab().mask());
    }
  }
}

TEST(Diffusion, ConfidenceOrderingMatchesOracle) {
  const auto params = random_model(ModelKind::masked_diffusion, 75);
  Rng rng(76);
  for (int trial = 0; trial < 5; ++trial) {
    const auto prompt = random_tokens(rng, 2);
    const auto tr = diffusion_generate(params, prompt, 5, 3, trial);
    const auto counts = testing::oracle_counts(tr);
    const auto chain = testing::oracle_chain(params, prompt, tr, counts, 3, DiffusionPolicy::Rule::confidence);
    EXPECT_EQ(chain.back().token, tr.final_output());
  }
}

TEST(Diffusion, InvalidArguments) {
  const auto params = random_model(ModelKind::masked_diffusion, 77);
  const std::vector<int> prompt{4};
  EXPECT_THROW(diffusion_generate(params, prompt, 2, 3, 0), std::invalid_argument);
  EXPECT_THROW(diffusion_generate(params, prompt, 2, 0, 0), std::invalid_argument);
  EXPECT_THROW(diffusion_generate(params, prompt, 30, 2, 0), ContextOverflow);
  const auto tr = diffusion_generate(params, prompt, 2, 2, 0);
  EXPECT_THROW(state_log_prob(params, prompt, tr, 0), std::out_of_range);
  EXPECT_THROW(state_log_prob(params, prompt, tr, 3), std::out_of_range);
}

TEST(Diffusion, TrajectoryInvariantsAreEnforced) {
  std::vector<DiffusionState> states{DiffusionState(2), DiffusionState(2)};
  states[1][0] = Slot{4, 1};
  EXPECT_THROW(DenoisingTrajectory(1, states, 0), TrajectoryError);  // slot 1 never committed
  states[1][1] = Slot{5, 2};
  EXPECT_THROW(DenoisingTrajectory(1, states, 0), TrajectoryError);  // wrong step label
  states[1][1] = Slot{5, 1};
  EXPECT_NO_THROW(DenoisingTrajectory(1, states, 0));

  std::vector<DiffusionState> reverting{DiffusionState(1), DiffusionState(1), DiffusionState(1)};
  reverting[1][0] = Slot{4, 2};
  EXPECT_THROW(DenoisingTrajectory(2, reverting, 0), TrajectoryError);
  reverting[2][0] = Slot{5, 2};
  EXPECT_THROW(DenoisingTrajectory(2, reverting, 0), TrajectoryError);
  EXPECT_THROW(DenoisingTrajectory::from_commitments(2, 2, {{0, 4, 2}, {0, 5, 1}, {1, 4, 1}}, 0), TrajectoryError);
}

TEST(Diffusion, StateScoreMatchesPerSlotOracle) {
  const auto params = random_model(ModelKind::masked_diffusion, 81);
  Rng rng(82);
  for (int trial = 0; trial < 5; ++trial) {
    const auto prompt = random_tokens(rng, 1 + rng.below(3));
    const auto tr = diffusion_generate(params, prompt, 5, 3, trial);
    double total = 0.0;
    for (int t = 1; t <= 3; ++t) {
      double oracle = 0.0;
      for (int slot : tr.committed_at(t)) {
        // z_t with the slot itself masked: it was masked in z_t already.
        std::vector<int> seq = prompt;
        for (const Slot& s : tr.state(t)) seq.push_back(s.masked() ? params.vocab().mask() : s.token);
        oracle += reference_lm(params, seq, false)[prompt.size() + static_cast<std::size_t>(slot)]
                                                  [static_cast<std::size_t>(tr.final_output()[static_cast<std::size_t>(slot)])];
      }
      const double s = state_log_prob(params, prompt, tr, t);
      EXPECT_NEAR(s, oracle, 1e-10);
      total += s;
    }
    EXPECT_NEAR(trajectory_score(params, prompt, tr), total, 1e-10);
  }
}

TEST(Diffusion, EmptyStepScoresZero) {
  const auto params = random_model(ModelKind::masked_diffusion, 83);
  const auto tr = DenoisingTrajectory::from_commitments(2, 3, {{0, 4, 3}, {1, 5, 1}}, 0);
  EXPECT_EQ(state_log_prob(params, std::vector<int>{4}, tr, 2), 0.0);
}

TEST(Diffusion, ScoreIsInvariantToReserialization) {
  const auto params = random_model(ModelKind::masked_diffusion, 84);
  const std::vector<int> prompt{4, 6};
  const auto tr = diffusion_generate(params, prompt, 4, 2, 3);
  const auto copy = DenoisingTrajectory::from_commitments(4, 2, tr.commitments(), tr.seed(), tr.policy());
  EXPECT_TRUE(copy == tr);
  EXPECT_EQ(trajectory_score(params, prompt, copy), trajectory_score(params, prompt, tr));
  EXPECT_EQ(teacher_forced_score(params, prompt, tr.states(), tr), trajectory_score(params, prompt, tr));
}

TEST(Diffusion, TeacherForcedGraphMatchesScalarScore) {
  const auto params = random_model(ModelKind::masked_diffusion, 85);
  const std::vector<int> prompt{4, 6, 2};
  const auto tr = diffusion_generate(params, prompt, 4, 3, 3);
  const ScoreGraph sg = teacher_forced_graph(params, prompt, tr.states(), tr);
  EXPECT_NEAR(sg.value(), trajectory_score(params, prompt, tr), 1e-12);
  LeafValues values{{sg.embeddings, sg.actual}};
  Rng rng(86);
  const auto check = testing::finite_difference_check(sg.graph, sg.output, values, 1e-4, 40, &rng);
  EXPECT_LT(check.max_rel_error, 1e-4) << check.worst;
}

// ---- stage perturbations -----------------------------------------------------------

TEST(StagePerturbation, Rebalance) {
  EXPECT_EQ(rebalance_schedule({0, 1, 1, 2}, 3, 0), (std::vector<int>{0, 2, 2, 0}));
  EXPECT_EQ(rebalance_schedule({0, 1, 1, 3}, 3, 0), (std::vector<int>{0, 3, 2, 0}));
  EXPECT_EQ(rebalance_schedule({0, 1, 1, 2}, 3, 4), (std::vector<int>{0, 0, 0, 4}));
  EXPECT_EQ(rebalance_schedule({0, 1, 1, 2}, 2, 1), (std::vector<int>{0, 1, 1, 2}));
  EXPECT_THROW(rebalance_schedule({0, 3}, 1, 0), InfeasiblePerturbation);
  EXPECT_THROW(rebalance_schedule({0, 1, 1, 2}, 3, 5), InfeasiblePerturbation);
  EXPECT_EQ(rebalance_schedule({0, 3}, 1, 3), (std::vector<int>{0, 3}));
}

TEST(StagePerturbation, IdentityHasZeroDelta) {
  const auto params = random_model(ModelKind::masked_diffusion, 91);
  const std::vector<int> prompt{4, 5};
  const auto tr = diffusion_generate(params, prompt, 5, 3, 11);
  const double base = trajectory_score(params, prompt, tr);
  const auto k = tr.schedule();
  for (int t = 1; t <= 3; ++t) {
    const auto pc = run_perturbed_chain(params, prompt, tr, StagePerturbation::noise_schedule(t, k[static_cast<std::size_t>(t)]));
    EXPECT_TRUE(pc.trajectory == tr);
    EXPECT_EQ(base - pc.score, 0.0);
  }
}

TEST(StagePerturbation, SingleStepAblationIsInfeasible) {
  const auto params = random_model(ModelKind::masked_diffusion, 92);
  const std::vector<int> prompt{4};
  const auto tr = diffusion_generate(params, prompt, 3, 1, 0);
  EXPECT_THROW(run_perturbed_chain(params, prompt, tr, StagePerturbation::ablate(1)), InfeasiblePerturbation);
  EXPECT_THROW(run_perturbed_chain(params, prompt, tr, StagePerturbation::ablate(2)), std::out_of_range);
}

TEST(StagePerturbation, ReplaysWithOriginalSeed) {
  const auto params = random_model(ModelKind::masked_diffusion, 93);
  const std::vector<int> prompt{4, 5};
  const auto tr = diffusion_generate(params, prompt, 4, 4, 1234);
  reset_generation_stats();
  run_perturbed_chain(params, prompt, tr, StagePerturbation::ablate(3));
  const auto stats = generation_stats();
  EXPECT_EQ(stats.chain_runs, 1u);
  EXPECT_EQ(stats.chain_seeds, std::vector<std::uint64_t>{1234});
}

TEST(StagePerturbation, DeltasMatchIndependentChainRunner) {
  Rng rng(95);
  for (int trial = 0; trial < 4; ++trial) {
    const auto params = random_model(ModelKind::masked_diffusion, 96 + trial);
    const auto prompt = random_tokens(rng, 1 + rng.below(3));
    const int len = 2 + static_cast<int>(rng.below(4));
    const int steps = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::min(len, 5))));
    const auto tr = diffusion_generate(params, prompt, len, steps, 500 + trial);
    const double base = trajectory_score(params, prompt, tr);
    for (int t = 1; t <= steps; ++t) {
      for (const auto& p : {StagePerturbation::ablate(t), StagePerturbation::noise_schedule(t, 0),
                            StagePerturbation::noise_schedule(t, len),
                            StagePerturbation::substitute(t, {DiffusionPolicy::Rule::random_position, 1.0})}) {
        const auto oracle = testing::oracle_stage_delta(params, prompt, tr, p);
        std::optional<double> got;
        try {
          got = base - run_perturbed_chain(params, prompt, tr, p).score;
        } catch (const InfeasiblePerturbation&) {
        }
        ASSERT_EQ(got.has_value(), oracle.has_value()) << "stage " << t << " kind " << to_string(p.kind);
        if (got) {
          EXPECT_NEAR(*got, *oracle, 1e-10);
        }
      }
    }
  }
}

// ---- training -----------------------------------------------------------------------

TEST(Training, MemorizesARepeatedSequence) {
  const Vocab vocab = small_vocab();
  const std::vector<Example> corpus(4, Example{{4, 5, 2}, {6, 7, 3}, -1});
  TrainConfig cfg;
  cfg.steps = 150;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.5;
  cfg.eval_every = 25;
  cfg.init_std = 0.1;
  const auto result = train(small_hp(ModelKind::autoregressive), vocab, corpus, cfg, 1);
  EXPECT_GT(span_log_prob(result.params, corpus[0].prompt, corpus[0].response), -0.1);
  for (std::size_t i = 1; i < result.checkpoints.size(); ++i) {
    EXPECT_LE(result.checkpoints[i].loss, result.checkpoints[i - 1].loss) << "checkpoint " << i;
  }
  const auto again = train(small_hp(ModelKind::autoregressive), vocab, corpus, cfg, 1);
  EXPECT_EQ(again.params.model_id(), result.params.model_id());
  EXPECT_EQ(again.final_loss, result.final_loss);
}

TEST(Training, DiffusionAndClassifierLossesDecrease) {
  const Vocab vocab = small_vocab();
  TrainConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.5;
  cfg.eval_every = 30;
  cfg.init_std = 0.1;
  const std::vector<Example> seqs{{{4, 2}, {5, 6}, -1}, {{7, 2}, {8, 9}, -1}};
  const auto d = train(small_hp(ModelKind::masked_diffusion), vocab, seqs, cfg, 2);
  EXPECT_LT(d.final_loss, d.checkpoints.front().loss);
  const std::vector<Example> labelled{{{4, 5}, {}, 0}, {{6, 7}, {}, 1}};
  const auto c = train(small_hp(ModelKind::classifier), vocab, labelled, cfg, 3);
  EXPECT_LT(c.final_loss, c.checkpoints.front().loss);
}

TEST(Training, RejectsBadInput) {
  TrainConfig cfg;
  EXPECT_THROW(train(small_hp(ModelKind::autoregressive), small_vocab(), {}, cfg, 0), std::invalid_argument);
  const std::vector<Example> bad{{{4}, {}, -1}};
  EXPECT_THROW(train(small_hp(ModelKind::autoregressive), small_vocab(), bad, cfg, 0), std::invalid_argument);
  const std::vector<Example> bad_label{{{4}, {}, 5}};
  EXPECT_THROW(train(small_hp(ModelKind::classifier), small_vocab(), bad_label, cfg, 0), std::invalid_argument);
}

TEST(Training, DivergenceAborts) {
  TrainConfig cfg;
  cfg.steps = 50;
  cfg.batch_size = 2;
  cfg.learning_rate = 1e200;
  cfg.clip_norm = 0.0;
  cfg.init_std = 0.5;
  const std::vector<Example> corpus{{{4, 5}, {6, 3}, -1}};
  EXPECT_THROW(train(small_hp(ModelKind::autoregressive), small_vocab(), corpus, cfg, 0), TrainingDiverged);
}

}  // namespace
}  // namespace scope
