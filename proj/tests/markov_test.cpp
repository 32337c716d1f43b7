#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"
#include "surgflow/markov.hpp"

using namespace surgflow;

TEST(Transitions, LearnedByCounting) {
  const auto tm = learn_transitions({{0, 0, 1}, {1, 1, 1, 0}}, 3);
  EXPECT_DOUBLE_EQ(tm.pi[0], 0.5);
  EXPECT_DOUBLE_EQ(tm.pi[1], 0.5);
  EXPECT_DOUBLE_EQ(tm.a(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(tm.a(0, 1), 0.5);
  EXPECT_NEAR(tm.a(1, 1), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(tm.a(1, 0), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(tm.uniform_rows, std::vector<std::size_t>{2});
  EXPECT_NEAR(tm.a(2, 2), 1.0 / 3.0, 1e-15);

  const auto sm = learn_transitions({{0, 1}}, 2, true);
  EXPECT_DOUBLE_EQ(sm.pi[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(sm.a(0, 1), 2.0 / 3.0);
  EXPECT_THROW(learn_transitions({}, 2), InputError);
  EXPECT_THROW(learn_transitions({{5}}, 2), ValidationError);
}

TEST(Viterbi, MatchesBruteForceOnRandomToys) {
  oracle::Rng rng(1);
  for (int i = 0; i < 60; ++i) EXPECT_LT(oracle::hmm_oracle_error(rng), 1e-9) << "toy " << i;
}

TEST(Viterbi, DegeneratePolicy) {
  Hmm h{{1.0, 0.0}, Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}}), 1.0, {}};
  DecoderState st;
  viterbi_step(h, st, Vec{1.0, 0.0});
  DecoderState copy = st;
  EXPECT_THROW(viterbi_step(h, copy, Vec{0.0, 1.0}), DegenerateError);
  const auto r = viterbi_step(h, st, Vec{0.0, 1.0}, DegeneratePolicy::Restart);
  EXPECT_TRUE(r.restarted);
  EXPECT_EQ(r.argmax, 1u);
  EXPECT_THROW(viterbi_step(h, st, Vec{0.0, 0.0}), DegenerateError);
  EXPECT_THROW(viterbi_step(h, st, Vec{1.0}), ValidationError);
}

TEST(Viterbi, ScoresAreSoftmaxOfColumn) {
  oracle::Rng rng(9);
  const auto h = oracle::random_hmm(rng, 3);
  DecoderState st;
  const auto r = viterbi_step(h, st, Vec{0.2, 0.3, 0.5});
  EXPECT_TRUE(is_distribution(r.scores, 1e-12));
  EXPECT_EQ(argmax(r.scores), r.argmax);
}

TEST(Hmm, JsonRoundtrip) {
  oracle::Rng rng(3);
  auto h = oracle::random_hmm(rng, 4);
  h.tick = 3.0;
  EXPECT_EQ(hmm_from_json(hmm_to_json(h)), h);
}

TEST(Symbols, CanonicalEncoding) {
  const auto st = learn_symbol_table(4, {{0, 1, 2}, {1, 2}, {1, 2, 3}, {0, 3}});
  EXPECT_EQ(st.size(), 1u + 4u + 6u);
  EXPECT_EQ(st.symbol_of(std::vector<std::size_t>{}), 0u);
  EXPECT_EQ(st.symbol_of(std::vector<std::size_t>{2}), 3u);
  EXPECT_EQ(st.pair(0, 1), 5u);
  EXPECT_EQ(st.pair(2, 3), 10u);
  EXPECT_EQ(st.symbol_of(std::vector<std::size_t>{3, 0}), st.pair(0, 3));
  // {1,2} co-occurred most often; the triple reduces to it.
  EXPECT_EQ(st.symbol_of(std::vector<std::size_t>{0, 1, 2, 3}), st.pair(1, 2));
  bool unknown = false;
  EXPECT_EQ(st.symbol_of(std::vector<std::size_t>{1, 9}, &unknown), st.single(1));
  EXPECT_TRUE(unknown);
  std::set<std::size_t> seen;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = i + 1; j < 4; ++j) seen.insert(st.pair(i, j));
  }
  EXPECT_EQ(seen.size(), 6u);
  EXPECT_EQ(*seen.rbegin(), st.size() - 1);
}

TEST(Hhmm, ViterbiMatchesBruteForceOnRandomToys) {
  oracle::Rng rng(2);
  for (int i = 0; i < 60; ++i) EXPECT_LT(oracle::hhmm_oracle_error(rng), 1e-9) << "toy " << i;
}

TEST(Hhmm, LearnCountsRuns) {
  // Phase 0 owns steps 0,1; phase 1 owns step 2.
  const std::vector<std::size_t> sp{0, 0, 1};
  const auto symbols = learn_symbol_table(1, {});
  std::vector<HhmmSequence> seqs{
      {{0, 0, 1, 2, 2}, {0, 0, 0, 1, 1}, {1, 1, 0, 0, 0}},
      {{1, 2}, {0, 1}, {0, 1}},
  };
  const auto h = hhmm_learn(seqs, sp, 2, symbols);
  EXPECT_DOUBLE_EQ(h.phase_pi[0], 1.0);
  EXPECT_DOUBLE_EQ(h.phase_a(0, 1), 1.0);  // both surgeries leave phase 0 for phase 1
  EXPECT_DOUBLE_EQ(h.phase_end[1], 1.0);
  EXPECT_DOUBLE_EQ(h.child_pi[0], 0.5);
  EXPECT_DOUBLE_EQ(h.child_pi[1], 0.5);
  // Step 0: 0->0, 0->1; step 1: two exits; step 2: 2->2 and two exits.
  EXPECT_DOUBLE_EQ(h.child_a(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(h.child_a(0, 1), 0.5);
  EXPECT_DOUBLE_EQ(h.child_exit[1], 1.0);
  EXPECT_NEAR(h.child_a(2, 2), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(h.child_exit[2], 2.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(h.emission(0, 1), 1.0);
  EXPECT_NEAR(h.emission(2, 0), 2.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(hhmm_step_transition(h, 1, 2), 1.0);
  EXPECT_EQ(hhmm_from_json(hhmm_to_json(h)), h);

  std::vector<HhmmSequence> bad{{{2}, {0}, {}}};
  EXPECT_THROW(hhmm_learn(bad, sp, 2, symbols), ValidationError);
}

TEST(Hhmm, DegenerateRestart) {
  oracle::Rng rng(5);
  for (int tries = 0; tries < 200; ++tries) {
    const auto h = oracle::random_hhmm(rng);
    Vec unreachable(h.n_steps(), 0.0);
    for (std::size_t s = 0; s < h.n_steps(); ++s) {
      if (hhmm_step_transition(h, 0, s) == 0.0) unreachable[s] = 1.0;
    }
    if (sum(unreachable) == 0.0) continue;
    DecoderState st;
    Vec e(h.n_steps(), 0.0);
    e[0] = 1.0;
    hhmm_viterbi_step(h, st, e);
    DecoderState copy = st;
    EXPECT_THROW(hhmm_viterbi_step(h, copy, unreachable), DegenerateError);
    EXPECT_TRUE(hhmm_viterbi_step(h, st, unreachable, DegeneratePolicy::Restart).restarted);
    return;
  }
  FAIL() << "no toy with an unreachable step";
}
