#include <gtest/gtest.h>

#include "oracles.hpp"
#include "surgflow/bayesnet.hpp"

using namespace surgflow;

namespace {

Taxonomy tiny() {
  return parse_taxonomy("[phases]\nA\nB\n[steps]\na1 = A\na2 = A\nb1 = B\n[tools]\nT\nU\n");
}

std::vector<BnTrainingWindow> tiny_windows(const BnStructure& st) {
  // step a1 x3 (T on twice), a2 x1 (U on), b1 x2 (T on once, U on once)
  auto w = [&](std::size_t step, std::size_t phase, bool t, bool u) {
    return BnTrainingWindow{step, phase, {{st.tool_nodes[0], t}, {st.tool_nodes[1], u}}};
  };
  return {w(0, 0, true, false), w(0, 0, true, false), w(0, 0, false, false),
          w(1, 0, false, true), w(2, 1, true, false), w(2, 1, false, true)};
}

}  // namespace

TEST(EvidenceBinning, EqualWidthLastBinClosed) {
  const EvidenceBinning b{5};
  EXPECT_EQ(b.bin_of(0.0), 0u);
  EXPECT_EQ(b.bin_of(0.2), 1u);
  EXPECT_EQ(b.bin_of(0.19999), 0u);
  EXPECT_EQ(b.bin_of(1.0), 4u);
  EXPECT_EQ(b.bin_of(-3.0), 0u);
  EXPECT_THROW(EvidenceBinning{1}.validate(), ValidationError);
}

TEST(BnStructure, WiringShapes) {
  const auto tax = tiny();
  const auto tools = wire_tool_evidence(tax);
  EXPECT_EQ(tools.size(), 2u + 3u + 2u);
  auto knn = wire_knn_evidence(tax, {4});
  EXPECT_EQ(knn.n_observation_nodes(), 12u);
  EXPECT_EQ(knn.nodes[knn.knn_nodes[2 * 4 + 3]].parents, std::vector<std::size_t>{knn.step_node(2)});
  add_phase_feedback(knn, {3});
  EXPECT_EQ(knn.n_observation_nodes(), 18u);
  EXPECT_THROW(add_phase_feedback(knn, {3}), ValidationError);
  BnEvidence ev;
  add_feedback_evidence(knn, Vec{0.9, 0.1}, ev);
  EXPECT_TRUE(ev.at(knn.feedback_nodes[0 * 3 + 2]));
  EXPECT_TRUE(ev.at(knn.feedback_nodes[1 * 3 + 0]));
  EXPECT_FALSE(ev.at(knn.feedback_nodes[0 * 3 + 0]));
}

TEST(BnStructure, RejectsCycles) {
  auto st = wire_tool_evidence(tiny());
  st.nodes[0].parents = {2};  // phase A <- step a1 <- phase A
  EXPECT_THROW(st.validate(), ValidationError);
}

TEST(LearnCpts, FrequencyCounts) {
  const auto st = wire_tool_evidence(tiny());
  const auto windows = tiny_windows(st);
  const auto m = learn_cpts(st, windows);
  const auto& ms = m.structure;
  // Tool T co-occurred with steps a1 and b1; U with a2 and b1.
  EXPECT_EQ(ms.nodes[ms.tool_nodes[0]].parents, (std::vector<std::size_t>{ms.step_node(0), ms.step_node(2)}));
  EXPECT_EQ(ms.nodes[ms.tool_nodes[1]].parents, (std::vector<std::size_t>{ms.step_node(1), ms.step_node(2)}));
  // P(T | a1 only) = 2/3, P(T | b1 only) = 1/2, P(T | none) = 0 (step a2 windows).
  const auto& cT = m.cpts[ms.tool_nodes[0]];
  EXPECT_NEAR(cT.p_true(0b01), 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(cT.p_true(0b10), 0.5, 1e-12);
  EXPECT_NEAR(cT.p_true(0b00), 0.0, 1e-12);
  // P(phase A) = 4/6.
  EXPECT_NEAR(m.cpts[0].p_true(0), 4.0 / 6.0, 1e-12);
  // P(a1 | A) = 3/4.
  EXPECT_NEAR(m.cpts[ms.step_node(0)].p_true(1), 0.75, 1e-12);
  // Smoothing: (2+1)/(3+2).
  const auto ms2 = learn_cpts(st, windows, {true});
  EXPECT_NEAR(ms2.cpts[ms2.structure.tool_nodes[0]].p_true(0b01), 0.6, 1e-12);
}

TEST(LearnCpts, NoisyOrFillForUnseenConfigs) {
  Cpt c;
  c.n_parents = 2;
  c.fill = Cpt::Fill::NoisyOr;
  c.rows = {{0, 1, 0.1}, {1, 1, 0.5}, {2, 1, 0.4}};
  // q0 = 0.9, q1 = 0.5/0.9, q2 = 0.6/0.9 -> 1 - 0.9 * (5/9) * (6/9)
  EXPECT_NEAR(c.p_true(3), 1.0 - 0.9 * (0.5 / 0.9) * (0.6 / 0.9), 1e-12);
}

TEST(LearnCpts, RejectsMissingPhase) {
  const auto st = wire_tool_evidence(tiny());
  std::vector<BnTrainingWindow> w{{0, 0, {}}};
  EXPECT_THROW(learn_cpts(st, w), InputError);
  EXPECT_THROW(learn_cpts(st, std::vector<BnTrainingWindow>{}), InputError);
}

TEST(Gibbs, MatchesExactOnRandomNetworks) {
  oracle::Rng rng(17);
  for (int i = 0; i < 8; ++i) {
    const auto toy = oracle::random_bn(rng);
    EXPECT_LT(oracle::gibbs_error(toy, {20000, 2000, static_cast<std::uint64_t>(i)}), 0.02) << "network " << i;
  }
}

TEST(Gibbs, DeterministicForSeed) {
  oracle::Rng rng(2);
  const auto toy = oracle::random_bn(rng);
  const auto a = gibbs_infer(toy.model, toy.evidence, {500, 50, 9});
  const auto b = gibbs_infer(toy.model, toy.evidence, {500, 50, 9});
  EXPECT_EQ(a.node_true, b.node_true);
  EXPECT_TRUE(is_distribution(a.step_probs, 1e-9));
  EXPECT_TRUE(is_distribution(a.phase_probs, 1e-9));
}

TEST(Gibbs, RejectsEvidenceOnLabels) {
  oracle::Rng rng(4);
  const auto toy = oracle::random_bn(rng);
  EXPECT_THROW(gibbs_infer(toy.model, {{0, true}}, {}), ValidationError);
}

TEST(ExactInfer, NoEvidenceGivesPriors) {
  const auto st = wire_tool_evidence(tiny());
  const auto m = learn_cpts(st, tiny_windows(st));
  const auto post = exact_infer(m, {});
  EXPECT_NEAR(post.node_true[0], 4.0 / 6.0, 1e-12);
  EXPECT_NEAR(post.node_true[m.structure.step_node(0)], 4.0 / 6.0 * 0.75, 1e-12);
}

TEST(BnSerialization, Roundtrip) {
  const auto st = wire_tool_evidence(tiny());
  const auto m = learn_cpts(st, tiny_windows(st));
  const auto back = bn_from_json(bn_to_json(m));
  EXPECT_EQ(back, m);
  EXPECT_EQ(bn_to_json(back).dump(), bn_to_json(m).dump());
}
