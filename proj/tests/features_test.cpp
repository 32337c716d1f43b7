#include <gtest/gtest.h>

#include <random>

#include "surgflow/features.hpp"

using namespace surgflow;

TEST(MotionHistogram, BinsAndNormalizes) {
  const std::vector<FlowRecord> flows{
      {0, 10.0, 10.0, 4.0, 3.0},    // amplitude 5, direction sector 0
      {1, 90.0, 50.0, 0.0, -10.0},  // amplitude 10, direction sector 6
      {9, 50.0, 50.0, 1.0, 0.0},    // outside the window
  };
  const auto h = motion_histogram(flows, {1, 0, 4}, {100.0, 100.0}, 20.0);
  EXPECT_FALSE(h.zero_motion);
  EXPECT_DOUBLE_EQ(h.amplitude[2], 0.5);  // 5/20*8 = 2
  EXPECT_DOUBLE_EQ(h.amplitude[4], 0.5);  // 10/20*8 = 4
  EXPECT_NEAR(h.x_spatial[0], 5.0 / 15.0, 1e-12);
  EXPECT_NEAR(h.x_spatial[7], 10.0 / 15.0, 1e-12);
  EXPECT_NEAR(h.y_spatial[4], 10.0 / 15.0, 1e-12);
  EXPECT_NEAR(h.direction[0], 5.0 / 15.0, 1e-12);
  EXPECT_NEAR(h.direction[6], 10.0 / 15.0, 1e-12);
  EXPECT_EQ(h.to_vector().size(), kMotionHistogramDim);
}

TEST(MotionHistogram, EmptyWindowIsZeroMotion) {
  const auto h = motion_histogram({}, {1, 0, 4}, {10.0, 10.0}, 1.0);
  EXPECT_TRUE(h.zero_motion);
  EXPECT_EQ(h.amplitude[0], 1.0);
  EXPECT_EQ(h.direction[3], 0.0);
  EXPECT_THROW(motion_histogram({}, {1, 0, 4}, {10.0, 10.0}, 0.0), ValidationError);
}

TEST(MotionHistogram, AmplitudeOverflowGoesToTopBin) {
  const std::vector<FlowRecord> flows{{0, 1.0, 1.0, 100.0, 0.0}};
  EXPECT_EQ(motion_histogram(flows, {1, 0, 1}, {10.0, 10.0}, 5.0).amplitude[7], 1.0);
}

TEST(Bovw, DictionaryAndHistogram) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 0.05);
  std::vector<LocalDescriptor> d;
  for (int i = 0; i < 50; ++i) d.push_back({1, {n(rng), n(rng)}});
  for (int i = 0; i < 50; ++i) d.push_back({1, {5 + n(rng), 5 + n(rng)}});
  const auto dict = bovw_learn_dictionary(d, 2, 11);
  ASSERT_EQ(dict.size(), 2u);
  const auto h = bovw_histogram(d, dict);
  EXPECT_NEAR(h.histogram[0], 0.5, 1e-12);
  EXPECT_TRUE(bovw_histogram({}, dict).empty_window);
  EXPECT_THROW(bovw_learn_dictionary(std::span(d).first(1), 2, 1), InputError);
}

TEST(Knn, MatchesBruteForce) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  KnnIndex idx;
  idx.k = 7;
  idx.n_steps = 4;
  for (std::size_t i = 0; i < 300; ++i) idx.points.push_back({{u(rng), u(rng), u(rng)}, i % 4, i % 6});
  for (int q = 0; q < 40; ++q) {
    const Vec query{u(rng), u(rng), u(rng)};
    const std::optional<std::size_t> ex = q % 2 ? std::optional<std::size_t>(q % 6) : std::nullopt;
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < idx.points.size(); ++i) {
      if (ex && idx.points[i].group == *ex) continue;
      all.emplace_back(squared_distance(idx.points[i].feature, query), i);
    }
    std::sort(all.begin(), all.end());
    Vec expect(4, 0.0);
    for (std::size_t i = 0; i < 7; ++i) expect[idx.points[all[i].second].step] += 1.0 / 7.0;
    const auto nn = knn_neighbors(idx, query, ex);
    ASSERT_EQ(nn.size(), 7u);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(nn[i], all[i].second);
    const auto p = knn_step_probs(idx, query, ex);
    for (std::size_t s = 0; s < 4; ++s) EXPECT_NEAR(p[s], expect[s], 1e-12);
  }
}

TEST(Knn, JsonRoundtripAndValidation) {
  KnnIndex idx{{{{0.0, 1.0}, 1, 0}, {{1.0, 0.0}, 0, 1}}, 2, 2};
  const auto back = knn_from_json(knn_to_json(idx));
  EXPECT_EQ(back.points.size(), 2u);
  EXPECT_EQ(back.points[0].feature, idx.points[0].feature);
  EXPECT_EQ(back.k, 2u);
  idx.k = 3;
  EXPECT_THROW(idx.validate(), ValidationError);
  EXPECT_THROW(knn_from_json(json{{"format", "x"}}), ParseError);
}

TEST(FlowStream, ParseAndWindow) {
  const std::string text =
      "{\"type\":\"flow_header\",\"width\":10,\"height\":10}\n"
      "{\"frame\":0,\"x\":1,\"y\":1,\"dx\":1,\"dy\":0}\n"
      "{\"frame\":3,\"x\":9,\"y\":9,\"dx\":0,\"dy\":1}\n";
  const auto fs = parse_flow_stream(text);
  EXPECT_EQ(fs.records.size(), 2u);
  const auto obs = observations_from_flows(fs, 6, {2.0, 1.0, 2.0}, 4.0);
  ASSERT_EQ(obs.size(), 2u);
  EXPECT_EQ(obs[0].feature->size(), kMotionHistogramDim);
  EXPECT_THROW(parse_flow_stream("{\"frame\":0}\n"), ParseError);
  EXPECT_THROW(parse_flow_stream(text + "{\"frame\":1,\"x\":11,\"y\":1,\"dx\":0,\"dy\":0}\n"), ParseError);
}

TEST(DescriptorStream, ChecksDimension) {
  const std::string ok = "{\"type\":\"descriptor_header\",\"dim\":2}\n{\"window_index\":1,\"vector\":[1,2]}\n";
  EXPECT_EQ(parse_descriptor_stream(ok).descriptors.size(), 1u);
  EXPECT_THROW(parse_descriptor_stream(ok + "{\"window_index\":1,\"vector\":[1]}\n"), ParseError);
}
