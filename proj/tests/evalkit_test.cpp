#include <gtest/gtest.h>

#include <random>
#include <set>

#include "fixtures.hpp"

using namespace surgflow;

namespace {

double brute_auc(const Vec& s, const std::vector<bool>& y) {
  double num = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!y[i] || y[j]) continue;
      pairs += 1.0;
      num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return num / pairs;
}

}  // namespace

TEST(Kfold, ThirtyIntoSixFoldsOfFive) {
  std::vector<std::string> ids;
  for (int i = 0; i < 30; ++i) ids.push_back("S" + std::to_string(i));
  const auto split = kfold_split(ids, 6, 42);
  std::set<std::string> seen;
  for (std::size_t f = 0; f < 6; ++f) {
    const auto test = split.test_ids(f);
    EXPECT_EQ(test.size(), 5u);
    EXPECT_EQ(split.train_ids(f).size(), 25u);
    seen.insert(test.begin(), test.end());
  }
  EXPECT_EQ(seen.size(), 30u);
  EXPECT_EQ(kfold_split(ids, 6, 42).fold_of, split.fold_of);
  EXPECT_NE(kfold_split(ids, 6, 43).fold_of, split.fold_of);
  EXPECT_THROW(kfold_split(ids, 31, 1), InputError);
  EXPECT_THROW(kfold_split(ids, 1, 1), ValidationError);
}

TEST(Roc, TrapezoidEqualsMannWhitney) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> coarse(0, 9);
  for (int rep = 0; rep < 50; ++rep) {
    Vec s;
    std::vector<bool> y;
    for (int i = 0; i < 60; ++i) {
      s.push_back(coarse(rng) / 10.0);  // many ties
      y.push_back(coarse(rng) < 4);
    }
    if (std::count(y.begin(), y.end(), true) == 0) y[0] = true;
    if (std::count(y.begin(), y.end(), false) == 0) y[0] = false;
    const double ref = brute_auc(s, y);
    EXPECT_NEAR(roc_auc(s, y).auc, ref, 1e-12);
    EXPECT_NEAR(mann_whitney_auc(s, y), ref, 1e-12);
  }
}

TEST(Roc, CurveEndpointsAndErrors) {
  const auto c = roc_auc(Vec{0.9, 0.8, 0.1}, {true, false, false});
  EXPECT_EQ(c.points.front(), (std::pair<double, double>{0.0, 0.0}));
  EXPECT_EQ(c.points.back(), (std::pair<double, double>{1.0, 1.0}));
  EXPECT_DOUBLE_EQ(c.auc, 1.0);
  EXPECT_THROW(roc_auc(Vec{0.1, 0.2}, {true, true}), InputError);
}

TEST(AzReport, SingleClassLabelsAreSkipped) {
  const auto tax = parse_taxonomy("[phases]\nA\nB\n[steps]\na1 = A\na2 = A\nb1 = B\n[tools]\nT\n");
  LevelScores steps{{{0.8, 0.1, 0.1}, {0.2, 0.7, 0.1}, {0.6, 0.3, 0.1}}, {0, 1, 0}};
  LevelScores phases{{{0.9, 0.1}, {0.8, 0.2}, {0.7, 0.3}}, {0, 0, 0}};
  const auto r = az_report(steps, phases, tax);
  EXPECT_TRUE(r.step_auc[0].has_value());
  EXPECT_FALSE(r.step_auc[2].has_value());  // b1 never true
  EXPECT_DOUBLE_EQ(r.az_steps, 1.0);
  EXPECT_FALSE(r.phase_auc[0].has_value());
  EXPECT_DOUBLE_EQ(r.az_phases, 0.5);  // nothing scorable
  const auto back = az_report_from_json(az_report_to_json(r, tax), tax);
  EXPECT_EQ(back.step_auc, r.step_auc);
  EXPECT_DOUBLE_EQ(back.az_mean, r.az_mean);
}

TEST(Grid, ExpandsCartesianProductLastAxisFastest) {
  GridSearchSpec g;
  g.k = {3, 5};
  g.t_hmm_steps = {1.0, 2.0, 3.0};
  const auto grid = expand_grid(PipelineConfig{}, g);
  ASSERT_EQ(grid.size(), 6u);
  EXPECT_EQ(grid[0].knn_k, 3u);
  EXPECT_EQ(grid[1].t_hmm_steps, 2.0);
  EXPECT_EQ(grid[3].knn_k, 5u);
  EXPECT_EQ(expand_grid(PipelineConfig{}, {}).size(), 1u);
  const auto parsed = grid_spec_from_json(json{{"k", {3, 5}}, {"delta_t", {0, 1}}});
  EXPECT_EQ(parsed.k, (std::vector<std::size_t>{3, 5}));
  EXPECT_THROW(grid_spec_from_json(json{{"alpha", {1}}}), ValidationError);
}

TEST(Scoring, DetectsLeakage) {
  const auto& ds = fixture::clean_dataset();
  const auto cfg = fixture::fast_config(PipelineKind::Hhmm);
  const auto train = training_set(ds, fixture::first_ids(ds, 3), cfg.window);
  const auto models = train_models(ds.taxonomy, train, cfg);
  EXPECT_THROW(score_pipeline(models, training_set(ds, {ds.ids()[0]}, cfg.window)), LeakageError);
  EXPECT_NO_THROW(score_pipeline(models, training_set(ds, {ds.ids()[4]}, cfg.window)));
}

TEST(Evaluation, SharedBasesMatchSeparateRuns) {
  const auto& ds = fixture::clean_dataset();
  const auto split = kfold_split(ds.ids(), 3, 1);
  const std::vector<PipelineConfig> cfgs{fixture::fast_config(PipelineKind::BnHmm),
                                         fixture::fast_config(PipelineKind::BnCrf)};
  const auto together = evaluate_pipelines(ds, cfgs, split);
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    const auto alone = evaluate_pipeline(ds, cfgs[i], split);
    EXPECT_DOUBLE_EQ(together[i].az_mean, alone.az_mean);
  }
  EXPECT_GT(together[0].az_mean, 0.9);
}

TEST(Evaluation, JsonRoundtripAndReports) {
  const auto& ds = fixture::clean_dataset();
  const auto split = kfold_split(ds.ids(), 2, 3);
  auto r = evaluate_pipeline(ds, fixture::fast_config(PipelineKind::Hhmm), split);
  r.notes.push_back("hello");
  const auto j = evaluation_to_json(r, ds.taxonomy);
  const auto back = evaluation_from_json(j, ds.taxonomy);
  EXPECT_EQ(back.config, r.config);
  EXPECT_EQ(back.notes, r.notes);
  EXPECT_EQ(back.folds.size(), 2u);
  EXPECT_DOUBLE_EQ(back.az_mean, r.az_mean);
  EXPECT_EQ(evaluation_to_json(back, ds.taxonomy).dump(), j.dump());

  const auto csv = per_label_csv(r, ds.taxonomy);
  EXPECT_EQ(csv.rfind("pipeline,source,fold,level,label,auc\n", 0), 0u);
  const auto md = markdown_table({r}, {});
  EXPECT_NE(md.find("hhmm"), std::string::npos);
  const auto svg = roc_svg(r.folds[0].step_curves, "steps");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
}

TEST(Evaluation, ThroughputReport) {
  const auto& ds = fixture::clean_dataset();
  const auto cfg = fixture::fast_config(PipelineKind::BnHmm);
  const auto models = train_models(ds.taxonomy, training_set(ds, fixture::first_ids(ds, 5), cfg.window), cfg);
  const auto stream = build_observations(ds.surgeries.back(), ds.taxonomy, cfg.window);
  const auto r = measure_throughput(models, stream);
  EXPECT_EQ(r.windows, stream.size());
  EXPECT_EQ(r.frames, stream.back().window.end_frame + 1);
  EXPECT_GT(r.frames_per_second, 0.0);
  EXPECT_THROW(measure_throughput(models, {}), InputError);
}

TEST(Evaluation, GridSearchPicksFromGrid) {
  const auto& ds = fixture::clean_dataset();
  GridSearchSpec g;
  g.t_hmm_steps = {1.0, 3.0};
  const auto r = grid_search(ds, fixture::first_ids(ds, 3), fixture::fast_config(PipelineKind::BnHmm), g);
  EXPECT_EQ(r.table.size(), 2u);
  EXPECT_TRUE(r.best.t_hmm_steps == 1.0 || r.best.t_hmm_steps == 3.0);
  EXPECT_THROW(grid_search(ds, fixture::first_ids(ds, 1), PipelineConfig{}, g), InputError);
}
