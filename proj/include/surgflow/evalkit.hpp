// Cross-validation protocol: fold splits, per-label ROC / AUC, A_z
// aggregation, grid search and throughput measurement.
#pragma once

#include <chrono>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "surgflow/common.hpp"
#include "surgflow/dataset.hpp"
#include "surgflow/recognizer.hpp"

namespace surgflow {

using nlohmann::json;

struct FoldSplit {
  std::vector<std::string> ids;
  std::vector<std::size_t> fold_of;  // aligned with ids
  std::size_t k = 0;

  std::vector<std::string> test_ids(std::size_t f) const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (fold_of[i] == f) out.push_back(ids[i]);
    }
    return out;
  }
  std::vector<std::string> train_ids(std::size_t f) const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (fold_of[i] != f) out.push_back(ids[i]);
    }
    return out;
  }
};

/// Seeded shuffle, then round-robin assignment; fold sizes differ by at most 1.
inline FoldSplit kfold_split(const std::vector<std::string>& ids, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("need at least 2 folds");
  if (ids.size() < k) {
    throw InputError("fewer surgeries (" + std::to_string(ids.size()) + ") than folds (" + std::to_string(k) + ")");
  }
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i-- > 1;) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  FoldSplit split{ids, std::vector<std::size_t>(ids.size()), k};
  for (std::size_t r = 0; r < order.size(); ++r) split.fold_of[order[r]] = r % k;
  return split;
}

// ---------------------------------------------------------------------------
// ROC

struct RocCurve {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (fpr, tpr) from (0,0) to (1,1)
  double auc = 0.5;
};

/// Rank-sum statistic; tied scores contribute one half.
inline double mann_whitney_auc(std::span<const double> scores, const std::vector<bool>& truths) {
  if (scores.size() != truths.size()) throw ValidationError("scores and truths differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  double n_pos = 0.0, n_neg = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t r = i; r <= j; ++r) {
      if (truths[idx[r]]) {
        rank_sum += avg_rank;
        n_pos += 1.0;
      } else {
        n_neg += 1.0;
      }
    }
    i = j + 1;
  }
  if (n_pos == 0.0 || n_neg == 0.0) throw InputError("ROC needs at least one positive and one negative");
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

/// Threshold sweep over distinct scores, highest first; area by trapezoids.
inline RocCurve roc_auc(std::span<const double> scores, const std::vector<bool>& truths, std::string label = {}) {
  if (scores.size() != truths.size()) throw ValidationError("scores and truths differ in length");
  const double n_pos = static_cast<double>(std::count(truths.begin(), truths.end(), true));
  const double n_neg = static_cast<double>(truths.size()) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) throw InputError("ROC needs at least one positive and one negative");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  RocCurve c;
  c.label = std::move(label);
  c.points.emplace_back(0.0, 0.0);
  double tp = 0.0, fp = 0.0, area = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double fp0 = fp, tp0 = tp;
    for (std::size_t r = i; r <= j; ++r) (truths[idx[r]] ? tp : fp) += 1.0;
    area += (fp - fp0) * (tp + tp0) / 2.0;
    c.points.emplace_back(fp / n_neg, tp / n_pos);
    i = j + 1;
  }
  c.auc = area / (n_pos * n_neg);
  return c;
}

// ---------------------------------------------------------------------------
// A_z reports

struct LevelScores {
  std::vector<Vec> probs;             // per window
  std::vector<std::size_t> truths;    // per window
};

struct AzReport {
  std::vector<std::optional<double>> step_auc;   // nullopt: single-class, skipped
  std::vector<std::optional<double>> phase_auc;
  std::vector<RocCurve> step_curves, phase_curves;
  double az_steps = 0.0;
  double az_phases = 0.0;
  double az_mean = 0.0;
};

namespace detail {

inline double level_auc(const LevelScores& ls, const std::vector<std::string>& labels,
                        std::vector<std::optional<double>>& aucs, std::vector<RocCurve>& curves) {
  aucs.assign(labels.size(), std::nullopt);
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t l = 0; l < labels.size(); ++l) {
    Vec scores;
    std::vector<bool> truth;
    for (std::size_t t = 0; t < ls.probs.size(); ++t) {
      scores.push_back(ls.probs[t].at(l));
      truth.push_back(ls.truths[t] == l);
    }
    const auto n_pos = std::count(truth.begin(), truth.end(), true);
    if (n_pos == 0 || n_pos == static_cast<std::ptrdiff_t>(truth.size())) continue;
    curves.push_back(roc_auc(scores, truth, labels[l]));
    aucs[l] = curves.back().auc;
    total += *aucs[l];
    ++used;
  }
  return used ? total / static_cast<double>(used) : 0.5;
}

}  // namespace detail

inline AzReport az_report(const LevelScores& steps, const LevelScores& phases, const Taxonomy& tax) {
  AzReport r;
  r.az_steps = detail::level_auc(steps, tax.steps, r.step_auc, r.step_curves);
  r.az_phases = detail::level_auc(phases, tax.phases, r.phase_auc, r.phase_curves);
  r.az_mean = (r.az_steps + r.az_phases) / 2.0;
  return r;
}

struct EvaluationResult {
  PipelineConfig config;
  std::vector<AzReport> folds;
  double az_steps = 0.0;  // arithmetic means across folds
  double az_phases = 0.0;
  double az_mean = 0.0;
  std::vector<std::string> notes;
};

inline void pool_folds(EvaluationResult& r) {
  r.az_steps = r.az_phases = r.az_mean = 0.0;
  for (const auto& f : r.folds) {
    r.az_steps += f.az_steps;
    r.az_phases += f.az_phases;
    r.az_mean += f.az_mean;
  }
  const double k = static_cast<double>(r.folds.size());
  r.az_steps /= k;
  r.az_phases /= k;
  r.az_mean /= k;
}

/// Runs a trained pipeline over test surgeries and scores it.
inline AzReport score_pipeline(const TrainedModels& models, const std::vector<TrainingSurgery>& test) {
  for (const auto& s : test) {
    if (std::find(models.trained_on.begin(), models.trained_on.end(), s.id) != models.trained_on.end()) {
      throw LeakageError("test surgery '" + s.id + "' was used for training");
    }
  }
  LevelScores steps, phases;
  for (const auto& s : test) {
    Pipeline p(models);
    for (const auto& w : s.windows) {
      const auto post = p.consume_window(w);
      steps.probs.push_back(post.step_probs);
      steps.truths.push_back(detail::truth_step(w));
      phases.probs.push_back(post.phase_probs);
      phases.truths.push_back(detail::truth_phase(w));
    }
  }
  return az_report(steps, phases, models.taxonomy);
}

/// Cross-validates several pipeline configs on one split. Within a fold,
/// configs that agree on source and base settings share one trained base.
/// Every config must use the same window settings.
inline std::vector<EvaluationResult> evaluate_pipelines(const Dataset& ds, const std::vector<PipelineConfig>& cfgs,
                                                        const FoldSplit& split) {
  if (cfgs.empty()) throw InputError("no pipelines to evaluate");
  for (const auto& c : cfgs) {
    c.validate();
    if (!(c.window == cfgs.front().window)) throw ValidationError("evaluated configs must share window settings");
  }
  std::vector<EvaluationResult> out(cfgs.size());
  for (std::size_t i = 0; i < cfgs.size(); ++i) out[i].config = cfgs[i];
  for (std::size_t f = 0; f < split.k; ++f) {
    const auto train_ids = split.train_ids(f);
    const auto test_ids = split.test_ids(f);
    for (const auto& id : test_ids) {
      if (std::find(train_ids.begin(), train_ids.end(), id) != train_ids.end()) {
        throw LeakageError("surgery '" + id + "' is in both train and test sets");
      }
    }
    const auto train = training_set(ds, train_ids, cfgs.front().window);
    const auto test = training_set(ds, test_ids, cfgs.front().window);
    std::vector<BaseModels> bases;
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
      const json key = BaseModels::key_of(cfgs[i]);
      const BaseModels* base = nullptr;
      for (const auto& b : bases) {
        if (b.key == key) base = &b;
      }
      if (!base) {
        bases.push_back(train_base(ds.taxonomy, train, cfgs[i]));
        base = &bases.back();
      }
      const TrainedModels models = train_models(ds.taxonomy, train, cfgs[i], base);
      out[i].folds.push_back(score_pipeline(models, test));
    }
  }
  for (auto& r : out) pool_folds(r);
  return out;
}

inline EvaluationResult evaluate_pipeline(const Dataset& ds, const PipelineConfig& cfg, const FoldSplit& split) {
  return evaluate_pipelines(ds, {cfg}, split).front();
}

// ---------------------------------------------------------------------------
// Grid search

struct GridSearchSpec {
  std::vector<double> t_scale, t_shift;
  std::vector<std::size_t> k, n_obs;
  std::vector<double> t_hmm_steps, t_hmm_phases;
  std::vector<std::size_t> delta_t;
};

/// Cartesian product in declaration order, last axis fastest. Empty axes
/// keep the base value.
inline std::vector<PipelineConfig> expand_grid(const PipelineConfig& base, const GridSearchSpec& g) {
  std::vector<PipelineConfig> out{base};
  auto axis = [&](const auto& values, auto setter) {
    if (values.empty()) return;
    std::vector<PipelineConfig> next;
    for (const auto& c : out) {
      for (const auto& v : values) {
        PipelineConfig n = c;
        setter(n, v);
        next.push_back(n);
      }
    }
    out = std::move(next);
  };
  axis(g.t_scale, [](PipelineConfig& c, double v) { c.window.t_scale = v; });
  axis(g.t_shift, [](PipelineConfig& c, double v) { c.window.t_shift = v; });
  axis(g.k, [](PipelineConfig& c, std::size_t v) { c.knn_k = v; });
  axis(g.n_obs, [](PipelineConfig& c, std::size_t v) { c.knn_binning.n_obs = v; });
  axis(g.t_hmm_steps, [](PipelineConfig& c, double v) { c.t_hmm_steps = v; });
  axis(g.t_hmm_phases, [](PipelineConfig& c, double v) { c.t_hmm_phases = v; });
  axis(g.delta_t, [](PipelineConfig& c, std::size_t v) { c.delta_t = v; });
  return out;
}

struct GridSearchResult {
  PipelineConfig best;
  double best_score = 0.0;
  std::vector<std::pair<PipelineConfig, double>> table;
};

/// Scores each config by leave-one-surgery-out az_mean inside the training
/// surgeries. The first config in grid order wins ties.
inline GridSearchResult grid_search(const Dataset& ds, const std::vector<std::string>& train_ids,
                                    const PipelineConfig& base, const GridSearchSpec& spec) {
  if (train_ids.size() < 2) throw InputError("grid search needs at least 2 training surgeries");
  const auto grid = expand_grid(base, spec);
  GridSearchResult res;
  bool have = false;
  for (const auto& cfg : grid) {
    cfg.validate();
    double total = 0.0;
    for (std::size_t held = 0; held < train_ids.size(); ++held) {
      std::vector<std::string> inner;
      for (std::size_t i = 0; i < train_ids.size(); ++i) {
        if (i != held) inner.push_back(train_ids[i]);
      }
      const auto models = train_models(ds.taxonomy, training_set(ds, inner, cfg.window), cfg);
      total += score_pipeline(models, training_set(ds, {train_ids[held]}, cfg.window)).az_mean;
    }
    const double score = total / static_cast<double>(train_ids.size());
    res.table.emplace_back(cfg, score);
    if (!have || score > res.best_score) {
      res.best = cfg;
      res.best_score = score;
      have = true;
    }
  }
  return res;
}

inline GridSearchSpec grid_spec_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("grid spec must be a JSON object");
  GridSearchSpec g;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "t_scale") g.t_scale = v.get<std::vector<double>>();
      else if (key == "t_shift") g.t_shift = v.get<std::vector<double>>();
      else if (key == "k") g.k = v.get<std::vector<std::size_t>>();
      else if (key == "n_obs") g.n_obs = v.get<std::vector<std::size_t>>();
      else if (key == "t_hmm_steps") g.t_hmm_steps = v.get<std::vector<double>>();
      else if (key == "t_hmm_phases") g.t_hmm_phases = v.get<std::vector<double>>();
      else if (key == "delta_t") g.delta_t = v.get<std::vector<std::size_t>>();
      else throw ValidationError("unknown grid axis '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("grid spec: ") + e.what());
  }
  return g;
}

/// Cross-validation where every fold first picks each pipeline's config by
/// grid search on its own training surgeries. The chosen configs are listed
/// in the result notes; `config` keeps the base.
inline std::vector<EvaluationResult> evaluate_with_grid(const Dataset& ds, const std::vector<PipelineConfig>& cfgs,
                                                        const FoldSplit& split, const GridSearchSpec& grid) {
  std::vector<EvaluationResult> out(cfgs.size());
  for (std::size_t i = 0; i < cfgs.size(); ++i) out[i].config = cfgs[i];
  for (std::size_t f = 0; f < split.k; ++f) {
    const auto train_ids = split.train_ids(f);
    const auto test_ids = split.test_ids(f);
    for (std::size_t i = 0; i < cfgs.size(); ++i) {
      const auto gs = grid_search(ds, train_ids, cfgs[i], grid);
      out[i].notes.push_back("fold " + std::to_string(f) + ": " + config_to_json(gs.best).dump());
      const auto models = train_models(ds.taxonomy, training_set(ds, train_ids, gs.best.window), gs.best);
      out[i].folds.push_back(score_pipeline(models, training_set(ds, test_ids, gs.best.window)));
    }
  }
  for (auto& r : out) pool_folds(r);
  return out;
}

// ---------------------------------------------------------------------------
// Throughput

struct ThroughputReport {
  std::size_t windows = 0;
  std::size_t frames = 0;
  double seconds = 0.0;
  double frames_per_second = 0.0;
  double windows_per_second = 0.0;
  bool short_stream = false;  // fewer than 100 windows
};

/// Single-threaded wall clock over consume_window calls, BN memo off.
inline ThroughputReport measure_throughput(const TrainedModels& models, const std::vector<ObservationRecord>& stream) {
  if (stream.empty()) throw InputError("empty stream");
  std::vector<std::shared_ptr<BnEngine>> engines;
  for (const auto& e : {models.bn, models.bn_feedback}) {
    if (e) {
      e->set_cache(false);
      engines.push_back(e);
    }
  }
  Pipeline p(models);
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& w : stream) p.consume_window(w);
  const auto t1 = std::chrono::steady_clock::now();
  for (const auto& e : engines) e->set_cache(true);
  ThroughputReport r;
  r.windows = stream.size();
  r.frames = stream.back().window.end_frame - stream.front().window.start_frame + 1;
  r.seconds = std::chrono::duration<double>(t1 - t0).count();
  r.frames_per_second = static_cast<double>(r.frames) / std::max(r.seconds, 1e-12);
  r.windows_per_second = static_cast<double>(r.windows) / std::max(r.seconds, 1e-12);
  r.short_stream = stream.size() < 100;
  return r;
}

// ---------------------------------------------------------------------------
// Report emission

inline json az_report_to_json(const AzReport& r, const Taxonomy& tax) {
  json steps = json::object(), phases = json::object();
  for (std::size_t s = 0; s < tax.n_steps(); ++s) {
    steps[tax.steps[s]] = r.step_auc[s] ? json(*r.step_auc[s]) : json(nullptr);
  }
  for (std::size_t p = 0; p < tax.n_phases(); ++p) {
    phases[tax.phases[p]] = r.phase_auc[p] ? json(*r.phase_auc[p]) : json(nullptr);
  }
  return {{"az_steps", r.az_steps}, {"az_phases", r.az_phases}, {"az_mean", r.az_mean},
          {"step_auc", steps}, {"phase_auc", phases}};
}

inline json evaluation_to_json(const EvaluationResult& r, const Taxonomy& tax) {
  json folds = json::array();
  for (const auto& f : r.folds) folds.push_back(az_report_to_json(f, tax));
  return {{"config", config_to_json(r.config)},
          {"az_steps", r.az_steps},
          {"az_phases", r.az_phases},
          {"az_mean", r.az_mean},
          {"folds", folds},
          {"notes", r.notes}};
}

inline AzReport az_report_from_json(const json& j, const Taxonomy& tax) {
  AzReport r;
  r.az_steps = j.at("az_steps").get<double>();
  r.az_phases = j.at("az_phases").get<double>();
  r.az_mean = j.at("az_mean").get<double>();
  auto level = [](const json& m, const std::vector<std::string>& labels) {
    std::vector<std::optional<double>> out(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto& v = m.at(labels[i]);
      if (!v.is_null()) out[i] = v.get<double>();
    }
    return out;
  };
  r.step_auc = level(j.at("step_auc"), tax.steps);
  r.phase_auc = level(j.at("phase_auc"), tax.phases);
  return r;
}

/// Inverse of evaluation_to_json, without ROC curves.
inline EvaluationResult evaluation_from_json(const json& j, const Taxonomy& tax) {
  try {
    EvaluationResult r;
    r.config = config_from_json(j.at("config"));
    r.az_steps = j.at("az_steps").get<double>();
    r.az_phases = j.at("az_phases").get<double>();
    r.az_mean = j.at("az_mean").get<double>();
    for (const auto& f : j.at("folds")) r.folds.push_back(az_report_from_json(f, tax));
    r.notes = j.value("notes", std::vector<std::string>{});
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("evaluation: ") + e.what());
  }
}

/// One row per (fold, level, label); skipped labels have an empty auc.
inline std::string per_label_csv(const EvaluationResult& r, const Taxonomy& tax) {
  std::string out = "pipeline,source,fold,level,label,auc\n";
  char buf[64];
  const std::string prefix = std::string(to_string(r.config.kind)) + "," + to_string(r.config.source) + ",";
  for (std::size_t f = 0; f < r.folds.size(); ++f) {
    auto emit = [&](const char* level, const std::vector<std::string>& labels,
                    const std::vector<std::optional<double>>& aucs) {
      for (std::size_t l = 0; l < labels.size(); ++l) {
        out += prefix + std::to_string(f) + "," + level + ",\"" + labels[l] + "\",";
        if (aucs[l]) {
          std::snprintf(buf, sizeof buf, "%.6f", *aucs[l]);
          out += buf;
        }
        out += "\n";
      }
    };
    emit("step", tax.steps, r.folds[f].step_auc);
    emit("phase", tax.phases, r.folds[f].phase_auc);
  }
  return out;
}

/// Markdown table: one column per pipeline, rows A_z steps / phases / mean
/// and frames per second when known.
inline std::string markdown_table(const std::vector<EvaluationResult>& results,
                                  const std::vector<std::optional<double>>& fps = {}) {
  std::string out = "| |";
  std::string sep = "|---|";
  for (const auto& r : results) {
    out += " " + std::string(to_string(r.config.kind)) + " (" + to_string(r.config.source) + ") |";
    sep += "---|";
  }
  out += "\n" + sep + "\n";
  char buf[64];
  auto row = [&](const char* name, auto get) {
    out += std::string("| ") + name + " |";
    for (std::size_t i = 0; i < results.size(); ++i) {
      const std::optional<double> v = get(i);
      if (v) {
        std::snprintf(buf, sizeof buf, " %.3f |", *v);
        out += buf;
      } else {
        out += " n/a |";
      }
    }
    out += "\n";
  };
  row("A_z steps", [&](std::size_t i) { return std::optional<double>(results[i].az_steps); });
  row("A_z phases", [&](std::size_t i) { return std::optional<double>(results[i].az_phases); });
  row("A_z mean", [&](std::size_t i) { return std::optional<double>(results[i].az_mean); });
  if (!fps.empty()) {
    row("frames/s", [&](std::size_t i) { return i < fps.size() ? fps[i] : std::nullopt; });
  }
  return out;
}

/// Minimal SVG plot of ROC curves.
inline std::string roc_svg(const std::vector<RocCurve>& curves, const std::string& title) {
  const double size = 360.0, pad = 40.0;
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\">\n",
                size + 2 * pad, size + 2 * pad);
  out += buf;
  out += "<title>" + title + "</title>\n";
  std::snprintf(buf, sizeof buf, "<rect x=\"%.0f\" y=\"%.0f\" width=\"%.0f\" height=\"%.0f\" fill=\"none\" stroke=\"black\"/>\n",
                pad, pad, size, size);
  out += buf;
  std::snprintf(buf, sizeof buf, "<line x1=\"%.0f\" y1=\"%.0f\" x2=\"%.0f\" y2=\"%.0f\" stroke=\"#bbb\"/>\n",
                pad, pad + size, pad + size, pad);
  out += buf;
  for (std::size_t i = 0; i < curves.size(); ++i) {
    out += "<polyline fill=\"none\" stroke=\"hsl(" + std::to_string((i * 47) % 360) + ",70%,40%)\" points=\"";
    for (const auto& [fx, ty] : curves[i].points) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", pad + fx * size, pad + size - ty * size);
      out += buf;
    }
    out += "\"><title>" + curves[i].label + "</title></polyline>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace surgflow
