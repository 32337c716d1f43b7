// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// if any fails. Pass criterion numbers as arguments to run a subset.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "surgflow/surgflow.hpp"

using namespace surgflow;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<PipelineConfig> every_pipeline() {
  std::vector<PipelineConfig> out;
  for (auto src : {ObservationSource::Tools, ObservationSource::MotionKnn}) {
    for (auto k : {PipelineKind::BnHmm, PipelineKind::BnHmmFeedback, PipelineKind::BnCrf, PipelineKind::Hhmm}) {
      PipelineConfig c;
      c.kind = k;
      c.source = src;
      out.push_back(c);
    }
  }
  return out;
}

std::string name(const PipelineConfig& c) { return std::string(to_string(c.kind)) + "/" + to_string(c.source); }

const Dataset& noisy30() {
  static const Dataset ds = generate_dataset(bundled_spec("noisy"), 30, 7);
  return ds;
}

// Noisy-world evaluation shared by criteria 5 and 6.
struct NoisyRuns {
  std::vector<EvaluationResult> tools, motion;
};

const NoisyRuns& noisy_runs() {
  static const NoisyRuns runs = [] {
    const auto& ds = noisy30();
    const auto split = kfold_split(ds.ids(), 6, 1);
    NoisyRuns r;
    std::vector<PipelineConfig> cfgs;
    for (auto k : {PipelineKind::BnCrf, PipelineKind::BnHmm, PipelineKind::Hhmm, PipelineKind::BnHmmFeedback}) {
      PipelineConfig c;
      c.kind = k;
      cfgs.push_back(c);
    }
    r.tools = evaluate_pipelines(ds, cfgs, split);
    cfgs.pop_back();
    for (auto& c : cfgs) c.source = ObservationSource::MotionKnn;
    r.motion = evaluate_pipelines(ds, cfgs, split);
    return r;
  }();
  return runs;
}

// ---------------------------------------------------------------------------

Outcome decoders() {
  const auto t0 = Clock::now();
  oracle::Rng rng(101);
  double worst = 0.0;
  std::size_t mismatches = 0;
  for (int i = 0; i < 50; ++i) {
    for (double e : {oracle::hmm_oracle_error(rng, 8), oracle::hhmm_oracle_error(rng, 8),
                     oracle::crf_oracle_error(rng, 8)}) {
      if (!std::isfinite(e)) ++mismatches;
      else worst = std::max(worst, e);
    }
  }
  const double secs = since(t0);
  return {mismatches == 0 && worst < 1e-9 && secs < 60.0,
          fmt("150 toys, argmax mismatches %zu, max score error %.2e, %.1fs", mismatches, worst, secs)};
}

Outcome gibbs() {
  const auto t0 = Clock::now();
  oracle::Rng rng(202);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto toy = oracle::random_bn(rng);
    worst = std::max(worst, oracle::gibbs_error(toy, {20000, 2000, static_cast<std::uint64_t>(i)}));
  }
  const double secs = since(t0);
  return {worst <= 0.02 && secs < 120.0, fmt("20 networks, max abs error %.4f, %.1fs", worst, secs)};
}

Outcome crf_training() {
  oracle::Rng rng(303);
  double worst_grad = 0.0;
  std::size_t bad_traces = 0, traces = 0;
  for (int rep = 0; rep < 8; ++rep) {
    for (auto u : {FeatureMap::Unary::Tied, FeatureMap::Unary::PerLabel}) {
      for (auto p : {FeatureMap::Pairwise::Tied, FeatureMap::Pairwise::PerPair}) {
        const std::size_t n = oracle::uniform_int(rng, 2, 4);
        Matrix transition;
        const auto data = oracle::random_crf_data(rng, n, 3, oracle::uniform_int(rng, 2, 8), &transition);
        FeatureMap fm;
        fm.n_labels = n;
        fm.unary = u;
        fm.pairwise = p;
        fm.label_bias = rep % 2 == 1;
        fm.transition_bias = rep % 4 >= 2;
        Vec w(fm.dim());
        for (double& x : w) x = oracle::uniform(rng, -1.0, 2.0);
        auto f = [&](std::span<const double> x, std::span<double> g) { return crf_objective(fm, x, data, 0.1, g); };
        worst_grad = std::max(worst_grad, oracle::gradient_error(f, w));

        const auto trained = train_lbfgs(fm, data, transition, 0, CrfTrainOptions{0.1, {}});
        const auto& tr = trained.optimizer.trace;
        ++traces;
        for (std::size_t i = 1; i < tr.size(); ++i) {
          if (tr[i].objective > tr[i - 1].objective) {
            ++bad_traces;
            break;
          }
        }
      }
    }
  }
  return {worst_grad < 1e-4 && bad_traces == 0,
          fmt("max relative gradient error %.2e, %zu of %zu L-BFGS traces non-monotone", worst_grad, bad_traces,
              traces)};
}

Outcome clean_recovery() {
  const auto t0 = Clock::now();
  const auto ds = generate_dataset(bundled_spec("clean"), 30, 7);
  const auto split = kfold_split(ds.ids(), 6, 1);
  PipelineConfig crf, hmm;
  crf.kind = PipelineKind::BnCrf;
  hmm.kind = PipelineKind::BnHmm;
  const auto res = evaluate_pipelines(ds, {crf, hmm}, split);
  const double secs = since(t0);
  return {res[0].az_mean > 0.99 && res[1].az_mean > 0.99 && secs < 600.0,
          fmt("bn_crf az_mean %.4f, bn_hmm az_mean %.4f, %.1fs", res[0].az_mean, res[1].az_mean, secs)};
}

Outcome noisy_ordering() {
  const auto& r = noisy_runs();
  bool ok = true;
  std::string detail;
  auto check = [&](const std::vector<EvaluationResult>& v, const char* src) {
    const auto &crf = v[0], &hmm = v[1], &hh = v[2];
    std::size_t hold = 0;
    for (std::size_t f = 0; f < crf.folds.size(); ++f) {
      if (crf.folds[f].az_mean >= hmm.folds[f].az_mean && hmm.folds[f].az_mean > hh.folds[f].az_mean) ++hold;
    }
    const bool pooled = crf.az_mean >= hmm.az_mean && hmm.az_mean > hh.az_mean;
    ok = ok && pooled && hold >= 5;
    detail += fmt("%s crf %.4f hmm %.4f hhmm %.4f (%zu/6 folds); ", src, crf.az_mean, hmm.az_mean, hh.az_mean, hold);
  };
  check(r.tools, "tools");
  check(r.motion, "motion");
  std::size_t hold = 0;
  bool pooled = true;
  for (const auto& e : r.motion) {
    pooled = pooled && e.az_phases > e.az_steps;
    for (const auto& f : e.folds) hold += f.az_phases > f.az_steps;
  }
  const std::size_t total = r.motion.size() * r.motion[0].folds.size();
  ok = ok && pooled && hold * 6 >= total * 5;
  detail += fmt("motion phases > steps on %zu/%zu pipeline folds", hold, total);
  return {ok, detail};
}

Outcome feedback_benefit() {
  const auto& r = noisy_runs();
  const double fb = r.tools[3].az_steps, base = r.tools[1].az_steps;
  return {fb >= base, fmt("bn_hmm_feedback az_steps %.4f, bn_hmm az_steps %.4f", fb, base)};
}

Outcome throughput() {
  const auto& ds = noisy30();
  const auto split = kfold_split(ds.ids(), 6, 1);
  const auto train_ids = split.train_ids(0);
  const auto test_ids = split.test_ids(0);
  // Longest held-out surgery as the stream.
  const SurgeryRecord* longest = nullptr;
  for (const auto& s : ds.surgeries) {
    if (std::find(test_ids.begin(), test_ids.end(), s.id()) == test_ids.end()) continue;
    if (!longest || s.segments.size() > longest->segments.size()) longest = &s;
  }
  bool ok = true;
  std::string detail;
  double fps_hhmm = 0.0, fps_crf = 1.0;
  std::optional<BaseModels> base;
  for (const auto& cfg : every_pipeline()) {
    const auto train = training_set(ds, train_ids, cfg.window);
    if (uses_bn(cfg.kind) && (!base || base->source != cfg.source)) base = train_base(ds.taxonomy, train, cfg);
    const auto models = train_models(ds.taxonomy, train, cfg, uses_bn(cfg.kind) ? &*base : nullptr);
    const auto r = measure_throughput(models, build_observations(*longest, ds.taxonomy, cfg.window));
    ok = ok && r.frames_per_second >= 25.0;
    detail += fmt("%s %.0f; ", name(cfg).c_str(), r.frames_per_second);
    if (cfg.source == ObservationSource::Tools && cfg.kind == PipelineKind::Hhmm) fps_hhmm = r.frames_per_second;
    if (cfg.source == ObservationSource::Tools && cfg.kind == PipelineKind::BnCrf) fps_crf = r.frames_per_second;
  }
  ok = ok && fps_hhmm >= 10.0 * fps_crf;
  detail += fmt("frames/s, hhmm/bn_crf %.1fx", fps_hhmm / fps_crf);
  return {ok, detail};
}

bool same(const StepPhasePosterior& a, const StepPhasePosterior& b) {
  return a.window_index == b.window_index && a.step_probs == b.step_probs && a.phase_probs == b.phase_probs &&
         a.step_argmax == b.step_argmax && a.phase_argmax == b.phase_argmax && a.flags == b.flags;
}

Outcome causality() {
  const auto ds = generate_dataset(bundled_spec("noisy"), 8, 11);
  auto ids = ds.ids();
  ids.pop_back();
  oracle::Rng rng(808);
  std::size_t violations = 0, checked = 0;
  for (auto cfg : every_pipeline()) {
    cfg.gibbs = {2000, 200, 0};
    const auto models = train_models(ds.taxonomy, training_set(ds, ids, cfg.window), cfg);
    const auto stream = build_observations(ds.surgeries.back(), ds.taxonomy, cfg.window);
    std::vector<StepPhasePosterior> full;
    {
      Pipeline p(models);
      for (const auto& w : stream) full.push_back(p.consume_window(w));
    }
    for (int rep = 0; rep < 50; ++rep) {
      const std::size_t cut = oracle::uniform_int(rng, 1, stream.size());
      Pipeline p(models);
      for (std::size_t i = 0; i < cut; ++i) {
        ++checked;
        if (!same(p.consume_window(stream[i]), full[i])) ++violations;
      }
    }
  }
  return {violations == 0,
          fmt("8 pipelines x 50 truncation points, %zu of %zu windows differ", violations, checked)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Everything one run produces, flattened to bytes.
std::vector<std::pair<std::string, std::string>> determinism_run(const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> out;
  const auto ds = generate_dataset(bundled_spec("noisy"), 6, 5);
  write_dataset(ds, dir / "data");
  for (const auto& e : fs::directory_iterator(dir / "data")) {
    out.emplace_back("data/" + e.path().filename().string(), slurp(e.path()));
  }
  const auto split = kfold_split(ds.ids(), 2, 9);
  auto ids = ds.ids();
  ids.pop_back();
  std::vector<EvaluationResult> results;
  for (auto cfg : every_pipeline()) {
    cfg.gibbs = {1000, 100, 3};
    cfg.crf_max_iter = 60;
    const auto tag = std::string(to_string(cfg.kind)) + "_" + to_string(cfg.source);
    const auto models = train_models(ds.taxonomy, training_set(ds, ids, cfg.window), cfg);
    save_models(models, dir / tag);
    for (const auto& e : fs::directory_iterator(dir / tag)) {
      out.emplace_back(tag + "/" + e.path().filename().string(), slurp(e.path()));
    }
    Pipeline p(models);
    std::string stream;
    for (const auto& w : build_observations(ds.surgeries.back(), ds.taxonomy, cfg.window)) {
      stream += posterior_to_json(p.consume_window(w), std::nullopt).dump() + "\n";
    }
    out.emplace_back(tag + "/stream", stream);
    results.push_back(evaluate_pipeline(ds, cfg, split));
    out.emplace_back(tag + "/evaluation", evaluation_to_json(results.back(), ds.taxonomy).dump());
    out.emplace_back(tag + "/per_label", per_label_csv(results.back(), ds.taxonomy));
  }
  out.emplace_back("table", markdown_table(results, {}));
  return out;
}

Outcome determinism() {
  const auto root = fs::temp_directory_path() / "surgflow_acceptance_det";
  fs::remove_all(root);
  const auto a = determinism_run(root / "a");
  const auto b = determinism_run(root / "b");
  fs::remove_all(root);
  std::size_t differ = 0;
  std::string first;
  for (std::size_t i = 0; i < std::max(a.size(), b.size()); ++i) {
    if (i >= a.size() || i >= b.size() || a[i] != b[i]) {
      if (first.empty()) first = i < a.size() ? a[i].first : b[i].first;
      ++differ;
    }
  }
  return {differ == 0, fmt("%zu artifacts compared, %zu differ%s%s", a.size(), differ, first.empty() ? "" : ", first ",
                           first.c_str())};
}

Outcome protocol() {
  std::vector<std::string> ids;
  for (int i = 1; i <= 30; ++i) ids.push_back(fmt("S%03d", i));
  const auto split = kfold_split(ids, 6, 42);
  std::set<std::string> seen;
  bool folds_ok = split.k == 6;
  for (std::size_t f = 0; f < 6; ++f) {
    const auto t = split.test_ids(f);
    folds_ok = folds_ok && t.size() == 5;
    seen.insert(t.begin(), t.end());
  }
  folds_ok = folds_ok && seen.size() == 30;

  oracle::Rng rng(1010);
  double worst = 0.0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = oracle::uniform_int(rng, 2, 300);
    const bool coarse = rep % 3 == 0;  // ties
    Vec s(n);
    std::vector<bool> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = coarse ? static_cast<double>(oracle::uniform_int(rng, 0, 5)) : oracle::uniform(rng);
      y[i] = oracle::uniform(rng) < 0.4;
    }
    y[0] = true;
    y[1] = false;
    worst = std::max(worst, std::abs(roc_auc(s, y).auc - mann_whitney_auc(s, y)));
  }
  return {folds_ok && worst <= 1e-9,
          fmt("folds %s, max |trapezoid - Mann-Whitney| %.2e over 1000 vectors", folds_ok ? "6x5" : "wrong", worst)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"decoder oracles", decoders},
      {"gibbs vs exact", gibbs},
      {"crf gradient and l-bfgs", crf_training},
      {"clean-world recovery", clean_recovery},
      {"noisy-world ordering", noisy_ordering},
      {"phase feedback benefit", feedback_benefit},
      {"throughput", throughput},
      {"causality", causality},
      {"determinism", determinism},
      {"protocol fidelity", protocol},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
