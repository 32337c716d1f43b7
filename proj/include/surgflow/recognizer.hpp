// End-to-end online pipelines: BN + HMMs, BN + HMMs with phase feedback,
// BN + CRFs and the HHMM. A pipeline consumes one observation window at a
// time and only ever looks at the past.
#pragma once

#include <filesystem>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "surgflow/bayesnet.hpp"
#include "surgflow/common.hpp"
#include "surgflow/crf.hpp"
#include "surgflow/features.hpp"
#include "surgflow/markov.hpp"
#include "surgflow/taxonomy.hpp"
#include "surgflow/windowing.hpp"

namespace surgflow {

using nlohmann::json;

enum class PipelineKind { BnHmm, BnHmmFeedback, BnCrf, Hhmm };
enum class ObservationSource { Tools, MotionKnn };

inline const char* to_string(PipelineKind k) {
  switch (k) {
    case PipelineKind::BnHmm: return "bn_hmm";
    case PipelineKind::BnHmmFeedback: return "bn_hmm_feedback";
    case PipelineKind::BnCrf: return "bn_crf";
    case PipelineKind::Hhmm: return "hhmm";
  }
  return "?";
}

inline const char* to_string(ObservationSource s) {
  return s == ObservationSource::Tools ? "tools" : "motion_knn";
}

inline PipelineKind pipeline_kind_from_string(const std::string& s) {
  for (auto k : {PipelineKind::BnHmm, PipelineKind::BnHmmFeedback, PipelineKind::BnCrf, PipelineKind::Hhmm}) {
    if (s == to_string(k)) return k;
  }
  throw ValidationError("unknown pipeline kind '" + s + "'");
}

inline ObservationSource observation_source_from_string(const std::string& s) {
  if (s == "tools") return ObservationSource::Tools;
  if (s == "motion_knn" || s == "motion") return ObservationSource::MotionKnn;
  throw ValidationError("unknown observation source '" + s + "'");
}

inline bool uses_bn(PipelineKind k) { return k != PipelineKind::Hhmm; }

struct PipelineConfig {
  PipelineKind kind = PipelineKind::BnHmm;
  ObservationSource source = ObservationSource::Tools;
  WindowConfig window{};
  std::size_t knn_k = 10;
  EvidenceBinning knn_binning{5};
  std::optional<EvidenceBinning> feedback_binning;  // defaults to knn_binning
  double t_hmm_steps = 1.0;   // seconds
  double t_hmm_phases = 1.0;  // seconds
  std::size_t delta_t = 0;
  GibbsOptions gibbs{};
  bool bn_smoothing = false;
  bool hmm_smoothing = false;
  bool hhmm_smoothing = false;
  double crf_l2 = 1e-2;
  std::size_t crf_max_iter = 200;
  FeatureMap::Unary crf_unary = FeatureMap::Unary::Tied;
  FeatureMap::Pairwise crf_pairwise = FeatureMap::Pairwise::Tied;
  bool crf_label_bias = false;
  bool crf_transition_bias = false;

  EvidenceBinning effective_feedback_binning() const { return feedback_binning.value_or(knn_binning); }

  std::size_t tick_windows(double t_hmm) const {
    return static_cast<std::size_t>(std::max<std::int64_t>(1, round_half_up(t_hmm / window.t_shift)));
  }

  void validate() const {
    window.validate();
    knn_binning.validate();
    effective_feedback_binning().validate();
    if (knn_k < 1) throw ValidationError("K must be at least 1");
    if (!(t_hmm_steps > 0.0) || !(t_hmm_phases > 0.0)) throw ValidationError("HMM ticks must be positive");
    if (gibbs.n_samples == 0) throw ValidationError("Gibbs needs at least one sample");
    if (!(crf_l2 >= 0.0)) throw ValidationError("crf l2 must be non-negative");
  }

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

inline json config_to_json(const PipelineConfig& c) {
  json j{{"kind", to_string(c.kind)},
         {"source", to_string(c.source)},
         {"t_scale", c.window.t_scale},
         {"t_shift", c.window.t_shift},
         {"fps", c.window.fps},
         {"k", c.knn_k},
         {"n_obs", c.knn_binning.n_obs},
         {"t_hmm_steps", c.t_hmm_steps},
         {"t_hmm_phases", c.t_hmm_phases},
         {"delta_t", c.delta_t},
         {"gibbs_samples", c.gibbs.n_samples},
         {"gibbs_burn_in", c.gibbs.burn_in},
         {"gibbs_seed", c.gibbs.seed},
         {"bn_smoothing", c.bn_smoothing},
         {"hmm_smoothing", c.hmm_smoothing},
         {"hhmm_smoothing", c.hhmm_smoothing},
         {"crf_l2", c.crf_l2},
         {"crf_max_iter", c.crf_max_iter},
         {"crf_unary", to_string(c.crf_unary)},
         {"crf_pairwise", to_string(c.crf_pairwise)},
         {"crf_label_bias", c.crf_label_bias},
         {"crf_transition_bias", c.crf_transition_bias}};
  j["feedback_n_obs"] = c.feedback_binning ? json(c.feedback_binning->n_obs) : json(nullptr);
  return j;
}

/// Reads the keys present in `j` on top of `base`; unknown keys are errors.
inline PipelineConfig config_from_json(const json& j, PipelineConfig c = {}) {
  if (!j.is_object()) throw ValidationError("pipeline config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "kind") c.kind = pipeline_kind_from_string(v.get<std::string>());
      else if (key == "source") c.source = observation_source_from_string(v.get<std::string>());
      else if (key == "t_scale") c.window.t_scale = v.get<double>();
      else if (key == "t_shift") c.window.t_shift = v.get<double>();
      else if (key == "fps") c.window.fps = v.get<double>();
      else if (key == "k") c.knn_k = v.get<std::size_t>();
      else if (key == "n_obs") c.knn_binning.n_obs = v.get<std::size_t>();
      else if (key == "feedback_n_obs") {
        if (v.is_null()) c.feedback_binning.reset();
        else c.feedback_binning = EvidenceBinning{v.get<std::size_t>()};
      }
      else if (key == "t_hmm_steps") c.t_hmm_steps = v.get<double>();
      else if (key == "t_hmm_phases") c.t_hmm_phases = v.get<double>();
      else if (key == "delta_t") c.delta_t = v.get<std::size_t>();
      else if (key == "gibbs_samples") c.gibbs.n_samples = v.get<std::size_t>();
      else if (key == "gibbs_burn_in") c.gibbs.burn_in = v.get<std::size_t>();
      else if (key == "gibbs_seed") c.gibbs.seed = v.get<std::uint64_t>();
      else if (key == "bn_smoothing") c.bn_smoothing = v.get<bool>();
      else if (key == "hmm_smoothing") c.hmm_smoothing = v.get<bool>();
      else if (key == "hhmm_smoothing") c.hhmm_smoothing = v.get<bool>();
      else if (key == "crf_l2") c.crf_l2 = v.get<double>();
      else if (key == "crf_max_iter") c.crf_max_iter = v.get<std::size_t>();
      else if (key == "crf_unary") {
        const auto s = v.get<std::string>();
        if (s != "tied" && s != "per_label") throw ValidationError("crf_unary must be tied or per_label");
        c.crf_unary = s == "tied" ? FeatureMap::Unary::Tied : FeatureMap::Unary::PerLabel;
      } else if (key == "crf_pairwise") {
        const auto s = v.get<std::string>();
        if (s != "tied" && s != "per_pair") throw ValidationError("crf_pairwise must be tied or per_pair");
        c.crf_pairwise = s == "tied" ? FeatureMap::Pairwise::Tied : FeatureMap::Pairwise::PerPair;
      }
      else if (key == "crf_label_bias") c.crf_label_bias = v.get<bool>();
      else if (key == "crf_transition_bias") c.crf_transition_bias = v.get<bool>();
      else throw ValidationError("unknown pipeline config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// BN inference with a per-model memo. The Gibbs seed is fixed per call, so
// identical evidence always yields identical marginals and memoizing is
// exact. Not thread-safe: one engine per thread.

class BnEngine {
 public:
  BnEngine(BnModel model, GibbsOptions opts)
      : model_(std::make_unique<BnModel>(std::move(model))), sampler_(*model_), opts_(opts) {}

  PosteriorMarginals infer(const BnEvidence& ev) {
    if (!cache_enabled_) return sampler_.infer(ev, opts_);
    std::string key;
    key.reserve(ev.size());
    for (const auto& [node, v] : ev) {
      key += std::to_string(node);
      key += v ? '+' : '-';
    }
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    auto m = sampler_.infer(ev, opts_);
    cache_.emplace(std::move(key), m);
    return m;
  }

  void set_cache(bool on) {
    cache_enabled_ = on;
    if (!on) cache_.clear();
  }
  const BnModel& model() const { return *model_; }
  const GibbsOptions& options() const { return opts_; }

 private:
  std::unique_ptr<BnModel> model_;
  GibbsSampler sampler_;
  GibbsOptions opts_;
  bool cache_enabled_ = true;
  std::unordered_map<std::string, PosteriorMarginals> cache_;
};

struct TrainedModels {
  PipelineConfig config;
  Taxonomy taxonomy;
  std::vector<std::string> trained_on;
  std::optional<KnnIndex> knn;
  std::shared_ptr<BnEngine> bn;           // BnHmm, BnCrf and the feedback teacher
  std::shared_ptr<BnEngine> bn_feedback;  // BnHmmFeedback
  std::optional<Hmm> step_hmm, phase_hmm;
  std::optional<CrfModel> step_crf, phase_crf;
  std::optional<Hhmm> hhmm;
  std::optional<LbfgsResult> step_crf_trace, phase_crf_trace;
};

struct TrainingSurgery {
  std::string id;
  std::vector<ObservationRecord> windows;  // with truth labels
};

struct StepPhasePosterior {
  std::size_t window_index = 0;
  Vec step_probs;
  Vec phase_probs;
  std::size_t step_argmax = 0;
  std::size_t phase_argmax = 0;
  std::vector<std::string> flags;
};

class Pipeline;
inline Pipeline init_pipeline(const TrainedModels& models);

/// Online recognizer for one stream. Holds decoder columns, the feedback
/// buffer and the CRF lookback buffer.
class Pipeline {
 public:
  explicit Pipeline(const TrainedModels& m) : m_(&m) {
    const auto& tax = m.taxonomy;
    const auto& cfg = m.config;
    if (cfg.source == ObservationSource::MotionKnn) {
      if (!m.knn) throw ValidationError("motion source needs a KNN index");
      if (m.knn->n_steps != tax.n_steps()) throw ValidationError("KNN label set differs from the taxonomy");
    }
    auto check_bn = [&](const std::shared_ptr<BnEngine>& e) {
      if (!e) throw ValidationError("pipeline needs a Bayesian network");
      const auto& st = e->model().structure;
      if (st.n_steps != tax.n_steps() || st.n_phases != tax.n_phases()) {
        throw ValidationError("BN label set differs from the taxonomy");
      }
    };
    switch (cfg.kind) {
      case PipelineKind::BnHmmFeedback:
        check_bn(m.bn_feedback);
        [[fallthrough]];
      case PipelineKind::BnHmm:
        check_bn(m.bn);
        if (!m.step_hmm || !m.phase_hmm) throw ValidationError("pipeline needs step and phase HMMs");
        if (m.step_hmm->n_states() != tax.n_steps() || m.phase_hmm->n_states() != tax.n_phases()) {
          throw ValidationError("HMM label set differs from the taxonomy");
        }
        break;
      case PipelineKind::BnCrf:
        check_bn(m.bn);
        if (!m.step_crf || !m.phase_crf) throw ValidationError("pipeline needs step and phase CRFs");
        if (m.step_crf->n_labels() != tax.n_steps() || m.phase_crf->n_labels() != tax.n_phases()) {
          throw ValidationError("CRF label set differs from the taxonomy");
        }
        break;
      case PipelineKind::Hhmm:
        if (!m.hhmm) throw ValidationError("pipeline needs an HHMM");
        if (m.hhmm->n_steps() != tax.n_steps() || m.hhmm->n_phases != tax.n_phases()) {
          throw ValidationError("HHMM label set differs from the taxonomy");
        }
        break;
    }
  }

  StepPhasePosterior consume_window(const ObservationRecord& obs) {
    if (last_index_ && obs.window.index != *last_index_ + 1) {
      throw ValidationError("out-of-order window: expected " + std::to_string(*last_index_ + 1) + ", got " +
                            std::to_string(obs.window.index));
    }
    StepPhasePosterior out;
    out.window_index = obs.window.index;
    switch (m_->config.kind) {
      case PipelineKind::BnHmm:
      case PipelineKind::BnHmmFeedback: run_hmms(obs, out); break;
      case PipelineKind::BnCrf: run_crfs(obs, out); break;
      case PipelineKind::Hhmm: run_hhmm(obs, out); break;
    }
    out.step_argmax = argmax(out.step_probs);
    out.phase_argmax = argmax(out.phase_probs);
    last_index_ = obs.window.index;
    ++t_;
    return out;
  }

  std::size_t windows_consumed() const { return t_; }

  /// Evidence-bearing step probabilities for the configured source.
  Vec knn_probs(const ObservationRecord& obs) const {
    if (obs.feature) return knn_step_probs(*m_->knn, *obs.feature);
    if (obs.step_probs) return *obs.step_probs;
    throw InputError("window " + std::to_string(obs.window.index) + " has neither feature nor step_probs");
  }

 private:
  BnEvidence base_evidence(const BnStructure& st, const ObservationRecord& obs,
                           std::vector<std::string>& flags) const {
    BnEvidence ev;
    if (m_->config.source == ObservationSource::Tools) {
      std::vector<std::size_t> known;
      for (std::size_t t : obs.tools_present) {
        if (t < st.tool_nodes.size()) known.push_back(t);
        else flags.push_back("unknown tool ignored");
      }
      add_tool_evidence(st, known, ev);
    } else {
      add_knn_evidence(st, knn_probs(obs), ev);
    }
    return ev;
  }

  // With feedback, phases are decoded from the plain BN and the phase HMM,
  // whose previous-window output is binned into the feedback BN that feeds
  // the step HMM. Phase outputs therefore never loop back into themselves.
  void run_hmms(const ObservationRecord& obs, StepPhasePosterior& out) {
    const auto& cfg = m_->config;
    const std::size_t ks = cfg.tick_windows(cfg.t_hmm_steps);
    const std::size_t kp = cfg.tick_windows(cfg.t_hmm_phases);
    const bool tick_s = t_ % ks == 0;
    const bool tick_p = t_ % kp == 0;
    const bool fb = cfg.kind == PipelineKind::BnHmmFeedback;
    std::optional<PosteriorMarginals> plain;
    if (tick_p || (tick_s && !fb)) {
      plain = m_->bn->infer(base_evidence(m_->bn->model().structure, obs, out.flags));
    }
    if (tick_s) {
      PosteriorMarginals pm;
      if (fb) {
        const auto& st = m_->bn_feedback->model().structure;
        BnEvidence ev = base_evidence(st, obs, out.flags);
        if (prev_phase_) add_feedback_evidence(st, *prev_phase_, ev);
        else out.flags.push_back("feedback cold start");
        pm = m_->bn_feedback->infer(ev);
      } else {
        pm = *plain;
      }
      auto r = viterbi_step(*m_->step_hmm, step_dec_, pm.step_probs, DegeneratePolicy::Restart);
      if (r.restarted) out.flags.push_back("step decoder restarted");
      step_scores_ = std::move(r.scores);
    }
    if (tick_p) {
      auto r = viterbi_step(*m_->phase_hmm, phase_dec_, plain->phase_probs, DegeneratePolicy::Restart);
      if (r.restarted) out.flags.push_back("phase decoder restarted");
      phase_scores_ = std::move(r.scores);
    }
    out.step_probs = step_scores_;
    out.phase_probs = phase_scores_;
    prev_phase_ = out.phase_probs;
  }

  void run_crfs(const ObservationRecord& obs, StepPhasePosterior& out) {
    const auto& st = m_->bn->model().structure;
    const PosteriorMarginals pm = m_->bn->infer(base_evidence(st, obs, out.flags));
    const std::size_t delta = m_->step_crf->delta_t;
    history_.push_back(pm);
    if (history_.size() > delta + 1) history_.erase(history_.begin());
    if (t_ < delta) out.flags.push_back("lookback clamped to first window");
    const PosteriorMarginals& src = history_.front();
    auto rs = online_forward_step_at(*m_->step_crf, step_crf_, t_, unary_potential(src.step_probs));
    auto rp = online_forward_step_at(*m_->phase_crf, phase_crf_, t_, unary_potential(src.phase_probs));
    out.step_probs = std::move(rs.scores);
    out.phase_probs = std::move(rp.scores);
  }

  void run_hhmm(const ObservationRecord& obs, StepPhasePosterior& out) {
    const Hhmm& h = *m_->hhmm;
    Vec e;
    if (m_->config.source == ObservationSource::Tools) {
      bool unknown = false;
      const std::size_t sym = h.symbols.symbol_of(obs.tools_present, &unknown);
      if (unknown) out.flags.push_back("unknown tool mapped to no-tool");
      e = hhmm_symbol_emission(h, sym);
    } else {
      e = knn_probs(obs);
    }
    if (!(sum(e) > 0.0)) {
      out.flags.push_back("symbol never emitted in training: uniform emission");
      std::fill(e.begin(), e.end(), 1.0);
    }
    auto r = hhmm_viterbi_step(h, hhmm_dec_, e, DegeneratePolicy::Restart);
    if (r.restarted) out.flags.push_back("hhmm decoder restarted");
    out.step_probs = std::move(r.step_scores);
    out.phase_probs = std::move(r.phase_scores);
  }

  const TrainedModels* m_;
  std::size_t t_ = 0;
  std::optional<std::size_t> last_index_;
  DecoderState step_dec_, phase_dec_, hhmm_dec_;
  CrfState step_crf_, phase_crf_;
  Vec step_scores_, phase_scores_;
  std::optional<Vec> prev_phase_;
  std::vector<PosteriorMarginals> history_;
};

inline Pipeline init_pipeline(const TrainedModels& models) { return Pipeline(models); }

// ---------------------------------------------------------------------------
// Training

namespace detail {

inline std::vector<std::size_t> subsample(const std::vector<std::size_t>& seq, std::size_t k) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < seq.size(); i += k) out.push_back(seq[i]);
  return out;
}

inline std::size_t truth_step(const ObservationRecord& r) {
  if (!r.truth_step) throw InputError("training window " + std::to_string(r.window.index) + " has no truth");
  return *r.truth_step;
}

inline std::size_t truth_phase(const ObservationRecord& r) {
  if (!r.truth_phase) throw InputError("training window " + std::to_string(r.window.index) + " has no truth");
  return *r.truth_phase;
}

inline BnEvidence training_evidence(const BnStructure& st, const PipelineConfig& cfg, const ObservationRecord& w,
                                     const std::vector<Vec>& knn, std::size_t t) {
  BnEvidence ev;
  if (cfg.source == ObservationSource::Tools) add_tool_evidence(st, w.tools_present, ev);
  else add_knn_evidence(st, knn.at(t), ev);
  return ev;
}

template <class Train>
BnModel learn_base_bn(const Taxonomy& tax, const Train& train, const PipelineConfig& cfg,
                      const std::vector<std::vector<Vec>>& knn_train, const std::vector<std::size_t>& which) {
  const BnStructure skeleton = cfg.source == ObservationSource::Tools ? wire_tool_evidence(tax)
                                                                      : wire_knn_evidence(tax, cfg.knn_binning);
  std::vector<BnTrainingWindow> windows;
  for (std::size_t g : which) {
    for (std::size_t t = 0; t < train[g].windows.size(); ++t) {
      const auto& w = train[g].windows[t];
      windows.push_back({truth_step(w), truth_phase(w), training_evidence(skeleton, cfg, w, knn_train[g], t)});
    }
  }
  return learn_cpts(skeleton, windows, {cfg.bn_smoothing});
}

}  // namespace detail

/// Models shared by every pipeline kind trained on the same surgeries with
/// the same source: the KNN index, leave-one-surgery-out KNN probabilities
/// of the training windows, and the plain BN.
struct BaseModels {
  std::vector<std::string> trained_on;
  ObservationSource source = ObservationSource::Tools;
  std::optional<KnnIndex> knn;
  std::vector<std::vector<Vec>> knn_train;  // [surgery][window]
  std::shared_ptr<BnEngine> bn;
  json key;  // config fields the base depends on
  // Cross-fitted BN marginals of the training windows, filled on first use.
  mutable std::shared_ptr<std::vector<std::vector<PosteriorMarginals>>> heldout;

  static json key_of(const PipelineConfig& c) {
    return {{"source", to_string(c.source)}, {"k", c.knn_k}, {"n_obs", c.knn_binning.n_obs},
            {"bn_smoothing", c.bn_smoothing}, {"gibbs", {c.gibbs.n_samples, c.gibbs.burn_in, c.gibbs.seed}}};
  }
};

/// Training windows of the motion source get their KNN step probabilities
/// leave-one-surgery-out so that BN evidence statistics match what unseen
/// surgeries produce. With fewer than K points outside a surgery, its own
/// points are kept.
inline BaseModels train_base(const Taxonomy& tax, const std::vector<TrainingSurgery>& train,
                             const PipelineConfig& cfg) {
  cfg.validate();
  tax.validate();
  if (train.empty()) throw InputError("empty training set");
  BaseModels b;
  b.source = cfg.source;
  b.key = BaseModels::key_of(cfg);
  for (const auto& s : train) {
    if (s.windows.empty()) throw InputError("training surgery '" + s.id + "' has no windows");
    b.trained_on.push_back(s.id);
  }
  b.knn_train.resize(train.size());
  if (cfg.source == ObservationSource::MotionKnn) {
    KnnIndex idx;
    idx.n_steps = tax.n_steps();
    for (std::size_t g = 0; g < train.size(); ++g) {
      for (const auto& w : train[g].windows) {
        if (!w.feature) throw InputError("motion source needs window features ('" + train[g].id + "')");
        idx.points.push_back({*w.feature, detail::truth_step(w), g});
      }
    }
    idx.k = std::min(cfg.knn_k, idx.points.size());
    idx.validate();
    for (std::size_t g = 0; g < train.size(); ++g) {
      std::size_t others = 0;
      for (const auto& p : idx.points) others += p.group != g;
      for (const auto& w : train[g].windows) {
        b.knn_train[g].push_back(others >= idx.k ? knn_step_probs(idx, *w.feature, g) : knn_step_probs(idx, *w.feature));
      }
    }
    b.knn = std::move(idx);
  }

  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  BnModel bn = detail::learn_base_bn(tax, train, cfg, b.knn_train, all);
  bn.trained_on = b.trained_on;
  b.bn = std::make_shared<BnEngine>(std::move(bn), cfg.gibbs);
  return b;
}

/// BN marginals of every training window from a BN that did not see the
/// window's surgery: surgeries are dealt round-robin into up to five inner
/// folds. In-sample marginals are far more confident than those of unseen
/// surgeries, which would bias any model trained on top of them.
inline const std::vector<std::vector<PosteriorMarginals>>& heldout_marginals(
    const BaseModels& base, const Taxonomy& tax, const std::vector<TrainingSurgery>& train,
    const PipelineConfig& cfg) {
  if (base.heldout) return *base.heldout;
  const std::size_t k = std::min<std::size_t>(5, train.size());
  auto out = std::make_shared<std::vector<std::vector<PosteriorMarginals>>>(train.size());
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<std::size_t> fit, held;
    for (std::size_t g = 0; g < train.size(); ++g) (g % k == f ? held : fit).push_back(g);
    std::shared_ptr<BnEngine> engine = base.bn;
    if (!fit.empty()) {
      engine = std::make_shared<BnEngine>(detail::learn_base_bn(tax, train, cfg, base.knn_train, fit), cfg.gibbs);
    }
    const BnStructure& st = engine->model().structure;
    for (std::size_t g : held) {
      for (std::size_t t = 0; t < train[g].windows.size(); ++t) {
        (*out)[g].push_back(engine->infer(detail::training_evidence(st, cfg, train[g].windows[t], base.knn_train[g], t)));
      }
    }
  }
  base.heldout = std::move(out);
  return *base.heldout;
}

/// Learns every model the configured pipeline needs from the training
/// surgeries only. A base trained on the same surgeries with a matching
/// key may be passed in to share the KNN index, the BN and its memo.
inline TrainedModels train_models(const Taxonomy& tax, const std::vector<TrainingSurgery>& train,
                                  const PipelineConfig& cfg, const BaseModels* shared = nullptr) {
  cfg.validate();
  std::optional<BaseModels> own;
  if (shared) {
    std::vector<std::string> ids;
    for (const auto& s : train) ids.push_back(s.id);
    if (shared->trained_on != ids) throw LeakageError("shared base models were trained on other surgeries");
    if (shared->key != BaseModels::key_of(cfg)) throw ValidationError("shared base models use another config");
  } else {
    own = train_base(tax, train, cfg);
    shared = &*own;
  }
  const BaseModels& base = *shared;
  const auto& knn_train = base.knn_train;
  TrainedModels m;
  m.config = cfg;
  m.taxonomy = tax;
  m.trained_on = base.trained_on;
  m.knn = base.knn;

  std::vector<std::vector<std::size_t>> step_seqs, phase_seqs;
  for (const auto& s : train) {
    std::vector<std::size_t> ss, pp;
    for (const auto& w : s.windows) {
      ss.push_back(detail::truth_step(w));
      pp.push_back(detail::truth_phase(w));
    }
    step_seqs.push_back(std::move(ss));
    phase_seqs.push_back(std::move(pp));
  }

  if (cfg.kind == PipelineKind::Hhmm) {
    std::vector<std::vector<std::size_t>> tool_sets;
    for (const auto& s : train) {
      for (const auto& w : s.windows) tool_sets.push_back(w.tools_present);
    }
    SymbolTable symbols = learn_symbol_table(tax.n_tools(), tool_sets);
    std::vector<HhmmSequence> seqs;
    for (std::size_t g = 0; g < train.size(); ++g) {
      HhmmSequence hs{step_seqs[g], phase_seqs[g], {}};
      if (cfg.source == ObservationSource::Tools) {
        for (const auto& w : train[g].windows) hs.symbols.push_back(symbols.symbol_of(w.tools_present));
      }
      seqs.push_back(std::move(hs));
    }
    m.hhmm = hhmm_learn(seqs, tax.step_phase, tax.n_phases(), std::move(symbols), cfg.hhmm_smoothing);
    return m;
  }

  m.bn = base.bn;
  const BnStructure& skeleton = m.bn->model().structure;
  auto evidence_for = [&](const BnStructure& st, std::size_t g, std::size_t t) {
    return detail::training_evidence(st, cfg, train[g].windows[t], knn_train[g], t);
  };


  if (cfg.kind == PipelineKind::BnHmm || cfg.kind == PipelineKind::BnHmmFeedback) {
    std::vector<std::vector<std::size_t>> ss, pp;
    const std::size_t ks = cfg.tick_windows(cfg.t_hmm_steps);
    const std::size_t kp = cfg.tick_windows(cfg.t_hmm_phases);
    for (std::size_t g = 0; g < train.size(); ++g) {
      ss.push_back(detail::subsample(step_seqs[g], ks));
      pp.push_back(detail::subsample(phase_seqs[g], kp));
    }
    m.step_hmm = make_hmm(learn_transitions(ss, tax.n_steps(), cfg.hmm_smoothing), cfg.t_hmm_steps);
    m.phase_hmm = make_hmm(learn_transitions(pp, tax.n_phases(), cfg.hmm_smoothing), cfg.t_hmm_phases);
  }

  if (cfg.kind == PipelineKind::BnHmmFeedback) {
    // Teacher pass: the phase HMM run over held-out BN marginals supplies
    // the previous-window phase posterior for feedback evidence.
    const auto& held = heldout_marginals(base, tax, train, cfg);
    const std::size_t kp = cfg.tick_windows(cfg.t_hmm_phases);
    BnStructure fb_skel = skeleton;
    add_phase_feedback(fb_skel, cfg.effective_feedback_binning());
    std::vector<BnTrainingWindow> fb_windows;
    for (std::size_t g = 0; g < train.size(); ++g) {
      DecoderState dec;
      Vec scores;
      for (std::size_t t = 0; t < train[g].windows.size(); ++t) {
        BnEvidence ev = evidence_for(fb_skel, g, t);
        if (t > 0) add_feedback_evidence(fb_skel, scores, ev);
        fb_windows.push_back({step_seqs[g][t], phase_seqs[g][t], std::move(ev)});
        if (t % kp == 0) scores = viterbi_step(*m.phase_hmm, dec, held[g][t].phase_probs, DegeneratePolicy::Restart).scores;
      }
    }
    BnModel fbm = learn_cpts(fb_skel, fb_windows, {cfg.bn_smoothing});
    fbm.trained_on = m.trained_on;
    m.bn_feedback = std::make_shared<BnEngine>(std::move(fbm), cfg.gibbs);
  }

  if (cfg.kind == PipelineKind::BnCrf) {
    const auto tm_s = learn_transitions(step_seqs, tax.n_steps(), cfg.hmm_smoothing);
    const auto tm_p = learn_transitions(phase_seqs, tax.n_phases(), cfg.hmm_smoothing);
    const auto& held = heldout_marginals(base, tax, train, cfg);
    std::vector<CrfSequence> ds, dp;
    for (std::size_t g = 0; g < train.size(); ++g) {
      std::vector<Vec> ms, mp;
      for (const auto& pm : held[g]) {
        ms.push_back(pm.step_probs);
        mp.push_back(pm.phase_probs);
      }
      ds.push_back({build_potentials(ms, tm_s.a, cfg.delta_t), step_seqs[g]});
      dp.push_back({build_potentials(mp, tm_p.a, cfg.delta_t), phase_seqs[g]});
    }
    CrfTrainOptions opts;
    opts.l2 = cfg.crf_l2;
    opts.lbfgs.max_iter = cfg.crf_max_iter;
    auto fmap = [&](std::size_t n) {
      return FeatureMap{n, cfg.crf_unary, cfg.crf_pairwise, cfg.crf_label_bias, cfg.crf_transition_bias};
    };
    auto rs = train_lbfgs(fmap(tax.n_steps()), ds, tm_s.a, cfg.delta_t, opts);
    auto rp = train_lbfgs(fmap(tax.n_phases()), dp, tm_p.a, cfg.delta_t, opts);
    m.step_crf = std::move(rs.model);
    m.phase_crf = std::move(rp.model);
    m.step_crf_trace = std::move(rs.optimizer);
    m.phase_crf_trace = std::move(rp.optimizer);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Frame labels

struct FrameLabeling {
  std::vector<std::size_t> step;
  std::vector<std::size_t> phase;
};

/// Window t labels the shift-long interval starting at its first frame; the
/// last window also labels the rest of its own frames.
inline FrameLabeling labels_to_frames(const std::vector<StepPhasePosterior>& posteriors, const WindowConfig& cfg) {
  cfg.validate();
  if (posteriors.empty()) throw InputError("no posteriors to project onto frames");
  const std::size_t shift = cfg.shift_frames();
  const std::size_t len = cfg.length_frames();
  for (std::size_t i = 0; i < posteriors.size(); ++i) {
    if (posteriors[i].window_index != i + 1) throw ValidationError("gap in window indices");
  }
  const std::size_t last_end = (posteriors.size() - 1) * shift + len;
  FrameLabeling out{std::vector<std::size_t>(last_end), std::vector<std::size_t>(last_end)};
  for (std::size_t i = 0; i < posteriors.size(); ++i) {
    const std::size_t b = i * shift;
    const std::size_t e = i + 1 == posteriors.size() ? last_end : std::min(last_end, b + shift);
    for (std::size_t f = b; f < e; ++f) {
      out.step[f] = posteriors[i].step_argmax;
      out.phase[f] = posteriors[i].phase_argmax;
    }
  }
  return out;
}

inline json posterior_to_json(const StepPhasePosterior& p, std::optional<double> latency_ms) {
  json j{{"window_index", p.window_index},
         {"step_argmax", p.step_argmax},
         {"phase_argmax", p.phase_argmax},
         {"step_probs", p.step_probs},
         {"phase_probs", p.phase_probs}};
  j["latency_ms"] = latency_ms ? json(*latency_ms) : json(nullptr);
  if (!p.flags.empty()) j["flags"] = p.flags;
  return j;
}

// ---------------------------------------------------------------------------
// Model directory: one JSON file per model plus pipeline.json.

inline void save_models(const TrainedModels& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto put = [&](const char* name, const json& j) { write_text_file(dir / name, j.dump(1) + "\n"); };
  json manifest{{"format", "surgflow-models/1"},
                {"config", config_to_json(m.config)},
                {"trained_on", m.trained_on},
                {"files", json::array()}};
  auto add = [&](const char* name, const json& j) {
    put(name, j);
    manifest["files"].push_back(name);
  };
  if (m.knn) add("knn.json", knn_to_json(*m.knn));
  if (m.bn) add("bn.json", bn_to_json(m.bn->model()));
  if (m.bn_feedback) add("bn_feedback.json", bn_to_json(m.bn_feedback->model()));
  if (m.step_hmm) add("hmm_steps.json", hmm_to_json(*m.step_hmm));
  if (m.phase_hmm) add("hmm_phases.json", hmm_to_json(*m.phase_hmm));
  if (m.step_crf) add("crf_steps.json", crf_to_json(*m.step_crf));
  if (m.phase_crf) add("crf_phases.json", crf_to_json(*m.phase_crf));
  if (m.hhmm) add("hhmm.json", hhmm_to_json(*m.hhmm));
  write_text_file(dir / "taxonomy.txt", format_taxonomy(m.taxonomy));
  put("pipeline.json", manifest);
}

inline TrainedModels load_models(const std::filesystem::path& dir) {
  auto get = [&](const std::string& name) {
    try {
      return json::parse(read_text_file(dir / name));
    } catch (const json::exception& e) {
      throw ParseError(name + ": " + e.what());
    }
  };
  const json manifest = get("pipeline.json");
  if (manifest.value("format", "") != "surgflow-models/1") throw ParseError("not a surgflow model directory");
  TrainedModels m;
  m.config = config_from_json(manifest.at("config"));
  m.taxonomy = load_taxonomy(dir / "taxonomy.txt");
  m.trained_on = manifest.at("trained_on").get<std::vector<std::string>>();
  for (const auto& f : manifest.at("files")) {
    const auto name = f.get<std::string>();
    const json j = get(name);
    if (name == "knn.json") m.knn = knn_from_json(j);
    else if (name == "bn.json") m.bn = std::make_shared<BnEngine>(bn_from_json(j), m.config.gibbs);
    else if (name == "bn_feedback.json") m.bn_feedback = std::make_shared<BnEngine>(bn_from_json(j), m.config.gibbs);
    else if (name == "hmm_steps.json") m.step_hmm = hmm_from_json(j);
    else if (name == "hmm_phases.json") m.phase_hmm = hmm_from_json(j);
    else if (name == "crf_steps.json") m.step_crf = crf_from_json(j);
    else if (name == "crf_phases.json") m.phase_crf = crf_from_json(j);
    else if (name == "hhmm.json") m.hhmm = hhmm_from_json(j);
    else throw ParseError("unknown model file '" + name + "'");
  }
  return m;
}

}  // namespace surgflow
