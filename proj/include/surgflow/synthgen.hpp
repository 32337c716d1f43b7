// Seeded generator of two-level surgeries: a phase chain, a step chain
// inside each phase, per-second tool sets and motion-histogram-shaped
// features. Two specs are bundled: "clean" and "noisy".
#pragma once

#include <cstdio>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "surgflow/common.hpp"
#include "surgflow/dataset.hpp"
#include "surgflow/features.hpp"
#include "surgflow/taxonomy.hpp"

namespace surgflow {

using nlohmann::json;

/// Timeline unit is a segment of `segment_seconds`; durations are counted in
/// segments. Phase durations follow from the step chain they contain.
struct GenerativeSpec {
  std::string name;
  Taxonomy taxonomy;
  double fps = 25.0;
  double segment_seconds = 1.0;
  Vec phase_pi;
  Matrix phase_a;  // plus phase_end, rows sum to 1
  Vec phase_end;
  Vec step_pi;     // within each phase
  Matrix step_a;   // plus step_exit, rows sum to 1, never leaves the phase
  Vec step_exit;
  std::vector<std::size_t> min_duration, max_duration;  // per step, segments
  Matrix tool_prob;  // step x tool, per segment
  double spurious_tool_prob = 0.0;
  Matrix feature_mean;  // step x 32
  double feature_noise = 0.0;
  std::size_t max_segments = 3600;

  std::size_t segment_frames() const {
    return static_cast<std::size_t>(std::max<std::int64_t>(1, round_half_up(segment_seconds * fps)));
  }

  void validate() const {
    taxonomy.validate();
    const std::size_t np = taxonomy.n_phases(), ns = taxonomy.n_steps(), nt = taxonomy.n_tools();
    auto fail = [&](const std::string& m) { throw ValidationError("generative spec '" + name + "': " + m); };
    if (!(fps > 0.0) || !(segment_seconds > 0.0)) fail("fps and segment length must be positive");
    if (phase_pi.size() != np || phase_a.rows() != np || phase_a.cols() != np || phase_end.size() != np) {
      fail("phase chain has wrong shape");
    }
    if (step_pi.size() != ns || step_a.rows() != ns || step_a.cols() != ns || step_exit.size() != ns) {
      fail("step chain has wrong shape");
    }
    if (!is_distribution(phase_pi, 1e-9)) fail("phase_pi is not a distribution");
    for (std::size_t p = 0; p < np; ++p) {
      if (phase_end[p] < 0.0 || std::abs(sum(phase_a.row(p)) + phase_end[p] - 1.0) > 1e-9) {
        fail("phase row " + std::to_string(p) + " is not stochastic");
      }
      double mass = 0.0;
      for (std::size_t s : taxonomy.steps_of(p)) mass += step_pi[s];
      if (std::abs(mass - 1.0) > 1e-9) fail("step_pi of phase " + std::to_string(p) + " does not sum to 1");
    }
    for (std::size_t s = 0; s < ns; ++s) {
      double row = step_exit[s];
      for (std::size_t s2 = 0; s2 < ns; ++s2) {
        if (step_a(s, s2) < 0.0) fail("negative step transition");
        if (step_a(s, s2) > 0.0 && taxonomy.step_phase[s2] != taxonomy.step_phase[s]) {
          fail("step chain leaves its phase");
        }
        if (s2 == s && step_a(s, s2) > 0.0) fail("step self-transitions are expressed as durations");
        row += step_a(s, s2);
      }
      if (std::abs(row - 1.0) > 1e-9) fail("step row " + std::to_string(s) + " is not stochastic");
      if (min_duration.at(s) < 1) fail("zero-duration state " + taxonomy.steps[s]);
      if (max_duration.at(s) < min_duration[s]) fail("max_duration below min_duration");
    }
    for (std::size_t p = 0; p < np; ++p) {
      if (phase_a(p, p) > 0.0) fail("phase self-transitions are expressed through the step chain");
    }
    if (tool_prob.rows() != ns || tool_prob.cols() != nt) fail("tool_prob has wrong shape");
    for (double x : tool_prob.data()) {
      if (!(x >= 0.0 && x <= 1.0)) fail("tool probability outside [0,1]");
    }
    if (!(spurious_tool_prob >= 0.0 && spurious_tool_prob <= 1.0)) fail("spurious_tool_prob outside [0,1]");
    if (feature_mean.rows() != ns || feature_mean.cols() != kMotionHistogramDim) fail("feature_mean has wrong shape");
    for (double x : feature_mean.data()) {
      if (!std::isfinite(x)) fail("feature mean is not finite");
    }
    if (!(feature_noise >= 0.0)) fail("feature_noise must be >= 0");
  }
};

namespace detail {

template <class Rng>
std::size_t sample_categorical(std::span<const double> w, Rng& rng) {
  const double total = sum(w);
  std::uniform_real_distribution<double> u(0.0, total);
  double r = u(rng);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] <= 0.0) continue;
    if (r < w[i]) return i;
    r -= w[i];
  }
  for (std::size_t i = w.size(); i-- > 0;) {
    if (w[i] > 0.0) return i;
  }
  throw ValidationError("categorical with zero mass");
}

inline void renormalize_blocks(Vec& v) {
  for (std::size_t b = 0; b < 4; ++b) {
    std::span<double> blk(v.data() + b * kHistBins, kHistBins);
    normalize_l1(blk);
  }
}

}  // namespace detail

/// Step label of every segment, following the phase and step chains.
template <class Rng>
std::vector<std::size_t> sample_segment_steps(const GenerativeSpec& spec, Rng& rng) {
  const auto& tax = spec.taxonomy;
  const std::size_t np = tax.n_phases();
  std::vector<std::size_t> out;
  std::size_t phase = detail::sample_categorical(spec.phase_pi, rng);
  while (true) {
    const auto members = tax.steps_of(phase);
    Vec w;
    for (std::size_t s : members) w.push_back(spec.step_pi[s]);
    std::size_t step = members[detail::sample_categorical(w, rng)];
    while (true) {
      std::uniform_int_distribution<std::size_t> dur(spec.min_duration[step], spec.max_duration[step]);
      const std::size_t d = dur(rng);
      for (std::size_t i = 0; i < d && out.size() < spec.max_segments; ++i) out.push_back(step);
      if (out.size() >= spec.max_segments) return out;
      Vec row;
      for (std::size_t s : members) row.push_back(spec.step_a(step, s));
      row.push_back(spec.step_exit[step]);
      const std::size_t k = detail::sample_categorical(row, rng);
      if (k == members.size()) break;
      step = members[k];
    }
    Vec prow(spec.phase_a.row(phase).begin(), spec.phase_a.row(phase).end());
    prow.push_back(spec.phase_end[phase]);
    const std::size_t k = detail::sample_categorical(prow, rng);
    if (k == np) return out;
    phase = k;
  }
}

inline SurgeryRecord generate_surgery(const GenerativeSpec& spec, std::uint64_t seed, std::string id) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const auto& tax = spec.taxonomy;
  const auto seg_steps = sample_segment_steps(spec, rng);
  const std::size_t sf = spec.segment_frames();
  SurgeryRecord rec;
  auto& ann = rec.annotation;
  ann.surgery_id = std::move(id);
  ann.fps = spec.fps;
  ann.frame_count = seg_steps.size() * sf;
  ann.step_of_frame.reserve(ann.frame_count);
  for (std::size_t s : seg_steps) {
    for (std::size_t f = 0; f < sf; ++f) {
      ann.step_of_frame.push_back(s);
      ann.phase_of_frame.push_back(tax.step_phase[s]);
    }
  }

  // Tools: presence drawn per segment, merged into intervals.
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<std::vector<bool>> present(tax.n_tools(), std::vector<bool>(seg_steps.size(), false));
  for (std::size_t i = 0; i < seg_steps.size(); ++i) {
    for (std::size_t t = 0; t < tax.n_tools(); ++t) {
      const double p = spec.tool_prob(seg_steps[i], t);
      const bool on = u01(rng) < p;
      const bool spurious = u01(rng) < spec.spurious_tool_prob;
      present[t][i] = on || spurious;
    }
  }
  for (std::size_t t = 0; t < tax.n_tools(); ++t) {
    for (std::size_t i = 0; i < seg_steps.size();) {
      if (!present[t][i]) {
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j + 1 < seg_steps.size() && present[t][j + 1]) ++j;
      ann.tool_intervals.push_back({t, static_cast<std::int64_t>(i * sf), static_cast<std::int64_t>((j + 1) * sf - 1)});
      i = j + 1;
    }
  }
  std::sort(ann.tool_intervals.begin(), ann.tool_intervals.end(), [](const ToolInterval& a, const ToolInterval& b) {
    return std::tie(a.start_frame, a.tool) < std::tie(b.start_frame, b.tool);
  });

  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < seg_steps.size(); ++i) {
    Vec f(spec.feature_mean.row(seg_steps[i]).begin(), spec.feature_mean.row(seg_steps[i]).end());
    for (double& x : f) x = std::max(0.0, x + spec.feature_noise * noise(rng));
    detail::renormalize_blocks(f);
    rec.segments.push_back({i * sf, (i + 1) * sf - 1, std::move(f)});
  }
  return rec;
}

inline std::string surgery_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "S%03zu", i + 1);
  return buf;
}

inline Dataset generate_dataset(const GenerativeSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw InputError("dataset needs at least one surgery");
  spec.validate();
  Dataset ds;
  ds.taxonomy = spec.taxonomy;
  ds.fps = spec.fps;
  ds.native_window = WindowConfig{2.0 * spec.segment_seconds, spec.segment_seconds, spec.fps};
  ds.info = {{"spec", spec.name}, {"seed", seed}, {"n", n}};
  for (std::size_t i = 0; i < n; ++i) ds.surgeries.push_back(generate_surgery(spec, derive_seed(seed, i), surgery_id(i)));
  return ds;
}

// ---------------------------------------------------------------------------
// Bundled specs

namespace detail {

inline Vec random_mh_pattern(std::mt19937_64& rng) {
  std::gamma_distribution<double> g(0.6, 1.0);
  Vec v(kMotionHistogramDim);
  for (double& x : v) x = g(rng);
  renormalize_blocks(v);
  return v;
}

/// Sequential chains: phases in taxonomy order, steps in taxonomy order.
inline GenerativeSpec linear_spec(const Taxonomy& tax) {
  const std::size_t np = tax.n_phases(), ns = tax.n_steps();
  GenerativeSpec s;
  s.taxonomy = tax;
  s.phase_pi.assign(np, 0.0);
  s.phase_pi[0] = 1.0;
  s.phase_a = Matrix(np, np, 0.0);
  s.phase_end.assign(np, 0.0);
  for (std::size_t p = 0; p + 1 < np; ++p) s.phase_a(p, p + 1) = 1.0;
  s.phase_end[np - 1] = 1.0;
  s.step_pi.assign(ns, 0.0);
  s.step_a = Matrix(ns, ns, 0.0);
  s.step_exit.assign(ns, 0.0);
  for (std::size_t p = 0; p < np; ++p) {
    const auto m = tax.steps_of(p);
    s.step_pi[m.front()] = 1.0;
    for (std::size_t i = 0; i + 1 < m.size(); ++i) s.step_a(m[i], m[i + 1]) = 1.0;
    s.step_exit[m.back()] = 1.0;
  }
  s.tool_prob = Matrix(ns, tax.n_tools(), 0.0);
  s.feature_mean = Matrix(ns, kMotionHistogramDim, 0.0);
  return s;
}

inline void set_row(Matrix& m, std::size_t r, std::initializer_list<std::pair<std::size_t, double>> vals) {
  for (double& x : m.row(r)) x = 0.0;
  for (const auto& [c, v] : vals) m(r, c) = v;
}

}  // namespace detail

/// Near-deterministic world: fixed phase and step order, every step has its
/// own tool set used throughout, well separated features.
inline GenerativeSpec clean_spec() {
  const Taxonomy tax = default_taxonomy();
  GenerativeSpec s = detail::linear_spec(tax);
  s.name = "clean";
  const std::size_t ns = tax.n_steps(), nt = tax.n_tools();
  s.min_duration.assign(ns, 6);
  s.max_duration.assign(ns, 12);
  // Steps 0..11 use tool s alone; steps 12..19 use a unique pair.
  const std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 6}, {1, 7}, {2, 8}, {3, 9},
                                                               {4, 10}, {5, 11}, {0, 11}, {1, 10}};
  for (std::size_t st = 0; st < ns; ++st) {
    if (st < nt) {
      s.tool_prob(st, st) = 1.0;
    } else {
      s.tool_prob(st, pairs[st - nt].first) = 1.0;
      s.tool_prob(st, pairs[st - nt].second) = 1.0;
    }
  }
  std::mt19937_64 rng(101);
  for (std::size_t st = 0; st < ns; ++st) {
    const Vec v = detail::random_mh_pattern(rng);
    std::copy(v.begin(), v.end(), s.feature_mean.row(st).begin());
  }
  s.feature_noise = 0.01;
  s.validate();
  return s;
}

/// Variable world: branching step chains, a revisited phase, two closure
/// routes (repeated wound hydration or point suturing), tools shared across
/// steps and phases, missed and spurious tool detections, and step features
/// that differ little within a phase.
inline GenerativeSpec noisy_spec() {
  const Taxonomy tax = default_taxonomy();
  GenerativeSpec s = detail::linear_spec(tax);
  s.name = "noisy";
  const std::size_t ns = tax.n_steps();
  s.min_duration.assign(ns, 4);
  s.max_duration.assign(ns, 14);

  // Lens removal occasionally returns to capsule preparation.
  detail::set_row(s.phase_a, 2, {{1, 0.12}, {3, 0.88}});

  auto step = [&](const char* name) { return *tax.step_index(name); };
  auto chain = [&](const char* from, std::initializer_list<std::pair<const char*, double>> to, double exit) {
    const std::size_t f = step(from);
    for (double& x : s.step_a.row(f)) x = 0.0;
    for (const auto& [n, p] : to) s.step_a(f, step(n)) = p;
    s.step_exit[f] = exit;
  };
  // Opening
  chain("Incision", {{"Side-port Incision", 0.7}, {"Anesthetic Injection", 0.3}}, 0.0);
  chain("Side-port Incision", {{"Anesthetic Injection", 0.6}, {"Viscoelastic Injection", 0.4}}, 0.0);
  chain("Anesthetic Injection", {{"Viscoelastic Injection", 0.8}}, 0.2);
  chain("Viscoelastic Injection", {}, 1.0);
  // Capsule preparation
  s.step_pi[step("Capsule Staining")] = 0.6;
  s.step_pi[step("Capsulorhexis")] = 0.4;
  chain("Capsule Staining", {{"Capsulorhexis", 1.0}}, 0.0);
  chain("Capsulorhexis", {{"Hydrodissection", 0.85}}, 0.15);
  chain("Hydrodissection", {{"Nucleus Rotation", 0.7}}, 0.3);
  chain("Nucleus Rotation", {}, 1.0);
  // Lens removal
  chain("Phacoemulsification", {{"Nucleus Chopping", 0.7}, {"Cortex Aspiration", 0.3}}, 0.0);
  chain("Nucleus Chopping", {{"Phacoemulsification", 0.3}, {"Cortex Aspiration", 0.7}}, 0.0);
  chain("Cortex Aspiration", {{"Capsule Polishing", 0.6}}, 0.4);
  chain("Capsule Polishing", {}, 1.0);
  // Implantation
  chain("Viscoelastic Refill", {{"Lens Loading", 0.8}, {"Lens Insertion", 0.2}}, 0.0);
  chain("Lens Loading", {{"Lens Insertion", 1.0}}, 0.0);
  chain("Lens Insertion", {{"Viscoelastic Removal", 0.9}}, 0.1);
  chain("Viscoelastic Removal", {}, 1.0);
  // Closure: repeated hydration with antibiotic, or suturing.
  for (std::size_t st : tax.steps_of(4)) s.step_pi[st] = 0.0;
  s.step_pi[step("Wound Hydration")] = 0.55;
  s.step_pi[step("Point Suturing")] = 0.45;
  chain("Wound Hydration", {{"Antibiotic Injection", 0.65}}, 0.35);
  chain("Antibiotic Injection", {{"Wound Hydration", 0.45}}, 0.55);
  chain("Point Suturing", {{"Stitching up", 1.0}}, 0.0);
  chain("Stitching up", {{"Antibiotic Injection", 0.6}}, 0.4);

  auto tool = [&](const char* name) { return *tax.tool_index(name); };
  auto tools = [&](const char* st, std::initializer_list<std::pair<const char*, double>> ts) {
    for (const auto& [n, p] : ts) s.tool_prob(step(st), tool(n)) = p;
  };
  tools("Incision", {{"Knife", 0.85}});
  tools("Side-port Incision", {{"Paracentesis Knife", 0.85}});
  tools("Anesthetic Injection", {{"Syringe", 0.8}, {"Cannula", 0.5}});
  tools("Viscoelastic Injection", {{"Cannula", 0.8}, {"Syringe", 0.4}});
  tools("Capsule Staining", {{"Cannula", 0.7}, {"Syringe", 0.6}});
  tools("Capsulorhexis", {{"Cystotome", 0.7}, {"Rhexis Forceps", 0.7}});
  tools("Hydrodissection", {{"Cannula", 0.8}, {"Syringe", 0.5}});
  tools("Nucleus Rotation", {{"Cannula", 0.6}, {"Chopper", 0.5}});
  tools("Phacoemulsification", {{"Phaco Handpiece", 0.9}, {"Chopper", 0.4}});
  tools("Nucleus Chopping", {{"Phaco Handpiece", 0.8}, {"Chopper", 0.8}});
  tools("Cortex Aspiration", {{"I/A Handpiece", 0.9}});
  tools("Capsule Polishing", {{"I/A Handpiece", 0.7}, {"Cannula", 0.4}});
  tools("Viscoelastic Refill", {{"Cannula", 0.8}, {"Syringe", 0.4}});
  tools("Lens Loading", {{"Lens Injector", 0.7}, {"Suture Forceps", 0.3}});
  tools("Lens Insertion", {{"Lens Injector", 0.9}, {"Cannula", 0.3}});
  tools("Viscoelastic Removal", {{"I/A Handpiece", 0.8}, {"Cannula", 0.4}});
  tools("Wound Hydration", {{"Cannula", 0.8}, {"Syringe", 0.5}});
  tools("Point Suturing", {{"Needle Holder", 0.8}, {"Suture Forceps", 0.7}});
  tools("Stitching up", {{"Needle Holder", 0.9}, {"Suture Forceps", 0.8}});
  tools("Antibiotic Injection", {{"Syringe", 0.9}, {"Cannula", 0.3}});
  s.spurious_tool_prob = 0.03;

  // Features: a per-phase pattern plus a smaller per-step deviation.
  std::mt19937_64 rng(202);
  std::vector<Vec> phase_pattern;
  for (std::size_t p = 0; p < tax.n_phases(); ++p) phase_pattern.push_back(detail::random_mh_pattern(rng));
  for (std::size_t st = 0; st < ns; ++st) {
    const Vec dev = detail::random_mh_pattern(rng);
    Vec v(kMotionHistogramDim);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.75 * phase_pattern[tax.step_phase[st]][i] + 0.25 * dev[i];
    detail::renormalize_blocks(v);
    std::copy(v.begin(), v.end(), s.feature_mean.row(st).begin());
  }
  s.feature_noise = 0.4;
  s.validate();
  return s;
}

inline GenerativeSpec bundled_spec(const std::string& name) {
  if (name == "clean") return clean_spec();
  if (name == "noisy") return noisy_spec();
  throw InputError("no bundled generative spec named '" + name + "'");
}

inline json spec_to_json(const GenerativeSpec& s) {
  return {{"format", "surgflow-genspec/1"},
          {"name", s.name},
          {"taxonomy", format_taxonomy(s.taxonomy)},
          {"fps", s.fps},
          {"segment_seconds", s.segment_seconds},
          {"phase_pi", s.phase_pi},
          {"phase_a", s.phase_a.to_rows()},
          {"phase_end", s.phase_end},
          {"step_pi", s.step_pi},
          {"step_a", s.step_a.to_rows()},
          {"step_exit", s.step_exit},
          {"min_duration", s.min_duration},
          {"max_duration", s.max_duration},
          {"tool_prob", s.tool_prob.to_rows()},
          {"spurious_tool_prob", s.spurious_tool_prob},
          {"feature_mean", s.feature_mean.to_rows()},
          {"feature_noise", s.feature_noise},
          {"max_segments", s.max_segments}};
}

inline GenerativeSpec spec_from_json(const json& j) {
  if (j.value("format", "") != "surgflow-genspec/1") throw ParseError("not a surgflow-genspec/1 document");
  try {
    GenerativeSpec s;
    s.name = j.at("name").get<std::string>();
    s.taxonomy = parse_taxonomy(j.at("taxonomy").get<std::string>());
    s.fps = j.at("fps").get<double>();
    s.segment_seconds = j.at("segment_seconds").get<double>();
    s.phase_pi = j.at("phase_pi").get<Vec>();
    s.phase_a = Matrix::from_rows(j.at("phase_a").get<std::vector<Vec>>());
    s.phase_end = j.at("phase_end").get<Vec>();
    s.step_pi = j.at("step_pi").get<Vec>();
    s.step_a = Matrix::from_rows(j.at("step_a").get<std::vector<Vec>>());
    s.step_exit = j.at("step_exit").get<Vec>();
    s.min_duration = j.at("min_duration").get<std::vector<std::size_t>>();
    s.max_duration = j.at("max_duration").get<std::vector<std::size_t>>();
    s.tool_prob = Matrix::from_rows(j.at("tool_prob").get<std::vector<Vec>>());
    s.spurious_tool_prob = j.at("spurious_tool_prob").get<double>();
    s.feature_mean = Matrix::from_rows(j.at("feature_mean").get<std::vector<Vec>>());
    s.feature_noise = j.at("feature_noise").get<double>();
    s.max_segments = j.at("max_segments").get<std::size_t>();
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("generative spec: ") + e.what());
  }
}

}  // namespace surgflow
