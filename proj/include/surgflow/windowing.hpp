// Overlapping fixed-size sub-sequences over a surgery timeline and the
// per-window observation record.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "surgflow/common.hpp"
#include "surgflow/taxonomy.hpp"

namespace surgflow {

using nlohmann::json;

struct WindowConfig {
  double t_scale = 2.0;  // seconds
  double t_shift = 1.0;  // seconds
  double fps = 25.0;

  std::size_t length_frames() const {
    return static_cast<std::size_t>(std::max<std::int64_t>(0, round_half_up(t_scale * fps)));
  }
  std::size_t shift_frames() const {
    return static_cast<std::size_t>(std::max<std::int64_t>(0, round_half_up(t_shift * fps)));
  }

  void validate() const {
    if (!(fps > 0.0)) throw ValidationError("window config: fps must be positive");
    if (!(t_scale > 0.0) || !(t_shift > 0.0)) {
      throw ValidationError("window config: t_scale and t_shift must be positive");
    }
    if (t_shift > t_scale) throw ValidationError("window config: t_shift exceeds t_scale");
    if (length_frames() < 2) throw ValidationError("window config: window shorter than 2 frames");
    if (shift_frames() < 1) throw ValidationError("window config: shift shorter than 1 frame");
  }

  friend bool operator==(const WindowConfig&, const WindowConfig&) = default;
};

struct SubSequence {
  std::size_t index = 1;  // 1-based
  std::size_t start_frame = 0;
  std::size_t end_frame = 0;  // inclusive

  std::size_t length() const { return end_frame - start_frame + 1; }
  friend bool operator==(const SubSequence&, const SubSequence&) = default;
};

struct ObservationRecord {
  SubSequence window;
  std::vector<std::size_t> tools_present;  // sorted, unique
  std::optional<Vec> feature;
  std::optional<Vec> step_probs;
  std::optional<std::size_t> truth_step;
  std::optional<std::size_t> truth_phase;

  friend bool operator==(const ObservationRecord&, const ObservationRecord&) = default;
};

/// Windows start at frame 0 and advance by the shift; trailing frames that
/// cannot fill a whole window are dropped.
inline std::vector<SubSequence> make_windows(std::size_t frame_count, const WindowConfig& cfg) {
  cfg.validate();
  const std::size_t len = cfg.length_frames();
  const std::size_t shift = cfg.shift_frames();
  if (frame_count < len) {
    throw InputError("surgery has " + std::to_string(frame_count) +
                     " frames, fewer than one window of " + std::to_string(len));
  }
  const std::size_t n = (frame_count - len) / shift + 1;
  std::vector<SubSequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({i + 1, i * shift, i * shift + len - 1});
  }
  return out;
}

/// Majority step over the window's frames; among tied steps the one seen
/// latest in the window wins. Returns (step, phase of that step).
inline std::pair<std::size_t, std::size_t> window_truth(const AnnotatedSurgery& ann,
                                                        const Taxonomy& tax,
                                                        const SubSequence& w) {
  if (w.end_frame >= ann.frame_count || w.start_frame > w.end_frame) {
    throw InputError("window outside annotation bounds");
  }
  std::vector<std::size_t> counts(tax.n_steps(), 0);
  std::size_t best = 0;
  for (std::size_t f = w.start_frame; f <= w.end_frame; ++f) {
    best = std::max(best, ++counts.at(ann.step_of_frame[f]));
  }
  for (std::size_t f = w.end_frame + 1; f-- > w.start_frame;) {
    const std::size_t s = ann.step_of_frame[f];
    if (counts[s] == best) return {s, tax.step_phase[s]};
  }
  throw InputError("empty window");  // unreachable for a non-empty window
}

/// Union of tools whose intervals intersect the window.
inline std::vector<std::size_t> tools_in_window(const AnnotatedSurgery& ann,
                                                const SubSequence& w) {
  std::vector<std::size_t> out;
  const auto s = static_cast<std::int64_t>(w.start_frame);
  const auto e = static_cast<std::int64_t>(w.end_frame);
  for (const auto& iv : ann.tool_intervals) {
    if (iv.start_frame <= e && iv.end_frame >= s) out.push_back(iv.tool);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Tool-only observation records (with truth) for every window of a surgery.
inline std::vector<ObservationRecord> tool_observations(const AnnotatedSurgery& ann,
                                                        const Taxonomy& tax,
                                                        const WindowConfig& cfg) {
  std::vector<ObservationRecord> out;
  for (const auto& w : make_windows(ann.frame_count, cfg)) {
    ObservationRecord rec;
    rec.window = w;
    rec.tools_present = tools_in_window(ann, w);
    const auto [s, p] = window_truth(ann, tax, w);
    rec.truth_step = s;
    rec.truth_phase = p;
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Observation stream, one JSON object per line:
// {"window_index":1,"start_frame":0,"end_frame":49,"tools":["Knife"],
//  "feature":[...],"step_probs":[...]}

inline json observation_to_json(const ObservationRecord& rec, const Taxonomy& tax) {
  json j;
  j["window_index"] = rec.window.index;
  j["start_frame"] = rec.window.start_frame;
  j["end_frame"] = rec.window.end_frame;
  json tools = json::array();
  for (std::size_t t : rec.tools_present) tools.push_back(tax.tools.at(t));
  j["tools"] = std::move(tools);
  if (rec.feature) j["feature"] = *rec.feature;
  if (rec.step_probs) j["step_probs"] = *rec.step_probs;
  return j;
}

inline void check_step_probs(const Vec& p, std::size_t n_steps) {
  if (p.size() != n_steps) throw ParseError("step_probs has wrong length");
  if (!is_distribution(p, 1e-9)) throw ParseError("step_probs is not a distribution");
}

inline ObservationRecord observation_from_json(const json& j, const Taxonomy& tax) {
  try {
    ObservationRecord rec;
    rec.window.index = j.at("window_index").get<std::size_t>();
    rec.window.start_frame = j.at("start_frame").get<std::size_t>();
    rec.window.end_frame = j.at("end_frame").get<std::size_t>();
    if (rec.window.index < 1) throw ParseError("window_index is 1-based");
    if (rec.window.end_frame < rec.window.start_frame) throw ParseError("end_frame < start_frame");
    if (j.contains("tools")) {
      for (const auto& t : j.at("tools")) {
        const auto idx = tax.tool_index(t.get<std::string>());
        if (!idx) throw ParseError("unknown tool '" + t.get<std::string>() + "'");
        rec.tools_present.push_back(*idx);
      }
      std::sort(rec.tools_present.begin(), rec.tools_present.end());
      rec.tools_present.erase(std::unique(rec.tools_present.begin(), rec.tools_present.end()),
                              rec.tools_present.end());
    }
    if (j.contains("feature") && !j.at("feature").is_null()) {
      rec.feature = j.at("feature").get<Vec>();
    }
    if (j.contains("step_probs") && !j.at("step_probs").is_null()) {
      rec.step_probs = j.at("step_probs").get<Vec>();
      check_step_probs(*rec.step_probs, tax.n_steps());
    }
    return rec;
  } catch (const json::exception& e) {
    throw ParseError(std::string("observation record: ") + e.what());
  }
}

inline ObservationRecord parse_observation_line(std::string_view line, const Taxonomy& tax) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("observation line is not a JSON object");
  return observation_from_json(j, tax);
}

inline std::string format_observations(const std::vector<ObservationRecord>& recs,
                                       const Taxonomy& tax) {
  std::string out;
  for (const auto& r : recs) {
    out += observation_to_json(r, tax).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<ObservationRecord> parse_observations(std::string_view text,
                                                         const Taxonomy& tax) {
  std::vector<ObservationRecord> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string line = trim(text.substr(pos, nl - pos));
    if (!line.empty()) out.push_back(parse_observation_line(line, tax));
    pos = nl + 1;
  }
  return out;
}

}  // namespace surgflow
