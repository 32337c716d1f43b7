// Two-level label universe (phases > steps) plus surgical tools, and the
// per-frame ground truth that is annotated against it.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "surgflow/common.hpp"

namespace surgflow {

struct Taxonomy {
  std::string name;
  std::vector<std::string> phases;
  std::vector<std::string> steps;
  std::vector<std::string> tools;
  std::vector<std::size_t> step_phase;      // step index -> phase index
  std::vector<std::size_t> initial_phases;  // sorted phase indices

  std::size_t n_phases() const { return phases.size(); }
  std::size_t n_steps() const { return steps.size(); }
  std::size_t n_tools() const { return tools.size(); }

  std::optional<std::size_t> phase_index(std::string_view label) const {
    return find(phases, label);
  }
  std::optional<std::size_t> step_index(std::string_view label) const {
    return find(steps, label);
  }
  std::optional<std::size_t> tool_index(std::string_view label) const {
    return find(tools, label);
  }

  std::vector<std::size_t> steps_of(std::size_t phase) const {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < steps.size(); ++s) {
      if (step_phase[s] == phase) out.push_back(s);
    }
    return out;
  }

  /// Throws ValidationError naming the first broken invariant.
  void validate() const;

  friend bool operator==(const Taxonomy&, const Taxonomy&) = default;

 private:
  static std::optional<std::size_t> find(const std::vector<std::string>& v,
                                         std::string_view label) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] == label) return i;
    }
    return std::nullopt;
  }
};

namespace detail {

inline void check_label(const std::string& label, const char* level) {
  if (label.empty()) throw ValidationError(std::string("empty ") + level + " label");
  if (label.find_first_of(",=\n\r\"") != std::string::npos || label.front() == '[' ||
      label.front() == '#' || trim(label) != label) {
    throw ValidationError(std::string("invalid ") + level + " label '" + label + "'");
  }
}

inline void check_unique(const std::vector<std::string>& labels, const char* level) {
  std::set<std::string> seen;
  for (const auto& l : labels) {
    check_label(l, level);
    if (!seen.insert(l).second) {
      throw ValidationError(std::string("duplicate ") + level + " label '" + l + "'");
    }
  }
}

}  // namespace detail

inline void Taxonomy::validate() const {
  if (phases.empty()) throw ValidationError("taxonomy has no phases");
  detail::check_unique(phases, "phase");
  detail::check_unique(steps, "step");
  detail::check_unique(tools, "tool");
  if (step_phase.size() != steps.size()) {
    throw ValidationError("step_to_phase map is not total");
  }
  std::vector<std::size_t> per_phase(phases.size(), 0);
  for (std::size_t s = 0; s < steps.size(); ++s) {
    if (step_phase[s] >= phases.size()) {
      throw ValidationError("unknown phase for step '" + steps[s] + "'");
    }
    ++per_phase[step_phase[s]];
  }
  for (std::size_t p = 0; p < phases.size(); ++p) {
    if (per_phase[p] == 0) throw ValidationError("empty phase '" + phases[p] + "'");
  }
  if (initial_phases.empty()) throw ValidationError("no initial phase");
  for (std::size_t p : initial_phases) {
    if (p >= phases.size()) throw ValidationError("initial phase out of range");
  }
}

/// Parses the taxonomy text format:
///
///   name: cataract
///   [phases]
///   Opening
///   [initial_phases]
///   Opening
///   [steps]
///   Incision = Opening
///   [tools]
///   Knife
///
/// `#` starts a comment line. A missing [initial_phases] section means every
/// phase may start a surgery.
inline Taxonomy parse_taxonomy(std::string_view text) {
  Taxonomy tax;
  std::vector<std::pair<std::string, std::string>> step_lines;
  std::vector<std::string> initial_names;
  bool saw_initial = false;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw ParseError("taxonomy line " + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section != "phases" && section != "initial_phases" && section != "steps" &&
          section != "tools") {
        fail("unknown section '" + section + "'");
      }
      if (section == "initial_phases") saw_initial = true;
      continue;
    }
    if (section.empty()) {
      const auto colon = line.find(':');
      if (colon == std::string::npos) fail("expected 'key: value' before sections");
      const std::string key = trim(std::string_view(line).substr(0, colon));
      const std::string value = trim(std::string_view(line).substr(colon + 1));
      if (key == "name") {
        tax.name = value;
      } else if (key != "format") {
        fail("unknown key '" + key + "'");
      }
    } else if (section == "phases") {
      tax.phases.push_back(line);
    } else if (section == "initial_phases") {
      initial_names.push_back(line);
    } else if (section == "tools") {
      tax.tools.push_back(line);
    } else {
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail("expected 'Step = Phase'");
      step_lines.emplace_back(trim(std::string_view(line).substr(0, eq)),
                              trim(std::string_view(line).substr(eq + 1)));
    }
  }
  detail::check_unique(tax.phases, "phase");
  for (const auto& [step, phase] : step_lines) {
    const auto p = tax.phase_index(phase);
    if (!p) throw ValidationError("step '" + step + "' maps to unknown phase '" + phase + "'");
    tax.steps.push_back(step);
    tax.step_phase.push_back(*p);
  }
  if (saw_initial) {
    for (const auto& n : initial_names) {
      const auto p = tax.phase_index(n);
      if (!p) throw ValidationError("unknown initial phase '" + n + "'");
      tax.initial_phases.push_back(*p);
    }
    std::sort(tax.initial_phases.begin(), tax.initial_phases.end());
    tax.initial_phases.erase(std::unique(tax.initial_phases.begin(), tax.initial_phases.end()),
                             tax.initial_phases.end());
  } else {
    for (std::size_t p = 0; p < tax.phases.size(); ++p) tax.initial_phases.push_back(p);
  }
  tax.validate();
  return tax;
}

inline std::string format_taxonomy(const Taxonomy& tax) {
  std::ostringstream out;
  out << "format: surgflow-taxonomy/1\n";
  if (!tax.name.empty()) out << "name: " << tax.name << "\n";
  out << "\n[phases]\n";
  for (const auto& p : tax.phases) out << p << "\n";
  out << "\n[initial_phases]\n";
  for (std::size_t p : tax.initial_phases) out << tax.phases[p] << "\n";
  out << "\n[steps]\n";
  for (std::size_t s = 0; s < tax.steps.size(); ++s) {
    out << tax.steps[s] << " = " << tax.phases[tax.step_phase[s]] << "\n";
  }
  out << "\n[tools]\n";
  for (const auto& t : tax.tools) out << t << "\n";
  return out.str();
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

inline Taxonomy load_taxonomy(const std::filesystem::path& path) {
  return parse_taxonomy(read_text_file(path));
}

inline void save_taxonomy(const Taxonomy& tax, const std::filesystem::path& path) {
  write_text_file(path, format_taxonomy(tax));
}

/// Cataract taxonomy: 5 phases, 20 steps. Only "Incision",
/// "Phacoemulsification", "Stitching up", "Wound Hydration", "Point Suturing",
/// "Opening" and "Closure" are attested names; the rest is a reconstruction.
inline constexpr std::string_view kDefaultTaxonomyText = R"(format: surgflow-taxonomy/1
name: cataract

[phases]
Opening
Capsule Preparation
Lens Removal
Implantation
Closure

[initial_phases]
Opening

[steps]
Incision = Opening
Side-port Incision = Opening
Anesthetic Injection = Opening
Viscoelastic Injection = Opening
Capsule Staining = Capsule Preparation
Capsulorhexis = Capsule Preparation
Hydrodissection = Capsule Preparation
Nucleus Rotation = Capsule Preparation
Phacoemulsification = Lens Removal
Nucleus Chopping = Lens Removal
Cortex Aspiration = Lens Removal
Capsule Polishing = Lens Removal
Viscoelastic Refill = Implantation
Lens Loading = Implantation
Lens Insertion = Implantation
Viscoelastic Removal = Implantation
Wound Hydration = Closure
Point Suturing = Closure
Stitching up = Closure
Antibiotic Injection = Closure

[tools]
Knife
Paracentesis Knife
Cannula
Syringe
Cystotome
Rhexis Forceps
Phaco Handpiece
Chopper
I/A Handpiece
Lens Injector
Needle Holder
Suture Forceps
)";

inline Taxonomy default_taxonomy() { return parse_taxonomy(kDefaultTaxonomyText); }

// ---------------------------------------------------------------------------
// Annotated ground truth

struct ToolInterval {
  std::size_t tool = 0;
  std::int64_t start_frame = 0;  // inclusive
  std::int64_t end_frame = 0;    // inclusive

  friend bool operator==(const ToolInterval&, const ToolInterval&) = default;
};

struct AnnotatedSurgery {
  std::string surgery_id;
  double fps = 25.0;
  std::size_t frame_count = 0;
  std::vector<std::size_t> step_of_frame;
  std::vector<std::size_t> phase_of_frame;
  std::vector<ToolInterval> tool_intervals;

  friend bool operator==(const AnnotatedSurgery&, const AnnotatedSurgery&) = default;
};

struct Violation {
  enum class Kind { FrameCount, LabelRange, PhaseMismatch, IntervalBounds, Flicker, Fps };
  Kind kind;
  std::string message;
  std::optional<std::size_t> frame;
};

using ValidationReport = std::vector<Violation>;

/// Reports every broken AnnotatedSurgery invariant; never throws.
inline ValidationReport validate_annotation(const AnnotatedSurgery& ann, const Taxonomy& tax) {
  ValidationReport report;
  using K = Violation::Kind;
  if (!(ann.fps > 0.0)) report.push_back({K::Fps, "fps must be positive", std::nullopt});
  if (ann.step_of_frame.size() != ann.frame_count ||
      ann.phase_of_frame.size() != ann.frame_count) {
    report.push_back({K::FrameCount, "per-frame label count differs from frame_count",
                      std::nullopt});
    return report;
  }
  bool labels_ok = true;
  for (std::size_t f = 0; f < ann.frame_count; ++f) {
    const std::size_t s = ann.step_of_frame[f];
    const std::size_t p = ann.phase_of_frame[f];
    if (s >= tax.n_steps() || p >= tax.n_phases()) {
      report.push_back({K::LabelRange, "frame " + std::to_string(f) + ": label out of range", f});
      labels_ok = false;
      continue;
    }
    if (tax.step_phase[s] != p) {
      report.push_back({K::PhaseMismatch,
                        "frame " + std::to_string(f) + ": step '" + tax.steps[s] +
                            "' is incompatible with phase '" + tax.phases[p] + "'",
                        f});
    }
  }
  if (labels_ok && ann.frame_count >= 3) {
    for (std::size_t f = 1; f + 1 < ann.frame_count; ++f) {
      const std::size_t s = ann.step_of_frame[f];
      if (s != ann.step_of_frame[f - 1] && s != ann.step_of_frame[f + 1]) {
        report.push_back({K::Flicker,
                          "frame " + std::to_string(f) + ": single-frame step run", f});
      }
    }
  }
  for (const auto& iv : ann.tool_intervals) {
    const bool bad_tool = iv.tool >= tax.n_tools();
    const bool bad_bounds = iv.start_frame < 0 || iv.end_frame < iv.start_frame ||
                            iv.end_frame >= static_cast<std::int64_t>(ann.frame_count);
    if (bad_tool || bad_bounds) {
      report.push_back({K::IntervalBounds,
                        "tool interval [" + std::to_string(iv.start_frame) + "," +
                            std::to_string(iv.end_frame) + "] out of bounds",
                        std::nullopt});
    }
  }
  return report;
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline std::int64_t parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw ParseError("");
    return v;
  } catch (const std::exception&) {
    throw ParseError("invalid integer '" + s + "' in " + what);
  }
}

}  // namespace detail

/// CSV with header `frame,step,phase`, frames 0..n-1 in order.
inline std::string format_frames_csv(const AnnotatedSurgery& ann, const Taxonomy& tax) {
  std::string out = "frame,step,phase\n";
  for (std::size_t f = 0; f < ann.frame_count; ++f) {
    out += std::to_string(f);
    out += ',';
    out += tax.steps.at(ann.step_of_frame[f]);
    out += ',';
    out += tax.phases.at(ann.phase_of_frame[f]);
    out += '\n';
  }
  return out;
}

/// CSV with header `tool,start_frame,end_frame`, inclusive bounds.
inline std::string format_tools_csv(const AnnotatedSurgery& ann, const Taxonomy& tax) {
  std::string out = "tool,start_frame,end_frame\n";
  for (const auto& iv : ann.tool_intervals) {
    out += tax.tools.at(iv.tool) + "," + std::to_string(iv.start_frame) + "," +
           std::to_string(iv.end_frame) + "\n";
  }
  return out;
}

inline AnnotatedSurgery parse_annotation(std::string_view frames_csv, std::string_view tools_csv,
                                         const Taxonomy& tax, std::string surgery_id,
                                         double fps) {
  AnnotatedSurgery ann;
  ann.surgery_id = std::move(surgery_id);
  ann.fps = fps;
  {
    std::istringstream in{std::string(frames_csv)};
    std::string line;
    if (!std::getline(in, line) || trim(line) != "frame,step,phase") {
      throw ParseError("frames CSV must start with header 'frame,step,phase'");
    }
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      const auto cols = detail::split_csv(line);
      if (cols.size() != 3) throw ParseError("frames CSV: expected 3 columns: " + line);
      const auto f = detail::parse_int(cols[0], "frames CSV");
      if (f != static_cast<std::int64_t>(ann.step_of_frame.size())) {
        throw ParseError("frames CSV: frames must be consecutive from 0 (got " + cols[0] + ")");
      }
      const auto s = tax.step_index(cols[1]);
      const auto p = tax.phase_index(cols[2]);
      if (!s) throw ParseError("frames CSV: unknown step '" + cols[1] + "'");
      if (!p) throw ParseError("frames CSV: unknown phase '" + cols[2] + "'");
      ann.step_of_frame.push_back(*s);
      ann.phase_of_frame.push_back(*p);
    }
    ann.frame_count = ann.step_of_frame.size();
  }
  {
    std::istringstream in{std::string(tools_csv)};
    std::string line;
    if (!std::getline(in, line) || trim(line) != "tool,start_frame,end_frame") {
      throw ParseError("tools CSV must start with header 'tool,start_frame,end_frame'");
    }
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      const auto cols = detail::split_csv(line);
      if (cols.size() != 3) throw ParseError("tools CSV: expected 3 columns: " + line);
      const auto t = tax.tool_index(cols[0]);
      if (!t) throw ParseError("tools CSV: unknown tool '" + cols[0] + "'");
      ann.tool_intervals.push_back({*t, detail::parse_int(cols[1], "tools CSV"),
                                    detail::parse_int(cols[2], "tools CSV")});
    }
  }
  return ann;
}

/// Converts contiguous per-tool presence flags (one per frame) into intervals.
inline std::vector<ToolInterval> intervals_from_presence(
    const std::vector<std::vector<bool>>& present_by_tool) {
  std::vector<ToolInterval> out;
  for (std::size_t t = 0; t < present_by_tool.size(); ++t) {
    const auto& pres = present_by_tool[t];
    std::size_t f = 0;
    while (f < pres.size()) {
      if (!pres[f]) {
        ++f;
        continue;
      }
      std::size_t e = f;
      while (e + 1 < pres.size() && pres[e + 1]) ++e;
      out.push_back({t, static_cast<std::int64_t>(f), static_cast<std::int64_t>(e)});
      f = e + 1;
    }
  }
  return out;
}

}  // namespace surgflow
