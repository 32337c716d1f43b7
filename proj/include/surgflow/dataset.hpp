// On-disk surgery datasets: ground truth CSVs, per-segment features and
// window observations, tied together by manifest.json.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "surgflow/common.hpp"
#include "surgflow/recognizer.hpp"
#include "surgflow/taxonomy.hpp"
#include "surgflow/windowing.hpp"

namespace surgflow {

using nlohmann::json;

/// Feature vector that holds over an inclusive frame range.
struct Segment {
  std::size_t start_frame = 0;
  std::size_t end_frame = 0;
  Vec feature;

  friend bool operator==(const Segment&, const Segment&) = default;
};

struct SurgeryRecord {
  AnnotatedSurgery annotation;
  std::vector<Segment> segments;  // ordered, contiguous; may be empty

  const std::string& id() const { return annotation.surgery_id; }
};

struct Dataset {
  Taxonomy taxonomy;
  double fps = 25.0;
  WindowConfig native_window{};
  std::vector<SurgeryRecord> surgeries;
  json info = json::object();  // generator provenance (spec name, seed)

  const SurgeryRecord& find(const std::string& id) const {
    for (const auto& s : surgeries) {
      if (s.id() == id) return s;
    }
    throw InputError("no surgery '" + id + "' in dataset");
  }
  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    for (const auto& s : surgeries) out.push_back(s.id());
    return out;
  }
};

/// Frame-overlap-weighted mean of the segment features under a window.
inline std::optional<Vec> window_feature(const std::vector<Segment>& segs, const SubSequence& w) {
  if (segs.empty()) return std::nullopt;
  Vec acc;
  double total = 0.0;
  for (const auto& s : segs) {
    const std::size_t b = std::max(s.start_frame, w.start_frame);
    const std::size_t e = std::min(s.end_frame, w.end_frame);
    if (b > e) continue;
    const double weight = static_cast<double>(e - b + 1);
    if (acc.empty()) acc.assign(s.feature.size(), 0.0);
    if (s.feature.size() != acc.size()) throw ValidationError("segment features differ in length");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weight * s.feature[i];
    total += weight;
  }
  if (total == 0.0) return std::nullopt;
  for (double& x : acc) x /= total;
  return acc;
}

/// Windows with tools, features (when segments exist) and truth labels.
inline std::vector<ObservationRecord> build_observations(const SurgeryRecord& s, const Taxonomy& tax,
                                                         const WindowConfig& cfg) {
  auto recs = tool_observations(s.annotation, tax, cfg);
  for (auto& r : recs) r.feature = window_feature(s.segments, r.window);
  return recs;
}

inline std::vector<TrainingSurgery> training_set(const Dataset& ds, const std::vector<std::string>& ids,
                                                 const WindowConfig& cfg) {
  std::vector<TrainingSurgery> out;
  for (const auto& id : ids) out.push_back({id, build_observations(ds.find(id), ds.taxonomy, cfg)});
  return out;
}

inline std::string format_segments(const std::vector<Segment>& segs) {
  std::string out;
  for (const auto& s : segs) {
    out += json{{"start_frame", s.start_frame}, {"end_frame", s.end_frame}, {"feature", s.feature}}.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<Segment> parse_segments(std::string_view text) {
  std::vector<Segment> out;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      out.push_back({j.at("start_frame").get<std::size_t>(), j.at("end_frame").get<std::size_t>(),
                     j.at("feature").get<Vec>()});
    } catch (const json::exception& e) {
      throw ParseError("segments line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

/// Writes manifest.json, taxonomy.txt and per surgery
/// <id>.frames.csv, <id>.tools.csv, <id>.segments.jsonl, <id>.obs.jsonl.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / "taxonomy.txt", format_taxonomy(ds.taxonomy));
  json ids = json::array();
  for (const auto& s : ds.surgeries) {
    const auto& id = s.id();
    ids.push_back(id);
    write_text_file(dir / (id + ".frames.csv"), format_frames_csv(s.annotation, ds.taxonomy));
    write_text_file(dir / (id + ".tools.csv"), format_tools_csv(s.annotation, ds.taxonomy));
    write_text_file(dir / (id + ".segments.jsonl"), format_segments(s.segments));
    write_text_file(dir / (id + ".obs.jsonl"),
                    format_observations(build_observations(s, ds.taxonomy, ds.native_window), ds.taxonomy));
  }
  json manifest{{"format", "surgflow-dataset/1"},
                {"taxonomy", "taxonomy.txt"},
                {"fps", ds.fps},
                {"t_scale", ds.native_window.t_scale},
                {"t_shift", ds.native_window.t_shift},
                {"surgeries", ids},
                {"info", ds.info}};
  write_text_file(dir / "manifest.json", manifest.dump(1) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw InputError("dataset directory '" + dir.string() + "' not found");
  json manifest;
  try {
    manifest = json::parse(read_text_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest.json: ") + e.what());
  }
  if (manifest.value("format", "") != "surgflow-dataset/1") throw ParseError("not a surgflow dataset manifest");
  Dataset ds;
  try {
    ds.taxonomy = load_taxonomy(dir / manifest.at("taxonomy").get<std::string>());
    ds.fps = manifest.at("fps").get<double>();
    ds.native_window = {manifest.at("t_scale").get<double>(), manifest.at("t_shift").get<double>(), ds.fps};
    ds.info = manifest.value("info", json::object());
    for (const auto& jid : manifest.at("surgeries")) {
      const auto id = jid.get<std::string>();
      SurgeryRecord rec;
      rec.annotation = parse_annotation(read_text_file(dir / (id + ".frames.csv")),
                                        read_text_file(dir / (id + ".tools.csv")), ds.taxonomy, id, ds.fps);
      const auto seg_path = dir / (id + ".segments.jsonl");
      if (std::filesystem::exists(seg_path)) rec.segments = parse_segments(read_text_file(seg_path));
      ds.surgeries.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest.json: ") + e.what());
  }
  return ds;
}

}  // namespace surgflow
