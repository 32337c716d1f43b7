// Window-level motion features (motion histograms, bag of visual words) and
// KNN retrieval of step probabilities.
#pragma once

#include <array>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "surgflow/common.hpp"
#include "surgflow/windowing.hpp"

namespace surgflow {

struct FlowRecord {
  std::size_t frame = 0;
  double x = 0.0;
  double y = 0.0;
  double dx = 0.0;
  double dy = 0.0;
};

struct FrameDims {
  double width = 0.0;
  double height = 0.0;
};

inline constexpr std::size_t kHistBins = 8;
inline constexpr std::size_t kMotionHistogramDim = 4 * kHistBins;

/// Four 8-bin histograms, each L1-normalized: amplitude counts, then
/// amplitude-weighted x position, y position and direction.
struct MotionHistogram {
  std::array<double, kHistBins> amplitude{};
  std::array<double, kHistBins> x_spatial{};
  std::array<double, kHistBins> y_spatial{};
  std::array<double, kHistBins> direction{};
  bool zero_motion = false;

  Vec to_vector() const {
    Vec v;
    v.reserve(kMotionHistogramDim);
    for (const auto* h : {&amplitude, &x_spatial, &y_spatial, &direction}) {
      v.insert(v.end(), h->begin(), h->end());
    }
    return v;
  }
};

/// Identity hook for spatially normalized flow streams.
using FlowNormalizer = std::function<FlowRecord(const FlowRecord&)>;

namespace detail {

inline std::size_t linear_bin(double value, double upper) {
  if (!(upper > 0.0) || !(value > 0.0)) return 0;
  const double b = std::floor(value / upper * static_cast<double>(kHistBins));
  return static_cast<std::size_t>(std::min<double>(b, kHistBins - 1));
}

inline std::size_t direction_bin(double dx, double dy) {
  double theta = std::atan2(dy, dx);
  if (theta < 0.0) theta += 2.0 * std::numbers::pi;
  const auto b = static_cast<std::size_t>(std::floor(theta / (std::numbers::pi / 4.0)));
  return b % kHistBins;
}

inline void l1(std::array<double, kHistBins>& h) {
  double s = 0.0;
  for (double x : h) s += x;
  if (s > 0.0) {
    for (double& x : h) x /= s;
  }
}

}  // namespace detail

/// Aggregates the flow records falling inside window `w`. Amplitudes are
/// binned linearly on [0, amp_max] with overflow in the top bin; positions
/// linearly on [0, width] and [0, height]; direction in 45 degree sectors
/// starting at 0. A window without motion yields all amplitude mass in bin 0
/// and zero weighted histograms, with `zero_motion` set.
inline MotionHistogram motion_histogram(std::span<const FlowRecord> flows, const SubSequence& w,
                                        const FrameDims& dims, double amp_max) {
  if (!(amp_max > 0.0)) throw ValidationError("amp_max must be positive");
  MotionHistogram h;
  std::size_t n = 0;
  double total_amp = 0.0;
  for (const auto& f : flows) {
    if (f.frame < w.start_frame || f.frame > w.end_frame) continue;
    ++n;
    const double a = std::hypot(f.dx, f.dy);
    total_amp += a;
    h.amplitude[detail::linear_bin(a, amp_max)] += 1.0;
    if (a > 0.0) {
      h.x_spatial[detail::linear_bin(f.x, dims.width)] += a;
      h.y_spatial[detail::linear_bin(f.y, dims.height)] += a;
      h.direction[detail::direction_bin(f.dx, f.dy)] += a;
    }
  }
  if (n == 0) {
    h.amplitude[0] = 1.0;
    h.zero_motion = true;
    return h;
  }
  h.zero_motion = !(total_amp > 0.0);
  detail::l1(h.amplitude);
  detail::l1(h.x_spatial);
  detail::l1(h.y_spatial);
  detail::l1(h.direction);
  return h;
}

/// `quantile` of flow amplitudes, used to set amp_max from training data.
inline double learn_amp_max(std::span<const FlowRecord> flows, double quantile = 0.99,
                            double fallback = 20.0) {
  std::vector<double> amps;
  amps.reserve(flows.size());
  for (const auto& f : flows) amps.push_back(std::hypot(f.dx, f.dy));
  if (amps.empty()) return fallback;
  const auto k = static_cast<std::size_t>(
      std::clamp(quantile, 0.0, 1.0) * static_cast<double>(amps.size() - 1));
  std::nth_element(amps.begin(), amps.begin() + static_cast<std::ptrdiff_t>(k), amps.end());
  return amps[k] > 0.0 ? amps[k] : fallback;
}

// ---------------------------------------------------------------------------
// Bag of visual words

struct LocalDescriptor {
  std::size_t window_index = 0;
  Vec vector;
};

struct Dictionary {
  std::vector<Vec> centroids;

  std::size_t size() const { return centroids.size(); }
  std::size_t dim() const { return centroids.empty() ? 0 : centroids.front().size(); }
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    d += t * t;
  }
  return d;
}

inline std::size_t nearest_centroid(const Dictionary& dict, std::span<const double> v) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < dict.centroids.size(); ++c) {
    const double d = squared_distance(dict.centroids[c], v);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

/// k-means with k-means++ seeding; at most 100 Lloyd iterations, stopping
/// once no centroid moves by more than 1e-6.
inline Dictionary bovw_learn_dictionary(std::span<const LocalDescriptor> descriptors,
                                        std::size_t words, std::uint64_t seed) {
  constexpr int kMaxIterations = 100;
  constexpr double kShiftTolerance = 1e-6;
  if (words < 1) throw ValidationError("dictionary needs at least one word");
  if (descriptors.size() < words) {
    throw InputError("fewer descriptors than dictionary words");
  }
  const std::size_t dim = descriptors.front().vector.size();
  for (const auto& d : descriptors) {
    if (d.vector.size() != dim) throw ValidationError("descriptor dimensionality mismatch");
    for (double x : d.vector) {
      if (!std::isfinite(x)) throw ValidationError("non-finite descriptor value");
    }
  }
  {
    std::size_t distinct = 1;
    for (std::size_t i = 1; i < descriptors.size() && distinct < words; ++i) {
      bool fresh = true;
      for (std::size_t j = 0; j < i && fresh; ++j) {
        fresh = descriptors[i].vector != descriptors[j].vector;
      }
      distinct += fresh ? 1 : 0;
    }
    if (distinct < words) throw InputError("degenerate data: fewer distinct descriptors than words");
  }

  std::mt19937_64 rng(seed);
  Dictionary dict;
  std::uniform_int_distribution<std::size_t> pick(0, descriptors.size() - 1);
  dict.centroids.push_back(descriptors[pick(rng)].vector);
  std::vector<double> d2(descriptors.size());
  while (dict.centroids.size() < words) {
    double total = 0.0;
    for (std::size_t i = 0; i < descriptors.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : dict.centroids) best = std::min(best, squared_distance(c, descriptors[i].vector));
      d2[i] = best;
      total += best;
    }
    std::uniform_real_distribution<double> u(0.0, total);
    double r = u(rng);
    std::size_t chosen = descriptors.size() - 1;
    for (std::size_t i = 0; i < descriptors.size(); ++i) {
      if (d2[i] > 0.0 && r < d2[i]) {
        chosen = i;
        break;
      }
      r -= d2[i];
    }
    if (d2[chosen] == 0.0) {
      chosen = static_cast<std::size_t>(std::max_element(d2.begin(), d2.end()) - d2.begin());
    }
    dict.centroids.push_back(descriptors[chosen].vector);
  }

  std::vector<std::size_t> assign(descriptors.size(), 0);
  for (int it = 0; it < kMaxIterations; ++it) {
    for (std::size_t i = 0; i < descriptors.size(); ++i) {
      assign[i] = nearest_centroid(dict, descriptors[i].vector);
    }
    std::vector<Vec> sums(words, Vec(dim, 0.0));
    std::vector<std::size_t> counts(words, 0);
    for (std::size_t i = 0; i < descriptors.size(); ++i) {
      ++counts[assign[i]];
      for (std::size_t k = 0; k < dim; ++k) sums[assign[i]][k] += descriptors[i].vector[k];
    }
    double max_shift = 0.0;
    for (std::size_t c = 0; c < words; ++c) {
      Vec next;
      if (counts[c] == 0) {
        // Empty cluster: move to the point farthest from its centroid.
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < descriptors.size(); ++i) {
          const double d = squared_distance(dict.centroids[assign[i]], descriptors[i].vector);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        next = descriptors[far].vector;
      } else {
        next = sums[c];
        for (double& x : next) x /= static_cast<double>(counts[c]);
      }
      max_shift = std::max(max_shift, std::sqrt(squared_distance(next, dict.centroids[c])));
      dict.centroids[c] = std::move(next);
    }
    if (max_shift <= kShiftTolerance) break;
  }
  return dict;
}

struct BovwHistogram {
  Vec histogram;
  bool empty_window = false;
};

/// Nearest-word counts, L1-normalized. No descriptors gives the uniform vector.
inline BovwHistogram bovw_histogram(std::span<const LocalDescriptor> descs,
                                    const Dictionary& dict) {
  BovwHistogram out;
  out.histogram.assign(dict.size(), 0.0);
  if (descs.empty()) {
    normalize_l1(out.histogram);
    out.empty_window = true;
    return out;
  }
  for (const auto& d : descs) {
    if (d.vector.size() != dict.dim()) throw ValidationError("descriptor dimensionality mismatch");
    out.histogram[nearest_centroid(dict, d.vector)] += 1.0;
  }
  normalize_l1(out.histogram);
  return out;
}

// ---------------------------------------------------------------------------
// KNN retrieval

struct KnnPoint {
  Vec feature;
  std::size_t step = 0;
  std::size_t group = 0;  // owning surgery, for leave-one-surgery-out queries
};

struct KnnIndex {
  std::vector<KnnPoint> points;
  std::size_t k = 10;
  std::size_t n_steps = 0;

  void validate() const {
    if (points.empty()) throw InputError("empty KNN index");
    if (k < 1 || k > points.size()) throw ValidationError("K must be in [1, index size]");
    const std::size_t dim = points.front().feature.size();
    for (const auto& p : points) {
      if (p.feature.size() != dim) throw ValidationError("KNN points differ in dimensionality");
      if (p.step >= n_steps) throw ValidationError("KNN point label out of range");
    }
  }
};

/// Indices of the K nearest points (Euclidean), nearest first; ties keep
/// insertion order. Points whose group equals `exclude_group` are skipped.
inline std::vector<std::size_t> knn_neighbors(const KnnIndex& index, std::span<const double> query,
                                              std::optional<std::size_t> exclude_group = {}) {
  if (index.points.empty()) throw InputError("empty KNN index");
  const bool excluding = exclude_group.has_value();
  const std::size_t excluded = exclude_group.value_or(0);
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(index.points.size());
  for (std::size_t i = 0; i < index.points.size(); ++i) {
    const auto& p = index.points[i];
    if (excluding && p.group == excluded) continue;
    if (p.feature.size() != query.size()) throw ValidationError("query dimensionality mismatch");
    cand.emplace_back(squared_distance(p.feature, query), i);
  }
  const std::size_t k = std::min(index.k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(cand[i].second);
  return out;
}

/// Fraction of the K nearest neighbours carrying each step label.
inline Vec knn_step_probs(const KnnIndex& index, std::span<const double> query,
                          std::optional<std::size_t> exclude_group = {}) {
  const auto nn = knn_neighbors(index, query, exclude_group);
  if (nn.empty()) throw InputError("no KNN candidates left after exclusion");
  Vec probs(index.n_steps, 0.0);
  for (std::size_t i : nn) probs[index.points[i].step] += 1.0;
  for (double& p : probs) p /= static_cast<double>(nn.size());
  return probs;
}

inline json knn_to_json(const KnnIndex& index) {
  json pts = json::array();
  for (const auto& p : index.points) pts.push_back({{"f", p.feature}, {"s", p.step}, {"g", p.group}});
  return {{"format", "surgflow-knn/1"}, {"k", index.k}, {"n_steps", index.n_steps}, {"points", pts}};
}

inline KnnIndex knn_from_json(const json& j) {
  if (j.value("format", "") != "surgflow-knn/1") throw ParseError("not a surgflow-knn/1 document");
  KnnIndex idx;
  idx.k = j.at("k").get<std::size_t>();
  idx.n_steps = j.at("n_steps").get<std::size_t>();
  for (const auto& p : j.at("points")) {
    idx.points.push_back({p.at("f").get<Vec>(), p.at("s").get<std::size_t>(),
                          p.at("g").get<std::size_t>()});
  }
  idx.validate();
  return idx;
}

// ---------------------------------------------------------------------------
// Flow and descriptor JSONL streams. First line is a header object:
//   {"type":"flow_header","width":720,"height":576}
//   {"type":"descriptor_header","dim":162}

struct FlowStream {
  FrameDims dims;
  std::vector<FlowRecord> records;
};

struct DescriptorStream {
  std::size_t dim = 0;
  std::vector<LocalDescriptor> descriptors;
};

namespace detail {

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    ++line_no;
    const std::string line = trim(text.substr(pos, nl - pos));
    if (!line.empty()) fn(line, line_no);
    pos = nl + 1;
  }
}

inline json parse_json_line(const std::string& line, std::size_t line_no) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
  }
}

}  // namespace detail

inline FlowStream parse_flow_stream(std::string_view text) {
  FlowStream out;
  bool header = false;
  detail::for_each_line(text, [&](const std::string& line, std::size_t no) {
    const json j = detail::parse_json_line(line, no);
    try {
      if (!header) {
        if (j.value("type", "") != "flow_header") throw ParseError("missing flow_header");
        out.dims = {j.at("width").get<double>(), j.at("height").get<double>()};
        if (!(out.dims.width > 0.0) || !(out.dims.height > 0.0)) {
          throw ParseError("flow_header dimensions must be positive");
        }
        header = true;
        return;
      }
      FlowRecord r{j.at("frame").get<std::size_t>(), j.at("x").get<double>(),
                   j.at("y").get<double>(), j.at("dx").get<double>(), j.at("dy").get<double>()};
      if (r.x < 0.0 || r.y < 0.0 || r.x > out.dims.width || r.y > out.dims.height) {
        throw ParseError("flow point outside frame bounds");
      }
      out.records.push_back(r);
    } catch (const json::exception& e) {
      throw ParseError("line " + std::to_string(no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(no) + ": " + e.what());
    }
  });
  if (!header) throw ParseError("empty flow stream");
  return out;
}

inline DescriptorStream parse_descriptor_stream(std::string_view text) {
  DescriptorStream out;
  bool header = false;
  detail::for_each_line(text, [&](const std::string& line, std::size_t no) {
    const json j = detail::parse_json_line(line, no);
    try {
      if (!header) {
        if (j.value("type", "") != "descriptor_header") throw ParseError("missing descriptor_header");
        out.dim = j.at("dim").get<std::size_t>();
        header = true;
        return;
      }
      LocalDescriptor d{j.at("window_index").get<std::size_t>(), j.at("vector").get<Vec>()};
      if (d.vector.size() != out.dim) throw ParseError("descriptor dimensionality mismatch");
      out.descriptors.push_back(std::move(d));
    } catch (const json::exception& e) {
      throw ParseError("line " + std::to_string(no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(no) + ": " + e.what());
    }
  });
  if (!header) throw ParseError("empty descriptor stream");
  return out;
}

/// One motion-histogram observation per window of a flow stream.
inline std::vector<ObservationRecord> observations_from_flows(
    const FlowStream& stream, std::size_t frame_count, const WindowConfig& cfg, double amp_max,
    const FlowNormalizer& normalize = {}) {
  std::vector<FlowRecord> flows = stream.records;
  if (normalize) {
    for (auto& f : flows) f = normalize(f);
  }
  std::sort(flows.begin(), flows.end(),
            [](const FlowRecord& a, const FlowRecord& b) { return a.frame < b.frame; });
  std::vector<ObservationRecord> out;
  for (const auto& w : make_windows(frame_count, cfg)) {
    const auto lo = std::lower_bound(flows.begin(), flows.end(), w.start_frame,
                                     [](const FlowRecord& f, std::size_t v) { return f.frame < v; });
    const auto hi = std::upper_bound(flows.begin(), flows.end(), w.end_frame,
                                     [](std::size_t v, const FlowRecord& f) { return v < f.frame; });
    ObservationRecord rec;
    rec.window = w;
    rec.feature = motion_histogram(std::span<const FlowRecord>(lo, hi), w, stream.dims, amp_max)
                      .to_vector();
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace surgflow
