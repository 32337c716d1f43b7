// Small synthetic datasets and fast pipeline configs for tests.
#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "surgflow/surgflow.hpp"

namespace fixture {

using namespace surgflow;

inline PipelineConfig fast_config(PipelineKind kind, ObservationSource source = ObservationSource::Tools) {
  PipelineConfig c;
  c.kind = kind;
  c.source = source;
  c.gibbs = {400, 50, 0};
  c.knn_k = 5;
  c.crf_max_iter = 50;
  return c;
}

inline const Dataset& clean_dataset() {
  static const Dataset ds = generate_dataset(bundled_spec("clean"), 6, 21);
  return ds;
}

inline std::vector<std::string> first_ids(const Dataset& ds, std::size_t n) {
  auto ids = ds.ids();
  ids.resize(n);
  return ids;
}

inline std::vector<PipelineConfig> all_configs() {
  using K = PipelineKind;
  using S = ObservationSource;
  return {fast_config(K::BnHmm),         fast_config(K::BnHmmFeedback),     fast_config(K::BnCrf),
          fast_config(K::Hhmm),          fast_config(K::BnHmm, S::MotionKnn), fast_config(K::BnCrf, S::MotionKnn),
          fast_config(K::Hhmm, S::MotionKnn)};
}

inline std::string label(const PipelineConfig& c) {
  return std::string(to_string(c.kind)) + "/" + to_string(c.source);
}

}  // namespace fixture

namespace surgflow {

// Readable parameter names in test listings.
inline void PrintTo(const PipelineConfig& c, std::ostream* os) { *os << fixture::label(c); }

}  // namespace surgflow
