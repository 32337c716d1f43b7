// Linear-chain CRF over one description level. Unary potentials are log BN
// marginals, pairwise potentials are log transition probabilities; the
// weights on them are tied across time and trained by L-BFGS.
#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "json.hpp"
#include "surgflow/common.hpp"
#include "surgflow/lbfgs.hpp"

namespace surgflow {

using nlohmann::json;

inline constexpr double kPotentialFloor = 1e-12;

struct PotentialSet {
  Matrix unary;     // T x N
  Matrix pairwise;  // N x N, from label i to label j
  std::size_t delta_t = 0;
  std::vector<std::size_t> clamped;  // windows whose lookback was clamped

  std::size_t length() const { return unary.rows(); }
  std::size_t n_labels() const { return pairwise.rows(); }
};

inline Vec unary_potential(std::span<const double> marginal) {
  Vec out(marginal.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = floored_log(marginal[i], kPotentialFloor);
  return out;
}

inline Matrix pairwise_potential(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = floored_log(a.data()[i], kPotentialFloor);
  return out;
}

inline PotentialSet build_potentials(const std::vector<Vec>& marginals, const Matrix& a,
                                     std::size_t delta_t = 0) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw ValidationError("transition matrix must be square");
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_distribution(a.row(i), 1e-9)) throw ValidationError("transition matrix is not row-stochastic");
  }
  PotentialSet ps{Matrix(marginals.size(), n), pairwise_potential(a), delta_t, {}};
  for (std::size_t t = 0; t < marginals.size(); ++t) {
    std::size_t src = t;
    if (delta_t > t) {
      src = 0;
      ps.clamped.push_back(t);
    } else {
      src = t - delta_t;
    }
    const Vec& m = marginals[src];
    if (m.size() != n) throw ValidationError("marginal has wrong length");
    if (!is_distribution(m, 1e-6)) throw ValidationError("marginal is not a distribution");
    const Vec u = unary_potential(m);
    std::copy(u.begin(), u.end(), ps.unary.row(t).begin());
  }
  return ps;
}

struct FeatureMap {
  enum class Unary { Tied, PerLabel };
  enum class Pairwise { Tied, PerPair };

  std::size_t n_labels = 0;
  Unary unary = Unary::Tied;
  Pairwise pairwise = Pairwise::Tied;
  bool label_bias = false;
  bool transition_bias = false;

  std::size_t n_unary() const { return unary == Unary::Tied ? 1 : n_labels; }
  std::size_t n_pairwise() const { return pairwise == Pairwise::Tied ? 1 : n_labels * n_labels; }
  std::size_t n_label_bias() const { return label_bias ? n_labels : 0; }
  std::size_t n_transition_bias() const { return transition_bias ? n_labels * n_labels : 0; }
  std::size_t dim() const { return n_unary() + n_pairwise() + n_label_bias() + n_transition_bias(); }

  // Offsets into the weight vector w = [lambda; mu; label bias; transition bias].
  std::size_t unary_index(std::size_t y) const { return unary == Unary::Tied ? 0 : y; }
  std::size_t pairwise_index(std::size_t i, std::size_t j) const {
    return n_unary() + (pairwise == Pairwise::Tied ? 0 : i * n_labels + j);
  }
  std::size_t label_bias_index(std::size_t y) const { return n_unary() + n_pairwise() + y; }
  std::size_t transition_bias_index(std::size_t i, std::size_t j) const {
    return n_unary() + n_pairwise() + n_label_bias() + i * n_labels + j;
  }

  /// Psi weights 1, biases 0.
  Vec initial_weights() const {
    Vec w(dim(), 0.0);
    std::fill(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(n_unary() + n_pairwise()), 1.0);
    return w;
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

struct CrfModel {
  FeatureMap map;
  Vec weights;
  Matrix log_transition;  // pairwise potential table
  std::size_t delta_t = 0;
  double objective = 0.0;

  std::size_t n_labels() const { return map.n_labels; }

  void validate() const {
    if (weights.size() != map.dim()) throw ValidationError("crf weights do not match the feature map");
    for (double w : weights) {
      if (!std::isfinite(w)) throw ValidationError("crf weight is not finite");
    }
    if (log_transition.rows() != map.n_labels || log_transition.cols() != map.n_labels) {
      throw ValidationError("crf transition table has wrong shape");
    }
  }

  friend bool operator==(const CrfModel&, const CrfModel&) = default;
};

namespace detail {

inline double unary_score(const FeatureMap& fm, std::span<const double> w, std::span<const double> psi,
                          std::size_t y) {
  double v = w[fm.unary_index(y)] * psi[y];
  if (fm.label_bias) v += w[fm.label_bias_index(y)];
  return v;
}

inline Matrix pairwise_scores(const FeatureMap& fm, std::span<const double> w, const Matrix& psi) {
  const std::size_t n = fm.n_labels;
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double v = w[fm.pairwise_index(i, j)] * psi(i, j);
      if (fm.transition_bias) v += w[fm.transition_bias_index(i, j)];
      out(i, j) = v;
    }
  }
  return out;
}

}  // namespace detail

struct CrfSequence {
  PotentialSet potentials;
  std::vector<std::size_t> labels;
};

/// Sum over sequences of log P(y | o) minus (l2/2)|w|^2, with its gradient.
inline double crf_objective(const FeatureMap& fm, std::span<const double> w,
                            const std::vector<CrfSequence>& data, double l2, std::span<double> grad) {
  const std::size_t n = fm.n_labels;
  if (w.size() != fm.dim() || grad.size() != fm.dim()) throw ValidationError("weight dimension mismatch");
  std::fill(grad.begin(), grad.end(), 0.0);
  double obj = 0.0;
  Vec tmp(n);
  for (const auto& seq : data) {
    const auto& ps = seq.potentials;
    const std::size_t T = ps.length();
    if (T == 0) continue;
    const Matrix pw = detail::pairwise_scores(fm, w, ps.pairwise);
    Matrix u(T, n);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t y = 0; y < n; ++y) u(t, y) = detail::unary_score(fm, w, ps.unary.row(t), y);
    }
    Matrix alpha(T, n), beta(T, n, 0.0);
    for (std::size_t y = 0; y < n; ++y) alpha(0, y) = u(0, y);
    for (std::size_t t = 1; t < T; ++t) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < n; ++i) tmp[i] = alpha(t - 1, i) + pw(i, j);
        alpha(t, j) = log_sum_exp(tmp) + u(t, j);
      }
    }
    for (std::size_t t = T - 1; t-- > 0;) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) tmp[j] = pw(i, j) + u(t + 1, j) + beta(t + 1, j);
        beta(t, i) = log_sum_exp(tmp);
      }
    }
    const double log_z = log_sum_exp(alpha.row(T - 1));

    // Empirical score and feature counts.
    const auto& y = seq.labels;
    if (y.size() != T) throw ValidationError("label sequence length mismatch");
    double score = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      if (y[t] >= n) throw ValidationError("label out of range");
      score += u(t, y[t]);
      grad[fm.unary_index(y[t])] += ps.unary(t, y[t]);
      if (fm.label_bias) grad[fm.label_bias_index(y[t])] += 1.0;
      if (t > 0) {
        score += pw(y[t - 1], y[t]);
        grad[fm.pairwise_index(y[t - 1], y[t])] += ps.pairwise(y[t - 1], y[t]);
        if (fm.transition_bias) grad[fm.transition_bias_index(y[t - 1], y[t])] += 1.0;
      }
    }
    obj += score - log_z;

    // Expected feature counts.
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t k = 0; k < n; ++k) {
        const double m = std::exp(alpha(t, k) + beta(t, k) - log_z);
        grad[fm.unary_index(k)] -= m * ps.unary(t, k);
        if (fm.label_bias) grad[fm.label_bias_index(k)] -= m;
      }
      if (t == 0) continue;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double xi = std::exp(alpha(t - 1, i) + pw(i, j) + u(t, j) + beta(t, j) - log_z);
          grad[fm.pairwise_index(i, j)] -= xi * ps.pairwise(i, j);
          if (fm.transition_bias) grad[fm.transition_bias_index(i, j)] -= xi;
        }
      }
    }
  }
  for (std::size_t k = 0; k < w.size(); ++k) {
    obj -= 0.5 * l2 * w[k] * w[k];
    grad[k] -= l2 * w[k];
  }
  return obj;
}

struct CrfTrainOptions {
  double l2 = 1e-2;
  LbfgsOptions lbfgs{};
};

struct CrfTrainResult {
  CrfModel model;
  LbfgsResult optimizer;  // trace holds the minimized (negated) objective
};

inline CrfTrainResult train_lbfgs(const FeatureMap& fm, const std::vector<CrfSequence>& data,
                                  const Matrix& transition, std::size_t delta_t,
                                  const CrfTrainOptions& opts = {}) {
  if (data.empty()) throw InputError("no training sequences for the crf");
  for (const auto& s : data) {
    if (s.potentials.n_labels() != fm.n_labels || s.potentials.unary.cols() != fm.n_labels) {
      throw ValidationError("training sequence label set differs from the feature map");
    }
  }
  Objective f = [&](std::span<const double> w, std::span<double> g) {
    const double v = crf_objective(fm, w, data, opts.l2, g);
    for (double& x : g) x = -x;
    return -v;
  };
  CrfTrainResult out;
  out.optimizer = lbfgs_minimize(f, fm.initial_weights(), opts.lbfgs);
  out.model = CrfModel{fm, out.optimizer.x, pairwise_potential(transition), delta_t, -out.optimizer.f};
  out.model.validate();
  return out;
}

inline std::string lbfgs_trace_csv(const LbfgsResult& r) {
  std::string out = "iteration,objective,grad_norm\n";
  char buf[96];
  for (const auto& row : r.trace) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", row.iteration, -row.objective, row.grad_norm);
    out += buf;
  }
  return out;
}

struct CrfState {
  Vec log_p;
  std::size_t t = 0;
  bool initialized() const { return t > 0; }
};

struct CrfStep {
  std::size_t argmax = 0;
  Vec scores;
};

/// Max-product forward update:
///   log P_0(i) = u_0(i)
///   log P_t(i) = max_j [log P_{t-1}(j) + pw(j, i)] + u_t(i)
/// The column is shifted so its maximum is 0; argmax ties go to the lowest
/// label.
inline CrfStep online_forward_step(const CrfModel& m, CrfState& state, std::span<const double> unary_psi) {
  const std::size_t n = m.n_labels();
  if (unary_psi.size() != n) throw ValidationError("unary potential has wrong length");
  if (state.t > 0 && state.log_p.size() != n) throw ValidationError("crf state is not initialized");
  Vec next(n);
  for (std::size_t i = 0; i < n; ++i) next[i] = detail::unary_score(m.map, m.weights, unary_psi, i);
  if (state.initialized()) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = kNegInf;
      for (std::size_t j = 0; j < n; ++j) {
        double v = m.weights[m.map.pairwise_index(j, i)] * m.log_transition(j, i);
        if (m.map.transition_bias) v += m.weights[m.map.transition_bias_index(j, i)];
        best = std::max(best, state.log_p[j] + v);
      }
      next[i] += best;
    }
  }
  const double mx = *std::max_element(next.begin(), next.end());
  if (std::isfinite(mx)) {
    for (double& x : next) x -= mx;
  }
  state.log_p = std::move(next);
  ++state.t;
  return {argmax(state.log_p), softmax(state.log_p)};
}

/// Guards the t > 0 contract for callers that track time themselves.
inline CrfStep online_forward_step_at(const CrfModel& m, CrfState& state, std::size_t t,
                                      std::span<const double> unary_psi) {
  if (t > 0 && !state.initialized()) throw ValidationError("crf state is not initialized");
  if (t == 0) state = CrfState{};
  return online_forward_step(m, state, unary_psi);
}

inline const char* to_string(FeatureMap::Unary u) { return u == FeatureMap::Unary::Tied ? "tied" : "per_label"; }
inline const char* to_string(FeatureMap::Pairwise p) {
  return p == FeatureMap::Pairwise::Tied ? "tied" : "per_pair";
}

inline json crf_to_json(const CrfModel& m) {
  return {{"format", "surgflow-crf/1"},
          {"n_labels", m.map.n_labels},
          {"unary", to_string(m.map.unary)},
          {"pairwise", to_string(m.map.pairwise)},
          {"label_bias", m.map.label_bias},
          {"transition_bias", m.map.transition_bias},
          {"weights", m.weights},
          {"log_transition", m.log_transition.to_rows()},
          {"delta_t", m.delta_t},
          {"objective", m.objective}};
}

inline CrfModel crf_from_json(const json& j) {
  if (j.value("format", "") != "surgflow-crf/1") throw ParseError("not a surgflow-crf/1 document");
  try {
    CrfModel m;
    m.map.n_labels = j.at("n_labels").get<std::size_t>();
    const auto u = j.at("unary").get<std::string>();
    const auto p = j.at("pairwise").get<std::string>();
    if (u != "tied" && u != "per_label") throw ParseError("unknown unary feature mode '" + u + "'");
    if (p != "tied" && p != "per_pair") throw ParseError("unknown pairwise feature mode '" + p + "'");
    m.map.unary = u == "tied" ? FeatureMap::Unary::Tied : FeatureMap::Unary::PerLabel;
    m.map.pairwise = p == "tied" ? FeatureMap::Pairwise::Tied : FeatureMap::Pairwise::PerPair;
    m.map.label_bias = j.at("label_bias").get<bool>();
    m.map.transition_bias = j.at("transition_bias").get<bool>();
    m.weights = j.at("weights").get<Vec>();
    m.log_transition = Matrix::from_rows(j.at("log_transition").get<std::vector<Vec>>());
    m.delta_t = j.at("delta_t").get<std::size_t>();
    m.objective = j.at("objective").get<double>();
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("crf model: ") + e.what());
  }
}

}  // namespace surgflow
