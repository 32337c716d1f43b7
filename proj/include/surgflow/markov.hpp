// Flat HMMs with counted transitions and an online Viterbi step, and a
// two-level hierarchical HMM (phases over steps) with tool-pair emissions.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "surgflow/common.hpp"

namespace surgflow {

using nlohmann::json;

struct TransitionModel {
  Vec pi;
  Matrix a;
  std::vector<std::size_t> uniform_rows;  // labels never seen as predecessors
};

/// a_ij = N_ij / sum_j N_ij; pi = first-label frequency.
inline TransitionModel learn_transitions(const std::vector<std::vector<std::size_t>>& sequences,
                                         std::size_t n_labels, bool smoothing = false) {
  if (sequences.empty() || n_labels == 0) throw InputError("no label sequences to learn from");
  const double add = smoothing ? 1.0 : 0.0;
  TransitionModel m{Vec(n_labels, add), Matrix(n_labels, n_labels, add), {}};
  std::size_t used = 0;
  for (const auto& seq : sequences) {
    if (seq.empty()) continue;
    ++used;
    for (std::size_t l : seq) {
      if (l >= n_labels) throw ValidationError("label index out of range");
    }
    m.pi[seq.front()] += 1.0;
    for (std::size_t t = 1; t < seq.size(); ++t) m.a(seq[t - 1], seq[t]) += 1.0;
  }
  if (used == 0) throw InputError("all label sequences are empty");
  normalize_l1(m.pi);
  for (std::size_t i = 0; i < n_labels; ++i) {
    if (!normalize_l1(m.a.row(i))) m.uniform_rows.push_back(i);
  }
  return m;
}

struct Hmm {
  Vec pi;
  Matrix a;
  double tick = 1.0;  // seconds between decoder updates
  std::vector<std::size_t> uniform_rows;

  std::size_t n_states() const { return pi.size(); }

  void validate() const {
    if (pi.empty()) throw ValidationError("hmm has no states");
    if (a.rows() != pi.size() || a.cols() != pi.size()) throw ValidationError("hmm: A has wrong shape");
    if (!is_distribution(pi, 1e-9)) throw ValidationError("hmm: pi is not a distribution");
    for (std::size_t i = 0; i < a.rows(); ++i) {
      if (!is_distribution(a.row(i), 1e-9)) throw ValidationError("hmm: A row is not a distribution");
    }
    if (!(tick > 0.0)) throw ValidationError("hmm: tick must be positive");
  }

  friend bool operator==(const Hmm&, const Hmm&) = default;
};

inline Hmm make_hmm(TransitionModel tm, double tick) {
  Hmm h{std::move(tm.pi), std::move(tm.a), tick, std::move(tm.uniform_rows)};
  h.validate();
  return h;
}

/// What a decoder does when every state of a column is unreachable.
enum class DegeneratePolicy { Throw, Restart };

struct DecoderState {
  Vec log_delta;
  std::size_t t = 0;  // columns consumed
  std::optional<std::size_t> last_argmax;

  bool initialized() const { return t > 0; }
};

struct DecodeStep {
  std::size_t argmax = 0;
  Vec scores;  // softmax of the log-delta column
  bool restarted = false;
};

namespace detail {

inline void check_emission(std::span<const double> e, std::size_t n) {
  if (e.size() != n) throw ValidationError("emission has wrong length");
  bool any = false;
  for (double x : e) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw ValidationError("emission entries must be finite and >= 0");
    any = any || x > 0.0;
  }
  if (!any) throw DegenerateError("degenerate emission");
}

inline bool all_neg_inf(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == kNegInf; });
}

}  // namespace detail

/// One online Viterbi column. The first call initializes from pi.
inline DecodeStep viterbi_step(const Hmm& hmm, DecoderState& state, std::span<const double> emission,
                               DegeneratePolicy policy = DegeneratePolicy::Throw) {
  const std::size_t n = hmm.n_states();
  detail::check_emission(emission, n);
  Vec next(n, kNegInf);
  auto init = [&] {
    for (std::size_t j = 0; j < n; ++j) next[j] = safe_log(hmm.pi[j]) + safe_log(emission[j]);
  };
  if (!state.initialized()) {
    init();
  } else {
    if (state.log_delta.size() != n) throw ValidationError("decoder state has wrong size");
    for (std::size_t j = 0; j < n; ++j) {
      double best = kNegInf;
      for (std::size_t i = 0; i < n; ++i) {
        const double a = hmm.a(i, j);
        if (a > 0.0 && state.log_delta[i] != kNegInf) best = std::max(best, state.log_delta[i] + std::log(a));
      }
      next[j] = best == kNegInf ? kNegInf : best + safe_log(emission[j]);
    }
  }
  DecodeStep out;
  if (detail::all_neg_inf(next)) {
    if (policy == DegeneratePolicy::Throw) throw DegenerateError("viterbi column is all -inf");
    out.restarted = true;
    init();
    if (detail::all_neg_inf(next)) {
      for (std::size_t j = 0; j < n; ++j) next[j] = safe_log(emission[j]);
    }
  }
  state.log_delta = std::move(next);
  ++state.t;
  out.argmax = argmax(state.log_delta);
  out.scores = softmax(state.log_delta);
  state.last_argmax = out.argmax;
  return out;
}

inline json hmm_to_json(const Hmm& h) {
  return {{"format", "surgflow-hmm/1"},
          {"pi", h.pi},
          {"a", h.a.to_rows()},
          {"tick", h.tick},
          {"uniform_rows", h.uniform_rows}};
}

inline Hmm hmm_from_json(const json& j) {
  if (j.value("format", "") != "surgflow-hmm/1") throw ParseError("not a surgflow-hmm/1 document");
  try {
    Hmm h{j.at("pi").get<Vec>(), Matrix::from_rows(j.at("a").get<std::vector<Vec>>()),
          j.at("tick").get<double>(), j.at("uniform_rows").get<std::vector<std::size_t>>()};
    h.validate();
    return h;
  } catch (const json::exception& e) {
    throw ParseError(std::string("hmm model: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Tool-set symbols: 0 = no tool, 1..T = single tools, then unordered pairs
// (i < j) in lexicographic order.

struct SymbolTable {
  std::size_t n_tools = 0;
  Matrix pair_count;  // training windows in which tools i and j were both present

  std::size_t size() const { return 1 + n_tools + n_tools * (n_tools - (n_tools > 0 ? 1 : 0)) / 2; }

  std::size_t single(std::size_t t) const { return 1 + t; }

  std::size_t pair(std::size_t i, std::size_t j) const {
    if (i > j) std::swap(i, j);
    if (i == j || j >= n_tools) throw ValidationError("invalid tool pair");
    // Pairs before row i: sum_{r<i} (n-1-r).
    const std::size_t before = i * (2 * n_tools - i - 1) / 2;
    return 1 + n_tools + before + (j - i - 1);
  }

  /// Canonical symbol for a tool set. Tools outside the table are dropped
  /// and reported through `unknown`. Sets of three or more reduce to their
  /// most frequent training pair, ties to the lowest indices.
  std::size_t symbol_of(std::span<const std::size_t> tools, bool* unknown = nullptr) const {
    std::vector<std::size_t> ts;
    for (std::size_t t : tools) {
      if (t < n_tools) {
        ts.push_back(t);
      } else if (unknown) {
        *unknown = true;
      }
    }
    std::sort(ts.begin(), ts.end());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
    if (ts.empty()) return 0;
    if (ts.size() == 1) return single(ts[0]);
    std::size_t bi = ts[0], bj = ts[1];
    double best = -1.0;
    for (std::size_t a = 0; a < ts.size(); ++a) {
      for (std::size_t b = a + 1; b < ts.size(); ++b) {
        const double c = pair_count.rows() ? pair_count(ts[a], ts[b]) : 0.0;
        if (c > best) {
          best = c;
          bi = ts[a];
          bj = ts[b];
        }
      }
    }
    return pair(bi, bj);
  }

  friend bool operator==(const SymbolTable&, const SymbolTable&) = default;
};

inline SymbolTable learn_symbol_table(std::size_t n_tools,
                                      const std::vector<std::vector<std::size_t>>& tool_sets) {
  SymbolTable st{n_tools, Matrix(n_tools, n_tools, 0.0)};
  for (const auto& set : tool_sets) {
    for (std::size_t a = 0; a < set.size(); ++a) {
      for (std::size_t b = 0; b < set.size(); ++b) {
        if (set[a] != set[b] && set[a] < n_tools && set[b] < n_tools) st.pair_count(set[a], set[b]) += 1.0;
      }
    }
  }
  return st;
}

// ---------------------------------------------------------------------------
// Hierarchical HMM, depth 2. Phases are internal states, steps are
// production states. Each phase row of `phase_a` plus `phase_end` sums to 1;
// each step row of `child_a` (restricted to the step's phase) plus
// `child_exit` sums to 1.

struct Hhmm {
  std::size_t n_phases = 0;
  std::vector<std::size_t> step_phase;
  Vec phase_pi;
  Matrix phase_a;
  Vec phase_end;
  Vec child_pi;  // per step, a distribution within each phase
  Matrix child_a;
  Vec child_exit;
  Matrix emission;  // step x symbol
  SymbolTable symbols;
  std::vector<std::string> notes;

  std::size_t n_steps() const { return step_phase.size(); }

  void validate() const {
    const std::size_t ns = n_steps();
    if (n_phases == 0 || ns == 0) throw ValidationError("hhmm has no states");
    if (phase_pi.size() != n_phases || phase_end.size() != n_phases || phase_a.rows() != n_phases ||
        phase_a.cols() != n_phases) {
      throw ValidationError("hhmm: phase level has wrong shape");
    }
    if (child_pi.size() != ns || child_exit.size() != ns || child_a.rows() != ns || child_a.cols() != ns) {
      throw ValidationError("hhmm: step level has wrong shape");
    }
    if (!is_distribution(phase_pi, 1e-9)) throw ValidationError("hhmm: phase pi is not a distribution");
    for (std::size_t p = 0; p < n_phases; ++p) {
      if (std::abs(sum(phase_a.row(p)) + phase_end[p] - 1.0) > 1e-9) {
        throw ValidationError("hhmm: phase row plus exit does not sum to 1");
      }
      double pi_mass = 0.0;
      bool has_step = false;
      for (std::size_t s = 0; s < ns; ++s) {
        if (step_phase[s] == p) {
          pi_mass += child_pi[s];
          has_step = true;
        }
      }
      if (has_step && std::abs(pi_mass - 1.0) > 1e-9) throw ValidationError("hhmm: child pi does not sum to 1");
    }
    for (std::size_t s = 0; s < ns; ++s) {
      if (step_phase[s] >= n_phases) throw ValidationError("hhmm: step phase out of range");
      double row = child_exit[s];
      for (std::size_t s2 = 0; s2 < ns; ++s2) {
        if (child_a(s, s2) != 0.0 && step_phase[s2] != step_phase[s]) {
          throw ValidationError("hhmm: child transition leaves its phase");
        }
        row += child_a(s, s2);
      }
      if (std::abs(row - 1.0) > 1e-9) throw ValidationError("hhmm: child row plus exit does not sum to 1");
    }
    if (emission.rows() != ns || emission.cols() != symbols.size()) {
      throw ValidationError("hhmm: emission matrix has wrong shape");
    }
  }

  friend bool operator==(const Hhmm&, const Hhmm&) = default;
};

struct HhmmSequence {
  std::vector<std::size_t> steps;
  std::vector<std::size_t> phases;
  std::vector<std::size_t> symbols;  // may be empty when emissions come from elsewhere
};

/// Frequency counts over phase runs (phase level), step runs inside each
/// phase run (child level) and per-window symbols (emissions). The end of a
/// phase run is an exit of its last step; the end of a surgery is an exit
/// of its last phase.
inline Hhmm hhmm_learn(const std::vector<HhmmSequence>& seqs, const std::vector<std::size_t>& step_phase,
                       std::size_t n_phases, SymbolTable symbols, bool smoothing = false) {
  if (seqs.empty()) throw InputError("no sequences to learn the hhmm from");
  const std::size_t ns = step_phase.size();
  const std::size_t nsym = symbols.size();
  const double add = smoothing ? 1.0 : 0.0;
  Hhmm h;
  h.n_phases = n_phases;
  h.step_phase = step_phase;
  h.symbols = std::move(symbols);
  h.phase_pi.assign(n_phases, add);
  h.phase_a = Matrix(n_phases, n_phases, add);
  h.phase_end.assign(n_phases, add);
  h.child_pi.assign(ns, add);
  h.child_a = Matrix(ns, ns, 0.0);
  h.child_exit.assign(ns, add);
  for (std::size_t s = 0; s < ns; ++s) {
    for (std::size_t s2 = 0; s2 < ns; ++s2) {
      if (step_phase[s2] == step_phase[s]) h.child_a(s, s2) = add;
    }
  }
  h.emission = Matrix(ns, nsym, add);

  for (const auto& seq : seqs) {
    const std::size_t T = seq.steps.size();
    if (T == 0) continue;
    if (seq.phases.size() != T) throw ValidationError("hhmm sequence: step and phase lengths differ");
    if (!seq.symbols.empty() && seq.symbols.size() != T) throw ValidationError("hhmm sequence: symbol length");
    for (std::size_t t = 0; t < T; ++t) {
      if (seq.steps[t] >= ns || seq.phases[t] >= n_phases) throw ValidationError("hhmm label out of range");
      if (step_phase[seq.steps[t]] != seq.phases[t]) {
        throw ValidationError("step " + std::to_string(seq.steps[t]) + " observed under phase " +
                              std::to_string(seq.phases[t]) + ", which does not own it");
      }
      if (!seq.symbols.empty()) {
        if (seq.symbols[t] >= nsym) throw ValidationError("hhmm symbol out of range");
        h.emission(seq.steps[t], seq.symbols[t]) += 1.0;
      }
    }
    h.phase_pi[seq.phases[0]] += 1.0;
    h.child_pi[seq.steps[0]] += 1.0;
    for (std::size_t t = 1; t < T; ++t) {
      if (seq.phases[t] != seq.phases[t - 1]) {
        h.child_exit[seq.steps[t - 1]] += 1.0;
        h.phase_a(seq.phases[t - 1], seq.phases[t]) += 1.0;
        h.child_pi[seq.steps[t]] += 1.0;
      } else {
        h.child_a(seq.steps[t - 1], seq.steps[t]) += 1.0;
      }
    }
    h.child_exit[seq.steps[T - 1]] += 1.0;
    h.phase_end[seq.phases[T - 1]] += 1.0;
  }

  normalize_l1(h.phase_pi);
  for (std::size_t p = 0; p < n_phases; ++p) {
    double total = sum(h.phase_a.row(p)) + h.phase_end[p];
    if (!(total > 0.0)) {
      h.notes.push_back("phase " + std::to_string(p) + " never left: uniform row");
      for (double& x : h.phase_a.row(p)) x = 1.0;
      h.phase_end[p] = 1.0;
      total = static_cast<double>(n_phases + 1);
    }
    for (double& x : h.phase_a.row(p)) x /= total;
    h.phase_end[p] /= total;

    std::vector<std::size_t> members;
    for (std::size_t s = 0; s < ns; ++s) {
      if (step_phase[s] == p) members.push_back(s);
    }
    double pi_mass = 0.0;
    for (std::size_t s : members) pi_mass += h.child_pi[s];
    for (std::size_t s : members) {
      h.child_pi[s] = pi_mass > 0.0 ? h.child_pi[s] / pi_mass : 1.0 / static_cast<double>(members.size());
    }
    for (std::size_t s : members) {
      double row = h.child_exit[s];
      for (std::size_t s2 : members) row += h.child_a(s, s2);
      if (!(row > 0.0)) {
        h.notes.push_back("step " + std::to_string(s) + " never left: uniform row");
        for (std::size_t s2 : members) h.child_a(s, s2) = 1.0;
        h.child_exit[s] = 1.0;
        row = static_cast<double>(members.size() + 1);
      }
      for (std::size_t s2 : members) h.child_a(s, s2) /= row;
      h.child_exit[s] /= row;
    }
  }
  for (std::size_t s = 0; s < ns; ++s) {
    if (!normalize_l1(h.emission.row(s))) h.notes.push_back("step " + std::to_string(s) + " has no emissions");
  }
  h.validate();
  return h;
}

struct HhmmDecodeStep {
  std::size_t step_argmax = 0;
  std::size_t phase_argmax = 0;
  Vec step_scores;
  Vec phase_scores;
  bool restarted = false;
};

/// Online generalized Viterbi over (phase, step) pairs. A step s' moves to
/// step s either inside its phase (child_a) or by exiting its phase,
/// taking a horizontal phase transition and entering s (child_exit *
/// phase_a * child_pi); the better of the two is kept.
inline HhmmDecodeStep hhmm_viterbi_step(const Hhmm& h, DecoderState& state, std::span<const double> emission,
                                        DegeneratePolicy policy = DegeneratePolicy::Throw) {
  const std::size_t ns = h.n_steps();
  const std::size_t np = h.n_phases;
  detail::check_emission(emission, ns);
  Vec next(ns, kNegInf);
  auto init = [&] {
    for (std::size_t s = 0; s < ns; ++s) {
      next[s] = safe_log(h.phase_pi[h.step_phase[s]]) + safe_log(h.child_pi[s]) + safe_log(emission[s]);
    }
  };
  if (!state.initialized()) {
    init();
  } else {
    const Vec& d = state.log_delta;
    if (d.size() != ns) throw ValidationError("decoder state has wrong size");
    Vec exit_best(np, kNegInf);
    for (std::size_t s = 0; s < ns; ++s) {
      if (d[s] != kNegInf && h.child_exit[s] > 0.0) {
        auto& e = exit_best[h.step_phase[s]];
        e = std::max(e, d[s] + std::log(h.child_exit[s]));
      }
    }
    Vec enter(np, kNegInf);
    for (std::size_t p = 0; p < np; ++p) {
      for (std::size_t q = 0; q < np; ++q) {
        if (exit_best[q] != kNegInf && h.phase_a(q, p) > 0.0) {
          enter[p] = std::max(enter[p], exit_best[q] + std::log(h.phase_a(q, p)));
        }
      }
    }
    for (std::size_t s = 0; s < ns; ++s) {
      const std::size_t p = h.step_phase[s];
      double best = kNegInf;
      for (std::size_t s2 = 0; s2 < ns; ++s2) {
        if (h.step_phase[s2] == p && d[s2] != kNegInf && h.child_a(s2, s) > 0.0) {
          best = std::max(best, d[s2] + std::log(h.child_a(s2, s)));
        }
      }
      if (enter[p] != kNegInf && h.child_pi[s] > 0.0) best = std::max(best, enter[p] + std::log(h.child_pi[s]));
      next[s] = best == kNegInf ? kNegInf : best + safe_log(emission[s]);
    }
  }
  HhmmDecodeStep out;
  if (detail::all_neg_inf(next)) {
    if (policy == DegeneratePolicy::Throw) throw DegenerateError("hhmm column is all -inf");
    out.restarted = true;
    init();
    if (detail::all_neg_inf(next)) {
      for (std::size_t s = 0; s < ns; ++s) next[s] = safe_log(emission[s]);
    }
  }
  state.log_delta = std::move(next);
  ++state.t;
  out.step_argmax = argmax(state.log_delta);
  out.step_scores = softmax(state.log_delta);
  Vec phase_log(np, kNegInf);
  for (std::size_t s = 0; s < ns; ++s) {
    auto& v = phase_log[h.step_phase[s]];
    v = std::max(v, state.log_delta[s]);
  }
  out.phase_scores = softmax(phase_log);
  out.phase_argmax = argmax(phase_log);
  state.last_argmax = out.step_argmax;
  return out;
}

/// Emission column for a discrete symbol.
inline Vec hhmm_symbol_emission(const Hhmm& h, std::size_t symbol) {
  if (symbol >= h.emission.cols()) throw ValidationError("symbol outside the alphabet");
  Vec e(h.n_steps());
  for (std::size_t s = 0; s < e.size(); ++s) e[s] = h.emission(s, symbol);
  return e;
}

/// Product-chain transition between steps, max of the two routes. Used by
/// the brute-force oracle in tests.
inline double hhmm_step_transition(const Hhmm& h, std::size_t from, std::size_t to) {
  const std::size_t pf = h.step_phase[from], pt = h.step_phase[to];
  double v = h.child_exit[from] * h.phase_a(pf, pt) * h.child_pi[to];
  if (pf == pt) v = std::max(v, h.child_a(from, to));
  return v;
}

inline json hhmm_to_json(const Hhmm& h) {
  return {{"format", "surgflow-hhmm/1"},
          {"n_phases", h.n_phases},
          {"step_phase", h.step_phase},
          {"phase_pi", h.phase_pi},
          {"phase_a", h.phase_a.to_rows()},
          {"phase_end", h.phase_end},
          {"child_pi", h.child_pi},
          {"child_a", h.child_a.to_rows()},
          {"child_exit", h.child_exit},
          {"emission", h.emission.to_rows()},
          {"n_tools", h.symbols.n_tools},
          {"pair_count", h.symbols.pair_count.to_rows()},
          {"notes", h.notes}};
}

inline Hhmm hhmm_from_json(const json& j) {
  if (j.value("format", "") != "surgflow-hhmm/1") throw ParseError("not a surgflow-hhmm/1 document");
  try {
    Hhmm h;
    h.n_phases = j.at("n_phases").get<std::size_t>();
    h.step_phase = j.at("step_phase").get<std::vector<std::size_t>>();
    h.phase_pi = j.at("phase_pi").get<Vec>();
    h.phase_a = Matrix::from_rows(j.at("phase_a").get<std::vector<Vec>>());
    h.phase_end = j.at("phase_end").get<Vec>();
    h.child_pi = j.at("child_pi").get<Vec>();
    h.child_a = Matrix::from_rows(j.at("child_a").get<std::vector<Vec>>());
    h.child_exit = j.at("child_exit").get<Vec>();
    h.emission = Matrix::from_rows(j.at("emission").get<std::vector<Vec>>());
    h.symbols.n_tools = j.at("n_tools").get<std::size_t>();
    h.symbols.pair_count = Matrix::from_rows(j.at("pair_count").get<std::vector<Vec>>());
    h.notes = j.at("notes").get<std::vector<std::string>>();
    h.validate();
    return h;
  } catch (const json::exception& e) {
    throw ParseError(std::string("hhmm model: ") + e.what());
  }
}

}  // namespace surgflow
