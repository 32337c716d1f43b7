// Bayesian network over boolean step, phase and observation nodes.
//
// Layout: phase nodes (roots) -> step nodes -> observation nodes. Tool nodes
// get one parent per step they co-occurred with in training; KNN bin nodes
// hang off their step; phase-feedback bin nodes hang off their phase. CPTs
// are learned by frequency counting. Marginals P(label | evidence) come from
// Gibbs sampling, with full enumeration available as an oracle.
#pragma once

#include <bit>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "surgflow/common.hpp"
#include "surgflow/taxonomy.hpp"

namespace surgflow {

using nlohmann::json;

enum class NodeKind { Phase, Step, Tool, KnnBin, PhaseFeedback };

inline const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::Phase: return "phase";
    case NodeKind::Step: return "step";
    case NodeKind::Tool: return "tool";
    case NodeKind::KnnBin: return "knn_bin";
    case NodeKind::PhaseFeedback: return "phase_feedback";
  }
  return "?";
}

inline NodeKind node_kind_from_string(const std::string& s) {
  for (auto k : {NodeKind::Phase, NodeKind::Step, NodeKind::Tool, NodeKind::KnnBin,
                 NodeKind::PhaseFeedback}) {
    if (s == to_string(k)) return k;
  }
  throw ParseError("unknown node kind '" + s + "'");
}

/// Equal-width partition of [0,1]; the last bin is right-closed.
struct EvidenceBinning {
  std::size_t n_obs = 5;

  void validate() const {
    if (n_obs < 2) throw ValidationError("evidence binning needs n_obs >= 2");
  }
  std::size_t bin_of(double p) const {
    const double c = std::clamp(p, 0.0, 1.0);
    return std::min(n_obs - 1, static_cast<std::size_t>(std::floor(c * static_cast<double>(n_obs))));
  }
  friend bool operator==(const EvidenceBinning&, const EvidenceBinning&) = default;
};

struct BnNode {
  NodeKind kind = NodeKind::Phase;
  std::size_t label = 0;  // phase, step or tool index; for bins the step/phase binned
  std::size_t bin = 0;
  std::vector<std::size_t> parents;  // node indices, ascending

  bool is_label() const { return kind == NodeKind::Phase || kind == NodeKind::Step; }
  friend bool operator==(const BnNode&, const BnNode&) = default;
};

struct BnStructure {
  std::size_t n_phases = 0;
  std::size_t n_steps = 0;
  std::vector<std::size_t> step_phase;  // taxonomy mapping, used when a step is unseen
  std::vector<BnNode> nodes;
  std::optional<EvidenceBinning> knn_binning;
  std::optional<EvidenceBinning> feedback_binning;
  std::vector<std::size_t> tool_nodes;      // by tool index
  std::vector<std::size_t> knn_nodes;       // step * n_obs + bin
  std::vector<std::size_t> feedback_nodes;  // phase * n_obs + bin

  std::size_t phase_node(std::size_t p) const { return p; }
  std::size_t step_node(std::size_t s) const { return n_phases + s; }
  std::size_t size() const { return nodes.size(); }
  std::size_t n_observation_nodes() const { return nodes.size() - n_phases - n_steps; }

  /// Order in which every node follows its parents.
  std::vector<std::size_t> topological_order() const {
    std::vector<std::size_t> indeg(nodes.size(), 0);
    std::vector<std::vector<std::size_t>> children(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      for (std::size_t p : nodes[i].parents) {
        if (p >= nodes.size()) throw ValidationError("parent index out of range");
        children[p].push_back(i);
        ++indeg[i];
      }
    }
    std::vector<std::size_t> order, ready;
    for (std::size_t i = nodes.size(); i-- > 0;) {
      if (indeg[i] == 0) ready.push_back(i);
    }
    while (!ready.empty()) {
      const std::size_t n = ready.back();
      ready.pop_back();
      order.push_back(n);
      for (auto it = children[n].rbegin(); it != children[n].rend(); ++it) {
        if (--indeg[*it] == 0) ready.push_back(*it);
      }
    }
    if (order.size() != nodes.size()) throw ValidationError("network graph has a cycle");
    return order;
  }

  void rebuild_indexes() {
    tool_nodes.clear();
    knn_nodes.clear();
    feedback_nodes.clear();
    std::size_t n_tools = 0;
    for (const auto& n : nodes) {
      if (n.kind == NodeKind::Tool) n_tools = std::max(n_tools, n.label + 1);
    }
    tool_nodes.assign(n_tools, 0);
    if (knn_binning) knn_nodes.assign(n_steps * knn_binning->n_obs, 0);
    if (feedback_binning) feedback_nodes.assign(n_phases * feedback_binning->n_obs, 0);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto& n = nodes[i];
      if (n.kind == NodeKind::Tool) tool_nodes[n.label] = i;
      if (n.kind == NodeKind::KnnBin) knn_nodes.at(n.label * knn_binning->n_obs + n.bin) = i;
      if (n.kind == NodeKind::PhaseFeedback) {
        feedback_nodes.at(n.label * feedback_binning->n_obs + n.bin) = i;
      }
    }
  }

  void validate() const {
    if (n_phases == 0) throw ValidationError("network has no phase nodes");
    if (nodes.size() < n_phases + n_steps) throw ValidationError("missing label nodes");
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto& n = nodes[i];
      const bool expect_phase = i < n_phases;
      const bool expect_step = !expect_phase && i < n_phases + n_steps;
      if (expect_phase != (n.kind == NodeKind::Phase) || expect_step != (n.kind == NodeKind::Step)) {
        throw ValidationError("label nodes must come first: phases, then steps");
      }
      if (!std::is_sorted(n.parents.begin(), n.parents.end()) ||
          std::adjacent_find(n.parents.begin(), n.parents.end()) != n.parents.end()) {
        throw ValidationError("parent lists must be sorted and unique");
      }
      if (n.parents.size() > 62) throw ValidationError("node has more than 62 parents");
      for (std::size_t p : n.parents) {
        if (p >= nodes.size()) throw ValidationError("parent index out of range");
        if (!nodes[p].is_label()) throw ValidationError("observation nodes cannot be parents");
      }
    }
    topological_order();
  }

  friend bool operator==(const BnStructure&, const BnStructure&) = default;
};

namespace detail {

inline BnStructure label_skeleton(const Taxonomy& tax) {
  BnStructure st;
  st.n_phases = tax.n_phases();
  st.n_steps = tax.n_steps();
  st.step_phase = tax.step_phase;
  for (std::size_t p = 0; p < st.n_phases; ++p) st.nodes.push_back({NodeKind::Phase, p, 0, {}});
  for (std::size_t s = 0; s < st.n_steps; ++s) {
    st.nodes.push_back({NodeKind::Step, s, 0, {st.phase_node(tax.step_phase[s])}});
  }
  return st;
}

}  // namespace detail

/// One boolean node per tool, true iff the tool is present in the window.
/// Parents are learned (see learn_cpts).
inline BnStructure wire_tool_evidence(const Taxonomy& tax) {
  if (tax.n_tools() == 0) throw ValidationError("no evidence source: taxonomy lists no tools");
  BnStructure st = detail::label_skeleton(tax);
  for (std::size_t t = 0; t < tax.n_tools(); ++t) st.nodes.push_back({NodeKind::Tool, t, 0, {}});
  st.rebuild_indexes();
  return st;
}

/// n_obs boolean nodes per step, node (s, b) meaning "KNN probability of
/// step s falls in bin b". Each is a child of step s.
inline BnStructure wire_knn_evidence(const Taxonomy& tax, const EvidenceBinning& binning) {
  binning.validate();
  BnStructure st = detail::label_skeleton(tax);
  st.knn_binning = binning;
  for (std::size_t s = 0; s < tax.n_steps(); ++s) {
    for (std::size_t b = 0; b < binning.n_obs; ++b) {
      st.nodes.push_back({NodeKind::KnnBin, s, b, {st.step_node(s)}});
    }
  }
  st.rebuild_indexes();
  return st;
}

/// Adds n_obs nodes per phase for the previous window's phase posterior.
inline void add_phase_feedback(BnStructure& st, const EvidenceBinning& binning) {
  binning.validate();
  if (st.feedback_binning) throw ValidationError("phase feedback already wired");
  st.feedback_binning = binning;
  for (std::size_t p = 0; p < st.n_phases; ++p) {
    for (std::size_t b = 0; b < binning.n_obs; ++b) {
      st.nodes.push_back({NodeKind::PhaseFeedback, p, b, {st.phase_node(p)}});
    }
  }
  st.rebuild_indexes();
}

/// Observation node -> observed state.
using BnEvidence = std::map<std::size_t, bool>;

inline void add_tool_evidence(const BnStructure& st, std::span<const std::size_t> tools_present,
                              BnEvidence& ev) {
  for (std::size_t t = 0; t < st.tool_nodes.size(); ++t) {
    ev[st.tool_nodes[t]] = std::find(tools_present.begin(), tools_present.end(), t) !=
                           tools_present.end();
  }
}

inline void add_knn_evidence(const BnStructure& st, std::span<const double> step_probs,
                             BnEvidence& ev) {
  if (!st.knn_binning) throw ValidationError("network has no KNN evidence nodes");
  if (step_probs.size() != st.n_steps) throw ValidationError("step_probs length mismatch");
  const std::size_t n = st.knn_binning->n_obs;
  for (std::size_t s = 0; s < st.n_steps; ++s) {
    const std::size_t hit = st.knn_binning->bin_of(step_probs[s]);
    for (std::size_t b = 0; b < n; ++b) ev[st.knn_nodes[s * n + b]] = b == hit;
  }
}

inline void add_feedback_evidence(const BnStructure& st, std::span<const double> phase_probs,
                                  BnEvidence& ev) {
  if (!st.feedback_binning) throw ValidationError("network has no phase feedback nodes");
  if (phase_probs.size() != st.n_phases) throw ValidationError("phase_probs length mismatch");
  const std::size_t n = st.feedback_binning->n_obs;
  for (std::size_t p = 0; p < st.n_phases; ++p) {
    const std::size_t hit = st.feedback_binning->bin_of(phase_probs[p]);
    for (std::size_t b = 0; b < n; ++b) ev[st.feedback_nodes[p * n + b]] = b == hit;
  }
}

// ---------------------------------------------------------------------------
// Conditional probability tables

/// Rows are indexed by a bitmask over the node's parents (bit i = parents[i]
/// is true). Only rows backed by training data (or set by hand) are stored;
/// the rest follow the fill rule.
struct Cpt {
  enum class Fill { Constant, NoisyOr };

  struct Row {
    std::uint64_t config = 0;
    double count = 0.0;
    double p_true = 0.0;
    friend bool operator==(const Row&, const Row&) = default;
  };

  std::size_t n_parents = 0;
  std::vector<Row> rows;  // sorted by config
  Fill fill = Fill::Constant;
  double fill_constant = 0.5;

  const Row* find(std::uint64_t config) const {
    auto it = std::lower_bound(rows.begin(), rows.end(), config,
                               [](const Row& r, std::uint64_t c) { return r.config < c; });
    return it != rows.end() && it->config == config ? &*it : nullptr;
  }

  double p_true(std::uint64_t config) const {
    if (const Row* r = find(config)) return r->p_true;
    if (fill == Fill::Constant) return fill_constant;
    // Leaky noisy-OR built from the all-off row and the single-parent rows.
    const Row* leak = find(0);
    const double q0 = leak ? 1.0 - leak->p_true : 1.0;
    if (q0 <= 0.0) return 1.0;
    double q = q0;
    for (std::uint64_t bits = config; bits != 0; bits &= bits - 1) {
      const Row* single = find(bits & (~bits + 1));
      if (single) q *= std::min(1.0, (1.0 - single->p_true) / q0);
    }
    return 1.0 - q;
  }

  double p(bool value, std::uint64_t config) const {
    const double t = p_true(config);
    return value ? t : 1.0 - t;
  }

  bool rows_valid() const {
    for (const auto& r : rows) {
      if (!(r.p_true >= 0.0 && r.p_true <= 1.0)) return false;
    }
    return fill_constant >= 0.0 && fill_constant <= 1.0;
  }

  /// Fully specified table; `table[config]` is P(true | config).
  static Cpt dense(std::size_t n_parents, std::span<const double> table) {
    if (table.size() != (std::size_t{1} << n_parents)) throw ValidationError("CPT table size mismatch");
    Cpt c;
    c.n_parents = n_parents;
    for (std::size_t i = 0; i < table.size(); ++i) c.rows.push_back({i, 0.0, table[i]});
    if (!c.rows_valid()) throw ValidationError("CPT entries must lie in [0,1]");
    return c;
  }

  friend bool operator==(const Cpt&, const Cpt&) = default;
};

struct BnModel {
  BnStructure structure;
  std::vector<Cpt> cpts;  // one per node
  bool smoothing = false;
  std::vector<std::string> trained_on;
  std::vector<std::string> notes;  // flagged learning events

  void validate() const {
    structure.validate();
    if (cpts.size() != structure.size()) throw ValidationError("one CPT per node required");
    for (std::size_t i = 0; i < cpts.size(); ++i) {
      if (cpts[i].n_parents != structure.nodes[i].parents.size()) {
        throw ValidationError("CPT arity differs from node parents");
      }
      if (!cpts[i].rows_valid()) throw ValidationError("CPT row outside [0,1]");
    }
  }

  friend bool operator==(const BnModel&, const BnModel&) = default;
};

struct BnTrainingWindow {
  std::size_t step = 0;
  std::size_t phase = 0;
  BnEvidence evidence;
};

struct BnLearnOptions {
  bool smoothing = false;  // add-one on observed rows
};

inline std::uint64_t parent_config(const BnNode& node, std::span<const std::uint8_t> values) {
  std::uint64_t c = 0;
  for (std::size_t i = 0; i < node.parents.size(); ++i) {
    if (values[node.parents[i]]) c |= std::uint64_t{1} << i;
  }
  return c;
}

/// Learns tool-node parents from step co-occurrence and every CPT by
/// frequency counting.
inline BnModel learn_cpts(const BnStructure& skeleton, std::span<const BnTrainingWindow> windows,
                          const BnLearnOptions& opts = {}) {
  if (windows.empty()) throw InputError("empty training set");
  BnModel model;
  model.structure = skeleton;
  model.smoothing = opts.smoothing;
  auto& st = model.structure;
  const std::size_t n = st.size();

  std::vector<std::size_t> phase_count(st.n_phases, 0);
  for (const auto& w : windows) {
    if (w.step >= st.n_steps || w.phase >= st.n_phases) throw ValidationError("training label out of range");
    ++phase_count[w.phase];
  }
  for (std::size_t p = 0; p < st.n_phases; ++p) {
    if (phase_count[p] == 0) {
      throw InputError("no training window for phase " + std::to_string(p));
    }
  }

  // Structure: step <- phases it co-occurred with; tool <- steps it co-occurred with.
  std::vector<std::vector<std::size_t>> step_phase_co(st.n_steps, std::vector<std::size_t>(st.n_phases, 0));
  std::vector<std::vector<std::size_t>> tool_step_co(n, std::vector<std::size_t>());
  for (std::size_t i = 0; i < n; ++i) {
    if (st.nodes[i].kind == NodeKind::Tool) tool_step_co[i].assign(st.n_steps, 0);
  }
  for (const auto& w : windows) {
    ++step_phase_co[w.step][w.phase];
    for (const auto& [node, value] : w.evidence) {
      if (node >= n || st.nodes[node].is_label()) throw ValidationError("evidence on unknown node");
      if (value && st.nodes[node].kind == NodeKind::Tool) ++tool_step_co[node][w.step];
    }
  }
  for (std::size_t s = 0; s < st.n_steps; ++s) {
    auto& parents = st.nodes[st.step_node(s)].parents;
    parents.clear();
    for (std::size_t p = 0; p < st.n_phases; ++p) {
      if (step_phase_co[s][p] > 0) parents.push_back(st.phase_node(p));
    }
    if (parents.empty()) {
      parents.push_back(st.phase_node(st.step_phase.at(s)));
      model.notes.push_back("step " + std::to_string(s) + " unseen in training");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (st.nodes[i].kind != NodeKind::Tool) continue;
    auto& parents = st.nodes[i].parents;
    parents.clear();
    for (std::size_t s = 0; s < st.n_steps; ++s) {
      if (tool_step_co[i][s] > 0) parents.push_back(st.step_node(s));
    }
  }
  st.validate();

  // Counting.
  std::vector<std::map<std::uint64_t, std::pair<double, double>>> counts(n);  // config -> (n, n_true)
  std::vector<std::pair<double, double>> totals(n, {0.0, 0.0});
  std::vector<std::uint8_t> values(n, 0);
  for (const auto& w : windows) {
    std::fill(values.begin(), values.end(), 0);
    values[st.phase_node(w.phase)] = 1;
    values[st.step_node(w.step)] = 1;
    for (const auto& [node, value] : w.evidence) values[node] = value ? 1 : 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!st.nodes[i].is_label() && !w.evidence.count(i)) continue;
      auto& cell = counts[i][parent_config(st.nodes[i], values)];
      cell.first += 1.0;
      cell.second += values[i];
      totals[i].first += 1.0;
      totals[i].second += values[i];
    }
  }

  model.cpts.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Cpt& cpt = model.cpts[i];
    cpt.n_parents = st.nodes[i].parents.size();
    for (const auto& [config, cell] : counts[i]) {
      const double p = opts.smoothing ? (cell.second + 1.0) / (cell.first + 2.0)
                                      : cell.second / cell.first;
      cpt.rows.push_back({config, cell.first, p});
    }
    if (st.nodes[i].is_label()) {
      cpt.fill = Cpt::Fill::Constant;
      cpt.fill_constant = totals[i].first > 0.0 ? totals[i].second / totals[i].first : 0.0;
    } else {
      cpt.fill = Cpt::Fill::NoisyOr;
      cpt.fill_constant = totals[i].first > 0.0 ? totals[i].second / totals[i].first : 0.5;
      if (totals[i].first == 0.0) model.notes.push_back("observation node " + std::to_string(i) + " never observed");
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Inference

struct PosteriorMarginals {
  Vec step_probs;   // renormalized over steps
  Vec phase_probs;  // renormalized over phases
  Vec node_true;    // P(node = true | evidence) for each label node, before renormalizing
};

struct GibbsOptions {
  std::size_t n_samples = 20000;
  std::size_t burn_in = 2000;
  std::uint64_t seed = 0;
  friend bool operator==(const GibbsOptions&, const GibbsOptions&) = default;
};

inline constexpr double kGibbsFloor = 1e-9;

namespace detail {

inline PosteriorMarginals marginals_from_nodes(const BnStructure& st, Vec node_true) {
  PosteriorMarginals out;
  out.phase_probs.assign(node_true.begin(), node_true.begin() + static_cast<std::ptrdiff_t>(st.n_phases));
  out.step_probs.assign(node_true.begin() + static_cast<std::ptrdiff_t>(st.n_phases),
                        node_true.begin() + static_cast<std::ptrdiff_t>(st.n_phases + st.n_steps));
  normalize_l1(out.phase_probs);
  normalize_l1(out.step_probs);
  out.node_true = std::move(node_true);
  return out;
}

inline void check_evidence(const BnStructure& st, const BnEvidence& ev) {
  for (const auto& [node, value] : ev) {
    (void)value;
    if (node >= st.size() || st.nodes[node].is_label()) {
      throw ValidationError("evidence on unknown node " + std::to_string(node));
    }
  }
}

}  // namespace detail

/// Single-chain Gibbs sampler over the label nodes. Construction
/// precomputes lookup tables; infer() is const and owns its chain state, so
/// one sampler may serve concurrent calls.
class GibbsSampler {
 public:
  explicit GibbsSampler(const BnModel& model) : model_(&model) {
    model.validate();
    const auto& st = model.structure;
    const std::size_t n = st.size();
    order_ = st.topological_order();
    children_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& parents = st.nodes[i].parents;
      for (std::size_t k = 0; k < parents.size(); ++k) {
        children_[parents[k]].push_back({i, std::uint64_t{1} << k});
      }
    }
    dense_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t np = st.nodes[i].parents.size();
      if (np > kDenseLimit) continue;
      dense_[i].resize(std::size_t{1} << np);
      for (std::size_t c = 0; c < dense_[i].size(); ++c) dense_[i][c] = model.cpts[i].p_true(c);
    }
  }

  PosteriorMarginals infer(const BnEvidence& evidence, const GibbsOptions& opts) const {
    const auto& st = model_->structure;
    detail::check_evidence(st, evidence);
    if (opts.n_samples == 0) throw ValidationError("Gibbs needs at least one sample");
    const std::size_t n = st.size();
    std::vector<std::uint8_t> value(n, 0), clamped(n, 0);
    for (const auto& [node, v] : evidence) {
      value[node] = v ? 1 : 0;
      clamped[node] = 1;
    }
    // Unobserved observation leaves are barren: they drop out of the
    // posterior and of every blanket.
    std::vector<std::size_t> free_nodes;
    for (std::size_t i : order_) {
      if (st.nodes[i].is_label()) free_nodes.push_back(i);
    }
    std::vector<std::vector<Child>> active(n);
    for (std::size_t i : free_nodes) {
      for (const Child& c : children_[i]) {
        if (st.nodes[c.node].is_label() || clamped[c.node]) active[i].push_back(c);
      }
    }

    std::vector<Memo> memo(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (dense_[i].empty()) memo[i].reset();
    }
    auto p_true = [&](std::size_t node, std::uint64_t c) {
      const auto& d = dense_[node];
      return d.empty() ? memo[node].get(model_->cpts[node], c) : d[c];
    };

    std::mt19937_64 rng(opts.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<std::uint64_t> config(n, 0);
    for (std::size_t i : free_nodes) {
      config[i] = parent_config(st.nodes[i], value);
      value[i] = unif(rng) < p_true(i, config[i]) ? 1 : 0;
    }
    for (std::size_t i = 0; i < n; ++i) config[i] = parent_config(st.nodes[i], value);

    Vec acc(n, 0.0);
    const std::size_t sweeps = opts.burn_in + opts.n_samples;
    for (std::size_t sweep = 0; sweep < sweeps; ++sweep) {
      const bool record = sweep >= opts.burn_in;
      for (std::size_t i : free_nodes) {
        const double own = p_true(i, config[i]);
        double w1 = std::max(own, kGibbsFloor);
        double w0 = std::max(1.0 - own, kGibbsFloor);
        for (const Child& c : active[i]) {
          const bool cv = value[c.node] != 0;
          const double t1 = p_true(c.node, config[c.node] | c.bit);
          const double t0 = p_true(c.node, config[c.node] & ~c.bit);
          w1 *= std::max(cv ? t1 : 1.0 - t1, kGibbsFloor);
          w0 *= std::max(cv ? t0 : 1.0 - t0, kGibbsFloor);
        }
        const double z = w0 + w1;
        const double p1 = z > 0.0 && std::isfinite(z) ? w1 / z : 0.5;
        const std::uint8_t next = unif(rng) < p1 ? 1 : 0;
        if (next != value[i]) {
          value[i] = next;
          for (const Child& c : children_[i]) config[c.node] ^= c.bit;
        }
        if (record) acc[i] += p1;
      }
    }
    Vec node_true(st.n_phases + st.n_steps, 0.0);
    for (std::size_t i = 0; i < node_true.size(); ++i) {
      node_true[i] = acc[i] / static_cast<double>(opts.n_samples);
    }
    return detail::marginals_from_nodes(st, std::move(node_true));
  }

  const BnModel& model() const { return *model_; }

 private:
  static constexpr std::size_t kDenseLimit = 12;

  struct Child {
    std::size_t node;
    std::uint64_t bit;
  };

  // Open-addressing cache of sparse CPT lookups for wide nodes; a sweep
  // visits few distinct parent configurations.
  struct Memo {
    static constexpr std::size_t kSlots = 1024;
    std::vector<std::uint64_t> keys;
    Vec vals;
    std::size_t used = 0;
    void reset() {
      keys.assign(kSlots, kEmpty);
      vals.assign(kSlots, 0.0);
    }
    double get(const Cpt& cpt, std::uint64_t c) {
      std::size_t h = static_cast<std::size_t>((c * 0x9E3779B97F4A7C15ULL) >> 54);
      for (;;) {
        if (keys[h] == c) return vals[h];
        if (keys[h] == kEmpty) break;
        h = (h + 1) & (kSlots - 1);
      }
      const double v = cpt.p_true(c);
      if (2 * used < kSlots) {
        keys[h] = c;
        vals[h] = v;
        ++used;
      }
      return v;
    }
    static constexpr std::uint64_t kEmpty = ~std::uint64_t{0};
  };

  const BnModel* model_;
  std::vector<std::size_t> order_;
  std::vector<std::vector<Child>> children_;
  std::vector<Vec> dense_;
};

inline PosteriorMarginals gibbs_infer(const BnModel& model, const BnEvidence& evidence,
                                      const GibbsOptions& opts) {
  return GibbsSampler(model).infer(evidence, opts);
}

/// Exact marginals by enumerating every joint assignment of the unobserved
/// nodes. Test oracle; limited to 2^20 assignments.
inline PosteriorMarginals exact_infer(const BnModel& model, const BnEvidence& evidence) {
  model.validate();
  const auto& st = model.structure;
  detail::check_evidence(st, evidence);
  const std::size_t n = st.size();
  std::vector<std::uint8_t> value(n, 0);
  std::vector<std::size_t> free_nodes;
  for (std::size_t i = 0; i < n; ++i) {
    auto it = evidence.find(i);
    if (it == evidence.end()) {
      free_nodes.push_back(i);
    } else {
      value[i] = it->second ? 1 : 0;
    }
  }
  if (free_nodes.size() > 20) throw InputError("state space too large for exact inference");
  const std::size_t label_count = st.n_phases + st.n_steps;
  Vec acc(label_count, 0.0);
  double z = 0.0;
  const std::uint64_t total = std::uint64_t{1} << free_nodes.size();
  for (std::uint64_t a = 0; a < total; ++a) {
    for (std::size_t k = 0; k < free_nodes.size(); ++k) value[free_nodes[k]] = (a >> k) & 1U;
    double joint = 1.0;
    for (std::size_t i = 0; i < n && joint > 0.0; ++i) {
      joint *= model.cpts[i].p(value[i] != 0, parent_config(st.nodes[i], value));
    }
    if (joint == 0.0) continue;
    z += joint;
    for (std::size_t i = 0; i < label_count; ++i) {
      if (value[i]) acc[i] += joint;
    }
  }
  if (!(z > 0.0)) throw DegenerateError("evidence has probability zero");
  for (double& x : acc) x /= z;
  return detail::marginals_from_nodes(st, std::move(acc));
}

// ---------------------------------------------------------------------------
// Serialization

inline json bn_to_json(const BnModel& m) {
  const auto& st = m.structure;
  json nodes = json::array();
  for (std::size_t i = 0; i < st.size(); ++i) {
    const auto& node = st.nodes[i];
    const auto& cpt = m.cpts[i];
    json rows = json::array();
    for (const auto& r : cpt.rows) rows.push_back({r.config, r.count, r.p_true});
    nodes.push_back({{"kind", to_string(node.kind)},
                     {"label", node.label},
                     {"bin", node.bin},
                     {"parents", node.parents},
                     {"fill", cpt.fill == Cpt::Fill::NoisyOr ? "noisy_or" : "constant"},
                     {"fill_constant", cpt.fill_constant},
                     {"rows", rows}});
  }
  json j{{"format", "surgflow-bn/1"},
         {"n_phases", st.n_phases},
         {"n_steps", st.n_steps},
         {"step_phase", st.step_phase},
         {"smoothing", m.smoothing},
         {"trained_on", m.trained_on},
         {"notes", m.notes},
         {"nodes", nodes}};
  j["knn_bins"] = st.knn_binning ? json(st.knn_binning->n_obs) : json(nullptr);
  j["feedback_bins"] = st.feedback_binning ? json(st.feedback_binning->n_obs) : json(nullptr);
  return j;
}

inline BnModel bn_from_json(const json& j) {
  if (j.value("format", "") != "surgflow-bn/1") throw ParseError("not a surgflow-bn/1 document");
  try {
    BnModel m;
    auto& st = m.structure;
    st.n_phases = j.at("n_phases").get<std::size_t>();
    st.n_steps = j.at("n_steps").get<std::size_t>();
    st.step_phase = j.at("step_phase").get<std::vector<std::size_t>>();
    if (!j.at("knn_bins").is_null()) st.knn_binning = EvidenceBinning{j.at("knn_bins").get<std::size_t>()};
    if (!j.at("feedback_bins").is_null()) {
      st.feedback_binning = EvidenceBinning{j.at("feedback_bins").get<std::size_t>()};
    }
    m.smoothing = j.at("smoothing").get<bool>();
    m.trained_on = j.at("trained_on").get<std::vector<std::string>>();
    m.notes = j.at("notes").get<std::vector<std::string>>();
    for (const auto& jn : j.at("nodes")) {
      BnNode node{node_kind_from_string(jn.at("kind").get<std::string>()),
                  jn.at("label").get<std::size_t>(), jn.at("bin").get<std::size_t>(),
                  jn.at("parents").get<std::vector<std::size_t>>()};
      Cpt cpt;
      cpt.n_parents = node.parents.size();
      cpt.fill = jn.at("fill").get<std::string>() == "noisy_or" ? Cpt::Fill::NoisyOr : Cpt::Fill::Constant;
      cpt.fill_constant = jn.at("fill_constant").get<double>();
      for (const auto& r : jn.at("rows")) {
        cpt.rows.push_back({r.at(0).get<std::uint64_t>(), r.at(1).get<double>(), r.at(2).get<double>()});
      }
      st.nodes.push_back(std::move(node));
      m.cpts.push_back(std::move(cpt));
    }
    st.rebuild_indexes();
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("bn model: ") + e.what());
  }
}

}  // namespace surgflow
