// Limited-memory BFGS minimizer with a backtracking Armijo line search.
#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "surgflow/common.hpp"

namespace surgflow {

struct LbfgsOptions {
  std::size_t memory = 10;
  std::size_t max_iter = 200;
  double tol = 1e-5;  // on the infinity norm of the gradient
  double ftol = 1e-13;  // relative objective change that counts as a stall
  double c1 = 1e-4;
  std::size_t max_backtracks = 60;
};

struct LbfgsTraceRow {
  std::size_t iteration = 0;
  double objective = 0.0;  // value of the minimized function
  double grad_norm = 0.0;
};

struct LbfgsResult {
  Vec x;
  double f = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  std::string stop_reason;
  std::vector<LbfgsTraceRow> trace;
};

/// f(x, grad) returns the objective and writes its gradient.
using Objective = std::function<double(std::span<const double>, std::span<double>)>;

inline double inf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline LbfgsResult lbfgs_minimize(const Objective& f, Vec x0, const LbfgsOptions& opts = {}) {
  const std::size_t n = x0.size();
  LbfgsResult res;
  res.x = std::move(x0);
  Vec g(n);
  res.f = f(res.x, g);
  auto trace_error = [&](const std::string& what) {
    std::string msg = what + " (trace:";
    for (const auto& r : res.trace) {
      msg += " [" + std::to_string(r.iteration) + "," + std::to_string(r.objective) + "]";
    }
    return Error(msg + ")");
  };
  if (!std::isfinite(res.f)) throw trace_error("non-finite objective at the starting point");
  res.trace.push_back({0, res.f, inf_norm(g)});

  std::deque<std::pair<Vec, Vec>> mem;  // (s, y)
  Vec d(n), x_new(n), g_new(n);
  auto small_grad = [&] { return inf_norm(g) < opts.tol; };
  for (std::size_t it = 1; it <= opts.max_iter; ++it) {
    if (small_grad()) {
      res.converged = true;
      res.stop_reason = "gradient below tolerance";
      return res;
    }
    // Two-loop recursion.
    for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
    std::vector<double> alpha(mem.size());
    for (std::size_t k = mem.size(); k-- > 0;) {
      const auto& [s, y] = mem[k];
      alpha[k] = dot(s, d) / dot(y, s);
      for (std::size_t i = 0; i < n; ++i) d[i] -= alpha[k] * y[i];
    }
    if (!mem.empty()) {
      const auto& [s, y] = mem.back();
      const double gamma = dot(s, y) / dot(y, y);
      for (double& v : d) v *= gamma;
    }
    for (std::size_t k = 0; k < mem.size(); ++k) {
      const auto& [s, y] = mem[k];
      const double beta = dot(y, d) / dot(y, s);
      for (std::size_t i = 0; i < n; ++i) d[i] += s[i] * (alpha[k] - beta);
    }
    double slope = dot(g, d);
    if (!(slope < 0.0)) {
      mem.clear();
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
      slope = dot(g, d);
    }
    double step = mem.empty() ? std::min(1.0, 1.0 / std::max(inf_norm(g), 1e-12)) : 1.0;
    bool accepted = false;
    double f_new = 0.0;
    for (std::size_t b = 0; b < opts.max_backtracks; ++b) {
      for (std::size_t i = 0; i < n; ++i) x_new[i] = res.x[i] + step * d[i];
      f_new = f(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= res.f + opts.c1 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      res.stop_reason = "line search failed";
      return res;
    }
    Vec s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = x_new[i] - res.x[i];
      y[i] = g_new[i] - g[i];
    }
    if (dot(s, y) > 1e-12) {
      mem.emplace_back(std::move(s), std::move(y));
      if (mem.size() > opts.memory) mem.pop_front();
    }
    const bool stalled = res.f - f_new <= opts.ftol * std::max(1.0, std::abs(res.f));
    res.x.swap(x_new);
    g.swap(g_new);
    res.f = f_new;
    res.iterations = it;
    res.trace.push_back({it, res.f, inf_norm(g)});
    if (stalled) {
      res.converged = true;
      res.stop_reason = "objective change below tolerance";
      return res;
    }
  }
  res.converged = small_grad();
  res.stop_reason = res.converged ? "gradient below tolerance" : "iteration limit";
  return res;
}

}  // namespace surgflow
