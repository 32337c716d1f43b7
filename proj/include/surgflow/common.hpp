// Shared numeric helpers, error types and a small dense matrix.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace surgflow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file or stream line.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A value violates a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Input is empty or too small for the requested operation.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Numerical dead end: all-zero emission, all -inf decoder column,
/// evidence of probability zero.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// A test surgery was referenced while training.
class LeakageError : public Error {
 public:
  using Error::Error;
};

using Vec = std::vector<double>;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// Index of the largest element; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

inline double sum(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0);
}

/// Scales `v` to unit L1 mass. A zero vector becomes uniform; returns false
/// in that case.
inline bool normalize_l1(std::span<double> v) {
  const double s = sum(v);
  if (!(s > 0.0) || !std::isfinite(s)) {
    const double u = v.empty() ? 0.0 : 1.0 / static_cast<double>(v.size());
    std::fill(v.begin(), v.end(), u);
    return false;
  }
  for (double& x : v) x /= s;
  return true;
}

inline Vec normalized(Vec v) {
  normalize_l1(v);
  return v;
}

inline double safe_log(double p) { return p > 0.0 ? std::log(p) : kNegInf; }

inline double floored_log(double p, double floor) {
  return std::log(std::max(p, floor));
}

inline double log_sum_exp(std::span<const double> v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// exp(v - max v), normalized. An all -inf vector maps to uniform.
inline Vec softmax(std::span<const double> logv) {
  Vec out(logv.size(), 0.0);
  double m = kNegInf;
  for (double x : logv) m = std::max(m, x);
  if (m == kNegInf) {
    normalize_l1(out);
    return out;
  }
  for (std::size_t i = 0; i < logv.size(); ++i) out[i] = std::exp(logv[i] - m);
  normalize_l1(out);
  return out;
}

inline bool is_distribution(std::span<const double> v, double tol) {
  for (double x : v) {
    if (!(x >= 0.0) || !std::isfinite(x)) return false;
  }
  return std::abs(sum(v) - 1.0) <= tol;
}

/// Round half up, the frame-domain rounding convention.
inline std::int64_t round_half_up(double x) {
  return static_cast<std::int64_t>(std::floor(x + 0.5));
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent child seed for stream `stream` of a base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(splitmix64(base) ^ (stream * 0xd1b54a32d192ed03ULL + 1));
}

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  std::vector<std::vector<double>> to_rows() const {
    std::vector<std::vector<double>> out;
    out.reserve(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out.emplace_back(row(r).begin(), row(r).end());
    return out;
  }

  static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
    const std::size_t nr = rows.size();
    const std::size_t nc = nr == 0 ? 0 : rows.front().size();
    Matrix m(nr, nc);
    for (std::size_t r = 0; r < nr; ++r) {
      if (rows[r].size() != nc) throw ParseError("ragged matrix rows");
      std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix elementwise_log(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.data().size(); ++i) out.data()[i] = safe_log(m.data()[i]);
  return out;
}

inline Vec elementwise_log(std::span<const double> v) {
  Vec out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), safe_log);
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace surgflow
