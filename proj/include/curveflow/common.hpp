#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace curveflow {

/// Largest supported chart dimension (surfaces and 3-manifolds).
inline constexpr int kMaxDim = 3;
/// Chart dimension plus the time direction of M x I.
inline constexpr int kMaxSpacetimeDim = kMaxDim + 1;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxSpacetimeDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0,
                          kMaxSpacetimeDim, kMaxSpacetimeDim>;

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Point outside the admissible chart region or time interval.
class DomainError : public Error {
public:
  using Error::Error;
};

/// Metric not positive-definite, degenerate curve, and similar.
class GeometryError : public Error {
public:
  using Error::Error;
};

class PreconditionError : public Error {
public:
  using Error::Error;
};

/// Time-step controls violated (CFL bound, horizon overrun).
class StepError : public Error {
public:
  using Error::Error;
};

/// Invalid background or curve specification.
class SpecError : public Error {
public:
  using Error::Error;
};

/// Invalid experiment configuration; carries every violation found.
class ConfigError : public Error {
public:
  explicit ConfigError(std::vector<std::string> violations)
      : Error(join(violations)), violations_(std::move(violations)) {}
  const std::vector<std::string>& violations() const { return violations_; }

private:
  static std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) out += (out.empty() ? "" : "; ") + s;
    return out;
  }
  std::vector<std::string> violations_;
};

/// Dense tensor of fixed rank over a runtime dimension (at most kMaxSpacetimeDim).
/// Storage is flat with stride kMaxSpacetimeDim per index.
template <std::size_t Rank>
class Tensor {
  static constexpr std::size_t kStride = kMaxSpacetimeDim;
  static constexpr std::size_t size_for_rank() {
    std::size_t s = 1;
    for (std::size_t r = 0; r < Rank; ++r) s *= kStride;
    return s;
  }

public:
  Tensor() : Tensor(0) {}
  explicit Tensor(int dim) : dim_(dim) { data_.fill(0.0); }

  int dim() const { return dim_; }

  template <class... Index>
  double& operator()(Index... idx) {
    static_assert(sizeof...(Index) == Rank);
    return data_[offset(static_cast<std::size_t>(idx)...)];
  }

  template <class... Index>
  double operator()(Index... idx) const {
    static_assert(sizeof...(Index) == Rank);
    return data_[offset(static_cast<std::size_t>(idx)...)];
  }

  Tensor& operator+=(const Tensor& o) {
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }
  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(double s, Tensor a) { return a *= s; }

  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
  }

private:
  template <class... Index>
  static constexpr std::size_t offset(Index... idx) {
    std::size_t off = 0;
    ((off = off * kStride + idx), ...);
    return off;
  }

  int dim_;
  std::array<double, size_for_rank()> data_;
};

inline Vec zero_vec(int n) { return Vec::Zero(n); }
inline Mat zero_mat(int n) { return Mat::Zero(n, n); }

inline double quad(const Mat& form, const Vec& a, const Vec& b) {
  return a.dot(form * b);
}

}  // namespace curveflow
