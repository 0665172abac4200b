#pragma once

#include "curveflow/common.hpp"

#include <cmath>
#include <sstream>
#include <vector>

namespace curveflow {

/// Coordinate box of a single chart. Periodic coordinates are identified
/// modulo (upper - lower); non-periodic ones carry a guard band of width
/// boundary_margin on each side.
struct ChartDomain {
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<bool> periodic;
  double boundary_margin = 0.0;

  int dimension() const { return static_cast<int>(lower.size()); }

  double extent(int i) const { return upper[i] - lower[i]; }

  double max_extent() const {
    double e = 0.0;
    for (int i = 0; i < dimension(); ++i) e = std::max(e, extent(i));
    return e;
  }

  void validate() const {
    const auto n = lower.size();
    if (n == 0 || n > static_cast<std::size_t>(kMaxDim))
      throw SpecError("chart dimension must be in [1, 3]");
    if (upper.size() != n || periodic.size() != n)
      throw SpecError("chart bounds and periodic flags must have equal length");
    for (std::size_t i = 0; i < n; ++i) {
      if (!(lower[i] < upper[i]))
        throw SpecError("chart lower bound must be below upper bound");
      if (!periodic[i] && 2.0 * boundary_margin >= upper[i] - lower[i])
        throw SpecError("boundary margin swallows a non-periodic coordinate");
    }
    if (boundary_margin < 0.0) throw SpecError("boundary margin must be >= 0");
  }

  bool admissible(const Vec& x) const {
    if (x.size() != dimension()) return false;
    for (int i = 0; i < dimension(); ++i) {
      if (!std::isfinite(x[i])) return false;
      if (periodic[i]) continue;
      if (x[i] < lower[i] + boundary_margin || x[i] > upper[i] - boundary_margin)
        return false;
    }
    return true;
  }

  /// Maps periodic coordinates into [lower, upper).
  Vec reduce(Vec x) const {
    for (int i = 0; i < dimension(); ++i) {
      if (!periodic[i]) continue;
      const double p = extent(i);
      double r = std::fmod(x[i] - lower[i], p);
      if (r < 0.0) r += p;
      if (r >= p) r -= p;
      x[i] = lower[i] + r;
    }
    return x;
  }

  void require_admissible(const Vec& x) const {
    if (admissible(x)) return;
    std::ostringstream os;
    os << "point (";
    for (int i = 0; i < x.size(); ++i) os << (i ? ", " : "") << x[i];
    os << ") outside the admissible chart region";
    throw DomainError(os.str());
  }
};

}  // namespace curveflow
