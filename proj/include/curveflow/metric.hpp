#pragma once

#include "curveflow/chart.hpp"
#include "curveflow/common.hpp"

#include <array>
#include <functional>
#include <string>

namespace curveflow {

/// Spatial derivatives of the metric: entry k holds the matrix d g_ij / dx^k.
using MetricGradient = std::array<Mat, kMaxDim>;

/// A time-dependent Riemannian metric g(t) on a single chart, t in [0, horizon].
///
/// `metric` and `metric_dt` are required. `metric_dx` and `ricci` are
/// optional analytic closures; when empty, the geometry routines fall back to
/// central finite differences with steps `fd_scale * extent`.
struct MetricFamily {
  using MatrixField = std::function<Mat(double t, const Vec& x)>;
  using GradientField = std::function<MetricGradient(double t, const Vec& x)>;

  std::string name;
  ChartDomain chart;
  double horizon = 0.0;
  MatrixField metric;
  MatrixField metric_dt;
  MatrixField ricci;
  GradientField metric_dx;
  double fd_scale = 1e-4;

  int dimension() const { return chart.dimension(); }

  bool has_analytic_ricci() const { return static_cast<bool>(ricci); }
  bool has_analytic_gradient() const { return static_cast<bool>(metric_dx); }

  /// Per-coordinate finite-difference steps.
  Vec space_steps() const {
    Vec h(dimension());
    for (int i = 0; i < dimension(); ++i) h[i] = fd_scale * chart.extent(i);
    return h;
  }

  double time_step() const { return fd_scale * horizon; }

  void require_time(double t) const {
    if (!(t >= 0.0 && t <= horizon))
      throw DomainError("time " + std::to_string(t) + " outside [0, " +
                        std::to_string(horizon) + "]");
  }

  void require_point(double t, const Vec& x) const {
    require_time(t);
    chart.require_admissible(x);
  }
};

}  // namespace curveflow
