#pragma once

// Exact Ricci-flow solutions used as test beds.

#include "curveflow/geometry.hpp"
#include "curveflow/metric.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace curveflow {

enum class BackgroundKind { flat_torus, shrinking_sphere, sphere_cross_circle };

inline std::string_view to_string(BackgroundKind k) {
  switch (k) {
    case BackgroundKind::flat_torus: return "flat_torus";
    case BackgroundKind::shrinking_sphere: return "shrinking_sphere";
    case BackgroundKind::sphere_cross_circle: return "sphere_cross_circle";
  }
  return "?";
}

inline std::optional<BackgroundKind> background_kind_from_string(std::string_view s) {
  if (s == "flat_torus") return BackgroundKind::flat_torus;
  if (s == "shrinking_sphere") return BackgroundKind::shrinking_sphere;
  if (s == "sphere_cross_circle") return BackgroundKind::sphere_cross_circle;
  return std::nullopt;
}

struct BackgroundSpec {
  BackgroundKind kind = BackgroundKind::flat_torus;
  /// Torus periods (2 or 3 entries).
  std::vector<double> periods{2.0 * std::numbers::pi, 2.0 * std::numbers::pi};
  /// Initial sphere radius.
  double r0 = 1.0;
  /// Length of the circle factor.
  double circle_length = 2.0 * std::numbers::pi;
  double horizon = 0.4;
  /// Guard band in theta for sphere charts.
  double margin = 0.1;

  /// Throws SpecError listing every violated constraint.
  void validate() const {
    std::vector<std::string> problems;
    if (!(horizon > 0.0)) problems.emplace_back("horizon must be positive");
    switch (kind) {
      case BackgroundKind::flat_torus:
        if (periods.size() < 2 || periods.size() > 3)
          problems.emplace_back("flat_torus needs 2 or 3 periods");
        for (double p : periods)
          if (!(p > 0.0)) problems.emplace_back("torus periods must be positive");
        break;
      case BackgroundKind::sphere_cross_circle:
        if (!(circle_length > 0.0)) problems.emplace_back("circle_length must be positive");
        [[fallthrough]];
      case BackgroundKind::shrinking_sphere:
        if (!(r0 > 0.0)) {
          problems.emplace_back("r0 must be positive");
        } else if (!(horizon < 0.5 * r0 * r0)) {
          problems.emplace_back("horizon must satisfy T < r0^2/2 = " +
                                std::to_string(0.5 * r0 * r0) +
                                " so that r^2(t) = r0^2 - 2t stays positive");
        }
        if (!(margin > 0.0 && margin < 0.5 * std::numbers::pi))
          problems.emplace_back("sphere margin must lie in (0, pi/2)");
        break;
    }
    if (!problems.empty()) {
      std::string msg;
      for (const auto& p : problems) msg += (msg.empty() ? "" : "; ") + p;
      throw SpecError(msg);
    }
  }

  /// r^2(t) of the sphere factor (1 for flat tori).
  double radius_squared(double t) const {
    return kind == BackgroundKind::flat_torus ? 1.0 : r0 * r0 - 2.0 * t;
  }
};

namespace detail {

inline MetricFamily flat_torus_family(const BackgroundSpec& spec) {
  const int n = static_cast<int>(spec.periods.size());
  MetricFamily m;
  m.name = "flat_torus";
  m.chart.lower.assign(n, 0.0);
  m.chart.upper = spec.periods;
  m.chart.periodic.assign(n, true);
  m.horizon = spec.horizon;
  m.metric = [n](double, const Vec&) -> Mat { return Mat::Identity(n, n); };
  m.metric_dt = [n](double, const Vec&) -> Mat { return Mat::Zero(n, n); };
  m.ricci = [n](double, const Vec&) -> Mat { return Mat::Zero(n, n); };
  m.metric_dx = [n](double, const Vec&) {
    MetricGradient dg{};
    for (int k = 0; k < n; ++k) dg[k] = Mat::Zero(n, n);
    return dg;
  };
  return m;
}

/// Round sphere of radius^2 r0^2 - 2t in (theta, phi), optionally times a
/// static circle coordinate psi of the given length.
inline MetricFamily sphere_family(const BackgroundSpec& spec, bool with_circle) {
  const int n = with_circle ? 3 : 2;
  const double r0sq = spec.r0 * spec.r0;
  MetricFamily m;
  m.name = with_circle ? "sphere_cross_circle" : "shrinking_sphere";
  m.chart.lower = {0.0, 0.0};
  m.chart.upper = {std::numbers::pi, 2.0 * std::numbers::pi};
  m.chart.periodic = {false, true};
  if (with_circle) {
    m.chart.lower.push_back(0.0);
    m.chart.upper.push_back(spec.circle_length);
    m.chart.periodic.push_back(true);
  }
  m.chart.boundary_margin = spec.margin;
  m.horizon = spec.horizon;
  const auto unit = [n](const Vec& x) {
    Mat g = Mat::Zero(n, n);
    const double s = std::sin(x[0]);
    g(0, 0) = 1.0;
    g(1, 1) = s * s;
    return g;
  };
  m.metric = [n, r0sq, unit](double t, const Vec& x) -> Mat {
    Mat g = (r0sq - 2.0 * t) * unit(x);
    if (n == 3) g(2, 2) = 1.0;
    return g;
  };
  m.metric_dt = [unit](double, const Vec& x) -> Mat { return -2.0 * unit(x); };
  m.ricci = [unit](double, const Vec& x) -> Mat { return unit(x); };
  m.metric_dx = [n, r0sq](double t, const Vec& x) {
    MetricGradient dg{};
    for (int k = 0; k < n; ++k) dg[k] = Mat::Zero(n, n);
    dg[0](1, 1) = (r0sq - 2.0 * t) * std::sin(2.0 * x[0]);
    return dg;
  };
  return m;
}

}  // namespace detail

inline MetricFamily make_background(const BackgroundSpec& spec) {
  spec.validate();
  MetricFamily m;
  switch (spec.kind) {
    case BackgroundKind::flat_torus: m = detail::flat_torus_family(spec); break;
    case BackgroundKind::shrinking_sphere: m = detail::sphere_family(spec, false); break;
    case BackgroundKind::sphere_cross_circle: m = detail::sphere_family(spec, true); break;
  }
  m.chart.validate();
  return m;
}

/// Known values of a shipped background at time t.
struct ExactData {
  double radius_squared = 1.0;
  /// sup over M of the operator norm of Ric relative to g(t).
  double sup_ricci = 0.0;
  double sup_cov_deriv_ricci = 0.0;
  /// Dense-sampling estimate of sup |Rmhat| (orthonormal Frobenius norm).
  double sup_spacetime_riemann = 0.0;
};

inline ExactData exact_data(const BackgroundSpec& spec, double t, int samples_per_axis = 6) {
  spec.validate();
  if (!(t >= 0.0 && t <= spec.horizon)) throw DomainError("exact_data: t outside [0, T]");
  ExactData d;
  d.radius_squared = spec.radius_squared(t);
  d.sup_ricci = spec.kind == BackgroundKind::flat_torus ? 0.0 : 1.0 / d.radius_squared;
  d.sup_cov_deriv_ricci = 0.0;

  const MetricFamily m = make_background(spec);
  const double ht = 2.0 * m.time_step();
  const double ts = std::clamp(t, ht * 1.01, m.horizon - ht * 1.01);
  const int n = m.dimension();
  std::vector<int> idx(n, 0);
  for (;;) {
    Vec x(n);
    for (int i = 0; i < n; ++i) {
      const double lo = m.chart.periodic[i] ? m.chart.lower[i]
                                            : m.chart.lower[i] + m.chart.boundary_margin;
      const double hi = m.chart.periodic[i] ? m.chart.upper[i]
                                            : m.chart.upper[i] - m.chart.boundary_margin;
      const double frac = m.chart.periodic[i]
                              ? static_cast<double>(idx[i]) / samples_per_axis
                              : static_cast<double>(idx[i]) / (samples_per_axis - 1);
      x[i] = lo + frac * (hi - lo);
    }
    const Mat gh = spacetime_metric(m, ts, x);
    const Tensor<4> low = lower_riemann(spacetime_riemann_tensor(m, ts, x), gh);
    d.sup_spacetime_riemann = std::max(d.sup_spacetime_riemann, tensor4_norm(gh, low));
    int k = 0;
    while (k < n && ++idx[k] == samples_per_axis) idx[k++] = 0;
    if (k == n) break;
  }
  return d;
}

}  // namespace curveflow
