#pragma once

// Closed curves sampled at N uniformly indexed parameter nodes x_j = j/N and
// their arclength calculus in the moving metric.

#include "curveflow/backgrounds.hpp"
#include "curveflow/geometry.hpp"

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace curveflow {

struct DiscreteCurve {
  std::shared_ptr<const MetricFamily> background;
  /// Lifted chart coordinates; node j + N equals node j plus period_shift.
  std::vector<Vec> nodes;
  Vec period_shift;
  double t = 0.0;

  int size() const { return static_cast<int>(nodes.size()); }
  int dimension() const { return background->dimension(); }

  /// Lifted position of node j for any integer j.
  Vec lifted(int j) const {
    const int n = size();
    int wraps = j >= 0 ? j / n : -((-j + n - 1) / n);
    const int base = j - wraps * n;
    Vec p = nodes[base];
    if (wraps != 0) p += static_cast<double>(wraps) * period_shift;
    return p;
  }

  Vec reduced(int j) const { return background->chart.reduce(lifted(j)); }

  /// Moves the lift by whole periods so node 0 sits in the base cell.
  void rebase() {
    const auto& chart = background->chart;
    const Vec r = chart.reduce(nodes[0]);
    const Vec offset = nodes[0] - r;
    if (offset.cwiseAbs().maxCoeff() == 0.0) return;
    for (auto& p : nodes) p -= offset;
  }

  void validate() const {
    if (!background) throw PreconditionError("curve has no background");
    if (size() < 16 || size() % 2 != 0)
      throw PreconditionError("curve needs an even node count N >= 16");
    for (int j = 0; j < size(); ++j) background->chart.require_admissible(reduced(j));
  }
};

namespace detail {

inline constexpr double kStencil[4] = {1.0, -8.0, 8.0, -1.0};
inline constexpr int kStencilOffset[4] = {-2, -1, 1, 2};

}  // namespace detail

/// Fourth-order central derivative d/dx of a periodic scalar on x_j = j/N.
inline std::vector<double> periodic_derivative(std::span<const double> f) {
  const int n = static_cast<int>(f.size());
  const double scale = n / 12.0;
  std::vector<double> out(n);
  for (int j = 0; j < n; ++j) {
    double s = 0.0;
    for (int q = 0; q < 4; ++q) s += detail::kStencil[q] * f[(j + detail::kStencilOffset[q] + n) % n];
    out[j] = scale * s;
  }
  return out;
}

/// Same stencil applied componentwise to a periodic vector field.
inline std::vector<Vec> periodic_derivative(std::span<const Vec> f) {
  const int n = static_cast<int>(f.size());
  const double scale = n / 12.0;
  std::vector<Vec> out(n);
  for (int j = 0; j < n; ++j) {
    Vec s = Vec::Zero(f[j].size());
    for (int q = 0; q < 4; ++q) s += detail::kStencil[q] * f[(j + detail::kStencilOffset[q] + n) % n];
    out[j] = scale * s;
  }
  return out;
}

/// Per-node derived fields of a discrete curve at its time t.
struct CurveGeometry {
  double t = 0.0;
  double epsilon = 0.0;
  std::vector<Vec> position;  // reduced chart coordinates
  std::vector<Vec> tangent;   // X = dc/dx
  std::vector<Vec> unit_tangent;
  std::vector<Vec> curvature;  // H = nabla^g_S S
  std::vector<double> speed;   // |X|
  std::vector<double> k2;
  std::vector<double> k;
  std::vector<double> h;  // sqrt(k^2 + eps^2)
  std::vector<double> ds;
  std::vector<Mat> metric;
  std::vector<Tensor<3>> christoffel;
  double length = 0.0;
  double total_curvature = 0.0;
  double total_curvature_eps = 0.0;

  int size() const { return static_cast<int>(speed.size()); }

  double min_speed() const { return *std::min_element(speed.begin(), speed.end()); }
  double max_k() const { return *std::max_element(k.begin(), k.end()); }
  double min_ds() const { return *std::min_element(ds.begin(), ds.end()); }
};

inline double curve_chart_extent(const DiscreteCurve& c) { return c.background->chart.max_extent(); }

inline CurveGeometry curve_geometry(const DiscreteCurve& curve, double epsilon = 0.0) {
  const MetricFamily& m = *curve.background;
  const int n = curve.size();
  const int dim = m.dimension();
  if (n < 5) throw PreconditionError("curve_geometry needs at least 5 nodes");
  m.require_time(curve.t);

  CurveGeometry geo;
  geo.t = curve.t;
  geo.epsilon = epsilon;
  geo.position.resize(n);
  geo.tangent.resize(n);
  geo.unit_tangent.resize(n);
  geo.curvature.resize(n);
  geo.speed.resize(n);
  geo.k2.resize(n);
  geo.k.resize(n);
  geo.h.resize(n);
  geo.ds.resize(n);
  geo.metric.resize(n);
  geo.christoffel.resize(n);

  const double scale = n / 12.0;
  const double degenerate = 1e-10 * m.chart.max_extent();
  for (int j = 0; j < n; ++j) {
    Vec x = Vec::Zero(dim);
    for (int q = 0; q < 4; ++q) x += detail::kStencil[q] * curve.lifted(j + detail::kStencilOffset[q]);
    geo.tangent[j] = scale * x;
    geo.position[j] = curve.reduced(j);
    m.chart.require_admissible(geo.position[j]);
    geo.metric[j] = detail::metric_at(m, curve.t, geo.position[j]);
    geo.christoffel[j] = detail::christoffel_unchecked(m, curve.t, geo.position[j]);
    const double sp2 = quad(geo.metric[j], geo.tangent[j], geo.tangent[j]);
    geo.speed[j] = std::sqrt(std::max(sp2, 0.0));
    if (!(geo.speed[j] > degenerate))
      throw GeometryError("degenerate curve: |X| below threshold at node " + std::to_string(j));
    geo.unit_tangent[j] = geo.tangent[j] / geo.speed[j];
  }

  const auto d_unit = periodic_derivative(std::span<const Vec>(geo.unit_tangent));
  for (int j = 0; j < n; ++j) {
    Vec conn = Vec::Zero(dim);
    const auto& gam = geo.christoffel[j];
    const Vec& xv = geo.tangent[j];
    const Vec& sv = geo.unit_tangent[j];
    for (int k = 0; k < dim; ++k)
      for (int a = 0; a < dim; ++a)
        for (int b = 0; b < dim; ++b) conn[k] += gam(k, a, b) * xv[a] * sv[b];
    geo.curvature[j] = (d_unit[j] + conn) / geo.speed[j];
    geo.k2[j] = std::max(quad(geo.metric[j], geo.curvature[j], geo.curvature[j]), 0.0);
    geo.k[j] = std::sqrt(geo.k2[j]);
    geo.h[j] = std::sqrt(geo.k2[j] + epsilon * epsilon);
    geo.ds[j] = geo.speed[j] / n;
    geo.length += geo.ds[j];
    geo.total_curvature += geo.k[j] * geo.ds[j];
    geo.total_curvature_eps += geo.h[j] * geo.ds[j];
  }
  return geo;
}

/// d/ds (order 1) or d^2/ds^2 (order 2, as a composition of first
/// derivatives) of a per-node scalar field.
inline std::vector<double> arclength_derivative(std::span<const double> field, const CurveGeometry& geo,
                                                int order = 1) {
  if (static_cast<int>(field.size()) != geo.size())
    throw PreconditionError("field length must equal the node count");
  if (order != 1 && order != 2) throw PreconditionError("arclength_derivative order must be 1 or 2");
  std::vector<double> d = periodic_derivative(field);
  for (int j = 0; j < geo.size(); ++j) d[j] /= geo.speed[j];
  if (order == 2) return arclength_derivative(d, geo, 1);
  return d;
}

/// Horizontal covariant derivative nabla^g_S V of a per-node vector field.
inline std::vector<Vec> covariant_derivative_along(std::span<const Vec> field, const CurveGeometry& geo) {
  const int n = geo.size();
  if (static_cast<int>(field.size()) != n) throw PreconditionError("field length must equal the node count");
  const auto dv = periodic_derivative(field);
  std::vector<Vec> out(n);
  for (int j = 0; j < n; ++j) {
    const int dim = static_cast<int>(field[j].size());
    Vec conn = Vec::Zero(dim);
    const auto& gam = geo.christoffel[j];
    for (int k = 0; k < dim; ++k)
      for (int a = 0; a < dim; ++a)
        for (int b = 0; b < dim; ++b) conn[k] += gam(k, a, b) * geo.tangent[j][a] * field[j][b];
    out[j] = (dv[j] + conn) / geo.speed[j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Seed curves

enum class CurveKind { torus_circle, torus_fourier, torus_line, sphere_latitude, product_ramp };

inline std::string_view to_string(CurveKind k) {
  switch (k) {
    case CurveKind::torus_circle: return "torus_circle";
    case CurveKind::torus_fourier: return "torus_fourier";
    case CurveKind::torus_line: return "torus_line";
    case CurveKind::sphere_latitude: return "sphere_latitude";
    case CurveKind::product_ramp: return "product_ramp";
  }
  return "?";
}

inline std::optional<CurveKind> curve_kind_from_string(std::string_view s) {
  for (auto k : {CurveKind::torus_circle, CurveKind::torus_fourier, CurveKind::torus_line,
                 CurveKind::sphere_latitude, CurveKind::product_ramp})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

struct CurveSpec {
  CurveKind kind = CurveKind::torus_circle;
  /// Circle centre on a torus; empty means the middle of the chart.
  std::vector<double> center;
  double radius = 1.0;
  /// Radial Fourier amplitudes (relative to radius) for modes 1, 2, ...
  std::vector<double> amplitudes;
  double theta0 = std::numbers::pi / 3.0;
  /// Windings around the circle factor (product_ramp).
  int winding = 1;
  /// Amplitude of a sin(2 pi x) modulation of theta (product_ramp on spheres).
  double tilt = 0.0;
  std::uint64_t seed = 0;
};

inline DiscreteCurve seed_curve(const CurveSpec& spec, int n_nodes,
                                std::shared_ptr<const MetricFamily> background) {
  if (!background) throw PreconditionError("seed_curve needs a background");
  if (n_nodes < 16 || n_nodes % 2 != 0) throw PreconditionError("N must be even and >= 16");
  const MetricFamily& m = *background;
  const auto& chart = m.chart;
  const int dim = m.dimension();
  const bool sphere = !chart.periodic[0];
  const double two_pi = 2.0 * std::numbers::pi;

  DiscreteCurve c;
  c.background = background;
  c.nodes.resize(n_nodes);
  c.period_shift = Vec::Zero(dim);
  c.t = 0.0;

  Vec center(dim);
  for (int i = 0; i < dim; ++i)
    center[i] = i < static_cast<int>(spec.center.size()) ? spec.center[i]
                                                          : 0.5 * (chart.lower[i] + chart.upper[i]);

  switch (spec.kind) {
    case CurveKind::torus_circle:
    case CurveKind::torus_fourier: {
      if (sphere) throw SpecError(std::string(to_string(spec.kind)) + " requires a flat_torus background");
      if (!(spec.radius > 0.0)) throw SpecError("circle radius must be positive");
      std::vector<double> phases(spec.amplitudes.size(), 0.0);
      if (spec.kind == CurveKind::torus_fourier) {
        std::mt19937_64 rng(spec.seed);
        std::uniform_real_distribution<double> u(0.0, two_pi);
        for (auto& p : phases) p = u(rng);
      }
      for (int j = 0; j < n_nodes; ++j) {
        const double a = two_pi * j / n_nodes;
        double r = spec.radius;
        if (spec.kind == CurveKind::torus_fourier)
          for (std::size_t q = 0; q < spec.amplitudes.size(); ++q)
            r += spec.radius * spec.amplitudes[q] * std::cos((q + 1.0) * a + phases[q]);
        Vec p = center;
        p[0] += r * std::cos(a);
        p[1] += r * std::sin(a);
        c.nodes[j] = p;
      }
      break;
    }
    case CurveKind::torus_line: {
      if (sphere) throw SpecError("torus_line requires a flat_torus background");
      c.period_shift[0] = chart.extent(0);
      for (int j = 0; j < n_nodes; ++j) {
        Vec p = center;
        p[0] = chart.lower[0] + chart.extent(0) * j / n_nodes;
        c.nodes[j] = p;
      }
      break;
    }
    case CurveKind::sphere_latitude: {
      if (!sphere) throw SpecError("sphere_latitude requires a sphere background");
      c.period_shift[1] = two_pi;
      for (int j = 0; j < n_nodes; ++j) {
        Vec p = center;
        p[0] = spec.theta0;
        p[1] = two_pi * j / n_nodes;
        if (dim == 3) p[2] = chart.lower[2];
        c.nodes[j] = p;
      }
      break;
    }
    case CurveKind::product_ramp: {
      if (spec.winding < 1) throw SpecError("product_ramp winding must be >= 1");
      const int axis = dim - 1;
      if (sphere && dim != 3) throw SpecError("product_ramp on a sphere needs sphere_cross_circle");
      // Flat 3-torus: a helix over a circle of the given radius in the first
      // two axes. Flat 2-torus: a closed straight line.
      const bool helix = !sphere && dim == 3;
      if (sphere) c.period_shift[1] = two_pi;
      if (!sphere && !helix) c.period_shift[0] = chart.extent(0);
      c.period_shift[axis] = spec.winding * chart.extent(axis);
      for (int j = 0; j < n_nodes; ++j) {
        const double x = static_cast<double>(j) / n_nodes;
        Vec p = center;
        if (sphere) {
          p[0] = spec.theta0 + spec.tilt * std::sin(two_pi * x);
          p[1] = two_pi * x;
        } else if (helix) {
          p[0] = center[0] + spec.radius * std::cos(two_pi * x);
          p[1] = center[1] + spec.radius * std::sin(two_pi * x);
        } else {
          p[0] = chart.lower[0] + chart.extent(0) * x;
        }
        p[axis] = chart.lower[axis] + spec.winding * chart.extent(axis) * x;
        c.nodes[j] = p;
      }
      break;
    }
  }
  for (int j = 0; j < n_nodes; ++j) {
    if (!chart.admissible(c.reduced(j)))
      throw SpecError("seed curve leaves the admissible chart region at node " + std::to_string(j));
  }
  c.rebase();
  return c;
}

}  // namespace curveflow
