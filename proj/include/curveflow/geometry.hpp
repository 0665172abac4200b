#pragma once

// Chart-based tensor calculus for a moving metric g(t) and for the spacetime
// metric ghat = g(t) + dt^2 on M x I.
//
// Index convention: horizontal indices run over 0..n-1; the time direction is
// stored last, at index n, in every spacetime array.

#include "curveflow/common.hpp"
#include "curveflow/metric.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdint>
#include <random>
#include <type_traits>

namespace curveflow {

namespace detail {

template <class T>
T scaled_difference(const T& plus, const T& minus, double inv) {
  T d = plus;
  d -= minus;
  d *= inv;
  return d;
}

/// Central difference at step h and h/2, combined by one Richardson level.
template <class F>
auto richardson_derivative(F&& f, double h) {
  using R = std::decay_t<std::invoke_result_t<F&, double>>;
  const R coarse = scaled_difference<R>(f(h), f(-h), 1.0 / (2.0 * h));
  const R fine = scaled_difference<R>(f(0.5 * h), f(-0.5 * h), 1.0 / h);
  R out = fine;
  out *= 4.0 / 3.0;
  R c = coarse;
  c *= 1.0 / 3.0;
  out -= c;
  return out;
}

inline Mat metric_at(const MetricFamily& m, double t, const Vec& x) {
  Mat g = m.metric(t, x);
  if (g.rows() != m.dimension() || g.cols() != m.dimension())
    throw GeometryError("metric closure returned a matrix of the wrong size");
  return g;
}

inline Mat checked_inverse(const Mat& g) {
  Eigen::LLT<Mat> llt(g);
  if (llt.info() != Eigen::Success)
    throw GeometryError("metric is not positive-definite");
  const Mat id = Mat::Identity(g.rows(), g.cols());
  return llt.solve(id);
}

inline MetricGradient gradient_unchecked(const MetricFamily& m, double t, const Vec& x) {
  if (m.has_analytic_gradient()) return m.metric_dx(t, x);
  MetricGradient dg{};
  const Vec h = m.space_steps();
  for (int k = 0; k < m.dimension(); ++k) {
    dg[k] = richardson_derivative(
        [&](double s) {
          Vec y = x;
          y[k] += s;
          return metric_at(m, t, y);
        },
        h[k]);
  }
  return dg;
}

inline Tensor<3> christoffel_from(const Mat& g_inv, const MetricGradient& dg, int n) {
  // Lowered symbols first: Gamma_{l,ij} = 1/2 (d_i g_jl + d_j g_il - d_l g_ij).
  Tensor<3> lowered(n);
  for (int l = 0; l < n; ++l)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        lowered(l, i, j) = 0.5 * (dg[i](j, l) + dg[j](i, l) - dg[l](i, j));
  Tensor<3> gamma(n);
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j) {
        double s = 0.0;
        for (int l = 0; l < n; ++l) s += g_inv(k, l) * lowered(l, i, j);
        gamma(k, i, j) = s;
        gamma(k, j, i) = s;
      }
  return gamma;
}

inline Tensor<3> christoffel_unchecked(const MetricFamily& m, double t, const Vec& x) {
  const Mat g = metric_at(m, t, x);
  return christoffel_from(checked_inverse(g), gradient_unchecked(m, t, x), m.dimension());
}

/// Ricci tensor from a Christoffel field by finite differences.
template <class GammaField>
Mat ricci_from_christoffel_field(GammaField&& gamma_at, const Vec& x, const Vec& h, int n) {
  const Tensor<3> gamma = gamma_at(x);
  std::array<Tensor<3>, kMaxDim> d_gamma{};
  for (int k = 0; k < n; ++k) {
    d_gamma[k] = richardson_derivative(
        [&](double s) {
          Vec y = x;
          y[k] += s;
          return gamma_at(y);
        },
        h[k]);
  }
  Mat ric = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double v = 0.0;
      for (int k = 0; k < n; ++k) {
        v += d_gamma[k](k, i, j) - d_gamma[i](k, k, j);
        for (int l = 0; l < n; ++l)
          v += gamma(k, k, l) * gamma(l, i, j) - gamma(k, i, l) * gamma(l, k, j);
      }
      ric(i, j) = v;
    }
  return 0.5 * (ric + ric.transpose());
}

inline Mat ricci_unchecked(const MetricFamily& m, double t, const Vec& x) {
  if (m.has_analytic_ricci()) return m.ricci(t, x);
  return ricci_from_christoffel_field(
      [&](const Vec& y) { return christoffel_unchecked(m, t, y); }, x, m.space_steps(),
      m.dimension());
}

inline Mat spacetime_metric_from(const Mat& g) {
  const int n = static_cast<int>(g.rows());
  Mat gh = Mat::Zero(n + 1, n + 1);
  gh.topLeftCorner(n, n) = g;
  gh(n, n) = 1.0;
  return gh;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Horizontal calculus

inline MetricGradient metric_gradient(const MetricFamily& m, double t, const Vec& x) {
  m.require_point(t, x);
  return detail::gradient_unchecked(m, t, x);
}

/// Levi-Civita symbols Gamma^k_ij of g(t), accessed as gamma(k, i, j).
inline Tensor<3> christoffel_horizontal(const MetricFamily& m, double t, const Vec& x) {
  m.require_point(t, x);
  return detail::christoffel_unchecked(m, t, x);
}

inline Mat ricci_horizontal(const MetricFamily& m, double t, const Vec& x) {
  m.require_point(t, x);
  return detail::ricci_unchecked(m, t, x);
}

/// Components (nabla_k Ric)_ij, accessed as nabla(k, i, j).
inline Tensor<3> cov_deriv_ricci_tensor(const MetricFamily& m, double t, const Vec& x) {
  m.require_point(t, x);
  const int n = m.dimension();
  const Tensor<3> gamma = detail::christoffel_unchecked(m, t, x);
  const Mat ric = detail::ricci_unchecked(m, t, x);
  const Vec h = m.space_steps();
  Tensor<3> nabla(n);
  for (int k = 0; k < n; ++k) {
    const Mat d_ric = detail::richardson_derivative(
        [&](double s) {
          Vec y = x;
          y[k] += s;
          return detail::ricci_unchecked(m, t, y);
        },
        h[k]);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double v = d_ric(i, j);
        for (int l = 0; l < n; ++l)
          v -= gamma(l, k, i) * ric(l, j) + gamma(l, k, j) * ric(i, l);
        nabla(k, i, j) = v;
      }
  }
  return nabla;
}

/// (nabla^g_S Ric) as a symmetric bilinear form; S must be g-unit.
inline Mat cov_deriv_ricci(const MetricFamily& m, double t, const Vec& x, const Vec& s) {
  m.require_point(t, x);
  const Mat g = detail::metric_at(m, t, x);
  if (std::abs(std::sqrt(quad(g, s, s)) - 1.0) > 1e-9)
    throw PreconditionError("cov_deriv_ricci requires a g-unit direction");
  const Tensor<3> nabla = cov_deriv_ricci_tensor(m, t, x);
  const int n = m.dimension();
  Mat out = Mat::Zero(n, n);
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) out(i, j) += s[k] * nabla(k, i, j);
  return 0.5 * (out + out.transpose());
}

// ---------------------------------------------------------------------------
// Spacetime connection

/// Christoffel symbols of ghat on M x I. `mixed(k, i)` is Gammahat^k_{i0}
/// (= Gammahat^k_{0i}) and `vertical(i, j)` is Gammahat^0_{ij}; every other
/// symbol with a time index vanishes.
struct ChristoffelTable {
  int n = 0;
  Tensor<3> horizontal;
  Mat mixed;
  Mat vertical;

  /// Full (n+1)-dimensional table with the time index stored last.
  Tensor<3> full() const {
    Tensor<3> f(n + 1);
    for (int k = 0; k < n; ++k)
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) f(k, i, j) = horizontal(k, i, j);
        f(k, i, n) = mixed(k, i);
        f(k, n, i) = mixed(k, i);
      }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) f(n, i, j) = vertical(i, j);
    return f;
  }
};

namespace detail {

inline ChristoffelTable spacetime_christoffel_unchecked(const MetricFamily& m, double t,
                                                        const Vec& x) {
  const int n = m.dimension();
  const Mat g = metric_at(m, t, x);
  const Mat g_inv = checked_inverse(g);
  const Mat ric = ricci_unchecked(m, t, x);
  ChristoffelTable table;
  table.n = n;
  table.horizontal = christoffel_from(g_inv, gradient_unchecked(m, t, x), n);
  table.mixed = -g_inv * ric;
  table.vertical = ric;
  return table;
}

}  // namespace detail

inline ChristoffelTable spacetime_christoffel(const MetricFamily& m, double t, const Vec& x) {
  m.require_point(t, x);
  return detail::spacetime_christoffel_unchecked(m, t, x);
}

inline Mat spacetime_metric(const MetricFamily& m, double t, const Vec& x) {
  m.require_point(t, x);
  return detail::spacetime_metric_from(detail::metric_at(m, t, x));
}

/// Vector on M x I split into chart components and the d/dt coefficient.
struct SpacetimeVector {
  Vec horizontal;
  double vertical = 0.0;

  static SpacetimeVector horizontal_only(const Vec& v) { return {v, 0.0}; }
  static SpacetimeVector time_direction(int n) { return {Vec::Zero(n), 1.0}; }

  Vec full() const {
    const int n = static_cast<int>(horizontal.size());
    Vec f(n + 1);
    f.head(n) = horizontal;
    f[n] = vertical;
    return f;
  }

  static SpacetimeVector from_full(const Vec& f) {
    const int n = static_cast<int>(f.size()) - 1;
    return {f.head(n), f[n]};
  }
};

inline double spacetime_inner(const Mat& g, const SpacetimeVector& a, const SpacetimeVector& b) {
  return quad(g, a.horizontal, b.horizontal) + a.vertical * b.vertical;
}

/// ghat covariant derivative of a field V in direction A at (t, x):
/// (nabla_A V)^a = dV^a + Gammahat^a_bc A^b V^c, where dV holds the
/// directional derivatives A(V^a) of the field components.
inline SpacetimeVector spacetime_cov_deriv(const ChristoffelTable& table, const SpacetimeVector& a,
                                           const SpacetimeVector& v, const SpacetimeVector& dv) {
  const Tensor<3> gamma = table.full();
  const Vec af = a.full();
  const Vec vf = v.full();
  Vec out = dv.full();
  const int d = table.n + 1;
  for (int i = 0; i < d; ++i)
    for (int b = 0; b < d; ++b)
      for (int c = 0; c < d; ++c) out[i] += gamma(i, b, c) * af[b] * vf[c];
  return SpacetimeVector::from_full(out);
}

inline SpacetimeVector spacetime_cov_deriv(const MetricFamily& m, double t, const Vec& x,
                                           const SpacetimeVector& a, const SpacetimeVector& v,
                                           const SpacetimeVector& dv) {
  return spacetime_cov_deriv(spacetime_christoffel(m, t, x), a, v, dv);
}

// ---------------------------------------------------------------------------
// Curvature

/// Contracts a (1,3) curvature tensor R^l_{abc} into Rm(A,B,C,D) = <R(A,B)D, C>.
inline double contract_riemann(const Tensor<4>& r, const Mat& metric, const Vec& a, const Vec& b,
                               const Vec& c, const Vec& d) {
  const int n = r.dim();
  const Vec c_low = metric * c;
  double s = 0.0;
  for (int l = 0; l < n; ++l) {
    if (c_low[l] == 0.0) continue;
    for (int i = 0; i < n; ++i) {
      if (a[i] == 0.0) continue;
      for (int j = 0; j < n; ++j) {
        if (b[j] == 0.0) continue;
        for (int k = 0; k < n; ++k) s += r(l, i, j, k) * a[i] * b[j] * d[k] * c_low[l];
      }
    }
  }
  return s;
}

/// Fully lowered curvature Rm_{mabc} = g_{ml} R^l_{abc}.
inline Tensor<4> lower_riemann(const Tensor<4>& r, const Mat& metric) {
  const int n = r.dim();
  Tensor<4> low(n);
  for (int m = 0; m < n; ++m)
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        for (int c = 0; c < n; ++c) {
          double s = 0.0;
          for (int l = 0; l < n; ++l) s += metric(m, l) * r(l, a, b, c);
          low(m, a, b, c) = s;
        }
  return low;
}

namespace detail {

inline Tensor<4> riemann_from_gamma(const Tensor<3>& gamma,
                                    const std::array<Tensor<3>, kMaxSpacetimeDim>& dg, int d) {
  Tensor<4> r(d);
  for (int l = 0; l < d; ++l)
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b)
        for (int c = 0; c < d; ++c) {
          double v = dg[a](l, b, c) - dg[b](l, a, c);
          for (int mu = 0; mu < d; ++mu)
            v += gamma(l, a, mu) * gamma(mu, b, c) - gamma(l, b, mu) * gamma(mu, a, c);
          r(l, a, b, c) = v;
        }
  return r;
}

}  // namespace detail

/// Curvature R^l_{abc} of ghat, R(A,B)C = nabla_A nabla_B C - nabla_B nabla_A C - nabla_[A,B] C.
/// Derivatives of Gammahat use Richardson-extrapolated central differences in
/// space and time with steps fd_scale * extent (fd_scale defaults to the family's).
inline Tensor<4> spacetime_riemann_tensor(const MetricFamily& m, double t, const Vec& x,
                                          double fd_scale = -1.0) {
  m.require_point(t, x);
  const double scale = fd_scale > 0.0 ? fd_scale : m.fd_scale;
  const double ht = scale * m.horizon;
  if (t < 2.0 * ht || t > m.horizon - 2.0 * ht)
    throw DomainError("spacetime curvature needs t at least 2*h_fd away from the time endpoints");
  const int n = m.dimension();
  const int d = n + 1;
  const auto gamma_at = [&](double tt, const Vec& y) {
    return detail::spacetime_christoffel_unchecked(m, tt, y).full();
  };
  const Tensor<3> gamma = gamma_at(t, x);
  std::array<Tensor<3>, kMaxSpacetimeDim> dg{};
  for (int a = 0; a < n; ++a) {
    const double h = scale * m.chart.extent(a);
    dg[a] = detail::richardson_derivative(
        [&](double s) {
          Vec y = x;
          y[a] += s;
          return gamma_at(t, y);
        },
        h);
  }
  dg[n] = detail::richardson_derivative([&](double s) { return gamma_at(t + s, x); }, ht);
  return detail::riemann_from_gamma(gamma, dg, d);
}

/// Rmhat(A,B,C,D) for spacetime vectors.
inline double spacetime_riemann(const MetricFamily& m, double t, const Vec& x,
                                const SpacetimeVector& a, const SpacetimeVector& b,
                                const SpacetimeVector& c, const SpacetimeVector& d) {
  const Tensor<4> r = spacetime_riemann_tensor(m, t, x);
  return contract_riemann(r, spacetime_metric(m, t, x), a.full(), b.full(), c.full(), d.full());
}

/// Curvature R^l_{ijk} of the horizontal metric g(t) alone.
inline Tensor<4> horizontal_riemann_tensor(const MetricFamily& m, double t, const Vec& x) {
  m.require_point(t, x);
  const int n = m.dimension();
  const Tensor<3> gamma = detail::christoffel_unchecked(m, t, x);
  std::array<Tensor<3>, kMaxSpacetimeDim> dg{};
  for (int a = 0; a < n; ++a) {
    const double h = m.fd_scale * m.chart.extent(a);
    dg[a] = detail::richardson_derivative(
        [&](double s) {
          Vec y = x;
          y[a] += s;
          return detail::christoffel_unchecked(m, t, y);
        },
        h);
  }
  return detail::riemann_from_gamma(gamma, dg, n);
}

// ---------------------------------------------------------------------------
// Norms relative to a metric

/// Columns form a metric-orthonormal frame.
inline Mat orthonormal_frame(const Mat& metric) {
  Eigen::LLT<Mat> llt(metric);
  if (llt.info() != Eigen::Success) throw GeometryError("metric is not positive-definite");
  const Mat lower = llt.matrixL();
  const Mat id = Mat::Identity(metric.rows(), metric.cols());
  return lower.transpose().triangularView<Eigen::Upper>().solve(id);
}

/// Operator norm of a symmetric bilinear form relative to the metric.
inline double form_operator_norm(const Mat& metric, const Mat& form) {
  const Mat e = orthonormal_frame(metric);
  const Mat f = e.transpose() * form * e;
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (f + f.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Frobenius norm of a covariant 3-tensor in an orthonormal frame (an upper
/// bound for its multilinear operator norm).
inline double tensor3_norm(const Mat& metric, const Tensor<3>& low) {
  const Mat e = orthonormal_frame(metric);
  const int n = low.dim();
  double s = 0.0;
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < n; ++c) {
        double v = 0.0;
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) v += low(i, j, k) * e(i, a) * e(j, b) * e(k, c);
        s += v * v;
      }
  return std::sqrt(s);
}

/// Frobenius norm of a lowered 4-tensor in an orthonormal frame.
inline double tensor4_norm(const Mat& metric, const Tensor<4>& low) {
  const Mat e = orthonormal_frame(metric);
  const int n = low.dim();
  // Transform one index at a time.
  Tensor<4> cur = low;
  for (int slot = 0; slot < 4; ++slot) {
    Tensor<4> next(n);
    for (int p = 0; p < n; ++p)
      for (int q = 0; q < n; ++q)
        for (int r = 0; r < n; ++r)
          for (int s = 0; s < n; ++s) {
            double v = 0.0;
            for (int i = 0; i < n; ++i) {
              switch (slot) {
                case 0: v += cur(i, q, r, s) * e(i, p); break;
                case 1: v += cur(p, i, r, s) * e(i, q); break;
                case 2: v += cur(p, q, i, s) * e(i, r); break;
                default: v += cur(p, q, r, i) * e(i, s); break;
              }
            }
            next(p, q, r, s) = v;
          }
    cur = next;
  }
  double s2 = 0.0;
  for (int p = 0; p < n; ++p)
    for (int q = 0; q < n; ++q)
      for (int r = 0; r < n; ++r)
        for (int s = 0; s < n; ++s) s2 += cur(p, q, r, s) * cur(p, q, r, s);
  return std::sqrt(s2);
}

// ---------------------------------------------------------------------------

/// Draws an admissible chart point uniformly from the guarded box.
template <class Rng>
Vec sample_admissible_point(const ChartDomain& chart, Rng& rng) {
  Vec x(chart.dimension());
  for (int i = 0; i < chart.dimension(); ++i) {
    const double lo = chart.periodic[i] ? chart.lower[i] : chart.lower[i] + chart.boundary_margin;
    const double hi = chart.periodic[i] ? chart.upper[i] : chart.upper[i] - chart.boundary_margin;
    x[i] = std::uniform_real_distribution<double>(lo, hi)(rng);
  }
  return x;
}

/// Max over seeded random samples of |dg/dt + 2 Ric|_max.
inline double validate_ricci_flow(const MetricFamily& m, int sample_count, std::uint64_t seed) {
  if (sample_count < 1) throw PreconditionError("sample_count must be >= 1");
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (int s = 0; s < sample_count; ++s) {
    const double t = std::uniform_real_distribution<double>(0.0, m.horizon)(rng);
    const Vec x = sample_admissible_point(m.chart, rng);
    const Mat r = m.metric_dt(t, x) + 2.0 * ricci_horizontal(m, t, x);
    worst = std::max(worst, r.cwiseAbs().maxCoeff());
  }
  return worst;
}

}  // namespace curveflow
