#pragma once

// Residuals of the evolution identities for |X|^2 and k^2 along a recorded
// curve-shrinking flow, curvature-constant estimates, and signed margins of
// the inequalities derived from those identities.

#include "curveflow/flow.hpp"
#include "curveflow/geometry.hpp"
#include "curveflow/parallel.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace curveflow {

enum class K2Variant { corrected, book_erroneous };

/// Everything the identities and inequalities need at one interior frame.
/// Primes are arclength derivatives; "_dt" are time derivatives at fixed x.
struct FrameTerms {
  int frame = 0;
  double t = 0.0;

  std::vector<double> k2, k, h, speed, speed2, ds;
  std::vector<double> dk2_dt, dspeed2_dt, dspeed_dt, dh_dt;
  std::vector<double> k2_p, k2_pp, h_p, h_pp;
  /// <(nabla_S H)^perp, (nabla_S H)^perp> including the vertical part Ric(S,H) dt.
  std::vector<double> perp2;
  std::vector<double> perp_dot_h;
  /// <nabla_S H, S>, equal to -k^2 for the exact flow.
  std::vector<double> tangential;
  std::vector<double> ric_xx, ric_ss, ric_hh, ric_sh;
  std::vector<double> rm_hat;         // Rmhat(Hhat, S, H, S)
  std::vector<double> rm_horizontal;  // Rm_g(H, S, H, S)
  std::vector<double> nabla_ric;      // (nabla^g_S Ric)(S, H)

  // Ramp quantities (circle factor only).
  std::vector<double> u, u_p, u_pp, du_dt, ric_se;
  std::vector<double> q, q_p, q_pp, dq_dt;  // q = h/u

  double length = 0.0, theta = 0.0, theta_eps = 0.0;
  double dlength_dt = 0.0, dtheta_dt = 0.0, dtheta_eps_dt = 0.0;
};

struct TrajectoryAnalysis {
  int nodes = 0;
  double dt = 0.0;
  double frame_spacing = 0.0;
  double epsilon = 0.0;
  std::optional<int> circle_axis;
  std::vector<TrajectorySample> samples;
  std::vector<FrameTerms> frames;
  int skipped_frames = 0;
};

namespace detail {

inline double five_point(double fm2, double fm1, double fp1, double fp2, double spacing) {
  return (fm2 - 8.0 * fm1 + 8.0 * fp1 - fp2) / (12.0 * spacing);
}

struct FrameCache {
  std::vector<double> k2, speed, speed2, h, u, q;
};

inline std::vector<double> time_derivative(const std::vector<FrameCache>& cache, int f,
                                           std::vector<double> FrameCache::*field, double spacing) {
  const auto& a = cache[f - 2].*field;
  const auto& b = cache[f - 1].*field;
  const auto& c = cache[f + 1].*field;
  const auto& d = cache[f + 2].*field;
  std::vector<double> out(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) out[j] = five_point(a[j], b[j], c[j], d[j], spacing);
  return out;
}

}  // namespace detail

/// Evaluates every per-node term at the interior frames 2..F-3. Frames too close
/// to the background's time endpoints for the spacetime curvature stencil are
/// skipped and counted.
inline TrajectoryAnalysis analyze(const Trajectory& tr, unsigned threads = 1) {
  const int nf = tr.frame_count();
  if (nf < 5) throw PreconditionError("residual evaluation needs at least 5 recorded frames");
  const MetricFamily& m = *tr.background;
  const int n = tr.nodes;
  const int dim = m.dimension();
  const double spacing = tr.frame_spacing();

  TrajectoryAnalysis an;
  an.nodes = n;
  an.dt = tr.dt;
  an.frame_spacing = spacing;
  an.epsilon = tr.epsilon;
  an.circle_axis = tr.circle_axis;
  an.samples = tr.samples;

  std::vector<detail::FrameCache> cache(nf);
  parallel_for(nf, threads, [&](int f) {
    const CurveGeometry geo = curve_geometry(tr.curve_at(f), tr.epsilon);
    auto& c = cache[f];
    c.k2 = geo.k2;
    c.speed = geo.speed;
    c.h = geo.h;
    c.speed2.resize(n);
    for (int j = 0; j < n; ++j) c.speed2[j] = geo.speed[j] * geo.speed[j];
    if (tr.circle_axis) {
      c.u = circle_projection(geo, *tr.circle_axis);
      c.q.resize(n);
      for (int j = 0; j < n; ++j) c.q[j] = c.h[j] / c.u[j];
    }
  });

  const double ht = 2.0 * m.time_step();
  std::vector<int> interior;
  for (int f = 2; f + 2 < nf; ++f) {
    if (tr.times[f] < ht || tr.times[f] > m.horizon - ht) {
      ++an.skipped_frames;
      continue;
    }
    interior.push_back(f);
  }
  an.frames.resize(interior.size());

  parallel_for(static_cast<int>(interior.size()), threads, [&](int idx) {
    const int f = interior[idx];
    const DiscreteCurve curve = tr.curve_at(f);
    const CurveGeometry geo = curve_geometry(curve, tr.epsilon);
    const double t = curve.t;
    FrameTerms ft;
    ft.frame = f;
    ft.t = t;
    ft.k2 = geo.k2;
    ft.k = geo.k;
    ft.h = geo.h;
    ft.speed = geo.speed;
    ft.speed2 = cache[f].speed2;
    ft.ds = geo.ds;
    ft.dk2_dt = detail::time_derivative(cache, f, &detail::FrameCache::k2, spacing);
    ft.dspeed2_dt = detail::time_derivative(cache, f, &detail::FrameCache::speed2, spacing);
    ft.dspeed_dt = detail::time_derivative(cache, f, &detail::FrameCache::speed, spacing);
    ft.dh_dt = detail::time_derivative(cache, f, &detail::FrameCache::h, spacing);
    ft.k2_p = arclength_derivative(geo.k2, geo, 1);
    ft.k2_pp = arclength_derivative(ft.k2_p, geo, 1);
    ft.h_p = arclength_derivative(geo.h, geo, 1);
    ft.h_pp = arclength_derivative(ft.h_p, geo, 1);

    const std::vector<Vec> dsh = covariant_derivative_along(std::span<const Vec>(geo.curvature), geo);
    const auto resize = [n](std::vector<double>& v) { v.assign(n, 0.0); };
    for (auto* v : {&ft.perp2, &ft.perp_dot_h, &ft.tangential, &ft.ric_xx, &ft.ric_ss, &ft.ric_hh,
                    &ft.ric_sh, &ft.rm_hat, &ft.rm_horizontal, &ft.nabla_ric})
      resize(*v);
    for (int j = 0; j < n; ++j) {
      const Vec& x = geo.position[j];
      const Mat& g = geo.metric[j];
      const Vec& s = geo.unit_tangent[j];
      const Vec& hv = geo.curvature[j];
      const Mat ric = ricci_horizontal(m, t, x);
      ft.ric_xx[j] = quad(ric, geo.tangent[j], geo.tangent[j]);
      ft.ric_ss[j] = quad(ric, s, s);
      ft.ric_hh[j] = quad(ric, hv, hv);
      ft.ric_sh[j] = quad(ric, s, hv);

      // nabla_S H = nabla^g_S H + Ric(S,H) dt; perp removes the S component.
      ft.tangential[j] = quad(g, dsh[j], s);
      const Vec perp_h = dsh[j] - ft.tangential[j] * s;
      ft.perp2[j] = quad(g, perp_h, perp_h) + ft.ric_sh[j] * ft.ric_sh[j];
      ft.perp_dot_h[j] = quad(g, perp_h, hv);

      const Tensor<3> nab = cov_deriv_ricci_tensor(m, t, x);
      double nr = 0.0;
      for (int a = 0; a < dim; ++a)
        for (int b = 0; b < dim; ++b)
          for (int c = 0; c < dim; ++c) nr += nab(a, b, c) * s[a] * s[b] * hv[c];
      ft.nabla_ric[j] = nr;

      const Tensor<4> rh = spacetime_riemann_tensor(m, t, x);
      const Mat gh = detail::spacetime_metric_from(g);
      Vec hhat(dim + 1), sh(dim + 1), hh(dim + 1);
      hhat << hv, 1.0;
      sh << s, 0.0;
      hh << hv, 0.0;
      ft.rm_hat[j] = contract_riemann(rh, gh, hhat, sh, hh, sh);
      ft.rm_horizontal[j] = contract_riemann(horizontal_riemann_tensor(m, t, x), g, hv, s, hv, s);
    }

    if (tr.circle_axis) {
      const int axis = *tr.circle_axis;
      ft.u = cache[f].u;
      ft.q = cache[f].q;
      ft.u_p = arclength_derivative(ft.u, geo, 1);
      ft.u_pp = arclength_derivative(ft.u_p, geo, 1);
      ft.q_p = arclength_derivative(ft.q, geo, 1);
      ft.q_pp = arclength_derivative(ft.q_p, geo, 1);
      ft.du_dt = detail::time_derivative(cache, f, &detail::FrameCache::u, spacing);
      ft.dq_dt = detail::time_derivative(cache, f, &detail::FrameCache::q, spacing);
      ft.ric_se.assign(n, 0.0);
      for (int j = 0; j < n; ++j) {
        const Mat ric = ricci_horizontal(m, t, geo.position[j]);
        Vec e = Vec::Zero(dim);
        e[axis] = 1.0 / std::sqrt(geo.metric[j](axis, axis));
        ft.ric_se[j] = quad(ric, geo.unit_tangent[j], e);
      }
    }

    const auto& sm = tr.samples;
    ft.length = sm[f].length;
    ft.theta = sm[f].total_curvature;
    ft.theta_eps = sm[f].total_curvature_eps;
    ft.dlength_dt = detail::five_point(sm[f - 2].length, sm[f - 1].length, sm[f + 1].length,
                                       sm[f + 2].length, spacing);
    ft.dtheta_dt = detail::five_point(sm[f - 2].total_curvature, sm[f - 1].total_curvature,
                                      sm[f + 1].total_curvature, sm[f + 2].total_curvature, spacing);
    ft.dtheta_eps_dt =
        detail::five_point(sm[f - 2].total_curvature_eps, sm[f - 1].total_curvature_eps,
                           sm[f + 1].total_curvature_eps, sm[f + 2].total_curvature_eps, spacing);
    an.frames[idx] = std::move(ft);
  });
  if (an.frames.empty()) throw PreconditionError("no interior frames away from the time endpoints");
  return an;
}

// ---------------------------------------------------------------------------
// Residual reports

struct ResidualReport {
  std::string name;
  int nodes = 0;
  double dt = 0.0;
  std::vector<double> times;
  std::vector<std::vector<double>> per_node;
  std::vector<double> frame_max;
  std::vector<double> frame_l2;
  double max_norm = 0.0;
  double l2_norm = 0.0;
  /// Largest magnitude of each right-hand-side term over the report.
  std::map<std::string, double> term_breakdown;
};

namespace detail {

inline void finish_report(ResidualReport& r, const TrajectoryAnalysis& an) {
  r.nodes = an.nodes;
  r.dt = an.dt;
  double total = 0.0;
  r.max_norm = 0.0;
  for (std::size_t f = 0; f < r.per_node.size(); ++f) {
    double mx = 0.0, l2 = 0.0;
    const auto& ds = an.frames[f].ds;
    for (std::size_t j = 0; j < r.per_node[f].size(); ++j) {
      mx = std::max(mx, std::abs(r.per_node[f][j]));
      l2 += r.per_node[f][j] * r.per_node[f][j] * ds[j];
    }
    r.frame_max.push_back(mx);
    r.frame_l2.push_back(std::sqrt(l2));
    r.max_norm = std::max(r.max_norm, mx);
    total += l2 * an.frame_spacing;
  }
  r.l2_norm = std::sqrt(total);
}

template <class Fn>
ResidualReport per_node_report(const TrajectoryAnalysis& an, std::string name, Fn&& fn) {
  ResidualReport r;
  r.name = std::move(name);
  for (const auto& ft : an.frames) {
    r.times.push_back(ft.t);
    std::vector<double> v(an.nodes);
    for (int j = 0; j < an.nodes; ++j) v[j] = fn(ft, j);
    r.per_node.push_back(std::move(v));
  }
  finish_report(r, an);
  return r;
}

inline void track(std::map<std::string, double>& b, const std::string& key, double v) {
  double& slot = b[key];
  slot = std::max(slot, std::abs(v));
}

}  // namespace detail

/// d(|X|^2)/dt + 2 Ric(X,X) + 2 k^2 |X|^2 at every node of every interior frame.
inline ResidualReport residual_length_evolution(const TrajectoryAnalysis& an) {
  ResidualReport r = detail::per_node_report(an, "length_evolution", [](const FrameTerms& f, int j) {
    return f.dspeed2_dt[j] + 2.0 * f.ric_xx[j] + 2.0 * f.k2[j] * f.speed2[j];
  });
  for (const auto& f : an.frames)
    for (int j = 0; j < an.nodes; ++j) {
      detail::track(r.term_breakdown, "dspeed2_dt", f.dspeed2_dt[j]);
      detail::track(r.term_breakdown, "ric_xx", 2.0 * f.ric_xx[j]);
      detail::track(r.term_breakdown, "k2_speed2", 2.0 * f.k2[j] * f.speed2[j]);
    }
  return r;
}

/// Scalar form of the commutator identity: d|X|/dt + (k^2 + Ric(S,S)) |X|.
inline ResidualReport residual_commutator(const TrajectoryAnalysis& an) {
  ResidualReport r = detail::per_node_report(an, "commutator", [](const FrameTerms& f, int j) {
    return f.dspeed_dt[j] + (f.k2[j] + f.ric_ss[j]) * f.speed[j];
  });
  for (const auto& f : an.frames)
    for (int j = 0; j < an.nodes; ++j) {
      detail::track(r.term_breakdown, "dspeed_dt", f.dspeed_dt[j]);
      detail::track(r.term_breakdown, "k2_ric_speed", (f.k2[j] + f.ric_ss[j]) * f.speed[j]);
    }
  return r;
}

/// Right-hand side of the k^2 evolution equation at one node.
inline double k2_rhs(const FrameTerms& f, int j, K2Variant variant) {
  const double k2 = f.k2[j];
  double rhs = f.k2_pp[j] - 2.0 * f.perp2[j] + 2.0 * k2 * k2 - 2.0 * f.ric_hh[j] + 4.0 * k2 * f.ric_ss[j];
  if (variant == K2Variant::corrected) {
    rhs += 2.0 * f.rm_hat[j] + 2.0 * f.ric_ss[j] * f.ric_hh[j] - 2.0 * f.nabla_ric[j];
  } else {
    rhs += 2.0 * f.rm_horizontal[j];
  }
  return rhs;
}

/// Magnitude of what the uncorrected equation leaves out at one node.
inline double dropped_terms(const FrameTerms& f, int j) {
  return std::abs(2.0 * f.ric_ss[j] * f.ric_hh[j] - 2.0 * f.nabla_ric[j] +
                  2.0 * (f.rm_hat[j] - f.rm_horizontal[j]));
}

inline std::string_view to_string(K2Variant v) {
  return v == K2Variant::corrected ? "k2_corrected" : "k2_book";
}

inline ResidualReport residual_k2_evolution(const TrajectoryAnalysis& an, K2Variant variant) {
  ResidualReport r = detail::per_node_report(an, std::string(to_string(variant)),
                                             [variant](const FrameTerms& f, int j) {
                                               return f.dk2_dt[j] - k2_rhs(f, j, variant);
                                             });
  for (const auto& f : an.frames)
    for (int j = 0; j < an.nodes; ++j) {
      auto& b = r.term_breakdown;
      const double k2 = f.k2[j];
      detail::track(b, "dk2_dt", f.dk2_dt[j]);
      detail::track(b, "k2_pp", f.k2_pp[j]);
      detail::track(b, "perp2", 2.0 * f.perp2[j]);
      detail::track(b, "k4", 2.0 * k2 * k2);
      detail::track(b, "ric_hh", 2.0 * f.ric_hh[j]);
      detail::track(b, "k2_ric_ss", 4.0 * k2 * f.ric_ss[j]);
      if (variant == K2Variant::corrected) {
        detail::track(b, "rm_hat", 2.0 * f.rm_hat[j]);
        detail::track(b, "ric_ss_ric_hh", 2.0 * f.ric_ss[j] * f.ric_hh[j]);
        detail::track(b, "nabla_ric", 2.0 * f.nabla_ric[j]);
      } else {
        detail::track(b, "rm_horizontal", 2.0 * f.rm_horizontal[j]);
      }
    }
  return r;
}

inline ResidualReport dropped_terms_report(const TrajectoryAnalysis& an) {
  return detail::per_node_report(an, "dropped_terms", [](const FrameTerms& f, int j) {
    return dropped_terms(f, j);
  });
}

inline ResidualReport residual_length_evolution(const Trajectory& tr) {
  return residual_length_evolution(analyze(tr));
}

inline ResidualReport residual_k2_evolution(const Trajectory& tr, K2Variant variant) {
  return residual_k2_evolution(analyze(tr), variant);
}

// ---------------------------------------------------------------------------
// Constants

struct SampleGrid {
  int space_points = 8;
  int time_points = 9;
};

/// Per-term coefficients: |T_i| <= coefficient_i * {k^2, k^2, k^2 + k, k^2, k}
/// for the five curvature terms of the k^2 equation, in order.
struct TermConstants {
  double ric_hh = 0.0;         // -2 Ric(H,H)
  double k2_ric_ss = 0.0;      // 4 k^2 Ric(S,S)
  double rm_hat = 0.0;         // 2 Rmhat(Hhat,S,H,S)
  double ric_ss_ric_hh = 0.0;  // 2 Ric(S,S) Ric(H,H)
  double nabla_ric = 0.0;      // -2 (nabla_S Ric)(S,H)
};

struct ConstantsEstimate {
  double c_hat = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;
  double c_prime = 0.0;
  TermConstants terms;
  double sup_ricci = 0.0;
  double sup_spacetime_riemann = 0.0;
  double sup_cov_deriv_ricci = 0.0;
  std::string provenance;
};

/// Relative inflation applied to sampled curvature sups.
inline constexpr double kConstantsInflation = 1.1;

/// Dense-grid estimate of the curvature constants over [0, horizon].
///
/// Norms are taken relative to g(t) (ghat for Rmhat) at the sampled point:
/// operator norm for Ric, orthonormal Frobenius norm for Rmhat and nabla Ric.
/// The per-term coefficients are 2|Ric|, 4|Ric|, 2|Rmhat|, 2|Ric|^2 and
/// 2|nabla Ric| (each sup inflated by 10%); C_hat = 2 max(sum of the k^2
/// coefficients, sum of the k coefficients), C1 = C_hat/2, C2 = sup|Ric|, and
/// the ramp constant C' = C1 + C2.
inline ConstantsEstimate estimate_constants(const MetricFamily& m, double horizon, const SampleGrid& grid) {
  if (grid.space_points < 2 || grid.time_points < 2) throw PreconditionError("sample grid is empty");
  if (!(horizon > 0.0 && horizon <= m.horizon)) throw PreconditionError("horizon outside the background");
  const int n = m.dimension();
  const double ht = 2.0 * m.time_step();

  double sup_ric = 0.0, sup_rm = 0.0, sup_nab = 0.0;
  std::vector<int> idx(n, 0);
  for (;;) {
    Vec x(n);
    for (int i = 0; i < n; ++i) {
      const bool per = m.chart.periodic[i];
      const double lo = per ? m.chart.lower[i] : m.chart.lower[i] + m.chart.boundary_margin;
      const double hi = per ? m.chart.upper[i] : m.chart.upper[i] - m.chart.boundary_margin;
      const double frac = per ? static_cast<double>(idx[i]) / grid.space_points
                              : static_cast<double>(idx[i]) / (grid.space_points - 1);
      x[i] = lo + frac * (hi - lo);
    }
    for (int it = 0; it < grid.time_points; ++it) {
      const double t = horizon * it / (grid.time_points - 1);
      const Mat g = detail::metric_at(m, t, x);
      sup_ric = std::max(sup_ric, form_operator_norm(g, ricci_horizontal(m, t, x)));
      const Tensor<3> nab = cov_deriv_ricci_tensor(m, t, x);
      sup_nab = std::max(sup_nab, tensor3_norm(g, nab));
      const double tc = std::clamp(t, ht * 1.01, m.horizon - ht * 1.01);
      const Mat gh = spacetime_metric(m, tc, x);
      const Tensor<4> low = lower_riemann(spacetime_riemann_tensor(m, tc, x), gh);
      sup_rm = std::max(sup_rm, tensor4_norm(gh, low));
    }
    int k = 0;
    while (k < n && ++idx[k] == grid.space_points) idx[k++] = 0;
    if (k == n) break;
  }

  // Finite-difference noise floor for tensors that vanish analytically.
  const double floor = 1e-8 * (1.0 + sup_ric);
  ConstantsEstimate c;
  c.sup_ricci = sup_ric;
  c.sup_spacetime_riemann = sup_rm;
  c.sup_cov_deriv_ricci = sup_nab;
  const double ric = kConstantsInflation * sup_ric;
  const double rm = sup_rm > 0.0 ? kConstantsInflation * sup_rm + floor : 0.0;
  const double nab = sup_nab > 0.0 ? kConstantsInflation * sup_nab + floor : 0.0;
  c.terms.ric_hh = 2.0 * ric;
  c.terms.k2_ric_ss = 4.0 * ric;
  c.terms.rm_hat = 2.0 * rm;
  c.terms.ric_ss_ric_hh = 2.0 * ric * ric;
  c.terms.nabla_ric = 2.0 * nab;
  const double k2_coeff = c.terms.ric_hh + c.terms.k2_ric_ss + c.terms.rm_hat + c.terms.ric_ss_ric_hh;
  const double k_coeff = c.terms.rm_hat + c.terms.nabla_ric;
  c.c_hat = 2.0 * std::max(k2_coeff, k_coeff);
  c.c1 = c.c_hat / 2.0;
  c.c2 = sup_ric;
  c.c_prime = c.c1 + c.c2;
  c.provenance = "grid " + std::to_string(grid.space_points) + "^" + std::to_string(n) + " x " +
                 std::to_string(grid.time_points) + " times on [0, " + std::to_string(horizon) +
                 "]; |Ric| operator norm relative to g(t); |Rmhat|, |nabla Ric| orthonormal Frobenius; "
                 "coefficient-wise C_hat (one admissible choice)";
  return c;
}

// ---------------------------------------------------------------------------
// Inequality monitors

/// Signed margins (>= 0 means the inequality holds) at each sample time.
struct MonitorSeries {
  std::string name;
  std::vector<double> times;
  std::vector<double> min_margin;
  /// Per-node margins for pointwise inequalities (empty for integral ones).
  std::vector<std::vector<double>> node_margins;
  /// Allowed discretization slack: 10x the measured parent-identity residual.
  double tolerance = 0.0;
  /// Largest parent-identity residual in the monitor's own units.
  double parent_residual = 0.0;
  std::string parent;

  double worst() const {
    double w = std::numeric_limits<double>::infinity();
    for (double v : min_margin) w = std::min(w, v);
    return w;
  }
  bool passed() const;
};

inline constexpr double kToleranceFactor = 10.0;
/// Margins smaller than this in magnitude are floating-point noise.
inline constexpr double kRoundoffFloor = 1e-12;

inline bool MonitorSeries::passed() const {
  return min_margin.empty() || worst() >= -(tolerance + kRoundoffFloor);
}

namespace detail {

template <class MarginFn, class ParentFn>
MonitorSeries pointwise_monitor(const TrajectoryAnalysis& an, std::string name, std::string parent,
                                MarginFn&& margin, ParentFn&& parent_res) {
  MonitorSeries s;
  s.name = std::move(name);
  s.parent = std::move(parent);
  for (const auto& f : an.frames) {
    std::vector<double> v(an.nodes);
    double mn = std::numeric_limits<double>::infinity();
    for (int j = 0; j < an.nodes; ++j) {
      v[j] = margin(f, j);
      mn = std::min(mn, v[j]);
      s.parent_residual = std::max(s.parent_residual, std::abs(parent_res(f, j)));
    }
    s.times.push_back(f.t);
    s.min_margin.push_back(mn);
    s.node_margins.push_back(std::move(v));
  }
  s.tolerance = kToleranceFactor * s.parent_residual;
  return s;
}

/// Residual of the k^2 identity carried into the units of h = sqrt(k^2+eps^2),
/// plus the discrete chain-rule defects of h^2 = k^2 + eps^2.
inline double h_parent_residual(const FrameTerms& f, int j) {
  const double h = f.h[j];
  const double res_k2 = f.dk2_dt[j] - k2_rhs(f, j, K2Variant::corrected);
  const double chain_space = f.h_pp[j] - (f.k2_pp[j] - 2.0 * f.h_p[j] * f.h_p[j]) / (2.0 * h);
  const double chain_time = f.dh_dt[j] - f.dk2_dt[j] / (2.0 * h);
  return std::abs(res_k2) / (2.0 * h) + std::abs(chain_space) + std::abs(chain_time);
}

inline double commutator_residual(const FrameTerms& f, int j) {
  return f.dspeed_dt[j] + (f.k2[j] + f.ric_ss[j]) * f.speed[j];
}

inline double length_ode_parent(const FrameTerms& f) {
  double integral = 0.0;
  for (std::size_t j = 0; j < f.ds.size(); ++j) integral += (f.k2[j] + f.ric_ss[j]) * f.ds[j];
  return std::abs(f.dlength_dt + integral);
}

inline double theta_eps_parent(const FrameTerms& f) {
  const int n = static_cast<int>(f.ds.size());
  double acc = 0.0, product = 0.0;
  for (int j = 0; j < n; ++j) {
    acc += (h_parent_residual(f, j) + f.h[j] * std::abs(commutator_residual(f, j)) / f.speed[j]) * f.ds[j];
    product += (f.dh_dt[j] * f.speed[j] + f.h[j] * f.dspeed_dt[j]) / n;
  }
  return acc + std::abs(f.dtheta_eps_dt - product);
}

}  // namespace detail

/// Margins of every inequality derived from the k^2 and |X| identities:
/// "corollary"      dk2/dt <= (k2)'' - 2|perp|^2 + 2k^4 + C_hat (k^2 + k)   (pointwise)
/// "h_inequality"   dh/dt <= h'' + k^3 + C1 (h + 1)                        (pointwise)
/// "hprime"         (h')^2 <= |perp|^2                                     (pointwise)
/// "length_ode"     dL/dt <= int (C2 - k^2) ds
/// "theta_eps_ode"  dTheta_eps/dt <= (C1+C2) Theta_eps + C1 L
/// "theta_ode"      dTheta/dt <= (C1+C2) Theta + C1 L
/// "length_exp"     L(t) <= L(0) exp(C2 t)
/// "theta_exp"      Theta(t) + L(t) <= (Theta(0) + L(0)) exp((C1+C2) t)
inline std::vector<MonitorSeries> monitor_inequalities(const TrajectoryAnalysis& an,
                                                       const ConstantsEstimate& c) {
  std::vector<MonitorSeries> out;

  out.push_back(detail::pointwise_monitor(
      an, "corollary", "k2_corrected",
      [&](const FrameTerms& f, int j) {
        const double k2 = f.k2[j];
        return f.k2_pp[j] - 2.0 * f.perp2[j] + 2.0 * k2 * k2 + c.c_hat * (k2 + f.k[j]) - f.dk2_dt[j];
      },
      [](const FrameTerms& f, int j) { return f.dk2_dt[j] - k2_rhs(f, j, K2Variant::corrected); }));

  out.push_back(detail::pointwise_monitor(
      an, "h_inequality", "k2_corrected+h_chain_rule",
      [&](const FrameTerms& f, int j) {
        const double k = f.k[j];
        return f.h_pp[j] + k * k * k + c.c1 * (f.h[j] + 1.0) - f.dh_dt[j];
      },
      [](const FrameTerms& f, int j) { return detail::h_parent_residual(f, j); }));

  out.push_back(detail::pointwise_monitor(
      an, "hprime", "k2_prime_identity",
      [](const FrameTerms& f, int j) { return f.perp2[j] - f.h_p[j] * f.h_p[j]; },
      [](const FrameTerms& f, int j) {
        // (k^2)' = 2 <(nabla_S H)^perp, H>; its defect moves h' away from <perp,H>/h.
        const double h = f.h[j];
        const double a = f.perp_dot_h[j] / h;
        const double res = f.k2_p[j] - 2.0 * f.perp_dot_h[j];
        return std::abs(res) / (2.0 * h) * (std::abs(f.h_p[j]) + std::abs(a));
      }));

  const auto integral_monitor = [&](std::string name, std::string parent, auto&& margin, auto&& parent_res) {
    MonitorSeries s;
    s.name = std::move(name);
    s.parent = std::move(parent);
    for (const auto& f : an.frames) {
      s.times.push_back(f.t);
      s.min_margin.push_back(margin(f));
      s.parent_residual = std::max(s.parent_residual, std::abs(parent_res(f)));
    }
    s.tolerance = kToleranceFactor * s.parent_residual;
    return s;
  };

  out.push_back(integral_monitor(
      "length_ode", "length_evolution_integrated",
      [&](const FrameTerms& f) {
        double integral = 0.0;
        for (std::size_t j = 0; j < f.ds.size(); ++j) integral += (c.c2 - f.k2[j]) * f.ds[j];
        return integral - f.dlength_dt;
      },
      [](const FrameTerms& f) { return detail::length_ode_parent(f); }));

  out.push_back(integral_monitor(
      "theta_eps_ode", "h_inequality+commutator_integrated",
      [&](const FrameTerms& f) {
        return (c.c1 + c.c2) * f.theta_eps + c.c1 * f.length - f.dtheta_eps_dt;
      },
      [](const FrameTerms& f) { return detail::theta_eps_parent(f); }));

  {
    // The Theta bound is the eps -> 0 limit of the Theta_eps bound; at fixed eps
    // the slack also carries the measured eps-gap terms.
    MonitorSeries s = integral_monitor(
        "theta_ode", "theta_eps_ode+eps_limit",
        [&](const FrameTerms& f) { return (c.c1 + c.c2) * f.theta + c.c1 * f.length - f.dtheta_dt; },
        [](const FrameTerms& f) { return detail::theta_eps_parent(f); });
    double gap = 0.0;
    for (const auto& f : an.frames)
      gap = std::max(gap, (c.c1 + c.c2) * (f.theta_eps - f.theta) + std::abs(f.dtheta_eps_dt - f.dtheta_dt));
    s.tolerance += gap;
    out.push_back(std::move(s));
  }

  // Closed-form exponential bounds on every recorded sample.
  double len_parent = 0.0, theta_parent = 0.0;
  for (const auto& f : an.frames) {
    len_parent = std::max(len_parent, detail::length_ode_parent(f));
    theta_parent = std::max(theta_parent, detail::theta_eps_parent(f));
  }
  const auto& sm = an.samples;
  const double t0 = sm.front().t;
  const double t_last = sm.back().t - t0;
  {
    MonitorSeries s;
    s.name = "length_exp";
    s.parent = "length_ode";
    for (const auto& p : sm) {
      s.times.push_back(p.t);
      s.min_margin.push_back(sm.front().length * std::exp(c.c2 * (p.t - t0)) - p.length);
    }
    s.parent_residual = len_parent * t_last;
    s.tolerance = kToleranceFactor * s.parent_residual;
    out.push_back(std::move(s));
  }
  {
    MonitorSeries s;
    s.name = "theta_exp";
    s.parent = "length_ode+theta_eps_ode";
    const double base = sm.front().total_curvature + sm.front().length;
    double eps_gap = 0.0;
    for (const auto& p : sm) {
      s.times.push_back(p.t);
      s.min_margin.push_back(base * std::exp((c.c1 + c.c2) * (p.t - t0)) - p.total_curvature - p.length);
      eps_gap = std::max(eps_gap, p.total_curvature_eps - p.total_curvature);
    }
    s.parent_residual = (len_parent + theta_parent) * t_last;
    s.tolerance = kToleranceFactor * s.parent_residual + eps_gap;
    out.push_back(std::move(s));
  }
  return out;
}

/// Pointwise margin of d(h/u)/dt <= (h/u)'' + (2u'/u)(h/u)' + C'(h+1)/u on a
/// product with a circle factor, plus the u_min record.
struct RampReport {
  MonitorSeries margins;
  std::vector<double> sample_times;
  std::vector<double> u_min;
  /// Times at which u_min <= 0 was observed.
  std::vector<double> degeneration_times;
};

inline RampReport ramp_monitor(const TrajectoryAnalysis& an, const ConstantsEstimate& c) {
  if (!an.circle_axis) throw PreconditionError("ramp monitor needs a circle factor");
  RampReport rep;
  for (const auto& s : an.samples) {
    rep.sample_times.push_back(s.t);
    const double u = s.min_u.value_or(std::numeric_limits<double>::quiet_NaN());
    rep.u_min.push_back(u);
    if (!(u > 0.0)) rep.degeneration_times.push_back(s.t);
  }
  rep.margins = detail::pointwise_monitor(
      an, "ramp", "h_inequality+u_evolution",
      [&](const FrameTerms& f, int j) {
        const double u = f.u[j];
        return f.q_pp[j] + (2.0 * f.u_p[j] / u) * f.q_p[j] + c.c_prime * (f.h[j] + 1.0) / u - f.dq_dt[j];
      },
      [](const FrameTerms& f, int j) {
        const double u = f.u[j];
        const double h = f.h[j];
        // u_t - u'' = (k^2 + Ric(S,S)) u - Ric(S,E) for a parallel circle direction E.
        const double res_u = f.du_dt[j] - f.u_pp[j] - (f.k2[j] + f.ric_ss[j]) * u + f.ric_se[j];
        const double chain_space =
            (f.q_pp[j] + 2.0 * f.u_p[j] * f.q_p[j] / u) - (f.h_pp[j] - h * f.u_pp[j] / u) / u;
        const double chain_time = f.dq_dt[j] - (f.dh_dt[j] / u - h * f.du_dt[j] / (u * u));
        return (detail::h_parent_residual(f, j) + h * std::abs(res_u) / u) / u + std::abs(chain_space) +
               std::abs(chain_time);
      });
  return rep;
}

/// Pointwise domination of the five curvature terms by their coefficient
/// bounds; margin = min over terms of (bound - |term|).
inline MonitorSeries term_domination(const TrajectoryAnalysis& an, const ConstantsEstimate& c) {
  MonitorSeries s;
  s.name = "term_domination";
  s.parent = "none";
  for (const auto& f : an.frames) {
    std::vector<double> v(an.nodes);
    double mn = std::numeric_limits<double>::infinity();
    for (int j = 0; j < an.nodes; ++j) {
      const double k2 = f.k2[j], k = f.k[j];
      const double m1 = c.terms.ric_hh * k2 - std::abs(2.0 * f.ric_hh[j]);
      const double m2 = c.terms.k2_ric_ss * k2 - std::abs(4.0 * k2 * f.ric_ss[j]);
      const double m3 = c.terms.rm_hat * (k2 + k) - std::abs(2.0 * f.rm_hat[j]);
      const double m4 = c.terms.ric_ss_ric_hh * k2 - std::abs(2.0 * f.ric_ss[j] * f.ric_hh[j]);
      const double m5 = c.terms.nabla_ric * k - std::abs(2.0 * f.nabla_ric[j]);
      v[j] = std::min({m1, m2, m3, m4, m5});
      mn = std::min(mn, v[j]);
    }
    s.times.push_back(f.t);
    s.min_margin.push_back(mn);
    s.node_margins.push_back(std::move(v));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Convergence studies

struct RefinementLevel {
  int nodes = 0;
  double dt = 0.0;
};

struct ConvergenceRow {
  RefinementLevel level;
  double max_norm = 0.0;
  double l2_norm = 0.0;
  std::map<std::string, double> term_breakdown;
};

struct ConvergenceTable {
  std::string name;
  std::vector<ConvergenceRow> rows;
  /// Minus the least-squares slope of log(norm) against log(N).
  double order_max = 0.0;
  double order_l2 = 0.0;
  bool monotone_decrease() const {
    for (std::size_t i = 1; i < rows.size(); ++i)
      if (!(rows[i].max_norm < rows[i - 1].max_norm)) return false;
    return true;
  }
};

inline double fitted_order(std::span<const double> resolution, std::span<const double> norm) {
  const std::size_t n = resolution.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += std::log(resolution[i]);
    my += std::log(std::max(norm[i], std::numeric_limits<double>::min()));
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = std::log(resolution[i]) - mx;
    sxy += dx * (std::log(std::max(norm[i], std::numeric_limits<double>::min())) - my);
    sxx += dx * dx;
  }
  return -sxy / sxx;
}

inline void require_refinement(std::span<const RefinementLevel> levels) {
  if (levels.size() < 3) throw PreconditionError("convergence study needs at least 3 levels");
  for (std::size_t i = 1; i < levels.size(); ++i)
    if (!(levels[i].nodes > levels[i - 1].nodes) || !(levels[i].dt <= levels[i - 1].dt))
      throw PreconditionError("refinement levels must increase N and not increase dt");
}

/// Residual names understood by convergence_study and the experiment runner.
inline ResidualReport residual_by_name(const TrajectoryAnalysis& an, const std::string& name) {
  if (name == "length_evolution") return residual_length_evolution(an);
  if (name == "commutator") return residual_commutator(an);
  if (name == "k2_corrected") return residual_k2_evolution(an, K2Variant::corrected);
  if (name == "k2_book") return residual_k2_evolution(an, K2Variant::book_erroneous);
  if (name == "dropped_terms") return dropped_terms_report(an);
  throw PreconditionError("unknown residual '" + name + "'");
}

/// Simulates each level (levels run concurrently on up to `threads` workers)
/// and fits empirical orders for every requested residual.
inline std::vector<ConvergenceTable> convergence_study(
    const std::function<Trajectory(const RefinementLevel&)>& simulate, std::span<const RefinementLevel> levels,
    const std::vector<std::string>& residuals, unsigned threads = 1) {
  require_refinement(levels);
  const int nl = static_cast<int>(levels.size());
  std::vector<std::vector<ResidualReport>> reports(nl);
  parallel_for(nl, threads, [&](int i) {
    const Trajectory tr = simulate(levels[i]);
    if (tr.abort_time) throw StepError("level aborted: " + tr.abort_reason);
    const TrajectoryAnalysis an = analyze(tr);
    for (const auto& name : residuals) reports[i].push_back(residual_by_name(an, name));
  });
  std::vector<ConvergenceTable> out;
  for (std::size_t r = 0; r < residuals.size(); ++r) {
    ConvergenceTable t;
    t.name = residuals[r];
    std::vector<double> res, mx, l2;
    for (int i = 0; i < nl; ++i) {
      const auto& rep = reports[i][r];
      t.rows.push_back({levels[i], rep.max_norm, rep.l2_norm, rep.term_breakdown});
      res.push_back(levels[i].nodes);
      mx.push_back(rep.max_norm);
      l2.push_back(rep.l2_norm);
    }
    t.order_max = fitted_order(res, mx);
    t.order_l2 = fitted_order(res, l2);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace curveflow
