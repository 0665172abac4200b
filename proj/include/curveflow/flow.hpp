#pragma once

// Time integration of the curve-shrinking equation dc/dt = H in g(t).

#include "curveflow/curve.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace curveflow {

struct FlowState {
  DiscreteCurve curve;
  double dt = 1e-4;
  /// Steps must satisfy dt <= cfl_safety * (min ds)^2.
  double cfl_safety = 0.5;
};

/// Node velocities H(c_j, t) of the curve-shrinking flow.
inline std::vector<Vec> curvature_velocity(const DiscreteCurve& c) {
  return curve_geometry(c).curvature;
}

inline double cfl_limit(const CurveGeometry& geo, double safety) {
  const double ds = geo.min_ds();
  return safety * ds * ds;
}

/// One classical RK4 step of dc_j/dt = H(c_j, t); H is re-evaluated in g(t)
/// at every stage. The lift is rebased onto the periodic base cell afterwards.
inline FlowState flow_step(FlowState state) {
  const DiscreteCurve& c0 = state.curve;
  const MetricFamily& m = *c0.background;
  const double dt = state.dt;
  if (!(dt > 0.0)) throw StepError("dt must be positive");
  if (c0.t + dt > m.horizon * (1.0 + 1e-12) + 1e-15)
    throw StepError("step would pass the background horizon");

  const CurveGeometry g0 = curve_geometry(c0);
  const double limit = cfl_limit(g0, state.cfl_safety);
  if (dt > limit)
    throw StepError("CFL violation: dt = " + std::to_string(dt) + " exceeds " + std::to_string(limit));

  const int n = c0.size();
  const auto stage = [&](const std::vector<Vec>& k, double a) {
    DiscreteCurve s = c0;
    s.t = std::min(c0.t + a * dt, m.horizon);
    for (int j = 0; j < n; ++j) s.nodes[j] += a * dt * k[j];
    return s;
  };
  const std::vector<Vec>& k1 = g0.curvature;
  const std::vector<Vec> k2 = curvature_velocity(stage(k1, 0.5));
  const std::vector<Vec> k3 = curvature_velocity(stage(k2, 0.5));
  const std::vector<Vec> k4 = curvature_velocity(stage(k3, 1.0));

  DiscreteCurve next = c0;
  // The horizon check above tolerates rounding, so clamp instead of overshooting.
  next.t = std::min(c0.t + dt, m.horizon);
  for (int j = 0; j < n; ++j) next.nodes[j] += (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
  next.rebase();
  for (int j = 0; j < n; ++j) {
    if (!m.chart.admissible(next.reduced(j)))
      throw DomainError("node " + std::to_string(j) + " escaped the chart margin at t = " +
                        std::to_string(next.t));
  }
  state.curve = std::move(next);
  return state;
}

/// Signed projection u = g(S, E) of the unit tangent onto the unit vector E
/// along coordinate `axis`.
inline std::vector<double> circle_projection(const CurveGeometry& geo, int axis) {
  std::vector<double> u(geo.size());
  for (int j = 0; j < geo.size(); ++j) {
    const Mat& g = geo.metric[j];
    u[j] = (g * geo.unit_tangent[j])[axis] / std::sqrt(g(axis, axis));
  }
  return u;
}

struct TrajectorySample {
  double t = 0.0;
  double length = 0.0;
  double total_curvature = 0.0;
  double total_curvature_eps = 0.0;
  double max_k = 0.0;
  double min_speed = 0.0;
  std::optional<double> min_u;
};

/// Recorded flow: node snapshots on a uniform time grid plus scalar samples.
struct Trajectory {
  std::shared_ptr<const MetricFamily> background;
  Vec period_shift;
  int nodes = 0;
  double dt = 0.0;
  int record_every = 1;
  double epsilon = 0.0;
  std::optional<int> circle_axis;
  std::vector<double> times;
  std::vector<std::vector<Vec>> frames;
  std::vector<TrajectorySample> samples;
  std::optional<double> abort_time;
  std::string abort_reason;

  int frame_count() const { return static_cast<int>(frames.size()); }
  double frame_spacing() const { return dt * record_every; }

  DiscreteCurve curve_at(int frame) const {
    DiscreteCurve c;
    c.background = background;
    c.nodes = frames[frame];
    c.period_shift = period_shift;
    c.t = times[frame];
    return c;
  }
};

using FlowMonitor = std::function<void(const DiscreteCurve&, const CurveGeometry&)>;

struct IntegrateOptions {
  int record_every = 1;
  double epsilon = 1e-3;
  /// Coordinate of the circle factor; enables min_u recording.
  std::optional<int> circle_axis;
  std::vector<FlowMonitor> monitors;
};

inline TrajectorySample sample_of(const CurveGeometry& geo, const std::optional<int>& axis) {
  TrajectorySample s;
  s.t = geo.t;
  s.length = geo.length;
  s.total_curvature = geo.total_curvature;
  s.total_curvature_eps = geo.total_curvature_eps;
  s.max_k = geo.max_k();
  s.min_speed = geo.min_speed();
  if (axis) {
    const auto u = circle_projection(geo, *axis);
    s.min_u = *std::min_element(u.begin(), u.end());
  }
  return s;
}

/// Integrates to t_end with a whole number of equal steps no longer than
/// state.dt, recording every `record_every` steps. Chart escapes, degenerate
/// curves and step errors end the run early; the trajectory then carries the
/// abort time and reason.
inline Trajectory integrate(FlowState state, double t_end, const IntegrateOptions& opt) {
  const MetricFamily& m = *state.curve.background;
  if (t_end > m.horizon * (1.0 + 1e-12)) throw PreconditionError("t_end exceeds the background horizon");
  if (opt.record_every < 1) throw PreconditionError("record_every must be >= 1");
  const double span = t_end - state.curve.t;
  if (!(span > 0.0)) throw PreconditionError("t_end must lie after the curve time");
  const long steps = static_cast<long>(std::ceil(span / state.dt - 1e-9));
  state.dt = span / static_cast<double>(steps);

  Trajectory tr;
  tr.background = state.curve.background;
  tr.period_shift = state.curve.period_shift;
  tr.nodes = state.curve.size();
  tr.dt = state.dt;
  tr.record_every = opt.record_every;
  tr.epsilon = opt.epsilon;
  tr.circle_axis = opt.circle_axis;

  const double t0 = state.curve.t;
  const auto record = [&](const DiscreteCurve& c) {
    const CurveGeometry geo = curve_geometry(c, opt.epsilon);
    tr.times.push_back(c.t);
    tr.frames.push_back(c.nodes);
    tr.samples.push_back(sample_of(geo, opt.circle_axis));
    for (const auto& mon : opt.monitors) mon(c, geo);
  };

  try {
    record(state.curve);
    for (long s = 1; s <= steps; ++s) {
      state = flow_step(std::move(state));
      // Keep the step grid exact rather than accumulating rounding in t.
      state.curve.t = t0 + static_cast<double>(s) * span / static_cast<double>(steps);
      if (s == steps) state.curve.t = t_end;
      if (s % opt.record_every == 0) record(state.curve);
    }
  } catch (const Error& e) {
    tr.abort_time = state.curve.t;
    tr.abort_reason = e.what();
  }
  return tr;
}

}  // namespace curveflow
