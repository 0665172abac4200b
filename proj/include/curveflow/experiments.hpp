#pragma once

// Configuration-driven experiment runner: JSON configs, a scenario registry,
// flow execution with identity and inequality checks, CSV/JSON artifacts and
// convergence tables.

#include "curveflow/backgrounds.hpp"
#include "curveflow/identity_lab.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace curveflow {

struct FlowConfig {
  int nodes = 0;
  /// Unset: 0.1 (min ds)^2 of the seed curve.
  std::optional<double> dt;
  double t_end = 0.0;
  int record_every = 1;
  /// Unset: 1e-3 (initial max k + 1).
  std::optional<double> epsilon;
};

struct OutputConfig {
  std::string directory = "out";
  std::vector<std::string> formats{"csv", "json"};
};

struct ExperimentConfig {
  std::string name;
  BackgroundSpec background;
  CurveSpec curve;
  /// True when curve.seed was given explicitly; otherwise `seed` drives the curve.
  bool curve_seed_explicit = false;
  FlowConfig flow;
  /// Empty: every check applicable to the curve.
  std::vector<std::string> checks;
  OutputConfig output;
  std::uint64_t seed = 0;

  CurveSpec effective_curve() const {
    CurveSpec c = curve;
    if (!curve_seed_explicit) c.seed = seed;
    return c;
  }
};

/// Pass threshold for identity residual max-norms.
inline constexpr double kResidualTolerance = 1e-4;

enum class CheckKind { residual, monitor };

struct CheckInfo {
  std::string name;
  CheckKind kind;
  std::string description;
};

inline const std::vector<CheckInfo>& check_registry() {
  static const std::vector<CheckInfo> registry{
      {"length_evolution", CheckKind::residual, "d|X|^2/dt + 2 Ric(X,X) + 2 k^2 |X|^2"},
      {"commutator", CheckKind::residual, "d|X|/dt + (k^2 + Ric(S,S)) |X|"},
      {"k2_corrected", CheckKind::residual, "k^2 evolution with spacetime curvature and Ricci terms"},
      {"k2_book", CheckKind::residual, "k^2 evolution with horizontal curvature, Ricci terms dropped"},
      {"corollary", CheckKind::monitor, "dk^2/dt <= (k^2)'' - 2|perp|^2 + 2k^4 + C_hat (k^2 + k)"},
      {"h_inequality", CheckKind::monitor, "dh/dt <= h'' + k^3 + C1 (h + 1)"},
      {"hprime", CheckKind::monitor, "(h')^2 <= |perp|^2"},
      {"length_ode", CheckKind::monitor, "dL/dt <= int (C2 - k^2) ds"},
      {"theta_eps_ode", CheckKind::monitor, "dTheta_eps/dt <= (C1 + C2) Theta_eps + C1 L"},
      {"theta_ode", CheckKind::monitor, "dTheta/dt <= (C1 + C2) Theta + C1 L"},
      {"length_exp", CheckKind::monitor, "L(t) <= L(0) exp(C2 t)"},
      {"theta_exp", CheckKind::monitor, "Theta + L <= (Theta(0) + L(0)) exp((C1 + C2) t)"},
      {"ramp", CheckKind::monitor, "d(h/u)/dt <= (h/u)'' + (2u'/u)(h/u)' + C' (h + 1)/u"},
      {"term_domination", CheckKind::monitor, "curvature terms of the k^2 equation within their bounds"},
  };
  return registry;
}

inline const CheckInfo* find_check(const std::string& name) {
  for (const auto& c : check_registry())
    if (c.name == name) return &c;
  return nullptr;
}

inline std::optional<int> circle_axis_for(const ExperimentConfig& cfg) {
  if (cfg.curve.kind != CurveKind::product_ramp) return std::nullopt;
  switch (cfg.background.kind) {
    case BackgroundKind::shrinking_sphere: return std::nullopt;
    case BackgroundKind::sphere_cross_circle: return 2;
    case BackgroundKind::flat_torus: return static_cast<int>(cfg.background.periods.size()) - 1;
  }
  return std::nullopt;
}

inline std::vector<std::string> effective_checks(const ExperimentConfig& cfg) {
  if (!cfg.checks.empty()) return cfg.checks;
  std::vector<std::string> out;
  const bool circle = circle_axis_for(cfg).has_value();
  for (const auto& c : check_registry()) {
    if (c.name == "k2_book") continue;
    if (c.name == "ramp" && !circle) continue;
    out.push_back(c.name);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

using nlohmann::json;

struct Reader {
  std::vector<std::string> problems;

  void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || it.key() == a;
      if (!ok) problems.push_back("unknown key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
    }
  }

  bool object(const json& parent, const char* key, const std::string& where) {
    if (!parent.contains(key)) return false;
    if (!parent[key].is_object()) {
      problems.push_back("'" + where + "' must be an object");
      return false;
    }
    return true;
  }

  template <class T>
  void get(const json& obj, const char* key, const std::string& where, T& out) {
    if (!obj.contains(key)) return;
    try {
      const json& v = obj[key];
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw std::invalid_argument("number expected");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw std::invalid_argument("integer expected");
        if constexpr (std::is_unsigned_v<T>)
          if (v.get<long long>() < 0) throw std::invalid_argument("non-negative integer expected");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("string expected");
      }
      out = v.get<T>();
    } catch (const std::exception& e) {
      problems.push_back("'" + where + "." + key + "': " + e.what());
    }
  }

  void get_list(const json& obj, const char* key, const std::string& where, std::vector<double>& out) {
    if (!obj.contains(key)) return;
    const json& v = obj[key];
    if (!v.is_array() || !std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_number(); })) {
      problems.push_back("'" + where + "." + key + "' must be an array of numbers");
      return;
    }
    out = v.get<std::vector<double>>();
  }

  void get_strings(const json& obj, const char* key, const std::string& where, std::vector<std::string>& out) {
    if (!obj.contains(key)) return;
    const json& v = obj[key];
    if (!v.is_array() || !std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_string(); })) {
      problems.push_back("'" + (where.empty() ? std::string(key) : where + "." + key) +
                         "' must be an array of strings");
      return;
    }
    out = v.get<std::vector<std::string>>();
  }
};

}  // namespace detail

/// Every invariant violation of a config, in a stable order.
inline std::vector<std::string> config_violations(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  try {
    cfg.background.validate();
  } catch (const SpecError& e) {
    std::stringstream ss(e.what());
    std::string part;
    while (std::getline(ss, part, ';')) {
      while (!part.empty() && part.front() == ' ') part.erase(part.begin());
      out.push_back("background: " + part);
    }
  }
  const auto& f = cfg.flow;
  if (f.nodes < 16 || f.nodes % 2 != 0)
    out.push_back("flow.nodes must be even and >= 16 (got " + std::to_string(f.nodes) + ")");
  if (!(f.t_end > 0.0)) out.push_back("flow.t_end must be positive");
  if (f.t_end > cfg.background.horizon) {
    std::string msg = "flow.t_end = " + std::to_string(f.t_end) + " exceeds the background horizon " +
                      std::to_string(cfg.background.horizon);
    if (cfg.background.kind != BackgroundKind::flat_torus) {
      const double bound = 0.5 * cfg.background.r0 * cfg.background.r0;
      msg += " (the shrinking sphere needs t < r0^2/2 = " + std::to_string(bound) + ")";
    }
    out.push_back(msg);
  }
  if (f.dt && !(*f.dt > 0.0)) out.push_back("flow.dt must be positive");
  if (f.record_every < 1) out.push_back("flow.record_every must be >= 1");
  if (f.epsilon && !(*f.epsilon > 0.0)) out.push_back("flow.epsilon must be positive");
  const auto circle = circle_axis_for(cfg);
  for (const auto& name : cfg.checks) {
    if (!find_check(name)) {
      out.push_back("unknown check '" + name + "'");
    } else if (name == "ramp" && !circle) {
      out.push_back("check 'ramp' needs a product_ramp curve on a background with a circle factor");
    }
  }
  for (const auto& fmt : cfg.output.formats)
    if (fmt != "csv" && fmt != "json") out.push_back("unknown output format '" + fmt + "'");
  if (cfg.output.directory.empty()) out.push_back("output.directory must not be empty");
  const bool sphere = cfg.background.kind != BackgroundKind::flat_torus;
  const auto k = cfg.curve.kind;
  if (sphere && k != CurveKind::sphere_latitude && k != CurveKind::product_ramp)
    out.push_back("curve '" + std::string(to_string(k)) + "' requires a flat_torus background");
  if (!sphere && k == CurveKind::sphere_latitude)
    out.push_back("curve 'sphere_latitude' requires a sphere background");
  if (k == CurveKind::product_ramp && cfg.background.kind == BackgroundKind::shrinking_sphere)
    out.push_back("curve 'product_ramp' needs a circle factor (sphere_cross_circle or flat_torus)");
  return out;
}

/// Parses a JSON experiment config, collecting every problem before throwing.
inline ExperimentConfig config_from_json(const nlohmann::json& doc) {
  detail::Reader rd;
  ExperimentConfig cfg;
  if (!doc.is_object()) throw ConfigError({"config must be a JSON object"});
  rd.check_keys(doc, "", {"name", "background", "curve", "flow", "checks", "output", "seed"});
  rd.get(doc, "name", "", cfg.name);
  rd.get(doc, "seed", "", cfg.seed);

  if (rd.object(doc, "background", "background")) {
    const auto& b = doc["background"];
    rd.check_keys(b, "background", {"kind", "periods", "r0", "circle_length", "horizon", "margin"});
    std::string kind;
    if (!b.contains("kind")) rd.problems.push_back("missing 'background.kind'");
    rd.get(b, "kind", "background", kind);
    if (auto k = background_kind_from_string(kind)) {
      cfg.background.kind = *k;
    } else if (!kind.empty()) {
      rd.problems.push_back("background.kind '" + kind + "' is not one of flat_torus, shrinking_sphere, "
                            "sphere_cross_circle");
    }
    rd.get_list(b, "periods", "background", cfg.background.periods);
    rd.get(b, "r0", "background", cfg.background.r0);
    rd.get(b, "circle_length", "background", cfg.background.circle_length);
    rd.get(b, "horizon", "background", cfg.background.horizon);
    rd.get(b, "margin", "background", cfg.background.margin);
  } else {
    rd.problems.push_back("missing 'background'");
  }

  if (rd.object(doc, "curve", "curve")) {
    const auto& c = doc["curve"];
    rd.check_keys(c, "curve", {"kind", "center", "radius", "amplitudes", "theta0", "winding", "tilt", "seed"});
    std::string kind;
    if (!c.contains("kind")) rd.problems.push_back("missing 'curve.kind'");
    rd.get(c, "kind", "curve", kind);
    if (auto k = curve_kind_from_string(kind)) {
      cfg.curve.kind = *k;
    } else if (!kind.empty()) {
      rd.problems.push_back("curve.kind '" + kind + "' is not a known curve");
    }
    rd.get_list(c, "center", "curve", cfg.curve.center);
    rd.get(c, "radius", "curve", cfg.curve.radius);
    rd.get_list(c, "amplitudes", "curve", cfg.curve.amplitudes);
    rd.get(c, "theta0", "curve", cfg.curve.theta0);
    rd.get(c, "winding", "curve", cfg.curve.winding);
    rd.get(c, "tilt", "curve", cfg.curve.tilt);
    if (c.contains("seed")) {
      rd.get(c, "seed", "curve", cfg.curve.seed);
      cfg.curve_seed_explicit = true;
    }
  } else {
    rd.problems.push_back("missing 'curve'");
  }

  if (rd.object(doc, "flow", "flow")) {
    const auto& f = doc["flow"];
    rd.check_keys(f, "flow", {"nodes", "dt", "t_end", "record_every", "epsilon"});
    if (!f.contains("nodes")) rd.problems.push_back("missing 'flow.nodes'");
    if (!f.contains("t_end")) rd.problems.push_back("missing 'flow.t_end'");
    rd.get(f, "nodes", "flow", cfg.flow.nodes);
    rd.get(f, "t_end", "flow", cfg.flow.t_end);
    rd.get(f, "record_every", "flow", cfg.flow.record_every);
    if (f.contains("dt")) {
      double v = 0.0;
      rd.get(f, "dt", "flow", v);
      cfg.flow.dt = v;
    }
    if (f.contains("epsilon")) {
      double v = 0.0;
      rd.get(f, "epsilon", "flow", v);
      cfg.flow.epsilon = v;
    }
  } else {
    rd.problems.push_back("missing 'flow'");
  }

  rd.get_strings(doc, "checks", "", cfg.checks);

  if (rd.object(doc, "output", "output")) {
    const auto& o = doc["output"];
    rd.check_keys(o, "output", {"directory", "formats"});
    rd.get(o, "directory", "output", cfg.output.directory);
    rd.get_strings(o, "formats", "output", cfg.output.formats);
  }

  // A missing flow section is already reported; its derived violations would be noise.
  const bool have_flow = doc.contains("flow") && doc["flow"].contains("nodes") && doc["flow"].contains("t_end");
  for (auto& v : config_violations(cfg))
    if (have_flow || v.rfind("flow.", 0) != 0) rd.problems.push_back(std::move(v));
  if (!rd.problems.empty()) throw ConfigError(std::move(rd.problems));
  return cfg;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError({std::string("malformed JSON: ") + e.what()});
  }
  return config_from_json(doc);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read config file '" + path.string() + "'"});
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json bg{{"kind", std::string(to_string(cfg.background.kind))}, {"horizon", cfg.background.horizon}};
  if (cfg.background.kind == BackgroundKind::flat_torus) {
    bg["periods"] = cfg.background.periods;
  } else {
    bg["r0"] = cfg.background.r0;
    bg["margin"] = cfg.background.margin;
    if (cfg.background.kind == BackgroundKind::sphere_cross_circle)
      bg["circle_length"] = cfg.background.circle_length;
  }
  nlohmann::json cv{{"kind", std::string(to_string(cfg.curve.kind))}};
  switch (cfg.curve.kind) {
    case CurveKind::torus_fourier:
      cv["amplitudes"] = cfg.curve.amplitudes;
      [[fallthrough]];
    case CurveKind::torus_circle:
      cv["radius"] = cfg.curve.radius;
      if (!cfg.curve.center.empty()) cv["center"] = cfg.curve.center;
      break;
    case CurveKind::torus_line:
      if (!cfg.curve.center.empty()) cv["center"] = cfg.curve.center;
      break;
    case CurveKind::sphere_latitude: cv["theta0"] = cfg.curve.theta0; break;
    case CurveKind::product_ramp:
      cv["winding"] = cfg.curve.winding;
      if (cfg.background.kind == BackgroundKind::flat_torus) {
        cv["radius"] = cfg.curve.radius;
      } else {
        cv["theta0"] = cfg.curve.theta0;
        cv["tilt"] = cfg.curve.tilt;
      }
      break;
  }
  if (cfg.curve_seed_explicit) cv["seed"] = cfg.curve.seed;
  nlohmann::json fl{{"nodes", cfg.flow.nodes}, {"t_end", cfg.flow.t_end}, {"record_every", cfg.flow.record_every}};
  if (cfg.flow.dt) fl["dt"] = *cfg.flow.dt;
  if (cfg.flow.epsilon) fl["epsilon"] = *cfg.flow.epsilon;
  nlohmann::json doc{{"name", cfg.name}, {"background", bg}, {"curve", cv}, {"flow", fl},
                     {"output", {{"directory", cfg.output.directory}, {"formats", cfg.output.formats}}},
                     {"seed", cfg.seed}};
  if (!cfg.checks.empty()) doc["checks"] = cfg.checks;
  return doc;
}

// ---------------------------------------------------------------------------
// Scenario registry

struct Scenario {
  std::string name;
  std::string description;
  ExperimentConfig config;
};

inline const std::vector<Scenario>& scenario_registry() {
  static const std::vector<Scenario> registry = [] {
    const double two_pi = 2.0 * std::numbers::pi;
    std::vector<Scenario> v;
    const auto make = [](std::string name, BackgroundSpec bg, CurveSpec cv, FlowConfig fl) {
      ExperimentConfig c;
      c.name = name;
      c.background = std::move(bg);
      c.curve = std::move(cv);
      c.flow = fl;
      c.output.directory = "out/" + name;
      return c;
    };
    BackgroundSpec flat;
    BackgroundSpec flat3;
    flat3.periods = {two_pi, two_pi, two_pi};
    BackgroundSpec sphere;
    sphere.kind = BackgroundKind::shrinking_sphere;
    BackgroundSpec product;
    product.kind = BackgroundKind::sphere_cross_circle;

    CurveSpec circle;
    v.push_back({"flat_torus_circle", "unit circle shrinking in the flat 2-torus (exact law rho^2 = 1 - 2t)",
                 make("flat_torus_circle", flat, circle, {256, 1e-4, 0.3, 10, std::nullopt})});

    CurveSpec fourier;
    fourier.kind = CurveKind::torus_fourier;
    fourier.amplitudes = {0.0, 0.05, 0.03};
    ExperimentConfig fc = make("flat_torus_fourier", flat, fourier, {512, 4e-5, 0.2, 25, std::nullopt});
    fc.seed = 7;
    v.push_back({"flat_torus_fourier", "unit circle with seeded mode-2 and mode-3 radial perturbations", fc});

    CurveSpec line;
    line.kind = CurveKind::torus_line;
    v.push_back({"flat_torus_line", "closed straight geodesic of the flat torus (stationary)",
                 make("flat_torus_line", flat, line, {64, 1e-3, 0.3, 1, std::nullopt})});

    CurveSpec equator;
    equator.kind = CurveKind::sphere_latitude;
    equator.theta0 = std::numbers::pi / 2.0;
    v.push_back({"sphere_geodesic", "equator of the shrinking round sphere (geodesic for all t)",
                 make("sphere_geodesic", sphere, equator, {64, 1e-3, 0.3, 1, std::nullopt})});

    CurveSpec latitude;
    latitude.kind = CurveKind::sphere_latitude;
    ExperimentConfig lc = make("sphere_latitude", sphere, latitude, {64, 1e-3, 0.25, 1, std::nullopt});
    lc.checks = {"length_evolution", "commutator", "k2_corrected", "k2_book", "corollary", "h_inequality",
                 "hprime", "length_ode", "theta_eps_ode", "theta_ode", "length_exp", "theta_exp",
                 "term_domination"};
    v.push_back({"sphere_latitude", "latitude theta0 = pi/3 on the shrinking unit sphere", lc});

    CurveSpec ramp;
    ramp.kind = CurveKind::product_ramp;
    v.push_back({"product_ramp", "latitude pi/3 winding once around the circle of sphere x circle",
                 make("product_ramp", product, ramp, {64, 1e-3, 0.3, 1, std::nullopt})});

    CurveSpec tilted = ramp;
    tilted.tilt = 0.1;
    ExperimentConfig tc = make("product_ramp_tilted", product, tilted, {64, 1e-3, 0.3, 1, std::nullopt});
    tc.checks = {"length_evolution", "commutator", "k2_corrected", "k2_book", "corollary", "h_inequality",
                 "hprime", "length_ode", "theta_eps_ode", "theta_ode", "length_exp", "theta_exp", "ramp",
                 "term_domination"};
    v.push_back({"product_ramp_tilted", "ramp with theta modulated by 0.1 sin(2 pi x); Ric(S,H) != 0", tc});

    CurveSpec helix;
    helix.kind = CurveKind::product_ramp;
    v.push_back({"flat_product_ramp", "helix in the flat 3-torus over a unit circle (u' = 0)",
                 make("flat_product_ramp", flat3, helix, {64, 1e-3, 0.3, 1, std::nullopt})});
    return v;
  }();
  return registry;
}

inline const Scenario* find_scenario(const std::string& name) {
  for (const auto& s : scenario_registry())
    if (s.name == name) return &s;
  return nullptr;
}

inline std::string list_scenarios() {
  std::string out;
  for (const auto& s : scenario_registry()) {
    std::string name = s.name;
    name.resize(std::max<std::size_t>(name.size() + 2, 22), ' ');
    out += name + s.description + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Running

/// Full-precision decimal form used in every CSV.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct CheckResult {
  std::string name;
  CheckKind kind = CheckKind::residual;
  bool passed = false;
  std::string error;
  std::optional<ResidualReport> residual;
  std::optional<MonitorSeries> monitor;
  std::optional<RampReport> ramp;
  /// Dropped-terms magnitude (k2_book only).
  std::optional<ResidualReport> dropped;
};

struct RunResult {
  ExperimentConfig config;
  int exit_status = 0;
  double dt = 0.0;
  double epsilon = 0.0;
  Trajectory trajectory;
  std::optional<ConstantsEstimate> constants;
  std::vector<CheckResult> checks;
  nlohmann::json report;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitEscape = 2;
inline constexpr int kExitCheckFailed = 3;

/// Seeds the curve and resolves the dt and epsilon defaults.
struct PreparedRun {
  std::shared_ptr<const MetricFamily> background;
  DiscreteCurve curve;
  double dt = 0.0;
  double epsilon = 0.0;
  std::optional<int> circle_axis;
};

inline PreparedRun prepare(const ExperimentConfig& cfg, int nodes, std::optional<double> dt) {
  PreparedRun p;
  p.background = std::make_shared<const MetricFamily>(make_background(cfg.background));
  p.curve = seed_curve(cfg.effective_curve(), nodes, p.background);
  const CurveGeometry g0 = curve_geometry(p.curve);
  const double ds = g0.min_ds();
  p.dt = dt.value_or(0.1 * ds * ds);
  p.epsilon = cfg.flow.epsilon.value_or(1e-3 * (g0.max_k() + 1.0));
  p.circle_axis = circle_axis_for(cfg);
  return p;
}

inline Trajectory simulate(const PreparedRun& p, double t_end, int record_every) {
  FlowState state{p.curve, p.dt, 0.5};
  IntegrateOptions opt;
  opt.record_every = record_every;
  opt.epsilon = p.epsilon;
  opt.circle_axis = p.circle_axis;
  return integrate(std::move(state), t_end, opt);
}

namespace detail {

inline nlohmann::json residual_json(const ResidualReport& r) {
  nlohmann::json j{{"max_norm", r.max_norm}, {"l2_norm", r.l2_norm}, {"nodes", r.nodes}, {"dt", r.dt}};
  nlohmann::json tb = nlohmann::json::object();
  for (const auto& [k, v] : r.term_breakdown) tb[k] = v;
  j["term_breakdown"] = tb;
  return j;
}

inline nlohmann::json constants_json(const ConstantsEstimate& c) {
  return {{"C_hat", c.c_hat},
          {"C1", c.c1},
          {"C2", c.c2},
          {"C_prime", c.c_prime},
          {"term_coefficients",
           {{"ric_hh", c.terms.ric_hh},
            {"k2_ric_ss", c.terms.k2_ric_ss},
            {"rm_hat", c.terms.rm_hat},
            {"ric_ss_ric_hh", c.terms.ric_ss_ric_hh},
            {"nabla_ric", c.terms.nabla_ric}}},
          {"sup_ricci", c.sup_ricci},
          {"sup_spacetime_riemann", c.sup_spacetime_riemann},
          {"sup_cov_deriv_ricci", c.sup_cov_deriv_ricci},
          {"ricci_norm", "operator norm relative to g(t)"},
          {"provenance", c.provenance}};
}

}  // namespace detail

/// Executes a validated config without touching the filesystem.
inline RunResult run_experiment(const ExperimentConfig& cfg, unsigned threads = default_thread_count()) {
  if (auto v = config_violations(cfg); !v.empty()) throw ConfigError(std::move(v));
  RunResult res;
  res.config = cfg;
  PreparedRun prep;
  try {
    prep = prepare(cfg, cfg.flow.nodes, cfg.flow.dt);
  } catch (const SpecError& e) {
    throw ConfigError({std::string("curve: ") + e.what()});
  }
  res.dt = prep.dt;
  res.epsilon = prep.epsilon;
  res.trajectory = simulate(prep, cfg.flow.t_end, cfg.flow.record_every);
  const Trajectory& tr = res.trajectory;

  std::optional<TrajectoryAnalysis> an;
  std::string analysis_error;
  try {
    an = analyze(tr, threads);
  } catch (const Error& e) {
    analysis_error = e.what();
  }
  const auto names = effective_checks(cfg);
  const bool needs_constants = std::any_of(names.begin(), names.end(), [](const std::string& n) {
    return find_check(n)->kind == CheckKind::monitor;
  });
  if (needs_constants) res.constants = estimate_constants(*prep.background, prep.background->horizon, SampleGrid{});

  std::vector<MonitorSeries> monitors;
  if (an && res.constants) monitors = monitor_inequalities(*an, *res.constants);
  for (const auto& name : names) {
    CheckResult cr;
    cr.name = name;
    cr.kind = find_check(name)->kind;
    if (!an) {
      cr.error = analysis_error;
    } else if (cr.kind == CheckKind::residual) {
      cr.residual = residual_by_name(*an, name);
      cr.passed = cr.residual->max_norm <= kResidualTolerance;
      if (name == "k2_book") cr.dropped = dropped_terms_report(*an);
    } else if (name == "ramp") {
      cr.ramp = ramp_monitor(*an, *res.constants);
      cr.monitor = cr.ramp->margins;
      cr.passed = cr.monitor->passed() && cr.ramp->degeneration_times.empty();
    } else if (name == "term_domination") {
      cr.monitor = term_domination(*an, *res.constants);
      cr.passed = cr.monitor->passed();
    } else {
      for (const auto& m : monitors)
        if (m.name == name) cr.monitor = m;
      cr.passed = cr.monitor->passed();
    }
    res.checks.push_back(std::move(cr));
  }

  const bool all_passed =
      std::all_of(res.checks.begin(), res.checks.end(), [](const CheckResult& c) { return c.passed; });
  res.exit_status = tr.abort_time ? kExitEscape : (all_passed ? kExitOk : kExitCheckFailed);

  nlohmann::json& rep = res.report;
  rep["name"] = cfg.name;
  rep["config"] = to_json(cfg);
  rep["resolution"] = {{"nodes", tr.nodes},
                       {"dt", tr.dt},
                       {"record_every", tr.record_every},
                       {"frame_spacing", tr.frame_spacing()},
                       {"frames", tr.frame_count()},
                       {"t_end", cfg.flow.t_end},
                       {"epsilon", tr.epsilon}};
  rep["constants"] = res.constants ? detail::constants_json(*res.constants) : nlohmann::json(nullptr);
  rep["tolerance_policy"] = {{"residual_max_norm", kResidualTolerance},
                             {"monitor_factor", kToleranceFactor},
                             {"roundoff_floor", kRoundoffFloor}};
  nlohmann::json checks = nlohmann::json::object();
  for (const auto& c : res.checks) {
    nlohmann::json j{{"kind", c.kind == CheckKind::residual ? "residual" : "monitor"}, {"passed", c.passed}};
    if (!c.error.empty()) j["error"] = c.error;
    if (c.residual) {
      j.update(detail::residual_json(*c.residual));
      j["tolerance"] = kResidualTolerance;
    }
    if (c.dropped) {
      j["dropped_terms_max"] = c.dropped->max_norm;
      j["dropped_terms_l2"] = c.dropped->l2_norm;
    }
    if (c.monitor) {
      j["worst_margin"] = c.monitor->worst();
      j["tolerance"] = c.monitor->tolerance;
      j["parent"] = c.monitor->parent;
      j["parent_residual"] = c.monitor->parent_residual;
    }
    if (c.ramp) {
      double umin = std::numeric_limits<double>::infinity();
      for (double u : c.ramp->u_min) umin = std::min(umin, u);
      j["u_min"] = umin;
      j["u_min_initial"] = c.ramp->u_min.front();
      j["degeneration_times"] = c.ramp->degeneration_times;
    }
    checks[c.name] = j;
  }
  rep["checks"] = checks;
  rep["passed"] = all_passed && !tr.abort_time;
  rep["abort"] = tr.abort_time ? nlohmann::json{{"time", *tr.abort_time}, {"reason", tr.abort_reason}}
                               : nlohmann::json(nullptr);
  rep["exit_status"] = res.exit_status;
  return res;
}

namespace detail {

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

inline std::string trajectory_csv(const Trajectory& tr) {
  std::string s = "t,L,Theta,Theta_eps,max_k,min_absX,min_u\n";
  for (const auto& p : tr.samples) {
    s += format_double(p.t) + "," + format_double(p.length) + "," + format_double(p.total_curvature) + "," +
         format_double(p.total_curvature_eps) + "," + format_double(p.max_k) + "," +
         format_double(p.min_speed) + "," + (p.min_u ? format_double(*p.min_u) : "") + "\n";
  }
  return s;
}

}  // namespace detail

inline bool wants(const ExperimentConfig& cfg, const std::string& fmt) {
  return std::find(cfg.output.formats.begin(), cfg.output.formats.end(), fmt) != cfg.output.formats.end();
}

inline void write_artifacts(const RunResult& res, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const ExperimentConfig& cfg = res.config;
  if (wants(cfg, "csv")) {
    detail::write_file(dir / "trajectory.csv", detail::trajectory_csv(res.trajectory));
    for (const auto& c : res.checks) {
      if (c.residual) {
        std::string s = "t,max_norm,l2_norm\n";
        for (std::size_t f = 0; f < c.residual->times.size(); ++f)
          s += format_double(c.residual->times[f]) + "," + format_double(c.residual->frame_max[f]) + "," +
               format_double(c.residual->frame_l2[f]) + "\n";
        detail::write_file(dir / ("residual_" + c.name + ".csv"), s);
      }
      if (c.monitor) {
        std::string s = "t,min_margin\n";
        for (std::size_t f = 0; f < c.monitor->times.size(); ++f)
          s += format_double(c.monitor->times[f]) + "," + format_double(c.monitor->min_margin[f]) + "\n";
        detail::write_file(dir / ("margins_" + c.name + ".csv"), s);
      }
    }
  }
  if (wants(cfg, "json")) detail::write_file(dir / "report.json", res.report.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Convergence


/// Levels N 2^i and dt / 4^i for i = 0..count-1 from the config's resolution.
/// dt follows ds^2 so every level keeps the base level's CFL ratio.
inline std::vector<RefinementLevel> geometric_levels(const ExperimentConfig& cfg, int count) {
  if (count < 3) throw PreconditionError("convergence needs at least 3 levels");
  const PreparedRun p = prepare(cfg, cfg.flow.nodes, cfg.flow.dt);
  std::vector<RefinementLevel> levels;
  for (int i = 0; i < count; ++i) levels.push_back({cfg.flow.nodes << i, p.dt / static_cast<double>(1 << (2 * i))});
  return levels;
}

inline std::vector<std::string> convergence_residuals(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& n : cfg.checks)
    if (find_check(n) && find_check(n)->kind == CheckKind::residual) out.push_back(n);
  if (out.empty()) out = {"length_evolution", "commutator", "k2_corrected"};
  return out;
}

inline std::vector<ConvergenceTable> run_convergence(const ExperimentConfig& cfg,
                                                     std::span<const RefinementLevel> levels,
                                                     unsigned threads = default_thread_count()) {
  if (auto v = config_violations(cfg); !v.empty()) throw ConfigError(std::move(v));
  const auto sim = [&cfg](const RefinementLevel& lv) {
    return simulate(prepare(cfg, lv.nodes, lv.dt), cfg.flow.t_end, cfg.flow.record_every);
  };
  return convergence_study(sim, levels, convergence_residuals(cfg), threads);
}

inline std::string convergence_csv(const ConvergenceTable& t) {
  std::string s = "N,dt,max_norm,l2_norm\n";
  for (const auto& r : t.rows)
    s += std::to_string(r.level.nodes) + "," + format_double(r.level.dt) + "," + format_double(r.max_norm) +
         "," + format_double(r.l2_norm) + "\n";
  s += "fitted_order,," + format_double(t.order_max) + "," + format_double(t.order_l2) + "\n";
  return s;
}

inline std::string convergence_text(const std::vector<ConvergenceTable>& tables) {
  std::string s;
  char line[160];
  for (const auto& t : tables) {
    s += t.name + "\n";
    std::snprintf(line, sizeof line, "  %6s  %12s  %14s  %14s\n", "N", "dt", "max_norm", "l2_norm");
    s += line;
    for (const auto& r : t.rows) {
      std::snprintf(line, sizeof line, "  %6d  %12.4e  %14.6e  %14.6e\n", r.level.nodes, r.level.dt, r.max_norm,
                    r.l2_norm);
      s += line;
    }
    std::snprintf(line, sizeof line, "  order   %12s  %14.3f  %14.3f\n", "", t.order_max, t.order_l2);
    s += line;
  }
  return s;
}

inline void write_convergence(const std::vector<ConvergenceTable>& tables, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& t : tables) detail::write_file(dir / ("convergence_" + t.name + ".csv"), convergence_csv(t));
}

// ---------------------------------------------------------------------------
// Background validation

struct BackgroundValidation {
  double ricci_flow_residual = 0.0;
  ExactData exact;
  std::string text;
  bool passed() const { return ricci_flow_residual < 1e-12; }
};

inline BackgroundValidation validate_background(const BackgroundSpec& spec, int samples = 200,
                                                std::uint64_t seed = 0) {
  const MetricFamily m = make_background(spec);
  BackgroundValidation v;
  v.ricci_flow_residual = validate_ricci_flow(m, samples, seed);
  v.exact = exact_data(spec, spec.horizon);
  v.text = "background           " + m.name + "\n" +
           "horizon              " + format_double(m.horizon) + "\n" +
           "ricci_flow_residual  " + format_double(v.ricci_flow_residual) + "\n" +
           "r^2(T)               " + format_double(v.exact.radius_squared) + "\n" +
           "sup|Ric|(T)          " + format_double(v.exact.sup_ricci) + "\n" +
           "sup|Rmhat|(T)        " + format_double(v.exact.sup_spacetime_riemann) + "\n";
  return v;
}

}  // namespace curveflow
