#include "kinmap/optim.hpp"

#include "kinmap/kvconfig.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace kinmap::optim {

namespace {

bool all_finite(const Vector& v) { return v.allFinite(); }

double spectral_norm_sym(const Matrix& B) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(B, Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

void ResidualProblem::validate(Eigen::Index n) const {
  require(static_cast<bool>(model) && static_cast<bool>(jacobian), "ResidualProblem: model and jacobian required");
  require(data.size() >= n, "ResidualProblem: need at least as many data as unknowns");
  require(all_finite(data), "ResidualProblem: data must be finite");
  require(noise_level >= 0.0, "ResidualProblem: noise level must be non-negative");
}

void TrConfig::validate() const {
  require(beta >= 0.25 && beta < 1.0, "TrConfig.beta must lie in [0.25, 1)");
  require(beta_cauchy > 0.0 && beta_cauchy < 1.0, "TrConfig.beta_cauchy must lie in (0, 1)");
  require(gamma > 0.0 && gamma < 1.0, "TrConfig.gamma must lie in (0, 1)");
  require(q > 0.0 && q < 1.0, "TrConfig.q must lie in (0, 1)");
  require(tau * q > 1.0, "TrConfig.tau must exceed 1/q");
  require(stepback > 0.0 && stepback < 1.0, "TrConfig.stepback must lie in (0, 1)");
  require(mu0 > 0.0, "TrConfig.mu0 must be positive");
  require(theta > 0.0 && theta < 1.0, "TrConfig.theta must lie in (0, 1)");
  require(eta > 0.0 && eta < 1.0, "TrConfig.eta must lie in (0, 1)");
  require(radius_min > 0.0 && radius_min < radius_max, "TrConfig radius bounds must satisfy 0 < min < max");
  require(alpha_floor > 0.0, "TrConfig.alpha_floor must be positive");
  require(max_iterations >= 0 && max_inner >= 1, "TrConfig iteration limits out of range");
  require(stagnation_tol >= 0.0 && stagnation_window >= 1, "TrConfig stagnation rule out of range");
}

void LmConfig::validate() const {
  require(alpha0 > 0.0, "LmConfig.alpha0 must be positive");
  require(nu_up > 1.0 && nu_down > 1.0, "LmConfig.nu_up and nu_down must exceed 1");
  require(tau > 1.0, "LmConfig.tau must exceed 1");
  require(max_iterations >= 0 && max_inner >= 1, "LmConfig iteration limits out of range");
  require(stagnation_tol >= 0.0 && stagnation_window >= 1, "LmConfig stagnation rule out of range");
}

std::string_view to_string(StopReason r) {
  switch (r) {
    case StopReason::discrepancy: return "discrepancy";
    case StopReason::threshold_rule: return "threshold-rule";
    case StopReason::stagnation: return "stagnation";
    case StopReason::max_iterations: return "max-iter";
    case StopReason::stationary: return "stationary";
    case StopReason::stalled: return "stalled";
  }
  return "unknown";
}

std::optional<StopReason> parse_stop_reason(std::string_view s) {
  for (auto r : {StopReason::discrepancy, StopReason::threshold_rule, StopReason::stagnation,
                 StopReason::max_iterations, StopReason::stationary, StopReason::stalled}) {
    if (to_string(r) == s) return r;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Building blocks

SecularSolution solve_secular(const Matrix& J, const Vector& r, double radius, double alpha_floor) {
  if (!J.allFinite() || !r.allFinite() || !std::isfinite(radius) || !std::isfinite(alpha_floor)) {
    throw std::invalid_argument("solve_secular: non-finite input");
  }
  if (!(radius > 0.0) || !(alpha_floor > 0.0)) {
    throw std::invalid_argument("solve_secular: radius and alpha_floor must be positive");
  }
  const Eigen::Index n = J.cols();
  const Matrix B = J.transpose() * J;
  const Vector rhs = J.transpose() * r;
  const double rhs_norm = rhs.norm();

  struct Eval {
    bool ok;
    Vector p;
    double pnorm;
    double wnorm2;  // ||L^{-1} p||^2
  };
  auto eval = [&](double alpha) {
    Matrix A = B;
    A.diagonal().array() += alpha;
    Eigen::LLT<Matrix> llt(A);
    if (llt.info() != Eigen::Success) return Eval{false, Vector::Zero(n), 0.0, 0.0};
    Vector p = llt.solve(rhs);
    if (!p.allFinite()) return Eval{false, Vector::Zero(n), 0.0, 0.0};
    const Vector w = llt.matrixL().solve(p);
    return Eval{true, p, p.norm(), w.squaredNorm()};
  };

  if (rhs_norm == 0.0) return {alpha_floor, Vector::Zero(n), false};

  Eval at_floor = eval(alpha_floor);
  if (at_floor.ok && at_floor.pnorm <= radius) return {alpha_floor, at_floor.p, false};

  // ||p(alpha)|| <= ||J^T r|| / alpha, so the root lies below hi.
  double lo = alpha_floor;
  double hi = alpha_floor + rhs_norm / radius;
  double alpha = lo;
  Eval cur = at_floor;
  if (!cur.ok) {
    alpha = std::sqrt(lo * hi);
    cur = eval(alpha);
  }
  for (int it = 0; it < 200; ++it) {
    if (!cur.ok) {
      // Factorization broke down: the root is above alpha.
      lo = alpha;
      alpha = std::sqrt(lo * hi);
      cur = eval(alpha);
      continue;
    }
    const double err = cur.pnorm - radius;
    if (std::abs(err) <= 1e-12 * radius) break;
    if (err > 0.0) lo = alpha; else hi = alpha;
    if (hi - lo <= 1e-15 * hi) break;
    double next = alpha + (cur.pnorm * cur.pnorm / cur.wnorm2) * err / radius;
    if (!(next > lo && next < hi)) next = std::sqrt(lo * hi);
    alpha = next;
    cur = eval(alpha);
  }
  if (!cur.ok) {
    alpha = hi;
    cur = eval(alpha);
  }
  return {alpha, cur.p, true};
}

Vector feasible_step(const Vector& k, const Vector& p, double t) {
  Vector out = p;
  for (Eigen::Index i = 0; i < k.size(); ++i) {
    if (k[i] + p[i] <= 0.0) {
      // Projection of k + p is 0 in this component.
      out[i] = t * (0.0 - k[i]);
    }
  }
  return out;
}

Vector scaling_diagonal(const Vector& k, const Vector& grad) {
  Vector d(k.size());
  for (Eigen::Index i = 0; i < k.size(); ++i) d[i] = grad[i] >= 0.0 ? std::abs(k[i]) : 1.0;
  return d;
}

Vector cauchy_point(const Vector& k, const Vector& g, const Matrix& J, double radius, double t) {
  if (g.norm() == 0.0) throw std::invalid_argument("cauchy_point: zero gradient");
  const Vector d = scaling_diagonal(k, g);
  const Vector dg = d.cwiseProduct(g);
  const double dg_norm = dg.norm();
  if (dg_norm == 0.0) return Vector::Zero(k.size());
  const double curvature = (J * dg).squaredNorm();
  const double sqrt_d_g = d.cwiseProduct(g.cwiseAbs2()).sum();  // ||D^{1/2} g||^2
  double lambda = radius / dg_norm;
  if (curvature > 0.0) lambda = std::min(lambda, sqrt_d_g / curvature);

  bool interior = true;
  for (Eigen::Index i = 0; i < k.size(); ++i) {
    if (k[i] - lambda * dg[i] <= 0.0) interior = false;
  }
  if (!interior) {
    double to_bound = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < k.size(); ++i) {
      if (dg[i] > 0.0) to_bound = std::min(to_bound, k[i] / dg[i]);
    }
    lambda = t * to_bound;
  }
  return -lambda * dg;
}

double model_value(const Matrix& J, const Vector& g, const Vector& p) {
  return 0.5 * (J * p).squaredNorm() + p.dot(g);
}

double trust_radius(double mu, double residual_norm, double grad_norm, double hessian_norm,
                    const TrConfig& cfg) {
  double r = mu * residual_norm;
  if (hessian_norm > 0.0) r = std::max(r, 1.2 * (1.0 - cfg.q) * grad_norm / hessian_norm);
  return std::clamp(r, cfg.radius_min, cfg.radius_max);
}

RadiusUpdate radius_update(double mu, double q_j, const TrConfig& cfg, double residual_norm_next,
                           double grad_norm_next, double hessian_norm_next) {
  double next = mu;
  if (q_j < cfg.q) {
    next = cfg.theta * mu;
  } else if (q_j > 1.1 * cfg.q) {
    next = mu / cfg.eta;
  }
  return {next, trust_radius(next, residual_norm_next, grad_norm_next, hessian_norm_next, cfg)};
}

bool discrepancy_stop(double residual_norm, double delta, double tau) {
  return delta > 0.0 && residual_norm <= tau * delta;
}

// ---------------------------------------------------------------------------
// Shared stopping bookkeeping

namespace {

struct StopTracker {
  double delta;
  double tau;
  int max_iterations;
  double stagnation_tol;
  int stagnation_window;
  const ThresholdRule& rule;
  int flat_run = 0;

  // Called on the residual of iterate j (before computing step j).
  std::optional<StopReason> check(int j, double current, double previous) {
    if (discrepancy_stop(current, delta, tau)) return StopReason::discrepancy;
    if (j > 0) {
      if (rule && rule(current, previous)) return StopReason::threshold_rule;
      const double rel = previous > 0.0 ? std::abs(previous - current) / previous : 0.0;
      flat_run = rel < stagnation_tol ? flat_run + 1 : 0;
      if (flat_run >= stagnation_window) return StopReason::stagnation;
    }
    if (j >= max_iterations) return StopReason::max_iterations;
    return std::nullopt;
  }
};

// First-order stationarity up to rounding: the gradient cannot be resolved
// below eps_mach * ||J|| * ||y|| since r = y - F carries that error already.
bool gradient_at_rounding(const Matrix& J, const Vector& grad, const Vector& data) {
  const double floor = 1e3 * std::numeric_limits<double>::epsilon() * J.norm() * data.norm();
  return grad.norm() <= floor;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

FitResult reg_as_tr(const ResidualProblem& problem, const Vector& k0, const TrConfig& cfg,
                    const ThresholdRule& rule) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  problem.validate(k0.size());
  if (!(k0.array() > 0.0).all() || !k0.allFinite()) {
    throw std::invalid_argument("reg_as_tr: initial point must be strictly positive");
  }

  FitResult res;
  Vector k = k0;
  Vector F = problem.model(k);
  Vector r = problem.data - F;  // y - F
  double eps = r.norm();
  double phi = 0.5 * eps * eps;
  res.initial_residual = eps;
  double previous = eps;
  double mu = cfg.mu0;

  Matrix J = problem.jacobian(k);
  Vector g = -J.transpose() * r;
  double hess_norm = spectral_norm_sym(J.transpose() * J);
  double radius = trust_radius(mu, eps, g.norm(), hess_norm, cfg);

  StopTracker stop{problem.noise_level, cfg.tau, cfg.max_iterations, cfg.stagnation_tol,
                   cfg.stagnation_window, rule};
  for (int j = 0;; ++j) {
    if (auto why = stop.check(j, eps, previous)) {
      res.reason = *why;
      break;
    }
    if (gradient_at_rounding(J, g, problem.data)) {
      res.reason = StopReason::stationary;
      break;
    }

    IterationRecord rec;
    bool accepted = false;
    Vector k_new, F_new, pbar;
    double phi_new = phi;
    SecularSolution sec;
    double tried = radius;
    for (int inner = 0; inner < cfg.max_inner; ++inner) {
      rec.inner_repeats = inner + 1;
      tried = radius;
      sec = solve_secular(J, r, radius, cfg.alpha_floor);
      pbar = feasible_step(k, sec.step, cfg.stepback);
      const Vector pc = cauchy_point(k, g, J, radius, cfg.stepback);
      const double m_c = model_value(J, g, pc);
      const double m_bar = model_value(J, g, pbar);
      if (m_c < 0.0 && m_bar < 0.0) {
        const double rho_c = m_bar / m_c;
        k_new = k + pbar;
        F_new = problem.model(k_new);
        const double e_new = (problem.data - F_new).norm();
        phi_new = 0.5 * e_new * e_new;
        const double rho = (phi_new - phi) / m_bar;
        if (rho_c > cfg.beta_cauchy && rho > cfg.beta && F_new.allFinite()) {
          accepted = true;
          break;
        }
      }
      radius *= cfg.gamma;
    }

    rec.radius = tried;
    rec.alpha = sec.alpha;
    rec.constraint_active = sec.constraint_active;
    rec.raw_step_norm = sec.step.norm();
    rec.step_norm = pbar.norm();
    rec.q_ratio = eps > 0.0 ? (r - J * pbar).norm() / eps : 0.0;
    if (!accepted) {
      rec.accepted = false;
      rec.residual_norm = eps;
      rec.iterate = k;
      res.history.push_back(std::move(rec));
      res.reason = StopReason::stalled;
      break;
    }

    // Accept k^{j+1} = k^j + pbar and refresh the model quantities.
    const double q_j = rec.q_ratio;
    k = k_new;
    F = F_new;
    r = problem.data - F;
    previous = eps;
    eps = r.norm();
    phi = phi_new;
    J = problem.jacobian(k);
    g = -J.transpose() * r;
    hess_norm = spectral_norm_sym(J.transpose() * J);
    const RadiusUpdate upd = radius_update(mu, q_j, cfg, eps, g.norm(), hess_norm);
    mu = upd.mu;
    radius = upd.radius;

    rec.accepted = true;
    rec.residual_norm = eps;
    rec.iterate = k;
    res.history.push_back(std::move(rec));
  }

  res.k = k;
  res.final_residual = eps;
  res.iterations = static_cast<int>(res.history.size());
  res.wall_seconds = seconds_since(t0);
  return res;
}

FitResult projected_lm(const ResidualProblem& problem, const Vector& k0, const LmConfig& cfg,
                       const ThresholdRule& rule) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  problem.validate(k0.size());
  if (!(k0.array() >= 0.0).all() || !k0.allFinite()) {
    throw std::invalid_argument("projected_lm: initial point must be non-negative");
  }

  FitResult res;
  Vector k = k0;
  Vector r = problem.data - problem.model(k);
  double eps = r.norm();
  res.initial_residual = eps;
  double previous = eps;
  Matrix J = problem.jacobian(k);
  double alpha = cfg.alpha0 * std::max((J.transpose() * J).diagonal().maxCoeff(), 1e-300);

  StopTracker stop{problem.noise_level, cfg.tau, cfg.max_iterations, cfg.stagnation_tol,
                   cfg.stagnation_window, rule};
  for (int j = 0;; ++j) {
    if (auto why = stop.check(j, eps, previous)) {
      res.reason = *why;
      break;
    }
    const Vector rhs = J.transpose() * r;
    if (gradient_at_rounding(J, rhs, problem.data)) {
      res.reason = StopReason::stationary;
      break;
    }
    const Matrix B = J.transpose() * J;

    IterationRecord rec;
    bool accepted = false;
    Vector k_new;
    Vector r_new;
    for (int inner = 0; inner < cfg.max_inner; ++inner) {
      rec.inner_repeats = inner + 1;
      Matrix A = B;
      A.diagonal().array() += alpha;
      Eigen::LLT<Matrix> llt(A);
      if (llt.info() == Eigen::Success) {
        const Vector p = llt.solve(rhs);
        k_new = (k + p).cwiseMax(0.0);
        r_new = problem.data - problem.model(k_new);
        rec.alpha = alpha;
        rec.raw_step_norm = p.norm();
        rec.step_norm = (k_new - k).norm();
        if (r_new.allFinite() && r_new.norm() < eps) {
          accepted = true;
          alpha /= cfg.nu_down;
          break;
        }
      }
      alpha *= cfg.nu_up;
    }
    rec.radius = rec.step_norm;
    rec.q_ratio = eps > 0.0 && accepted ? (r - J * (k_new - k)).norm() / eps : 0.0;
    if (!accepted) {
      rec.residual_norm = eps;
      rec.iterate = k;
      res.history.push_back(std::move(rec));
      res.reason = StopReason::stalled;
      break;
    }
    k = k_new;
    r = r_new;
    previous = eps;
    eps = r.norm();
    J = problem.jacobian(k);
    rec.accepted = true;
    rec.residual_norm = eps;
    rec.iterate = k;
    res.history.push_back(std::move(rec));
  }

  res.k = k;
  res.final_residual = eps;
  res.iterations = static_cast<int>(res.history.size());
  res.wall_seconds = seconds_since(t0);
  return res;
}

// ---------------------------------------------------------------------------
// Settings and logs

namespace {

std::string key(std::string_view prefix, const char* name) {
  return prefix.empty() ? std::string(name) : std::string(prefix) + "." + name;
}

}  // namespace

#define KINMAP_TR_FIELDS(X)                                                                     \
  X(beta) X(beta_cauchy) X(gamma) X(q) X(tau) X(stepback) X(mu0) X(theta) X(eta) X(radius_min) \
  X(radius_max) X(alpha_floor) X(stagnation_tol)
#define KINMAP_TR_INT_FIELDS(X) X(max_iterations) X(max_inner) X(stagnation_window)
#define KINMAP_LM_FIELDS(X) X(alpha0) X(nu_up) X(nu_down) X(tau) X(stagnation_tol)

void apply_settings(TrConfig& cfg, const Settings& kv, std::string_view prefix) {
#define X(f) cfg.f = get_double(kv, key(prefix, #f), cfg.f);
  KINMAP_TR_FIELDS(X)
#undef X
#define X(f) cfg.f = static_cast<int>(get_int(kv, key(prefix, #f), cfg.f));
  KINMAP_TR_INT_FIELDS(X)
#undef X
}

void apply_settings(LmConfig& cfg, const Settings& kv, std::string_view prefix) {
#define X(f) cfg.f = get_double(kv, key(prefix, #f), cfg.f);
  KINMAP_LM_FIELDS(X)
#undef X
#define X(f) cfg.f = static_cast<int>(get_int(kv, key(prefix, #f), cfg.f));
  KINMAP_TR_INT_FIELDS(X)
#undef X
}

Settings to_settings(const TrConfig& cfg, std::string_view prefix) {
  Settings s;
#define X(f) s[key(prefix, #f)] = format_double(cfg.f);
  KINMAP_TR_FIELDS(X)
#undef X
#define X(f) s[key(prefix, #f)] = std::to_string(cfg.f);
  KINMAP_TR_INT_FIELDS(X)
#undef X
  return s;
}

Settings to_settings(const LmConfig& cfg, std::string_view prefix) {
  Settings s;
#define X(f) s[key(prefix, #f)] = format_double(cfg.f);
  KINMAP_LM_FIELDS(X)
#undef X
#define X(f) s[key(prefix, #f)] = std::to_string(cfg.f);
  KINMAP_TR_INT_FIELDS(X)
#undef X
  return s;
}

void write_log(std::ostream& os, const FitResult& result) {
  for (std::size_t j = 0; j < result.history.size(); ++j) {
    const auto& h = result.history[j];
    os << "iter=" << j + 1 << " residual=" << format_double(h.residual_norm)
       << " radius=" << format_double(h.radius) << " alpha=" << format_double(h.alpha)
       << " accepted=" << (h.accepted ? 1 : 0) << " active=" << (h.constraint_active ? 1 : 0)
       << " q=" << format_double(h.q_ratio) << " inner=" << h.inner_repeats << '\n';
  }
  os << "stop=" << to_string(result.reason) << " iterations=" << result.iterations
     << " residual=" << format_double(result.final_residual) << '\n';
}

std::string summary_json(const FitResult& result) {
  std::ostringstream os;
  os << "{\"stop\":\"" << to_string(result.reason) << "\",\"iterations\":" << result.iterations
     << ",\"initial_residual\":" << format_double(result.initial_residual)
     << ",\"final_residual\":" << format_double(result.final_residual) << ",\"k\":[";
  for (Eigen::Index i = 0; i < result.k.size(); ++i) {
    os << (i ? "," : "") << format_double(result.k[i]);
  }
  os << "]}";
  return os.str();
}

}  // namespace kinmap::optim
