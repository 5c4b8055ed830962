// Non-negatively constrained nonlinear least squares for ill-posed problems.
//
// Two solvers share one residual interface:
//  * reg_as_tr    - regularizing affine-scaling trust region. The TR constraint
//                   is kept active so its multiplier acts as a Tikhonov weight;
//                   iterates stay strictly positive through a stepback rule.
//  * projected_lm - Levenberg-Marquardt with multiplicative damping and a
//                   projection onto k >= 0. Used as the baseline.
#pragma once

#include <Eigen/Core>

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace kinmap::optim {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// F: R^n -> R^N with Jacobian, data y^delta and noise bound delta.
/// F must be continuously differentiable on k >= 0; this is not checked.
struct ResidualProblem {
  std::function<Vector(const Vector&)> model;
  std::function<Matrix(const Vector&)> jacobian;
  Vector data;
  double noise_level = 0.0;

  void validate(Eigen::Index n) const;
};

struct TrConfig {
  double beta = 0.25;          // actual/predicted acceptance threshold, [0.25, 1)
  double beta_cauchy = 0.1;    // model-decrease ratio against the Cauchy point
  double gamma = 0.5;          // radius shrink factor
  double q = 0.5;
  double tau = 2.1;            // discrepancy factor, tau > 1/q
  double stepback = 0.995;     // t in the feasibility rule
  double mu0 = 0.001;
  double theta = 0.5;
  double eta = 0.5;
  double radius_min = 1e-8;
  double radius_max = 10.0;
  double alpha_floor = 1e-10;
  int max_iterations = 200;
  int max_inner = 30;
  double stagnation_tol = 1e-6;
  int stagnation_window = 5;

  /// Throws std::invalid_argument naming the first bad field.
  void validate() const;
  bool operator==(const TrConfig&) const = default;
};

struct LmConfig {
  double alpha0 = 1e-3;   // initial damping, relative to max diag(J^T J)
  double nu_up = 10.0;
  double nu_down = 3.0;
  double tau = 2.1;
  int max_iterations = 200;
  int max_inner = 30;
  double stagnation_tol = 1e-6;
  int stagnation_window = 5;

  void validate() const;
  bool operator==(const LmConfig&) const = default;
};

enum class StopReason { discrepancy, threshold_rule, stagnation, max_iterations, stationary, stalled };

std::string_view to_string(StopReason r);
std::optional<StopReason> parse_stop_reason(std::string_view s);

struct IterationRecord {
  double residual_norm = 0.0;  // after the step
  double radius = 0.0;         // trust radius (LM: step norm)
  double alpha = 0.0;          // regularization multiplier used
  bool accepted = false;
  bool constraint_active = false;
  double q_ratio = 0.0;        // ||r - J pbar|| / ||r||
  double step_norm = 0.0;      // ||pbar||
  double raw_step_norm = 0.0;  // ||p|| before the feasibility rule
  int inner_repeats = 0;
  Vector iterate;              // k after the step
};

struct FitResult {
  Vector k;
  StopReason reason = StopReason::max_iterations;
  double initial_residual = 0.0;
  double final_residual = 0.0;
  std::vector<IterationRecord> history;
  int iterations = 0;
  double wall_seconds = 0.0;
};

/// Optional extra stopping test on (current, previous) residual norms.
using ThresholdRule = std::function<bool(double current, double previous)>;

struct SecularSolution {
  double alpha = 0.0;
  Vector step;
  bool constraint_active = false;
};

/// Solves ||p(alpha)|| = radius for p(alpha) = (J^T J + alpha I)^{-1} J^T r.
/// When the step at alpha_floor already fits, returns it with the constraint
/// flagged inactive.
SecularSolution solve_secular(const Matrix& J, const Vector& r, double radius, double alpha_floor);

/// Componentwise stepback keeping k + pbar strictly positive.
Vector feasible_step(const Vector& k, const Vector& p, double t);

/// Diagonal of the affine scaling D(k): |k_i| where grad_i >= 0, else 1.
Vector scaling_diagonal(const Vector& k, const Vector& grad);

/// Generalized Cauchy point -lambda_C D g.
Vector cauchy_point(const Vector& k, const Vector& g, const Matrix& J, double radius, double t);

/// m(p) = p^T B p / 2 + p^T g with B = J^T J.
double model_value(const Matrix& J, const Vector& g, const Vector& p);

struct RadiusUpdate {
  double mu;
  double radius;
};

RadiusUpdate radius_update(double mu, double q_j, const TrConfig& cfg, double residual_norm_next,
                           double grad_norm_next, double hessian_norm_next);

/// Trust radius from mu, ||F - y||, ||g|| and ||B||, clamped to [min, max].
double trust_radius(double mu, double residual_norm, double grad_norm, double hessian_norm,
                    const TrConfig& cfg);

bool discrepancy_stop(double residual_norm, double delta, double tau);

FitResult reg_as_tr(const ResidualProblem& problem, const Vector& k0, const TrConfig& cfg,
                    const ThresholdRule& rule = {});

FitResult projected_lm(const ResidualProblem& problem, const Vector& k0, const LmConfig& cfg,
                       const ThresholdRule& rule = {});

// Config files and logs ------------------------------------------------------

/// Reads fields from flat key/value pairs; keys are the field names above,
/// optionally under a prefix ("solver.beta").
void apply_settings(TrConfig& cfg, const std::map<std::string, std::string>& kv,
                    std::string_view prefix = "");
void apply_settings(LmConfig& cfg, const std::map<std::string, std::string>& kv,
                    std::string_view prefix = "");
std::map<std::string, std::string> to_settings(const TrConfig& cfg, std::string_view prefix = "");
std::map<std::string, std::string> to_settings(const LmConfig& cfg, std::string_view prefix = "");

/// One line per iteration: "iter=<j> residual=<r> radius=<d> alpha=<a> accepted=<0|1> ...".
void write_log(std::ostream& os, const FitResult& result);

/// Single-line JSON summary (no wall time, so output is reproducible).
std::string summary_json(const FitResult& result);

}  // namespace kinmap::optim
