// Two-compartment FDG tracer kinetics: forward model and sensitivities.
//
// Units: rate constants in 1/min, time in minutes (frame boundaries are
// given in seconds and converted), concentrations in kBq/mL.
#pragma once

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace kinmap::kinetics {

/// Rate constants k1..k4 (1/min) and the blood volume fraction V.
struct KineticParams {
  double k1 = 0.0;
  double k2 = 0.0;
  double k3 = 0.0;
  double k4 = 0.0;
  double V = 0.0;

  bool valid() const;
  Eigen::Vector4d rates() const { return {k1, k2, k3, k4}; }
  static KineticParams from_rates(const Eigen::Vector4d& k, double V);

  bool operator==(const KineticParams&) const = default;
};

/// Acquisition frames. Boundaries are in seconds and must start at 0.
class TimeGrid {
 public:
  explicit TimeGrid(std::vector<double> boundaries_s);

  /// Builds a grid from (count, duration in seconds) blocks.
  static TimeGrid from_blocks(std::span<const std::pair<int, double>> blocks);

  /// 6x10 s, 3x20 s, 3x30 s, 4x60 s, 3x150 s, 9x300 s: 28 frames, 3600 s.
  static TimeGrid standard();

  std::size_t size() const { return boundaries_s_.size() - 1; }
  double start_s(std::size_t i) const { return boundaries_s_[i]; }
  double end_s(std::size_t i) const { return boundaries_s_[i + 1]; }
  double midpoint_min(std::size_t i) const;
  std::vector<double> midpoints_min() const;
  double end_min() const { return boundaries_s_.back() / 60.0; }
  const std::vector<double>& boundaries_s() const { return boundaries_s_; }

  bool operator==(const TimeGrid&) const = default;

 private:
  std::vector<double> boundaries_s_;
};

/// Arterial tracer concentration, linearly interpolated between samples and
/// held constant after the last one. Sample times are in minutes.
class InputFunction {
 public:
  InputFunction(std::vector<double> times_min, std::vector<double> values);

  double operator()(double t_min) const;
  std::vector<double> at(std::span<const double> t_min) const;

  const std::vector<double>& times() const { return times_; }
  const std::vector<double>& values() const { return values_; }

  bool operator==(const InputFunction&) const = default;

 private:
  std::vector<double> times_;
  std::vector<double> values_;
};

struct CompartmentCurve {
  Eigen::VectorXd free;
  Eigen::VectorXd metabolized;
};

/// Per-frame measured concentration.
using ModelCurve = Eigen::VectorXd;

Eigen::Matrix2d system_matrix(const KineticParams& k);

/// exp(M dt) for a 2x2 matrix with real eigenvalues. Falls back to the
/// confluent formula when the eigenvalues agree to 1e-8 relative.
Eigen::Matrix2d expm_2x2(const Eigen::Matrix2d& M, double dt);

/// Relative eigenvalue gap below which the two eigenvalues are treated as equal.
inline constexpr double kConfluentGap = 1e-8;

/// Integrals of r^m exp(lambda r) over [0, h] for m = 0, 1, 2.
std::array<double, 3> exponential_moments(double lambda, double h);

/// Precomputed segment schedule for convolving one input function against
/// exponential kernels and reporting the result at frame midpoints. The IF is
/// exactly piecewise linear, so every segment integral is closed form.
class ForwardModel {
 public:
  ForwardModel(InputFunction input, TimeGrid grid);

  const InputFunction& input() const { return input_; }
  const TimeGrid& grid() const { return grid_; }
  std::size_t frames() const { return grid_.size(); }

  /// C_b sampled at the frame midpoints.
  const Eigen::VectorXd& blood() const { return blood_; }

  /// G_m(t) = int_0^t s^m exp(lambda s) C_b(t - s) ds at each midpoint, m = 0, 1.
  std::pair<Eigen::VectorXd, Eigen::VectorXd> exponential_convolution(double lambda) const;

  CompartmentCurve solve(const KineticParams& k) const;
  ModelCurve measure(const CompartmentCurve& c, const KineticParams& k) const;
  ModelCurve evaluate(const KineticParams& k) const;

  /// N x 4 Jacobian of the measured curve with respect to k1..k4 (V fixed).
  Eigen::MatrixXd sensitivities(const KineticParams& k) const;

  /// Same quantity by exact propagation of the augmented sensitivity system.
  /// Used near coincident eigenvalues where the spectral formula cancels.
  Eigen::MatrixXd sensitivities_augmented(const KineticParams& k) const;

 private:
  struct Segment {
    double h;
    double c;      // C_b at segment start
    double slope;  // dC_b/dt over the segment
    int frame;     // frame index reached at segment end, or -1
  };

  InputFunction input_;
  TimeGrid grid_;
  std::vector<Segment> segments_;
  Eigen::VectorXd blood_;
};

CompartmentCurve solve_forward(const KineticParams& k, const InputFunction& input,
                               const TimeGrid& grid);
ModelCurve measure(const CompartmentCurve& c, const KineticParams& k,
                   const InputFunction& input, const TimeGrid& grid);
Eigen::MatrixXd sensitivities(const KineticParams& k, const InputFunction& input,
                              const TimeGrid& grid);

}  // namespace kinmap::kinetics
