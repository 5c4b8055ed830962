// Synthetic brain experiment: region phantom, ground-truth kinetics, arterial
// input function and noise-free dynamic images.
#pragma once

#include "kinmap/kinetics.hpp"
#include "kinmap/tomography.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace kinmap::phantom {

using kinetics::InputFunction;
using kinetics::KineticParams;
using kinetics::TimeGrid;

inline constexpr int kRegionCount = 4;

/// Square label grid, row-major. 0 = background, 1..4 = functional regions
/// (grey matter, white matter, basal ganglia, thalamus).
struct LabelImage {
  int side = 0;
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
  std::uint8_t at(int row, int col) const { return labels[static_cast<std::size_t>(row * side + col)]; }
  std::size_t count(std::uint8_t label) const;

  bool operator==(const LabelImage&) const = default;
};

/// Procedural stand-in for the Hoffman slice: cortical band (1) around a
/// white-matter bulk (2), two deep nuclei (3) and one midline structure (4).
LabelImage make_phantom(int side);

/// Binary PGM (P5), maxval 255, values 0..4.
LabelImage read_label_pgm(const std::string& path);
void write_label_pgm(const std::string& path, const LabelImage& labels);

/// Ground-truth rate constants and blood volume fraction per region.
const std::array<KineticParams, kRegionCount>& reference_kinetics();

struct GroundTruth {
  LabelImage labels;
  std::array<KineticParams, kRegionCount> regions = reference_kinetics();

  KineticParams at(std::size_t pixel) const;
  /// k1..k4 maps, zero on background.
  std::array<std::vector<double>, 4> rate_maps() const;
  std::vector<double> blood_volume_map() const;
};

/// Linear rise to the peak at t_peak, then a tri-exponential decay. The
/// amplitudes are fractions of the peak and must sum to one.
struct IfShape {
  double t_peak_min = 0.75;
  std::array<double, 3> fractions{0.75, 0.17, 0.08};
  std::array<double, 3> rates{4.0, 0.2, 0.012};  // 1/min

  void validate() const;
  bool operator==(const IfShape&) const = default;
};

/// Peak blood concentration in kBq/mL for an administered activity (MBq)
/// spread over a distribution volume (L).
double peak_concentration(double aa_mbq, double vd_liters);

/// Analytic input-function value at t (minutes).
double input_curve(double aa_mbq, double vd_liters, const IfShape& shape, double t_min);

/// Samples the analytic curve at the given times (first must be 0).
InputFunction input_function(double aa_mbq, double vd_liters, const IfShape& shape,
                             std::span<const double> times_min);

/// t = 0 followed by the frame midpoints.
std::vector<double> default_if_times(const TimeGrid& grid);

/// C_b(t_i) (1 + c r_i) with r_i ~ N(0, 1), clamped at zero. The t = 0 sample
/// is left at its value.
InputFunction perturb_if(const InputFunction& input, double c, std::uint64_t seed);

/// Per-pixel time-activity curves, frame-major: data[f * side^2 + pixel].
struct DynamicImage {
  int side = 0;
  TimeGrid grid = TimeGrid::standard();
  std::vector<double> data;
  LabelImage labels;
  std::vector<double> vmap;
  std::map<std::string, std::string> provenance;

  std::size_t pixels() const { return static_cast<std::size_t>(side) * static_cast<std::size_t>(side); }
  std::size_t frames() const { return grid.size(); }
  std::span<double> frame(std::size_t f) { return {data.data() + f * pixels(), pixels()}; }
  std::span<const double> frame(std::size_t f) const { return {data.data() + f * pixels(), pixels()}; }
  Eigen::VectorXd tac(std::size_t pixel) const;
  void set_tac(std::size_t pixel, const Eigen::VectorXd& values);
};

/// Forward model per pixel, background left at zero.
DynamicImage simulate_dynamic(const GroundTruth& gt, const InputFunction& input, const TimeGrid& grid);

/// Count level and geometry of the per-frame projection/noise/FBP chain.
struct NoiseSettings {
  double counts_per_max_bin = 1e4;  // expected counts in the hottest bin over all frames
  int angles = 90;
  Apodization window = Apodization::hann;

  void validate() const;
  bool operator==(const NoiseSettings&) const = default;
};

struct NoisyDynamic {
  DynamicImage image;               // FBP reconstruction of every frame
  std::vector<Sinogram> sinograms;  // noisy, one per frame
  std::size_t clamped = 0;          // negative bins zeroed before sampling
};

/// Projects every frame, adds Poisson noise with one sub-seed per
/// (replicate, frame) and reconstructs. Output does not depend on threads.
NoisyDynamic project_and_reconstruct(const DynamicImage& clean, const NoiseSettings& noise,
                                     std::uint64_t master_seed, std::uint64_t replicate, int threads = 1);

}  // namespace kinmap::phantom
