// Pixel-wise parametric reconstruction: smoothing, per-pixel noise level,
// initialization policy, the fitting loop and region statistics.
#pragma once

#include "kinmap/kinetics.hpp"
#include "kinmap/optim.hpp"
#include "kinmap/phantom.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace kinmap::imaging {

using phantom::DynamicImage;
using phantom::LabelImage;

/// Per-frame 2D convolution with a normalized window x window Gaussian,
/// borders reflected about the outer pixel edge (d c b a | a b c d).
DynamicImage deblur_gaussian(const DynamicImage& img, double sigma = 1.0, int window = 3);

/// Robust per-frame noise level from second differences of the TAC on the
/// (possibly non-uniform) frame times; each difference is normalized so that
/// white noise of level s gives differences of level s.
double frame_noise(const Eigen::VectorXd& tac, std::span<const double> times);

/// tau_1 = sqrt(N) * frame_noise, the expected residual norm of pure noise.
double noise_sigma(const Eigen::VectorXd& tac, std::span<const double> times);

enum class Solver { reg_as_tr, projected_lm };
std::string_view to_string(Solver s);
std::optional<Solver> parse_solver(std::string_view s);

enum class ScanOrder { raster, wavefront };

struct PixelFitPolicy {
  Eigen::Vector4d prior_low{0.02, 0.02, 0.01, 0.002};
  Eigen::Vector4d prior_high{0.2, 0.4, 0.2, 0.04};
  bool neighbor_init = true;
  double tau2_boundary = 10.0;
  double tau2_inner = 3.0;
  double boundary_cv = 0.5;  // neighbour disagreement that marks a boundary
  double plateau = 1e-2;     // |1 - eps_{j-1}/eps_j| below this counts as flat
  ScanOrder order = ScanOrder::raster;
  bool oracle_labels = false;  // test hook: use region labels for boundaries and neighbours
  // Known per-frame noise level. When set, tau_1 = sqrt(N) * frame_sigma for
  // every pixel instead of the per-pixel estimate (0 for noise-free data).
  std::optional<double> frame_sigma;

  void validate() const;
  bool operator==(const PixelFitPolicy&) const = default;
};

struct FitOptions {
  Solver solver = Solver::reg_as_tr;
  optim::TrConfig tr;
  optim::LmConfig lm;
  PixelFitPolicy policy;
  int threads = 1;
};

/// Causal 8-neighbourhood of a pixel. boundary is set by out-of-image or
/// background neighbours, and in oracle mode by neighbours of another
/// region. donors lists the neighbours already fitted successfully (done != 0)
/// that may seed the initialization; oracle mode keeps only same-region ones.
struct Neighbourhood {
  bool boundary = false;
  std::vector<std::size_t> donors;
};
Neighbourhood scan_neighbours(const LabelImage& labels, std::span<const std::uint8_t> done, int row, int col,
                              bool oracle_labels);

/// Stop codes stored per pixel: 0 = not fitted (background), else
/// 1 + StopReason.
std::uint8_t stop_code(optim::StopReason r);
std::optional<optim::StopReason> stop_from_code(std::uint8_t code);

struct ParametricMaps {
  int side = 0;
  std::array<std::vector<double>, 4> k;  // k1..k4, zero on background
  std::vector<std::uint8_t> stop;
  std::vector<std::int32_t> iterations;
  std::vector<std::uint8_t> infilled;  // 1 where a failed fit was replaced by the region median

  std::size_t pixels() const { return static_cast<std::size_t>(side) * static_cast<std::size_t>(side); }
  bool operator==(const ParametricMaps&) const = default;
};

/// Maps holding the region values of a ground truth.
ParametricMaps truth_maps(const phantom::GroundTruth& gt);

struct FitReport {
  ParametricMaps maps;
  std::size_t fitted = 0;
  std::size_t stalled = 0;
  double solver_seconds = 0.0;  // summed over pixels; not part of the maps
};

/// Fits every foreground pixel (label != 0) of img. vmap gives the blood
/// fraction per pixel; seed drives the random initializations.
FitReport fit_image(const DynamicImage& img, const kinetics::InputFunction& input, std::span<const double> vmap,
                    const FitOptions& options, std::uint64_t seed);

struct RegionStat {
  int region = 0;     // 1..4
  int parameter = 0;  // 0..3 for k1..k4
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
  bool present = false;
};

/// Per-region mean and standard deviation of each rate constant, pooled over
/// replicate maps. The standard deviation is the pooled within-map spread,
/// sqrt(sum_r sum_i (x_ri - mean_r)^2 / (n - maps with data)), so identical
/// replicates give the single-map sample value. Infilled pixels are skipped
/// unless asked for.
std::vector<RegionStat> region_stats(std::span<const ParametricMaps> maps, const LabelImage& labels,
                                     bool include_infilled = false);

}  // namespace kinmap::imaging
