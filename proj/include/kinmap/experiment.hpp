// Reproducible phantom experiment: configuration, on-disk datasets and the
// simulate / fit / evaluate / render steps behind the command-line tool.
#pragma once

#include "kinmap/imaging.hpp"
#include "kinmap/kvconfig.hpp"
#include "kinmap/optim.hpp"
#include "kinmap/phantom.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace kinmap::experiment {

namespace fs = std::filesystem;

/// Every setting of a run. Serialized as flat "section.key = value" text;
/// parse(serialize(c)) == c.
struct ExperimentConfig {
  // phantom
  int side = 64;
  std::string label_file;  // PGM label image; empty = procedural phantom
  // input function
  double activity_mbq = 350.0;
  double vd_liters = 12.7;
  phantom::IfShape if_shape;
  double if_noise = 0.0;  // c in C_b (1 + c r)
  // acquisition
  std::vector<std::pair<int, double>> frames{{6, 10.0}, {3, 20.0}, {3, 30.0}, {4, 60.0}, {3, 150.0}, {9, 300.0}};
  phantom::NoiseSettings noise;
  int replicates = 3;
  std::uint64_t seed = 20240601;
  // reconstruction post-processing
  bool smoothing = true;
  double smoothing_sigma = 1.0;
  int smoothing_window = 3;
  // fitting
  imaging::Solver solver = imaging::Solver::reg_as_tr;
  optim::TrConfig tr;
  optim::LmConfig lm;
  imaging::PixelFitPolicy policy;
  // output
  std::string out_dir = "run";

  kinetics::TimeGrid grid() const { return kinetics::TimeGrid::from_blocks(frames); }

  /// Throws ConfigError naming the first bad setting.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Unknown keys and malformed values raise ConfigError.
ExperimentConfig config_from_settings(const Settings& s);
Settings to_settings(const ExperimentConfig& c);
ExperimentConfig read_config(const fs::path& path);
void write_config(const fs::path& path, const ExperimentConfig& c);

// Datasets ------------------------------------------------------------------
//
// <out>/config.txt                  configuration used
// <out>/reference/                  noise-free data and ground truth
//   header.json labels.pgm labels.f32 vmap.f32 truth.f32 if.f32 dynamic.f32
// <out>/replicate_NNN/              one noisy realization each
//   header.json labels.f32 vmap.f32 if.f32 if_true.f32 dynamic.f32 sinogram.f32
//
// Arrays are little-endian float32. dynamic.f32 is frame-major
// (frame, row, col); truth.f32 holds k1..k4 planes; if.f32 holds the sample
// times (min) followed by the values (kBq/mL); sinogram.f32 is
// (frame, angle, bin).

struct Dataset {
  phantom::DynamicImage image;  // labels and vmap filled in
  kinetics::InputFunction input{{0.0, 1.0}, {0.0, 0.0}};  // the one handed to the fitter
  std::string name;
};

std::string replicate_name(int replicate);

/// Writes the dataset tree for c into c.out_dir.
void cmd_simulate(const ExperimentConfig& c, int threads = 1);

/// Replicate directories under a dataset root, sorted; the reference
/// directory alone when there are none.
std::vector<fs::path> dataset_members(const fs::path& root);
Dataset read_dataset(const fs::path& member_dir);

// Fitting -------------------------------------------------------------------
//
// <maps>/config.txt
// <maps>/<member>/header.json k.f32 stop.f32 iterations.f32 infilled.f32 summary.json
// <maps>/timing.txt                 wall-clock figures, excluded from comparisons

struct FitRunSummary {
  std::size_t fitted = 0;
  std::size_t stalled = 0;
  double worst_stalled_fraction = 0.0;  // over members
};

/// Default maps directory for a solver: <dataset>/maps-<solver>.
fs::path default_maps_dir(const fs::path& dataset, imaging::Solver solver);

FitRunSummary cmd_fit(const fs::path& dataset, const ExperimentConfig& c, const fs::path& maps_dir, int threads = 1);

/// Maps of one member directory of a maps tree, or the truth of a reference
/// directory.
imaging::ParametricMaps read_maps(const fs::path& dir);
std::vector<imaging::ParametricMaps> read_maps_tree(const fs::path& maps_dir);

// Evaluation ----------------------------------------------------------------

struct EvaluationRow {
  std::string method;
  imaging::RegionStat stat;
  double truth = 0.0;
  double rel_error = 0.0;  // |mean - truth| / truth, 0 when absent
};

struct RmseRow {
  std::string method;
  int parameter = 0;
  double rmse = 0.0;  // over fitted, non-infilled foreground pixels of all maps
  std::size_t n = 0;
};

struct Evaluation {
  std::vector<EvaluationRow> rows;  // 16 per method
  std::vector<RmseRow> rmse;        // 4 per method
};

/// Method name from a maps directory name ("maps-reg-as-tr" -> "reg-as-tr").
std::string method_name(const fs::path& maps_dir);

Evaluation evaluate(const fs::path& dataset, const std::vector<fs::path>& maps_dirs);
/// Writes evaluation.csv, rmse.csv and report.txt into out_dir.
Evaluation cmd_evaluate(const fs::path& dataset, const std::vector<fs::path>& maps_dirs, const fs::path& out_dir);

// Rendering -----------------------------------------------------------------

/// Fixed display range per rate constant: [0, 2 x the largest table value].
std::pair<double, double> parameter_scale(int parameter);

/// A maps tree or member renders k1..k4 (mean over members); a reference
/// directory renders the truth and a frame; a replicate renders a frame.
/// frame < 0 selects the last one. A scale.json sidecar records the ranges.
void cmd_render(const fs::path& input, const fs::path& out_dir, int frame = -1);

}  // namespace kinmap::experiment
