#include "kinmap/phantom.hpp"

#include "kinmap/seeds.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace kinmap::phantom {

std::size_t LabelImage::count(std::uint8_t label) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

namespace {

bool inside(double x, double y, double cx, double cy, double ax, double ay) {
  const double u = (x - cx) / ax, v = (y - cy) / ay;
  return u * u + v * v <= 1.0;
}

}  // namespace

LabelImage make_phantom(int side) {
  if (side < 32) throw std::invalid_argument("make_phantom: side must be at least 32");
  LabelImage img{side, std::vector<std::uint8_t>(static_cast<std::size_t>(side) * side, 0)};
  const double c = 0.5 * (side - 1);
  const double half = 0.5 * side;
  for (int row = 0; row < side; ++row) {
    for (int col = 0; col < side; ++col) {
      // Normalized coordinates, y grows downwards.
      const double x = (col - c) / half, y = (row - c) / half;
      std::uint8_t label = 0;
      if (inside(x, y, 0.0, 0.0, 0.80, 0.92)) label = 1;
      if (inside(x, y, 0.0, 0.0, 0.58, 0.70)) label = 2;
      if (inside(x, y, -0.27, -0.02, 0.11, 0.20) || inside(x, y, 0.27, -0.02, 0.11, 0.20)) label = 3;
      if (inside(x, y, 0.0, 0.22, 0.13, 0.12)) label = 4;
      img.labels[static_cast<std::size_t>(row * side + col)] = label;
    }
  }
  for (std::uint8_t r = 0; r <= kRegionCount; ++r) {
    if (img.count(r) == 0) throw std::invalid_argument("make_phantom: side too small to hold every region");
  }
  return img;
}

LabelImage read_label_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open PGM file '" + path + "'");
  std::string magic;
  in >> magic;
  if (magic != "P5") throw std::runtime_error("'" + path + "': not a binary PGM (P5)");
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
      in >> std::ws;
    }
    int v = 0;
    if (!(in >> v)) throw std::runtime_error("'" + path + "': malformed PGM header");
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w != h || w <= 0) throw std::runtime_error("'" + path + "': label image must be square");
  if (maxval > 255) throw std::runtime_error("'" + path + "': only 8-bit PGM supported");
  in.get();  // single whitespace after maxval
  LabelImage img{w, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h)};
  in.read(reinterpret_cast<char*>(img.labels.data()), static_cast<std::streamsize>(img.labels.size()));
  if (!in) throw std::runtime_error("'" + path + "': truncated PGM data");
  for (auto v : img.labels) {
    if (v > kRegionCount) throw std::runtime_error("'" + path + "': label values must be 0..4");
  }
  return img;
}

void write_label_pgm(const std::string& path, const LabelImage& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "P5\n" << labels.side << ' ' << labels.side << "\n255\n";
  out.write(reinterpret_cast<const char*>(labels.labels.data()),
            static_cast<std::streamsize>(labels.labels.size()));
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

const std::array<KineticParams, kRegionCount>& reference_kinetics() {
  static const std::array<KineticParams, kRegionCount> table{{
      {0.100, 0.250, 0.100, 0.020, 0.050},
      {0.050, 0.150, 0.050, 0.020, 0.030},
      {0.070, 0.050, 0.100, 0.007, 0.040},
      {0.080, 0.100, 0.050, 0.007, 0.050},
  }};
  return table;
}

KineticParams GroundTruth::at(std::size_t pixel) const {
  const auto label = labels.labels[pixel];
  return label == 0 ? KineticParams{} : regions[label - 1];
}

std::array<std::vector<double>, 4> GroundTruth::rate_maps() const {
  std::array<std::vector<double>, 4> maps;
  for (auto& m : maps) m.assign(labels.size(), 0.0);
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const Eigen::Vector4d k = at(p).rates();
    for (int i = 0; i < 4; ++i) maps[i][p] = k[i];
  }
  return maps;
}

std::vector<double> GroundTruth::blood_volume_map() const {
  std::vector<double> v(labels.size(), 0.0);
  for (std::size_t p = 0; p < labels.size(); ++p) v[p] = at(p).V;
  return v;
}

// ---------------------------------------------------------------------------
// Input function

void IfShape::validate() const {
  if (!(t_peak_min > 0.0)) throw std::invalid_argument("IfShape: t_peak must be positive");
  double sum = 0.0;
  for (int i = 0; i < 3; ++i) {
    if (!(rates[i] > 0.0)) throw std::invalid_argument("IfShape: decay rates must be positive");
    if (fractions[i] < 0.0) throw std::invalid_argument("IfShape: amplitudes must be non-negative");
    sum += fractions[i];
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw std::invalid_argument("IfShape: amplitudes must sum to the peak (curve discontinuous at t_peak)");
  }
}

double peak_concentration(double aa_mbq, double vd_liters) {
  if (!(aa_mbq > 0.0) || !(vd_liters > 0.0)) {
    throw std::invalid_argument("input function: activity and distribution volume must be positive");
  }
  // MBq/L == kBq/mL
  return aa_mbq / vd_liters;
}

double input_curve(double aa_mbq, double vd_liters, const IfShape& shape, double t) {
  const double peak = peak_concentration(aa_mbq, vd_liters);
  if (t <= 0.0) return 0.0;
  if (t <= shape.t_peak_min) return peak * t / shape.t_peak_min;
  const double dt = t - shape.t_peak_min;
  double v = 0.0;
  for (int i = 0; i < 3; ++i) v += shape.fractions[i] * std::exp(-shape.rates[i] * dt);
  return peak * v;
}

InputFunction input_function(double aa_mbq, double vd_liters, const IfShape& shape,
                             std::span<const double> times_min) {
  shape.validate();
  std::vector<double> t(times_min.begin(), times_min.end());
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) v[i] = input_curve(aa_mbq, vd_liters, shape, t[i]);
  return InputFunction(std::move(t), std::move(v));
}

std::vector<double> default_if_times(const TimeGrid& grid) {
  std::vector<double> t{0.0};
  const auto mids = grid.midpoints_min();
  t.insert(t.end(), mids.begin(), mids.end());
  return t;
}

InputFunction perturb_if(const InputFunction& input, double c, std::uint64_t seed) {
  if (c < 0.0) throw std::invalid_argument("perturb_if: noise level must be non-negative");
  if (c == 0.0) return input;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v = input.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double r = normal(rng);
    if (input.times()[i] == 0.0) continue;
    v[i] = std::max(0.0, v[i] * (1.0 + c * r));
  }
  return InputFunction(input.times(), std::move(v));
}

// ---------------------------------------------------------------------------
// Dynamic image

Eigen::VectorXd DynamicImage::tac(std::size_t pixel) const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(frames()));
  for (std::size_t f = 0; f < frames(); ++f) out[static_cast<Eigen::Index>(f)] = data[f * pixels() + pixel];
  return out;
}

void DynamicImage::set_tac(std::size_t pixel, const Eigen::VectorXd& values) {
  for (std::size_t f = 0; f < frames(); ++f) data[f * pixels() + pixel] = values[static_cast<Eigen::Index>(f)];
}

DynamicImage simulate_dynamic(const GroundTruth& gt, const InputFunction& input, const TimeGrid& grid) {
  DynamicImage img;
  img.side = gt.labels.side;
  img.grid = grid;
  img.labels = gt.labels;
  img.vmap = gt.blood_volume_map();
  img.data.assign(img.pixels() * grid.size(), 0.0);

  const kinetics::ForwardModel model(input, grid);
  std::array<Eigen::VectorXd, kRegionCount> curves;
  for (int r = 0; r < kRegionCount; ++r) curves[r] = model.evaluate(gt.regions[r]);
  for (std::size_t p = 0; p < img.pixels(); ++p) {
    const auto label = gt.labels.labels[p];
    if (label != 0) img.set_tac(p, curves[label - 1]);
  }
  return img;
}

// ---------------------------------------------------------------------------
// Noisy acquisition

void NoiseSettings::validate() const {
  if (!(counts_per_max_bin > 0.0)) throw std::invalid_argument("noise: counts_per_max_bin must be positive");
  if (angles < 1) throw std::invalid_argument("noise: need at least one projection angle");
}

NoisyDynamic project_and_reconstruct(const DynamicImage& clean, const NoiseSettings& noise,
                                     std::uint64_t master_seed, std::uint64_t replicate, int threads) {
  noise.validate();
  const std::size_t frames = clean.frames();
  const auto angles = default_angles(noise.angles);

  NoisyDynamic out;
  out.image = clean;
  out.sinograms.resize(frames);
  std::vector<std::size_t> clamped(frames, 0);

  auto for_frames = [&](auto&& body) {
    const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, frames);
    if (workers == 1) {
      for (std::size_t f = 0; f < frames; ++f) body(f);
      return;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t f = w; f < frames; f += workers) body(f);
      });
    }
    for (auto& t : pool) t.join();
  };

  for_frames([&](std::size_t f) { out.sinograms[f] = radon(clean.frame(f), clean.side, angles); });

  double peak = 0.0;
  for (const auto& s : out.sinograms) {
    for (double v : s.data) peak = std::max(peak, v);
  }
  const double scale = peak > 0.0 ? noise.counts_per_max_bin / peak : 1.0;

  for_frames([&](std::size_t f) {
    const auto seed = derive_seed(master_seed, Stream::poisson, replicate, f);
    out.sinograms[f] = add_poisson(out.sinograms[f], scale, seed, &clamped[f]);
    const auto img = fbp(out.sinograms[f], clean.side, noise.window);
    std::copy(img.begin(), img.end(), out.image.frame(f).begin());
  });
  for (auto c : clamped) out.clamped += c;
  return out;
}

}  // namespace kinmap::phantom
