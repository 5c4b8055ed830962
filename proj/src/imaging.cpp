#include "kinmap/imaging.hpp"

#include "kinmap/seeds.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <thread>

namespace kinmap::imaging {

namespace {

double median_of(std::vector<double> v) {
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  double m = *mid;
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), mid));
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Smoothing

DynamicImage deblur_gaussian(const DynamicImage& img, double sigma, int window) {
  if (window < 1 || window % 2 == 0) throw std::invalid_argument("deblur_gaussian: window must be odd");
  if (!(sigma > 0.0)) throw std::invalid_argument("deblur_gaussian: sigma must be positive");
  const int half = window / 2;
  std::vector<double> g(static_cast<std::size_t>(window));
  double sum = 0.0;
  for (int i = -half; i <= half; ++i) {
    g[static_cast<std::size_t>(i + half)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += g[static_cast<std::size_t>(i + half)];
  }
  for (double& v : g) v /= sum;

  const int n = img.side;
  auto reflect = [n](int i) {
    // Period 2n mirror; edge pixel repeated.
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
  };

  DynamicImage out = img;
  std::vector<double> tmp(img.pixels());
  for (std::size_t f = 0; f < img.frames(); ++f) {
    const auto src = img.frame(f);
    auto dst = out.frame(f);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) {
        double acc = 0.0;
        for (int i = -half; i <= half; ++i) {
          acc += g[static_cast<std::size_t>(i + half)] * src[static_cast<std::size_t>(r * n + reflect(c + i))];
        }
        tmp[static_cast<std::size_t>(r * n + c)] = acc;
      }
    }
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < n; ++c) {
        double acc = 0.0;
        for (int i = -half; i <= half; ++i) {
          acc += g[static_cast<std::size_t>(i + half)] * tmp[static_cast<std::size_t>(reflect(r + i) * n + c)];
        }
        dst[static_cast<std::size_t>(r * n + c)] = acc;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Noise level

double frame_noise(const Eigen::VectorXd& tac, std::span<const double> times) {
  const auto n = static_cast<std::size_t>(tac.size());
  if (n < 4) throw std::invalid_argument("noise_sigma: need at least four frames");
  if (times.size() != n) throw std::invalid_argument("noise_sigma: times and curve lengths differ");
  if (tac.isZero(0.0)) return 0.0;

  std::vector<double> d(n - 2);
  for (std::size_t i = 0; i + 2 < n; ++i) {
    const double h0 = times[i + 1] - times[i], h1 = times[i + 2] - times[i + 1];
    // Weights of the divided second difference; they cancel constants and
    // linear trends.
    double w0 = 1.0 / (h0 * (h0 + h1)), w1 = -1.0 / (h0 * h1), w2 = 1.0 / (h1 * (h0 + h1));
    const double norm = std::sqrt(w0 * w0 + w1 * w1 + w2 * w2);
    w0 /= norm, w1 /= norm, w2 /= norm;
    d[i] = w0 * tac[static_cast<Eigen::Index>(i)] + w1 * tac[static_cast<Eigen::Index>(i + 1)] +
           w2 * tac[static_cast<Eigen::Index>(i + 2)];
  }
  const double centre = median_of(d);
  for (double& v : d) v = std::abs(v - centre);
  return 1.4826 * median_of(d);
}

double noise_sigma(const Eigen::VectorXd& tac, std::span<const double> times) {
  return std::sqrt(static_cast<double>(tac.size())) * frame_noise(tac, times);
}

// ---------------------------------------------------------------------------
// Policy and codes

std::string_view to_string(Solver s) { return s == Solver::reg_as_tr ? "reg-as-tr" : "projected-lm"; }

std::optional<Solver> parse_solver(std::string_view s) {
  if (s == "reg-as-tr") return Solver::reg_as_tr;
  if (s == "projected-lm") return Solver::projected_lm;
  return std::nullopt;
}

void PixelFitPolicy::validate() const {
  if (!(prior_low.array() > 0.0).all() || !(prior_high.array() > prior_low.array()).all()) {
    throw std::invalid_argument("PixelFitPolicy: prior box must be positive with low < high");
  }
  if (!(tau2_boundary >= 1.0) || !(tau2_inner >= 1.0)) {
    throw std::invalid_argument("PixelFitPolicy: tau2 multipliers must be at least 1");
  }
  if (!(boundary_cv > 0.0) || !(plateau > 0.0)) {
    throw std::invalid_argument("PixelFitPolicy: boundary_cv and plateau must be positive");
  }
  if (frame_sigma && !(*frame_sigma >= 0.0 && std::isfinite(*frame_sigma))) {
    throw std::invalid_argument("PixelFitPolicy: frame_sigma must be finite and non-negative");
  }
}

std::uint8_t stop_code(optim::StopReason r) { return static_cast<std::uint8_t>(1 + static_cast<int>(r)); }

std::optional<optim::StopReason> stop_from_code(std::uint8_t code) {
  if (code < 1 || code > 1 + static_cast<int>(optim::StopReason::stalled)) return std::nullopt;
  return static_cast<optim::StopReason>(code - 1);
}

namespace {

ParametricMaps empty_maps(int side) {
  ParametricMaps m;
  m.side = side;
  const std::size_t n = m.pixels();
  for (auto& k : m.k) k.assign(n, 0.0);
  m.stop.assign(n, 0);
  m.iterations.assign(n, 0);
  m.infilled.assign(n, 0);
  return m;
}

}  // namespace

ParametricMaps truth_maps(const phantom::GroundTruth& gt) {
  ParametricMaps m = empty_maps(gt.labels.side);
  const auto rates = gt.rate_maps();
  for (int i = 0; i < 4; ++i) m.k[static_cast<std::size_t>(i)] = rates[static_cast<std::size_t>(i)];
  return m;
}

Neighbourhood scan_neighbours(const LabelImage& labels, std::span<const std::uint8_t> done, int row, int col,
                              bool oracle_labels) {
  const int side = labels.side;
  if (done.size() != labels.size()) throw std::invalid_argument("scan_neighbours: mask and labels differ in size");
  const std::uint8_t label = labels.at(row, col);
  Neighbourhood out;
  for (int dr = -1; dr <= 1; ++dr) {
    for (int dc = -1; dc <= 1; ++dc) {
      if (dr == 0 && dc == 0) continue;
      const int rr = row + dr, cc = col + dc;
      if (rr < 0 || cc < 0 || rr >= side || cc >= side) {
        out.boundary = true;
        continue;
      }
      const std::size_t q = static_cast<std::size_t>(rr * side + cc);
      const std::uint8_t other = labels.labels[q];
      if (other == 0 || (oracle_labels && other != label)) {
        out.boundary = true;
        continue;
      }
      if (done[q]) out.donors.push_back(q);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fitting loop

FitReport fit_image(const DynamicImage& img, const kinetics::InputFunction& input, std::span<const double> vmap,
                    const FitOptions& options, std::uint64_t seed) {
  const int side = img.side;
  const std::size_t npix = img.pixels();
  if (side <= 0 || img.data.size() != npix * img.frames() || img.labels.side != side) {
    throw std::invalid_argument("fit_image: image, labels and frame data disagree in size");
  }
  if (vmap.size() != npix) throw std::invalid_argument("fit_image: blood-volume map has the wrong size");
  const auto& policy = options.policy;
  policy.validate();
  if (options.solver == Solver::reg_as_tr) options.tr.validate(); else options.lm.validate();

  const kinetics::ForwardModel model(input, img.grid);
  const std::vector<double> times = img.grid.midpoints_min();
  const double tau = options.solver == Solver::reg_as_tr ? options.tr.tau : options.lm.tau;

  FitReport report;
  report.maps = empty_maps(side);
  auto& maps = report.maps;
  std::vector<std::uint8_t> good(npix, 0);  // fitted without stalling
  std::vector<double> seconds(npix, 0.0);
  const auto& labels = img.labels.labels;

  auto fit_pixel = [&](int r, int c) {
    const std::size_t p = static_cast<std::size_t>(r * side + c);
    const std::uint8_t label = labels[p];
    if (label == 0) return;
    const Eigen::VectorXd y = img.tac(p);
    if (y.isZero(0.0)) return;
    const double tau1 = policy.frame_sigma ? std::sqrt(static_cast<double>(y.size())) * *policy.frame_sigma
                                           : noise_sigma(y, times);

    const Neighbourhood hood = scan_neighbours(img.labels, good, r, c, policy.oracle_labels);
    bool boundary = hood.boundary;
    std::vector<Eigen::Vector4d> fitted;
    for (std::size_t q : hood.donors) fitted.emplace_back(maps.k[0][q], maps.k[1][q], maps.k[2][q], maps.k[3][q]);
    Eigen::Vector4d mean = Eigen::Vector4d::Zero();
    for (const auto& k : fitted) mean += k;
    if (!fitted.empty()) mean /= static_cast<double>(fitted.size());
    if (!policy.oracle_labels && fitted.size() >= 2 && mean.norm() > 0.0) {
      double spread = 0.0;
      for (const auto& k : fitted) spread += (k - mean).squaredNorm();
      const double cv = std::sqrt(spread / static_cast<double>(fitted.size() - 1)) / mean.norm();
      if (cv > policy.boundary_cv) boundary = true;
    }

    Eigen::VectorXd k0(4);
    if (policy.neighbor_init && !boundary && fitted.size() >= 2) {
      for (int i = 0; i < 4; ++i) k0[i] = std::max(mean[i], 1e-6);
    } else {
      std::mt19937_64 rng(derive_seed(seed, Stream::pixel_init, p));
      for (int i = 0; i < 4; ++i) {
        std::uniform_real_distribution<double> u(policy.prior_low[i], policy.prior_high[i]);
        k0[i] = u(rng);
      }
    }

    const double V = vmap[p];
    optim::ResidualProblem problem;
    problem.model = [&model, V](const optim::Vector& k) {
      return model.evaluate(kinetics::KineticParams::from_rates(k, V));
    };
    problem.jacobian = [&model, V](const optim::Vector& k) {
      return optim::Matrix(model.sensitivities(kinetics::KineticParams::from_rates(k, V)));
    };
    problem.data = y;
    problem.noise_level = tau1 / tau;
    const double tau2 = (boundary ? policy.tau2_boundary : policy.tau2_inner) * tau1;
    const double plateau = policy.plateau;
    const optim::ThresholdRule rule = [tau2, plateau](double current, double previous) {
      return current < tau2 && current > 0.0 && std::abs(1.0 - previous / current) < plateau;
    };

    const optim::FitResult res = options.solver == Solver::reg_as_tr
                                     ? optim::reg_as_tr(problem, k0, options.tr, rule)
                                     : optim::projected_lm(problem, k0, options.lm, rule);
    for (int i = 0; i < 4; ++i) maps.k[static_cast<std::size_t>(i)][p] = std::max(res.k[i], 0.0);
    maps.stop[p] = stop_code(res.reason);
    maps.iterations[p] = res.iterations;
    good[p] = res.reason != optim::StopReason::stalled;
    seconds[p] = res.wall_seconds;
  };

  if (policy.order == ScanOrder::raster || options.threads <= 1) {
    for (int r = 0; r < side; ++r) {
      for (int c = 0; c < side; ++c) fit_pixel(r, c);
    }
  } else {
    // Pixels with equal 2r + c never neighbour each other and see exactly
    // the neighbours a raster scan would have finished.
    const int workers = options.threads;
    for (int d = 0; d <= 3 * (side - 1); ++d) {
      std::vector<std::pair<int, int>> diag;
      for (int r = 0; r < side; ++r) {
        const int c = d - 2 * r;
        if (c >= 0 && c < side) diag.emplace_back(r, c);
      }
      if (diag.size() < 2) {
        for (auto [r, c] : diag) fit_pixel(r, c);
        continue;
      }
      std::vector<std::thread> pool;
      const std::size_t used = std::min<std::size_t>(static_cast<std::size_t>(workers), diag.size());
      for (std::size_t w = 0; w < used; ++w) {
        pool.emplace_back([&, w] {
          for (std::size_t i = w; i < diag.size(); i += used) fit_pixel(diag[i].first, diag[i].second);
        });
      }
      for (auto& t : pool) t.join();
    }
  }

  // Replace failed fits by the median of the successful ones in their region.
  for (std::uint8_t region = 1; region <= phantom::kRegionCount; ++region) {
    std::array<std::vector<double>, 4> donors;
    bool any_failed = false;
    for (std::size_t p = 0; p < npix; ++p) {
      if (labels[p] != region || maps.stop[p] == 0) continue;
      if (good[p]) {
        for (int i = 0; i < 4; ++i) donors[static_cast<std::size_t>(i)].push_back(maps.k[static_cast<std::size_t>(i)][p]);
      } else {
        any_failed = true;
      }
    }
    if (!any_failed || donors[0].empty()) continue;
    std::array<double, 4> med{};
    for (int i = 0; i < 4; ++i) med[static_cast<std::size_t>(i)] = median_of(donors[static_cast<std::size_t>(i)]);
    for (std::size_t p = 0; p < npix; ++p) {
      if (labels[p] != region || maps.stop[p] == 0 || good[p]) continue;
      for (int i = 0; i < 4; ++i) maps.k[static_cast<std::size_t>(i)][p] = med[static_cast<std::size_t>(i)];
      maps.infilled[p] = 1;
    }
  }

  for (std::size_t p = 0; p < npix; ++p) {
    if (maps.stop[p] == 0) continue;
    ++report.fitted;
    if (!good[p]) ++report.stalled;
    report.solver_seconds += seconds[p];
  }
  return report;
}

// ---------------------------------------------------------------------------
// Statistics

std::vector<RegionStat> region_stats(std::span<const ParametricMaps> maps, const LabelImage& labels,
                                     bool include_infilled) {
  for (const auto& m : maps) {
    if (m.side != labels.side) throw std::invalid_argument("region_stats: map and label sizes differ");
  }
  std::vector<RegionStat> out;
  for (int region = 1; region <= phantom::kRegionCount; ++region) {
    for (int param = 0; param < 4; ++param) {
      RegionStat s;
      s.region = region;
      s.parameter = param;
      // Sums are taken about a shift (the first value seen) so constant maps
      // give exactly their value and zero spread.
      std::optional<double> origin;
      double total = 0.0, squares = 0.0;
      std::size_t groups = 0;
      for (const auto& m : maps) {
        const auto& k = m.k[static_cast<std::size_t>(param)];
        auto used = [&](std::size_t p) { return labels.labels[p] == region && (include_infilled || !m.infilled[p]); };
        std::optional<double> shift;
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t p = 0; p < labels.size(); ++p) {
          if (!used(p)) continue;
          if (!shift) shift = k[p];
          if (!origin) origin = k[p];
          sum += k[p] - *shift;
          ++n;
        }
        if (n == 0) continue;
        const double mean_offset = sum / static_cast<double>(n);
        for (std::size_t p = 0; p < labels.size(); ++p) {
          if (!used(p)) continue;
          const double d = k[p] - *shift - mean_offset;
          squares += d * d;
          total += k[p] - *origin;
        }
        s.n += n;
        ++groups;
      }
      if (s.n > 0) {
        s.present = true;
        s.mean = *origin + total / static_cast<double>(s.n);
        s.std = s.n > groups ? std::sqrt(squares / static_cast<double>(s.n - groups)) : 0.0;
      }
      out.push_back(s);
    }
  }
  return out;
}

}  // namespace kinmap::imaging
