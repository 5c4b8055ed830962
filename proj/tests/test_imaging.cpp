#include "kinmap/imaging.hpp"
#include "kinmap/phantom.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

using namespace kinmap::imaging;
namespace ph = kinmap::phantom;
namespace kin = kinmap::kinetics;

namespace {

ph::LabelImage uniform_labels(int side, std::uint8_t label) {
  ph::LabelImage l;
  l.side = side;
  l.labels.assign(static_cast<std::size_t>(side) * side, label);
  return l;
}

kin::InputFunction standard_input(const kin::TimeGrid& grid) {
  const auto times = ph::default_if_times(grid);
  return ph::input_function(350.0, 12.7, ph::IfShape{}, times);
}

struct Scene {
  ph::GroundTruth gt;
  kin::InputFunction input;
  ph::DynamicImage img;
};

Scene scene(const ph::LabelImage& labels) {
  ph::GroundTruth gt;
  gt.labels = labels;
  const auto grid = kin::TimeGrid::standard();
  auto input = standard_input(grid);
  auto img = ph::simulate_dynamic(gt, input, grid);
  return {gt, input, img};
}

ph::DynamicImage frames_of(int side, std::size_t frames, double fill) {
  ph::DynamicImage img;
  img.side = side;
  img.labels = uniform_labels(side, 1);
  img.data.assign(img.pixels() * frames, fill);
  img.grid = kin::TimeGrid::standard();
  return img;
}

}  // namespace

TEST_CASE("Gaussian smoothing") {
  const std::size_t frames = kin::TimeGrid::standard().size();

  SUBCASE("constant image is unchanged") {
    const auto img = frames_of(9, frames, 3.25);
    const auto out = deblur_gaussian(img);
    for (double v : out.data) CHECK(std::abs(v - 3.25) < 1e-12);
  }

  SUBCASE("impulse gives the kernel") {
    auto img = frames_of(9, frames, 0.0);
    img.data[4 * 9 + 4] = 1.0;
    const auto out = deblur_gaussian(img, 1.0, 3);
    const double e = std::exp(-0.5), s = 1.0 + 2.0 * e;
    double total = 0.0;
    for (int r = 0; r < 9; ++r) {
      for (int c = 0; c < 9; ++c) {
        const double v = out.frame(0)[static_cast<std::size_t>(r * 9 + c)];
        total += v;
        const int dr = std::abs(r - 4), dc = std::abs(c - 4);
        const double want = (dr <= 1 && dc <= 1) ? (dr ? e : 1.0) * (dc ? e : 1.0) / (s * s) : 0.0;
        CHECK(std::abs(v - want) < 1e-15);
      }
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
    // Other frames stay zero.
    for (double v : out.frame(1)) CHECK(v == 0.0);
  }

  SUBCASE("corner pixel reflects about the edge") {
    auto img = frames_of(5, frames, 0.0);
    img.data[0] = 1.0;
    const auto out = deblur_gaussian(img, 1.0, 3);
    const double s = 1.0 + 2.0 * std::exp(-0.5);
    // The mirrored copies of the corner fall back onto the corner.
    const double e = std::exp(-0.5);
    CHECK(out.data[0] == doctest::Approx((1.0 + e) * (1.0 + e) / (s * s)).epsilon(1e-14));
    const double sum = std::accumulate(out.data.begin(), out.data.begin() + 25, 0.0);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-14));
  }

  SUBCASE("bad settings") {
    const auto img = frames_of(5, frames, 1.0);
    CHECK_THROWS_AS(deblur_gaussian(img, 1.0, 4), std::invalid_argument);
    CHECK_THROWS_AS(deblur_gaussian(img, 0.0, 3), std::invalid_argument);
  }
}

TEST_CASE("per-pixel noise level") {
  const auto grid = kin::TimeGrid::standard();
  const auto times = grid.midpoints_min();
  const auto input = standard_input(grid);
  const kin::ForwardModel model(input, grid);
  const auto& table = ph::reference_kinetics();

  SUBCASE("smooth curves give a small level") {
    for (const auto& k : table) {
      const Eigen::VectorXd tac = model.evaluate(k);
      CHECK(noise_sigma(tac, times) < 0.01 * tac.norm());
    }
  }

  SUBCASE("known Gaussian noise is recovered") {
    const Eigen::VectorXd tac = model.evaluate(table[1]);
    for (double sigma : {0.05, 0.2, 1.0}) {
      std::mt19937_64 rng(7);
      std::normal_distribution<double> n(0.0, sigma);
      double sum = 0.0;
      const int trials = 1000;
      for (int t = 0; t < trials; ++t) {
        Eigen::VectorXd y = tac;
        for (Eigen::Index i = 0; i < y.size(); ++i) y[i] += n(rng);
        sum += frame_noise(y, times);
      }
      const double mean = sum / trials;
      CHECK(std::abs(mean - sigma) < 0.15 * sigma);
      // tau_1 is the residual-norm scale.
      Eigen::VectorXd y = tac;
      for (Eigen::Index i = 0; i < y.size(); ++i) y[i] += n(rng);
      CHECK(noise_sigma(y, times) == doctest::Approx(std::sqrt(28.0) * frame_noise(y, times)));
    }
  }

  SUBCASE("zero curve and bad input") {
    CHECK(noise_sigma(Eigen::VectorXd::Zero(28), times) == 0.0);
    CHECK_THROWS_AS(noise_sigma(Eigen::VectorXd::Ones(3), std::span(times).first(3)), std::invalid_argument);
    CHECK_THROWS_AS(noise_sigma(Eigen::VectorXd::Ones(27), times), std::invalid_argument);
  }
}

TEST_CASE("solver names and stop codes") {
  CHECK(parse_solver(to_string(Solver::reg_as_tr)) == Solver::reg_as_tr);
  CHECK(parse_solver(to_string(Solver::projected_lm)) == Solver::projected_lm);
  CHECK_FALSE(parse_solver("gauss-newton").has_value());
  for (int r = 0; r <= static_cast<int>(kinmap::optim::StopReason::stalled); ++r) {
    const auto reason = static_cast<kinmap::optim::StopReason>(r);
    CHECK(stop_from_code(stop_code(reason)) == reason);
  }
  CHECK_FALSE(stop_from_code(0).has_value());
  CHECK_FALSE(stop_from_code(99).has_value());
}

TEST_CASE("policy validation") {
  PixelFitPolicy p;
  CHECK_NOTHROW(p.validate());
  p.tau2_inner = 0.5;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {};
  p.prior_low[2] = 0.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {};
  p.prior_high[0] = p.prior_low[0];
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {};
  p.frame_sigma = -1.0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("neighbourhood scan") {
  // Left half region 2, right half region 3, first column background.
  ph::LabelImage labels = uniform_labels(8, 2);
  for (int r = 0; r < 8; ++r) {
    for (int c = 0; c < 8; ++c) {
      labels.labels[static_cast<std::size_t>(r * 8 + c)] = c == 0 ? 0 : (c < 4 ? 2 : 3);
    }
  }
  std::vector<std::uint8_t> done(labels.size(), 1);

  SUBCASE("oracle mode never crosses a region border") {
    for (int r = 0; r < 8; ++r) {
      for (int c = 1; c < 8; ++c) {
        const auto hood = scan_neighbours(labels, done, r, c, true);
        for (std::size_t q : hood.donors) CHECK(labels.labels[q] == labels.at(r, c));
        if (c == 3 || c == 4) CHECK(hood.boundary);
      }
    }
  }

  SUBCASE("production mode ignores regions") {
    const auto hood = scan_neighbours(labels, done, 4, 4, false);
    CHECK_FALSE(hood.boundary);
    CHECK(hood.donors.size() == 8);
    CHECK(scan_neighbours(labels, done, 4, 1, false).boundary);  // background to the left
    CHECK(scan_neighbours(labels, done, 0, 5, false).boundary);  // image edge
  }

  SUBCASE("only finished pixels donate") {
    std::fill(done.begin(), done.end(), 0);
    done[3 * 8 + 5] = 1;
    const auto hood = scan_neighbours(labels, done, 4, 5, false);
    REQUIRE(hood.donors.size() == 1);
    CHECK(hood.donors[0] == 3 * 8 + 5);
  }
}

TEST_CASE("noise-free single-region image") {
  const auto s = scene(uniform_labels(16, 4));
  const auto vmap = s.gt.blood_volume_map();
  const auto truth = ph::reference_kinetics()[3].rates();

  for (Solver solver : {Solver::reg_as_tr, Solver::projected_lm}) {
    CAPTURE(to_string(solver));
    FitOptions opt;
    opt.solver = solver;
    opt.policy.frame_sigma = 0.0;
    const auto rep = fit_image(s.img, s.input, vmap, opt, 11);
    CHECK(rep.fitted == 256);
    CHECK(rep.stalled == 0);
    for (std::size_t p = 0; p < 256; ++p) {
      CHECK(rep.maps.stop[p] != 0);
      for (int i = 0; i < 4; ++i) {
        CHECK(std::abs(rep.maps.k[static_cast<std::size_t>(i)][p] - truth[i]) < 0.01 * truth[i]);
      }
    }
  }
}

TEST_CASE("background and determinism") {
  SUBCASE("background-only image gives zero maps") {
    const auto s = scene(uniform_labels(8, 0));
    const auto rep = fit_image(s.img, s.input, s.gt.blood_volume_map(), FitOptions{}, 1);
    CHECK(rep.fitted == 0);
    for (const auto& k : rep.maps.k) {
      for (double v : k) CHECK(v == 0.0);
    }
    for (auto code : rep.maps.stop) CHECK(code == 0);
  }

  SUBCASE("phantom slice with noise") {
    auto labels = ph::make_phantom(32);
    const auto s = scene(labels);
    ph::NoiseSettings noise;
    const auto noisy = deblur_gaussian(ph::project_and_reconstruct(s.img, noise, 5, 0).image);
    const auto vmap = s.gt.blood_volume_map();

    FitOptions opt;
    const auto a = fit_image(noisy, s.input, vmap, opt, 21);
    const auto b = fit_image(noisy, s.input, vmap, opt, 21);
    CHECK(a.maps == b.maps);

    // Wavefront scheduling reproduces the raster result exactly.
    FitOptions wave = opt;
    wave.policy.order = ScanOrder::wavefront;
    wave.threads = 3;
    CHECK(fit_image(noisy, s.input, vmap, wave, 21).maps == a.maps);

    // Maps are non-negative and vanish on the background.
    for (std::size_t p = 0; p < labels.size(); ++p) {
      for (const auto& k : a.maps.k) {
        CHECK(k[p] >= 0.0);
        if (labels.labels[p] == 0) CHECK(k[p] == 0.0);
      }
      CHECK((a.maps.stop[p] == 0) == (labels.labels[p] == 0));
    }

    // A different seed only moves randomly initialized pixels.
    const auto c = fit_image(noisy, s.input, vmap, opt, 22);
    CHECK_FALSE(c.maps == a.maps);

    // The baseline solver runs through the same loop.
    FitOptions lm = opt;
    lm.solver = Solver::projected_lm;
    const auto d = fit_image(noisy, s.input, vmap, lm, 21);
    CHECK(d.fitted == a.fitted);
  }

  SUBCASE("size mismatches throw") {
    const auto s = scene(uniform_labels(8, 1));
    std::vector<double> short_vmap(10, 0.05);
    CHECK_THROWS_AS(fit_image(s.img, s.input, short_vmap, FitOptions{}, 1), std::invalid_argument);
  }
}

TEST_CASE("region statistics") {
  SUBCASE("ground truth gives the table exactly") {
    const auto labels = ph::make_phantom(64);
    ph::GroundTruth gt;
    gt.labels = labels;
    const auto m = truth_maps(gt);
    const std::vector<ParametricMaps> maps{m};
    const auto stats = region_stats(maps, labels);
    REQUIRE(stats.size() == 16);
    for (const auto& s : stats) {
      const auto truth = gt.regions[static_cast<std::size_t>(s.region - 1)].rates();
      CHECK(s.present);
      CHECK(s.n == labels.count(static_cast<std::uint8_t>(s.region)));
      CHECK(s.mean == doctest::Approx(truth[s.parameter]).epsilon(1e-14));
      CHECK(s.std < 1e-15);
    }
  }

  ph::LabelImage labels = uniform_labels(2, 0);
  labels.labels = {1, 1, 0, 0};
  ParametricMaps m;
  m.side = 2;
  for (auto& k : m.k) k = {0.1, 0.3, 0.0, 0.0};
  m.stop = {1, 1, 0, 0};
  m.iterations = {1, 1, 0, 0};
  m.infilled = {0, 0, 0, 0};

  SUBCASE("two-pixel region") {
    const std::vector<ParametricMaps> maps{m};
    const auto stats = region_stats(maps, labels);
    CHECK(stats[0].mean == doctest::Approx(0.2));
    CHECK(stats[0].std == doctest::Approx(std::sqrt(0.02)));
    CHECK(stats[0].n == 2);
    // Regions 2..4 are empty and reported absent.
    for (std::size_t i = 4; i < 16; ++i) {
      CHECK_FALSE(stats[i].present);
      CHECK(stats[i].n == 0);
      CHECK(stats[i].mean == 0.0);
    }
  }

  SUBCASE("identical replicates pool to the single-map value") {
    const std::vector<ParametricMaps> maps{m, m, m};
    const auto stats = region_stats(maps, labels);
    CHECK(stats[0].mean == doctest::Approx(0.2));
    CHECK(stats[0].std == doctest::Approx(std::sqrt(0.02)));
    CHECK(stats[0].n == 6);
  }

  SUBCASE("replicate offsets do not inflate the pooled spread") {
    ParametricMaps shifted = m;
    for (auto& k : shifted.k) k = {0.5, 0.7, 0.0, 0.0};
    const std::vector<ParametricMaps> maps{m, shifted};
    const auto stats = region_stats(maps, labels);
    CHECK(stats[0].mean == doctest::Approx(0.4));
    CHECK(stats[0].std == doctest::Approx(std::sqrt(0.02)));
  }

  SUBCASE("infilled pixels are skipped by default") {
    ParametricMaps f = m;
    f.infilled = {0, 1, 0, 0};
    const std::vector<ParametricMaps> maps{f};
    CHECK(region_stats(maps, labels)[0].n == 1);
    CHECK(region_stats(maps, labels)[0].mean == doctest::Approx(0.1));
    CHECK(region_stats(maps, labels, true)[0].n == 2);
  }

  SUBCASE("shape mismatch throws") {
    ParametricMaps big = m;
    big.side = 3;
    const std::vector<ParametricMaps> maps{big};
    CHECK_THROWS_AS(region_stats(maps, labels), std::invalid_argument);
  }
}
