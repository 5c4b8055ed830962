#include "doctest.h"
#include "oracles.hpp"

#include "kinmap/kinetics.hpp"
#include "kinmap/phantom.hpp"

#include <random>

using namespace kinmap::kinetics;
using kinmap::phantom::reference_kinetics;

namespace {

InputFunction simulated_if() {
  const TimeGrid grid = TimeGrid::standard();
  const auto times = kinmap::phantom::default_if_times(grid);
  return kinmap::phantom::input_function(350.0, 12.7, {}, times);
}

InputFunction constant_if(double c) {
  // C_b(0) = 0 then a very fast rise; a true constant needs the t = 0 sample.
  return InputFunction({0.0, 60.0}, {c, c});
}

// Jacobian error normalized per column by the largest reference entry. A
// column that vanishes identically is measured against the whole matrix.
double column_rel_err(const Eigen::MatrixXd& J, const Eigen::MatrixXd& ref) {
  double worst = 0.0;
  const double floor = 1e-6 * ref.cwiseAbs().maxCoeff();
  for (Eigen::Index c = 0; c < J.cols(); ++c) {
    const double scale = std::max(ref.col(c).cwiseAbs().maxCoeff(), floor);
    worst = std::max(worst, (J.col(c) - ref.col(c)).cwiseAbs().maxCoeff() / scale);
  }
  return worst;
}

}  // namespace

TEST_CASE("default time grid has the 28-frame protocol") {
  const TimeGrid g = TimeGrid::standard();
  CHECK(g.size() == 28);
  CHECK(g.start_s(0) == 0.0);
  CHECK(g.end_s(27) == 3600.0);
  CHECK(g.end_s(5) == 60.0);
  CHECK(g.end_s(8) == 120.0);
  CHECK(g.midpoint_min(0) == doctest::Approx(5.0 / 60.0));
  CHECK_THROWS_AS(TimeGrid({5.0, 10.0}), std::invalid_argument);
  CHECK_THROWS_AS(TimeGrid({0.0, 10.0, 10.0}), std::invalid_argument);
}

TEST_CASE("system matrix") {
  const auto& t1 = reference_kinetics();
  Eigen::Matrix2d M = system_matrix(t1[0]);
  CHECK(M(0, 0) == doctest::Approx(-0.35));
  CHECK(M(0, 1) == doctest::Approx(0.02));
  CHECK(M(1, 0) == doctest::Approx(0.10));
  CHECK(M(1, 1) == doctest::Approx(-0.02));

  M = system_matrix(t1[1]);
  CHECK(M(0, 0) == doctest::Approx(-0.20));
  CHECK(M(1, 0) == doctest::Approx(0.05));

  CHECK(system_matrix({0.3, 0, 0, 0, 0}).isZero());
}

TEST_CASE("expm_2x2 closed form") {
  CHECK(expm_2x2(Eigen::Matrix2d::Zero(), 3.7).isApprox(Eigen::Matrix2d::Identity()));

  Eigen::Matrix2d D = Eigen::Vector2d(-0.3, -1.1).asDiagonal();
  Eigen::Matrix2d E = expm_2x2(D, 2.0);
  CHECK(E(0, 0) == doctest::Approx(std::exp(-0.6)).epsilon(1e-14));
  CHECK(E(1, 1) == doctest::Approx(std::exp(-2.2)).epsilon(1e-14));
  CHECK(E(0, 1) == 0.0);

  SUBCASE("matches Taylor scaling-and-squaring") {
    for (const auto& k : reference_kinetics()) {
      const Eigen::Matrix2d M = system_matrix(k);
      const Eigen::MatrixXd ref = oracle::expm_taylor(M);
      CHECK((expm_2x2(M, 1.0) - ref).norm() / ref.norm() < 1e-10);
    }
  }

  SUBCASE("confluent branch") {
    // k3 = 0 and k2 = k4 give a double eigenvalue.
    const KineticParams k{0.1, 0.05, 0.0, 0.05, 0.0};
    const Eigen::Matrix2d M = system_matrix(k);
    const Eigen::MatrixXd ref = oracle::expm_taylor(M * 4.0);
    CHECK((expm_2x2(M, 4.0) - ref).norm() / ref.norm() < 1e-12);

    // Continuity across the switch.
    for (double dk : {1e-9, -1e-9}) {
      KineticParams kp = k;
      kp.k4 += dk;
      const Eigen::Matrix2d A = expm_2x2(system_matrix(kp), 4.0);
      CHECK((A - expm_2x2(M, 4.0)).norm() / A.norm() < 1e-6);
    }
  }
}

TEST_CASE("exponential moments agree on both sides of the series switch") {
  for (double lambda : {-0.3, -0.125, 0.0, 1e-9}) {
    const double h = 0.5 / std::max(std::abs(lambda), 1e-3);
    const auto a = exponential_moments(lambda, std::min(h, 3.9999));
    // Composite Simpson as a sanity reference.
    const double H = std::min(h, 3.9999);
    const int n = 2000;
    std::array<double, 3> ref{0, 0, 0};
    for (int i = 0; i <= n; ++i) {
      const double r = H * i / n;
      const double w = (i == 0 || i == n) ? 1 : (i % 2 ? 4 : 2);
      for (int m = 0; m < 3; ++m) ref[m] += w * std::pow(r, m) * std::exp(lambda * r);
    }
    for (int m = 0; m < 3; ++m) CHECK(a[m] == doctest::Approx(ref[m] * H / (3.0 * n)).epsilon(1e-10));
  }
}

TEST_CASE("forward solution trivial cases") {
  const TimeGrid grid = TimeGrid::standard();
  const InputFunction cb = simulated_if();

  SUBCASE("k1 = 0 gives zero") {
    const CompartmentCurve c = solve_forward({0.0, 0.2, 0.1, 0.01, 0.05}, cb, grid);
    CHECK(c.free.isZero());
    CHECK(c.metabolized.isZero());
  }
  SUBCASE("M = 0 with constant input is linear in time") {
    const double level = 3.0;
    const KineticParams k{0.2, 0, 0, 0, 0};
    const CompartmentCurve c = solve_forward(k, constant_if(level), grid);
    const auto mids = grid.midpoints_min();
    for (std::size_t i = 0; i < mids.size(); ++i) {
      CHECK(c.free[static_cast<Eigen::Index>(i)] == doctest::Approx(0.2 * level * mids[i]).epsilon(1e-12));
      CHECK(c.metabolized[static_cast<Eigen::Index>(i)] == 0.0);
    }
  }
  SUBCASE("rejects grids not starting at zero") {
    CHECK_THROWS_AS(solve_forward(reference_kinetics()[0], cb, TimeGrid({1.0, 2.0})), std::invalid_argument);
  }
}

TEST_CASE("measure") {
  const TimeGrid grid = TimeGrid::standard();
  const InputFunction cb = simulated_if();
  const auto mids = grid.midpoints_min();

  KineticParams k = reference_kinetics()[1];
  k.V = 0.0;
  const CompartmentCurve c = solve_forward(k, cb, grid);
  CHECK((measure(c, k, cb, grid) - (c.free + c.metabolized)).norm() == doctest::Approx(0.0));

  CompartmentCurve zero{Eigen::VectorXd::Zero(28), Eigen::VectorXd::Zero(28)};
  k.V = 0.05;
  const ModelCurve m = measure(zero, k, cb, grid);
  for (std::size_t i = 0; i < mids.size(); ++i) {
    CHECK(m[static_cast<Eigen::Index>(i)] == doctest::Approx(0.05 * cb(mids[i])));
  }
}

TEST_CASE("closed form agrees with RK4 integration for every region") {
  const TimeGrid grid = TimeGrid::standard();
  const InputFunction cb = simulated_if();
  const auto mids = grid.midpoints_min();
  const ForwardModel model(cb, grid);
  for (const auto& k : reference_kinetics()) {
    const Eigen::VectorXd got = model.evaluate(k);
    const std::vector<double> ref = oracle::rk4_measured(k, cb, mids);
    const Eigen::Map<const Eigen::VectorXd> want(ref.data(), static_cast<Eigen::Index>(ref.size()));
    CHECK(oracle::max_rel_err(got, want) < 1e-6);
  }
}

TEST_CASE("forward model invariants") {
  const TimeGrid grid = TimeGrid::standard();
  const ForwardModel model(simulated_if(), grid);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 0.5);
  for (int trial = 0; trial < 200; ++trial) {
    const KineticParams k{u(rng), u(rng), u(rng), u(rng), 0.1 * u(rng)};
    const CompartmentCurve c = model.solve(k);
    CHECK(c.free.minCoeff() >= -1e-12);
    CHECK(c.metabolized.minCoeff() >= -1e-12);
    const Eigen::VectorXd F = model.measure(c, k);
    CHECK(F.minCoeff() >= -1e-12);

    // Homogeneity in k1.
    KineticParams k2 = k;
    k2.k1 *= 2.5;
    const Eigen::VectorXd lhs = model.evaluate(k2) - k.V * model.blood();
    const Eigen::VectorXd rhs = 2.5 * (F - k.V * model.blood());
    CHECK((lhs - rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
  }
}

TEST_CASE("sensitivities") {
  const TimeGrid grid = TimeGrid::standard();
  const ForwardModel model(simulated_if(), grid);

  SUBCASE("first column is the k1-normalized tissue curve") {
    const KineticParams k = reference_kinetics()[2];
    const Eigen::MatrixXd J = model.sensitivities(k);
    const Eigen::VectorXd tissue = (model.evaluate(k) - k.V * model.blood()) / k.k1;
    CHECK((J.col(0) - tissue).norm() <= 1e-12 * tissue.norm());
  }

  SUBCASE("k2 = k3 = k4 = 0 with constant input") {
    const ForwardModel flat(constant_if(2.0), grid);
    const KineticParams k{0.0, 0.0, 0.0, 0.0, 0.04};
    const Eigen::MatrixXd J = flat.sensitivities(k);
    const auto mids = grid.midpoints_min();
    for (std::size_t i = 0; i < mids.size(); ++i) {
      CHECK(J(static_cast<Eigen::Index>(i), 0) == doctest::Approx(0.96 * 2.0 * mids[i]).epsilon(1e-12));
    }
  }

  auto fd_of = [&](const ForwardModel& m, double V) {
    return [&m, V](const Eigen::VectorXd& x) { return m.evaluate(KineticParams::from_rates(x, V)); };
  };

  SUBCASE("matches central differences at region 4") {
    const KineticParams k = reference_kinetics()[3];
    const Eigen::MatrixXd ref = oracle::central_jacobian(fd_of(model, k.V), k.rates());
    CHECK(column_rel_err(model.sensitivities(k), ref) < 1e-4);
  }

  SUBCASE("matches central differences at random feasible points") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.001, 0.5);
    for (int trial = 0; trial < 100; ++trial) {
      const KineticParams k{u(rng), u(rng), u(rng), u(rng), 0.05};
      const Eigen::MatrixXd ref = oracle::central_jacobian(fd_of(model, k.V), k.rates());
      CHECK(column_rel_err(model.sensitivities(k), ref) < 1e-4);
    }
  }

  SUBCASE("augmented propagation agrees with the spectral formula") {
    for (const auto& k : reference_kinetics()) {
      const Eigen::MatrixXd a = model.sensitivities(k);
      const Eigen::MatrixXd b = model.sensitivities_augmented(k);
      CHECK(column_rel_err(b, a) < 1e-10);
    }
  }

  SUBCASE("degenerate eigenvalues") {
    // k3 = 0 and k2 = k4; k3 cannot be stepped below zero, so its column uses
    // a second-order one-sided difference.
    const KineticParams k{0.1, 0.05, 0.0, 0.05, 0.03};
    const auto f = fd_of(model, k.V);
    Eigen::MatrixXd ref = oracle::central_jacobian(f, k.rates());
    const double h = 1e-6;
    Eigen::Vector4d x1 = k.rates(), x2 = k.rates();
    x1[2] += h;
    x2[2] += 2 * h;
    ref.col(2) = (-3.0 * f(k.rates()) + 4.0 * f(x1) - f(x2)) / (2.0 * h);
    CHECK(column_rel_err(model.sensitivities(k), ref) < 1e-4);

    // The nearby distinct-eigenvalue point uses the spectral formula.
    KineticParams near = k;
    near.k3 = 1e-9;
    CHECK(column_rel_err(model.sensitivities(near).leftCols(3), model.sensitivities(k).leftCols(3)) < 1e-4);
  }
}
