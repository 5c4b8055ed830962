#include "kinmap/kinetics.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace kinmap::kinetics {

bool KineticParams::valid() const {
  const bool finite = std::isfinite(k1) && std::isfinite(k2) && std::isfinite(k3) &&
                      std::isfinite(k4) && std::isfinite(V);
  return finite && k1 >= 0.0 && k2 >= 0.0 && k3 >= 0.0 && k4 >= 0.0 && V >= 0.0 && V < 1.0;
}

KineticParams KineticParams::from_rates(const Eigen::Vector4d& k, double V) {
  return {k[0], k[1], k[2], k[3], V};
}

// ---------------------------------------------------------------------------
// TimeGrid

TimeGrid::TimeGrid(std::vector<double> boundaries_s) : boundaries_s_(std::move(boundaries_s)) {
  if (boundaries_s_.size() < 2) {
    throw std::invalid_argument("TimeGrid: need at least one frame");
  }
  if (boundaries_s_.front() != 0.0) {
    throw std::invalid_argument("TimeGrid: first frame must start at t = 0");
  }
  for (std::size_t i = 1; i < boundaries_s_.size(); ++i) {
    if (!(boundaries_s_[i] > boundaries_s_[i - 1])) {
      throw std::invalid_argument("TimeGrid: frame boundaries must be strictly increasing");
    }
  }
}

TimeGrid TimeGrid::from_blocks(std::span<const std::pair<int, double>> blocks) {
  std::vector<double> b{0.0};
  for (const auto& [count, duration] : blocks) {
    for (int i = 0; i < count; ++i) {
      b.push_back(b.back() + duration);
    }
  }
  return TimeGrid(std::move(b));
}

TimeGrid TimeGrid::standard() {
  static constexpr std::pair<int, double> kBlocks[] = {{6, 10.0}, {3, 20.0},  {3, 30.0},
                                                       {4, 60.0}, {3, 150.0}, {9, 300.0}};
  return from_blocks(kBlocks);
}

double TimeGrid::midpoint_min(std::size_t i) const {
  return 0.5 * (boundaries_s_[i] + boundaries_s_[i + 1]) / 60.0;
}

std::vector<double> TimeGrid::midpoints_min() const {
  std::vector<double> m(size());
  for (std::size_t i = 0; i < size(); ++i) m[i] = midpoint_min(i);
  return m;
}

// ---------------------------------------------------------------------------
// InputFunction

InputFunction::InputFunction(std::vector<double> times_min, std::vector<double> values)
    : times_(std::move(times_min)), values_(std::move(values)) {
  if (times_.empty() || times_.size() != values_.size()) {
    throw std::invalid_argument("InputFunction: times and values must be non-empty and equal length");
  }
  if (times_.front() != 0.0) {
    throw std::invalid_argument("InputFunction: first sample must be at t = 0");
  }
  for (std::size_t i = 1; i < times_.size(); ++i) {
    if (!(times_[i] > times_[i - 1])) {
      throw std::invalid_argument("InputFunction: sample times must be strictly increasing");
    }
  }
  for (double v : values_) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument("InputFunction: values must be finite and non-negative");
    }
  }
}

double InputFunction::operator()(double t) const {
  if (t <= times_.front()) return values_.front();
  if (t >= times_.back()) return values_.back();
  const auto it = std::upper_bound(times_.begin(), times_.end(), t);
  const std::size_t j = static_cast<std::size_t>(it - times_.begin());
  const double t0 = times_[j - 1], t1 = times_[j];
  const double w = (t - t0) / (t1 - t0);
  return (1.0 - w) * values_[j - 1] + w * values_[j];
}

std::vector<double> InputFunction::at(std::span<const double> t) const {
  std::vector<double> out(t.size());
  std::transform(t.begin(), t.end(), out.begin(), [this](double x) { return (*this)(x); });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix exponential

Eigen::Matrix2d system_matrix(const KineticParams& k) {
  Eigen::Matrix2d M;
  M << -(k.k2 + k.k3), k.k4, k.k3, -k.k4;
  return M;
}

Eigen::Matrix2d expm_2x2(const Eigen::Matrix2d& M, double dt) {
  const double tr = M.trace();
  const double det = M.determinant();
  const double disc = std::max(0.0, tr * tr - 4.0 * det);
  const double w = std::sqrt(disc);
  const Eigen::Matrix2d I = Eigen::Matrix2d::Identity();
  const double scale = std::abs(tr) + w;
  if (w <= kConfluentGap * scale) {
    const double lambda = 0.5 * tr;
    return std::exp(lambda * dt) * (I + (M - lambda * I) * dt);
  }
  // Larger-magnitude root first, then the other from the product to avoid
  // cancellation when det is small.
  const double big = tr >= 0.0 ? 0.5 * (tr + w) : 0.5 * (tr - w);
  const double small = big != 0.0 ? det / big : 0.0;
  const double l1 = std::max(big, small), l2 = std::min(big, small);
  return (std::exp(l1 * dt) * (M - l2 * I) - std::exp(l2 * dt) * (M - l1 * I)) / (l1 - l2);
}

std::array<double, 3> exponential_moments(double lambda, double h) {
  const double x = lambda * h;
  if (std::abs(x) < 0.5) {
    // E_m = h^{m+1} sum_j x^j / (j! (m + 1 + j))
    std::array<double, 3> s{0.0, 0.0, 0.0};
    double term = 1.0;  // x^j / j!
    for (int j = 0; j < 30; ++j) {
      for (int m = 0; m < 3; ++m) s[m] += term / (m + 1 + j);
      term *= x / (j + 1);
    }
    return {h * s[0], h * h * s[1], h * h * h * s[2]};
  }
  const double ex = std::exp(x);
  const double e0 = std::expm1(x) / lambda;
  const double e1 = (h * ex - e0) / lambda;
  const double e2 = (h * h * ex - 2.0 * e1) / lambda;
  return {e0, e1, e2};
}

// ---------------------------------------------------------------------------
// ForwardModel

namespace {

struct Spectrum {
  double s;       // k2 + k3 + k4 = -trace(M)
  double w;       // lambda1 - lambda2 >= 0
  double l1, l2;  // lambda1 >= lambda2, both <= 0
  bool confluent;
};

Spectrum spectrum(const KineticParams& k) {
  Spectrum sp{};
  sp.s = k.k2 + k.k3 + k.k4;
  const double prod = k.k2 * k.k4;
  sp.w = std::sqrt(std::max(0.0, sp.s * sp.s - 4.0 * prod));
  sp.l2 = -0.5 * (sp.s + sp.w);
  sp.l1 = sp.l2 != 0.0 ? prod / sp.l2 : 0.0;
  sp.confluent = sp.w <= kConfluentGap * sp.s || sp.s == 0.0;
  return sp;
}

}  // namespace

ForwardModel::ForwardModel(InputFunction input, TimeGrid grid)
    : input_(std::move(input)), grid_(std::move(grid)) {
  const std::vector<double> mids = grid_.midpoints_min();
  std::vector<double> knots;
  for (double t : input_.times()) {
    if (t < mids.back()) knots.push_back(t);
  }
  knots.insert(knots.end(), mids.begin(), mids.end());
  std::sort(knots.begin(), knots.end());
  // Merge knots closer than a rounding error; frame midpoints win.
  std::vector<double> merged;
  for (double t : knots) {
    if (merged.empty() || t - merged.back() > 1e-12 * std::max(1.0, t)) {
      merged.push_back(t);
    } else if (std::find(mids.begin(), mids.end(), t) != mids.end()) {
      merged.back() = t;
    }
  }
  if (merged.front() != 0.0) merged.insert(merged.begin(), 0.0);

  std::size_t next_frame = 0;
  for (std::size_t i = 1; i < merged.size(); ++i) {
    const double a = merged[i - 1], b = merged[i];
    Segment seg{b - a, input_(a), (input_(b) - input_(a)) / (b - a), -1};
    if (next_frame < mids.size() && b == mids[next_frame]) {
      seg.frame = static_cast<int>(next_frame++);
    }
    segments_.push_back(seg);
  }
  if (next_frame != mids.size()) {
    throw std::logic_error("ForwardModel: failed to align frame midpoints with the segment schedule");
  }
  blood_.resize(static_cast<Eigen::Index>(mids.size()));
  for (std::size_t i = 0; i < mids.size(); ++i) blood_[static_cast<Eigen::Index>(i)] = input_(mids[i]);
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> ForwardModel::exponential_convolution(double lambda) const {
  const auto n = static_cast<Eigen::Index>(frames());
  Eigen::VectorXd g0(n), g1(n);
  double G0 = 0.0, G1 = 0.0;
  for (const Segment& seg : segments_) {
    const auto [e0, e1, e2] = exponential_moments(lambda, seg.h);
    const double decay = std::exp(lambda * seg.h);
    // C_b(t + h - rho) = (c + slope h) - slope rho for rho in [0, h]
    const double head = seg.c + seg.slope * seg.h;
    const double G0_next = decay * G0 + head * e0 - seg.slope * e1;
    G1 = decay * (G1 + seg.h * G0) + head * e1 - seg.slope * e2;
    G0 = G0_next;
    if (seg.frame >= 0) {
      g0[seg.frame] = G0;
      g1[seg.frame] = G1;
    }
  }
  return {g0, g1};
}

CompartmentCurve ForwardModel::solve(const KineticParams& k) const {
  const Spectrum sp = spectrum(k);
  const double a11 = -(k.k2 + k.k3);
  CompartmentCurve c;
  if (sp.confluent) {
    // exp(Ms) e1 = e^{ls} (e1 + s (M - l I) e1)
    const double l = -0.5 * sp.s;
    const auto [g0, g1] = exponential_convolution(l);
    c.free = k.k1 * (g0 + (a11 - l) * g1);
    c.metabolized = k.k1 * k.k3 * g1;
    return c;
  }
  const auto [g0_1, unused1] = exponential_convolution(sp.l1);
  const auto [g0_2, unused2] = exponential_convolution(sp.l2);
  // exp(Ms) = (e^{l1 s}(M - l2 I) - e^{l2 s}(M - l1 I)) / (l1 - l2)
  c.free = k.k1 * ((a11 - sp.l2) * g0_1 - (a11 - sp.l1) * g0_2) / sp.w;
  c.metabolized = k.k1 * k.k3 * (g0_1 - g0_2) / sp.w;
  return c;
}

ModelCurve ForwardModel::measure(const CompartmentCurve& c, const KineticParams& k) const {
  return (1.0 - k.V) * (c.free + c.metabolized) + k.V * blood_;
}

ModelCurve ForwardModel::evaluate(const KineticParams& k) const { return measure(solve(k), k); }

Eigen::MatrixXd ForwardModel::sensitivities(const KineticParams& k) const {
  const Spectrum sp = spectrum(k);
  // The spectral chain rule loses ~eps/gap^2 near coincident eigenvalues.
  if (sp.s == 0.0 || sp.w <= 1e-4 * sp.s) return sensitivities_augmented(k);

  const auto n = static_cast<Eigen::Index>(frames());
  const auto [G1v, G1d] = exponential_convolution(sp.l1);
  const auto [G2v, G2d] = exponential_convolution(sp.l2);
  const double w = sp.w;
  const double a = sp.l1 + k.k2;
  const double b = sp.l2 + k.k2;
  // Total tissue concentration per unit k1.
  const Eigen::VectorXd H = (a * G2v - b * G1v) / w;

  Eigen::MatrixXd J(n, 4);
  const double scale = 1.0 - k.V;
  J.col(0) = scale * H;
  const double dprod[3] = {k.k4, 0.0, k.k2};  // d(k2 k4)/dk_i, i = 2..4
  for (int i = 0; i < 3; ++i) {
    const double dw = (sp.s - 2.0 * dprod[i]) / w;
    const double dl1 = 0.5 * (-1.0 + dw);
    const double dl2 = 0.5 * (-1.0 - dw);
    const double da = dl1 + (i == 0 ? 1.0 : 0.0);
    const double db = dl2 + (i == 0 ? 1.0 : 0.0);
    const Eigen::VectorXd dH = (da * G2v + a * dl2 * G2d - db * G1v - b * dl1 * G1d - dw * H) / w;
    J.col(i + 1) = scale * k.k1 * dH;
  }
  return J;
}

Eigen::MatrixXd ForwardModel::sensitivities_augmented(const KineticParams& k) const {
  using Mat10 = Eigen::Matrix<double, 10, 10>;
  using Vec8 = Eigen::Matrix<double, 8, 1>;
  const Eigen::Matrix2d M = system_matrix(k);
  Eigen::Matrix2d dM[3];
  dM[0] << -1, 0, 0, 0;   // d/dk2
  dM[1] << -1, 0, 1, 0;   // d/dk3
  dM[2] << 0, 1, 0, -1;   // d/dk4

  // State [C; S2; S3; S4] for unit k1, augmented with the forcing ramp.
  Mat10 A = Mat10::Zero();
  for (int b = 0; b < 4; ++b) A.block<2, 2>(2 * b, 2 * b) = M;
  for (int i = 0; i < 3; ++i) A.block<2, 2>(2 * (i + 1), 0) = dM[i];
  A(0, 8) = 1.0;  // forcing e1 * phi
  A(8, 9) = 1.0;  // phi' = psi

  std::map<double, Mat10> cache;
  const auto n = static_cast<Eigen::Index>(frames());
  Eigen::MatrixXd out(n, 4);
  Vec8 x = Vec8::Zero();
  for (const Segment& seg : segments_) {
    auto it = cache.find(seg.h);
    if (it == cache.end()) it = cache.emplace(seg.h, Mat10((A * seg.h).exp())).first;
    const Mat10& E = it->second;
    // Column 8 integrates unit forcing, column 9 integrates the ramp r.
    x = E.block<8, 8>(0, 0) * x + (seg.c * E.block<8, 1>(0, 8) + seg.slope * E.block<8, 1>(0, 9));
    if (seg.frame >= 0) {
      const Eigen::Index f = seg.frame;
      out(f, 0) = x[0] + x[1];
      for (int i = 0; i < 3; ++i) out(f, i + 1) = k.k1 * (x[2 * (i + 1)] + x[2 * (i + 1) + 1]);
    }
  }
  return (1.0 - k.V) * out;
}

// ---------------------------------------------------------------------------
// Free-function conveniences

CompartmentCurve solve_forward(const KineticParams& k, const InputFunction& input, const TimeGrid& grid) {
  return ForwardModel(input, grid).solve(k);
}

ModelCurve measure(const CompartmentCurve& c, const KineticParams& k, const InputFunction& input,
                   const TimeGrid& grid) {
  const std::vector<double> mids = grid.midpoints_min();
  const std::vector<double> cb = input.at(mids);
  const Eigen::Map<const Eigen::VectorXd> blood(cb.data(), static_cast<Eigen::Index>(cb.size()));
  return (1.0 - k.V) * (c.free + c.metabolized) + k.V * blood;
}

Eigen::MatrixXd sensitivities(const KineticParams& k, const InputFunction& input, const TimeGrid& grid) {
  return ForwardModel(input, grid).sensitivities(k);
}

}  // namespace kinmap::kinetics
