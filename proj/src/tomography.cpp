#include "kinmap/tomography.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <stdexcept>

namespace kinmap::phantom {

std::vector<double> default_angles(int count) {
  if (count <= 0) throw std::invalid_argument("default_angles: count must be positive");
  std::vector<double> a(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) a[static_cast<std::size_t>(i)] = std::numbers::pi * i / count;
  return a;
}

int detector_bins(int side) {
  const int n = static_cast<int>(std::ceil(side * std::numbers::sqrt2)) + 2;
  return n % 2 == 1 ? n : n + 1;
}

namespace {

double bilinear(std::span<const double> img, int side, double row, double col) {
  const double r0 = std::floor(row), c0 = std::floor(col);
  const int ri = static_cast<int>(r0), ci = static_cast<int>(c0);
  const double fr = row - r0, fc = col - c0;
  auto px = [&](int r, int c) {
    return (r < 0 || c < 0 || r >= side || c >= side) ? 0.0
                                                       : img[static_cast<std::size_t>(r * side + c)];
  };
  return (1 - fr) * ((1 - fc) * px(ri, ci) + fc * px(ri, ci + 1)) +
         fr * ((1 - fc) * px(ri + 1, ci) + fc * px(ri + 1, ci + 1));
}

}  // namespace

Sinogram radon(std::span<const double> image, int side, std::span<const double> angles) {
  if (side <= 0 || image.size() != static_cast<std::size_t>(side) * side) {
    throw std::invalid_argument("radon: image must be square");
  }
  Sinogram s;
  s.angles.assign(angles.begin(), angles.end());
  s.bins = detector_bins(side);
  s.data.assign(s.angles.size() * static_cast<std::size_t>(s.bins), 0.0);
  const double centre = 0.5 * (side - 1);
  const double bin_centre = 0.5 * (s.bins - 1);
  const double reach = 0.5 * side * std::numbers::sqrt2 + 1.0;
  const double du = 0.5;
  const int steps = static_cast<int>(std::ceil(2.0 * reach / du));
  for (std::size_t a = 0; a < s.angles.size(); ++a) {
    const double c = std::cos(s.angles[a]), sn = std::sin(s.angles[a]);
    for (int b = 0; b < s.bins; ++b) {
      const double off = (b - bin_centre) * s.spacing;
      double sum = 0.0;
      for (int i = 0; i <= steps; ++i) {
        const double u = -reach + i * du;
        const double x = off * c - u * sn;
        const double y = off * sn + u * c;
        sum += bilinear(image, side, y + centre, x + centre);
      }
      s.data[a * static_cast<std::size_t>(s.bins) + static_cast<std::size_t>(b)] = sum * du;
    }
  }
  return s;
}

Sinogram add_poisson(const Sinogram& sino, double count_scale, std::uint64_t seed, std::size_t* clamped) {
  if (!(count_scale > 0.0)) throw std::invalid_argument("add_poisson: count_scale must be positive");
  Sinogram out = sino;
  std::mt19937_64 rng(seed);
  std::size_t negatives = 0;
  for (double& v : out.data) {
    if (v < 0.0) {
      ++negatives;
      v = 0.0;
    }
    const double mean = count_scale * v;
    if (mean <= 0.0) continue;
    std::poisson_distribution<long long> dist(mean);
    v = static_cast<double>(dist(rng)) / count_scale;
  }
  if (clamped) *clamped = negatives;
  return out;
}

namespace {

// Band-limited ramp (Ram-Lak) kernel, optionally apodized in frequency space,
// returned as a spatial kernel indexed by offset in [-(n - 1), n - 1].
std::vector<double> filter_kernel(int bins, double spacing, Apodization window) {
  int P = 1;
  while (P < 2 * bins) P <<= 1;
  std::vector<double> h(static_cast<std::size_t>(P), 0.0);
  for (int i = 0; i < P; ++i) {
    const int n = i <= P / 2 ? i : i - P;
    double v = 0.0;
    if (n == 0) {
      v = 1.0 / (4.0 * spacing * spacing);
    } else if (n % 2 != 0) {
      v = -1.0 / (std::numbers::pi * std::numbers::pi * n * n * spacing * spacing);
    }
    h[static_cast<std::size_t>(i)] = v;
  }
  if (window == Apodization::ramp) return h;

  // H = DFT(h) is real and even; multiply by the Hann window and invert.
  std::vector<double> H(static_cast<std::size_t>(P), 0.0);
  for (int f = 0; f < P; ++f) {
    double acc = 0.0;
    for (int i = 0; i < P; ++i) acc += h[static_cast<std::size_t>(i)] * std::cos(2.0 * std::numbers::pi * f * i / P);
    const double w = 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * f / P));
    H[static_cast<std::size_t>(f)] = acc * w;
  }
  std::vector<double> out(static_cast<std::size_t>(P), 0.0);
  for (int i = 0; i < P; ++i) {
    double acc = 0.0;
    for (int f = 0; f < P; ++f) acc += H[static_cast<std::size_t>(f)] * std::cos(2.0 * std::numbers::pi * f * i / P);
    out[static_cast<std::size_t>(i)] = acc / P;
  }
  return out;
}

}  // namespace

std::vector<double> fbp(const Sinogram& sino, int side, Apodization window) {
  if (side <= 0 || sino.bins != detector_bins(side) ||
      sino.data.size() != sino.angles.size() * static_cast<std::size_t>(sino.bins) || sino.angles.empty()) {
    throw std::invalid_argument("fbp: sinogram geometry does not match the requested image");
  }
  const int nb = sino.bins;
  const std::vector<double> h = filter_kernel(nb, sino.spacing, window);
  const int P = static_cast<int>(h.size());
  auto kernel = [&](int n) { return h[static_cast<std::size_t>(n >= 0 ? n : n + P)]; };

  std::vector<double> filtered(sino.data.size(), 0.0);
  for (std::size_t a = 0; a < sino.angles.size(); ++a) {
    const double* p = sino.data.data() + a * static_cast<std::size_t>(nb);
    double* q = filtered.data() + a * static_cast<std::size_t>(nb);
    for (int b = 0; b < nb; ++b) {
      double acc = 0.0;
      for (int j = 0; j < nb; ++j) acc += p[j] * kernel(b - j);
      q[b] = sino.spacing * acc;
    }
  }

  std::vector<double> img(static_cast<std::size_t>(side) * side, 0.0);
  const double centre = 0.5 * (side - 1);
  const double bin_centre = 0.5 * (nb - 1);
  const double scale = std::numbers::pi / static_cast<double>(sino.angles.size());
  for (std::size_t a = 0; a < sino.angles.size(); ++a) {
    const double c = std::cos(sino.angles[a]), sn = std::sin(sino.angles[a]);
    const double* q = filtered.data() + a * static_cast<std::size_t>(nb);
    for (int row = 0; row < side; ++row) {
      const double y = row - centre;
      for (int col = 0; col < side; ++col) {
        const double x = col - centre;
        const double t = (x * c + y * sn) / sino.spacing + bin_centre;
        const double t0 = std::floor(t);
        const int i0 = static_cast<int>(t0);
        if (i0 < 0 || i0 + 1 >= nb) continue;
        const double w = t - t0;
        img[static_cast<std::size_t>(row * side + col)] += (1.0 - w) * q[i0] + w * q[i0 + 1];
      }
    }
  }
  for (double& v : img) v *= scale;
  return img;
}

}  // namespace kinmap::phantom
