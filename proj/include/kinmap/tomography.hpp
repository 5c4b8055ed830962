// Parallel-beam projection, Poisson counting noise and filtered
// backprojection. Image coordinates are centred on the middle of the square
// grid with unit pixel pitch; detector offsets use the same pitch.
#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace kinmap::phantom {

/// Angle-major line integrals: data[a * bins + b].
struct Sinogram {
  std::vector<double> angles;  // radians
  int bins = 0;
  double spacing = 1.0;
  std::vector<double> data;

  double at(std::size_t a, int b) const { return data[a * static_cast<std::size_t>(bins) + static_cast<std::size_t>(b)]; }
  bool operator==(const Sinogram&) const = default;
};

/// count angles evenly spread over [0, pi).
std::vector<double> default_angles(int count = 90);

/// Odd detector count covering the image diagonal.
int detector_bins(int side);

Sinogram radon(std::span<const double> image, int side, std::span<const double> angles);

/// Each bin becomes Poisson(count_scale * value) / count_scale. Negative bins
/// are clamped to zero first; their number is reported through clamped.
Sinogram add_poisson(const Sinogram& sino, double count_scale, std::uint64_t seed,
                     std::size_t* clamped = nullptr);

enum class Apodization { ramp, hann };

/// Ramp-filtered backprojection onto a side x side grid.
std::vector<double> fbp(const Sinogram& sino, int side, Apodization window = Apodization::hann);

}  // namespace kinmap::phantom
