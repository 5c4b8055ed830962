// Seed derivation. Every random stream in the pipeline is seeded from the
// master seed through derive_seed(master, stream, a, b) so that results do
// not depend on evaluation order or thread count.
#pragma once

#include <cstdint>

namespace kinmap {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

enum class Stream : std::uint64_t {
  input_function = 1,  // a = replicate
  poisson = 2,         // a = replicate, b = frame
  pixel_init = 3,      // a = pixel, under the fit seed of the image
  fit = 4,             // a = dataset member; seed handed to the pixel fits
};

constexpr std::uint64_t derive_seed(std::uint64_t master, Stream stream, std::uint64_t a = 0,
                                    std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ static_cast<std::uint64_t>(stream));
  h = splitmix64(h ^ a);
  return splitmix64(h ^ (b + 0x632be59bd9b4e019ULL));
}

}  // namespace kinmap
