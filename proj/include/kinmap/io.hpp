// Flat binary arrays, JSON headers and grey-scale images on disk.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kinmap::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Little-endian IEEE float32, no header.
void write_f32(const std::filesystem::path& path, std::span<const double> values);
/// Reads the whole file; expected, when non-zero, must match the value count.
std::vector<double> read_f32(const std::filesystem::path& path, std::size_t expected = 0);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Binary PGM (P5), maxval 255.
void write_gray_pgm(const std::filesystem::path& path, int side, std::span<const std::uint8_t> pixels);

/// Maps [lo, hi] linearly onto 0..255, clamping outside values.
std::vector<std::uint8_t> to_gray(std::span<const double> values, double lo, double hi);

/// Creates the directory (and parents); throws IoError when that fails.
void ensure_directory(const std::filesystem::path& dir);

}  // namespace kinmap::io
