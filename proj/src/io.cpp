#include "kinmap/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

namespace kinmap::io {

namespace fs = std::filesystem;

namespace {

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

}  // namespace

void write_f32(const fs::path& path, std::span<const double> values) {
  std::vector<std::uint32_t> words(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    words[i] = to_little(std::bit_cast<std::uint32_t>(static_cast<float>(values[i])));
  }
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
  if (!out) throw IoError("cannot write '" + path.string() + "'");
}

std::vector<double> read_f32(const fs::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) throw IoError("'" + path.string() + "': size is not a multiple of 4 bytes");
  const std::size_t n = bytes.size() / 4;
  if (expected != 0 && n != expected) {
    throw IoError("'" + path.string() + "': expected " + std::to_string(expected) + " values, found " +
                  std::to_string(n));
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t w = 0;
    std::copy_n(bytes.data() + 4 * i, 4, reinterpret_cast<char*>(&w));
    out[i] = static_cast<double>(std::bit_cast<float>(to_little(w)));
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_gray_pgm(const fs::path& path, int side, std::span<const std::uint8_t> pixels) {
  if (side <= 0 || pixels.size() != static_cast<std::size_t>(side) * static_cast<std::size_t>(side)) {
    throw IoError("write_gray_pgm: pixel count does not match the side");
  }
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << side << ' ' << side << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("cannot write '" + path.string() + "'");
}

std::vector<std::uint8_t> to_gray(std::span<const double> values, double lo, double hi) {
  std::vector<std::uint8_t> out(values.size(), 0);
  const double span = hi - lo;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double t = span > 0.0 ? (values[i] - lo) / span : 0.0;
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0)));
  }
  return out;
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

}  // namespace kinmap::io
