#include "diffattn/export.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "diffattn/container.hpp"
#include "diffattn/error.hpp"

namespace diffattn {

Matrix as_grid(std::span<const double> map, std::size_t rows, std::size_t cols) {
  if (rows * cols != map.size()) {
    throw ShapeError("map of " + std::to_string(map.size()) + " values does not fit a " +
                     std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  }
  return Matrix(rows, cols, Vector(map.begin(), map.end()));
}

Matrix tile_horizontal(const std::vector<Matrix>& panels, std::size_t gap) {
  if (panels.empty()) return {};
  const std::size_t h = panels.front().rows();
  std::size_t w = 0;
  for (const auto& p : panels) {
    if (p.rows() != h) throw ShapeError("tiled panels must share a height");
    w += p.cols();
  }
  w += gap * (panels.size() - 1);
  Matrix out(h, w, 0.0);
  std::size_t x0 = 0;
  for (const auto& p : panels) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < p.cols(); ++x) out(y, x0 + x) = p(y, x);
    }
    x0 += p.cols() + gap;
  }
  return out;
}

std::vector<std::uint8_t> encode_pgm(const Matrix& image) {
  double max = 0.0;
  for (double v : image.flat()) {
    if (!std::isfinite(v) || v < 0.0) throw DomainError("PGM export needs finite non-negative values");
    max = std::max(max, v);
  }
  const std::string header =
      "P5\n" + std::to_string(image.cols()) + " " + std::to_string(image.rows()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (double v : image.flat()) {
    const double level = max > 0.0 ? std::round(255.0 * v / max) : 0.0;
    out.push_back(static_cast<std::uint8_t>(level));
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Matrix& image) {
  write_bytes(path, encode_pgm(image));
}

std::string to_csv(const std::vector<std::string>& header, const Matrix& rows) {
  if (!header.empty() && header.size() != rows.cols()) {
    throw ShapeError("CSV header has " + std::to_string(header.size()) + " names for " +
                     std::to_string(rows.cols()) + " columns");
  }
  std::string out;
  for (std::size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
  if (!header.empty()) out += "\n";
  char buf[32];
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    for (std::size_t c = 0; c < rows.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", rows(r, c));
      if (c) out += ",";
      out += buf;
    }
    out += "\n";
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace diffattn
