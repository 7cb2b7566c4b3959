#pragma once

// Static heatmap and table exports: 8-bit binary PGM (P5) and CSV.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "diffattn/tensor.hpp"

namespace diffattn {

// A flat map laid out row-major on rows x cols.
Matrix as_grid(std::span<const double> map, std::size_t rows, std::size_t cols);

// Panels of equal height placed left to right, separated by `gap` zero columns.
Matrix tile_horizontal(const std::vector<Matrix>& panels, std::size_t gap = 1);

// Pixel = round(255 * v / max); an all-zero image stays black. Negative or non-finite
// values are rejected.
std::vector<std::uint8_t> encode_pgm(const Matrix& image);
void write_pgm(const std::filesystem::path& path, const Matrix& image);

// Header line, then one line per row; values printed with 17 significant digits.
std::string to_csv(const std::vector<std::string>& header, const Matrix& rows);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace diffattn
