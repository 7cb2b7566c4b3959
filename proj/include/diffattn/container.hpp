#pragma once

// DFA1 binary container.
//
//   "DFA1" | u32 version | u32 record type | u64 payload length | payload
//
// The payload is a sequence of tensors, each written as u32 ndim, ndim u32 dims, then the
// values as little-endian float64 in row-major order. Integer fields (ids, shapes, enum
// tags) are stored as exactly representable doubles; 64-bit seeds are split into two
// 32-bit halves.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffattn/dataset.hpp"
#include "diffattn/exemplar.hpp"
#include "diffattn/model.hpp"

namespace diffattn {

inline constexpr std::uint32_t kContainerVersion = 1;

enum class RecordType : std::uint32_t { Dataset = 1, Index = 2, Params = 3, AttentionMaps = 4 };

std::string_view to_string(RecordType t);

class IoError : public std::runtime_error {
 public:
  enum class Kind { Open, BadMagic, BadVersion, WrongRecord, Truncated, ShapeMismatch, Malformed };

  IoError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct Tensor {
  std::vector<std::uint32_t> shape;
  std::vector<double> values;

  static Tensor from(const Matrix& m);
  static Tensor vector(std::span<const double> v);
  Matrix to_matrix() const;  // 1-D tensors become a single row
  std::size_t element_count() const;
};

std::vector<std::uint8_t> encode_record(RecordType type, const std::vector<Tensor>& tensors);
std::vector<Tensor> decode_record(std::span<const std::uint8_t> bytes, RecordType expected);
// Reads only the header; throws like decode_record on a bad header.
RecordType record_type(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// A stack of attention maps over a grid_rows x grid_cols region layout; one map per row.
struct AttentionMaps {
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  Matrix maps;

  friend bool operator==(const AttentionMaps&, const AttentionMaps&) = default;
};

std::vector<std::uint8_t> encode(const Dataset& ds);
std::vector<std::uint8_t> encode(const ExemplarIndex& index);
std::vector<std::uint8_t> encode(const ModelParams& params);
std::vector<std::uint8_t> encode(const AttentionMaps& maps);

Dataset decode_dataset(std::span<const std::uint8_t> bytes);
ExemplarIndex decode_index(std::span<const std::uint8_t> bytes);
ModelParams decode_params(std::span<const std::uint8_t> bytes);
AttentionMaps decode_maps(std::span<const std::uint8_t> bytes);

template <typename T>
void save(const T& value, const std::filesystem::path& path) {
  write_bytes(path, encode(value));
}

inline Dataset load_dataset(const std::filesystem::path& p) { return decode_dataset(read_bytes(p)); }
inline ExemplarIndex load_index(const std::filesystem::path& p) { return decode_index(read_bytes(p)); }
inline ModelParams load_params(const std::filesystem::path& p) { return decode_params(read_bytes(p)); }
inline AttentionMaps load_maps(const std::filesystem::path& p) { return decode_maps(read_bytes(p)); }

}  // namespace diffattn
