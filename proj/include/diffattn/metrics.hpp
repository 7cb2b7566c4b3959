#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>

#include "diffattn/tensor.hpp"

namespace diffattn {

inline constexpr std::size_t kAnnotatorsPerQuestion = 10;

// min(#{t in answers : t == pred} / 3, 1)
template <typename Answer>
double vqa_accuracy(const Answer& pred, std::span<const Answer> answers) {
  const auto matches = std::count(answers.begin(), answers.end(), pred);
  return std::min(static_cast<double>(matches) / 3.0, 1.0);
}

// Lowercase, drop punctuation and the articles a/an/the, spell-out numbers zero..ten as digits.
std::string normalize_answer(std::string_view raw);

// String answers are compared after normalization.
double vqa_accuracy_text(std::string_view pred, std::span<const std::string> answers);

// Block-average pooling of an H x W map to side x side, then L1 normalization.
Vector downscale_attention(const Matrix& grid, std::size_t side = 14);

// 1-based ranks, largest value first; ties share their average rank.
Vector descending_ranks(std::span<const double> v);

// 1 - 6 sum D^2 / (N^3 - N) over descending ranks.
double rank_correlation(std::span<const double> p, std::span<const double> q);

}  // namespace diffattn
