#include "diffattn/metrics.hpp"

#include <array>
#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "diffattn/error.hpp"

namespace diffattn {

namespace {

constexpr std::array<std::string_view, 11> kNumberWords = {
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"};

bool is_article(std::string_view w) { return w == "a" || w == "an" || w == "the"; }

}  // namespace

std::string normalize_answer(std::string_view raw) {
  std::string cleaned;
  cleaned.reserve(raw.size());
  for (char ch : raw) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::ispunct(c)) {
      // "t-shirt" keeps its word boundary, "dog's" collapses to "dogs"
      if (ch == '-' || ch == '/') cleaned.push_back(' ');
      continue;
    }
    cleaned.push_back(static_cast<char>(std::tolower(c)));
  }

  std::istringstream words(cleaned);
  std::string out;
  std::string w;
  while (words >> w) {
    if (is_article(w)) continue;
    for (std::size_t i = 0; i < kNumberWords.size(); ++i) {
      if (w == kNumberWords[i]) {
        w = std::to_string(i);
        break;
      }
    }
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

double vqa_accuracy_text(std::string_view pred, std::span<const std::string> answers) {
  const std::string p = normalize_answer(pred);
  std::size_t matches = 0;
  for (const auto& a : answers) {
    if (normalize_answer(a) == p) ++matches;
  }
  return std::min(static_cast<double>(matches) / 3.0, 1.0);
}

Vector downscale_attention(const Matrix& grid, std::size_t side) {
  const std::size_t h = grid.rows();
  const std::size_t w = grid.cols();
  if (side == 0 || h < side || w < side) {
    throw DomainError("downscale_attention: " + grid.shape_str() + " map is smaller than " +
                      std::to_string(side) + "x" + std::to_string(side));
  }
  Vector out(side * side, 0.0);
  double total = 0.0;
  for (std::size_t by = 0; by < side; ++by) {
    const std::size_t y0 = by * h / side;
    const std::size_t y1 = (by + 1) * h / side;
    for (std::size_t bx = 0; bx < side; ++bx) {
      const std::size_t x0 = bx * w / side;
      const std::size_t x1 = (bx + 1) * w / side;
      double sum = 0.0;
      for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) {
          const double v = grid(y, x);
          if (!std::isfinite(v) || v < 0.0) {
            throw DomainError("downscale_attention: weights must be finite and non-negative");
          }
          sum += v;
        }
      }
      const double avg = sum / static_cast<double>((y1 - y0) * (x1 - x0));
      out[by * side + bx] = avg;
      total += avg;
    }
  }
  if (!(total > 0.0)) throw DomainError("downscale_attention: map has no mass");
  for (double& x : out) x /= total;
  return out;
}

Vector descending_ranks(std::span<const double> v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  Vector ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && v[order[j]] == v[order[i]]) ++j;
    // positions i..j-1 hold ranks i+1..j
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t m = i; m < j; ++m) ranks[order[m]] = avg;
    i = j;
  }
  return ranks;
}

double rank_correlation(std::span<const double> p, std::span<const double> q) {
  require_same_length(p, q, "rank_correlation");
  if (p.size() < 2) throw DomainError("rank_correlation needs at least two elements");
  const Vector rp = descending_ranks(p);
  const Vector rq = descending_ranks(q);
  double sum_d2 = 0.0;
  for (std::size_t i = 0; i < rp.size(); ++i) {
    const double d = rp[i] - rq[i];
    sum_d2 += d * d;
  }
  const double n = static_cast<double>(p.size());
  return 1.0 - 6.0 * sum_d2 / (n * n * n - n);
}

}  // namespace diffattn
