#include "diffattn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "diffattn/error.hpp"

namespace diffattn {

namespace {

void fill_normal(std::span<double> out, double sigma, Rng& rng) {
  std::normal_distribution<double> dist(0.0, sigma);
  for (double& x : out) x = dist(rng);
}

void normalize(std::span<double> v) {
  const double n = std::sqrt(l2_norm_sq(v));
  if (n > 0.0) {
    for (double& x : v) x /= n;
  }
}

// Row-major grid that fits the region count: square when possible, else a single row.
std::pair<std::size_t, std::size_t> grid_for(std::size_t regions) {
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(regions))));
  if (side * side == regions) return {side, side};
  return {1, regions};
}

void check_planted_structure(const Dataset& ds) {
  const std::size_t m = std::min<std::size_t>(ds.size(), 300);
  double within = 0.0;
  double across = 0.0;
  std::size_t n_within = 0;
  std::size_t n_across = 0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      const double d = std::sqrt(l2_norm_sq(sub(ds.items[i].joint, ds.items[j].joint)));
      if (ds.items[i].concept_id == ds.items[j].concept_id) {
        within += d;
        ++n_within;
      } else {
        across += d;
        ++n_across;
      }
    }
  }
  if (n_within == 0 || n_across == 0) return;
  if (within / static_cast<double>(n_within) >= across / static_cast<double>(n_across)) {
    throw DomainError("generate: noise swamps the planted concept structure");
  }
}

}  // namespace

std::size_t GenConfig::resolved_clusters() const {
  if (n_clusters != 0) return n_clusters;
  return std::max<std::size_t>(1, std::min<std::size_t>(50, n_items / 40));
}

void GenConfig::validate() const {
  if (n_items == 0 || regions == 0 || dim == 0 || embed_dim == 0 || classes == 0) {
    throw DomainError("generate: dimensions must be positive");
  }
  if (classes > n_items) throw DomainError("generate: more classes than items");
  if (classes < 2) throw DomainError("generate: need at least two classes");
  if (resolved_concepts() < 2) throw DomainError("generate: need at least two concepts");
  if (dim < 2) throw DomainError("generate: feature dim must be at least 2");
  if (!(noise_sigma >= 0.0) || !(corruption >= 0.0 && corruption <= 1.0) ||
      !(reference_epsilon >= 0.0 && reference_epsilon < 1.0) || !(blob_width > 0.0) ||
      !(center_jitter >= 0.0 && center_jitter < 0.5) || !(decoy_rate >= 0.0 && decoy_rate <= 1.0) ||
      !(position_scale >= 0.0)) {
    throw DomainError("generate: parameter out of range");
  }
}

void Dataset::validate() const {
  const auto& h = header;
  for (const auto& it : items) {
    if (it.image.rows() != h.regions || it.image.cols() != h.dim || it.question.size() != h.dim ||
        it.joint.size() != h.embed_dim || (it.reference && it.reference->size() != h.regions)) {
      throw ShapeError("dataset item " + std::to_string(it.id) + " does not match the header");
    }
    if (it.answer >= h.classes) throw DomainError("dataset item answer out of range");
    if (it.reference) {
      double total = 0.0;
      for (double x : *it.reference) {
        if (!(x >= 0.0)) throw DomainError("reference attention has a negative entry");
        total += x;
      }
      if (std::abs(total - 1.0) > 1e-9) throw DomainError("reference attention must sum to 1");
    }
  }
}

Dataset generate(const GenConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const std::size_t R = cfg.regions;
  const std::size_t D = cfg.dim;
  const std::size_t K = cfg.resolved_concepts();
  const std::size_t C = cfg.classes;
  const std::size_t half = D / 2;

  Dataset ds;
  const auto [grid_rows, grid_cols] = grid_for(R);
  ds.header = {R, D, cfg.embed_dim, C, K, grid_rows, grid_cols, cfg.resolved_clusters()};

  // Objects live in the first half of the feature space, answer attributes in the second.
  auto& truth = ds.truth;
  truth.objects = Matrix(K, D);
  for (std::size_t c = 0; c < K; ++c) {
    auto o = truth.objects.row(c);
    if (K <= half) {
      o[c] = 1.0;
    } else {
      fill_normal(o.subspan(0, half), 1.0, rng);
      normalize(o);
    }
  }
  truth.answers = Matrix(C, D);
  for (std::size_t y = 0; y < C; ++y) {
    auto a = truth.answers.row(y).subspan(half);
    fill_normal(a, 1.0, rng);
    normalize(a);
  }
  truth.questions = Matrix(K, D);
  for (std::size_t c = 0; c < K; ++c) {
    fill_normal(truth.questions.row(c), 1.0, rng);
    normalize(truth.questions.row(c));
  }
  truth.joints = Matrix(K, cfg.embed_dim);
  fill_normal(truth.joints.flat(), cfg.joint_scale, rng);

  std::vector<std::uint32_t> perm(R);
  std::iota(perm.begin(), perm.end(), 0U);
  std::shuffle(perm.begin(), perm.end(), rng);
  truth.centers.resize(K);
  for (std::size_t c = 0; c < K; ++c) truth.centers[c] = perm[c % R];

  Matrix positions(R, D);
  if (cfg.position_scale > 0.0) {
    Rng pos_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    for (std::size_t r = 0; r < R; ++r) {
      fill_normal(positions.row(r), 1.0, pos_rng);
      normalize(positions.row(r));
      for (double& x : positions.row(r)) x *= cfg.position_scale;
    }
  }

  std::uniform_int_distribution<std::uint32_t> pick_concept(0, static_cast<std::uint32_t>(K - 1));
  std::uniform_int_distribution<std::uint32_t> pick_other_concept(
      0, static_cast<std::uint32_t>(K - 2));
  std::uniform_int_distribution<std::uint32_t> pick_class(0, static_cast<std::uint32_t>(C - 1));
  std::uniform_int_distribution<std::uint32_t> pick_other_class(
      0, static_cast<std::uint32_t>(C - 2));
  std::uniform_real_distribution<double> jitter(-cfg.center_jitter, cfg.center_jitter);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  // normal_distribution requires a positive sigma
  std::normal_distribution<double> unit_normal(0.0, 1.0);
  auto noise = [&](Rng& g) { return cfg.noise_sigma > 0.0 ? cfg.noise_sigma * unit_normal(g) : 0.0; };

  ds.items.reserve(cfg.n_items);
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    DatasetItem item;
    item.id = static_cast<ItemId>(i);
    item.concept_id = pick_concept(rng);
    item.answer = pick_class(rng);
    const std::size_t center = truth.centers[item.concept_id];
    const double cy = static_cast<double>(center / grid_cols) + jitter(rng);
    const double cx = static_cast<double>(center % grid_cols) + jitter(rng);

    Vector weight(R);
    for (std::size_t r = 0; r < R; ++r) {
      const double dy = static_cast<double>(r / grid_cols) - cy;
      const double dx = static_cast<double>(r % grid_cols) - cx;
      weight[r] = std::exp(-std::sqrt(dy * dy + dx * dx) / cfg.blob_width);
    }

    item.image = Matrix(R, D);
    for (std::size_t r = 0; r < R; ++r) {
      std::uint32_t other = pick_other_concept(rng);
      if (other >= item.concept_id) ++other;
      const std::uint32_t other_answer = pick_class(rng);
      auto row = item.image.row(r);
      const double w = weight[r];
      axpy(w, truth.objects.row(item.concept_id), row);
      axpy(w, truth.answers.row(item.answer), row);
      axpy(1.0 - w, truth.objects.row(other), row);
      axpy(1.0 - w, truth.answers.row(other_answer), row);
      for (double& x : row) x += noise(rng);
    }

    if (cfg.decoy_rate > 0.0 && unit(rng) < cfg.decoy_rate) {
      // Decoy goes to a region at least two cells from the jittered centre.
      std::vector<std::size_t> far;
      for (std::size_t r = 0; r < R; ++r) {
        if (weight[r] < std::exp(-2.0 / cfg.blob_width)) far.push_back(r);
      }
      if (!far.empty()) {
        const std::size_t r = far[std::uniform_int_distribution<std::size_t>(0, far.size() - 1)(rng)];
        std::uint32_t wrong = pick_other_class(rng);
        if (wrong >= item.answer) ++wrong;
        auto row = item.image.row(r);
        std::fill(row.begin(), row.end(), 0.0);
        axpy(1.0, truth.objects.row(item.concept_id), row);
        axpy(1.0, truth.answers.row(wrong), row);
        for (double& x : row) x += noise(rng);
      }
    }

    if (cfg.position_scale > 0.0) {
      for (std::size_t r = 0; r < R; ++r) axpy(1.0, positions.row(r), item.image.row(r));
    }

    item.question.assign(truth.questions.row(item.concept_id).begin(),
                         truth.questions.row(item.concept_id).end());
    for (double& x : item.question) x += noise(rng);
    item.joint.assign(truth.joints.row(item.concept_id).begin(),
                      truth.joints.row(item.concept_id).end());
    for (double& x : item.joint) x += noise(rng);

    const double total = std::accumulate(weight.begin(), weight.end(), 0.0);
    Vector ref(R);
    for (std::size_t r = 0; r < R; ++r) {
      ref[r] = (1.0 - cfg.reference_epsilon) * weight[r] / total +
               cfg.reference_epsilon / static_cast<double>(R);
    }
    const double ref_total = std::accumulate(ref.begin(), ref.end(), 0.0);
    for (double& x : ref) x /= ref_total;
    item.reference = std::move(ref);

    for (auto& a : item.annotations) {
      if (unit(rng) < cfg.corruption) {
        std::uint32_t wrong = pick_other_class(rng);
        if (wrong >= item.answer) ++wrong;
        a = wrong;
      } else {
        a = item.answer;
      }
    }
    ds.items.push_back(std::move(item));
  }
  check_planted_structure(ds);
  return ds;
}

Split holdout_split(std::size_t n_items, double holdout) {
  if (!(holdout >= 0.0 && holdout < 1.0)) throw DomainError("holdout fraction must be in [0,1)");
  const auto n_test = static_cast<std::size_t>(std::floor(holdout * static_cast<double>(n_items)));
  Split s;
  for (std::size_t i = 0; i < n_items; ++i) (i < n_items - n_test ? s.train : s.test).push_back(i);
  return s;
}

EmbeddingStore joint_store(const Dataset& ds, std::span<const std::size_t> rows) {
  EmbeddingStore store;
  store.embeddings = Matrix(rows.size(), ds.header.embed_dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& item = ds.items.at(rows[i]);
    std::copy(item.joint.begin(), item.joint.end(), store.embeddings.row(i).begin());
    store.ids.push_back(item.id);
  }
  return store;
}

}  // namespace diffattn
