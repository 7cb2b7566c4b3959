#pragma once

// Synthetic VQA-style data with planted structure.
//
// Each item belongs to one latent concept. The concept fixes a salient object, the grid
// region it sits at, a question prototype and a joint-embedding prototype. The object is
// blended into the regions around its (jittered) centre with a decaying weight and carries
// the item's answer attribute; all other regions hold distractor objects with random answer
// attributes. Optionally one far region repeats the object with a wrong answer (a decoy). The question names the object, never the answer, so the answer can only be
// read by attending to the right region. The reference attention is the object's weight
// profile, lightly smoothed toward uniform.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "diffattn/exemplar.hpp"
#include "diffattn/tensor.hpp"

namespace diffattn {

struct GenConfig {
  std::size_t n_items = 2000;
  std::size_t regions = 16;
  std::size_t dim = 32;
  std::size_t embed_dim = 16;
  std::size_t classes = 8;
  std::size_t concepts = 0;    // 0: same as classes
  std::size_t n_clusters = 0;  // recommended quantization; 0: min(50, n_items / 40)
  double noise_sigma = 0.1;
  double corruption = 0.3;     // chance an annotator answer is replaced by another class
  double reference_epsilon = 0.05;
  double blob_width = 1.0;     // decay length of the object weight, in grid cells
  double center_jitter = 0.35;
  double joint_scale = 3.0;
  // Chance that an item also shows its object, at full strength but with a wrong answer
  // attribute, in one region away from the true one. The target image alone cannot tell the
  // two apart; same-concept exemplars share only the true region.
  double decoy_rate = 0.0;
  // Scale of a fixed per-region code added to every image row, standing in for the spatial
  // context that real region features carry. Drawn from its own stream, so 0 leaves the
  // rest of the data unchanged.
  double position_scale = 0.0;
  std::uint64_t seed = 0;

  std::size_t resolved_concepts() const { return concepts == 0 ? classes : concepts; }
  std::size_t resolved_clusters() const;
  void validate() const;
};

struct DatasetHeader {
  std::size_t regions = 0;
  std::size_t dim = 0;
  std::size_t embed_dim = 0;
  std::size_t classes = 0;
  std::size_t concepts = 0;
  std::size_t grid_rows = 0;  // regions laid out row-major on grid_rows x grid_cols
  std::size_t grid_cols = 0;
  std::size_t n_clusters = 0;

  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

struct DatasetItem {
  ItemId id = 0;
  Matrix image;      // regions x dim
  Vector question;   // dim
  std::uint32_t answer = 0;
  std::uint32_t concept_id = 0;
  Vector joint;      // embed_dim
  std::optional<Vector> reference;  // regions, sums to 1
  std::array<std::uint32_t, 10> annotations{};

  friend bool operator==(const DatasetItem&, const DatasetItem&) = default;
};

// Generator-side ground truth, kept so tests can build analytic oracle parameters.
struct ConceptTruth {
  std::vector<std::uint32_t> centers;  // concept -> region
  Matrix objects;                      // concepts x dim
  Matrix questions;                    // concepts x dim
  Matrix joints;                       // concepts x embed_dim
  Matrix answers;                      // classes x dim

  friend bool operator==(const ConceptTruth&, const ConceptTruth&) = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<DatasetItem> items;
  ConceptTruth truth;

  std::size_t size() const { return items.size(); }
  void validate() const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

Dataset generate(const GenConfig& cfg);

// Train/held-out split: the last `holdout` fraction of items is held out.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};
Split holdout_split(std::size_t n_items, double holdout);

// Joint embeddings of the given item positions, keyed by item id.
EmbeddingStore joint_store(const Dataset& ds, std::span<const std::size_t> rows);

}  // namespace diffattn
