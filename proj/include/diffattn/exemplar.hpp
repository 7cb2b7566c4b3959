#pragma once

// Exemplar retrieval over joint image-question embeddings.
//
// Supporting exemplars are the exact k nearest neighbours (Euclidean) from a k-d tree.
// Opposing exemplars come from a coarse k-means quantization: clusters are ordered by
// centroid distance from the target's cluster and ids are drawn from the cluster at a
// fixed rank offset.

#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "diffattn/attention.hpp"
#include "diffattn/tensor.hpp"

namespace diffattn {

using ItemId = std::uint32_t;

struct EmbeddingStore {
  Matrix embeddings;  // one row per id
  std::vector<ItemId> ids;

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return embeddings.cols(); }
  void validate() const;
};

struct Neighbor {
  ItemId id;
  double dist_sq;
};

class KdIndex {
 public:
  struct Node {
    std::uint32_t begin = 0;  // range into order()
    std::uint32_t end = 0;
    std::int32_t left = -1;   // -1 marks a leaf
    std::int32_t right = -1;
    std::uint32_t split_dim = 0;
    double split_value = 0.0;

    bool leaf() const { return left < 0; }
    friend bool operator==(const Node&, const Node&) = default;
  };

  static constexpr std::size_t kDefaultLeafSize = 16;

  KdIndex() = default;

  static KdIndex build(EmbeddingStore store, std::size_t leaf_size = kDefaultLeafSize);
  // Reassembles a persisted tree; validates that the parts are consistent.
  static KdIndex from_parts(EmbeddingStore store, std::vector<std::uint32_t> order,
                            std::vector<Node> nodes);

  // k nearest to the stored point `query`, excluding it; ties go to the lower id.
  std::vector<ItemId> knn(ItemId query, std::size_t k) const;
  std::vector<Neighbor> knn_point(std::span<const double> query, std::size_t k,
                                  std::optional<ItemId> exclude = std::nullopt) const;

  std::size_t size() const { return store_.size(); }
  std::size_t dim() const { return store_.dim(); }
  bool contains(ItemId id) const { return row_of_.count(id) != 0; }
  std::span<const double> embedding(ItemId id) const;
  std::size_t row_of(ItemId id) const;

  const EmbeddingStore& store() const { return store_; }
  const std::vector<std::uint32_t>& order() const { return order_; }
  const std::vector<Node>& nodes() const { return nodes_; }

  friend bool operator==(const KdIndex& a, const KdIndex& b) {
    return a.store_.embeddings == b.store_.embeddings && a.store_.ids == b.store_.ids &&
           a.order_ == b.order_ && a.nodes_ == b.nodes_;
  }

 private:
  void index_ids();
  std::int32_t build_node(std::uint32_t begin, std::uint32_t end, std::size_t leaf_size);

  EmbeddingStore store_;
  std::vector<std::uint32_t> order_;  // permutation of store rows
  std::vector<Node> nodes_;           // nodes_[0] is the root
  std::unordered_map<ItemId, std::size_t> row_of_;
};

struct ClusterOrdering {
  Matrix centroids;                     // n_clusters x dim
  std::vector<std::uint32_t> assignment;  // cluster of each store row
  std::vector<ItemId> ids;              // store row -> id
  std::vector<std::vector<std::size_t>> members;  // cluster -> store rows, ascending
  std::unordered_map<ItemId, std::size_t> row_of;

  std::size_t n_clusters() const { return centroids.rows(); }
  std::size_t cluster_of(ItemId id) const;
  std::size_t nearest_cluster(std::span<const double> point) const;
  // All clusters by centroid distance from `cluster` (itself first; ties by index).
  std::vector<std::size_t> ordering_from(std::size_t cluster) const;
  // Derives members and row_of from assignment and ids.
  void rebuild_members();

  friend bool operator==(const ClusterOrdering& a, const ClusterOrdering& b) {
    return a.centroids == b.centroids && a.assignment == b.assignment && a.ids == b.ids;
  }
};

struct KMeansOptions {
  std::size_t max_iterations = 100;
  double tolerance = 1e-6;  // max centroid movement
};

// Lloyd iterations from a seeded k-means++ initialization.
ClusterOrdering cluster_quantize(const EmbeddingStore& store, std::size_t n_clusters,
                                 std::uint64_t seed, const KMeansOptions& opts = {});

// `count` ids drawn from the cluster `offset` ranks away from `from_cluster`, spilling to
// offset+1, offset-1, offset+2, ... when that cluster runs short. Never returns `exclude_target`
// or anything in `exclude`.
std::vector<ItemId> pick_opposing_from(const ClusterOrdering& ordering, std::size_t from_cluster,
                                       std::optional<ItemId> exclude_target, std::size_t offset,
                                       std::size_t count, Rng& rng,
                                       std::span<const ItemId> exclude = {});

std::vector<ItemId> pick_opposing(const ClusterOrdering& ordering, ItemId target,
                                  std::size_t offset, std::size_t count, Rng& rng,
                                  std::span<const ItemId> exclude = {});

struct Quintuplet {
  ItemId p_plus;        // bucket 1
  ItemId p_plusplus;    // bucket 2
  ItemId n_minusminus;  // bucket buckets-1
  ItemId n_minus;       // bucket buckets
};

inline constexpr std::size_t kQuintupletBuckets = 20;

// The nearest `pool_size` neighbours, split into `buckets` equal distance-ordered buckets;
// one id is drawn from each of the first two and last two buckets.
Quintuplet pick_quintuplet_from(const std::vector<Neighbor>& pool, Rng& rng,
                                std::size_t buckets = kQuintupletBuckets);
Quintuplet pick_quintuplet(const KdIndex& index, ItemId target, std::size_t pool_size, Rng& rng,
                           std::size_t buckets = kQuintupletBuckets);

struct ExemplarSet {
  ItemId target;
  std::vector<ItemId> supports;
  std::vector<ItemId> opposes;
};

// Both retrieval structures over one embedding store.
struct ExemplarIndex {
  KdIndex kd;
  ClusterOrdering clusters;
  std::uint64_t seed = 0;

  friend bool operator==(const ExemplarIndex&, const ExemplarIndex&) = default;
};

ExemplarIndex build_exemplar_index(EmbeddingStore store, std::size_t n_clusters,
                                   std::uint64_t seed);

// For a stored target (excluded from its own exemplars).
ExemplarSet find_exemplars(const ExemplarIndex& index, ItemId target, std::size_t k,
                           std::size_t offset, Rng& rng);
// For a point outside the store (held-out item); `target` is only recorded.
ExemplarSet find_exemplars_for_point(const ExemplarIndex& index, ItemId target,
                                     std::span<const double> point, std::size_t k,
                                     std::size_t offset, Rng& rng);

}  // namespace diffattn
