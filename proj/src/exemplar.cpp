#include "diffattn/exemplar.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <string>
#include <unordered_set>

#include "diffattn/error.hpp"

namespace diffattn {

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

bool closer(const Neighbor& a, const Neighbor& b) {
  return a.dist_sq < b.dist_sq || (a.dist_sq == b.dist_sq && a.id < b.id);
}

struct WorstFirst {
  bool operator()(const Neighbor& a, const Neighbor& b) const { return closer(a, b); }
};

using NeighborHeap = std::priority_queue<Neighbor, std::vector<Neighbor>, WorstFirst>;

}  // namespace

// ---------------------------------------------------------------------------
// EmbeddingStore / KdIndex

void EmbeddingStore::validate() const {
  if (ids.size() != embeddings.rows()) {
    throw ShapeError("embedding store: " + std::to_string(ids.size()) + " ids for " +
                     std::to_string(embeddings.rows()) + " embeddings");
  }
  if (!all_finite(embeddings.flat())) throw DomainError("embedding store: non-finite embedding");
  std::unordered_set<ItemId> seen;
  for (ItemId id : ids) {
    if (!seen.insert(id).second) {
      throw DomainError("embedding store: duplicate id " + std::to_string(id));
    }
  }
}

void KdIndex::index_ids() {
  row_of_.clear();
  for (std::size_t i = 0; i < store_.ids.size(); ++i) row_of_.emplace(store_.ids[i], i);
}

KdIndex KdIndex::build(EmbeddingStore store, std::size_t leaf_size) {
  store.validate();
  if (store.size() == 0) throw DomainError("build_index: empty embedding store");
  if (leaf_size == 0) throw DomainError("build_index: leaf size must be positive");
  KdIndex idx;
  idx.store_ = std::move(store);
  idx.order_.resize(idx.store_.size());
  std::iota(idx.order_.begin(), idx.order_.end(), 0U);
  idx.build_node(0, static_cast<std::uint32_t>(idx.order_.size()), leaf_size);
  idx.index_ids();
  return idx;
}

std::int32_t KdIndex::build_node(std::uint32_t begin, std::uint32_t end, std::size_t leaf_size) {
  const auto self = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(Node{begin, end, -1, -1, 0, 0.0});
  if (end - begin <= leaf_size) return self;

  const Matrix& pts = store_.embeddings;
  std::size_t best_dim = 0;
  double best_spread = -1.0;
  for (std::size_t d = 0; d < pts.cols(); ++d) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::uint32_t i = begin; i < end; ++i) {
      const double v = pts(order_[i], d);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi - lo > best_spread) {
      best_spread = hi - lo;
      best_dim = d;
    }
  }
  // All points identical: nothing to split on.
  if (best_spread <= 0.0) return self;

  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) {
                     const double va = pts(a, best_dim);
                     const double vb = pts(b, best_dim);
                     return va < vb || (va == vb && a < b);
                   });
  const double split = pts(order_[mid], best_dim);
  const std::int32_t left = build_node(begin, mid, leaf_size);
  const std::int32_t right = build_node(mid, end, leaf_size);
  Node& n = nodes_[static_cast<std::size_t>(self)];
  n.left = left;
  n.right = right;
  n.split_dim = static_cast<std::uint32_t>(best_dim);
  n.split_value = split;
  return self;
}

KdIndex KdIndex::from_parts(EmbeddingStore store, std::vector<std::uint32_t> order,
                            std::vector<Node> nodes) {
  store.validate();
  const std::size_t n = store.size();
  if (n == 0 || nodes.empty()) throw DomainError("kd index: empty");
  if (order.size() != n) throw ShapeError("kd index: permutation length does not match store");
  std::vector<bool> seen(n, false);
  for (std::uint32_t r : order) {
    if (r >= n || seen[r]) throw DomainError("kd index: order is not a permutation");
    seen[r] = true;
  }
  for (const Node& node : nodes) {
    const bool bad_range = node.begin > node.end || node.end > n;
    const bool bad_child =
        !node.leaf() && (node.right < 0 || static_cast<std::size_t>(node.left) >= nodes.size() ||
                         static_cast<std::size_t>(node.right) >= nodes.size() ||
                         node.split_dim >= store.dim());
    if (bad_range || bad_child) throw DomainError("kd index: malformed node");
  }
  KdIndex idx;
  idx.store_ = std::move(store);
  idx.order_ = std::move(order);
  idx.nodes_ = std::move(nodes);
  idx.index_ids();
  return idx;
}

std::size_t KdIndex::row_of(ItemId id) const {
  const auto it = row_of_.find(id);
  if (it == row_of_.end()) throw DomainError("id " + std::to_string(id) + " is not indexed");
  return it->second;
}

std::span<const double> KdIndex::embedding(ItemId id) const {
  return store_.embeddings.row(row_of(id));
}

std::vector<ItemId> KdIndex::knn(ItemId query, std::size_t k) const {
  if (k >= size()) {
    throw DomainError("knn: k=" + std::to_string(k) + " must be below the store size " +
                      std::to_string(size()));
  }
  std::vector<ItemId> out;
  for (const Neighbor& n : knn_point(embedding(query), k, query)) out.push_back(n.id);
  return out;
}

std::vector<Neighbor> KdIndex::knn_point(std::span<const double> query, std::size_t k,
                                         std::optional<ItemId> exclude) const {
  if (query.size() != dim()) {
    throw ShapeError("knn: query has " + std::to_string(query.size()) + " dims, index has " +
                     std::to_string(dim()));
  }
  if (k == 0 || nodes_.empty()) return {};
  NeighborHeap heap;
  const Matrix& pts = store_.embeddings;

  auto offer = [&](std::uint32_t row) {
    const ItemId id = store_.ids[row];
    if (exclude && *exclude == id) return;
    const Neighbor cand{id, sq_dist(query, pts.row(row))};
    if (heap.size() < k) {
      heap.push(cand);
    } else if (closer(cand, heap.top())) {
      heap.pop();
      heap.push(cand);
    }
  };

  // Depth-first, nearer child first.
  std::vector<std::int32_t> stack{0};
  std::vector<double> bound{0.0};
  while (!stack.empty()) {
    const Node& node = nodes_[static_cast<std::size_t>(stack.back())];
    const double node_bound = bound.back();
    stack.pop_back();
    bound.pop_back();
    if (heap.size() == k && node_bound > heap.top().dist_sq) continue;
    if (node.leaf()) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) offer(order_[i]);
      continue;
    }
    const double diff = query[node.split_dim] - node.split_value;
    const std::int32_t near = diff < 0.0 ? node.left : node.right;
    const std::int32_t far = diff < 0.0 ? node.right : node.left;
    stack.push_back(far);
    bound.push_back(std::max(node_bound, diff * diff));
    stack.push_back(near);
    bound.push_back(node_bound);
  }

  std::vector<Neighbor> out;
  out.reserve(heap.size());
  while (!heap.empty()) {
    out.push_back(heap.top());
    heap.pop();
  }
  std::reverse(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// ClusterOrdering

void ClusterOrdering::rebuild_members() {
  members.assign(n_clusters(), {});
  row_of.clear();
  for (std::size_t row = 0; row < assignment.size(); ++row) {
    members[assignment[row]].push_back(row);
    row_of.emplace(ids[row], row);
  }
}

std::size_t ClusterOrdering::cluster_of(ItemId id) const {
  const auto it = row_of.find(id);
  if (it == row_of.end()) throw DomainError("id " + std::to_string(id) + " is not clustered");
  return assignment[it->second];
}

std::size_t ClusterOrdering::nearest_cluster(std::span<const double> point) const {
  if (point.size() != centroids.cols()) throw ShapeError("nearest_cluster: dimension mismatch");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < n_clusters(); ++c) {
    const double d = sq_dist(point, centroids.row(c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::vector<std::size_t> ClusterOrdering::ordering_from(std::size_t cluster) const {
  if (cluster >= n_clusters()) throw DomainError("cluster index out of range");
  std::vector<double> dist(n_clusters());
  for (std::size_t c = 0; c < n_clusters(); ++c) {
    dist[c] = sq_dist(centroids.row(cluster), centroids.row(c));
  }
  std::vector<std::size_t> order(n_clusters());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (a == cluster || b == cluster) return a == cluster && b != cluster;
    return dist[a] < dist[b];
  });
  return order;
}

ClusterOrdering cluster_quantize(const EmbeddingStore& store, std::size_t n_clusters,
                                 std::uint64_t seed, const KMeansOptions& opts) {
  store.validate();
  const std::size_t n = store.size();
  const std::size_t dim = store.dim();
  if (n_clusters == 0) throw DomainError("cluster_quantize: need at least one cluster");
  if (n < n_clusters) {
    throw DomainError("cluster_quantize: " + std::to_string(n) + " points cannot form " +
                      std::to_string(n_clusters) + " clusters");
  }
  const Matrix& pts = store.embeddings;
  Rng rng(seed);

  // k-means++ seeding
  ClusterOrdering out;
  out.ids = store.ids;
  out.centroids = Matrix(n_clusters, dim);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  for (std::size_t c = 0; c < n_clusters; ++c) {
    std::copy_n(pts.row(pick).begin(), dim, out.centroids.row(c).begin());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(pts.row(i), out.centroids.row(c)));
      total += d2[i];
    }
    if (c + 1 == n_clusters) break;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        u -= d2[i];
        if (u < 0.0 && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
  }

  out.assignment.assign(n, 0);
  auto assign_all = [&] {
    for (std::size_t i = 0; i < n; ++i) {
      out.assignment[i] = static_cast<std::uint32_t>(out.nearest_cluster(pts.row(i)));
    }
  };

  for (std::size_t iter = 0; iter < opts.max_iterations; ++iter) {
    assign_all();
    Matrix sums(n_clusters, dim);
    std::vector<std::size_t> counts(n_clusters, 0);
    for (std::size_t i = 0; i < n; ++i) {
      axpy(1.0, pts.row(i), sums.row(out.assignment[i]));
      ++counts[out.assignment[i]];
    }
    double movement = 0.0;
    for (std::size_t c = 0; c < n_clusters; ++c) {
      Vector next(dim);
      if (counts[c] == 0) {
        // Re-seed an empty cluster at the point farthest from its own centroid.
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = sq_dist(pts.row(i), out.centroids.row(out.assignment[i]));
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        next.assign(pts.row(far).begin(), pts.row(far).end());
      } else {
        for (std::size_t j = 0; j < dim; ++j) {
          next[j] = sums(c, j) / static_cast<double>(counts[c]);
        }
      }
      movement = std::max(movement, std::sqrt(sq_dist(next, out.centroids.row(c))));
      std::copy(next.begin(), next.end(), out.centroids.row(c).begin());
    }
    if (movement < opts.tolerance) break;
  }
  assign_all();
  out.rebuild_members();
  return out;
}

std::vector<ItemId> pick_opposing_from(const ClusterOrdering& ordering, std::size_t from_cluster,
                                       std::optional<ItemId> exclude_target, std::size_t offset,
                                       std::size_t count, Rng& rng,
                                       std::span<const ItemId> exclude) {
  const std::size_t nc = ordering.n_clusters();
  if (offset >= nc) {
    throw DomainError("pick_opposing: offset " + std::to_string(offset) + " needs more than " +
                      std::to_string(nc) + " clusters");
  }
  std::vector<ItemId> out;
  if (count == 0) return out;
  const auto ranked = ordering.ordering_from(from_cluster);

  auto excluded = [&](ItemId id) {
    if (exclude_target && *exclude_target == id) return true;
    return std::find(exclude.begin(), exclude.end(), id) != exclude.end();
  };

  // offset, offset+1, offset-1, offset+2, offset-2, ...
  for (std::size_t step = 0; step < 2 * nc && out.size() < count; ++step) {
    const std::size_t delta = (step + 1) / 2;
    std::size_t rank;
    if (step % 2 == 1) {
      if (offset + delta >= nc) continue;
      rank = offset + delta;
    } else {
      if (delta > offset) continue;
      rank = offset - delta;
    }
    std::vector<ItemId> eligible;
    for (std::size_t row : ordering.members[ranked[rank]]) {
      const ItemId id = ordering.ids[row];
      if (!excluded(id)) eligible.push_back(id);
    }
    std::shuffle(eligible.begin(), eligible.end(), rng);
    const std::size_t take = std::min(eligible.size(), count - out.size());
    out.insert(out.end(), eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(take));
  }
  if (out.size() < count) {
    throw DomainError("pick_opposing: only " + std::to_string(out.size()) + " eligible ids for " +
                      std::to_string(count) + " requested");
  }
  return out;
}

std::vector<ItemId> pick_opposing(const ClusterOrdering& ordering, ItemId target,
                                  std::size_t offset, std::size_t count, Rng& rng,
                                  std::span<const ItemId> exclude) {
  return pick_opposing_from(ordering, ordering.cluster_of(target), target, offset, count, rng,
                            exclude);
}

Quintuplet pick_quintuplet_from(const std::vector<Neighbor>& pool, Rng& rng, std::size_t buckets) {
  if (buckets < 4) throw DomainError("pick_quintuplet: need at least four buckets");
  if (pool.size() < 4 * buckets) {
    throw DomainError("pick_quintuplet: pool of " + std::to_string(pool.size()) +
                      " neighbours is smaller than " + std::to_string(4 * buckets));
  }
  const std::size_t n = pool.size();
  auto draw = [&](std::size_t bucket) {
    const std::size_t lo = bucket * n / buckets;
    const std::size_t hi = (bucket + 1) * n / buckets;
    return pool[std::uniform_int_distribution<std::size_t>(lo, hi - 1)(rng)].id;
  };
  Quintuplet q{};
  q.p_plus = draw(0);
  q.p_plusplus = draw(1);
  q.n_minusminus = draw(buckets - 2);
  q.n_minus = draw(buckets - 1);
  return q;
}

Quintuplet pick_quintuplet(const KdIndex& index, ItemId target, std::size_t pool_size, Rng& rng,
                           std::size_t buckets) {
  if (pool_size >= index.size()) {
    throw DomainError("pick_quintuplet: pool of " + std::to_string(pool_size) +
                      " needs more than " + std::to_string(index.size()) + " stored items");
  }
  return pick_quintuplet_from(index.knn_point(index.embedding(target), pool_size, target), rng,
                              buckets);
}

ExemplarIndex build_exemplar_index(EmbeddingStore store, std::size_t n_clusters,
                                   std::uint64_t seed) {
  ExemplarIndex idx;
  idx.clusters = cluster_quantize(store, n_clusters, seed);
  idx.kd = KdIndex::build(std::move(store));
  idx.seed = seed;
  return idx;
}

ExemplarSet find_exemplars(const ExemplarIndex& index, ItemId target, std::size_t k,
                           std::size_t offset, Rng& rng) {
  ExemplarSet set{target, index.kd.knn(target, k), {}};
  set.opposes = pick_opposing(index.clusters, target, offset, k, rng, set.supports);
  return set;
}

ExemplarSet find_exemplars_for_point(const ExemplarIndex& index, ItemId target,
                                     std::span<const double> point, std::size_t k,
                                     std::size_t offset, Rng& rng) {
  ExemplarSet set{target, {}, {}};
  for (const Neighbor& n : index.kd.knn_point(point, k, target)) set.supports.push_back(n.id);
  set.opposes = pick_opposing_from(index.clusters, index.clusters.nearest_cluster(point), target,
                                   offset, k, rng, set.supports);
  return set;
}

}  // namespace diffattn
