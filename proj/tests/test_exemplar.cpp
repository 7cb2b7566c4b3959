#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "diffattn/dataset.hpp"
#include "diffattn/error.hpp"
#include "diffattn/exemplar.hpp"
#include "oracles.hpp"

using namespace diffattn;

namespace {

EmbeddingStore store_of(const Matrix& pts) {
  EmbeddingStore s{pts, {}};
  for (std::size_t i = 0; i < pts.rows(); ++i) s.ids.push_back(static_cast<ItemId>(i));
  return s;
}

// Two tight blobs around -10 and +10 on every axis; the first half belongs to blob 0.
EmbeddingStore two_blobs(std::size_t per_blob, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.1);
  Matrix pts(2 * per_blob, dim);
  for (std::size_t i = 0; i < pts.rows(); ++i) {
    const double c = i < per_blob ? -10.0 : 10.0;
    for (std::size_t d = 0; d < dim; ++d) pts(i, d) = c + n(rng);
  }
  return store_of(pts);
}

}  // namespace

TEST_CASE("index construction") {
  CHECK_THROWS_AS(KdIndex::build(EmbeddingStore{}), DomainError);
  const KdIndex one = KdIndex::build(store_of(Matrix{{1.0, 2.0}}));
  const auto nn = one.knn_point(Vector{1.0, 2.0}, 1);
  REQUIRE(nn.size() == 1);
  CHECK(nn[0].id == 0);
  CHECK(nn[0].dist_sq == 0.0);
  CHECK_THROWS_AS(one.knn(0, 1), DomainError);

  EmbeddingStore dup = store_of(Matrix{{0.0}, {1.0}});
  dup.ids = {3, 3};
  CHECK_THROWS_AS(KdIndex::build(dup), DomainError);
}

TEST_CASE("leaves hold at most sixteen points and every id is reachable") {
  std::mt19937_64 rng(1);
  const KdIndex idx = KdIndex::build(store_of(oracle::random_matrix(1000, 16, rng)));
  std::set<std::uint32_t> seen;
  for (const auto& node : idx.nodes()) {
    if (!node.leaf()) continue;
    CHECK(node.end - node.begin <= 16);
    for (std::uint32_t i = node.begin; i < node.end; ++i) seen.insert(idx.order()[i]);
  }
  CHECK(seen.size() == 1000);
}

TEST_CASE("knn equals exhaustive scan on random stores") {
  std::mt19937_64 rng(2);
  for (std::size_t dim : {2, 5, 16}) {
    const Matrix pts = oracle::random_matrix(1000, dim, rng);
    const KdIndex idx = KdIndex::build(store_of(pts));
    std::uniform_int_distribution<std::size_t> pick(0, 999);
    for (int q = 0; q < 50; ++q) {
      const std::size_t id = pick(rng);
      for (std::size_t k : {1, 4, 5, 17}) {
        const Vector query(pts.row(id).begin(), pts.row(id).end());
        const auto want = oracle::brute_knn(pts, query, k, static_cast<long>(id));
        CHECK(idx.knn(static_cast<ItemId>(id), k) == want);
      }
      const Vector free_point = oracle::random_vector(dim, rng);
      const auto got = idx.knn_point(free_point, 5);
      const auto want = oracle::brute_knn(pts, free_point, 5);
      REQUIRE(got.size() == 5);
      for (std::size_t i = 0; i < 5; ++i) CHECK(got[i].id == want[i]);
    }
  }
}

TEST_CASE("knn geometry and edge cases") {
  const KdIndex line = KdIndex::build(store_of(Matrix{{0.0}, {1.0}, {2.0}}));
  auto mid = line.knn(1, 2);
  CHECK(mid == std::vector<ItemId>{0, 2});  // equidistant: lower id first
  CHECK(line.knn(1, 0).empty());
  CHECK_THROWS_AS(line.knn(1, 3), DomainError);
  CHECK_THROWS_AS(line.knn_point(Vector{0.0, 1.0}, 1), ShapeError);

  const KdIndex dup = KdIndex::build(store_of(Matrix{{5.0, 5.0}, {0.0, 0.0}, {0.1, 0.0}, {0.0, 0.0}}));
  const auto near = dup.knn_point(Vector{0.0, 0.0}, 3);
  CHECK(near[0].id == 1);
  CHECK(near[1].id == 3);
  CHECK(near[2].id == 2);
}

TEST_CASE("ties resolve to the lower id under arbitrary id labels") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> grid(0, 3);
  Matrix pts(400, 2);
  for (double& x : pts.flat()) x = grid(rng);  // heavy duplication
  EmbeddingStore s{pts, {}};
  for (std::size_t i = 0; i < 400; ++i) s.ids.push_back(static_cast<ItemId>(7919 * i % 10007));
  const KdIndex idx = KdIndex::build(s);
  for (int q = 0; q < 30; ++q) {
    const Vector query{grid(rng) + 0.0, grid(rng) + 0.0};
    std::vector<std::pair<double, ItemId>> all;
    for (std::size_t i = 0; i < 400; ++i) {
      const double dx = pts(i, 0) - query[0], dy = pts(i, 1) - query[1];
      all.emplace_back(dx * dx + dy * dy, s.ids[i]);
    }
    std::sort(all.begin(), all.end());
    const auto got = idx.knn_point(query, 40);
    for (std::size_t i = 0; i < 40; ++i) CHECK(got[i].id == all[i].second);
  }
}

TEST_CASE("k-means recovers planted blobs") {
  std::mt19937_64 rng(4);
  const EmbeddingStore s = two_blobs(50, 3, rng);
  const ClusterOrdering c = cluster_quantize(s, 2, 9);
  for (std::size_t i = 1; i < 50; ++i) CHECK(c.assignment[i] == c.assignment[0]);
  for (std::size_t i = 51; i < 100; ++i) CHECK(c.assignment[i] == c.assignment[50]);
  CHECK(c.assignment[0] != c.assignment[50]);

  const ClusterOrdering one = cluster_quantize(s, 1, 9);
  for (auto a : one.assignment) CHECK(a == 0);

  CHECK(cluster_quantize(s, 2, 9) == c);
  CHECK_THROWS_AS(cluster_quantize(s, 101, 9), DomainError);
}

TEST_CASE("k-means is deterministic and assigns every id once") {
  std::mt19937_64 rng(5);
  const EmbeddingStore s = store_of(oracle::random_matrix(500, 4, rng));
  const ClusterOrdering a = cluster_quantize(s, 20, 3);
  const ClusterOrdering b = cluster_quantize(s, 20, 3);
  CHECK(a == b);
  std::size_t total = 0;
  for (const auto& m : a.members) total += m.size();
  CHECK(total == 500);
  for (std::size_t cl = 0; cl < 20; ++cl) {
    auto order = a.ordering_from(cl);
    CHECK(order.front() == cl);
    std::sort(order.begin(), order.end());
    for (std::size_t i = 0; i < 20; ++i) CHECK(order[i] == i);
  }
}

TEST_CASE("opposing picks") {
  std::mt19937_64 rng(6);
  const EmbeddingStore s = two_blobs(40, 2, rng);
  const ClusterOrdering c = cluster_quantize(s, 2, 1);
  Rng pick_rng(2);
  SUBCASE("offset zero stays in the target's cluster") {
    const auto ids = pick_opposing(c, 3, 0, 5, pick_rng);
    for (ItemId id : ids) {
      CHECK(c.cluster_of(id) == c.cluster_of(3));
      CHECK(id != 3);
    }
  }
  SUBCASE("offset one crosses to the other blob") {
    const auto ids = pick_opposing(c, 3, 1, 5, pick_rng);
    for (ItemId id : ids) CHECK(id >= 40);
    const auto back = pick_opposing(c, 60, 1, 5, pick_rng);
    for (ItemId id : back) CHECK(id < 40);
  }
  SUBCASE("thin clusters spill to neighbouring ranks") {
    const auto ids = pick_opposing(c, 3, 1, 60, pick_rng);
    CHECK(ids.size() == 60);
    CHECK(std::find(ids.begin(), ids.end(), 3) == ids.end());
    CHECK(std::set<ItemId>(ids.begin(), ids.end()).size() == 60);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(pick_opposing(c, 3, 2, 1, pick_rng), DomainError);
    CHECK_THROWS_AS(pick_opposing(c, 3, 1, 80, pick_rng), DomainError);
  }
}

TEST_CASE("exemplar sets on planted data: supports are nearer than opposes") {
  GenConfig g;
  g.n_items = 800;
  g.seed = 11;
  const Dataset ds = generate(g);
  std::vector<std::size_t> rows(ds.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const ExemplarIndex idx = build_exemplar_index(joint_store(ds, rows), 20, 5);
  Rng rng(3);
  for (std::size_t offset : {10, 15}) {
    for (ItemId t = 0; t < 100; ++t) {
      const ExemplarSet set = find_exemplars(idx, t, 3, offset, rng);
      CHECK(set.supports.size() == 3);
      CHECK(set.opposes.size() == 3);
      std::set<ItemId> all(set.supports.begin(), set.supports.end());
      all.insert(set.opposes.begin(), set.opposes.end());
      CHECK(all.size() == 6);
      CHECK(all.count(t) == 0);
      auto mean_dist = [&](const std::vector<ItemId>& ids) {
        double m = 0.0;
        for (ItemId id : ids) m += std::sqrt(l2_norm_sq(sub(ds.items[t].joint, ds.items[id].joint)));
        return m / static_cast<double>(ids.size());
      };
      CHECK(mean_dist(set.supports) < mean_dist(set.opposes));
    }
  }
}

TEST_CASE("quintuplet buckets") {
  // points on a line at 0, 1, 2, ...; the target is point 0
  Matrix pts(201, 1);
  for (std::size_t i = 0; i < 201; ++i) pts(i, 0) = static_cast<double>(i);
  const KdIndex idx = KdIndex::build(store_of(pts));
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const Quintuplet q = pick_quintuplet(idx, 0, 100, rng);
    // buckets of 5 neighbours: ids 1-5, 6-10, ..., 96-100
    CHECK(q.p_plus >= 1);
    CHECK(q.p_plus <= 5);
    CHECK(q.p_plusplus >= 6);
    CHECK(q.p_plusplus <= 10);
    CHECK(q.n_minusminus >= 91);
    CHECK(q.n_minusminus <= 95);
    CHECK(q.n_minus >= 96);
    CHECK(q.n_minus <= 100);
    CHECK(pts(q.p_plus, 0) < pts(q.n_minus, 0));
    std::set<ItemId> distinct{q.p_plus, q.p_plusplus, q.n_minusminus, q.n_minus};
    CHECK(distinct.size() == 4);
  }
  CHECK_THROWS_AS(pick_quintuplet(idx, 0, 60, rng), DomainError);   // 60 < 4 * 20
  CHECK_THROWS_AS(pick_quintuplet(idx, 0, 201, rng), DomainError);  // larger than the store
}

TEST_CASE("held-out points retrieve from the stored set") {
  std::mt19937_64 rng(7);
  const Matrix pts = oracle::random_matrix(300, 4, rng);
  const ExemplarIndex idx = build_exemplar_index(store_of(pts), 10, 2);
  Rng pick(1);
  const Vector query = oracle::random_vector(4, rng);
  const ExemplarSet set = find_exemplars_for_point(idx, 9999, query, 4, 5, pick);
  CHECK(set.supports == oracle::brute_knn(pts, query, 4));
  CHECK(set.opposes.size() == 4);
  for (ItemId id : set.opposes) {
    CHECK(std::find(set.supports.begin(), set.supports.end(), id) == set.supports.end());
  }
}
