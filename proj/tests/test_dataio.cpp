#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "diffattn/container.hpp"
#include "diffattn/dataset.hpp"
#include "diffattn/error.hpp"
#include "diffattn/metrics.hpp"
#include "diffattn/trainer.hpp"

using namespace diffattn;

namespace {

GenConfig small_config(std::uint64_t seed) {
  GenConfig g;
  g.n_items = 300;
  g.seed = seed;
  return g;
}

IoError::Kind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const IoError& e) {
    return e.kind();
  }
  FAIL("expected an IoError");
  return IoError::Kind::Open;
}

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "diffattn_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("generator honours the header and item invariants") {
  const Dataset ds = generate(small_config(1));
  CHECK(ds.size() == 300);
  CHECK(ds.header.regions == 16);
  CHECK(ds.header.dim == 32);
  CHECK(ds.header.embed_dim == 16);
  CHECK(ds.header.classes == 8);
  CHECK(ds.header.grid_rows * ds.header.grid_cols == 16);
  CHECK_NOTHROW(ds.validate());
  for (const auto& it : ds.items) {
    REQUIRE(it.reference.has_value());
    double total = 0.0;
    for (double x : *it.reference) {
      CHECK(x > 0.0);
      total += x;
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
    CHECK(it.answer < 8);
    // reference peaks at the concept's planted region
    const auto peak = std::max_element(it.reference->begin(), it.reference->end()) - it.reference->begin();
    const auto c = static_cast<std::ptrdiff_t>(ds.truth.centers[it.concept_id]);
    const auto cols = static_cast<std::ptrdiff_t>(ds.header.grid_cols);
    CHECK(std::abs(peak / cols - c / cols) <= 1);
    CHECK(std::abs(peak % cols - c % cols) <= 1);
  }
}

TEST_CASE("default cluster count follows the item count") {
  GenConfig g;
  CHECK(g.resolved_clusters() == 50);
  g.n_items = 400;
  CHECK(g.resolved_clusters() == 10);
  g.n_clusters = 7;
  CHECK(g.resolved_clusters() == 7);
}

TEST_CASE("generation is deterministic under a fixed seed") {
  CHECK(generate(small_config(5)) == generate(small_config(5)));
  CHECK_FALSE(generate(small_config(5)) == generate(small_config(6)));
}

TEST_CASE("without noise every nearest joint neighbour shares the concept") {
  GenConfig g = small_config(2);
  g.noise_sigma = 0.0;
  const Dataset ds = generate(g);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double best = 1e300;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < ds.size(); ++j) {
      if (j == i) continue;
      const double d = l2_norm_sq(sub(ds.items[i].joint, ds.items[j].joint));
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    CHECK(ds.items[arg].concept_id == ds.items[i].concept_id);
  }
}

TEST_CASE("annotator accuracy of the true answer matches a direct simulation") {
  // Independent estimate: ten annotators, each correct with probability 0.7.
  std::mt19937_64 rng(123);
  std::bernoulli_distribution correct(0.7);
  double sim = 0.0;
  const int draws = 100000;
  for (int d = 0; d < draws; ++d) {
    int m = 0;
    for (int a = 0; a < 10; ++a) m += correct(rng);
    sim += std::min(m / 3.0, 1.0);
  }
  sim /= draws;

  GenConfig g;
  g.n_items = 20000;
  g.corruption = 0.3;
  g.seed = 9;
  const Dataset ds = generate(g);
  double got = 0.0;
  for (const auto& it : ds.items) {
    got += vqa_accuracy(it.answer, std::span<const std::uint32_t>(it.annotations));
  }
  got /= static_cast<double>(ds.size());
  CHECK(got == doctest::Approx(sim).epsilon(0.005));
}

TEST_CASE("corruption extremes") {
  GenConfig g = small_config(3);
  g.corruption = 0.0;
  for (const auto& it : generate(g).items) {
    for (auto a : it.annotations) CHECK(a == it.answer);
  }
  g.corruption = 1.0;
  for (const auto& it : generate(g).items) {
    for (auto a : it.annotations) CHECK(a != it.answer);
  }
}

TEST_CASE("decoys repeat the object with a wrong answer away from the centre") {
  GenConfig g = small_config(4);
  g.noise_sigma = 0.0;
  g.decoy_rate = 1.0;
  const Dataset ds = generate(g);
  const std::size_t half = ds.header.dim / 2;
  for (const auto& it : ds.items) {
    int decoys = 0;
    for (std::size_t r = 0; r < ds.header.regions; ++r) {
      const auto row = it.image.row(r);
      const double obj = dot(row.subspan(0, half), ds.truth.objects.row(it.concept_id).subspan(0, half));
      const double own = dot(row.subspan(half), ds.truth.answers.row(it.answer).subspan(half));
      // full-strength object whose answer attribute is not the item's own
      if (obj > 0.999 && own < 0.99) {
        ++decoys;
        const auto peak = std::max_element(it.reference->begin(), it.reference->end()) - it.reference->begin();
        CHECK(static_cast<std::ptrdiff_t>(r) != peak);
      }
    }
    CHECK(decoys == 1);
  }
}

TEST_CASE("invalid generator settings are rejected") {
  auto bad = [](auto mutate) {
    GenConfig g = small_config(1);
    mutate(g);
    CHECK_THROWS_AS(generate(g), DomainError);
  };
  bad([](GenConfig& g) { g.n_items = 0; });
  bad([](GenConfig& g) { g.regions = 0; });
  bad([](GenConfig& g) { g.classes = 1; });
  bad([](GenConfig& g) { g.classes = 400; });
  bad([](GenConfig& g) { g.noise_sigma = -0.1; });
  bad([](GenConfig& g) { g.corruption = 1.5; });
  bad([](GenConfig& g) { g.decoy_rate = -0.5; });
}

TEST_CASE("held-out split takes the tail") {
  const Split s = holdout_split(10, 0.2);
  CHECK(s.train == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});
  CHECK(s.test == std::vector<std::size_t>{8, 9});
  CHECK(holdout_split(10, 0.0).test.empty());
  CHECK_THROWS_AS(holdout_split(10, 1.0), DomainError);
}

TEST_CASE("container round trips are bit exact") {
  const Dataset ds = generate(small_config(7));
  SUBCASE("dataset") {
    const auto path = temp_path("ds.dfa");
    save(ds, path);
    CHECK(load_dataset(path) == ds);
  }
  SUBCASE("index") {
    const Split sp = holdout_split(ds.size(), 0.2);
    const ExemplarIndex idx = build_exemplar_index(joint_store(ds, sp.train), 6, 0xfedcba9876543210ULL);
    const auto path = temp_path("idx.dfa");
    save(idx, path);
    const ExemplarIndex back = load_index(path);
    CHECK(back == idx);
    CHECK(back.seed == 0xfedcba9876543210ULL);
    Rng a(1), b(1);
    CHECK(find_exemplars(back, 5, 3, 2, a).opposes == find_exemplars(idx, 5, 3, 2, b).opposes);
  }
  SUBCASE("params of every model") {
    Rng rng(3);
    for (ModelKind kind : kAllModels) {
      for (DcnScaling sc : {DcnScaling::Scalar, DcnScaling::Diagonal, DcnScaling::Full}) {
        ModelShape shape;
        shape.learned_scaling = sc;
        const ModelParams p = init_model(kind, shape, rng);
        CHECK(decode_params(encode(p)) == p);
      }
    }
  }
  SUBCASE("attention maps") {
    std::mt19937_64 rng(4);
    AttentionMaps m{4, 4, Matrix(3, 16)};
    std::uniform_real_distribution<double> u;
    for (double& x : m.maps.flat()) x = u(rng);
    CHECK(decode_maps(encode(m)) == m);
    CHECK_THROWS_AS(encode(AttentionMaps{3, 3, Matrix(1, 16)}), ShapeError);
  }
}

TEST_CASE("container header layout") {
  const auto bytes = encode_record(RecordType::Params, {Tensor::vector(Vector{1.5})});
  REQUIRE(bytes.size() == 4 + 4 + 4 + 8 + 4 + 4 + 8);
  CHECK(std::memcmp(bytes.data(), "DFA1", 4) == 0);
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 3);
  CHECK(bytes[12] == 16);  // payload: ndim, one dim, one double
  CHECK(bytes[20] == 1);   // ndim
  CHECK(bytes[24] == 1);   // dim
  double v;
  std::memcpy(&v, bytes.data() + 28, 8);
  CHECK(v == 1.5);
  CHECK(record_type(bytes) == RecordType::Params);
}

TEST_CASE("container errors are distinguishable") {
  const auto good = encode(generate(small_config(8)));

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(kind_of([&] { decode_dataset(bad_magic); }) == IoError::Kind::BadMagic);

  auto bad_version = good;
  bad_version[4] = 9;
  CHECK(kind_of([&] { decode_dataset(bad_version); }) == IoError::Kind::BadVersion);

  CHECK(kind_of([&] { decode_params(good); }) == IoError::Kind::WrongRecord);

  std::vector<std::uint8_t> cut(good.begin(), good.end() - 100);
  try {
    decode_dataset(cut);
    FAIL("expected truncation");
  } catch (const IoError& e) {
    CHECK(e.kind() == IoError::Kind::Truncated);
    const std::string msg = e.what();
    const std::size_t payload = good.size() - 20;
    CHECK(msg.find("expected " + std::to_string(payload)) != std::string::npos);
    CHECK(msg.find("got " + std::to_string(payload - 100)) != std::string::npos);
  }
  std::vector<std::uint8_t> header_only(good.begin(), good.begin() + 10);
  CHECK(kind_of([&] { decode_dataset(header_only); }) == IoError::Kind::Truncated);

  auto trailing = good;
  trailing.push_back(0);
  CHECK(kind_of([&] { decode_dataset(trailing); }) == IoError::Kind::Malformed);

  // a grid that does not match the map width
  const auto skewed = encode_record(RecordType::AttentionMaps,
                                    {Tensor::vector(Vector{3.0, 3.0}), Tensor::from(Matrix(2, 16))});
  CHECK(kind_of([&] { decode_maps(skewed); }) == IoError::Kind::ShapeMismatch);

  CHECK(kind_of([&] { read_bytes(temp_path("does-not-exist.dfa")); }) == IoError::Kind::Open);
}
