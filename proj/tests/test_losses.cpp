#include <doctest.h>

#include <cmath>
#include <random>

#include "diffattn/error.hpp"
#include "diffattn/losses.hpp"
#include "oracles.hpp"

using namespace diffattn;

namespace {

double sq(const Vector& a, const Vector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

Vector random_distribution(std::size_t n, std::mt19937_64& rng) {
  Vector v = oracle::random_vector(n, rng, 0.01, 1.0);
  double t = 0.0;
  for (double x : v) t += x;
  for (double& x : v) x /= t;
  return v;
}

}  // namespace

TEST_CASE("cross-entropy fixtures") {
  Vector perfect(10, 0.0);
  perfect[4] = 1.0;
  CHECK(cross_entropy(perfect, 4).value == 0.0);

  const Vector uniform(4, 0.25);
  for (std::size_t label = 0; label < 4; ++label) {
    CHECK(cross_entropy(uniform, label).value == doctest::Approx(std::log(4.0) / 4.0).epsilon(1e-15));
  }

  std::mt19937_64 rng(1);
  const Vector p = random_distribution(7, rng);
  CHECK(std::abs(cross_entropy(p, 3).value - (-std::log(p[3]) / 7.0)) < 1e-12);
  CHECK(std::abs(cross_entropy(p, 3, false).value - (-std::log(p[3]))) < 1e-12);
}

TEST_CASE("cross-entropy clamps a zero probability and flags it") {
  const Vector p{1.0, 0.0};
  const CrossEntropy ce = cross_entropy(p, 1);
  CHECK(ce.clamped);
  CHECK(ce.value == doctest::Approx(-std::log(1e-12) / 2.0));
  CHECK_FALSE(cross_entropy(p, 0).clamped);
  CHECK_THROWS_AS(cross_entropy(p, 2), DomainError);
}

TEST_CASE("cross-entropy logit gradient matches finite differences") {
  std::mt19937_64 rng(2);
  Vector logits = oracle::random_vector(5, rng, -2.0, 2.0);
  const std::size_t label = 2;
  for (bool scaled : {true, false}) {
    const Vector g = cross_entropy_logit_grad(softmax(logits), label, scaled);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double saved = logits[i];
      logits[i] = saved + 1e-6;
      const double up = cross_entropy(softmax(logits), label, scaled).value;
      logits[i] = saved - 1e-6;
      const double down = cross_entropy(softmax(logits), label, scaled).value;
      logits[i] = saved;
      CHECK(g[i] == doctest::Approx((up - down) / 2e-6).epsilon(1e-6));
    }
  }
}

TEST_CASE("triplet loss fixtures") {
  SUBCASE("satisfied margin") {
    const Vector s{0.2, 0.8}, sm{1.0, 0.0};
    REQUIRE(sq(s, sm) >= 0.2);
    CHECK(triplet_loss(s, s, sm, 0.2) == 0.0);
  }
  SUBCASE("opposing equals target") {
    const Vector s{0.3, 0.7}, sp{0.9, 0.1};
    CHECK(triplet_loss(s, sp, s, 0.2) == doctest::Approx(sq(s, sp) + 0.2).epsilon(1e-15));
  }
  SUBCASE("hand computed") {
    CHECK(triplet_loss(Vector{0.0}, Vector{1.0}, Vector{3.0}, 0.2) == 0.0);
  }
  CHECK_THROWS_AS(triplet_loss(Vector{0.0, 1.0}, Vector{1.0}, Vector{3.0}, 0.2), ShapeError);
}

TEST_CASE("triplet loss is non-negative and zero exactly when the margin holds") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const Vector s = oracle::random_vector(6, rng), sp = oracle::random_vector(6, rng),
                 sm = oracle::random_vector(6, rng);
    const double l = triplet_loss(s, sp, sm, 0.2);
    CHECK(l >= 0.0);
    CHECK((l == 0.0) == (sq(s, sm) >= sq(s, sp) + 0.2));
  }
}

TEST_CASE("triplet gradients: closed forms") {
  SUBCASE("inactive hinge gives zeros") {
    const TripletGrads g = triplet_grads(Vector{0.0}, Vector{1.0}, Vector{3.0}, 0.2);
    CHECK_FALSE(g.active);
    CHECK(g.target == Vector{0.0});
    CHECK(g.support == Vector{0.0});
    CHECK(g.oppose == Vector{0.0});
  }
  SUBCASE("active hinge, hand evaluated") {
    const TripletGrads g = triplet_grads(Vector{1.0}, Vector{0.0}, Vector{2.0}, 0.2);
    CHECK(g.active);
    CHECK(g.target == Vector{4.0});
    CHECK(g.support == Vector{-2.0});
    CHECK(g.oppose == Vector{-2.0});
  }
}

TEST_CASE("triplet gradients match finite differences off the kink") {
  std::mt19937_64 rng(4);
  int active = 0;
  for (int trial = 0; trial < 300; ++trial) {
    Vector s = oracle::random_vector(5, rng), sp = oracle::random_vector(5, rng),
           sm = oracle::random_vector(5, rng);
    const double margin = sq(s, sp) + 0.2 - sq(s, sm);
    if (std::abs(margin) < 1e-3) continue;
    const TripletGrads g = triplet_grads(s, sp, sm, 0.2);
    active += g.active;
    auto fd = [&](Vector& v, std::size_t i) {
      const double saved = v[i];
      v[i] = saved + 1e-6;
      const double up = triplet_loss(s, sp, sm, 0.2);
      v[i] = saved - 1e-6;
      const double down = triplet_loss(s, sp, sm, 0.2);
      v[i] = saved;
      return (up - down) / 2e-6;
    };
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(std::abs(g.target[i] - fd(s, i)) < 1e-6);
      CHECK(std::abs(g.support[i] - fd(sp, i)) < 1e-6);
      CHECK(std::abs(g.oppose[i] - fd(sm, i)) < 1e-6);
    }
  }
  CHECK(active > 20);
}

TEST_CASE("target gradient is minus the sum of the exemplar gradients") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector s = oracle::random_vector(8, rng), sp = oracle::random_vector(8, rng);
    const Vector sm = oracle::random_vector(8, rng, 2.0, 3.0);
    const TripletGrads g = triplet_grads(s, sp, sm, 100.0);
    REQUIRE(g.active);
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(std::abs(g.target[i] + g.support[i] + g.oppose[i]) < 1e-12);
      CHECK(std::abs(g.target[i] - 2.0 * (sm[i] - sp[i])) < 1e-12);
    }
  }
}

TEST_CASE("joint loss") {
  CHECK(joint_loss(0.7, 0.5, 0.0) == 0.7);
  CHECK(joint_loss(1.0, 0.5, 10.0) == 6.0);
  CHECK(joint_loss(1.0, 0.5, 20.0) - 1.0 == 2.0 * (joint_loss(1.0, 0.5, 10.0) - 1.0));
}

TEST_CASE("quintuplet loss fixtures") {
  const QuintupletConfig cfg;
  const Vector p{0.4, -1.2};
  CHECK(quintuplet_loss(p, p, p, p, p, cfg, 3.0) ==
        doctest::Approx(cfg.alpha1 + cfg.alpha2 + cfg.alpha3 + cfg.lambda * 3.0).epsilon(1e-15));

  // a at 0 and the others at 0.1, 0.5, 2, 3 on a line
  const Vector a{0.0}, pp{0.1}, ppp{0.5}, nmm{2.0}, nm{3.0};
  const QuintupletTerms t = quintuplet_terms(a, pp, ppp, nmm, nm, cfg);
  CHECK(t.near == doctest::Approx(0.006 + 0.01 - 0.25));
  CHECK(t.middle == doctest::Approx(0.2 + 0.25 - 4.0));
  CHECK(t.far == doctest::Approx(0.006 + 4.0 - 9.0));
  CHECK(quintuplet_loss(a, pp, ppp, nmm, nm, cfg, 0.0) == 0.0);
  CHECK(quintuplet_loss(a, pp, ppp, nmm, nm, cfg, 2.0) == doctest::Approx(cfg.lambda * 2.0));

  QuintupletConfig bad;
  bad.alpha2 = -1.0;
  CHECK_THROWS_AS(quintuplet_loss(a, pp, ppp, nmm, nm, bad, 0.0), DomainError);
  CHECK_THROWS_AS(quintuplet_loss(a, Vector{0.0, 1.0}, ppp, nmm, nm, cfg, 0.0), ShapeError);
}

TEST_CASE("quintuplet subgradient matches finite differences on active hinges") {
  std::mt19937_64 rng(6);
  const QuintupletConfig cfg{0.006, 0.2, 0.006, 0.0};
  int checked = 0;
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Vector> x;
    for (int j = 0; j < 5; ++j) x.push_back(oracle::random_vector(4, rng));
    const QuintupletTerms t = quintuplet_terms(x[0], x[1], x[2], x[3], x[4], cfg);
    if (std::abs(t.near) < 1e-3 || std::abs(t.middle) < 1e-3 || std::abs(t.far) < 1e-3) continue;
    const QuintupletGrads g = quintuplet_grads(x[0], x[1], x[2], x[3], x[4], cfg);
    const std::vector<const Vector*> gs{&g.anchor, &g.p_plus, &g.p_plusplus, &g.n_minusminus,
                                        &g.n_minus};
    auto loss = [&] { return quintuplet_loss(x[0], x[1], x[2], x[3], x[4], cfg, 0.0); };
    for (int j = 0; j < 5; ++j) {
      for (std::size_t i = 0; i < 4; ++i) {
        const double saved = x[j][i];
        x[j][i] = saved + 1e-6;
        const double up = loss();
        x[j][i] = saved - 1e-6;
        const double down = loss();
        x[j][i] = saved;
        CHECK(std::abs((*gs[j])[i] - (up - down) / 2e-6) < 1e-6);
      }
    }
    ++checked;
  }
  CHECK(checked > 50);
}

TEST_CASE("zero quintuplet loss implies the distance ordering") {
  std::mt19937_64 rng(7);
  const QuintupletConfig cfg;
  int zeros = 0;
  for (int trial = 0; trial < 20000; ++trial) {
    const Vector a = oracle::random_vector(2, rng, -0.1, 0.1);
    const Vector p1 = oracle::random_vector(2, rng, -0.3, 0.3);
    const Vector p2 = oracle::random_vector(2, rng, -1.0, 1.0);
    const Vector n2 = oracle::random_vector(2, rng, -3.0, 3.0);
    const Vector n1 = oracle::random_vector(2, rng, -6.0, 6.0);
    if (quintuplet_loss(a, p1, p2, n2, n1, cfg, 0.0) != 0.0) continue;
    ++zeros;
    CHECK(sq(a, p1) + cfg.alpha1 <= sq(a, p2));
    CHECK(sq(a, p2) + cfg.alpha2 <= sq(a, n2));
    CHECK(sq(a, n2) + cfg.alpha3 <= sq(a, n1));
  }
  CHECK(zeros > 10);
}
