#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "memfcn/autograd.hpp"
#include "memfcn/losses.hpp"
#include "memfcn/rng.hpp"
#include "oracles.hpp"

using namespace memfcn;

namespace {

Tensor random_logits(Shape s, Rng& rng, DType dt = DType::F64) {
  Tensor t(std::move(s), dt);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, 2.0 * rng.normal());
  return t;
}

Tensor random_labels(Shape s, std::int64_t classes, Rng& rng) {
  Tensor t(std::move(s), DType::F32);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.set(i, static_cast<double>(static_cast<std::int64_t>(rng.uniform() * classes) % classes));
  return t;
}

}  // namespace

TEST_CASE("dice+ce forward matches the straight-formula reference") {
  Rng rng(41);
  Tensor logits = random_logits({2, 3, 3, 3, 3}, rng);
  Tensor labels = random_labels({2, 3, 3, 3}, 3, rng);
  for (auto [wce, wd] : {std::pair{1.0, 1.0}, std::pair{1.0, 0.0}, std::pair{0.0, 1.0},
                         std::pair{0.3, 0.7}}) {
    DiceCeAux aux = dice_ce_forward(logits, labels, wce, wd, kDiceEps, nullptr);
    const double want = oracle::dice_ce(logits, labels, wce, wd, kDiceEps);
    REQUIRE(aux.loss == Catch::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("probability output is the channel softmax") {
  Rng rng(42);
  Tensor logits = random_logits({1, 4, 2, 2, 2}, rng, DType::F32);
  Tensor labels = random_labels({1, 2, 2, 2}, 4, rng);
  Tensor p;
  dice_ce_forward(logits, labels, 1.0, 1.0, kDiceEps, &p);
  REQUIRE(p.bitwise_equal(softmax_channels(logits)));
}

TEST_CASE("perfectly confident correct prediction drives the loss toward zero") {
  Tensor labels = Tensor::from_values({1, 1, 1, 4}, {0.0, 1.0, 2.0, 1.0});
  Tensor logits({1, 3, 1, 1, 4}, DType::F64);
  for (std::int64_t v = 0; v < 4; ++v)
    for (std::int64_t c = 0; c < 3; ++c)
      logits.set(c * 4 + v, c == static_cast<std::int64_t>(labels.at(v)) ? 50.0 : -50.0);
  DiceCeAux aux = dice_ce_forward(logits, labels, 1.0, 1.0, kDiceEps, nullptr);
  REQUIRE(aux.ce <= 1e-12);
  REQUIRE(aux.dice_loss <= 1e-5);
  REQUIRE(aux.loss <= 2e-5);
}

TEST_CASE("dice+ce backward matches central differences") {
  Rng rng(43);
  Tensor logits = random_logits({1, 3, 2, 4, 2}, rng);
  Tensor labels = random_labels({1, 2, 4, 2}, 3, rng);
  for (auto [wce, wd] : {std::pair{1.0, 1.0}, std::pair{2.0, 0.5}}) {
    Tensor p;
    DiceCeAux aux = dice_ce_forward(logits, labels, wce, wd, kDiceEps, &p);
    Tensor g = dice_ce_backward(p, labels, aux, wce, wd, kDiceEps, 1.0, DType::F64);
    Tensor fd = finite_diff_grad(
        [&](const Tensor& lg) {
          return oracle::dice_ce(lg, labels, wce, wd, kDiceEps);
        },
        logits);
    REQUIRE(rel_error(fd, g) <= 1e-6);
  }
}

TEST_CASE("backward scales linearly with the seed") {
  Rng rng(44);
  Tensor logits = random_logits({1, 3, 2, 2, 2}, rng);
  Tensor labels = random_labels({1, 2, 2, 2}, 3, rng);
  Tensor p;
  DiceCeAux aux = dice_ce_forward(logits, labels, 1.0, 1.0, kDiceEps, &p);
  Tensor g1 = dice_ce_backward(p, labels, aux, 1.0, 1.0, kDiceEps, 1.0, DType::F64);
  Tensor g2 = dice_ce_backward(p, labels, aux, 1.0, 1.0, kDiceEps, 32768.0, DType::F64);
  for (std::int64_t i = 0; i < g1.numel(); ++i)
    REQUIRE(g2.at(i) == Catch::Approx(32768.0 * g1.at(i)).epsilon(1e-12));
}

TEST_CASE("dice score on hard labels") {
  Tensor a = Tensor::from_values({1, 1, 1, 4}, {0.0, 1.0, 1.0, 2.0});
  Tensor b = Tensor::from_values({1, 1, 1, 4}, {0.0, 1.0, 2.0, 2.0});
  // class 1: |P|=2, |G|=1, overlap 1 -> 2*1/(2+1)
  REQUIRE(dice_score(a, b, 1) == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
  // class 2: |P|=1, |G|=2, overlap 1 -> 2*1/(1+2)
  REQUIRE(dice_score(a, b, 2) == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
  // class absent from both volumes scores 1 by convention
  REQUIRE(dice_score(a, b, 7) == 1.0);
  // disjoint
  Tensor c = Tensor::from_values({1, 1, 1, 4}, {1.0, 0.0, 0.0, 0.0});
  Tensor d = Tensor::from_values({1, 1, 1, 4}, {0.0, 1.0, 1.0, 1.0});
  REQUIRE(dice_score(c, d, 1) == 0.0);
}

TEST_CASE("labels outside the class range are rejected") {
  Tensor logits({1, 3, 1, 1, 2}, DType::F32);
  Tensor labels = Tensor::from_values({1, 1, 1, 2}, {0.0, 3.0});
  REQUIRE_THROWS_AS(dice_ce_forward(logits, labels, 1.0, 1.0, kDiceEps, nullptr), ShapeError);
}
