#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "memfcn/autograd.hpp"
#include "memfcn/inplace_abn.hpp"
#include "memfcn/rng.hpp"
#include "oracles.hpp"

using namespace memfcn;

namespace {

Tensor randn(Shape s, Rng& rng, DType dt = DType::F32, double scale = 1.0) {
  Tensor t(std::move(s), dt);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, scale * rng.normal());
  return t;
}

Tensor safe_gamma(std::int64_t c, Rng& rng, DType dt) {
  Tensor g({c}, dt);
  for (std::int64_t i = 0; i < c; ++i) {
    const double v = 0.5 + rng.uniform();
    g.set(i, rng.uniform() < 0.5 ? -v : v);
  }
  return g;
}

}  // namespace

TEST_CASE("fused forward is bit-identical to bn followed by leaky relu") {
  Rng rng(31);
  for (DType dt : {DType::F32, DType::F64}) {
    Tensor x = randn({2, 4, 4, 4, 4}, rng, dt);
    Tensor gamma = safe_gamma(4, rng, dt);
    Tensor beta = randn({4}, rng, dt, 0.5);

    Tensor z_ref;
    bn_act_forward_train(x, gamma, beta, kDefaultBnEps, 0.1, kDefaultLeakySlope,
                         /*apply_act=*/true, &z_ref, nullptr);

    Tensor z = x.clone();
    IabnStats st = iabn_forward(z, gamma, beta, kDefaultBnEps, 0.1, kDefaultLeakySlope, nullptr);
    REQUIRE(z.bitwise_equal(z_ref));
    REQUIRE(st.mean.size() == 4);
  }
}

TEST_CASE("fused forward literally overwrites the input storage") {
  Rng rng(32);
  Tensor x = randn({1, 2, 2, 2, 2}, rng);
  Tensor alias = x.reshaped(x.shape());  // second view of the same storage
  Tensor before = x.clone();
  Tensor gamma = Tensor::full({2}, 1.0, DType::F32);
  Tensor beta = Tensor::zeros({2}, DType::F32);
  iabn_forward(x, gamma, beta, 1e-5, 0.1, 0.01, nullptr);
  REQUIRE(alias.shares_storage(x));
  REQUIRE(alias.bitwise_equal(x));   // the view sees the activation output
  REQUIRE(!alias.bitwise_equal(before));
}

TEST_CASE("reconstruction worked examples") {
  // z = phi(gamma*xhat + beta); xhat = (phi_inverse(z) - beta) / gamma
  Tensor z1 = Tensor::full({1, 1, 1, 1, 2}, 2.5, DType::F64);
  Tensor xh1 = iabn_reconstruct(z1, Tensor::full({1}, 2.0, DType::F64),
                                Tensor::full({1}, 0.5, DType::F64), 0.01, kDefaultGammaFloor);
  REQUIRE(xh1.at(0) == 1.0);

  Tensor z2 = Tensor::full({1, 1, 1, 1, 2}, -0.25, DType::F64);
  Tensor xh2 = iabn_reconstruct(z2, Tensor::full({1}, 1.0, DType::F64),
                                Tensor::zeros({1}, DType::F64), 0.25, kDefaultGammaFloor);
  REQUIRE(xh2.at(0) == -1.0);  // phi_inverse(-0.25) at slope 0.25 is -1

  REQUIRE_THROWS_AS(
      iabn_reconstruct(z2, Tensor::full({1}, 1e-9, DType::F64), Tensor::zeros({1}, DType::F64),
                       0.25, kDefaultGammaFloor),
      GammaTooSmall);
}

TEST_CASE("constant channel normalizes to phi(beta)") {
  Tensor x = Tensor::full({1, 1, 2, 2, 2}, 7.5, DType::F32);
  Tensor gamma = Tensor::full({1}, 1.0, DType::F32);
  Tensor beta = Tensor::zeros({1}, DType::F32);
  iabn_forward(x, gamma, beta, 1e-5, 0.1, 0.01, nullptr);
  for (std::int64_t i = 0; i < 8; ++i) REQUIRE(x.at(i) == 0.0);
}

TEST_CASE("round trip recovers the normalized input at single-precision ulp scale") {
  // 10^5 scalar trials across seeded tensors. Per channel, gamma is drawn
  // log-uniformly across the entire legal range down to the 1e-4 floor with
  // either sign, and beta scales with gamma: the affine output keeps the
  // normalized signal in its mantissa, which is the regime the layer is
  // specified for (a bias much larger than the channel scale would discard
  // normalized bits in any 24-bit cache, fused or not).
  Rng rng(33);
  std::int64_t trials = 0;
  double worst = 0.0;
  while (trials < 100000) {
    const std::int64_t c = 4;
    Tensor x = randn({2, c, 6, 6, 6}, rng, DType::F32);
    Tensor gamma({c}, DType::F32);
    Tensor beta({c}, DType::F32);
    for (std::int64_t i = 0; i < c; ++i) {
      const double mag = std::pow(10.0, -4.0 + 4.6 * rng.uniform());  // 1e-4 .. ~4
      const double g = rng.uniform() < 0.5 ? -mag : mag;
      gamma.set(i, g);
      beta.set(i, g * rng.normal());
    }
    const double eps = kDefaultBnEps, slope = kDefaultLeakySlope;

    Tensor z = x.clone();
    IabnStats st = iabn_forward(z, gamma, beta, eps, 0.1, slope, nullptr);
    Tensor back = iabn_reconstruct(z, gamma, beta, slope, kDefaultGammaFloor);

    double xs_max = 0.0, err_max = 0.0;
    const std::int64_t m = 216;
    for (std::int64_t b = 0; b < 2; ++b)
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < m; ++i) {
          const std::int64_t k = (b * c + ch) * m + i;
          const double xhat = (x.at(k) - st.mean[static_cast<std::size_t>(ch)]) /
                              std::sqrt(st.var[static_cast<std::size_t>(ch)] + eps);
          xs_max = std::max(xs_max, std::fabs(xhat));
          err_max = std::max(err_max, std::fabs(back.at(k) - xhat));
        }
    worst = std::max(worst, err_max / std::max(1.0, xs_max));
    trials += x.numel();
  }
  INFO("worst ulp-scale reconstruction error " << worst);
  REQUIRE(worst <= std::ldexp(1.0, -20));
}

TEST_CASE("fused backward matches the unfused pipeline") {
  // Standard path: keep x, run bn backward on it. Fused path: reconstruct
  // x-hat from z alone. Agreement bounds: 1e-5 relative in F32, 1e-10 in F64.
  Rng rng(34);
  for (DType dt : {DType::F32, DType::F64}) {
    const double tol = dt == DType::F64 ? 1e-10 : 1e-5;
    for (int trial = 0; trial < 8; ++trial) {
      Tensor x = randn({2, 3, 4, 4, 4}, rng, dt);
      Tensor gamma = safe_gamma(3, rng, dt);
      Tensor beta = randn({3}, rng, dt, 0.5);
      Tensor gz = randn(x.shape(), rng, dt);

      Tensor z;
      BnResult r = bn_act_forward_train(x, gamma, beta, kDefaultBnEps, 0.1, kDefaultLeakySlope,
                                        true, &z, nullptr);
      Tensor gy = leaky_relu_backward(gz, z, kDefaultLeakySlope);
      BnGrads ref = bn_backward(gy, x, gamma, r.mean, r.var, kDefaultBnEps);

      IabnGrads got = iabn_backward(gz, z, gamma, beta, r.mean, r.var, kDefaultBnEps,
                                    kDefaultLeakySlope, kDefaultGammaFloor);

      REQUIRE(rel_error(got.dx, ref.dx) <= tol);
      REQUIRE(rel_error(Tensor::from_values({3}, got.dgamma, DType::F64),
                        Tensor::from_values({3}, ref.dgamma, DType::F64)) <= tol);
      REQUIRE(rel_error(Tensor::from_values({3}, got.dbeta, DType::F64),
                        Tensor::from_values({3}, ref.dbeta, DType::F64)) <= tol);
    }
  }
}

TEST_CASE("zero incoming gradient yields zero parameter and input gradients") {
  Rng rng(35);
  Tensor x = randn({1, 2, 2, 2, 2}, rng, DType::F32);
  Tensor gamma = Tensor::full({2}, 1.5, DType::F32);
  Tensor beta = Tensor::full({2}, 0.25, DType::F32);
  Tensor z = x.clone();
  IabnStats st = iabn_forward(z, gamma, beta, 1e-5, 0.1, 0.01, nullptr);
  Tensor gz = Tensor::zeros(x.shape(), DType::F32);
  IabnGrads g = iabn_backward(gz, z, gamma, beta, st.mean, st.var, 1e-5, 0.01, 1e-4);
  REQUIRE(max_abs(g.dx) == 0.0);
  for (double v : g.dgamma) REQUIRE(v == 0.0);
  for (double v : g.dbeta) REQUIRE(v == 0.0);
}

TEST_CASE("fused backward matches central differences through the fused layer") {
  Rng rng(36);
  Tensor x = randn({2, 2, 3, 3, 3}, rng, DType::F64);
  Tensor gamma = safe_gamma(2, rng, DType::F64);
  Tensor beta = randn({2}, rng, DType::F64, 0.4);
  Tensor gz = randn(x.shape(), rng, DType::F64);
  const double eps = kDefaultBnEps, slope = kDefaultLeakySlope;

  Tensor z = x.clone();
  IabnStats st = iabn_forward(z, gamma, beta, eps, 0.1, slope, nullptr);
  IabnGrads g = iabn_backward(gz, z, gamma, beta, st.mean, st.var, eps, slope, 1e-4);

  auto loss = [&](const Tensor& xx, const Tensor& gg, const Tensor& bb) {
    Tensor zz = xx.clone();
    iabn_forward(zz, gg, bb, eps, 0.1, slope, nullptr);
    double s = 0.0;
    for (std::int64_t i = 0; i < zz.numel(); ++i) s += zz.at(i) * gz.at(i);
    return s;
  };
  REQUIRE(rel_error(finite_diff_grad([&](const Tensor& t) { return loss(t, gamma, beta); }, x),
                    g.dx) <= 1e-6);
  REQUIRE(rel_error(finite_diff_grad([&](const Tensor& t) { return loss(x, t, beta); }, gamma),
                    Tensor::from_values({2}, g.dgamma, DType::F64)) <= 1e-6);
  REQUIRE(rel_error(finite_diff_grad([&](const Tensor& t) { return loss(x, gamma, t); }, beta),
                    Tensor::from_values({2}, g.dbeta, DType::F64)) <= 1e-6);
}
