#include <catch2/catch_amalgamated.hpp>

#include "memfcn/autograd.hpp"
#include "memfcn/conv.hpp"
#include "memfcn/rng.hpp"
#include "oracles.hpp"

using namespace memfcn;

namespace {

Tensor randn(Shape s, Rng& rng, DType dt, double scale = 1.0) {
  Tensor t(std::move(s), dt);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, scale * rng.normal());
  return t;
}

void compare(const Tensor& got, const Tensor& want_f64, double tol) {
  REQUIRE(got.shape() == want_f64.shape());
  REQUIRE(rel_error(got.to(DType::F64), want_f64) <= tol);
}

}  // namespace

TEST_CASE("conv3d forward matches the seven-loop reference") {
  Rng rng(11);
  struct Case {
    Shape xs, ws;
    Conv3dSpec sp;
    bool bias;
  };
  const Case cases[] = {
      {{2, 3, 5, 6, 7}, {4, 3, 3, 3, 3}, {{1, 1, 1}, {1, 1, 1}, 1}, true},
      {{1, 4, 4, 4, 4}, {6, 4, 1, 1, 1}, {{1, 1, 1}, {0, 0, 0}, 1}, false},
      {{1, 6, 6, 6, 6}, {6, 1, 3, 3, 3}, {{1, 1, 1}, {1, 1, 1}, 6}, false},  // depthwise
      {{1, 4, 6, 6, 6}, {8, 2, 3, 3, 3}, {{1, 1, 1}, {1, 1, 1}, 2}, true},   // grouped
      {{1, 2, 8, 8, 8}, {3, 2, 3, 3, 3}, {{2, 2, 2}, {1, 1, 1}, 1}, false},  // strided
  };
  for (DType dt : {DType::F32, DType::F64})
    for (const Case& c : cases) {
      Tensor x = randn(c.xs, rng, dt);
      Tensor w = randn(c.ws, rng, dt, 0.3);
      Tensor b = randn({c.ws[0]}, rng, dt, 0.1);
      const Tensor* bp = c.bias ? &b : nullptr;
      Tensor got = conv3d(x, w, bp, c.sp);
      Tensor want = oracle::conv3d(x, w, bp, c.sp);
      compare(got, want, dt == DType::F64 ? 1e-12 : 1e-5);
    }
}

TEST_CASE("conv3d rejects inconsistent shapes") {
  Tensor x({1, 3, 4, 4, 4}, DType::F32);
  Tensor w_bad_ci({2, 4, 3, 3, 3}, DType::F32);
  REQUIRE_THROWS_AS(conv3d(x, w_bad_ci, nullptr, Conv3dSpec{{1, 1, 1}, {1, 1, 1}, 1}),
                    ShapeError);
  Tensor w({6, 1, 3, 3, 3}, DType::F32);
  // group count must divide both channel counts
  REQUIRE_THROWS_AS(conv3d(x, w, nullptr, Conv3dSpec{{1, 1, 1}, {1, 1, 1}, 4}), ShapeError);
}

TEST_CASE("conv3d backward matches central differences") {
  Rng rng(12);
  const Conv3dSpec sp{{1, 1, 1}, {1, 1, 1}, 2};
  Tensor x = randn({1, 4, 3, 3, 3}, rng, DType::F64);
  Tensor w = randn({6, 2, 3, 3, 3}, rng, DType::F64, 0.4);
  Tensor b = randn({6}, rng, DType::F64, 0.2);
  Tensor gy = randn(conv3d_out_shape(x.shape(), w.shape(), sp), rng, DType::F64);
  Conv3dGrads g = conv3d_backward(gy, x, w, true, sp);
  auto loss = [&](const Tensor& xx, const Tensor& ww, const Tensor& bb) {
    Tensor y = conv3d(xx, ww, &bb, sp);
    double s = 0.0;
    for (std::int64_t i = 0; i < y.numel(); ++i) s += y.at(i) * gy.at(i);
    return s;
  };
  REQUIRE(rel_error(finite_diff_grad([&](const Tensor& t) { return loss(t, w, b); }, x),
                    g.dinput) <= 1e-6);
  REQUIRE(rel_error(finite_diff_grad([&](const Tensor& t) { return loss(x, t, b); }, w),
                    g.dweight) <= 1e-6);
  REQUIRE(rel_error(finite_diff_grad([&](const Tensor& t) { return loss(x, w, t); }, b),
                    g.dbias) <= 1e-6);
}

TEST_CASE("transposed conv matches the scatter reference and its gradients") {
  Rng rng(13);
  Tensor x = randn({1, 3, 3, 3, 3}, rng, DType::F64);
  Tensor w = randn({3, 2, 2, 2, 2}, rng, DType::F64, 0.4);
  Tensor got = conv_transpose3d(x, w);
  compare(got, oracle::conv_transpose3d(x, w), 1e-12);
  REQUIRE(got.shape() == Shape{1, 2, 6, 6, 6});

  Tensor gy = randn(got.shape(), rng, DType::F64);
  ConvTranspose3dGrads g = conv_transpose3d_backward(gy, x, w);
  auto loss = [&](const Tensor& xx, const Tensor& ww) {
    Tensor y = conv_transpose3d(xx, ww);
    double s = 0.0;
    for (std::int64_t i = 0; i < y.numel(); ++i) s += y.at(i) * gy.at(i);
    return s;
  };
  REQUIRE(rel_error(finite_diff_grad([&](const Tensor& t) { return loss(t, w); }, x),
                    g.dinput) <= 1e-6);
  REQUIRE(rel_error(finite_diff_grad([&](const Tensor& t) { return loss(x, t); }, w),
                    g.dweight) <= 1e-6);

  // F32 run agrees with the F64 oracle to single precision
  Tensor xf = x.to(DType::F32), wf = w.to(DType::F32);
  compare(conv_transpose3d(xf, wf), oracle::conv_transpose3d(xf, wf), 1e-5);
}

TEST_CASE("max pool matches the reference, ties take the first window slot") {
  Rng rng(14);
  Tensor x = randn({2, 3, 4, 6, 4}, rng, DType::F32);
  MaxPoolResult got = maxpool2(x);
  MaxPoolResult want = oracle::maxpool2(x);
  REQUIRE(got.output.bitwise_equal(want.output));
  REQUIRE(got.index.bitwise_equal(want.index));

  Tensor flat = Tensor::full({1, 1, 2, 2, 2}, 3.25, DType::F32);
  MaxPoolResult tie = maxpool2(flat);
  REQUIRE(tie.output.at(0) == 3.25);
  REQUIRE(tie.index.at(0) == 0.0);  // first max in scan order

  REQUIRE_THROWS_AS(maxpool2(Tensor({1, 1, 3, 4, 4}, DType::F32)), ShapeError);
}

TEST_CASE("max pool backward routes gradient to the winning slot") {
  Rng rng(15);
  Tensor x = randn({1, 2, 4, 4, 4}, rng, DType::F64);
  MaxPoolResult r = maxpool2(x);
  Tensor gy = randn(r.output.shape(), rng, DType::F64);
  Tensor gx = maxpool2_backward(gy, r.index, x.shape());
  auto loss = [&](const Tensor& xx) {
    MaxPoolResult rr = maxpool2(xx);
    double s = 0.0;
    for (std::int64_t i = 0; i < rr.output.numel(); ++i) s += rr.output.at(i) * gy.at(i);
    return s;
  };
  // random gaussians have no ties, so the pool is differentiable here
  REQUIRE(rel_error(finite_diff_grad(loss, x), gx) <= 1e-6);
  double total = 0.0;
  for (std::int64_t i = 0; i < gx.numel(); ++i) total += gx.at(i);
  REQUIRE(total == Catch::Approx(sum_all(gy)).epsilon(1e-12));
}

TEST_CASE("kernel outputs are identical for every worker count") {
  Rng rng(16);
  Tensor x = randn({2, 4, 8, 8, 8}, rng, DType::F32);
  Tensor w = randn({8, 4, 3, 3, 3}, rng, DType::F32, 0.3);
  const Conv3dSpec sp{{1, 1, 1}, {1, 1, 1}, 1};
  Tensor gy = randn(conv3d_out_shape(x.shape(), w.shape(), sp), rng, DType::F32);

  const int saved = parallel::workers();
  parallel::set_workers(1);
  Tensor y1 = conv3d(x, w, nullptr, sp);
  Conv3dGrads g1 = conv3d_backward(gy, x, w, false, sp);
  parallel::set_workers(4);
  Tensor y4 = conv3d(x, w, nullptr, sp);
  Conv3dGrads g4 = conv3d_backward(gy, x, w, false, sp);
  parallel::set_workers(saved);

  REQUIRE(y1.bitwise_equal(y4));
  REQUIRE(g1.dinput.bitwise_equal(g4.dinput));
  REQUIRE(g1.dweight.bitwise_equal(g4.dweight));
}
