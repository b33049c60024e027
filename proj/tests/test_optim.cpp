#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "memfcn/memfcn.hpp"

using namespace memfcn;

namespace {

// Single-parameter model stand-in for optimizer math checks.
Model scalar_model(double v) {
  UNetConfig cfg;
  cfg.levels = 2;
  cfg.channels = {4, 8};
  Model m = build_model(cfg, 1);
  m.params.at("head.b").set(0, v);
  return m;
}

}  // namespace

TEST_CASE("adam first step moves by lr with bias correction") {
  Model m = scalar_model(1.0);
  Adam opt(m, AdamConfig{});
  std::unordered_map<std::string, Tensor> grads;
  for (const std::string& name : m.param_order)
    grads.emplace(name, Tensor::zeros(m.params.at(name).shape(), DType::F32));
  grads.at("head.b").set(0, 0.5);

  opt.step(m, grads);
  // bias-corrected first step: m_hat = g, v_hat = g^2 -> delta = lr * g/(|g|+eps)
  const double want = 1.0 - 4e-4 * (0.5 / (0.5 + 1e-8));
  REQUIRE(m.params.at("head.b").at(0) == Catch::Approx(want).margin(1e-9));
  REQUIRE(opt.steps() == 1);
}

TEST_CASE("adam trajectory matches a hand-rolled reference over many steps") {
  Model m = scalar_model(0.8);
  AdamConfig ac;
  Adam opt(m, ac);
  double w = 0.8, mm = 0.0, vv = 0.0;
  for (int t = 1; t <= 25; ++t) {
    // drive both trajectories from the model's stored (F32) value so the
    // only divergence is per-step state rounding
    const double g = 0.3 * m.params.at("head.b").at(0);
    std::unordered_map<std::string, Tensor> grads;
    for (const std::string& name : m.param_order)
      grads.emplace(name, Tensor::zeros(m.params.at(name).shape(), DType::F32));
    grads.at("head.b").set(0, g);
    opt.step(m, grads);

    mm = 0.9 * mm + 0.1 * g;
    vv = 0.999 * vv + 0.001 * g * g;
    const double mh = mm / (1.0 - std::pow(0.9, t));
    const double vh = vv / (1.0 - std::pow(0.999, t));
    w -= ac.lr * mh / (std::sqrt(vh) + ac.eps);
    REQUIRE(m.params.at("head.b").at(0) == Catch::Approx(w).margin(1e-5));
  }
}

TEST_CASE("adam requires a gradient for every parameter") {
  Model m = scalar_model(1.0);
  Adam opt(m, AdamConfig{});
  std::unordered_map<std::string, Tensor> grads;  // empty
  REQUIRE_THROWS_AS(opt.step(m, grads), InternalError);
}

TEST_CASE("gamma clamping preserves sign and only lifts tiny magnitudes") {
  UNetConfig cfg;
  cfg.levels = 2;
  cfg.channels = {4, 8};
  Model m = build_model(cfg, 2);
  Tensor& g = m.params.at("enc0.n1.gamma");
  g.set(0, 1e-9);
  g.set(1, -1e-9);
  g.set(2, 0.5);
  g.set(3, -2.0);
  clamp_gammas(m, 1e-4);
  REQUIRE(g.at(0) == Catch::Approx(1e-4));
  REQUIRE(g.at(1) == Catch::Approx(-1e-4));
  REQUIRE(g.at(2) == 0.5);
  REQUIRE(g.at(3) == -2.0);
  // non-gamma parameters are untouched
  REQUIRE(max_abs(m.params.at("enc0.n1.beta")) == 0.0);
}

TEST_CASE("plateau scheduler reduces after `patience` epochs without improvement") {
  PlateauConfig pc;  // factor 0.3, patience 50, min_delta 1e-6, min_lr 1e-7
  PlateauScheduler sched(pc);
  double lr = 4e-4;

  // worked example: the metric never improves from the start; the reduction
  // lands on the 51st stalled epoch
  lr = sched.update(1.0, lr);
  REQUIRE(lr == 4e-4);
  for (int epoch = 2; epoch <= 51; ++epoch) lr = sched.update(1.0, lr);
  REQUIRE(lr == Catch::Approx(1.2e-4).epsilon(1e-12));

  // improvement larger than min_delta resets the stall counter
  lr = sched.update(0.9, lr);
  for (int i = 0; i < 49; ++i) lr = sched.update(0.9, lr);
  REQUIRE(lr == Catch::Approx(1.2e-4).epsilon(1e-12));
}

TEST_CASE("plateau scheduler floors at min_lr and ignores sub-threshold improvements") {
  PlateauConfig pc;
  pc.patience = 2;
  pc.factor = 0.1;
  pc.min_lr = 1e-6;
  PlateauScheduler sched(pc);
  double lr = 1e-4;
  lr = sched.update(1.0, lr);
  // improvements below min_delta count as stalls
  lr = sched.update(1.0 - 1e-9, lr);
  lr = sched.update(1.0 - 2e-9, lr);
  REQUIRE(lr == Catch::Approx(1e-5).epsilon(1e-12));
  for (int i = 0; i < 10; ++i) lr = sched.update(1.0, lr);
  REQUIRE(lr >= 1e-6);
  REQUIRE(sched.best() == Catch::Approx(1.0).margin(1e-8));
}
