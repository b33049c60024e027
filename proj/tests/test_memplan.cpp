#include <catch2/catch_amalgamated.hpp>

#include <string>

#include <json.hpp>

#include "memfcn/memfcn.hpp"

using namespace memfcn;

namespace {

UNetConfig tiny_cfg(BlockKind b) {
  UNetConfig cfg;
  cfg.levels = 2;
  cfg.channels = {4, 8};
  cfg.block = b;
  return cfg;
}

}  // namespace

TEST_CASE("single-level plain network retains the hand-computed byte totals") {
  // One level, 8 channels, 16^3 input, no pooling ladder: the whole pool is
  // enumerable by hand (frozen numbers derived from the layer shapes).
  UNetConfig cfg;
  cfg.levels = 1;
  cfg.channels = {8};
  cfg.block = BlockKind::Plain;
  const Shape in{1, 1, 16, 16, 16};

  MemoryReport std_plan =
      plan_memory(cfg, in, {BufferPolicy::Standard, PrecisionPolicy::F32});
  MemoryReport ip_plan =
      plan_memory(cfg, in, {BufferPolicy::InplaceABN, PrecisionPolicy::F32});
  REQUIRE(std_plan.activation_bytes == 606208);
  REQUIRE(ip_plan.activation_bytes == 344064);
}

TEST_CASE("isolated norm+activation pair halves exactly under the fused policy") {
  // planner side
  for (DType dt : {DType::F32, DType::F16}) {
    Tape std_plan(TapeMode::Plan, BufferPolicy::Standard);
    {
      Value x = std_plan.leaf_meta({1, 4, 8, 8, 8}, dt, "x", false, true);
      Value g = std_plan.leaf_meta({4}, DType::F32, "g", true, true);
      Value b = std_plan.leaf_meta({4}, DType::F32, "b", true, true);
      std_plan.norm_act(x, g, b, 1e-5, 0.1, 0.01, 1e-4, nullptr, "na");
    }
    Tape ip_plan(TapeMode::Plan, BufferPolicy::InplaceABN);
    {
      Value x = ip_plan.leaf_meta({1, 4, 8, 8, 8}, dt, "x", false, true);
      Value g = ip_plan.leaf_meta({4}, DType::F32, "g", true, true);
      Value b = ip_plan.leaf_meta({4}, DType::F32, "b", true, true);
      ip_plan.norm_act(x, g, b, 1e-5, 0.1, 0.01, 1e-4, nullptr, "na");
    }
    REQUIRE(static_cast<double>(ip_plan.retained_bytes()) /
                static_cast<double>(std_plan.retained_bytes()) ==
            0.5);
  }
}

TEST_CASE("planner activation bytes equal executor retained bytes on every config") {
  Rng rng(71);
  Tensor img({1, 1, 8, 8, 8}, DType::F32);
  for (std::int64_t i = 0; i < img.numel(); ++i) img.set(i, rng.normal());
  Tensor lab = Tensor::zeros({1, 8, 8, 8}, DType::F32);

  for (BlockKind b : {BlockKind::Plain, BlockKind::Bottleneck, BlockKind::SepConv,
                      BlockKind::CCBlock})
    for (BufferPolicy pol : {BufferPolicy::Standard, BufferPolicy::InplaceABN})
      for (bool with_loss : {true, false}) {
        UNetConfig cfg = tiny_cfg(b);
        MemoryReport plan = plan_memory(cfg, img.shape(), {pol, PrecisionPolicy::F32}, with_loss);

        Model model = build_model(cfg, 4);
        Tape train(TapeMode::Train, pol);
        unet_forward(train, model, img, with_loss ? &lab : nullptr);
        REQUIRE(plan.activation_bytes == train.retained_bytes());
      }
}

TEST_CASE("mixed precision halves exactly the activation pool, not the optimizer") {
  UNetConfig cfg = tiny_cfg(BlockKind::CCBlock);
  const Shape in{1, 1, 8, 8, 8};
  MemoryReport f32 = plan_memory(cfg, in, {BufferPolicy::InplaceABN, PrecisionPolicy::F32});
  MemoryReport mp =
      plan_memory(cfg, in, {BufferPolicy::InplaceABN, PrecisionPolicy::MixedPrecision});
  REQUIRE(static_cast<double>(mp.activation_bytes) /
              static_cast<double>(f32.activation_bytes) ==
          0.5);
  REQUIRE(mp.optimizer_bytes == f32.optimizer_bytes);        // f32 adam state either way
  REQUIRE(mp.master_bytes == 4 * mp.param_count);            // f32 masters appear
  REQUIRE(f32.master_bytes == 0);
  REQUIRE(mp.params_bytes == 2 * mp.param_count);            // f16 working weights
  REQUIRE(f32.params_bytes == 4 * f32.param_count);
  REQUIRE(mp.total_bytes == mp.params_bytes + mp.activation_bytes + mp.grad_bytes +
                                mp.optimizer_bytes + mp.master_bytes);
}

TEST_CASE("fused buffers never exceed standard, activations dominate at volume scale") {
  UNetConfig cfg;  // default 4-level channels
  cfg.block = BlockKind::CCBlock;
  const Shape in{1, 1, 32, 32, 32};
  MemoryReport std_r = plan_memory(cfg, in, {BufferPolicy::Standard, PrecisionPolicy::F32});
  MemoryReport ip_r = plan_memory(cfg, in, {BufferPolicy::InplaceABN, PrecisionPolicy::F32});
  REQUIRE(ip_r.activation_bytes < std_r.activation_bytes);
  REQUIRE(std_r.activation_bytes > std_r.params_bytes);
}

TEST_CASE("policy matrix carries the six comparison rows in order") {
  UNetConfig cfg = tiny_cfg(BlockKind::Plain);
  PlanMatrix m = plan_matrix(cfg, {1, 1, 8, 8, 8});
  REQUIRE(m.rows.size() == 6);
  REQUIRE(m.rows[0].block == "plain");
  REQUIRE(m.rows[0].policy.buffer == BufferPolicy::Standard);
  REQUIRE(m.rows[3].block == "ccblock");
  REQUIRE(m.rows[4].policy.buffer == BufferPolicy::InplaceABN);
  REQUIRE(m.rows[5].policy.precision == PrecisionPolicy::MixedPrecision);
  // same channel schedule in every row: run-to-run comparability
  for (const MemoryReport& r : m.rows) REQUIRE(r.input == Shape{1, 1, 8, 8, 8});
}

TEST_CASE("matrix json reports a total ratio against the plain baseline") {
  UNetConfig cfg = tiny_cfg(BlockKind::Plain);
  PlanMatrix m = plan_matrix(cfg, {1, 1, 8, 8, 8});
  nlohmann::json j = nlohmann::json::parse(matrix_to_json(m));
  REQUIRE(j.at("configurations").size() == 6);
  REQUIRE(j.at("configurations")[0].at("total_ratio").get<double>() == 1.0);
  const double last = j.at("configurations")[5].at("total_ratio").get<double>();
  REQUIRE(last ==
          Catch::Approx(static_cast<double>(m.rows[5].total_bytes) /
                        static_cast<double>(m.rows[0].total_bytes))
              .epsilon(1e-12));
}

TEST_CASE("report serializations are well-formed and carry the retained table") {
  UNetConfig cfg = tiny_cfg(BlockKind::CCBlock);
  MemoryReport r = plan_memory(cfg, {1, 1, 8, 8, 8},
                               {BufferPolicy::InplaceABN, PrecisionPolicy::F32});
  nlohmann::json j = nlohmann::json::parse(report_to_json(r, /*with_rows=*/true));
  REQUIRE(j.at("block") == "ccblock");
  REQUIRE(j.at("buffers") == "inplace-abn");
  REQUIRE(j.at("precision") == "f32");
  REQUIRE(j.at("activation_bytes").get<std::int64_t>() == r.activation_bytes);
  REQUIRE(j.at("retained").is_array());
  REQUIRE(!j.at("retained").empty());
  std::int64_t sum = 0;
  for (const auto& row : j.at("retained"))
    if (!row.at("shared").get<bool>()) sum += row.at("bytes").get<std::int64_t>();
  REQUIRE(sum == r.activation_bytes);

  const std::string text = report_to_text(r, true);
  REQUIRE(text.find("ccblock") != std::string::npos);
  REQUIRE(text.find("GiB") != std::string::npos);
}

TEST_CASE("planning rejects inputs the executor would reject") {
  UNetConfig cfg;  // divisor 8
  REQUIRE_THROWS_AS(
      plan_memory(cfg, {1, 1, 20, 20, 20}, {BufferPolicy::Standard, PrecisionPolicy::F32}),
      ConfigError);
}
