#ifndef MEMFCN_MEMPLAN_HPP
#define MEMFCN_MEMPLAN_HPP

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "memfcn/autograd.hpp"
#include "memfcn/common.hpp"
#include "memfcn/tensor.hpp"
#include "memfcn/unet.hpp"

namespace memfcn {

inline const char* buffer_policy_name(BufferPolicy p) {
  return p == BufferPolicy::Standard ? "standard" : "inplace-abn";
}

inline const char* precision_policy_name(PrecisionPolicy p) {
  return p == PrecisionPolicy::F32 ? "f32" : "mixed";
}

struct PolicyPair {
  BufferPolicy buffer = BufferPolicy::Standard;
  PrecisionPolicy precision = PrecisionPolicy::F32;
};

/* Static training-memory model, per policy:

                       f32            mixed
   parameters          4 bytes/w      2 (binary16 working copies)
   gradients           4 bytes/w      2
   optimizer state     8 bytes/w      8 (two F32 moments)
   master weights      -              4

   Activations are not modeled by formula: the planner replays the exact
   forward recording in shape-only mode and sums the deduplicated retained
   pool, so its figure matches the executor's byte-for-byte. */
struct MemoryReport {
  std::string block;
  PolicyPair policy;
  Shape input;
  std::int64_t param_count = 0;
  std::int64_t params_bytes = 0;
  std::int64_t activation_bytes = 0;
  std::int64_t grad_bytes = 0;
  std::int64_t optimizer_bytes = 0;
  std::int64_t master_bytes = 0;
  std::int64_t total_bytes = 0;
  std::vector<RetainedEntry> rows;
};

inline MemoryReport plan_memory(const UNetConfig& cfg, const Shape& input_shape, PolicyPair pol,
                                bool with_loss = true) {
  cfg.validate();
  check_unet_input(cfg, input_shape);
  const DType act = pol.precision == PrecisionPolicy::MixedPrecision ? DType::F16 : DType::F32;
  Tape tape(TapeMode::Plan, pol.buffer);
  unet_plan(tape, cfg, input_shape, act, with_loss);

  MemoryReport r;
  r.block = block_kind_name(cfg.block);
  r.policy = pol;
  r.input = input_shape;
  r.param_count = model_param_count(cfg);
  r.activation_bytes = tape.retained_bytes();
  r.rows = tape.retained_entries();
  const bool mixed = pol.precision == PrecisionPolicy::MixedPrecision;
  r.params_bytes = r.param_count * (mixed ? 2 : 4);
  r.grad_bytes = r.param_count * (mixed ? 2 : 4);
  r.optimizer_bytes = r.param_count * 8;
  r.master_bytes = mixed ? r.param_count * 4 : 0;
  r.total_bytes =
      r.params_bytes + r.activation_bytes + r.grad_bytes + r.optimizer_bytes + r.master_bytes;
  return r;
}

namespace detail {

inline std::string gib_str(std::int64_t bytes) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f GiB", static_cast<double>(bytes) / 1073741824.0);
  return buf;
}

inline nlohmann::json report_json(const MemoryReport& r, bool with_rows) {
  nlohmann::json j;
  j["block"] = r.block;
  j["buffers"] = buffer_policy_name(r.policy.buffer);
  j["precision"] = precision_policy_name(r.policy.precision);
  j["input"] = r.input;
  j["param_count"] = r.param_count;
  j["params_bytes"] = r.params_bytes;
  j["activation_bytes"] = r.activation_bytes;
  j["grad_bytes"] = r.grad_bytes;
  j["optimizer_bytes"] = r.optimizer_bytes;
  j["master_bytes"] = r.master_bytes;
  j["total_bytes"] = r.total_bytes;
  if (with_rows) {
    nlohmann::json rows = nlohmann::json::array();
    for (const RetainedEntry& e : r.rows) {
      nlohmann::json row;
      row["node"] = e.node;
      row["tensor"] = e.tensor;
      row["shape"] = e.shape;
      row["dtype"] = dtype_name(e.dtype);
      row["bytes"] = e.bytes;
      row["shared"] = e.shared;
      rows.push_back(std::move(row));
    }
    j["retained"] = std::move(rows);
  }
  return j;
}

}  // namespace detail

inline std::string report_to_json(const MemoryReport& r, bool with_rows = true) {
  return detail::report_json(r, with_rows).dump(2) + "\n";
}

inline std::string report_to_text(const MemoryReport& r, bool with_rows = true) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "memory plan  block=%s  buffers=%s  precision=%s  input=%s\n",
                r.block.c_str(), buffer_policy_name(r.policy.buffer),
                precision_policy_name(r.policy.precision), shape_str(r.input).c_str());
  out += line;
  auto emit = [&](const char* label, std::int64_t bytes, const char* note) {
    std::snprintf(line, sizeof line, "  %-12s %14lld B  %12s%s%s\n", label,
                  static_cast<long long>(bytes), detail::gib_str(bytes).c_str(),
                  note[0] ? "  " : "", note);
    out += line;
  };
  std::snprintf(line, sizeof line, "  %-12s %14lld\n", "weights",
                static_cast<long long>(r.param_count));
  out += line;
  emit("parameters", r.params_bytes, "");
  emit("activations", r.activation_bytes, "(retained buffers)");
  emit("gradients", r.grad_bytes, "");
  emit("optimizer", r.optimizer_bytes, "");
  emit("masters", r.master_bytes, "");
  emit("total", r.total_bytes, "");
  if (with_rows) {
    out += "retained buffers:\n";
    std::snprintf(line, sizeof line, "  %-16s %-16s %-20s %-5s %12s\n", "node", "tensor", "shape",
                  "dtype", "bytes");
    out += line;
    for (const RetainedEntry& e : r.rows) {
      std::snprintf(line, sizeof line, "  %-16s %-16s %-20s %-5s %12lld%s\n", e.node.c_str(),
                    e.tensor.c_str(), shape_str(e.shape).c_str(), dtype_name(e.dtype),
                    static_cast<long long>(e.bytes), e.shared ? "  (shared)" : "");
      out += line;
    }
  }
  return out;
}

// ------------------------------------------------------------ policy matrix

/* The six-configuration comparison the CLI prints: the block-compaction
   ladder under standard buffers/F32, then in-place norm+act, then mixed
   precision on top. Ratios are against the first row. */
struct PlanMatrix {
  std::vector<MemoryReport> rows;
};

inline PlanMatrix plan_matrix(UNetConfig cfg, const Shape& input_shape) {
  struct Entry {
    BlockKind block;
    PolicyPair pol;
  };
  const Entry entries[] = {
      {BlockKind::Plain, {BufferPolicy::Standard, PrecisionPolicy::F32}},
      {BlockKind::Bottleneck, {BufferPolicy::Standard, PrecisionPolicy::F32}},
      {BlockKind::SepConv, {BufferPolicy::Standard, PrecisionPolicy::F32}},
      {BlockKind::CCBlock, {BufferPolicy::Standard, PrecisionPolicy::F32}},
      {BlockKind::CCBlock, {BufferPolicy::InplaceABN, PrecisionPolicy::F32}},
      {BlockKind::CCBlock, {BufferPolicy::InplaceABN, PrecisionPolicy::MixedPrecision}},
  };
  PlanMatrix m;
  for (const Entry& e : entries) {
    cfg.block = e.block;
    m.rows.push_back(plan_memory(cfg, input_shape, e.pol));
  }
  return m;
}

inline std::string matrix_to_text(const PlanMatrix& m) {
  std::string out = "training memory by configuration (ratios vs first row)\n";
  char line[256];
  std::snprintf(line, sizeof line, "  %-12s %-12s %-9s %10s %16s %16s %7s\n", "block", "buffers",
                "precision", "weights", "activations", "total", "ratio");
  out += line;
  const double base = static_cast<double>(m.rows.empty() ? 1 : m.rows.front().total_bytes);
  for (const MemoryReport& r : m.rows) {
    std::snprintf(line, sizeof line, "  %-12s %-12s %-9s %10lld %16lld %16lld %7.3f\n",
                  r.block.c_str(), buffer_policy_name(r.policy.buffer),
                  precision_policy_name(r.policy.precision),
                  static_cast<long long>(r.param_count),
                  static_cast<long long>(r.activation_bytes),
                  static_cast<long long>(r.total_bytes),
                  static_cast<double>(r.total_bytes) / base);
    out += line;
  }
  return out;
}

inline std::string matrix_to_json(const PlanMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  const double base = static_cast<double>(m.rows.empty() ? 1 : m.rows.front().total_bytes);
  for (const MemoryReport& r : m.rows) {
    nlohmann::json j = detail::report_json(r, /*with_rows=*/false);
    j["total_ratio"] = static_cast<double>(r.total_bytes) / base;
    rows.push_back(std::move(j));
  }
  nlohmann::json top;
  top["configurations"] = std::move(rows);
  return top.dump(2) + "\n";
}

}  // namespace memfcn

#endif  // MEMFCN_MEMPLAN_HPP
