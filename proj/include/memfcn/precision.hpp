#ifndef MEMFCN_PRECISION_HPP
#define MEMFCN_PRECISION_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "memfcn/common.hpp"
#include "memfcn/tensor.hpp"
#include "memfcn/unet.hpp"

namespace memfcn {

/* Dynamic loss scaling: halve on an overflowed step (never below 1), double
   after every 2000 consecutive clean steps (never above 2^24). The current
   scale seeds the backward pass; gradients are divided back down before the
   optimizer sees them. */
struct LossScaler {
  double scale = 32768.0;          // 2^15
  double growth = 2.0;
  double backoff = 0.5;
  int growth_interval = 2000;
  double min_scale = 1.0;
  double max_scale = 16777216.0;   // 2^24
  int good_steps = 0;

  void update(bool overflow) {
    if (overflow) {
      scale = std::max(min_scale, scale * backoff);
      good_steps = 0;
    } else if (++good_steps >= growth_interval) {
      scale = std::min(max_scale, scale * growth);
      good_steps = 0;
    }
  }
};

// Binary16 working copies of the F32 master parameters. The model itself
// holds the masters; these are regenerated after every applied step.
struct MasterWeights {
  std::unordered_map<std::string, Tensor> working;  // F16

  static MasterWeights create(const Model& m) {
    MasterWeights w;
    for (const std::string& name : m.param_order)
      w.working.emplace(name, m.params.at(name).to(DType::F16));
    return w;
  }

  void sync(const Model& m) {
    for (const std::string& name : m.param_order)
      working[name] = m.params.at(name).to(DType::F16);
  }
};

inline bool has_nonfinite(const Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t.at(i))) return true;
  return false;
}

// Pulls parameter gradients out of a backward() result, keyed by name.
inline std::unordered_map<std::string, Tensor> collect_param_grads(
    const std::vector<std::pair<std::string, int>>& param_ids,
    std::unordered_map<int, Tensor>& raw) {
  std::unordered_map<std::string, Tensor> named;
  for (const auto& [name, id] : param_ids) {
    auto it = raw.find(id);
    if (it == raw.end()) throw InternalError("no gradient reached parameter " + name);
    if (!named.emplace(name, std::move(it->second)).second)
      throw InternalError("parameter recorded twice: " + name);
    raw.erase(it);
  }
  return named;
}

struct GradBundle {
  std::unordered_map<std::string, Tensor> grads;  // F32, unscaled
  bool overflow = false;
};

/* Overflow detection happens on the raw gradients (where an infinity first
   appears in binary16); unscaling divides the F32 conversion by the loss
   scale. An overflowed bundle carries no gradients — the step is skipped. */
inline GradBundle unscale_and_check(std::unordered_map<std::string, Tensor> named, double scale) {
  GradBundle out;
  for (auto& [name, g] : named)
    if (has_nonfinite(g)) {
      out.overflow = true;
      return out;
    }
  const double inv = 1.0 / scale;
  for (auto& [name, g] : named) {
    Tensor f = g.dtype() == DType::F32 ? std::move(g) : g.to(DType::F32);
    if (scale != 1.0) {
      auto p = f.f32();
      for (std::size_t i = 0; i < p.size(); ++i)
        p[i] = static_cast<float>(static_cast<double>(p[i]) * inv);
    }
    out.grads.emplace(name, std::move(f));
  }
  return out;
}

}  // namespace memfcn

#endif  // MEMFCN_PRECISION_HPP
