#ifndef MEMFCN_OPTIM_HPP
#define MEMFCN_OPTIM_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>

#include "memfcn/common.hpp"
#include "memfcn/tensor.hpp"
#include "memfcn/unet.hpp"

namespace memfcn {

struct AdamConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam. Moment state is F32 (two extra copies of the
// parameters — the steady 8-bytes-per-weight the planner charges); the
// per-element update itself runs in F64 and is strictly serial, so a step is
// a deterministic function of (state, gradients).
class Adam {
 public:
  Adam(const Model& model, AdamConfig cfg = {}) : cfg_(cfg) {
    for (const std::string& name : model.param_order) {
      const Shape& s = model.params.at(name).shape();
      m_.emplace(name, Tensor::zeros(s, DType::F32));
      v_.emplace(name, Tensor::zeros(s, DType::F32));
    }
  }

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::int64_t steps() const { return t_; }

  void step(Model& model, const std::unordered_map<std::string, Tensor>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const std::string& name : model.param_order) {
      auto git = grads.find(name);
      if (git == grads.end()) throw InternalError("adam: no gradient for " + name);
      Tensor& p = model.params.at(name);
      const Tensor& g = git->second;
      check_shape(g.shape() == p.shape(), "adam: gradient shape mismatch for " + name);
      auto pm = m_.at(name).f32();
      auto pv = v_.at(name).f32();
      auto pp = p.f32();
      auto pg = g.f32();
      for (std::size_t i = 0; i < pp.size(); ++i) {
        const double gi = pg[i];
        const double mi = cfg_.beta1 * pm[i] + (1.0 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * pv[i] + (1.0 - cfg_.beta2) * gi * gi;
        pm[i] = static_cast<float>(mi);
        pv[i] = static_cast<float>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        pp[i] = static_cast<float>(pp[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, Tensor> m_;
  std::unordered_map<std::string, Tensor> v_;
};

// Clamp every norm-scale parameter away from zero (sign-preserving) so the
// activation inverse stays well-conditioned. Runs after each applied step.
inline void clamp_gammas(Model& model, double floor_) {
  for (const std::string& name : model.param_order) {
    if (!model.gamma_flag.at(name)) continue;
    Tensor& t = model.params.at(name);
    auto p = t.f32();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const float v = p[i];
      if (std::fabs(v) < floor_)
        p[i] = v >= 0.0f ? static_cast<float>(floor_) : static_cast<float>(-floor_);
    }
  }
}

struct PlateauConfig {
  double factor = 0.3;
  int patience = 50;
  double min_delta = 1e-6;
  double min_lr = 1e-7;
};

// Reduce-on-plateau: an epoch counts as stalled unless the metric improves
// the best seen by more than min_delta; once the stall counter reaches
// `patience`, the rate is cut by `factor` and the counter restarts.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(PlateauConfig cfg = {}) : cfg_(cfg) {}

  double update(double metric, double lr) {
    if (metric < best_ - cfg_.min_delta) {
      best_ = metric;
      bad_ = 0;
    } else if (++bad_ >= cfg_.patience) {
      lr = std::max(cfg_.min_lr, lr * cfg_.factor);
      bad_ = 0;
    }
    return lr;
  }

  double best() const { return best_; }
  int stalled_epochs() const { return bad_; }

 private:
  PlateauConfig cfg_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

}  // namespace memfcn

#endif  // MEMFCN_OPTIM_HPP
