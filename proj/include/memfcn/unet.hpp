#ifndef MEMFCN_UNET_HPP
#define MEMFCN_UNET_HPP

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "memfcn/autograd.hpp"
#include "memfcn/common.hpp"
#include "memfcn/layers.hpp"
#include "memfcn/rng.hpp"
#include "memfcn/tensor.hpp"

namespace memfcn {

enum class BlockKind { Plain, Bottleneck, SepConv, CCBlock };

inline const char* block_kind_name(BlockKind k) {
  switch (k) {
    case BlockKind::Plain: return "plain";
    case BlockKind::Bottleneck: return "bottleneck";
    case BlockKind::SepConv: return "sepconv";
    case BlockKind::CCBlock: return "ccblock";
  }
  return "?";
}

inline BlockKind block_kind_from_name(const std::string& s) {
  if (s == "plain") return BlockKind::Plain;
  if (s == "bottleneck") return BlockKind::Bottleneck;
  if (s == "sepconv") return BlockKind::SepConv;
  if (s == "ccblock") return BlockKind::CCBlock;
  throw ConfigError("unknown block kind: " + s);
}

struct UNetConfig {
  std::int64_t in_channels = 1;
  std::int64_t classes = 3;
  int levels = 4;
  std::vector<std::int64_t> channels = {32, 64, 128, 256};
  std::int64_t bottleneck_k = 2;  // mid width = channels / K in bottleneck-style blocks
  BlockKind block = BlockKind::Plain;
  double slope = kDefaultLeakySlope;
  double bn_eps = kDefaultBnEps;
  double bn_momentum = kDefaultBnMomentum;
  double gamma_floor = kDefaultGammaFloor;

  void validate() const {
    check_config(in_channels >= 1, "config: in_channels must be >= 1");
    check_config(classes >= 2, "config: classes must be >= 2");
    check_config(levels >= 1, "config: levels must be >= 1");
    check_config(channels.size() == static_cast<std::size_t>(levels),
                 "config: channels list must have one entry per level");
    for (std::int64_t c : channels) check_config(c >= 1, "config: channel extents must be >= 1");
    check_config(bottleneck_k >= 1, "config: bottleneck_k must be >= 1");
    check_config(slope > 0.0 && slope < 1.0, "config: slope must lie in (0, 1)");
    check_config(bn_eps > 0.0, "config: bn_eps must be positive");
    check_config(bn_momentum > 0.0 && bn_momentum <= 1.0, "config: bn_momentum must lie in (0, 1]");
    check_config(gamma_floor > 0.0, "config: gamma_floor must be positive");
    if (block == BlockKind::Bottleneck || block == BlockKind::CCBlock)
      for (std::int64_t c : channels)
        check_config(c % bottleneck_k == 0 && c / bottleneck_k >= 1,
                     "config: every channel extent must be divisible by bottleneck_k");
  }

  // The pooling ladder halves each spatial extent levels-1 times.
  std::int64_t spatial_divisor() const { return std::int64_t(1) << (levels - 1); }
};

// Rejects ill-sized inputs before any buffer is allocated.
inline void check_unet_input(const UNetConfig& cfg, const Shape& s) {
  check_shape(s.size() == 5, "unet: input must be N,C,D,H,W");
  check_config(s[1] == cfg.in_channels, "unet: input channel extent does not match config");
  const std::int64_t div = cfg.spatial_divisor();
  for (int i = 2; i < 5; ++i) {
    check_config(s[static_cast<std::size_t>(i)] >= div,
                 "unet: spatial extent smaller than the pooling ladder");
    check_config(s[static_cast<std::size_t>(i)] % div == 0,
                 "unet: spatial extents must be divisible by 2^(levels-1)");
  }
}

enum class ParamInit { ConvFanIn, ConvTransposeFanIn, One, Zero };

struct ParamDef {
  std::string name;
  Shape shape;
  ParamInit init = ParamInit::ConvFanIn;
  bool is_gamma = false;
};

struct UNetValues {
  Value input{-1};
  Value logits{-1};
  Value loss{-1};
  Value probs{-1};
  bool has_loss = false;
  std::vector<std::pair<std::string, int>> param_ids;  // name -> tape value id, walk order
};

namespace detail {

/* Every block is a chain of conv units, each unit one or two convolutions
   (a depthwise+pointwise pair counts as one unit) closed by a norm+act
   site. The emitter is shared verbatim by the planner (meta leaves), the
   trainer, and eval-mode inference, so all three agree on structure. */
template <typename ParamFn, typename RunFn>
class UNetEmitter {
 public:
  UNetEmitter(Tape& tape, const UNetConfig& cfg, ParamFn& param, RunFn& run_stats)
      : tape_(tape), cfg_(cfg), param_(param), run_(run_stats) {}

  Value conv_unit(Value h, std::int64_t ci, std::int64_t co, int k, std::int64_t groups,
                  const std::string& name) {
    Shape ws{co, ci / groups, k, k, k};
    Value w = param_(name + ".w", std::move(ws), ParamInit::ConvFanIn);
    const std::int64_t p = k == 3 ? 1 : 0;
    return tape_.conv3d(h, w, std::nullopt, Conv3dSpec{{1, 1, 1}, {p, p, p}, groups}, name);
  }

  Value norm_unit(Value h, std::int64_t c, const std::string& site) {
    Value g = param_(site + ".gamma", Shape{c}, ParamInit::One);
    Value b = param_(site + ".beta", Shape{c}, ParamInit::Zero);
    return tape_.norm_act(h, g, b, cfg_.bn_eps, cfg_.bn_momentum, cfg_.slope, cfg_.gamma_floor,
                          run_(site, c), site);
  }

  Value block(Value x, std::int64_t ci, std::int64_t co, const std::string& bn) {
    Value h = x;
    switch (cfg_.block) {
      case BlockKind::Plain:
        h = norm_unit(conv_unit(h, ci, co, 3, 1, bn + ".c1"), co, bn + ".n1");
        h = norm_unit(conv_unit(h, co, co, 3, 1, bn + ".c2"), co, bn + ".n2");
        break;
      case BlockKind::SepConv:
        h = conv_unit(h, ci, ci, 3, ci, bn + ".c1dw");
        h = norm_unit(conv_unit(h, ci, co, 1, 1, bn + ".c1pw"), co, bn + ".n1");
        h = conv_unit(h, co, co, 3, co, bn + ".c2dw");
        h = norm_unit(conv_unit(h, co, co, 1, 1, bn + ".c2pw"), co, bn + ".n2");
        break;
      case BlockKind::Bottleneck: {
        const std::int64_t mid = co / cfg_.bottleneck_k;
        h = norm_unit(conv_unit(h, ci, mid, 1, 1, bn + ".reduce"), mid, bn + ".n1");
        h = norm_unit(conv_unit(h, mid, mid, 3, 1, bn + ".mid"), mid, bn + ".n2");
        h = norm_unit(conv_unit(h, mid, co, 1, 1, bn + ".restore"), co, bn + ".n3");
        if (ci == co) h = tape_.add(x, h, bn + ".res");
        break;
      }
      case BlockKind::CCBlock: {
        const std::int64_t mid = co / cfg_.bottleneck_k;
        h = norm_unit(conv_unit(h, ci, mid, 1, 1, bn + ".reduce"), mid, bn + ".n1");
        h = conv_unit(h, mid, mid, 3, mid, bn + ".middw");
        h = norm_unit(conv_unit(h, mid, mid, 1, 1, bn + ".midpw"), mid, bn + ".n2");
        h = norm_unit(conv_unit(h, mid, co, 1, 1, bn + ".restore"), co, bn + ".n3");
        if (ci == co) h = tape_.add(x, h, bn + ".res");
        break;
      }
    }
    return h;
  }

 private:
  Tape& tape_;
  const UNetConfig& cfg_;
  ParamFn& param_;
  RunFn& run_;
};

template <typename ParamFn, typename RunFn>
UNetValues emit_unet(Tape& tape, const UNetConfig& cfg, Value input, std::optional<Value> labels,
                     double wce, double wd, ParamFn&& param, RunFn&& run_stats) {
  UNetEmitter<ParamFn, RunFn> em(tape, cfg, param, run_stats);
  std::vector<Value> skips;
  Value h = input;
  std::int64_t ci = cfg.in_channels;
  for (int l = 0; l < cfg.levels; ++l) {
    if (l > 0) h = tape.maxpool2(h, "pool" + std::to_string(l - 1)).output;
    h = em.block(h, ci, cfg.channels[static_cast<std::size_t>(l)], "enc" + std::to_string(l));
    ci = cfg.channels[static_cast<std::size_t>(l)];
    if (l + 1 < cfg.levels) skips.push_back(h);
  }
  for (int l = cfg.levels - 2; l >= 0; --l) {
    const std::int64_t cu = cfg.channels[static_cast<std::size_t>(l) + 1];
    const std::int64_t cl = cfg.channels[static_cast<std::size_t>(l)];
    Value w = param("up" + std::to_string(l) + ".w", Shape{cu, cl, 2, 2, 2},
                    ParamInit::ConvTransposeFanIn);
    h = tape.conv_transpose3d(h, w, "up" + std::to_string(l));
    h = tape.concat_c(skips[static_cast<std::size_t>(l)], h, "cat" + std::to_string(l));
    h = em.block(h, 2 * cl, cl, "dec" + std::to_string(l));
  }
  Value hw = param("head.w", Shape{cfg.classes, cfg.channels[0], 1, 1, 1}, ParamInit::ConvFanIn);
  Value hb = param("head.b", Shape{cfg.classes}, ParamInit::Zero);
  UNetValues out;
  out.input = input;
  out.logits = tape.conv3d(h, hw, hb, Conv3dSpec{{1, 1, 1}, {0, 0, 0}, 1}, "head");
  if (labels) {
    auto lv = tape.dice_ce_loss(out.logits, *labels, wce, wd, kDiceEps, "loss");
    out.loss = lv.loss;
    out.probs = lv.probs;
    out.has_loss = true;
  }
  return out;
}

}  // namespace detail

// ------------------------------------------------------------------ layout

struct UNetLayout {
  std::vector<ParamDef> params;          // walk order
  std::vector<std::pair<std::string, std::int64_t>> norm_sites;  // name, channels
};

// A metadata-only emission, used as the single source of truth for parameter
// names, shapes, and norm-site listing.
inline UNetLayout unet_layout(const UNetConfig& cfg) {
  cfg.validate();
  UNetLayout lay;
  Tape tape(TapeMode::Plan, BufferPolicy::Standard);
  const std::int64_t e = std::int64_t(1) << cfg.levels;  // smallest extent with m >= 2 everywhere
  Value in = tape.leaf_meta({1, cfg.in_channels, e, e, e}, DType::F32, "input", false, false);
  detail::emit_unet(
      tape, cfg, in, std::nullopt, 1.0, 1.0,
      [&](const std::string& name, Shape shape, ParamInit init) {
        lay.params.push_back(ParamDef{name, shape, init, init == ParamInit::One});
        return tape.leaf_meta(std::move(shape), DType::F32, name, true, false);
      },
      [&](const std::string& site, std::int64_t c) -> BnRunning* {
        lay.norm_sites.emplace_back(site, c);
        return nullptr;
      });
  return lay;
}

inline std::int64_t model_param_count(const UNetConfig& cfg) {
  std::int64_t n = 0;
  for (const ParamDef& d : unet_layout(cfg).params) n += shape_numel(d.shape);
  return n;
}

// ------------------------------------------------------------------- model

struct Model {
  UNetConfig cfg;
  std::vector<std::string> param_order;  // walk order, drives optimizer and checkpoints
  std::unordered_map<std::string, Tensor> params;  // F32
  std::unordered_map<std::string, bool> gamma_flag;
  std::vector<std::string> norm_sites;
  std::unordered_map<std::string, BnRunning> running;
};

inline double kaiming_fan_in(const ParamDef& d) {
  if (d.init == ParamInit::ConvTransposeFanIn)
    return static_cast<double>(d.shape[0]);  // one kernel tap reaches each output voxel
  double f = 1.0;
  for (std::size_t i = 1; i < d.shape.size(); ++i) f *= static_cast<double>(d.shape[i]);
  return f;
}

// Kaiming fan-in initialisation matched to the leaky activation slope; draws
// happen in walk order from a single stream, so a seed pins every weight.
inline Model build_model(const UNetConfig& cfg, std::uint64_t seed) {
  Model m;
  m.cfg = cfg;
  UNetLayout lay = unet_layout(cfg);
  Rng rng(seed);
  for (const ParamDef& d : lay.params) {
    Tensor t(d.shape, DType::F32);
    switch (d.init) {
      case ParamInit::One:
        t = Tensor::full(d.shape, 1.0, DType::F32);
        break;
      case ParamInit::Zero:
        t = Tensor::zeros(d.shape, DType::F32);
        break;
      case ParamInit::ConvFanIn:
      case ParamInit::ConvTransposeFanIn: {
        const double gain2 = 2.0 / (1.0 + cfg.slope * cfg.slope);
        const double stddev = std::sqrt(gain2 / kaiming_fan_in(d));
        for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * stddev);
        break;
      }
    }
    m.param_order.push_back(d.name);
    m.params.emplace(d.name, std::move(t));
    m.gamma_flag.emplace(d.name, d.is_gamma);
  }
  for (const auto& [site, c] : lay.norm_sites) {
    m.norm_sites.push_back(site);
    m.running.emplace(site, BnRunning::create(c));
  }
  return m;
}

// ----------------------------------------------------------------- forward

/* Records one training/eval forward pass onto the tape. `override_params`
   substitutes working copies by name (mixed-precision halves, or F64 probe
   copies for finite differences); anything not in the map comes from the
   model. Activation dtype follows the input tensor. */
inline UNetValues unet_forward(Tape& tape, Model& model, const Tensor& input,
                               const Tensor* labels, double wce = 1.0, double wd = 1.0,
                               const std::unordered_map<std::string, Tensor>* override_params
                                   = nullptr,
                               bool params_require_grad = true,
                               bool input_requires_grad = false) {
  model.cfg.validate();
  check_unet_input(model.cfg, input.shape());
  check_config(tape.mode() != TapeMode::Plan, "unet_forward: use unet_plan for planning tapes");
  const bool train = tape.mode() == TapeMode::Train;
  check_config(train || labels == nullptr, "unet_forward: loss is a training-mode feature");

  UNetValues out;
  Value in = tape.leaf(input, "input", /*is_param=*/false, input_requires_grad);
  std::optional<Value> lab;
  if (labels) lab = tape.leaf(*labels, "labels", /*is_param=*/false, /*requires_grad=*/false);

  std::vector<std::pair<std::string, int>> param_ids;
  auto param = [&](const std::string& name, Shape shape, ParamInit) {
    const Tensor* src = nullptr;
    if (override_params) {
      auto it = override_params->find(name);
      if (it != override_params->end()) src = &it->second;
    }
    if (!src) {
      auto it = model.params.find(name);
      check_config(it != model.params.end(), "unet_forward: model is missing parameter " + name);
      src = &it->second;
    }
    check_shape(src->shape() == shape, "unet_forward: parameter shape mismatch for " + name);
    Value v = tape.leaf(*src, name, /*is_param=*/true, train && params_require_grad);
    param_ids.emplace_back(name, v.id);
    return v;
  };
  auto run_stats = [&](const std::string& site, std::int64_t) -> BnRunning* {
    auto it = model.running.find(site);
    check_config(it != model.running.end(), "unet_forward: model is missing norm site " + site);
    return &it->second;
  };

  UNetValues net = detail::emit_unet(tape, model.cfg, in, lab, wce, wd, param, run_stats);
  net.param_ids = std::move(param_ids);
  return net;
}

// Shape-only emission on a planning tape: same recording code, no data.
inline UNetValues unet_plan(Tape& tape, const UNetConfig& cfg, const Shape& input_shape,
                            DType act_dtype, bool with_loss, double wce = 1.0, double wd = 1.0) {
  cfg.validate();
  check_unet_input(cfg, input_shape);
  check_config(tape.mode() == TapeMode::Plan, "unet_plan: planning tapes only");
  Value in = tape.leaf_meta(input_shape, act_dtype, "input", false, false);
  std::optional<Value> lab;
  if (with_loss)
    lab = tape.leaf_meta({input_shape[0], input_shape[2], input_shape[3], input_shape[4]},
                         act_dtype, "labels", false, false);
  auto param = [&](const std::string& name, Shape shape, ParamInit) {
    return tape.leaf_meta(std::move(shape), act_dtype, name, /*is_param=*/true,
                          /*requires_grad=*/true);
  };
  auto run_stats = [](const std::string&, std::int64_t) -> BnRunning* { return nullptr; };
  return detail::emit_unet(tape, cfg, in, lab, wce, wd, param, run_stats);
}

}  // namespace memfcn

#endif  // MEMFCN_UNET_HPP
