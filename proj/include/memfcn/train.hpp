#ifndef MEMFCN_TRAIN_HPP
#define MEMFCN_TRAIN_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "memfcn/autograd.hpp"
#include "memfcn/common.hpp"
#include "memfcn/data.hpp"
#include "memfcn/losses.hpp"
#include "memfcn/optim.hpp"
#include "memfcn/precision.hpp"
#include "memfcn/rng.hpp"
#include "memfcn/tensor.hpp"
#include "memfcn/unet.hpp"
#include "memfcn/volio.hpp"

namespace memfcn {

struct TrainConfig {
  UNetConfig net;
  BufferPolicy buffers = BufferPolicy::Standard;
  PrecisionPolicy precision = PrecisionPolicy::F32;
  int epochs = 60;
  int val_cases = -1;  // -1: the last 30% of the manifest (at least one case)
  std::array<std::int64_t, 3> patch = {0, 0, 0};  // 0,0,0: train on full volumes
  std::uint64_t seed = 1;
  double lr = 4e-4;
  double wce = 1.0;
  double wd = 1.0;
  AdamConfig adam;
  PlateauConfig plateau;

  bool uses_patches() const { return patch[0] > 0 || patch[1] > 0 || patch[2] > 0; }

  void validate() const {
    net.validate();
    check_config(epochs >= 0, "train: epochs must be non-negative");
    check_config(lr > 0.0, "train: lr must be positive");
    check_config(wce >= 0.0 && wd >= 0.0 && wce + wd > 0.0,
                 "train: loss weights must be non-negative and not both zero");
    if (uses_patches())
      for (std::int64_t p : patch)
        check_config(p >= 1, "train: patch extents must all be positive when set");
  }
};

// ---------------------------------------------------------------- inference

/* Eval-mode logits for one [C,D,H,W] image. With a patch size, a sliding
   window at half-patch stride covers the volume (the trailing window clamps
   to the edge) and overlapping logits are averaged; otherwise one full-volume
   pass. Returns [classes,D,H,W] in F32. */
inline Tensor infer_logits(Model& model, const Tensor& image,
                           const std::array<std::int64_t, 3>& patch = {0, 0, 0},
                           const std::unordered_map<std::string, Tensor>* override_params
                               = nullptr,
                           DType act_dtype = DType::F32) {
  check_shape(image.ndim() == 4, "infer: image must be C,D,H,W");
  const bool sliding = patch[0] > 0 || patch[1] > 0 || patch[2] > 0;
  auto forward = [&](const Tensor& chunk) {
    Tensor in5 = chunk.reshaped({1, chunk.dim(0), chunk.dim(1), chunk.dim(2), chunk.dim(3)});
    if (in5.dtype() != act_dtype) in5 = in5.to(act_dtype);
    Tape tape(TapeMode::Infer, BufferPolicy::Standard);
    UNetValues net = unet_forward(tape, model, in5, nullptr, 1.0, 1.0, override_params);
    return tape.tensor(net.logits);  // [1,C,D,H,W]
  };
  if (!sliding) {
    Tensor l5 = forward(image).to(DType::F32);
    return l5.reshaped({l5.dim(1), l5.dim(2), l5.dim(3), l5.dim(4)});
  }
  const std::array<std::int64_t, 3> ext = {image.dim(1), image.dim(2), image.dim(3)};
  for (int i = 0; i < 3; ++i)
    check_config(patch[static_cast<std::size_t>(i)] <= ext[static_cast<std::size_t>(i)],
                 "infer: patch exceeds volume extents");
  auto starts = [](std::int64_t extent, std::int64_t p) {
    std::vector<std::int64_t> s;
    const std::int64_t stride = std::max<std::int64_t>(1, p / 2);
    for (std::int64_t o = 0; o + p < extent; o += stride) s.push_back(o);
    s.push_back(extent - p);  // always finish flush with the edge
    return s;
  };
  const auto zs = starts(ext[0], patch[0]);
  const auto ys = starts(ext[1], patch[1]);
  const auto xs = starts(ext[2], patch[2]);
  Tensor sum(Shape{model.cfg.classes, ext[0], ext[1], ext[2]}, DType::F64);
  Tensor cnt(Shape{ext[0], ext[1], ext[2]}, DType::F64);
  auto ps = sum.f64();
  auto pc = cnt.f64();
  for (std::int64_t z0 : zs)
    for (std::int64_t y0 : ys)
      for (std::int64_t x0 : xs) {
        Tensor chunk(Shape{image.dim(0), patch[0], patch[1], patch[2]}, image.dtype());
        for (std::int64_t c = 0; c < image.dim(0); ++c)
          for (std::int64_t z = 0; z < patch[0]; ++z)
            for (std::int64_t y = 0; y < patch[1]; ++y)
              for (std::int64_t x = 0; x < patch[2]; ++x)
                chunk.set(((c * patch[0] + z) * patch[1] + y) * patch[2] + x,
                          image.at(((c * ext[0] + z0 + z) * ext[1] + y0 + y) * ext[2] + x0 + x));
        Tensor lg = forward(chunk);  // [1,classes,pd,ph,pw]
        for (std::int64_t c = 0; c < model.cfg.classes; ++c)
          for (std::int64_t z = 0; z < patch[0]; ++z)
            for (std::int64_t y = 0; y < patch[1]; ++y)
              for (std::int64_t x = 0; x < patch[2]; ++x) {
                const std::int64_t dst =
                    ((c * ext[0] + z0 + z) * ext[1] + y0 + y) * ext[2] + x0 + x;
                ps[static_cast<std::size_t>(dst)] +=
                    lg.at(((c * patch[0] + z) * patch[1] + y) * patch[2] + x);
                if (c == 0)
                  pc[static_cast<std::size_t>(((z0 + z) * ext[1] + y0 + y) * ext[2] + x0 + x)] +=
                      1.0;
              }
      }
  Tensor out(sum.shape(), DType::F32);
  auto po = out.f32();
  const std::int64_t vox = ext[0] * ext[1] * ext[2];
  for (std::int64_t c = 0; c < model.cfg.classes; ++c)
    for (std::int64_t v = 0; v < vox; ++v)
      po[static_cast<std::size_t>(c * vox + v)] = static_cast<float>(
          ps[static_cast<std::size_t>(c * vox + v)] / pc[static_cast<std::size_t>(v)]);
  return out;
}

// [classes,D,H,W] logits -> [D,H,W] label map.
inline Tensor logits_to_labels(const Tensor& logits) {
  check_shape(logits.ndim() == 4, "logits_to_labels: expected classes,D,H,W");
  Tensor l5 = logits.reshaped(
      {1, logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3)});
  Tensor a = argmax_channels(l5);
  return a.reshaped({a.dim(1), a.dim(2), a.dim(3)});
}

// ----------------------------------------------------------------- training

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_dice_organ = 0.0;
  double val_dice_tumor = 0.0;
  double loss_scale = 1.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  double best_mean_dice = 0.0;
  std::string init_checkpoint;
  std::string best_checkpoint;
  std::string metrics_path;
};

namespace detail {

inline std::string metrics_line(const EpochMetrics& m) {
  nlohmann::json j;
  j["epoch"] = m.epoch;
  j["lr"] = m.lr;
  j["train_loss"] = m.train_loss;
  j["val_dice_organ"] = m.val_dice_organ;
  j["val_dice_tumor"] = m.val_dice_tumor;
  j["loss_scale"] = m.loss_scale;
  return j.dump() + "\n";
}

}  // namespace detail

/* Single-case steps in fixed manifest order; random patch crops keyed by
   (run seed, epoch, case); eval-mode validation on full volumes after every
   epoch; plateau schedule driven by the train loss; checkpoints for the
   initial state and the best validation mean dice. Zero epochs still writes
   the initial checkpoint and a valid (empty) metrics log. */
inline TrainResult train_loop(const TrainConfig& tc, const std::string& data_root,
                              const std::string& out_dir, bool force = false,
                              std::ostream* log = nullptr) {
  tc.validate();
  namespace fs = std::filesystem;
  if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force)
    throw ConfigError("output directory " + out_dir +
                      " already has contents; pass --force to overwrite");
  fs::create_directories(out_dir);

  std::vector<CaseData> cases = load_dataset(data_root);
  const int total = static_cast<int>(cases.size());
  const int nval =
      tc.val_cases >= 0
          ? tc.val_cases
          : std::max(1, static_cast<int>(std::llround(0.3 * static_cast<double>(total))));
  check_config(nval >= 1 && nval < total,
               "train: validation split needs at least one case on each side");
  const int ntrain = total - nval;
  if (tc.uses_patches())
    for (int i = 0; i < 3; ++i)
      check_config(tc.patch[static_cast<std::size_t>(i)] <= cases.front().image.dim(i + 1),
                   "train: patch exceeds volume extents");

  Model model = build_model(tc.net, tc.seed);
  AdamConfig ac = tc.adam;
  ac.lr = tc.lr;
  Adam adam(model, ac);
  PlateauScheduler sched(tc.plateau);
  const bool mixed = tc.precision == PrecisionPolicy::MixedPrecision;
  LossScaler scaler;
  if (!mixed) scaler.scale = 1.0;  // F32 path trains unscaled
  MasterWeights masters;
  if (mixed) masters = MasterWeights::create(model);
  const DType act = mixed ? DType::F16 : DType::F32;

  TrainResult res;
  res.init_checkpoint = out_dir + "/model_init.ckpt";
  res.best_checkpoint = out_dir + "/model_best.ckpt";
  res.metrics_path = out_dir + "/metrics.jsonl";
  save_checkpoint(res.init_checkpoint, model);
  std::ofstream metrics(res.metrics_path, std::ios::trunc);
  if (!metrics) throw FormatError("cannot open " + res.metrics_path);

  double best = -1.0;
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    double loss_sum = 0.0;
    for (int ci = 0; ci < ntrain; ++ci) {
      CaseData& cd = cases[static_cast<std::size_t>(ci)];
      Tensor img = cd.image;
      Tensor lab = cd.labels;
      if (tc.uses_patches()) {
        PatchPair pp = crop_patch(
            cd.image, cd.labels, tc.patch, CropKind::Random,
            mix_seed(mix_seed(tc.seed, static_cast<std::uint64_t>(epoch)),
                     static_cast<std::uint64_t>(ci)));
        img = pp.image;
        lab = pp.labels;
      }
      Tensor in5 = img.reshaped({1, img.dim(0), img.dim(1), img.dim(2), img.dim(3)});
      Tensor lab4 = lab.reshaped({1, lab.dim(0), lab.dim(1), lab.dim(2)});
      if (in5.dtype() != act) in5 = in5.to(act);
      if (lab4.dtype() != act) lab4 = lab4.to(act);  // labels are small exact integers

      Tape tape(TapeMode::Train, tc.buffers);
      UNetValues net = unet_forward(tape, model, in5, &lab4, tc.wce, tc.wd,
                                    mixed ? &masters.working : nullptr);
      loss_sum += tape.tensor(net.loss).at(0);  // read before the buffers go away
      tape.release_unsaved();
      auto raw = tape.backward(net.loss, scaler.scale);
      GradBundle gb = unscale_and_check(collect_param_grads(net.param_ids, raw), scaler.scale);
      if (gb.overflow) {
        if (mixed) scaler.update(true);
        continue;  // skip the step, keep the parameters
      }
      adam.step(model, gb.grads);
      clamp_gammas(model, tc.net.gamma_floor);
      if (mixed) {
        masters.sync(model);
        scaler.update(false);
      }
    }
    const double train_loss = loss_sum / static_cast<double>(ntrain);

    double dice_organ = 0.0, dice_tumor = 0.0;
    for (int vi = ntrain; vi < total; ++vi) {
      CaseData& cd = cases[static_cast<std::size_t>(vi)];
      Tensor logits =
          infer_logits(model, cd.image, {0, 0, 0}, mixed ? &masters.working : nullptr, act);
      Tensor pred = logits_to_labels(logits);
      dice_organ += dice_score(pred, cd.labels, 1);
      dice_tumor += dice_score(pred, cd.labels, 2);
    }
    dice_organ /= static_cast<double>(nval);
    dice_tumor /= static_cast<double>(nval);

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = adam.lr();
    em.train_loss = train_loss;
    em.val_dice_organ = dice_organ;
    em.val_dice_tumor = dice_tumor;
    em.loss_scale = scaler.scale;
    metrics << detail::metrics_line(em);
    metrics.flush();
    res.history.push_back(em);
    if (log) {
      char line[160];
      std::snprintf(line, sizeof line,
                    "epoch %3d/%d  lr %.3e  loss %.4f  dice organ %.4f  tumor %.4f  scale %g\n",
                    epoch, tc.epochs, em.lr, em.train_loss, em.val_dice_organ, em.val_dice_tumor,
                    em.loss_scale);
      (*log) << line << std::flush;
    }

    const double mean_dice = 0.5 * (dice_organ + dice_tumor);
    if (mean_dice > best) {
      best = mean_dice;
      res.best_mean_dice = mean_dice;
      save_checkpoint(res.best_checkpoint, model);
    }
    adam.set_lr(sched.update(train_loss, adam.lr()));
  }
  return res;
}

}  // namespace memfcn

#endif  // MEMFCN_TRAIN_HPP
