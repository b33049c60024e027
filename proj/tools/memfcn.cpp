// Command-line front end: memory planning, gradient checking, synthetic data
// generation, training, and inference.

#include <array>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <CLI11.hpp>

#include "memfcn/memfcn.hpp"

namespace {

using namespace memfcn;

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

std::array<std::int64_t, 3> parse_triple(const std::string& s, const char* what) {
  std::array<std::int64_t, 3> out{};
  int n = 0;
  long long a = 0, b = 0, c = 0;
  if (std::sscanf(s.c_str(), "%lld,%lld,%lld%n", &a, &b, &c, &n) != 3 ||
      n != static_cast<int>(s.size()))
    throw ConfigError(std::string(what) + " must be three comma-separated integers, got " + s);
  out = {a, b, c};
  for (std::int64_t v : out)
    check_config(v >= 1, std::string(what) + " extents must be positive");
  return out;
}

// ----------------------------------------------------------------- memplan

int run_memplan(const std::string& config_path, const std::string& input_str,
                std::int64_t batch, bool all_policies, bool json, bool rows) {
  TrainConfig tc = config_path.empty() ? TrainConfig{} : train_config_from_file(config_path);
  const auto e = parse_triple(input_str, "--input");
  const Shape in{batch, tc.net.in_channels, e[0], e[1], e[2]};
  if (all_policies) {
    PlanMatrix m = plan_matrix(tc.net, in);
    std::cout << (json ? matrix_to_json(m) : matrix_to_text(m));
  } else {
    MemoryReport r = plan_memory(tc.net, in, {tc.buffers, tc.precision});
    std::cout << (json ? report_to_json(r, rows) : report_to_text(r, rows));
  }
  return kExitOk;
}

// --------------------------------------------------------------- gradcheck

struct CheckReport {
  int passed = 0;
  int failed = 0;

  void note(const std::string& name, double rel, double tol) {
    const bool ok = rel <= tol;
    std::printf("%s  %-34s rel %.3e  (tol %.0e)\n", ok ? "ok  " : "FAIL", name.c_str(), rel, tol);
    (ok ? passed : failed) += 1;
  }
};

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape), DType::F64);
  auto p = t.f64();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = scale * rng.normal();
  return t;
}

// FD vs analytic for standalone batch norm + activation.
void check_bn(CheckReport& rep, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 101));
  const Shape xs{2, 3, 4, 4, 4};
  Tensor x = random_tensor(xs, rng);
  Tensor gamma = random_tensor({3}, rng, 0.5);
  for (std::int64_t i = 0; i < 3; ++i) gamma.set(i, gamma.at(i) + (gamma.at(i) >= 0 ? 1.0 : -1.0));
  Tensor beta = random_tensor({3}, rng, 0.3);
  Tensor gy = random_tensor(xs, rng);
  const double eps = kDefaultBnEps;

  Tensor z;
  BnResult r = bn_act_forward_train(x, gamma, beta, eps, kDefaultBnMomentum, kDefaultLeakySlope,
                                    /*apply_act=*/false, &z, nullptr);
  BnGrads g = bn_backward(gy, x, gamma, r.mean, r.var, eps);

  auto loss_of = [&](const Tensor& xx, const Tensor& gg, const Tensor& bb) {
    Tensor zz;
    bn_act_forward_train(xx, gg, bb, eps, kDefaultBnMomentum, kDefaultLeakySlope, false, &zz,
                         nullptr);
    double s = 0.0;
    for (std::int64_t i = 0; i < zz.numel(); ++i) s += zz.at(i) * gy.at(i);
    return s;
  };
  Tensor fdx = finite_diff_grad([&](const Tensor& t) { return loss_of(t, gamma, beta); }, x);
  rep.note("bn backward dx", rel_error(fdx, g.dx), 1e-6);
  Tensor fdg = finite_diff_grad([&](const Tensor& t) { return loss_of(x, t, beta); }, gamma);
  Tensor ag = Tensor::from_values({3}, g.dgamma, DType::F64);
  rep.note("bn backward dgamma", rel_error(fdg, ag), 1e-6);
  Tensor fdb = finite_diff_grad([&](const Tensor& t) { return loss_of(x, gamma, t); }, beta);
  Tensor ab = Tensor::from_values({3}, g.dbeta, DType::F64);
  rep.note("bn backward dbeta", rel_error(fdb, ab), 1e-6);
}

// FD vs analytic for the fused in-place form (gradients from z alone).
void check_iabn(CheckReport& rep, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 202));
  const Shape xs{2, 3, 4, 4, 4};
  Tensor x = random_tensor(xs, rng);
  Tensor gamma = random_tensor({3}, rng, 0.5);
  for (std::int64_t i = 0; i < 3; ++i) gamma.set(i, gamma.at(i) + (gamma.at(i) >= 0 ? 1.0 : -1.0));
  Tensor beta = random_tensor({3}, rng, 0.3);
  Tensor gz = random_tensor(xs, rng);
  const double eps = kDefaultBnEps, slope = kDefaultLeakySlope;

  Tensor z = x.clone();
  IabnStats st = iabn_forward(z, gamma, beta, eps, kDefaultBnMomentum, slope, nullptr);
  IabnGrads g = iabn_backward(gz, z, gamma, beta, st.mean, st.var, eps, slope,
                              kDefaultGammaFloor);

  auto loss_of = [&](const Tensor& xx, const Tensor& gg, const Tensor& bb) {
    Tensor zz = xx.clone();
    iabn_forward(zz, gg, bb, eps, kDefaultBnMomentum, slope, nullptr);
    double s = 0.0;
    for (std::int64_t i = 0; i < zz.numel(); ++i) s += zz.at(i) * gz.at(i);
    return s;
  };
  Tensor fdx = finite_diff_grad([&](const Tensor& t) { return loss_of(t, gamma, beta); }, x);
  rep.note("iabn backward dx", rel_error(fdx, g.dx), 1e-6);
  Tensor fdg = finite_diff_grad([&](const Tensor& t) { return loss_of(x, t, beta); }, gamma);
  rep.note("iabn backward dgamma", rel_error(fdg, Tensor::from_values({3}, g.dgamma, DType::F64)),
           1e-6);
  Tensor fdb = finite_diff_grad([&](const Tensor& t) { return loss_of(x, gamma, t); }, beta);
  rep.note("iabn backward dbeta", rel_error(fdb, Tensor::from_values({3}, g.dbeta, DType::F64)),
           1e-6);
}

void check_conv(CheckReport& rep, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 303));
  {
    const Conv3dSpec sp{{1, 1, 1}, {1, 1, 1}, 1};
    Tensor x = random_tensor({2, 3, 4, 4, 4}, rng);
    Tensor w = random_tensor({4, 3, 3, 3, 3}, rng, 0.4);
    Tensor b = random_tensor({4}, rng, 0.2);
    Tensor gy = random_tensor(conv3d_out_shape(x.shape(), w.shape(), sp), rng);
    Conv3dGrads g = conv3d_backward(gy, x, w, true, sp);
    auto loss_of = [&](const Tensor& xx, const Tensor& ww, const Tensor& bb) {
      Tensor y = conv3d(xx, ww, &bb, sp);
      double s = 0.0;
      for (std::int64_t i = 0; i < y.numel(); ++i) s += y.at(i) * gy.at(i);
      return s;
    };
    rep.note("conv3d dinput",
             rel_error(finite_diff_grad([&](const Tensor& t) { return loss_of(t, w, b); }, x),
                       g.dinput),
             1e-6);
    rep.note("conv3d dweight",
             rel_error(finite_diff_grad([&](const Tensor& t) { return loss_of(x, t, b); }, w),
                       g.dweight),
             1e-6);
    rep.note("conv3d dbias",
             rel_error(finite_diff_grad([&](const Tensor& t) { return loss_of(x, w, t); }, b),
                       g.dbias),
             1e-6);
  }
  {
    // grouped depthwise
    const Conv3dSpec sp{{1, 1, 1}, {1, 1, 1}, 4};
    Tensor x = random_tensor({1, 4, 4, 4, 4}, rng);
    Tensor w = random_tensor({4, 1, 3, 3, 3}, rng, 0.4);
    Tensor gy = random_tensor(conv3d_out_shape(x.shape(), w.shape(), sp), rng);
    Conv3dGrads g = conv3d_backward(gy, x, w, false, sp);
    auto loss_of = [&](const Tensor& xx, const Tensor& ww) {
      Tensor y = conv3d(xx, ww, nullptr, sp);
      double s = 0.0;
      for (std::int64_t i = 0; i < y.numel(); ++i) s += y.at(i) * gy.at(i);
      return s;
    };
    rep.note("depthwise conv3d dinput",
             rel_error(finite_diff_grad([&](const Tensor& t) { return loss_of(t, w); }, x),
                       g.dinput),
             1e-6);
    rep.note("depthwise conv3d dweight",
             rel_error(finite_diff_grad([&](const Tensor& t) { return loss_of(x, t); }, w),
                       g.dweight),
             1e-6);
  }
  {
    Tensor x = random_tensor({1, 3, 4, 4, 4}, rng);
    Tensor w = random_tensor({3, 2, 2, 2, 2}, rng, 0.4);
    Tensor gy = random_tensor(conv_transpose3d_out_shape(x.shape(), w.shape()), rng);
    ConvTranspose3dGrads g = conv_transpose3d_backward(gy, x, w);
    auto loss_of = [&](const Tensor& xx, const Tensor& ww) {
      Tensor y = conv_transpose3d(xx, ww);
      double s = 0.0;
      for (std::int64_t i = 0; i < y.numel(); ++i) s += y.at(i) * gy.at(i);
      return s;
    };
    rep.note("conv_transpose3d dinput",
             rel_error(finite_diff_grad([&](const Tensor& t) { return loss_of(t, w); }, x),
                       g.dinput),
             1e-6);
    rep.note("conv_transpose3d dweight",
             rel_error(finite_diff_grad([&](const Tensor& t) { return loss_of(x, t); }, w),
                       g.dweight),
             1e-6);
  }
}

void check_loss(CheckReport& rep, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 404));
  Tensor logits = random_tensor({1, 3, 4, 4, 4}, rng);
  Tensor labels({1, 4, 4, 4}, DType::F64);
  for (std::int64_t i = 0; i < labels.numel(); ++i)
    labels.set(i, static_cast<double>(static_cast<std::int64_t>(rng.uniform() * 3) % 3));
  Tensor p;
  DiceCeAux aux = dice_ce_forward(logits, labels, 1.0, 1.0, kDiceEps, &p);
  Tensor g = dice_ce_backward(p, labels, aux, 1.0, 1.0, kDiceEps, 1.0, DType::F64);
  auto loss_of = [&](const Tensor& lg) {
    return dice_ce_forward(lg, labels, 1.0, 1.0, kDiceEps, nullptr).loss;
  };
  rep.note("dice+ce dlogits", rel_error(finite_diff_grad(loss_of, logits), g), 1e-6);
}

// Composite check through the whole network: sampled coordinates, F64,
// probes that flip an activation sign or a pool winner are skipped.
void check_blocks(CheckReport& rep, std::uint64_t seed) {
  UNetConfig cfg;
  cfg.channels = {4, 8};
  cfg.levels = 2;
  Rng drng(mix_seed(seed, 505));
  Tensor img = random_tensor({1, 1, 4, 4, 4}, drng);
  Tensor lab({1, 4, 4, 4}, DType::F64);
  for (std::int64_t i = 0; i < lab.numel(); ++i)
    lab.set(i, static_cast<double>(static_cast<std::int64_t>(drng.uniform() * 3) % 3));

  for (BlockKind b : {BlockKind::Plain, BlockKind::Bottleneck, BlockKind::SepConv,
                      BlockKind::CCBlock})
    for (BufferPolicy bp : {BufferPolicy::Standard, BufferPolicy::InplaceABN}) {
      cfg.block = b;
      Model model = build_model(cfg, seed);
      std::unordered_map<std::string, Tensor> ov;
      for (const auto& name : model.param_order)
        ov.emplace(name, model.params.at(name).to(DType::F64));

      Tape tape(TapeMode::Train, bp);
      UNetValues net = unet_forward(tape, model, img, &lab, 1.0, 1.0, &ov);
      auto grads = tape.backward(net.loss);

      auto eval = [&](const std::string& pname, const Tensor& probe, std::vector<char>* sig) {
        std::unordered_map<std::string, Tensor> ov2 = ov;
        ov2[pname] = probe;
        Model m2 = build_model(cfg, seed);
        Tape t2(TapeMode::Train, bp);
        UNetValues n2 = unet_forward(t2, m2, img, &lab, 1.0, 1.0, &ov2);
        if (sig) {
          sig->clear();
          for (const NodeRec& nd : t2.nodes()) {
            if (nd.kind == OpKind::NormAct) {
              const Tensor& z = t2.value(Value{nd.outputs[0]}).data;
              for (std::int64_t i = 0; i < z.numel(); ++i) sig->push_back(z.at(i) >= 0 ? 1 : 0);
            } else if (nd.kind == OpKind::MaxPool2) {
              const Tensor& idx = t2.value(Value{nd.outputs[1]}).data;
              for (std::int64_t i = 0; i < idx.numel(); ++i)
                sig->push_back(static_cast<char>(idx.at(i)));
            }
          }
        }
        return t2.tensor(n2.loss).at(0);
      };

      // A few coordinates of a few representative parameters.
      double worst = 0.0;
      Rng crng(mix_seed(seed, 606));
      const std::vector<std::string> picks = {model.param_order.front(), "enc1.n1.gamma",
                                              "dec0.n1.beta", "head.w"};
      const double h = 1e-5;
      for (const std::string& pname : picks) {
        int pid = -1;
        for (const auto& [n, id] : net.param_ids)
          if (n == pname) pid = id;
        const Tensor& analytic = grads.at(pid);
        double ascale = 1e-8;
        for (std::int64_t i = 0; i < analytic.numel(); ++i)
          ascale = std::max(ascale, std::fabs(analytic.at(i)));
        Tensor probe = ov.at(pname).clone();
        auto px = probe.f64();
        for (int k = 0; k < 4; ++k) {
          const std::int64_t i =
              static_cast<std::int64_t>(crng.uniform() * static_cast<double>(probe.numel())) %
              probe.numel();
          const double v = px[static_cast<std::size_t>(i)];
          std::vector<char> sp, sm;
          px[static_cast<std::size_t>(i)] = v + h;
          const double fp = eval(pname, probe, &sp);
          px[static_cast<std::size_t>(i)] = v - h;
          const double fm = eval(pname, probe, &sm);
          px[static_cast<std::size_t>(i)] = v;
          if (sp != sm) continue;  // probe stepped across a kink; skip it
          const double fd = (fp - fm) / (2 * h);
          worst = std::max(worst, std::fabs(fd - analytic.at(i)) / ascale);
        }
      }
      rep.note(std::string("unet ") + block_kind_name(b) + " / " + buffer_policy_name(bp),
               worst, 1e-5);
    }
}

int run_gradcheck(const std::string& module, std::uint64_t seed) {
  CheckReport rep;
  const bool all = module == "all";
  if (all || module == "bn") check_bn(rep, seed);
  if (all || module == "iabn") check_iabn(rep, seed);
  if (all || module == "conv") check_conv(rep, seed);
  if (all || module == "loss") check_loss(rep, seed);
  if (all || module == "blocks") check_blocks(rep, seed);
  if (rep.passed + rep.failed == 0)
    throw ConfigError("gradcheck: module must be one of all, bn, iabn, conv, loss, blocks");
  std::printf("%d passed, %d failed\n", rep.passed, rep.failed);
  return rep.failed == 0 ? kExitOk : kExitCheckFailed;
}

// ------------------------------------------------------------------- synth

int run_synth(const std::string& spec_path, const std::string& out_dir, int count,
              std::optional<std::uint64_t> seed) {
  SynthSpec spec;
  if (!spec_path.empty()) spec = synth_spec_from_json(detail::read_file(spec_path));
  if (seed) spec.seed = *seed;
  Manifest m = synth_dataset(spec, out_dir, count);
  std::printf("wrote %d cases to %s\n", static_cast<int>(m.cases.size()), out_dir.c_str());
  return kExitOk;
}

// ------------------------------------------------------------------- train

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, bool force) {
  TrainConfig tc = train_config_from_file(config_path);
  TrainResult res = train_loop(tc, data_dir, out_dir, force, &std::cout);
  std::printf("done: best mean dice %.4f  checkpoints %s %s  metrics %s\n", res.best_mean_dice,
              res.init_checkpoint.c_str(),
              res.history.empty() ? "(none)" : res.best_checkpoint.c_str(),
              res.metrics_path.c_str());
  return kExitOk;
}

// ------------------------------------------------------------------- infer

int run_infer(const std::string& ckpt_path, const std::string& vol_path,
              const std::string& out_path, const std::string& sliding) {
  Model model = load_checkpoint(ckpt_path);
  VolData vol = read_vol(vol_path);
  if (vol.labels) throw ConfigError("infer: input volume is a label map");
  check_shape(vol.tensor.ndim() == 4, "infer: volume must be C,D,H,W");
  Tensor image = preprocess_image(vol.tensor.to(DType::F32), kTargetSpacing);
  std::array<std::int64_t, 3> patch = {0, 0, 0};
  if (!sliding.empty()) patch = parse_triple(sliding, "--sliding");
  Tensor logits = infer_logits(model, image, patch);
  Tensor labels = logits_to_labels(logits);
  write_vol(out_path, labels, /*as_labels=*/true);
  std::printf("wrote %s\n", out_path.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"memory-frugal volumetric segmentation trainer"};
  app.require_subcommand(1);

  std::string config_path, input_str = "64,64,64", data_dir, out_dir, spec_path;
  std::string module = "all", ckpt_path, vol_path, out_path, sliding;
  std::int64_t batch = 1;
  bool all_policies = false, json = false, rows = false, force = false;
  int count = 8;
  std::uint64_t seed = 1;
  bool seed_given = false;

  auto* mp = app.add_subcommand("memplan", "static training-memory report");
  mp->add_option("--config", config_path, "run configuration JSON");
  mp->add_option("--input", input_str, "input spatial extents D,H,W")->required();
  mp->add_option("--batch", batch, "batch size (default 1)");
  mp->add_flag("--all-policies", all_policies, "compare the six block/buffer/precision rows");
  mp->add_flag("--json", json, "JSON instead of a text table");
  mp->add_flag("--rows", rows, "include the per-buffer retained table");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gc->add_option("--module", module, "all|bn|iabn|conv|loss|blocks");
  gc->add_option("--seed", seed, "RNG seed");

  auto* sy = app.add_subcommand("synth", "generate a synthetic dataset");
  sy->add_option("--spec", spec_path, "synthesis spec JSON");
  sy->add_option("--out", out_dir, "output dataset directory")->required();
  sy->add_option("--count", count, "number of cases")->required();
  sy->add_option("--seed", seed, "override the seed from --spec")->each([&](const std::string&) {
    seed_given = true;
  });

  auto* tr = app.add_subcommand("train", "train on a dataset directory");
  tr->add_option("--config", config_path, "run configuration JSON")->required();
  tr->add_option("--data", data_dir, "dataset directory (manifest.json)")->required();
  tr->add_option("--out", out_dir, "run output directory")->required();
  tr->add_flag("--force", force, "allow writing into a non-empty directory");

  auto* in = app.add_subcommand("infer", "segment one volume with a checkpoint");
  in->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  in->add_option("--volume", vol_path, "input image volume (.vol)")->required();
  in->add_option("--out", out_path, "output label volume (.vol)")->required();
  in->add_option("--sliding", sliding, "sliding-window patch D,H,W (default: full volume)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (mp->parsed()) return run_memplan(config_path, input_str, batch, all_policies, json, rows);
    if (gc->parsed()) return run_gradcheck(module, seed);
    if (sy->parsed())
      return run_synth(spec_path, out_dir, count,
                       seed_given ? std::optional<std::uint64_t>(seed) : std::nullopt);
    if (tr->parsed()) return run_train(config_path, data_dir, out_dir, force);
    if (in->parsed()) return run_infer(ckpt_path, vol_path, out_path, sliding);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
  return kExitUsage;
}
