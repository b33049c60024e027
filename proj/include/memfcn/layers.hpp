#ifndef MEMFCN_LAYERS_HPP
#define MEMFCN_LAYERS_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "memfcn/common.hpp"
#include "memfcn/parallel.hpp"
#include "memfcn/tensor.hpp"

namespace memfcn {

inline constexpr double kDefaultLeakySlope = 0.01;
inline constexpr double kDefaultBnEps = 1e-5;
inline constexpr double kDefaultBnMomentum = 0.1;
inline constexpr double kDefaultGammaFloor = 1e-4;

// ---------------------------------------------------------------- leaky ReLU

inline Tensor leaky_relu(const Tensor& x, double slope) {
  return detail::map(x, [slope](auto v) {
    using T = decltype(v);
    return v >= T(0) ? v : T(slope) * v;
  });
}

// Subgradient at exactly 0 is the negative-side slope (fixed convention so
// tests are exact). z is the *output* of the forward pass; sign(z) == sign(x)
// because slope > 0.
inline Tensor leaky_relu_backward(const Tensor& gz, const Tensor& z, double slope) {
  return detail::zip(gz, z, [slope](auto g, auto zv) {
    using T = decltype(g);
    return zv > T(0) ? g : T(slope) * g;
  }, "leaky_relu_backward");
}

inline Tensor leaky_relu_inverse(const Tensor& z, double slope) {
  check_config(slope != 0.0, "leaky_relu_inverse: slope must be nonzero");
  return detail::map(z, [slope](auto v) {
    using T = decltype(v);
    return v >= T(0) ? v : v / T(slope);
  });
}

// ------------------------------------------------------- batch normalization

struct BnRunning {
  Tensor mean;  // F32, extent C
  Tensor var;   // F32, extent C

  static BnRunning create(std::int64_t c) {
    BnRunning r;
    r.mean = Tensor::zeros({c}, DType::F32);
    r.var = Tensor::full({c}, 1.0, DType::F32);
    return r;
  }
};

namespace detail {

/* The one elementwise normalize(+activate) kernel. Both the standard
   bn_forward -> leaky_relu pipeline and the fused in-place variant funnel
   through this exact expression sequence, so the two forwards round
   identically and compare bit-for-bit. */
template <typename T>
void bn_act_apply(const T* x, T* out, std::int64_t n, std::int64_t c, std::int64_t s,
                  const double* mean, const double* inv_sigma,
                  const double* gamma, const double* beta,
                  double slope, bool apply_act) {
  parallel::parallel_for(c, [&](std::int64_t ci) {
    const T mu = static_cast<T>(mean[ci]);
    const T is = static_cast<T>(inv_sigma[ci]);
    const T ga = static_cast<T>(gamma[ci]);
    const T be = static_cast<T>(beta[ci]);
    const T sl = static_cast<T>(slope);
    for (std::int64_t ni = 0; ni < n; ++ni) {
      const T* xp = x + (ni * c + ci) * s;
      T* op = out + (ni * c + ci) * s;
      for (std::int64_t i = 0; i < s; ++i) {
        const T xh = (xp[i] - mu) * is;
        const T y = ga * xh + be;
        op[i] = (!apply_act || y >= T(0)) ? y : sl * y;
      }
    }
  });
}

inline std::vector<double> per_channel_f64(const Tensor& t) {
  std::vector<double> v(static_cast<std::size_t>(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i) v[static_cast<std::size_t>(i)] = t.at(i);
  return v;
}

}  // namespace detail

struct BnResult {
  Tensor y;
  std::vector<double> mean;  // batch mean per channel
  std::vector<double> var;   // biased batch variance per channel
};

// Train-mode forward: batch statistics over (N,D,H,W) per channel, biased
// variance. Updates running stats (r <- (1-momentum)*r + momentum*batch) when
// `running` is given. Pass apply_act=true to fuse the activation (the fused
// path); the standard pipeline calls with false and activates separately.
inline BnResult bn_act_forward_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                     double eps, double momentum, double slope, bool apply_act,
                                     Tensor* out, BnRunning* running) {
  require_volume(x, "bn_forward");
  const std::int64_t c = x.dim(1);
  check_shape(gamma.numel() == c && beta.numel() == c, "bn_forward: gamma/beta extent != C");
  const std::int64_t m = x.dim(0) * x.dim(2) * x.dim(3) * x.dim(4);
  check_shape(m >= 2, "bn_forward: needs at least 2 elements per channel in train mode");
  check_config(eps > 0.0, "bn_forward: eps must be > 0");

  ChannelStats st = channel_mean_var(x);
  std::vector<double> inv_sigma(static_cast<std::size_t>(c));
  for (std::int64_t ci = 0; ci < c; ++ci)
    inv_sigma[static_cast<std::size_t>(ci)] =
        1.0 / std::sqrt(st.var[static_cast<std::size_t>(ci)] + eps);
  std::vector<double> ga = detail::per_channel_f64(gamma);
  std::vector<double> be = detail::per_channel_f64(beta);

  if (running) {
    auto rm = running->mean.f32();
    auto rv = running->var.f32();
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const auto i = static_cast<std::size_t>(ci);
      rm[i] = static_cast<float>((1.0 - momentum) * rm[i] + momentum * st.mean[i]);
      rv[i] = static_cast<float>((1.0 - momentum) * rv[i] + momentum * st.var[i]);
    }
  }

  BnResult r;
  r.mean = st.mean;
  r.var = st.var;
  const std::int64_t n = x.dim(0);
  const std::int64_t s = x.dim(2) * x.dim(3) * x.dim(4);
  if (x.dtype() == DType::F16) {
    Tensor xf = detail::f16_compute_in(x);
    Tensor yf(xf.shape(), DType::F32);
    detail::bn_act_apply<float>(xf.f32().data(), yf.f32().data(), n, c, s,
                                st.mean.data(), inv_sigma.data(), ga.data(), be.data(),
                                slope, apply_act);
    *out = detail::f16_compute_out(yf);
    return r;
  }
  *out = Tensor(x.shape(), x.dtype());
  if (x.dtype() == DType::F32)
    detail::bn_act_apply<float>(x.f32().data(), out->f32().data(), n, c, s,
                                st.mean.data(), inv_sigma.data(), ga.data(), be.data(),
                                slope, apply_act);
  else
    detail::bn_act_apply<double>(x.f64().data(), out->f64().data(), n, c, s,
                                 st.mean.data(), inv_sigma.data(), ga.data(), be.data(),
                                 slope, apply_act);
  return r;
}

inline BnResult bn_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           double eps, double momentum, Tensor* out, BnRunning* running) {
  return bn_act_forward_train(x, gamma, beta, eps, momentum, /*slope=*/0.0,
                              /*apply_act=*/false, out, running);
}

// Eval-mode forward: elementwise affine with the running statistics.
inline Tensor bn_act_forward_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                  const BnRunning& running, double eps, double slope,
                                  bool apply_act) {
  require_volume(x, "bn_forward_eval");
  const std::int64_t c = x.dim(1);
  check_shape(gamma.numel() == c && beta.numel() == c && running.mean.numel() == c &&
                  running.var.numel() == c,
              "bn_forward_eval: per-channel extent != C");
  std::vector<double> mean = detail::per_channel_f64(running.mean);
  std::vector<double> rvar = detail::per_channel_f64(running.var);
  std::vector<double> inv_sigma(static_cast<std::size_t>(c));
  for (std::int64_t ci = 0; ci < c; ++ci)
    inv_sigma[static_cast<std::size_t>(ci)] =
        1.0 / std::sqrt(rvar[static_cast<std::size_t>(ci)] + eps);
  std::vector<double> ga = detail::per_channel_f64(gamma);
  std::vector<double> be = detail::per_channel_f64(beta);
  const std::int64_t n = x.dim(0);
  const std::int64_t s = x.dim(2) * x.dim(3) * x.dim(4);
  if (x.dtype() == DType::F16) {
    Tensor xf = detail::f16_compute_in(x);
    Tensor yf(xf.shape(), DType::F32);
    detail::bn_act_apply<float>(xf.f32().data(), yf.f32().data(), n, c, s,
                                mean.data(), inv_sigma.data(), ga.data(), be.data(),
                                slope, apply_act);
    return detail::f16_compute_out(yf);
  }
  Tensor out(x.shape(), x.dtype());
  if (x.dtype() == DType::F32)
    detail::bn_act_apply<float>(x.f32().data(), out.f32().data(), n, c, s,
                                mean.data(), inv_sigma.data(), ga.data(), be.data(),
                                slope, apply_act);
  else
    detail::bn_act_apply<double>(x.f64().data(), out.f64().data(), n, c, s,
                                 mean.data(), inv_sigma.data(), ga.data(), be.data(),
                                 slope, apply_act);
  return out;
}

struct BnGrads {
  Tensor dx;
  std::vector<double> dgamma;  // per channel, F64 (caller casts into param dtype)
  std::vector<double> dbeta;
};

namespace detail {

/* Batch-norm backward expressed solely in the normalized input x-hat:
     dL/dbeta  = sum(gy)
     dL/dgamma = sum(gy * xhat)
     dL/dx     = (gamma/sigma) * (gy - mean(gy) - xhat * mean(gy*xhat))
   `gy` is the gradient w.r.t. the *pre-activation* BN output, and `xhat` is
   supplied by the caller — computed from the saved input on the standard
   path, reconstructed from the cached output on the in-place path. Both
   callers share this reduction, with fixed per-channel F64 accumulation
   order, so their results differ only by the x-hat source. */
template <typename GyAt, typename XhAt, typename DxOut>
void bn_backward_core(std::int64_t n, std::int64_t c, std::int64_t s,
                      const std::vector<double>& gamma, const std::vector<double>& inv_sigma,
                      GyAt gy, XhAt xh, DxOut dx_out,
                      std::vector<double>* dgamma, std::vector<double>* dbeta) {
  const std::int64_t m = n * s;
  dgamma->assign(static_cast<std::size_t>(c), 0.0);
  dbeta->assign(static_cast<std::size_t>(c), 0.0);
  std::vector<double> s1(static_cast<std::size_t>(c)), s2(static_cast<std::size_t>(c));
  parallel::parallel_for(c, [&](std::int64_t ci) {
    double a1 = 0.0, a2 = 0.0;
    for (std::int64_t ni = 0; ni < n; ++ni) {
      const std::int64_t base = (ni * c + ci) * s;
      for (std::int64_t i = 0; i < s; ++i) {
        const double g = gy(base + i);
        a1 += g;
        a2 += g * xh(base + i);
      }
    }
    s1[static_cast<std::size_t>(ci)] = a1;
    s2[static_cast<std::size_t>(ci)] = a2;
    const double k = gamma[static_cast<std::size_t>(ci)] * inv_sigma[static_cast<std::size_t>(ci)];
    const double m1 = a1 / static_cast<double>(m);
    const double m2 = a2 / static_cast<double>(m);
    for (std::int64_t ni = 0; ni < n; ++ni) {
      const std::int64_t base = (ni * c + ci) * s;
      for (std::int64_t i = 0; i < s; ++i)
        dx_out(base + i, k * (gy(base + i) - m1 - xh(base + i) * m2));
    }
  });
  *dbeta = s1;
  *dgamma = s2;
}

}  // namespace detail

// Standard-path backward: x-hat from the saved input x and the saved batch
// statistics. gy is the gradient w.r.t. the BN output (activation already
// back-propagated by the caller when a nonlinearity followed).
inline BnGrads bn_backward(const Tensor& gy, const Tensor& x, const Tensor& gamma,
                           const std::vector<double>& mean, const std::vector<double>& var,
                           double eps) {
  require_volume(x, "bn_backward");
  check_shape(gy.shape() == x.shape(), "bn_backward: gradient shape mismatch");
  const std::int64_t n = x.dim(0), c = x.dim(1);
  const std::int64_t s = x.dim(2) * x.dim(3) * x.dim(4);
  check_shape(n * s >= 2, "bn_backward: needs at least 2 elements per channel");
  std::vector<double> inv_sigma(static_cast<std::size_t>(c));
  for (std::int64_t ci = 0; ci < c; ++ci)
    inv_sigma[static_cast<std::size_t>(ci)] =
        1.0 / std::sqrt(var[static_cast<std::size_t>(ci)] + eps);
  std::vector<double> ga = detail::per_channel_f64(gamma);

  BnGrads out;
  out.dx = Tensor(x.shape(), gy.dtype());
  auto run = [&](auto loadg, auto loadx, auto store) {
    auto gyf = [&](std::int64_t i) { return static_cast<double>(loadg(i)); };
    auto xhf = [&](std::int64_t i) {
      const std::int64_t ci = (i / s) % c;
      return (static_cast<double>(loadx(i)) - mean[static_cast<std::size_t>(ci)]) *
             inv_sigma[static_cast<std::size_t>(ci)];
    };
    detail::bn_backward_core(n, c, s, ga, inv_sigma, gyf, xhf, store, &out.dgamma, &out.dbeta);
  };
  if (gy.dtype() == DType::F32 && x.dtype() == DType::F32) {
    auto pg = gy.f32(); auto px = x.f32(); auto pd = out.dx.f32();
    run([pg](std::int64_t i) { return pg[static_cast<std::size_t>(i)]; },
        [px](std::int64_t i) { return px[static_cast<std::size_t>(i)]; },
        [pd](std::int64_t i, double v) { pd[static_cast<std::size_t>(i)] = static_cast<float>(v); });
  } else if (gy.dtype() == DType::F64 && x.dtype() == DType::F64) {
    auto pg = gy.f64(); auto px = x.f64(); auto pd = out.dx.f64();
    run([pg](std::int64_t i) { return pg[static_cast<std::size_t>(i)]; },
        [px](std::int64_t i) { return px[static_cast<std::size_t>(i)]; },
        [pd](std::int64_t i, double v) { pd[static_cast<std::size_t>(i)] = v; });
  } else {
    Tensor gf = gy.dtype() == DType::F16 ? detail::f16_compute_in(gy) : gy;
    Tensor xf = x.dtype() == DType::F16 ? detail::f16_compute_in(x) : x;
    BnGrads g = bn_backward(gf, xf, gamma, mean, var, eps);
    g.dx = g.dx.to(gy.dtype());
    return g;
  }
  return out;
}

// ------------------------------------------------------------- param counts

inline std::int64_t conv_param_count(std::int64_t ci, std::int64_t co, std::int64_t k,
                                     std::int64_t groups, bool bias) {
  return (ci / groups) * co * k * k * k + (bias ? co : 0);
}

inline std::int64_t bn_param_count(std::int64_t c) { return 2 * c; }

}  // namespace memfcn

#endif  // MEMFCN_LAYERS_HPP
