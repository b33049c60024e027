// Independent reference implementations the test suite checks the library
// against. Everything here is written for clarity, not speed: straight
// nested loops, double accumulation, no sharing of code with the headers
// under test.

#ifndef MEMFCN_TESTS_ORACLES_HPP
#define MEMFCN_TESTS_ORACLES_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "memfcn/memfcn.hpp"

namespace oracle {

using memfcn::Shape;
using memfcn::Tensor;

// --------------------------------------------------------------- binary16

// Decodes a half bit pattern with plain arithmetic (ldexp), independent of
// the table-free branchy decoder in half.hpp.
inline double f16_decode(std::uint16_t bits) {
  const int sign = (bits >> 15) & 1;
  const int exp = (bits >> 10) & 0x1F;
  const int mant = bits & 0x3FF;
  double mag;
  if (exp == 0)
    mag = std::ldexp(static_cast<double>(mant), -24);  // subnormal: mant * 2^-24
  else if (exp == 31)
    mag = mant == 0 ? std::numeric_limits<double>::infinity()
                    : std::numeric_limits<double>::quiet_NaN();
  else
    mag = std::ldexp(1.0 + static_cast<double>(mant) / 1024.0, exp - 15);
  return sign ? -mag : mag;
}

// Rounds to the nearest representable half by exhaustive search over all
// candidates of the right sign, ties to the even bit pattern. Overflow uses
// the IEEE convention: the next value after the largest finite half acts as
// a rounding candidate, and landing on it yields infinity.
inline std::uint16_t f16_encode_nearest(double v) {
  if (std::isnan(v)) return 0x7E00;
  const std::uint16_t sign = v < 0 || (v == 0 && std::signbit(v)) ? 0x8000 : 0x0000;
  const double mag = std::fabs(v);
  const double next_after_max = 65536.0;  // 2^16, one half-ULP step past 65504
  if (std::isinf(v) || mag >= next_after_max) return sign | 0x7C00;

  std::uint16_t best = 0;
  double best_err = std::numeric_limits<double>::infinity();
  // Finite magnitudes are patterns 0x0000..0x7BFF; 0x7C00 stands in for the
  // virtual candidate 65536 that rounds to infinity.
  for (std::uint32_t p = 0; p <= 0x7C00; ++p) {
    const double cand = p == 0x7C00 ? next_after_max : f16_decode(static_cast<std::uint16_t>(p));
    const double err = std::fabs(cand - mag);
    if (err < best_err ||
        (err == best_err && (p & 1u) == 0 && (best & 1u) == 1u))
      best = static_cast<std::uint16_t>(p), best_err = err;
  }
  return sign | best;
}

// ------------------------------------------------------------ convolution

// Direct seven-loop 3D convolution (stride/pad/groups), double accumulation.
inline Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor* bias,
                     const memfcn::Conv3dSpec& sp) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const std::int64_t n = xs[0], ci = xs[1], di = xs[2], hi = xs[3], wi = xs[4];
  const std::int64_t co = ws[0], cig = ws[1], kd = ws[2], kh = ws[3], kw = ws[4];
  const std::int64_t g = sp.groups, cog = co / g;
  const std::int64_t dd = (di + 2 * sp.pad[0] - kd) / sp.stride[0] + 1;
  const std::int64_t hh = (hi + 2 * sp.pad[1] - kh) / sp.stride[1] + 1;
  const std::int64_t ww = (wi + 2 * sp.pad[2] - kw) / sp.stride[2] + 1;
  Tensor y({n, co, dd, hh, ww}, memfcn::DType::F64);
  auto X = [&](std::int64_t b, std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w2) {
    return x.at(((b * ci + c) * di + d) * hi * wi + h * wi + w2);
  };
  std::int64_t o = 0;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t oc = 0; oc < co; ++oc)
      for (std::int64_t od = 0; od < dd; ++od)
        for (std::int64_t oh = 0; oh < hh; ++oh)
          for (std::int64_t ow = 0; ow < ww; ++ow, ++o) {
            const std::int64_t grp = oc / cog;
            double acc = bias ? bias->at(oc) : 0.0;
            for (std::int64_t c = 0; c < cig; ++c)
              for (std::int64_t zd = 0; zd < kd; ++zd)
                for (std::int64_t zh = 0; zh < kh; ++zh)
                  for (std::int64_t zw = 0; zw < kw; ++zw) {
                    const std::int64_t id = od * sp.stride[0] - sp.pad[0] + zd;
                    const std::int64_t ih = oh * sp.stride[1] - sp.pad[1] + zh;
                    const std::int64_t iw = ow * sp.stride[2] - sp.pad[2] + zw;
                    if (id < 0 || id >= di || ih < 0 || ih >= hi || iw < 0 || iw >= wi) continue;
                    const double wv =
                        w.at((((oc * cig + c) * kd + zd) * kh + zh) * kw + zw);
                    acc += X(b, grp * cig + c, id, ih, iw) * wv;
                  }
            y.set(o, acc);
          }
  return y;
}

// Transposed convolution (kernel 2, stride 2) as an explicit scatter.
inline Tensor conv_transpose3d(const Tensor& x, const Tensor& w) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const std::int64_t n = xs[0], ci = xs[1], di = xs[2], hi = xs[3], wi = xs[4];
  const std::int64_t co = ws[1];
  Tensor y({n, co, di * 2, hi * 2, wi * 2}, memfcn::DType::F64);
  for (std::int64_t i = 0; i < y.numel(); ++i) y.set(i, 0.0);
  const std::int64_t dd = di * 2, hh = hi * 2, ww = wi * 2;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t c = 0; c < ci; ++c)
      for (std::int64_t d = 0; d < di; ++d)
        for (std::int64_t h = 0; h < hi; ++h)
          for (std::int64_t w2 = 0; w2 < wi; ++w2) {
            const double xv = x.at(((b * ci + c) * di + d) * hi * wi + h * wi + w2);
            for (std::int64_t oc = 0; oc < co; ++oc)
              for (std::int64_t zd = 0; zd < 2; ++zd)
                for (std::int64_t zh = 0; zh < 2; ++zh)
                  for (std::int64_t zw = 0; zw < 2; ++zw) {
                    const std::int64_t oi =
                        ((b * co + oc) * dd + (2 * d + zd)) * hh * ww + (2 * h + zh) * ww +
                        (2 * w2 + zw);
                    const double wv = w.at((((c * co + oc) * 2 + zd) * 2 + zh) * 2 + zw);
                    y.set(oi, y.at(oi) + xv * wv);
                  }
          }
  return y;
}

// 2x2x2 stride-2 max pooling; in-window offset out (depth-major, same as the
// library's convention), first maximum wins ties.
inline memfcn::MaxPoolResult maxpool2(const Tensor& x) {
  const Shape& xs = x.shape();
  const std::int64_t n = xs[0], c = xs[1], di = xs[2], hi = xs[3], wi = xs[4];
  const std::int64_t dd = di / 2, hh = hi / 2, ww = wi / 2;
  memfcn::MaxPoolResult r{Tensor({n, c, dd, hh, ww}, x.dtype()),
                          Tensor({n, c, dd, hh, ww}, x.dtype())};
  std::int64_t o = 0;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t d = 0; d < dd; ++d)
        for (std::int64_t h = 0; h < hh; ++h)
          for (std::int64_t w2 = 0; w2 < ww; ++w2, ++o) {
            double best = 0.0;
            std::int64_t arg = -1;
            for (std::int64_t zd = 0; zd < 2; ++zd)
              for (std::int64_t zh = 0; zh < 2; ++zh)
                for (std::int64_t zw = 0; zw < 2; ++zw) {
                  const std::int64_t i = ((b * c + ch) * di + (2 * d + zd)) * hi * wi +
                                         (2 * h + zh) * wi + (2 * w2 + zw);
                  if (arg < 0 || x.at(i) > best) best = x.at(i), arg = zd * 4 + zh * 2 + zw;
                }
            r.output.set(o, best);
            r.index.set(o, static_cast<double>(arg));
          }
  return r;
}

// ---------------------------------------------------------- normalization

struct Moments {
  std::vector<double> mean, var;  // population variance
};

inline Moments channel_moments(const Tensor& x) {
  const Shape& s = x.shape();
  const std::int64_t n = s[0], c = s[1], m = s[2] * s[3] * s[4];
  Moments mo{std::vector<double>(static_cast<std::size_t>(c), 0.0),
             std::vector<double>(static_cast<std::size_t>(c), 0.0)};
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t i = 0; i < m; ++i) sum += x.at((b * c + ch) * m + i);
    const double mean = sum / static_cast<double>(n * m);
    double acc = 0.0;
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t i = 0; i < m; ++i) {
        const double d = x.at((b * c + ch) * m + i) - mean;
        acc += d * d;
      }
    mo.mean[static_cast<std::size_t>(ch)] = mean;
    mo.var[static_cast<std::size_t>(ch)] = acc / static_cast<double>(n * m);
  }
  return mo;
}

// Batch norm + leaky ReLU forward, straight from the formulas.
inline Tensor bn_act(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                     double slope, bool act) {
  const Shape& s = x.shape();
  const std::int64_t n = s[0], c = s[1], m = s[2] * s[3] * s[4];
  Moments mo = channel_moments(x);
  Tensor y(s, memfcn::DType::F64);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < m; ++i) {
        const std::int64_t k = (b * c + ch) * m + i;
        const double xh = (x.at(k) - mo.mean[static_cast<std::size_t>(ch)]) /
                          std::sqrt(mo.var[static_cast<std::size_t>(ch)] + eps);
        double v = gamma.at(ch) * xh + beta.at(ch);
        if (act && v < 0) v *= slope;
        y.set(k, v);
      }
  return y;
}

// ------------------------------------------------------------------ dice

// Soft dice + cross entropy straight from the definitions.
inline double dice_ce(const Tensor& logits, const Tensor& labels, double wce, double wd,
                      double eps_d) {
  const Shape& s = logits.shape();
  const std::int64_t n = s[0], c = s[1], m = s[2] * s[3] * s[4];
  double ce = 0.0;
  std::vector<double> inter(static_cast<std::size_t>(c), 0.0),
      psum(static_cast<std::size_t>(c), 0.0), gsum(static_cast<std::size_t>(c), 0.0);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < m; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t ch = 0; ch < c; ++ch)
        mx = std::max(mx, logits.at((b * c + ch) * m + i));
      double den = 0.0;
      for (std::int64_t ch = 0; ch < c; ++ch)
        den += std::exp(logits.at((b * c + ch) * m + i) - mx);
      const auto lab = static_cast<std::int64_t>(labels.at(b * m + i));
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double p = std::exp(logits.at((b * c + ch) * m + i) - mx) / den;
        if (ch == lab) ce -= std::log(p);
        inter[static_cast<std::size_t>(ch)] += (ch == lab) ? p : 0.0;
        psum[static_cast<std::size_t>(ch)] += p;
        gsum[static_cast<std::size_t>(ch)] += (ch == lab) ? 1.0 : 0.0;
      }
    }
  ce /= static_cast<double>(n * m);
  double dice = 0.0;
  for (std::int64_t ch = 1; ch < c; ++ch)
    dice += (2.0 * inter[static_cast<std::size_t>(ch)] + eps_d) /
            (psum[static_cast<std::size_t>(ch)] + gsum[static_cast<std::size_t>(ch)] + eps_d);
  dice /= static_cast<double>(c - 1);
  return wce * ce + wd * (1.0 - dice);
}

// ----------------------------------------------------- tape probe helpers

// Sign pattern of every activation output plus every pool winner index;
// central-difference probes whose signatures differ straddle a kink and
// must be skipped rather than compared.
inline std::vector<std::int64_t> kink_signature(const memfcn::Tape& tape) {
  std::vector<std::int64_t> sig;
  for (const memfcn::NodeRec& nd : tape.nodes()) {
    if (nd.kind == memfcn::OpKind::NormAct || nd.kind == memfcn::OpKind::LeakyRelu) {
      const Tensor& z = tape.value(memfcn::Value{nd.outputs[0]}).data;
      for (std::int64_t i = 0; i < z.numel(); ++i) sig.push_back(z.at(i) >= 0 ? 1 : 0);
    } else if (nd.kind == memfcn::OpKind::MaxPool2) {
      const Tensor& idx = tape.value(memfcn::Value{nd.outputs[1]}).data;
      for (std::int64_t i = 0; i < idx.numel(); ++i)
        sig.push_back(static_cast<std::int64_t>(idx.at(i)));
    }
  }
  return sig;
}

// F64 loss evaluation of the full network with one parameter tensor swapped
// out, for finite-difference probes.
struct NetProbe {
  memfcn::UNetConfig cfg;
  memfcn::BufferPolicy policy = memfcn::BufferPolicy::Standard;
  std::uint64_t model_seed = 1;
  Tensor image, labels;
  std::unordered_map<std::string, Tensor> base;  // F64 copies of the parameters

  static NetProbe make(const memfcn::UNetConfig& cfg, memfcn::BufferPolicy pol,
                       std::uint64_t model_seed, const Tensor& image, const Tensor& labels) {
    NetProbe p;
    p.cfg = cfg;
    p.policy = pol;
    p.model_seed = model_seed;
    p.image = image;
    p.labels = labels;
    memfcn::Model m = memfcn::build_model(cfg, model_seed);
    for (const auto& name : m.param_order)
      p.base.emplace(name, m.params.at(name).to(memfcn::DType::F64));
    return p;
  }

  double loss_at(const std::string& name, const Tensor& probe,
                 std::vector<std::int64_t>* sig) const {
    std::unordered_map<std::string, Tensor> ov = base;
    if (!name.empty()) ov[name] = probe;
    memfcn::Model m = memfcn::build_model(cfg, model_seed);
    memfcn::Tape tape(memfcn::TapeMode::Train, policy);
    memfcn::UNetValues net =
        memfcn::unet_forward(tape, m, image, &labels, 1.0, 1.0, &ov);
    if (sig) *sig = kink_signature(tape);
    return tape.tensor(net.loss).at(0);
  }
};

}  // namespace oracle

#endif  // MEMFCN_TESTS_ORACLES_HPP
