#ifndef MEMFCN_LOSSES_HPP
#define MEMFCN_LOSSES_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "memfcn/common.hpp"
#include "memfcn/tensor.hpp"

namespace memfcn {

inline constexpr double kDiceEps = 1e-5;

struct DiceCeAux {
  double loss = 0.0;                // wce*CE + wd*DiceLoss
  double ce = 0.0;                  // mean cross entropy
  double dice_loss = 0.0;           // 1 - mean over foreground soft dice
  std::vector<double> inter;        // per class: sum p_c * g_c
  std::vector<double> psum;         // per class: sum p_c
  std::vector<double> gsum;         // per class: sum g_c
  std::int64_t voxels = 0;
  std::int64_t classes = 0;
};

namespace detail {

inline void check_loss_shapes(const Tensor& logits, const Tensor& labels) {
  require_volume(logits, "dice_ce_loss");
  check_shape(labels.ndim() == 4, "dice_ce_loss: labels must be N,D,H,W");
  check_shape(labels.dim(0) == logits.dim(0) && labels.dim(1) == logits.dim(2) &&
                  labels.dim(2) == logits.dim(3) && labels.dim(3) == logits.dim(4),
              "dice_ce_loss: label extents do not match logits");
  check_shape(logits.dim(1) >= 2, "dice_ce_loss: needs at least 2 classes");
}

inline std::vector<std::int32_t> decode_labels(const Tensor& labels, std::int64_t classes) {
  std::vector<std::int32_t> out(static_cast<std::size_t>(labels.numel()));
  for (std::int64_t i = 0; i < labels.numel(); ++i) {
    const double lab = labels.at(i);
    const auto g = static_cast<std::int64_t>(lab);
    check_shape(static_cast<double>(g) == lab && g >= 0 && g < classes,
                "dice_ce_loss: label out of range");
    out[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(g);
  }
  return out;
}

}  // namespace detail

/* loss = wce * CE + wd * (1 - mean_{c>=1} (2*I_c + eps)/(P_c + G_c + eps))
   CE is the mean over voxels of -log softmax at the true class. All
   reductions run serially in voxel order with F64 accumulators, so the value
   is identical for any worker count. Writes the softmax probabilities
   (dtype of logits) to *p_out — the buffer backward consumes. */
inline DiceCeAux dice_ce_forward(const Tensor& logits, const Tensor& labels, double wce,
                                 double wd, double eps_d, Tensor* p_out) {
  detail::check_loss_shapes(logits, labels);
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  const std::int64_t s = logits.dim(2) * logits.dim(3) * logits.dim(4);
  const std::int64_t m = n * s;

  Tensor lf = logits.dtype() == DType::F16 ? detail::f16_compute_in(logits) : logits;
  Tensor pf(lf.shape(), lf.dtype());

  DiceCeAux aux;
  aux.classes = c;
  aux.voxels = m;
  aux.inter.assign(static_cast<std::size_t>(c), 0.0);
  aux.psum.assign(static_cast<std::size_t>(c), 0.0);
  aux.gsum.assign(static_cast<std::size_t>(c), 0.0);

  const std::vector<std::int32_t> lab = detail::decode_labels(labels, c);
  double ce_acc = 0.0;
  std::vector<double> e(static_cast<std::size_t>(c));
  auto run = [&](auto load, auto store) {
    for (std::int64_t ni = 0; ni < n; ++ni)
      for (std::int64_t v = 0; v < s; ++v) {
        const std::int64_t g = lab[static_cast<std::size_t>(ni * s + v)];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t k = 0; k < c; ++k)
          mx = std::max(mx, load((ni * c + k) * s + v));
        double sum = 0.0;
        for (std::int64_t k = 0; k < c; ++k) {
          const double ek = std::exp(load((ni * c + k) * s + v) - mx);
          e[static_cast<std::size_t>(k)] = ek;
          sum += ek;
        }
        for (std::int64_t k = 0; k < c; ++k) {
          const double pk = e[static_cast<std::size_t>(k)] / sum;
          store((ni * c + k) * s + v, pk);
          aux.psum[static_cast<std::size_t>(k)] += pk;
          if (k == g) {
            aux.inter[static_cast<std::size_t>(k)] += pk;
            aux.gsum[static_cast<std::size_t>(k)] += 1.0;
            ce_acc += -(load((ni * c + k) * s + v) - mx - std::log(sum));
          }
        }
      }
  };
  if (lf.dtype() == DType::F32) {
    auto pl = lf.f32(); auto pp = pf.f32();
    run([pl](std::int64_t i) { return static_cast<double>(pl[static_cast<std::size_t>(i)]); },
        [pp](std::int64_t i, double v) { pp[static_cast<std::size_t>(i)] = static_cast<float>(v); });
  } else {
    auto pl = lf.f64(); auto pp = pf.f64();
    run([pl](std::int64_t i) { return pl[static_cast<std::size_t>(i)]; },
        [pp](std::int64_t i, double v) { pp[static_cast<std::size_t>(i)] = v; });
  }

  aux.ce = ce_acc / static_cast<double>(m);
  double dice_sum = 0.0;
  for (std::int64_t k = 1; k < c; ++k) {
    const auto i = static_cast<std::size_t>(k);
    dice_sum += (2.0 * aux.inter[i] + eps_d) / (aux.psum[i] + aux.gsum[i] + eps_d);
  }
  aux.dice_loss = 1.0 - dice_sum / static_cast<double>(c - 1);
  aux.loss = wce * aux.ce + wd * aux.dice_loss;
  if (p_out) *p_out = logits.dtype() == DType::F16 ? detail::f16_compute_out(pf) : pf;
  return aux;
}

/* dL/dlogits from the saved probabilities alone. CE uses the closed form
   (p - onehot)/M; the dice part chains its dL/dp through the softmax as
   p_k * (q_k - sum_j q_j p_j). `seed` multiplies the whole gradient (1 for a
   plain backward, the loss scale under mixed precision). */
inline Tensor dice_ce_backward(const Tensor& p, const Tensor& labels, const DiceCeAux& aux,
                               double wce, double wd, double eps_d, double seed,
                               DType out_dtype) {
  detail::check_loss_shapes(p, labels);
  const std::int64_t n = p.dim(0), c = p.dim(1);
  const std::int64_t s = p.dim(2) * p.dim(3) * p.dim(4);
  const auto m = static_cast<double>(aux.voxels);

  // Per-class dice coefficients of dL/dp: q_c(v) = A_c * g_c(v) + B_c.
  std::vector<double> qa(static_cast<std::size_t>(c), 0.0);
  std::vector<double> qb(static_cast<std::size_t>(c), 0.0);
  const double inv_fg = 1.0 / static_cast<double>(c - 1);
  for (std::int64_t k = 1; k < c; ++k) {
    const auto i = static_cast<std::size_t>(k);
    const double denom = aux.psum[i] + aux.gsum[i] + eps_d;
    qa[i] = -inv_fg * (2.0 / denom);
    qb[i] = inv_fg * (2.0 * aux.inter[i] + eps_d) / (denom * denom);
  }

  const std::vector<std::int32_t> lab = detail::decode_labels(labels, c);
  Tensor pfull = p.dtype() == DType::F16 ? detail::f16_compute_in(p) : p;
  Tensor gl(p.shape(), DType::F64);
  auto pd = gl.f64();
  auto run = [&](auto load) {
    for (std::int64_t ni = 0; ni < n; ++ni)
      for (std::int64_t v = 0; v < s; ++v) {
        const std::int64_t g = lab[static_cast<std::size_t>(ni * s + v)];
        double qdotp = 0.0;
        for (std::int64_t k = 0; k < c; ++k) {
          const double pk = load((ni * c + k) * s + v);
          const double qk = qa[static_cast<std::size_t>(k)] * (k == g ? 1.0 : 0.0) +
                            qb[static_cast<std::size_t>(k)];
          qdotp += qk * pk;
        }
        for (std::int64_t k = 0; k < c; ++k) {
          const std::int64_t idx = (ni * c + k) * s + v;
          const double pk = load(idx);
          const double qk = qa[static_cast<std::size_t>(k)] * (k == g ? 1.0 : 0.0) +
                            qb[static_cast<std::size_t>(k)];
          const double dce = wce * (pk - (k == g ? 1.0 : 0.0)) / m;
          const double ddice = wd * pk * (qk - qdotp);
          pd[static_cast<std::size_t>(idx)] = seed * (dce + ddice);
        }
      }
  };
  if (pfull.dtype() == DType::F32) {
    auto pl = pfull.f32();
    run([pl](std::int64_t i) { return static_cast<double>(pl[static_cast<std::size_t>(i)]); });
  } else {
    auto pl = pfull.f64();
    run([pl](std::int64_t i) { return pl[static_cast<std::size_t>(i)]; });
  }
  return gl.to(out_dtype);
}

// Hard-label overlap 2|P∩G| / (|P|+|G|); 1.0 when both sets are empty.
inline double dice_score(const Tensor& pred, const Tensor& truth, std::int64_t cls) {
  check_shape(pred.shape() == truth.shape(), "dice_score: shape mismatch");
  std::int64_t np = 0, ng = 0, ni = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const bool p = static_cast<std::int64_t>(pred.at(i)) == cls;
    const bool g = static_cast<std::int64_t>(truth.at(i)) == cls;
    np += p;
    ng += g;
    ni += (p && g);
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(np + ng);
}

}  // namespace memfcn

#endif  // MEMFCN_LOSSES_HPP
