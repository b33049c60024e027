#ifndef MEMFCN_CONV_HPP
#define MEMFCN_CONV_HPP

#include <array>
#include <cstdint>
#include <optional>

#include "memfcn/common.hpp"
#include "memfcn/parallel.hpp"
#include "memfcn/tensor.hpp"

namespace memfcn {

struct Conv3dSpec {
  std::array<std::int64_t, 3> stride{1, 1, 1};
  std::array<std::int64_t, 3> pad{0, 0, 0};
  std::int64_t groups = 1;
};

inline Shape conv3d_out_shape(const Shape& in, const Shape& w, const Conv3dSpec& sp) {
  check_shape(in.size() == 5, "conv3d: input must be N,C,D,H,W, got " + shape_str(in));
  check_shape(w.size() == 5, "conv3d: weight must be Co,Ci/g,kd,kh,kw, got " + shape_str(w));
  const std::int64_t ci = in[1], co = w[0];
  check_shape(sp.groups >= 1 && ci % sp.groups == 0 && co % sp.groups == 0,
              "conv3d: channels not divisible by groups");
  check_shape(w[1] == ci / sp.groups, "conv3d: weight channel extent != Ci/groups");
  Shape out{in[0], co, 0, 0, 0};
  for (int a = 0; a < 3; ++a) {
    const std::int64_t x = in[static_cast<std::size_t>(2 + a)];
    const std::int64_t k = w[static_cast<std::size_t>(2 + a)];
    const std::int64_t s = sp.stride[static_cast<std::size_t>(a)];
    const std::int64_t p = sp.pad[static_cast<std::size_t>(a)];
    check_shape(s >= 1 && p >= 0 && k >= 1, "conv3d: bad stride/pad/kernel");
    const std::int64_t e = (x + 2 * p - k) / s + 1;
    check_shape(x + 2 * p >= k && e > 0, "conv3d: non-positive output extent");
    out[static_cast<std::size_t>(2 + a)] = e;
  }
  return out;
}

namespace detail {

/* Direct cross-correlation. The tap loop (ci, kd, kh, kw) is the outer
   loop and the contiguous output row is the inner loop, so each output
   element accumulates its taps in one fixed order while the inner loop
   stays a vectorizable axpy over the row. Parallelism is over (n, co)
   slabs only — never over the reduction — which keeps results
   bit-identical for any worker count. */
template <typename T>
void conv3d_kernel(const T* in, const Shape& ins, const T* w, const Shape& ws,
                   const T* bias, T* out, const Shape& outs, const Conv3dSpec& sp) {
  const std::int64_t n = ins[0], ci = ins[1], id = ins[2], ih = ins[3], iw = ins[4];
  const std::int64_t co = ws[0], cig = ws[1], kd = ws[2], kh = ws[3], kw = ws[4];
  const std::int64_t od = outs[2], oh = outs[3], ow = outs[4];
  const std::int64_t g = sp.groups;
  const std::int64_t cog = co / g;
  const std::int64_t sd = sp.stride[0], sh = sp.stride[1], sw = sp.stride[2];
  const std::int64_t pd = sp.pad[0], ph = sp.pad[1], pw = sp.pad[2];

  parallel::parallel_for(n * co, [&](std::int64_t slab) {
    const std::int64_t ni = slab / co;
    const std::int64_t coi = slab % co;
    const std::int64_t gi = coi / cog;
    T* outc = out + ((ni * co + coi) * od * oh * ow);
    const T bv = bias ? bias[coi] : T(0);
    for (std::int64_t i = 0; i < od * oh * ow; ++i) outc[i] = bv;
    for (std::int64_t cii = 0; cii < cig; ++cii) {
      const T* inc = in + ((ni * ci + gi * cig + cii) * id * ih * iw);
      const T* wc = w + (((coi * cig) + cii) * kd * kh * kw);
      for (std::int64_t zk = 0; zk < kd; ++zk)
        for (std::int64_t yk = 0; yk < kh; ++yk)
          for (std::int64_t xk = 0; xk < kw; ++xk) {
            const T wv = wc[(zk * kh + yk) * kw + xk];
            for (std::int64_t zo = 0; zo < od; ++zo) {
              const std::int64_t zi = zo * sd + zk - pd;
              if (zi < 0 || zi >= id) continue;
              for (std::int64_t yo = 0; yo < oh; ++yo) {
                const std::int64_t yi = yo * sh + yk - ph;
                if (yi < 0 || yi >= ih) continue;
                T* orow = outc + (zo * oh + yo) * ow;
                const T* irow = inc + (zi * ih + yi) * iw;
                if (sw == 1) {
                  // valid xo range for xi = xo + xk - pw in [0, iw)
                  const std::int64_t x0 = std::max<std::int64_t>(0, pw - xk);
                  const std::int64_t x1 = std::min<std::int64_t>(ow, iw + pw - xk);
                  const T* ishift = irow + (xk - pw);
                  for (std::int64_t xo = x0; xo < x1; ++xo) orow[xo] += wv * ishift[xo];
                } else {
                  for (std::int64_t xo = 0; xo < ow; ++xo) {
                    const std::int64_t xi = xo * sw + xk - pw;
                    if (xi < 0 || xi >= iw) continue;
                    orow[xo] += wv * irow[xi];
                  }
                }
              }
            }
          }
    }
  });
}

// dL/dinput: per input row, gather contributions from the output gradient.
template <typename T>
void conv3d_dinput_kernel(const T* gout, const Shape& outs, const T* w, const Shape& ws,
                          T* gin, const Shape& ins, const Conv3dSpec& sp) {
  const std::int64_t n = ins[0], ci = ins[1], id = ins[2], ih = ins[3], iw = ins[4];
  const std::int64_t co = ws[0], cig = ws[1], kd = ws[2], kh = ws[3], kw = ws[4];
  const std::int64_t od = outs[2], oh = outs[3], ow = outs[4];
  const std::int64_t g = sp.groups;
  const std::int64_t cog = co / g;
  const std::int64_t sd = sp.stride[0], sh = sp.stride[1], sw = sp.stride[2];
  const std::int64_t pd = sp.pad[0], ph = sp.pad[1], pw = sp.pad[2];

  parallel::parallel_for(n * ci, [&](std::int64_t slab) {
    const std::int64_t ni = slab / ci;
    const std::int64_t cii = slab % ci;
    const std::int64_t gi = cii / cig;
    const std::int64_t cil = cii % cig;
    T* ginc = gin + ((ni * ci + cii) * id * ih * iw);
    for (std::int64_t i = 0; i < id * ih * iw; ++i) ginc[i] = T(0);
    for (std::int64_t col = 0; col < cog; ++col) {
      const std::int64_t coi = gi * cog + col;
      const T* goc = gout + ((ni * co + coi) * od * oh * ow);
      const T* wc = w + ((coi * cig + cil) * kd * kh * kw);
      for (std::int64_t zk = 0; zk < kd; ++zk)
        for (std::int64_t yk = 0; yk < kh; ++yk)
          for (std::int64_t xk = 0; xk < kw; ++xk) {
            const T wv = wc[(zk * kh + yk) * kw + xk];
            for (std::int64_t zo = 0; zo < od; ++zo) {
              const std::int64_t zi = zo * sd + zk - pd;
              if (zi < 0 || zi >= id) continue;
              for (std::int64_t yo = 0; yo < oh; ++yo) {
                const std::int64_t yi = yo * sh + yk - ph;
                if (yi < 0 || yi >= ih) continue;
                T* grow = ginc + (zi * ih + yi) * iw;
                const T* gorow = goc + (zo * oh + yo) * ow;
                if (sw == 1) {
                  const std::int64_t x0 = std::max<std::int64_t>(0, pw - xk);
                  const std::int64_t x1 = std::min<std::int64_t>(ow, iw + pw - xk);
                  T* gshift = grow + (xk - pw);
                  for (std::int64_t xo = x0; xo < x1; ++xo) gshift[xo] += wv * gorow[xo];
                } else {
                  for (std::int64_t xo = 0; xo < ow; ++xo) {
                    const std::int64_t xi = xo * sw + xk - pw;
                    if (xi < 0 || xi >= iw) continue;
                    grow[xi] += wv * gorow[xo];
                  }
                }
              }
            }
          }
    }
  });
}

/* dL/dweight. Each weight element is one big dot product over (n, od, oh,
   ow); eight independent accumulator lanes keep the loop vectorizable
   while the lane-combine order stays fixed, so the result does not depend
   on the worker count (work splits over weight rows only). */
template <typename T>
void conv3d_dweight_kernel(const T* gout, const Shape& outs, const T* in, const Shape& ins,
                           T* gw, const Shape& ws, const Conv3dSpec& sp) {
  const std::int64_t n = ins[0], ci = ins[1], id = ins[2], ih = ins[3], iw = ins[4];
  const std::int64_t co = ws[0], cig = ws[1], kd = ws[2], kh = ws[3], kw = ws[4];
  const std::int64_t od = outs[2], oh = outs[3], ow = outs[4];
  const std::int64_t g = sp.groups;
  const std::int64_t cog = co / g;
  const std::int64_t sd = sp.stride[0], sh = sp.stride[1], sw = sp.stride[2];
  const std::int64_t pd = sp.pad[0], ph = sp.pad[1], pw = sp.pad[2];

  parallel::parallel_for(co * cig, [&](std::int64_t slab) {
    const std::int64_t coi = slab / cig;
    const std::int64_t cii = slab % cig;
    const std::int64_t gi = coi / cog;
    T* gwc = gw + ((coi * cig + cii) * kd * kh * kw);
    for (std::int64_t zk = 0; zk < kd; ++zk)
      for (std::int64_t yk = 0; yk < kh; ++yk)
        for (std::int64_t xk = 0; xk < kw; ++xk) {
          T lanes[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
          T tail = T(0);
          for (std::int64_t ni = 0; ni < n; ++ni) {
            const T* inc = in + ((ni * ci + gi * cig + cii) * id * ih * iw);
            const T* goc = gout + ((ni * co + coi) * od * oh * ow);
            for (std::int64_t zo = 0; zo < od; ++zo) {
              const std::int64_t zi = zo * sd + zk - pd;
              if (zi < 0 || zi >= id) continue;
              for (std::int64_t yo = 0; yo < oh; ++yo) {
                const std::int64_t yi = yo * sh + yk - ph;
                if (yi < 0 || yi >= ih) continue;
                const T* gorow = goc + (zo * oh + yo) * ow;
                const T* irow = inc + (zi * ih + yi) * iw;
                if (sw == 1) {
                  const std::int64_t x0 = std::max<std::int64_t>(0, pw - xk);
                  const std::int64_t x1 = std::min<std::int64_t>(ow, iw + pw - xk);
                  const T* ishift = irow + (xk - pw);
                  std::int64_t xo = x0;
                  const std::int64_t vec_end = x0 + ((x1 - x0) / 8) * 8;
                  for (; xo < vec_end; xo += 8)
                    for (int l = 0; l < 8; ++l) lanes[l] += gorow[xo + l] * ishift[xo + l];
                  for (; xo < x1; ++xo) tail += gorow[xo] * ishift[xo];
                } else {
                  for (std::int64_t xo = 0; xo < ow; ++xo) {
                    const std::int64_t xi = xo * sw + xk - pw;
                    if (xi < 0 || xi >= iw) continue;
                    tail += gorow[xo] * irow[xi];
                  }
                }
              }
            }
          }
          T acc = T(0);
          for (int l = 0; l < 8; ++l) acc += lanes[l];
          gwc[(zk * kh + yk) * kw + xk] = acc + tail;
        }
  });
}

}  // namespace detail

inline Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor* bias,
                     const Conv3dSpec& sp) {
  if (input.dtype() != weight.dtype())
    throw DTypeError("conv3d: input/weight dtype mismatch");
  if (bias && bias->dtype() != input.dtype())
    throw DTypeError("conv3d: bias dtype mismatch");
  if (input.dtype() == DType::F16) {
    Tensor fi = detail::f16_compute_in(input);
    Tensor fw = detail::f16_compute_in(weight);
    std::optional<Tensor> fb;
    if (bias) fb = detail::f16_compute_in(*bias);
    return detail::f16_compute_out(conv3d(fi, fw, fb ? &*fb : nullptr, sp));
  }
  Shape outs = conv3d_out_shape(input.shape(), weight.shape(), sp);
  if (bias) check_shape(bias->numel() == weight.shape()[0], "conv3d: bias extent != Co");
  Tensor out(outs, input.dtype());
  if (input.dtype() == DType::F32) {
    detail::conv3d_kernel<float>(input.f32().data(), input.shape(), weight.f32().data(), weight.shape(),
                                 bias ? bias->f32().data() : nullptr, out.f32().data(), outs, sp);
  } else {
    detail::conv3d_kernel<double>(input.f64().data(), input.shape(), weight.f64().data(), weight.shape(),
                                  bias ? bias->f64().data() : nullptr, out.f64().data(), outs, sp);
  }
  return out;
}

struct Conv3dGrads {
  Tensor dinput;
  Tensor dweight;
  Tensor dbias;  // undefined when the op had no bias
};

inline Conv3dGrads conv3d_backward(const Tensor& grad_out, const Tensor& input,
                                   const Tensor& weight, bool has_bias, const Conv3dSpec& sp) {
  if (grad_out.dtype() == DType::F16) {
    Conv3dGrads g = conv3d_backward(detail::f16_compute_in(grad_out), detail::f16_compute_in(input),
                                    detail::f16_compute_in(weight), has_bias, sp);
    g.dinput = detail::f16_compute_out(g.dinput);
    g.dweight = detail::f16_compute_out(g.dweight);
    if (g.dbias.defined()) g.dbias = detail::f16_compute_out(g.dbias);
    return g;
  }
  Shape outs = conv3d_out_shape(input.shape(), weight.shape(), sp);
  check_shape(grad_out.shape() == outs, "conv3d_backward: grad shape mismatch");
  Conv3dGrads g;
  g.dinput = Tensor(input.shape(), input.dtype());
  g.dweight = Tensor(weight.shape(), weight.dtype());
  if (input.dtype() == DType::F32) {
    detail::conv3d_dinput_kernel<float>(grad_out.f32().data(), outs, weight.f32().data(), weight.shape(),
                                        g.dinput.f32().data(), input.shape(), sp);
    detail::conv3d_dweight_kernel<float>(grad_out.f32().data(), outs, input.f32().data(), input.shape(),
                                         g.dweight.f32().data(), weight.shape(), sp);
  } else {
    detail::conv3d_dinput_kernel<double>(grad_out.f64().data(), outs, weight.f64().data(), weight.shape(),
                                         g.dinput.f64().data(), input.shape(), sp);
    detail::conv3d_dweight_kernel<double>(grad_out.f64().data(), outs, input.f64().data(), input.shape(),
                                          g.dweight.f64().data(), weight.shape(), sp);
  }
  if (has_bias) {
    const std::int64_t co = weight.shape()[0];
    const std::int64_t n = outs[0];
    const std::int64_t s = outs[2] * outs[3] * outs[4];
    g.dbias = Tensor({co}, weight.dtype());
    for (std::int64_t c = 0; c < co; ++c) {
      double acc = 0.0;
      for (std::int64_t ni = 0; ni < n; ++ni)
        for (std::int64_t i = 0; i < s; ++i) acc += grad_out.at((ni * co + c) * s + i);
      g.dbias.set(c, acc);
    }
  }
  return g;
}

/* Transposed convolution, fixed kernel 2 / stride 2 / no padding — the only
   configuration the decoder emits. Weight layout Ci,Co,2,2,2. Written in
   gather form: every output voxel has exactly one (kd,kh,kw) source, so the
   accumulation is a plain dot over Ci. */
inline Shape conv_transpose3d_out_shape(const Shape& in, const Shape& w) {
  check_shape(in.size() == 5, "conv_transpose3d: input must be N,C,D,H,W");
  check_shape(w.size() == 5 && w[2] == 2 && w[3] == 2 && w[4] == 2,
              "conv_transpose3d: weight must be Ci,Co,2,2,2");
  check_shape(w[0] == in[1], "conv_transpose3d: weight Ci != input C");
  return Shape{in[0], w[1], in[2] * 2, in[3] * 2, in[4] * 2};
}

inline Tensor conv_transpose3d(const Tensor& input, const Tensor& weight) {
  if (input.dtype() != weight.dtype())
    throw DTypeError("conv_transpose3d: dtype mismatch");
  if (input.dtype() == DType::F16)
    return detail::f16_compute_out(
        conv_transpose3d(detail::f16_compute_in(input), detail::f16_compute_in(weight)));
  Shape outs = conv_transpose3d_out_shape(input.shape(), weight.shape());
  Tensor out(outs, input.dtype());
  auto run = [&](auto* in, auto* w, auto* o) {
    using T = std::remove_pointer_t<decltype(o)>;
    const std::int64_t n = input.dim(0), ci = input.dim(1);
    const std::int64_t id = input.dim(2), ih = input.dim(3), iw = input.dim(4);
    const std::int64_t co = outs[1];
    parallel::parallel_for(n * co, [&](std::int64_t slab) {
      const std::int64_t ni = slab / co;
      const std::int64_t coi = slab % co;
      T* oc = o + (ni * co + coi) * (8 * id * ih * iw);
      for (std::int64_t zo = 0; zo < 2 * id; ++zo)
        for (std::int64_t yo = 0; yo < 2 * ih; ++yo)
          for (std::int64_t xo = 0; xo < 2 * iw; ++xo) {
            const std::int64_t zi = zo / 2, yi = yo / 2, xi = xo / 2;
            const std::int64_t k = ((zo & 1) * 2 + (yo & 1)) * 2 + (xo & 1);
            T acc = T(0);
            for (std::int64_t cii = 0; cii < ci; ++cii) {
              const T iv = in[((ni * ci + cii) * id + zi) * ih * iw + yi * iw + xi];
              const T wv = w[(cii * co + coi) * 8 + k];
              acc += iv * wv;
            }
            oc[(zo * 2 * ih + yo) * 2 * iw + xo] = acc;
          }
    });
  };
  if (input.dtype() == DType::F32)
    run(input.f32().data(), weight.f32().data(), out.f32().data());
  else
    run(input.f64().data(), weight.f64().data(), out.f64().data());
  return out;
}

struct ConvTranspose3dGrads {
  Tensor dinput;
  Tensor dweight;
};

inline ConvTranspose3dGrads conv_transpose3d_backward(const Tensor& grad_out, const Tensor& input,
                                                      const Tensor& weight) {
  if (grad_out.dtype() == DType::F16) {
    auto g = conv_transpose3d_backward(detail::f16_compute_in(grad_out), detail::f16_compute_in(input),
                                       detail::f16_compute_in(weight));
    return {detail::f16_compute_out(g.dinput), detail::f16_compute_out(g.dweight)};
  }
  Shape outs = conv_transpose3d_out_shape(input.shape(), weight.shape());
  check_shape(grad_out.shape() == outs, "conv_transpose3d_backward: grad shape mismatch");
  ConvTranspose3dGrads g;
  g.dinput = Tensor(input.shape(), input.dtype());
  g.dweight = Tensor(weight.shape(), weight.dtype());
  auto run = [&](auto* go, auto* in, auto* w, auto* gi, auto* gw) {
    using T = std::remove_pointer_t<decltype(gi)>;
    const std::int64_t n = input.dim(0), ci = input.dim(1);
    const std::int64_t id = input.dim(2), ih = input.dim(3), iw = input.dim(4);
    const std::int64_t co = outs[1];
    // dinput[n,ci,z,y,x] = sum_co sum_k go[n,co,2z+kd,2y+kh,2x+kw] * w[ci,co,k]
    parallel::parallel_for(n * ci, [&](std::int64_t slab) {
      const std::int64_t ni = slab / ci;
      const std::int64_t cii = slab % ci;
      T* gic = gi + (ni * ci + cii) * id * ih * iw;
      for (std::int64_t zi = 0; zi < id; ++zi)
        for (std::int64_t yi = 0; yi < ih; ++yi)
          for (std::int64_t xi = 0; xi < iw; ++xi) {
            T acc = T(0);
            for (std::int64_t coi = 0; coi < co; ++coi) {
              const T* goc = go + (ni * co + coi) * (8 * id * ih * iw);
              const T* wc = w + (cii * co + coi) * 8;
              for (int k = 0; k < 8; ++k) {
                const std::int64_t zo = 2 * zi + (k >> 2), yo = 2 * yi + ((k >> 1) & 1), xo = 2 * xi + (k & 1);
                acc += goc[(zo * 2 * ih + yo) * 2 * iw + xo] * wc[k];
              }
            }
            gic[(zi * ih + yi) * iw + xi] = acc;
          }
    });
    // dweight[ci,co,k] = sum_{n,z,y,x} in[n,ci,z,y,x] * go[n,co,2z+kd,...]
    parallel::parallel_for(ci * co, [&](std::int64_t slab) {
      const std::int64_t cii = slab / co;
      const std::int64_t coi = slab % co;
      for (int k = 0; k < 8; ++k) {
        T acc = T(0);
        for (std::int64_t ni = 0; ni < n; ++ni) {
          const T* inc = in + (ni * ci + cii) * id * ih * iw;
          const T* goc = go + (ni * co + coi) * (8 * id * ih * iw);
          for (std::int64_t zi = 0; zi < id; ++zi)
            for (std::int64_t yi = 0; yi < ih; ++yi)
              for (std::int64_t xi = 0; xi < iw; ++xi) {
                const std::int64_t zo = 2 * zi + (k >> 2), yo = 2 * yi + ((k >> 1) & 1), xo = 2 * xi + (k & 1);
                acc += inc[(zi * ih + yi) * iw + xi] * goc[(zo * 2 * ih + yo) * 2 * iw + xo];
              }
        }
        gw[(cii * co + coi) * 8 + k] = acc;
      }
    });
  };
  if (input.dtype() == DType::F32)
    run(grad_out.f32().data(), input.f32().data(), weight.f32().data(),
        g.dinput.f32().data(), g.dweight.f32().data());
  else
    run(grad_out.f64().data(), input.f64().data(), weight.f64().data(),
        g.dinput.f64().data(), g.dweight.f64().data());
  return g;
}

/* 2x2x2 max pool, stride 2. Returns the pooled tensor and a same-shaped
   index tensor holding the in-window offset (0..7) of each max, which is
   exactly representable in every storage dtype. Ties take the first max in
   scan order. */
struct MaxPoolResult {
  Tensor output;
  Tensor index;
};

inline MaxPoolResult maxpool2(const Tensor& input) {
  require_volume(input, "maxpool2");
  check_shape(input.dim(2) % 2 == 0 && input.dim(3) % 2 == 0 && input.dim(4) % 2 == 0,
              "maxpool2: spatial extents must be even, got " + shape_str(input.shape()));
  if (input.dtype() == DType::F16) {
    MaxPoolResult r = maxpool2(detail::f16_compute_in(input));
    return {detail::f16_compute_out(r.output), detail::f16_compute_out(r.index)};
  }
  const std::int64_t n = input.dim(0), c = input.dim(1);
  const std::int64_t id = input.dim(2), ih = input.dim(3), iw = input.dim(4);
  const std::int64_t od = id / 2, oh = ih / 2, ow = iw / 2;
  MaxPoolResult r{Tensor({n, c, od, oh, ow}, input.dtype()), Tensor({n, c, od, oh, ow}, input.dtype())};
  auto run = [&](auto* in, auto* out, auto* idx) {
    using T = std::remove_pointer_t<decltype(out)>;
    parallel::parallel_for(n * c, [&](std::int64_t slab) {
      const T* inc = in + slab * id * ih * iw;
      T* oc = out + slab * od * oh * ow;
      T* ic = idx + slab * od * oh * ow;
      for (std::int64_t zo = 0; zo < od; ++zo)
        for (std::int64_t yo = 0; yo < oh; ++yo)
          for (std::int64_t xo = 0; xo < ow; ++xo) {
            T best{};
            int arg = -1;
            for (int k = 0; k < 8; ++k) {
              const std::int64_t zi = 2 * zo + (k >> 2), yi = 2 * yo + ((k >> 1) & 1), xi = 2 * xo + (k & 1);
              const T v = inc[(zi * ih + yi) * iw + xi];
              if (arg < 0 || v > best) { best = v; arg = k; }
            }
            oc[(zo * oh + yo) * ow + xo] = best;
            ic[(zo * oh + yo) * ow + xo] = static_cast<T>(arg);
          }
    });
  };
  if (input.dtype() == DType::F32)
    run(input.f32().data(), r.output.f32().data(), r.index.f32().data());
  else
    run(input.f64().data(), r.output.f64().data(), r.index.f64().data());
  return r;
}

inline Tensor maxpool2_backward(const Tensor& grad_out, const Tensor& index, const Shape& in_shape) {
  if (grad_out.dtype() == DType::F16)
    return detail::f16_compute_out(
        maxpool2_backward(detail::f16_compute_in(grad_out), detail::f16_compute_in(index), in_shape));
  check_shape(grad_out.shape() == index.shape(), "maxpool2_backward: grad/index shape mismatch");
  Tensor gin(in_shape, grad_out.dtype());
  const std::int64_t n = in_shape[0], c = in_shape[1];
  const std::int64_t id = in_shape[2], ih = in_shape[3], iw = in_shape[4];
  const std::int64_t od = id / 2, oh = ih / 2, ow = iw / 2;
  auto run = [&](auto* go, auto* idx, auto* gi) {
    parallel::parallel_for(n * c, [&](std::int64_t slab) {
      auto* gic = gi + slab * id * ih * iw;
      auto* goc = go + slab * od * oh * ow;
      auto* ic = idx + slab * od * oh * ow;
      for (std::int64_t zo = 0; zo < od; ++zo)
        for (std::int64_t yo = 0; yo < oh; ++yo)
          for (std::int64_t xo = 0; xo < ow; ++xo) {
            const int k = static_cast<int>(ic[(zo * oh + yo) * ow + xo]);
            const std::int64_t zi = 2 * zo + (k >> 2), yi = 2 * yo + ((k >> 1) & 1), xi = 2 * xo + (k & 1);
            gic[(zi * ih + yi) * iw + xi] += goc[(zo * oh + yo) * ow + xo];
          }
    });
  };
  if (grad_out.dtype() == DType::F32)
    run(grad_out.f32().data(), index.f32().data(), gin.f32().data());
  else
    run(grad_out.f64().data(), index.f64().data(), gin.f64().data());
  return gin;
}

}  // namespace memfcn

#endif  // MEMFCN_CONV_HPP
