#ifndef MEMFCN_RESAMPLE_HPP
#define MEMFCN_RESAMPLE_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

#include "memfcn/common.hpp"
#include "memfcn/tensor.hpp"

namespace memfcn {

/* Spacing-aware resampling on the physical grid with voxel centers at
   index*spacing. Output extents are round(extent_in * spacing_in /
   spacing_out), floored at 1; sample coordinates clamp to the volume edge.
   Images interpolate trilinearly, label maps take the nearest voxel. */

inline std::array<std::int64_t, 3> resample_extents(const std::array<std::int64_t, 3>& in,
                                                    const std::array<double, 3>& sp_in,
                                                    const std::array<double, 3>& sp_out) {
  std::array<std::int64_t, 3> out{};
  for (int i = 0; i < 3; ++i) {
    check_config(sp_in[static_cast<std::size_t>(i)] > 0 && sp_out[static_cast<std::size_t>(i)] > 0,
                 "resample: spacings must be positive");
    const double e = static_cast<double>(in[static_cast<std::size_t>(i)]) *
                     sp_in[static_cast<std::size_t>(i)] / sp_out[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(i)] = std::max<std::int64_t>(1, std::llround(e));
  }
  return out;
}

namespace detail {

template <bool kNearest>
void resample_volume(const double* src, const std::array<std::int64_t, 3>& se, double* dst,
                     const std::array<std::int64_t, 3>& de,
                     const std::array<double, 3>& sp_in, const std::array<double, 3>& sp_out) {
  const std::int64_t sd = se[0], sh = se[1], sw = se[2];
  auto clampf = [](double v, double hi) { return v < 0.0 ? 0.0 : (v > hi ? hi : v); };
  std::int64_t o = 0;
  for (std::int64_t z = 0; z < de[0]; ++z) {
    const double fz = clampf(static_cast<double>(z) * sp_out[0] / sp_in[0],
                             static_cast<double>(sd - 1));
    for (std::int64_t y = 0; y < de[1]; ++y) {
      const double fy = clampf(static_cast<double>(y) * sp_out[1] / sp_in[1],
                               static_cast<double>(sh - 1));
      for (std::int64_t x = 0; x < de[2]; ++x, ++o) {
        const double fx = clampf(static_cast<double>(x) * sp_out[2] / sp_in[2],
                                 static_cast<double>(sw - 1));
        if constexpr (kNearest) {
          const std::int64_t z0 = std::llround(fz);
          const std::int64_t y0 = std::llround(fy);
          const std::int64_t x0 = std::llround(fx);
          dst[o] = src[(z0 * sh + y0) * sw + x0];
        } else {
          const std::int64_t z0 = static_cast<std::int64_t>(fz);
          const std::int64_t y0 = static_cast<std::int64_t>(fy);
          const std::int64_t x0 = static_cast<std::int64_t>(fx);
          const std::int64_t z1 = std::min(z0 + 1, sd - 1);
          const std::int64_t y1 = std::min(y0 + 1, sh - 1);
          const std::int64_t x1 = std::min(x0 + 1, sw - 1);
          const double tz = fz - static_cast<double>(z0);
          const double ty = fy - static_cast<double>(y0);
          const double tx = fx - static_cast<double>(x0);
          auto at = [&](std::int64_t zz, std::int64_t yy, std::int64_t xx) {
            return src[(zz * sh + yy) * sw + xx];
          };
          const double c00 = at(z0, y0, x0) * (1 - tx) + at(z0, y0, x1) * tx;
          const double c01 = at(z0, y1, x0) * (1 - tx) + at(z0, y1, x1) * tx;
          const double c10 = at(z1, y0, x0) * (1 - tx) + at(z1, y0, x1) * tx;
          const double c11 = at(z1, y1, x0) * (1 - tx) + at(z1, y1, x1) * tx;
          dst[o] = (c00 * (1 - ty) + c01 * ty) * (1 - tz) + (c10 * (1 - ty) + c11 * ty) * tz;
        }
      }
    }
  }
}

inline std::array<std::int64_t, 3> spatial_extents(const Tensor& t, int first) {
  return {t.dim(first), t.dim(first + 1), t.dim(first + 2)};
}

}  // namespace detail

// Rank-4 [C,D,H,W] image volumes.
inline Tensor resample_trilinear(const Tensor& x, const std::array<double, 3>& sp_in,
                                 const std::array<double, 3>& sp_out) {
  check_shape(x.ndim() == 4, "resample_trilinear: expected a C,D,H,W tensor");
  const auto se = detail::spatial_extents(x, 1);
  const auto de = resample_extents(se, sp_in, sp_out);
  Tensor xs = x.to(DType::F64);
  Tensor out(Shape{x.dim(0), de[0], de[1], de[2]}, DType::F64);
  const std::int64_t svox = se[0] * se[1] * se[2];
  const std::int64_t dvox = de[0] * de[1] * de[2];
  for (std::int64_t c = 0; c < x.dim(0); ++c)
    detail::resample_volume<false>(xs.f64().data() + c * svox, se, out.f64().data() + c * dvox,
                                   de, sp_in, sp_out);
  return out.to(x.dtype());
}

// Rank-3 [D,H,W] label maps.
inline Tensor resample_nearest(const Tensor& x, const std::array<double, 3>& sp_in,
                               const std::array<double, 3>& sp_out) {
  check_shape(x.ndim() == 3, "resample_nearest: expected a D,H,W tensor");
  const auto se = detail::spatial_extents(x, 0);
  const auto de = resample_extents(se, sp_in, sp_out);
  Tensor xs = x.to(DType::F64);
  Tensor out(Shape{de[0], de[1], de[2]}, DType::F64);
  detail::resample_volume<true>(xs.f64().data(), se, out.f64().data(), de, sp_in, sp_out);
  return out.to(x.dtype());
}

}  // namespace memfcn

#endif  // MEMFCN_RESAMPLE_HPP
