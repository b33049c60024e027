#ifndef MEMFCN_TENSOR_HPP
#define MEMFCN_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "memfcn/common.hpp"
#include "memfcn/half.hpp"

namespace memfcn {

enum class DType : std::uint8_t { F16 = 0, F32 = 1, F64 = 2 };

inline constexpr int dtype_size(DType dt) {
  switch (dt) {
    case DType::F16: return 2;
    case DType::F32: return 4;
    case DType::F64: return 8;
  }
  return 0;
}

inline const char* dtype_name(DType dt) {
  switch (dt) {
    case DType::F16: return "f16";
    case DType::F32: return "f32";
    case DType::F64: return "f64";
  }
  return "?";
}

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

/* Dense row-major N-d array. Volumes follow the N,C,D,H,W convention.

   Storage is shared between copies (value semantics with cheap hand-off);
   kernels always build fresh outputs, and the only sanctioned in-place
   mutation is the inplace-ABN overwrite, which goes through mutable
   element access on purpose. F16 elements hold raw binary16 patterns. */
class Tensor {
  struct Storage {
    std::variant<std::vector<std::uint16_t>, std::vector<float>, std::vector<double>> data;
  };

 public:
  Tensor() = default;

  Tensor(Shape shape, DType dt) : shape_(std::move(shape)), dtype_(dt) {
    for (std::int64_t e : shape_)
      check_shape(e > 0, "tensor extents must be positive, got " + shape_str(shape_));
    std::int64_t n = shape_numel(shape_);
    st_ = std::make_shared<Storage>();
    switch (dt) {
      case DType::F16: st_->data = std::vector<std::uint16_t>(static_cast<std::size_t>(n), 0); break;
      case DType::F32: st_->data = std::vector<float>(static_cast<std::size_t>(n), 0.0f); break;
      case DType::F64: st_->data = std::vector<double>(static_cast<std::size_t>(n), 0.0); break;
    }
  }

  static Tensor zeros(Shape shape, DType dt = DType::F32) { return Tensor(std::move(shape), dt); }

  static Tensor full(Shape shape, double v, DType dt = DType::F32) {
    Tensor t(std::move(shape), dt);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, v);
    return t;
  }

  static Tensor from_values(Shape shape, const std::vector<double>& vals, DType dt = DType::F32) {
    Tensor t(std::move(shape), dt);
    check_shape(static_cast<std::int64_t>(vals.size()) == t.numel(), "value count != numel");
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, vals[static_cast<std::size_t>(i)]);
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  std::int64_t numel() const { return shape_numel(shape_); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t bytes() const { return numel() * dtype_size(dtype_); }
  const void* storage_id() const { return st_.get(); }
  bool shares_storage(const Tensor& o) const { return st_ && st_ == o.st_; }

  std::span<float> f32() {
    require(DType::F32);
    return std::span<float>(std::get<std::vector<float>>(st_->data));
  }
  std::span<const float> f32() const {
    require(DType::F32);
    return std::span<const float>(std::get<std::vector<float>>(st_->data));
  }
  std::span<double> f64() {
    require(DType::F64);
    return std::span<double>(std::get<std::vector<double>>(st_->data));
  }
  std::span<const double> f64() const {
    require(DType::F64);
    return std::span<const double>(std::get<std::vector<double>>(st_->data));
  }
  std::span<std::uint16_t> f16() {
    require(DType::F16);
    return std::span<std::uint16_t>(std::get<std::vector<std::uint16_t>>(st_->data));
  }
  std::span<const std::uint16_t> f16() const {
    require(DType::F16);
    return std::span<const std::uint16_t>(std::get<std::vector<std::uint16_t>>(st_->data));
  }

  double at(std::int64_t i) const {
    switch (dtype_) {
      case DType::F16: return static_cast<double>(f16_to_f32(f16()[static_cast<std::size_t>(i)]));
      case DType::F32: return static_cast<double>(f32()[static_cast<std::size_t>(i)]);
      case DType::F64: return f64()[static_cast<std::size_t>(i)];
    }
    return 0.0;
  }

  void set(std::int64_t i, double v) {
    switch (dtype_) {
      case DType::F16: f16()[static_cast<std::size_t>(i)] = f32_to_f16_bits(static_cast<float>(v)); break;
      case DType::F32: f32()[static_cast<std::size_t>(i)] = static_cast<float>(v); break;
      case DType::F64: f64()[static_cast<std::size_t>(i)] = v; break;
    }
  }

  /// Conversion; narrowing to F16 rounds to nearest even. Same-dtype
  /// conversion returns a copy that still shares storage.
  Tensor to(DType dt) const {
    if (dt == dtype_) return *this;
    Tensor out(shape_, dt);
    std::int64_t n = numel();
    if (dtype_ == DType::F16 && dt == DType::F32) {
      auto src = f16();
      auto dst = out.f32();
      for (std::int64_t i = 0; i < n; ++i) dst[static_cast<std::size_t>(i)] = f16_to_f32(src[static_cast<std::size_t>(i)]);
    } else if (dtype_ == DType::F32 && dt == DType::F16) {
      auto src = f32();
      auto dst = out.f16();
      for (std::int64_t i = 0; i < n; ++i) dst[static_cast<std::size_t>(i)] = f32_to_f16_bits(src[static_cast<std::size_t>(i)]);
    } else {
      for (std::int64_t i = 0; i < n; ++i) out.set(i, at(i));
    }
    return out;
  }

  Tensor clone() const {
    if (!defined()) return Tensor();
    Tensor out(shape_, dtype_);
    out.st_->data = st_->data;
    return out;
  }

  /// Same storage under a new shape with the same element count.
  Tensor reshaped(Shape shape) const {
    check_shape(shape_numel(shape) == numel(), "reshaped: element count must not change");
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  bool bitwise_equal(const Tensor& o) const {
    if (dtype_ != o.dtype_ || shape_ != o.shape_) return false;
    return st_->data == o.st_->data;
  }

 private:
  void require(DType dt) const {
    if (!st_ || dtype_ != dt)
      throw DTypeError(std::string("tensor is ") + (st_ ? dtype_name(dtype_) : "undefined") +
                       ", expected " + dtype_name(dt));
  }

  Shape shape_;
  DType dtype_ = DType::F32;
  std::shared_ptr<Storage> st_;
};

namespace detail {

// Applies fn over a tensor pair elementwise in F64, writing results in the
// output dtype (RNE when F16). Shapes must match exactly.
template <typename Fn>
Tensor zip(const Tensor& a, const Tensor& b, Fn&& fn, const char* opname) {
  check_shape(a.shape() == b.shape(),
              std::string(opname) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  if (a.dtype() != b.dtype())
    throw DTypeError(std::string(opname) + ": dtype mismatch");
  Tensor out(a.shape(), a.dtype());
  std::int64_t n = a.numel();
  if (a.dtype() == DType::F32) {
    auto pa = a.f32(); auto pb = b.f32(); auto po = out.f32();
    for (std::int64_t i = 0; i < n; ++i)
      po[static_cast<std::size_t>(i)] = static_cast<float>(fn(pa[static_cast<std::size_t>(i)], pb[static_cast<std::size_t>(i)]));
  } else if (a.dtype() == DType::F64) {
    auto pa = a.f64(); auto pb = b.f64(); auto po = out.f64();
    for (std::int64_t i = 0; i < n; ++i)
      po[static_cast<std::size_t>(i)] = fn(pa[static_cast<std::size_t>(i)], pb[static_cast<std::size_t>(i)]);
  } else {
    for (std::int64_t i = 0; i < n; ++i)
      out.set(i, fn(static_cast<float>(a.at(i)), static_cast<float>(b.at(i))));
  }
  return out;
}

template <typename Fn>
Tensor map(const Tensor& a, Fn&& fn) {
  Tensor out(a.shape(), a.dtype());
  std::int64_t n = a.numel();
  if (a.dtype() == DType::F32) {
    auto pa = a.f32(); auto po = out.f32();
    for (std::int64_t i = 0; i < n; ++i)
      po[static_cast<std::size_t>(i)] = static_cast<float>(fn(pa[static_cast<std::size_t>(i)]));
  } else if (a.dtype() == DType::F64) {
    auto pa = a.f64(); auto po = out.f64();
    for (std::int64_t i = 0; i < n; ++i)
      po[static_cast<std::size_t>(i)] = fn(pa[static_cast<std::size_t>(i)]);
  } else {
    for (std::int64_t i = 0; i < n; ++i) out.set(i, fn(static_cast<float>(a.at(i))));
  }
  return out;
}

// F16 storage computes through F32 and rounds back at the op boundary.
inline Tensor f16_compute_in(const Tensor& t) { return t.to(DType::F32); }
inline Tensor f16_compute_out(const Tensor& t) { return t.to(DType::F16); }

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::zip(a, b, [](auto x, auto y) { return x + y; }, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::zip(a, b, [](auto x, auto y) { return x - y; }, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::zip(a, b, [](auto x, auto y) { return x * y; }, "mul");
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::zip(a, b, [](auto x, auto y) { return x / y; }, "div");
}
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return detail::zip(a, b, [](auto x, auto y) { return x > y ? x : y; }, "maximum");
}
inline Tensor exp(const Tensor& a) {
  return detail::map(a, [](auto x) { return std::exp(x); });
}
inline Tensor log(const Tensor& a) {
  return detail::map(a, [](auto x) { return std::log(x); });
}
inline Tensor scale(const Tensor& a, double c) {
  return detail::map(a, [c](auto x) { return x * c; });
}
inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::map(a, [c](auto x) { return x + c; });
}

inline double sum_all(const Tensor& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) s += a.at(i);
  return s;
}

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i)));
  return m;
}

inline void require_volume(const Tensor& t, const char* opname) {
  check_shape(t.ndim() == 5, std::string(opname) + ": expected a 5-d N,C,D,H,W tensor, got " + shape_str(t.shape()));
}

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased (divide by m), m = N*D*H*W
};

/// Per-channel mean and population variance over the N,D,H,W axes.
/// Accumulation runs in F64 in a fixed index order.
inline ChannelStats channel_mean_var(const Tensor& x) {
  require_volume(x, "channel_mean_var");
  const std::int64_t n = x.dim(0), c = x.dim(1);
  const std::int64_t s = x.dim(2) * x.dim(3) * x.dim(4);
  const std::int64_t m = n * s;
  check_shape(m >= 1, "channel_mean_var: empty channel");
  ChannelStats st;
  st.mean.assign(static_cast<std::size_t>(c), 0.0);
  st.var.assign(static_cast<std::size_t>(c), 0.0);
  auto run = [&](auto load) {
    for (std::int64_t ci = 0; ci < c; ++ci) {
      double acc = 0.0;
      for (std::int64_t ni = 0; ni < n; ++ni) {
        const std::int64_t base = (ni * c + ci) * s;
        for (std::int64_t i = 0; i < s; ++i) acc += load(base + i);
      }
      const double mean = acc / static_cast<double>(m);
      double vacc = 0.0;
      for (std::int64_t ni = 0; ni < n; ++ni) {
        const std::int64_t base = (ni * c + ci) * s;
        for (std::int64_t i = 0; i < s; ++i) {
          const double d = load(base + i) - mean;
          vacc += d * d;
        }
      }
      st.mean[static_cast<std::size_t>(ci)] = mean;
      st.var[static_cast<std::size_t>(ci)] = vacc / static_cast<double>(m);
    }
  };
  if (x.dtype() == DType::F32) {
    auto p = x.f32();
    run([p](std::int64_t i) { return static_cast<double>(p[static_cast<std::size_t>(i)]); });
  } else if (x.dtype() == DType::F64) {
    auto p = x.f64();
    run([p](std::int64_t i) { return p[static_cast<std::size_t>(i)]; });
  } else {
    auto p = x.f16();
    run([p](std::int64_t i) { return static_cast<double>(f16_to_f32(p[static_cast<std::size_t>(i)])); });
  }
  return st;
}

/// Softmax over the channel axis of an N,C,D,H,W tensor, computed in F64
/// with the usual max-shift, stored back in the input dtype.
inline Tensor softmax_channels(const Tensor& x) {
  require_volume(x, "softmax_channels");
  const std::int64_t n = x.dim(0), c = x.dim(1);
  const std::int64_t s = x.dim(2) * x.dim(3) * x.dim(4);
  Tensor out(x.shape(), x.dtype());
  std::vector<double> vals(static_cast<std::size_t>(c));
  for (std::int64_t ni = 0; ni < n; ++ni) {
    for (std::int64_t i = 0; i < s; ++i) {
      double mx = -1e300;
      for (std::int64_t ci = 0; ci < c; ++ci) {
        vals[static_cast<std::size_t>(ci)] = x.at((ni * c + ci) * s + i);
        mx = std::max(mx, vals[static_cast<std::size_t>(ci)]);
      }
      double denom = 0.0;
      for (std::int64_t ci = 0; ci < c; ++ci) {
        vals[static_cast<std::size_t>(ci)] = std::exp(vals[static_cast<std::size_t>(ci)] - mx);
        denom += vals[static_cast<std::size_t>(ci)];
      }
      for (std::int64_t ci = 0; ci < c; ++ci)
        out.set((ni * c + ci) * s + i, vals[static_cast<std::size_t>(ci)] / denom);
    }
  }
  return out;
}

/// Concatenates along the channel axis; a fills channels [0, Ca).
inline Tensor channel_concat(const Tensor& a, const Tensor& b) {
  require_volume(a, "channel_concat");
  require_volume(b, "channel_concat");
  check_shape(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3) && a.dim(4) == b.dim(4),
              "channel_concat: non-channel extents differ");
  if (a.dtype() != b.dtype()) throw DTypeError("channel_concat: dtype mismatch");
  const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::int64_t s = a.dim(2) * a.dim(3) * a.dim(4);
  Tensor out({n, ca + cb, a.dim(2), a.dim(3), a.dim(4)}, a.dtype());
  // Pure data movement; copy the contiguous per-sample channel runs.
  auto copy_runs = [&](auto pa, auto pb, auto po) {
    for (std::int64_t ni = 0; ni < n; ++ni) {
      std::copy(pa.begin() + ni * ca * s, pa.begin() + (ni + 1) * ca * s,
                po.begin() + ni * (ca + cb) * s);
      std::copy(pb.begin() + ni * cb * s, pb.begin() + (ni + 1) * cb * s,
                po.begin() + (ni * (ca + cb) + ca) * s);
    }
  };
  switch (a.dtype()) {
    case DType::F32: copy_runs(a.f32(), b.f32(), out.f32()); break;
    case DType::F64: copy_runs(a.f64(), b.f64(), out.f64()); break;
    case DType::F16: copy_runs(a.f16(), b.f16(), out.f16()); break;
  }
  return out;
}

/// Channels [c0, c1) of a volume.
inline Tensor channel_slice(const Tensor& x, std::int64_t c0, std::int64_t c1) {
  require_volume(x, "channel_slice");
  check_shape(0 <= c0 && c0 <= c1 && c1 <= x.dim(1), "channel_slice: bad channel range");
  const std::int64_t n = x.dim(0), c = x.dim(1);
  const std::int64_t s = x.dim(2) * x.dim(3) * x.dim(4);
  Tensor out({n, c1 - c0, x.dim(2), x.dim(3), x.dim(4)}, x.dtype());
  auto copy_runs = [&](auto px, auto po) {
    for (std::int64_t ni = 0; ni < n; ++ni)
      std::copy(px.begin() + (ni * c + c0) * s, px.begin() + (ni * c + c1) * s,
                po.begin() + ni * (c1 - c0) * s);
  };
  switch (x.dtype()) {
    case DType::F32: copy_runs(x.f32(), out.f32()); break;
    case DType::F64: copy_runs(x.f64(), out.f64()); break;
    case DType::F16: copy_runs(x.f16(), out.f16()); break;
  }
  return out;
}

/// Per-voxel argmax over channels of a 1,C,D,H,W or N,C,D,H,W tensor;
/// returns an N,D,H,W tensor of class indices. Ties take the lowest class.
inline Tensor argmax_channels(const Tensor& x) {
  require_volume(x, "argmax_channels");
  const std::int64_t n = x.dim(0), c = x.dim(1);
  const std::int64_t s = x.dim(2) * x.dim(3) * x.dim(4);
  Tensor out({n, x.dim(2), x.dim(3), x.dim(4)}, DType::F32);
  for (std::int64_t ni = 0; ni < n; ++ni)
    for (std::int64_t i = 0; i < s; ++i) {
      double best = x.at((ni * c) * s + i);
      std::int64_t arg = 0;
      for (std::int64_t ci = 1; ci < c; ++ci) {
        double v = x.at((ni * c + ci) * s + i);
        if (v > best) { best = v; arg = ci; }
      }
      out.set(ni * s + i, static_cast<double>(arg));
    }
  return out;
}

}  // namespace memfcn

#endif  // MEMFCN_TENSOR_HPP
