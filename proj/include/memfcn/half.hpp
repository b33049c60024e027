#ifndef MEMFCN_HALF_HPP
#define MEMFCN_HALF_HPP

#include <bit>
#include <cstdint>

namespace memfcn {

/* Software IEEE 754 binary16 (1 sign, 5 exponent, 10 mantissa).

   f32_to_f16 implements round-to-nearest-even over the full range:
   subnormal results, overflow to infinity (values >= 65520 round up past
   the max normal 65504), and NaN payload truncation. f16_to_f32 is exact.
   Rounding works on the packed (exponent<<10 | mantissa) integer so a
   mantissa carry rolls into the exponent, which is precisely the IEEE
   behavior at binade boundaries and at the infinity threshold. */

struct Half {
  std::uint16_t bits = 0;
};

inline constexpr std::uint16_t kHalfPosInf = 0x7C00;
inline constexpr std::uint16_t kHalfMaxNormal = 0x7BFF;  // 65504.0

inline std::uint16_t f32_to_f16_bits(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
  const std::uint32_t exp = (x >> 23) & 0xFFu;
  const std::uint32_t man = x & 0x7FFFFFu;

  if (exp == 0xFFu) {  // inf / NaN
    if (man == 0) return sign | kHalfPosInf;
    std::uint16_t payload = static_cast<std::uint16_t>(man >> 13);
    if (payload == 0) payload = 1;  // NaN must stay a NaN
    return static_cast<std::uint16_t>(sign | kHalfPosInf | payload);
  }
  if (exp == 0) return sign;  // f32 subnormals are far below half range

  const std::int32_t he = static_cast<std::int32_t>(exp) - 112;  // f16 biased exp
  if (he >= 31) return sign | kHalfPosInf;

  if (he >= 1) {
    // Normal target: drop 13 mantissa bits with RNE; carry may bump the
    // exponent (including 30 -> 31 == infinity).
    std::uint32_t base = (static_cast<std::uint32_t>(he) << 10) | (man >> 13);
    std::uint32_t rem = man & 0x1FFFu;
    std::uint32_t round = (rem > 0x1000u || (rem == 0x1000u && (base & 1u))) ? 1u : 0u;
    return static_cast<std::uint16_t>(sign | (base + round));
  }

  // Subnormal target: express the value in units of 2^-24 (the f16
  // subnormal ulp) and round. M is the 24-bit significand with the
  // implicit bit; shift = 126 - exp.
  const std::int32_t shift = 126 - static_cast<std::int32_t>(exp);
  if (shift > 25) return sign;  // below half of the minimum subnormal
  const std::uint64_t m24 = static_cast<std::uint64_t>(man | 0x800000u);
  const std::uint64_t half_bit = 1ull << (shift - 1);
  const std::uint64_t q = m24 >> shift;
  const std::uint64_t rem = m24 & ((1ull << shift) - 1);
  const std::uint64_t round = (rem > half_bit || (rem == half_bit && (q & 1ull))) ? 1u : 0u;
  // q + round can reach 0x400 == the minimum normal; the packed encoding
  // already represents that correctly.
  return static_cast<std::uint16_t>(sign | static_cast<std::uint16_t>(q + round));
}

inline float f16_to_f32(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1Fu;
  const std::uint32_t man = h & 0x3FFu;
  if (exp == 0) {
    if (man == 0) return std::bit_cast<float>(sign);
    float v = static_cast<float>(man) * 0x1p-24f;  // exact
    return (sign ? -v : v);
  }
  if (exp == 31) {
    std::uint32_t bits = sign | 0x7F800000u | (man << 13);
    return std::bit_cast<float>(bits);
  }
  const std::uint32_t bits = sign | ((exp + 112u) << 23) | (man << 13);
  return std::bit_cast<float>(bits);
}

inline Half f32_to_f16(float f) { return Half{f32_to_f16_bits(f)}; }

inline float half_to_float(Half h) { return f16_to_f32(h.bits); }

/// Round a float through binary16 and back (the storage behavior of every
/// F16 tensor element).
inline float round_to_f16(float f) { return f16_to_f32(f32_to_f16_bits(f)); }

inline bool f16_is_nan(std::uint16_t h) {
  return ((h >> 10) & 0x1Fu) == 0x1Fu && (h & 0x3FFu) != 0;
}

inline bool f16_is_inf(std::uint16_t h) {
  return ((h >> 10) & 0x1Fu) == 0x1Fu && (h & 0x3FFu) == 0;
}

}  // namespace memfcn

#endif  // MEMFCN_HALF_HPP
