#pragma once

// Branch-free exp and tanh that the compiler can vectorize. Results depend
// only on the input value, never on the surrounding loop, so serial and
// parallel kernels that call them stay bitwise identical.

#include <bit>
#include <cmath>
#include <cstdint>
#include <type_traits>

namespace omnidit::fastmath {

namespace detail {

template <typename T>
struct ExpTraits;

template <>
struct ExpTraits<float> {
  using Bits = std::int32_t;
  static constexpr float lo = -87.0f, hi = 88.3f;
  static constexpr float log2e = 1.44269504088896341f;
  static constexpr float ln2_hi = 0.693359375f, ln2_lo = -2.12194440e-4f;
  static constexpr int bias = 127, mant = 23;
  static constexpr int degree = 7;
};

template <>
struct ExpTraits<double> {
  using Bits = std::int64_t;
  static constexpr double lo = -708.0, hi = 709.0;
  static constexpr double log2e = 1.4426950408889634074;
  static constexpr double ln2_hi = 6.93147180369123816490e-01, ln2_lo = 1.90821492927058770002e-10;
  static constexpr int bias = 1023, mant = 52;
  static constexpr int degree = 13;
};

// 1/k! for the Taylor polynomial.
inline constexpr double kInvFact[14] = {1.0,
                                        1.0,
                                        0.5,
                                        1.0 / 6,
                                        1.0 / 24,
                                        1.0 / 120,
                                        1.0 / 720,
                                        1.0 / 5040,
                                        1.0 / 40320,
                                        1.0 / 362880,
                                        1.0 / 3628800,
                                        1.0 / 39916800,
                                        1.0 / 479001600,
                                        1.0 / 6227020800.0};

}  // namespace detail

/// exp(x) within a couple of ulp. The argument saturates at [lo, hi], so
/// the result never underflows to 0 or overflows to inf.
template <typename T>
inline T exp(T x) noexcept {
  static_assert(std::is_floating_point_v<T>);
  using Tr = detail::ExpTraits<T>;
  using Bits = typename Tr::Bits;
  x = x < Tr::lo ? Tr::lo : (x > Tr::hi ? Tr::hi : x);
  // Round to nearest by adding and removing 1.5 * 2^mant.
  const T shifter = static_cast<T>(1.5) * static_cast<T>(Bits{1} << Tr::mant);
  const T n = (x * Tr::log2e + shifter) - shifter;
  const T r = (x - n * Tr::ln2_hi) - n * static_cast<T>(Tr::ln2_lo);
  T p = static_cast<T>(detail::kInvFact[Tr::degree]);
#pragma GCC unroll 16
  for (int k = Tr::degree - 1; k >= 0; --k) p = std::fma(p, r, static_cast<T>(detail::kInvFact[k]));
  const Bits e = (static_cast<Bits>(n) + Tr::bias) << Tr::mant;
  const T scale = std::bit_cast<T>(e);
  return p * scale;
}

/// tanh via exp(-2|x|); absolute error a few ulp of 1.
template <typename T>
inline T tanh(T x) noexcept {
  const T ax = x < T(0) ? -x : x;
  const T e = fastmath::exp(T(-2) * ax);
  const T t = (T(1) - e) / (T(1) + e);
  return x < T(0) ? -t : t;
}

}  // namespace omnidit::fastmath
