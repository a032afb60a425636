#pragma once

// Euler integration of dx/dt = v from noise (t = 1) to data (t = 0), with
// velocity-space classifier-free guidance.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "omnidit/model.hpp"
#include "omnidit/tensor.hpp"

namespace omnidit::sampler {

/// Velocity for a batch at a common time t.
template <typename T>
using Field = std::function<Tensor<T>(const Tensor<T>& x, double t)>;

struct SampleConfig {
  std::size_t steps = 30;
  double guidance = 4.0;
  std::uint64_t seed = 0;
  bool record_trajectory = false;
  bool clamp = true;  // clamp the final image to [-1, 1]

  void validate() const;
};

template <typename T>
struct Trajectory {
  std::vector<double> t;        // steps + 1 entries, 1 down to 0
  std::vector<Tensor<T>> x;     // state at each t
  std::vector<Tensor<T>> v;     // velocity used at each step (steps entries)
};

/// t_k = 1 - k / steps, computed per k rather than by repeated subtraction.
std::vector<double> time_grid(std::size_t steps);

/// Throws NumericError naming the step if a state goes non-finite.
template <typename T>
Tensor<T> integrate(const Field<T>& v, Tensor<T> x1, std::size_t steps, Trajectory<T>* trajectory = nullptr);

/// v_u + g (v_c - v_u); g == 1 returns v_c and g == 0 returns v_u exactly.
template <typename T>
Field<T> guided(Field<T> cond, Field<T> uncond, double g);

/// Conditional model field (no guidance) for fixed conditions and text.
template <typename T>
Field<T> model_field(const model::ToyDiTParams<T>& params, std::vector<Tensor<T>> conditions,
                     std::vector<std::vector<std::uint32_t>> text_ids);

/// Null-condition field: zeroed condition images and all-null text.
template <typename T>
Field<T> null_field(const model::ToyDiTParams<T>& params, const std::vector<Tensor<T>>& conditions,
                    const std::vector<std::vector<std::uint32_t>>& text_ids);

/// Standard normal noise [shape] from (seed, stream).
template <typename T>
Tensor<T> noise(const Shape& shape, std::uint64_t seed, std::uint64_t stream = 0);

template <typename T>
struct SampleResult {
  Tensor<T> image;
  std::optional<Trajectory<T>> trajectory;
};

/// Batch of images for the given conditions ([B, C, S, S] each) and text.
template <typename T>
SampleResult<T> sample(const model::ToyDiTParams<T>& params, const std::vector<Tensor<T>>& conditions,
                       const std::vector<std::vector<std::uint32_t>>& text_ids, const SampleConfig& cfg);

/// Integrates the same x1 once per dt; every dt must be 1/N for integer N.
template <typename T>
std::map<double, Tensor<T>> integrate_with_dt(const Field<T>& v, const Tensor<T>& x1, std::span<const double> dts);

/// N with dt == 1/N, or std::invalid_argument.
std::size_t steps_for_dt(double dt);

}  // namespace omnidit::sampler
