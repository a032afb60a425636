#pragma once

// Flow-matching losses.
//
// Data sits at t = 0 and noise at t = 1 on the straight path
// x_t = (1 - t) x0 + t x1, whose velocity u = x1 - x0 is constant in t.
// The multi-step loss starts at x_t, walks K - 1 Euler steps of size dt
// toward the data using the model's own predictions, and supervises every
// visited state against the same u.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "omnidit/autodiff.hpp"
#include "omnidit/model.hpp"
#include "omnidit/rng.hpp"

namespace omnidit::objective {

/// Batched velocity field: x is [B, ...], t holds one time per batch row.
template <typename T>
using VelocityFn = std::function<ad::Var<T>(const ad::Var<T>& x, std::span<const double> t)>;

/// Binds conditions and text to a model so it can be used as a VelocityFn.
template <typename T>
VelocityFn<T> model_velocity(const model::ToyDiTParams<T>& params, std::vector<ad::Var<T>> conditions,
                             std::vector<std::vector<std::uint32_t>> text_ids);

template <typename T>
struct FlowSample {
  Tensor<T> x0;               // data, [B, C, S, S]
  Tensor<T> x1;               // unit Gaussian noise, same shape
  std::vector<double> t;      // one per batch row
  std::optional<Tensor<T>> mask;  // 0/1 garment mask, same shape as x0

  std::size_t batch() const { return x0.dim(0); }
  Tensor<T> target() const;  // u = x1 - x0
  Tensor<T> xt() const;
};

/// (1 - t) x0 + t x1 elementwise. Throws std::domain_error for t outside [0, 1].
template <typename T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& x1, double t);

/// Per-row times for a batch [B, ...].
template <typename T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& x1, std::span<const double> t);

/// t ~ U[0, 1]; if t - (K - 1) dt < 0 it is redrawn from U[(K - 1) dt, 1].
std::vector<double> sample_times(Rng& rng, std::size_t batch, std::size_t k, double dt);

/// Mean squared error between v(x_t, t) and u.
template <typename T>
ad::Var<T> ssp_loss(const VelocityFn<T>& v, const FlowSample<T>& s);

template <typename T>
struct MtpResult {
  ad::Var<T> loss;                  // mean of the K terms
  std::vector<ad::Var<T>> terms;    // per step
  std::vector<ad::Var<T>> velocities;
  std::vector<Tensor<T>> states;    // x_{t_k}
  std::vector<std::vector<double>> times;
};

/// Throws std::domain_error when t - (K - 1) dt < 0 for some row; callers
/// draw t with sample_times. `detach` stops gradients between Euler states.
template <typename T>
MtpResult<T> mtp_loss(const VelocityFn<T>& v, const FlowSample<T>& s, std::size_t k, double dt,
                      bool detach = false);

/// Frozen feature map applied to flattened masked images [B, n] -> [B, m].
template <typename T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual ad::Var<T> apply(const ad::Var<T>& flat) const = 0;
  virtual bool is_linear() const { return true; }
};

template <typename T>
class IdentityExtractor final : public FeatureExtractor<T> {
 public:
  ad::Var<T> apply(const ad::Var<T>& flat) const override { return flat; }
};

/// Random orthogonal n x n map from modified Gram-Schmidt on a seeded
/// Gaussian matrix.
template <typename T>
class OrthogonalExtractor final : public FeatureExtractor<T> {
 public:
  OrthogonalExtractor(std::size_t dim, std::uint64_t seed);
  ad::Var<T> apply(const ad::Var<T>& flat) const override;
  const Tensor<T>& matrix() const { return q_.value(); }

 private:
  ad::Var<T> q_;
};

template <typename T>
struct AlignResult {
  ad::Var<T> loss;              // mean over rows with a non-empty mask
  std::size_t empty_masks = 0;  // rows skipped
};

/// 1 - cos(E(M * gt), E(M * gen)) averaged over the batch. Rows whose mask
/// selects nothing are skipped with a warning; if all are, the loss is 0.
template <typename T>
AlignResult<T> align_loss(const ad::Var<T>& generated, const Tensor<T>& ground_truth, const Tensor<T>& mask,
                          const FeatureExtractor<T>& extractor);

struct LossOptions {
  std::size_t k = 2;
  double dt = 0.03;
  double lambda = 0.10;
  bool detach = false;
};

template <typename T>
struct LossBreakdown {
  ad::Var<T> total;
  double l_ssp = 0;   // first MTP term, i.e. the single-step loss at the same point
  double l_mtp = 0;
  double l_align = 0;
  double lambda = 0;
  double total_value = 0;
  std::vector<double> terms;
  std::size_t empty_masks = 0;
  MtpResult<T> mtp;
};

/// l_mtp + lambda * l_align, the alignment term on x_hat0 = x_t - t * v(x_t, t).
template <typename T>
LossBreakdown<T> total_loss(const VelocityFn<T>& v, const FlowSample<T>& s, const LossOptions& opt,
                            const FeatureExtractor<T>* extractor);

/// Per adjacent step pair and batch row: |v_{k+1} - v_k|^2 and
/// 2 |v_{k+1} - u|^2 + 2 |v_k - u|^2, in double.
struct SmoothnessPair {
  std::size_t row = 0, step = 0;
  double lhs = 0, rhs = 0;
  /// lhs <= rhs up to rounding of the double sums.
  bool holds() const;
};

template <typename T>
std::vector<SmoothnessPair> smoothness_pairs(const std::vector<Tensor<T>>& velocities, const Tensor<T>& target);

}  // namespace omnidit::objective
