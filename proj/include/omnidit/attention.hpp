#pragma once

// Masked multi-head attention over a TokenSequence.
//
// Rules, for query q and key k:
//   (a) text and noisy queries attend every token;
//   (b) a reference query attends only keys in its own window of its own
//       reference image;
//   (c) reference queries never attend text or noisy keys;
//   (d) every token attends itself.
// Windows tile each reference grid with M x M squares; shifted layers move
// the tiling origin by floor(M/2) on both axes and keep the clipped partial
// windows at the borders. An axis with extent <= M is a single band.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "omnidit/autodiff.hpp"
#include "omnidit/kernels.hpp"
#include "omnidit/layout.hpp"

namespace omnidit::attention {

enum class Parity { regular, shifted };

struct Window {
  std::size_t reference = 0;  // 1-based ordinal
  std::size_t w0 = 0, h0 = 0;  // top-left in local grid coordinates
  std::size_t w = 0, h = 0;    // extent
  std::vector<std::size_t> tokens;  // sequence indices, ascending

  std::size_t size() const noexcept { return tokens.size(); }
};

struct WindowPlan {
  std::size_t window_size = 1;
  Parity parity = Parity::regular;
  std::size_t total_len = 0;
  std::vector<layout::Grid> reference_grids;
  std::vector<std::vector<Window>> per_reference;
  /// Per token: flat window id for reference tokens, -1 for text/noisy.
  std::vector<std::int64_t> window_of;

  std::size_t window_count() const;
  /// Both tokens are reference tokens in the same window.
  bool same_window(std::size_t q, std::size_t k) const {
    return window_of[q] >= 0 && window_of[q] == window_of[k];
  }
};

WindowPlan plan_windows(const layout::TokenSequence& seq, std::size_t window_size, Parity parity);

/// One window per reference image: the unwindowed baseline.
WindowPlan full_plan(const layout::TokenSequence& seq);

/// Row-sparse boolean mask. Row q lists allowed keys in ascending order.
struct AttnMask {
  kernels::RowSparsity rows;

  std::size_t size() const noexcept { return rows.rows; }
  bool allowed(std::size_t q, std::size_t k) const;
  /// Dense row-major [len, len] 0/1 matrix.
  std::vector<std::uint8_t> dense() const;
};

AttnMask build_mask(const layout::TokenSequence& seq, const WindowPlan& plan);

/// Rotates channel pairs of x[..., len, head_dim] by the table's angles.
template <typename T>
ad::Var<T> apply_rope(const ad::Var<T>& x, const layout::RopeTable& rope);

/// Scaled dot-product attention without position encoding; q, k, v are
/// [..., len, head_dim] with identical shapes. Scale is 1/sqrt(head_dim).
template <typename T>
ad::Var<T> attend_core(const ad::Var<T>& q, const ad::Var<T>& k, const ad::Var<T>& v, const AttnMask& mask);

/// attend_core(rope(q), rope(k), v).
template <typename T>
ad::Var<T> attend(const ad::Var<T>& q, const ad::Var<T>& k, const ad::Var<T>& v, const AttnMask& mask,
                  const layout::RopeTable& rope);

/// Multiply-add counts. Each attended (query, key) pair costs head_dim for
/// the score and head_dim for the value aggregation, per head.
struct FlopReport {
  std::uint64_t denoise_global = 0;
  std::uint64_t condition_windowed = 0;
  std::uint64_t total() const noexcept { return denoise_global + condition_windowed; }
};

FlopReport flops(const layout::TokenSequence& seq, const WindowPlan& plan, std::size_t heads, std::size_t head_dim);

}  // namespace omnidit::attention
