#pragma once

// Shared oracles for the test binaries: random tensors and a central
// finite-difference gradient check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "omnidit/autodiff.hpp"
#include "omnidit/rng.hpp"
#include "omnidit/tensor.hpp"

namespace omnidit::testing {

inline Tensor<double> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(shape);
  for (auto& x : t.vec()) x = rng.uniform(lo, hi);
  return t;
}

inline Tensor<double> normal_tensor(const Shape& shape, Rng& rng) {
  Tensor<double> t(shape);
  for (auto& x : t.vec()) x = rng.normal();
  return t;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct GradCheck {
  double max_rel = 0;
  std::size_t checked = 0;
  std::string worst;  // leaf index and element of the worst entry
};

/// Compares backprop gradients of `loss` w.r.t. `leaves` against central
/// differences with step h. Relative error is |a - n| / max(|a|, |n|, floor).
/// `per_leaf` > 0 checks that many random entries per leaf instead of all.
inline GradCheck gradcheck(const std::vector<ad::Var<double>>& leaves,
                           const std::function<ad::Var<double>()>& loss, double h = 1e-5,
                           std::size_t per_leaf = 0, std::uint64_t seed = 0, double floor = 1e-3) {
  for (auto& l : leaves) l.node()->grad.clear();
  ad::backward(loss());
  std::vector<Tensor<double>> analytic;
  for (auto& l : leaves) analytic.push_back(l.grad());

  GradCheck out;
  Rng pick(seed, 0x6663);
  ad::NoGradGuard guard;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto leaf = leaves[li];
    auto& val = leaf.mutable_value();
    std::vector<std::size_t> idx;
    if (per_leaf == 0 || per_leaf >= val.numel()) {
      for (std::size_t i = 0; i < val.numel(); ++i) idx.push_back(i);
    } else {
      for (std::size_t j = 0; j < per_leaf; ++j) idx.push_back(pick.below(val.numel()));
    }
    for (std::size_t i : idx) {
      const double x = val[i];
      val[i] = x + h;
      const double fp = loss().value().item();
      val[i] = x - h;
      const double fm = loss().value().item();
      val[i] = x;
      const double num = (fp - fm) / (2 * h);
      const double a = analytic[li][i];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      ++out.checked;
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = "leaf " + std::to_string(li) + " elem " + std::to_string(i) + ": analytic " +
                    std::to_string(a) + " numeric " + std::to_string(num);
      }
    }
  }
  return out;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("omnidit_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace omnidit::testing
