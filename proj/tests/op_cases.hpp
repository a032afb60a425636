#pragma once

// One gradient-check case per differentiable op. Non-scalar outputs are
// reduced with a fixed random weighting so every output element matters.

#include <memory>
#include <string>
#include <vector>

#include "omnidit/attention.hpp"
#include "omnidit/layout.hpp"
#include "support.hpp"

namespace omnidit::testing {

struct OpCase {
  std::string name;
  std::vector<ad::Var<double>> leaves;
  std::function<ad::Var<double>()> loss;
};

inline ad::Var<double> weighted_sum(const ad::Var<double>& y, const Tensor<double>& w) {
  return ad::sum(ad::mul(y, ad::Var<double>::constant(w)));
}

inline std::vector<OpCase> op_cases(std::uint64_t seed) {
  using V = ad::Var<double>;
  Rng rng(seed, 0x6f70);
  auto leaf = [&](const Shape& s, double lo = -1, double hi = 1) { return V::leaf(random_tensor(s, rng, lo, hi)); };
  auto weights = [&](const Shape& s) { return random_tensor(s, rng); };
  std::vector<OpCase> cases;

  {
    auto a = leaf({3, 4}), b = leaf({4, 5});
    auto w = weights({3, 5});
    cases.push_back({"matmul", {a, b}, [=] { return weighted_sum(ad::matmul(a, b), w); }});
  }
  {
    auto x = leaf({2, 3, 4}), wt = leaf({4, 5}), bias = leaf({5});
    auto w = weights({2, 3, 5});
    cases.push_back({"linear", {x, wt, bias}, [=] { return weighted_sum(ad::linear(x, wt, &bias), w); }});
  }
  {
    auto a = leaf({2, 3, 4}), b = leaf({3, 4});
    auto w = weights({2, 3, 4});
    cases.push_back({"add", {a, b}, [=] { return weighted_sum(ad::add(a, b), w); }});
  }
  {
    auto a = leaf({2, 3}), b = leaf({3});
    auto w = weights({2, 3});
    cases.push_back({"sub", {a, b}, [=] { return weighted_sum(ad::sub(a, b), w); }});
  }
  {
    auto a = leaf({2, 3}), b = leaf({1, 3});
    auto w = weights({2, 3});
    cases.push_back({"mul", {a, b}, [=] { return weighted_sum(ad::mul(a, b), w); }});
  }
  {
    auto a = leaf({5});
    auto w = weights({5});
    const double f = rng.uniform(-2, 2);
    cases.push_back({"scale", {a}, [=] { return weighted_sum(ad::scale(a, f), w); }});
  }
  {
    auto a = leaf({5});
    auto w = weights({5});
    cases.push_back({"add_scalar", {a}, [=] { return weighted_sum(ad::add_scalar(a, 0.7), w); }});
  }
  {
    auto a = leaf({6});
    auto w = weights({6});
    cases.push_back({"square", {a}, [=] { return weighted_sum(ad::square(a), w); }});
  }
  {
    auto a = leaf({2, 3});
    cases.push_back({"sum", {a}, [=] { return ad::sum(ad::square(a)); }});
  }
  {
    auto a = leaf({2, 3});
    cases.push_back({"mean", {a}, [=] { return ad::mean(ad::square(a)); }});
  }
  {
    auto a = leaf({8}, -3, 3);
    auto w = weights({8});
    cases.push_back({"gelu", {a}, [=] { return weighted_sum(ad::gelu(a), w); }});
  }
  {
    auto a = leaf({8}, -3, 3);
    auto w = weights({8});
    cases.push_back({"silu", {a}, [=] { return weighted_sum(ad::silu(a), w); }});
  }
  {
    auto x = leaf({3, 5}), g = leaf({5}), b = leaf({5});
    auto w = weights({3, 5});
    cases.push_back(
        {"layernorm_affine", {x, g, b}, [=] { return weighted_sum(ad::layernorm_affine(x, &g, &b), w); }});
  }
  {
    auto a = leaf({2, 3}), b = leaf({6});
    cases.push_back({"cosine_similarity", {a, b}, [=] { return ad::cosine_similarity(a, b); }});
  }
  {
    auto x = leaf({3, 4}, -2, 2);
    auto w = weights({3, 4});
    cases.push_back({"softmax", {x}, [=] { return weighted_sum(ad::softmax(x), w); }});
  }
  {
    auto x = leaf({3, 4}, -2, 2);
    auto w = weights({3, 4});
    auto mask = std::make_shared<std::vector<std::uint8_t>>(12);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 4; ++c) (*mask)[r * 4 + c] = (c == r) || rng.uniform() < 0.5;
    cases.push_back({"softmax_masked", {x}, [=] { return weighted_sum(ad::softmax(x, mask.get()), w); }});
  }
  {
    auto a = leaf({2, 6});
    auto w = weights({3, 4});
    cases.push_back({"reshape", {a}, [=] { return weighted_sum(ad::reshape(a, {3, 4}), w); }});
  }
  {
    auto a = leaf({2, 3});
    auto idx = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{5, 0, 0, 3, 2});
    auto w = weights({5});
    cases.push_back({"gather", {a}, [=] { return weighted_sum(ad::gather(a, idx, {5}), w); }});
  }
  {
    auto a = leaf({2, 2, 3}), b = leaf({2, 1, 3});
    auto w = weights({2, 3, 3});
    cases.push_back({"concat", {a, b}, [=] { return weighted_sum(ad::concat<double>({a, b}, 1), w); }});
  }
  {
    auto a = leaf({2, 3});
    auto w = weights({2, 4, 3});
    cases.push_back({"repeat_rows", {a}, [=] { return weighted_sum(ad::repeat_rows(a, 4), w); }});
  }
  {
    auto a = leaf({2, 6});
    auto w = weights({2, 3});
    cases.push_back({"slice_last", {a}, [=] { return weighted_sum(ad::slice_last(a, 2, 3), w); }});
  }

  // Attention pieces on a small text + noisy + one reference layout.
  const std::vector<layout::Grid> refs = {{3, 2}};
  auto seq = std::make_shared<layout::TokenSequence>(layout::assign_positions({3, 2}, refs, 1));
  const std::size_t len = seq->total_len(), hd = 8;
  auto rope = std::make_shared<layout::RopeTable>(layout::rope_tables(*seq, hd, layout::default_axis_split(hd)));
  auto plan = attention::plan_windows(*seq, 2, attention::Parity::shifted);
  auto mask = std::make_shared<attention::AttnMask>(attention::build_mask(*seq, plan));
  {
    auto x = leaf({2, len, hd});
    auto w = weights({2, len, hd});
    cases.push_back({"apply_rope", {x}, [=] { return weighted_sum(attention::apply_rope(x, *rope), w); }});
  }
  {
    auto q = leaf({2, len, hd}), k = leaf({2, len, hd}), v = leaf({2, len, hd});
    auto w = weights({2, len, hd});
    cases.push_back(
        {"attend_core", {q, k, v}, [=] { return weighted_sum(attention::attend_core(q, k, v, *mask), w); }});
    cases.push_back(
        {"attend", {q, k, v}, [=] { return weighted_sum(attention::attend(q, k, v, *mask, *rope), w); }});
  }
  return cases;
}

}  // namespace omnidit::testing
