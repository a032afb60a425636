#include <doctest.h>

#include "model_cases.hpp"
#include "omnidit/objective.hpp"

using namespace omnidit;
using namespace omnidit::objective;
using omnidit::testing::normal_tensor;
using omnidit::testing::random_tensor;
using V = ad::Var<double>;

namespace {

FlowSample<double> random_sample(Rng& rng, std::size_t b = 3, std::size_t n = 5, double tmin = 0.2) {
  FlowSample<double> s;
  s.x0 = random_tensor({b, n}, rng);
  s.x1 = normal_tensor({b, n}, rng);
  for (std::size_t i = 0; i < b; ++i) s.t.push_back(rng.uniform(tmin, 1.0));
  return s;
}

// v == u for this sample, whatever the state.
VelocityFn<double> oracle(const FlowSample<double>& s) {
  const auto u = s.target();
  return [u](const V& x, std::span<const double>) {
    (void)x;
    return V::constant(u);
  };
}

VelocityFn<double> linear_field(const V& a) {
  return [a](const V& x, std::span<const double>) { return ad::mul(x, a); };
}

}  // namespace

TEST_CASE("interpolation") {
  Rng rng(1, 1);
  auto x0 = random_tensor({2, 3}, rng), x1 = random_tensor({2, 3}, rng);
  CHECK(interpolate(x0, x1, 0.0) == x0);
  CHECK(interpolate(x0, x1, 1.0) == x1);
  CHECK(interpolate(Tensor<double>({1}, 0.0), Tensor<double>({1}, 2.0), 0.5)[0] == 1.0);
  CHECK_THROWS_AS(interpolate(x0, x1, 1.5), std::domain_error);
  CHECK_THROWS_AS(interpolate(x0, x1, -0.1), std::domain_error);
  std::vector<double> t = {0.0, 1.0};
  auto xt = interpolate(x0, x1, t);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(xt[i] == x0[i]);
    CHECK(xt[3 + i] == x1[3 + i]);
  }
  FlowSample<double> s{x0, x1, {0.25, 0.75}, {}};
  auto u = s.target();
  for (std::size_t i = 0; i < 6; ++i) CHECK(u[i] == x1[i] - x0[i]);
}

TEST_CASE("time sampling keeps the unrolled chain in range") {
  Rng rng(2, 2);
  for (std::size_t k : {1, 2, 3, 5}) {
    auto t = sample_times(rng, 5000, k, 0.1);
    for (double v : t) {
      CHECK(v >= (k - 1) * 0.1);
      CHECK(v < 1.0);
    }
  }
  Rng a(3, 3), b(3, 3);
  CHECK(sample_times(a, 10, 2, 0.03) == sample_times(b, 10, 2, 0.03));
  CHECK_THROWS_AS(sample_times(a, 1, 12, 0.1), std::domain_error);
}

TEST_CASE("single-step loss examples") {
  Rng rng(4, 4);
  auto s = random_sample(rng);
  CHECK(ssp_loss(oracle(s), s).value().item() == 0.0);
  FlowSample<double> ones{Tensor<double>({2, 4}, 0.0), Tensor<double>({2, 4}, 1.0), {0.3, 0.6}, {}};
  auto zero = [](const V& x, std::span<const double>) { return V::constant(Tensor<double>(x.shape())); };
  CHECK(ssp_loss<double>(zero, ones).value().item() == 1.0);
  for (int i = 0; i < 50; ++i) {
    auto a = V::constant(random_tensor({5}, rng, -3, 3));
    auto r = random_sample(rng);
    CHECK(ssp_loss(linear_field(a), r).value().item() >= 0.0);
  }
}

TEST_CASE("multi-step loss with K = 1 is the single-step loss bitwise") {
  Rng rng(5, 5);
  for (int i = 0; i < 20; ++i) {
    auto s = random_sample(rng);
    auto a = V::constant(random_tensor({5}, rng, -2, 2));
    CHECK(mtp_loss(linear_field(a), s, 1, 0.03).loss.value() == ssp_loss(linear_field(a), s).value());
  }
  auto c = testing::model_loss_case(1, 1);
  Rng r2(6, 6);
  FlowSample<double> s;
  s.x0 = random_tensor({2, 3, 4, 4}, r2);
  s.x1 = normal_tensor({2, 3, 4, 4}, r2);
  s.t = {0.4, 0.8};
  std::vector<V> conds = {V::constant(random_tensor({2, 3, 4, 4}, r2))};
  auto v = model_velocity(*c.params, conds, {{1, 2}, {3, 4}});
  CHECK(mtp_loss(v, s, 1, 0.03).loss.value() == ssp_loss(v, s).value());
}

TEST_CASE("oracle velocity gives zero loss and exact interpolants for every K") {
  Rng rng(7, 7);
  for (std::size_t k : {1, 2, 3}) {
    auto s = random_sample(rng, 3, 5, 0.5);
    auto r = mtp_loss(oracle(s), s, k, 0.05);
    CHECK(r.loss.value().item() == 0.0);
    REQUIRE(r.states.size() == k);
    for (std::size_t step = 0; step < k; ++step) {
      std::vector<double> tk;
      for (double t : s.t) tk.push_back(t - step * 0.05);
      CHECK(r.times[step] == tk);
      auto truth = interpolate(s.x0, s.x1, tk);
      CHECK(testing::max_abs_diff(r.states[step].span(), truth.span()) < 1e-14);
    }
    Tensor<double> mask(s.x0.shape(), 1.0);
    s.mask = mask;
    IdentityExtractor<double> id;
    LossOptions opt{k, 0.05, 0.1, false};
    auto tl = total_loss(oracle(s), s, opt, &id);
    CHECK(std::abs(tl.total_value) < 1e-14);
    CHECK(tl.l_align < 1e-14);
  }
}

TEST_CASE("two-step loss of a linear scalar field matches a hand unroll") {
  Rng rng(8, 8);
  for (int rep = 0; rep < 20; ++rep) {
    const double a = rng.uniform(-2, 2), x0 = rng.uniform(-1, 1), x1 = rng.normal(), t = rng.uniform(0.2, 1),
                 dt = 0.05;
    FlowSample<double> s{Tensor<double>({1, 1}, x0), Tensor<double>({1, 1}, x1), {t}, {}};
    auto av = V::constant(Tensor<double>({1}, a));
    const double u = x1 - x0, xt = (1 - t) * x0 + t * x1;
    const double v0 = a * xt, xs = xt - dt * v0, v1 = a * xs;
    const double expect = 0.5 * ((v0 - u) * (v0 - u) + (v1 - u) * (v1 - u));
    auto r = mtp_loss(linear_field(av), s, 2, dt);
    CHECK(r.loss.value().item() == doctest::Approx(expect).epsilon(1e-14));
    CHECK(r.states[1][0] == doctest::Approx(xs).epsilon(1e-15));
  }
  FlowSample<double> s{Tensor<double>({1, 1}, 0.0), Tensor<double>({1, 1}, 1.0), {0.05}, {}};
  CHECK_THROWS_AS(mtp_loss(linear_field(V::constant(Tensor<double>({1}, 1.0))), s, 3, 0.03), std::domain_error);
  CHECK_THROWS_AS(mtp_loss(linear_field(V::constant(Tensor<double>({1}, 1.0))), s, 0, 0.03), std::invalid_argument);
}

TEST_CASE("gradients flow through the unrolled states unless detached") {
  auto a = V::leaf(Tensor<double>({1}, 0.7));
  FlowSample<double> s{Tensor<double>({1, 1}, 0.2), Tensor<double>({1, 1}, -0.4), {0.6}, {}};
  const double dt = 0.1, u = -0.6, xt = 0.4 * 0.2 + 0.6 * -0.4;
  ad::backward(mtp_loss(linear_field(a), s, 2, dt).loss);
  const double g_full = a.grad()[0];
  a.zero_grad();
  ad::backward(mtp_loss(linear_field(a), s, 2, dt, true).loss);
  const double g_det = a.grad()[0];
  // d/da of 0.5 [(a xt - u)^2 + (a xs - u)^2] with xs = xt (1 - dt a).
  const double av = 0.7, xs = xt * (1 - dt * av);
  const double r0 = av * xt - u, r1 = av * xs - u;
  const double full = r0 * xt + r1 * (xs + av * xt * -dt);
  const double det = r0 * xt + r1 * xs;
  CHECK(g_full == doctest::Approx(full).epsilon(1e-14));
  CHECK(g_det == doctest::Approx(det).epsilon(1e-14));
}

TEST_CASE("alignment loss examples") {
  Rng rng(9, 9);
  IdentityExtractor<double> id;
  auto g = random_tensor({2, 3, 2, 2}, rng);
  Tensor<double> mask(g.shape(), 1.0);
  CHECK(std::abs(align_loss(V::constant(g), g, mask, id).loss.value().item()) < 1e-15);

  // Masked regions orthogonal as vectors.
  Tensor<double> a({1, 4}, {1, 0, 5, 0}), b({1, 4}, {0, 1, 0, 7}), m({1, 4}, {1, 1, 0, 0});
  CHECK(align_loss(V::constant(a), b, m, id).loss.value().item() == 1.0);

  Tensor<double> empty(g.shape(), 0.0);
  auto r = align_loss(V::constant(g), random_tensor(g.shape(), rng), empty, id);
  CHECK(r.loss.value().item() == 0.0);
  CHECK(r.empty_masks == 2);

  OrthogonalExtractor<double> orth(12, 3);
  for (int rep = 0; rep < 30; ++rep) {
    auto x = random_tensor({2, 3, 2, 2}, rng), y = random_tensor({2, 3, 2, 2}, rng);
    Tensor<double> mk(x.shape());
    for (auto& v : mk.vec()) v = rng.uniform() < 0.6;
    mk[0] = 1, mk[12] = 1;
    const double xy = align_loss(V::constant(x), y, mk, orth).loss.value().item();
    const double yx = align_loss(V::constant(y), x, mk, orth).loss.value().item();
    CHECK(xy == doctest::Approx(yx).epsilon(1e-12));
    CHECK(xy >= 0.0);
    CHECK(xy <= 2.0);
    // An orthogonal map preserves cosines.
    CHECK(xy == doctest::Approx(align_loss(V::constant(x), y, mk, id).loss.value().item()).epsilon(1e-10));
  }
  CHECK_THROWS_AS(align_loss(V::constant(a), g, m, id), DimensionError);
}

TEST_CASE("orthogonal extractor is orthogonal and seeded") {
  OrthogonalExtractor<double> e(20, 5), f(20, 5), h(20, 6);
  CHECK(e.matrix() == f.matrix());
  CHECK_FALSE(e.matrix() == h.matrix());
  const auto& q = e.matrix();
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = 0; j < 20; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < 20; ++k) dot += q[k * 20 + i] * q[k * 20 + j];
      CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-12);
    }
}

TEST_CASE("total loss composition") {
  auto c = testing::model_loss_case(2, 2);
  const double total = c.loss().value().item();
  CHECK(std::isfinite(total));

  Rng rng(10, 10);
  auto p = model::init<double>(testing::tiny_config(), 3, {0.3, false});
  std::vector<V> conds = {V::constant(random_tensor({2, 3, 4, 4}, rng))};
  auto v = model_velocity(p, conds, {{1, 2}, {3, 4}});
  FlowSample<double> s;
  s.x0 = random_tensor({2, 3, 4, 4}, rng);
  s.x1 = normal_tensor({2, 3, 4, 4}, rng);
  s.t = {0.5, 0.9};
  Tensor<double> mask(s.x0.shape());
  for (auto& m : mask.vec()) m = rng.uniform() < 0.5;
  s.mask = mask;
  OrthogonalExtractor<double> ex(48, 1);
  LossOptions opt;
  CHECK(opt.k == 2);
  CHECK(opt.dt == 0.03);
  CHECK(opt.lambda == 0.10);
  auto lb = total_loss(v, s, opt, &ex);
  CHECK(lb.l_align > 0);
  CHECK(std::abs(lb.total_value - (lb.l_mtp + 0.1 * lb.l_align)) <= 1e-12);
  CHECK(lb.terms.size() == 2);
  CHECK(lb.l_ssp == lb.terms[0]);
  CHECK(lb.l_ssp == ssp_loss(v, s).value().item());
  opt.lambda = 0;
  auto l0 = total_loss(v, s, opt, &ex);
  CHECK(l0.total_value == l0.l_mtp);
  opt.lambda = -1;
  CHECK_THROWS_AS(total_loss(v, s, opt, &ex), std::invalid_argument);
}

TEST_CASE("adjacent-step velocity differences obey the pointwise bound") {
  Rng rng(11, 11);
  auto p = model::init<double>(testing::tiny_config(), 4, {0.5, false});
  std::size_t pairs = 0;
  for (int rep = 0; rep < 30; ++rep) {
    std::vector<V> conds = {V::constant(random_tensor({4, 3, 4, 4}, rng))};
    auto v = model_velocity(p, conds, {{1, 2}, {3, 4}, {5, 6}, {7, 1}});
    FlowSample<double> s;
    s.x0 = random_tensor({4, 3, 4, 4}, rng);
    s.x1 = normal_tensor({4, 3, 4, 4}, rng);
    s.t = sample_times(rng, 4, 3, 0.1);
    ad::NoGradGuard ng;
    auto r = mtp_loss(v, s, 3, 0.1);
    std::vector<Tensor<double>> vs;
    for (auto& x : r.velocities) vs.push_back(x.value());
    for (const auto& pr : smoothness_pairs(vs, s.target())) {
      CHECK(pr.holds());
      CHECK(pr.lhs <= pr.rhs);
      ++pairs;
    }
  }
  CHECK(pairs == 30 * 4 * 2);
  CHECK(smoothness_pairs<double>({Tensor<double>({1, 1})}, Tensor<double>({1, 1})).empty());
}
