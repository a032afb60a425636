#include <doctest.h>

#include <cstring>
#include <limits>

#include "omnidit/fastmath.hpp"
#include "omnidit/kernels.hpp"
#include "omnidit/odt.hpp"
#include "support.hpp"

using namespace omnidit;
using namespace omnidit::testing;
using V = ad::Var<double>;

TEST_CASE("tensor shape contract") {
  Tensor<double> t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK_THROWS_AS(Tensor<double>({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>(3)), DimensionError);
  CHECK(Tensor<double>::scalar(4).item() == 4);
  CHECK_THROWS_AS(t.item(), DimensionError);
  CHECK(t.reshaped({3, 2}).vec() == t.vec());
  CHECK_THROWS_AS(t.reshaped({4}), DimensionError);
}

TEST_CASE("rng streams are reproducible and independent") {
  Rng a(7, 1), b(7, 1), c(7, 2);
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    CHECK(x != c.next_u64());
  }
  Rng p(3, 4);
  auto s1 = p.split(9), s2 = p.split(9);
  CHECK(s1.next_u64() == s2.next_u64());
  CHECK(p.counter() == 0);
  Rng q(3, 4);
  q.next_u64();
  const auto second = q.next_u64();
  Rng r(3, 4);
  r.seek(1);
  CHECK(r.next_u64() == second);

  Rng u(1, 1);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = u.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sq / n - 1) < 0.02);
  for (int i = 0; i < 1000; ++i) {
    const double z = u.truncated_normal(0.02);
    CHECK(std::abs(z) <= 0.04);
  }
}

TEST_CASE("ODT1 encoding layout and round trip") {
  Tensor<float> f({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6.5f});
  const auto bytes = odt::encode(f);
  REQUIRE(bytes.size() == 4 + 1 + 4 + 2 * 4 + 6 * 4);
  CHECK(std::memcmp(bytes.data(), "ODT1", 4) == 0);
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 2);
  CHECK(bytes[6] == 0);
  CHECK(bytes[9] == 2);
  CHECK(bytes[13] == 3);
  float last;
  std::memcpy(&last, bytes.data() + bytes.size() - 4, 4);
  CHECK(last == 6.5f);
  CHECK(odt::decode<float>(bytes) == f);
  CHECK(odt::peek_dtype(bytes) == odt::DType::f32);

  Rng rng(1, 1);
  auto d = random_tensor({3, 1, 4}, rng);
  auto db = odt::encode(d);
  CHECK(db[4] == 2);
  CHECK(odt::decode<double>(db) == d);
  CHECK(odt::decode<float>(db).vec()[5] == static_cast<float>(d[5]));

  auto dir = temp_dir("odt");
  odt::write(dir / "x.odt", d);
  CHECK(odt::read<double>(dir / "x.odt") == d);

  auto bad = db;
  bad[0] = 'X';
  CHECK_THROWS_AS(odt::decode<double>(bad), odt::FormatError);
  auto short_buf = db;
  short_buf.resize(short_buf.size() - 1);
  CHECK_THROWS_AS(odt::decode<double>(short_buf), odt::FormatError);
  auto bad_dtype = db;
  bad_dtype[4] = 7;
  CHECK_THROWS_AS(odt::decode<double>(bad_dtype), odt::FormatError);
}

TEST_CASE("fast exp and tanh track libm") {
  double worst_exp = 0, worst_tanh = 0;
  for (double x = -30; x <= 30; x += 0.0137) {
    worst_exp = std::max(worst_exp, std::abs(fastmath::exp(x) / std::exp(x) - 1));
    worst_tanh = std::max(worst_tanh, std::abs(fastmath::tanh(x) - std::tanh(x)));
  }
  CHECK(worst_exp < 1e-15);
  CHECK(worst_tanh < 1e-15);
  CHECK(fastmath::exp(-1e6) > 0.0);
  CHECK(std::isfinite(fastmath::exp(1e6)));
  CHECK(std::abs(fastmath::exp(1.0f) / std::exp(1.0f) - 1) < 1e-6);
}

namespace {

kernels::RowSparsity random_sparsity(std::size_t len, Rng& rng) {
  kernels::RowSparsity m;
  m.rows = len;
  m.cols_total = len;
  m.row_ptr.push_back(0);
  for (std::size_t r = 0; r < len; ++r) {
    for (std::size_t c = 0; c < len; ++c)
      if (c == r || rng.uniform() < 0.4) m.cols.push_back(c);
    m.row_ptr.push_back(m.cols.size());
  }
  return m;
}

template <typename T>
std::vector<T> rand_vec(std::size_t n, Rng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1, 1));
  return v;
}

template <typename T>
void gemm_parity(Rng& rng) {
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t m = 1 + rng.below(37), k = 1 + rng.below(41), n = 1 + rng.below(53);
    const bool acc = rng.below(2);
    auto a = rand_vec<T>(m * k, rng), b = rand_vec<T>(k * n, rng), c0 = rand_vec<T>(m * n, rng);
    auto bt = rand_vec<T>(n * k, rng), at = rand_vec<T>(k * m, rng);
    for (int threads : {1, 3}) {
      kernels::set_threads(threads);
      auto cs = c0, cp = c0;
      kernels::serial::gemm(m, k, n, a.data(), b.data(), cs.data(), acc);
      kernels::parallel::gemm(m, k, n, a.data(), b.data(), cp.data(), acc);
      CHECK(cs == cp);
      cs = c0, cp = c0;
      kernels::serial::gemm_nt(m, k, n, a.data(), bt.data(), cs.data(), acc);
      kernels::parallel::gemm_nt(m, k, n, a.data(), bt.data(), cp.data(), acc);
      CHECK(cs == cp);
      cs = c0, cp = c0;
      kernels::serial::gemm_tn(m, k, n, at.data(), b.data(), cs.data(), acc);
      kernels::parallel::gemm_tn(m, k, n, at.data(), b.data(), cp.data(), acc);
      CHECK(cs == cp);
    }
  }
  kernels::set_threads(1);
}

template <typename T>
void attention_parity(Rng& rng) {
  for (std::size_t d : {4, 8, 16, 32, 6}) {
    const std::size_t len = 5 + rng.below(30), groups = 1 + rng.below(5);
    auto mask = random_sparsity(len, rng);
    const std::size_t sz = groups * len * d;
    auto q = rand_vec<T>(sz, rng), k = rand_vec<T>(sz, rng), v = rand_vec<T>(sz, rng), dout = rand_vec<T>(sz, rng);
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    for (int threads : {1, 4}) {
      kernels::set_threads(threads);
      std::vector<T> os(sz), op(sz), ps(groups * mask.nnz()), pp(groups * mask.nnz());
      kernels::serial::sparse_attention(groups, len, d, mask, scale, q.data(), k.data(), v.data(), os.data(),
                                        ps.data());
      kernels::parallel::sparse_attention(groups, len, d, mask, scale, q.data(), k.data(), v.data(), op.data(),
                                          pp.data());
      CHECK(os == op);
      CHECK(ps == pp);
      std::vector<T> dqs(sz), dks(sz), dvs(sz), dqp(sz), dkp(sz), dvp(sz);
      kernels::serial::sparse_attention_backward(groups, len, d, mask, scale, q.data(), k.data(), v.data(),
                                                 ps.data(), dout.data(), dqs.data(), dks.data(), dvs.data());
      kernels::parallel::sparse_attention_backward(groups, len, d, mask, scale, q.data(), k.data(), v.data(),
                                                   pp.data(), dout.data(), dqp.data(), dkp.data(), dvp.data());
      CHECK(dqs == dqp);
      CHECK(dks == dkp);
      CHECK(dvs == dvp);
    }
  }
  kernels::set_threads(1);
}

}  // namespace

TEST_CASE("serial and parallel gemm agree bitwise") {
  Rng rng(5, 5);
  gemm_parity<double>(rng);
  gemm_parity<float>(rng);
}

TEST_CASE("serial and parallel sparse attention agree bitwise") {
  Rng rng(6, 6);
  attention_parity<double>(rng);
  attention_parity<float>(rng);
}

TEST_CASE("matmul examples and shape errors") {
  auto id = V::constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto m = V::constant(Tensor<double>({2, 2}, {3, 4, 5, 6}));
  CHECK(ad::matmul(id, m).value().vec() == std::vector<double>{3, 4, 5, 6});
  auto row = V::constant(Tensor<double>({1, 2}, {1, 2}));
  auto col = V::constant(Tensor<double>({2, 1}, {3, 4}));
  CHECK(ad::matmul(row, col).value().item() == 11);
  try {
    ad::matmul(row, row);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1,2]") != std::string::npos);
  }
}

TEST_CASE("softmax examples") {
  auto z = ad::softmax(V::constant(Tensor<double>({3}, {0, 0, 0})));
  for (double p : z.value().vec()) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-15));

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::uint8_t> mask = {1, 0, 1};
  auto m = ad::softmax(V::constant(Tensor<double>({3}, {10, -inf, 10})), &mask);
  CHECK(m.value().vec() == std::vector<double>{0.5, 0.0, 0.5});

  auto s = ad::softmax(V::constant(Tensor<double>({3}, {1, 2, 3}))).value();
  CHECK(s[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(s[1] == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(s[2] == doctest::Approx(0.66524).epsilon(1e-4));

  std::vector<std::uint8_t> rows = {1, 1, 0, 0, 0, 0};
  try {
    ad::softmax(V::constant(Tensor<double>({2, 3})), &rows);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("row 1") != std::string::npos);
  }
}

TEST_CASE("softmax rows sum to one and masked entries are exactly zero") {
  Rng rng(9, 9);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t r = 1 + rng.below(6), n = 1 + rng.below(12);
    auto x = random_tensor({r, n}, rng, -20, 20);
    std::vector<std::uint8_t> mask(r * n);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < n; ++j) mask[i * n + j] = j == i % n || rng.uniform() < 0.5;
    auto y = ad::softmax(V::constant(x), &mask).value();
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (!mask[i * n + j]) CHECK(y[i * n + j] == 0.0);
        s += y[i * n + j];
      }
      CHECK(std::abs(s - 1) <= 1e-12);
    }
  }
}

TEST_CASE("cosine similarity examples") {
  Rng rng(2, 2);
  auto v = V::constant(random_tensor({7}, rng));
  CHECK(ad::cosine_similarity(v, v).value().item() == doctest::Approx(1.0).epsilon(1e-15));
  auto e1 = V::constant(Tensor<double>({2}, {1, 0})), e2 = V::constant(Tensor<double>({2}, {0, 1}));
  CHECK(ad::cosine_similarity(e1, e2).value().item() == 0.0);
  CHECK_THROWS_AS(ad::cosine_similarity(e1, V::constant(Tensor<double>({2}))), NumericError);
  for (int i = 0; i < 50; ++i) {
    auto a = V::constant(random_tensor({5}, rng)), b = V::constant(random_tensor({5}, rng));
    const double c = ad::cosine_similarity(a, b).value().item();
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
  }
}

TEST_CASE("backward examples") {
  auto x = V::leaf(Tensor<double>({2}, {1, 2}));
  ad::backward(ad::mean(ad::square(x)));
  CHECK(x.grad().vec() == std::vector<double>{1, 2});

  auto w = V::leaf(Tensor<double>({3}, {0.5, -1, 2}));
  auto c = V::constant(Tensor<double>({3}, {4, 5, 6}));
  ad::backward(ad::sum(ad::mul(w, c)));
  CHECK(w.grad().vec() == std::vector<double>{4, 5, 6});

  auto leaf = V::leaf(Tensor<double>({2}, {1, 2}));
  auto other = V::leaf(Tensor<double>({2}, {3, 4}));
  ad::backward(ad::sum(ad::mul(ad::detach(leaf), other)));
  CHECK(leaf.grad().vec() == std::vector<double>{0, 0});
  CHECK(other.grad().vec() == std::vector<double>{1, 2});
}

TEST_CASE("backward errors") {
  auto x = V::leaf(Tensor<double>({2}, {1, 2}));
  CHECK_THROWS_AS(ad::backward(ad::square(x)), DimensionError);
  auto loss = ad::sum(ad::square(x));
  ad::backward(loss);
  CHECK_THROWS_AS(ad::backward(loss), ad::GraphError);
  x.zero_grad();
  ad::backward(ad::sum(ad::square(x)));
  CHECK(x.grad().vec() == std::vector<double>{2, 4});
}

TEST_CASE("non-finite forward values are surfaced") {
  auto x = V::constant(Tensor<double>({2}, {1e200, 1}));
  CHECK_THROWS_AS(ad::square(x), NumericError);
  CHECK_THROWS_AS(ad::scale(x, 1e300), NumericError);
}

TEST_CASE("broadcasting is restricted to leading unit dimensions") {
  auto a = V::constant(Tensor<double>({2, 3}, 1.0));
  CHECK(ad::add(a, V::constant(Tensor<double>({1, 3}, 2.0))).value().vec() == std::vector<double>(6, 3.0));
  CHECK(ad::add(a, V::constant(Tensor<double>({3}, 2.0))).shape() == Shape{2, 3});
  CHECK_THROWS_AS(ad::add(a, V::constant(Tensor<double>({2, 1}))), DimensionError);
  CHECK_THROWS_AS(ad::add(a, V::constant(Tensor<double>({2}))), DimensionError);
}

TEST_CASE("no-grad guard records nothing") {
  auto x = V::leaf(Tensor<double>({2}, {1, 2}));
  ad::Var<double> y;
  {
    ad::NoGradGuard g;
    CHECK(ad::NoGradGuard::active());
    y = ad::square(x);
  }
  CHECK_FALSE(ad::NoGradGuard::active());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("forward is bitwise deterministic") {
  Rng rng(4, 4);
  auto a = random_tensor({16, 24}, rng), b = random_tensor({24, 9}, rng);
  auto run = [&] {
    auto h = ad::gelu(ad::matmul(V::constant(a), V::constant(b)));
    return ad::softmax(ad::layernorm_affine<double>(h, nullptr, nullptr)).value();
  };
  CHECK(run() == run());
}
