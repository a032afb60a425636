#include <doctest.h>

#include <set>
#include <tuple>

#include "omnidit/attention.hpp"
#include "omnidit/layout.hpp"
#include "support.hpp"

using namespace omnidit;
using namespace omnidit::layout;
using omnidit::testing::random_tensor;

namespace {

std::size_t token(const SegmentSpec& s, std::size_t w, std::size_t h) { return s.offset + h * s.grid.w + w; }

PositionIndex pos(std::uint32_t i, Rational w, Rational h) { return {i, w, h}; }

using Triple = std::tuple<std::uint32_t, std::int64_t, std::int64_t, std::int64_t, std::int64_t>;
Triple key(const PositionIndex& p) { return {p.axis_i, p.axis_w.num, p.axis_w.den, p.axis_h.num, p.axis_h.den}; }

}  // namespace

TEST_CASE("rational arithmetic is exact and normalized") {
  CHECK(Rational(4, 8) == Rational(1, 2));
  CHECK(Rational(1, 3) + Rational(1, 6) == Rational(1, 2));
  CHECK(Rational(2, 3) * Rational(3, 4) == Rational(1, 2));
  CHECK(Rational(1, 3) < Rational(1, 2));
  CHECK(Rational(7, 2).str() == "7/2");
  CHECK(Rational(6, 3).str() == "2");
  CHECK_THROWS(Rational(1, 0));
}

TEST_CASE("position examples") {
  const Grid g4{4, 4};
  {
    std::vector<Grid> refs = {g4};
    auto seq = assign_positions(g4, refs, 1);
    CHECK(seq.total_len() == 1 + 16 + 16);
    const auto& r = seq.reference(1);
    CHECK(seq.positions[token(r, 0, 0)] == pos(1, 4, 4));
    CHECK(seq.positions[token(r, 3, 3)] == pos(1, 7, 7));
    CHECK(seq.positions[token(seq.noisy(), 2, 3)] == pos(0, 2, 3));
  }
  {
    std::vector<Grid> refs = {g4, g4};
    auto seq = assign_positions(g4, refs, 1);
    CHECK(seq.positions[token(seq.reference(2), 0, 0)] == pos(2, 8, 8));
  }
  {
    std::vector<Grid> refs = {{2, 2}};
    auto seq = assign_positions(g4, refs, 1);
    CHECK(seq.positions[token(seq.reference(1), 1, 1)] == pos(1, 6, 6));
  }
  {
    std::vector<Grid> refs = {{3, 2}};
    auto seq = assign_positions({4, 4}, refs, 0);
    CHECK(seq.positions[token(seq.reference(1), 1, 1)] == pos(1, Rational(4) + Rational(4, 3), 6));
  }
}

TEST_CASE("text tokens sit at the origin") {
  Rng rng(1, 1);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<Grid> refs(1 + rng.below(2));
    for (auto& g : refs) g = {1 + rng.below(8), 1 + rng.below(8)};
    const std::size_t text = rng.below(7);
    auto seq = assign_positions({1 + rng.below(8), 1 + rng.below(8)}, refs, text);
    CHECK(seq.text().length() == text);
    for (std::size_t t = 0; t < text; ++t) CHECK(seq.positions[t] == pos(0, 0, 0));
  }
}

TEST_CASE("sequence length and segment tags") {
  std::vector<Grid> refs = {{3, 5}, {2, 2}};
  auto seq = assign_positions({4, 3}, refs, 5);
  CHECK(seq.total_len() == 5 + 12 + 15 + 4);
  CHECK(seq.denoise_len() == 17);
  CHECK(seq.reference_count() == 2);
  std::vector<std::size_t> counts(4);
  for (auto s : seq.segment_of) ++counts[s];
  CHECK(counts == std::vector<std::size_t>{5, 12, 15, 4});
  CHECK(seq.reference(2).reference_ordinal == 2);
  CHECK(seq.reference(2).offset == 32);
}

TEST_CASE("zero-extent grids are rejected") {
  std::vector<Grid> refs = {{0, 2}};
  CHECK_THROWS_AS(assign_positions({2, 2}, refs, 0), std::invalid_argument);
  std::vector<Grid> ok = {{2, 2}};
  CHECK_THROWS_AS(assign_positions({2, 0}, ok, 0), std::invalid_argument);
}

TEST_CASE("segments never share a position triple; noisy and references are disjoint even in (w, h)") {
  Rng rng(2, 2);
  for (int rep = 0; rep < 1000; ++rep) {
    const Grid noisy{1 + rng.below(12), 1 + rng.below(12)};
    std::vector<Grid> refs(1 + rng.below(3));
    for (auto& g : refs) g = {1 + rng.below(12), 1 + rng.below(12)};
    auto seq = assign_positions(noisy, refs, rng.below(4));
    std::vector<std::set<Triple>> per(seq.segments.size());
    std::set<Triple> noisy_wh;  // axis_i fixed at 0: compares (w, h) only
    for (std::size_t t = 0; t < seq.total_len(); ++t) {
      per[seq.segment_of[t]].insert(key(seq.positions[t]));
      if (seq.segment_of[t] == 1) noisy_wh.insert(key(seq.positions[t]));
    }
    for (std::size_t a = 1; a < per.size(); ++a)
      for (std::size_t b = a + 1; b < per.size(); ++b)
        for (const auto& k : per[b]) CHECK(per[a].count(k) == 0);
    for (std::size_t t = seq.denoise_len(); t < seq.total_len(); ++t)
      CHECK(noisy_wh.count(key(pos(0, seq.positions[t].axis_w, seq.positions[t].axis_h))) == 0);
  }
}

TEST_CASE("references lie diagonally beyond the noisy block") {
  Rng rng(3, 3);
  for (int rep = 0; rep < 300; ++rep) {
    const Grid noisy{1 + rng.below(10), 1 + rng.below(10)};
    std::vector<Grid> refs(1 + rng.below(2));
    for (auto& g : refs) g = {1 + rng.below(10), 1 + rng.below(10)};
    if (rep % 2 == 0) refs.assign(refs.size(), noisy);
    auto seq = assign_positions(noisy, refs, 1);
    Rational prev_max_w(static_cast<std::int64_t>(noisy.w) - 1), prev_max_h(static_cast<std::int64_t>(noisy.h) - 1);
    const Rational noisy_max_w = prev_max_w, noisy_max_h = prev_max_h;
    for (std::size_t i = 1; i <= refs.size(); ++i) {
      const auto& s = seq.reference(i);
      Rational min_w(1 << 30), min_h(1 << 30), max_w, max_h;
      for (std::size_t t = s.offset; t < s.offset + s.length(); ++t) {
        const auto& p = seq.positions[t];
        CHECK(p.axis_i == i);
        min_w = std::min(min_w, p.axis_w), min_h = std::min(min_h, p.axis_h);
        max_w = std::max(max_w, p.axis_w), max_h = std::max(max_h, p.axis_h);
      }
      CHECK(noisy_max_w < min_w);
      CHECK(noisy_max_h < min_h);
      // Every reference spans the noisy extent: max - min = noisy - S.
      CHECK(max_w + Rational(static_cast<std::int64_t>(noisy.w), static_cast<std::int64_t>(s.grid.w)) ==
            min_w + Rational(static_cast<std::int64_t>(noisy.w)));
      if (refs[i - 1] == noisy) {
        CHECK(prev_max_w < min_w);
        CHECK(prev_max_h < min_h);
      }
      prev_max_w = max_w, prev_max_h = max_h;
    }
  }
}

TEST_CASE("scaled placement reduces to the unscaled one for equal grids") {
  Rng rng(4, 4);
  for (int rep = 0; rep < 100; ++rep) {
    const Grid g{1 + rng.below(9), 1 + rng.below(9)};
    std::vector<Grid> refs(1 + rng.below(2), g);
    auto seq = assign_positions(g, refs, 0);
    for (std::size_t i = 1; i <= refs.size(); ++i) {
      const auto& s = seq.reference(i);
      for (std::size_t h = 0; h < g.h; ++h)
        for (std::size_t w = 0; w < g.w; ++w) {
          const auto& p = seq.positions[token(s, w, h)];
          CHECK(p.axis_w == Rational(static_cast<std::int64_t>(i * g.w + w)));
          CHECK(p.axis_h == Rational(static_cast<std::int64_t>(i * g.h + h)));
        }
    }
  }
}

TEST_CASE("layout json") {
  std::vector<Grid> refs = {{2, 2}};
  auto j = to_json(assign_positions({4, 4}, refs, 2));
  CHECK(j.dump().find("\"w\":\"6\"") != std::string::npos);
  auto again = to_json(assign_positions({4, 4}, refs, 2));
  CHECK(j == again);
}

TEST_CASE("axis split and frequency ladder") {
  for (std::size_t hd : {4, 8, 16, 32, 64, 128}) {
    auto s = default_axis_split(hd);
    CHECK(s.total() == hd);
    CHECK(s.d_i % 2 == 0);
    CHECK(s.d_w % 2 == 0);
    CHECK(s.d_h % 2 == 0);
    CHECK(s.d_w >= 2);
    CHECK(s.d_h >= s.d_i);
  }
  CHECK(default_axis_split(128).d_i == 16);
  CHECK_THROWS_AS(rope_frequencies(5), std::invalid_argument);
  auto f = rope_frequencies(8);
  CHECK(f.size() == 4);
  CHECK(f[0] == 1.0);
  CHECK(f[2] == doctest::Approx(std::pow(10000.0, -0.5)).epsilon(1e-15));
  // Doubling the block width keeps every existing angle at twice the index.
  for (std::size_t d : {2, 4, 8, 16}) {
    auto a = rope_frequencies(d), b = rope_frequencies(2 * d);
    for (std::size_t p = 0; p < a.size(); ++p) CHECK(b[2 * p] == a[p]);
  }
  std::vector<Grid> refs = {{2, 2}};
  auto seq = assign_positions({2, 2}, refs, 1);
  CHECK_THROWS_AS(rope_tables(seq, 8, {2, 3, 3}), std::invalid_argument);
  CHECK_THROWS_AS(rope_tables(seq, 8, {2, 2, 2}), std::invalid_argument);
}

TEST_CASE("rotation is the identity at the origin") {
  std::vector<Grid> refs = {{2, 2}};
  auto seq = assign_positions({2, 2}, refs, 3);
  auto t = rope_tables(seq, 16, default_axis_split(16));
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t p = 0; p < 8; ++p) {
      CHECK(t.cos[k * 8 + p] == 1.0);
      CHECK(t.sin[k * 8 + p] == 0.0);
    }
}

TEST_CASE("rotated inner products depend only on position differences") {
  Rng rng(5, 5);
  const std::size_t hd = 16;
  const auto split = default_axis_split(hd);
  double drift = 0;
  for (int rep = 0; rep < 200; ++rep) {
    TokenSequence seq;
    auto r = [&] { return Rational(static_cast<std::int64_t>(rng.below(40)), 1 + static_cast<std::int64_t>(rng.below(3))); };
    const auto p1 = pos(static_cast<std::uint32_t>(rng.below(3)), r(), r());
    const auto p2 = pos(static_cast<std::uint32_t>(rng.below(3)), r(), r());
    const std::uint32_t di = static_cast<std::uint32_t>(rng.below(5));
    const Rational dw = r(), dh = r();
    seq.positions = {p1, p2, pos(p1.axis_i + di, p1.axis_w + dw, p1.axis_h + dh),
                     pos(p2.axis_i + di, p2.axis_w + dw, p2.axis_h + dh)};
    seq.segment_of.assign(4, 0);
    auto table = rope_tables(seq, hd, split);
    auto qv = random_tensor({hd}, rng), kv = random_tensor({hd}, rng);
    Tensor<double> x({4, hd});
    for (std::size_t c = 0; c < hd; ++c) {
      x[c] = qv[c], x[hd + c] = kv[c], x[2 * hd + c] = qv[c], x[3 * hd + c] = kv[c];
    }
    auto y = attention::apply_rope(ad::Var<double>::constant(x), table).value();
    double before = 0, after = 0;
    for (std::size_t c = 0; c < hd; ++c) {
      before += y[c] * y[hd + c];
      after += y[2 * hd + c] * y[3 * hd + c];
    }
    drift = std::max(drift, std::abs(before - after));
  }
  CHECK(drift < 1e-10);
}
