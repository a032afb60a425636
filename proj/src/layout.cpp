#include "omnidit/layout.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace omnidit::layout {

Rational::Rational(std::int64_t n, std::int64_t d) {
  if (d == 0) throw std::invalid_argument("Rational: zero denominator");
  if (d < 0) {
    n = -n;
    d = -d;
  }
  const std::int64_t g = std::gcd(n < 0 ? -n : n, d);
  num = g ? n / g : 0;
  den = g ? d / g : 1;
}

Rational operator+(const Rational& a, const Rational& b) {
  return Rational(a.num * b.den + b.num * a.den, a.den * b.den);
}

Rational operator*(const Rational& a, const Rational& b) { return Rational(a.num * b.num, a.den * b.den); }

bool operator<(const Rational& a, const Rational& b) { return a.num * b.den < b.num * a.den; }

std::string Rational::str() const {
  return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
}

TokenSequence assign_positions(Grid noisy, std::span<const Grid> refs, std::size_t text_count) {
  auto check = [](Grid g, const std::string& what) {
    if (g.w == 0 || g.h == 0)
      throw std::invalid_argument(what + " grid has zero extent (" + std::to_string(g.w) + "x" +
                                  std::to_string(g.h) + ")");
  };
  check(noisy, "noisy");
  for (std::size_t i = 0; i < refs.size(); ++i) check(refs[i], "reference " + std::to_string(i + 1));

  TokenSequence seq;
  std::size_t offset = 0;
  seq.segments.push_back({SegmentKind::text, text_count, {}, 0, offset});
  offset += text_count;
  seq.segments.push_back({SegmentKind::noisy, 0, noisy, 0, offset});
  offset += noisy.count();
  for (std::size_t i = 0; i < refs.size(); ++i) {
    seq.segments.push_back({SegmentKind::reference, 0, refs[i], i + 1, offset});
    offset += refs[i].count();
  }
  seq.positions.reserve(offset);
  seq.segment_of.reserve(offset);

  for (std::size_t k = 0; k < text_count; ++k) {
    seq.positions.push_back({0, Rational(0), Rational(0)});
    seq.segment_of.push_back(0);
  }
  for (std::size_t h = 0; h < noisy.h; ++h)
    for (std::size_t w = 0; w < noisy.w; ++w) {
      seq.positions.push_back({0, Rational(static_cast<std::int64_t>(w)), Rational(static_cast<std::int64_t>(h))});
      seq.segment_of.push_back(1);
    }

  std::int64_t sum_w = 0, sum_h = 0;  // sum over earlier references
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const Grid r = refs[i];
    const Rational sw(static_cast<std::int64_t>(noisy.w), static_cast<std::int64_t>(r.w));
    const Rational sh(static_cast<std::int64_t>(noisy.h), static_cast<std::int64_t>(r.h));
    const Rational base_w(static_cast<std::int64_t>(noisy.w) + sum_w);
    const Rational base_h(static_cast<std::int64_t>(noisy.h) + sum_h);
    for (std::size_t h = 0; h < r.h; ++h)
      for (std::size_t w = 0; w < r.w; ++w) {
        seq.positions.push_back({static_cast<std::uint32_t>(i + 1),
                                 base_w + Rational(static_cast<std::int64_t>(w)) * sw,
                                 base_h + Rational(static_cast<std::int64_t>(h)) * sh});
        seq.segment_of.push_back(static_cast<std::uint32_t>(i + 2));
      }
    sum_w += static_cast<std::int64_t>(r.w);
    sum_h += static_cast<std::int64_t>(r.h);
  }
  return seq;
}

nlohmann::json to_json(const TokenSequence& seq) {
  nlohmann::json j;
  j["total_len"] = seq.total_len();
  auto& segs = j["segments"] = nlohmann::json::array();
  for (const auto& s : seq.segments) {
    nlohmann::json e;
    switch (s.kind) {
      case SegmentKind::text:
        e["kind"] = "text";
        e["token_count"] = s.token_count;
        break;
      case SegmentKind::noisy:
        e["kind"] = "noisy";
        e["grid"] = {s.grid.w, s.grid.h};
        break;
      case SegmentKind::reference:
        e["kind"] = "reference";
        e["grid"] = {s.grid.w, s.grid.h};
        e["reference_ordinal"] = s.reference_ordinal;
        break;
    }
    e["offset"] = s.offset;
    segs.push_back(e);
  }
  auto& pos = j["positions"] = nlohmann::json::array();
  for (std::size_t t = 0; t < seq.total_len(); ++t) {
    const auto& p = seq.positions[t];
    pos.push_back({{"segment", seq.segment_of[t]}, {"i", p.axis_i}, {"w", p.axis_w.str()}, {"h", p.axis_h.str()}});
  }
  return j;
}

AxisSplit default_axis_split(std::size_t head_dim) {
  if (head_dim % 2 != 0 || head_dim < 4)
    throw std::invalid_argument("head_dim must be even and >= 4, got " + std::to_string(head_dim));
  auto even_floor = [](std::size_t v) { return v - v % 2; };
  AxisSplit s;
  // Below 8 channels the stream axis gets none; it only separates segments.
  s.d_i = head_dim < 8 ? 0 : std::max<std::size_t>(2, even_floor((head_dim + 4) / 8));
  s.d_w = even_floor((head_dim - s.d_i) / 2);
  s.d_h = head_dim - s.d_i - s.d_w;
  return s;
}

std::vector<double> rope_frequencies(std::size_t d, double base) {
  if (d % 2 != 0) throw std::invalid_argument("rope axis block width must be even, got " + std::to_string(d));
  std::vector<double> f(d / 2);
  for (std::size_t p = 0; p < f.size(); ++p)
    f[p] = std::pow(base, -static_cast<double>(2 * p) / static_cast<double>(d));
  return f;
}

RopeTable rope_tables(const TokenSequence& seq, std::size_t head_dim, AxisSplit split, double base) {
  if (split.total() != head_dim)
    throw std::invalid_argument("axis split " + std::to_string(split.d_i) + "+" + std::to_string(split.d_w) + "+" +
                                std::to_string(split.d_h) + " does not sum to head_dim " + std::to_string(head_dim));
  const auto fi = rope_frequencies(split.d_i, base);
  const auto fw = rope_frequencies(split.d_w, base);
  const auto fh = rope_frequencies(split.d_h, base);
  RopeTable t;
  t.len = seq.total_len();
  t.head_dim = head_dim;
  t.split = split;
  const std::size_t half = head_dim / 2;
  t.cos.resize(t.len * half);
  t.sin.resize(t.len * half);
  for (std::size_t k = 0; k < t.len; ++k) {
    const auto& p = seq.positions[k];
    std::size_t c = 0;
    auto fill = [&](const std::vector<double>& freqs, double pos) {
      for (double f : freqs) {
        const double a = pos * f;
        t.cos[k * half + c] = std::cos(a);
        t.sin[k * half + c] = std::sin(a);
        ++c;
      }
    };
    fill(fi, static_cast<double>(p.axis_i));
    fill(fw, p.axis_w.to_double());
    fill(fh, p.axis_h.to_double());
  }
  return t;
}

}  // namespace omnidit::layout
