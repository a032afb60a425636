#pragma once

// Unified token sequence [text; noisy; ref_1; ...; ref_n] and its
// three-axis (stream, width, height) position indices.
//
// Reference i is placed diagonally past the noisy block and all earlier
// references; its local grid is stretched by w_noisy / w_ref_i (resp. h) so
// that every reference spans the noisy extent regardless of resolution.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace omnidit::layout {

/// Exact non-negative rational, always normalized.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Rational() = default;
  Rational(std::int64_t n, std::int64_t d = 1);

  double to_double() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }
  friend Rational operator+(const Rational& a, const Rational& b);
  friend Rational operator*(const Rational& a, const Rational& b);
  friend bool operator==(const Rational& a, const Rational& b) = default;
  friend bool operator<(const Rational& a, const Rational& b);
  friend bool operator<=(const Rational& a, const Rational& b) { return !(b < a); }
  std::string str() const;
};

struct Grid {
  std::size_t w = 0;
  std::size_t h = 0;
  std::size_t count() const noexcept { return w * h; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

enum class SegmentKind { text, noisy, reference };

struct SegmentSpec {
  SegmentKind kind = SegmentKind::text;
  std::size_t token_count = 0;  // text only; image segments use grid
  Grid grid{};
  std::size_t reference_ordinal = 0;  // 1-based, references only
  std::size_t offset = 0;             // first token index in the sequence

  std::size_t length() const noexcept { return kind == SegmentKind::text ? token_count : grid.count(); }
};

struct PositionIndex {
  std::uint32_t axis_i = 0;
  Rational axis_w;
  Rational axis_h;
  friend bool operator==(const PositionIndex&, const PositionIndex&) = default;
};

struct TokenSequence {
  std::vector<SegmentSpec> segments;  // text, noisy, refs in order
  std::vector<PositionIndex> positions;
  std::vector<std::uint32_t> segment_of;  // per token, index into segments

  std::size_t total_len() const noexcept { return positions.size(); }
  const SegmentSpec& text() const { return segments.at(0); }
  const SegmentSpec& noisy() const { return segments.at(1); }
  std::size_t reference_count() const noexcept { return segments.size() - 2; }
  /// 1-based reference ordinal.
  const SegmentSpec& reference(std::size_t ordinal) const { return segments.at(ordinal + 1); }
  /// Number of text + noisy tokens.
  std::size_t denoise_len() const { return text().length() + noisy().length(); }
};

/// Token (w, h) of an image segment sits at offset + h * grid.w + w.
TokenSequence assign_positions(Grid noisy, std::span<const Grid> refs, std::size_t text_count);

nlohmann::json to_json(const TokenSequence& seq);

struct AxisSplit {
  std::size_t d_i = 0;
  std::size_t d_w = 0;
  std::size_t d_h = 0;
  std::size_t total() const noexcept { return d_i + d_w + d_h; }
};

/// Roughly (1/8, 7/16, 7/16) of head_dim, each block even.
AxisSplit default_axis_split(std::size_t head_dim);

/// Per-token rotation factors, [len, head_dim / 2] for cos and sin. Pair p of
/// an axis block of width d rotates by position * base^(-2p/d).
struct RopeTable {
  std::size_t len = 0;
  std::size_t head_dim = 0;
  AxisSplit split;
  std::vector<double> cos;
  std::vector<double> sin;
};

/// Frequency ladder for one axis block of width d (d even).
std::vector<double> rope_frequencies(std::size_t d, double base = 10000.0);

RopeTable rope_tables(const TokenSequence& seq, std::size_t head_dim, AxisSplit split, double base = 10000.0);

}  // namespace omnidit::layout
