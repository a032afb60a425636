#include "omnidit/attention.hpp"

#include <cmath>
#include <memory>
#include <numeric>
#include <stdexcept>

namespace omnidit::attention {

namespace {

struct Band {
  std::size_t begin, len;
};

std::vector<Band> bands(std::size_t extent, std::size_t m, Parity parity) {
  std::vector<Band> out;
  if (m >= extent) {
    out.push_back({0, extent});
    return out;
  }
  std::size_t start = 0;
  const std::size_t shift = parity == Parity::shifted ? m / 2 : 0;
  if (shift > 0) {
    out.push_back({0, shift});
    start = shift;
  }
  for (; start < extent; start += m) out.push_back({start, std::min(m, extent - start)});
  return out;
}

}  // namespace

std::size_t WindowPlan::window_count() const {
  std::size_t n = 0;
  for (const auto& r : per_reference) n += r.size();
  return n;
}

WindowPlan plan_windows(const layout::TokenSequence& seq, std::size_t window_size, Parity parity) {
  if (window_size == 0) throw std::invalid_argument("window size must be >= 1");
  WindowPlan plan;
  plan.window_size = window_size;
  plan.parity = parity;
  plan.total_len = seq.total_len();
  plan.window_of.assign(seq.total_len(), -1);
  std::int64_t next_id = 0;
  for (std::size_t r = 1; r <= seq.reference_count(); ++r) {
    const auto& seg = seq.reference(r);
    plan.reference_grids.push_back(seg.grid);
    std::vector<Window> windows;
    for (const Band& hb : bands(seg.grid.h, window_size, parity))
      for (const Band& wb : bands(seg.grid.w, window_size, parity)) {
        Window win{r, wb.begin, hb.begin, wb.len, hb.len, {}};
        win.tokens.reserve(wb.len * hb.len);
        for (std::size_t h = hb.begin; h < hb.begin + hb.len; ++h)
          for (std::size_t w = wb.begin; w < wb.begin + wb.len; ++w) {
            const std::size_t tok = seg.offset + h * seg.grid.w + w;
            win.tokens.push_back(tok);
            plan.window_of[tok] = next_id;
          }
        ++next_id;
        windows.push_back(std::move(win));
      }
    plan.per_reference.push_back(std::move(windows));
  }
  return plan;
}

WindowPlan full_plan(const layout::TokenSequence& seq) {
  std::size_t m = 1;
  for (std::size_t r = 1; r <= seq.reference_count(); ++r)
    m = std::max({m, seq.reference(r).grid.w, seq.reference(r).grid.h});
  return plan_windows(seq, m, Parity::regular);
}

bool AttnMask::allowed(std::size_t q, std::size_t k) const {
  const auto b = rows.cols.begin() + static_cast<std::ptrdiff_t>(rows.row_ptr[q]);
  const auto e = rows.cols.begin() + static_cast<std::ptrdiff_t>(rows.row_ptr[q + 1]);
  return std::binary_search(b, e, k);
}

std::vector<std::uint8_t> AttnMask::dense() const {
  const std::size_t n = rows.rows;
  std::vector<std::uint8_t> d(n * n, 0);
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t e = rows.row_ptr[q]; e < rows.row_ptr[q + 1]; ++e) d[q * n + rows.cols[e]] = 1;
  return d;
}

AttnMask build_mask(const layout::TokenSequence& seq, const WindowPlan& plan) {
  const std::size_t len = seq.total_len();
  bool match = plan.total_len == len && plan.reference_grids.size() == seq.reference_count();
  for (std::size_t r = 0; match && r < plan.reference_grids.size(); ++r)
    match = plan.reference_grids[r] == seq.reference(r + 1).grid;
  if (!match) throw std::invalid_argument("window plan was built for a different token sequence");

  std::vector<const Window*> by_id;
  for (const auto& ref : plan.per_reference)
    for (const auto& w : ref) by_id.push_back(&w);

  AttnMask mask;
  auto& rs = mask.rows;
  rs.rows = len;
  rs.cols_total = len;
  rs.row_ptr.reserve(len + 1);
  rs.row_ptr.push_back(0);
  for (std::size_t q = 0; q < len; ++q) {
    const std::int64_t wid = plan.window_of[q];
    if (wid < 0) {
      for (std::size_t k = 0; k < len; ++k) rs.cols.push_back(k);
    } else {
      const auto& toks = by_id[static_cast<std::size_t>(wid)]->tokens;
      rs.cols.insert(rs.cols.end(), toks.begin(), toks.end());
    }
    rs.row_ptr.push_back(rs.cols.size());
  }
  return mask;
}

template <typename T>
ad::Var<T> apply_rope(const ad::Var<T>& x, const layout::RopeTable& rope) {
  const auto& s = x.shape();
  if (s.size() < 2 || s[s.size() - 1] != rope.head_dim || s[s.size() - 2] != rope.len)
    throw DimensionError("apply_rope: input " + to_string(s) + " vs table [" + std::to_string(rope.len) + "," +
                         std::to_string(rope.head_dim) + "]");
  const std::size_t len = rope.len, hd = rope.head_dim, half = hd / 2;
  const std::size_t groups = x.numel() / (len * hd);
  auto cs = std::make_shared<std::vector<T>>(rope.cos.begin(), rope.cos.end());
  auto sn = std::make_shared<std::vector<T>>(rope.sin.begin(), rope.sin.end());
  Tensor<T> out(s);
  const T* xv = x.value().data();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t base = (g * len + t) * hd;
      for (std::size_t p = 0; p < half; ++p) {
        const T c = (*cs)[t * half + p], si = (*sn)[t * half + p];
        const T a = xv[base + 2 * p], b = xv[base + 2 * p + 1];
        out[base + 2 * p] = a * c - b * si;
        out[base + 2 * p + 1] = a * si + b * c;
      }
    }
  return ad::make_result<T>("rope", std::move(out), {x}, [=](ad::Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t base = (g * len + t) * hd;
        for (std::size_t p = 0; p < half; ++p) {
          const T c = (*cs)[t * half + p], si = (*sn)[t * half + p];
          const T ga = self.grad[base + 2 * p], gb = self.grad[base + 2 * p + 1];
          gx[base + 2 * p] += ga * c + gb * si;
          gx[base + 2 * p + 1] += -ga * si + gb * c;
        }
      }
  });
}

template <typename T>
ad::Var<T> attend_core(const ad::Var<T>& q, const ad::Var<T>& k, const ad::Var<T>& v, const AttnMask& mask) {
  const auto& s = q.shape();
  if (s != k.shape() || s != v.shape() || s.size() < 2)
    throw DimensionError("attend: q " + to_string(s) + ", k " + to_string(k.shape()) + ", v " + to_string(v.shape()));
  const std::size_t len = s[s.size() - 2], hd = s.back();
  if (len != mask.size())
    throw DimensionError("attend: sequence length " + std::to_string(len) + " vs mask " + std::to_string(mask.size()));
  for (std::size_t r = 0; r < len; ++r)
    if (mask.rows.row_ptr[r + 1] == mask.rows.row_ptr[r])
      throw NumericError("attend: row " + std::to_string(r) + " is fully masked");
  const std::size_t groups = q.numel() / (len * hd);
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  auto probs = std::make_shared<std::vector<T>>(groups * mask.rows.nnz());
  auto rows = std::make_shared<kernels::RowSparsity>(mask.rows);
  Tensor<T> out(s);
  kernels::parallel::sparse_attention<T>(groups, len, hd, *rows, scale, q.value().data(), k.value().data(),
                                         v.value().data(), out.data(), probs->data());
  if (ad::NoGradGuard::active()) probs.reset();
  return ad::make_result<T>("attend", std::move(out), {q, k, v}, [=](ad::Node<T>& self) {
    auto& pq = *self.parents[0];
    auto& pk = *self.parents[1];
    auto& pv = *self.parents[2];
    std::vector<T> dq(pq.value.numel()), dk(pk.value.numel()), dv(pv.value.numel());
    kernels::parallel::sparse_attention_backward<T>(groups, len, hd, *rows, scale, pq.value.data(), pk.value.data(),
                                                    pv.value.data(), probs->data(), self.grad.data(), dq.data(),
                                                    dk.data(), dv.data());
    auto acc = [](ad::Node<T>& n, const std::vector<T>& d) {
      if (!n.requires_grad) return;
      auto& g = n.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d[i];
    };
    acc(pq, dq);
    acc(pk, dk);
    acc(pv, dv);
  });
}

template <typename T>
ad::Var<T> attend(const ad::Var<T>& q, const ad::Var<T>& k, const ad::Var<T>& v, const AttnMask& mask,
                  const layout::RopeTable& rope) {
  return attend_core(apply_rope(q, rope), apply_rope(k, rope), v, mask);
}

FlopReport flops(const layout::TokenSequence& seq, const WindowPlan& plan, std::size_t heads, std::size_t head_dim) {
  FlopReport r;
  const std::uint64_t per_pair = 2ull * head_dim * heads;
  r.denoise_global = per_pair * seq.denoise_len() * seq.total_len();
  for (const auto& ref : plan.per_reference)
    for (const auto& w : ref) r.condition_windowed += per_pair * w.size() * w.size();
  return r;
}

template ad::Var<float> apply_rope<float>(const ad::Var<float>&, const layout::RopeTable&);
template ad::Var<double> apply_rope<double>(const ad::Var<double>&, const layout::RopeTable&);
template ad::Var<float> attend_core<float>(const ad::Var<float>&, const ad::Var<float>&, const ad::Var<float>&,
                                           const AttnMask&);
template ad::Var<double> attend_core<double>(const ad::Var<double>&, const ad::Var<double>&,
                                             const ad::Var<double>&, const AttnMask&);
template ad::Var<float> attend<float>(const ad::Var<float>&, const ad::Var<float>&, const ad::Var<float>&,
                                      const AttnMask&, const layout::RopeTable&);
template ad::Var<double> attend<double>(const ad::Var<double>&, const ad::Var<double>&, const ad::Var<double>&,
                                        const AttnMask&, const layout::RopeTable&);

}  // namespace omnidit::attention
