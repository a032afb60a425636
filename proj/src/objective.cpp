#include "omnidit/objective.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <string>

#include "omnidit/log.hpp"

namespace omnidit::objective {

namespace {

void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("interpolation time " + std::to_string(t) + " outside [0, 1]");
}

// Tensor shaped like `like` whose row b is filled with f[b].
template <typename T>
Tensor<T> row_fill(const Shape& like, std::span<const double> f) {
  Tensor<T> out(like);
  const std::size_t per = out.numel() / like[0];
  for (std::size_t b = 0; b < like[0]; ++b)
    std::fill(out.data() + b * per, out.data() + (b + 1) * per, static_cast<T>(f[b]));
  return out;
}

const std::vector<double>& orthogonal_matrix(std::size_t n, std::uint64_t seed) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::uint64_t>, std::vector<double>> cache;
  std::lock_guard lock(mu);
  auto it = cache.find({n, seed});
  if (it != cache.end()) return it->second;
  Rng rng(seed, 0x6f7274686fULL);
  std::vector<double> q(n * n);  // columns are basis vectors: q[i * n + col]
  for (auto& v : q) v = rng.normal();
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t prev = 0; prev < c; ++prev) {
      double dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += q[i * n + c] * q[i * n + prev];
      for (std::size_t i = 0; i < n; ++i) q[i * n + c] -= dot * q[i * n + prev];
    }
    double norm = 0;
    for (std::size_t i = 0; i < n; ++i) norm += q[i * n + c] * q[i * n + c];
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw NumericError("orthogonal extractor: degenerate random matrix");
    for (std::size_t i = 0; i < n; ++i) q[i * n + c] /= norm;
  }
  return cache.emplace(std::make_pair(n, seed), std::move(q)).first->second;
}

}  // namespace

template <typename T>
VelocityFn<T> model_velocity(const model::ToyDiTParams<T>& params, std::vector<ad::Var<T>> conditions,
                             std::vector<std::vector<std::uint32_t>> text_ids) {
  return [&params, conds = std::move(conditions), ids = std::move(text_ids)](const ad::Var<T>& x,
                                                                             std::span<const double> t) {
    return model::forward<T>(params, x, t, conds, ids);
  };
}

template <typename T>
Tensor<T> FlowSample<T>::target() const {
  if (x0.shape() != x1.shape()) throw DimensionError("flow sample: x0 " + to_string(x0.shape()) + " vs x1 " +
                                                     to_string(x1.shape()));
  Tensor<T> u(x0.shape());
  for (std::size_t i = 0; i < u.numel(); ++i) u[i] = x1[i] - x0[i];
  return u;
}

template <typename T>
Tensor<T> FlowSample<T>::xt() const {
  return interpolate(x0, x1, std::span<const double>(t));
}

template <typename T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& x1, double t) {
  check_time(t);
  if (x0.shape() != x1.shape())
    throw DimensionError("interpolate: " + to_string(x0.shape()) + " vs " + to_string(x1.shape()));
  Tensor<T> out(x0.shape());
  const T a = static_cast<T>(1.0 - t), b = static_cast<T>(t);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * x1[i];
  return out;
}

template <typename T>
Tensor<T> interpolate(const Tensor<T>& x0, const Tensor<T>& x1, std::span<const double> t) {
  if (x0.shape() != x1.shape() || x0.rank() == 0 || x0.dim(0) != t.size())
    throw DimensionError("interpolate: " + to_string(x0.shape()) + " vs " + to_string(x1.shape()) + " with " +
                         std::to_string(t.size()) + " times");
  Tensor<T> out(x0.shape());
  const std::size_t per = out.numel() / t.size();
  for (std::size_t b = 0; b < t.size(); ++b) {
    check_time(t[b]);
    const T wa = static_cast<T>(1.0 - t[b]), wb = static_cast<T>(t[b]);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) out[i] = wa * x0[i] + wb * x1[i];
  }
  return out;
}

std::vector<double> sample_times(Rng& rng, std::size_t batch, std::size_t k, double dt) {
  const double lo = static_cast<double>(k - 1) * dt;
  if (lo > 1.0) throw std::domain_error("(K - 1) * dt exceeds 1; no valid start time");
  std::vector<double> t(batch);
  for (auto& v : t) {
    v = rng.uniform();
    if (v - lo < 0.0) v = rng.uniform(lo, 1.0);
  }
  return t;
}

template <typename T>
ad::Var<T> ssp_loss(const VelocityFn<T>& v, const FlowSample<T>& s) {
  auto u = ad::Var<T>::constant(s.target());
  auto x = ad::Var<T>::constant(s.xt());
  return ad::mean(ad::square(ad::sub(v(x, s.t), u)));
}

template <typename T>
MtpResult<T> mtp_loss(const VelocityFn<T>& v, const FlowSample<T>& s, std::size_t k, double dt, bool detach) {
  if (k == 0) throw std::invalid_argument("mtp_loss: K must be >= 1");
  for (std::size_t b = 0; b < s.t.size(); ++b)
    if (s.t[b] - static_cast<double>(k - 1) * dt < 0.0)
      throw std::domain_error("mtp_loss: t = " + std::to_string(s.t[b]) + " underflows after " +
                              std::to_string(k - 1) + " steps of " + std::to_string(dt));
  MtpResult<T> r;
  auto u = ad::Var<T>::constant(s.target());
  auto x = ad::Var<T>::constant(s.xt());
  for (std::size_t step = 0; step < k; ++step) {
    std::vector<double> tk(s.t.size());
    for (std::size_t b = 0; b < tk.size(); ++b) tk[b] = s.t[b] - static_cast<double>(step) * dt;
    auto vk = v(x, tk);
    r.states.push_back(x.value());
    r.velocities.push_back(vk);
    r.times.push_back(tk);
    r.terms.push_back(ad::mean(ad::square(ad::sub(vk, u))));
    if (step + 1 < k) {
      x = ad::sub(x, ad::scale(vk, static_cast<T>(dt)));
      if (detach) x = ad::detach(x);
    }
  }
  if (k == 1) {
    r.loss = r.terms[0];
  } else {
    auto acc = r.terms[0];
    for (std::size_t i = 1; i < k; ++i) acc = ad::add(acc, r.terms[i]);
    r.loss = ad::scale(acc, static_cast<T>(1.0 / static_cast<double>(k)));
  }
  return r;
}

template <typename T>
OrthogonalExtractor<T>::OrthogonalExtractor(std::size_t dim, std::uint64_t seed) {
  const auto& q = orthogonal_matrix(dim, seed);
  Tensor<T> m({dim, dim});
  for (std::size_t i = 0; i < q.size(); ++i) m[i] = static_cast<T>(q[i]);
  q_ = ad::Var<T>::constant(std::move(m));
}

template <typename T>
ad::Var<T> OrthogonalExtractor<T>::apply(const ad::Var<T>& flat) const {
  return ad::linear<T>(flat, q_, nullptr);
}

template <typename T>
AlignResult<T> align_loss(const ad::Var<T>& generated, const Tensor<T>& ground_truth, const Tensor<T>& mask,
                          const FeatureExtractor<T>& extractor) {
  if (generated.shape() != ground_truth.shape() || generated.shape() != mask.shape())
    throw DimensionError("align_loss: generated " + to_string(generated.shape()) + ", ground truth " +
                         to_string(ground_truth.shape()) + ", mask " + to_string(mask.shape()));
  const std::size_t batch = generated.shape()[0], n = generated.numel() / batch;
  auto m = ad::Var<T>::constant(mask.reshaped({batch, n}));
  Tensor<T> gt_masked(Shape{batch, n});
  for (std::size_t i = 0; i < gt_masked.numel(); ++i) gt_masked[i] = ground_truth[i] * mask[i];
  auto fg = extractor.apply(ad::mul(ad::reshape(generated, {batch, n}), m));
  auto ft = extractor.apply(ad::Var<T>::constant(std::move(gt_masked)));
  const std::size_t fdim = fg.shape()[1];

  AlignResult<T> r;
  std::vector<ad::Var<T>> per_row;
  for (std::size_t b = 0; b < batch; ++b) {
    bool any = false;
    for (std::size_t i = b * n; i < (b + 1) * n && !any; ++i) any = mask[i] != T{0};
    if (!any) {
      ++r.empty_masks;
      continue;
    }
    auto idx = std::make_shared<std::vector<std::size_t>>(fdim);
    for (std::size_t j = 0; j < fdim; ++j) (*idx)[j] = b * fdim + j;
    auto cos = ad::cosine_similarity(ad::gather(fg, idx, {fdim}), ad::gather(ft, idx, {fdim}));
    per_row.push_back(ad::add_scalar(ad::scale(cos, T{-1}), T{1}));
  }
  if (r.empty_masks > 0)
    log::warn("align_loss: " + std::to_string(r.empty_masks) + " of " + std::to_string(batch) +
              " rows have an empty mask; skipped");
  if (per_row.empty()) {
    r.loss = ad::Var<T>::constant(Tensor<T>::scalar(T{0}));
    return r;
  }
  auto acc = per_row[0];
  for (std::size_t i = 1; i < per_row.size(); ++i) acc = ad::add(acc, per_row[i]);
  r.loss = per_row.size() == 1 ? acc : ad::scale(acc, static_cast<T>(1.0 / static_cast<double>(per_row.size())));
  return r;
}

template <typename T>
LossBreakdown<T> total_loss(const VelocityFn<T>& v, const FlowSample<T>& s, const LossOptions& opt,
                            const FeatureExtractor<T>* extractor) {
  if (opt.lambda < 0) throw std::invalid_argument("total_loss: lambda must be >= 0");
  LossBreakdown<T> out;
  out.lambda = opt.lambda;
  out.mtp = mtp_loss(v, s, opt.k, opt.dt, opt.detach);
  out.l_mtp = static_cast<double>(out.mtp.loss.value().item());
  for (const auto& term : out.mtp.terms) out.terms.push_back(static_cast<double>(term.value().item()));
  out.l_ssp = out.terms[0];
  out.total = out.mtp.loss;
  if (opt.lambda > 0 && s.mask && extractor) {
    // x_hat0 = x_t - t * v(x_t, t), from the first prediction.
    auto xt = ad::Var<T>::constant(out.mtp.states[0]);
    auto tb = ad::Var<T>::constant(row_fill<T>(s.x0.shape(), s.t));
    auto x0_hat = ad::sub(xt, ad::mul(out.mtp.velocities[0], tb));
    auto al = align_loss(x0_hat, s.x0, *s.mask, *extractor);
    out.empty_masks = al.empty_masks;
    out.l_align = static_cast<double>(al.loss.value().item());
    out.total = ad::add(out.mtp.loss, ad::scale(al.loss, static_cast<T>(opt.lambda)));
  }
  out.total_value = static_cast<double>(out.total.value().item());
  return out;
}

bool SmoothnessPair::holds() const { return lhs <= rhs * (1.0 + 1e-12); }

template <typename T>
std::vector<SmoothnessPair> smoothness_pairs(const std::vector<Tensor<T>>& velocities, const Tensor<T>& target) {
  std::vector<SmoothnessPair> out;
  if (velocities.size() < 2) return out;
  const std::size_t batch = target.dim(0), per = target.numel() / batch;
  for (std::size_t k = 0; k + 1 < velocities.size(); ++k) {
    const auto& va = velocities[k];
    const auto& vb = velocities[k + 1];
    if (va.shape() != target.shape() || vb.shape() != target.shape())
      throw DimensionError("smoothness_pairs: velocity/target shape mismatch");
    for (std::size_t b = 0; b < batch; ++b) {
      double lhs = 0, ea = 0, eb = 0;
      for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
        const double a = va[i], c = vb[i], u = target[i];
        lhs += (c - a) * (c - a);
        ea += (a - u) * (a - u);
        eb += (c - u) * (c - u);
      }
      out.push_back({b, k, lhs, 2.0 * eb + 2.0 * ea});
    }
  }
  return out;
}

#define OMNIDIT_OBJECTIVE_INSTANTIATE(T)                                                                          \
  template VelocityFn<T> model_velocity<T>(const model::ToyDiTParams<T>&, std::vector<ad::Var<T>>,             \
                                           std::vector<std::vector<std::uint32_t>>);                            \
  template struct FlowSample<T>;                                                                                \
  template Tensor<T> interpolate<T>(const Tensor<T>&, const Tensor<T>&, double);                                \
  template Tensor<T> interpolate<T>(const Tensor<T>&, const Tensor<T>&, std::span<const double>);               \
  template ad::Var<T> ssp_loss<T>(const VelocityFn<T>&, const FlowSample<T>&);                                  \
  template MtpResult<T> mtp_loss<T>(const VelocityFn<T>&, const FlowSample<T>&, std::size_t, double, bool);     \
  template class OrthogonalExtractor<T>;                                                                        \
  template AlignResult<T> align_loss<T>(const ad::Var<T>&, const Tensor<T>&, const Tensor<T>&,                  \
                                        const FeatureExtractor<T>&);                                            \
  template LossBreakdown<T> total_loss<T>(const VelocityFn<T>&, const FlowSample<T>&, const LossOptions&,       \
                                          const FeatureExtractor<T>*);                                          \
  template std::vector<SmoothnessPair> smoothness_pairs<T>(const std::vector<Tensor<T>>&, const Tensor<T>&);

OMNIDIT_OBJECTIVE_INSTANTIATE(float)
OMNIDIT_OBJECTIVE_INSTANTIATE(double)

}  // namespace omnidit::objective
