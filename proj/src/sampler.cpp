#include "omnidit/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "omnidit/autodiff.hpp"
#include "omnidit/rng.hpp"

namespace omnidit::sampler {

void SampleConfig::validate() const {
  if (steps == 0) throw std::invalid_argument("sample: steps must be >= 1");
  if (!(guidance >= 0.0)) throw std::invalid_argument("sample: guidance must be >= 0");
}

std::vector<double> time_grid(std::size_t steps) {
  if (steps == 0) throw std::invalid_argument("time grid needs at least one step");
  std::vector<double> t(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k)
    t[k] = 1.0 - static_cast<double>(k) / static_cast<double>(steps);
  return t;
}

template <typename T>
Tensor<T> integrate(const Field<T>& v, Tensor<T> x, std::size_t steps, Trajectory<T>* trajectory) {
  const auto grid = time_grid(steps);
  if (trajectory) {
    *trajectory = {};
    trajectory->t = grid;
    trajectory->x.push_back(x);
  }
  for (std::size_t k = 0; k < steps; ++k) {
    const Tensor<T> vk = v(x, grid[k]);
    if (vk.shape() != x.shape())
      throw DimensionError("integrate: field returned " + to_string(vk.shape()) + " for state " +
                           to_string(x.shape()));
    const T h = static_cast<T>(grid[k] - grid[k + 1]);
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] -= h * vk[i];
    if (!x.all_finite()) throw NumericError("integrate: non-finite state at step " + std::to_string(k));
    if (trajectory) {
      trajectory->v.push_back(vk);
      trajectory->x.push_back(x);
    }
  }
  return x;
}

template <typename T>
Field<T> guided(Field<T> cond, Field<T> uncond, double g) {
  if (g == 1.0) return cond;
  if (g == 0.0) return uncond;
  return [cond = std::move(cond), uncond = std::move(uncond), g](const Tensor<T>& x, double t) {
    Tensor<T> vc = cond(x, t);
    const Tensor<T> vu = uncond(x, t);
    const T gg = static_cast<T>(g);
    for (std::size_t i = 0; i < vc.numel(); ++i) vc[i] = vu[i] + gg * (vc[i] - vu[i]);
    return vc;
  };
}

template <typename T>
Field<T> model_field(const model::ToyDiTParams<T>& params, std::vector<Tensor<T>> conditions,
                     std::vector<std::vector<std::uint32_t>> text_ids) {
  std::vector<ad::Var<T>> conds;
  for (auto& c : conditions) conds.push_back(ad::Var<T>::constant(std::move(c)));
  return [&params, conds = std::move(conds), ids = std::move(text_ids)](const Tensor<T>& x, double t) {
    ad::NoGradGuard guard;
    const std::vector<double> tb(x.dim(0), t);
    return model::forward<T>(params, ad::Var<T>::constant(x), tb, conds, ids).value();
  };
}

template <typename T>
Field<T> null_field(const model::ToyDiTParams<T>& params, const std::vector<Tensor<T>>& conditions,
                    const std::vector<std::vector<std::uint32_t>>& text_ids) {
  std::vector<Tensor<T>> zeros;
  for (const auto& c : conditions) zeros.emplace_back(c.shape(), T{0});
  std::vector<std::vector<std::uint32_t>> null_ids;
  for (const auto& row : text_ids) null_ids.emplace_back(row.size(), 0u);
  return model_field<T>(params, std::move(zeros), std::move(null_ids));
}

template <typename T>
Tensor<T> noise(const Shape& shape, std::uint64_t seed, std::uint64_t stream) {
  Rng rng(seed, stream);
  Tensor<T> out(shape);
  for (auto& v : out.span()) v = static_cast<T>(rng.normal());
  return out;
}

template <typename T>
SampleResult<T> sample(const model::ToyDiTParams<T>& params, const std::vector<Tensor<T>>& conditions,
                       const std::vector<std::vector<std::uint32_t>>& text_ids, const SampleConfig& cfg) {
  cfg.validate();
  const auto& mc = params.config;
  std::size_t batch = 0;
  if (!conditions.empty()) batch = conditions[0].dim(0);
  else if (!text_ids.empty()) batch = text_ids.size();
  if (batch == 0) throw std::invalid_argument("sample: need at least one condition image or text row");
  const Shape shape{batch, mc.channels, mc.image_size, mc.image_size};

  Field<T> cond = model_field<T>(params, conditions, text_ids);
  Field<T> field = cfg.guidance == 1.0 ? cond : guided<T>(cond, null_field<T>(params, conditions, text_ids), cfg.guidance);

  SampleResult<T> r;
  Trajectory<T> traj;
  r.image = integrate<T>(field, noise<T>(shape, cfg.seed, 0x6e6f697365ULL), cfg.steps,
                         cfg.record_trajectory ? &traj : nullptr);
  if (cfg.clamp)
    for (auto& v : r.image.span()) v = std::clamp(v, T{-1}, T{1});
  if (cfg.record_trajectory) r.trajectory = std::move(traj);
  return r;
}

std::size_t steps_for_dt(double dt) {
  if (!(dt > 0.0 && dt <= 1.0)) throw std::invalid_argument("dt must lie in (0, 1], got " + std::to_string(dt));
  const double n = std::round(1.0 / dt);
  if (std::abs(n * dt - 1.0) > 1e-12)
    throw std::invalid_argument("dt = " + std::to_string(dt) + " is not of the form 1/N");
  return static_cast<std::size_t>(n);
}

template <typename T>
std::map<double, Tensor<T>> integrate_with_dt(const Field<T>& v, const Tensor<T>& x1, std::span<const double> dts) {
  std::map<double, Tensor<T>> out;
  for (double dt : dts) steps_for_dt(dt);
  for (double dt : dts) out.emplace(dt, integrate<T>(v, x1, steps_for_dt(dt)));
  return out;
}

#define OMNIDIT_SAMPLER_INSTANTIATE(T)                                                                          \
  template Tensor<T> integrate<T>(const Field<T>&, Tensor<T>, std::size_t, Trajectory<T>*);                     \
  template Field<T> guided<T>(Field<T>, Field<T>, double);                                                      \
  template Field<T> model_field<T>(const model::ToyDiTParams<T>&, std::vector<Tensor<T>>,                       \
                                   std::vector<std::vector<std::uint32_t>>);                                    \
  template Field<T> null_field<T>(const model::ToyDiTParams<T>&, const std::vector<Tensor<T>>&,                 \
                                  const std::vector<std::vector<std::uint32_t>>&);                              \
  template Tensor<T> noise<T>(const Shape&, std::uint64_t, std::uint64_t);                                      \
  template SampleResult<T> sample<T>(const model::ToyDiTParams<T>&, const std::vector<Tensor<T>>&,              \
                                     const std::vector<std::vector<std::uint32_t>>&, const SampleConfig&);      \
  template std::map<double, Tensor<T>> integrate_with_dt<T>(const Field<T>&, const Tensor<T>&,                  \
                                                            std::span<const double>);

OMNIDIT_SAMPLER_INSTANTIATE(float)
OMNIDIT_SAMPLER_INSTANTIATE(double)

}  // namespace omnidit::sampler
