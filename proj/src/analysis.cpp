#include "omnidit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "omnidit/log.hpp"
#include "omnidit/rng.hpp"

namespace omnidit::analysis {

namespace {

double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

template <typename T>
std::vector<double> row(const Tensor<T>& t, std::size_t b) {
  const std::size_t per = t.numel() / t.dim(0);
  return {t.data() + b * per, t.data() + (b + 1) * per};
}

struct MeanSe {
  double sum = 0, sq = 0;
  std::size_t n = 0;
  void add(double x) {
    sum += x;
    sq += x * x;
    ++n;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
  double se() const {
    if (n < 2) return 0.0;
    const double m = mean();
    const double var = std::max(0.0, (sq - static_cast<double>(n) * m * m) / static_cast<double>(n - 1));
    return std::sqrt(var / static_cast<double>(n));
  }
};

template <typename T>
data::TaskBatch<T> task_batch(const data::Dataset& eval, const std::vector<std::size_t>& items, data::Task task) {
  std::vector<data::TaskInstance> in;
  for (auto i : items) in.push_back(data::make_task(eval.items.at(i), task));
  return data::assemble<T>(in);
}

template <typename T>
sampler::Field<T> batch_field(const model::ToyDiTParams<T>& params, const data::TaskBatch<T>& b, double guidance) {
  auto cond = sampler::model_field<T>(params, b.conditions, b.text_ids);
  if (guidance == 1.0) return cond;
  return sampler::guided<T>(cond, sampler::null_field<T>(params, b.conditions, b.text_ids), guidance);
}

template <typename T>
Tensor<T> row_noise(const Shape& image, std::size_t rows, std::uint64_t seed, std::uint64_t stream,
                    const std::vector<std::uint64_t>& keys) {
  Shape s{rows};
  s.insert(s.end(), image.begin(), image.end());
  Tensor<T> out(s);
  const std::size_t per = numel(image);
  for (std::size_t r = 0; r < rows; ++r) {
    Rng rng = Rng(seed, stream).split(keys[r]);
    for (std::size_t i = 0; i < per; ++i) out[r * per + i] = static_cast<T>(rng.normal());
  }
  return out;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

}  // namespace

std::string to_string(PairMode m) {
  switch (m) {
    case PairMode::mixed: return "mixed";
    case PairMode::equal_time: return "equal_time";
    case PairMode::equal_state: return "equal_state";
  }
  return "?";
}

PairMode pair_mode_from_string(const std::string& s) {
  if (s == "mixed") return PairMode::mixed;
  if (s == "equal_time") return PairMode::equal_time;
  if (s == "equal_state") return PairMode::equal_state;
  throw std::invalid_argument("unknown pair mode '" + s + "'");
}

double LipschitzEstimate::quantile(double q) const {
  if (ratios.empty()) return 0.0;
  std::vector<double> s = ratios;
  std::sort(s.begin(), s.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

LipschitzEstimate estimate_lipschitz(const std::vector<Chain>& chains, const LipschitzOptions& opt,
                                     const PointField& field) {
  if (chains.empty()) throw std::invalid_argument("estimate_lipschitz: empty eval set");
  if (opt.n_pairs < 100) throw std::invalid_argument("estimate_lipschitz: need at least 100 pairs");
  if (opt.mode == PairMode::equal_state && !field)
    throw std::invalid_argument("estimate_lipschitz: equal-state pairs need a field");
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t c = 0; c < chains.size(); ++c) {
    const auto& ch = chains[c];
    if (ch.t.empty() || ch.x.size() != ch.t.size() || ch.v.size() != ch.t.size())
      throw std::invalid_argument("estimate_lipschitz: malformed chain");
    groups[ch.group].push_back(c);
  }
  std::vector<std::size_t> long_chains, multi;
  for (std::size_t c = 0; c < chains.size(); ++c) {
    if (chains[c].t.size() >= 2) long_chains.push_back(c);
    if (groups[chains[c].group].size() >= 2) multi.push_back(c);
  }
  const bool needs_adjacent = opt.mode == PairMode::mixed || opt.mode == PairMode::equal_state;
  if (needs_adjacent && long_chains.empty())
    throw std::invalid_argument("estimate_lipschitz: no chain has two states");
  if (opt.mode == PairMode::equal_time && multi.empty())
    throw std::invalid_argument("estimate_lipschitz: equal-time pairs need two chains per group");

  LipschitzEstimate e;
  e.mode = opt.mode;
  e.n_pairs = opt.n_pairs;
  e.ratios.reserve(opt.n_pairs);
  const Rng base(opt.seed, 0x6c6970ULL);
  for (std::size_t i = 0; i < opt.n_pairs; ++i) {
    Rng r = base.split(i);
    double num = 0, den = 0;
    bool adjacent = false;
    if (opt.mode == PairMode::equal_state) {
      const auto& ch = chains[long_chains[r.below(long_chains.size())]];
      const std::size_t k1 = r.below(ch.t.size());
      std::size_t k2 = r.below(ch.t.size() - 1);
      if (k2 >= k1) ++k2;
      num = dist(field(ch.group, ch.x[k1], ch.t[k1]), field(ch.group, ch.x[k1], ch.t[k2]));
      den = std::abs(ch.t[k1] - ch.t[k2]);
    } else if (opt.mode == PairMode::equal_time) {
      const std::size_t c1 = multi[r.below(multi.size())];
      const auto& members = groups[chains[c1].group];
      std::size_t j = r.below(members.size() - 1);
      const std::size_t c2 = members[j] == c1 ? members.back() : members[j];
      const auto& a = chains[c1];
      const auto& b = chains[c2];
      const std::size_t k = r.below(std::min(a.t.size(), b.t.size()));
      num = dist(a.v[k], b.v[k]);
      den = dist(a.x[k], b.x[k]) + std::abs(a.t[k] - b.t[k]);
    } else if (i % 2 == 0) {
      adjacent = true;
      const auto& ch = chains[long_chains[r.below(long_chains.size())]];
      const std::size_t k = r.below(ch.t.size() - 1);
      num = dist(ch.v[k], ch.v[k + 1]);
      den = dist(ch.x[k], ch.x[k + 1]) + std::abs(ch.t[k] - ch.t[k + 1]);
    } else {
      const std::size_t c1 = r.below(chains.size());
      const auto& members = groups[chains[c1].group];
      const std::size_t k1 = r.below(chains[c1].t.size());
      std::size_t c2 = c1, k2 = k1;
      for (int tries = 0; tries < 64 && c2 == c1 && k2 == k1; ++tries) {
        c2 = members[r.below(members.size())];
        k2 = r.below(chains[c2].t.size());
      }
      if (c2 == c1 && k2 == k1) throw std::invalid_argument("estimate_lipschitz: a field has a single state");
      const auto& a = chains[c1];
      const auto& b = chains[c2];
      num = dist(a.v[k1], b.v[k2]);
      den = dist(a.x[k1], b.x[k2]) + std::abs(a.t[k1] - b.t[k2]);
    }
    const double ratio = num / std::max(den, opt.floor);
    if (!std::isfinite(ratio)) throw NumericError("estimate_lipschitz: non-finite ratio at pair " + std::to_string(i));
    e.ratios.push_back(ratio);
    e.adjacent.push_back(adjacent ? 1 : 0);
    (adjacent ? e.adjacent_pairs : e.random_pairs) += 1;
    e.l_hat = std::max(e.l_hat, ratio);
  }
  return e;
}

nlohmann::json to_json(const LipschitzEstimate& e, bool with_ratios) {
  nlohmann::json j = {{"l_hat", e.l_hat},
                      {"n_pairs", e.n_pairs},
                      {"mode", to_string(e.mode)},
                      {"adjacent_pairs", e.adjacent_pairs},
                      {"random_pairs", e.random_pairs},
                      {"quantiles",
                       {{"p50", e.quantile(0.5)}, {"p90", e.quantile(0.9)}, {"p99", e.quantile(0.99)}}}};
  if (with_ratios) j["ratios"] = e.ratios;
  return j;
}

template <typename T>
std::vector<Chain> model_chains(const model::ToyDiTParams<T>& params, const data::Dataset& eval,
                                const ChainOptions& opt) {
  if (eval.items.empty()) throw std::invalid_argument("model_chains: empty eval set");
  if (opt.tasks.empty() || opt.trajectories_per_item == 0 || opt.batch == 0)
    throw std::invalid_argument("model_chains: need tasks, trajectories and a batch size");
  const std::size_t n = std::min(opt.items, eval.items.size());
  const auto& mc = params.config;
  const Shape image{mc.channels, mc.image_size, mc.image_size};
  std::vector<Chain> out;
  for (std::size_t ti = 0; ti < opt.tasks.size(); ++ti) {
    std::vector<std::size_t> rows_item;
    std::vector<std::uint64_t> keys;
    for (std::size_t i = ti; i < n; i += opt.tasks.size())
      for (std::size_t r = 0; r < opt.trajectories_per_item; ++r) {
        rows_item.push_back(i);
        keys.push_back(i * opt.trajectories_per_item + r);
      }
    for (std::size_t start = 0; start < rows_item.size(); start += opt.batch) {
      const std::size_t end = std::min(rows_item.size(), start + opt.batch);
      const std::vector<std::size_t> items(rows_item.begin() + start, rows_item.begin() + end);
      const std::vector<std::uint64_t> k(keys.begin() + start, keys.begin() + end);
      const auto b = task_batch<T>(eval, items, opt.tasks[ti]);
      sampler::Trajectory<T> traj;
      sampler::integrate<T>(batch_field<T>(params, b, opt.guidance),
                            row_noise<T>(image, items.size(), opt.seed, 0x636861696eULL, k), opt.steps, &traj);
      for (std::size_t r = 0; r < items.size(); ++r) {
        Chain c;
        c.group = items[r];
        for (std::size_t s = 0; s < opt.steps; ++s) {
          c.t.push_back(traj.t[s]);
          c.x.push_back(row(traj.x[s], r));
          c.v.push_back(row(traj.v[s], r));
        }
        out.push_back(std::move(c));
      }
    }
  }
  return out;
}

template <typename T>
PointField model_point_field(const model::ToyDiTParams<T>& params, const data::Dataset& eval,
                             const ChainOptions& opt) {
  const auto& mc = params.config;
  const Shape shape{1, mc.channels, mc.image_size, mc.image_size};
  return [&params, &eval, opt, shape](std::size_t group, const std::vector<double>& x, double t) {
    const auto b = task_batch<T>(eval, {group}, opt.tasks[group % opt.tasks.size()]);
    Tensor<T> xt(shape);
    for (std::size_t i = 0; i < x.size(); ++i) xt[i] = static_cast<T>(x[i]);
    return row(batch_field<T>(params, b, opt.guidance)(xt, t), 0);
  };
}

nlohmann::json to_json(const SmoothnessReport& r) {
  return {{"k", r.k},
          {"dt", r.dt},
          {"n_samples", r.n_samples},
          {"reduction", "mean over pixels per sample"},
          {"r_smooth", r.r_smooth},
          {"r_smooth_se", r.r_smooth_se},
          {"l_mtp", r.l_mtp},
          {"l_mtp_se", r.l_mtp_se},
          {"l_ssp", r.l_ssp},
          {"l_ssp_se", r.l_ssp_se},
          {"slack", r.slack},
          {"pairs_checked", r.pairs_checked},
          {"violations", r.violations},
          {"no_adjacent_pairs", r.no_adjacent_pairs}};
}

template <typename T>
SmoothnessReport measure_smoothness(const SampleSource<T>& source, std::size_t batches, std::size_t k, double dt) {
  if (k == 0) throw std::invalid_argument("measure_smoothness: K must be >= 1");
  SmoothnessReport rep;
  rep.k = k;
  rep.dt = dt;
  rep.no_adjacent_pairs = k == 1;
  MeanSe rs, lm;
  std::vector<MeanSe> ls(k);
  for (std::size_t bi = 0; bi < batches; ++bi) {
    auto [v, s] = source(bi);
    ad::NoGradGuard guard;
    const auto mtp = objective::mtp_loss<T>(v, s, k, dt);
    const auto u = s.target();
    std::vector<Tensor<T>> vel;
    for (const auto& x : mtp.velocities) vel.push_back(x.value());
    const std::size_t b = s.batch(), per = u.numel() / b;
    for (std::size_t r = 0; r < b; ++r) {
      double smooth = 0, mtp_row = 0;
      for (std::size_t j = 0; j < k; ++j) {
        double e = 0, d = 0;
        for (std::size_t i = r * per; i < (r + 1) * per; ++i) {
          const double a = static_cast<double>(vel[j][i]) - static_cast<double>(u[i]);
          e += a * a;
          if (j + 1 < k) {
            const double c = static_cast<double>(vel[j + 1][i]) - static_cast<double>(vel[j][i]);
            d += c * c;
          }
        }
        e /= static_cast<double>(per);
        ls[j].add(e);
        mtp_row += e;
        smooth += d / static_cast<double>(per);
      }
      rs.add(smooth);
      lm.add(mtp_row / static_cast<double>(k));
    }
    for (const auto& p : objective::smoothness_pairs<T>(vel, u)) {
      ++rep.pairs_checked;
      if (!p.holds()) ++rep.violations;
    }
    rep.n_samples += b;
  }
  rep.r_smooth = rs.mean();
  rep.r_smooth_se = rs.se();
  rep.l_mtp = lm.mean();
  rep.l_mtp_se = lm.se();
  double mean_ssp = 0;
  for (const auto& x : ls) {
    rep.l_ssp.push_back(x.mean());
    rep.l_ssp_se.push_back(x.se());
    mean_ssp += x.mean();
  }
  rep.slack = rep.l_mtp - mean_ssp / static_cast<double>(k);
  return rep;
}

template <typename T>
SmoothnessReport measure_smoothness(const model::ToyDiTParams<T>& params, const data::Dataset& eval, std::size_t k,
                                    double dt, std::size_t n_samples, std::uint64_t seed, std::size_t batch) {
  if (eval.items.empty()) throw std::invalid_argument("measure_smoothness: empty eval set");
  if (batch == 0 || n_samples == 0) throw std::invalid_argument("measure_smoothness: need samples and a batch size");
  const data::Task tasks[] = {data::Task::model_based, data::Task::model_free, data::Task::tryoff};
  const std::size_t batches = (n_samples + batch - 1) / batch;
  const SampleSource<T> source = [&](std::size_t bi) {
    const std::size_t rows = std::min(batch, n_samples - bi * batch);
    std::vector<std::size_t> items;
    for (std::size_t r = 0; r < rows; ++r) items.push_back((bi * batch + r) % eval.items.size());
    auto b = task_batch<T>(eval, items, tasks[bi % 3]);
    Rng rng = Rng(seed, 0x736d6f6f7468ULL).split(bi);
    objective::FlowSample<T> s;
    s.t = objective::sample_times(rng, rows, k, dt);
    s.x1 = Tensor<T>(b.target.shape());
    for (auto& x : s.x1.span()) x = static_cast<T>(rng.normal());
    s.x0 = std::move(b.target);
    std::vector<ad::Var<T>> conds;
    for (auto& c : b.conditions) conds.push_back(ad::Var<T>::constant(std::move(c)));
    return std::make_pair(objective::model_velocity<T>(params, std::move(conds), std::move(b.text_ids)), std::move(s));
  };
  return measure_smoothness<T>(source, batches, k, dt);
}

nlohmann::json to_json(const ErrorCurve& c) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : c.points) {
    nlohmann::json j = {{"dt", p.dt}, {"error", p.error}};
    if (p.error_vs_data >= 0) j["error_vs_data"] = p.error_vs_data;
    pts.push_back(j);
  }
  nlohmann::json j = {{"points", pts}, {"reference", c.reference}, {"inversions", c.inversions}};
  if (c.exact) j["slope"] = "exact";
  else if (c.slope) j["slope"] = *c.slope;
  if (c.intercept) j["intercept_log"] = *c.intercept;
  if (c.l_hat >= 0) j["l_hat"] = c.l_hat;
  return j;
}

void fit(ErrorCurve& c) {
  c.exact = std::all_of(c.points.begin(), c.points.end(), [](const ErrorPoint& p) { return p.error < 1e-10; });
  c.inversions = 0;
  for (std::size_t i = 1; i < c.points.size(); ++i)
    if (c.points[i].error > c.points[i - 1].error) ++c.inversions;
  c.slope.reset();
  c.intercept.reset();
  if (c.exact) return;
  double sx = 0, sy = 0, sxx = 0, sxy = 0, n = 0;
  for (const auto& p : c.points) {
    if (!(p.error > 0)) continue;
    const double x = std::log(p.dt), y = std::log(p.error);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    n += 1;
  }
  if (n < 2) return;
  const double denom = n * sxx - sx * sx;
  if (denom == 0) return;
  c.slope = (n * sxy - sx * sy) / denom;
  c.intercept = (sy - *c.slope * sx) / n;
}

std::vector<double> check_dts(std::span<const double> dts) {
  if (dts.size() < 4) throw std::invalid_argument("error_vs_dt: need at least 4 step sizes");
  std::vector<double> d(dts.begin(), dts.end());
  for (double x : d) sampler::steps_for_dt(x);
  std::sort(d.begin(), d.end(), std::greater<>());
  if (std::adjacent_find(d.begin(), d.end()) != d.end()) throw std::invalid_argument("error_vs_dt: repeated dt");
  if (d.front() < 8.0 * d.back() * (1 - 1e-12)) throw std::invalid_argument("error_vs_dt: dts must span at least 8x");
  return d;
}

namespace {
template <typename T>
double mean_row_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("error_vs_dt: shape mismatch");
  const std::size_t rows = a.rank() == 0 ? 1 : a.dim(0), per = a.numel() / rows;
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r)
    total += l2_distance<T>(a.span().subspan(r * per, per), b.span().subspan(r * per, per));
  return total / static_cast<double>(rows);
}
}  // namespace

template <typename T>
ErrorCurve error_vs_dt(const sampler::Field<T>& v, const Tensor<T>& x1, std::span<const double> dts,
                       const Tensor<T>& truth) {
  ErrorCurve c;
  c.reference = "ground_truth";
  for (double dt : check_dts(dts)) {
    const auto x0 = sampler::integrate<T>(v, x1, sampler::steps_for_dt(dt));
    const double e = mean_row_distance(x0, truth);
    c.points.push_back({dt, e, e});
  }
  fit(c);
  return c;
}

template <typename T>
ErrorCurve error_vs_dt_self(const sampler::Field<T>& v, const Tensor<T>& x1, std::span<const double> dts,
                            double ref_dt, const Tensor<T>* data) {
  const auto grid = check_dts(dts);
  const std::size_t n_ref = sampler::steps_for_dt(ref_dt);
  if (ref_dt >= grid.back()) throw std::invalid_argument("error_vs_dt: reference dt must be below every dt");
  const auto coarse = sampler::integrate<T>(v, x1, n_ref);
  const auto fine = sampler::integrate<T>(v, x1, 2 * n_ref);
  Tensor<T> ref(fine.shape());
  for (std::size_t i = 0; i < ref.numel(); ++i)
    ref[i] = static_cast<T>(2.0 * static_cast<double>(fine[i]) - static_cast<double>(coarse[i]));
  ErrorCurve c;
  c.reference = "richardson";
  for (double dt : grid) {
    const auto x0 = sampler::integrate<T>(v, x1, sampler::steps_for_dt(dt));
    c.points.push_back({dt, mean_row_distance(x0, ref), data ? mean_row_distance(x0, *data) : -1.0});
  }
  fit(c);
  return c;
}

template <typename T>
ErrorCurve model_error_vs_dt(const model::ToyDiTParams<T>& params, const data::Dataset& eval,
                             std::span<const double> dts, const ErrDtOptions& opt) {
  if (eval.items.empty()) throw std::invalid_argument("error_vs_dt: empty eval set");
  const std::size_t n = std::min(opt.items, eval.items.size());
  std::vector<std::size_t> items(n);
  std::iota(items.begin(), items.end(), std::size_t{0});
  const auto b = task_batch<T>(eval, items, opt.task);
  const auto& mc = params.config;
  std::vector<std::uint64_t> keys(items.begin(), items.end());
  const auto x1 = row_noise<T>({mc.channels, mc.image_size, mc.image_size}, n, opt.seed, 0x6572726474ULL, keys);
  return error_vs_dt_self<T>(batch_field<T>(params, b, opt.guidance), x1, dts, opt.ref_dt, &b.target);
}

void CompareConfig::validate() const {
  if (seeds.size() < 3) throw std::invalid_argument("compare: need at least 3 seeds");
  if (k_ssp == 0 || k_mtp == 0) throw std::invalid_argument("compare: K must be >= 1");
  if (eval_size == 0) throw std::invalid_argument("compare: empty eval set");
  if (lipschitz.n_pairs < 100) throw std::invalid_argument("compare: need at least 100 pairs");
  if (!dts.empty()) check_dts(dts);
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

nlohmann::json to_json(const ComparisonReport& r) {
  auto arm = [](const ArmResult& a) {
    nlohmann::json j = {{"k", a.k}, {"diverged", a.diverged}, {"l_hat", a.l_hat}, {"final_loss", a.final_loss}};
    if (a.curve) j["error_curve"] = to_json(*a.curve);
    return j;
  };
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : r.seeds) seeds.push_back({{"seed", s.seed}, {"ssp", arm(s.ssp)}, {"mtp", arm(s.mtp)}});
  return {{"seeds", seeds},
          {"median_l_hat_ssp", r.median_ssp},
          {"median_l_hat_mtp", r.median_mtp},
          {"verdict", {{"mtp_lower", r.verdict}, {"median_ssp", r.median_ssp}, {"median_mtp", r.median_mtp}}},
          {"excluded_seeds", r.excluded}};
}

std::string to_csv(const ComparisonReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "seed,k_ssp,l_hat_ssp,k_mtp,l_hat_mtp,diverged\n";
  for (const auto& s : r.seeds)
    os << s.seed << ',' << s.ssp.k << ',' << s.ssp.l_hat << ',' << s.mtp.k << ',' << s.mtp.l_hat << ','
       << (s.excluded() ? 1 : 0) << '\n';
  return os.str();
}

template <typename T>
ComparisonReport compare_ssp_mtp(const CompareConfig& cfg, const std::function<void(const std::string&)>& progress) {
  cfg.validate();
  const auto train_data = trainer::training_data(cfg.base);
  const auto eval = data::generate_eval(cfg.eval_seed, cfg.eval_size, cfg.base.model.image_size);
  ComparisonReport rep;
  std::vector<double> ssp, mtp;
  for (auto seed : cfg.seeds) {
    SeedResult sr;
    sr.seed = seed;
    for (ArmResult* arm : {&sr.ssp, &sr.mtp}) {
      arm->k = arm == &sr.ssp ? cfg.k_ssp : cfg.k_mtp;
      auto tc = cfg.base;
      tc.seed = seed;
      tc.loss.k = arm->k;
      if (progress) progress("seed " + std::to_string(seed) + " K=" + std::to_string(arm->k));
      try {
        auto res = trainer::train<T>(trainer::init_state<T>(tc), train_data);
        double tail = 0;
        const std::size_t m = std::min<std::size_t>(50, res.metrics.size());
        for (std::size_t i = res.metrics.size() - m; i < res.metrics.size(); ++i) tail += res.metrics[i].total;
        arm->final_loss = m ? tail / static_cast<double>(m) : 0.0;
        auto chains = model_chains<T>(res.state.params, eval, cfg.chains);
        arm->l_hat = estimate_lipschitz(chains, cfg.lipschitz).l_hat;
        if (!cfg.dts.empty()) {
          arm->curve = model_error_vs_dt<T>(res.state.params, eval, cfg.dts, cfg.errdt);
          arm->curve->l_hat = arm->l_hat;
        }
      } catch (const trainer::TrainingDiverged& e) {
        log::warn(std::string("compare: seed excluded, ") + e.what());
        arm->diverged = true;
      }
    }
    if (sr.excluded()) {
      rep.excluded.push_back(seed);
    } else {
      ssp.push_back(sr.ssp.l_hat);
      mtp.push_back(sr.mtp.l_hat);
    }
    rep.seeds.push_back(std::move(sr));
  }
  rep.median_ssp = median(ssp);
  rep.median_mtp = median(mtp);
  rep.verdict = !ssp.empty() && rep.median_mtp < rep.median_ssp;
  return rep;
}

std::string svg_line_plot(const std::string& title, const std::vector<Series>& series, bool log_x, bool log_y,
                          const std::string& x_label, const std::string& y_label) {
  const double w = 640, h = 400, ml = 70, mr = 150, mt = 40, mb = 50;
  auto tx = [&](double x) { return log_x ? std::log10(x) : x; };
  auto ty = [&](double y) { return log_y ? std::log10(y) : y; };
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if ((log_x && !(s.x[i] > 0)) || (log_y && !(s.y[i] > 0))) continue;
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      y0 = std::min(y0, ty(s.y[i]));
      y1 = std::max(y1, ty(s.y[i]));
    }
  if (!(x0 <= x1)) x0 = 0, x1 = 1;
  if (!(y0 <= y1)) y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return ml + (tx(x) - x0) / (x1 - x0) * (w - ml - mr); };
  auto py = [&](double y) { return h - mb - (ty(y) - y0) / (y1 - y0) * (h - mt - mb); };
  auto unaxis = [](double v, bool lg) { return lg ? std::pow(10.0, v) : v; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n"
     << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << ml << "\" y=\"" << h - mb + 16 << "\">" << fmt(unaxis(x0, log_x)) << "</text>\n"
     << "<text x=\"" << w - mr << "\" y=\"" << h - mb + 16 << "\" text-anchor=\"end\">" << fmt(unaxis(x1, log_x))
     << "</text>\n"
     << "<text x=\"" << ml - 4 << "\" y=\"" << h - mb << "\" text-anchor=\"end\">" << fmt(unaxis(y0, log_y))
     << "</text>\n"
     << "<text x=\"" << ml - 4 << "\" y=\"" << mt + 4 << "\" text-anchor=\"end\">" << fmt(unaxis(y1, log_y))
     << "</text>\n"
     << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\">" << x_label
     << (log_x ? " (log)" : "") << "</text>\n"
     << "<text x=\"16\" y=\"" << (mt + h - mb) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (mt + h - mb) / 2 << ")\">" << y_label << (log_y ? " (log)" : "") << "</text>\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* col = kPalette[si % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if ((log_x && !(s.x[i] > 0)) || (log_y && !(s.y[i] > 0))) continue;
      os << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    }
    os << "\"/>\n";
    os << "<text x=\"" << w - mr + 10 << "\" y=\"" << mt + 16 * (si + 1) << "\" fill=\"" << col << "\">" << s.name
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string svg_cdf_plot(const std::string& title, const std::vector<Series>& samples, const std::string& x_label) {
  std::vector<Series> cdfs;
  for (const auto& s : samples) {
    Series c;
    c.name = s.name;
    c.x = s.y;
    std::sort(c.x.begin(), c.x.end());
    for (std::size_t i = 0; i < c.x.size(); ++i) c.y.push_back(static_cast<double>(i + 1) / c.x.size());
    cdfs.push_back(std::move(c));
  }
  return svg_line_plot(title, cdfs, false, false, x_label, "fraction of pairs");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

#define OMNIDIT_ANALYSIS_INSTANTIATE(T)                                                                          \
  template std::vector<Chain> model_chains<T>(const model::ToyDiTParams<T>&, const data::Dataset&,              \
                                              const ChainOptions&);                                             \
  template PointField model_point_field<T>(const model::ToyDiTParams<T>&, const data::Dataset&,                 \
                                           const ChainOptions&);                                                \
  template SmoothnessReport measure_smoothness<T>(const SampleSource<T>&, std::size_t, std::size_t, double);    \
  template SmoothnessReport measure_smoothness<T>(const model::ToyDiTParams<T>&, const data::Dataset&,           \
                                                  std::size_t, double, std::size_t, std::uint64_t, std::size_t); \
  template ErrorCurve error_vs_dt<T>(const sampler::Field<T>&, const Tensor<T>&, std::span<const double>,       \
                                     const Tensor<T>&);                                                         \
  template ErrorCurve error_vs_dt_self<T>(const sampler::Field<T>&, const Tensor<T>&, std::span<const double>,  \
                                          double, const Tensor<T>*);                                            \
  template ErrorCurve model_error_vs_dt<T>(const model::ToyDiTParams<T>&, const data::Dataset&,                 \
                                           std::span<const double>, const ErrDtOptions&);                       \
  template ComparisonReport compare_ssp_mtp<T>(const CompareConfig&, const std::function<void(const std::string&)>&);

OMNIDIT_ANALYSIS_INSTANTIATE(float)
OMNIDIT_ANALYSIS_INSTANTIATE(double)

}  // namespace omnidit::analysis
