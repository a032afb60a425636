#pragma once

// Empirical checks of the smoothness and integration-error behaviour of a
// learned velocity field: Lipschitz estimates from trajectory state pairs,
// the multi-step smoothness regularizer, Euler error scaling, and paired
// single-step vs multi-step trainings.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnidit/data.hpp"
#include "omnidit/objective.hpp"
#include "omnidit/sampler.hpp"
#include "omnidit/trainer.hpp"

namespace omnidit::analysis {

// ---------------------------------------------------------------- Lipschitz

/// States and velocities along one trajectory of one conditional field.
/// Chains sharing `group` come from the same field (same conditions).
struct Chain {
  std::size_t group = 0;
  std::vector<double> t;                  // time of each recorded state
  std::vector<std::vector<double>> x, v;  // state and velocity at t[k]
};

enum class PairMode {
  mixed,       // trajectory-adjacent and random same-field pairs, alternating
  equal_time,  // two chains of one group at the same step
  equal_state  // one state at two different times (needs a field)
};

std::string to_string(PairMode m);
PairMode pair_mode_from_string(const std::string& s);

/// v(x, t) for the field of `group`, used by PairMode::equal_state.
using PointField = std::function<std::vector<double>(std::size_t group, const std::vector<double>& x, double t)>;

struct LipschitzOptions {
  std::size_t n_pairs = 10000;
  std::uint64_t seed = 0;
  PairMode mode = PairMode::mixed;
  double floor = 1e-8;  // denominator floor
};

struct LipschitzEstimate {
  double l_hat = 0;
  std::size_t n_pairs = 0;
  PairMode mode = PairMode::mixed;
  std::size_t adjacent_pairs = 0, random_pairs = 0;
  std::vector<double> ratios;        // in sampling order
  std::vector<std::uint8_t> adjacent;  // 1 where the pair was trajectory-adjacent

  double quantile(double q) const;
};

/// Pair i is drawn from its own generator stream, so the first n pairs of a
/// larger request are exactly the pairs of a request for n.
LipschitzEstimate estimate_lipschitz(const std::vector<Chain>& chains, const LipschitzOptions& options,
                                     const PointField& field = {});

nlohmann::json to_json(const LipschitzEstimate& e, bool with_ratios = false);

struct ChainOptions {
  std::size_t items = 16;                 // eval items used
  std::size_t trajectories_per_item = 2;  // noise draws per item
  std::size_t steps = 30;
  double guidance = 1.0;                  // 1: the conditional field itself
  std::uint64_t seed = 0;
  std::size_t batch = 32;
  std::vector<data::Task> tasks = {data::Task::model_based, data::Task::model_free, data::Task::tryoff};
};

/// Sampled trajectories of a model on eval items, item i using task
/// tasks[i % tasks.size()]; every trajectory of an item shares its group.
template <typename T>
std::vector<Chain> model_chains(const model::ToyDiTParams<T>& params, const data::Dataset& eval,
                                const ChainOptions& options);

/// Chains of the model plus the matching per-group field.
template <typename T>
PointField model_point_field(const model::ToyDiTParams<T>& params, const data::Dataset& eval,
                             const ChainOptions& options);

// --------------------------------------------------------------- smoothness

struct SmoothnessReport {
  std::size_t k = 0;
  double dt = 0;
  std::size_t n_samples = 0;
  double r_smooth = 0, r_smooth_se = 0;      // mean over samples of sum_k mean-square |v_{k+1} - v_k|
  double l_mtp = 0, l_mtp_se = 0;
  std::vector<double> l_ssp, l_ssp_se;       // per step k
  double slack = 0;                          // l_mtp - mean_k l_ssp(t_k)
  std::size_t pairs_checked = 0, violations = 0;
  bool no_adjacent_pairs = false;            // K == 1
};

nlohmann::json to_json(const SmoothnessReport& r);

/// One batch of (velocity, flow sample) per index.
template <typename T>
using SampleSource = std::function<std::pair<objective::VelocityFn<T>, objective::FlowSample<T>>(std::size_t index)>;

template <typename T>
SmoothnessReport measure_smoothness(const SampleSource<T>& source, std::size_t batches, std::size_t k, double dt);

/// Samples eval items with rotating tasks, fresh noise and t drawn as in
/// training; n_samples rows in total.
template <typename T>
SmoothnessReport measure_smoothness(const model::ToyDiTParams<T>& params, const data::Dataset& eval, std::size_t k,
                                    double dt, std::size_t n_samples, std::uint64_t seed, std::size_t batch = 16);

// ------------------------------------------------------------ error vs dt

struct ErrorPoint {
  double dt = 0;
  double error = 0;           // mean |x0(dt) - reference| over rows
  double error_vs_data = -1;  // mean |x0(dt) - x0_true|, -1 when unknown
};

struct ErrorCurve {
  std::vector<ErrorPoint> points;  // dt strictly decreasing
  std::string reference;           // "ground_truth" or "richardson"
  bool exact = false;              // every error below 1e-10
  std::optional<double> slope, intercept;  // least squares of log error on log dt
  std::size_t inversions = 0;      // error increasing as dt shrinks
  double l_hat = -1;               // filled by callers that have one
};

nlohmann::json to_json(const ErrorCurve& c);

/// Least-squares fit on the given points; sets exact/slope/inversions.
void fit(ErrorCurve& c);

/// Validates dts: at least 4 values of the form 1/N spanning at least 8x.
/// Returns them sorted strictly decreasing.
std::vector<double> check_dts(std::span<const double> dts);

/// Euler error of every dt against `truth` (rows of [B, ...]).
template <typename T>
ErrorCurve error_vs_dt(const sampler::Field<T>& v, const Tensor<T>& x1, std::span<const double> dts,
                       const Tensor<T>& truth);

/// Same, against the extrapolated reference 2 x(h/2) - x(h) with h = ref_dt;
/// `data` (optional) adds the distance to the data each row was paired with.
template <typename T>
ErrorCurve error_vs_dt_self(const sampler::Field<T>& v, const Tensor<T>& x1, std::span<const double> dts,
                            double ref_dt = 1.0 / 256, const Tensor<T>* data = nullptr);

struct ErrDtOptions {
  std::size_t items = 8;
  data::Task task = data::Task::model_based;
  double guidance = 1.0;
  std::uint64_t seed = 0;
  double ref_dt = 1.0 / 256;
};

template <typename T>
ErrorCurve model_error_vs_dt(const model::ToyDiTParams<T>& params, const data::Dataset& eval,
                             std::span<const double> dts, const ErrDtOptions& options);

// ---------------------------------------------------------------- compare

struct CompareConfig {
  trainer::TrainConfig base;
  std::vector<std::uint64_t> seeds;
  std::size_t k_ssp = 1, k_mtp = 2;
  std::size_t eval_size = 16;
  std::uint64_t eval_seed = 0;
  ChainOptions chains;
  LipschitzOptions lipschitz;
  std::vector<double> dts;  // empty: no error curves
  ErrDtOptions errdt;

  void validate() const;
};

struct ArmResult {
  std::size_t k = 0;
  bool diverged = false;
  double l_hat = 0;
  double final_loss = 0;
  std::optional<ErrorCurve> curve;
};

struct SeedResult {
  std::uint64_t seed = 0;
  ArmResult ssp, mtp;
  bool excluded() const { return ssp.diverged || mtp.diverged; }
};

struct ComparisonReport {
  std::vector<SeedResult> seeds;
  double median_ssp = 0, median_mtp = 0;
  bool verdict = false;  // median_mtp < median_ssp
  std::vector<std::uint64_t> excluded;
};

nlohmann::json to_json(const ComparisonReport& r);
std::string to_csv(const ComparisonReport& r);

double median(std::vector<double> v);

/// Trains both arms per seed (sequentially, deterministic) and compares
/// the Lipschitz estimates of the resulting fields.
template <typename T>
ComparisonReport compare_ssp_mtp(const CompareConfig& cfg, const std::function<void(const std::string&)>& progress = {});

// ------------------------------------------------------------------- plots

struct Series {
  std::string name;
  std::vector<double> x, y;
};

/// Minimal SVG line chart; log axes take log10 of positive values.
std::string svg_line_plot(const std::string& title, const std::vector<Series>& series, bool log_x, bool log_y,
                          const std::string& x_label, const std::string& y_label);

/// Empirical CDFs of several samples.
std::string svg_cdf_plot(const std::string& title, const std::vector<Series>& samples, const std::string& x_label);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace omnidit::analysis
