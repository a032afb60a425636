#pragma once

// Two-stage training loop, AdamW, checkpoints and evaluation.
//
// Everything a step consumes (batch plan, condition dropout, times, noise)
// is drawn from a generator keyed by (seed, step), so the state after step s
// is a pure function of the state before it. Resuming from a checkpoint
// therefore replays the uninterrupted run exactly.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnidit/data.hpp"
#include "omnidit/model.hpp"
#include "omnidit/objective.hpp"
#include "omnidit/sampler.hpp"

namespace omnidit::trainer {

struct StageConfig {
  int stage = 1;  // 1: single-condition tasks only; 2: all tasks
  std::size_t steps = 0;
  std::vector<data::Task> tasks;  // empty: every task legal in the stage
  std::size_t batch = 8;
  double lr = 1e-3;
};

struct AdamWConfig {
  double beta1 = 0.9, beta2 = 0.999, weight_decay = 0.01, eps = 1e-8;
};

struct TrainConfig {
  model::ModelConfig model;
  std::vector<StageConfig> stages = {{1, 200, {}, 8, 1e-3}, {2, 200, {}, 8, 1e-3}};
  objective::LossOptions loss;  // K, dt, lambda
  double cfg_dropout = 0.1;
  std::uint64_t seed = 0;         // init, batches, noise
  std::uint64_t data_seed = 0;    // training triplets
  std::size_t dataset_size = 512;
  std::size_t ratio_single = 1, ratio_pair = 1;
  AdamWConfig adamw;
  double clip = 1.0;
  std::uint64_t extractor_seed = 0x616c69676eULL;
  std::size_t checkpoint_every = 0;  // 0: only at the end

  void validate() const;
  std::size_t total_steps() const;
  /// (stage index into `stages`, step within that stage) for a global step.
  std::pair<std::size_t, std::size_t> locate(std::size_t step) const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
/// Hex FNV-1a of the canonical JSON.
std::string config_hash(const TrainConfig& c);

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;  // per parameter, in ToyDiTParams::named() order
  std::size_t t = 0;
};

template <typename T>
struct TrainState {
  TrainConfig config;
  model::ToyDiTParams<T> params;
  AdamState<T> opt;
  std::size_t step = 0;  // updates applied so far
};

template <typename T>
TrainState<T> init_state(const TrainConfig& cfg);

struct MetricsRow {
  std::size_t step = 0;
  double l_ssp = 0, l_mtp = 0, l_align = 0, total = 0, grad_norm = 0, lr = 0;
  int stage = 1;
};

inline constexpr const char* kMetricsHeader = "step,l_mtp,l_align,total,grad_norm,lr,stage";
std::string metrics_line(const MetricsRow& r);

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, const std::string& what) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct TrainOptions {
  std::filesystem::path out;  // empty: no files
  std::size_t stop_at = std::numeric_limits<std::size_t>::max();  // halt once step reaches this
  std::function<void(const MetricsRow&)> on_step;
};

template <typename T>
struct TrainResult {
  TrainState<T> state;
  std::vector<MetricsRow> metrics;
  bool finished = false;  // reached total_steps
};

/// One optimizer step on the given state; returns its metrics row. Throws
/// TrainingDiverged (state untouched) on a non-finite loss or gradient.
template <typename T>
MetricsRow train_step(TrainState<T>& state, const data::Dataset& dataset,
                      const objective::FeatureExtractor<T>& extractor);

/// Runs from state.step to the end (or stop_at). With `out` set, writes
/// metrics.csv (appending on resume) and checkpoint/ periodically; on
/// divergence the last good checkpoint is written before rethrowing.
template <typename T>
TrainResult<T> train(TrainState<T> state, const data::Dataset& dataset, const TrainOptions& options = {});

/// Training dataset implied by the config.
data::Dataset training_data(const TrainConfig& cfg);

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const TrainState<T>& state);
/// Reads either dtype; values convert to T.
template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& dir);

struct GradClip {
  double norm = 0;     // before clipping
  bool clipped = false;
};

/// Scales gradients in place by clip / (norm + 1e-6) when norm > clip.
template <typename T>
GradClip clip_gradients(const std::vector<ad::Var<T>>& params, double clip);

/// Decoupled-weight-decay Adam update of every parameter.
template <typename T>
void adamw_update(const std::vector<ad::Var<T>>& params, AdamState<T>& state, const AdamWConfig& cfg, double lr);

struct TaskMetrics {
  std::size_t count = 0;
  double masked_mse = 0, masked_cosine = 0, full_mse = 0;
  friend bool operator==(const TaskMetrics&, const TaskMetrics&) = default;
};

struct EvalReport {
  std::map<std::string, TaskMetrics> tasks;
  double tryoff_garment_mse = 0;
  std::size_t steps = 0;
  double guidance = 0;
  std::uint64_t seed = 0;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

struct EvalOptions {
  std::size_t per_task = 16;
  std::size_t batch = 16;
  std::vector<data::Task> tasks = {data::Task::model_based, data::Task::model_free, data::Task::tryoff};
  sampler::SampleConfig sample;  // 30 steps, guidance 4 by default
};

/// Images [B, 3, S, S] for a batch of task instances.
using Generator = std::function<Tensor<double>(const data::TaskBatch<double>& batch, std::uint64_t seed)>;

/// Scores `generate` on the first per_task eval items for every task.
EvalReport evaluate_with(const Generator& generate, const data::Dataset& eval, const EvalOptions& options);

template <typename T>
EvalReport evaluate(const model::ToyDiTParams<T>& params, const data::Dataset& eval, const EvalOptions& options);

/// Per-image scores for one generated/ground-truth pair ([3, S, S] each,
/// mask [3, S, S]).
TaskMetrics score(std::span<const double> generated, std::span<const double> truth, std::span<const double> mask);

}  // namespace omnidit::trainer
