#pragma once

// Procedural try-on triplets: a patterned garment, a placeholder body wearing
// a distractor garment, and the same body wearing the target garment.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnidit/tensor.hpp"

namespace omnidit::data {

inline constexpr std::size_t kPatterns = 8, kPalettes = 8, kPoses = 4, kBackgrounds = 4;
inline constexpr std::size_t kGarment = 8;  // garment side at 16 x 16
inline constexpr std::size_t kTextLen = 5;

enum class Task { model_based, model_free, tryoff };

std::string to_string(Task t);
Task task_from_string(const std::string& s);  // std::invalid_argument on unknown names
/// Number of condition images the task feeds the model.
std::size_t arity(Task t);

// Vocabulary: 0 null, 1..3 task, then pattern, palette, pose, background.
namespace vocab {
inline constexpr std::uint32_t null = 0, task = 1, pattern = 4, palette = 12, pose = 20, background = 24;
inline constexpr std::uint32_t size = 28;
}  // namespace vocab

struct Attributes {
  std::size_t pattern = 0, palette = 0, pose = 0, background = 0;
  std::size_t distractor_pattern = 0, distractor_palette = 0;
};

struct Placement {
  std::size_t x = 0, y = 0;  // top-left corner in the tryon image
  std::size_t scale = 1;
};

/// Images are [3, S, S] in [-1, 1]; masks are [S, S] with values 0 or 1.
struct Triplet {
  std::uint64_t seed = 0;
  std::size_t image_size = 16;
  Attributes attrs;
  Placement placement;
  Tensor<double> garment, model_img, tryon;
  Tensor<double> mask;          // garment region in tryon coordinates
  Tensor<double> garment_mask;  // garment region in garment-image coordinates
};

/// 0/1 pattern selector for garment-local pixel (u, v), family < kPatterns.
int pattern_bit(std::size_t family, std::size_t u, std::size_t v);
/// Whether garment-local pixel (u, v) belongs to the garment silhouette.
bool in_silhouette(std::size_t u, std::size_t v);
/// RGB of palette color (which = 0 primary, 1 secondary).
std::array<double, 3> palette_color(std::size_t palette, int which);

/// Pattern image of the garment alone, [3, G, G] with G = kGarment * scale,
/// values outside the silhouette set to 0.
Tensor<double> garment_patch(std::size_t pattern, std::size_t palette, std::size_t scale);

/// image_size must be a positive multiple of 16.
Triplet gen_triplet(std::uint64_t seed, std::size_t image_size = 16);
Triplet gen_triplet(std::uint64_t seed, const Attributes& attrs, std::size_t image_size = 16);

struct TaskInstance {
  Task task = Task::model_free;
  std::vector<Tensor<double>> conditions;
  Tensor<double> target;
  Tensor<double> mask;  // [S, S] in target coordinates
  std::vector<std::uint32_t> text_ids;
};

TaskInstance make_task(const Triplet& t, Task task);
std::vector<std::uint32_t> text_ids(const Triplet& t, Task task);

struct Dataset {
  std::uint64_t seed = 0;
  std::string split = "train";
  std::size_t image_size = 16;
  std::vector<Triplet> items;
};

/// Triplet i uses seed triplet_seed(seed, i).
std::uint64_t triplet_seed(std::uint64_t dataset_seed, std::size_t index);
Dataset generate(std::uint64_t seed, std::size_t size, std::size_t image_size = 16);
/// Held-out set from a seed stream disjoint from generate(seed, ...).
Dataset generate_eval(std::uint64_t seed, std::size_t size, std::size_t image_size = 16);

nlohmann::json manifest(const Dataset& d);
/// Writes manifest.json plus garment/model/tryon/mask stacks as ODT1 and,
/// when ppm is set, every image as PPM.
void save(const Dataset& d, const std::filesystem::path& dir, bool ppm = false);
/// Regenerates from the manifest and checks the stored tensors match.
Dataset load(const std::filesystem::path& dir);

struct PlanConfig {
  std::size_t dataset_size = 0;
  std::size_t batch = 8;
  int stage = 1;
  std::uint64_t seed = 0;
  std::vector<Task> tasks;                  // empty = every task legal in the stage
  std::size_t ratio_single = 1, ratio_pair = 1;  // n=1 : n=2 batches in stage 2

  /// Throws std::invalid_argument for an illegal stage/task combination.
  void validate() const;
  std::vector<Task> resolved_tasks() const;
};

struct PlannedBatch {
  int stage = 1;
  std::size_t index = 0;
  std::size_t arity = 1;
  std::vector<Task> tasks;
  std::vector<std::size_t> items;
};

/// Batch `index` of the plan; a pure function of (cfg, index).
PlannedBatch plan_batch(const PlanConfig& cfg, std::size_t index);

class BatchPlan {
 public:
  explicit BatchPlan(PlanConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }
  PlannedBatch next() { return plan_batch(cfg_, next_++); }
  std::size_t position() const { return next_; }
  void seek(std::size_t index) { next_ = index; }
  const PlanConfig& config() const { return cfg_; }

 private:
  PlanConfig cfg_;
  std::size_t next_ = 0;
};

/// Stacked tensors for one planned batch.
template <typename T>
struct TaskBatch {
  std::vector<Task> tasks;
  std::vector<Tensor<T>> conditions;  // arity entries, [B, 3, S, S]
  Tensor<T> target;                   // [B, 3, S, S]
  Tensor<T> mask;                     // [B, 3, S, S], broadcast over channels
  std::vector<std::vector<std::uint32_t>> text_ids;
};

template <typename T>
TaskBatch<T> assemble(const std::vector<TaskInstance>& instances);

template <typename T>
TaskBatch<T> assemble(const Dataset& d, const PlannedBatch& b);

/// Binary PPM (P6) of a [3, S, S] image in [-1, 1].
void write_ppm(const std::filesystem::path& path, const Tensor<double>& image);
/// Binary PGM (P5) of an [S, S] image in [0, 1].
void write_pgm(const std::filesystem::path& path, const Tensor<double>& image);

}  // namespace omnidit::data
