#pragma once

// Toy single-stream MM-DiT velocity network.
//
// Images are cut into p x p patches and embedded; text ids index an
// embedding table; the sequence [text; noisy; ref_1; ...] runs through
// `depth` adaLN blocks whose attention alternates regular / shifted windows
// over the reference tokens (even layers regular, odd layers shifted). Only
// the noisy-token outputs are projected back to pixels.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "omnidit/attention.hpp"
#include "omnidit/autodiff.hpp"
#include "omnidit/layout.hpp"

namespace omnidit::model {

struct ModelConfig {
  std::size_t image_size = 16;
  std::size_t channels = 3;
  std::size_t patch = 2;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t depth = 4;
  std::size_t window_size = 4;
  std::size_t text_vocab = 32;
  std::size_t time_freq = 32;  // sinusoidal features for t (even)
  layout::AxisSplit axis_split{};  // all zero: derive from head_dim

  std::size_t head_dim() const { return dim / heads; }
  std::size_t grid() const { return image_size / patch; }
  std::size_t patch_dim() const { return channels * patch * patch; }
  layout::AxisSplit resolved_split() const;

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

struct InitOptions {
  double sigma = 0.02;
  /// Residual gates and the output projection start at zero, so every block
  /// is an identity residual and the network outputs 0. Shift and scale
  /// modulation stay random so the first update already reaches t.
  bool zero_init_outputs = true;
};

template <typename T>
struct BlockParams {
  ad::Var<T> mod_w, mod_b;  // silu(c) -> shift1, scale1, gate1, shift2, scale2, gate2
  ad::Var<T> qkv_w, qkv_b;
  ad::Var<T> out_w, out_b;
  ad::Var<T> fc1_w, fc1_b;
  ad::Var<T> fc2_w, fc2_b;
};

template <typename T>
struct ToyDiTParams {
  ModelConfig config;
  ad::Var<T> patch_w, patch_b;
  ad::Var<T> text_emb;  // undefined when text_vocab == 0
  ad::Var<T> t_w1, t_b1, t_w2, t_b2;
  std::vector<BlockParams<T>> blocks;
  ad::Var<T> fmod_w, fmod_b;  // silu(c) -> shift, scale
  ad::Var<T> final_w, final_b;

  /// Stable (name, leaf) listing; the order defines checkpoint layout.
  std::vector<std::pair<std::string, ad::Var<T>>> named() const;
  std::vector<ad::Var<T>> list() const;
  std::size_t count() const;
  void zero_grad() const;
  /// Fresh leaves with copied values.
  ToyDiTParams clone() const;
};

template <typename T>
ToyDiTParams<T> init(const ModelConfig& config, std::uint64_t seed, InitOptions options = {});

struct ParamCount {
  std::size_t embed = 0;
  std::size_t blocks = 0;
  std::size_t final = 0;
  std::size_t total() const { return embed + blocks + final; }
};

/// Closed-form parameter count.
ParamCount count_params(const ModelConfig& config);

/// Everything about a sequence layout that does not depend on the batch:
/// token sequence, rotary table, and the two attention masks.
struct LayoutPlan {
  layout::TokenSequence seq;
  layout::RopeTable rope;
  attention::WindowPlan plans[2];
  attention::AttnMask masks[2];  // [regular, shifted]
};

/// Cached per (config, reference count, text length).
std::shared_ptr<const LayoutPlan> layout_plan(const ModelConfig& config, std::size_t refs, std::size_t text_len);

/// Optional capture of the token states after each block, [B, L, D].
template <typename T>
struct ForwardTrace {
  std::vector<Tensor<T>> hidden;
};

/// Velocity for a batch. x and every condition are [B, C, S, S]; t has B
/// entries; text_ids has B rows of equal length.
template <typename T>
ad::Var<T> forward(const ToyDiTParams<T>& params, const ad::Var<T>& x, std::span<const double> t,
                   std::span<const ad::Var<T>> conditions, const std::vector<std::vector<std::uint32_t>>& text_ids,
                   ForwardTrace<T>* trace = nullptr);

/// Sinusoidal timestep features [B, time_freq].
template <typename T>
Tensor<T> timestep_features(std::span<const double> t, std::size_t freq);

}  // namespace omnidit::model
