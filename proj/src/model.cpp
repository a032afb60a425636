#include "omnidit/model.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <tuple>

#include "omnidit/rng.hpp"

namespace omnidit::model {

using Index = std::shared_ptr<const std::vector<std::size_t>>;

layout::AxisSplit ModelConfig::resolved_split() const {
  if (axis_split.total() != 0) return axis_split;
  return layout::default_axis_split(head_dim());
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (channels == 0 || patch == 0 || dim == 0 || heads == 0 || window_size == 0)
    fail("channels, patch, dim, heads and window_size must be positive");
  if (image_size == 0 || image_size % patch != 0)
    fail("image_size " + std::to_string(image_size) + " not divisible by patch " + std::to_string(patch));
  if (dim % heads != 0) fail("dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  if (depth == 0 || depth % 2 != 0) fail("depth must be even and positive, got " + std::to_string(depth));
  if (time_freq == 0 || time_freq % 2 != 0) fail("time_freq must be even and positive");
  const auto split = resolved_split();
  if (split.total() != head_dim() || split.d_i % 2 || split.d_w % 2 || split.d_h % 2)
    fail("axis split must be three even blocks summing to head_dim " + std::to_string(head_dim()));
}

nlohmann::json to_json(const ModelConfig& c) {
  const auto s = c.resolved_split();
  return {{"image_size", c.image_size}, {"channels", c.channels},       {"patch", c.patch},
          {"dim", c.dim},               {"heads", c.heads},             {"head_dim", c.head_dim()},
          {"depth", c.depth},           {"window_size", c.window_size}, {"text_vocab", c.text_vocab},
          {"time_freq", c.time_freq},   {"axis_split", {s.d_i, s.d_w, s.d_h}}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.channels = j.value("channels", c.channels);
  c.patch = j.value("patch", c.patch);
  c.dim = j.value("dim", c.dim);
  c.heads = j.value("heads", c.heads);
  c.depth = j.value("depth", c.depth);
  c.window_size = j.value("window_size", c.window_size);
  c.text_vocab = j.value("text_vocab", c.text_vocab);
  c.time_freq = j.value("time_freq", c.time_freq);
  if (j.contains("axis_split")) {
    const auto& a = j.at("axis_split");
    c.axis_split = {a.at(0).get<std::size_t>(), a.at(1).get<std::size_t>(), a.at(2).get<std::size_t>()};
  }
  if (j.contains("head_dim") && j.at("head_dim").get<std::size_t>() * c.heads != c.dim)
    throw std::invalid_argument("model config: dim != heads * head_dim");
  c.validate();
  return c;
}

namespace {

// modulation: shift/scale columns random, gate columns follow `output`.
enum class InitKind { normal, zero, output, modulation };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind kind;
};

std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  const std::size_t d = c.dim, p = c.patch_dim();
  std::vector<ParamSpec> s;
  s.push_back({"patch_w", {p, d}, InitKind::normal});
  s.push_back({"patch_b", {d}, InitKind::zero});
  if (c.text_vocab > 0) s.push_back({"text_emb", {c.text_vocab, d}, InitKind::normal});
  s.push_back({"t_w1", {c.time_freq, d}, InitKind::normal});
  s.push_back({"t_b1", {d}, InitKind::zero});
  s.push_back({"t_w2", {d, d}, InitKind::normal});
  s.push_back({"t_b2", {d}, InitKind::zero});
  for (std::size_t b = 0; b < c.depth; ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    s.push_back({pre + "mod_w", {d, 6 * d}, InitKind::modulation});
    s.push_back({pre + "mod_b", {6 * d}, InitKind::zero});
    s.push_back({pre + "qkv_w", {d, 3 * d}, InitKind::normal});
    s.push_back({pre + "qkv_b", {3 * d}, InitKind::zero});
    s.push_back({pre + "out_w", {d, d}, InitKind::normal});
    s.push_back({pre + "out_b", {d}, InitKind::zero});
    s.push_back({pre + "fc1_w", {d, 4 * d}, InitKind::normal});
    s.push_back({pre + "fc1_b", {4 * d}, InitKind::zero});
    s.push_back({pre + "fc2_w", {4 * d, d}, InitKind::normal});
    s.push_back({pre + "fc2_b", {d}, InitKind::zero});
  }
  s.push_back({"fmod_w", {d, 2 * d}, InitKind::normal});
  s.push_back({"fmod_b", {2 * d}, InitKind::zero});
  s.push_back({"final_w", {d, p}, InitKind::output});
  s.push_back({"final_b", {p}, InitKind::zero});
  return s;
}

template <typename T>
std::vector<ad::Var<T>*> slots(ToyDiTParams<T>& m) {
  std::vector<ad::Var<T>*> v{&m.patch_w, &m.patch_b};
  if (m.config.text_vocab > 0) v.push_back(&m.text_emb);
  for (auto* p : {&m.t_w1, &m.t_b1, &m.t_w2, &m.t_b2}) v.push_back(p);
  for (auto& b : m.blocks)
    for (auto* p : {&b.mod_w, &b.mod_b, &b.qkv_w, &b.qkv_b, &b.out_w, &b.out_b, &b.fc1_w, &b.fc1_b, &b.fc2_w,
                    &b.fc2_b})
      v.push_back(p);
  for (auto* p : {&m.fmod_w, &m.fmod_b, &m.final_w, &m.final_b}) v.push_back(p);
  return v;
}

// Small process-wide memo for index maps and layout plans; keys are few.
template <typename Key, typename Value>
class Memo {
 public:
  template <typename Make>
  std::shared_ptr<const Value> get(const Key& key, Make&& make) {
    std::lock_guard lock(mu_);
    auto it = map_.find(key);
    if (it != map_.end()) return it->second;
    auto v = std::make_shared<const Value>(make());
    map_.emplace(key, v);
    return v;
  }

 private:
  std::mutex mu_;
  std::map<Key, std::shared_ptr<const Value>> map_;
};

using Key4 = std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>;
using Key5 = std::tuple<std::size_t, std::size_t, std::size_t, std::size_t, std::size_t>;

// [B, C, S, S] -> [B, N, C*p*p]; token (gw, gh) at gh * G + gw, features (c, py, px).
Index patchify_index(std::size_t batch, std::size_t ch, std::size_t size, std::size_t p) {
  static Memo<Key4, std::vector<std::size_t>> memo;
  return memo.get({batch, ch, size, p}, [&] {
    const std::size_t g = size / p, n = g * g, pd = ch * p * p;
    std::vector<std::size_t> idx(batch * n * pd);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t gh = 0; gh < g; ++gh)
        for (std::size_t gw = 0; gw < g; ++gw)
          for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t py = 0; py < p; ++py)
              for (std::size_t px = 0; px < p; ++px) {
                const std::size_t tok = gh * g + gw, f = (c * p + py) * p + px;
                idx[(b * n + tok) * pd + f] = ((b * ch + c) * size + gh * p + py) * size + gw * p + px;
              }
    return idx;
  });
}

// Inverse of patchify_index.
Index unpatchify_index(std::size_t batch, std::size_t ch, std::size_t size, std::size_t p) {
  static Memo<Key4, std::vector<std::size_t>> memo;
  return memo.get({batch, ch, size, p}, [&] {
    const auto fwd = patchify_index(batch, ch, size, p);
    std::vector<std::size_t> inv(fwd->size());
    for (std::size_t i = 0; i < fwd->size(); ++i) inv[(*fwd)[i]] = i;
    return inv;
  });
}

// Part `part` of [B, L, 3D] -> [B, H, L, hd].
Index split_heads_index(std::size_t batch, std::size_t len, std::size_t dim, std::size_t heads, std::size_t part) {
  static Memo<Key5, std::vector<std::size_t>> memo;
  return memo.get({batch, len, dim, heads, part}, [&] {
    const std::size_t hd = dim / heads;
    std::vector<std::size_t> idx(batch * len * dim);
    std::size_t o = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t e = 0; e < hd; ++e) idx[o++] = (b * len + l) * 3 * dim + part * dim + h * hd + e;
    return idx;
  });
}

// [B, H, L, hd] -> [B, L, D].
Index merge_heads_index(std::size_t batch, std::size_t len, std::size_t dim, std::size_t heads) {
  static Memo<Key4, std::vector<std::size_t>> memo;
  return memo.get({batch, len, dim, heads}, [&] {
    const std::size_t hd = dim / heads;
    std::vector<std::size_t> idx(batch * len * dim);
    std::size_t o = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t e = 0; e < hd; ++e) idx[o++] = ((b * heads + h) * len + l) * hd + e;
    return idx;
  });
}

// Rows [offset, offset + count) of [B, L, D].
Index row_slice_index(std::size_t batch, std::size_t len, std::size_t dim, std::size_t offset, std::size_t count) {
  static Memo<Key5, std::vector<std::size_t>> memo;
  return memo.get({batch, len, dim, offset, count}, [&] {
    std::vector<std::size_t> idx(batch * count * dim);
    std::size_t o = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t r = 0; r < count; ++r)
        for (std::size_t e = 0; e < dim; ++e) idx[o++] = (b * len + offset + r) * dim + e;
    return idx;
  });
}

template <typename T>
ad::Var<T> modulate(const ad::Var<T>& h, const ad::Var<T>& shift, const ad::Var<T>& scale, std::size_t len) {
  return ad::add(ad::mul(h, ad::repeat_rows(ad::add_scalar(scale, T{1}), len)), ad::repeat_rows(shift, len));
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, ad::Var<T>>> ToyDiTParams<T>::named() const {
  auto specs = param_specs(config);
  auto ptrs = slots(const_cast<ToyDiTParams&>(*this));
  std::vector<std::pair<std::string, ad::Var<T>>> out;
  for (std::size_t i = 0; i < specs.size(); ++i) out.emplace_back(specs[i].name, *ptrs[i]);
  return out;
}

template <typename T>
std::vector<ad::Var<T>> ToyDiTParams<T>::list() const {
  std::vector<ad::Var<T>> out;
  for (auto* p : slots(const_cast<ToyDiTParams&>(*this))) out.push_back(*p);
  return out;
}

template <typename T>
std::size_t ToyDiTParams<T>::count() const {
  std::size_t n = 0;
  for (const auto& p : list()) n += p.numel();
  return n;
}

template <typename T>
void ToyDiTParams<T>::zero_grad() const {
  for (auto p : list()) p.zero_grad();
}

template <typename T>
ToyDiTParams<T> ToyDiTParams<T>::clone() const {
  ToyDiTParams out = *this;
  for (auto* p : slots(out)) *p = ad::Var<T>::leaf(p->value(), true);
  return out;
}

template <typename T>
ToyDiTParams<T> init(const ModelConfig& config, std::uint64_t seed, InitOptions options) {
  config.validate();
  ToyDiTParams<T> m;
  m.config = config;
  m.blocks.resize(config.depth);
  const auto specs = param_specs(config);
  auto ptrs = slots(m);
  const Rng root(seed, 0x6d6f64656cULL);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    Tensor<T> v(specs[i].shape);
    const auto kind = specs[i].kind;
    const bool random = kind == InitKind::normal || kind == InitKind::modulation ||
                        (kind == InitKind::output && !options.zero_init_outputs);
    if (random) {
      Rng r = root.split(i);
      for (auto& x : v.span()) x = static_cast<T>(r.truncated_normal(options.sigma));
    }
    if (kind == InitKind::modulation && options.zero_init_outputs) {
      const std::size_t d = config.dim;
      for (std::size_t row = 0; row < d; ++row)
        for (std::size_t gate : {2 * d, 5 * d}) std::fill_n(v.data() + row * 6 * d + gate, d, T{0});
    }
    *ptrs[i] = ad::Var<T>::leaf(std::move(v), true);
  }
  return m;
}

ParamCount count_params(const ModelConfig& c) {
  const std::size_t d = c.dim, p = c.patch_dim();
  ParamCount n;
  n.embed = p * d + d + c.text_vocab * d + c.time_freq * d + d + d * d + d;
  const std::size_t per_block = (d * 6 * d + 6 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) +
                                (4 * d * d + d);
  n.blocks = c.depth * per_block;
  n.final = d * 2 * d + 2 * d + d * p + p;
  return n;
}

std::shared_ptr<const LayoutPlan> layout_plan(const ModelConfig& config, std::size_t refs, std::size_t text_len) {
  static Memo<std::tuple<std::string, std::size_t, std::size_t>, LayoutPlan> memo;
  return memo.get({to_json(config).dump(), refs, text_len}, [&] {
    const layout::Grid g{config.grid(), config.grid()};
    const std::vector<layout::Grid> grids(refs, g);
    LayoutPlan lp;
    lp.seq = layout::assign_positions(g, grids, text_len);
    lp.rope = layout::rope_tables(lp.seq, config.head_dim(), config.resolved_split());
    const attention::Parity par[2] = {attention::Parity::regular, attention::Parity::shifted};
    for (int i = 0; i < 2; ++i) {
      lp.plans[i] = attention::plan_windows(lp.seq, config.window_size, par[i]);
      lp.masks[i] = attention::build_mask(lp.seq, lp.plans[i]);
    }
    return lp;
  });
}

template <typename T>
Tensor<T> timestep_features(std::span<const double> t, std::size_t freq) {
  const std::size_t half = freq / 2;
  Tensor<T> out({t.size(), freq});
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t k = 0; k < half; ++k) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double a = 1000.0 * t[b] * f;
      out[b * freq + k] = static_cast<T>(std::cos(a));
      out[b * freq + half + k] = static_cast<T>(std::sin(a));
    }
  return out;
}

template <typename T>
ad::Var<T> forward(const ToyDiTParams<T>& params, const ad::Var<T>& x, std::span<const double> t,
                   std::span<const ad::Var<T>> conditions, const std::vector<std::vector<std::uint32_t>>& text_ids,
                   ForwardTrace<T>* trace) {
  const ModelConfig& c = params.config;
  const Shape img{x.shape().empty() ? 0 : x.shape()[0], c.channels, c.image_size, c.image_size};
  if (x.shape().size() != 4 || x.shape() != img)
    throw DimensionError("forward: x " + to_string(x.shape()) + " does not match model image [B," +
                         std::to_string(c.channels) + "," + std::to_string(c.image_size) + "," +
                         std::to_string(c.image_size) + "]");
  const std::size_t batch = img[0];
  if (t.size() != batch)
    throw DimensionError("forward: " + std::to_string(t.size()) + " timesteps for batch " + std::to_string(batch));
  for (const auto& cond : conditions)
    if (cond.shape() != img)
      throw DimensionError("forward: condition " + to_string(cond.shape()) + " vs x " + to_string(img));
  if (conditions.size() > 2) throw std::invalid_argument("forward: at most two condition images are supported");
  const std::size_t text_len = text_ids.empty() ? 0 : text_ids[0].size();
  if (!text_ids.empty() && text_ids.size() != batch)
    throw DimensionError("forward: " + std::to_string(text_ids.size()) + " text rows for batch " +
                         std::to_string(batch));
  for (const auto& row : text_ids)
    if (row.size() != text_len) throw DimensionError("forward: text rows have unequal lengths");
  if (conditions.empty() && text_len == 0)
    throw std::invalid_argument("forward: no conditions and no text tokens");
  if (text_len > 0 && c.text_vocab == 0) throw std::invalid_argument("forward: model has no text vocabulary");

  const auto plan = layout_plan(c, conditions.size(), text_len);
  const std::size_t d = c.dim, p = c.patch_dim(), n_img = c.grid() * c.grid(), len = plan->seq.total_len();

  // Timestep conditioning vector c_t [B, D].
  auto tf = ad::Var<T>::constant(timestep_features<T>(t, c.time_freq));
  auto ct = ad::linear(ad::silu(ad::linear(tf, params.t_w1, &params.t_b1)), params.t_w2, &params.t_b2);
  auto sct = ad::silu(ct);

  // Token sequence [B, L, D].
  const auto pidx = patchify_index(batch, c.channels, c.image_size, c.patch);
  auto embed = [&](const ad::Var<T>& im) {
    return ad::linear(ad::gather(im, pidx, {batch, n_img, p}), params.patch_w, &params.patch_b);
  };
  std::vector<ad::Var<T>> parts;
  if (text_len > 0) {
    auto idx = std::make_shared<std::vector<std::size_t>>(batch * text_len * d);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < text_len; ++j) {
        const std::size_t id = text_ids[b][j];
        if (id >= c.text_vocab)
          throw std::out_of_range("forward: text id " + std::to_string(id) + " outside vocabulary of " +
                                  std::to_string(c.text_vocab));
        for (std::size_t e = 0; e < d; ++e) (*idx)[(b * text_len + j) * d + e] = id * d + e;
      }
    parts.push_back(ad::gather(params.text_emb, idx, {batch, text_len, d}));
  }
  parts.push_back(embed(x));
  for (const auto& cond : conditions) parts.push_back(embed(cond));
  auto h = parts.size() == 1 ? parts[0] : ad::concat(parts, 1);

  Index qkv_idx[3];
  for (std::size_t part = 0; part < 3; ++part) qkv_idx[part] = split_heads_index(batch, len, d, c.heads, part);
  const auto merge_idx = merge_heads_index(batch, len, d, c.heads);
  const Shape head_shape{batch, c.heads, len, c.head_dim()};

  for (std::size_t layer = 0; layer < c.depth; ++layer) {
    const auto& bp = params.blocks[layer];
    auto mod = ad::linear(sct, bp.mod_w, &bp.mod_b);
    auto chunk = [&](std::size_t i) { return ad::slice_last(mod, i * d, d); };

    auto a = modulate(ad::layernorm_affine<T>(h, nullptr, nullptr), chunk(0), chunk(1), len);
    auto qkv = ad::linear(a, bp.qkv_w, &bp.qkv_b);
    auto q = ad::gather(qkv, qkv_idx[0], head_shape);
    auto k = ad::gather(qkv, qkv_idx[1], head_shape);
    auto v = ad::gather(qkv, qkv_idx[2], head_shape);
    auto o = attention::attend(q, k, v, plan->masks[layer % 2], plan->rope);
    o = ad::linear(ad::gather(o, merge_idx, {batch, len, d}), bp.out_w, &bp.out_b);
    h = ad::add(h, ad::mul(o, ad::repeat_rows(chunk(2), len)));

    auto m = modulate(ad::layernorm_affine<T>(h, nullptr, nullptr), chunk(3), chunk(4), len);
    m = ad::linear(ad::gelu(ad::linear(m, bp.fc1_w, &bp.fc1_b)), bp.fc2_w, &bp.fc2_b);
    h = ad::add(h, ad::mul(m, ad::repeat_rows(chunk(5), len)));
    if (trace) trace->hidden.push_back(h.value());
  }

  const std::size_t noisy_off = plan->seq.noisy().offset;
  auto hn = ad::gather(h, row_slice_index(batch, len, d, noisy_off, n_img), {batch, n_img, d});
  auto fmod = ad::linear(sct, params.fmod_w, &params.fmod_b);
  hn = modulate(ad::layernorm_affine<T>(hn, nullptr, nullptr), ad::slice_last(fmod, 0, d),
                ad::slice_last(fmod, d, d), n_img);
  auto out = ad::linear(hn, params.final_w, &params.final_b);
  return ad::gather(out, unpatchify_index(batch, c.channels, c.image_size, c.patch), img);
}

#define OMNIDIT_MODEL_INSTANTIATE(T)                                                                           \
  template struct ToyDiTParams<T>;                                                                             \
  template ToyDiTParams<T> init<T>(const ModelConfig&, std::uint64_t, InitOptions);                            \
  template Tensor<T> timestep_features<T>(std::span<const double>, std::size_t);                               \
  template ad::Var<T> forward<T>(const ToyDiTParams<T>&, const ad::Var<T>&, std::span<const double>,           \
                                 std::span<const ad::Var<T>>, const std::vector<std::vector<std::uint32_t>>&, \
                                 ForwardTrace<T>*);

OMNIDIT_MODEL_INSTANTIATE(float)
OMNIDIT_MODEL_INSTANTIATE(double)

}  // namespace omnidit::model
