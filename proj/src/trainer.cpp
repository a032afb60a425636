#include "omnidit/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "omnidit/log.hpp"
#include "omnidit/odt.hpp"
#include "omnidit/rng.hpp"

namespace omnidit::trainer {

namespace {

constexpr std::uint64_t kStepStream = 0x73746570ULL;

std::vector<std::string> task_names(const std::vector<data::Task>& t) {
  std::vector<std::string> out;
  for (auto x : t) out.push_back(data::to_string(x));
  return out;
}

std::string fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Shortest text that parses back to the same double.
std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (model.text_vocab < data::vocab::size)
    throw std::invalid_argument("train config: text_vocab must be >= " + std::to_string(data::vocab::size));
  if (stages.empty()) throw std::invalid_argument("train config: no stages");
  for (const auto& s : stages) {
    if (!(s.lr > 0)) throw std::invalid_argument("train config: learning rates must be > 0");
    data::PlanConfig p{dataset_size, s.batch, s.stage, seed, s.tasks, ratio_single, ratio_pair};
    p.validate();
  }
  if (loss.k == 0) throw std::invalid_argument("train config: K must be >= 1");
  if (!(loss.dt > 0) || (loss.k - 1) * loss.dt > 1.0)
    throw std::invalid_argument("train config: need dt > 0 and (K - 1) dt <= 1");
  if (!(loss.lambda >= 0)) throw std::invalid_argument("train config: lambda must be >= 0");
  if (!(cfg_dropout >= 0 && cfg_dropout <= 1)) throw std::invalid_argument("train config: cfg_dropout outside [0, 1]");
  if (!(clip > 0)) throw std::invalid_argument("train config: clip must be > 0");
  if (!(adamw.beta1 >= 0 && adamw.beta1 < 1 && adamw.beta2 >= 0 && adamw.beta2 < 1 && adamw.eps > 0 &&
        adamw.weight_decay >= 0))
    throw std::invalid_argument("train config: invalid optimizer hyperparameters");
}

std::size_t TrainConfig::total_steps() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.steps;
  return n;
}

std::pair<std::size_t, std::size_t> TrainConfig::locate(std::size_t step) const {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (step < stages[i].steps) return {i, step};
    step -= stages[i].steps;
  }
  throw std::out_of_range("step beyond the training schedule");
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages)
    stages.push_back(
        {{"stage", s.stage}, {"steps", s.steps}, {"tasks", task_names(s.tasks)}, {"batch", s.batch}, {"lr", s.lr}});
  return {{"model", model::to_json(c.model)},
          {"stages", stages},
          {"k", c.loss.k},
          {"dt", c.loss.dt},
          {"lambda", c.loss.lambda},
          {"detach", c.loss.detach},
          {"cfg_dropout", c.cfg_dropout},
          {"seed", c.seed},
          {"data_seed", c.data_seed},
          {"dataset_size", c.dataset_size},
          {"ratio", {c.ratio_single, c.ratio_pair}},
          {"adamw",
           {{"beta1", c.adamw.beta1},
            {"beta2", c.adamw.beta2},
            {"weight_decay", c.adamw.weight_decay},
            {"eps", c.adamw.eps}}},
          {"clip", c.clip},
          {"extractor_seed", c.extractor_seed},
          {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("model")) c.model = model::config_from_json(j.at("model"));
  if (j.contains("stages")) {
    c.stages.clear();
    for (const auto& s : j.at("stages")) {
      StageConfig sc;
      sc.stage = s.value("stage", static_cast<int>(c.stages.size()) + 1);
      sc.steps = s.at("steps").get<std::size_t>();
      for (const auto& t : s.value("tasks", std::vector<std::string>{})) sc.tasks.push_back(data::task_from_string(t));
      sc.batch = s.value("batch", sc.batch);
      sc.lr = s.value("lr", sc.lr);
      c.stages.push_back(sc);
    }
  }
  c.loss.k = j.value("k", c.loss.k);
  c.loss.dt = j.value("dt", c.loss.dt);
  c.loss.lambda = j.value("lambda", c.loss.lambda);
  c.loss.detach = j.value("detach", c.loss.detach);
  c.cfg_dropout = j.value("cfg_dropout", c.cfg_dropout);
  c.seed = j.value("seed", c.seed);
  c.data_seed = j.value("data_seed", c.data_seed);
  c.dataset_size = j.value("dataset_size", c.dataset_size);
  if (j.contains("ratio")) {
    c.ratio_single = j.at("ratio").at(0).get<std::size_t>();
    c.ratio_pair = j.at("ratio").at(1).get<std::size_t>();
  }
  if (j.contains("adamw")) {
    const auto& a = j.at("adamw");
    c.adamw.beta1 = a.value("beta1", c.adamw.beta1);
    c.adamw.beta2 = a.value("beta2", c.adamw.beta2);
    c.adamw.weight_decay = a.value("weight_decay", c.adamw.weight_decay);
    c.adamw.eps = a.value("eps", c.adamw.eps);
  }
  c.clip = j.value("clip", c.clip);
  c.extractor_seed = j.value("extractor_seed", c.extractor_seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  const auto known = to_json(TrainConfig{});
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw std::invalid_argument("train config: unknown key '" + key + "'");
  return c;
}

std::string config_hash(const TrainConfig& c) { return fnv1a(to_json(c).dump()); }

std::string metrics_line(const MetricsRow& r) {
  std::ostringstream os;
  os << r.step << ',' << num(r.l_mtp) << ',' << num(r.l_align) << ',' << num(r.total) << ',' << num(r.grad_norm)
     << ',' << num(r.lr) << ',' << r.stage;
  return os.str();
}

template <typename T>
TrainState<T> init_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState<T> s;
  s.config = cfg;
  s.params = model::init<T>(cfg.model, cfg.seed);
  for (const auto& p : s.params.list()) {
    s.opt.m.emplace_back(p.numel(), T{0});
    s.opt.v.emplace_back(p.numel(), T{0});
  }
  return s;
}

template <typename T>
GradClip clip_gradients(const std::vector<ad::Var<T>>& params, double clip) {
  GradClip r;
  r.norm = ad::grad_norm<T>(params);
  if (r.norm > clip) {
    r.clipped = true;
    const T factor = static_cast<T>(clip / (r.norm + 1e-6));
    for (const auto& p : params)
      if (p.has_grad())
        for (auto& g : p.node()->grad) g *= factor;
  }
  return r;
}

template <typename T>
void adamw_update(const std::vector<ad::Var<T>>& params, AdamState<T>& st, const AdamWConfig& cfg, double lr) {
  if (st.m.size() != params.size() || st.v.size() != params.size())
    throw std::invalid_argument("adamw: optimizer state does not match the parameter list");
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step = static_cast<T>(lr / bc1), decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
  const T inv_bc2 = static_cast<T>(1.0 / bc2), eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i];
    auto& w = p.mutable_value();
    auto& m = st.m[i];
    auto& v = st.v[i];
    const bool has = p.has_grad();
    const std::span<const T> g = p.grad_span();
    for (std::size_t j = 0; j < w.numel(); ++j) {
      const T gj = has ? g[j] : T{0};
      m[j] = b1 * m[j] + (T{1} - b1) * gj;
      v[j] = b2 * v[j] + (T{1} - b2) * gj * gj;
      w[j] = w[j] * decay - step * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

data::Dataset training_data(const TrainConfig& cfg) {
  return data::generate(cfg.data_seed, cfg.dataset_size, cfg.model.image_size);
}

template <typename T>
MetricsRow train_step(TrainState<T>& state, const data::Dataset& dataset,
                      const objective::FeatureExtractor<T>& extractor) {
  const auto& cfg = state.config;
  const std::size_t step = state.step;
  const auto [si, local] = cfg.locate(step);
  const auto& stage = cfg.stages[si];
  if (dataset.items.size() < cfg.dataset_size)
    throw std::invalid_argument("train: dataset has fewer items than dataset_size");

  data::PlanConfig plan{cfg.dataset_size, stage.batch, stage.stage, cfg.seed, stage.tasks, cfg.ratio_single,
                        cfg.ratio_pair};
  auto batch = data::assemble<T>(dataset, data::plan_batch(plan, local));
  const std::size_t b = batch.target.dim(0), per = batch.target.numel() / b;

  Rng rng = Rng(cfg.seed, kStepStream).split(step);
  for (std::size_t i = 0; i < b; ++i) {
    if (rng.uniform() >= cfg.cfg_dropout) continue;
    for (auto& c : batch.conditions) std::fill(c.data() + i * per, c.data() + (i + 1) * per, T{0});
    std::fill(batch.text_ids[i].begin(), batch.text_ids[i].end(), data::vocab::null);
  }
  objective::FlowSample<T> s;
  s.t = objective::sample_times(rng, b, cfg.loss.k, cfg.loss.dt);
  s.x1 = Tensor<T>(batch.target.shape());
  for (auto& v : s.x1.span()) v = static_cast<T>(rng.normal());
  s.x0 = std::move(batch.target);
  s.mask = std::move(batch.mask);

  std::vector<ad::Var<T>> conds;
  for (auto& c : batch.conditions) conds.push_back(ad::Var<T>::constant(std::move(c)));
  const auto v = objective::model_velocity<T>(state.params, std::move(conds), std::move(batch.text_ids));

  const auto params = state.params.list();
  state.params.zero_grad();
  objective::LossBreakdown<T> loss;
  try {
    loss = objective::total_loss<T>(v, s, cfg.loss, &extractor);
    if (!std::isfinite(loss.total_value))
      throw TrainingDiverged(step, "non-finite loss at step " + std::to_string(step));
    ad::backward(loss.total);
  } catch (const NumericError& e) {
    throw TrainingDiverged(step, "step " + std::to_string(step) + ": " + e.what());
  }
  const auto clip = clip_gradients<T>(params, cfg.clip);
  if (!std::isfinite(clip.norm)) throw TrainingDiverged(step, "non-finite gradient at step " + std::to_string(step));
  adamw_update<T>(params, state.opt, cfg.adamw, stage.lr);
  state.step = step + 1;

  MetricsRow row;
  row.step = step;
  row.l_ssp = loss.l_ssp;
  row.l_mtp = loss.l_mtp;
  row.l_align = loss.l_align;
  row.total = loss.total_value;
  row.grad_norm = clip.norm;
  row.lr = stage.lr;
  row.stage = stage.stage;
  return row;
}

template <typename T>
TrainResult<T> train(TrainState<T> state, const data::Dataset& dataset, const TrainOptions& options) {
  const auto& cfg = state.config;
  cfg.validate();
  const objective::OrthogonalExtractor<T> extractor(3 * cfg.model.image_size * cfg.model.image_size,
                                                    cfg.extractor_seed);
  const std::size_t total = cfg.total_steps();
  const bool files = !options.out.empty();
  std::ofstream csv;
  if (files) {
    std::filesystem::create_directories(options.out);
    const auto path = options.out / "metrics.csv";
    const bool fresh = state.step == 0 || !std::filesystem::exists(path);
    csv.open(path, fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw std::runtime_error("cannot write " + path.string());
    if (fresh) csv << kMetricsHeader << '\n';
  }
  TrainResult<T> r;
  while (state.step < total && state.step < options.stop_at) {
    MetricsRow row;
    try {
      row = train_step<T>(state, dataset, extractor);
    } catch (const TrainingDiverged& e) {
      log::error(e.what());
      if (files) save_checkpoint(options.out / "checkpoint", state);
      throw;
    }
    r.metrics.push_back(row);
    if (files) csv << metrics_line(row) << '\n';
    if (options.on_step) options.on_step(row);
    if (files && cfg.checkpoint_every && state.step % cfg.checkpoint_every == 0 && state.step < total) {
      csv.flush();
      save_checkpoint(options.out / "checkpoint", state);
    }
  }
  r.finished = state.step >= total;
  if (files) {
    csv.flush();
    save_checkpoint(options.out / "checkpoint", state);
  }
  r.state = std::move(state);
  return r;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const TrainState<T>& state) {
  // Write into a sibling directory, then swap, so a crash never leaves a
  // half-written checkpoint in place.
  const auto tmp = dir.parent_path() / (dir.filename().string() + ".tmp");
  std::filesystem::remove_all(tmp);
  std::filesystem::create_directories(tmp / "params");
  std::filesystem::create_directories(tmp / "adam_m");
  std::filesystem::create_directories(tmp / "adam_v");
  const auto named = state.params.named();
  nlohmann::json names = nlohmann::json::array();
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [name, p] = named[i];
    names.push_back(name);
    odt::write(tmp / "params" / (name + ".odt"), p.value());
    odt::write(tmp / "adam_m" / (name + ".odt"), Tensor<T>(p.shape(), state.opt.m[i]));
    odt::write(tmp / "adam_v" / (name + ".odt"), Tensor<T>(p.shape(), state.opt.v[i]));
  }
  const nlohmann::json meta = {{"format", "omnidit-checkpoint"},
                               {"version", OMNIDIT_VERSION},
                               {"dtype", sizeof(T) == 4 ? "f32" : "f64"},
                               {"step", state.step},
                               {"adam_t", state.opt.t},
                               {"config", to_json(state.config)},
                               {"config_hash", config_hash(state.config)},
                               {"rng", {{"seed", state.config.seed}, {"stream", kStepStream}, {"next", state.step}}},
                               {"params", names}};
  {
    std::ofstream f(tmp / "checkpoint.json");
    f << meta.dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write checkpoint metadata");
  }
  std::filesystem::remove_all(dir);
  std::filesystem::rename(tmp, dir);
}

template <typename T>
TrainState<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream f(dir / "checkpoint.json");
  if (!f) throw std::runtime_error("no checkpoint at " + dir.string());
  const auto meta = nlohmann::json::parse(f);
  if (meta.value("format", "") != "omnidit-checkpoint") throw std::runtime_error("not a checkpoint: " + dir.string());
  TrainState<T> s;
  s.config = train_config_from_json(meta.at("config"));
  if (config_hash(s.config) != meta.at("config_hash").get<std::string>())
    throw std::runtime_error("checkpoint config hash mismatch");
  s.params = model::init<T>(s.config.model, s.config.seed);
  s.step = meta.at("step").get<std::size_t>();
  s.opt.t = meta.at("adam_t").get<std::size_t>();
  const auto named = s.params.named();
  if (meta.at("params").size() != named.size()) throw std::runtime_error("checkpoint parameter list mismatch");
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto [name, p] = named[i];
    if (meta.at("params").at(i).get<std::string>() != name)
      throw std::runtime_error("checkpoint parameter order mismatch at " + name);
    auto w = odt::read<T>(dir / "params" / (name + ".odt"));
    if (w.shape() != p.shape()) throw DimensionError("checkpoint tensor " + name + " has the wrong shape");
    p.mutable_value() = std::move(w);
    s.opt.m.push_back(odt::read<T>(dir / "adam_m" / (name + ".odt")).vec());
    s.opt.v.push_back(odt::read<T>(dir / "adam_v" / (name + ".odt")).vec());
  }
  return s;
}

TaskMetrics score(std::span<const double> gen, std::span<const double> truth, std::span<const double> mask) {
  if (gen.size() != truth.size() || gen.size() != mask.size()) throw DimensionError("score: size mismatch");
  double se = 0, mse_num = 0, msum = 0, dot = 0, ng = 0, nt = 0;
  for (std::size_t i = 0; i < gen.size(); ++i) {
    const double d = gen[i] - truth[i];
    se += d * d;
    if (mask[i] != 0) {
      mse_num += d * d;
      msum += 1;
      dot += gen[i] * truth[i];
      ng += gen[i] * gen[i];
      nt += truth[i] * truth[i];
    }
  }
  TaskMetrics m;
  m.count = 1;
  m.full_mse = se / static_cast<double>(gen.size());
  m.masked_mse = msum > 0 ? mse_num / msum : 0.0;
  const double denom = std::sqrt(ng) * std::sqrt(nt);
  m.masked_cosine = denom > 0 ? dot / denom : (ng == 0 && nt == 0 ? 1.0 : 0.0);
  return m;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json tasks = nlohmann::json::object();
  for (const auto& [name, m] : r.tasks)
    tasks[name] = {{"count", m.count},
                   {"masked_mse", m.masked_mse},
                   {"masked_cosine", m.masked_cosine},
                   {"full_mse", m.full_mse}};
  return {{"tasks", tasks},
          {"tryoff_garment_mse", r.tryoff_garment_mse},
          {"steps", r.steps},
          {"guidance", r.guidance},
          {"seed", r.seed}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  for (const auto& [name, m] : j.at("tasks").items())
    r.tasks[name] = {m.at("count").get<std::size_t>(), m.at("masked_mse").get<double>(),
                     m.at("masked_cosine").get<double>(), m.at("full_mse").get<double>()};
  r.tryoff_garment_mse = j.at("tryoff_garment_mse").get<double>();
  r.steps = j.at("steps").get<std::size_t>();
  r.guidance = j.at("guidance").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

EvalReport evaluate_with(const Generator& generate, const data::Dataset& eval, const EvalOptions& opt) {
  if (eval.items.empty()) throw std::invalid_argument("evaluate: empty eval set");
  if (opt.batch == 0) throw std::invalid_argument("evaluate: batch must be >= 1");
  EvalReport r;
  r.steps = opt.sample.steps;
  r.guidance = opt.sample.guidance;
  r.seed = opt.sample.seed;
  const std::size_t n = std::min(opt.per_task, eval.items.size());
  for (std::size_t ti = 0; ti < opt.tasks.size(); ++ti) {
    const auto task = opt.tasks[ti];
    TaskMetrics acc;
    for (std::size_t start = 0; start < n; start += opt.batch) {
      std::vector<data::TaskInstance> in;
      for (std::size_t i = start; i < std::min(n, start + opt.batch); ++i)
        in.push_back(data::make_task(eval.items[i], task));
      const auto batch = data::assemble<double>(in);
      const auto images = generate(batch, opt.sample.seed + 1000 * ti + start);
      if (images.shape() != batch.target.shape()) throw DimensionError("evaluate: generator returned wrong shape");
      const std::size_t per = batch.target.numel() / in.size();
      for (std::size_t i = 0; i < in.size(); ++i) {
        const auto m = score(images.span().subspan(i * per, per), batch.target.span().subspan(i * per, per),
                             batch.mask.span().subspan(i * per, per));
        acc.count += 1;
        acc.masked_mse += m.masked_mse;
        acc.masked_cosine += m.masked_cosine;
        acc.full_mse += m.full_mse;
      }
    }
    const double c = static_cast<double>(acc.count);
    acc.masked_mse /= c;
    acc.masked_cosine /= c;
    acc.full_mse /= c;
    r.tasks[data::to_string(task)] = acc;
    if (task == data::Task::tryoff) r.tryoff_garment_mse = acc.masked_mse;
  }
  return r;
}

template <typename T>
EvalReport evaluate(const model::ToyDiTParams<T>& params, const data::Dataset& eval, const EvalOptions& opt) {
  const Generator gen = [&](const data::TaskBatch<double>& b, std::uint64_t seed) {
    std::vector<Tensor<T>> conds;
    for (const auto& c : b.conditions) conds.push_back(c.template cast<T>());
    auto cfg = opt.sample;
    cfg.seed = seed;
    return sampler::sample<T>(params, conds, b.text_ids, cfg).image.template cast<double>();
  };
  return evaluate_with(gen, eval, opt);
}

#define OMNIDIT_TRAINER_INSTANTIATE(T)                                                                          \
  template TrainState<T> init_state<T>(const TrainConfig&);                                                     \
  template GradClip clip_gradients<T>(const std::vector<ad::Var<T>>&, double);                                  \
  template void adamw_update<T>(const std::vector<ad::Var<T>>&, AdamState<T>&, const AdamWConfig&, double);     \
  template MetricsRow train_step<T>(TrainState<T>&, const data::Dataset&, const objective::FeatureExtractor<T>&); \
  template TrainResult<T> train<T>(TrainState<T>, const data::Dataset&, const TrainOptions&);                   \
  template void save_checkpoint<T>(const std::filesystem::path&, const TrainState<T>&);                         \
  template TrainState<T> load_checkpoint<T>(const std::filesystem::path&);                                      \
  template EvalReport evaluate<T>(const model::ToyDiTParams<T>&, const data::Dataset&, const EvalOptions&);

OMNIDIT_TRAINER_INSTANTIATE(float)
OMNIDIT_TRAINER_INSTANTIATE(double)

}  // namespace omnidit::trainer
