// omnidit: data generation, training, sampling, analysis and benchmarks.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "omnidit/analysis.hpp"
#include "omnidit/attention.hpp"
#include "omnidit/data.hpp"
#include "omnidit/kernels.hpp"
#include "omnidit/layout.hpp"
#include "omnidit/log.hpp"
#include "omnidit/model.hpp"
#include "omnidit/odt.hpp"
#include "omnidit/rng.hpp"
#include "omnidit/sampler.hpp"
#include "omnidit/trainer.hpp"

using namespace omnidit;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Global {
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string config;
  bool quiet = false;
  std::string dtype = "f32";
  int threads = 0;
  std::vector<std::string> argv;
};

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  return json::parse(f);
}

void write_json(const fs::path& p, const json& j) { analysis::write_text(p, j.dump(2) + "\n"); }

// A config file may hold a full training config or just the model section.
trainer::TrainConfig train_config(const Global& g) {
  trainer::TrainConfig c;
  if (!g.config.empty()) c = trainer::train_config_from_json(read_json(g.config));
  return c;
}

model::ModelConfig model_config(const Global& g) {
  if (g.config.empty()) return {};
  const auto j = read_json(g.config);
  return model::config_from_json(j.contains("model") ? j.at("model") : j);
}

void write_run(const Global& g, const std::string& command, const json& resolved) {
  json argv = g.argv;
  write_json(fs::path(g.out) / "run.json", {{"version", OMNIDIT_VERSION},
                                            {"command", command},
                                            {"argv", argv},
                                            {"seed", g.seed},
                                            {"dtype", g.dtype},
                                            {"threads", g.threads},
                                            {"config", resolved}});
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoull(item));
  }
  return out;
}

std::vector<double> parse_dts(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto slash = item.find('/');
    out.push_back(slash == std::string::npos ? std::stod(item)
                                             : std::stod(item.substr(0, slash)) / std::stod(item.substr(slash + 1)));
  }
  return out;
}

layout::Grid parse_grid(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw CLI::ValidationError("grid '" + s + "' is not WxH");
  return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
}

// Near-square grid holding exactly n tokens.
layout::Grid grid_for(std::size_t n) {
  std::size_t h = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  while (h > 1 && n % h) --h;
  return {n / h, h};
}

template <typename T>
model::ToyDiTParams<T> load_params(const std::string& checkpoint, const Global& g) {
  if (checkpoint.empty()) {
    log::info("no checkpoint given; using freshly initialized parameters");
    return model::init<T>(model_config(g), g.seed);
  }
  return trainer::load_checkpoint<T>(checkpoint).params;
}

// ----------------------------------------------------------------- gen-data

struct GenDataArgs {
  std::size_t size = 512, eval_size = 64, image_size = 16;
  bool ppm = false;
};

void run_gen_data(const Global& g, const GenDataArgs& a) {
  const auto train = data::generate(g.seed, a.size, a.image_size);
  data::save(train, fs::path(g.out) / "train", a.ppm);
  if (a.eval_size) data::save(data::generate_eval(g.seed, a.eval_size, a.image_size), fs::path(g.out) / "eval", a.ppm);
  write_run(g, "gen-data", {{"size", a.size}, {"eval_size", a.eval_size}, {"image_size", a.image_size}, {"ppm", a.ppm}});
  log::info("wrote " + std::to_string(a.size) + " training and " + std::to_string(a.eval_size) + " eval triplets");
}

// -------------------------------------------------------------------- train

struct TrainArgs {
  std::string resume, data_dir;
  long steps1 = -1, steps2 = -1, k = -1;
  double lambda = -1;
};

template <typename T>
void run_train(const Global& g, const TrainArgs& a) {
  trainer::TrainState<T> state;
  if (!a.resume.empty()) {
    state = trainer::load_checkpoint<T>(a.resume);
    log::info("resuming at step " + std::to_string(state.step));
  } else {
    auto cfg = train_config(g);
    cfg.seed = g.seed;
    if (a.k > 0) cfg.loss.k = static_cast<std::size_t>(a.k);
    if (a.lambda >= 0) cfg.loss.lambda = a.lambda;
    if (a.steps1 >= 0 && !cfg.stages.empty()) cfg.stages[0].steps = static_cast<std::size_t>(a.steps1);
    if (a.steps2 >= 0 && cfg.stages.size() > 1) cfg.stages[1].steps = static_cast<std::size_t>(a.steps2);
    state = trainer::init_state<T>(cfg);
  }
  const auto& cfg = state.config;
  data::Dataset ds = a.data_dir.empty() ? trainer::training_data(cfg) : data::load(a.data_dir);
  write_run(g, "train", trainer::to_json(cfg));
  trainer::TrainOptions opt;
  opt.out = g.out;
  const std::size_t total = cfg.total_steps();
  opt.on_step = [total](const trainer::MetricsRow& r) {
    if ((r.step + 1) % 100 == 0 || r.step + 1 == total)
      log::info("step " + std::to_string(r.step + 1) + "/" + std::to_string(total) + " stage " +
                std::to_string(r.stage) + " loss " + std::to_string(r.total));
  };
  auto res = trainer::train<T>(std::move(state), ds, opt);
  log::info("checkpoint written to " + (fs::path(g.out) / "checkpoint").string());
}

// ------------------------------------------------------------------- sample

struct SampleArgs {
  std::string checkpoint, task = "model_based";
  std::size_t count = 4, steps = 30, eval_size = 64;
  double guidance = 4.0;
  bool trajectory = false;
};

template <typename T>
void run_sample(const Global& g, const SampleArgs& a) {
  const auto params = load_params<T>(a.checkpoint, g);
  const auto eval = data::generate_eval(g.seed, std::max(a.count, a.eval_size), params.config.image_size);
  const auto task = data::task_from_string(a.task);
  std::vector<data::TaskInstance> in;
  for (std::size_t i = 0; i < a.count; ++i) in.push_back(data::make_task(eval.items[i], task));
  const auto batch = data::assemble<T>(in);
  sampler::SampleConfig sc;
  sc.steps = a.steps;
  sc.guidance = a.guidance;
  sc.seed = g.seed;
  sc.record_trajectory = a.trajectory;
  const auto res = sampler::sample<T>(params, batch.conditions, batch.text_ids, sc);
  const auto image = res.image.template cast<double>();
  const auto target = batch.target.template cast<double>();
  const auto mask = batch.mask.template cast<double>();
  const std::size_t per = image.numel() / a.count;
  const Shape one{params.config.channels, params.config.image_size, params.config.image_size};
  json items = json::array();
  for (std::size_t i = 0; i < a.count; ++i) {
    Tensor<double> img(one, std::vector<double>(image.data() + i * per, image.data() + (i + 1) * per));
    Tensor<double> tgt(one, std::vector<double>(target.data() + i * per, target.data() + (i + 1) * per));
    data::write_ppm(fs::path(g.out) / ("sample_" + std::to_string(i) + ".ppm"), img);
    data::write_ppm(fs::path(g.out) / ("target_" + std::to_string(i) + ".ppm"), tgt);
    const auto m = trainer::score(img.span(), tgt.span(), mask.span().subspan(i * per, per));
    items.push_back({{"index", i}, {"masked_mse", m.masked_mse}, {"masked_cosine", m.masked_cosine}, {"full_mse", m.full_mse}});
  }
  odt::write(fs::path(g.out) / "samples.odt", res.image);
  if (res.trajectory) {
    const auto& tr = *res.trajectory;
    Shape s{tr.x.size()};
    s.insert(s.end(), tr.x[0].shape().begin(), tr.x[0].shape().end());
    Tensor<T> stack(s);
    for (std::size_t k = 0; k < tr.x.size(); ++k)
      std::copy(tr.x[k].data(), tr.x[k].data() + tr.x[k].numel(), stack.data() + k * tr.x[k].numel());
    odt::write(fs::path(g.out) / "trajectory.odt", stack);
  }
  const json cfg = {{"checkpoint", a.checkpoint}, {"task", a.task},         {"count", a.count},
                    {"steps", a.steps},           {"guidance", a.guidance}, {"trajectory", a.trajectory}};
  write_json(fs::path(g.out) / "sample.json", {{"config", cfg}, {"seed", g.seed}, {"items", items}});
  write_run(g, "sample", cfg);
}

// ------------------------------------------------------------------ analyze

struct AnalyzeArgs {
  std::string checkpoint, mode = "mixed", dts = "1/8,1/16,1/32,1/64,1/128", seeds = "0,1,2", task = "model_based";
  std::size_t pairs = 10000, items = 16, samples = 1000, k = 2, k_ssp = 1, k_mtp = 2, eval_size = 64, steps = 30;
  double dt = 0.03, guidance = 1.0;
  bool scalar = false, ratios = false, with_errdt = false;
};

template <typename T>
void run_lipschitz(const Global& g, const AnalyzeArgs& a) {
  const auto params = load_params<T>(a.checkpoint, g);
  const auto eval = data::generate_eval(g.seed, std::max(a.items, a.eval_size), params.config.image_size);
  analysis::ChainOptions co;
  co.items = a.items;
  co.steps = a.steps;
  co.guidance = a.guidance;
  co.seed = g.seed;
  analysis::LipschitzOptions lo;
  lo.n_pairs = a.pairs;
  lo.seed = g.seed;
  lo.mode = analysis::pair_mode_from_string(a.mode);
  const auto chains = analysis::model_chains<T>(params, eval, co);
  const auto field = lo.mode == analysis::PairMode::equal_state ? analysis::model_point_field<T>(params, eval, co)
                                                                 : analysis::PointField{};
  const auto est = analysis::estimate_lipschitz(chains, lo, field);
  write_json(fs::path(g.out) / "lipschitz.json", analysis::to_json(est, a.ratios));
  std::ostringstream csv;
  csv.precision(17);
  csv << "pair,adjacent,ratio\n";
  for (std::size_t i = 0; i < est.ratios.size(); ++i) csv << i << ',' << int(est.adjacent[i]) << ',' << est.ratios[i] << '\n';
  analysis::write_text(fs::path(g.out) / "lipschitz.csv", csv.str());
  analysis::Series adj{"adjacent", {}, {}}, rnd{"random", {}, {}};
  for (std::size_t i = 0; i < est.ratios.size(); ++i) (est.adjacent[i] ? adj : rnd).y.push_back(est.ratios[i]);
  std::vector<analysis::Series> ss;
  for (auto* s : {&adj, &rnd})
    if (!s->y.empty()) ss.push_back(*s);
  analysis::write_text(fs::path(g.out) / "lipschitz.svg",
                       analysis::svg_cdf_plot("Lipschitz ratio distribution", ss, "ratio"));
  write_run(g, "analyze lipschitz",
            {{"checkpoint", a.checkpoint}, {"pairs", a.pairs}, {"items", a.items}, {"mode", a.mode},
             {"steps", a.steps}, {"guidance", a.guidance}, {"eval_size", a.eval_size}});
  std::cout << "L_hat " << est.l_hat << "\n";
}

template <typename T>
void run_smoothness(const Global& g, const AnalyzeArgs& a) {
  const auto params = load_params<T>(a.checkpoint, g);
  const auto eval = data::generate_eval(g.seed, a.eval_size, params.config.image_size);
  const auto rep = analysis::measure_smoothness<T>(params, eval, a.k, a.dt, a.samples, g.seed);
  write_json(fs::path(g.out) / "smoothness.json", analysis::to_json(rep));
  std::ostringstream csv;
  csv.precision(17);
  csv << "step,l_ssp,l_ssp_se\n";
  for (std::size_t k = 0; k < rep.l_ssp.size(); ++k) csv << k << ',' << rep.l_ssp[k] << ',' << rep.l_ssp_se[k] << '\n';
  analysis::write_text(fs::path(g.out) / "smoothness.csv", csv.str());
  write_run(g, "analyze smoothness",
            {{"checkpoint", a.checkpoint}, {"k", a.k}, {"dt", a.dt}, {"samples", a.samples}, {"eval_size", a.eval_size}});
  std::cout << "R_smooth " << rep.r_smooth << " violations " << rep.violations << "/" << rep.pairs_checked
            << (rep.no_adjacent_pairs ? " (no adjacent pairs)" : "") << "\n";
}

template <typename T>
void run_errdt(const Global& g, const AnalyzeArgs& a) {
  const auto dts = parse_dts(a.dts);
  analysis::ErrorCurve curve;
  if (a.scalar) {
    // dx/dt = x^2 from x(1) = 0.5 has x(0) = 1/3.
    const sampler::Field<T> v = [](const Tensor<T>& x, double) {
      Tensor<T> out(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * x[i];
      return out;
    };
    curve = analysis::error_vs_dt<T>(v, Tensor<T>(Shape{1}, T(0.5)), dts, Tensor<T>(Shape{1}, T(1.0 / 3.0)));
  } else {
    const auto params = load_params<T>(a.checkpoint, g);
    const auto eval = data::generate_eval(g.seed, std::max(a.items, a.eval_size), params.config.image_size);
    analysis::ErrDtOptions eo;
    eo.items = a.items;
    eo.task = data::task_from_string(a.task);
    eo.guidance = a.guidance;
    eo.seed = g.seed;
    curve = analysis::model_error_vs_dt<T>(params, eval, dts, eo);
  }
  write_json(fs::path(g.out) / "errdt.json", analysis::to_json(curve));
  std::ostringstream csv;
  csv.precision(17);
  csv << "dt,error,error_vs_data\n";
  analysis::Series s{"error", {}, {}};
  for (const auto& p : curve.points) {
    csv << p.dt << ',' << p.error << ',' << p.error_vs_data << '\n';
    s.x.push_back(p.dt);
    s.y.push_back(p.error);
  }
  analysis::write_text(fs::path(g.out) / "errdt.csv", csv.str());
  analysis::write_text(fs::path(g.out) / "errdt.svg", analysis::svg_line_plot("Euler error vs dt", {s}, true, true, "dt", "error"));
  write_run(g, "analyze errdt",
            {{"checkpoint", a.checkpoint}, {"dts", a.dts}, {"items", a.items}, {"task", a.task},
             {"guidance", a.guidance}, {"scalar", a.scalar}, {"eval_size", a.eval_size}});
  if (curve.exact) std::cout << "slope exact\n";
  else if (curve.slope) std::cout << "slope " << *curve.slope << "\n";
}

template <typename T>
void run_compare(const Global& g, const AnalyzeArgs& a) {
  analysis::CompareConfig cc;
  cc.base = train_config(g);
  cc.seeds = parse_seeds(a.seeds);
  cc.k_ssp = a.k_ssp;
  cc.k_mtp = a.k_mtp;
  cc.eval_size = a.eval_size;
  cc.eval_seed = g.seed;
  cc.chains.items = a.items;
  cc.chains.steps = a.steps;
  cc.chains.seed = g.seed;
  cc.lipschitz.n_pairs = a.pairs;
  cc.lipschitz.seed = g.seed;
  if (a.with_errdt) cc.dts = parse_dts(a.dts);
  const auto rep = analysis::compare_ssp_mtp<T>(cc, [](const std::string& m) { log::info("compare: training " + m); });
  write_json(fs::path(g.out) / "compare.json", analysis::to_json(rep));
  analysis::write_text(fs::path(g.out) / "compare.csv", analysis::to_csv(rep));
  analysis::Series ssp{"K=" + std::to_string(a.k_ssp), {}, {}}, mtp{"K=" + std::to_string(a.k_mtp), {}, {}};
  for (const auto& s : rep.seeds) {
    if (s.excluded()) continue;
    ssp.x.push_back(static_cast<double>(s.seed));
    ssp.y.push_back(s.ssp.l_hat);
    mtp.x.push_back(static_cast<double>(s.seed));
    mtp.y.push_back(s.mtp.l_hat);
  }
  analysis::write_text(fs::path(g.out) / "compare.svg",
                       analysis::svg_line_plot("Lipschitz estimate per seed", {ssp, mtp}, false, false, "seed", "L_hat"));
  json resolved = trainer::to_json(cc.base);
  resolved["seeds"] = cc.seeds;
  resolved["k_ssp"] = a.k_ssp;
  resolved["k_mtp"] = a.k_mtp;
  resolved["pairs"] = a.pairs;
  resolved["items"] = a.items;
  write_run(g, "analyze compare", resolved);
  std::cout << "median L_hat K=" << a.k_ssp << " " << rep.median_ssp << ", K=" << a.k_mtp << " " << rep.median_mtp
            << ", verdict " << (rep.verdict ? "true" : "false") << "\n";
}

// --------------------------------------------------------------------- bench

struct BenchArgs {
  std::string ref_tokens = "4096";
  std::size_t window = 16, noisy = 8, head_dim = 16, heads = 1, text = 5;
  int reps = 3;
};

template <typename T>
void run_bench_attn(const Global& g, const BenchArgs& a) {
  std::ostringstream csv;
  csv << "ref_tokens,M,flops_windowed,flops_full,flops_ratio,time_windowed_ns,time_full_ns\n";
  for (auto n : parse_seeds(a.ref_tokens)) {
    const layout::Grid noisy{a.noisy, a.noisy};
    const std::vector<layout::Grid> refs{grid_for(n)};
    const auto seq = layout::assign_positions(noisy, refs, a.text);
    const auto wplan = attention::plan_windows(seq, a.window, attention::Parity::regular);
    const auto fplan = attention::full_plan(seq);
    const auto fw = attention::flops(seq, wplan, a.heads, a.head_dim);
    const auto ff = attention::flops(seq, fplan, a.heads, a.head_dim);
    const auto mw = attention::build_mask(seq, wplan);
    const auto mf = attention::build_mask(seq, fplan);
    const std::size_t len = seq.total_len(), d = a.head_dim, groups = a.heads;
    Rng rng(g.seed, 0x62656e6368ULL);
    std::vector<T> q(groups * len * d), k(q.size()), v(q.size()), o(q.size());
    for (auto* buf : {&q, &k, &v})
      for (auto& x : *buf) x = static_cast<T>(rng.normal());
    auto time = [&](const attention::AttnMask& m) {
      std::vector<T> p(groups * m.rows.nnz());
      double best = 1e300;
      for (int r = 0; r < a.reps; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        kernels::parallel::sparse_attention<T>(groups, len, d, m.rows, static_cast<T>(1.0 / std::sqrt(double(d))),
                                               q.data(), k.data(), v.data(), o.data(), p.data());
        best = std::min(best, std::chrono::duration<double, std::nano>(std::chrono::steady_clock::now() - t0).count());
      }
      return static_cast<std::uint64_t>(best);
    };
    const auto tw = time(mw), tf = time(mf);
    csv << n << ',' << a.window << ',' << fw.condition_windowed << ',' << ff.condition_windowed << ','
        << static_cast<double>(fw.condition_windowed) / static_cast<double>(ff.condition_windowed) << ',' << tw << ','
        << tf << '\n';
  }
  analysis::write_text(fs::path(g.out) / "bench_attn.csv", csv.str());
  std::cout << csv.str();
  write_run(g, "bench attn",
            {{"ref_tokens", a.ref_tokens}, {"window", a.window}, {"noisy", a.noisy}, {"head_dim", a.head_dim},
             {"heads", a.heads}, {"text", a.text}, {"reps", a.reps}});
}

// --------------------------------------------------------- layout and model

struct LayoutArgs {
  std::string noisy = "8x8";
  std::vector<std::string> refs = {"8x8"};
  std::size_t text = 5, window = 4;
};

void run_layout(const Global& g, const LayoutArgs& a) {
  std::vector<layout::Grid> refs;
  for (const auto& r : a.refs) refs.push_back(parse_grid(r));
  const auto seq = layout::assign_positions(parse_grid(a.noisy), refs, a.text);
  json j = layout::to_json(seq);
  json windows = json::array();
  for (auto parity : {attention::Parity::regular, attention::Parity::shifted}) {
    const auto plan = attention::plan_windows(seq, a.window, parity);
    windows.push_back({{"parity", parity == attention::Parity::regular ? "regular" : "shifted"},
                       {"window_of", plan.window_of}});
  }
  j["windows"] = windows;
  write_json(fs::path(g.out) / "layout.json", j);
  write_run(g, "layout dump", {{"noisy", a.noisy}, {"refs", a.refs}, {"text", a.text}, {"window", a.window}});
}

void run_model_info(const Global& g) {
  const auto mc = model_config(g);
  mc.validate();
  const auto pc = model::count_params(mc);
  const json j = {{"config", model::to_json(mc)},
                  {"params", {{"embed", pc.embed}, {"blocks", pc.blocks}, {"final", pc.final}, {"total", pc.total()}}}};
  write_json(fs::path(g.out) / "model.json", j);
  write_run(g, "model info", model::to_json(mc));
  std::cout << j.dump(2) << "\n";
}

struct EvalArgs {
  std::string checkpoint;
  std::size_t per_task = 16, eval_size = 64, steps = 30;
  double guidance = 4.0;
};

template <typename T>
void run_evaluate(const Global& g, const EvalArgs& a) {
  const auto params = load_params<T>(a.checkpoint, g);
  const auto eval = data::generate_eval(g.seed, std::max(a.per_task, a.eval_size), params.config.image_size);
  trainer::EvalOptions eo;
  eo.per_task = a.per_task;
  eo.sample.steps = a.steps;
  eo.sample.guidance = a.guidance;
  eo.sample.seed = g.seed;
  const auto rep = trainer::evaluate<T>(params, eval, eo);
  write_json(fs::path(g.out) / "eval.json", trainer::to_json(rep));
  write_run(g, "evaluate",
            {{"checkpoint", a.checkpoint}, {"per_task", a.per_task}, {"eval_size", a.eval_size}, {"steps", a.steps},
             {"guidance", a.guidance}});
  std::cout << trainer::to_json(rep).dump(2) << "\n";
}

template <typename F>
void with_dtype(const Global& g, F&& f) {
  if (g.dtype == "f32") f(float{});
  else f(double{});
}

int dispatch(std::vector<std::string> args);

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(std::move(args));
}

namespace {

int dispatch(std::vector<std::string> args) {
  CLI::App app{"omnidit: toy multi-condition diffusion transformer for try-on and try-off", "omnidit"};
  app.require_subcommand(1);
  Global g;
  if (const char* env = std::getenv("OMNIDIT_SEED")) g.seed = std::stoull(env);
  app.add_option("--seed", g.seed, "Random seed (default: $OMNIDIT_SEED or 0)");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--config", g.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_flag("--quiet", g.quiet, "Only print errors");
  app.add_option("--dtype", g.dtype, "Floating-point type")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--threads", g.threads, "Worker threads (1 = fully deterministic)")->check(CLI::NonNegativeNumber);
  app.fallthrough();

  GenDataArgs gd;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a procedural try-on dataset");
  c_gen->add_option("--size", gd.size, "Training triplets");
  c_gen->add_option("--eval-size", gd.eval_size, "Held-out triplets");
  c_gen->add_option("--image-size", gd.image_size, "Image side (multiple of 16)");
  c_gen->add_flag("--ppm", gd.ppm, "Also write every image as PPM");

  TrainArgs ta;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--resume", ta.resume, "Checkpoint directory to resume from")->check(CLI::ExistingDirectory);
  c_train->add_option("--data", ta.data_dir, "Dataset directory (default: regenerate from the config)");
  c_train->add_option("--stage1-steps", ta.steps1, "Override stage-1 steps");
  c_train->add_option("--stage2-steps", ta.steps2, "Override stage-2 steps");
  c_train->add_option("--k", ta.k, "Override predicted timesteps K");
  c_train->add_option("--lambda", ta.lambda, "Override alignment weight");

  SampleArgs sa;
  auto* c_sample = app.add_subcommand("sample", "Generate images for held-out items");
  c_sample->add_option("--checkpoint", sa.checkpoint, "Checkpoint directory")->check(CLI::ExistingDirectory);
  c_sample->add_option("--task", sa.task, "model_based, model_free or tryoff");
  c_sample->add_option("--count", sa.count, "Images to generate")->check(CLI::PositiveNumber);
  c_sample->add_option("--steps", sa.steps, "Euler steps")->check(CLI::PositiveNumber);
  c_sample->add_option("--guidance", sa.guidance, "Guidance scale");
  c_sample->add_flag("--trajectory", sa.trajectory, "Write the state trajectory");

  AnalyzeArgs aa;
  auto* c_an = app.add_subcommand("analyze", "Smoothness and integration-error analyses");
  c_an->require_subcommand(1);
  auto add_common = [&](CLI::App* c) {
    c->add_option("--checkpoint", aa.checkpoint, "Checkpoint directory (default: fresh init)")
        ->check(CLI::ExistingDirectory);
    c->add_option("--eval-size", aa.eval_size, "Held-out items generated");
  };
  auto* c_lip = c_an->add_subcommand("lipschitz", "Estimate the Lipschitz constant of the velocity field");
  add_common(c_lip);
  c_lip->add_option("--pairs", aa.pairs, "State pairs (>= 100)");
  c_lip->add_option("--items", aa.items, "Eval items to sample trajectories for");
  c_lip->add_option("--steps", aa.steps, "Euler steps per trajectory");
  c_lip->add_option("--guidance", aa.guidance, "Guidance of the probed field");
  c_lip->add_option("--mode", aa.mode, "mixed, equal_time or equal_state");
  c_lip->add_flag("--ratios", aa.ratios, "Include every ratio in the JSON");
  auto* c_sm = c_an->add_subcommand("smoothness", "Measure the multi-step smoothness regularizer");
  add_common(c_sm);
  c_sm->add_option("--k", aa.k, "Predicted timesteps K");
  c_sm->add_option("--dt", aa.dt, "Step between predicted timesteps");
  c_sm->add_option("--samples", aa.samples, "Monte Carlo samples");
  auto* c_err = c_an->add_subcommand("errdt", "Euler integration error vs step size");
  add_common(c_err);
  c_err->add_option("--dts", aa.dts, "Comma-separated step sizes, e.g. 1/8,1/16");
  c_err->add_option("--items", aa.items, "Eval items");
  c_err->add_option("--task", aa.task, "Task of the probed field");
  c_err->add_option("--guidance", aa.guidance, "Guidance of the probed field");
  c_err->add_flag("--scalar", aa.scalar, "Use the closed-form scalar ODE dx/dt = x^2 instead of a model");
  auto* c_cmp = c_an->add_subcommand("compare", "Paired single-step vs multi-step trainings");
  c_cmp->add_option("--seeds", aa.seeds, "Comma-separated training seeds (>= 3)");
  c_cmp->add_option("--k-ssp", aa.k_ssp, "K of the single-step arm");
  c_cmp->add_option("--k-mtp", aa.k_mtp, "K of the multi-step arm");
  c_cmp->add_option("--pairs", aa.pairs, "State pairs per model");
  c_cmp->add_option("--items", aa.items, "Eval items per model");
  c_cmp->add_option("--steps", aa.steps, "Euler steps per trajectory");
  c_cmp->add_option("--eval-size", aa.eval_size, "Held-out items generated");
  c_cmp->add_option("--dts", aa.dts, "Step sizes for the error curves");
  c_cmp->add_flag("--with-errdt", aa.with_errdt, "Also fit error curves per model");

  BenchArgs ba;
  auto* c_bench = app.add_subcommand("bench", "Benchmarks");
  c_bench->require_subcommand(1);
  auto* c_battn = c_bench->add_subcommand("attn", "Windowed vs full condition attention");
  c_battn->add_option("--ref-tokens", ba.ref_tokens, "Comma-separated reference token counts");
  c_battn->add_option("--window", ba.window, "Window side M")->check(CLI::PositiveNumber);
  c_battn->add_option("--noisy", ba.noisy, "Noisy grid side");
  c_battn->add_option("--head-dim", ba.head_dim, "Head dimension");
  c_battn->add_option("--heads", ba.heads, "Heads");
  c_battn->add_option("--reps", ba.reps, "Timing repetitions (best of)");

  LayoutArgs la;
  auto* c_layout = app.add_subcommand("layout", "Sequence layout tools");
  c_layout->require_subcommand(1);
  auto* c_ldump = c_layout->add_subcommand("dump", "Write token positions and window assignment");
  c_ldump->add_option("--noisy", la.noisy, "Noisy grid WxH");
  c_ldump->add_option("--refs", la.refs, "Reference grids WxH")->expected(0, 8);
  c_ldump->add_option("--text", la.text, "Text tokens");
  c_ldump->add_option("--window", la.window, "Window side M");

  auto* c_model = app.add_subcommand("model", "Model tools");
  c_model->require_subcommand(1);
  auto* c_minfo = c_model->add_subcommand("info", "Print the resolved config and parameter counts");

  EvalArgs ea;
  auto* c_eval = app.add_subcommand("evaluate", "Score a checkpoint on held-out items");
  c_eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--per-task", ea.per_task, "Items per task");
  c_eval->add_option("--eval-size", ea.eval_size, "Held-out items generated");
  c_eval->add_option("--steps", ea.steps, "Euler steps");
  c_eval->add_option("--guidance", ea.guidance, "Guidance scale");

  std::string replay_run;
  auto* c_replay = app.add_subcommand("replay", "Re-run a command from its run.json");
  c_replay->add_option("run", replay_run, "run.json of the original run")->required()->check(CLI::ExistingFile);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }
  if (*c_replay) {
    try {
      const auto run = read_json(replay_run);
      auto argv = run.at("argv").get<std::vector<std::string>>();
      // Keep everything but the output directory, which comes from this call.
      std::vector<std::string> next;
      for (std::size_t i = 0; i < argv.size(); ++i) {
        if (argv[i] == "--out" && i + 1 < argv.size()) {
          ++i;
          continue;
        }
        if (argv[i].rfind("--out=", 0) == 0) continue;
        next.push_back(argv[i]);
      }
      next.insert(next.begin(), {"--out", g.out});
      return dispatch(next);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
  }

  g.argv = args;
  log::set_level(g.quiet ? log::Level::error : log::Level::info);
  if (g.threads > 0) kernels::set_threads(g.threads);
  try {
    fs::create_directories(g.out);
    if (*c_gen) run_gen_data(g, gd);
    else if (*c_train) with_dtype(g, [&](auto t) { run_train<decltype(t)>(g, ta); });
    else if (*c_sample) with_dtype(g, [&](auto t) { run_sample<decltype(t)>(g, sa); });
    else if (*c_lip) with_dtype(g, [&](auto t) { run_lipschitz<decltype(t)>(g, aa); });
    else if (*c_sm) with_dtype(g, [&](auto t) { run_smoothness<decltype(t)>(g, aa); });
    else if (*c_err) with_dtype(g, [&](auto t) { run_errdt<decltype(t)>(g, aa); });
    else if (*c_cmp) with_dtype(g, [&](auto t) { run_compare<decltype(t)>(g, aa); });
    else if (*c_battn) with_dtype(g, [&](auto t) { run_bench_attn<decltype(t)>(g, ba); });
    else if (*c_ldump) run_layout(g, la);
    else if (*c_minfo) run_model_info(g);
    else if (*c_eval) with_dtype(g, [&](auto t) { run_evaluate<decltype(t)>(g, ea); });
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace
