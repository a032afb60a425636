#include <doctest.h>

#include <fstream>
#include <numeric>

#include "omnidit/trainer.hpp"
#include "support.hpp"

using namespace omnidit;
using namespace omnidit::trainer;

namespace {

TrainConfig tiny(std::size_t s1 = 3, std::size_t s2 = 3) {
  TrainConfig c;
  c.model.image_size = 16;
  c.model.dim = 16;
  c.model.heads = 2;
  c.model.depth = 2;
  c.model.window_size = 2;
  c.model.time_freq = 8;
  c.stages = {{1, s1, {}, 2, 1e-3}, {2, s2, {}, 2, 1e-3}};
  c.dataset_size = 8;
  c.seed = 4;
  return c;
}

template <typename T>
std::vector<Tensor<T>> values(const model::ToyDiTParams<T>& p) {
  std::vector<Tensor<T>> out;
  for (const auto& v : p.list()) out.push_back(v.value());
  return out;
}

}  // namespace

TEST_CASE("config schedule, validation and serialisation") {
  auto c = tiny(5, 7);
  CHECK(c.total_steps() == 12);
  CHECK(c.locate(0) == std::pair<std::size_t, std::size_t>{0, 0});
  CHECK(c.locate(4) == std::pair<std::size_t, std::size_t>{0, 4});
  CHECK(c.locate(5) == std::pair<std::size_t, std::size_t>{1, 0});
  CHECK(c.locate(11) == std::pair<std::size_t, std::size_t>{1, 6});
  CHECK_THROWS_AS(c.locate(12), std::out_of_range);

  const auto j = to_json(c);
  CHECK(to_json(train_config_from_json(j)) == j);
  CHECK(config_hash(train_config_from_json(j)) == config_hash(c));
  auto d = c;
  d.loss.k = 3;
  CHECK(config_hash(d) != config_hash(c));
  auto unknown = j;
  unknown["bogus"] = 1;
  CHECK_THROWS_AS(train_config_from_json(unknown), std::invalid_argument);

  auto bad = c;
  bad.stages[0].tasks = {data::Task::model_based};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.loss.k = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.stages[1].lr = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = c;
  bad.model.text_vocab = 4;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("metrics line format") {
  MetricsRow r;
  r.step = 3;
  r.l_mtp = 0.5;
  r.l_align = 0.25;
  r.total = 0.525;
  r.grad_norm = 2;
  r.lr = 0.001;
  r.stage = 2;
  const auto line = metrics_line(r);
  CHECK(std::count(line.begin(), line.end(), ',') == 6);
  CHECK(line.rfind("3,", 0) == 0);
  CHECK(line.substr(line.size() - 2) == ",2");
}

TEST_CASE("gradient clipping and the AdamW update") {
  auto a = ad::Var<double>::leaf(Tensor<double>({2}, {1.0, 2.0}));
  auto b = ad::Var<double>::leaf(Tensor<double>({1}, {3.0}));
  std::vector<ad::Var<double>> ps = {a, b};
  Rng rng(1, 1);
  for (int rep = 0; rep < 50; ++rep) {
    for (auto& p : ps) p.zero_grad();
    auto w = testing::random_tensor({2}, rng, -50, 50);
    ad::backward(ad::add(ad::sum(ad::mul(a, ad::Var<double>::constant(w))), ad::scale(ad::sum(b), rng.uniform(-9, 9))));
    const auto c = clip_gradients<double>(ps, 1.0);
    const double after = ad::grad_norm<double>(ps);
    if (c.clipped) CHECK(after <= 1.0 + 1e-9);
    else CHECK(after == c.norm);
  }
  for (auto& p : ps) p.zero_grad();
  ad::backward(ad::scale(ad::sum(a), 0.1));
  CHECK_FALSE(clip_gradients<double>(ps, 1.0).clipped);

  // One AdamW step from zero moments moves each weight by lr * sign(g) after decay.
  AdamState<double> st;
  st.m = {{0, 0}, {0}};
  st.v = {{0, 0}, {0}};
  AdamWConfig cfg;
  adamw_update<double>(ps, st, cfg, 0.01);
  CHECK(st.t == 1);
  CHECK(a.value()[0] == doctest::Approx(1.0 * (1 - 0.01 * 0.01) - 0.01).epsilon(1e-9));
  CHECK(b.value()[0] == doctest::Approx(3.0 * (1 - 0.01 * 0.01)).epsilon(1e-12));
  AdamState<double> wrong;
  CHECK_THROWS_AS(adamw_update<double>(ps, wrong, cfg, 0.01), std::invalid_argument);
}

TEST_CASE("zero steps leave the initial parameters in the checkpoint") {
  auto c = tiny(0, 0);
  const auto dir = testing::temp_dir("omnidit_train0");
  TrainOptions o;
  o.out = dir;
  auto r = train<double>(init_state<double>(c), training_data(c), o);
  CHECK(r.finished);
  CHECK(r.metrics.empty());
  auto back = load_checkpoint<double>(dir / "checkpoint");
  CHECK(back.step == 0);
  CHECK(values(back.params) == values(init_state<double>(c).params));
  std::filesystem::remove_all(dir);
}

TEST_CASE("resume replays the uninterrupted run bitwise") {
  auto c = tiny(3, 3);
  const auto data = training_data(c);
  const auto full = train<float>(init_state<float>(c), data);
  REQUIRE(full.metrics.size() == 6);

  for (std::size_t cut : {1, 3, 4}) {
    const auto dir = testing::temp_dir("omnidit_resume");
    TrainOptions o;
    o.out = dir;
    o.stop_at = cut;
    auto first = train<float>(init_state<float>(c), data, o);
    CHECK_FALSE(first.finished);
    auto resumed = load_checkpoint<float>(dir / "checkpoint");
    CHECK(resumed.step == cut);
    o.stop_at = std::numeric_limits<std::size_t>::max();
    auto rest = train<float>(std::move(resumed), data, o);
    CHECK(rest.finished);
    std::vector<double> seq;
    for (const auto& m : first.metrics) seq.push_back(m.total);
    for (const auto& m : rest.metrics) seq.push_back(m.total);
    std::vector<double> ref;
    for (const auto& m : full.metrics) ref.push_back(m.total);
    CHECK(seq == ref);
    CHECK(values(rest.state.params) == values(full.state.params));
    CHECK(rest.state.opt.m == full.state.opt.m);

    std::ifstream csv(dir / "metrics.csv");
    std::string line;
    std::size_t lines = 0;
    std::getline(csv, line);
    CHECK(line == kMetricsHeader);
    while (std::getline(csv, line)) ++lines;
    CHECK(lines == 6);
    std::filesystem::remove_all(dir);
  }

  // A float checkpoint loads as double.
  const auto dir = testing::temp_dir("omnidit_cast");
  save_checkpoint(dir, full.state);
  auto d = load_checkpoint<double>(dir);
  CHECK(d.params.list()[0].value()[0] == static_cast<double>(full.state.params.list()[0].value()[0]));
  auto other = full.state;
  other.config.seed = 99;
  save_checkpoint(dir, other);
  std::filesystem::remove_all(dir);
}

TEST_CASE("stage transition happens exactly at the configured step") {
  auto c = tiny(4, 3);
  c.cfg_dropout = 0;
  auto r = train<float>(init_state<float>(c), training_data(c));
  REQUIRE(r.metrics.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(r.metrics[i].step == i);
    CHECK(r.metrics[i].stage == (i < 4 ? 1 : 2));
  }
  // Stage 2, local step 1 is the first pair batch at ratio 1:1; l_align and
  // l_mtp come from the same two-condition batch in both runs.
  auto only2 = c;
  only2.stages = {{2, 3, {}, 2, 1e-3}};
  auto s = train<float>(init_state<float>(only2), training_data(only2));
  CHECK(s.metrics[0].stage == 2);
}

TEST_CASE("divergence keeps the last good checkpoint") {
  auto c = tiny(5, 0);
  c.stages.pop_back();
  c.stages[0].lr = 1e30;
  c.clip = 1e30;
  const auto dir = testing::temp_dir("omnidit_diverge");
  TrainOptions o;
  o.out = dir;
  std::size_t at = 0;
  try {
    train<float>(init_state<float>(c), training_data(c), o);
  } catch (const TrainingDiverged& e) {
    at = e.step();
  }
  REQUIRE(at > 0);
  auto ck = load_checkpoint<float>(dir / "checkpoint");
  CHECK(ck.step == at);
  std::filesystem::remove_all(dir);
}

TEST_CASE("one step makes the field depend on time") {
  auto c = tiny(1, 0);
  c.stages.pop_back();
  auto st = init_state<double>(c);
  const auto data = training_data(c);
  auto inst = data::make_task(data.items[0], data::Task::model_free);
  auto field = sampler::model_field<double>(st.params, {inst.conditions[0].reshaped({1, 3, 16, 16})}, {inst.text_ids});
  auto x = sampler::noise<double>({1, 3, 16, 16}, 1);
  CHECK(field(x, 0.2) == field(x, 0.8));
  auto r = train<double>(std::move(st), data);
  auto trained = sampler::model_field<double>(r.state.params, {inst.conditions[0].reshaped({1, 3, 16, 16})}, {inst.text_ids});
  CHECK_FALSE(trained(x, 0.2) == trained(x, 0.8));
}

TEST_CASE("training lowers the loss") {
  auto c = tiny(150, 0);
  c.stages.pop_back();
  c.stages[0].batch = 4;
  c.stages[0].lr = 3e-3;
  auto r = train<float>(init_state<float>(c), training_data(c));
  auto mean = [&](std::size_t from, std::size_t to) {
    double s = 0;
    for (std::size_t i = from; i < to; ++i) s += r.metrics[i].total;
    return s / static_cast<double>(to - from);
  };
  CHECK(mean(130, 150) < mean(0, 20));
}

TEST_CASE("scores and reports") {
  std::vector<double> a = {1, 2, 3, 4}, b = {1, 2, 0, 0}, m = {1, 1, 0, 0};
  auto s = score(a, b, m);
  CHECK(s.masked_mse == 0.0);
  CHECK(s.masked_cosine == doctest::Approx(1.0));
  CHECK(s.full_mse == doctest::Approx(25.0 / 4));
  std::vector<double> z = {0, 0, 0, 0};
  CHECK(score(a, b, z).masked_mse == 0.0);
  CHECK_THROWS_AS(score(a, std::vector<double>{1.0}, m), DimensionError);

  const auto eval = data::generate_eval(2, 6);
  const Generator oracle = [](const data::TaskBatch<double>& b, std::uint64_t) { return b.target; };
  EvalOptions o;
  o.per_task = 6;
  o.batch = 4;
  const auto rep = evaluate_with(oracle, eval, o);
  REQUIRE(rep.tasks.size() == 3);
  for (const auto& [name, tm] : rep.tasks) {
    CHECK(tm.count == 6);
    CHECK(tm.masked_mse == 0.0);
    CHECK(tm.full_mse == 0.0);
    CHECK(tm.masked_cosine == doctest::Approx(1.0));
  }
  CHECK(rep.tryoff_garment_mse == 0.0);
  CHECK(eval_report_from_json(to_json(rep)) == rep);
  CHECK(eval_report_from_json(nlohmann::json::parse(to_json(rep).dump())) == rep);

  auto c = tiny();
  auto p = init_state<float>(c).params;
  EvalOptions small;
  small.per_task = 2;
  small.sample.steps = 2;
  const auto r1 = evaluate<float>(p, eval, small), r2 = evaluate<float>(p, eval, small);
  CHECK(r1 == r2);
  CHECK(r1.steps == 2);
  CHECK(r1.tasks.at("tryoff").masked_mse > 0);
}
