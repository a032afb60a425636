#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "support.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run cli(const std::string& args, const std::string& env = "") {
  const auto log = fs::temp_directory_path() / "omnidit_cli_out.txt";
  const std::string cmd = env + (env.empty() ? "" : " ") + "\"" OMNIDIT_CLI_PATH "\" " + args + " > \"" +
                          log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream f(log);
  std::stringstream ss;
  ss << f.rdbuf();
  r.output = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

nlohmann::json json_of(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

}  // namespace

TEST_CASE("usage errors exit with 2") {
  auto none = cli("");
  CHECK(none.code == 2);
  CHECK(none.output.find("gen-data") != std::string::npos);
  CHECK(cli("frobnicate").code == 2);
  CHECK(cli("analyze").code == 2);
  auto missing = cli("evaluate");
  CHECK(missing.code == 2);
  CHECK(missing.output.find("--checkpoint") != std::string::npos);
  CHECK(cli("--dtype f16 model info").code == 2);
  CHECK(cli("--help").code == 0);
}

TEST_CASE("runtime failures exit with 1") {
  const auto dir = omnidit::testing::temp_dir("omnidit_cli_fail");
  auto r = cli("--out " + q(dir) + " sample --task nonsense --count 1 --steps 1");
  CHECK(r.code == 1);
  CHECK(r.output.find("nonsense") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("attention benchmark reports the closed-form FLOP ratio") {
  const auto dir = omnidit::testing::temp_dir("omnidit_cli_bench");
  auto r = cli("--quiet --out " + q(dir) + " bench attn --ref-tokens 4096 --window 16 --reps 1");
  REQUIRE(r.code == 0);
  std::ifstream f(dir / "bench_attn.csv");
  std::string header, line;
  std::getline(f, header);
  std::getline(f, line);
  CHECK(header.rfind("ref_tokens,M,flops_windowed,flops_full,flops_ratio", 0) == 0);
  std::vector<std::string> cols;
  std::stringstream ss(line);
  for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
  REQUIRE(cols.size() == 7);
  CHECK(cols[0] == "4096");
  CHECK(std::stod(cols[4]) == doctest::Approx(256.0 / 4096).epsilon(1e-12));
  CHECK(fs::exists(dir / "run.json"));
  fs::remove_all(dir);
}

TEST_CASE("model info and layout dump") {
  const auto dir = omnidit::testing::temp_dir("omnidit_cli_info");
  REQUIRE(cli("--quiet --out " + q(dir) + " model info").code == 0);
  const auto m = json_of(dir / "model.json");
  CHECK(m["params"]["total"].get<std::size_t>() > 0);
  REQUIRE(cli("--quiet --out " + q(dir) + " layout dump --noisy 4x4 --refs 2x2 4x4 --text 3 --window 2").code == 0);
  const auto l = json_of(dir / "layout.json");
  CHECK(l["windows"].size() == 2);
  CHECK(json_of(dir / "run.json")["command"] == "layout dump");
  fs::remove_all(dir);
}

TEST_CASE("train, sample, evaluate and replay") {
  const auto dir = omnidit::testing::temp_dir("omnidit_cli_train");
  nlohmann::json cfg = {{"model", {{"image_size", 16}, {"dim", 16}, {"heads", 2}, {"depth", 2}, {"window_size", 2}, {"time_freq", 8}}},
                        {"stages", {{{"stage", 1}, {"steps", 3}, {"batch", 2}}, {{"stage", 2}, {"steps", 3}, {"batch", 2}}}},
                        {"dataset_size", 8}};
  {
    std::ofstream f(dir / "cfg.json");
    f << cfg.dump();
  }
  const auto a = dir / "a", b = dir / "b";
  auto tr = cli("--quiet --threads 1 --seed 3 --config " + q(dir / "cfg.json") + " --out " + q(a) + " train");
  REQUIRE(tr.code == 0);
  CHECK(fs::exists(a / "checkpoint"));
  CHECK(fs::exists(a / "metrics.csv"));
  const auto run = json_of(a / "run.json");
  CHECK(run["seed"] == 3);
  CHECK(run["config"]["stages"][0]["steps"] == 3);

  REQUIRE(cli("--quiet --out " + q(b) + " replay " + q(a / "run.json")).code == 0);
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  for (const auto& e : fs::directory_iterator(a / "checkpoint"))
    CHECK(slurp(e.path()) == slurp(b / "checkpoint" / e.path().filename()));

  const auto s = dir / "s", s2 = dir / "s2";
  auto sr = cli("--quiet --threads 1 --seed 5 --out " + q(s) + " sample --checkpoint " + q(a / "checkpoint") +
                " --task tryoff --count 2 --steps 3");
  REQUIRE(sr.code == 0);
  CHECK(fs::exists(s / "sample_1.ppm"));
  CHECK(json_of(s / "sample.json")["items"].size() == 2);
  REQUIRE(cli("--quiet --out " + q(s2) + " replay " + q(s / "run.json")).code == 0);
  CHECK(slurp(s / "samples.odt") == slurp(s2 / "samples.odt"));

  const auto e = dir / "e";
  REQUIRE(cli("--quiet --out " + q(e) + " evaluate --checkpoint " + q(a / "checkpoint") +
              " --per-task 2 --eval-size 2 --steps 2").code == 0);
  CHECK(json_of(e / "eval.json")["tasks"].size() == 3);
  fs::remove_all(dir);
}

TEST_CASE("analysis commands write their reports") {
  const auto dir = omnidit::testing::temp_dir("omnidit_cli_an");
  auto sc = cli("--quiet --out " + q(dir) + " analyze errdt --scalar --dts 1/2,1/4,1/8,1/16");
  REQUIRE(sc.code == 0);
  const auto j = json_of(dir / "errdt.json");
  CHECK(j["points"].size() == 4);
  CHECK(fs::exists(dir / "errdt.svg"));
  CHECK(cli("--quiet --out " + q(dir) + " analyze errdt --scalar --dts 1/2,1/4").code == 1);
  nlohmann::json model = {{"image_size", 16}, {"dim", 16}, {"heads", 2}, {"depth", 2}, {"window_size", 2}, {"time_freq", 8}};
  {
    std::ofstream f(dir / "m.json");
    f << model.dump();
  }
  REQUIRE(cli("--quiet --config " + q(dir / "m.json") + " --out " + q(dir) +
              " analyze lipschitz --pairs 200 --items 3 --steps 3 --eval-size 3").code == 0);
  CHECK(json_of(dir / "lipschitz.json")["n_pairs"] == 200);
  REQUIRE(cli("--quiet --config " + q(dir / "m.json") + " --out " + q(dir) +
              " analyze smoothness --samples 20 --eval-size 4").code == 0);
  CHECK(json_of(dir / "smoothness.json")["violations"] == 0);
  CHECK(cli("--quiet --out " + q(dir) + " analyze compare --seeds 0").code == 1);
  fs::remove_all(dir);
}

TEST_CASE("seed from the environment, flag wins") {
  const auto dir = omnidit::testing::temp_dir("omnidit_cli_seed");
  REQUIRE(cli("--quiet --out " + q(dir / "env") + " gen-data --size 2 --eval-size 0", "OMNIDIT_SEED=17").code == 0);
  CHECK(json_of(dir / "env" / "run.json")["seed"] == 17);
  CHECK(json_of(dir / "env" / "train" / "manifest.json")["seed"] == 17);
  REQUIRE(cli("--quiet --seed 4 --out " + q(dir / "flag") + " gen-data --size 2 --eval-size 0", "OMNIDIT_SEED=17").code ==
          0);
  CHECK(json_of(dir / "flag" / "run.json")["seed"] == 4);
  fs::remove_all(dir);
}
