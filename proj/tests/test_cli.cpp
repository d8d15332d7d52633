#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "evoloop/cli.hpp"
#include "evoloop/coldstart.hpp"
#include "fixtures.hpp"

using namespace evoloop;
using namespace evoloop::cli;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("evoloop_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_of(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + needle.size())) ++n;
  return n;
}

RunConfig small_config() {
  RunConfig c;
  c.seed = 5;
  c.count = 12;
  c.group = 4;
  c.k = 4;
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(EVOLOOP_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* const kBundle[] = {"tasks.json",     "qa_report.json", "review.json",        "pool.jsonl",
                               "groups.jsonl",   "budgets.json",   "rft.jsonl",          "denoise_report.json",
                               "pairs.jsonl",    "pairs_skips.json", "stepo_metrics.json", "run_manifest.json"};

}  // namespace

TEST_CASE("config overlay rejects unknown keys and bad types") {
  const auto c = config_from_json({{"seed", 9}, {"group", 4}, {"spectrum", "2:0.5,4:0.25"}});
  CHECK(c.seed == 9);
  CHECK(c.group == 4);
  CHECK(c.count == RunConfig{}.count);
  CHECK_THROWS_AS(config_from_json({{"sed", 9}}), CliError);
  CHECK_THROWS_AS(config_from_json({{"group", "many"}}), CliError);
  const auto round = config_from_json(config_to_json(c));
  CHECK(config_to_json(round) == config_to_json(c));
  CHECK(stage_seed(1, "rollout") == stage_seed(1, "rollout"));
  CHECK(stage_seed(1, "rollout") != stage_seed(1, "budget"));
}

TEST_CASE("pipeline is deterministic") {
  const auto a = scratch("det_a"), b = scratch("det_b");
  const auto ra = run_pipeline(small_config(), a.string());
  const auto rb = run_pipeline(small_config(), b.string());
  REQUIRE(ra.exit_code == 0);
  REQUIRE(rb.exit_code == 0);
  for (const char* f : kBundle) {
    INFO(f);
    REQUIRE(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  CHECK(ra.manifest.at("artifacts").size() == 11);
  CHECK(ra.manifest.at("failed_stage").is_null());
  for (const auto& line : read_jsonl((a / "pairs.jsonl").string())) {
    const auto p = line.get<preference::PreferencePair>();
    CHECK((p.paradigm == "correction" || p.paradigm == "reflection"));
  }
  const auto metrics = read_json((a / "stepo_metrics.json").string());
  CHECK(metrics.is_object());
}

TEST_CASE("pipeline stops at rollout on a corrupt task file") {
  const auto dir = scratch("corrupt");
  { std::ofstream(dir / "bad.json") << "{ this is not json"; }
  auto cfg = small_config();
  cfg.tasks = (dir / "bad.json").string();
  const auto res = run_pipeline(cfg, (dir / "out").string());
  CHECK(res.exit_code != 0);
  CHECK(res.failed_stage == "rollout");
  CHECK(res.error.find("cannot parse tasks") != std::string::npos);
  const auto manifest = read_json((dir / "out" / "run_manifest.json").string());
  CHECK(manifest.at("failed_stage") == "rollout");
  CHECK_FALSE(fs::exists(dir / "out" / "pool.jsonl"));
}

TEST_CASE("inspect a 15-step trajectory") {
  Rng rng(3);
  auto f = fx::planted_fork(rng, 15, 14);
  const auto traj = coldstart::hindsight_annotate(f.ref, std::nullopt, coldstart::template_provider());
  REQUIRE(traj.steps.size() == 15);
  std::ostringstream text;
  inspect_trajectory(text, traj, &f.task, ReportFormat::text);
  CHECK(count_of(text.str(), "== frame ") == 15);
  CHECK(text.str().find("-- verdict: PASS") != std::string::npos);
  CHECK(text.str().find("replay verdict: PASS") != std::string::npos);
  CHECK(count_of(text.str(), "[MASKED]") == 0);

  std::ostringstream html;
  inspect_trajectory(html, traj, nullptr, ReportFormat::html);
  CHECK(count_of(html.str(), "<tr><td>") + count_of(html.str(), "<tr class=\"masked\">") == 15);
  CHECK(html.str().find("verdict: <b>PASS</b>") != std::string::npos);
}

TEST_CASE("inspect tags masked frames") {
  Rng rng(4);
  const auto r = fx::inject_redundancy(rng, 9);
  const auto dn = rft::denoise(r.traj, true);
  std::ostringstream text;
  inspect_trajectory(text, dn.trajectory, &r.task, ReportFormat::text);
  CHECK(count_of(text.str(), "[MASKED]") == dn.report.masked_indices.size());
  CHECK(count_of(text.str(), "== frame ") == r.traj.steps.size());
  std::ostringstream html;
  inspect_trajectory(html, dn.trajectory, &r.task, ReportFormat::html);
  CHECK(count_of(html.str(), "class=\"masked\"") == dn.report.masked_indices.size());
}

TEST_CASE("inspect a pair side by side") {
  Rng rng(5);
  auto f = fx::planted_fork(rng, 7, 3);
  const auto prov = coldstart::template_provider();
  const auto fail = coldstart::hindsight_annotate(f.fail, std::nullopt, prov);
  const auto ref = coldstart::hindsight_annotate(f.ref, std::nullopt, prov);
  const auto pairs = preference::construct_pairs(fail, ref, prov, {}, &f.task).pairs;
  REQUIRE_FALSE(pairs.empty());
  for (const auto& p : pairs) {
    std::ostringstream os;
    inspect_pair(os, p, ReportFormat::text);
    const std::string s = os.str();
    CHECK(s.find("t_star " + std::to_string(p.t_star)) != std::string::npos);
    std::istringstream lines(s);
    std::string line;
    bool side_by_side = false;
    while (std::getline(lines, line))
      if (line.find(serialize_action(p.rejected.action)) != std::string::npos && line.find(" | ") != std::string::npos)
        side_by_side = line.find(serialize_action(p.chosen.action).substr(0, 40)) != std::string::npos;
    CHECK(side_by_side);
    CHECK(s.find(p.chosen.reasoning) != std::string::npos);
  }
}

TEST_CASE("command-line tool runs every stage") {
  const auto dir = scratch("tool");
  const std::string out = " --out-dir " + dir.string() + " ";
  REQUIRE(run_cli("--seed 2" + out + "synth --count 6") == 0);
  REQUIRE(fs::exists(dir / "tasks.json"));
  REQUIRE(fs::exists(dir / "qa_report.json"));
  const std::string tasks = (dir / "tasks.json").string();
  REQUIRE(run_cli("--seed 2" + out + "rollout --tasks " + tasks + " --policy tabular:@solution --group 3") == 0);
  REQUIRE(fs::exists(dir / "pool.jsonl"));
  const std::string pool = (dir / "pool.jsonl").string();
  CHECK(run_cli(out + "budget --tasks " + tasks + " --policy scripted:@solution --spectrum 2:0.5,4:0.25") == 0);
  CHECK(run_cli(out + "denoise --in " + pool + " --tasks " + tasks) == 0);
  CHECK(run_cli(out + "annotate --in " + pool + " --out annotated.jsonl") == 0);
  CHECK(run_cli(out + "samples --in " + (dir / "annotated.jsonl").string() + " --out samples.jsonl") == 0);
  CHECK(fs::exists(dir / "samples.jsonl"));
  CHECK(run_cli(out + "pairs --fail " + pool + " --tasks " + tasks) == 0);
  REQUIRE(fs::exists(dir / "pairs.jsonl"));
  CHECK(run_cli(out + "dpo-eval --pairs " + (dir / "pairs.jsonl").string() + " --tasks " + tasks +
                " --policy tabular:@solution --ref tabular:@solution") == 0);
  CHECK(run_cli(out + "stepo --groups " + (dir / "groups.jsonl").string() + " --tasks " + tasks +
                " --policy tabular:@solution --old tabular:@solution --ref tabular:@solution") == 0);
  CHECK(run_cli(out + "inspect --in " + pool + " --out report.txt") == 0);
  CHECK(fs::file_size(dir / "report.txt") > 0);
  CHECK(run_cli(out + "rollout --tasks " + (dir / "missing.json").string() + " --policy scripted:@solution") != 0);
  CHECK(run_cli("frobnicate") != 0);
}

TEST_CASE("command-line pipeline reports a corrupt corpus") {
  const auto dir = scratch("tool_corrupt");
  { std::ofstream(dir / "bad.json") << "[1, 2"; }
  CHECK(run_cli("--out-dir " + dir.string() + " pipeline --tasks " + (dir / "bad.json").string()) != 0);
  const auto manifest = read_json((dir / "run_manifest.json").string());
  CHECK(manifest.at("failed_stage") == "rollout");
}

TEST_CASE("dpo-eval scores pairs whose actions lie outside the solution vocabulary") {
  const auto dir = scratch("dpo_vocab");
  const std::string out = " --out-dir " + dir.string() + " ";
  REQUIRE(run_cli("--seed 2" + out + "synth --count 10") == 0);
  const std::string tasks = (dir / "tasks.json").string();
  REQUIRE(run_cli("--seed 5" + out + "rollout --tasks " + tasks + " --policy stochastic_scripted:@solution:0.5 --group 4") == 0);
  REQUIRE(run_cli(out + "pairs --fail " + (dir / "pool.jsonl").string() + " --tasks " + tasks) == 0);
  REQUIRE_FALSE(read_jsonl((dir / "pairs.jsonl").string()).empty());
  REQUIRE(run_cli(out + "dpo-eval --pairs " + (dir / "pairs.jsonl").string() + " --tasks " + tasks +
                  " --policy tabular:@solution --ref tabular:@solution") == 0);
  const auto m = read_json((dir / "dpo_metrics.json").string());
  CHECK(m.at("pairs").get<std::size_t>() > 0);
  CHECK(std::abs(m.at("mean_loss").get<double>() - std::log(2.0)) < 1e-12);
}
