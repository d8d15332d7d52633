#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <thread>

#include "evoloop/pool.hpp"
#include "evoloop/reward.hpp"
#include "fixtures.hpp"

using namespace evoloop;
using nlohmann::json;

namespace {

// Three rows of integers in A..F; the validator wants each row maximum in G.
struct MaxPerRow {
  std::vector<std::vector<int>> grid;
  Task task;
};

MaxPerRow max_per_row_task(std::uint64_t seed) {
  Rng rng(seed);
  MaxPerRow m;
  json cells = json::object();
  for (int r = 0; r < 3; ++r) {
    m.grid.emplace_back();
    for (int c = 0; c < 6; ++c) {
      const int v = static_cast<int>(rng.uniform_int(-50, 200));
      m.grid.back().push_back(v);
      cells[sandbox::to_a1({r, c})] = std::to_string(v);
    }
  }
  m.task.id = "max-per-row";
  m.task.init_config = fx::sheet_config(3, 7, cells);
  for (int r = 0; r < 3; ++r) {
    const int expect = *std::max_element(m.grid[r].begin(), m.grid[r].end());
    m.task.validator.checks.push_back(fx::cell_check("G" + std::to_string(r + 1), std::to_string(expect)));
  }
  return m;
}

std::vector<Action> fill_g(const std::vector<int>& values) {
  std::vector<Action> out;
  for (std::size_t r = 0; r < values.size(); ++r) {
    out.push_back(fx::click_cell("G" + std::to_string(r + 1)));
    out.push_back(Action::type_text(std::to_string(values[r])));
  }
  return out;
}

Trajectory trajectory_of_length(std::size_t T) {
  Task task;
  task.id = "ctx";
  task.instruction = "Fill cells.";
  task.init_config = fx::sheet_config(5, 5);
  std::vector<Action> acts;
  for (std::size_t i = 0; i < T; ++i) acts.push_back(i % 2 ? Action::type_text("x" + std::to_string(i)) : fx::click_cell("B2"));
  return fx::run_script(task, acts);
}

}  // namespace

TEST_CASE("evaluate_reward: all checks pass and empty validator") {
  Task t;
  t.init_config = fx::sheet_config(2, 2, {{"A1", "5"}, {"B1", "=SUM(A1:A1,A1)"}});
  const auto s = sandbox::reset(t, 0);
  ValidatorSpec v;
  v.checks.push_back(fx::cell_check("A1", "5"));
  v.checks.push_back(fx::cell_check("B1", "10"));
  CHECK(evaluate_reward(v, s) == 1);
  CHECK(evaluate_reward(ValidatorSpec{}, s) == 1);
  v.checks.push_back(fx::cell_check("A2", "nope"));
  CHECK(evaluate_reward(v, s) == 0);
}

TEST_CASE("evaluate_reward: max per row after correct and wrong fill") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto m = max_per_row_task(seed);
    std::vector<int> maxima;
    for (const auto& row : m.grid) {
      int best = row[0];
      for (int v : row) best = v > best ? v : best;
      maxima.push_back(best);
    }
    const auto init = sandbox::reset(m.task, seed);
    CHECK(evaluate_reward(m.task.validator, sandbox::replay(init, fill_g(maxima))) == 1);
    auto wrong = maxima;
    wrong[seed % 3] += 1;
    CHECK(evaluate_reward(m.task.validator, sandbox::replay(init, fill_g(wrong))) == 0);
  }
}

TEST_CASE("evaluate_reward: malformed checks name the offending index") {
  const json bad = {{"checks", json::array({{{"kind", "cell_equals"}, {"app", "sheet"}, {"cell", "A1"}, {"value", "1"}},
                                            {{"kind", "no_such_kind"}}})}};
  try {
    parse_validator(bad);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(e.check_index() == 1);
  }

  Task t;
  t.init_config = fx::sheet_config(2, 2);
  const auto s = sandbox::reset(t, 0);
  ValidatorSpec v;
  v.checks.push_back(fx::cell_check("A1", ""));
  auto missing_app = fx::cell_check("A1", "");
  missing_app.app = "ghost";
  v.checks.push_back(missing_app);
  try {
    evaluate_reward(v, s);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(e.check_index() == 1);
  }
}

TEST_CASE("evaluate_reward is idempotent") {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    auto m = max_per_row_task(100 + i);
    auto s = sandbox::reset(m.task, 0);
    for (int k = 0; k < 10; ++k) s = sandbox::step(s, fx::random_action(rng)).state;
    CHECK(evaluate_reward(m.task.validator, s) == evaluate_reward(m.task.validator, s));
  }
}

TEST_CASE("build_context examples") {
  const auto traj = trajectory_of_length(10);
  auto c0 = build_context(traj, 0, 5);
  CHECK(c0.recent_steps.empty());
  CHECK(c0.compressed_history.empty());
  CHECK(c0.instruction == "Fill cells.");

  auto c3 = build_context(traj, 3, 5);
  CHECK(c3.recent_steps.size() == 3);
  CHECK(c3.compressed_history.empty());

  auto c8 = build_context(traj, 8, 5);
  REQUIRE(c8.recent_steps.size() == 5);
  REQUIRE(c8.compressed_history.size() == 3);
  for (std::size_t i = 0; i < 5; ++i) CHECK(c8.recent_steps[i].index == 3 + i);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(c8.compressed_history[i].index == i);
    CHECK(c8.compressed_history[i].text.rfind("step " + std::to_string(i) + ": ", 0) == 0);
  }
  CHECK_THROWS_AS(build_context(traj, 11, 5), std::out_of_range);
}

TEST_CASE("build_context partitions history") {
  const auto traj = trajectory_of_length(12);
  for (std::size_t window = 0; window <= 6; ++window) {
    for (std::size_t t = 0; t <= traj.steps.size(); ++t) {
      const auto ctx = build_context(traj, t, window);
      CHECK(ctx.recent_steps.size() <= window);
      CHECK(ctx.recent_steps.size() + ctx.compressed_history.size() == t);
      std::vector<std::size_t> seen;
      for (const auto& h : ctx.compressed_history) seen.push_back(h.index);
      for (const auto& r : ctx.recent_steps) seen.push_back(r.index);
      for (std::size_t k = 0; k < t; ++k) CHECK(seen[k] == k);
    }
  }
}

TEST_CASE("compressed history carries no coordinates") {
  const auto traj = trajectory_of_length(10);
  const auto ctx = build_context(traj, 10, 2);
  for (const auto& h : ctx.compressed_history) {
    CHECK(h.text.find('(') == std::string::npos);
    CHECK(h.text.find("coordinate") == std::string::npos);
  }
  CHECK(ctx.compressed_history[0].text == "step 0: left_click cell B2");
}

TEST_CASE("pool append and registry") {
  ExperiencePool pool(std::vector<Task>{});
  pool.register_task("a");
  Trajectory t;
  t.task_id = "a";
  t.reward = 1;
  pool.append(t);
  CHECK(pool.size() == 1);
  t.task_id = "unknown";
  CHECK_THROWS_AS(pool.append(t), RegistryError);
  CHECK(pool.size() == 1);
  CHECK(pool.stats().at("a") == TaskStats{1, 0});
}

TEST_CASE("pool concurrent appends keep stats consistent") {
  ExperiencePool pool;
  for (int k = 0; k < 4; ++k) pool.register_task("t" + std::to_string(k));
  std::vector<std::thread> workers;
  for (int w = 0; w < 8; ++w) {
    workers.emplace_back([&pool, w] {
      for (int i = 0; i < 8; ++i) {
        Trajectory t;
        t.task_id = "t" + std::to_string((w + i) % 4);
        t.reward = (w * 8 + i) % 3 == 0;
        pool.append(t);
      }
    });
  }
  for (auto& th : workers) th.join();
  CHECK(pool.size() == 64);
  std::map<std::string, TaskStats> recount;
  std::size_t last_id = 0;
  const auto records = pool.snapshot();
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (i) CHECK(records[i].id > last_id);
    last_id = records[i].id;
    auto& s = recount[records[i].trajectory.task_id];
    (records[i].trajectory.reward ? s.successes : s.failures)++;
  }
  CHECK(recount == pool.stats());
}

TEST_CASE("pool sample_batch") {
  ExperiencePool pool;
  pool.register_task("a");
  for (int i = 0; i < 3; ++i) {
    Trajectory t;
    t.task_id = "a";
    t.seed = static_cast<std::uint64_t>(i);
    pool.append(t);
  }
  CHECK(pool.sample_batch(5, 1).size() == 3);
  CHECK_THROWS(pool.sample_batch(0, 1));

  pool.append([] {
    Trajectory t;
    t.task_id = "a";
    return t;
  }());
  auto ids = [](const std::vector<PoolRecord>& rs) {
    std::vector<std::size_t> out;
    for (const auto& r : rs) out.push_back(r.id);
    return out;
  };
  CHECK(ids(pool.sample_batch(3, 42)) == ids(pool.sample_batch(3, 42)));
  const auto batch = ids(pool.sample_batch(4, 9));
  CHECK(std::set<std::size_t>(batch.begin(), batch.end()).size() == 4);

  // 10^4 single draws from 4 records: every frequency within 5% of 1/4,
  // and the chi-square statistic under the 3-dof 0.999 quantile.
  std::array<int, 4> counts{};
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) counts[pool.sample_batch(1, derive_seed(17, "draw", i))[0].id]++;
  double chi2 = 0.0;
  for (int c : counts) {
    CHECK(std::abs(c / double(draws) - 0.25) <= 0.05);
    chi2 += (c - draws / 4.0) * (c - draws / 4.0) / (draws / 4.0);
  }
  CHECK(chi2 < 16.27);
}

TEST_CASE("serialization round trips") {
  const auto traj = trajectory_of_length(7);
  const json tj = traj;
  CHECK(tj.get<Trajectory>() == traj);
  CHECK(json::parse(tj.dump()).get<Trajectory>() == traj);

  Rng rng(5);
  auto fork = fx::planted_fork(rng, 9, 3);
  const json task_j = fork.task;
  CHECK(task_j.get<Task>() == fork.task);
  CHECK(task_j.contains("evaluator"));
  CHECK(task_j.contains("config"));

  for (std::size_t t = 0; t <= traj.steps.size(); ++t) {
    const auto ctx = build_context(traj, t, 3);
    const json cj = ctx;
    CHECK(cj.get<Context>() == ctx);
  }
}

TEST_CASE("trajectory invariants from the rollout loop") {
  const auto traj = trajectory_of_length(6);
  CHECK(traj.steps.size() == 6);
  for (std::size_t i = 0; i < traj.steps.size(); ++i) {
    CHECK_FALSE(traj.steps[i].reasoning.empty());
    CHECK(traj.steps[i].action.kind != ActionKind::terminate);
  }
  CHECK(traj.reward == 1);  // empty validator
}
