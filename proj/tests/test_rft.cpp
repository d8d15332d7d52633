#include <doctest.h>

#include <cmath>

#include "evoloop/reward.hpp"
#include "evoloop/rft.hpp"
#include "fixtures.hpp"

using namespace evoloop;
using namespace evoloop::rft;

namespace {

const BudgetSpectrum kSpectrum{{4, 8, 16}, {0.75, 0.5, 0.25}};

// Smallest index whose pass rate clears its threshold; the last one otherwise.
std::size_t brute_force_index(const std::vector<double>& sr, const std::vector<double>& tau) {
  std::size_t best = sr.size();
  for (std::size_t i = 0; i < sr.size(); ++i)
    if (sr[i] >= tau[i] && i < best) best = i;
  return best == sr.size() ? sr.size() - 1 : best;
}

BudgetSpectrum random_spectrum(Rng& rng) {
  BudgetSpectrum s;
  const std::size_t n = 1 + rng.index(6);
  std::size_t k = 0;
  std::vector<double> taus;
  for (std::size_t i = 0; i < n; ++i) {
    k += 1 + rng.index(8);
    s.budgets.push_back(k);
    taus.push_back(rng.uniform01());
  }
  std::sort(taus.rbegin(), taus.rend());
  for (std::size_t i = 1; i < n; ++i)
    if (taus[i] >= taus[i - 1]) taus[i] = std::nextafter(taus[i - 1], -1.0);
  s.thresholds = taus;
  return s;
}

std::map<std::size_t, double> as_map(const BudgetSpectrum& s, const std::vector<double>& sr) {
  std::map<std::size_t, double> m;
  for (std::size_t i = 0; i < sr.size(); ++i) m[s.budgets[i]] = sr[i];
  return m;
}

Task fill_task() {
  Task t;
  t.id = "fill";
  t.instruction = "Put 7 in B2.";
  t.init_config = fx::sheet_config(3, 3);
  t.validator.checks = {fx::cell_check("B2", "7")};
  t.solution = {fx::click_cell("B2"), Action::type_text("7"), Action::terminate(TerminationStatus::success)};
  return t;
}

struct Rig {
  orchestrator::Orchestrator orch{nullptr, std::nullopt};
  orchestrator::Cluster* cluster = nullptr;
  Rig() {
    orch.register_tool({"desk", "1"});
    cluster = &orch.provision_cluster("desk", "1", 4);
  }
};

}  // namespace

TEST_CASE("select_budget examples") {
  auto c = select_budget({{4, 0.8}, {8, 0.9}, {16, 1.0}}, kSpectrum);
  CHECK(c.k == 4);
  CHECK(c.satisfied);
  c = select_budget({{4, 0.5}, {8, 0.5}, {16, 0.5}}, kSpectrum);
  CHECK(c.k == 8);
  CHECK(c.index == 1);
  c = select_budget({{4, 0.0}, {8, 0.1}, {16, 0.2}}, kSpectrum);
  CHECK(c.k == 16);
  CHECK_FALSE(c.satisfied);
  CHECK_THROWS_AS(select_budget({{4, 0.1}}, kSpectrum), RftError);
}

TEST_CASE("spectrum parsing and validation") {
  const auto s = parse_spectrum("4:0.75,8:0.5,16:0.25");
  CHECK(s.budgets == kSpectrum.budgets);
  CHECK(s.thresholds == kSpectrum.thresholds);
  CHECK(parse_spectrum(format_spectrum(s)).thresholds == s.thresholds);
  CHECK_THROWS_AS(parse_spectrum("8:0.5,4:0.25"), RftError);
  CHECK_THROWS_AS(parse_spectrum("4:0.5,8:0.5"), RftError);
  CHECK_THROWS_AS(parse_spectrum("4:1.5"), RftError);
  CHECK_THROWS_AS(parse_spectrum("4-0.5"), RftError);
  CHECK_THROWS_AS(parse_spectrum("0:0.5"), RftError);
  CHECK_THROWS_AS(parse_spectrum(""), RftError);
}

TEST_CASE("select_budget agrees with brute force and is monotone") {
  Rng rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto s = random_spectrum(rng);
    std::vector<double> sr;
    for (std::size_t i = 0; i < s.budgets.size(); ++i) sr.push_back(rng.uniform01());
    const auto c = select_budget(as_map(s, sr), s);
    REQUIRE(c.index == brute_force_index(sr, s.thresholds));
    CHECK(c.k == s.budgets[c.index]);

    auto raised = sr;
    for (auto& v : raised)
      if (rng.bernoulli(0.5)) v = std::min(1.0, v + rng.uniform01());
    CHECK(select_budget(as_map(s, raised), s).index <= c.index);
  }
}

TEST_CASE("prefix pass rates") {
  const std::vector<int> rewards{1, 1, 0, 1, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0};
  const auto sr = prefix_pass_rates(rewards, kSpectrum);
  CHECK(sr.at(4) == 0.75);
  CHECK(sr.at(8) == 0.375);
  CHECK(sr.at(16) == 7.0 / 16.0);
  CHECK_THROWS_AS(prefix_pass_rates({1, 0}, kSpectrum), RftError);
}

TEST_CASE("estimate_pass_rates with deterministic policies") {
  Rig rig;
  const Task t = fill_task();
  auto ok = estimate_pass_rates(t, fx::script_policy(t.id, t.solution), kSpectrum, *rig.cluster);
  REQUIRE(ok.estimated);
  for (auto k : kSpectrum.budgets) CHECK(ok.sr.at(k) == 1.0);
  CHECK(select_budget(ok.sr, kSpectrum).k == 4);

  auto bad = estimate_pass_rates(t, fx::script_policy(t.id, {Action::terminate(TerminationStatus::failure)}), kSpectrum,
                                 *rig.cluster);
  REQUIRE(bad.estimated);
  for (auto k : kSpectrum.budgets) CHECK(bad.sr.at(k) == 0.0);
  CHECK_FALSE(select_budget(bad.sr, kSpectrum).satisfied);
}

TEST_CASE("estimate_pass_rates with a coin-flip policy") {
  Rig rig;
  const Task t = fill_task();
  policy::PolicyHandle h;
  h.impl = policy::StochasticScriptedPolicy{policy::solution_script({t}), 0.5};
  auto handle = std::make_shared<const policy::PolicyHandle>(h);
  // Averaged over 50 tasks the 16-rollout rate has sd 0.5/sqrt(800).
  double total = 0.0;
  for (int i = 0; i < 50; ++i) {
    auto est = estimate_pass_rates(t, handle, kSpectrum, *rig.cluster, {20, static_cast<std::uint64_t>(i)});
    REQUIRE(est.estimated);
    CHECK(est.rewards.size() == 16);
    total += est.sr.at(16);
  }
  CHECK(std::abs(total / 50 - 0.5) < 3 * 0.5 / std::sqrt(800.0));
  auto a = estimate_pass_rates(t, handle, kSpectrum, *rig.cluster, {20, 3});
  auto b = estimate_pass_rates(t, handle, kSpectrum, *rig.cluster, {20, 3});
  CHECK(a.rewards == b.rewards);
}

TEST_CASE("denoise: three identical clicks") {
  const Task t = fill_task();
  const auto traj = fx::run_script(t, {fx::click_cell("B2"), fx::click_cell("B2"), fx::click_cell("B2"), Action::type_text("7"),
                                       Action::terminate(TerminationStatus::success)});
  REQUIRE(traj.reward == 1);
  const auto out = denoise(traj, true);
  CHECK(out.report.masked_indices == std::vector<std::size_t>{1, 2});
  for (auto i : out.report.masked_indices) {
    const auto& rule = out.report.rules_fired.at(i);
    CHECK((rule == kRuleNoOp || rule == kRuleCycle));
  }
  CHECK(out.trajectory.steps[0].loss_mask);
  CHECK_FALSE(out.trajectory.steps[1].loss_mask);
  CHECK_FALSE(out.trajectory.steps[2].loss_mask);
  CHECK(out.trajectory.steps[3].loss_mask);
}

TEST_CASE("denoise: clean trajectory and waits") {
  const Task t = fill_task();
  auto out = denoise(fx::run_script(t, t.solution), true);
  CHECK(out.report.masked_indices.empty());
  out = denoise(fx::run_script(t, {Action::wait(1), Action::wait(1), fx::click_cell("B2"), Action::type_text("7"),
                                   Action::terminate(TerminationStatus::success)}),
                true);
  CHECK(out.report.masked_indices.empty());
}

TEST_CASE("denoise: infeasible collapse") {
  Task t = fill_task();
  t.feasible = false;
  t.validator.checks = {fx::terminated_with(TerminationStatus::failure)};
  std::vector<Action> acts{fx::click_cell("A1"), Action::type_text("a"), fx::click_cell("B1"), Action::type_text("b"),
                           fx::click_cell("C1"), Action::wait(1), Action::terminate(TerminationStatus::failure)};
  const auto traj = fx::run_script(t, acts);
  REQUIRE(traj.steps.size() == 7);
  const auto out = denoise(traj, false);
  CHECK(out.report.masked_indices.size() == 6);
  CHECK(out.trajectory.steps.back().loss_mask);
  for (const auto& [i, rule] : out.report.rules_fired) CHECK(rule == kRuleInfeasible);

  acts.back() = Action::terminate(TerminationStatus::success);
  CHECK_THROWS_AS(denoise(fx::run_script(t, acts), false), RftError);
}

TEST_CASE("denoise rejects failed feasible trajectories") {
  const Task t = fill_task();
  const auto traj = fx::run_script(t, {fx::click_cell("B2"), Action::type_text("8"), Action::terminate(TerminationStatus::success)});
  REQUIRE(traj.reward == 0);
  CHECK_THROWS_AS(denoise(traj, true), RftError);
}

TEST_CASE("denoise masks exactly the injected steps and replays soundly") {
  Rng rng(31);
  for (int i = 0; i < 100; ++i) {
    const auto r = fx::inject_redundancy(rng, 3 + rng.index(14));
    REQUIRE(r.traj.reward == 1);
    const auto out = denoise(r.traj, true);
    CHECK(out.report.masked_indices == r.injected);

    std::vector<Action> kept;
    for (const auto& s : out.trajectory.steps)
      if (s.loss_mask) kept.push_back(s.action);
    const auto end = sandbox::replay(sandbox::reset(r.task, 0), kept);
    CHECK(evaluate_reward(r.task.validator, end) == 1);

    const auto again = denoise(out.trajectory, true);
    CHECK(again.trajectory == out.trajectory);
    CHECK(again.report.masked_indices == out.report.masked_indices);
  }
}

TEST_CASE("denoise post-success redundancy") {
  Task t = fill_task();
  const auto traj = fx::run_script(t, {fx::click_cell("B2"), Action::type_text("7"), fx::click_cell("C3"), fx::click_cell("A1"),
                                       Action::terminate(TerminationStatus::success)});
  REQUIRE(traj.reward == 1);
  CHECK(denoise(traj, true).report.masked_indices.empty());
  CHECK_THROWS_AS(denoise(traj, true, {true}), RftError);
  const auto out = denoise(traj, true, {true}, &t);
  CHECK(out.report.masked_indices == std::vector<std::size_t>{2, 3});
  CHECK(out.report.rules_fired.at(2) == kRulePostSuccess);
  const auto j = report_to_json(out.report);
  CHECK(j.at("rules_fired").at("3") == kRulePostSuccess);
}
