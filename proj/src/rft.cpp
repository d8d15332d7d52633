#include "evoloop/rft.hpp"

#include <charconv>
#include <sstream>

#include "evoloop/reward.hpp"
#include "evoloop/sandbox.hpp"

namespace evoloop::rft {

using nlohmann::json;

void check_spectrum(const BudgetSpectrum& s) {
  if (s.budgets.empty()) throw RftError("budget spectrum is empty");
  if (s.budgets.size() != s.thresholds.size()) throw RftError("budget spectrum needs one threshold per budget");
  for (std::size_t i = 0; i < s.budgets.size(); ++i) {
    if (s.budgets[i] == 0) throw RftError("budgets must be positive");
    if (!(s.thresholds[i] >= 0.0 && s.thresholds[i] <= 1.0)) throw RftError("thresholds must lie in [0,1]");
    if (i > 0 && s.budgets[i] <= s.budgets[i - 1]) throw RftError("budgets must be strictly ascending");
    if (i > 0 && s.thresholds[i] >= s.thresholds[i - 1]) throw RftError("thresholds must be strictly descending");
  }
}

BudgetSpectrum parse_spectrum(const std::string& text) {
  BudgetSpectrum s;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw RftError("spectrum entry '" + item + "' is not k:threshold");
    std::size_t k = 0;
    const char* b = item.data();
    auto [p, ec] = std::from_chars(b, b + colon, k);
    if (ec != std::errc() || p != b + colon) throw RftError("bad budget in '" + item + "'");
    double tau = 0.0;
    auto [q, ec2] = std::from_chars(b + colon + 1, b + item.size(), tau);
    if (ec2 != std::errc() || q != b + item.size()) throw RftError("bad threshold in '" + item + "'");
    s.budgets.push_back(k);
    s.thresholds.push_back(tau);
  }
  check_spectrum(s);
  return s;
}

std::string format_spectrum(const BudgetSpectrum& s) {
  std::string out;
  for (std::size_t i = 0; i < s.budgets.size(); ++i) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, s.thresholds[i]);
    (void)ec;
    out += (i ? "," : "") + std::to_string(s.budgets[i]) + ":" + std::string(buf, p);
  }
  return out;
}

BudgetChoice select_budget(const std::map<std::size_t, double>& sr_by_k, const BudgetSpectrum& spectrum) {
  check_spectrum(spectrum);
  for (std::size_t i = 0; i < spectrum.budgets.size(); ++i) {
    auto it = sr_by_k.find(spectrum.budgets[i]);
    if (it == sr_by_k.end()) throw RftError("no pass rate for budget " + std::to_string(spectrum.budgets[i]));
    if (it->second >= spectrum.thresholds[i]) return {spectrum.budgets[i], i, true};
  }
  return {spectrum.budgets.back(), spectrum.budgets.size() - 1, false};
}

std::map<std::size_t, double> prefix_pass_rates(const std::vector<int>& rewards, const BudgetSpectrum& spectrum) {
  check_spectrum(spectrum);
  if (rewards.size() < spectrum.budgets.back()) throw RftError("fewer rewards than the largest budget");
  std::map<std::size_t, double> sr;
  std::size_t pass = 0, seen = 0;
  for (std::size_t k : spectrum.budgets) {
    while (seen < k) pass += rewards[seen++] == 1;
    sr[k] = static_cast<double>(pass) / static_cast<double>(k);
  }
  return sr;
}

PassRateEstimate estimate_pass_rates(const Task& task, std::shared_ptr<const policy::PolicyHandle> policy,
                                     const BudgetSpectrum& spectrum, orchestrator::Cluster& cluster,
                                     const EstimateOptions& opts) {
  check_spectrum(spectrum);
  PassRateEstimate est;
  est.task_id = task.id;
  const std::size_t n = spectrum.budgets.back();
  std::vector<std::future<orchestrator::SessionResult>> futures;
  for (std::size_t i = 0; i < n; ++i) {
    orchestrator::SessionSpec spec;
    spec.task = task;
    spec.policy = policy;
    spec.step_budget = opts.step_budget;
    spec.seed = derive_seed(opts.seed, "budget:" + task.id, i);
    futures.push_back(cluster.submit(std::move(spec)));
  }
  for (auto& f : futures) {
    auto r = f.get();
    if (r.status != orchestrator::SessionStatus::done) {
      if (est.error.empty()) est.error = r.error;
      continue;
    }
    est.rewards.push_back(r.trajectory->reward);
  }
  if (!est.error.empty()) return est;
  est.sr = prefix_pass_rates(est.rewards, spectrum);
  est.estimated = true;
  return est;
}

namespace {

std::string post_hash(const Trajectory& traj, std::size_t t) {
  return t + 1 < traj.steps.size() ? traj.steps[t + 1].state_hash : traj.terminal_state_hash;
}

}  // namespace

DenoiseResult denoise(const Trajectory& traj, bool feasible, const DenoiseOptions& opts, const Task* task) {
  DenoiseResult out{traj, {}};
  out.report.trajectory_id = traj.id;
  out.report.task_id = traj.task_id;
  const std::size_t T = traj.steps.size();
  std::vector<bool> masked(T, false);
  auto mask = [&](std::size_t i, const std::string& rule) {
    masked[i] = true;
    out.report.rules_fired[i] = rule;
  };

  if (!feasible) {
    if (T == 0 || traj.steps.back().action.kind != ActionKind::terminate ||
        traj.steps.back().action.status != TerminationStatus::failure)
      throw RftError("infeasible trajectory " + traj.id + " does not end with terminate=failure");
    for (std::size_t i = 0; i + 1 < T; ++i) mask(i, kRuleInfeasible);
  } else {
    if (traj.reward != 1) throw RftError("trajectory " + traj.id + " failed a feasible task; it does not belong in RFT");
    for (std::size_t t = 0; t < T; ++t)
      if (traj.steps[t].state_hash.empty()) throw RftError("step " + std::to_string(t) + " has no state hash");

    // first[h] = earliest kept index whose pre-state hashes to h.
    std::map<std::string, std::size_t> first;
    for (std::size_t t = 0; t <= T; ++t) {
      const std::string& h = t < T ? traj.steps[t].state_hash : traj.terminal_state_hash;
      auto it = first.find(h);
      if (it != first.end()) {
        const std::size_t s = it->second;
        bool all_wait = true, has_terminate = false;
        for (std::size_t i = s; i < t; ++i) {
          if (masked[i]) continue;
          all_wait = all_wait && traj.steps[i].action.kind == ActionKind::wait;
          has_terminate = has_terminate || traj.steps[i].action.kind == ActionKind::terminate;
        }
        if (!all_wait && !has_terminate) {
          std::size_t live = 0;
          for (std::size_t i = s; i < t; ++i) live += !masked[i];
          for (std::size_t i = s; i < t; ++i)
            if (!masked[i]) mask(i, live == 1 && post_hash(traj, i) == traj.steps[i].state_hash ? kRuleNoOp : kRuleCycle);
          for (auto e = first.begin(); e != first.end();) e = (e->second >= s && e->second < t) ? first.erase(e) : std::next(e);
          first[h] = t;
          continue;
        }
      }
      first.emplace(h, t);
    }

    if (opts.post_success_redundancy) {
      if (!task) throw RftError("post_success_redundancy needs the task");
      sandbox::EnvState state = sandbox::reset(*task, traj.seed);
      std::optional<std::size_t> reached;
      for (std::size_t t = 0; t < T && !reached; ++t) {
        if (masked[t]) continue;
        state = sandbox::step(state, traj.steps[t].action).state;
        if (evaluate_reward(task->validator, state) == 1) reached = t;
      }
      if (reached)
        for (std::size_t t = *reached + 1; t < T; ++t)
          if (!masked[t] && traj.steps[t].action.kind != ActionKind::terminate) mask(t, kRulePostSuccess);
    }
  }

  for (std::size_t i = 0; i < T; ++i) {
    out.trajectory.steps[i].loss_mask = !masked[i];
    if (masked[i]) out.report.masked_indices.push_back(i);
  }
  return out;
}

json report_to_json(const DenoiseReport& r) {
  json rules = json::object();
  for (const auto& [i, rule] : r.rules_fired) rules[std::to_string(i)] = rule;
  return {{"trajectory_id", r.trajectory_id}, {"task_id", r.task_id}, {"masked_indices", r.masked_indices}, {"rules_fired", rules}};
}

}  // namespace evoloop::rft
