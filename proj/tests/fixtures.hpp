#pragma once

// Shared builders for the unit and acceptance tests: random actions, an
// independent held-key stack oracle, small tasks, scripted trajectories and
// planted-fork pairs.

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "evoloop/action.hpp"
#include "evoloop/model.hpp"
#include "evoloop/orchestrator.hpp"
#include "evoloop/policy.hpp"
#include "evoloop/preference.hpp"
#include "evoloop/rng.hpp"
#include "evoloop/sandbox.hpp"
#include "evoloop/stepo.hpp"

namespace fx {

using evoloop::Action;
using evoloop::ActionKind;
using evoloop::Rng;
using evoloop::Task;
using evoloop::Trajectory;
using nlohmann::json;

inline const std::vector<std::string> kKeyPool = {"shift", "ctrl", "alt", "meta", "a", "z", "enter", "tab",
                                                  "escape", "f2", "up", "down", "space", "backspace", "delete", "1"};

inline std::string random_text(Rng& rng) {
  static const std::string alphabet = "abcXYZ 019=\"\\\n\t[](),.?{}:'";
  std::string s;
  const auto n = rng.uniform_int(0, 12);
  for (std::int64_t i = 0; i < n; ++i) s += alphabet[rng.index(alphabet.size())];
  return s;
}

inline Action random_action_of(ActionKind kind, Rng& rng) {
  Action a;
  a.kind = kind;
  switch (kind) {
    case ActionKind::key:
    case ActionKind::key_down:
    case ActionKind::key_up: {
      const auto n = rng.uniform_int(1, static_cast<std::int64_t>(evoloop::kMaxChordKeys));
      for (std::int64_t i = 0; i < n; ++i) a.keys.push_back(kKeyPool[rng.index(kKeyPool.size())]);
      break;
    }
    case ActionKind::type:
      a.text = random_text(rng);
      break;
    case ActionKind::scroll:
    case ActionKind::hscroll:
      a.pixels = static_cast<int>(rng.uniform_int(-600, 600));
      break;
    case ActionKind::wait:
      a.time = 1e-3 + rng.uniform01() * 10.0;
      break;
    case ActionKind::terminate:
      a.status = rng.bernoulli(0.5) ? evoloop::TerminationStatus::success : evoloop::TerminationStatus::failure;
      break;
    default:
      a.coordinate = evoloop::Point{static_cast<int>(rng.uniform_int(0, 1279)), static_cast<int>(rng.uniform_int(0, 719))};
  }
  return a;
}

inline Action random_action(Rng& rng) {
  const auto& kinds = evoloop::all_action_kinds();
  return random_action_of(kinds[rng.index(kinds.size())], rng);
}

// Sequences over a small alphabet so that holds, releases and stray
// terminates collide often.
inline std::vector<Action> random_sequence(Rng& rng) {
  static const std::vector<std::string> mods = {"shift", "ctrl", "alt"};
  std::vector<Action> seq;
  const auto n = rng.uniform_int(1, 8);
  for (std::int64_t i = 0; i < n; ++i) {
    switch (rng.index(5)) {
      case 0:
      case 1: {
        std::vector<std::string> keys;
        const auto k = rng.uniform_int(1, 2);
        for (std::int64_t j = 0; j < k; ++j) keys.push_back(mods[rng.index(mods.size())]);
        seq.push_back(rng.bernoulli(0.5) ? Action::key_down(keys) : Action::key_up(keys));
        break;
      }
      case 2:
        seq.push_back(Action::click(10, 20));
        break;
      case 3:
        seq.push_back(Action::type_text("x"));
        break;
      default:
        seq.push_back(Action::terminate(evoloop::TerminationStatus::success));
    }
  }
  return seq;
}

// Independent reference: replay holds on a stack. Releases must pop the top
// (keys of one key_up are released last-listed first); terminate may only be
// the final action; the stack must end empty.
inline bool stack_oracle(const std::vector<Action>& seq) {
  std::vector<std::string> stack;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const Action& a = seq[i];
    if (a.kind == ActionKind::key_down) {
      for (const auto& k : a.keys)
        if (std::find(stack.begin(), stack.end(), k) == stack.end()) stack.push_back(k);
    } else if (a.kind == ActionKind::key_up) {
      for (auto it = a.keys.rbegin(); it != a.keys.rend(); ++it) {
        if (stack.empty() || stack.back() != *it) return false;
        stack.pop_back();
      }
    } else if (a.kind == ActionKind::terminate && i + 1 != seq.size()) {
      return false;
    }
  }
  return stack.empty();
}

inline json sheet_config(int rows, int cols, const json& cells = json::object()) {
  return {{"apps", json::array({{{"id", "sheet"}, {"kind", "spreadsheet"}, {"title", "Sheet"}, {"rows", rows}, {"cols", cols},
                                 {"cells", cells}}})}};
}

inline evoloop::Check cell_check(const std::string& cell, const std::string& value) {
  evoloop::Check c;
  c.kind = evoloop::Check::Kind::cell_equals;
  c.app = "sheet";
  c.target = cell;
  c.value = value;
  return c;
}

inline evoloop::Check terminated_with(evoloop::TerminationStatus status) {
  evoloop::Check c;
  c.kind = evoloop::Check::Kind::terminated_with;
  c.status = status;
  return c;
}

inline evoloop::Check terminated_success() { return terminated_with(evoloop::TerminationStatus::success); }

// Pixel center of a cell on an unscrolled sheet.
inline evoloop::Point cell_center(const std::string& a1) {
  const auto ref = *evoloop::sandbox::parse_a1(a1);
  return {ref.col * evoloop::sandbox::kColumnWidth + evoloop::sandbox::kColumnWidth / 2,
          evoloop::sandbox::kToolbarHeight + ref.row * evoloop::sandbox::kRowHeight + evoloop::sandbox::kRowHeight / 2};
}

inline Action click_cell(const std::string& a1) {
  const auto p = cell_center(a1);
  return Action::click(p.x, p.y);
}

inline std::shared_ptr<const evoloop::policy::PolicyHandle> script_policy(const std::string& task_id,
                                                                         const std::vector<Action>& actions) {
  evoloop::policy::ScriptedPolicy p;
  for (const auto& a : actions) p.scripts[task_id].push_back(evoloop::serialize_action(a));
  evoloop::policy::PolicyHandle h;
  h.impl = std::move(p);
  return std::make_shared<const evoloop::policy::PolicyHandle>(std::move(h));
}

// Runs the actions through the real rollout loop, so hashes, observations
// and responses are exactly what a session would record.
inline Trajectory run_script(const Task& task, const std::vector<Action>& actions, std::uint64_t seed = 0,
                             std::size_t budget = 0) {
  evoloop::orchestrator::SessionSpec spec;
  spec.task = task;
  spec.policy = script_policy(task.id, actions);
  spec.step_budget = budget ? budget : actions.size();
  spec.seed = seed;
  return evoloop::orchestrator::run_rollout(spec);
}

// A sheet task whose reference fills distinct cells, optionally preceded by
// a wait so that both parities of T occur.
struct PlantedFork {
  Task task;
  std::vector<Action> ref_actions;
  std::vector<Action> fail_actions;
  std::size_t fork = 0;
  Trajectory ref;
  Trajectory fail;
};

inline PlantedFork planted_fork(Rng& rng, std::size_t T, std::size_t fork) {
  PlantedFork out;
  std::vector<std::string> cells;
  for (int r = 1; r <= 5; ++r)
    for (char c = 'A'; c <= 'E'; ++c) cells.push_back(std::string(1, c) + std::to_string(r));
  for (std::size_t i = cells.size(); i > 1; --i) std::swap(cells[i - 1], cells[rng.index(i)]);

  const bool lead_wait = T % 2 == 0;
  const std::size_t pairs = (T - 1 - (lead_wait ? 1 : 0)) / 2;
  Task& task = out.task;
  task.id = "fork-" + std::to_string(rng.next_u64() % 1000000);
  task.instruction = "Fill the marked cells.";
  task.domain = "office/spreadsheet/fill";
  task.family = "fill";
  task.init_config = sheet_config(5, 5);
  if (lead_wait) out.ref_actions.push_back(Action::wait(1.0));
  for (std::size_t i = 0; i < pairs; ++i) {
    const std::string value = "v" + std::to_string(i) + "_" + std::to_string(rng.uniform_int(100, 999));
    out.ref_actions.push_back(click_cell(cells[i]));
    out.ref_actions.push_back(Action::type_text(value));
    task.validator.checks.push_back(cell_check(cells[i], value));
  }
  out.ref_actions.push_back(Action::terminate(evoloop::TerminationStatus::success));
  task.validator.checks.push_back(terminated_success());
  task.solution = out.ref_actions;

  out.fork = fork;
  out.fail_actions = out.ref_actions;
  Action& a = out.fail_actions[fork];
  if (a.kind == ActionKind::left_click) a = click_cell(cells[pairs + rng.index(cells.size() - pairs)]);
  else if (a.kind == ActionKind::type) a = Action::type_text(*a.text + "x");
  else a = Action::terminate(evoloop::TerminationStatus::failure);

  out.ref = run_script(task, out.ref_actions);
  out.ref.id = task.id + "#ref";
  out.fail = run_script(task, out.fail_actions);
  out.fail.id = task.id + "#fail";
  return out;
}

// A planted reference with redundant clicks spliced in after some of its
// clicks: a repeated click (no-op) or a click elsewhere and back (cycle).
struct Redundant {
  Task task;
  std::vector<Action> actions;
  std::vector<std::size_t> injected;
  Trajectory traj;
};

inline Redundant inject_redundancy(Rng& rng, std::size_t T) {
  auto base = planted_fork(rng, T, T - 1);
  Redundant out;
  out.task = base.task;
  for (const auto& a : base.ref_actions) {
    out.actions.push_back(a);
    if (a.kind != ActionKind::left_click) continue;
    const auto pick = rng.uniform_int(0, 2);
    if (pick == 0 && !out.injected.empty()) continue;
    const std::string elsewhere = std::string(1, static_cast<char>('A' + rng.index(5))) + std::to_string(1 + rng.index(5));
    if (pick != 2 && !(click_cell(elsewhere) == a)) {
      out.injected.push_back(out.actions.size());
      out.actions.push_back(click_cell(elsewhere));
    }
    out.injected.push_back(out.actions.size());
    out.actions.push_back(a);
  }
  out.traj = run_script(out.task, out.actions);
  return out;
}

struct ScoredGroup {
  Task task;
  std::vector<Trajectory> trajs;
  evoloop::policy::PolicyHandle theta, old, ref;
};

inline void jitter(evoloop::policy::PolicyHandle& h, Rng& rng, double scale) {
  for (auto& l : h.tabular()->logits()) l += scale * (rng.uniform01() - 0.5);
}

// Rollouts sampled from a tabular policy over a small fill task.
inline ScoredGroup sampled_group(Rng& rng) {
  ScoredGroup s;
  s.task.id = "grad";
  s.task.instruction = "Put 7 in B2.";
  s.task.init_config = sheet_config(3, 3);
  s.task.validator.checks = {cell_check("B2", "7")};
  s.task.solution = {click_cell("B2"), Action::type_text("7"), Action::terminate(evoloop::TerminationStatus::success)};
  s.old = evoloop::policy::tabular_from_solutions({s.task}, {2.0, 1.0, 0});
  jitter(s.old, rng, 1.0);
  auto handle = std::make_shared<const evoloop::policy::PolicyHandle>(s.old);
  const std::size_t G = 3 + rng.index(4);
  for (std::size_t i = 0; i < G; ++i) {
    evoloop::orchestrator::SessionSpec spec;
    spec.task = s.task;
    spec.policy = handle;
    spec.step_budget = 2 + rng.index(4);
    spec.seed = rng.next_u64();
    auto traj = evoloop::orchestrator::run_rollout(spec);
    traj.reward = i == 0 ? 1 : i == 1 ? 0 : static_cast<int>(rng.bernoulli(0.5));
    s.trajs.push_back(std::move(traj));
  }
  s.theta = s.old;
  jitter(s.theta, rng, 0.4);
  s.ref = s.old;
  jitter(s.ref, rng, 0.4);
  return s;
}

// Distance of every token ratio from the clip boundaries.
inline double kink_distance(const ScoredGroup& s, const evoloop::stepo::ClipConfig& cfg) {
  const auto g = evoloop::stepo::score_group("grad", s.trajs, s.theta, s.old, s.ref);
  double d = 1e300;
  for (const auto& t : g.trajectories)
    for (const auto& st : t.steps)
      for (std::size_t k = 0; k < st.theta.size(); ++k) {
        const double r = std::exp(st.theta[k] - st.old[k]);
        d = std::min({d, std::abs(r - (1.0 + cfg.eps_high)), std::abs(r - (1.0 - cfg.eps_low))});
      }
  return d;
}

// Tabular policy whose vocabulary covers both responses of a pair, with a
// single fallback bucket and random logits.
inline evoloop::policy::PolicyHandle pair_policy(const evoloop::preference::PreferencePair& p, Rng& rng) {
  std::vector<Action> actions{p.chosen.action, p.rejected.action, Action::wait(1)};
  if (p.chosen.action == p.rejected.action) actions.erase(actions.begin() + 1);
  evoloop::policy::TabularPolicy tab({evoloop::policy::kReasoningAct, evoloop::policy::kReasoningReflect}, actions, 0, 0, false);
  tab.add_bucket("*");
  for (auto& l : tab.logits()) l = rng.uniform01() * 2.0 - 1.0;
  evoloop::policy::PolicyHandle h;
  h.impl = tab;
  return h;
}

}  // namespace fx
