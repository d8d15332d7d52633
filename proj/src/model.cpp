#include "evoloop/model.hpp"

#include <fstream>
#include <sstream>

namespace evoloop {

using nlohmann::json;

const Widget* hit_test(const Observation& obs, Point p) {
  for (auto it = obs.widgets.rbegin(); it != obs.widgets.rend(); ++it)
    if (it->bounds.contains(p)) return &*it;
  return nullptr;
}

const Widget* find_widget(const Observation& obs, const std::string& id) {
  for (const auto& w : obs.widgets)
    if (w.id == id) return &w;
  return nullptr;
}

const Widget* focused_widget(const Observation& obs) {
  for (const auto& w : obs.widgets)
    if (w.focused) return &w;
  return nullptr;
}

std::string widget_label(const Widget& w) {
  if (w.kind == "cell") return "cell " + w.id.substr(w.id.find(':') + 1);
  if (!w.text.empty() && w.kind != "editor") return w.text;
  if (w.kind == "editor") return "text area";
  return w.id;
}

std::string summarize_action(const Action& a, const Observation& obs) {
  std::string out(to_string(a.kind));
  auto join_keys = [&] {
    std::string k;
    for (std::size_t i = 0; i < a.keys.size(); ++i) k += (i ? "+" : "") + a.keys[i];
    return k;
  };
  switch (a.kind) {
    case ActionKind::key:
    case ActionKind::key_down:
    case ActionKind::key_up:
      return out + " " + join_keys();
    case ActionKind::type:
      return out + " \"" + *a.text + "\"";
    case ActionKind::scroll:
      return out + (*a.pixels >= 0 ? " down " : " up ") + std::to_string(std::abs(*a.pixels)) + "px";
    case ActionKind::hscroll:
      return out + (*a.pixels >= 0 ? " right " : " left ") + std::to_string(std::abs(*a.pixels)) + "px";
    case ActionKind::wait: {
      std::ostringstream s;
      s << *a.time;
      return out + " " + s.str() + "s";
    }
    case ActionKind::terminate:
      return out + " " + std::string(to_string(*a.status));
    default: {
      const Widget* w = hit_test(obs, *a.coordinate);
      return out + " " + (w ? widget_label(*w) : std::string("empty area"));
    }
  }
}

std::string summarize_step(std::size_t index, const Step& step) {
  return "step " + std::to_string(index) + ": " + summarize_action(step.action, step.observation);
}

Context build_context(const Trajectory& traj, std::size_t t, std::size_t window) {
  if (t > traj.steps.size())
    throw std::out_of_range("build_context: t=" + std::to_string(t) + " exceeds trajectory length " +
                            std::to_string(traj.steps.size()));
  Context ctx;
  ctx.task_id = traj.task_id;
  ctx.domain = traj.domain;
  ctx.instruction = traj.instruction;
  ctx.step_index = t;
  const std::size_t first_recent = t > window ? t - window : 0;
  for (std::size_t k = 0; k < first_recent; ++k) ctx.compressed_history.push_back({k, summarize_step(k, traj.steps[k])});
  for (std::size_t k = first_recent; k < t; ++k) {
    const Step& s = traj.steps[k];
    ctx.recent_steps.push_back({k, s.observation, s.reasoning, s.action});
  }
  return ctx;
}

void to_json(json& j, const Rect& r) { j = json::array({r.x, r.y, r.w, r.h}); }
void from_json(const json& j, Rect& r) { r = {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>(), j.at(3).get<int>()}; }

void to_json(json& j, const Widget& w) {
  j = {{"id", w.id}, {"kind", w.kind}, {"bounds", w.bounds}, {"text", w.text}, {"focused", w.focused}};
}
void from_json(const json& j, Widget& w) {
  w.id = j.at("id").get<std::string>();
  w.kind = j.at("kind").get<std::string>();
  w.bounds = j.at("bounds").get<Rect>();
  w.text = j.value("text", "");
  w.focused = j.value("focused", false);
}

void to_json(json& j, const Observation& o) {
  j = {{"step_index", o.step_index}, {"dims", {o.height, o.width}}, {"widgets", o.widgets}, {"state_hash", o.state_hash}};
  if (!o.note.empty()) j["note"] = o.note;
}
void from_json(const json& j, Observation& o) {
  o.step_index = j.value("step_index", 0);
  if (j.contains("dims")) {
    o.height = j["dims"].at(0).get<int>();
    o.width = j["dims"].at(1).get<int>();
  }
  o.widgets = j.value("widgets", std::vector<Widget>{});
  o.state_hash = j.value("state_hash", "");
  o.note = j.value("note", "");
}

namespace {

std::string_view check_kind_name(Check::Kind k) {
  switch (k) {
    case Check::Kind::cell_equals: return "cell_equals";
    case Check::Kind::numeric_equals: return "numeric_equals";
    case Check::Kind::file_exists: return "file_exists";
    case Check::Kind::text_contains: return "text_contains";
    case Check::Kind::text_equals: return "text_equals";
    case Check::Kind::terminated_with: return "terminated_with";
    case Check::Kind::all_of: return "all_of";
  }
  return "?";
}

Check parse_check(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("check must be an object");
  const std::string kind = j.at("kind").get<std::string>();
  Check c;
  auto need_app = [&] {
    c.app = j.at("app").get<std::string>();
    if (c.app.empty()) throw std::invalid_argument("empty app id");
  };
  if (kind == "cell_equals") {
    c.kind = Check::Kind::cell_equals;
    need_app();
    c.target = j.at("cell").get<std::string>();
    c.value = j.at("value").get<std::string>();
  } else if (kind == "numeric_equals") {
    c.kind = Check::Kind::numeric_equals;
    need_app();
    c.target = j.at("cell").get<std::string>();
    c.number = j.at("value").get<double>();
    c.tolerance = j.value("tolerance", 1e-9);
    if (!(c.tolerance >= 0.0)) throw std::invalid_argument("tolerance must be >= 0");
  } else if (kind == "file_exists") {
    c.kind = Check::Kind::file_exists;
    need_app();
    c.target = j.at("name").get<std::string>();
    c.expect = j.value("expect", true);
  } else if (kind == "text_contains") {
    c.kind = Check::Kind::text_contains;
    need_app();
    c.target = j.at("text").get<std::string>();
  } else if (kind == "text_equals") {
    c.kind = Check::Kind::text_equals;
    need_app();
    c.target = j.at("text").get<std::string>();
  } else if (kind == "terminated_with") {
    c.kind = Check::Kind::terminated_with;
    const auto s = j.at("status").get<std::string>();
    if (s == "success") c.status = TerminationStatus::success;
    else if (s == "failure") c.status = TerminationStatus::failure;
    else throw std::invalid_argument("status must be success or failure");
  } else if (kind == "all_of") {
    c.kind = Check::Kind::all_of;
    for (const auto& child : j.at("checks")) c.children.push_back(parse_check(child));
  } else {
    throw std::invalid_argument("unknown check kind '" + kind + "'");
  }
  return c;
}

}  // namespace

void to_json(json& j, const Check& c) {
  j = {{"kind", std::string(check_kind_name(c.kind))}};
  switch (c.kind) {
    case Check::Kind::cell_equals:
      j["app"] = c.app;
      j["cell"] = c.target;
      j["value"] = c.value;
      break;
    case Check::Kind::numeric_equals:
      j["app"] = c.app;
      j["cell"] = c.target;
      j["value"] = c.number;
      j["tolerance"] = c.tolerance;
      break;
    case Check::Kind::file_exists:
      j["app"] = c.app;
      j["name"] = c.target;
      j["expect"] = c.expect;
      break;
    case Check::Kind::text_contains:
    case Check::Kind::text_equals:
      j["app"] = c.app;
      j["text"] = c.target;
      break;
    case Check::Kind::terminated_with:
      j["status"] = std::string(to_string(c.status));
      break;
    case Check::Kind::all_of:
      j["checks"] = c.children;
      break;
  }
}

void from_json(const json& j, Check& c) {
  try {
    c = parse_check(j);
  } catch (const json::exception& e) {
    throw std::invalid_argument(e.what());
  }
}

ValidatorSpec parse_validator(const json& j) {
  const json& list = j.is_array() ? j : j.at("checks");
  if (!list.is_array()) throw ValidationError(0, "checks must be an array");
  ValidatorSpec v;
  for (std::size_t i = 0; i < list.size(); ++i) {
    try {
      v.checks.push_back(parse_check(list[i]));
    } catch (const std::exception& e) {
      throw ValidationError(i, e.what());
    }
  }
  return v;
}

std::string canonical_validator(const ValidatorSpec& v) { return json(v).dump(); }

void to_json(json& j, const ValidatorSpec& v) { j = {{"checks", v.checks}}; }
void from_json(const json& j, ValidatorSpec& v) { v = parse_validator(j); }

void to_json(json& j, const Task& t) {
  j = {{"id", t.id},         {"instruction", t.instruction}, {"config", t.init_config},
       {"evaluator", t.validator}, {"domain", t.domain},      {"feasible", t.feasible},
       {"family", t.family}};
  json sol = json::array();
  for (const auto& a : t.solution) sol.push_back(serialize_action(a));
  j["solution"] = sol;
}

void from_json(const json& j, Task& t) {
  t.id = j.at("id").get<std::string>();
  t.instruction = j.at("instruction").get<std::string>();
  t.init_config = j.at("config");
  t.validator = parse_validator(j.at("evaluator"));
  t.domain = j.value("domain", "");
  t.feasible = j.value("feasible", true);
  t.family = j.value("family", "");
  t.solution.clear();
  if (j.contains("solution"))
    for (const auto& a : j["solution"]) t.solution.push_back(parse_action(a.get<std::string>()));
}

void to_json(json& j, const TokenizedResponse& r) {
  j = {{"tokens", r.tokens}, {"logprobs", r.logprobs}, {"reasoning_tokens", r.reasoning_tokens}};
  if (r.placeholder) j["placeholder"] = true;
}
void from_json(const json& j, TokenizedResponse& r) {
  r.tokens = j.at("tokens").get<std::vector<std::string>>();
  r.logprobs = j.at("logprobs").get<std::vector<double>>();
  r.reasoning_tokens = j.value("reasoning_tokens", std::size_t{0});
  r.placeholder = j.value("placeholder", false);
  if (r.tokens.size() != r.logprobs.size()) throw std::invalid_argument("tokens/logprobs length mismatch");
}

void to_json(json& j, const Step& s) {
  j = {{"obs", s.observation},        {"reasoning", s.reasoning},       {"action", serialize_action(s.action)},
       {"loss_mask", s.loss_mask},    {"state_hash", s.state_hash},     {"relaxed_hash", s.relaxed_hash}};
  if (s.response) j["response"] = *s.response;
}
void from_json(const json& j, Step& s) {
  s.observation = j.at("obs").get<Observation>();
  s.reasoning = j.value("reasoning", "");
  s.action = parse_action(j.at("action").get<std::string>());
  s.loss_mask = j.value("loss_mask", true);
  s.state_hash = j.value("state_hash", "");
  s.relaxed_hash = j.value("relaxed_hash", "");
  if (j.contains("response")) s.response = j["response"].get<TokenizedResponse>();
  else s.response.reset();
}

void to_json(json& j, const Trajectory& t) {
  j = {{"id", t.id},
       {"task_id", t.task_id},
       {"instruction", t.instruction},
       {"domain", t.domain},
       {"seed", t.seed},
       {"reward", t.reward},
       {"terminal_state_hash", t.terminal_state_hash},
       {"terminal_relaxed_hash", t.terminal_relaxed_hash},
       {"steps", t.steps}};
  if (!t.violations.empty()) j["violations"] = t.violations;
}
void from_json(const json& j, Trajectory& t) {
  t.id = j.value("id", "");
  t.task_id = j.at("task_id").get<std::string>();
  t.instruction = j.value("instruction", "");
  t.domain = j.value("domain", "");
  t.seed = j.at("seed").get<std::uint64_t>();
  t.reward = j.at("reward").get<int>();
  if (t.reward != 0 && t.reward != 1) throw std::invalid_argument("reward must be 0 or 1");
  t.terminal_state_hash = j.at("terminal_state_hash").get<std::string>();
  t.terminal_relaxed_hash = j.value("terminal_relaxed_hash", "");
  t.steps = j.at("steps").get<std::vector<Step>>();
  t.violations = j.value("violations", std::vector<std::string>{});
}

void to_json(json& j, const Context& c) {
  json recent = json::array();
  for (const auto& e : c.recent_steps)
    recent.push_back({{"index", e.index}, {"obs", e.observation}, {"reasoning", e.reasoning}, {"action", serialize_action(e.action)}});
  json compressed = json::array();
  for (const auto& h : c.compressed_history) compressed.push_back({{"index", h.index}, {"text", h.text}});
  j = {{"task_id", c.task_id},   {"domain", c.domain},        {"instruction", c.instruction},
       {"step_index", c.step_index}, {"recent_steps", recent}, {"compressed_history", compressed}};
}
void from_json(const json& j, Context& c) {
  c.task_id = j.value("task_id", "");
  c.domain = j.value("domain", "");
  c.instruction = j.at("instruction").get<std::string>();
  c.step_index = j.value("step_index", std::size_t{0});
  c.recent_steps.clear();
  for (const auto& e : j.at("recent_steps"))
    c.recent_steps.push_back({e.at("index").get<std::size_t>(), e.at("obs").get<Observation>(),
                              e.value("reasoning", ""), parse_action(e.at("action").get<std::string>())});
  c.compressed_history.clear();
  for (const auto& h : j.at("compressed_history"))
    c.compressed_history.push_back({h.at("index").get<std::size_t>(), h.at("text").get<std::string>()});
}

std::vector<Task> load_tasks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open task corpus '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("task corpus '" + path + "': " + e.what());
  }
  if (!j.is_array()) throw std::runtime_error("task corpus '" + path + "' must be a JSON array");
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < j.size(); ++i) {
    try {
      tasks.push_back(j[i].get<Task>());
    } catch (const std::exception& e) {
      throw std::runtime_error("task corpus '" + path + "' entry " + std::to_string(i) + ": " + e.what());
    }
  }
  return tasks;
}

void save_tasks(const std::string& path, const std::vector<Task>& tasks) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << json(tasks).dump(2) << '\n';
}

std::vector<Trajectory> load_trajectories(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trajectory file '" + path + "'");
  std::vector<Trajectory> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line).get<Trajectory>());
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_trajectories(const std::string& path, const std::vector<Trajectory>& trajs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  for (const auto& t : trajs) out << json(t).dump() << '\n';
}

}  // namespace evoloop
