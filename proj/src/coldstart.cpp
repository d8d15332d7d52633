#include "evoloop/coldstart.hpp"

namespace evoloop::coldstart {

using nlohmann::json;

std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::goal: return "goal";
    case Phase::observation: return "observation";
    case Phase::reflect: return "reflect";
    case Phase::termination: return "termination";
  }
  return "?";
}

std::string screen_summary(const Observation& obs) {
  std::string title;
  const Widget* focus = focused_widget(obs);
  for (const auto& w : obs.widgets)
    if (w.kind == "toolbar") {
      title = w.text.substr(0, w.text.find(" | "));
      break;
    }
  if (title.empty()) title = "the desktop";
  if (!focus) return title + " with nothing selected";
  return title + " with " + widget_label(*focus) + " selected";
}

std::string key_widget_text(const Observation& obs) {
  if (const Widget* f = focused_widget(obs); f && !f->text.empty()) return f->text;
  for (const auto& w : obs.widgets)
    if (w.kind == "toolbar" && !w.text.empty()) return w.text;
  for (const auto& w : obs.widgets)
    if (!w.text.empty()) return w.text;
  return "an empty screen";
}

PhaseInput phase_input(Phase phase, const std::string& instruction, const Observation& obs, const Action& action,
                       std::size_t index) {
  PhaseInput in;
  in.phase = phase;
  in.step_index = index;
  in.instruction = instruction;
  in.screen = screen_summary(obs);
  in.action = summarize_action(action, obs);
  in.evidence = key_widget_text(obs);
  if (action.kind == ActionKind::terminate) in.status = action.status;
  return in;
}

namespace {

std::string verification(const PhaseInput& in) {
  if (!in.status)
    return "Check: the screen shows \"" + in.evidence + "\". The goal is not reached yet, so I continue: " + in.action + ".";
  const bool ok = in.status == TerminationStatus::success;
  return std::string("Check: the screen shows \"") + in.evidence + "\". " +
         (ok ? "This matches the goal, so the task is complete." : "The request cannot be met here, so I report failure.");
}

std::string template_generate(const PhaseInput& in) {
  std::string out;
  switch (in.phase) {
    case Phase::goal:
      out = "I see " + in.screen + ". The goal: " + in.instruction + " My plan starts with: " + in.action + ".";
      break;
    case Phase::reflect:
      out = kReflectionHeader + "my earlier attempt went wrong because " + in.error_context + ". The screen now shows \"" +
            in.evidence + "\". Now I will try a different approach: " + in.action + ".";
      break;
    case Phase::observation:
      out = "After " + (in.previous.empty() ? std::string("the last step") : in.previous) + ", I see " + in.screen +
            ". To keep going I need to " + in.action + ".";
      break;
    case Phase::termination:
      return verification(in);
  }
  if (in.status) out += " " + verification(in);
  return out;
}

void check_output(const PhaseInput& in, const std::string& z) {
  if (z.empty()) throw ProviderError("provider returned an empty trace for step " + std::to_string(in.step_index));
  const bool header = z.rfind(kReflectionHeader, 0) == 0;
  if (header != (in.phase == Phase::reflect))
    throw ProviderError("reflection header mismatch at step " + std::to_string(in.step_index));
}

}  // namespace

ReasoningProvider template_provider() {
  return {"template", [](const PhaseInput& in) {
            std::string z = template_generate(in);
            check_output(in, z);
            return z;
          }};
}

ReasoningProvider external_provider(std::function<std::string(const PhaseInput&)> fn) {
  return {"external", [fn = std::move(fn)](const PhaseInput& in) {
            std::string z = fn(in);
            check_output(in, z);
            return z;
          }};
}

Phase phase_for(std::size_t t, std::size_t T, bool has_error) {
  if (t == 0) return has_error ? Phase::reflect : Phase::goal;
  if (t + 1 == T) return Phase::termination;
  return Phase::observation;
}

Trajectory hindsight_annotate(const Trajectory& traj, const std::optional<std::string>& error_ctx,
                              const ReasoningProvider& provider) {
  if (!provider.generate) throw ProviderError("provider has no generator");
  Trajectory out = traj;
  const std::size_t T = traj.steps.size();
  for (std::size_t t = 0; t < T; ++t) {
    const Step& s = traj.steps[t];
    PhaseInput in = phase_input(phase_for(t, T, error_ctx.has_value()), traj.instruction, s.observation, s.action, t);
    if (in.phase == Phase::reflect) in.error_context = *error_ctx;
    if (t > 0) in.previous = summarize_action(traj.steps[t - 1].action, traj.steps[t - 1].observation);
    try {
      out.steps[t].reasoning = provider.generate(in);
    } catch (const ProviderError&) {
      throw;
    } catch (const std::exception& e) {
      throw ProviderError("provider failed at step " + std::to_string(t) + ": " + e.what());
    }
  }
  return out;
}

void to_json(json& j, const TrainingSample& s) {
  j = {{"trajectory_id", s.trajectory_id},
       {"task_id", s.task_id},
       {"step_index", s.step_index},
       {"context", s.context},
       {"observation", s.observation},
       {"target_reasoning", s.target_reasoning},
       {"target_action", serialize_action(s.target_action)},
       {"loss_scope", "current_step"}};
}

void from_json(const json& j, TrainingSample& s) {
  s.trajectory_id = j.value("trajectory_id", "");
  s.task_id = j.at("task_id").get<std::string>();
  s.step_index = j.at("step_index").get<std::size_t>();
  s.context = j.at("context").get<Context>();
  s.observation = j.at("observation").get<Observation>();
  s.target_reasoning = j.at("target_reasoning").get<std::string>();
  s.target_action = parse_action(j.at("target_action").get<std::string>());
}

std::vector<TrainingSample> decompose_to_samples(const Trajectory& traj, std::size_t window) {
  for (std::size_t t = 0; t < traj.steps.size(); ++t)
    if (traj.steps[t].reasoning.empty()) throw std::invalid_argument("step " + std::to_string(t) + " is not annotated");
  std::vector<TrainingSample> out;
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const Step& s = traj.steps[t];
    if (!s.loss_mask) continue;
    out.push_back({traj.id, traj.task_id, t, build_context(traj, t, window), s.observation, s.reasoning, s.action});
  }
  return out;
}

}  // namespace evoloop::coldstart
