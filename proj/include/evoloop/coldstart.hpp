#pragma once

// Hindsight reasoning: phase-dispatched traces written after the fact for
// known actions, and decomposition of trajectories into single-step samples.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evoloop/model.hpp"

namespace evoloop::coldstart {

inline const std::string kReflectionHeader = "Reflection: ";

enum class Phase { goal, observation, reflect, termination };
std::string_view to_string(Phase p);

struct PhaseInput {
  Phase phase = Phase::observation;
  std::size_t step_index = 0;
  std::string instruction;
  std::string screen;          // semantic summary of the observation
  std::string action;          // semantic summary of the action
  std::string evidence;        // key widget text of the observation
  std::string error_context;   // reflect phase only
  std::string previous;        // summary of the previous action, empty at t=0
  std::optional<TerminationStatus> status;  // set when the action is terminate
};

class ProviderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ReasoningProvider {
  std::string kind;  // template | external
  std::function<std::string(const PhaseInput&)> generate;
};

ReasoningProvider template_provider();
// Wraps a caller-supplied generator; its output is checked like the
// template provider's (non-empty, reflection header iff reflect phase).
ReasoningProvider external_provider(std::function<std::string(const PhaseInput&)> fn);

// "Scores, cell G2 selected"; never coordinates.
std::string screen_summary(const Observation& obs);
// Text of the focused widget, falling back to the toolbar text.
std::string key_widget_text(const Observation& obs);
PhaseInput phase_input(Phase phase, const std::string& instruction, const Observation& obs, const Action& action,
                       std::size_t index);

// Phase of step t in a T-step trajectory: t=0 is goal (reflect with an
// error context), the last step is termination, the rest are observation.
// A one-step trajectory takes the t=0 phase.
Phase phase_for(std::size_t t, std::size_t T, bool has_error);

// Fills every step's reasoning. On any provider failure the input
// trajectory is returned untouched and ProviderError is thrown.
Trajectory hindsight_annotate(const Trajectory& traj, const std::optional<std::string>& error_ctx,
                              const ReasoningProvider& provider);

struct TrainingSample {
  std::string trajectory_id;
  std::string task_id;
  std::size_t step_index = 0;
  Context context;
  Observation observation;
  std::string target_reasoning;
  Action target_action;
};

void to_json(nlohmann::json& j, const TrainingSample& s);
void from_json(const nlohmann::json& j, TrainingSample& s);

// One sample per unmasked step; masked steps still appear in later history.
std::vector<TrainingSample> decompose_to_samples(const Trajectory& traj, std::size_t window = kDefaultContextWindow);

}  // namespace evoloop::coldstart
