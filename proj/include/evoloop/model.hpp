#pragma once

// Data model shared by every stage: screens, tasks, validators, steps,
// trajectories and the bounded-history context a policy sees.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "evoloop/action.hpp"

namespace evoloop {

inline constexpr int kScreenWidth = 1280;
inline constexpr int kScreenHeight = 720;
inline constexpr std::size_t kDefaultContextWindow = 5;

struct Rect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
  bool contains(Point p) const { return p.x >= x && p.x < x + w && p.y >= y && p.y < y + h; }
  Point center() const { return {x + w / 2, y + h / 2}; }
  bool operator==(const Rect&) const = default;
};

struct Widget {
  std::string id;
  std::string kind;  // toolbar | cell | editor | file | rename_box | taskbar | button
  Rect bounds;
  std::string text;
  bool focused = false;
  bool operator==(const Widget&) const = default;
};

struct Observation {
  int step_index = 0;
  int height = kScreenHeight;
  int width = kScreenWidth;
  std::vector<Widget> widgets;
  std::string state_hash;  // digest of the state this screen was rendered from
  std::string note;        // transition metadata, e.g. "out_of_bounds" for misclicks
  bool operator==(const Observation&) const = default;
};

// Topmost widget containing p; later widgets in z-order win ties.
const Widget* hit_test(const Observation& obs, Point p);
const Widget* find_widget(const Observation& obs, const std::string& id);
const Widget* focused_widget(const Observation& obs);
// Semantic name for a widget ("cell B2", "report.txt"), never coordinates.
std::string widget_label(const Widget& w);

struct Check {
  enum class Kind { cell_equals, numeric_equals, file_exists, text_contains, text_equals, terminated_with, all_of };
  Kind kind = Kind::all_of;
  std::string app;
  std::string target;  // cell reference, file name or searched text
  std::string value;   // expected display text for cell_equals
  double number = 0.0;
  double tolerance = 0.0;
  bool expect = true;  // file_exists: false asserts absence
  TerminationStatus status = TerminationStatus::success;
  std::vector<Check> children;
  bool operator==(const Check&) const = default;
};

struct ValidatorSpec {
  std::vector<Check> checks;
  bool operator==(const ValidatorSpec&) const = default;
};

class ValidationError : public std::runtime_error {
 public:
  ValidationError(std::size_t check_index, const std::string& message)
      : std::runtime_error("check " + std::to_string(check_index) + ": " + message), index_(check_index) {}
  std::size_t check_index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

struct Task {
  std::string id;
  std::string instruction;
  ValidatorSpec validator;
  nlohmann::json init_config = nlohmann::json::object();
  std::string domain;  // taxonomy path, e.g. "office/spreadsheet/max_per_row"
  bool feasible = true;
  std::string family;              // equivalence class shared by tasks from one template
  std::vector<Action> solution;    // ground-truth script, empty when unknown
  bool operator==(const Task&) const = default;
};

struct TokenizedResponse {
  std::vector<std::string> tokens;  // reasoning tokens first, then action tokens
  std::vector<double> logprobs;
  std::size_t reasoning_tokens = 0;
  bool placeholder = false;  // producing policy could not supply real log-probs
  bool operator==(const TokenizedResponse&) const = default;
};

struct Step {
  Observation observation;
  std::string reasoning;
  Action action;
  bool loss_mask = true;  // true: step is supervised
  std::string state_hash;    // pre-action state, strict digest
  std::string relaxed_hash;  // pre-action state, ignoring focus/cursor/scroll
  std::optional<TokenizedResponse> response;
  bool operator==(const Step&) const = default;
};

struct Trajectory {
  std::string id;
  std::string task_id;
  std::string instruction;
  std::string domain;
  std::uint64_t seed = 0;
  std::vector<Step> steps;
  std::string terminal_state_hash;
  std::string terminal_relaxed_hash;
  int reward = 0;
  std::vector<std::string> violations;
  bool operator==(const Trajectory&) const = default;
};

struct HistoryLine {
  std::size_t index = 0;
  std::string text;
  bool operator==(const HistoryLine&) const = default;
};

struct ContextEntry {
  std::size_t index = 0;
  Observation observation;
  std::string reasoning;
  Action action;
  bool operator==(const ContextEntry&) const = default;
};

struct Context {
  std::string task_id;
  std::string domain;
  std::string instruction;
  std::size_t step_index = 0;
  std::vector<ContextEntry> recent_steps;
  std::vector<HistoryLine> compressed_history;
  bool operator==(const Context&) const = default;
};

// "step k: <verb> <target>" with no coordinates.
std::string summarize_step(std::size_t index, const Step& step);
std::string summarize_action(const Action& action, const Observation& obs);

Context build_context(const Trajectory& traj, std::size_t t, std::size_t window = kDefaultContextWindow);

void to_json(nlohmann::json& j, const Rect& r);
void from_json(const nlohmann::json& j, Rect& r);
void to_json(nlohmann::json& j, const Widget& w);
void from_json(const nlohmann::json& j, Widget& w);
void to_json(nlohmann::json& j, const Observation& o);
void from_json(const nlohmann::json& j, Observation& o);
void to_json(nlohmann::json& j, const Check& c);
void from_json(const nlohmann::json& j, Check& c);
void to_json(nlohmann::json& j, const ValidatorSpec& v);
void from_json(const nlohmann::json& j, ValidatorSpec& v);
void to_json(nlohmann::json& j, const Task& t);
void from_json(const nlohmann::json& j, Task& t);
void to_json(nlohmann::json& j, const TokenizedResponse& r);
void from_json(const nlohmann::json& j, TokenizedResponse& r);
void to_json(nlohmann::json& j, const Step& s);
void from_json(const nlohmann::json& j, Step& s);
void to_json(nlohmann::json& j, const Trajectory& t);
void from_json(const nlohmann::json& j, Trajectory& t);
void to_json(nlohmann::json& j, const Context& c);
void from_json(const nlohmann::json& j, Context& c);

// Parses {"checks": [...]} (or a bare array); malformed checks raise
// ValidationError naming the top-level index.
ValidatorSpec parse_validator(const nlohmann::json& j);
std::string canonical_validator(const ValidatorSpec& v);

std::vector<Task> load_tasks(const std::string& path);
void save_tasks(const std::string& path, const std::vector<Task>& tasks);
std::vector<Trajectory> load_trajectories(const std::string& path);
void save_trajectories(const std::string& path, const std::vector<Trajectory>& trajs);

}  // namespace evoloop
