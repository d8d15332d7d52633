#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace evoloop {

enum class ActionKind {
  key,
  key_down,
  key_up,
  type,
  mouse_move,
  left_click,
  right_click,
  middle_click,
  double_click,
  triple_click,
  left_click_drag,
  scroll,
  hscroll,
  wait,
  terminate,
};

inline constexpr std::size_t kActionKindCount = 15;
inline constexpr std::size_t kMaxChordKeys = 8;

enum class TerminationStatus { success, failure };

struct Point {
  int x = 0;
  int y = 0;
  auto operator<=>(const Point&) const = default;
};

struct Action {
  ActionKind kind = ActionKind::wait;
  std::vector<std::string> keys;
  std::optional<std::string> text;
  std::optional<Point> coordinate;
  std::optional<int> pixels;
  std::optional<double> time;
  std::optional<TerminationStatus> status;

  bool operator==(const Action&) const = default;

  static Action key_press(std::vector<std::string> keys);
  static Action key_down(std::vector<std::string> keys);
  static Action key_up(std::vector<std::string> keys);
  static Action type_text(std::string text);
  static Action pointer(ActionKind kind, int x, int y);
  static Action click(int x, int y) { return pointer(ActionKind::left_click, x, y); }
  static Action scroll(int pixels, bool horizontal = false);
  static Action wait(double seconds);
  static Action terminate(TerminationStatus status);
};

class ActionParseError : public std::runtime_error {
 public:
  ActionParseError(std::size_t offset, const std::string& message)
      : std::runtime_error("offset " + std::to_string(offset) + ": " + message), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

std::string_view to_string(ActionKind kind);
std::optional<ActionKind> action_kind_from_string(std::string_view name);
std::string_view to_string(TerminationStatus status);
const std::array<ActionKind, kActionKindCount>& all_action_kinds();

bool is_pointer_kind(ActionKind kind);
bool is_keyboard_kind(ActionKind kind);

// Lowercases and resolves aliases ("Control" -> "ctrl", "Return" -> "enter").
std::string normalize_key(std::string_view key);

// Empty when the action carries exactly the arguments its kind requires.
std::optional<std::string> check_action(const Action& action);

// Accepts the canonical text form (`left_click coordinate=(100,200)`) or
// the JSON encoding `{"action": ..., "args": {...}}`.
Action parse_action(std::string_view text);
std::string serialize_action(const Action& action);

nlohmann::json action_to_json(const Action& action);
Action action_from_json(const nlohmann::json& j);

struct SequenceViolation {
  std::size_t step_index = 0;
  std::string rule_id;  // unreleased_key | release_not_held | terminate_not_final | release_order
  std::string message;
  bool operator==(const SequenceViolation&) const = default;
};

struct SequenceReport {
  bool valid = true;
  std::vector<SequenceViolation> violations;
};

SequenceReport validate_sequence(std::span<const Action> actions);

}  // namespace evoloop
