#pragma once

// Deterministic desktop micro-environment: a spreadsheet, a text editor and
// a file manager behind a symbolic screen.

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "evoloop/action.hpp"
#include "evoloop/model.hpp"

namespace evoloop::sandbox {

inline constexpr int kRowHeight = 20;
inline constexpr int kColumnWidth = 100;
inline constexpr int kToolbarHeight = 40;
inline constexpr int kTaskbarHeight = 30;
inline constexpr int kFileRowWidth = 400;
inline constexpr int kMaxSheetRows = 1000;
inline constexpr int kMaxSheetCols = 52;

struct CellRef {
  int row = 0;  // 0-based
  int col = 0;
  auto operator<=>(const CellRef&) const = default;
};

std::string to_a1(CellRef ref);
std::optional<CellRef> parse_a1(std::string_view a1);

struct Spreadsheet {
  int rows = 1;
  int cols = 1;
  std::map<CellRef, std::string> cells;  // raw content; '=' prefix marks a formula
  std::optional<CellRef> focus;
  bool editing = false;
  int scroll_row = 0;
  int scroll_col = 0;
  bool operator==(const Spreadsheet&) const = default;
};

struct TextEditor {
  std::string buffer;
  std::size_t cursor = 0;
  bool focused = false;
  bool select_all = false;
  bool operator==(const TextEditor&) const = default;
};

struct FileManager {
  std::map<std::string, std::string> files;
  std::optional<std::string> selected;
  std::optional<std::string> rename_buffer;
  bool operator==(const FileManager&) const = default;
};

struct AppState {
  std::string title;
  std::variant<Spreadsheet, TextEditor, FileManager> content;
  bool operator==(const AppState&) const = default;
};

struct PendingInput {
  std::int64_t apply_at = 0;
  Action action;
  bool operator==(const PendingInput&) const = default;
};

struct EnvState {
  std::map<std::string, AppState> apps;
  std::string focused_app;
  std::vector<std::string> held_keys;
  std::string clipboard;
  std::int64_t clock = 0;
  std::optional<TerminationStatus> termination;
  std::vector<PendingInput> pending;
  bool operator==(const EnvState&) const = default;
};

struct NoiseConfig {
  double perturb_prob = 0.0;  // probability an input is dropped
  int latency_steps = 0;      // steps before an input's effect lands
  std::uint64_t seed = 0;
  bool strict_keymap = true;  // off: shifted symbols may be swapped while typing
  bool stable_layout = true;  // off: rendered widget bounds jitter by up to 2px
};

nlohmann::json noise_to_json(const NoiseConfig& n);
NoiseConfig noise_from_json(const nlohmann::json& j);

struct StepResult {
  EnvState state;
  Observation observation;
  bool done = false;
};

class EnvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

EnvState reset(const nlohmann::json& init_config, std::uint64_t seed);
EnvState reset(const Task& task, std::uint64_t seed);

StepResult step(const EnvState& state, const Action& action, const NoiseConfig& noise = {});
Observation render(const EnvState& state);

enum class HashMode { strict, relaxed };
// Canonical JSON of the state. The clock never participates; relaxed mode
// additionally drops focus, cursor, scroll, selection and held keys.
nlohmann::json canonical_state(const EnvState& state, HashMode mode = HashMode::strict);
nlohmann::json dump_state(const EnvState& state);
std::string state_hash(const EnvState& state, HashMode mode = HashMode::strict);

// Empty when every EnvState invariant holds.
std::optional<std::string> check_invariants(const EnvState& state);

// Display text of a cell after formula evaluation ("#ERR!" on bad formulas).
std::string cell_display(const Spreadsheet& sheet, CellRef ref);
std::optional<double> cell_number(const Spreadsheet& sheet, CellRef ref);
std::string format_number(double v);

// Deterministic names/prices/dates table; row 0 is the header.
std::vector<std::vector<std::string>> generate_price_table(int rows, std::uint64_t seed);

// Applies an action list from reset without noise; returns the final state.
EnvState replay(const EnvState& initial, const std::vector<Action>& actions, const NoiseConfig& noise = {});

}  // namespace evoloop::sandbox
