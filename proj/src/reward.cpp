#include "evoloop/reward.hpp"

#include <cmath>

namespace evoloop {

namespace {

using sandbox::EnvState;

template <typename App>
const App& app_as(const EnvState& s, const std::string& id, std::string_view kind) {
  auto it = s.apps.find(id);
  if (it == s.apps.end()) throw std::invalid_argument("no app '" + id + "'");
  const App* app = std::get_if<App>(&it->second.content);
  if (!app) throw std::invalid_argument("app '" + id + "' is not a " + std::string(kind));
  return *app;
}

sandbox::CellRef cell_ref(const sandbox::Spreadsheet& sheet, const std::string& a1) {
  auto ref = sandbox::parse_a1(a1);
  if (!ref || ref->row >= sheet.rows || ref->col >= sheet.cols) throw std::invalid_argument("bad cell reference '" + a1 + "'");
  return *ref;
}

bool holds(const Check& c, const EnvState& s) {
  switch (c.kind) {
    case Check::Kind::cell_equals: {
      const auto& sheet = app_as<sandbox::Spreadsheet>(s, c.app, "spreadsheet");
      return sandbox::cell_display(sheet, cell_ref(sheet, c.target)) == c.value;
    }
    case Check::Kind::numeric_equals: {
      const auto& sheet = app_as<sandbox::Spreadsheet>(s, c.app, "spreadsheet");
      auto v = sandbox::cell_number(sheet, cell_ref(sheet, c.target));
      return v && std::fabs(*v - c.number) <= c.tolerance;
    }
    case Check::Kind::file_exists: {
      const auto& fm = app_as<sandbox::FileManager>(s, c.app, "filemanager");
      return (fm.files.count(c.target) > 0) == c.expect;
    }
    case Check::Kind::text_contains: {
      const auto& ed = app_as<sandbox::TextEditor>(s, c.app, "texteditor");
      return ed.buffer.find(c.target) != std::string::npos;
    }
    case Check::Kind::text_equals:
      return app_as<sandbox::TextEditor>(s, c.app, "texteditor").buffer == c.target;
    case Check::Kind::terminated_with:
      return s.termination == c.status;
    case Check::Kind::all_of: {
      // Evaluate every child so malformed children surface regardless of order.
      bool all = true;
      for (const auto& child : c.children) all = holds(child, s) && all;
      return all;
    }
  }
  return false;
}

}  // namespace

int evaluate_reward(const ValidatorSpec& validator, const EnvState& terminal_state) {
  bool all = true;
  for (std::size_t i = 0; i < validator.checks.size(); ++i) {
    try {
      all = holds(validator.checks[i], terminal_state) && all;
    } catch (const std::invalid_argument& e) {
      throw ValidationError(i, e.what());
    }
  }
  return all ? 1 : 0;
}

}  // namespace evoloop
