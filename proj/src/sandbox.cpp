#include "evoloop/sandbox.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <set>

#include "evoloop/rng.hpp"

namespace evoloop::sandbox {

using nlohmann::json;

namespace {

constexpr std::array<std::pair<char, char>, 21> kShiftPairs = {{
    {'1', '!'}, {'2', '@'}, {'3', '#'}, {'4', '$'}, {'5', '%'}, {'6', '^'}, {'7', '&'},
    {'8', '*'}, {'9', '('}, {'0', ')'}, {'-', '_'}, {'=', '+'}, {';', ':'}, {'\'', '"'},
    {',', '<'}, {'.', '>'}, {'/', '?'}, {'[', '{'}, {']', '}'}, {'\\', '|'}, {'`', '~'},
}};

const std::set<std::string>& modifier_keys() {
  static const std::set<std::string> mods = {"ctrl", "shift", "alt", "meta"};
  return mods;
}

int content_bottom(const EnvState& s) { return s.apps.size() > 1 ? kScreenHeight - kTaskbarHeight : kScreenHeight; }
int visible_rows(const EnvState& s) { return (content_bottom(s) - kToolbarHeight) / kRowHeight; }
int visible_cols() { return kScreenWidth / kColumnWidth; }

std::optional<double> parse_number_text(std::string_view s) {
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// Parsed "=FN(arg, ...)" with arguments flattened to rectangular ranges.
struct Formula {
  std::string fn;
  std::vector<std::pair<CellRef, CellRef>> ranges;
};

std::optional<Formula> parse_formula(std::string_view raw) {
  if (raw.empty() || raw[0] != '=') return std::nullopt;
  std::string s;
  for (char c : raw.substr(1))
    if (!std::isspace(static_cast<unsigned char>(c))) s += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  const auto open = s.find('(');
  if (open == std::string::npos || s.back() != ')') return std::nullopt;
  Formula f;
  f.fn = s.substr(0, open);
  if (f.fn != "MAX" && f.fn != "SUM" && f.fn != "MIN") return std::nullopt;
  const std::string args = s.substr(open + 1, s.size() - open - 2);
  if (args.empty()) return std::nullopt;
  std::size_t start = 0;
  while (start <= args.size()) {
    const auto comma = args.find(',', start);
    const std::string arg = args.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    const auto colon = arg.find(':');
    auto a = parse_a1(arg.substr(0, colon));
    auto b = colon == std::string::npos ? a : parse_a1(arg.substr(colon + 1));
    if (!a || !b) return std::nullopt;
    f.ranges.push_back({{std::min(a->row, b->row), std::min(a->col, b->col)},
                        {std::max(a->row, b->row), std::max(a->col, b->col)}});
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return f;
}

enum class EvalError { none, bad, cycle };

struct Evaluator {
  explicit Evaluator(const Spreadsheet& s) : sheet(s) {}
  const Spreadsheet& sheet;
  std::map<CellRef, std::optional<double>> memo;
  std::set<CellRef> visiting;
  EvalError error = EvalError::none;

  // nullopt: not numeric (text or empty); error flagged separately.
  std::optional<double> value(CellRef ref) {
    if (auto it = memo.find(ref); it != memo.end()) return it->second;
    auto cell = sheet.cells.find(ref);
    if (cell == sheet.cells.end()) return std::nullopt;
    const std::string& raw = cell->second;
    if (raw.empty() || raw[0] != '=') return memo[ref] = parse_number_text(raw);
    if (visiting.count(ref)) {
      error = EvalError::cycle;
      return std::nullopt;
    }
    auto f = parse_formula(raw);
    if (!f) {
      error = EvalError::bad;
      return std::nullopt;
    }
    visiting.insert(ref);
    std::optional<double> acc;
    for (const auto& [lo, hi] : f->ranges) {
      for (int r = lo.row; r <= hi.row && r < sheet.rows; ++r)
        for (int c = lo.col; c <= hi.col && c < sheet.cols; ++c) {
          auto v = value({r, c});
          if (error != EvalError::none) {
            visiting.erase(ref);
            return std::nullopt;
          }
          if (!v) continue;
          if (!acc) acc = *v;
          else if (f->fn == "MAX") acc = std::max(*acc, *v);
          else if (f->fn == "MIN") acc = std::min(*acc, *v);
          else acc = *acc + *v;
        }
    }
    visiting.erase(ref);
    return memo[ref] = acc.value_or(0.0);
  }
};

bool creates_cycle(const Spreadsheet& sheet, CellRef start) {
  Evaluator ev(sheet);
  ev.value(start);
  return ev.error == EvalError::cycle;
}

Spreadsheet* sheet_of(EnvState& s) { return std::get_if<Spreadsheet>(&s.apps.at(s.focused_app).content); }
TextEditor* editor_of(EnvState& s) { return std::get_if<TextEditor>(&s.apps.at(s.focused_app).content); }
FileManager* files_of(EnvState& s) { return std::get_if<FileManager>(&s.apps.at(s.focused_app).content); }

void set_cell(Spreadsheet& sheet, CellRef ref, std::string content) {
  if (content.empty()) {
    sheet.cells.erase(ref);
    return;
  }
  sheet.cells[ref] = std::move(content);
  if (creates_cycle(sheet, ref)) sheet.cells[ref] = "#CYCLE!";
}

void move_focus(Spreadsheet& sheet, int dr, int dc) {
  if (!sheet.focus) return;
  sheet.focus->row = std::clamp(sheet.focus->row + dr, 0, sheet.rows - 1);
  sheet.focus->col = std::clamp(sheet.focus->col + dc, 0, sheet.cols - 1);
  sheet.editing = false;
}

void type_into(EnvState& s, const std::string& text) {
  if (auto* sheet = sheet_of(s)) {
    if (!sheet->focus) return;
    std::size_t start = 0;
    for (;;) {
      const auto nl = text.find('\n', start);
      const std::string chunk = text.substr(start, nl == std::string::npos ? std::string::npos : nl - start);
      if (!chunk.empty()) {
        auto it = sheet->cells.find(*sheet->focus);
        std::string current = (sheet->editing && it != sheet->cells.end()) ? it->second : std::string();
        set_cell(*sheet, *sheet->focus, current + chunk);
        sheet->editing = true;
      }
      if (nl == std::string::npos) break;
      move_focus(*sheet, 1, 0);
      start = nl + 1;
    }
  } else if (auto* ed = editor_of(s)) {
    if (!ed->focused) return;
    if (ed->select_all) {
      ed->buffer.clear();
      ed->cursor = 0;
      ed->select_all = false;
    }
    ed->buffer.insert(ed->cursor, text);
    ed->cursor += text.size();
  } else if (auto* fm = files_of(s)) {
    if (fm->rename_buffer) *fm->rename_buffer += text;
  }
}

void press_chord(EnvState& s, const std::vector<std::string>& keys) {
  std::set<std::string> mods;
  for (const auto& k : s.held_keys)
    if (modifier_keys().count(k)) mods.insert(k);
  std::string main;
  for (const auto& k : keys) {
    if (modifier_keys().count(k)) mods.insert(k);
    else main = k;
  }
  if (main.empty()) return;
  const bool ctrl = mods.count("ctrl") > 0;
  const bool shift = mods.count("shift") > 0;

  if (ctrl && main == "c") {
    if (auto* sheet = sheet_of(s)) {
      if (sheet->focus) {
        auto it = sheet->cells.find(*sheet->focus);
        s.clipboard = it == sheet->cells.end() ? "" : it->second;
      }
    } else if (auto* ed = editor_of(s)) {
      if (ed->select_all) s.clipboard = ed->buffer;
    } else if (auto* fm = files_of(s)) {
      if (fm->selected) s.clipboard = *fm->selected;
    }
    return;
  }
  if (ctrl && main == "v") {
    if (!s.clipboard.empty()) type_into(s, s.clipboard);
    return;
  }
  if (ctrl && main == "a") {
    if (auto* ed = editor_of(s); ed && ed->focused) ed->select_all = true;
    return;
  }
  if (ctrl || mods.count("alt") || mods.count("meta")) return;

  if (auto* sheet = sheet_of(s)) {
    if (main == "enter") move_focus(*sheet, 1, 0);
    else if (main == "tab") move_focus(*sheet, 0, 1);
    else if (main == "up") move_focus(*sheet, -1, 0);
    else if (main == "down") move_focus(*sheet, 1, 0);
    else if (main == "left") move_focus(*sheet, 0, -1);
    else if (main == "right") move_focus(*sheet, 0, 1);
    else if (main == "escape") sheet->editing = false;
    else if (main == "delete" && sheet->focus) set_cell(*sheet, *sheet->focus, "");
    else if (main == "backspace" && sheet->focus) {
      auto it = sheet->cells.find(*sheet->focus);
      if (sheet->editing && it != sheet->cells.end()) {
        std::string v = it->second;
        v.pop_back();
        set_cell(*sheet, *sheet->focus, v);
      } else {
        set_cell(*sheet, *sheet->focus, "");
        sheet->editing = true;
      }
    } else if (main == "space") type_into(s, " ");
    else if (main.size() == 1) type_into(s, shift ? std::string(1, static_cast<char>(std::toupper(main[0]))) : main);
  } else if (auto* ed = editor_of(s)) {
    if (!ed->focused) return;
    if (main == "enter") type_into(s, "\n");
    else if (main == "tab") type_into(s, "\t");
    else if (main == "space") type_into(s, " ");
    else if (main == "escape") ed->select_all = false;
    else if (main == "home") ed->cursor = 0, ed->select_all = false;
    else if (main == "end") ed->cursor = ed->buffer.size(), ed->select_all = false;
    else if (main == "left") ed->cursor = ed->cursor > 0 ? ed->cursor - 1 : 0, ed->select_all = false;
    else if (main == "right") ed->cursor = std::min(ed->cursor + 1, ed->buffer.size()), ed->select_all = false;
    else if (main == "backspace" || main == "delete") {
      if (ed->select_all) {
        ed->buffer.clear();
        ed->cursor = 0;
        ed->select_all = false;
      } else if (main == "backspace" && ed->cursor > 0) {
        ed->buffer.erase(ed->cursor - 1, 1);
        --ed->cursor;
      } else if (main == "delete" && ed->cursor < ed->buffer.size()) {
        ed->buffer.erase(ed->cursor, 1);
      }
    } else if (main.size() == 1) {
      type_into(s, shift ? std::string(1, static_cast<char>(std::toupper(main[0]))) : main);
    }
  } else if (auto* fm = files_of(s)) {
    if (fm->rename_buffer) {
      if (main == "enter") {
        const std::string target = *fm->rename_buffer;
        fm->rename_buffer.reset();
        if (!target.empty() && fm->selected && target != *fm->selected && !fm->files.count(target)) {
          auto node = fm->files.extract(*fm->selected);
          node.key() = target;
          fm->files.insert(std::move(node));
          fm->selected = target;
        }
      } else if (main == "escape") {
        fm->rename_buffer.reset();
      } else if (main == "backspace") {
        if (!fm->rename_buffer->empty()) fm->rename_buffer->pop_back();
      } else if (main == "space") {
        *fm->rename_buffer += ' ';
      } else if (main.size() == 1) {
        *fm->rename_buffer += shift ? static_cast<char>(std::toupper(main[0])) : main[0];
      }
      return;
    }
    if (main == "f2" && fm->selected) fm->rename_buffer = std::string();
    else if (main == "delete" && fm->selected) {
      fm->files.erase(*fm->selected);
      fm->selected.reset();
    } else if ((main == "up" || main == "down") && !fm->files.empty()) {
      auto it = fm->selected ? fm->files.find(*fm->selected) : fm->files.end();
      if (it == fm->files.end()) it = fm->files.begin();
      else if (main == "down" && std::next(it) != fm->files.end()) ++it;
      else if (main == "up" && it != fm->files.begin()) --it;
      fm->selected = it->first;
    }
  }
}

void pointer_on(EnvState& s, ActionKind kind, const Widget& w) {
  if (kind == ActionKind::mouse_move || kind == ActionKind::middle_click) return;
  if (w.kind == "taskbar") {
    s.focused_app = w.id.substr(w.id.find(':') + 1);
    return;
  }
  if (w.kind == "cell") {
    auto* sheet = sheet_of(s);
    sheet->focus = parse_a1(w.id.substr(5));
    sheet->editing = kind == ActionKind::double_click;
  } else if (w.kind == "editor") {
    auto* ed = editor_of(s);
    if (kind == ActionKind::right_click) return;
    ed->focused = true;
    ed->cursor = ed->buffer.size();
    ed->select_all = kind == ActionKind::triple_click;
  } else if (w.kind == "file") {
    auto* fm = files_of(s);
    fm->selected = w.text;
    fm->rename_buffer.reset();
  }
}

void apply_input(EnvState& s, const Action& a, Rng& noise_rng, const NoiseConfig& noise, std::string& note) {
  switch (a.kind) {
    case ActionKind::key_down:
      for (const auto& k : a.keys)
        if (std::find(s.held_keys.begin(), s.held_keys.end(), k) == s.held_keys.end()) s.held_keys.push_back(k);
      break;
    case ActionKind::key_up:
      for (auto it = a.keys.rbegin(); it != a.keys.rend(); ++it)
        s.held_keys.erase(std::remove(s.held_keys.begin(), s.held_keys.end(), *it), s.held_keys.end());
      break;
    case ActionKind::key:
      press_chord(s, a.keys);
      break;
    case ActionKind::type: {
      std::string text = *a.text;
      if (!noise.strict_keymap) {
        for (char& c : text) {
          for (const auto& [lo, hi] : kShiftPairs) {
            if ((c == lo || c == hi) && noise_rng.bernoulli(0.25)) {
              c = c == lo ? hi : lo;
              break;
            }
          }
        }
      }
      type_into(s, text);
      break;
    }
    case ActionKind::scroll:
    case ActionKind::hscroll:
      if (auto* sheet = sheet_of(s)) {
        if (a.kind == ActionKind::scroll)
          sheet->scroll_row = std::clamp(sheet->scroll_row + *a.pixels / kRowHeight, 0, sheet->rows - 1);
        else
          sheet->scroll_col = std::clamp(sheet->scroll_col + *a.pixels / kColumnWidth, 0, sheet->cols - 1);
      }
      break;
    case ActionKind::wait:
    case ActionKind::terminate:
      break;
    default: {
      const Point p = *a.coordinate;
      if (p.x >= kScreenWidth || p.y >= kScreenHeight) {
        note = "out_of_bounds";
        return;
      }
      const Observation screen = render(s);
      const Widget* w = hit_test(screen, p);
      if (!w) {
        note = "no_target";
        return;
      }
      pointer_on(s, a.kind, *w);
    }
  }
}

AppState app_from_config(const json& cfg, std::uint64_t seed) {
  const std::string kind = cfg.at("kind").get<std::string>();
  AppState app;
  app.title = cfg.value("title", kind);
  if (kind == "spreadsheet") {
    Spreadsheet sheet;
    std::vector<std::vector<std::string>> grid;
    if (cfg.contains("generator")) {
      const auto& g = cfg["generator"];
      const std::string type = g.at("type").get<std::string>();
      if (type != "price_table") throw EnvError("unknown generator '" + type + "'");
      grid = generate_price_table(g.at("rows").get<int>(), g.value("seed", seed));
    }
    if (cfg.contains("grid")) grid = cfg["grid"].get<std::vector<std::vector<std::string>>>();
    int width = 0;
    for (const auto& row : grid) width = std::max(width, static_cast<int>(row.size()));
    sheet.rows = cfg.value("rows", std::max(1, static_cast<int>(grid.size())));
    sheet.cols = cfg.value("cols", std::max(1, width));
    if (sheet.rows < 1 || sheet.cols < 1 || sheet.rows > kMaxSheetRows || sheet.cols > kMaxSheetCols)
      throw EnvError("spreadsheet dimensions out of range");
    if (static_cast<int>(grid.size()) > sheet.rows || width > sheet.cols) throw EnvError("grid exceeds spreadsheet dimensions");
    for (int r = 0; r < static_cast<int>(grid.size()); ++r)
      for (int c = 0; c < static_cast<int>(grid[r].size()); ++c)
        if (!grid[r][c].empty()) sheet.cells[{r, c}] = grid[r][c];
    if (cfg.contains("cells")) {
      for (const auto& [a1, v] : cfg["cells"].items()) {
        auto ref = parse_a1(a1);
        if (!ref || ref->row >= sheet.rows || ref->col >= sheet.cols) throw EnvError("bad cell reference '" + a1 + "'");
        sheet.cells[*ref] = v.get<std::string>();
      }
    }
    for (const auto& [ref, _] : sheet.cells)
      if (creates_cycle(sheet, ref)) throw EnvError("formula cycle at " + to_a1(ref));
    app.content = std::move(sheet);
  } else if (kind == "texteditor") {
    TextEditor ed;
    ed.buffer = cfg.value("text", "");
    ed.cursor = ed.buffer.size();
    app.content = std::move(ed);
  } else if (kind == "filemanager") {
    FileManager fm;
    if (cfg.contains("files")) fm.files = cfg["files"].get<std::map<std::string, std::string>>();
    for (const auto& [name, _] : fm.files)
      if (name.empty()) throw EnvError("empty file name");
    app.content = std::move(fm);
  } else {
    throw EnvError("unknown app kind '" + kind + "'");
  }
  return app;
}

json app_to_json(const AppState& app, HashMode mode) {
  json j = {{"title", app.title}};
  const bool strict = mode == HashMode::strict;
  if (const auto* sheet = std::get_if<Spreadsheet>(&app.content)) {
    j["kind"] = "spreadsheet";
    j["rows"] = sheet->rows;
    j["cols"] = sheet->cols;
    json cells = json::object();
    for (const auto& [ref, v] : sheet->cells) cells[to_a1(ref)] = v;
    j["cells"] = cells;
    if (strict) {
      j["focus"] = sheet->focus ? json(to_a1(*sheet->focus)) : json(nullptr);
      j["editing"] = sheet->editing;
      j["scroll"] = {sheet->scroll_row, sheet->scroll_col};
    }
  } else if (const auto* ed = std::get_if<TextEditor>(&app.content)) {
    j["kind"] = "texteditor";
    j["text"] = ed->buffer;
    if (strict) {
      j["cursor"] = ed->cursor;
      j["focused"] = ed->focused;
      j["select_all"] = ed->select_all;
    }
  } else if (const auto* fm = std::get_if<FileManager>(&app.content)) {
    j["kind"] = "filemanager";
    j["files"] = fm->files;
    if (strict) {
      j["selected"] = fm->selected ? json(*fm->selected) : json(nullptr);
      j["rename_buffer"] = fm->rename_buffer ? json(*fm->rename_buffer) : json(nullptr);
    }
  }
  return j;
}

}  // namespace

std::string to_a1(CellRef ref) {
  std::string col;
  int c = ref.col + 1;
  while (c > 0) {
    const int rem = (c - 1) % 26;
    col.insert(col.begin(), static_cast<char>('A' + rem));
    c = (c - 1) / 26;
  }
  return col + std::to_string(ref.row + 1);
}

std::optional<CellRef> parse_a1(std::string_view a1) {
  std::size_t i = 0;
  int col = 0;
  while (i < a1.size() && std::isalpha(static_cast<unsigned char>(a1[i]))) {
    col = col * 26 + (std::toupper(static_cast<unsigned char>(a1[i])) - 'A' + 1);
    if (col > 100000) return std::nullopt;
    ++i;
  }
  if (i == 0 || i == a1.size()) return std::nullopt;
  int row = 0;
  auto res = std::from_chars(a1.data() + i, a1.data() + a1.size(), row);
  if (res.ec != std::errc() || res.ptr != a1.data() + a1.size() || row < 1) return std::nullopt;
  return CellRef{row - 1, col - 1};
}

std::string format_number(double v) {
  if (v == 0.0) v = 0.0;  // folds -0
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string cell_display(const Spreadsheet& sheet, CellRef ref) {
  auto it = sheet.cells.find(ref);
  if (it == sheet.cells.end()) return "";
  if (it->second.empty() || it->second[0] != '=') return it->second;
  Evaluator ev(sheet);
  auto v = ev.value(ref);
  if (ev.error == EvalError::cycle) return "#CYCLE!";
  if (ev.error == EvalError::bad || !v) return "#ERR!";
  return format_number(*v);
}

std::optional<double> cell_number(const Spreadsheet& sheet, CellRef ref) {
  return parse_number_text(cell_display(sheet, ref));
}

std::vector<std::vector<std::string>> generate_price_table(int rows, std::uint64_t seed) {
  static const std::array<std::string_view, 12> kNames = {"Apple", "Banana", "Cherry", "Date",   "Elder", "Fig",
                                                          "Grape", "Honey",  "Iris",   "Jasmine", "Kiwi", "Lime"};
  if (rows < 0 || rows + 1 > kMaxSheetRows) throw EnvError("price_table rows out of range");
  Rng rng(derive_seed(seed, "price_table"));
  std::vector<std::vector<std::string>> grid = {{"Name", "Price", "Date"}};
  for (int r = 0; r < rows; ++r) {
    const std::string name(kNames[rng.index(kNames.size())]);
    const auto cents = rng.uniform_int(100, 99999);
    const auto month = rng.uniform_int(1, 12);
    const auto day = rng.uniform_int(1, 28);
    std::string price = std::to_string(cents / 100) + "." + (cents % 100 < 10 ? "0" : "") + std::to_string(cents % 100);
    std::string date = "2024-" + std::string(month < 10 ? "0" : "") + std::to_string(month) + "-" +
                       (day < 10 ? "0" : "") + std::to_string(day);
    grid.push_back({name, price, date});
  }
  return grid;
}

json noise_to_json(const NoiseConfig& n) {
  return {{"perturb_prob", n.perturb_prob}, {"latency_steps", n.latency_steps}, {"seed", n.seed},
          {"strict_keymap", n.strict_keymap}, {"stable_layout", n.stable_layout}};
}

NoiseConfig noise_from_json(const json& j) {
  NoiseConfig n;
  for (const auto& [k, _] : j.items())
    if (k != "perturb_prob" && k != "latency_steps" && k != "seed" && k != "strict_keymap" && k != "stable_layout")
      throw std::invalid_argument("unknown noise key '" + k + "'");
  n.perturb_prob = j.value("perturb_prob", 0.0);
  n.latency_steps = j.value("latency_steps", 0);
  n.seed = j.value("seed", std::uint64_t{0});
  n.strict_keymap = j.value("strict_keymap", true);
  n.stable_layout = j.value("stable_layout", true);
  if (!(n.perturb_prob >= 0.0 && n.perturb_prob <= 1.0)) throw std::invalid_argument("perturb_prob must be in [0,1]");
  if (n.latency_steps < 0) throw std::invalid_argument("latency_steps must be >= 0");
  return n;
}

EnvState reset(const json& init_config, std::uint64_t seed) {
  EnvState s;
  try {
    const auto& apps = init_config.at("apps");
    if (!apps.is_array() || apps.empty()) throw EnvError("init config needs at least one app");
    for (const auto& cfg : apps) {
      const std::string id = cfg.at("id").get<std::string>();
      if (id.empty() || s.apps.count(id)) throw EnvError("duplicate or empty app id '" + id + "'");
      s.apps.emplace(id, app_from_config(cfg, seed));
    }
    s.focused_app = init_config.value("focus", apps[0].at("id").get<std::string>());
  } catch (const json::exception& e) {
    throw EnvError(std::string("malformed init config: ") + e.what());
  }
  if (!s.apps.count(s.focused_app)) throw EnvError("focus references unknown app '" + s.focused_app + "'");
  return s;
}

EnvState reset(const Task& task, std::uint64_t seed) { return reset(task.init_config, seed); }

Observation render(const EnvState& s) {
  Observation obs;
  obs.step_index = static_cast<int>(s.clock);
  const AppState& app = s.apps.at(s.focused_app);
  const int bottom = content_bottom(s);
  Widget toolbar{"toolbar", "toolbar", {0, 0, kScreenWidth, kToolbarHeight}, app.title, false};

  if (const auto* sheet = std::get_if<Spreadsheet>(&app.content)) {
    if (sheet->focus) {
      auto it = sheet->cells.find(*sheet->focus);
      toolbar.text += " | " + to_a1(*sheet->focus) + ": " + (it == sheet->cells.end() ? "" : it->second);
    }
    obs.widgets.push_back(toolbar);
    const int row_end = std::min(sheet->rows, sheet->scroll_row + visible_rows(s));
    const int col_end = std::min(sheet->cols, sheet->scroll_col + visible_cols());
    for (int r = sheet->scroll_row; r < row_end; ++r)
      for (int c = sheet->scroll_col; c < col_end; ++c) {
        const CellRef ref{r, c};
        obs.widgets.push_back({"cell:" + to_a1(ref), "cell",
                               {(c - sheet->scroll_col) * kColumnWidth, kToolbarHeight + (r - sheet->scroll_row) * kRowHeight,
                                kColumnWidth, kRowHeight},
                               cell_display(*sheet, ref), sheet->focus == ref});
      }
  } else if (const auto* ed = std::get_if<TextEditor>(&app.content)) {
    obs.widgets.push_back(toolbar);
    obs.widgets.push_back({"editor", "editor", {0, kToolbarHeight, kScreenWidth, bottom - kToolbarHeight}, ed->buffer, ed->focused});
  } else if (const auto* fm = std::get_if<FileManager>(&app.content)) {
    obs.widgets.push_back(toolbar);
    int i = 0;
    const int max_rows = (bottom - kToolbarHeight) / kRowHeight;
    for (const auto& [name, _] : fm->files) {
      if (i >= max_rows) break;
      const bool selected = fm->selected == name;
      const Rect row{0, kToolbarHeight + i * kRowHeight, kFileRowWidth, kRowHeight};
      obs.widgets.push_back({"file:" + name, "file", row, name, selected && !fm->rename_buffer});
      if (selected && fm->rename_buffer)
        obs.widgets.push_back({"rename_box", "rename_box", {kFileRowWidth, row.y, kFileRowWidth, kRowHeight}, *fm->rename_buffer, true});
      ++i;
    }
  }
  if (s.apps.size() > 1) {
    int i = 0;
    for (const auto& [id, other] : s.apps) {
      obs.widgets.push_back({"taskbar:" + id, "taskbar", {i * 160, bottom, 160, kTaskbarHeight}, other.title, false});
      ++i;
    }
  }
  obs.state_hash = state_hash(s);
  return obs;
}

StepResult step(const EnvState& state, const Action& action, const NoiseConfig& noise) {
  StepResult out{state, {}, false};
  EnvState& s = out.state;
  std::string note;
  if (s.termination) {
    out.observation = render(s);
    out.observation.note = "episode_done";
    out.done = true;
    return out;
  }
  ++s.clock;
  Rng rng(derive_seed(noise.seed, "env_noise", static_cast<std::uint64_t>(s.clock)));

  if (action.kind == ActionKind::terminate) {
    s.termination = action.status;
    out.done = true;
  } else if (noise.perturb_prob > 0.0 && action.kind != ActionKind::wait && rng.bernoulli(noise.perturb_prob)) {
    note = "dropped_input";
  } else {
    std::vector<PendingInput> due;
    auto split = std::stable_partition(s.pending.begin(), s.pending.end(),
                                       [&](const PendingInput& p) { return p.apply_at > s.clock; });
    due.assign(split, s.pending.end());
    s.pending.erase(split, s.pending.end());
    for (const auto& p : due) {
      std::string ignored;
      apply_input(s, p.action, rng, noise, ignored);
    }
    if (noise.latency_steps > 0 && action.kind != ActionKind::wait) {
      s.pending.push_back({s.clock + noise.latency_steps, action});
      note = "delayed";
    } else {
      apply_input(s, action, rng, noise, note);
    }
  }

  out.observation = render(s);
  out.observation.note = note;
  if (!noise.stable_layout) {
    for (auto& w : out.observation.widgets) {
      w.bounds.x = std::clamp(w.bounds.x + static_cast<int>(rng.uniform_int(-2, 2)), 0, kScreenWidth - w.bounds.w);
      w.bounds.y = std::clamp(w.bounds.y + static_cast<int>(rng.uniform_int(-2, 2)), 0, kScreenHeight - w.bounds.h);
    }
  }
  return out;
}

json canonical_state(const EnvState& s, HashMode mode) {
  json apps = json::object();
  for (const auto& [id, app] : s.apps) apps[id] = app_to_json(app, mode);
  json j = {{"apps", apps},
            {"termination", s.termination ? json(std::string(to_string(*s.termination))) : json(nullptr)}};
  if (mode == HashMode::strict) {
    j["focused_app"] = s.focused_app;
    j["held_keys"] = s.held_keys;
    j["clipboard"] = s.clipboard;
    json pending = json::array();
    for (const auto& p : s.pending) pending.push_back({p.apply_at, serialize_action(p.action)});
    j["pending"] = pending;
  }
  return j;
}

json dump_state(const EnvState& s) {
  json j = canonical_state(s, HashMode::strict);
  j["clock"] = s.clock;
  return j;
}

std::string state_hash(const EnvState& s, HashMode mode) {
  return hex64(fnv1a64(canonical_state(s, mode).dump()));
}

std::optional<std::string> check_invariants(const EnvState& s) {
  if (!s.apps.count(s.focused_app)) return "focused_app '" + s.focused_app + "' does not exist";
  std::set<std::string> keys(s.held_keys.begin(), s.held_keys.end());
  if (keys.size() != s.held_keys.size()) return "held_keys contains duplicates";
  for (const auto& [id, app] : s.apps) {
    if (const auto* sheet = std::get_if<Spreadsheet>(&app.content)) {
      if (sheet->focus && (sheet->focus->row < 0 || sheet->focus->row >= sheet->rows || sheet->focus->col < 0 ||
                           sheet->focus->col >= sheet->cols))
        return id + ": focus outside grid";
      if (sheet->scroll_row < 0 || sheet->scroll_row >= sheet->rows || sheet->scroll_col < 0 || sheet->scroll_col >= sheet->cols)
        return id + ": scroll outside grid";
      for (const auto& [ref, _] : sheet->cells) {
        if (ref.row < 0 || ref.row >= sheet->rows || ref.col < 0 || ref.col >= sheet->cols) return id + ": cell outside grid";
        if (creates_cycle(*sheet, ref)) return id + ": formula cycle at " + to_a1(ref);
      }
    } else if (const auto* ed = std::get_if<TextEditor>(&app.content)) {
      if (ed->cursor > ed->buffer.size()) return id + ": cursor outside buffer";
    } else if (const auto* fm = std::get_if<FileManager>(&app.content)) {
      if (fm->selected && !fm->files.count(*fm->selected)) return id + ": selected file missing";
      if (fm->rename_buffer && !fm->selected) return id + ": rename without selection";
    }
  }
  const Observation obs = render(s);
  int focused = 0;
  for (const auto& w : obs.widgets) {
    if (w.focused) ++focused;
    if (w.bounds.x < 0 || w.bounds.y < 0 || w.bounds.x + w.bounds.w > kScreenWidth || w.bounds.y + w.bounds.h > kScreenHeight)
      return "widget '" + w.id + "' outside screen";
  }
  if (focused > 1) return "more than one focused widget";
  return std::nullopt;
}

EnvState replay(const EnvState& initial, const std::vector<Action>& actions, const NoiseConfig& noise) {
  EnvState s = initial;
  for (const auto& a : actions) {
    auto r = step(s, a, noise);
    s = std::move(r.state);
    if (r.done) break;
  }
  return s;
}

}  // namespace evoloop::sandbox
