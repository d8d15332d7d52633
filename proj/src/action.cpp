#include "evoloop/action.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <map>

namespace evoloop {

namespace {

constexpr std::array<std::string_view, kActionKindCount> kKindNames = {
    "key",          "key_down",     "key_up",          "type",   "mouse_move",
    "left_click",   "right_click",  "middle_click",    "double_click",
    "triple_click", "left_click_drag", "scroll",       "hscroll", "wait",
    "terminate",
};

enum class Arg { keys, text, coordinate, pixels, time, status };

Arg required_arg(ActionKind kind) {
  switch (kind) {
    case ActionKind::key:
    case ActionKind::key_down:
    case ActionKind::key_up:
      return Arg::keys;
    case ActionKind::type:
      return Arg::text;
    case ActionKind::scroll:
    case ActionKind::hscroll:
      return Arg::pixels;
    case ActionKind::wait:
      return Arg::time;
    case ActionKind::terminate:
      return Arg::status;
    default:
      return Arg::coordinate;
  }
}

std::string_view arg_name(Arg a) {
  switch (a) {
    case Arg::keys: return "keys";
    case Arg::text: return "text";
    case Arg::coordinate: return "coordinate";
    case Arg::pixels: return "pixels";
    case Arg::time: return "time";
    case Arg::status: return "status";
  }
  return "?";
}

std::optional<Arg> arg_from_name(std::string_view name) {
  for (Arg a : {Arg::keys, Arg::text, Arg::coordinate, Arg::pixels, Arg::time, Arg::status})
    if (arg_name(a) == name) return a;
  return std::nullopt;
}

bool has_arg(const Action& a, Arg arg) {
  switch (arg) {
    case Arg::keys: return !a.keys.empty();
    case Arg::text: return a.text.has_value();
    case Arg::coordinate: return a.coordinate.has_value();
    case Arg::pixels: return a.pixels.has_value();
    case Arg::time: return a.time.has_value();
    case Arg::status: return a.status.has_value();
  }
  return false;
}

const std::map<std::string, std::string, std::less<>>& key_aliases() {
  static const std::map<std::string, std::string, std::less<>> aliases = {
      {"control", "ctrl"},  {"ctl", "ctrl"},     {"return", "enter"},  {"esc", "escape"},
      {"del", "delete"},    {"cmd", "meta"},     {"command", "meta"},  {"win", "meta"},
      {"super", "meta"},    {"option", "alt"},   {"pgup", "pageup"},   {"pgdn", "pagedown"},
      {"arrowup", "up"},    {"arrowdown", "down"}, {"arrowleft", "left"}, {"arrowright", "right"},
      {"spacebar", "space"}, {"bksp", "backspace"},
  };
  return aliases;
}

bool is_bare_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

std::string quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      default: out += c;
    }
  }
  out += '"';
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

class TextParser {
 public:
  explicit TextParser(std::string_view src) : src_(src) {}

  Action parse() {
    skip_ws();
    const std::size_t kind_at = pos_;
    std::string kind_name;
    while (pos_ < src_.size() && (std::islower(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_'))
      kind_name += src_[pos_++];
    if (kind_name.empty()) fail(kind_at, "expected action kind");
    auto kind = action_kind_from_string(kind_name);
    if (!kind) fail(kind_at, "unknown action kind '" + kind_name + "'");
    Action a;
    a.kind = *kind;
    const Arg required = required_arg(a.kind);
    bool seen[6] = {};
    for (;;) {
      const bool had_ws = skip_ws();
      if (pos_ >= src_.size()) break;
      if (!had_ws) fail(pos_, "expected whitespace before argument");
      const std::size_t arg_at = pos_;
      std::string name;
      while (pos_ < src_.size() && (std::islower(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_'))
        name += src_[pos_++];
      auto arg = arg_from_name(name);
      if (!arg) fail(arg_at, "unknown argument '" + name + "'");
      if (*arg != required) fail(arg_at, "argument '" + name + "' not accepted by " + std::string(to_string(a.kind)));
      if (seen[static_cast<int>(*arg)]) fail(arg_at, "duplicate argument '" + name + "'");
      seen[static_cast<int>(*arg)] = true;
      expect('=');
      parse_value(a, *arg);
    }
    if (!has_arg(a, required))
      fail(src_.size(), "missing required argument '" + std::string(arg_name(required)) + "'");
    if (auto err = check_action(a)) fail(src_.size(), *err);
    return a;
  }

 private:
  [[noreturn]] void fail(std::size_t at, const std::string& msg) const { throw ActionParseError(at, msg); }

  bool skip_ws() {
    const std::size_t start = pos_;
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    return pos_ != start;
  }

  void expect(char c) {
    if (pos_ >= src_.size() || src_[pos_] != c) fail(pos_, std::string("expected '") + c + "'");
    ++pos_;
  }

  std::string parse_quoted() {
    expect('"');
    std::string out;
    while (pos_ < src_.size() && src_[pos_] != '"') {
      char c = src_[pos_++];
      if (c == '\\') {
        if (pos_ >= src_.size()) fail(pos_, "unterminated escape");
        const char e = src_[pos_++];
        switch (e) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case 'r': out += '\r'; break;
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          default: fail(pos_ - 1, std::string("unknown escape '\\") + e + "'");
        }
      } else {
        out += c;
      }
    }
    expect('"');
    return out;
  }

  std::string parse_bare() {
    std::string out;
    while (pos_ < src_.size() && is_bare_char(src_[pos_])) out += src_[pos_++];
    if (out.empty()) fail(pos_, "expected identifier");
    return out;
  }

  std::string parse_key_token() {
    if (pos_ < src_.size() && src_[pos_] == '"') return parse_quoted();
    return parse_bare();
  }

  template <typename T>
  T parse_number() {
    const char* first = src_.data() + pos_;
    const char* last = src_.data() + src_.size();
    T value{};
    auto res = std::from_chars(first, last, value);
    if (res.ec != std::errc()) fail(pos_, "expected number");
    pos_ += static_cast<std::size_t>(res.ptr - first);
    return value;
  }

  void parse_value(Action& a, Arg arg) {
    switch (arg) {
      case Arg::keys: {
        if (pos_ < src_.size() && src_[pos_] == '[') {
          ++pos_;
          skip_ws();
          if (pos_ < src_.size() && src_[pos_] == ']') fail(pos_, "empty key list");
          for (;;) {
            skip_ws();
            a.keys.push_back(normalize_key(parse_key_token()));
            skip_ws();
            if (pos_ < src_.size() && src_[pos_] == ',') {
              ++pos_;
              continue;
            }
            expect(']');
            break;
          }
        } else {
          a.keys.push_back(normalize_key(parse_key_token()));
        }
        break;
      }
      case Arg::text:
        a.text = parse_quoted();
        break;
      case Arg::coordinate: {
        const std::size_t at = pos_;
        expect('(');
        skip_ws();
        const int x = parse_number<int>();
        skip_ws();
        expect(',');
        skip_ws();
        const int y = parse_number<int>();
        skip_ws();
        expect(')');
        if (x < 0 || y < 0) fail(at, "coordinates must be nonnegative");
        a.coordinate = Point{x, y};
        break;
      }
      case Arg::pixels:
        a.pixels = parse_number<int>();
        break;
      case Arg::time: {
        const std::size_t at = pos_;
        const double t = parse_number<double>();
        if (!(t > 0.0) || !std::isfinite(t)) fail(at, "time must be > 0");
        a.time = t;
        break;
      }
      case Arg::status: {
        const std::size_t at = pos_;
        std::string s = (pos_ < src_.size() && src_[pos_] == '"') ? parse_quoted() : parse_bare();
        if (s == "success") a.status = TerminationStatus::success;
        else if (s == "failure") a.status = TerminationStatus::failure;
        else fail(at, "status must be \"success\" or \"failure\"");
        break;
      }
    }
  }

  std::string_view src_;
  std::size_t pos_ = 0;
};

}  // namespace

Action Action::key_press(std::vector<std::string> keys) {
  Action a;
  a.kind = ActionKind::key;
  for (auto& k : keys) a.keys.push_back(normalize_key(k));
  return a;
}

Action Action::key_down(std::vector<std::string> keys) {
  Action a = key_press(std::move(keys));
  a.kind = ActionKind::key_down;
  return a;
}

Action Action::key_up(std::vector<std::string> keys) {
  Action a = key_press(std::move(keys));
  a.kind = ActionKind::key_up;
  return a;
}

Action Action::type_text(std::string text) {
  Action a;
  a.kind = ActionKind::type;
  a.text = std::move(text);
  return a;
}

Action Action::pointer(ActionKind kind, int x, int y) {
  Action a;
  a.kind = kind;
  a.coordinate = Point{x, y};
  return a;
}

Action Action::scroll(int pixels, bool horizontal) {
  Action a;
  a.kind = horizontal ? ActionKind::hscroll : ActionKind::scroll;
  a.pixels = pixels;
  return a;
}

Action Action::wait(double seconds) {
  Action a;
  a.kind = ActionKind::wait;
  a.time = seconds;
  return a;
}

Action Action::terminate(TerminationStatus status) {
  Action a;
  a.kind = ActionKind::terminate;
  a.status = status;
  return a;
}

std::string_view to_string(ActionKind kind) { return kKindNames[static_cast<std::size_t>(kind)]; }

std::optional<ActionKind> action_kind_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i)
    if (kKindNames[i] == name) return static_cast<ActionKind>(i);
  return std::nullopt;
}

std::string_view to_string(TerminationStatus status) {
  return status == TerminationStatus::success ? "success" : "failure";
}

const std::array<ActionKind, kActionKindCount>& all_action_kinds() {
  static const auto kinds = [] {
    std::array<ActionKind, kActionKindCount> out{};
    for (std::size_t i = 0; i < kActionKindCount; ++i) out[i] = static_cast<ActionKind>(i);
    return out;
  }();
  return kinds;
}

bool is_pointer_kind(ActionKind kind) { return required_arg(kind) == Arg::coordinate; }

bool is_keyboard_kind(ActionKind kind) {
  return kind == ActionKind::key || kind == ActionKind::key_down || kind == ActionKind::key_up ||
         kind == ActionKind::type;
}

std::string normalize_key(std::string_view key) {
  std::string lower;
  lower.reserve(key.size());
  for (char c : key) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  const auto& aliases = key_aliases();
  if (auto it = aliases.find(lower); it != aliases.end()) return it->second;
  return lower;
}

std::optional<std::string> check_action(const Action& a) {
  const Arg required = required_arg(a.kind);
  for (Arg arg : {Arg::keys, Arg::text, Arg::coordinate, Arg::pixels, Arg::time, Arg::status}) {
    const bool present = has_arg(a, arg);
    if (arg == required && !present)
      return std::string(to_string(a.kind)) + " requires '" + std::string(arg_name(arg)) + "'";
    if (arg != required && present)
      return std::string(to_string(a.kind)) + " does not accept '" + std::string(arg_name(arg)) + "'";
  }
  if (required == Arg::keys) {
    if (a.keys.size() > kMaxChordKeys) return "at most 8 keys per chord";
    for (const auto& k : a.keys)
      if (k.empty()) return "empty key name";
      else if (k != normalize_key(k)) return "key '" + k + "' is not normalized";
  }
  if (a.coordinate && (a.coordinate->x < 0 || a.coordinate->y < 0)) return "coordinates must be nonnegative";
  if (a.time && (!(*a.time > 0.0) || !std::isfinite(*a.time))) return "time must be > 0";
  return std::nullopt;
}

Action parse_action(std::string_view text) {
  std::size_t first = 0;
  while (first < text.size() && std::isspace(static_cast<unsigned char>(text[first]))) ++first;
  if (first < text.size() && text[first] == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ActionParseError(e.byte, e.what());
    }
    return action_from_json(j);
  }
  return TextParser(text).parse();
}

std::string serialize_action(const Action& a) {
  if (auto err = check_action(a)) throw std::invalid_argument("serialize_action: " + *err);
  std::string out(to_string(a.kind));
  if (!a.keys.empty()) {
    out += " keys=[";
    for (std::size_t i = 0; i < a.keys.size(); ++i) {
      if (i) out += ',';
      const auto& k = a.keys[i];
      const bool bare = !k.empty() && std::all_of(k.begin(), k.end(), is_bare_char);
      out += bare ? k : quote(k);
    }
    out += ']';
  }
  if (a.text) out += " text=" + quote(*a.text);
  if (a.coordinate)
    out += " coordinate=(" + std::to_string(a.coordinate->x) + "," + std::to_string(a.coordinate->y) + ")";
  if (a.pixels) out += " pixels=" + std::to_string(*a.pixels);
  if (a.time) out += " time=" + format_double(*a.time);
  if (a.status) out += " status=" + std::string(to_string(*a.status));
  return out;
}

nlohmann::json action_to_json(const Action& a) {
  if (auto err = check_action(a)) throw std::invalid_argument("action_to_json: " + *err);
  nlohmann::json args = nlohmann::json::object();
  if (!a.keys.empty()) args["keys"] = a.keys;
  if (a.text) args["text"] = *a.text;
  if (a.coordinate) args["coordinate"] = {a.coordinate->x, a.coordinate->y};
  if (a.pixels) args["pixels"] = *a.pixels;
  if (a.time) args["time"] = *a.time;
  if (a.status) args["status"] = std::string(to_string(*a.status));
  return {{"action", std::string(to_string(a.kind))}, {"args", args}};
}

Action action_from_json(const nlohmann::json& j) {
  auto bad = [](const std::string& msg) -> ActionParseError { return ActionParseError(0, msg); };
  if (!j.is_object() || !j.contains("action") || !j["action"].is_string()) throw bad("expected {\"action\": <kind>, \"args\": {...}}");
  for (const auto& [k, _] : j.items())
    if (k != "action" && k != "args") throw bad("unexpected field '" + k + "'");
  auto kind = action_kind_from_string(j["action"].get<std::string>());
  if (!kind) throw bad("unknown action kind '" + j["action"].get<std::string>() + "'");
  Action a;
  a.kind = *kind;
  const nlohmann::json args = j.value("args", nlohmann::json::object());
  if (!args.is_object()) throw bad("args must be an object");
  for (const auto& [name, value] : args.items()) {
    auto arg = arg_from_name(name);
    if (!arg) throw bad("unknown argument '" + name + "'");
    try {
      switch (*arg) {
        case Arg::keys:
          if (value.is_string()) a.keys.push_back(normalize_key(value.get<std::string>()));
          else
            for (const auto& k : value) a.keys.push_back(normalize_key(k.get<std::string>()));
          if (a.keys.empty()) throw bad("empty key list");
          break;
        case Arg::text: a.text = value.get<std::string>(); break;
        case Arg::coordinate:
          if (!value.is_array() || value.size() != 2) throw bad("coordinate must be [x, y]");
          a.coordinate = Point{value[0].get<int>(), value[1].get<int>()};
          break;
        case Arg::pixels: a.pixels = value.get<int>(); break;
        case Arg::time: a.time = value.get<double>(); break;
        case Arg::status: {
          const auto s = value.get<std::string>();
          if (s == "success") a.status = TerminationStatus::success;
          else if (s == "failure") a.status = TerminationStatus::failure;
          else throw bad("status must be \"success\" or \"failure\"");
          break;
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw bad("argument '" + name + "': " + e.what());
    }
  }
  if (auto err = check_action(a)) throw bad(*err);
  return a;
}

SequenceReport validate_sequence(std::span<const Action> actions) {
  SequenceReport report;
  struct Hold {
    std::string key;
    std::size_t since;
  };
  std::vector<Hold> held;
  auto add = [&](std::size_t i, std::string rule, std::string msg) {
    report.violations.push_back({i, std::move(rule), std::move(msg)});
  };
  for (std::size_t i = 0; i < actions.size(); ++i) {
    const Action& a = actions[i];
    if (a.kind == ActionKind::key_down) {
      for (const auto& k : a.keys) {
        const bool already = std::any_of(held.begin(), held.end(), [&](const Hold& h) { return h.key == k; });
        if (!already) held.push_back({k, i});
      }
    } else if (a.kind == ActionKind::key_up) {
      // key_up releases its keys in reverse listed order.
      for (auto it = a.keys.rbegin(); it != a.keys.rend(); ++it) {
        auto pos = std::find_if(held.begin(), held.end(), [&](const Hold& h) { return h.key == *it; });
        if (pos == held.end()) {
          add(i, "release_not_held", "key_up of '" + *it + "' which is not held");
          continue;
        }
        if (std::next(pos) != held.end())
          add(i, "release_order", "'" + *it + "' released before later-held '" + held.back().key + "'");
        held.erase(pos);
      }
    } else if (a.kind == ActionKind::terminate && i + 1 != actions.size()) {
      add(i, "terminate_not_final", "terminate at step " + std::to_string(i) + " is not the final action");
    }
  }
  for (const auto& h : held)
    add(h.since, "unreleased_key", "'" + h.key + "' held at step " + std::to_string(h.since) + " is never released");
  report.valid = report.violations.empty();
  return report;
}

}  // namespace evoloop
