#include "evoloop/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "evoloop/sandbox.hpp"

namespace evoloop::policy {

using nlohmann::json;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
const std::string kReflectionHeader = "Reflection: ";

double log_softmax_at(const double* logits, std::size_t n, double temperature, std::size_t idx) {
  if (temperature == 0.0) {
    const auto best = static_cast<std::size_t>(std::max_element(logits, logits + n) - logits);
    return idx == best ? 0.0 : kNegInf;
  }
  double mx = kNegInf;
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, logits[i] / temperature);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += std::exp(logits[i] / temperature - mx);
  return logits[idx] / temperature - mx - std::log(sum);
}

std::string describe(const std::string& action_text, const Observation& obs) {
  try {
    return summarize_action(parse_action(action_text), obs);
  } catch (const ActionParseError&) {
    return "run \"" + action_text + "\"";
  }
}

std::string canonical_or_raw(const std::string& text) {
  try {
    return serialize_action(parse_action(text));
  } catch (const ActionParseError&) {
    return text;
  }
}

const std::string kExhausted = "terminate status=failure";

std::string scripted_action(const ScriptedPolicy& p, const Query& q) {
  const auto& script = p.script_for(q.task_id);
  return q.step_index < script.size() ? script[q.step_index] : kExhausted;
}

std::string deviation_for(const std::string& action_text) {
  try {
    Action a = parse_action(action_text);
    if (a.kind == ActionKind::type) return serialize_action(Action::type_text(*a.text + "?"));
  } catch (const ActionParseError&) {
  }
  return serialize_action(Action::wait(1.0));
}

std::vector<std::string> read_script(const json& j) {
  std::vector<std::string> out;
  for (const auto& a : j) out.push_back(a.get<std::string>());
  return out;
}

ScriptedPolicy scripted_from_json(const json& j) {
  ScriptedPolicy p;
  if (j.is_array()) {
    p.default_script = read_script(j);
    return p;
  }
  const json& scripts = j.contains("kind") ? j.value("scripts", json::object()) : j;
  for (const auto& [task, script] : scripts.items()) {
    if (task == "kind" || task == "default" || task == "p_success") continue;
    p.scripts[task] = read_script(script);
  }
  if (j.contains("default")) p.default_script = read_script(j["default"]);
  return p;
}

json scripted_to_json(const ScriptedPolicy& p) {
  return {{"scripts", p.scripts}, {"default", p.default_script}};
}

}  // namespace

Query make_query(const Context& ctx, const Observation& obs) {
  return {ctx.task_id, ctx.domain, obs.state_hash, ctx.step_index};
}

std::string reasoning_class(const std::string& reasoning) {
  return reasoning.rfind(kReflectionHeader, 0) == 0 ? kReasoningReflect : kReasoningAct;
}

TokenizedResponse tokenize(const std::string& reasoning, const Action& action, const std::vector<double>& logprobs) {
  TokenizedResponse r;
  r.tokens = {"z:" + reasoning_class(reasoning), "a:" + serialize_action(action)};
  r.logprobs = logprobs;
  r.reasoning_tokens = 1;
  if (r.logprobs.size() != r.tokens.size()) throw std::invalid_argument("tokenize: expected two log-probs");
  return r;
}

const std::vector<std::string>& ScriptedPolicy::script_for(const std::string& task_id) const {
  auto it = scripts.find(task_id);
  return it == scripts.end() ? default_script : it->second;
}

TabularPolicy::TabularPolicy(std::vector<std::string> reasoning, std::vector<Action> actions, std::size_t hash_prefix,
                             std::size_t step_mod, bool use_domain)
    : reasoning_(std::move(reasoning)),
      actions_(std::move(actions)),
      hash_prefix_(hash_prefix),
      step_mod_(step_mod),
      use_domain_(use_domain) {
  if (reasoning_.empty() || actions_.empty()) throw PolicyError("tabular policy needs non-empty vocabularies");
  for (std::size_t i = 0; i < actions_.size(); ++i) {
    auto [_, fresh] = action_index_.emplace(serialize_action(actions_[i]), i);
    if (!fresh) throw PolicyError("duplicate action in tabular vocabulary: " + serialize_action(actions_[i]));
  }
}

std::string TabularPolicy::bucket_key(const Query& q) const {
  std::string key = use_domain_ ? q.domain : std::string();
  key += '|';
  key += q.state_hash.substr(0, std::min(hash_prefix_, q.state_hash.size()));
  key += '|';
  key += std::to_string(step_mod_ > 0 ? q.step_index % step_mod_ : 0);
  return key;
}

std::size_t TabularPolicy::resolve(const Query& q) const {
  if (auto it = offsets_.find(bucket_key(q)); it != offsets_.end()) return it->second;
  if (auto it = offsets_.find("*"); it != offsets_.end()) return it->second;
  throw PolicyError("no bucket for context '" + bucket_key(q) + "' and no '*' fallback");
}

std::size_t TabularPolicy::add_bucket(const std::string& key) {
  if (auto it = offsets_.find(key); it != offsets_.end()) return it->second;
  const std::size_t off = logits_.size();
  logits_.resize(off + bucket_width(), 0.0);
  offsets_.emplace(key, off);
  return off;
}

std::optional<std::size_t> TabularPolicy::find_reasoning(const std::string& name) const {
  auto it = std::find(reasoning_.begin(), reasoning_.end(), name);
  if (it == reasoning_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - reasoning_.begin());
}

std::optional<std::size_t> TabularPolicy::find_action(const std::string& canonical) const {
  auto it = action_index_.find(canonical);
  if (it == action_index_.end()) return std::nullopt;
  return it->second;
}

std::vector<double> softmax(const double* logits, std::size_t n, double temperature) {
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = std::exp(log_softmax_at(logits, n, temperature, i));
  return p;
}

PolicyOutput act(const PolicyHandle& policy, const Context& ctx, const Observation& obs, Rng& rng, EpisodeState& episode) {
  const Query q = make_query(ctx, obs);
  PolicyOutput out;
  if (const auto* scripted = std::get_if<ScriptedPolicy>(&policy.impl)) {
    const auto& script = scripted->script_for(q.task_id);
    out.action_text = scripted_action(*scripted, q);
    out.reasoning = q.step_index < script.size() ? "I will " + describe(out.action_text, obs) + "."
                                                 : "The scripted plan is exhausted, so I stop here.";
    out.response.tokens = {"z:" + kReasoningAct, "a:" + canonical_or_raw(out.action_text)};
    out.response.logprobs = {0.0, 0.0};
    out.response.reasoning_tokens = 1;
    return out;
  }
  if (const auto* stochastic = std::get_if<StochasticScriptedPolicy>(&policy.impl)) {
    const auto& script = stochastic->base.script_for(q.task_id);
    if (!episode.follow_script) {
      episode.follow_script = rng.bernoulli(stochastic->p_success);
      std::size_t body = script.size();
      while (body > 0 && script[body - 1].rfind("terminate", 0) == 0) --body;
      episode.fork_step = body > 0 ? rng.index(body) : 0;
    }
    out.action_text = scripted_action(stochastic->base, q);
    if (!*episode.follow_script && q.step_index == episode.fork_step) out.action_text = deviation_for(out.action_text);
    out.reasoning = "I will " + describe(out.action_text, obs) + ".";
    out.response.tokens = {"z:" + kReasoningAct, "a:" + canonical_or_raw(out.action_text)};
    out.response.logprobs = {0.0, 0.0};
    out.response.reasoning_tokens = 1;
    out.response.placeholder = true;
    return out;
  }
  const auto& tab = std::get<TabularPolicy>(policy.impl);
  const double temp = policy.temperature;
  const std::size_t off = tab.resolve(q);
  const auto& L = tab.logits();
  const auto zp = softmax(&L[tab.z_index(off, 0)], tab.reasoning_size(), temp);
  const std::size_t z = rng.categorical(zp);
  const auto ap = softmax(&L[tab.a_index(off, z, 0)], tab.action_size(), temp);
  const std::size_t a = rng.categorical(ap);
  const Action& action = tab.actions()[a];
  const std::string summary = summarize_action(action, obs);
  if (tab.reasoning()[z] == kReasoningReflect)
    out.reasoning = kReflectionHeader + "the screen may not match what I expected, so I will " + summary + ".";
  else
    out.reasoning = "I will " + summary + ".";
  out.action_text = serialize_action(action);
  out.response.tokens = {"z:" + tab.reasoning()[z], "a:" + out.action_text};
  out.response.logprobs = {log_softmax_at(&L[tab.z_index(off, 0)], tab.reasoning_size(), temp, z),
                           log_softmax_at(&L[tab.a_index(off, z, 0)], tab.action_size(), temp, a)};
  out.response.reasoning_tokens = 1;
  return out;
}

namespace {

struct TabularTokens {
  std::size_t z;
  std::size_t a;
};

TabularTokens decode(const TabularPolicy& tab, const TokenizedResponse& r) {
  if (r.tokens.size() != 2 || r.reasoning_tokens != 1)
    throw PolicyError("tabular responses are exactly one reasoning and one action token");
  if (r.tokens[0].rfind("z:", 0) != 0 || r.tokens[1].rfind("a:", 0) != 0) throw PolicyError("malformed token sequence");
  auto z = tab.find_reasoning(r.tokens[0].substr(2));
  if (!z) throw PolicyError("out-of-vocabulary reasoning token '" + r.tokens[0] + "'");
  auto a = tab.find_action(r.tokens[1].substr(2));
  if (!a) throw PolicyError("out-of-vocabulary action token '" + r.tokens[1] + "'");
  return {*z, *a};
}

}  // namespace

std::vector<double> logprob(const PolicyHandle& policy, const Query& q, const TokenizedResponse& response) {
  if (const auto* scripted = std::get_if<ScriptedPolicy>(&policy.impl)) {
    const std::vector<std::string> expected = {"z:" + kReasoningAct, "a:" + canonical_or_raw(scripted_action(*scripted, q))};
    std::vector<double> out;
    for (std::size_t i = 0; i < response.tokens.size(); ++i)
      out.push_back(i < expected.size() && response.tokens[i] == expected[i] ? 0.0 : kNegInf);
    return out;
  }
  if (std::holds_alternative<StochasticScriptedPolicy>(policy.impl)) return std::vector<double>(response.tokens.size(), 0.0);
  const auto& tab = std::get<TabularPolicy>(policy.impl);
  const auto [z, a] = decode(tab, response);
  const std::size_t off = tab.resolve(q);
  const auto& L = tab.logits();
  return {log_softmax_at(&L[tab.z_index(off, 0)], tab.reasoning_size(), policy.temperature, z),
          log_softmax_at(&L[tab.a_index(off, z, 0)], tab.action_size(), policy.temperature, a)};
}

std::vector<double> logprob(const PolicyHandle& policy, const Context& ctx, const Observation& obs,
                            const TokenizedResponse& response) {
  return logprob(policy, make_query(ctx, obs), response);
}

std::vector<SparseGradient> logprob_gradient(const TabularPolicy& tab, double temperature, const Query& q,
                                             const TokenizedResponse& response) {
  if (!(temperature > 0.0)) throw PolicyError("log-prob gradients need temperature > 0");
  const auto [z, a] = decode(tab, response);
  const std::size_t off = tab.resolve(q);
  const auto& L = tab.logits();
  std::vector<SparseGradient> grads(2);
  const auto zp = softmax(&L[tab.z_index(off, 0)], tab.reasoning_size(), temperature);
  for (std::size_t j = 0; j < zp.size(); ++j)
    grads[0].entries.push_back({tab.z_index(off, j), ((j == z ? 1.0 : 0.0) - zp[j]) / temperature});
  const auto ap = softmax(&L[tab.a_index(off, z, 0)], tab.action_size(), temperature);
  for (std::size_t j = 0; j < ap.size(); ++j)
    grads[1].entries.push_back({tab.a_index(off, z, j), ((j == a ? 1.0 : 0.0) - ap[j]) / temperature});
  return grads;
}

json policy_to_json(const PolicyHandle& policy) {
  if (const auto* s = std::get_if<ScriptedPolicy>(&policy.impl)) {
    json j = scripted_to_json(*s);
    j["kind"] = "scripted";
    return j;
  }
  if (const auto* s = std::get_if<StochasticScriptedPolicy>(&policy.impl)) {
    json j = scripted_to_json(s->base);
    j["kind"] = "stochastic_scripted";
    j["p_success"] = s->p_success;
    return j;
  }
  const auto& tab = std::get<TabularPolicy>(policy.impl);
  json actions = json::array();
  for (const auto& a : tab.actions()) actions.push_back(serialize_action(a));
  json buckets = json::object();
  const std::size_t Z = tab.reasoning_size(), A = tab.action_size();
  for (const auto& [key, off] : tab.buckets()) {
    std::vector<double> z(tab.logits().begin() + off, tab.logits().begin() + off + Z);
    json rows = json::array();
    for (std::size_t zi = 0; zi < Z; ++zi) {
      const auto begin = tab.logits().begin() + tab.a_index(off, zi, 0);
      rows.push_back(std::vector<double>(begin, begin + A));
    }
    buckets[key] = {{"z", z}, {"a", rows}};
  }
  return {{"kind", "tabular"},       {"temperature", policy.temperature}, {"hash_prefix", tab.hash_prefix()},
          {"step_mod", tab.step_mod()}, {"use_domain", tab.use_domain()},   {"reasoning", tab.reasoning()},
          {"actions", actions},      {"buckets", buckets}};
}

PolicyHandle policy_from_json(const json& j) {
  const std::string kind = j.value("kind", "scripted");
  PolicyHandle h;
  if (kind == "scripted") {
    h.impl = scripted_from_json(j);
  } else if (kind == "stochastic_scripted") {
    StochasticScriptedPolicy p{scripted_from_json(j), j.value("p_success", 0.5)};
    if (!(p.p_success >= 0.0 && p.p_success <= 1.0)) throw PolicyError("p_success must be in [0,1]");
    h.impl = std::move(p);
  } else if (kind == "tabular") {
    std::vector<Action> actions;
    for (const auto& a : j.at("actions")) actions.push_back(parse_action(a.get<std::string>()));
    TabularPolicy tab(j.value("reasoning", std::vector<std::string>{kReasoningAct, kReasoningReflect}), std::move(actions),
                      j.value("hash_prefix", std::size_t{0}), j.value("step_mod", std::size_t{0}), j.value("use_domain", true));
    const std::size_t Z = tab.reasoning_size(), A = tab.action_size();
    for (const auto& [key, b] : j.at("buckets").items()) {
      const std::size_t off = tab.add_bucket(key);
      const auto z = b.at("z").get<std::vector<double>>();
      const auto rows = b.at("a").get<std::vector<std::vector<double>>>();
      if (z.size() != Z || rows.size() != Z) throw PolicyError("bucket '" + key + "' has wrong reasoning width");
      for (std::size_t zi = 0; zi < Z; ++zi) {
        if (rows[zi].size() != A) throw PolicyError("bucket '" + key + "' has wrong action width");
        tab.logits()[tab.z_index(off, zi)] = z[zi];
        for (std::size_t ai = 0; ai < A; ++ai) tab.logits()[tab.a_index(off, zi, ai)] = rows[zi][ai];
      }
    }
    for (double v : tab.logits())
      if (!std::isfinite(v)) throw PolicyError("tabular logits must be finite");
    h.impl = std::move(tab);
  } else {
    throw PolicyError("unknown policy kind '" + kind + "'");
  }
  h.temperature = j.value("temperature", 1.0);
  if (!(h.temperature >= 0.0)) throw PolicyError("temperature must be >= 0");
  return h;
}

ScriptedPolicy solution_script(const std::vector<Task>& tasks) {
  ScriptedPolicy p;
  for (const auto& t : tasks) {
    auto& script = p.scripts[t.id];
    for (const auto& a : t.solution) script.push_back(serialize_action(a));
  }
  return p;
}

PolicyHandle load_policy(const std::string& spec, const std::vector<Task>& tasks, const std::vector<Action>& extra_actions) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw PolicyError("policy spec must be <kind>:<file>");
  const std::string kind = spec.substr(0, colon);
  std::string path = spec.substr(colon + 1);
  double p_success = 0.5;
  if (kind == "stochastic_scripted") {
    const auto last = path.rfind(':');
    if (last == std::string::npos) throw PolicyError("stochastic_scripted spec needs :<p_success>");
    try {
      p_success = std::stod(path.substr(last + 1));
    } catch (const std::exception&) {
      throw PolicyError("bad p_success in '" + spec + "'");
    }
    path = path.substr(0, last);
  }
  auto read = [&]() -> json {
    std::ifstream in(path);
    if (!in) throw PolicyError("cannot open policy file '" + path + "'");
    try {
      return json::parse(in);
    } catch (const json::parse_error& e) {
      throw PolicyError("policy file '" + path + "': " + e.what());
    }
  };
  PolicyHandle h;
  if (kind == "scripted" || kind == "stochastic_scripted") {
    ScriptedPolicy base = path == "@solution" ? solution_script(tasks) : scripted_from_json(read());
    if (kind == "scripted") h.impl = std::move(base);
    else {
      if (!(p_success >= 0.0 && p_success <= 1.0)) throw PolicyError("p_success must be in [0,1]");
      h.impl = StochasticScriptedPolicy{std::move(base), p_success};
    }
  } else if (kind == "tabular" && path == "@solution") {
    TabularFromSolutionsOptions opts;
    opts.extra_actions = extra_actions;
    h = tabular_from_solutions(tasks, opts);
  } else if (kind == "tabular") {
    json j = read();
    j["kind"] = "tabular";
    h = policy_from_json(j);
  } else {
    throw PolicyError("unknown policy kind '" + kind + "'");
  }
  return h;
}

PolicyHandle tabular_from_solutions(const std::vector<Task>& tasks, const TabularFromSolutionsOptions& opts) {
  std::set<std::string> vocab = {"wait time=1", "key keys=[escape]", "terminate status=failure", "terminate status=success"};
  for (const auto& t : tasks)
    for (const auto& a : t.solution) vocab.insert(serialize_action(a));
  for (const auto& a : opts.extra_actions) vocab.insert(serialize_action(a));
  std::vector<Action> actions;
  for (const auto& v : vocab) actions.push_back(parse_action(v));
  TabularPolicy tab({kReasoningAct, kReasoningReflect}, std::move(actions), 16, 0, true);
  tab.add_bucket("*");
  for (const auto& t : tasks) {
    auto state = sandbox::reset(t, opts.reset_seed);
    for (std::size_t i = 0; i < t.solution.size(); ++i) {
      const Query q{t.id, t.domain, sandbox::state_hash(state), i};
      const std::size_t off = tab.add_bucket(tab.bucket_key(q));
      tab.logits()[tab.z_index(off, 0)] = opts.reasoning_logit;
      const std::size_t a = *tab.find_action(serialize_action(t.solution[i]));
      for (std::size_t z = 0; z < tab.reasoning_size(); ++z) tab.logits()[tab.a_index(off, z, a)] += opts.action_logit;
      auto r = sandbox::step(state, t.solution[i]);
      state = std::move(r.state);
      if (r.done) break;
    }
  }
  PolicyHandle h;
  h.impl = std::move(tab);
  return h;
}

}  // namespace evoloop::policy
