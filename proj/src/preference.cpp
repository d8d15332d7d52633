#include "evoloop/preference.hpp"

#include <cmath>

namespace evoloop::preference {

using nlohmann::json;

Equivalence equivalence_from_string(const std::string& s) {
  if (s == "strict") return Equivalence::strict;
  if (s == "relaxed") return Equivalence::relaxed;
  throw std::invalid_argument("equivalence must be strict or relaxed, got '" + s + "'");
}

bool states_equivalent(const Step& a, const Step& b, Equivalence eq) {
  const std::string& ha = eq == Equivalence::strict ? a.state_hash : a.relaxed_hash;
  const std::string& hb = eq == Equivalence::strict ? b.state_hash : b.relaxed_hash;
  return !ha.empty() && ha == hb;
}

bool same_action(const Action& a, const Observation& obs_a, const Action& b, const Observation& obs_b) {
  if (a.kind != b.kind) return false;
  if (is_pointer_kind(a.kind) && a.coordinate && b.coordinate) {
    const Widget* wa = hit_test(obs_a, *a.coordinate);
    const Widget* wb = hit_test(obs_b, *b.coordinate);
    if (wa && wb) return wa->id == wb->id;
  }
  return serialize_action(a) == serialize_action(b);
}

ForkingPoint find_deviation(const Trajectory& fail, const Trajectory& ref, Equivalence eq) {
  const std::size_t n = std::min(fail.steps.size(), ref.steps.size());
  bool identical = fail.steps.size() == ref.steps.size();
  for (std::size_t t = 0; identical && t < n; ++t)
    identical = same_action(fail.steps[t].action, fail.steps[t].observation, ref.steps[t].action, ref.steps[t].observation);
  if (identical) throw DeviationError(DeviationError::Code::no_deviation, "trajectories take the same actions");
  if (ref.reward != 1 || fail.reward != 0)
    throw DeviationError(DeviationError::Code::invalid_input, "need a failed trajectory and a successful reference");
  for (std::size_t t = 0; t < n; ++t) {
    const Step& f = fail.steps[t];
    const Step& r = ref.steps[t];
    if (states_equivalent(f, r, eq) && !same_action(f.action, f.observation, r.action, r.observation))
      return {t, f.action, r.action, f.state_hash, r.state_hash};
  }
  throw DeviationError(DeviationError::Code::undiagnosable, "no equivalent state with differing actions");
}

Action normalize_coords(const Action& a, const std::string& widget_id, const Observation& obs) {
  const Widget* w = find_widget(obs, widget_id);
  if (!w || !is_pointer_kind(a.kind)) return a;
  Action out = a;
  out.coordinate = w->bounds.center();
  return out;
}

std::optional<Aligned> align_reference(const Trajectory& fail, const Trajectory& ref, std::size_t t_star, std::size_t w) {
  if (t_star >= fail.steps.size()) throw std::out_of_range("t_star outside the failed trajectory");
  const Step& f = fail.steps[t_star];
  std::vector<std::size_t> order;
  for (std::size_t d = 0; d <= w; ++d) {
    if (d <= t_star) order.push_back(t_star - d);
    if (d > 0) order.push_back(t_star + d);
  }
  for (std::size_t k : order) {
    if (k >= ref.steps.size()) continue;
    const Step& r = ref.steps[k];
    Action candidate = r.action;
    if (is_pointer_kind(r.action.kind) && r.action.coordinate) {
      const Widget* target = hit_test(r.observation, *r.action.coordinate);
      if (!target || !find_widget(f.observation, target->id)) continue;
      candidate = normalize_coords(r.action, target->id, f.observation);
    }
    if (same_action(candidate, f.observation, f.action, f.observation)) continue;
    return Aligned{k, r.reasoning, candidate};
  }
  return std::nullopt;
}

namespace {

std::optional<Action> ground_truth_fallback(const Task* task, const Step& f, std::size_t t_star) {
  if (!task || t_star >= task->solution.size()) return std::nullopt;
  const Action& gt = task->solution[t_star];
  if (is_pointer_kind(gt.kind) && gt.coordinate && !hit_test(f.observation, *gt.coordinate)) return std::nullopt;
  if (same_action(gt, f.observation, f.action, f.observation)) return std::nullopt;
  return gt;
}

Response make_response(std::string reasoning, Action action) {
  Response r{std::move(reasoning), std::move(action), {}};
  r.tokens = policy::tokenize(r.reasoning, r.action);
  return r;
}

}  // namespace

PairResult construct_pairs(const Trajectory& fail, const Trajectory& ref, const coldstart::ReasoningProvider& provider,
                           const PairOptions& opts, const Task* task) {
  const ForkingPoint fp = find_deviation(fail, ref, opts.equivalence);
  const std::size_t t = fp.t_star;
  const Step& f = fail.steps[t];
  PairResult out;

  std::optional<Action> corrective;
  if (auto aligned = align_reference(fail, ref, t, opts.window)) corrective = aligned->action;
  else if (opts.synthesizer) corrective = ground_truth_fallback(task, f, t);
  if (!corrective) {
    out.skips.push_back({fail.id, ref.id, t,
                         opts.synthesizer ? "no aligned reference step and no usable ground-truth action"
                                          : "no aligned reference step and the synthesizer is disabled"});
    return out;
  }

  using coldstart::Phase;
  coldstart::PhaseInput in = coldstart::phase_input(t == 0 ? Phase::goal : Phase::observation, fail.instruction,
                                                    f.observation, *corrective, t);
  if (t > 0) in.previous = summarize_action(fail.steps[t - 1].action, fail.steps[t - 1].observation);
  PreferencePair p1;
  p1.task_id = fail.task_id;
  p1.domain = fail.domain;
  p1.context = build_context(fail, t, opts.context_window);
  p1.observation = f.observation;
  p1.chosen = make_response(provider.generate(in), *corrective);
  p1.rejected = make_response(f.reasoning, f.action);
  p1.paradigm = kParadigmCorrection;
  p1.fail_id = fail.id;
  p1.ref_id = ref.id;
  p1.t_star = t;
  out.pairs.push_back(std::move(p1));

  if (t + 1 < fail.steps.size()) {
    const Step& next = fail.steps[t + 1];
    Action fix = *corrective;
    if (is_pointer_kind(fix.kind) && fix.coordinate)
      if (const Widget* target = hit_test(f.observation, *fix.coordinate)) fix = normalize_coords(fix, target->id, next.observation);
    coldstart::PhaseInput rin = coldstart::phase_input(Phase::reflect, fail.instruction, next.observation, fix, t + 1);
    rin.error_context = "the previous action (" + summarize_action(f.action, f.observation) + ") did not do what the task needed";
    rin.previous = summarize_action(f.action, f.observation);
    PreferencePair p2;
    p2.task_id = fail.task_id;
    p2.domain = fail.domain;
    p2.context = build_context(fail, t + 1, opts.context_window);
    p2.observation = next.observation;
    p2.chosen = make_response(provider.generate(rin), fix);
    p2.rejected = make_response(next.reasoning, next.action);
    p2.paradigm = kParadigmReflection;
    p2.fail_id = fail.id;
    p2.ref_id = ref.id;
    p2.t_star = t;
    out.pairs.push_back(std::move(p2));
  }
  return out;
}

const Trajectory* pick_reference(const Trajectory& fail, const std::vector<const Trajectory*>& successes,
                                 const std::map<std::string, Task>& tasks) {
  for (const auto* s : successes)
    if (s->task_id == fail.task_id) return s;
  auto fit = tasks.find(fail.task_id);
  if (fit == tasks.end() || fit->second.family.empty()) return nullptr;
  for (const auto* s : successes) {
    auto sit = tasks.find(s->task_id);
    if (sit != tasks.end() && sit->second.family == fit->second.family) return s;
  }
  return nullptr;
}

namespace {

json response_to_json(const Response& r) {
  return {{"reasoning", r.reasoning}, {"action", serialize_action(r.action)}, {"tokens", r.tokens}};
}

Response response_from_json(const json& j) {
  Response r;
  r.reasoning = j.at("reasoning").get<std::string>();
  r.action = parse_action(j.at("action").get<std::string>());
  r.tokens = j.contains("tokens") ? j.at("tokens").get<TokenizedResponse>() : policy::tokenize(r.reasoning, r.action);
  return r;
}

}  // namespace

void to_json(json& j, const PreferencePair& p) {
  j = {{"task_id", p.task_id},
       {"domain", p.domain},
       {"paradigm", p.paradigm},
       {"source", {{"fail_id", p.fail_id}, {"ref_id", p.ref_id}, {"t_star", p.t_star}}},
       {"context", p.context},
       {"observation", p.observation},
       {"chosen", response_to_json(p.chosen)},
       {"rejected", response_to_json(p.rejected)}};
}

void from_json(const json& j, PreferencePair& p) {
  p.task_id = j.at("task_id").get<std::string>();
  p.domain = j.value("domain", "");
  p.paradigm = j.at("paradigm").get<std::string>();
  if (p.paradigm != kParadigmCorrection && p.paradigm != kParadigmReflection)
    throw std::invalid_argument("unknown paradigm '" + p.paradigm + "'");
  const auto& src = j.at("source");
  p.fail_id = src.at("fail_id").get<std::string>();
  p.ref_id = src.at("ref_id").get<std::string>();
  p.t_star = src.at("t_star").get<std::size_t>();
  p.context = j.at("context").get<Context>();
  p.observation = j.at("observation").get<Observation>();
  p.chosen = response_from_json(j.at("chosen"));
  p.rejected = response_from_json(j.at("rejected"));
}

json skip_to_json(const SkipRecord& s) {
  return {{"fail_id", s.fail_id}, {"ref_id", s.ref_id}, {"t_star", s.t_star}, {"reason", s.reason}};
}

policy::Query pair_query(const PreferencePair& p) { return policy::make_query(p.context, p.observation); }

double response_logprob(const policy::PolicyHandle& policy, const policy::Query& q, const TokenizedResponse& r) {
  if (!policy.scoreable()) throw policy::PolicyError("policy cannot supply log-probs for objectives");
  double sum = 0.0;
  for (double lp : policy::logprob(policy, q, r)) sum += lp;
  return sum;
}

double dpo_loss_from_margin(double margin, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("beta must be > 0");
  const double x = beta * margin;
  return x >= 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

DpoTerms dpo_terms(const policy::PolicyHandle& theta, const policy::PolicyHandle& ref, const PreferencePair& pair, double beta) {
  const policy::Query q = pair_query(pair);
  DpoTerms d;
  d.chosen_delta = response_logprob(theta, q, pair.chosen.tokens) - response_logprob(ref, q, pair.chosen.tokens);
  d.rejected_delta = response_logprob(theta, q, pair.rejected.tokens) - response_logprob(ref, q, pair.rejected.tokens);
  d.margin = d.chosen_delta - d.rejected_delta;
  d.loss = dpo_loss_from_margin(d.margin, beta);
  if (!std::isfinite(d.loss)) throw policy::PolicyError("dpo loss is not finite for pair at t_star " + std::to_string(pair.t_star));
  return d;
}

double dpo_loss(const policy::PolicyHandle& theta, const policy::PolicyHandle& ref, const PreferencePair& pair, double beta) {
  return dpo_terms(theta, ref, pair, beta).loss;
}

std::vector<double> dpo_gradient(const policy::PolicyHandle& theta, const policy::PolicyHandle& ref,
                                 const PreferencePair& pair, double beta) {
  const auto* tab = theta.tabular();
  if (!tab) throw policy::PolicyError("dpo gradient needs a tabular policy");
  const DpoTerms d = dpo_terms(theta, ref, pair, beta);
  // dL/dmargin = -beta * sigmoid(-beta * margin)
  const double x = beta * d.margin;
  const double sig_neg = x >= 0.0 ? std::exp(-x) / (1.0 + std::exp(-x)) : 1.0 / (1.0 + std::exp(x));
  const double scale = -beta * sig_neg;
  std::vector<double> grad(tab->logits().size(), 0.0);
  const policy::Query q = pair_query(pair);
  auto accumulate = [&](const TokenizedResponse& r, double sign) {
    for (const auto& g : policy::logprob_gradient(*tab, theta.temperature, q, r))
      for (const auto& [idx, v] : g.entries) grad[idx] += sign * scale * v;
  };
  accumulate(pair.chosen.tokens, 1.0);
  accumulate(pair.rejected.tokens, -1.0);
  return grad;
}

}  // namespace evoloop::preference
