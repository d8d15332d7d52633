#include "evoloop/stepo.hpp"

#include <algorithm>
#include <cmath>

#include "evoloop/stepo_kernels.hpp"

namespace evoloop::stepo {

using nlohmann::json;

void check_clip(const ClipConfig& cfg) {
  if (!(cfg.eps_low > 0.0) || !(cfg.eps_high > 0.0)) throw StepoError("clip epsilons must be > 0");
  if (!(1.0 - cfg.eps_low > 0.0)) throw StepoError("1 - eps_low must be > 0");
  if (!(cfg.beta_kl >= 0.0)) throw StepoError("beta_kl must be >= 0");
}

void check_group(const GroupRollout& g) {
  if (g.trajectories.size() < 2) throw StepoError("group needs at least 2 trajectories");
  for (std::size_t i = 0; i < g.trajectories.size(); ++i) {
    const auto& t = g.trajectories[i];
    if (t.steps.empty()) throw StepoError("trajectory " + std::to_string(i) + " has no steps");
    if (!std::isfinite(t.reward)) throw StepoError("trajectory " + std::to_string(i) + " has a non-finite reward");
    for (std::size_t s = 0; s < t.steps.size(); ++s) {
      const auto& st = t.steps[s];
      if (st.theta.empty()) throw StepoError("step " + std::to_string(s) + " of trajectory " + std::to_string(i) + " has no tokens");
      if (st.old.size() != st.theta.size() || st.ref.size() != st.theta.size())
        throw StepoError("log-prob shapes differ at trajectory " + std::to_string(i) + " step " + std::to_string(s));
      for (std::size_t k = 0; k < st.theta.size(); ++k)
        if (!std::isfinite(st.theta[k]) || !std::isfinite(st.old[k]) || !std::isfinite(st.ref[k]))
          throw StepoError("non-finite log-prob at trajectory " + std::to_string(i) + " step " + std::to_string(s));
    }
  }
}

std::vector<double> group_advantages(const std::vector<double>& rewards) {
  const std::size_t G = rewards.size();
  if (G < 2) throw StepoError("group advantages need G >= 2");
  Compensated sum;
  for (double r : rewards) sum.add(r);
  const double mean = sum.value() / static_cast<double>(G);
  Compensated sq;
  for (double r : rewards) sq.add((r - mean) * (r - mean));
  const double sd = std::sqrt(sq.value() / static_cast<double>(G));
  std::vector<double> out(G, 0.0);
  if (sd == 0.0) return out;
  for (std::size_t i = 0; i < G; ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

std::vector<double> allocate_step_advantages(double advantage, std::size_t steps) {
  if (steps == 0) throw StepoError("step allocation needs T >= 1");
  return std::vector<double>(steps, advantage / static_cast<double>(steps));
}

std::vector<double> importance_ratios(const std::vector<double>& logp_new, const std::vector<double>& logp_old) {
  if (logp_new.size() != logp_old.size()) throw StepoError("importance ratio shapes differ");
  std::vector<double> out(logp_new.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(logp_new[i] - logp_old[i]);
  return out;
}

double kl_estimate(double logp_ref, double logp_theta) {
  const double d = logp_ref - logp_theta;
  // expm1 keeps the estimate exactly zero at d = 0 and accurate near it.
  return std::expm1(d) - d;
}

bool clip_active(double ratio, double advantage, const ClipConfig& cfg) {
  return (advantage > 0.0 && ratio > 1.0 + cfg.eps_high) || (advantage < 0.0 && ratio < 1.0 - cfg.eps_low);
}

double surrogate(double ratio, double advantage, const ClipConfig& cfg) {
  const double clipped = std::clamp(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
  return std::min(ratio * advantage, clipped * advantage);
}

ObjectiveResult stepo_objective(const GroupRollout& g, const ClipConfig& cfg, const StepMask* mask) {
  check_clip(cfg);
  return objective_serial(flatten(g, Granularity::step, mask), cfg);
}

ObjectiveResult grpo_trajectory_objective(const GroupRollout& g, const ClipConfig& cfg) {
  check_clip(cfg);
  return objective_serial(flatten(g, Granularity::trajectory), cfg);
}

namespace {

policy::Query step_query(const Trajectory& traj, std::size_t t) {
  return {traj.task_id, traj.domain, traj.steps[t].observation.state_hash, t};
}

const TokenizedResponse& response_of(const Trajectory& traj, std::size_t t) {
  const auto& r = traj.steps[t].response;
  if (!r) throw StepoError("trajectory " + traj.id + " step " + std::to_string(t) + " has no recorded response");
  if (r->placeholder) throw StepoError("trajectory " + traj.id + " was produced by a policy without real log-probs");
  return *r;
}

}  // namespace

GroupRollout score_group(const std::string& task_id, const std::vector<Trajectory>& trajs, const policy::PolicyHandle& theta,
                         const policy::PolicyHandle& old, const policy::PolicyHandle& ref) {
  for (const auto* p : {&theta, &old, &ref})
    if (!p->scoreable()) throw StepoError("policy cannot supply log-probs for objectives");
  GroupRollout g;
  g.task_id = task_id;
  for (const auto& traj : trajs) {
    TrajectoryLogprobs tl;
    tl.reward = traj.reward;
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      const auto q = step_query(traj, t);
      const auto& r = response_of(traj, t);
      tl.steps.push_back({policy::logprob(theta, q, r), policy::logprob(old, q, r), policy::logprob(ref, q, r)});
    }
    g.trajectories.push_back(std::move(tl));
  }
  return g;
}

std::vector<double> stepo_gradient(const std::vector<Trajectory>& trajs, const policy::PolicyHandle& theta,
                                   const policy::PolicyHandle& old, const policy::PolicyHandle& ref, const ClipConfig& cfg,
                                   Granularity granularity) {
  check_clip(cfg);
  const auto* tab = theta.tabular();
  if (!tab) throw StepoError("stepo gradient needs a tabular policy");
  const GroupRollout g = score_group(trajs.empty() ? "" : trajs.front().task_id, trajs, theta, old, ref);
  check_group(g);
  std::vector<double> rewards;
  for (const auto& t : g.trajectories) rewards.push_back(t.reward);
  const std::vector<double> adv = group_advantages(rewards);
  const double invG = 1.0 / static_cast<double>(g.trajectories.size());

  std::vector<double> grad(tab->logits().size(), 0.0);
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const std::size_t T = trajs[i].steps.size();
    for (std::size_t t = 0; t < T; ++t) {
      if (granularity == Granularity::trajectory && t + 1 != T) continue;
      const double a = granularity == Granularity::step ? adv[i] / static_cast<double>(T) : adv[i];
      const auto& lp = g.trajectories[i].steps[t];
      const double w = invG / static_cast<double>(lp.theta.size());
      const auto token_grads = policy::logprob_gradient(*tab, theta.temperature, step_query(trajs[i], t), response_of(trajs[i], t));
      for (std::size_t k = 0; k < lp.theta.size(); ++k) {
        const double r = std::exp(lp.theta[k] - lp.old[k]);
        const double surrogate_coef = clip_active(r, a, cfg) ? 0.0 : a * r;
        const double kl_coef = -std::expm1(lp.ref[k] - lp.theta[k]);  // d kl / d logp_theta
        const double c = w * (surrogate_coef - cfg.beta_kl * kl_coef);
        for (const auto& [idx, v] : token_grads[k].entries) grad[idx] += c * v;
      }
    }
  }
  return grad;
}

json diagnostics_to_json(const Diagnostics& d) {
  return {{"total_tokens", d.total_tokens},       {"supervised_tokens", d.supervised_tokens},
          {"supervised_steps", d.supervised_steps}, {"clipped_tokens", d.clipped_tokens},
          {"clip_fraction", d.clip_fraction},     {"kl_mean", d.kl_mean}};
}

}  // namespace evoloop::stepo
