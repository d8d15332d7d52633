#include "evoloop/stepo_kernels.hpp"

#include <cmath>

namespace evoloop::stepo {

void Compensated::add(double x) {
  const double t = sum_ + x;
  if (std::fabs(sum_) >= std::fabs(x)) comp_ += (sum_ - t) + x;
  else comp_ += (x - t) + sum_;
  sum_ = t;
}

FlatGroup flatten(const GroupRollout& g, Granularity granularity, const StepMask* mask) {
  check_group(g);
  std::vector<double> rewards;
  for (const auto& t : g.trajectories) rewards.push_back(t.reward);
  const std::vector<double> adv = group_advantages(rewards);

  FlatGroup f;
  f.G = g.trajectories.size();
  f.traj_begin.push_back(0);
  f.step_begin.push_back(0);
  for (std::size_t i = 0; i < f.G; ++i) {
    const auto& traj = g.trajectories[i];
    const std::size_t T = traj.steps.size();
    const std::vector<double> per_step = allocate_step_advantages(adv[i], T);
    for (std::size_t t = 0; t < T; ++t) {
      const auto& s = traj.steps[t];
      f.total_tokens += s.theta.size();
      bool supervised = granularity == Granularity::step ? true : t + 1 == T;
      if (mask) supervised = supervised && (*mask).at(i).at(t);
      if (!supervised) continue;
      f.logp_theta.insert(f.logp_theta.end(), s.theta.begin(), s.theta.end());
      f.logp_old.insert(f.logp_old.end(), s.old.begin(), s.old.end());
      f.logp_ref.insert(f.logp_ref.end(), s.ref.begin(), s.ref.end());
      f.step_advantage.push_back(granularity == Granularity::step ? per_step[t] : adv[i]);
      f.step_begin.push_back(f.logp_theta.size());
    }
    f.traj_begin.push_back(f.step_advantage.size());
  }
  return f;
}

namespace {

inline void token_term(const FlatGroup& f, const ClipConfig& cfg, double adv, std::size_t k, TokenTerms& out) {
  const double r = std::exp(f.logp_theta[k] - f.logp_old[k]);
  const double kl = kl_estimate(f.logp_ref[k], f.logp_theta[k]);
  out.kl[k] = kl;
  out.clipped[k] = clip_active(r, adv, cfg);
  out.value[k] = surrogate(r, adv, cfg) - cfg.beta_kl * kl;
}

void resize(const FlatGroup& f, TokenTerms& out) {
  const std::size_t n = f.logp_theta.size();
  out.value.assign(n, 0.0);
  out.kl.assign(n, 0.0);
  out.clipped.assign(n, 0);
}

}  // namespace

void token_terms_serial(const FlatGroup& f, const ClipConfig& cfg, TokenTerms& out) {
  resize(f, out);
  const std::size_t steps = f.step_advantage.size();
  for (std::size_t s = 0; s < steps; ++s)
    for (std::size_t k = f.step_begin[s]; k < f.step_begin[s + 1]; ++k) token_term(f, cfg, f.step_advantage[s], k, out);
}

void token_terms_omp(const FlatGroup& f, const ClipConfig& cfg, TokenTerms& out) {
  resize(f, out);
  const auto steps = static_cast<std::ptrdiff_t>(f.step_advantage.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < steps; ++s)
    for (std::size_t k = f.step_begin[s]; k < f.step_begin[s + 1]; ++k) token_term(f, cfg, f.step_advantage[s], k, out);
}

ObjectiveResult reduce_terms(const FlatGroup& f, const TokenTerms& terms) {
  ObjectiveResult res;
  Compensated total, kl_total;
  for (std::size_t i = 0; i < f.G; ++i) {
    Compensated traj;
    for (std::size_t s = f.traj_begin[i]; s < f.traj_begin[i + 1]; ++s) {
      Compensated step;
      const std::size_t K = f.step_begin[s + 1] - f.step_begin[s];
      for (std::size_t k = f.step_begin[s]; k < f.step_begin[s + 1]; ++k) {
        step.add(terms.value[k]);
        kl_total.add(terms.kl[k]);
        res.diag.clipped_tokens += terms.clipped[k];
      }
      if (K > 0) traj.add(step.value() / static_cast<double>(K));
      ++res.diag.supervised_steps;
    }
    total.add(traj.value());
  }
  res.J = total.value() / static_cast<double>(f.G);
  res.diag.total_tokens = f.total_tokens;
  res.diag.supervised_tokens = f.logp_theta.size();
  if (res.diag.supervised_tokens > 0) {
    res.diag.clip_fraction = static_cast<double>(res.diag.clipped_tokens) / static_cast<double>(res.diag.supervised_tokens);
    res.diag.kl_mean = kl_total.value() / static_cast<double>(res.diag.supervised_tokens);
  }
  return res;
}

ObjectiveResult objective_serial(const FlatGroup& f, const ClipConfig& cfg) {
  TokenTerms terms;
  token_terms_serial(f, cfg, terms);
  return reduce_terms(f, terms);
}

ObjectiveResult objective_omp(const FlatGroup& f, const ClipConfig& cfg) {
  TokenTerms terms;
  token_terms_omp(f, cfg, terms);
  return reduce_terms(f, terms);
}

std::vector<ObjectiveResult> objective_batch_serial(const std::vector<FlatGroup>& groups, const ClipConfig& cfg) {
  std::vector<ObjectiveResult> out(groups.size());
  for (std::size_t i = 0; i < groups.size(); ++i) out[i] = objective_serial(groups[i], cfg);
  return out;
}

std::vector<ObjectiveResult> objective_batch_omp(const std::vector<FlatGroup>& groups, const ClipConfig& cfg) {
  std::vector<ObjectiveResult> out(groups.size());
  const auto n = static_cast<std::ptrdiff_t>(groups.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = objective_serial(groups[i], cfg);
  return out;
}

}  // namespace evoloop::stepo
