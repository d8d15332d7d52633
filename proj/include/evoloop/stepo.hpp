#pragma once

// Group-relative step-level policy optimization: advantages, uniform step
// allocation, importance ratios, the clipped surrogate with a per-token KL
// penalty, its analytic gradient for tabular policies, and the
// trajectory-level baseline that only supervises the final step.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "evoloop/model.hpp"
#include "evoloop/policy.hpp"

namespace evoloop::stepo {

class StepoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepLogprobs {
  std::vector<double> theta;
  std::vector<double> old;
  std::vector<double> ref;
};

struct TrajectoryLogprobs {
  double reward = 0.0;
  std::vector<StepLogprobs> steps;
};

struct GroupRollout {
  std::string task_id;
  std::vector<TrajectoryLogprobs> trajectories;
};

struct ClipConfig {
  double eps_low = 0.2;
  double eps_high = 0.2;
  double beta_kl = 0.01;
};

void check_clip(const ClipConfig& cfg);
void check_group(const GroupRollout& g);

// Population std; a constant group yields all zeros. Needs >= 2 rewards.
std::vector<double> group_advantages(const std::vector<double>& rewards);
std::vector<double> allocate_step_advantages(double advantage, std::size_t steps);
std::vector<double> importance_ratios(const std::vector<double>& logp_new, const std::vector<double>& logp_old);
// exp(lr - lt) - (lr - lt) - 1
double kl_estimate(double logp_ref, double logp_theta);
// True when the clipped branch is the one min() keeps and it is flat in r.
bool clip_active(double ratio, double advantage, const ClipConfig& cfg);
double surrogate(double ratio, double advantage, const ClipConfig& cfg);

enum class Granularity { step, trajectory };

struct Diagnostics {
  std::size_t total_tokens = 0;
  std::size_t supervised_tokens = 0;
  std::size_t supervised_steps = 0;
  std::size_t clipped_tokens = 0;
  double clip_fraction = 0.0;
  double kl_mean = 0.0;
};

struct ObjectiveResult {
  double J = 0.0;
  Diagnostics diag;
};

// Optional subset of steps to supervise, indexed [trajectory][step].
using StepMask = std::vector<std::vector<bool>>;

ObjectiveResult stepo_objective(const GroupRollout& g, const ClipConfig& cfg, const StepMask* mask = nullptr);
ObjectiveResult grpo_trajectory_objective(const GroupRollout& g, const ClipConfig& cfg);

// Scores every recorded response under the three policies.
GroupRollout score_group(const std::string& task_id, const std::vector<Trajectory>& trajs, const policy::PolicyHandle& theta,
                         const policy::PolicyHandle& old, const policy::PolicyHandle& ref);

// Analytic gradient of the objective wrt theta's logits; theta must be
// tabular. At a clip kink the unclipped branch is used.
std::vector<double> stepo_gradient(const std::vector<Trajectory>& trajs, const policy::PolicyHandle& theta,
                                   const policy::PolicyHandle& old, const policy::PolicyHandle& ref, const ClipConfig& cfg,
                                   Granularity granularity = Granularity::step);

nlohmann::json diagnostics_to_json(const Diagnostics& d);

}  // namespace evoloop::stepo
