#pragma once

// Rejection-sampling curation: budget selection from pass rates and
// replay-grounded step denoising.

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evoloop/model.hpp"
#include "evoloop/orchestrator.hpp"
#include "evoloop/policy.hpp"

namespace evoloop::rft {

class RftError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BudgetSpectrum {
  std::vector<std::size_t> budgets;  // ascending
  std::vector<double> thresholds;    // strictly descending, in [0,1]
};

void check_spectrum(const BudgetSpectrum& s);
// "4:0.75,8:0.5,16:0.25"
BudgetSpectrum parse_spectrum(const std::string& text);
std::string format_spectrum(const BudgetSpectrum& s);

struct BudgetChoice {
  std::size_t k = 0;
  std::size_t index = 0;
  bool satisfied = true;  // false: no threshold met, fell back to the largest budget
};

BudgetChoice select_budget(const std::map<std::size_t, double>& sr_by_k, const BudgetSpectrum& spectrum);

// SR(k_i) over the first k_i rewards.
std::map<std::size_t, double> prefix_pass_rates(const std::vector<int>& rewards, const BudgetSpectrum& spectrum);

struct PassRateEstimate {
  std::string task_id;
  bool estimated = false;
  std::string error;
  std::vector<int> rewards;
  std::map<std::size_t, double> sr;
};

struct EstimateOptions {
  std::size_t step_budget = 20;
  std::uint64_t seed = 0;
};

// Runs k_n rollouts once through the cluster and evaluates every budget on
// a prefix of them.
PassRateEstimate estimate_pass_rates(const Task& task, std::shared_ptr<const policy::PolicyHandle> policy,
                                     const BudgetSpectrum& spectrum, orchestrator::Cluster& cluster,
                                     const EstimateOptions& opts = {});

inline const std::string kRuleCycle = "cycle";
inline const std::string kRuleNoOp = "no_op";
inline const std::string kRulePostSuccess = "post_success_redundancy";
inline const std::string kRuleInfeasible = "infeasible_collapse";

struct DenoiseReport {
  std::string trajectory_id;
  std::string task_id;
  std::vector<std::size_t> masked_indices;
  std::map<std::size_t, std::string> rules_fired;
};

struct DenoiseOptions {
  bool post_success_redundancy = false;  // needs the task for replay
};

struct DenoiseResult {
  Trajectory trajectory;
  DenoiseReport report;
};

// Masks are recomputed from the recorded state hashes, ignoring any masks
// already present. A revisited pre-state masks the detour between the two
// visits (a one-step detour is a no-op); spans made only of `wait` are
// exempt and `terminate` is never masked. Infeasible trajectories keep only
// their final terminate=failure step.
DenoiseResult denoise(const Trajectory& traj, bool feasible, const DenoiseOptions& opts = {}, const Task* task = nullptr);

nlohmann::json report_to_json(const DenoiseReport& r);

}  // namespace evoloop::rft
