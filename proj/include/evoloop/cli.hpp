#pragma once

// Stage drivers shared by the command-line tool and the end-to-end
// pipeline, the run configuration, and the read-only trajectory inspector.

#include <cstdint>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "evoloop/model.hpp"
#include "evoloop/orchestrator.hpp"
#include "evoloop/policy.hpp"
#include "evoloop/preference.hpp"
#include "evoloop/rft.hpp"
#include "evoloop/sandbox.hpp"
#include "evoloop/stepo.hpp"
#include "evoloop/synthesis.hpp"

namespace evoloop::cli {

inline constexpr const char* kVersion = "0.1.0";

class CliError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t count = 50;          // synthesized tasks
  std::size_t max_rounds = 3;      // synthesis retries per scenario
  std::size_t group = 8;           // rollouts per task
  std::size_t budget = 20;         // step budget per rollout
  std::size_t cluster_quota = 8;
  std::string spectrum = "4:0.75,8:0.5,16:0.25";
  double theta_sem = 0.8;
  double delta = 0.25;
  std::size_t k = 8;               // consistency rollouts per task
  double reference_p = 0.5;        // success rate of the consistency reference agent
  double eps_low = 0.2;
  double eps_high = 0.2;
  double beta_kl = 0.01;
  double dpo_beta = 0.1;
  std::size_t window = 2;          // alignment window w
  std::size_t context_window = kDefaultContextWindow;
  double lr = 0.5;                 // pipeline policy update step
  bool post_success = false;
  sandbox::NoiseConfig noise;
  std::string taxonomy;            // optional input files
  std::string benchmark;
  std::string tasks;               // when set, synthesis is skipped
};

nlohmann::json config_to_json(const RunConfig& c);
// Overlays j on base; unknown keys and ill-typed values raise CliError.
RunConfig config_from_json(const nlohmann::json& j, const RunConfig& base = {});
RunConfig load_config(const std::string& path);

// Named substreams of the root seed, one per stage.
std::uint64_t stage_seed(std::uint64_t root, const std::string& stage);

nlohmann::json read_json(const std::string& path);
void write_json(const std::string& path, const nlohmann::json& j);
void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& lines);
std::vector<nlohmann::json> read_jsonl(const std::string& path);

struct SynthOutput {
  std::vector<Task> tasks;
  nlohmann::json qa_report;
  std::vector<Task> review;  // flagged by the consistency filter
};

// Generates, decontaminates and consistency-filters a corpus. A null
// reference agent means a stochastic follower of each task's ground truth.
SynthOutput synth_stage(const RunConfig& cfg, const synthesis::Taxonomy& tax, const std::vector<Task>& benchmark,
                        std::shared_ptr<const policy::PolicyHandle> reference = nullptr);

struct RolloutOutput {
  std::vector<orchestrator::GroupResult> groups;
  nlohmann::json metrics;  // deterministic part only
  std::size_t peak_concurrency = 0;
};

RolloutOutput rollout_stage(const RunConfig& cfg, const std::vector<Task>& tasks,
                            std::shared_ptr<const policy::PolicyHandle> policy);
std::vector<Trajectory> flatten_groups(const std::vector<orchestrator::GroupResult>& groups);

nlohmann::json budget_stage(const RunConfig& cfg, const std::vector<Task>& tasks,
                            std::shared_ptr<const policy::PolicyHandle> policy);

struct DenoiseOutput {
  std::vector<Trajectory> trajectories;
  nlohmann::json report;
};

// Denoises every successful trajectory; failures are counted and skipped.
DenoiseOutput denoise_stage(const std::vector<Trajectory>& pool, const std::vector<Task>& tasks,
                            const rft::DenoiseOptions& opts = {});

struct PairsOutput {
  std::vector<preference::PreferencePair> pairs;
  std::vector<preference::SkipRecord> skips;
};

// Pairs every failed trajectory with a reference picked from `successes`.
PairsOutput pairs_stage(const std::vector<Trajectory>& failures, const std::vector<Trajectory>& successes,
                        const std::vector<Task>& tasks, const preference::PairOptions& opts);

nlohmann::json dpo_eval(const std::vector<preference::PreferencePair>& pairs, const policy::PolicyHandle& theta,
                        const policy::PolicyHandle& ref, double beta);

// One ascent step on the mean step-level gradient over all usable groups.
policy::PolicyHandle gradient_step(const std::vector<orchestrator::GroupResult>& groups, const policy::PolicyHandle& old,
                                   const stepo::ClipConfig& cfg, double lr);

// Per-group objective, GRPO baseline and token coverage, plus aggregates.
nlohmann::json stepo_stage(const std::vector<orchestrator::GroupResult>& groups, const policy::PolicyHandle& theta,
                           const policy::PolicyHandle& old, const policy::PolicyHandle& ref, const stepo::ClipConfig& cfg);

struct PipelineResult {
  int exit_code = 0;
  std::string failed_stage;
  std::string error;
  nlohmann::json manifest;
};

// synth -> rollout -> budget -> denoise -> pairs -> stepo, artifacts in
// out_dir, run_manifest.json last (also written on failure).
PipelineResult run_pipeline(const RunConfig& cfg, const std::string& out_dir);

enum class ReportFormat { text, html };

void inspect_trajectory(std::ostream& os, const Trajectory& traj, const Task* task, ReportFormat fmt);
void inspect_pair(std::ostream& os, const preference::PreferencePair& pair, ReportFormat fmt);

}  // namespace evoloop::cli
