#pragma once

// Process-scale rollout infrastructure: immutable tool definitions,
// quota-bounded clusters with FIFO admission, and isolated sessions that
// each own their environment exclusively.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "evoloop/model.hpp"
#include "evoloop/policy.hpp"
#include "evoloop/pool.hpp"
#include "evoloop/sandbox.hpp"

namespace evoloop::orchestrator {

struct Tool {
  std::string name;
  std::string version;
  bool strict_keymap = true;
  bool stable_layout = true;
  std::set<std::string> api = {"reset", "step", "render"};
  bool operator==(const Tool&) const = default;
};

class OrchestratorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ToolRegistry {
 public:
  void register_tool(Tool tool);
  const Tool& get(const std::string& name, const std::string& version) const;
  bool contains(const std::string& name, const std::string& version) const;

 private:
  mutable std::mutex mu_;
  // std::map nodes are stable, so references handed out stay valid.
  std::map<std::pair<std::string, std::string>, Tool> tools_;
};

enum class SessionStatus { running, done, failed };

struct SessionSpec {
  Task task;
  std::shared_ptr<const policy::PolicyHandle> policy;
  std::size_t step_budget = 20;
  std::uint64_t seed = 0;
  sandbox::NoiseConfig noise;
  // Called before each environment step; used to inject latency in tests.
  std::function<void(std::size_t step)> on_step;
};

struct SessionResult {
  std::size_t session_id = 0;
  SessionStatus status = SessionStatus::running;
  std::optional<Trajectory> trajectory;
  std::string error;
};

class SessionFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Single-session rollout loop: render, build context, act, step, until
// terminate or the step budget; then score the terminal state. Unparseable
// policy output is recorded as a `wait` no-op with a logged violation.
// Throws SessionFailure when the environment breaks an invariant.
Trajectory run_rollout(const SessionSpec& spec);

// Cap from EVOLOOP_MAX_SESSIONS, or nullopt when unset/invalid.
std::optional<std::size_t> env_session_cap();

class Cluster {
 public:
  Cluster(std::string id, Tool tool, std::size_t quota, ExperiencePool* pool,
          std::shared_ptr<std::counting_semaphore<>> global_slots);
  ~Cluster();
  Cluster(const Cluster&) = delete;
  Cluster& operator=(const Cluster&) = delete;

  std::future<SessionResult> submit(SessionSpec spec);

  const std::string& id() const { return id_; }
  const Tool& tool() const { return tool_; }
  std::size_t quota() const { return quota_; }
  std::size_t active() const { return active_.load(); }
  std::size_t peak_active() const { return peak_.load(); }
  std::size_t completed() const { return completed_.load(); }
  std::size_t queued() const;

 private:
  struct Pending {
    std::size_t session_id;
    SessionSpec spec;
    std::promise<SessionResult> promise;
  };

  void worker_loop();
  SessionResult execute(std::size_t session_id, const SessionSpec& spec);

  std::string id_;
  Tool tool_;
  std::size_t quota_;
  ExperiencePool* pool_;
  std::shared_ptr<std::counting_semaphore<>> global_slots_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Pending> queue_;
  bool stopping_ = false;
  std::size_t next_session_ = 0;
  std::atomic<std::size_t> active_{0};
  std::atomic<std::size_t> peak_{0};
  std::atomic<std::size_t> completed_{0};
  std::vector<std::thread> workers_;
};

struct GroupResult {
  std::string task_id;
  std::string domain;
  std::string instruction;
  std::vector<Trajectory> trajectories;  // by rollout index
  std::vector<std::size_t> failed;       // indices of failed sessions
  bool partial() const { return !failed.empty(); }
};

nlohmann::json group_to_json(const GroupResult& g);
GroupResult group_from_json(const nlohmann::json& j);
std::vector<GroupResult> load_groups(const std::string& path);
void save_groups(const std::string& path, const std::vector<GroupResult>& groups);

class Orchestrator {
 public:
  explicit Orchestrator(ExperiencePool* pool = nullptr, std::optional<std::size_t> global_cap = env_session_cap());

  void register_tool(Tool tool) { registry_.register_tool(std::move(tool)); }
  const ToolRegistry& registry() const { return registry_; }

  // Effective quota is min(quota, global cap).
  Cluster& provision_cluster(const std::string& name, const std::string& version, std::size_t quota);

  GroupResult run_group(Cluster& cluster, const Task& task, std::shared_ptr<const policy::PolicyHandle> policy,
                        std::size_t group_size, std::size_t step_budget, const std::vector<std::uint64_t>& seeds,
                        const sandbox::NoiseConfig& noise = {});

 private:
  ToolRegistry registry_;
  ExperiencePool* pool_;
  std::shared_ptr<std::counting_semaphore<>> global_slots_;
  std::optional<std::size_t> global_cap_;
  std::mutex mu_;
  std::vector<std::unique_ptr<Cluster>> clusters_;
};

}  // namespace evoloop::orchestrator
