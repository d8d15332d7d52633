#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "evoloop/model.hpp"

namespace evoloop {

struct TaskStats {
  std::size_t successes = 0;
  std::size_t failures = 0;
  bool operator==(const TaskStats&) const = default;
};

struct PoolRecord {
  std::size_t id = 0;  // append order
  Trajectory trajectory;
};

class RegistryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Append-only experience store shared by rollout workers. Appends and the
// per-task stats update happen under one lock, so a reader never sees a
// count that disagrees with the stats.
class ExperiencePool {
 public:
  ExperiencePool() = default;
  explicit ExperiencePool(const std::vector<Task>& tasks);

  void register_task(const std::string& task_id);
  bool knows(const std::string& task_id) const;

  void append(Trajectory traj);

  std::size_t size() const;
  std::map<std::string, TaskStats> stats() const;
  std::vector<PoolRecord> snapshot() const;

  // min(n, size()) records drawn uniformly without replacement.
  std::vector<PoolRecord> sample_batch(std::size_t n, std::uint64_t seed) const;

 private:
  mutable std::mutex mu_;
  std::set<std::string> registry_;
  std::vector<PoolRecord> records_;
  std::map<std::string, TaskStats> stats_;
};

}  // namespace evoloop
