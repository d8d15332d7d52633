#include "evoloop/pool.hpp"

#include <numeric>

#include "evoloop/rng.hpp"

namespace evoloop {

ExperiencePool::ExperiencePool(const std::vector<Task>& tasks) {
  for (const auto& t : tasks) registry_.insert(t.id);
}

void ExperiencePool::register_task(const std::string& task_id) {
  std::lock_guard lock(mu_);
  registry_.insert(task_id);
}

bool ExperiencePool::knows(const std::string& task_id) const {
  std::lock_guard lock(mu_);
  return registry_.count(task_id) > 0;
}

void ExperiencePool::append(Trajectory traj) {
  std::lock_guard lock(mu_);
  if (!registry_.count(traj.task_id)) throw RegistryError("unknown task_id '" + traj.task_id + "'");
  auto& st = stats_[traj.task_id];
  (traj.reward == 1 ? st.successes : st.failures)++;
  records_.push_back({records_.size(), std::move(traj)});
}

std::size_t ExperiencePool::size() const {
  std::lock_guard lock(mu_);
  return records_.size();
}

std::map<std::string, TaskStats> ExperiencePool::stats() const {
  std::lock_guard lock(mu_);
  return stats_;
}

std::vector<PoolRecord> ExperiencePool::snapshot() const {
  std::lock_guard lock(mu_);
  return records_;
}

std::vector<PoolRecord> ExperiencePool::sample_batch(std::size_t n, std::uint64_t seed) const {
  if (n == 0) throw std::invalid_argument("sample_batch: n must be >= 1");
  std::vector<PoolRecord> all = snapshot();
  const std::size_t take = std::min(n, all.size());
  Rng rng(derive_seed(seed, "pool_sample"));
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + rng.index(all.size() - i);
    std::swap(all[i], all[j]);
  }
  all.resize(take);
  return all;
}

}  // namespace evoloop
