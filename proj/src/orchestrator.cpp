#include "evoloop/orchestrator.hpp"

#include <cstdlib>
#include <fstream>

#include "evoloop/reward.hpp"

namespace evoloop::orchestrator {

using nlohmann::json;

void ToolRegistry::register_tool(Tool tool) {
  std::lock_guard lock(mu_);
  auto key = std::make_pair(tool.name, tool.version);
  if (tools_.count(key)) throw OrchestratorError("tool " + tool.name + "@" + tool.version + " already registered");
  tools_.emplace(std::move(key), std::move(tool));
}

const Tool& ToolRegistry::get(const std::string& name, const std::string& version) const {
  std::lock_guard lock(mu_);
  auto it = tools_.find({name, version});
  if (it == tools_.end()) throw OrchestratorError("unknown tool " + name + "@" + version);
  return it->second;
}

bool ToolRegistry::contains(const std::string& name, const std::string& version) const {
  std::lock_guard lock(mu_);
  return tools_.count({name, version}) > 0;
}

Trajectory run_rollout(const SessionSpec& spec) {
  if (!spec.policy) throw SessionFailure("session has no policy");
  const Task& task = spec.task;
  sandbox::NoiseConfig noise = spec.noise;
  noise.seed = derive_seed(spec.seed, "noise") ^ spec.noise.seed;

  sandbox::EnvState state = sandbox::reset(task, spec.seed);
  Observation obs = sandbox::render(state);
  Trajectory traj;
  traj.id = task.id + "#" + std::to_string(spec.seed);
  traj.task_id = task.id;
  traj.instruction = task.instruction;
  traj.domain = task.domain;
  traj.seed = spec.seed;

  Rng rng(derive_seed(spec.seed, "policy"));
  policy::EpisodeState episode;
  for (std::size_t t = 0; t < spec.step_budget; ++t) {
    const Context ctx = build_context(traj, t);
    policy::PolicyOutput out = policy::act(*spec.policy, ctx, obs, rng, episode);
    Step step;
    step.observation = obs;
    step.reasoning = out.reasoning;
    step.state_hash = sandbox::state_hash(state);
    step.relaxed_hash = sandbox::state_hash(state, sandbox::HashMode::relaxed);
    try {
      step.action = parse_action(out.action_text);
    } catch (const ActionParseError& e) {
      step.action = Action::wait(1.0);
      traj.violations.push_back("step " + std::to_string(t) + ": unparseable action '" + out.action_text + "': " + e.what());
    }
    step.response = std::move(out.response);
    if (spec.on_step) spec.on_step(t);

    auto result = sandbox::step(state, step.action, noise);
    if (auto breach = sandbox::check_invariants(result.state))
      throw SessionFailure("environment invariant violated at step " + std::to_string(t) + ": " + *breach);
    traj.steps.push_back(std::move(step));
    state = std::move(result.state);
    obs = std::move(result.observation);
    if (result.done) break;
  }
  traj.terminal_state_hash = sandbox::state_hash(state);
  traj.terminal_relaxed_hash = sandbox::state_hash(state, sandbox::HashMode::relaxed);
  traj.reward = evaluate_reward(task.validator, state);
  return traj;
}

std::optional<std::size_t> env_session_cap() {
  const char* raw = std::getenv("EVOLOOP_MAX_SESSIONS");
  if (!raw || !*raw) return std::nullopt;
  try {
    const long v = std::stol(raw);
    if (v >= 1) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

Cluster::Cluster(std::string id, Tool tool, std::size_t quota, ExperiencePool* pool,
                 std::shared_ptr<std::counting_semaphore<>> global_slots)
    : id_(std::move(id)), tool_(std::move(tool)), quota_(quota), pool_(pool), global_slots_(std::move(global_slots)) {
  if (quota_ == 0) throw OrchestratorError("cluster quota must be >= 1");
  workers_.reserve(quota_);
  for (std::size_t i = 0; i < quota_; ++i) workers_.emplace_back([this] { worker_loop(); });
}

Cluster::~Cluster() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  for (auto& w : workers_) w.join();
}

std::future<SessionResult> Cluster::submit(SessionSpec spec) {
  std::promise<SessionResult> promise;
  auto fut = promise.get_future();
  {
    std::lock_guard lock(mu_);
    if (stopping_) throw OrchestratorError("cluster is shutting down");
    queue_.push_back({next_session_++, std::move(spec), std::move(promise)});
  }
  cv_.notify_one();
  return fut;
}

std::size_t Cluster::queued() const {
  std::lock_guard lock(mu_);
  return queue_.size();
}

void Cluster::worker_loop() {
  for (;;) {
    Pending job;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      job = std::move(queue_.front());
      queue_.pop_front();
    }
    if (global_slots_) global_slots_->acquire();
    const std::size_t now = ++active_;
    std::size_t peak = peak_.load();
    while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
    }
    SessionResult result = execute(job.session_id, job.spec);
    --active_;
    if (global_slots_) global_slots_->release();
    ++completed_;
    job.promise.set_value(std::move(result));
  }
}

SessionResult Cluster::execute(std::size_t session_id, const SessionSpec& spec) {
  SessionResult r;
  r.session_id = session_id;
  sandbox::NoiseConfig noise = spec.noise;
  noise.strict_keymap = noise.strict_keymap && tool_.strict_keymap;
  noise.stable_layout = noise.stable_layout && tool_.stable_layout;
  SessionSpec effective = spec;
  effective.noise = noise;
  try {
    Trajectory traj = run_rollout(effective);
    if (pool_) pool_->append(traj);
    r.trajectory = std::move(traj);
    r.status = SessionStatus::done;
  } catch (const std::exception& e) {
    r.status = SessionStatus::failed;
    r.error = e.what();
  }
  return r;
}

Orchestrator::Orchestrator(ExperiencePool* pool, std::optional<std::size_t> global_cap)
    : pool_(pool), global_cap_(global_cap) {
  if (global_cap_) global_slots_ = std::make_shared<std::counting_semaphore<>>(static_cast<std::ptrdiff_t>(*global_cap_));
}

Cluster& Orchestrator::provision_cluster(const std::string& name, const std::string& version, std::size_t quota) {
  const Tool& tool = registry_.get(name, version);
  if (quota == 0) throw OrchestratorError("cluster quota must be >= 1");
  const std::size_t effective = global_cap_ ? std::min(quota, *global_cap_) : quota;
  std::lock_guard lock(mu_);
  const std::string id = name + "@" + version + "/" + std::to_string(clusters_.size());
  clusters_.push_back(std::make_unique<Cluster>(id, tool, effective, pool_, global_slots_));
  return *clusters_.back();
}

GroupResult Orchestrator::run_group(Cluster& cluster, const Task& task, std::shared_ptr<const policy::PolicyHandle> policy,
                                    std::size_t group_size, std::size_t step_budget,
                                    const std::vector<std::uint64_t>& seeds, const sandbox::NoiseConfig& noise) {
  if (group_size < 2) throw OrchestratorError("group size must be >= 2");
  if (seeds.size() != group_size) throw OrchestratorError("need one seed per group member");
  std::set<std::uint64_t> distinct(seeds.begin(), seeds.end());
  if (distinct.size() != seeds.size()) throw OrchestratorError("group seeds must be distinct");
  std::vector<std::future<SessionResult>> futures;
  futures.reserve(group_size);
  for (std::size_t i = 0; i < group_size; ++i) {
    SessionSpec spec;
    spec.task = task;
    spec.policy = policy;
    spec.step_budget = step_budget;
    spec.seed = seeds[i];
    spec.noise = noise;
    futures.push_back(cluster.submit(std::move(spec)));
  }
  GroupResult g;
  g.task_id = task.id;
  g.domain = task.domain;
  g.instruction = task.instruction;
  for (std::size_t i = 0; i < group_size; ++i) {
    SessionResult r = futures[i].get();
    if (r.status == SessionStatus::done) g.trajectories.push_back(std::move(*r.trajectory));
    else g.failed.push_back(i);
  }
  return g;
}

json group_to_json(const GroupResult& g) {
  return {{"task_id", g.task_id}, {"domain", g.domain},  {"instruction", g.instruction},
          {"partial", g.partial()}, {"failed", g.failed}, {"trajectories", g.trajectories}};
}

GroupResult group_from_json(const json& j) {
  GroupResult g;
  g.task_id = j.at("task_id").get<std::string>();
  g.domain = j.value("domain", "");
  g.instruction = j.value("instruction", "");
  g.failed = j.value("failed", std::vector<std::size_t>{});
  g.trajectories = j.at("trajectories").get<std::vector<Trajectory>>();
  return g;
}

std::vector<GroupResult> load_groups(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open group file '" + path + "'");
  std::vector<GroupResult> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(group_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_groups(const std::string& path, const std::vector<GroupResult>& groups) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  for (const auto& g : groups) out << group_to_json(g).dump() << '\n';
}

}  // namespace evoloop::orchestrator
