#include "evoloop/cli.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "evoloop/coldstart.hpp"
#include "evoloop/reward.hpp"
#include "evoloop/rng.hpp"

namespace evoloop::cli {

using nlohmann::json;
namespace fs = std::filesystem;

json config_to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"count", c.count},
          {"max_rounds", c.max_rounds},
          {"group", c.group},
          {"budget", c.budget},
          {"cluster_quota", c.cluster_quota},
          {"spectrum", c.spectrum},
          {"theta_sem", c.theta_sem},
          {"delta", c.delta},
          {"k", c.k},
          {"reference_p", c.reference_p},
          {"eps_low", c.eps_low},
          {"eps_high", c.eps_high},
          {"beta_kl", c.beta_kl},
          {"dpo_beta", c.dpo_beta},
          {"window", c.window},
          {"context_window", c.context_window},
          {"lr", c.lr},
          {"post_success", c.post_success},
          {"noise", sandbox::noise_to_json(c.noise)},
          {"taxonomy", c.taxonomy},
          {"benchmark", c.benchmark},
          {"tasks", c.tasks}};
}

RunConfig config_from_json(const json& j, const RunConfig& base) {
  if (!j.is_object()) throw CliError("config must be a JSON object");
  RunConfig c = base;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "count") c.count = v.get<std::size_t>();
      else if (key == "max_rounds") c.max_rounds = v.get<std::size_t>();
      else if (key == "group") c.group = v.get<std::size_t>();
      else if (key == "budget") c.budget = v.get<std::size_t>();
      else if (key == "cluster_quota") c.cluster_quota = v.get<std::size_t>();
      else if (key == "spectrum") c.spectrum = v.get<std::string>();
      else if (key == "theta_sem") c.theta_sem = v.get<double>();
      else if (key == "delta") c.delta = v.get<double>();
      else if (key == "k") c.k = v.get<std::size_t>();
      else if (key == "reference_p") c.reference_p = v.get<double>();
      else if (key == "eps_low") c.eps_low = v.get<double>();
      else if (key == "eps_high") c.eps_high = v.get<double>();
      else if (key == "beta_kl") c.beta_kl = v.get<double>();
      else if (key == "dpo_beta") c.dpo_beta = v.get<double>();
      else if (key == "window") c.window = v.get<std::size_t>();
      else if (key == "context_window") c.context_window = v.get<std::size_t>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "post_success") c.post_success = v.get<bool>();
      else if (key == "noise") c.noise = sandbox::noise_from_json(v);
      else if (key == "taxonomy") c.taxonomy = v.get<std::string>();
      else if (key == "benchmark") c.benchmark = v.get<std::string>();
      else if (key == "tasks") c.tasks = v.get<std::string>();
      else throw CliError("unknown config key '" + key + "'");
    } catch (const json::exception& e) {
      throw CliError("config key '" + key + "': " + e.what());
    } catch (const std::invalid_argument& e) {
      throw CliError("config key '" + key + "': " + e.what());
    }
  }
  if (c.group < 2) throw CliError("group must be >= 2");
  if (c.budget == 0) throw CliError("budget must be >= 1");
  if (c.cluster_quota == 0) throw CliError("cluster_quota must be >= 1");
  if (c.k == 0) throw CliError("k must be >= 1");
  if (!(c.reference_p >= 0.0 && c.reference_p <= 1.0)) throw CliError("reference_p must be in [0,1]");
  if (!(c.theta_sem >= 0.0 && c.theta_sem <= 1.0)) throw CliError("theta_sem must be in [0,1]");
  if (!(c.delta >= 0.0 && c.delta <= 1.0)) throw CliError("delta must be in [0,1]");
  if (!(c.dpo_beta > 0.0)) throw CliError("dpo_beta must be > 0");
  try {
    stepo::check_clip({c.eps_low, c.eps_high, c.beta_kl});
    rft::parse_spectrum(c.spectrum);
  } catch (const std::exception& e) {
    throw CliError(e.what());
  }
  return c;
}

RunConfig load_config(const std::string& path) { return config_from_json(read_json(path)); }

std::uint64_t stage_seed(std::uint64_t root, const std::string& stage) { return derive_seed(root, stage); }

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CliError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw CliError("'" + path + "': " + e.what());
  }
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw CliError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

void write_jsonl(const std::string& path, const std::vector<json>& lines) {
  std::ofstream out(path);
  if (!out) throw CliError("cannot write '" + path + "'");
  for (const auto& l : lines) out << l.dump() << '\n';
}

std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CliError("cannot open '" + path + "'");
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::parse_error& e) {
      throw CliError("'" + path + "' line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

namespace {

orchestrator::Tool desktop_tool(const sandbox::NoiseConfig& noise) {
  orchestrator::Tool t;
  t.name = "desktop";
  t.version = "1";
  t.strict_keymap = noise.strict_keymap;
  t.stable_layout = noise.stable_layout;
  return t;
}

orchestrator::Cluster& make_cluster(orchestrator::Orchestrator& orch, const RunConfig& cfg) {
  orch.register_tool(desktop_tool(cfg.noise));
  return orch.provision_cluster("desktop", "1", cfg.cluster_quota);
}

std::map<std::string, Task> task_map(const std::vector<Task>& tasks) {
  std::map<std::string, Task> m;
  for (const auto& t : tasks) m.emplace(t.id, t);
  return m;
}

}  // namespace

SynthOutput synth_stage(const RunConfig& cfg, const synthesis::Taxonomy& tax, const std::vector<Task>& benchmark,
                        std::shared_ptr<const policy::PolicyHandle> reference) {
  const auto registry = synthesis::default_registry();
  synthesis::validate_taxonomy(tax, registry);
  const auto corpus =
      synthesis::synthesize_corpus(tax, registry, {cfg.count, cfg.max_rounds, stage_seed(cfg.seed, "synthesis")});

  std::vector<Task> generated;
  json generation = json::array();
  for (const auto& o : corpus.accepted) {
    generated.push_back(o.task);
    generation.push_back({{"task_id", o.task.id}, {"accepted", true}, {"rounds", o.rounds}});
  }
  json rejected = json::array();
  for (const auto& o : corpus.rejected)
    rejected.push_back({{"domain", o.task.domain}, {"rounds", o.rounds}, {"reason", o.failure_reason}});

  const auto decon = synthesis::decontaminate(generated, benchmark, {cfg.theta_sem});
  json removals = json::array();
  for (const auto& r : decon.removed) removals.push_back(synthesis::removal_to_json(r));
  json scores = json::array();
  for (const auto& s : decon.scores)
    scores.push_back({{"task_id", s.task_id}, {"max_similarity", s.max_similarity}, {"benchmark_id", s.benchmark_id}});

  if (!reference) {
    policy::PolicyHandle h;
    h.impl = policy::StochasticScriptedPolicy{policy::solution_script(decon.kept), cfg.reference_p};
    reference = std::make_shared<const policy::PolicyHandle>(std::move(h));
  }
  orchestrator::Orchestrator orch;
  auto& cluster = make_cluster(orch, cfg);
  const auto cons = synthesis::consistency_filter(decon.kept, reference, cluster,
                                                  {cfg.k, cfg.delta, cfg.budget, stage_seed(cfg.seed, "consistency")});
  json records = json::array();
  for (const auto& r : cons.records) records.push_back(synthesis::consistency_record_to_json(r));

  SynthOutput out;
  out.tasks = cons.kept;
  out.review = cons.flagged;
  out.qa_report = {{"requested", cfg.count},
                   {"generated", generated.size()},
                   {"kept", cons.kept.size()},
                   {"generation", generation},
                   {"rejected_drafts", rejected},
                   {"decontamination", {{"theta_sem", cfg.theta_sem}, {"removed", removals}, {"scores", scores}}},
                   {"consistency", {{"k", cfg.k}, {"delta", cfg.delta}, {"records", records}}}};
  return out;
}

RolloutOutput rollout_stage(const RunConfig& cfg, const std::vector<Task>& tasks,
                            std::shared_ptr<const policy::PolicyHandle> policy) {
  ExperiencePool pool(tasks);
  orchestrator::Orchestrator orch(&pool);
  auto& cluster = make_cluster(orch, cfg);
  const std::uint64_t root = stage_seed(cfg.seed, "rollout");
  RolloutOutput out;
  json per_task = json::array();
  std::size_t sessions = 0, failed = 0;
  for (const auto& task : tasks) {
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < cfg.group; ++i) seeds.push_back(derive_seed(root, "session:" + task.id, i));
    auto g = orch.run_group(cluster, task, policy, cfg.group, cfg.budget, seeds, cfg.noise);
    std::size_t wins = 0;
    for (const auto& t : g.trajectories) wins += t.reward == 1;
    sessions += cfg.group;
    failed += g.failed.size();
    const double rate = g.trajectories.empty() ? 0.0 : static_cast<double>(wins) / static_cast<double>(g.trajectories.size());
    per_task.push_back({{"task_id", task.id}, {"completed", g.trajectories.size()}, {"failed", g.failed.size()}, {"pass_rate", rate}});
    out.groups.push_back(std::move(g));
  }
  out.peak_concurrency = cluster.peak_active();
  out.metrics = {{"sessions_run", sessions}, {"sessions_failed", failed}, {"cluster_quota", cluster.quota()}, {"tasks", per_task}};
  return out;
}

std::vector<Trajectory> flatten_groups(const std::vector<orchestrator::GroupResult>& groups) {
  std::vector<Trajectory> out;
  for (const auto& g : groups) out.insert(out.end(), g.trajectories.begin(), g.trajectories.end());
  return out;
}

json budget_stage(const RunConfig& cfg, const std::vector<Task>& tasks, std::shared_ptr<const policy::PolicyHandle> policy) {
  const auto spectrum = rft::parse_spectrum(cfg.spectrum);
  orchestrator::Orchestrator orch;
  auto& cluster = make_cluster(orch, cfg);
  json entries = json::array();
  for (const auto& task : tasks) {
    const auto est = rft::estimate_pass_rates(task, policy, spectrum, cluster, {cfg.budget, stage_seed(cfg.seed, "budget")});
    json e = {{"task_id", task.id}, {"estimated", est.estimated}};
    if (!est.estimated) {
      e["error"] = est.error;
    } else {
      json sr = json::object();
      for (const auto& [k, v] : est.sr) sr[std::to_string(k)] = v;
      const auto choice = rft::select_budget(est.sr, spectrum);
      e["sr"] = sr;
      e["k"] = choice.k;
      e["index"] = choice.index;
      e["satisfied"] = choice.satisfied;
    }
    entries.push_back(std::move(e));
  }
  return {{"spectrum", rft::format_spectrum(spectrum)}, {"tasks", entries}};
}

DenoiseOutput denoise_stage(const std::vector<Trajectory>& pool, const std::vector<Task>& tasks,
                            const rft::DenoiseOptions& opts) {
  const auto by_id = task_map(tasks);
  DenoiseOutput out;
  json reports = json::array();
  std::size_t skipped = 0, masked = 0;
  for (const auto& traj : pool) {
    auto it = by_id.find(traj.task_id);
    if (traj.reward != 1 || it == by_id.end()) {
      ++skipped;
      continue;
    }
    auto r = rft::denoise(traj, it->second.feasible, opts, &it->second);
    masked += r.report.masked_indices.size();
    reports.push_back(rft::report_to_json(r.report));
    out.trajectories.push_back(std::move(r.trajectory));
  }
  out.report = {{"denoised", out.trajectories.size()}, {"skipped", skipped}, {"masked_steps", masked}, {"trajectories", reports}};
  return out;
}

PairsOutput pairs_stage(const std::vector<Trajectory>& failures, const std::vector<Trajectory>& successes,
                        const std::vector<Task>& tasks, const preference::PairOptions& opts) {
  const auto by_id = task_map(tasks);
  std::vector<const Trajectory*> refs;
  for (const auto& s : successes)
    if (s.reward == 1) refs.push_back(&s);
  const auto provider = coldstart::template_provider();
  PairsOutput out;
  for (const auto& fail : failures) {
    if (fail.reward != 0) continue;
    const Trajectory* ref = preference::pick_reference(fail, refs, by_id);
    if (!ref) {
      out.skips.push_back({fail.id, "", 0, "no successful reference for this task or family"});
      continue;
    }
    auto it = by_id.find(fail.task_id);
    const Task* task = it == by_id.end() ? nullptr : &it->second;
    try {
      auto r = preference::construct_pairs(fail, *ref, provider, opts, task);
      for (auto& p : r.pairs) out.pairs.push_back(std::move(p));
      for (auto& s : r.skips) out.skips.push_back(std::move(s));
    } catch (const preference::DeviationError& e) {
      out.skips.push_back({fail.id, ref->id, 0, e.what()});
    }
  }
  return out;
}

json dpo_eval(const std::vector<preference::PreferencePair>& pairs, const policy::PolicyHandle& theta,
              const policy::PolicyHandle& ref, double beta) {
  json rows = json::array();
  std::map<std::string, std::pair<double, std::size_t>> by_paradigm;
  double total = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto t = preference::dpo_terms(theta, ref, pairs[i], beta);
    rows.push_back({{"index", i}, {"task_id", pairs[i].task_id}, {"paradigm", pairs[i].paradigm}, {"chosen_delta", t.chosen_delta},
                    {"rejected_delta", t.rejected_delta}, {"margin", t.margin}, {"loss", t.loss}});
    total += t.loss;
    correct += t.margin > 0.0;
    auto& agg = by_paradigm[pairs[i].paradigm];
    agg.first += t.loss;
    ++agg.second;
  }
  json paradigms = json::object();
  for (const auto& [name, agg] : by_paradigm)
    paradigms[name] = {{"pairs", agg.second}, {"mean_loss", agg.first / static_cast<double>(agg.second)}};
  const double n = static_cast<double>(pairs.size());
  return {{"beta", beta},
          {"pairs", pairs.size()},
          {"mean_loss", pairs.empty() ? 0.0 : total / n},
          {"preference_accuracy", pairs.empty() ? 0.0 : static_cast<double>(correct) / n},
          {"by_paradigm", paradigms},
          {"per_pair", rows}};
}

namespace {

bool usable(const orchestrator::GroupResult& g) { return g.trajectories.size() >= 2; }

}  // namespace

policy::PolicyHandle gradient_step(const std::vector<orchestrator::GroupResult>& groups, const policy::PolicyHandle& old,
                                   const stepo::ClipConfig& cfg, double lr) {
  if (!old.tabular()) throw CliError("policy update needs a tabular policy");
  policy::PolicyHandle theta = old;
  std::vector<double> sum(old.tabular()->logits().size(), 0.0);
  std::size_t n = 0;
  for (const auto& g : groups) {
    if (!usable(g)) continue;
    const auto grad = stepo::stepo_gradient(g.trajectories, old, old, old, cfg);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += grad[i];
    ++n;
  }
  if (n == 0) return theta;
  auto& logits = theta.tabular()->logits();
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += lr * sum[i] / static_cast<double>(n);
  return theta;
}

json stepo_stage(const std::vector<orchestrator::GroupResult>& groups, const policy::PolicyHandle& theta,
                 const policy::PolicyHandle& old, const policy::PolicyHandle& ref, const stepo::ClipConfig& cfg) {
  json rows = json::array();
  double j_sum = 0.0, grpo_sum = 0.0, clip_sum = 0.0, kl_sum = 0.0;
  std::size_t used = 0, skipped = 0, tokens = 0, stepo_tokens = 0, grpo_tokens = 0;
  for (const auto& g : groups) {
    if (!usable(g)) {
      ++skipped;
      rows.push_back({{"task_id", g.task_id}, {"skipped", "fewer than 2 completed trajectories"}});
      continue;
    }
    const auto scored = stepo::score_group(g.task_id, g.trajectories, theta, old, ref);
    const auto s = stepo::stepo_objective(scored, cfg);
    const auto b = stepo::grpo_trajectory_objective(scored, cfg);
    const double total = static_cast<double>(s.diag.total_tokens);
    rows.push_back({{"task_id", g.task_id},
                    {"trajectories", g.trajectories.size()},
                    {"partial", g.partial()},
                    {"J", s.J},
                    {"clip_fraction", s.diag.clip_fraction},
                    {"kl_mean", s.diag.kl_mean},
                    {"grpo_J", b.J},
                    {"stepo_coverage", static_cast<double>(s.diag.supervised_tokens) / total},
                    {"grpo_coverage", static_cast<double>(b.diag.supervised_tokens) / total},
                    {"stepo", stepo::diagnostics_to_json(s.diag)},
                    {"grpo", stepo::diagnostics_to_json(b.diag)}});
    j_sum += s.J;
    grpo_sum += b.J;
    clip_sum += s.diag.clip_fraction;
    kl_sum += s.diag.kl_mean;
    tokens += s.diag.total_tokens;
    stepo_tokens += s.diag.supervised_tokens;
    grpo_tokens += b.diag.supervised_tokens;
    ++used;
  }
  const double n = used ? static_cast<double>(used) : 1.0;
  const double t = tokens ? static_cast<double>(tokens) : 1.0;
  return {{"config", {{"eps_low", cfg.eps_low}, {"eps_high", cfg.eps_high}, {"beta_kl", cfg.beta_kl}}},
          {"groups", rows},
          {"aggregate",
           {{"groups", used},
            {"skipped", skipped},
            {"J_mean", j_sum / n},
            {"grpo_J_mean", grpo_sum / n},
            {"clip_fraction_mean", clip_sum / n},
            {"kl_mean", kl_sum / n},
            {"total_tokens", tokens},
            {"stepo_coverage", static_cast<double>(stepo_tokens) / t},
            {"grpo_coverage", static_cast<double>(grpo_tokens) / t}}}};
}

namespace {

std::string file_digest(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a64(ss.str()));
}

}  // namespace

PipelineResult run_pipeline(const RunConfig& cfg, const std::string& out_dir) {
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  PipelineResult res;
  json stages = json::array();
  json artifacts = json::object();
  auto record = [&](const std::string& name) { artifacts[name] = file_digest(dir / name); };
  std::string stage;

  std::vector<Task> tasks;
  RolloutOutput rollout;
  std::vector<Trajectory> pool;
  const stepo::ClipConfig clip{cfg.eps_low, cfg.eps_high, cfg.beta_kl};
  try {
    stage = "synth";
    if (cfg.tasks.empty()) {
      const auto tax = cfg.taxonomy.empty() ? synthesis::default_taxonomy() : synthesis::taxonomy_from_json(read_json(cfg.taxonomy));
      const auto bench = cfg.benchmark.empty() ? std::vector<Task>{} : load_tasks(cfg.benchmark);
      auto s = synth_stage(cfg, tax, bench);
      tasks = std::move(s.tasks);
      save_tasks((dir / "tasks.json").string(), tasks);
      write_json((dir / "qa_report.json").string(), s.qa_report);
      save_tasks((dir / "review.json").string(), s.review);
      record("tasks.json");
      record("qa_report.json");
      record("review.json");
      stages.push_back({{"name", stage}, {"status", "ok"}, {"tasks", tasks.size()}, {"flagged", s.review.size()}});
    } else {
      stages.push_back({{"name", stage}, {"status", "skipped"}, {"input", cfg.tasks}});
    }

    stage = "rollout";
    if (!cfg.tasks.empty()) {
      try {
        tasks = load_tasks(cfg.tasks);
      } catch (const std::exception& e) {
        throw CliError("cannot parse tasks '" + cfg.tasks + "': " + e.what());
      }
      save_tasks((dir / "tasks.json").string(), tasks);
      record("tasks.json");
    }
    if (tasks.empty()) throw CliError("no tasks to roll out");
    auto old = std::make_shared<const policy::PolicyHandle>(policy::tabular_from_solutions(tasks));
    rollout = rollout_stage(cfg, tasks, old);
    pool = flatten_groups(rollout.groups);
    save_trajectories((dir / "pool.jsonl").string(), pool);
    orchestrator::save_groups((dir / "groups.jsonl").string(), rollout.groups);
    record("pool.jsonl");
    record("groups.jsonl");
    stages.push_back({{"name", stage}, {"status", "ok"}, {"trajectories", pool.size()},
                      {"sessions_failed", rollout.metrics["sessions_failed"]}});

    stage = "budget";
    write_json((dir / "budgets.json").string(), budget_stage(cfg, tasks, old));
    record("budgets.json");
    stages.push_back({{"name", stage}, {"status", "ok"}});

    stage = "denoise";
    auto dn = denoise_stage(pool, tasks, {cfg.post_success});
    save_trajectories((dir / "rft.jsonl").string(), dn.trajectories);
    write_json((dir / "denoise_report.json").string(), dn.report);
    record("rft.jsonl");
    record("denoise_report.json");
    stages.push_back({{"name", stage}, {"status", "ok"}, {"trajectories", dn.trajectories.size()}});

    stage = "pairs";
    preference::PairOptions popts;
    popts.window = cfg.window;
    popts.context_window = cfg.context_window;
    auto pr = pairs_stage(pool, pool, tasks, popts);
    std::vector<json> lines;
    for (const auto& p : pr.pairs) lines.push_back(p);
    write_jsonl((dir / "pairs.jsonl").string(), lines);
    json skips = json::array();
    for (const auto& s : pr.skips) skips.push_back(preference::skip_to_json(s));
    write_json((dir / "pairs_skips.json").string(), skips);
    record("pairs.jsonl");
    record("pairs_skips.json");
    stages.push_back({{"name", stage}, {"status", "ok"}, {"pairs", pr.pairs.size()}, {"skipped", pr.skips.size()}});

    stage = "stepo";
    const auto theta = gradient_step(rollout.groups, *old, clip, cfg.lr);
    write_json((dir / "stepo_metrics.json").string(), stepo_stage(rollout.groups, theta, *old, *old, clip));
    record("stepo_metrics.json");
    stages.push_back({{"name", stage}, {"status", "ok"}});
    stage.clear();
  } catch (const std::exception& e) {
    res.exit_code = 1;
    res.failed_stage = stage;
    res.error = e.what();
    stages.push_back({{"name", stage}, {"status", "failed"}, {"error", res.error}});
  }

  json seeds = {{"root", cfg.seed}};
  for (const char* s : {"synthesis", "consistency", "rollout", "budget"}) seeds[s] = stage_seed(cfg.seed, s);
  res.manifest = {{"version", kVersion},
                  {"seeds", seeds},
                  {"config", config_to_json(cfg)},
                  {"stages", stages},
                  {"artifacts", artifacts},
                  {"failed_stage", res.failed_stage.empty() ? json(nullptr) : json(res.failed_stage)}};
  if (!res.error.empty()) res.manifest["error"] = res.error;
  write_json((dir / "run_manifest.json").string(), res.manifest);
  return res;
}

namespace {

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string widget_lines(const Observation& obs) {
  std::string out;
  for (const auto& w : obs.widgets) {
    if (w.kind == "cell" && w.text.empty() && !w.focused) continue;
    out += "    " + widget_label(w);
    if (!w.text.empty()) out += " = \"" + w.text + "\"";
    if (w.focused) out += " [focused]";
    out += '\n';
  }
  return out;
}

// -1 when the replay itself fails.
int replay_verdict(const Trajectory& traj, const Task& task) {
  try {
    auto s = sandbox::reset(task, traj.seed);
    for (const auto& st : traj.steps) s = sandbox::step(s, st.action).state;
    return evaluate_reward(task.validator, s);
  } catch (const std::exception&) {
    return -1;
  }
}

}  // namespace

void inspect_trajectory(std::ostream& os, const Trajectory& traj, const Task* task, ReportFormat fmt) {
  const int replay = task ? replay_verdict(traj, *task) : -1;
  const std::string verdict = traj.reward == 1 ? "PASS" : "FAIL";
  if (fmt == ReportFormat::text) {
    os << "trajectory " << traj.id << "  task " << traj.task_id << "  seed " << traj.seed << '\n';
    os << "instruction: " << traj.instruction << "\n\n";
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      const auto& s = traj.steps[t];
      os << "== frame " << t << (s.loss_mask ? "" : " [MASKED]") << " ==\n";
      os << "  state: " << s.state_hash << '\n';
      os << "  screen: " << coldstart::screen_summary(s.observation) << '\n' << widget_lines(s.observation);
      os << "  reasoning: " << (s.reasoning.empty() ? "(none)" : s.reasoning) << '\n';
      os << "  action: " << serialize_action(s.action) << '\n';
      os << "  loss_mask: " << (s.loss_mask ? 1 : 0) << '\n';
    }
    os << "\n-- verdict: " << verdict << " (reward " << traj.reward << ")\n";
    os << "   terminal state: " << traj.terminal_state_hash << '\n';
    if (replay >= 0) os << "   replay verdict: " << (replay == 1 ? "PASS" : "FAIL") << '\n';
    for (const auto& v : traj.violations) os << "   violation: " << v << '\n';
    return;
  }
  os << "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>" << html_escape(traj.id) << "</title>\n"
     << "<style>table{border-collapse:collapse}td,th{border:1px solid #999;padding:4px;vertical-align:top}"
     << "tr.masked{background:#eee;color:#777}</style></head><body>\n";
  os << "<h1>" << html_escape(traj.id) << "</h1>\n<p>" << html_escape(traj.instruction) << "</p>\n";
  os << "<table><tr><th>t</th><th>screen</th><th>reasoning</th><th>action</th><th>loss_mask</th><th>state</th></tr>\n";
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const auto& s = traj.steps[t];
    os << "<tr" << (s.loss_mask ? "" : " class=\"masked\"") << "><td>" << t << (s.loss_mask ? "" : " MASKED") << "</td><td><pre>"
       << html_escape(coldstart::screen_summary(s.observation) + "\n" + widget_lines(s.observation)) << "</pre></td><td>"
       << html_escape(s.reasoning) << "</td><td><code>" << html_escape(serialize_action(s.action)) << "</code></td><td>"
       << (s.loss_mask ? 1 : 0) << "</td><td><code>" << s.state_hash << "</code></td></tr>\n";
  }
  os << "</table>\n<p>verdict: <b>" << verdict << "</b> (reward " << traj.reward << ")";
  if (replay >= 0) os << ", replay verdict: " << (replay == 1 ? "PASS" : "FAIL");
  os << "</p>\n</body></html>\n";
}

void inspect_pair(std::ostream& os, const preference::PreferencePair& pair, ReportFormat fmt) {
  const std::string head = "pair " + pair.paradigm + "  task " + pair.task_id + "  t_star " + std::to_string(pair.t_star) +
                           "  fail " + pair.fail_id + "  ref " + pair.ref_id;
  if (fmt == ReportFormat::text) {
    auto row = [&](const std::string& l, const std::string& r) {
      std::string cell = l.size() > 48 ? l.substr(0, 45) + "..." : l;
      cell.resize(48, ' ');
      os << "  " << cell << " | " << r << '\n';
    };
    os << head << '\n';
    os << "screen: " << coldstart::screen_summary(pair.observation) << '\n' << widget_lines(pair.observation);
    row("CHOSEN", "REJECTED");
    row(serialize_action(pair.chosen.action), serialize_action(pair.rejected.action));
    os << "  chosen reasoning: " << pair.chosen.reasoning << '\n';
    os << "  rejected reasoning: " << (pair.rejected.reasoning.empty() ? "(none)" : pair.rejected.reasoning) << '\n';
    return;
  }
  os << "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>pair</title></head><body>\n<h1>" << html_escape(head)
     << "</h1>\n<pre>" << html_escape(coldstart::screen_summary(pair.observation) + "\n" + widget_lines(pair.observation))
     << "</pre>\n<table border=\"1\"><tr><th>chosen</th><th>rejected</th></tr>\n<tr><td>" << html_escape(pair.chosen.reasoning)
     << "</td><td>" << html_escape(pair.rejected.reasoning) << "</td></tr>\n<tr><td><code>"
     << html_escape(serialize_action(pair.chosen.action)) << "</code></td><td><code>"
     << html_escape(serialize_action(pair.rejected.action)) << "</code></td></tr>\n</table>\n</body></html>\n";
}

}  // namespace evoloop::cli
