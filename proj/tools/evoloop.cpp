#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "evoloop/cli.hpp"
#include "evoloop/coldstart.hpp"
#include "evoloop/orchestrator.hpp"

using nlohmann::json;
namespace fs = std::filesystem;
using namespace evoloop;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out_dir;
};

cli::RunConfig base_config(const Globals& g) {
  cli::RunConfig c = g.config.empty() ? cli::RunConfig{} : cli::load_config(g.config);
  if (g.seed) c.seed = *g.seed;
  return c;
}

// Relative output paths land in --out-dir.
std::string out_path(const Globals& g, const std::string& p) {
  if (g.out_dir.empty() || fs::path(p).is_absolute()) return p;
  fs::create_directories(g.out_dir);
  return (fs::path(g.out_dir) / p).string();
}

template <typename T>
void override_if(const CLI::Option* opt, T& field, const T& value) {
  if (opt->count() > 0) field = value;
}

policy::PolicyHandle policy_arg(const std::string& spec, const std::vector<Task>& tasks, const std::vector<Action>& seen = {}) {
  return policy::load_policy(spec, tasks, seen);
}

std::vector<Task> optional_tasks(const std::string& path) { return path.empty() ? std::vector<Task>{} : load_tasks(path); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-evolving computer-use agent training loop on a desktop micro-environment"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Root seed");
  app.add_option("--config", g.config, "Run configuration JSON")->check(CLI::ExistingFile);
  app.add_option("--out-dir", g.out_dir, "Directory for relative output paths");

  std::function<void()> run;

  // synth
  auto* synth = app.add_subcommand("synth", "Synthesize, decontaminate and consistency-filter tasks");
  std::string s_tax, s_bench, s_out = "tasks.json", s_qa = "qa_report.json", s_review = "review.json", s_agent;
  std::size_t s_count = 0;
  synth->add_option("--taxonomy", s_tax, "Taxonomy JSON (default: built-in)");
  auto* s_count_opt = synth->add_option("--count", s_count, "Tasks to generate");
  synth->add_option("--benchmark", s_bench, "Benchmark task JSON to decontaminate against");
  synth->add_option("--out", s_out, "Task corpus output");
  synth->add_option("--qa-report", s_qa, "QA report output");
  synth->add_option("--review", s_review, "Flagged tasks output");
  synth->add_option("--reference-agent", s_agent, "Policy spec for the consistency filter");
  synth->callback([&] {
    auto cfg = base_config(g);
    override_if(s_count_opt, cfg.count, s_count);
    if (!s_tax.empty()) cfg.taxonomy = s_tax;
    if (!s_bench.empty()) cfg.benchmark = s_bench;
    run = [&, cfg] {
      const auto tax = cfg.taxonomy.empty() ? synthesis::default_taxonomy() : synthesis::taxonomy_from_json(cli::read_json(cfg.taxonomy));
      const auto bench = optional_tasks(cfg.benchmark);
      std::shared_ptr<const policy::PolicyHandle> agent;
      if (!s_agent.empty()) agent = std::make_shared<const policy::PolicyHandle>(policy::load_policy(s_agent));
      const auto out = cli::synth_stage(cfg, tax, bench, agent);
      save_tasks(out_path(g, s_out), out.tasks);
      cli::write_json(out_path(g, s_qa), out.qa_report);
      save_tasks(out_path(g, s_review), out.review);
      std::cout << "kept " << out.tasks.size() << " tasks, flagged " << out.review.size() << "\n";
    };
  });

  // rollout
  auto* rollout = app.add_subcommand("rollout", "Run G rollouts per task through a quota-bounded cluster");
  std::string r_tasks, r_policy, r_out = "pool.jsonl", r_groups = "groups.jsonl", r_metrics = "rollout_metrics.json";
  std::size_t r_quota = 0, r_group = 0, r_budget = 0;
  rollout->add_option("--tasks", r_tasks, "Task corpus")->required();
  rollout->add_option("--policy", r_policy, "Policy spec")->required();
  auto* r_quota_opt = rollout->add_option("--cluster-quota", r_quota, "Concurrent sessions");
  auto* r_group_opt = rollout->add_option("--group", r_group, "Rollouts per task");
  auto* r_budget_opt = rollout->add_option("--budget", r_budget, "Step budget per rollout");
  rollout->add_option("--out", r_out, "Trajectory JSONL output");
  rollout->add_option("--groups-out", r_groups, "Group JSONL output");
  rollout->add_option("--metrics", r_metrics, "Metrics JSON output");
  rollout->callback([&] {
    auto cfg = base_config(g);
    override_if(r_quota_opt, cfg.cluster_quota, r_quota);
    override_if(r_group_opt, cfg.group, r_group);
    override_if(r_budget_opt, cfg.budget, r_budget);
    run = [&, cfg] {
      const auto tasks = load_tasks(r_tasks);
      auto pol = std::make_shared<const policy::PolicyHandle>(policy_arg(r_policy, tasks));
      auto out = cli::rollout_stage(cfg, tasks, pol);
      save_trajectories(out_path(g, r_out), cli::flatten_groups(out.groups));
      orchestrator::save_groups(out_path(g, r_groups), out.groups);
      out.metrics["peak_concurrency"] = out.peak_concurrency;
      cli::write_json(out_path(g, r_metrics), out.metrics);
      std::cout << "sessions " << out.metrics["sessions_run"] << ", peak concurrency " << out.peak_concurrency << "\n";
    };
  });

  // budget
  auto* budget = app.add_subcommand("budget", "Estimate pass rates and pick a rollout budget per task");
  std::string b_tasks, b_policy, b_spectrum, b_out = "budgets.json";
  budget->add_option("--tasks", b_tasks, "Task corpus")->required();
  budget->add_option("--policy", b_policy, "Policy spec")->required();
  budget->add_option("--spectrum", b_spectrum, "Budgets and thresholds, e.g. 4:0.75,8:0.5,16:0.25");
  budget->add_option("--out", b_out, "Budget JSON output");
  budget->callback([&] {
    auto cfg = base_config(g);
    if (!b_spectrum.empty()) cfg.spectrum = b_spectrum;
    run = [&, cfg] {
      const auto tasks = load_tasks(b_tasks);
      auto pol = std::make_shared<const policy::PolicyHandle>(policy_arg(b_policy, tasks));
      cli::write_json(out_path(g, b_out), cli::budget_stage(cfg, tasks, pol));
    };
  });

  // annotate
  auto* annotate = app.add_subcommand("annotate", "Write hindsight reasoning for every step");
  std::string a_in, a_provider = "template", a_out = "annotated.jsonl";
  annotate->add_option("--in", a_in, "Trajectory JSONL")->required();
  annotate->add_option("--provider", a_provider, "Reasoning provider")->check(CLI::IsMember({"template"}));
  annotate->add_option("--out", a_out, "Annotated trajectory JSONL");
  annotate->callback([&] {
    run = [&] {
      const auto provider = coldstart::template_provider();
      std::vector<Trajectory> out;
      for (const auto& t : load_trajectories(a_in)) out.push_back(coldstart::hindsight_annotate(t, std::nullopt, provider));
      save_trajectories(out_path(g, a_out), out);
    };
  });

  // samples
  auto* samples = app.add_subcommand("samples", "Decompose trajectories into single-step training samples");
  std::string m_in, m_out = "samples.jsonl";
  std::size_t m_window = kDefaultContextWindow;
  samples->add_option("--in", m_in, "Annotated trajectory JSONL")->required();
  samples->add_option("--out", m_out, "Sample JSONL output");
  samples->add_option("--window", m_window, "Recent steps kept in full");
  samples->callback([&] {
    run = [&] {
      std::vector<json> lines;
      for (const auto& t : load_trajectories(m_in))
        for (const auto& s : coldstart::decompose_to_samples(t, m_window)) lines.push_back(s);
      cli::write_jsonl(out_path(g, m_out), lines);
    };
  });

  // denoise
  auto* denoise = app.add_subcommand("denoise", "Mask redundant steps of successful trajectories");
  std::string d_in, d_tasks, d_out = "rft.jsonl", d_report = "denoise_report.json";
  bool d_post = false;
  denoise->add_option("--in", d_in, "Trajectory JSONL")->required();
  denoise->add_option("--tasks", d_tasks, "Task corpus")->required();
  denoise->add_option("--out", d_out, "Denoised trajectory JSONL");
  denoise->add_option("--report", d_report, "Report JSON");
  denoise->add_flag("--post-success", d_post, "Also mask steps after the task is already solved");
  denoise->callback([&] {
    auto cfg = base_config(g);
    if (d_post) cfg.post_success = true;
    run = [&, cfg] {
      const auto out = cli::denoise_stage(load_trajectories(d_in), load_tasks(d_tasks), {cfg.post_success});
      save_trajectories(out_path(g, d_out), out.trajectories);
      cli::write_json(out_path(g, d_report), out.report);
    };
  });

  // pairs
  auto* pairs = app.add_subcommand("pairs", "Build correction and reflection preference pairs");
  std::string p_fail, p_refs, p_tasks, p_out = "pairs.jsonl", p_skips = "pairs_skips.json", p_eq = "strict";
  std::size_t p_window = 0;
  bool p_no_synth = false;
  pairs->add_option("--fail", p_fail, "Trajectory JSONL with failures")->required();
  pairs->add_option("--refs", p_refs, "Trajectory JSONL with references (default: the --fail file)");
  pairs->add_option("--tasks", p_tasks, "Task corpus")->required();
  auto* p_window_opt = pairs->add_option("--window", p_window, "Alignment window w");
  pairs->add_option("--equivalence", p_eq, "State equivalence")->check(CLI::IsMember({"strict", "relaxed"}));
  pairs->add_flag("--no-synthesizer", p_no_synth, "Skip instead of falling back to the ground truth");
  pairs->add_option("--out", p_out, "Pair JSONL output");
  pairs->add_option("--skips", p_skips, "Skip record JSON output");
  pairs->callback([&] {
    auto cfg = base_config(g);
    override_if(p_window_opt, cfg.window, p_window);
    run = [&, cfg] {
      const auto fails = load_trajectories(p_fail);
      const auto refs = p_refs.empty() ? fails : load_trajectories(p_refs);
      preference::PairOptions opts;
      opts.window = cfg.window;
      opts.context_window = cfg.context_window;
      opts.synthesizer = !p_no_synth;
      opts.equivalence = preference::equivalence_from_string(p_eq);
      const auto out = cli::pairs_stage(fails, refs, load_tasks(p_tasks), opts);
      std::vector<json> lines;
      for (const auto& p : out.pairs) lines.push_back(p);
      cli::write_jsonl(out_path(g, p_out), lines);
      json skips = json::array();
      for (const auto& s : out.skips) skips.push_back(preference::skip_to_json(s));
      cli::write_json(out_path(g, p_skips), skips);
      std::cout << out.pairs.size() << " pairs, " << out.skips.size() << " skipped\n";
    };
  });

  // dpo-eval
  auto* dpo = app.add_subcommand("dpo-eval", "Evaluate the preference loss of a policy against a reference");
  std::string e_pairs, e_policy, e_ref, e_tasks, e_out = "dpo_metrics.json";
  double e_beta = 0.0;
  dpo->add_option("--pairs", e_pairs, "Pair JSONL")->required();
  dpo->add_option("--policy", e_policy, "Policy spec")->required();
  dpo->add_option("--ref", e_ref, "Reference policy spec")->required();
  dpo->add_option("--tasks", e_tasks, "Task corpus (for @solution policies)");
  auto* e_beta_opt = dpo->add_option("--beta", e_beta, "Preference temperature");
  dpo->add_option("--out", e_out, "Metrics JSON output");
  dpo->callback([&] {
    auto cfg = base_config(g);
    override_if(e_beta_opt, cfg.dpo_beta, e_beta);
    run = [&, cfg] {
      const auto tasks = optional_tasks(e_tasks);
      std::vector<preference::PreferencePair> ps;
      for (const auto& l : cli::read_jsonl(e_pairs)) ps.push_back(l.get<preference::PreferencePair>());
      std::vector<Action> seen;
      for (const auto& p : ps) {
        seen.push_back(p.chosen.action);
        seen.push_back(p.rejected.action);
      }
      const auto theta = policy_arg(e_policy, tasks, seen);
      const auto ref = policy_arg(e_ref, tasks, seen);
      cli::write_json(out_path(g, e_out), cli::dpo_eval(ps, theta, ref, cfg.dpo_beta));
    };
  });

  // stepo
  auto* stepo_cmd = app.add_subcommand("stepo", "Step-level objective, clip and KL diagnostics per group");
  std::string o_groups, o_policy, o_old, o_ref, o_tasks, o_out = "stepo_metrics.json";
  double o_eps = 0.0, o_beta = 0.0;
  stepo_cmd->add_option("--groups", o_groups, "Group JSONL")->required();
  stepo_cmd->add_option("--policy", o_policy, "Current policy spec")->required();
  stepo_cmd->add_option("--old", o_old, "Behaviour policy spec")->required();
  stepo_cmd->add_option("--ref", o_ref, "Reference policy spec")->required();
  stepo_cmd->add_option("--tasks", o_tasks, "Task corpus (for @solution policies)");
  auto* o_eps_opt = stepo_cmd->add_option("--eps", o_eps, "Symmetric clip range");
  auto* o_beta_opt = stepo_cmd->add_option("--beta-kl", o_beta, "KL penalty weight");
  stepo_cmd->add_option("--out", o_out, "Metrics JSON output");
  stepo_cmd->callback([&] {
    auto cfg = base_config(g);
    override_if(o_eps_opt, cfg.eps_low, o_eps);
    override_if(o_eps_opt, cfg.eps_high, o_eps);
    override_if(o_beta_opt, cfg.beta_kl, o_beta);
    run = [&, cfg] {
      const auto tasks = optional_tasks(o_tasks);
      const stepo::ClipConfig clip{cfg.eps_low, cfg.eps_high, cfg.beta_kl};
      const auto groups = orchestrator::load_groups(o_groups);
      std::vector<Action> seen;
      for (const auto& gr : groups)
        for (const auto& t : gr.trajectories)
          for (const auto& st : t.steps) seen.push_back(st.action);
      const auto metrics = cli::stepo_stage(groups, policy_arg(o_policy, tasks, seen), policy_arg(o_old, tasks, seen),
                                            policy_arg(o_ref, tasks, seen), clip);
      cli::write_json(out_path(g, o_out), metrics);
      std::cout << "J_mean " << metrics["aggregate"]["J_mean"] << "\n";
    };
  });

  // pipeline
  auto* pipeline = app.add_subcommand("pipeline", "Run synth, rollout, budget, denoise, pairs and stepo end to end");
  std::size_t l_count = 0, l_group = 0;
  std::string l_tasks;
  auto* l_count_opt = pipeline->add_option("--count", l_count, "Tasks to synthesize");
  auto* l_group_opt = pipeline->add_option("--group", l_group, "Rollouts per task");
  pipeline->add_option("--tasks", l_tasks, "Use an existing task corpus instead of synthesizing");
  int pipeline_exit = 0;
  pipeline->callback([&] {
    auto cfg = base_config(g);
    override_if(l_count_opt, cfg.count, l_count);
    override_if(l_group_opt, cfg.group, l_group);
    if (!l_tasks.empty()) cfg.tasks = l_tasks;
    run = [&, cfg] {
      const auto res = cli::run_pipeline(cfg, g.out_dir.empty() ? "." : g.out_dir);
      if (res.exit_code != 0) {
        std::cerr << "pipeline failed at stage " << res.failed_stage << ": " << res.error << "\n";
        pipeline_exit = res.exit_code;
      }
    };
  });

  // inspect
  auto* inspect = app.add_subcommand("inspect", "Static per-step report of one trajectory or pair");
  std::string i_in, i_task_id, i_tasks, i_pairs, i_format = "text", i_out;
  std::size_t i_index = 0;
  inspect->add_option("--in", i_in, "Trajectory JSONL");
  inspect->add_option("--pairs", i_pairs, "Pair JSONL (shows chosen and rejected side by side)");
  inspect->add_option("--task-id", i_task_id, "Only trajectories (or pairs) of this task");
  inspect->add_option("--index", i_index, "Index among the matching records");
  inspect->add_option("--tasks", i_tasks, "Task corpus for a replay verdict");
  inspect->add_option("--format", i_format, "Report format")->check(CLI::IsMember({"text", "html"}));
  inspect->add_option("--out", i_out, "Write the report to a file instead of stdout");
  inspect->callback([&] {
    if (i_in.empty() == i_pairs.empty()) throw CLI::ValidationError("inspect", "give exactly one of --in or --pairs");
    run = [&] {
      const auto fmt = i_format == "html" ? cli::ReportFormat::html : cli::ReportFormat::text;
      std::ofstream file;
      if (!i_out.empty()) {
        file.open(out_path(g, i_out));
        if (!file) throw cli::CliError("cannot write '" + i_out + "'");
      }
      std::ostream& os = i_out.empty() ? std::cout : file;
      if (!i_pairs.empty()) {
        std::vector<preference::PreferencePair> matching;
        for (const auto& l : cli::read_jsonl(i_pairs)) {
          auto p = l.get<preference::PreferencePair>();
          if (i_task_id.empty() || p.task_id == i_task_id) matching.push_back(std::move(p));
        }
        if (i_index >= matching.size()) throw cli::CliError("no pair at index " + std::to_string(i_index));
        cli::inspect_pair(os, matching[i_index], fmt);
        return;
      }
      std::vector<Trajectory> matching;
      for (auto& t : load_trajectories(i_in))
        if (i_task_id.empty() || t.task_id == i_task_id) matching.push_back(std::move(t));
      if (i_index >= matching.size())
        throw cli::CliError("no trajectory at index " + std::to_string(i_index) + (i_task_id.empty() ? "" : " for task " + i_task_id));
      std::optional<Task> task;
      if (!i_tasks.empty())
        for (auto& t : load_tasks(i_tasks))
          if (t.id == matching[i_index].task_id) task = std::move(t);
      cli::inspect_trajectory(os, matching[i_index], task ? &*task : nullptr, fmt);
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  try {
    run();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return pipeline_exit;
}
