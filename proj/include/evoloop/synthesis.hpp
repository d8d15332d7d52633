#pragma once

// Task synthesis: scenario sampling over a capability taxonomy, template
// families that emit (instruction, validator, config, ground truth), a
// closed generate-execute-retry loop, consistency filtering against a
// reference agent, and benchmark decontamination.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "evoloop/model.hpp"
#include "evoloop/orchestrator.hpp"
#include "evoloop/policy.hpp"
#include "evoloop/rng.hpp"

namespace evoloop::synthesis {

class SynthesisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Taxonomy {
  std::map<std::string, std::vector<std::string>> domains;  // domain -> capabilities
  std::vector<std::string> personas;
  std::map<std::string, double> weights;  // per capability; missing = 1
};

Taxonomy default_taxonomy();
nlohmann::json taxonomy_to_json(const Taxonomy& t);
Taxonomy taxonomy_from_json(const nlohmann::json& j);

struct Resource {
  std::string kind;  // "generator" or "fixture"
  std::string id;
  std::uint64_t seed = 0;
  nlohmann::json params = nlohmann::json::object();  // template overrides, e.g. {"rows": 3}
};

struct Scenario {
  std::string role;
  std::string domain;
  std::string capability;
  Resource resource;
};

struct Draft {
  std::string instruction;
  ValidatorSpec validator;
  nlohmann::json init_config;
  std::vector<Action> solution;
  bool feasible = true;
};

struct Feedback {
  std::size_t round = 0;
  std::string reason;
};

using TemplateFamily = std::function<Draft(const Scenario&, Rng&, const std::vector<Feedback>&)>;

class GeneratorRegistry {
 public:
  void add(const std::string& capability, TemplateFamily family);
  bool has(const std::string& capability) const { return families_.count(capability) > 0; }
  const TemplateFamily& get(const std::string& capability) const;
  std::vector<std::string> capabilities() const;

 private:
  std::map<std::string, TemplateFamily> families_;
};

// max_per_row, sum_column, rename_file, delete_file, append_text,
// replace_text, infeasible_request.
GeneratorRegistry default_registry();

// Bundled text fixtures used by the document templates.
const std::map<std::string, std::string>& text_fixtures();

// Throws SynthesisError if the taxonomy is empty or names a capability
// with no registered generator.
void validate_taxonomy(const Taxonomy& tax, const GeneratorRegistry& registry);

Scenario sample_scenario(const Taxonomy& tax, Rng& rng);

struct SynthesisOutcome {
  Task task;
  std::vector<Action> gt_solution;
  std::size_t rounds = 0;
  bool accepted = false;
  std::string failure_reason;
  std::vector<Feedback> feedback;
};

// Replays the draft's solution from reset; empty string when the validator
// returns 1, otherwise a description of what failed.
std::string verify_draft(const Draft& draft);

SynthesisOutcome synthesize_task(const Scenario& sc, std::size_t max_rounds, const GeneratorRegistry& registry,
                                 std::uint64_t seed, const std::string& task_id);

struct CorpusOptions {
  std::size_t count = 10;
  std::size_t max_rounds = 3;
  std::uint64_t seed = 0;
};

struct CorpusResult {
  std::vector<SynthesisOutcome> accepted;
  std::vector<SynthesisOutcome> rejected;
};

// Draws scenarios from named substreams until `count` tasks are accepted
// (or 4*count attempts). Task ids are "task-0000", "task-0001", ...
CorpusResult synthesize_corpus(const Taxonomy& tax, const GeneratorRegistry& registry, const CorpusOptions& opts);

struct ConsistencyOptions {
  std::size_t k = 8;
  double delta = 0.25;
  std::size_t step_budget = 20;
  std::uint64_t seed = 0;
};

struct ConsistencyRecord {
  std::string task_id;
  std::size_t rollouts = 0;
  double validator_rate = 0.0;
  double oracle_rate = 0.0;
  double disagreement = 0.0;
  std::size_t false_positives = 0;  // validator 1, oracle 0
  std::vector<std::string> reasons;
  bool flagged = false;
};

struct ConsistencyResult {
  std::vector<Task> kept;
  std::vector<Task> flagged;
  std::vector<ConsistencyRecord> records;
};

// The oracle passes a rollout when its terminal relaxed hash equals the
// ground-truth replay's. A task is flagged on any validator false positive,
// on a disagreement rate above delta, or on a reference-agent crash.
ConsistencyResult consistency_filter(const std::vector<Task>& tasks,
                                     std::shared_ptr<const policy::PolicyHandle> reference_agent,
                                     orchestrator::Cluster& cluster, const ConsistencyOptions& opts);

// Multiset Jaccard over lowercased alphanumeric tokens; punctuation splits.
std::vector<std::string> normalize_tokens(const std::string& text);
double jaccard(const std::string& a, const std::string& b);

std::string config_hash(const nlohmann::json& init_config);
// Strict terminal hash of the task's ground truth replayed from reset, or
// empty when the task carries no solution.
std::string gt_terminal_hash(const Task& task);

struct DecontamOptions {
  double theta_sem = 0.8;
};

struct Removal {
  std::string task_id;
  std::vector<std::string> reasons;  // semantic | configuration | evaluator
  double similarity = 0.0;
  std::string benchmark_id;
};

struct SimilarityScore {
  std::string task_id;
  double max_similarity = 0.0;
  std::string benchmark_id;
};

struct DecontamResult {
  std::vector<Task> kept;
  std::vector<Removal> removed;
  std::vector<SimilarityScore> scores;
};

DecontamResult decontaminate(const std::vector<Task>& tasks, const std::vector<Task>& benchmark,
                             const DecontamOptions& opts = {});

nlohmann::json consistency_record_to_json(const ConsistencyRecord& r);
nlohmann::json removal_to_json(const Removal& r);

}  // namespace evoloop::synthesis
