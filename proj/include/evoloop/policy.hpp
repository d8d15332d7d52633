#pragma once

// Policies map (context, observation) to a reasoning trace, an action and
// per-token log-probabilities. Tokens are symbolic: one reasoning token
// "z:<class>" followed by one action token "a:<canonical action>".

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "evoloop/model.hpp"
#include "evoloop/rng.hpp"

namespace evoloop::policy {

inline const std::string kReasoningAct = "act";
inline const std::string kReasoningReflect = "reflect";

class PolicyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// What a policy may condition on.
struct Query {
  std::string task_id;
  std::string domain;
  std::string state_hash;
  std::size_t step_index = 0;
};

Query make_query(const Context& ctx, const Observation& obs);

// Reasoning class of a trace: "reflect" when it carries the reflection
// header, "act" otherwise.
std::string reasoning_class(const std::string& reasoning);
TokenizedResponse tokenize(const std::string& reasoning, const Action& action, const std::vector<double>& logprobs = {0.0, 0.0});

struct ScriptedPolicy {
  std::map<std::string, std::vector<std::string>> scripts;  // per task id
  std::vector<std::string> default_script;                  // tasks without an entry
  const std::vector<std::string>& script_for(const std::string& task_id) const;
};

// Follows its script with probability p_success; otherwise deviates at one
// uniformly chosen non-terminal step and continues blindly.
struct StochasticScriptedPolicy {
  ScriptedPolicy base;
  double p_success = 0.5;
};

// Per bucket: |Z| reasoning logits, then |Z|x|A| action logits (row per z).
class TabularPolicy {
 public:
  TabularPolicy() = default;
  TabularPolicy(std::vector<std::string> reasoning, std::vector<Action> actions, std::size_t hash_prefix,
                std::size_t step_mod, bool use_domain);

  std::string bucket_key(const Query& q) const;
  // Offset of the bucket for q, falling back to "*"; throws when neither exists.
  std::size_t resolve(const Query& q) const;
  std::size_t add_bucket(const std::string& key);
  bool has_bucket(const std::string& key) const { return offsets_.count(key) > 0; }
  std::size_t bucket_offset(const std::string& key) const { return offsets_.at(key); }
  const std::map<std::string, std::size_t>& buckets() const { return offsets_; }

  std::size_t reasoning_size() const { return reasoning_.size(); }
  std::size_t action_size() const { return actions_.size(); }
  std::size_t bucket_width() const { return reasoning_.size() * (1 + actions_.size()); }
  std::size_t z_index(std::size_t offset, std::size_t z) const { return offset + z; }
  std::size_t a_index(std::size_t offset, std::size_t z, std::size_t a) const {
    return offset + reasoning_.size() + z * actions_.size() + a;
  }

  const std::vector<std::string>& reasoning() const { return reasoning_; }
  const std::vector<Action>& actions() const { return actions_; }
  std::optional<std::size_t> find_reasoning(const std::string& name) const;
  std::optional<std::size_t> find_action(const std::string& canonical) const;

  std::vector<double>& logits() { return logits_; }
  const std::vector<double>& logits() const { return logits_; }

  std::size_t hash_prefix() const { return hash_prefix_; }
  std::size_t step_mod() const { return step_mod_; }
  bool use_domain() const { return use_domain_; }

 private:
  std::vector<std::string> reasoning_;
  std::vector<Action> actions_;
  std::map<std::string, std::size_t> action_index_;
  std::size_t hash_prefix_ = 0;
  std::size_t step_mod_ = 0;
  bool use_domain_ = true;
  std::map<std::string, std::size_t> offsets_;
  std::vector<double> logits_;
};

enum class PolicyKind { scripted, tabular, stochastic_scripted };

struct PolicyHandle {
  std::variant<ScriptedPolicy, TabularPolicy, StochasticScriptedPolicy> impl;
  double temperature = 1.0;

  PolicyKind kind() const { return static_cast<PolicyKind>(impl.index()); }
  const TabularPolicy* tabular() const { return std::get_if<TabularPolicy>(&impl); }
  TabularPolicy* tabular() { return std::get_if<TabularPolicy>(&impl); }
  // Only policies with real log-probs can feed objective computations.
  bool scoreable() const { return kind() != PolicyKind::stochastic_scripted; }
};

// Per-episode memory (the stochastic scripted policy decides its fate once).
struct EpisodeState {
  std::optional<bool> follow_script;
  std::size_t fork_step = 0;
};

struct PolicyOutput {
  std::string reasoning;
  std::string action_text;  // may fail to parse; the orchestrator handles that
  TokenizedResponse response;
};

PolicyOutput act(const PolicyHandle& policy, const Context& ctx, const Observation& obs, Rng& rng, EpisodeState& episode);

// Deterministic per-token scoring; throws PolicyError on out-of-vocabulary tokens.
std::vector<double> logprob(const PolicyHandle& policy, const Context& ctx, const Observation& obs,
                            const TokenizedResponse& response);
std::vector<double> logprob(const PolicyHandle& policy, const Query& q, const TokenizedResponse& response);

struct SparseGradient {
  std::vector<std::pair<std::size_t, double>> entries;
};

// d logprob(token) / d logits, one entry per token. Requires temperature > 0.
std::vector<SparseGradient> logprob_gradient(const TabularPolicy& policy, double temperature, const Query& q,
                                             const TokenizedResponse& response);

// Softmax of logits/temperature; temperature 0 gives the argmax one-hot.
std::vector<double> softmax(const double* logits, std::size_t n, double temperature);

nlohmann::json policy_to_json(const PolicyHandle& policy);
PolicyHandle policy_from_json(const nlohmann::json& j);

// "scripted:<file>", "tabular:<file>", "stochastic_scripted:<file>:<p>".
// A file of "@solution" uses each task's ground-truth script (tabular:
// builds tabular_from_solutions).
PolicyHandle load_policy(const std::string& spec, const std::vector<Task>& tasks = {},
                         const std::vector<Action>& extra_actions = {});

ScriptedPolicy solution_script(const std::vector<Task>& tasks);

struct TabularFromSolutionsOptions {
  double action_logit = 8.0;     // bonus for the ground-truth action in its state bucket
  double reasoning_logit = 3.0;  // bonus for the "act" reasoning class
  std::uint64_t reset_seed = 0;
  std::vector<Action> extra_actions;  // added to the vocabulary so they can be scored
};

// Tabular policy keyed by exact state whose buckets prefer each task's
// ground-truth action; unseen states fall back to a uniform bucket.
PolicyHandle tabular_from_solutions(const std::vector<Task>& tasks, const TabularFromSolutionsOptions& opts = {});

}  // namespace evoloop::policy
