#pragma once

// Step-level preference data: critical deviation discovery between a failed
// and a successful trajectory, reference alignment with coordinate
// normalization, correction/reflection pairs, and the DPO loss.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evoloop/coldstart.hpp"
#include "evoloop/model.hpp"
#include "evoloop/policy.hpp"

namespace evoloop::preference {

class DeviationError : public std::runtime_error {
 public:
  enum class Code { no_deviation, undiagnosable, invalid_input };
  DeviationError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

enum class Equivalence { strict, relaxed };
Equivalence equivalence_from_string(const std::string& s);
bool states_equivalent(const Step& a, const Step& b, Equivalence eq);

// Clicks that hit the same widget compare equal; everything else compares
// by canonical serialization.
bool same_action(const Action& a, const Observation& obs_a, const Action& b, const Observation& obs_b);

struct ForkingPoint {
  std::size_t t_star = 0;
  Action fail_action;
  Action ref_action;
  std::string fail_state_hash;
  std::string ref_state_hash;
};

ForkingPoint find_deviation(const Trajectory& fail, const Trajectory& ref, Equivalence eq = Equivalence::strict);

struct Aligned {
  std::size_t ref_index = 0;
  std::string reasoning;
  Action action;
};

// Ref steps are tried by distance from t_star (t_star, t_star-1, t_star+1,
// ...). A candidate matches when it differs from the rejected action and its
// target widget exists in the fail observation; the action is then moved to
// that widget's center there.
std::optional<Aligned> align_reference(const Trajectory& fail, const Trajectory& ref, std::size_t t_star, std::size_t w);

// Moves a pointer action to the center of widget_id in obs.
Action normalize_coords(const Action& a, const std::string& widget_id, const Observation& obs);

struct Response {
  std::string reasoning;
  Action action;
  TokenizedResponse tokens;
};

inline const std::string kParadigmCorrection = "correction";
inline const std::string kParadigmReflection = "reflection";

struct PreferencePair {
  std::string task_id;
  std::string domain;
  Context context;
  Observation observation;
  Response chosen;
  Response rejected;
  std::string paradigm;
  std::string fail_id;
  std::string ref_id;
  std::size_t t_star = 0;
};

struct SkipRecord {
  std::string fail_id;
  std::string ref_id;
  std::size_t t_star = 0;
  std::string reason;
};

struct PairOptions {
  std::size_t window = 2;
  bool synthesizer = true;  // fallback to the task's ground truth when alignment fails
  Equivalence equivalence = Equivalence::strict;
  std::size_t context_window = kDefaultContextWindow;
};

struct PairResult {
  std::vector<PreferencePair> pairs;
  std::vector<SkipRecord> skips;
};

PairResult construct_pairs(const Trajectory& fail, const Trajectory& ref, const coldstart::ReasoningProvider& provider,
                           const PairOptions& opts = {}, const Task* task = nullptr);

// Reference selection: a successful trajectory of the same task, else of
// the same template family.
const Trajectory* pick_reference(const Trajectory& fail, const std::vector<const Trajectory*>& successes,
                                 const std::map<std::string, Task>& tasks);

void to_json(nlohmann::json& j, const PreferencePair& p);
void from_json(const nlohmann::json& j, PreferencePair& p);
nlohmann::json skip_to_json(const SkipRecord& s);

policy::Query pair_query(const PreferencePair& p);

// Sum of token log-probs of the response (reasoning then action tokens).
double response_logprob(const policy::PolicyHandle& policy, const policy::Query& q, const TokenizedResponse& r);

// -log sigmoid(beta * margin), computed without overflow.
double dpo_loss_from_margin(double margin, double beta);

struct DpoTerms {
  double chosen_delta = 0.0;    // logpi_theta(w) - logpi_ref(w)
  double rejected_delta = 0.0;  // logpi_theta(l) - logpi_ref(l)
  double margin = 0.0;
  double loss = 0.0;
};

DpoTerms dpo_terms(const policy::PolicyHandle& theta, const policy::PolicyHandle& ref, const PreferencePair& pair, double beta);
double dpo_loss(const policy::PolicyHandle& theta, const policy::PolicyHandle& ref, const PreferencePair& pair, double beta);

// Gradient of dpo_loss wrt theta's logits (dense, theta must be tabular).
std::vector<double> dpo_gradient(const policy::PolicyHandle& theta, const policy::PolicyHandle& ref,
                                 const PreferencePair& pair, double beta);

}  // namespace evoloop::preference
