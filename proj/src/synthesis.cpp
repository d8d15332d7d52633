#include "evoloop/synthesis.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <set>

#include "evoloop/reward.hpp"
#include "evoloop/sandbox.hpp"

namespace evoloop::synthesis {

using nlohmann::json;
namespace sb = evoloop::sandbox;

namespace {

std::string article_role(const std::string& role) {
  const bool vowel = !role.empty() && std::string("aeiou").find(static_cast<char>(std::tolower(role[0]))) != std::string::npos;
  return std::string(vowel ? "an " : "a ") + role;
}

int param_or(const Scenario& sc, const char* key, Rng& rng, int lo, int hi) {
  if (sc.resource.params.contains(key)) return sc.resource.params.at(key).get<int>();
  return static_cast<int>(rng.uniform_int(lo, hi));
}

Point center_of(const json& config, const std::string& widget_id) {
  const Observation obs = sb::render(sb::reset(config, 0));
  const Widget* w = find_widget(obs, widget_id);
  if (!w) throw SynthesisError("widget '" + widget_id + "' not on the initial screen");
  return w->bounds.center();
}

Check cell_check(const std::string& app, const std::string& cell, const std::string& value) {
  Check c;
  c.kind = Check::Kind::cell_equals;
  c.app = app;
  c.target = cell;
  c.value = value;
  return c;
}

Check file_check(const std::string& app, const std::string& name, bool expect) {
  Check c;
  c.kind = Check::Kind::file_exists;
  c.app = app;
  c.target = name;
  c.expect = expect;
  return c;
}

Check text_check(const std::string& app, const std::string& text) {
  Check c;
  c.kind = Check::Kind::text_equals;
  c.app = app;
  c.target = text;
  return c;
}

const std::array<std::string_view, 10> kFileNames = {"report.txt",  "budget.xlsx", "notes.md",   "summary.docx", "draft.txt",
                                                     "plan.pdf",    "invoice.csv", "photo.png", "agenda.txt",   "minutes.md"};
const std::array<std::string_view, 8> kNewNames = {"final.txt",   "archive.txt", "q3_report.txt", "old_notes.md",
                                                   "backup.csv",  "review.pdf",  "signed.docx",   "shared.txt"};
const std::array<std::string_view, 8> kPhrases = {"Action items are due Friday",  "Budget approved by the board",
                                                  "Next review in two weeks",     "Send slides to the team",
                                                  "Vendor contract renewed",      "Hiring freeze lifted",
                                                  "Office closed on Monday",      "Quarterly targets met"};
const std::array<std::string_view, 5> kImpossible = {"email it to the finance team", "print it on the office printer",
                                                     "upload it to the shared drive", "fax it to the head office",
                                                     "translate it into French"};

std::map<std::string, std::string> random_files(Rng& rng, int n) {
  std::vector<std::string_view> pool(kFileNames.begin(), kFileNames.end());
  std::map<std::string, std::string> files;
  for (int i = 0; i < n && !pool.empty(); ++i) {
    const std::size_t k = rng.index(pool.size());
    files.emplace(std::string(pool[k]), "contents of " + std::string(pool[k]));
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return files;
}

json files_config(const std::map<std::string, std::string>& files) {
  return {{"apps", json::array({{{"id", "files"}, {"kind", "filemanager"}, {"title", "Files"}, {"files", files}}})}};
}

json editor_config(const std::string& text) {
  return {{"apps", json::array({{{"id", "doc"}, {"kind", "texteditor"}, {"title", "Document"}, {"text", text}}})}};
}

Draft max_per_row(const Scenario& sc, Rng& rng, const std::vector<Feedback>&) {
  const int rows = param_or(sc, "rows", rng, 2, 5);
  std::vector<std::vector<std::string>> grid;
  Draft d;
  for (int r = 0; r < rows; ++r) {
    std::vector<std::string> row;
    for (int c = 0; c < 6; ++c) row.push_back(std::to_string(rng.uniform_int(0, 99)));
    grid.push_back(row);
  }
  d.init_config = {{"apps", json::array({{{"id", "sheet"}, {"kind", "spreadsheet"}, {"title", "Scores"},
                                           {"rows", rows}, {"cols", 7}, {"grid", grid}}})}};
  d.instruction = "As " + article_role(sc.role) + ", write the largest value of each row (columns A to F) into column G for rows 1 to " +
                  std::to_string(rows) + ".";
  for (int r = 0; r < rows; ++r) {
    const std::string g = "G" + std::to_string(r + 1);
    int best = 0;
    for (const auto& v : grid[r]) best = std::max(best, std::stoi(v));
    d.validator.checks.push_back(cell_check("sheet", g, sb::format_number(best)));
    const Point p = center_of(d.init_config, "cell:" + g);
    d.solution.push_back(Action::click(p.x, p.y));
    d.solution.push_back(Action::type_text("=MAX(A" + std::to_string(r + 1) + ":F" + std::to_string(r + 1) + ")"));
  }
  d.solution.push_back(Action::terminate(TerminationStatus::success));
  return d;
}

Draft sum_column(const Scenario& sc, Rng& rng, const std::vector<Feedback>&) {
  const int n = param_or(sc, "rows", rng, 3, 8);
  const std::uint64_t seed = sc.resource.seed;
  Draft d;
  d.init_config = {{"apps", json::array({{{"id", "sheet"}, {"kind", "spreadsheet"}, {"title", "Prices"},
                                           {"generator", {{"type", "price_table"}, {"rows", n}, {"seed", seed}}},
                                           {"rows", n + 2}, {"cols", 3}}})}};
  const auto table = sb::generate_price_table(n, seed);
  double total = 0.0;
  for (std::size_t r = 1; r < table.size(); ++r) total += std::stod(table[r][1]);
  const std::string target = "B" + std::to_string(n + 2);
  d.instruction = "As " + article_role(sc.role) + ", put the total of the Price column in cell " + target + ".";
  Check c;
  c.kind = Check::Kind::numeric_equals;
  c.app = "sheet";
  c.target = target;
  c.number = total;
  c.tolerance = 1e-6;
  d.validator.checks.push_back(c);
  const Point p = center_of(d.init_config, "cell:" + target);
  d.solution = {Action::click(p.x, p.y), Action::type_text("=SUM(B2:B" + std::to_string(n + 1) + ")"),
                Action::terminate(TerminationStatus::success)};
  return d;
}

Draft rename_file(const Scenario& sc, Rng& rng, const std::vector<Feedback>&) {
  const auto files = random_files(rng, param_or(sc, "files", rng, 3, 6));
  auto it = files.begin();
  std::advance(it, static_cast<std::ptrdiff_t>(rng.index(files.size())));
  const std::string old_name = it->first;
  std::string new_name;
  do new_name = std::string(kNewNames[rng.index(kNewNames.size())]);
  while (files.count(new_name));
  Draft d;
  d.init_config = files_config(files);
  d.instruction = "As " + article_role(sc.role) + ", rename " + old_name + " to " + new_name + ".";
  d.validator.checks = {file_check("files", new_name, true), file_check("files", old_name, false)};
  const Point p = center_of(d.init_config, "file:" + old_name);
  d.solution = {Action::click(p.x, p.y), Action::key_press({"f2"}), Action::type_text(new_name),
                Action::key_press({"enter"}), Action::terminate(TerminationStatus::success)};
  return d;
}

Draft delete_file(const Scenario& sc, Rng& rng, const std::vector<Feedback>&) {
  const auto files = random_files(rng, param_or(sc, "files", rng, 3, 6));
  auto it = files.begin();
  std::advance(it, static_cast<std::ptrdiff_t>(rng.index(files.size())));
  const std::string victim = it->first;
  Draft d;
  d.init_config = files_config(files);
  d.instruction = "As " + article_role(sc.role) + ", delete the file " + victim + " and keep everything else.";
  for (const auto& [name, _] : files) d.validator.checks.push_back(file_check("files", name, name != victim));
  const Point p = center_of(d.init_config, "file:" + victim);
  d.solution = {Action::click(p.x, p.y), Action::key_press({"delete"}), Action::terminate(TerminationStatus::success)};
  return d;
}

const std::string& fixture_text(const Scenario& sc) {
  const auto& fixtures = text_fixtures();
  auto it = fixtures.find(sc.resource.id);
  if (it == fixtures.end()) throw SynthesisError("unknown fixture '" + sc.resource.id + "'");
  return it->second;
}

Draft append_text(const Scenario& sc, Rng& rng, const std::vector<Feedback>&) {
  const std::string& text = fixture_text(sc);
  const std::string line(kPhrases[rng.index(kPhrases.size())]);
  Draft d;
  d.init_config = editor_config(text);
  d.instruction = "As " + article_role(sc.role) + ", add the line \"" + line + "\" at the end of the document.";
  d.validator.checks = {text_check("doc", text + "\n" + line)};
  const Point p = center_of(d.init_config, "editor");
  d.solution = {Action::click(p.x, p.y), Action::type_text("\n" + line), Action::terminate(TerminationStatus::success)};
  return d;
}

Draft replace_text(const Scenario& sc, Rng& rng, const std::vector<Feedback>&) {
  const std::string& text = fixture_text(sc);
  const std::string line(kPhrases[rng.index(kPhrases.size())]);
  Draft d;
  d.init_config = editor_config(text);
  d.instruction = "As " + article_role(sc.role) + ", replace the whole document with the text \"" + line + "\".";
  d.validator.checks = {text_check("doc", line)};
  const Point p = center_of(d.init_config, "editor");
  d.solution = {Action::pointer(ActionKind::triple_click, p.x, p.y), Action::type_text(line),
                Action::terminate(TerminationStatus::success)};
  return d;
}

Draft infeasible_request(const Scenario& sc, Rng& rng, const std::vector<Feedback>&) {
  const auto files = random_files(rng, param_or(sc, "files", rng, 2, 5));
  std::string missing;
  do missing = std::string(kFileNames[rng.index(kFileNames.size())]);
  while (files.count(missing));
  Draft d;
  d.init_config = files_config(files);
  d.instruction = "As " + article_role(sc.role) + ", open " + missing + " and " +
                  std::string(kImpossible[rng.index(kImpossible.size())]) + ".";
  Check c;
  c.kind = Check::Kind::terminated_with;
  c.status = TerminationStatus::failure;
  d.validator.checks = {c};
  d.feasible = false;
  d.solution = {Action::terminate(TerminationStatus::failure)};
  return d;
}

std::string describe_check(const Check& c) {
  json j = c;
  return j.dump();
}

}  // namespace

Taxonomy default_taxonomy() {
  Taxonomy t;
  t.domains = {{"office/spreadsheet", {"max_per_row", "sum_column"}},
               {"office/files", {"rename_file", "delete_file"}},
               {"office/document", {"append_text", "replace_text"}},
               {"office/unsupported", {"infeasible_request"}}};
  t.personas = {"accountant", "teacher", "project manager", "office assistant", "student"};
  return t;
}

json taxonomy_to_json(const Taxonomy& t) {
  json j = {{"domains", t.domains}, {"personas", t.personas}};
  if (!t.weights.empty()) j["weights"] = t.weights;
  return j;
}

Taxonomy taxonomy_from_json(const json& j) {
  for (const auto& [k, _] : j.items())
    if (k != "domains" && k != "personas" && k != "weights") throw SynthesisError("unknown taxonomy key '" + k + "'");
  Taxonomy t;
  try {
    t.domains = j.at("domains").get<std::map<std::string, std::vector<std::string>>>();
    t.personas = j.at("personas").get<std::vector<std::string>>();
    t.weights = j.value("weights", std::map<std::string, double>{});
  } catch (const json::exception& e) {
    throw SynthesisError(std::string("malformed taxonomy: ") + e.what());
  }
  for (const auto& [cap, w] : t.weights)
    if (!(w >= 0.0)) throw SynthesisError("weight for '" + cap + "' must be >= 0");
  return t;
}

void GeneratorRegistry::add(const std::string& capability, TemplateFamily family) {
  families_[capability] = std::move(family);
}

const TemplateFamily& GeneratorRegistry::get(const std::string& capability) const {
  auto it = families_.find(capability);
  if (it == families_.end()) throw SynthesisError("no generator for capability '" + capability + "'");
  return it->second;
}

std::vector<std::string> GeneratorRegistry::capabilities() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : families_) out.push_back(k);
  return out;
}

GeneratorRegistry default_registry() {
  GeneratorRegistry r;
  r.add("max_per_row", max_per_row);
  r.add("sum_column", sum_column);
  r.add("rename_file", rename_file);
  r.add("delete_file", delete_file);
  r.add("append_text", append_text);
  r.add("replace_text", replace_text);
  r.add("infeasible_request", infeasible_request);
  return r;
}

const std::map<std::string, std::string>& text_fixtures() {
  static const std::map<std::string, std::string> fixtures = {
      {"meeting_notes", "Meeting notes\nAttendees: Ana, Ben, Chen\nTopic: quarterly planning"},
      {"memo", "Memo to all staff\nThe cafeteria will reopen next week."},
      {"todo", "To do\n- renew parking permit\n- book travel"},
      {"status_update", "Status update\nMigration is 80 percent complete."},
  };
  return fixtures;
}

void validate_taxonomy(const Taxonomy& tax, const GeneratorRegistry& registry) {
  if (tax.personas.empty()) throw SynthesisError("taxonomy has no personas");
  std::size_t leaves = 0;
  for (const auto& [domain, caps] : tax.domains)
    for (const auto& cap : caps) {
      if (!registry.has(cap)) throw SynthesisError("capability '" + cap + "' in " + domain + " has no generator");
      ++leaves;
    }
  if (leaves == 0) throw SynthesisError("taxonomy has no capabilities");
}

Scenario sample_scenario(const Taxonomy& tax, Rng& rng) {
  std::vector<std::pair<std::string, std::string>> leaves;  // (domain, capability)
  for (const auto& [domain, caps] : tax.domains)
    for (const auto& cap : caps) leaves.emplace_back(domain, cap);
  if (leaves.empty() || tax.personas.empty()) throw SynthesisError("empty taxonomy");

  Scenario sc;
  sc.role = tax.personas[rng.index(tax.personas.size())];
  std::size_t pick;
  if (tax.weights.empty()) {
    pick = rng.index(leaves.size());
  } else {
    std::vector<double> w;
    double total = 0.0;
    for (const auto& [_, cap] : leaves) {
      auto it = tax.weights.find(cap);
      w.push_back(it == tax.weights.end() ? 1.0 : it->second);
      total += w.back();
    }
    if (!(total > 0.0)) throw SynthesisError("taxonomy weights sum to zero");
    for (auto& x : w) x /= total;
    pick = rng.categorical(w);
  }
  sc.domain = leaves[pick].first;
  sc.capability = leaves[pick].second;
  sc.resource.seed = rng.next_u64() >> 12;
  if (sc.capability == "append_text" || sc.capability == "replace_text") {
    const auto& fixtures = text_fixtures();
    auto it = fixtures.begin();
    std::advance(it, static_cast<std::ptrdiff_t>(rng.index(fixtures.size())));
    sc.resource.kind = "fixture";
    sc.resource.id = it->first;
  } else {
    sc.resource.kind = "generator";
    sc.resource.id = sc.capability;
  }
  return sc;
}

std::string verify_draft(const Draft& d) {
  if (d.validator.checks.empty()) return "validator is empty";
  if (d.solution.empty()) return "ground truth is empty";
  const auto seq = validate_sequence(d.solution);
  if (!seq.valid) return "ground truth violates sequence rule " + seq.violations.front().rule_id;
  try {
    const sb::EnvState end = sb::replay(sb::reset(d.init_config, 0), d.solution);
    if (evaluate_reward(d.validator, end) == 1) return "";
    std::string failed;
    for (std::size_t i = 0; i < d.validator.checks.size(); ++i) {
      ValidatorSpec one{{d.validator.checks[i]}};
      if (evaluate_reward(one, end) == 0) failed += (failed.empty() ? "" : "; ") + std::to_string(i) + " " + describe_check(d.validator.checks[i]);
    }
    return "validator returned 0 after ground-truth replay; failing checks: " + failed;
  } catch (const sb::EnvError& e) {
    return std::string("environment error: ") + e.what();
  } catch (const ValidationError& e) {
    return std::string("validator error: ") + e.what();
  } catch (const std::exception& e) {
    return std::string("replay error: ") + e.what();
  }
}

SynthesisOutcome synthesize_task(const Scenario& sc, std::size_t max_rounds, const GeneratorRegistry& registry,
                                 std::uint64_t seed, const std::string& task_id) {
  if (max_rounds < 1) throw SynthesisError("max_rounds must be >= 1");
  const TemplateFamily& family = registry.get(sc.capability);
  SynthesisOutcome out;
  for (std::size_t round = 1; round <= max_rounds; ++round) {
    out.rounds = round;
    Rng rng(derive_seed(seed, "round", round));
    std::string failure;
    Draft d;
    try {
      d = family(sc, rng, out.feedback);
      failure = verify_draft(d);
    } catch (const std::exception& e) {
      failure = std::string("template error: ") + e.what();
    }
    if (failure.empty()) {
      out.task.id = task_id;
      out.task.instruction = d.instruction;
      out.task.validator = d.validator;
      out.task.init_config = d.init_config;
      out.task.domain = sc.domain + "/" + sc.capability;
      out.task.feasible = d.feasible;
      out.task.family = sc.capability;
      out.task.solution = d.solution;
      out.gt_solution = d.solution;
      out.accepted = true;
      out.failure_reason.clear();
      return out;
    }
    out.feedback.push_back({round, failure});
    out.failure_reason = failure;
  }
  out.task.id = task_id;
  out.task.domain = sc.domain + "/" + sc.capability;
  out.task.family = sc.capability;
  return out;
}

CorpusResult synthesize_corpus(const Taxonomy& tax, const GeneratorRegistry& registry, const CorpusOptions& opts) {
  validate_taxonomy(tax, registry);
  CorpusResult result;
  const std::size_t max_attempts = 4 * std::max<std::size_t>(opts.count, 1);
  std::size_t attempt = 0;
  while (result.accepted.size() < opts.count && attempt < max_attempts) {
    const std::size_t batch = std::min(opts.count - result.accepted.size(), max_attempts - attempt);
    std::vector<SynthesisOutcome> outcomes(batch);
    // Each attempt owns its substream, so the parallel batch is order-independent.
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < batch; ++i) {
      const std::size_t a = attempt + i;
      try {
        Rng rng(derive_seed(opts.seed, "scenario", a));
        const Scenario sc = sample_scenario(tax, rng);
        outcomes[i] = synthesize_task(sc, opts.max_rounds, registry, derive_seed(opts.seed, "synthesis", a), "");
      } catch (const std::exception& e) {
        outcomes[i].failure_reason = e.what();
      }
    }
    attempt += batch;
    for (auto& o : outcomes) {
      if (o.accepted) {
        char id[32];
        std::snprintf(id, sizeof id, "task-%04zu", result.accepted.size());
        o.task.id = id;
        result.accepted.push_back(std::move(o));
      } else {
        result.rejected.push_back(std::move(o));
      }
    }
  }
  return result;
}

ConsistencyResult consistency_filter(const std::vector<Task>& tasks,
                                     std::shared_ptr<const policy::PolicyHandle> reference_agent,
                                     orchestrator::Cluster& cluster, const ConsistencyOptions& opts) {
  if (opts.k < 1) throw SynthesisError("consistency filter needs k >= 1");
  std::vector<std::vector<std::future<orchestrator::SessionResult>>> futures(tasks.size());
  std::vector<std::vector<std::uint64_t>> seeds(tasks.size());
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    for (std::size_t i = 0; i < opts.k; ++i) {
      orchestrator::SessionSpec spec;
      spec.task = tasks[t];
      spec.policy = reference_agent;
      spec.step_budget = opts.step_budget;
      spec.seed = derive_seed(opts.seed, "consistency:" + tasks[t].id, i);
      seeds[t].push_back(spec.seed);
      futures[t].push_back(cluster.submit(std::move(spec)));
    }
  }
  ConsistencyResult result;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const Task& task = tasks[t];
    ConsistencyRecord rec;
    rec.task_id = task.id;
    std::size_t validator_pass = 0, oracle_pass = 0, disagree = 0;
    bool crashed = false;
    for (std::size_t i = 0; i < opts.k; ++i) {
      auto r = futures[t][i].get();
      if (r.status != orchestrator::SessionStatus::done) {
        crashed = true;
        rec.reasons.push_back("reference_agent_crash: " + r.error);
        continue;
      }
      if (task.solution.empty()) continue;
      std::string gt_hash;
      try {
        gt_hash = sb::state_hash(sb::replay(sb::reset(task, seeds[t][i]), task.solution), sb::HashMode::relaxed);
      } catch (const std::exception& e) {
        crashed = true;
        rec.reasons.push_back(std::string("ground_truth_replay_error: ") + e.what());
        continue;
      }
      ++rec.rollouts;
      const int v = r.trajectory->reward;
      const int o = r.trajectory->terminal_relaxed_hash == gt_hash ? 1 : 0;
      validator_pass += v;
      oracle_pass += o;
      if (v != o) ++disagree;
      if (v == 1 && o == 0) ++rec.false_positives;
    }
    if (task.solution.empty()) rec.reasons.push_back("no_ground_truth");
    if (rec.rollouts > 0) {
      const double n = static_cast<double>(rec.rollouts);
      rec.validator_rate = validator_pass / n;
      rec.oracle_rate = oracle_pass / n;
      rec.disagreement = disagree / n;
    }
    if (rec.false_positives > 0) rec.reasons.push_back("validator_false_positive");
    if (rec.disagreement > opts.delta) rec.reasons.push_back("disagreement_above_delta");
    rec.flagged = crashed || !rec.reasons.empty();
    (rec.flagged ? result.flagged : result.kept).push_back(task);
    result.records.push_back(std::move(rec));
  }
  return result;
}

std::vector<std::string> normalize_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

double jaccard(const std::string& a, const std::string& b) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
  for (const auto& t : normalize_tokens(a)) ++counts[t].first;
  for (const auto& t : normalize_tokens(b)) ++counts[t].second;
  if (counts.empty()) return 1.0;
  std::size_t inter = 0, uni = 0;
  for (const auto& [_, c] : counts) {
    inter += std::min(c.first, c.second);
    uni += std::max(c.first, c.second);
  }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::string config_hash(const json& init_config) { return hex64(fnv1a64(init_config.dump())); }

std::string gt_terminal_hash(const Task& task) {
  if (task.solution.empty()) return "";
  try {
    return sb::state_hash(sb::replay(sb::reset(task, 0), task.solution));
  } catch (const std::exception&) {
    return "";
  }
}

DecontamResult decontaminate(const std::vector<Task>& tasks, const std::vector<Task>& benchmark, const DecontamOptions& opts) {
  std::map<std::string, std::string> config_hashes, validators, terminals;  // value -> benchmark id
  for (const auto& b : benchmark) {
    config_hashes.emplace(config_hash(b.init_config), b.id);
    validators.emplace(canonical_validator(b.validator), b.id);
    if (auto h = gt_terminal_hash(b); !h.empty()) terminals.emplace(h, b.id);
  }
  DecontamResult result;
  for (const auto& task : tasks) {
    SimilarityScore score{task.id, 0.0, ""};
    for (const auto& b : benchmark) {
      const double s = jaccard(task.instruction, b.instruction);
      if (s > score.max_similarity || score.benchmark_id.empty()) score = {task.id, s, b.id};
    }
    Removal rm{task.id, {}, score.max_similarity, score.benchmark_id};
    if (!benchmark.empty() && score.max_similarity >= opts.theta_sem) rm.reasons.push_back("semantic");
    if (auto it = config_hashes.find(config_hash(task.init_config)); it != config_hashes.end()) {
      rm.reasons.push_back("configuration");
      if (rm.reasons.size() == 1) rm.benchmark_id = it->second;
    }
    auto vit = validators.find(canonical_validator(task.validator));
    auto tit = terminals.end();
    if (auto h = gt_terminal_hash(task); !h.empty()) tit = terminals.find(h);
    if (vit != validators.end() || tit != terminals.end()) {
      rm.reasons.push_back("evaluator");
      if (rm.reasons.size() == 1) rm.benchmark_id = vit != validators.end() ? vit->second : tit->second;
    }
    result.scores.push_back(score);
    if (rm.reasons.empty()) result.kept.push_back(task);
    else result.removed.push_back(std::move(rm));
  }
  return result;
}

json consistency_record_to_json(const ConsistencyRecord& r) {
  return {{"task_id", r.task_id},         {"rollouts", r.rollouts},       {"validator_rate", r.validator_rate},
          {"oracle_rate", r.oracle_rate}, {"disagreement", r.disagreement}, {"false_positives", r.false_positives},
          {"reasons", r.reasons},         {"flagged", r.flagged}};
}

json removal_to_json(const Removal& r) {
  return {{"task_id", r.task_id}, {"reasons", r.reasons}, {"similarity", r.similarity}, {"benchmark_id", r.benchmark_id}};
}

}  // namespace evoloop::synthesis
