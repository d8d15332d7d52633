#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "evoloop/stepo.hpp"
#include "evoloop/stepo_kernels.hpp"
#include "fixtures.hpp"

using namespace evoloop;
using namespace evoloop::stepo;

namespace {

GroupRollout random_group(Rng& rng, std::size_t max_T = 6, bool binary = true) {
  GroupRollout g;
  g.task_id = "g";
  const std::size_t G = 2 + rng.index(7);
  for (std::size_t i = 0; i < G; ++i) {
    TrajectoryLogprobs t;
    t.reward = binary ? static_cast<double>(rng.bernoulli(0.5)) : rng.uniform01();
    const std::size_t T = 1 + rng.index(max_T);
    for (std::size_t s = 0; s < T; ++s) {
      StepLogprobs st;
      const std::size_t K = 1 + rng.index(4);
      for (std::size_t k = 0; k < K; ++k) {
        st.old.push_back(-3.0 * rng.uniform01());
        st.theta.push_back(st.old.back() + 0.6 * (rng.uniform01() - 0.5));
        st.ref.push_back(st.old.back() + 0.6 * (rng.uniform01() - 0.5));
      }
      t.steps.push_back(std::move(st));
    }
    g.trajectories.push_back(std::move(t));
  }
  if (binary) {
    g.trajectories[0].reward = 1.0;
    g.trajectories[1].reward = 0.0;
  }
  return g;
}

GroupRollout on_policy(GroupRollout g) {
  for (auto& t : g.trajectories)
    for (auto& s : t.steps) s.old = s.ref = s.theta;
  return g;
}

// Direct transcription of the objective with plain loops.
double objective_oracle(const GroupRollout& g, const ClipConfig& cfg, bool trajectory_level) {
  const double G = static_cast<double>(g.trajectories.size());
  double mean = 0.0;
  for (const auto& t : g.trajectories) mean += t.reward / G;
  double var = 0.0;
  for (const auto& t : g.trajectories) var += (t.reward - mean) * (t.reward - mean) / G;
  const double sd = std::sqrt(var);
  double J = 0.0;
  for (const auto& t : g.trajectories) {
    const double A = sd == 0.0 ? 0.0 : (t.reward - mean) / sd;
    const std::size_t T = t.steps.size();
    for (std::size_t s = 0; s < T; ++s) {
      if (trajectory_level && s + 1 != T) continue;
      const double a = trajectory_level ? A : A / static_cast<double>(T);
      const auto& st = t.steps[s];
      double step = 0.0;
      for (std::size_t k = 0; k < st.theta.size(); ++k) {
        const double r = std::exp(st.theta[k] - st.old[k]);
        const double c = std::min(std::max(r, 1.0 - cfg.eps_low), 1.0 + cfg.eps_high);
        const double d = st.ref[k] - st.theta[k];
        step += std::min(r * a, c * a) - cfg.beta_kl * (std::exp(d) - d - 1.0);
      }
      J += step / static_cast<double>(st.theta.size());
    }
  }
  return J / G;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

double J_of(const fx::ScoredGroup& s, const policy::PolicyHandle& theta, const ClipConfig& cfg, Granularity gran) {
  const auto g = score_group("grad", s.trajs, theta, s.old, s.ref);
  return gran == Granularity::step ? stepo_objective(g, cfg).J : grpo_trajectory_objective(g, cfg).J;
}

}  // namespace

TEST_CASE("group advantages examples") {
  CHECK(group_advantages({1, 0, 0, 1}) == std::vector<double>{1, -1, -1, 1});
  CHECK(group_advantages({1, 1, 1, 1}) == std::vector<double>{0, 0, 0, 0});
  CHECK(group_advantages({1, 0}) == std::vector<double>{1, -1});
  CHECK_THROWS_AS(group_advantages({1}), StepoError);
  CHECK_THROWS_AS(group_advantages({}), StepoError);
}

TEST_CASE("group advantages are normalized") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> r(2 + rng.index(15));
    for (auto& x : r) x = rng.bernoulli(0.3) ? rng.uniform01() : static_cast<double>(rng.bernoulli(0.5));
    r[0] = 0.0;
    r[1] = 1.0;
    const auto a = group_advantages(r);
    const double n = static_cast<double>(a.size());
    const double mean = std::accumulate(a.begin(), a.end(), 0.0) / n;
    double var = 0.0;
    for (double x : a) var += (x - mean) * (x - mean) / n;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-9);
  }
}

TEST_CASE("step allocation") {
  CHECK(allocate_step_advantages(1.0, 4) == std::vector<double>{0.25, 0.25, 0.25, 0.25});
  CHECK(allocate_step_advantages(-1.0, 1) == std::vector<double>{-1.0});
  CHECK_THROWS_AS(allocate_step_advantages(1.0, 0), StepoError);
  Rng rng(2);
  for (int i = 0; i < 10000; ++i) {
    const double A = 6.0 * (rng.uniform01() - 0.5);
    const std::size_t T = 1 + rng.index(50);
    const auto v = allocate_step_advantages(A, T);
    REQUIRE(v.size() == T);
    Compensated sum;
    for (double x : v) sum.add(x);
    CHECK(std::abs(sum.value() - A) <= 1e-15 * std::abs(A) * static_cast<double>(T) + 1e-300);
  }
}

TEST_CASE("importance ratios") {
  CHECK(importance_ratios({-1.0, -2.0}, {-1.0, -2.0}) == std::vector<double>{1.0, 1.0});
  const auto r = importance_ratios({-1.0, -0.5}, {-1.0, -1.0});
  CHECK(r[1] == doctest::Approx(1.648721).epsilon(1e-6));
  CHECK(r[1] == std::exp(0.5));
  const auto tiny = importance_ratios({-41.0}, {-1.0});
  CHECK(std::isfinite(tiny[0]));
  CHECK(tiny[0] >= 0.0);
  CHECK(tiny[0] < 1e-17);
  CHECK_THROWS_AS(importance_ratios({1.0}, {}), StepoError);
}

TEST_CASE("kl estimate and clip helpers") {
  CHECK(kl_estimate(-1.0, -1.0) == 0.0);
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) CHECK(kl_estimate(-3 * rng.uniform01(), -3 * rng.uniform01()) >= 0.0);
  const ClipConfig cfg{0.2, 0.28, 0.0};
  CHECK(surrogate(1.5, 1.0, cfg) == doctest::Approx(1.28));
  CHECK(surrogate(0.5, -1.0, cfg) == doctest::Approx(-0.8));
  CHECK(surrogate(0.5, 1.0, cfg) == 0.5);
  CHECK(clip_active(1.5, 1.0, cfg));
  CHECK_FALSE(clip_active(1.5, -1.0, cfg));
  CHECK(clip_active(0.5, -1.0, cfg));
  CHECK_FALSE(clip_active(1.0, 1.0, cfg));
  CHECK_THROWS_AS(check_clip({0.0, 0.2, 0.0}), StepoError);
  CHECK_THROWS_AS(check_clip({1.0, 0.2, 0.0}), StepoError);
  CHECK_THROWS_AS(check_clip({0.2, 0.2, -1.0}), StepoError);
}

TEST_CASE("objective is zero on-policy") {
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    const auto g = on_policy(random_group(rng, 6, i % 2 == 0));
    const auto res = stepo_objective(g, {});
    CHECK(std::abs(res.J) < 1e-9);
    CHECK(res.diag.clip_fraction == 0.0);
    CHECK(res.diag.kl_mean == 0.0);
    CHECK(std::abs(grpo_trajectory_objective(g, {}).J) < 1e-9);
  }
}

TEST_CASE("clip binds on a single deviating token") {
  const ClipConfig cfg{0.2, 0.28, 0.0};
  GroupRollout g;
  g.trajectories = {{1.0, {{{-1.0}, {-1.0}, {-1.0}}}}, {0.0, {{{-1.0}, {-1.0}, {-1.0}}}}};
  auto& tok = g.trajectories[0].steps[0].theta[0];
  tok = -1.0 + std::log(1.0 + cfg.eps_high + 0.1);
  g.trajectories[0].steps[0].ref[0] = tok;
  const auto res = stepo_objective(g, cfg);
  // Â = [1, -1]; the clipped token contributes (1 + eps_high) * 1.
  CHECK(res.J == doctest::Approx(((1.0 + cfg.eps_high) - 1.0) / 2.0).epsilon(1e-12));
  CHECK(res.diag.clipped_tokens == 1);
  CHECK(res.diag.clip_fraction == 0.5);
}

TEST_CASE("objective matches the loop oracle") {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const auto g = random_group(rng, 6, i % 3 != 0);
    const ClipConfig cfg{0.1 + 0.2 * rng.uniform01(), 0.1 + 0.2 * rng.uniform01(), 0.1 * rng.uniform01()};
    CHECK(stepo_objective(g, cfg).J == doctest::Approx(objective_oracle(g, cfg, false)).epsilon(1e-12));
    CHECK(grpo_trajectory_objective(g, cfg).J == doctest::Approx(objective_oracle(g, cfg, true)).epsilon(1e-12));
  }
}

TEST_CASE("zero KL weight makes the reference irrelevant") {
  Rng rng(6);
  for (int i = 0; i < 100; ++i) {
    auto g = random_group(rng);
    for (auto& t : g.trajectories)
      for (auto& s : t.steps) s.old = s.theta;
    auto other = g;
    for (auto& t : other.trajectories)
      for (auto& s : t.steps)
        for (auto& x : s.ref) x -= rng.uniform01();
    const ClipConfig cfg{0.2, 0.2, 0.0};
    CHECK(stepo_objective(g, cfg).J == stepo_objective(other, cfg).J);
  }
}

TEST_CASE("trajectory-level baseline") {
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    auto g = random_group(rng, 1);
    const ClipConfig cfg{};
    CHECK(grpo_trajectory_objective(g, cfg).J == stepo_objective(g, cfg).J);
  }
  for (int i = 0; i < 200; ++i) {
    auto g = random_group(rng, 8);
    std::size_t total = 0, final_tokens = 0, steps = 0;
    for (const auto& t : g.trajectories) {
      for (const auto& s : t.steps) total += s.theta.size();
      final_tokens += t.steps.back().theta.size();
      steps += t.steps.size();
    }
    const auto grpo = grpo_trajectory_objective(g, {});
    const auto full = stepo_objective(g, {});
    CHECK(grpo.diag.total_tokens == total);
    CHECK(grpo.diag.supervised_tokens == final_tokens);
    CHECK(grpo.diag.supervised_steps == g.trajectories.size());
    CHECK(full.diag.supervised_tokens == total);
    CHECK(full.diag.supervised_steps == steps);
  }
}

TEST_CASE("step mask removes steps from supervision") {
  Rng rng(8);
  auto g = random_group(rng, 5);
  StepMask mask;
  for (const auto& t : g.trajectories) {
    mask.emplace_back(t.steps.size(), true);
    mask.back()[0] = false;
  }
  const auto res = stepo_objective(g, {}, &mask);
  std::size_t steps = 0;
  for (const auto& t : g.trajectories) steps += t.steps.size() - 1;
  CHECK(res.diag.supervised_steps == steps);
}

TEST_CASE("invalid groups") {
  GroupRollout g;
  g.trajectories = {{1.0, {{{-1.0}, {-1.0}, {-1.0}}}}};
  CHECK_THROWS_AS(stepo_objective(g, {}), StepoError);
  g.trajectories.push_back({0.0, {}});
  CHECK_THROWS_AS(stepo_objective(g, {}), StepoError);
  g.trajectories[1].steps = {{{-1.0, -2.0}, {-1.0}, {-1.0, -2.0}}};
  CHECK_THROWS_AS(stepo_objective(g, {}), StepoError);
  g.trajectories[1].steps = {{{NAN}, {-1.0}, {-1.0}}};
  CHECK_THROWS_AS(stepo_objective(g, {}), StepoError);
}

TEST_CASE("clip envelope") {
  Rng rng(9);
  for (int i = 0; i < 10000; ++i) {
    const ClipConfig cfg{0.05 + 0.3 * rng.uniform01(), 0.05 + 0.3 * rng.uniform01(), 0.0};
    const double r = 2.0 * rng.uniform01();
    const double A = 4.0 * (rng.uniform01() - 0.5);
    const double v = surrogate(r, A, cfg);
    const double lo = std::min(std::min(r, 1.0 - cfg.eps_low) * A, std::max(r, 1.0 + cfg.eps_high) * A);
    const double hi = std::max(std::min(r, 1.0 - cfg.eps_low) * A, std::max(r, 1.0 + cfg.eps_high) * A);
    CHECK(v >= lo - 1e-15);
    CHECK(v <= hi + 1e-15);
  }
}

TEST_CASE("gradient matches central finite differences") {
  Rng rng(10);
  const ClipConfig cfg{0.2, 0.2, 0.05};
  int groups = 0;
  while (groups < 100) {
    const auto s = fx::sampled_group(rng);
    if (fx::kink_distance(s, cfg) < 1e-3) continue;
    ++groups;
    for (auto gran : {Granularity::step, Granularity::trajectory}) {
      const auto grad = stepo_gradient(s.trajs, s.theta, s.old, s.ref, cfg, gran);
      const double h = 1e-5;
      // Every logit of a bucket the group touched, plus a few untouched ones.
      for (std::size_t k = 0; k < grad.size(); ++k) {
        if (grad[k] == 0.0 && rng.index(8) != 0) continue;
        auto plus = s.theta, minus = s.theta;
        plus.tabular()->logits()[k] += h;
        minus.tabular()->logits()[k] -= h;
        const double fd = (J_of(s, plus, cfg, gran) - J_of(s, minus, cfg, gran)) / (2 * h);
        CHECK(std::abs(grad[k] - fd) <= 1e-4 * std::max({std::abs(fd), std::abs(grad[k]), 1e-6}));
      }
    }
  }
}

TEST_CASE("gradient with zero advantage keeps only the KL term") {
  Rng rng(11);
  auto s = fx::sampled_group(rng);
  for (auto& t : s.trajs) t.reward = 1;
  const auto kl_only = stepo_gradient(s.trajs, s.theta, s.old, s.ref, {0.2, 0.2, 0.05});
  CHECK(std::any_of(kl_only.begin(), kl_only.end(), [](double v) { return v != 0.0; }));
  const auto none = stepo_gradient(s.trajs, s.theta, s.old, s.ref, {0.2, 0.2, 0.0});
  CHECK(std::all_of(none.begin(), none.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("on-policy gradient is the weighted score function") {
  Rng rng(12);
  auto s = fx::sampled_group(rng);
  s.theta = s.old;
  const auto grad = stepo_gradient(s.trajs, s.theta, s.old, s.ref, {0.2, 0.2, 0.0});
  std::vector<double> rewards;
  for (const auto& t : s.trajs) rewards.push_back(t.reward);
  const auto adv = group_advantages(rewards);
  std::vector<double> expect(grad.size(), 0.0);
  const double G = static_cast<double>(s.trajs.size());
  for (std::size_t i = 0; i < s.trajs.size(); ++i) {
    const auto& traj = s.trajs[i];
    const double T = static_cast<double>(traj.steps.size());
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      const policy::Query q{traj.task_id, traj.domain, traj.steps[t].observation.state_hash, t};
      const auto per_token = policy::logprob_gradient(*s.theta.tabular(), 1.0, q, *traj.steps[t].response);
      for (const auto& tok : per_token)
        for (const auto& [idx, v] : tok.entries) expect[idx] += adv[i] / T * v / static_cast<double>(per_token.size()) / G;
    }
  }
  for (std::size_t k = 0; k < grad.size(); ++k) CHECK(grad[k] == doctest::Approx(expect[k]).epsilon(1e-12));

  policy::PolicyHandle scripted;
  CHECK_THROWS_AS(stepo_gradient(s.trajs, scripted, s.old, s.ref, {}), StepoError);
}

TEST_CASE("serial and OpenMP kernels agree bit for bit") {
  Rng rng(13);
  std::vector<FlatGroup> flats;
  const ClipConfig cfg{0.2, 0.28, 0.02};
  for (int i = 0; i < 200; ++i) {
    const auto g = random_group(rng, 12, i % 2 == 0);
    const auto f = flatten(g, i % 5 == 0 ? Granularity::trajectory : Granularity::step);
    TokenTerms a, b;
    token_terms_serial(f, cfg, a);
    token_terms_omp(f, cfg, b);
    REQUIRE(a.value.size() == b.value.size());
    for (std::size_t k = 0; k < a.value.size(); ++k) {
      CHECK(same_bits(a.value[k], b.value[k]));
      CHECK(same_bits(a.kl[k], b.kl[k]));
      CHECK(a.clipped[k] == b.clipped[k]);
    }
    CHECK(same_bits(objective_serial(f, cfg).J, objective_omp(f, cfg).J));
    flats.push_back(f);
  }
  const auto s = objective_batch_serial(flats, cfg);
  const auto p = objective_batch_omp(flats, cfg);
  REQUIRE(s.size() == p.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK(same_bits(s[i].J, p[i].J));
    CHECK(same_bits(s[i].diag.kl_mean, p[i].diag.kl_mean));
    CHECK(s[i].diag.clipped_tokens == p[i].diag.clipped_tokens);
  }
}

TEST_CASE("score_group refuses placeholder responses") {
  Rng rng(14);
  auto s = fx::sampled_group(rng);
  auto trajs = s.trajs;
  trajs[0].steps[0].response->placeholder = true;
  CHECK_THROWS_AS(score_group("grad", trajs, s.theta, s.old, s.ref), StepoError);
  trajs[0].steps[0].response.reset();
  CHECK_THROWS_AS(score_group("grad", trajs, s.theta, s.old, s.ref), StepoError);
  const auto j = diagnostics_to_json(stepo_objective(score_group("grad", s.trajs, s.theta, s.old, s.ref), {}).diag);
  CHECK(j.contains("clip_fraction"));
}
