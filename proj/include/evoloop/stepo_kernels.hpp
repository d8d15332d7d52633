#pragma once

// Flat token-major layout of a group and the reduction kernels behind the
// objective. The OpenMP kernels parallelize over independent groups (and
// over tokens for the elementwise pass); every reduction runs in a fixed
// serial order, so they match the serial reference bit for bit.

#include <cstddef>
#include <vector>

#include "evoloop/stepo.hpp"

namespace evoloop::stepo {

struct FlatGroup {
  std::size_t G = 0;
  std::vector<double> logp_theta, logp_old, logp_ref;  // supervised tokens only
  std::vector<double> step_advantage;                  // per supervised step
  std::vector<std::size_t> step_begin;                 // token offsets, size steps+1
  std::vector<std::size_t> traj_begin;                 // step offsets, size G+1
  std::size_t total_tokens = 0;                        // including unsupervised ones
};

FlatGroup flatten(const GroupRollout& g, Granularity granularity, const StepMask* mask = nullptr);

// Neumaier compensated accumulator.
class Compensated {
 public:
  void add(double x);
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

struct TokenTerms {
  std::vector<double> value;  // min-term - beta * kl
  std::vector<double> kl;
  std::vector<unsigned char> clipped;
};

void token_terms_serial(const FlatGroup& f, const ClipConfig& cfg, TokenTerms& out);
void token_terms_omp(const FlatGroup& f, const ClipConfig& cfg, TokenTerms& out);

// tokens -> steps (x 1/K_t) -> trajectories -> 1/G, all compensated.
ObjectiveResult reduce_terms(const FlatGroup& f, const TokenTerms& terms);

ObjectiveResult objective_serial(const FlatGroup& f, const ClipConfig& cfg);
ObjectiveResult objective_omp(const FlatGroup& f, const ClipConfig& cfg);

std::vector<ObjectiveResult> objective_batch_serial(const std::vector<FlatGroup>& groups, const ClipConfig& cfg);
std::vector<ObjectiveResult> objective_batch_omp(const std::vector<FlatGroup>& groups, const ClipConfig& cfg);

}  // namespace evoloop::stepo
