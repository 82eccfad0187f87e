#pragma once

#include <cstdint>
#include <vector>

#include "softrepa/checkpoint.hpp"
#include "softrepa/corpus.hpp"
#include "softrepa/flow.hpp"

namespace softrepa {

// Pointwise mutual information between an image and its caption, estimated
// from conditional velocity residuals. Log-density proxies are Monte Carlo
// averages of weighted squared residuals; PMI exponentiates proxy
// differences computed per draw, so any per-draw constant cancels exactly.

enum class LambdaMode {
  uniform,     // weight 1, per-element mean residual
  likelihood,  // weight 2(1-t)/t, summed residual: the change of variables
               // that turns the residual integral into a log-density
};

// Conditional (w=1) velocity of a checkpoint, with its tuning applied when
// use_soft. The checkpoint must outlive the returned function.
VelocityFn velocity_of(const Checkpoint& ck, bool use_soft);

// -1/(2S) sum_s lambda_s * resid_s; 0 (the maximum) for a perfect model.
float neg_loglik_proxy(const VelocityFn& velocity, const Tensor& x0, const Caption& caption,
                       int mc_samples, LambdaMode mode, std::uint64_t seed);

struct PmiEstimate {
  float value = 0.0f;  // nats; at most log(candidates)
  int mc_samples = 0;
  int candidates = 0;
};

// All candidates share each (t, eps) draw. value = -log((1/N) sum_c exp(d_c))
// with d_c the per-draw-differenced proxy gap to the positive, so d_pos = 0
// by construction.
PmiEstimate pmi(const VelocityFn& velocity, const Tensor& x0, const Caption& positive,
                const std::vector<Caption>& candidates, int mc_samples, LambdaMode mode,
                std::uint64_t seed);

struct MiEstimate {
  float mi = 0.0f;
  float stderr_ = 0.0f;
  int n_pairs = 0;
  int mc_samples_per_pair = 0;
  bool soft = false;
};

// Mean PMI over pairs; per-pair candidate lists are the pair's caption plus
// other distinct in-set captions (up to max_candidates). mc_samples is the
// total draw budget, split evenly across pairs.
MiEstimate mutual_information(const VelocityFn& velocity, const std::vector<DatasetPair>& pairs,
                              int mc_samples, int max_pairs, int max_candidates, LambdaMode mode,
                              std::uint64_t seed);

MiEstimate mutual_information(const Checkpoint& ck, const std::vector<DatasetPair>& pairs,
                              bool use_soft, int mc_samples, int max_pairs, int max_candidates,
                              LambdaMode mode, std::uint64_t seed);

}  // namespace softrepa
