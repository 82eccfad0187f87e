#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "softrepa/corpus.hpp"
#include "softrepa/denoiser.hpp"
#include "softrepa/flow.hpp"
#include "softrepa/tensor.hpp"

namespace softrepa {

// Contrastive objective over bounded logits. A candidate's logit is
// l = exp(-mean_sq_residual / tau(t)) in (0,1], and the per-image loss is a
// softmax cross-entropy taking those logits as inputs, so the loss itself is
// a double exponential of the residual. The boundedness keeps every
// cross-entropy term inside [log(1+(N-1)/e), log(1+(N-1)e)].

struct TemperatureSchedule {
  enum class Kind { constant, linear_in_t };
  Kind kind = Kind::constant;
  float tau0 = 1.0f;
  std::optional<float> tau1;  // linear_in_t value at t=1; defaults to tau0

  float operator()(float t) const;
};

// P positive pairs plus a shared negative caption pool. Either one (eps, t)
// draw shared by every logit in the batch (the default) or one draw per
// image; candidates within an image always share their image's draw.
struct ContrastiveBatch {
  std::vector<Tensor> images;          // P tensors [C, G, G]
  std::vector<Caption> positives;      // P
  std::vector<Caption> negative_pool;  // Q
  std::vector<Tensor> eps;             // size 1 (shared) or P (per image)
  std::vector<float> t;                // size 1 (shared) or P

  bool shared_draw() const { return eps.size() == 1; }
  const Tensor& eps_for(int image) const { return eps[shared_draw() ? 0 : image]; }
  float t_for(int image) const { return t[t.size() == 1 ? 0 : image]; }
  std::uint64_t draw_hash(int image) const;
  void validate() const;
};

// Candidate captions for one image: own positive, the other positives, then
// the negative pool, deduplicated keeping first occurrence. The positive is
// always index 0.
struct CandidateSet {
  std::vector<Caption> captions;
  int positive = 0;
};
CandidateSet candidate_set(const ContrastiveBatch& batch, int image);

// One forward on x_t = (1-t) x0 + t eps; logit in (0,1], equal to 1 iff the
// velocity residual is exactly zero. Requires t in the open interval (0,1).
Tensor logit(const Denoiser& model, const ForwardOptions& opt, const Tensor& x0,
             const Caption& caption, const Tensor& eps, float t,
             const TemperatureSchedule& tau);

// Mean over images of -log softmax(l)[positive], one batched forward for all
// (image, candidate) rows. Every image needs at least 2 candidates.
Tensor softrepa_loss(const Denoiser& model, const ForwardOptions& opt,
                     const ContrastiveBatch& batch, const TemperatureSchedule& tau);

// softrepa_loss + dsm_weight * flow-matching loss on the positive pairs,
// computed from the same forward under the same draws. `parts` receives the
// two unweighted term values when given (dsm only when dsm_weight > 0).
struct ContrastiveParts {
  float softrepa = 0.0f;
  std::optional<float> dsm;
};
Tensor combined_loss(const Denoiser& model, const ForwardOptions& opt,
                     const ContrastiveBatch& batch, const TemperatureSchedule& tau,
                     float dsm_weight, ContrastiveParts* parts = nullptr);

}  // namespace softrepa
