#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "softrepa/checkpoint.hpp"
#include "softrepa/corpus.hpp"
#include "softrepa/tensor.hpp"

namespace softrepa {

// Euler integration of the probability-flow ODE dx = v(x,t) dt on a uniform
// grid, run backward from t=1 (noise) for generation and forward from t=0
// for inversion. Endpoint evaluations clamp t to 1e-5 so the x0-prediction
// form never divides by zero.

struct GuidanceConfig {
  float w = 2.0f;  // v = v_uncond + w (v_cond - v_uncond)
  int steps = 50;
  bool use_soft = false;  // soft tokens / adapters on the conditional branch
  enum class Param { velocity, x0_pred } parameterization = Param::velocity;

  void validate() const;
};

// States from x1 down to the sample; t strictly decreasing from 1 to 0.
struct Trajectory {
  std::vector<float> t;
  std::vector<Tensor> x;
};

struct SampleResult {
  Tensor image;  // [C, G, G]
  Trajectory trajectory;
};

// w=0 never evaluates the conditional branch (so the caption cannot affect
// the output); w=1 never evaluates the unconditional one.
Tensor guided_velocity(const Checkpoint& ck, const Tensor& x, float t,
                       const std::vector<Caption>& captions, const GuidanceConfig& g);

SampleResult sample(const Checkpoint& ck, const Caption& caption, const GuidanceConfig& g,
                    std::uint64_t seed);

// One image per (caption, noise seed) row, integrated as a single batch.
std::vector<Tensor> sample_batch(const Checkpoint& ck, const std::vector<Caption>& captions,
                                 const GuidanceConfig& g,
                                 const std::vector<std::uint64_t>& noise_seeds);

// Integrates the generation ODE from a given x1 under one caption.
Tensor generate_from(const Checkpoint& ck, const Tensor& x1, const Caption& caption,
                     const GuidanceConfig& g);

// Forward-time integration from the image (t=0) to a noise estimate (t=1)
// under the conditional velocity only. steps=0 returns the image unchanged.
Tensor invert(const Checkpoint& ck, const Tensor& image, const Caption& caption, int steps,
              bool use_soft);

struct EditResult {
  Tensor image;
  VerifierReport target_report;  // verifier outcome against the target caption
  float mse_vs_source = 0.0f;    // pixel MSE against the input image
};

// Invert under the source caption, regenerate under the target caption.
EditResult edit(const Checkpoint& ck, const Tensor& image, const Caption& source,
                const Caption& target, const GuidanceConfig& g);

// Flat raster with self-describing header; digest ties the file to the
// config that produced it.
void save_image(const std::string& path, const Tensor& image, const std::string& digest);
struct LoadedImage {
  Tensor image;
  std::string digest;
};
LoadedImage load_image(const std::string& path);

}  // namespace softrepa
