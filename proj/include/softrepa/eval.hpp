#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "softrepa/checkpoint.hpp"
#include "softrepa/corpus.hpp"
#include "softrepa/mi.hpp"
#include "softrepa/sampler.hpp"

namespace softrepa {

// Verifier-based alignment scoring, category breakdown in the style of
// compositional text-to-image benchmarks, and paired before/after comparison
// with exact sign tests across seeds.
//
// Categories: single and two partition all captions by object count and
// score full verifier correctness (two ignores colors: both shapes at both
// claimed positions). counting and position score those attributes over all
// captions; colors scores color attributes over one-object captions;
// color_attribution scores them over two-object captions.

struct CategoryStat {
  std::int64_t correct = 0;
  std::int64_t total = 0;

  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
  // Binomial standard error of the accuracy.
  double stderr_() const;
};

using CategoryMap = std::map<std::string, CategoryStat>;

struct EvalReport {
  std::string config_digest;
  std::vector<std::uint64_t> seeds;
  int n_per_caption = 0;
  float guidance_w = 0.0f;
  int steps = 0;
  bool use_soft = false;
  std::uint64_t caption_set_hash = 0;

  CategoryStat overall;
  CategoryMap categories;
  std::vector<CategoryMap> per_seed;  // parallel to seeds; includes "overall"

  std::optional<float> val_loss;  // contrastive validation loss
  std::optional<MiEstimate> mi;
  std::optional<float> moment_distance;
};

std::uint64_t caption_set_hash(const std::vector<Caption>& captions);

// Samples n_per_caption images per caption per seed, scores each with the
// verifier, and aggregates. Deterministic in (checkpoint, captions, g, seeds).
EvalReport eval_alignment(const Checkpoint& ck, const std::vector<Caption>& captions,
                          const GuidanceConfig& g, int n_per_caption,
                          const std::vector<std::uint64_t>& seeds);

// eval_alignment plus the dataset-dependent metrics: contrastive validation
// loss, the MI estimate, and moment distance against held-out images.
EvalReport run_full_eval(const Checkpoint& ck, const Dataset& ds,
                         const std::vector<Caption>& captions, const GuidanceConfig& g,
                         int n_per_caption, const std::vector<std::uint64_t>& seeds);

// Squared Fréchet distance between diagonal Gaussians fitted per pixel:
// |mu_a - mu_b|^2 + sum_i (sqrt(va_i) - sqrt(vb_i))^2.
double moment_distance(const std::vector<Tensor>& a, const std::vector<Tensor>& b);

// Exact two-sided binomial sign test at p=1/2; ties excluded by the caller.
double sign_test_p(int wins, int losses);

// Paired delta table. Requires both reports to cover the same caption set,
// seeds, and sampling settings.
std::string compare(const EvalReport& base, const EvalReport& tuned);

std::string report_to_json(const EvalReport& r);
EvalReport report_from_json(const std::string& text);
void save_report(const std::string& path, const EvalReport& r);
EvalReport load_report(const std::string& path);

}  // namespace softrepa
