#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "softrepa/checkpoint.hpp"
#include "softrepa/config.hpp"
#include "softrepa/corpus.hpp"
#include "softrepa/losses.hpp"

namespace softrepa {

// Train/validation index split, stable under the dataset seed.
struct DatasetSplit {
  std::vector<int> train, val;
};
DatasetSplit split_dataset(const Dataset& ds, int val_percent);

// One fine-tuning batch per the contrastive protocol: `positives` pairs drawn
// from the given indices, an attribute-flip negative pool of `negatives`
// captions, and shared (or per-image) noise/time draws, all keyed by
// (seed, step).
ContrastiveBatch make_contrastive_batch(const Dataset& ds, const std::vector<int>& indices,
                                        const LossConfig& loss, std::uint64_t seed,
                                        std::int64_t step);

// Pretrains every denoiser weight with the flow-matching loss and caption
// dropout. Deterministic in (dataset, config, epochs, seed). When csv_path is
// non-empty a loss-curve CSV (step, lr, loss, softrepa_loss, dsm_loss,
// val_loss) is written there.
Checkpoint train_base(const Dataset& ds, const RunConfig& cfg, int epochs, std::uint64_t seed,
                      const std::string& csv_path = "");

// Contrastive fine-tuning of the soft-token table; the base stays frozen and
// is embedded in the result untouched.
Checkpoint train_soft(const Checkpoint& base, const Dataset& ds, const RunConfig& cfg,
                      int iterations, std::uint64_t seed, const std::string& csv_path = "");

// Same loop with low-rank projection adapters trainable instead.
Checkpoint train_lora(const Checkpoint& base, const Dataset& ds, const RunConfig& cfg,
                      int iterations, std::uint64_t seed, const std::string& csv_path = "");

// Soft-token grid over conditioned-layer count (first n layers) and token
// length, each cell trained `iterations` steps from the same base. Returns a
// CSV (layers,tokens,trainable,steps,final_loss,final_val_loss) with the
// closing losses measured on fixed probe batches under the tuned bank.
std::string ablation_sweep(const Checkpoint& base, const Dataset& ds,
                           const std::vector<int>& layer_counts,
                           const std::vector<int>& token_lengths, int iterations,
                           std::uint64_t seed);

}  // namespace softrepa
