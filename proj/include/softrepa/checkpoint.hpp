#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "softrepa/config.hpp"
#include "softrepa/denoiser.hpp"

namespace softrepa {

// Self-describing model container: header (magic, version, config digest,
// config JSON, seed, step count, stage), named tensor sections, trailing
// CRC32 over everything before it. Loading verifies the CRC, the digest, and
// every tensor shape against the embedded config.

struct Checkpoint {
  RunConfig config;
  std::uint64_t seed = 0;
  std::uint64_t trained_steps = 0;
  std::string stage = "base";  // base | soft | lora
  Denoiser model;
  std::optional<SoftTokenBank> soft;
  std::optional<LoraAdapters> lora;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Inference-time adapter selection: with use_tuning the checkpoint's soft
// tokens or adapters (whichever its stage trained) are applied.
ForwardOptions options_for(const Checkpoint& ck, bool use_tuning);

}  // namespace softrepa
