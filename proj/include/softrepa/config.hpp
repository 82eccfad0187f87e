#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "softrepa/denoiser.hpp"
#include "softrepa/losses.hpp"
#include "softrepa/optim.hpp"

namespace softrepa {

// Every run is driven by one RunConfig. Artifacts embed digest(config) so
// downstream stages can detect mismatched inputs.

struct DataConfig {
  int count = 4096;
  std::uint64_t seed = 7;
  float two_object_fraction = 0.5f;
  int val_percent = 10;
};

struct LossConfig {
  TemperatureSchedule tau;
  int positives = 4;
  int negatives = 12;  // attribute-flip pool size; multiple of positives
  float dsm_weight = 0.0f;
  bool shared_draw = true;
};

struct OptimConfig {
  AdamWConfig adamw;
  int batch_size = 32;
  int restart_period = 1000;
  int restart_mult = 2;
  int log_every = 50;
  int val_every = 250;
};

struct SampleConfig {
  int steps = 32;
  float guidance = 2.0f;
};

struct EvalConfig {
  int captions = 64;
  int per_caption = 8;
  std::vector<std::uint64_t> seeds = {101, 102, 103, 104, 105};
  int mc_samples = 128;
  int mi_pairs = 32;
  int mi_candidates = 8;
};

struct SoftInitConfig {
  SoftConfig bank;
  bool uncond_init = false;  // seed rows from the unconditional embedding
};

struct RunConfig {
  DataConfig data;
  DenoiserConfig model;
  SoftInitConfig soft;
  LoraConfig lora;
  LossConfig loss;
  OptimConfig optim;
  SampleConfig sample;
  EvalConfig eval;

  void validate() const;
};

// Canonical JSON text (sorted keys, stable float formatting).
std::string to_json(const RunConfig& cfg);
// Strict parse over defaults: unknown keys are config errors.
RunConfig config_from_json(const std::string& text);
RunConfig load_config(const std::string& path);

// 16-hex-digit digest of the canonical JSON.
std::string config_digest(const RunConfig& cfg);

}  // namespace softrepa
