#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "softrepa/corpus.hpp"
#include "softrepa/rng.hpp"
#include "softrepa/tensor.hpp"

namespace softrepa {

// Two-stream diffusion transformer over patchified image tokens and caption
// token embeddings. Both streams carry their own modulation, projections, and
// MLP; attention is joint over the concatenated [text; image] sequence. All
// modulation layers and the output head are zero-initialized, so a freshly
// constructed model predicts exactly zero velocity.

struct DenoiserConfig {
  int layers = 8;
  int hidden = 64;
  int heads = 4;
  int patch = 4;
  int image_size = kImageSize;
  int channels = kChannels;
  int caption_len = kCaptionLen;
  int vocab = kVocabSize;
  int time_dim = 64;       // sinusoidal feature width
  float p_uncond = 0.1f;   // caption dropout rate during base training

  bool operator==(const DenoiserConfig&) const = default;

  void validate() const;
  int grid() const { return image_size / patch; }
  int img_tokens() const { return grid() * grid(); }
  int patch_dim() const { return channels * patch * patch; }
  int head_dim() const { return hidden / heads; }
};

// t in [0,1] -> bucket index in [0, buckets)
int bucket_of(float t, int buckets);

struct SoftConfig {
  std::vector<int> layer_set = {0, 1, 2, 3, 4};  // block indices
  int buckets = 8;
  int tokens = 4;   // soft tokens prepended per conditioned layer
  float init_std = 0.02f;
};

class Denoiser;

// Learnable text prefix, one row of [tokens x hidden] per (layer, time bucket).
// Rows are prepended to the text stream at the start of each conditioned
// layer and dropped again at its end; they carry no positional embedding.
class SoftTokenBank {
 public:
  SoftTokenBank() = default;
  SoftTokenBank(const SoftConfig& cfg, int hidden, std::uint64_t seed);
  // Every row starts as the first `tokens` unconditional caption embeddings.
  SoftTokenBank(const SoftConfig& cfg, const Denoiser& model);

  SoftConfig cfg;
  int hidden = 0;
  Tensor table;  // [|layer_set| * buckets, tokens * hidden]

  std::int64_t trainable_count() const;
  int layer_slot(int layer) const;  // position in layer_set, -1 if absent
  int row(int slot, int bucket) const { return slot * cfg.buckets + bucket; }
};

struct LoraConfig {
  std::vector<int> layer_set = {0, 1, 2, 3, 4};
  int rank = 4;
  float init_std = 0.02f;
};

// Low-rank deltas on the q/k/v/o projections of both streams. B starts at
// zero, so a fresh adapter leaves the base model exactly unchanged. The
// conventional alpha/rank output scale is fixed at 1 and folded away.
class LoraAdapters {
 public:
  LoraAdapters() = default;
  LoraAdapters(const LoraConfig& cfg, int hidden, std::uint64_t seed);

  LoraConfig cfg;
  int hidden = 0;
  // Indexed by ((slot * 2 + stream) * 4 + proj); stream 0 = text, 1 = image;
  // proj order q, k, v, o. a[i] is [hidden, rank], b[i] is [rank, hidden].
  std::vector<Tensor> a, b;

  std::int64_t trainable_count() const;
  int layer_slot(int layer) const;
  int index(int slot, int stream, int proj) const { return (slot * 2 + stream) * 4 + proj; }
};

struct ForwardOptions {
  const SoftTokenBank* soft = nullptr;
  const LoraAdapters* lora = nullptr;
  // Adds -1e30 to attention scores at soft-token key positions; real-token
  // outputs must match a soft-free forward bit for bit.
  bool mask_soft = false;
};

class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& cfg, std::uint64_t seed);

  DenoiserConfig cfg;
  // Named parameters in construction order; names key checkpoint sections.
  std::vector<std::pair<std::string, Tensor>> params;

  // xt [B, C, G, G], one t and caption per sample -> velocity [B, C, G, G].
  Tensor forward(const Tensor& xt, const std::vector<float>& t,
                 const std::vector<Caption>& captions, const ForwardOptions& opt = {}) const;
  // Single sample [C, G, G] convenience wrapper.
  Tensor forward_one(const Tensor& xt, float t, const Caption& caption,
                     const ForwardOptions& opt = {}) const;

  // Token embeddings plus text positions, [caption_len, hidden]. With dropout
  // on, the whole caption is replaced by the null caption with p_uncond.
  Tensor embed_caption(const Caption& caption, bool dropout, RngStream& rng) const;

  std::int64_t param_count() const;
  void set_requires_grad(bool on);
  Tensor param(const std::string& name) const;

 private:
  struct StreamParams {
    Tensor mod_w, mod_b;    // [d, 6d], [6d]
    Tensor qkv_w, qkv_b;    // [d, 3d], [3d]
    Tensor out_w, out_b;    // [d, d], [d]
    Tensor mlp1_w, mlp1_b;  // [d, 4d], [4d]
    Tensor mlp2_w, mlp2_b;  // [4d, d], [d]
  };
  struct BlockParams {
    StreamParams txt, img;
  };

  Tensor tok_emb_, txt_pos_, img_pos_;
  Tensor patch_w_, patch_b_;
  Tensor time_w1_, time_b1_, time_w2_, time_b2_;
  std::vector<BlockParams> blocks_;
  Tensor final_mod_w_, final_mod_b_, final_out_w_, final_out_b_;

  Tensor patchify(const Tensor& xt) const;
  Tensor unpatchify(const Tensor& tokens) const;
  Tensor time_embedding(const std::vector<float>& t) const;
  friend class SoftTokenBank;
};

}  // namespace softrepa
