#include "softrepa/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "softrepa/errors.hpp"

namespace softrepa {

void DenoiserConfig::validate() const {
  check<config_error>(layers > 0, "model: layers must be positive");
  check<config_error>(hidden > 0 && heads > 0 && hidden % heads == 0,
                      "model: hidden must be a positive multiple of heads");
  check<config_error>(patch > 0 && image_size > 0 && image_size % patch == 0,
                      "model: image_size must be a positive multiple of patch");
  check<config_error>(channels > 0 && vocab > 0, "model: channels and vocab must be positive");
  check<config_error>(caption_len == kCaptionLen, "model: caption_len must match the corpus");
  check<config_error>(time_dim >= 2 && time_dim % 2 == 0, "model: time_dim must be even");
  check<config_error>(p_uncond >= 0.0f && p_uncond <= 1.0f, "model: p_uncond outside [0,1]");
}

int bucket_of(float t, int buckets) {
  check<contract_error>(buckets > 0, "bucket_of: buckets must be positive");
  check<domain_error>(t >= 0.0f && t <= 1.0f, "bucket_of: t outside [0,1]");
  return std::min(static_cast<int>(t * static_cast<float>(buckets)), buckets - 1);
}

namespace {

void validate_layer_set(const std::vector<int>& layer_set, const char* what) {
  check<config_error>(!layer_set.empty(), std::string(what) + ": empty layer set");
  for (std::size_t i = 0; i < layer_set.size(); ++i) {
    check<config_error>(layer_set[i] >= 0, std::string(what) + ": negative layer index");
    check<config_error>(i == 0 || layer_set[i] > layer_set[i - 1],
                        std::string(what) + ": layer set must be strictly increasing");
  }
}

int find_slot(const std::vector<int>& layer_set, int layer) {
  for (std::size_t i = 0; i < layer_set.size(); ++i)
    if (layer_set[i] == layer) return static_cast<int>(i);
  return -1;
}

}  // namespace

SoftTokenBank::SoftTokenBank(const SoftConfig& c, int hidden_dim, std::uint64_t seed)
    : cfg(c), hidden(hidden_dim) {
  validate_layer_set(cfg.layer_set, "soft");
  check<config_error>(cfg.buckets > 0 && cfg.tokens > 0 && hidden > 0,
                      "soft: buckets, tokens, hidden must be positive");
  RngStream rng(seed, "soft_init", 0);
  const int rows = static_cast<int>(cfg.layer_set.size()) * cfg.buckets;
  table = randn({rows, cfg.tokens * hidden}, rng, cfg.init_std, true);
}

SoftTokenBank::SoftTokenBank(const SoftConfig& c, const Denoiser& model)
    : cfg(c), hidden(model.cfg.hidden) {
  validate_layer_set(cfg.layer_set, "soft");
  check<config_error>(cfg.buckets > 0 && cfg.tokens > 0, "soft: buckets and tokens must be positive");
  check<config_error>(cfg.tokens <= model.cfg.caption_len,
                      "soft: unconditional init needs tokens <= caption_len");
  NoGrad guard;
  RngStream unused(0, "soft_uncond_init", 0);
  Tensor emb = model.embed_caption(null_caption(), false, unused);
  Tensor head = slice(emb, 0, 0, cfg.tokens);
  const int rows = static_cast<int>(cfg.layer_set.size()) * cfg.buckets;
  std::vector<float> all;
  all.reserve(static_cast<std::size_t>(rows) * head.size());
  for (int r = 0; r < rows; ++r) all.insert(all.end(), head.data().begin(), head.data().end());
  table = Tensor::from_data({rows, cfg.tokens * hidden}, std::move(all), true);
}

std::int64_t SoftTokenBank::trainable_count() const { return table.defined() ? table.size() : 0; }

int SoftTokenBank::layer_slot(int layer) const { return find_slot(cfg.layer_set, layer); }

LoraAdapters::LoraAdapters(const LoraConfig& c, int hidden_dim, std::uint64_t seed)
    : cfg(c), hidden(hidden_dim) {
  validate_layer_set(cfg.layer_set, "lora");
  check<config_error>(cfg.rank > 0 && hidden > 0, "lora: rank and hidden must be positive");
  RngStream rng(seed, "lora_init", 0);
  const int n = static_cast<int>(cfg.layer_set.size()) * 2 * 4;
  a.reserve(n);
  b.reserve(n);
  for (int i = 0; i < n; ++i) {
    a.push_back(randn({hidden, cfg.rank}, rng, cfg.init_std, true));
    b.push_back(Tensor::zeros({cfg.rank, hidden}, true));
  }
}

std::int64_t LoraAdapters::trainable_count() const {
  std::int64_t total = 0;
  for (const Tensor& t : a) total += t.size();
  for (const Tensor& t : b) total += t.size();
  return total;
}

int LoraAdapters::layer_slot(int layer) const { return find_slot(cfg.layer_set, layer); }

Denoiser::Denoiser(const DenoiserConfig& c, std::uint64_t seed) : cfg(c) {
  cfg.validate();
  RngStream rng(seed, "model_init", 0);
  auto reg = [&](const std::string& name, std::vector<int> shape, float sd) {
    Tensor t = sd > 0.0f ? randn(std::move(shape), rng, sd, true)
                         : Tensor::zeros(std::move(shape), true);
    params.emplace_back(name, t);
    return t;
  };
  const int d = cfg.hidden;
  const float sd = 0.02f;
  tok_emb_ = reg("tok_emb", {cfg.vocab, d}, sd);
  txt_pos_ = reg("txt_pos", {cfg.caption_len, d}, sd);
  img_pos_ = reg("img_pos", {cfg.img_tokens(), d}, sd);
  patch_w_ = reg("patch.w", {cfg.patch_dim(), d}, sd);
  patch_b_ = reg("patch.b", {d}, 0.0f);
  time_w1_ = reg("time.w1", {cfg.time_dim, d}, sd);
  time_b1_ = reg("time.b1", {d}, 0.0f);
  time_w2_ = reg("time.w2", {d, d}, sd);
  time_b2_ = reg("time.b2", {d}, 0.0f);
  blocks_.resize(cfg.layers);
  for (int i = 0; i < cfg.layers; ++i) {
    auto stream = [&](const char* s, StreamParams& p) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "block%d.%s.", i, s);
      const std::string base = buf;
      p.mod_w = reg(base + "mod.w", {d, 6 * d}, 0.0f);
      p.mod_b = reg(base + "mod.b", {6 * d}, 0.0f);
      p.qkv_w = reg(base + "qkv.w", {d, 3 * d}, sd);
      p.qkv_b = reg(base + "qkv.b", {3 * d}, 0.0f);
      p.out_w = reg(base + "out.w", {d, d}, sd);
      p.out_b = reg(base + "out.b", {d}, 0.0f);
      p.mlp1_w = reg(base + "mlp1.w", {d, 4 * d}, sd);
      p.mlp1_b = reg(base + "mlp1.b", {4 * d}, 0.0f);
      p.mlp2_w = reg(base + "mlp2.w", {4 * d, d}, sd);
      p.mlp2_b = reg(base + "mlp2.b", {d}, 0.0f);
    };
    stream("txt", blocks_[i].txt);
    stream("img", blocks_[i].img);
  }
  final_mod_w_ = reg("final.mod.w", {d, 2 * d}, 0.0f);
  final_mod_b_ = reg("final.mod.b", {2 * d}, 0.0f);
  final_out_w_ = reg("final.out.w", {d, cfg.patch_dim()}, 0.0f);
  final_out_b_ = reg("final.out.b", {cfg.patch_dim()}, 0.0f);
}

std::int64_t Denoiser::param_count() const {
  std::int64_t total = 0;
  for (const auto& [name, t] : params) total += t.size();
  return total;
}

void Denoiser::set_requires_grad(bool on) {
  for (auto& [name, t] : params) t.set_requires_grad(on);
}

Tensor Denoiser::param(const std::string& name) const {
  for (const auto& [pname, t] : params)
    if (pname == name) return t;
  throw contract_error("unknown parameter " + name);
}

Tensor Denoiser::patchify(const Tensor& xt) const {
  const int B = xt.dim(0), C = cfg.channels, G = cfg.image_size, P = cfg.patch;
  const int Gp = cfg.grid(), T = cfg.img_tokens(), pd = cfg.patch_dim();
  std::vector<std::int64_t> idx(static_cast<std::size_t>(B) * T * pd);
  std::size_t o = 0;
  for (int b = 0; b < B; ++b)
    for (int gy = 0; gy < Gp; ++gy)
      for (int gx = 0; gx < Gp; ++gx)
        for (int ch = 0; ch < C; ++ch)
          for (int py = 0; py < P; ++py)
            for (int px = 0; px < P; ++px)
              idx[o++] = ((static_cast<std::int64_t>(b) * C + ch) * G + gy * P + py) * G +
                         gx * P + px;
  return take_flat(xt, idx, {B, T, pd});
}

Tensor Denoiser::unpatchify(const Tensor& tokens) const {
  const int B = tokens.dim(0), C = cfg.channels, G = cfg.image_size, P = cfg.patch;
  const int Gp = cfg.grid(), T = cfg.img_tokens(), pd = cfg.patch_dim();
  std::vector<std::int64_t> idx(static_cast<std::size_t>(B) * C * G * G);
  std::size_t o = 0;
  for (int b = 0; b < B; ++b)
    for (int ch = 0; ch < C; ++ch)
      for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x)
          idx[o++] = (static_cast<std::int64_t>(b) * T + (y / P) * Gp + x / P) * pd +
                     (ch * P + y % P) * P + x % P;
  return take_flat(tokens, idx, {B, C, G, G});
}

Tensor Denoiser::time_embedding(const std::vector<float>& t) const {
  const int B = static_cast<int>(t.size()), F = cfg.time_dim, half = F / 2;
  std::vector<float> feats(static_cast<std::size_t>(B) * F);
  for (int b = 0; b < B; ++b) {
    const double s = static_cast<double>(t[b]) * 1000.0;
    for (int i = 0; i < half; ++i) {
      const double w = std::exp(-std::log(10000.0) * i / half);
      feats[static_cast<std::size_t>(b) * F + i] = static_cast<float>(std::cos(s * w));
      feats[static_cast<std::size_t>(b) * F + half + i] = static_cast<float>(std::sin(s * w));
    }
  }
  Tensor f = Tensor::from_data({B, F}, std::move(feats));
  return linear(silu(linear(f, time_w1_, time_b1_)), time_w2_, time_b2_);
}

Tensor Denoiser::embed_caption(const Caption& caption, bool dropout, RngStream& rng) const {
  Caption c = caption;
  if (dropout && rng.uniform() < cfg.p_uncond) c = null_caption();
  std::vector<int> ids(c.tokens.begin(), c.tokens.end());
  for (int id : ids)
    check<domain_error>(id >= 0 && id < cfg.vocab, "embed_caption: token outside vocab");
  return add(gather_rows(tok_emb_, ids), txt_pos_);
}

Tensor Denoiser::forward(const Tensor& xt, const std::vector<float>& t,
                         const std::vector<Caption>& captions, const ForwardOptions& opt) const {
  check<shape_error>(xt.ndim() == 4 && xt.dim(1) == cfg.channels && xt.dim(2) == cfg.image_size &&
                         xt.dim(3) == cfg.image_size,
                     "forward: xt must be [B, channels, image_size, image_size]");
  const int B = xt.dim(0);
  check<contract_error>(static_cast<int>(t.size()) == B &&
                            static_cast<int>(captions.size()) == B,
                        "forward: one t and caption per sample");
  for (float tv : t) check<domain_error>(tv >= 0.0f && tv <= 1.0f, "forward: t outside [0,1]");

  const int d = cfg.hidden, n = cfg.caption_len, T = cfg.img_tokens();
  const int H = cfg.heads, hd = cfg.head_dim();
  const int m = opt.soft ? opt.soft->cfg.tokens : 0;
  if (opt.soft) {
    check<contract_error>(opt.soft->hidden == d, "forward: soft token width mismatch");
    check<contract_error>(opt.soft->cfg.layer_set.back() < cfg.layers,
                          "forward: soft layer set exceeds model depth");
  }
  if (opt.lora) {
    check<contract_error>(opt.lora->hidden == d, "forward: adapter width mismatch");
    check<contract_error>(opt.lora->cfg.layer_set.back() < cfg.layers,
                          "forward: adapter layer set exceeds model depth");
  }
  check<contract_error>(!opt.mask_soft || opt.soft, "forward: mask_soft without soft tokens");

  auto broadcast_rows = [&](const Tensor& pos, int rows) {
    return repeat_axis(reshape(pos, {1, rows, d}), 0, B);
  };
  Tensor himg = add(linear(patchify(xt), patch_w_, patch_b_), broadcast_rows(img_pos_, T));

  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(B) * n);
  for (const Caption& c : captions)
    for (int id : c.tokens) {
      check<domain_error>(id >= 0 && id < cfg.vocab, "forward: caption token outside vocab");
      ids.push_back(id);
    }
  Tensor htxt = add(reshape(gather_rows(tok_emb_, ids), {B, n, d}), broadcast_rows(txt_pos_, n));

  Tensor cond = silu(time_embedding(t));

  const Tensor none;
  auto chunk = [&](const Tensor& mod, int i) { return slice(mod, 1, i * d, d); };
  auto expand = [&](const Tensor& v, int S) { return repeat_axis(reshape(v, {B, 1, d}), 1, S); };
  auto modulate = [&](const Tensor& h, const Tensor& shift, const Tensor& sc) {
    const int S = h.dim(1);
    return add(mul(h, add_scalar(expand(sc, S), 1.0f)), expand(shift, S));
  };
  auto lora_delta = [&](const Tensor& x, int slot, int stream, int proj) {
    const int i = opt.lora->index(slot, stream, proj);
    return matmul(matmul(x, opt.lora->a[i]), opt.lora->b[i]);
  };

  for (int l = 0; l < cfg.layers; ++l) {
    const int soft_slot = opt.soft ? opt.soft->layer_slot(l) : -1;
    if (soft_slot >= 0) {
      std::vector<int> rows(B);
      for (int b = 0; b < B; ++b)
        rows[b] = opt.soft->row(soft_slot, bucket_of(t[b], opt.soft->cfg.buckets));
      Tensor soft = reshape(gather_rows(opt.soft->table, rows), {B, m, d});
      htxt = concat({soft, htxt}, 1);
    }
    const int St = htxt.dim(1);
    const int S = St + T;
    const int lora_slot = opt.lora ? opt.lora->layer_slot(l) : -1;
    const BlockParams& bp = blocks_[l];

    Tensor mod_t = linear(cond, bp.txt.mod_w, bp.txt.mod_b);
    Tensor mod_i = linear(cond, bp.img.mod_w, bp.img.mod_b);

    Tensor ht = modulate(layer_norm(htxt, none, none), chunk(mod_t, 0), chunk(mod_t, 1));
    Tensor hi = modulate(layer_norm(himg, none, none), chunk(mod_i, 0), chunk(mod_i, 1));
    Tensor qkv_t = linear(ht, bp.txt.qkv_w, bp.txt.qkv_b);
    Tensor qkv_i = linear(hi, bp.img.qkv_w, bp.img.qkv_b);
    Tensor qt = slice(qkv_t, 2, 0, d), kt = slice(qkv_t, 2, d, d), vt = slice(qkv_t, 2, 2 * d, d);
    Tensor qi = slice(qkv_i, 2, 0, d), ki = slice(qkv_i, 2, d, d), vi = slice(qkv_i, 2, 2 * d, d);
    if (lora_slot >= 0) {
      qt = add(qt, lora_delta(ht, lora_slot, 0, 0));
      kt = add(kt, lora_delta(ht, lora_slot, 0, 1));
      vt = add(vt, lora_delta(ht, lora_slot, 0, 2));
      qi = add(qi, lora_delta(hi, lora_slot, 1, 0));
      ki = add(ki, lora_delta(hi, lora_slot, 1, 1));
      vi = add(vi, lora_delta(hi, lora_slot, 1, 2));
    }
    Tensor q = concat({qt, qi}, 1), k = concat({kt, ki}, 1), v = concat({vt, vi}, 1);
    auto heads = [&](const Tensor& x) { return permute(reshape(x, {B, S, H, hd}), {0, 2, 1, 3}); };
    Tensor scores =
        scale(matmul(heads(q), permute(heads(k), {0, 1, 3, 2})), 1.0f / std::sqrt(float(hd)));
    if (opt.mask_soft && soft_slot >= 0) {
      std::vector<float> row(S, 0.0f);
      for (int j = 0; j < m; ++j) row[j] = -1e30f;
      Tensor mask = repeat_axis(
          repeat_axis(repeat_axis(Tensor::from_data({1, 1, 1, S}, std::move(row)), 2, S), 1, H), 0,
          B);
      scores = add(scores, mask);
    }
    Tensor ctx = reshape(permute(matmul(softmax(scores, 3), heads(v)), {0, 2, 1, 3}), {B, S, d});
    Tensor ct = slice(ctx, 1, 0, St), ci = slice(ctx, 1, St, T);
    Tensor ot = linear(ct, bp.txt.out_w, bp.txt.out_b);
    Tensor oi = linear(ci, bp.img.out_w, bp.img.out_b);
    if (lora_slot >= 0) {
      ot = add(ot, lora_delta(ct, lora_slot, 0, 3));
      oi = add(oi, lora_delta(ci, lora_slot, 1, 3));
    }
    htxt = add(htxt, mul(expand(chunk(mod_t, 2), St), ot));
    himg = add(himg, mul(expand(chunk(mod_i, 2), T), oi));

    Tensor ht2 = modulate(layer_norm(htxt, none, none), chunk(mod_t, 3), chunk(mod_t, 4));
    Tensor hi2 = modulate(layer_norm(himg, none, none), chunk(mod_i, 3), chunk(mod_i, 4));
    Tensor mt = linear(silu(linear(ht2, bp.txt.mlp1_w, bp.txt.mlp1_b)), bp.txt.mlp2_w,
                       bp.txt.mlp2_b);
    Tensor mi = linear(silu(linear(hi2, bp.img.mlp1_w, bp.img.mlp1_b)), bp.img.mlp2_w,
                       bp.img.mlp2_b);
    htxt = add(htxt, mul(expand(chunk(mod_t, 5), St), mt));
    himg = add(himg, mul(expand(chunk(mod_i, 5), T), mi));

    if (soft_slot >= 0) htxt = slice(htxt, 1, m, n);
  }

  Tensor mod_f = linear(cond, final_mod_w_, final_mod_b_);
  Tensor hf = modulate(layer_norm(himg, none, none), slice(mod_f, 1, 0, d), slice(mod_f, 1, d, d));
  return unpatchify(linear(hf, final_out_w_, final_out_b_));
}

Tensor Denoiser::forward_one(const Tensor& xt, float t, const Caption& caption,
                             const ForwardOptions& opt) const {
  check<shape_error>(xt.ndim() == 3, "forward_one: xt must be [channels, image_size, image_size]");
  Tensor batched = reshape(xt, {1, xt.dim(0), xt.dim(1), xt.dim(2)});
  Tensor v = forward(batched, {t}, {caption}, opt);
  return reshape(v, {xt.dim(0), xt.dim(1), xt.dim(2)});
}

}  // namespace softrepa
