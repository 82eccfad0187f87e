#include "softrepa/train.hpp"

#include <algorithm>

#include "softrepa/errors.hpp"
#include "softrepa/flow.hpp"
#include "softrepa/optim.hpp"
#include "softrepa/serde.hpp"

namespace softrepa {

namespace {

class LossCsv {
 public:
  explicit LossCsv(const std::string& digest) {
    text_ = "# config_digest=" + digest + "\n";
    text_ += "step,lr,loss,softrepa_loss,dsm_loss,val_loss\n";
  }

  void row(std::int64_t step, float lr, float loss, std::optional<float> softrepa,
           std::optional<float> dsm, std::optional<float> val) {
    text_ += std::to_string(step) + "," + fmt_float(lr) + "," + fmt_float(loss) + ",";
    if (softrepa) text_ += fmt_float(*softrepa);
    text_ += ",";
    if (dsm) text_ += fmt_float(*dsm);
    text_ += ",";
    if (val) text_ += fmt_float(*val);
    text_ += "\n";
  }

  void write(const std::string& path) const {
    if (!path.empty()) write_text_file(path, text_);
  }

 private:
  std::string text_;
};

float nudge_unit_open(float u) { return kMinT + u * (1.0f - 2.0f * kMinT); }

}  // namespace

DatasetSplit split_dataset(const Dataset& ds, int val_percent) {
  DatasetSplit split;
  for (int i = 0; i < static_cast<int>(ds.pairs.size()); ++i) {
    if (is_val_index(ds.seed, i, val_percent))
      split.val.push_back(i);
    else
      split.train.push_back(i);
  }
  return split;
}

ContrastiveBatch make_contrastive_batch(const Dataset& ds, const std::vector<int>& indices,
                                        const LossConfig& loss, std::uint64_t seed,
                                        std::int64_t step) {
  check<contract_error>(!indices.empty(), "contrastive batch: no records to draw from");
  const int P = loss.positives;
  ContrastiveBatch cb;
  RngStream pick(seed, "cbatch", step);
  for (int i = 0; i < P; ++i) {
    const int idx = indices[pick.uniform_int(static_cast<std::uint64_t>(indices.size()))];
    cb.images.push_back(ds.pairs[idx].image);
    cb.positives.push_back(ds.pairs[idx].caption);
  }
  RngStream neg_seeds(seed, "neg", step);
  const int rounds = loss.negatives / P;
  for (int r = 0; r < rounds; ++r) {
    const auto negs = negative_captions(cb.positives, NegativeMode::attribute_flip,
                                        neg_seeds.next_u64());
    cb.negative_pool.insert(cb.negative_pool.end(), negs.begin(), negs.end());
  }
  const int draws = loss.shared_draw ? 1 : P;
  for (int i = 0; i < draws; ++i) {
    RngStream noise(seed, "noise", step * draws + i);
    cb.eps.push_back(randn(cb.images[0].shape(), noise));
    RngStream time(seed, "t", step * draws + i);
    cb.t.push_back(nudge_unit_open(time.uniform()));
  }
  return cb;
}

Checkpoint train_base(const Dataset& ds, const RunConfig& cfg, int epochs, std::uint64_t seed,
                      const std::string& csv_path) {
  cfg.validate();
  check<contract_error>(!ds.pairs.empty(), "train_base: empty dataset");
  check<contract_error>(epochs >= 1, "train_base: epochs must be positive");
  const DatasetSplit split = split_dataset(ds, cfg.data.val_percent);
  check<contract_error>(!split.train.empty(), "train_base: empty training split");

  Denoiser model(cfg.model, seed);
  std::vector<Tensor> params;
  params.reserve(model.params.size());
  for (auto& [name, t] : model.params) params.push_back(t);
  AdamW opt(params, cfg.optim.adamw);

  const VelocityFn fn = [&](const Tensor& xt, const std::vector<float>& t,
                            const std::vector<Caption>& caps) {
    return model.forward(xt, t, caps);
  };

  const int B = cfg.optim.batch_size;
  const std::int64_t steps_per_epoch =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(split.train.size()) / B);
  const std::int64_t total = static_cast<std::int64_t>(epochs) * steps_per_epoch;

  std::vector<FlowSample> val_batch;
  std::vector<Caption> val_caps;
  for (int k = 0; k < std::min<int>(B, static_cast<int>(split.val.size())); ++k) {
    const DatasetPair& pair = ds.pairs[split.val[k]];
    RngStream flow(seed, "val_flow", k);
    val_batch.push_back(make_flow_sample(pair.image, flow));
    val_caps.push_back(pair.caption);
  }

  LossCsv csv(config_digest(cfg));
  for (std::int64_t step = 0; step < total; ++step) {
    std::vector<FlowSample> batch;
    std::vector<Caption> caps;
    batch.reserve(B);
    caps.reserve(B);
    RngStream pick(seed, "batch", step);
    for (int j = 0; j < B; ++j) {
      const int idx = split.train[pick.uniform_int(split.train.size())];
      const DatasetPair& pair = ds.pairs[idx];
      RngStream flow(seed, "flow", step * B + j);
      batch.push_back(make_flow_sample(pair.image, flow));
      RngStream drop(seed, "drop", step * B + j);
      caps.push_back(drop.uniform() < cfg.model.p_uncond ? null_caption() : pair.caption);
    }
    const float lr = cosine_warm_restart_lr(step, cfg.optim.adamw.lr, cfg.optim.restart_period,
                                            cfg.optim.restart_mult);
    float loss_value;
    {
      Tape tape;
      Tensor loss = cfm_loss(fn, batch, caps);
      loss_value = loss.item();
      opt.zero_grad();
      tape.backward(loss);
    }
    opt.step(lr);

    const bool log = step % cfg.optim.log_every == 0 || step + 1 == total;
    const bool do_val =
        !val_batch.empty() && (step % cfg.optim.val_every == 0 || step + 1 == total);
    if (log || do_val) {
      std::optional<float> val;
      if (do_val) {
        NoGrad guard;
        val = cfm_loss(fn, val_batch, val_caps).item();
      }
      csv.row(step, lr, loss_value, {}, {}, val);
    }
  }
  csv.write(csv_path);

  Checkpoint ck;
  ck.config = cfg;
  ck.seed = seed;
  ck.trained_steps = static_cast<std::uint64_t>(total);
  ck.stage = "base";
  ck.model = model;
  return ck;
}

namespace {

Checkpoint train_contrastive(const Checkpoint& base, const Dataset& ds, const RunConfig& cfg,
                             int iterations, std::uint64_t seed, const std::string& csv_path,
                             bool lora_mode) {
  cfg.validate();
  check<contract_error>(base.stage == "base", "fine-tuning expects a base-stage checkpoint");
  check<contract_error>(cfg.model == base.config.model,
                        "fine-tuning config must keep the base model section");
  check<contract_error>(iterations >= 1, "fine-tuning: iterations must be positive");
  check<contract_error>(!ds.pairs.empty(), "fine-tuning: empty dataset");
  const DatasetSplit split = split_dataset(ds, cfg.data.val_percent);
  check<contract_error>(!split.train.empty(), "fine-tuning: empty training split");

  Denoiser model = base.model;
  model.set_requires_grad(false);

  Checkpoint out;
  out.config = cfg;
  out.seed = seed;
  out.trained_steps = static_cast<std::uint64_t>(iterations);
  out.model = model;

  ForwardOptions fopt;
  std::vector<Tensor> trainable;
  if (lora_mode) {
    out.stage = "lora";
    out.lora = LoraAdapters(cfg.lora, cfg.model.hidden, seed);
    check<contract_error>(out.lora->cfg.layer_set.back() < cfg.model.layers,
                          "fine-tuning: adapter layer set exceeds model depth");
    fopt.lora = &*out.lora;
    for (Tensor& t : out.lora->a) trainable.push_back(t);
    for (Tensor& t : out.lora->b) trainable.push_back(t);
  } else {
    out.stage = "soft";
    out.soft = cfg.soft.uncond_init ? SoftTokenBank(cfg.soft.bank, model)
                                    : SoftTokenBank(cfg.soft.bank, cfg.model.hidden, seed);
    check<contract_error>(out.soft->cfg.layer_set.back() < cfg.model.layers,
                          "fine-tuning: soft layer set exceeds model depth");
    fopt.soft = &*out.soft;
    trainable.push_back(out.soft->table);
  }
  AdamW opt(trainable, cfg.optim.adamw);

  std::vector<ContrastiveBatch> val_batches;
  if (!split.val.empty()) {
    const std::uint64_t val_seed = mix64(seed ^ 0x76616c5f63626174ull);
    for (int k = 0; k < 4; ++k)
      val_batches.push_back(make_contrastive_batch(ds, split.val, cfg.loss, val_seed, k));
  }
  auto val_loss = [&]() {
    NoGrad guard;
    double acc = 0.0;
    for (const ContrastiveBatch& vb : val_batches)
      acc += softrepa_loss(model, fopt, vb, cfg.loss.tau).item();
    return static_cast<float>(acc / static_cast<double>(val_batches.size()));
  };

  LossCsv csv(config_digest(cfg));
  for (std::int64_t step = 0; step < iterations; ++step) {
    const ContrastiveBatch cb = make_contrastive_batch(ds, split.train, cfg.loss, seed, step);
    const float lr = cosine_warm_restart_lr(step, cfg.optim.adamw.lr, cfg.optim.restart_period,
                                            cfg.optim.restart_mult);
    ContrastiveParts parts;
    float loss_value;
    {
      Tape tape;
      Tensor loss = combined_loss(model, fopt, cb, cfg.loss.tau, cfg.loss.dsm_weight, &parts);
      loss_value = loss.item();
      opt.zero_grad();
      tape.backward(loss);
    }
    opt.step(lr);

    const bool log = step % cfg.optim.log_every == 0 || step + 1 == iterations;
    const bool do_val =
        !val_batches.empty() && (step % cfg.optim.val_every == 0 || step + 1 == iterations);
    if (log || do_val) {
      std::optional<float> val;
      if (do_val) val = val_loss();
      csv.row(step, lr, loss_value, parts.softrepa, parts.dsm, val);
    }
  }
  csv.write(csv_path);
  return out;
}

}  // namespace

Checkpoint train_soft(const Checkpoint& base, const Dataset& ds, const RunConfig& cfg,
                      int iterations, std::uint64_t seed, const std::string& csv_path) {
  return train_contrastive(base, ds, cfg, iterations, seed, csv_path, false);
}

Checkpoint train_lora(const Checkpoint& base, const Dataset& ds, const RunConfig& cfg,
                      int iterations, std::uint64_t seed, const std::string& csv_path) {
  return train_contrastive(base, ds, cfg, iterations, seed, csv_path, true);
}

std::string ablation_sweep(const Checkpoint& base, const Dataset& ds,
                           const std::vector<int>& layer_counts,
                           const std::vector<int>& token_lengths, int iterations,
                           std::uint64_t seed) {
  check<contract_error>(!layer_counts.empty() && !token_lengths.empty(),
                        "ablation_sweep: empty grid axis");
  for (int lc : layer_counts)
    check<contract_error>(lc >= 1 && lc <= base.config.model.layers,
                          "ablation_sweep: layer count out of range");
  for (int tl : token_lengths) check<contract_error>(tl >= 1, "ablation_sweep: bad token length");

  const DatasetSplit split = split_dataset(ds, base.config.data.val_percent);
  std::string csv = "# config_digest=" + config_digest(base.config) + "\n";
  csv += "layers,tokens,trainable,steps,final_loss,final_val_loss\n";
  for (int lc : layer_counts)
    for (int tl : token_lengths) {
      RunConfig cfg = base.config;
      cfg.soft.bank.layer_set.resize(lc);
      for (int i = 0; i < lc; ++i) cfg.soft.bank.layer_set[i] = i;
      cfg.soft.bank.tokens = tl;
      Checkpoint rebase = base;
      rebase.config = cfg;
      const Checkpoint tuned = train_soft(rebase, ds, cfg, iterations, seed);

      NoGrad guard;
      const ForwardOptions fopt = options_for(tuned, true);
      const std::uint64_t probe_seed = mix64(seed ^ 0x61626c6154696f6eull);
      const float tr = softrepa_loss(tuned.model, fopt,
                                     make_contrastive_batch(ds, split.train, cfg.loss, probe_seed, 0),
                                     cfg.loss.tau)
                           .item();
      const float va = softrepa_loss(tuned.model, fopt,
                                     make_contrastive_batch(ds, split.val.empty() ? split.train : split.val,
                                                            cfg.loss, probe_seed, 1),
                                     cfg.loss.tau)
                           .item();
      csv += std::to_string(lc) + "," + std::to_string(tl) + "," +
             std::to_string(tuned.soft->trainable_count()) + "," + std::to_string(iterations) +
             "," + fmt_float(tr) + "," + fmt_float(va) + "\n";
    }
  return csv;
}

}  // namespace softrepa
