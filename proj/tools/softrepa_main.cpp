#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "softrepa/checkpoint.hpp"
#include "softrepa/config.hpp"
#include "softrepa/corpus.hpp"
#include "softrepa/errors.hpp"
#include "softrepa/eval.hpp"
#include "softrepa/gradcheck.hpp"
#include "softrepa/mi.hpp"
#include "softrepa/sampler.hpp"
#include "softrepa/serde.hpp"
#include "softrepa/train.hpp"

namespace {

using namespace softrepa;

// Exit codes: 0 ok, 2 contract/domain/shape/singularity, 3 io, 4 format,
// 5 config. CLI11 usage errors keep their own codes.
constexpr int kContractExit = 2;
constexpr int kIoExit = 3;
constexpr int kFormatExit = 4;
constexpr int kConfigExit = 5;

struct CommonOpts {
  std::string config_path;
  std::uint64_t seed = 1;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
  cmd->add_option("--config", c.config_path, "Run config JSON; defaults apply when omitted");
  cmd->add_option("--seed", c.seed, "Master seed")->capture_default_str();
}

RunConfig resolve_config(const CommonOpts& c) {
  return c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
}

GuidanceConfig guidance_from(const RunConfig& cfg) {
  GuidanceConfig g;
  g.w = cfg.sample.guidance;
  g.steps = cfg.sample.steps;
  return g;
}

int run(CLI::App& app, int argc, char** argv) {
  // gen-data ------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Render the synthetic caption-image corpus");
  std::string gen_out;
  CommonOpts gen_c;
  add_common(gen, gen_c);
  gen->add_option("--out", gen_out, "Dataset file to write")->required();
  std::optional<int> gen_count;
  std::optional<std::uint64_t> gen_seed;
  std::optional<float> gen_frac;
  gen->add_option("--count", gen_count, "Pair count (overrides config)");
  gen->add_option("--data-seed", gen_seed, "Corpus seed (overrides config)");
  gen->add_option("--two-fraction", gen_frac, "Two-object fraction (overrides config)");
  gen->callback([&] {
    RunConfig cfg = resolve_config(gen_c);
    if (gen_count) cfg.data.count = *gen_count;
    if (gen_seed) cfg.data.seed = *gen_seed;
    if (gen_frac) cfg.data.two_object_fraction = *gen_frac;
    cfg.validate();
    Dataset ds = generate(cfg.data.count, cfg.data.seed, cfg.data.two_object_fraction);
    ds.digest = config_digest(cfg);
    save_dataset(ds, gen_out);
    std::printf("wrote %s: %zu pairs, digest %s\n", gen_out.c_str(), ds.pairs.size(),
                ds.digest.c_str());
  });

  // train-base ----------------------------------------------------------
  auto* tb = app.add_subcommand("train-base", "Flow-matching pretraining of the denoiser");
  CommonOpts tb_c;
  add_common(tb, tb_c);
  std::string tb_data, tb_out, tb_csv;
  int tb_epochs = 4;
  tb->add_option("--data", tb_data, "Dataset file")->required();
  tb->add_option("--out", tb_out, "Checkpoint to write")->required();
  tb->add_option("--epochs", tb_epochs, "Passes over the dataset")->capture_default_str();
  tb->add_option("--csv", tb_csv, "Loss-curve CSV path");
  tb->callback([&] {
    const RunConfig cfg = resolve_config(tb_c);
    const Dataset ds = load_dataset(tb_data);
    const Checkpoint ck = train_base(ds, cfg, tb_epochs, tb_c.seed, tb_csv);
    save_checkpoint(tb_out, ck);
    std::printf("wrote %s: stage %s, %llu steps, digest %s\n", tb_out.c_str(), ck.stage.c_str(),
                static_cast<unsigned long long>(ck.trained_steps), config_digest(ck.config).c_str());
  });

  // train-soft / train-lora ----------------------------------------------
  struct TuneOpts {
    CommonOpts c;
    std::string data, base, out, csv;
    int iters = 2000;
  };
  auto add_tune = [&](const char* name, const char* help) {
    auto* cmd = app.add_subcommand(name, help);
    auto opts = std::make_shared<TuneOpts>();
    add_common(cmd, opts->c);
    cmd->add_option("--data", opts->data, "Dataset file")->required();
    cmd->add_option("--base", opts->base, "Base checkpoint")->required();
    cmd->add_option("--out", opts->out, "Checkpoint to write")->required();
    cmd->add_option("--iters", opts->iters, "Fine-tuning iterations")->capture_default_str();
    cmd->add_option("--csv", opts->csv, "Loss-curve CSV path");
    return std::pair(cmd, opts);
  };
  auto [ts, ts_o] = add_tune("train-soft", "Contrastive soft-token tuning on a frozen base");
  ts->callback([&, o = ts_o] {
    const Checkpoint base = load_checkpoint(o->base);
    const RunConfig cfg =
        o->c.config_path.empty() ? base.config : load_config(o->c.config_path);
    const Dataset ds = load_dataset(o->data);
    const Checkpoint ck = train_soft(base, ds, cfg, o->iters, o->c.seed, o->csv);
    save_checkpoint(o->out, ck);
    std::printf("wrote %s: stage %s, %lld trainable, digest %s\n", o->out.c_str(),
                ck.stage.c_str(), static_cast<long long>(ck.soft->trainable_count()),
                config_digest(ck.config).c_str());
  });
  auto [tl, tl_o] = add_tune("train-lora", "Contrastive low-rank adapter tuning on a frozen base");
  tl->callback([&, o = tl_o] {
    const Checkpoint base = load_checkpoint(o->base);
    const RunConfig cfg =
        o->c.config_path.empty() ? base.config : load_config(o->c.config_path);
    const Dataset ds = load_dataset(o->data);
    const Checkpoint ck = train_lora(base, ds, cfg, o->iters, o->c.seed, o->csv);
    save_checkpoint(o->out, ck);
    std::printf("wrote %s: stage %s, %lld trainable, digest %s\n", o->out.c_str(),
                ck.stage.c_str(), static_cast<long long>(ck.lora->trainable_count()),
                config_digest(ck.config).c_str());
  });

  // sample ----------------------------------------------------------------
  auto* sp = app.add_subcommand("sample", "Generate one image from a caption");
  CommonOpts sp_c;
  add_common(sp, sp_c);
  std::string sp_ckpt, sp_caption, sp_out;
  std::optional<float> sp_w;
  std::optional<int> sp_steps;
  bool sp_soft = false, sp_x0 = false;
  sp->add_option("--ckpt", sp_ckpt, "Checkpoint")->required();
  sp->add_option("--caption", sp_caption, "Caption text, e.g. \"1 red circle center\"")->required();
  sp->add_option("--out", sp_out, "Image file to write")->required();
  sp->add_option("--guidance", sp_w, "CFG weight (overrides config)");
  sp->add_option("--steps", sp_steps, "Euler steps (overrides config)");
  sp->add_flag("--soft", sp_soft, "Apply the checkpoint's tuning");
  sp->add_flag("--x0-pred", sp_x0, "Integrate in x0-prediction form");
  sp->callback([&] {
    const Checkpoint ck = load_checkpoint(sp_ckpt);
    GuidanceConfig g = guidance_from(ck.config);
    if (sp_w) g.w = *sp_w;
    if (sp_steps) g.steps = *sp_steps;
    g.use_soft = sp_soft;
    if (sp_x0) g.parameterization = GuidanceConfig::Param::x0_pred;
    const Caption cap = parse_caption(sp_caption);
    const SampleResult r = sample(ck, cap, g, sp_c.seed);
    save_image(sp_out, r.image, config_digest(ck.config));
    const VerifierReport vr = verify(r.image, cap);
    std::printf("wrote %s: verifier %s\n", sp_out.c_str(), vr.overall ? "pass" : "fail");
  });

  // render ----------------------------------------------------------------
  auto* rd = app.add_subcommand("render", "Ground-truth render of a caption's scene");
  CommonOpts rd_c;
  add_common(rd, rd_c);
  std::string rd_caption, rd_out;
  rd->add_option("--caption", rd_caption, "Caption text")->required();
  rd->add_option("--out", rd_out, "Image file to write")->required();
  rd->callback([&] {
    RunConfig cfg = resolve_config(rd_c);
    cfg.validate();
    save_image(rd_out, render(scene_of(parse_caption(rd_caption))), config_digest(cfg));
    std::printf("wrote %s\n", rd_out.c_str());
  });

  // edit ------------------------------------------------------------------
  auto* ed = app.add_subcommand("edit", "Invert an image and regenerate under a new caption");
  CommonOpts ed_c;
  add_common(ed, ed_c);
  std::string ed_ckpt, ed_img, ed_src, ed_tgt, ed_out;
  std::optional<float> ed_w;
  std::optional<int> ed_steps;
  bool ed_soft = false;
  ed->add_option("--ckpt", ed_ckpt, "Checkpoint")->required();
  ed->add_option("--image", ed_img, "Source image file")->required();
  ed->add_option("--source", ed_src, "Caption describing the source image")->required();
  ed->add_option("--target", ed_tgt, "Caption to regenerate under")->required();
  ed->add_option("--out", ed_out, "Image file to write")->required();
  ed->add_option("--guidance", ed_w, "CFG weight (overrides config)");
  ed->add_option("--steps", ed_steps, "Euler steps (overrides config)");
  ed->add_flag("--soft", ed_soft, "Apply the checkpoint's tuning");
  ed->callback([&] {
    const Checkpoint ck = load_checkpoint(ed_ckpt);
    GuidanceConfig g = guidance_from(ck.config);
    if (ed_w) g.w = *ed_w;
    if (ed_steps) g.steps = *ed_steps;
    g.use_soft = ed_soft;
    const LoadedImage img = load_image(ed_img);
    const EditResult r =
        edit(ck, img.image, parse_caption(ed_src), parse_caption(ed_tgt), g);
    save_image(ed_out, r.image, config_digest(ck.config));
    std::printf("wrote %s: target verifier %s, source mse %s\n", ed_out.c_str(),
                r.target_report.overall ? "pass" : "fail", fmt_float(r.mse_vs_source).c_str());
  });

  // eval --------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Alignment accuracy report over a caption set");
  CommonOpts ev_c;
  add_common(ev, ev_c);
  std::string ev_ckpt, ev_data, ev_out;
  std::optional<float> ev_w;
  std::optional<int> ev_steps, ev_captions, ev_per;
  bool ev_soft = false, ev_full = false;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint")->required();
  ev->add_option("--data", ev_data, "Dataset file (for --full metrics)");
  ev->add_option("--out", ev_out, "Report JSON to write")->required();
  ev->add_option("--captions", ev_captions, "Caption set size (overrides config)");
  ev->add_option("--per-caption", ev_per, "Samples per caption per seed (overrides config)");
  ev->add_option("--guidance", ev_w, "CFG weight (overrides config)");
  ev->add_option("--steps", ev_steps, "Euler steps (overrides config)");
  ev->add_flag("--soft", ev_soft, "Apply the checkpoint's tuning");
  ev->add_flag("--full", ev_full, "Add validation loss, MI, and moment distance");
  ev->callback([&] {
    const Checkpoint ck = load_checkpoint(ev_ckpt);
    const RunConfig& cfg = ck.config;
    GuidanceConfig g = guidance_from(cfg);
    if (ev_w) g.w = *ev_w;
    if (ev_steps) g.steps = *ev_steps;
    g.use_soft = ev_soft;
    const int n_captions = ev_captions ? *ev_captions : cfg.eval.captions;
    const int per = ev_per ? *ev_per : cfg.eval.per_caption;
    const std::vector<Caption> caps =
        sample_caption_set(ev_c.seed, n_captions, cfg.data.two_object_fraction);
    EvalReport report;
    if (ev_full) {
      check<contract_error>(!ev_data.empty(), "eval --full needs --data");
      const Dataset ds = load_dataset(ev_data);
      report = run_full_eval(ck, ds, caps, g, per, cfg.eval.seeds);
    } else {
      report = eval_alignment(ck, caps, g, per, cfg.eval.seeds);
    }
    save_report(ev_out, report);
    std::printf("wrote %s: overall %s (%lld/%lld)\n", ev_out.c_str(),
                fmt_float(report.overall.accuracy()).c_str(),
                static_cast<long long>(report.overall.correct),
                static_cast<long long>(report.overall.total));
  });

  // compare -------------------------------------------------------------------
  auto* cp = app.add_subcommand("compare", "Paired delta table between two eval reports");
  std::string cp_base, cp_tuned, cp_out;
  cp->add_option("--base", cp_base, "Baseline report JSON")->required();
  cp->add_option("--tuned", cp_tuned, "Tuned report JSON")->required();
  cp->add_option("--out", cp_out, "CSV path (stdout when omitted)");
  cp->callback([&] {
    const std::string csv = compare(load_report(cp_base), load_report(cp_tuned));
    if (cp_out.empty()) {
      std::fputs(csv.c_str(), stdout);
    } else {
      write_text_file(cp_out, csv);
      std::printf("wrote %s\n", cp_out.c_str());
    }
  });

  // mi ---------------------------------------------------------------------
  auto* mi_cmd = app.add_subcommand("mi", "Mutual-information estimate on dataset pairs");
  CommonOpts mi_c;
  add_common(mi_cmd, mi_c);
  std::string mi_ckpt, mi_data, mi_out, mi_lambda = "uniform";
  std::optional<int> mi_mc, mi_pairs, mi_cands;
  bool mi_soft = false;
  mi_cmd->add_option("--ckpt", mi_ckpt, "Checkpoint")->required();
  mi_cmd->add_option("--data", mi_data, "Dataset file")->required();
  mi_cmd->add_option("--out", mi_out, "Result JSON to write")->required();
  mi_cmd->add_option("--mc", mi_mc, "Total Monte Carlo draw budget (overrides config)");
  mi_cmd->add_option("--pairs", mi_pairs, "Pair cap (overrides config)");
  mi_cmd->add_option("--candidates", mi_cands, "Candidate cap per pair (overrides config)");
  mi_cmd->add_option("--lambda", mi_lambda, "uniform | likelihood")->capture_default_str();
  mi_cmd->add_flag("--soft", mi_soft, "Apply the checkpoint's tuning");
  mi_cmd->callback([&] {
    const Checkpoint ck = load_checkpoint(mi_ckpt);
    const Dataset ds = load_dataset(mi_data);
    LambdaMode mode;
    if (mi_lambda == "uniform")
      mode = LambdaMode::uniform;
    else if (mi_lambda == "likelihood")
      mode = LambdaMode::likelihood;
    else
      throw config_error("unknown lambda mode '" + mi_lambda + "'");
    const MiEstimate est = mutual_information(
        ck, ds.pairs, mi_soft, mi_mc ? *mi_mc : ck.config.eval.mc_samples,
        mi_pairs ? *mi_pairs : ck.config.eval.mi_pairs,
        mi_cands ? *mi_cands : ck.config.eval.mi_candidates, mode, mi_c.seed);
    std::string json = "{\n";
    json += "  \"config_digest\": \"" + config_digest(ck.config) + "\",\n";
    json += "  \"mi\": " + fmt_float(est.mi) + ",\n";
    json += "  \"stderr\": " + fmt_float(est.stderr_) + ",\n";
    json += "  \"n_pairs\": " + std::to_string(est.n_pairs) + ",\n";
    json += "  \"mc_samples_per_pair\": " + std::to_string(est.mc_samples_per_pair) + ",\n";
    json += "  \"lambda\": \"" + mi_lambda + "\",\n";
    json += std::string("  \"soft\": ") + (est.soft ? "true" : "false") + "\n}\n";
    write_text_file(mi_out, json);
    std::printf("wrote %s: mi %s +- %s nats over %d pairs\n", mi_out.c_str(),
                fmt_float(est.mi).c_str(), fmt_float(est.stderr_).c_str(), est.n_pairs);
  });

  // gradcheck ------------------------------------------------------------------
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference audit of the autodiff engine");
  CommonOpts gc_c;
  add_common(gc, gc_c);
  gc->callback([&] {
    const GradCheckSummary s = run_gradcheck(gc_c.seed);
    std::fputs(gradcheck_report(s).c_str(), stdout);
    check<contract_error>(s.all_pass(), "gradient check failed");
  });

  // ablate -----------------------------------------------------------------
  auto* ab = app.add_subcommand("ablate", "Soft-token sweep over layer count and token length");
  CommonOpts ab_c;
  add_common(ab, ab_c);
  std::string ab_data, ab_base, ab_out;
  int ab_iters = 100;
  std::vector<int> ab_layers{1, 2, 5, 7};
  std::vector<int> ab_tokens{1, 4, 8, 16};
  ab->add_option("--data", ab_data, "Dataset file")->required();
  ab->add_option("--base", ab_base, "Base checkpoint")->required();
  ab->add_option("--out", ab_out, "Sweep CSV to write")->required();
  ab->add_option("--iters", ab_iters, "Iterations per grid cell")->capture_default_str();
  ab->add_option("--layers", ab_layers, "Conditioned-layer counts")->expected(-1);
  ab->add_option("--tokens", ab_tokens, "Token lengths")->expected(-1);
  ab->callback([&] {
    const Dataset ds = load_dataset(ab_data);
    const Checkpoint base = load_checkpoint(ab_base);
    const std::string csv = ablation_sweep(base, ds, ab_layers, ab_tokens, ab_iters, ab_c.seed);
    write_text_file(ab_out, csv);
    std::printf("wrote %s: %d cells\n", ab_out.c_str(),
                static_cast<int>(ab_layers.size() * ab_tokens.size()));
  });

  app.require_subcommand(1);
  CLI11_PARSE(app, argc, argv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive soft-token fine-tuning lab for a flow-matching text-to-image model"};
  try {
    return run(app, argc, argv);
  } catch (const io_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIoExit;
  } catch (const format_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFormatExit;
  } catch (const config_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kConfigExit;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kContractExit;
  }
}
