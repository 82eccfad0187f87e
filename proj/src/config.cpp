#include "softrepa/config.hpp"

#include <cmath>
#include <cstdio>
#include <initializer_list>
#include <string_view>

#include <json.hpp>

#include "softrepa/errors.hpp"
#include "softrepa/rng.hpp"
#include "softrepa/serde.hpp"

namespace softrepa {

using nlohmann::json;

namespace {

void check_keys(const json& j, const char* section, std::initializer_list<std::string_view> allowed) {
  check<config_error>(j.is_object(), std::string("config: section ") + section + " must be an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (std::string_view a : allowed)
      if (a == key) {
        known = true;
        break;
      }
    check<config_error>(known, std::string("config: unknown key ") + section + "." + key);
  }
}

template <class T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json tau_to_json(const TemperatureSchedule& t) {
  json j;
  j["kind"] = t.kind == TemperatureSchedule::Kind::constant ? "constant" : "linear_in_t";
  j["tau0"] = t.tau0;
  if (t.tau1) j["tau1"] = *t.tau1;
  return j;
}

TemperatureSchedule tau_from_json(const json& j) {
  check_keys(j, "loss.tau", {"kind", "tau0", "tau1"});
  TemperatureSchedule t;
  if (j.contains("kind")) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "constant")
      t.kind = TemperatureSchedule::Kind::constant;
    else if (kind == "linear_in_t")
      t.kind = TemperatureSchedule::Kind::linear_in_t;
    else
      throw config_error("config: loss.tau.kind must be constant or linear_in_t");
  }
  get_if(j, "tau0", t.tau0);
  if (j.contains("tau1")) t.tau1 = j.at("tau1").get<float>();
  return t;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  check<config_error>(data.count > 0, "config: data.count must be positive");
  check<config_error>(data.val_percent >= 0 && data.val_percent < 100,
                      "config: data.val_percent must lie in [0,100)");
  check<config_error>(data.two_object_fraction >= 0.0f && data.two_object_fraction <= 1.0f,
                      "config: data.two_object_fraction must lie in [0,1]");
  check<config_error>(loss.positives >= 1, "config: loss.positives must be at least 1");
  check<config_error>(loss.negatives >= 0, "config: loss.negatives must be non-negative");
  check<config_error>(loss.positives + loss.negatives >= 2,
                      "config: need at least 2 candidate captions per image");
  check<config_error>(loss.negatives % loss.positives == 0,
                      "config: loss.negatives must be a multiple of loss.positives");
  check<config_error>(std::isfinite(loss.dsm_weight) && loss.dsm_weight >= 0.0f,
                      "config: loss.dsm_weight must be finite and non-negative");
  check<config_error>(optim.batch_size > 0, "config: optim.batch_size must be positive");
  check<config_error>(optim.restart_period >= 1 && optim.restart_mult >= 1,
                      "config: optim.restart_period and restart_mult must be >= 1");
  check<config_error>(optim.log_every >= 1 && optim.val_every >= 1,
                      "config: optim.log_every and val_every must be >= 1");
  check<config_error>(sample.steps > 0, "config: sample.steps must be positive");
  check<config_error>(std::isfinite(sample.guidance) && sample.guidance >= 0.0f,
                      "config: sample.guidance must be finite and non-negative");
  check<config_error>(eval.captions > 0 && eval.per_caption > 0, "config: eval sizes must be positive");
  check<config_error>(!eval.seeds.empty(), "config: eval.seeds must be non-empty");
  check<config_error>(eval.mc_samples > 0 && eval.mi_pairs > 0 && eval.mi_candidates >= 2,
                      "config: eval probe sizes must be positive (mi_candidates >= 2)");
}

std::string to_json(const RunConfig& cfg) {
  json j;
  j["data"] = {{"count", cfg.data.count},
               {"seed", cfg.data.seed},
               {"two_object_fraction", cfg.data.two_object_fraction},
               {"val_percent", cfg.data.val_percent}};
  j["model"] = {{"layers", cfg.model.layers},
                {"hidden", cfg.model.hidden},
                {"heads", cfg.model.heads},
                {"patch", cfg.model.patch},
                {"image_size", cfg.model.image_size},
                {"channels", cfg.model.channels},
                {"caption_len", cfg.model.caption_len},
                {"vocab", cfg.model.vocab},
                {"time_dim", cfg.model.time_dim},
                {"p_uncond", cfg.model.p_uncond}};
  j["soft"] = {{"layer_set", cfg.soft.bank.layer_set},
               {"buckets", cfg.soft.bank.buckets},
               {"tokens", cfg.soft.bank.tokens},
               {"init_std", cfg.soft.bank.init_std},
               {"init", cfg.soft.uncond_init ? "uncond_embedding" : "gaussian"}};
  j["lora"] = {{"layer_set", cfg.lora.layer_set},
               {"rank", cfg.lora.rank},
               {"init_std", cfg.lora.init_std}};
  j["loss"] = {{"tau", tau_to_json(cfg.loss.tau)},
               {"positives", cfg.loss.positives},
               {"negatives", cfg.loss.negatives},
               {"dsm_weight", cfg.loss.dsm_weight},
               {"shared_draw", cfg.loss.shared_draw}};
  j["optim"] = {{"lr", cfg.optim.adamw.lr},
                {"weight_decay", cfg.optim.adamw.weight_decay},
                {"beta1", cfg.optim.adamw.beta1},
                {"beta2", cfg.optim.adamw.beta2},
                {"eps", cfg.optim.adamw.eps},
                {"batch_size", cfg.optim.batch_size},
                {"restart_period", cfg.optim.restart_period},
                {"restart_mult", cfg.optim.restart_mult},
                {"log_every", cfg.optim.log_every},
                {"val_every", cfg.optim.val_every}};
  j["sample"] = {{"steps", cfg.sample.steps}, {"guidance", cfg.sample.guidance}};
  j["eval"] = {{"captions", cfg.eval.captions},
               {"per_caption", cfg.eval.per_caption},
               {"seeds", cfg.eval.seeds},
               {"mc_samples", cfg.eval.mc_samples},
               {"mi_pairs", cfg.eval.mi_pairs},
               {"mi_candidates", cfg.eval.mi_candidates}};
  return j.dump(2);
}

RunConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw config_error(std::string("config: ") + e.what());
  }
  RunConfig cfg;
  try {
    check_keys(j, "(root)", {"data", "model", "soft", "lora", "loss", "optim", "sample", "eval"});
    if (j.contains("data")) {
      const json& s = j.at("data");
      check_keys(s, "data", {"count", "seed", "two_object_fraction", "val_percent"});
      get_if(s, "count", cfg.data.count);
      get_if(s, "seed", cfg.data.seed);
      get_if(s, "two_object_fraction", cfg.data.two_object_fraction);
      get_if(s, "val_percent", cfg.data.val_percent);
    }
    if (j.contains("model")) {
      const json& s = j.at("model");
      check_keys(s, "model",
                 {"layers", "hidden", "heads", "patch", "image_size", "channels", "caption_len",
                  "vocab", "time_dim", "p_uncond"});
      get_if(s, "layers", cfg.model.layers);
      get_if(s, "hidden", cfg.model.hidden);
      get_if(s, "heads", cfg.model.heads);
      get_if(s, "patch", cfg.model.patch);
      get_if(s, "image_size", cfg.model.image_size);
      get_if(s, "channels", cfg.model.channels);
      get_if(s, "caption_len", cfg.model.caption_len);
      get_if(s, "vocab", cfg.model.vocab);
      get_if(s, "time_dim", cfg.model.time_dim);
      get_if(s, "p_uncond", cfg.model.p_uncond);
    }
    if (j.contains("soft")) {
      const json& s = j.at("soft");
      check_keys(s, "soft", {"layer_set", "buckets", "tokens", "init_std", "init"});
      get_if(s, "layer_set", cfg.soft.bank.layer_set);
      get_if(s, "buckets", cfg.soft.bank.buckets);
      get_if(s, "tokens", cfg.soft.bank.tokens);
      get_if(s, "init_std", cfg.soft.bank.init_std);
      if (s.contains("init")) {
        const std::string init = s.at("init").get<std::string>();
        if (init == "gaussian")
          cfg.soft.uncond_init = false;
        else if (init == "uncond_embedding")
          cfg.soft.uncond_init = true;
        else
          throw config_error("config: soft.init must be gaussian or uncond_embedding");
      }
    }
    if (j.contains("lora")) {
      const json& s = j.at("lora");
      check_keys(s, "lora", {"layer_set", "rank", "init_std"});
      get_if(s, "layer_set", cfg.lora.layer_set);
      get_if(s, "rank", cfg.lora.rank);
      get_if(s, "init_std", cfg.lora.init_std);
    }
    if (j.contains("loss")) {
      const json& s = j.at("loss");
      check_keys(s, "loss", {"tau", "positives", "negatives", "dsm_weight", "shared_draw"});
      if (s.contains("tau")) cfg.loss.tau = tau_from_json(s.at("tau"));
      get_if(s, "positives", cfg.loss.positives);
      get_if(s, "negatives", cfg.loss.negatives);
      get_if(s, "dsm_weight", cfg.loss.dsm_weight);
      get_if(s, "shared_draw", cfg.loss.shared_draw);
    }
    if (j.contains("optim")) {
      const json& s = j.at("optim");
      check_keys(s, "optim",
                 {"lr", "weight_decay", "beta1", "beta2", "eps", "batch_size", "restart_period",
                  "restart_mult", "log_every", "val_every"});
      get_if(s, "lr", cfg.optim.adamw.lr);
      get_if(s, "weight_decay", cfg.optim.adamw.weight_decay);
      get_if(s, "beta1", cfg.optim.adamw.beta1);
      get_if(s, "beta2", cfg.optim.adamw.beta2);
      get_if(s, "eps", cfg.optim.adamw.eps);
      get_if(s, "batch_size", cfg.optim.batch_size);
      get_if(s, "restart_period", cfg.optim.restart_period);
      get_if(s, "restart_mult", cfg.optim.restart_mult);
      get_if(s, "log_every", cfg.optim.log_every);
      get_if(s, "val_every", cfg.optim.val_every);
    }
    if (j.contains("sample")) {
      const json& s = j.at("sample");
      check_keys(s, "sample", {"steps", "guidance"});
      get_if(s, "steps", cfg.sample.steps);
      get_if(s, "guidance", cfg.sample.guidance);
    }
    if (j.contains("eval")) {
      const json& s = j.at("eval");
      check_keys(s, "eval",
                 {"captions", "per_caption", "seeds", "mc_samples", "mi_pairs", "mi_candidates"});
      get_if(s, "captions", cfg.eval.captions);
      get_if(s, "per_caption", cfg.eval.per_caption);
      get_if(s, "seeds", cfg.eval.seeds);
      get_if(s, "mc_samples", cfg.eval.mc_samples);
      get_if(s, "mi_pairs", cfg.eval.mi_pairs);
      get_if(s, "mi_candidates", cfg.eval.mi_candidates);
    }
  } catch (const json::exception& e) {
    throw config_error(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  const auto bytes = read_file(path);
  return config_from_json(std::string(bytes.begin(), bytes.end()));
}

std::string config_digest(const RunConfig& cfg) {
  const std::uint64_t h = fnv1a64(to_json(cfg));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace softrepa
