#include "softrepa/eval.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "softrepa/errors.hpp"
#include "softrepa/losses.hpp"
#include "softrepa/rng.hpp"
#include "softrepa/serde.hpp"
#include "softrepa/train.hpp"

namespace softrepa {

using nlohmann::json;

double CategoryStat::stderr_() const {
  if (total == 0) return 0.0;
  const double p = accuracy();
  return std::sqrt(p * (1.0 - p) / static_cast<double>(total));
}

std::uint64_t caption_set_hash(const std::vector<Caption>& captions) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const Caption& c : captions)
    for (int tok : c.tokens) h = mix64(h ^ static_cast<std::uint64_t>(tok));
  return h;
}

namespace {

void score_sample(const Caption& cap, const VerifierReport& vr, CategoryMap& m) {
  const Scene want = scene_of(cap);
  const int n_obj = static_cast<int>(want.objects.size());
  auto attr = [&](const std::string& key) { return vr.per_attribute.at(key); };
  auto add = [&](const char* key, bool ok) {
    CategoryStat& s = m[key];
    ++s.total;
    s.correct += ok ? 1 : 0;
  };

  const bool colors_ok = attr("color1") && (n_obj < 2 || attr("color2"));
  const bool positions_ok = attr("position1") && (n_obj < 2 || attr("position2"));
  if (n_obj == 1) {
    add("single", vr.overall);
    add("colors", colors_ok);
  } else {
    add("two", attr("shape1") && attr("position1") && attr("shape2") && attr("position2"));
    add("color_attribution", colors_ok);
  }
  add("counting", attr("count"));
  add("position", positions_ok);
  add("overall", vr.overall);
}

void merge(CategoryMap& into, const CategoryMap& from) {
  for (const auto& [key, stat] : from) {
    into[key].correct += stat.correct;
    into[key].total += stat.total;
  }
}

constexpr int kEvalBatchRows = 256;

}  // namespace

EvalReport eval_alignment(const Checkpoint& ck, const std::vector<Caption>& captions,
                          const GuidanceConfig& g, int n_per_caption,
                          const std::vector<std::uint64_t>& seeds) {
  g.validate();
  check<contract_error>(!captions.empty(), "eval_alignment: empty caption set");
  check<contract_error>(n_per_caption >= 1, "eval_alignment: n_per_caption must be positive");
  check<contract_error>(!seeds.empty(), "eval_alignment: need at least one seed");
  for (const Caption& c : captions) scene_of(c);

  EvalReport report;
  report.config_digest = config_digest(ck.config);
  report.seeds = seeds;
  report.n_per_caption = n_per_caption;
  report.guidance_w = g.w;
  report.steps = g.steps;
  report.use_soft = g.use_soft;
  report.caption_set_hash = caption_set_hash(captions);

  for (std::uint64_t seed : seeds) {
    CategoryMap seed_map;
    std::vector<Caption> pending_caps;
    std::vector<std::uint64_t> pending_seeds;
    auto flush = [&]() {
      if (pending_caps.empty()) return;
      const auto images = sample_batch(ck, pending_caps, g, pending_seeds);
      for (std::size_t i = 0; i < images.size(); ++i)
        score_sample(pending_caps[i], verify(images[i], pending_caps[i]), seed_map);
      pending_caps.clear();
      pending_seeds.clear();
    };
    for (std::size_t ci = 0; ci < captions.size(); ++ci) {
      for (int j = 0; j < n_per_caption; ++j) {
        pending_caps.push_back(captions[ci]);
        pending_seeds.push_back(
            mix64(seed ^ mix64(0x65766c0ull + ci * static_cast<std::uint64_t>(n_per_caption) + j)));
        if (static_cast<int>(pending_caps.size()) == kEvalBatchRows) flush();
      }
    }
    flush();
    report.per_seed.push_back(seed_map);
    merge(report.categories, seed_map);
  }

  report.overall = report.categories["overall"];
  report.categories.erase("overall");
  const CategoryStat single = report.categories["single"];
  const CategoryStat two = report.categories["two"];
  check<contract_error>(single.total + two.total == report.overall.total,
                        "eval_alignment: category partition does not cover the total");
  return report;
}

EvalReport run_full_eval(const Checkpoint& ck, const Dataset& ds,
                         const std::vector<Caption>& captions, const GuidanceConfig& g,
                         int n_per_caption, const std::vector<std::uint64_t>& seeds) {
  EvalReport report = eval_alignment(ck, captions, g, n_per_caption, seeds);
  const RunConfig& cfg = ck.config;
  const DatasetSplit split = split_dataset(ds, cfg.data.val_percent);

  if (!split.val.empty()) {
    const std::uint64_t val_seed = mix64(seeds[0] ^ 0x76616c5f63626174ull);
    ForwardOptions opt = options_for(ck, g.use_soft);
    NoGrad guard;
    double acc = 0.0;
    const int n_batches = 4;
    for (int k = 0; k < n_batches; ++k) {
      const ContrastiveBatch vb = make_contrastive_batch(ds, split.val, cfg.loss, val_seed, k);
      acc += softrepa_loss(ck.model, opt, vb, cfg.loss.tau).item();
    }
    report.val_loss = static_cast<float>(acc / n_batches);

    std::vector<DatasetPair> held;
    for (int idx : split.val) held.push_back(ds.pairs[idx]);
    report.mi = mutual_information(ck, held, g.use_soft, cfg.eval.mc_samples, cfg.eval.mi_pairs,
                                   cfg.eval.mi_candidates, LambdaMode::uniform, seeds[0]);

    std::vector<Tensor> generated;
    const int n_ref = std::min<int>(static_cast<int>(split.val.size()), 64);
    std::vector<Caption> ref_caps;
    std::vector<std::uint64_t> ref_seeds;
    std::vector<Tensor> reference;
    for (int k = 0; k < n_ref; ++k) {
      reference.push_back(ds.pairs[split.val[k]].image);
      ref_caps.push_back(ds.pairs[split.val[k]].caption);
      ref_seeds.push_back(mix64(seeds[0] ^ mix64(0x6d6f6d0ull + k)));
    }
    if (n_ref >= 2) {
      generated = sample_batch(ck, ref_caps, g, ref_seeds);
      report.moment_distance = static_cast<float>(moment_distance(generated, reference));
    }
  }
  return report;
}

double moment_distance(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  check<contract_error>(a.size() >= 2 && b.size() >= 2,
                        "moment_distance: need at least 2 samples per set");
  const std::int64_t E = a[0].size();
  for (const Tensor& t : a)
    check<shape_error>(t.shape() == a[0].shape(), "moment_distance: ragged shapes in A");
  for (const Tensor& t : b)
    check<shape_error>(t.shape() == a[0].shape(), "moment_distance: B shape differs from A");

  auto fit = [E](const std::vector<Tensor>& set, std::vector<double>& mu, std::vector<double>& var) {
    mu.assign(E, 0.0);
    var.assign(E, 0.0);
    for (const Tensor& t : set) {
      const auto d = t.data();
      for (std::int64_t i = 0; i < E; ++i) mu[i] += d[i];
    }
    for (std::int64_t i = 0; i < E; ++i) mu[i] /= static_cast<double>(set.size());
    for (const Tensor& t : set) {
      const auto d = t.data();
      for (std::int64_t i = 0; i < E; ++i) {
        const double c = d[i] - mu[i];
        var[i] += c * c;
      }
    }
    for (std::int64_t i = 0; i < E; ++i) var[i] /= static_cast<double>(set.size());
  };

  std::vector<double> mu_a, var_a, mu_b, var_b;
  fit(a, mu_a, var_a);
  fit(b, mu_b, var_b);
  double d2 = 0.0;
  for (std::int64_t i = 0; i < E; ++i) {
    const double dm = mu_a[i] - mu_b[i];
    const double ds = std::sqrt(var_a[i]) - std::sqrt(var_b[i]);
    d2 += dm * dm + ds * ds;
  }
  return d2;
}

double sign_test_p(int wins, int losses) {
  check<contract_error>(wins >= 0 && losses >= 0, "sign_test_p: negative counts");
  const int n = wins + losses;
  if (n == 0) return 1.0;
  // symmetric two-sided tail mass at p=1/2
  const double center = 0.5 * n;
  const double dev = std::abs(wins - center);
  std::vector<double> logc(n + 1, 0.0);
  for (int k = 1; k <= n; ++k)
    logc[k] = logc[k - 1] + std::log(static_cast<double>(n - k + 1)) - std::log(static_cast<double>(k));
  double p = 0.0;
  for (int k = 0; k <= n; ++k)
    if (std::abs(k - center) >= dev - 1e-12) p += std::exp(logc[k] - n * std::log(2.0));
  return std::min(1.0, p);
}

std::string compare(const EvalReport& base, const EvalReport& tuned) {
  check<contract_error>(base.caption_set_hash == tuned.caption_set_hash,
                        "compare: reports cover different caption sets");
  check<contract_error>(base.seeds == tuned.seeds, "compare: reports used different seeds");
  check<contract_error>(base.n_per_caption == tuned.n_per_caption &&
                            base.steps == tuned.steps,
                        "compare: reports used different sampling settings");

  std::string csv = "# base_digest=" + base.config_digest + " tuned_digest=" + tuned.config_digest + "\n";
  csv += "metric,base,tuned,delta,wins,losses,ties,p_value\n";

  auto acc_row = [&](const std::string& key) {
    const CategoryStat bs = key == "overall" ? base.overall : base.categories.at(key);
    const CategoryStat ts = key == "overall" ? tuned.overall : tuned.categories.at(key);
    int wins = 0, losses = 0, ties = 0;
    for (std::size_t s = 0; s < base.seeds.size(); ++s) {
      auto find = [&](const CategoryMap& m) {
        const auto it = m.find(key);
        return it == m.end() ? 0.0 : it->second.accuracy();
      };
      const double b = find(base.per_seed[s]);
      const double t = find(tuned.per_seed[s]);
      if (t > b)
        ++wins;
      else if (t < b)
        ++losses;
      else
        ++ties;
    }
    csv += key + "," + fmt_float(bs.accuracy()) + "," + fmt_float(ts.accuracy()) + "," +
           fmt_float(ts.accuracy() - bs.accuracy()) + "," + std::to_string(wins) + "," +
           std::to_string(losses) + "," + std::to_string(ties) + "," +
           fmt_float(sign_test_p(wins, losses)) + "\n";
  };

  acc_row("overall");
  for (const char* key :
       {"single", "two", "counting", "colors", "position", "color_attribution"})
    if (base.categories.count(key) || tuned.categories.count(key)) acc_row(key);

  auto scalar_row = [&](const char* name, std::optional<float> b, std::optional<float> t) {
    if (!b || !t) return;
    csv += std::string(name) + "," + fmt_float(*b) + "," + fmt_float(*t) + "," +
           fmt_float(static_cast<double>(*t) - *b) + ",,,,\n";
  };
  scalar_row("val_loss", base.val_loss, tuned.val_loss);
  scalar_row("mi", base.mi ? std::optional<float>(base.mi->mi) : std::nullopt,
             tuned.mi ? std::optional<float>(tuned.mi->mi) : std::nullopt);
  scalar_row("moment_distance", base.moment_distance, tuned.moment_distance);
  return csv;
}

namespace {

json stat_to_json(const CategoryStat& s) { return json{{"correct", s.correct}, {"total", s.total}}; }

CategoryStat stat_from_json(const json& j) {
  CategoryStat s;
  s.correct = j.at("correct").get<std::int64_t>();
  s.total = j.at("total").get<std::int64_t>();
  return s;
}

json map_to_json(const CategoryMap& m) {
  json j = json::object();
  for (const auto& [key, stat] : m) j[key] = stat_to_json(stat);
  return j;
}

CategoryMap map_from_json(const json& j) {
  CategoryMap m;
  for (const auto& [key, value] : j.items()) m[key] = stat_from_json(value);
  return m;
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
  json j;
  j["config_digest"] = r.config_digest;
  j["seeds"] = r.seeds;
  j["n_per_caption"] = r.n_per_caption;
  j["guidance_w"] = r.guidance_w;
  j["steps"] = r.steps;
  j["use_soft"] = r.use_soft;
  j["caption_set_hash"] = r.caption_set_hash;
  j["overall"] = stat_to_json(r.overall);
  j["categories"] = map_to_json(r.categories);
  json per_seed = json::array();
  for (const CategoryMap& m : r.per_seed) per_seed.push_back(map_to_json(m));
  j["per_seed"] = per_seed;
  if (r.val_loss) j["val_loss"] = *r.val_loss;
  if (r.mi)
    j["mi"] = {{"mi", r.mi->mi},
               {"stderr", r.mi->stderr_},
               {"n_pairs", r.mi->n_pairs},
               {"mc_samples", r.mi->mc_samples_per_pair},
               {"soft", r.mi->soft}};
  if (r.moment_distance) j["moment_distance"] = *r.moment_distance;
  return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  EvalReport r;
  try {
    const json j = json::parse(text);
    r.config_digest = j.at("config_digest").get<std::string>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.n_per_caption = j.at("n_per_caption").get<int>();
    r.guidance_w = j.at("guidance_w").get<float>();
    r.steps = j.at("steps").get<int>();
    r.use_soft = j.at("use_soft").get<bool>();
    r.caption_set_hash = j.at("caption_set_hash").get<std::uint64_t>();
    r.overall = stat_from_json(j.at("overall"));
    r.categories = map_from_json(j.at("categories"));
    for (const json& m : j.at("per_seed")) r.per_seed.push_back(map_from_json(m));
    if (j.contains("val_loss")) r.val_loss = j.at("val_loss").get<float>();
    if (j.contains("mi")) {
      MiEstimate mi;
      mi.mi = j.at("mi").at("mi").get<float>();
      mi.stderr_ = j.at("mi").at("stderr").get<float>();
      mi.n_pairs = j.at("mi").at("n_pairs").get<int>();
      mi.mc_samples_per_pair = j.at("mi").at("mc_samples").get<int>();
      mi.soft = j.at("mi").at("soft").get<bool>();
      r.mi = mi;
    }
    if (j.contains("moment_distance")) r.moment_distance = j.at("moment_distance").get<float>();
  } catch (const json::exception& e) {
    throw format_error(std::string("eval report: ") + e.what());
  }
  return r;
}

void save_report(const std::string& path, const EvalReport& r) {
  write_text_file(path, report_to_json(r));
}

EvalReport load_report(const std::string& path) {
  const auto bytes = read_file(path);
  return report_from_json(std::string(bytes.begin(), bytes.end()));
}

}  // namespace softrepa
