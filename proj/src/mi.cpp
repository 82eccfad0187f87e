#include "softrepa/mi.hpp"

#include <algorithm>
#include <cmath>

#include "softrepa/errors.hpp"
#include "softrepa/rng.hpp"

namespace softrepa {

VelocityFn velocity_of(const Checkpoint& ck, bool use_soft) {
  const Checkpoint* c = &ck;
  const bool soft = use_soft;
  return [c, soft](const Tensor& xt, const std::vector<float>& t,
                   const std::vector<Caption>& captions) {
    return c->model.forward(xt, t, captions, options_for(*c, soft));
  };
}

namespace {

struct Draw {
  Tensor eps;
  float t = 0.5f;
};

std::vector<Draw> make_draws(const Tensor& x0, int mc_samples, std::uint64_t seed) {
  check<contract_error>(mc_samples >= 1, "mi probe: mc_samples must be at least 1");
  std::vector<Draw> draws(mc_samples);
  for (int s = 0; s < mc_samples; ++s) {
    RngStream eps(seed, "mi_eps", s);
    draws[s].eps = randn(x0.shape(), eps);
    RngStream time(seed, "mi_t", s);
    draws[s].t = kMinT + time.uniform() * (1.0f - 2.0f * kMinT);
  }
  return draws;
}

double lambda_of(LambdaMode mode, float t) {
  if (mode == LambdaMode::uniform) return 1.0;
  return 2.0 * (1.0 - static_cast<double>(t)) / static_cast<double>(t);
}

// Weighted squared residuals, one row per (draw, candidate); all candidates
// of a draw share its (t, eps).
std::vector<double> weighted_residuals(const VelocityFn& velocity, const Tensor& x0,
                                       const std::vector<Caption>& candidates,
                                       const std::vector<Draw>& draws, LambdaMode mode) {
  NoGrad guard;
  const int N = static_cast<int>(candidates.size());
  const int S = static_cast<int>(draws.size());
  const std::int64_t E = x0.size();
  std::vector<Tensor> row_xt;
  std::vector<float> row_t;
  std::vector<Caption> row_caption;
  row_xt.reserve(static_cast<std::size_t>(S) * N);
  for (const Draw& d : draws) {
    Tensor xt = interpolate(x0, d.eps, d.t);
    for (int c = 0; c < N; ++c) {
      row_xt.push_back(xt);
      row_t.push_back(d.t);
      row_caption.push_back(candidates[c]);
    }
  }
  Tensor v = velocity(stack(row_xt), row_t, row_caption);
  check<shape_error>(v.dim(0) == S * N && v.size() == static_cast<std::int64_t>(S) * N * E,
                     "mi probe: velocity output shape mismatch");

  std::vector<double> out(static_cast<std::size_t>(S) * N);
  const auto vd = v.data();
  const auto x0d = x0.data();
  for (int s = 0; s < S; ++s) {
    const auto ed = draws[s].eps.data();
    const double lam = lambda_of(mode, draws[s].t);
    for (int c = 0; c < N; ++c) {
      const float* row = vd.data() + (static_cast<std::int64_t>(s) * N + c) * E;
      double acc = 0.0;
      for (std::int64_t i = 0; i < E; ++i) {
        const double r = static_cast<double>(row[i]) - (static_cast<double>(ed[i]) - x0d[i]);
        acc += r * r;
      }
      if (mode == LambdaMode::uniform) acc /= static_cast<double>(E);
      out[static_cast<std::size_t>(s) * N + c] = lam * acc;
    }
  }
  return out;
}

}  // namespace

float neg_loglik_proxy(const VelocityFn& velocity, const Tensor& x0, const Caption& caption,
                       int mc_samples, LambdaMode mode, std::uint64_t seed) {
  const auto draws = make_draws(x0, mc_samples, seed);
  const auto resid = weighted_residuals(velocity, x0, {caption}, draws, mode);
  double acc = 0.0;
  for (double r : resid) acc += r;
  return static_cast<float>(-0.5 * acc / static_cast<double>(mc_samples));
}

PmiEstimate pmi(const VelocityFn& velocity, const Tensor& x0, const Caption& positive,
                const std::vector<Caption>& candidates, int mc_samples, LambdaMode mode,
                std::uint64_t seed) {
  const int N = static_cast<int>(candidates.size());
  check<contract_error>(N >= 1, "pmi: empty candidate list");
  int pos = -1;
  for (int c = 0; c < N; ++c)
    if (candidates[c] == positive) {
      pos = c;
      break;
    }
  check<contract_error>(pos >= 0, "pmi: positive caption missing from candidates");

  const auto draws = make_draws(x0, mc_samples, seed);
  const auto resid = weighted_residuals(velocity, x0, candidates, draws, mode);

  std::vector<double> d(N, 0.0);
  for (int s = 0; s < mc_samples; ++s) {
    const double rp = resid[static_cast<std::size_t>(s) * N + pos];
    for (int c = 0; c < N; ++c)
      d[c] += resid[static_cast<std::size_t>(s) * N + c] - rp;
  }
  double mean_exp = 0.0;
  for (int c = 0; c < N; ++c)
    mean_exp += std::exp(-0.5 * d[c] / static_cast<double>(mc_samples));
  mean_exp /= static_cast<double>(N);

  PmiEstimate est;
  est.value = static_cast<float>(-std::log(mean_exp));
  est.mc_samples = mc_samples;
  est.candidates = N;
  check<contract_error>(est.value <= std::log(static_cast<double>(N)) + 1e-6,
                        "pmi: estimator escaped its log(N) bound");
  return est;
}

MiEstimate mutual_information(const VelocityFn& velocity, const std::vector<DatasetPair>& pairs,
                              int mc_samples, int max_pairs, int max_candidates, LambdaMode mode,
                              std::uint64_t seed) {
  check<contract_error>(!pairs.empty(), "mutual_information: empty eval set");
  std::vector<Caption> distinct;
  for (const DatasetPair& p : pairs)
    if (std::find(distinct.begin(), distinct.end(), p.caption) == distinct.end())
      distinct.push_back(p.caption);
  check<contract_error>(distinct.size() >= 2,
                        "mutual_information: eval set needs at least 2 distinct captions");

  const int n_pairs = max_pairs > 0 ? std::min<int>(max_pairs, static_cast<int>(pairs.size()))
                                    : static_cast<int>(pairs.size());
  const int n_cand = max_candidates > 0
                         ? std::min<int>(max_candidates, static_cast<int>(distinct.size()))
                         : static_cast<int>(distinct.size());
  check<contract_error>(n_cand >= 2, "mutual_information: need at least 2 candidates");
  const int per_pair = std::max(1, mc_samples / n_pairs);

  std::vector<double> values;
  values.reserve(n_pairs);
  for (int i = 0; i < n_pairs; ++i) {
    const DatasetPair& p = pairs[i];
    std::vector<Caption> candidates = {p.caption};
    for (const Caption& c : distinct) {
      if (static_cast<int>(candidates.size()) == n_cand) break;
      if (!(c == p.caption)) candidates.push_back(c);
    }
    const std::uint64_t pair_seed = mix64(seed ^ mix64(0x70616972 + static_cast<std::uint64_t>(i)));
    values.push_back(pmi(velocity, p.image, p.caption, candidates, per_pair, mode, pair_seed).value);
  }

  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= values.size();
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var = values.size() > 1 ? var / (static_cast<double>(values.size()) - 1.0) : 0.0;

  MiEstimate est;
  est.mi = static_cast<float>(mean);
  est.stderr_ = static_cast<float>(std::sqrt(var / static_cast<double>(values.size())));
  est.n_pairs = n_pairs;
  est.mc_samples_per_pair = per_pair;
  return est;
}

MiEstimate mutual_information(const Checkpoint& ck, const std::vector<DatasetPair>& pairs,
                              bool use_soft, int mc_samples, int max_pairs, int max_candidates,
                              LambdaMode mode, std::uint64_t seed) {
  MiEstimate est = mutual_information(velocity_of(ck, use_soft), pairs, mc_samples, max_pairs,
                                      max_candidates, mode, seed);
  est.soft = use_soft;
  return est;
}

}  // namespace softrepa
