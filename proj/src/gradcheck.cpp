#include "softrepa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>

#include "softrepa/denoiser.hpp"
#include "softrepa/errors.hpp"
#include "softrepa/flow.hpp"
#include "softrepa/losses.hpp"
#include "softrepa/rng.hpp"
#include "softrepa/tensor.hpp"
#include "softrepa/train.hpp"

namespace softrepa {

bool GradCheckSummary::all_pass() const {
  return std::all_of(cases.begin(), cases.end(), [](const GradCheckCase& c) { return c.pass; });
}

std::string gradcheck_report(const GradCheckSummary& s) {
  std::string out;
  char line[160];
  for (const GradCheckCase& c : s.cases) {
    std::snprintf(line, sizeof line, "%s %-24s checked=%lld max_err=%.3e tol=%.0e\n",
                  c.pass ? "ok  " : "FAIL", c.name.c_str(), static_cast<long long>(c.checked),
                  c.max_err, c.tol);
    out += line;
  }
  return out;
}

namespace {

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

std::vector<std::vector<double>> analytic_grads(std::vector<Tensor>& inputs, const LossFn& f) {
  for (Tensor& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  Tape tape;
  const Tensor loss = f(inputs);
  check<contract_error>(loss.size() == 1, "gradcheck: loss must be scalar");
  backward(loss);
  std::vector<std::vector<double>> grads;
  for (const Tensor& x : inputs) {
    const auto g = x.grad();
    grads.emplace_back(g.begin(), g.end());
  }
  return grads;
}

// Fourth-order central stencil: truncation is O(h^4), so the step can stay
// large enough to clear the f32 evaluation noise floor.
template <typename Eval>
double stencil5(const Eval& f, float h) {
  const double fm2 = f(-2.0f * h), fm1 = f(-h), fp1 = f(h), fp2 = f(2.0f * h);
  return (fm2 - 8.0 * fm1 + 8.0 * fp1 - fp2) / (12.0 * static_cast<double>(h));
}

// Per-element finite differences over every input; errors are normalized by
// the per-tensor gradient scale max(1e-3, max_i |grad_i|). Cases are designed
// so that scale is O(1), keeping the noise floor near 2e-5.
GradCheckCase fd_case(const std::string& name, std::vector<Tensor> inputs, const LossFn& f,
                      float h, double tol) {
  GradCheckCase c{name, 0, 0.0, tol, false};
  const auto grads = analytic_grads(inputs, f);

  NoGrad ng;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    auto data = inputs[which].data();
    const auto& an = grads[which];
    double scale = 1e-3;
    for (double g : an) scale = std::max(scale, std::abs(g));

    for (std::size_t i = 0; i < an.size(); ++i) {
      if (std::abs(an[i]) <= 1e-6) continue;
      const float saved = data[i];
      const double fd = stencil5(
          [&](float d) {
            data[i] = saved + d;
            const double v = f(inputs).item();
            data[i] = saved;
            return v;
          },
          h);
      c.max_err = std::max(c.max_err, std::abs(fd - an[i]) / std::max({std::abs(an[i]), std::abs(fd), scale}));
      ++c.checked;
    }
  }
  c.pass = c.max_err <= tol;
  return c;
}

Tensor rand_input(std::vector<int> shape, RngStream& rng, float stddev = 1.0f) {
  return randn(std::move(shape), rng, stddev);
}

// ---- double-precision MLP oracle -------------------------------------------

double sigmoid_d(double z) { return 1.0 / (1.0 + std::exp(-z)); }

GradCheckCase mlp_oracle_case(std::uint64_t seed) {
  constexpr int B = 4, I = 6, H = 8, O = 5;
  RngStream rng(seed, "gradcheck_mlp", 0);
  Tensor x = rand_input({B, I}, rng);
  Tensor w1 = rand_input({I, H}, rng, 0.5f);
  Tensor b1 = rand_input({H}, rng, 0.1f);
  Tensor w2 = rand_input({H, O}, rng, 0.5f);
  Tensor b2 = rand_input({O}, rng, 0.1f);
  Tensor target = rand_input({B, O}, rng);

  std::vector<Tensor> inputs{x, w1, b1, w2, b2};
  const LossFn f = [&target](const std::vector<Tensor>& in) {
    const Tensor h = silu(linear(in[0], in[1], in[2]));
    const Tensor y = linear(h, in[3], in[4]);
    return mean(square(sub(y, target)));
  };
  const auto engine = analytic_grads(inputs, f);

  auto at = [](const Tensor& t, int r, int c, int cols) {
    return static_cast<double>(t.data()[r * cols + c]);
  };
  double z1[B][H], hh[B][H], y[B][O];
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < H; ++j) {
      double acc = at(b1, 0, j, H);
      for (int k = 0; k < I; ++k) acc += at(x, i, k, I) * at(w1, k, j, H);
      z1[i][j] = acc;
      hh[i][j] = acc * sigmoid_d(acc);
    }
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < O; ++j) {
      double acc = at(b2, 0, j, O);
      for (int k = 0; k < H; ++k) acc += hh[i][k] * at(w2, k, j, O);
      y[i][j] = acc;
    }
  double dy[B][O], dh[B][H];
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < O; ++j) dy[i][j] = 2.0 * (y[i][j] - at(target, i, j, O)) / (B * O);
  std::vector<double> gx(B * I, 0.0), gw1(I * H, 0.0), gb1(H, 0.0), gw2(H * O, 0.0), gb2(O, 0.0);
  for (int k = 0; k < H; ++k)
    for (int j = 0; j < O; ++j) {
      double acc = 0.0;
      for (int i = 0; i < B; ++i) acc += hh[i][k] * dy[i][j];
      gw2[k * O + j] = acc;
    }
  for (int j = 0; j < O; ++j)
    for (int i = 0; i < B; ++i) gb2[j] += dy[i][j];
  for (int i = 0; i < B; ++i)
    for (int k = 0; k < H; ++k) {
      double acc = 0.0;
      for (int j = 0; j < O; ++j) acc += dy[i][j] * at(w2, k, j, O);
      const double s = sigmoid_d(z1[i][k]);
      dh[i][k] = acc * (s * (1.0 + z1[i][k] * (1.0 - s)));
    }
  for (int k = 0; k < I; ++k)
    for (int j = 0; j < H; ++j) {
      double acc = 0.0;
      for (int i = 0; i < B; ++i) acc += at(x, i, k, I) * dh[i][j];
      gw1[k * H + j] = acc;
    }
  for (int j = 0; j < H; ++j)
    for (int i = 0; i < B; ++i) gb1[j] += dh[i][j];
  for (int i = 0; i < B; ++i)
    for (int k = 0; k < I; ++k) {
      double acc = 0.0;
      for (int j = 0; j < H; ++j) acc += dh[i][j] * at(w1, k, j, H);
      gx[i * I + k] = acc;
    }

  GradCheckCase c{"mlp_double_oracle", 0, 0.0, 1e-4, false};
  const std::vector<const std::vector<double>*> oracle{&gx, &gw1, &gb1, &gw2, &gb2};
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    const auto& ref = *oracle[which];
    double scale = 1e-3;
    for (double g : ref) scale = std::max(scale, std::abs(g));
    for (std::size_t i = 0; i < ref.size(); ++i) {
      c.max_err = std::max(c.max_err, std::abs(engine[which][i] - ref[i]) / scale);
      ++c.checked;
    }
  }
  c.pass = c.max_err <= c.tol;
  return c;
}

// ---- end-to-end checks -------------------------------------------------------

// Random directions carry O(|g|/sqrt(n)) signal, below the f32 noise floor for
// large n, so the check probes where the signal is: the gradient direction
// (validates the whole vector's projection) and the largest coordinates. The
// direction step moves every parameter at once and sees far more curvature
// than a single-coordinate step, but its signal (the full gradient norm) is
// also far larger, so it takes a smaller step h_dir than the coordinate
// probes' h_coord.
GradCheckCase directional_case(const std::string& name, std::vector<Tensor> params,
                               const std::function<Tensor()>& f, float h_dir, float h_coord,
                               double tol, int top_coords) {
  GradCheckCase c{name, 0, 0.0, tol, false};
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape tape;
    const Tensor loss = f();
    backward(loss);
  }
  std::vector<std::vector<double>> grads;
  std::vector<std::vector<float>> saved;
  double norm2 = 0.0;
  for (const Tensor& p : params) {
    const auto g = p.grad();
    grads.emplace_back(g.begin(), g.end());
    const auto d = p.data();
    saved.emplace_back(d.begin(), d.end());
    for (double v : grads.back()) norm2 += v * v;
  }
  const double gnorm = std::sqrt(norm2);
  check<contract_error>(gnorm > 1e-6, "gradcheck: vanishing end-to-end gradient");

  NoGrad ng;
  auto restore = [&] {
    for (std::size_t which = 0; which < params.size(); ++which)
      std::copy(saved[which].begin(), saved[which].end(), params[which].data().begin());
  };

  const double fd_dir = stencil5(
      [&](float d) {
        for (std::size_t which = 0; which < params.size(); ++which) {
          auto dst = params[which].data();
          const auto& g = grads[which];
          for (std::size_t i = 0; i < g.size(); ++i)
            dst[i] = static_cast<float>(saved[which][i] + d * g[i] / gnorm);
        }
        const double v = f().item();
        restore();
        return v;
      },
      h_dir);
  c.max_err = std::abs(fd_dir - gnorm) / std::max({1e-3, std::abs(fd_dir), gnorm});
  ++c.checked;
  if (std::getenv("GRADCHECK_DEBUG"))
    std::fprintf(stderr, "[%s] gnorm=%.6e fd_dir=%.6e err=%.3e\n", name.c_str(), gnorm, fd_dir,
                 c.max_err);

  struct Coord {
    std::size_t which, i;
    double g;
  };
  std::vector<Coord> coords;
  for (std::size_t which = 0; which < grads.size(); ++which)
    for (std::size_t i = 0; i < grads[which].size(); ++i)
      coords.push_back({which, i, grads[which][i]});
  std::partial_sort(coords.begin(), coords.begin() + std::min<std::size_t>(top_coords, coords.size()),
                    coords.end(),
                    [](const Coord& a, const Coord& b) { return std::abs(a.g) > std::abs(b.g); });
  for (int k = 0; k < top_coords && k < static_cast<int>(coords.size()); ++k) {
    const Coord& co = coords[k];
    auto data = params[co.which].data();
    const float base = saved[co.which][co.i];
    const double fd = stencil5(
        [&](float d) {
          data[co.i] = base + d;
          const double v = f().item();
          data[co.i] = base;
          return v;
        },
        h_coord);
    const double err = std::abs(fd - co.g) / std::max({1e-3, std::abs(fd), std::abs(co.g)});
    if (std::getenv("GRADCHECK_DEBUG"))
      std::fprintf(stderr, "[%s] coord[%zu,%zu] g=%.6e fd=%.6e err=%.3e\n", name.c_str(), co.which,
                   co.i, co.g, fd, err);
    c.max_err = std::max(c.max_err, err);
    ++c.checked;
  }
  c.pass = c.max_err <= tol;
  return c;
}

// Full-size rendered images spread the loss sensitivity across ~768 residual
// dimensions, pushing per-coordinate gradients below what an f32 finite
// difference can resolve. The end-to-end fixture therefore runs the real
// model and losses on 2x2x2 images, which keeps every code path (patching,
// joint attention, soft tokens, LoRA) while concentrating the signal.
DenoiserConfig tiny_config() {
  DenoiserConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 32;
  cfg.heads = 4;
  cfg.time_dim = 32;
  cfg.patch = 1;
  cfg.image_size = 2;
  cfg.channels = 2;
  return cfg;
}

// Zero-initialized gates block (or heavily damp) gradient flow at a fresh
// init, so every parameter gets jittered hard enough to open the modulation
// gates before differentiating through the model.
void jitter_params(Denoiser& model, std::uint64_t seed) {
  RngStream rng(seed, "gradcheck_jitter", 0);
  for (auto& [name, p] : model.params)
    for (float& v : p.data()) v += 0.2f * rng.normal();
}

struct ContrastiveFixture {
  Dataset ds;
  ContrastiveBatch batch;
  LossConfig loss;
};

ContrastiveFixture make_fixture(std::uint64_t seed, const DenoiserConfig& model_cfg) {
  ContrastiveFixture fx;
  fx.ds.seed = seed;
  fx.ds.image_size = model_cfg.image_size;
  const auto caps = sample_caption_set(seed, 4, 0.5f);
  for (std::size_t i = 0; i < caps.size(); ++i) {
    RngStream img(seed, "gradcheck_img", static_cast<std::int64_t>(i));
    fx.ds.pairs.push_back(
        {randn({model_cfg.channels, model_cfg.image_size, model_cfg.image_size}, img),
         caps[i]});
  }
  fx.loss.positives = 2;
  fx.loss.negatives = 2;
  std::vector<int> indices(fx.ds.pairs.size());
  std::iota(indices.begin(), indices.end(), 0);
  fx.batch = make_contrastive_batch(fx.ds, indices, fx.loss, seed, 0);
  return fx;
}

}  // namespace

GradCheckSummary run_gradcheck(std::uint64_t seed) {
  GradCheckSummary s;
  RngStream rng(seed, "gradcheck", 0);
  const float h = 1e-2f;
  const double op_tol = 1e-4;

  s.cases.push_back(fd_case(
      "elementwise_chain", {rand_input({3, 5}, rng), rand_input({3, 5}, rng)},
      [](const std::vector<Tensor>& in) {
        return sum(mul(silu(add(in[0], in[1])), square(sub(in[0], scale(in[1], 0.5f)))));
      },
      h, op_tol));

  s.cases.push_back(fd_case(
      "log_exp_softplus", {rand_input({3, 4}, rng)},
      [](const std::vector<Tensor>& in) { return sum(log(add_scalar(exp(in[0]), 1.0f))); }, h,
      op_tol));

  s.cases.push_back(fd_case(
      "matmul_square", {rand_input({3, 4}, rng), rand_input({4, 5}, rng)},
      [](const std::vector<Tensor>& in) { return sum(square(matmul(in[0], in[1]))); }, h, op_tol));

  s.cases.push_back(fd_case(
      "linear_silu",
      {rand_input({3, 6}, rng), rand_input({6, 4}, rng, 0.5f), rand_input({4}, rng, 0.1f)},
      [](const std::vector<Tensor>& in) { return sum(silu(linear(in[0], in[1], in[2]))); }, h,
      op_tol));

  {
    Tensor m = rand_input({3, 7}, rng, 4.0f);
    s.cases.push_back(fd_case(
        "softmax_weighted", {rand_input({3, 7}, rng)},
        [m](const std::vector<Tensor>& in) { return sum(mul(softmax(in[0], 1), m)); }, h, op_tol));
  }

  s.cases.push_back(fd_case(
      "layer_norm_affine",
      {rand_input({4, 6}, rng), rand_input({6}, rng), rand_input({6}, rng)},
      [](const std::vector<Tensor>& in) {
        return sum(square(layer_norm(in[0], in[1], in[2])));
      },
      h, op_tol));

  s.cases.push_back(fd_case(
      "row_mean_square", {rand_input({4, 6}, rng)},
      [](const std::vector<Tensor>& in) {
        return scale(mean(square(row_mean(in[0]))), 24.0f);
      },
      h, op_tol));

  {
    Tensor m = rand_input({3, 2, 8}, rng);
    s.cases.push_back(fd_case(
        "shape_ops_chain", {rand_input({3, 2, 4}, rng)},
        [m](const std::vector<Tensor>& in) {
          Tensor p = permute(in[0], {1, 0, 2});                     // [2,3,4]
          Tensor r = reshape(p, {2, 12});
          Tensor sl = slice(r, 1, 2, 4);
          Tensor cat = concat({sl, sl}, 1);                         // [2,8]
          Tensor rep = repeat_axis(reshape(cat, {1, 2, 8}), 0, 3);  // [3,2,8]
          return sum(mul(rep, m));
        },
        h, op_tol));
  }

  {
    Tensor m = rand_input({2, 3}, rng, 2.0f);
    const std::vector<std::int64_t> idx{0, 5, 10, 5, 2, 15};
    s.cases.push_back(fd_case(
        "gather_take", {rand_input({5, 4}, rng)},
        [m, idx](const std::vector<Tensor>& in) {
          Tensor g = gather_rows(in[0], {0, 2, 2, 4});
          Tensor t = take_flat(g, idx, {2, 3});
          return sum(mul(t, m));
        },
        h, op_tol));
  }

  s.cases.push_back(fd_case(
      "attention_micro",
      {rand_input({3, 4}, rng), rand_input({3, 4}, rng), rand_input({3, 4}, rng)},
      [](const std::vector<Tensor>& in) {
        Tensor scores = scale(matmul(in[0], permute(in[1], {1, 0})), 0.5f);
        return sum(square(matmul(softmax(scores, 1), in[2])));
      },
      h, op_tol));

  s.cases.push_back(mlp_oracle_case(seed));

  const DenoiserConfig tiny = tiny_config();
  const ContrastiveFixture fx = make_fixture(seed, tiny);
  const TemperatureSchedule tau;
  const float e2e_h_dir = 5e-3f;
  const float e2e_h_coord = 1e-2f;
  const double e2e_tol = 1e-3;
  const int top_coords = 6;

  {
    Denoiser model(tiny, seed);
    jitter_params(model, seed + 1);
    std::vector<Tensor> params;
    for (auto& [name, p] : model.params) params.push_back(p);
    std::vector<FlowSample> batch;
    std::vector<Caption> caps;
    RngStream flow_rng(seed, "gradcheck_flow", 0);
    for (int i = 0; i < 4; ++i) {
      batch.push_back(make_flow_sample(fx.ds.pairs[i].image, flow_rng));
      caps.push_back(fx.ds.pairs[i].caption);
    }
    const VelocityFn vf = [&model](const Tensor& xt, const std::vector<float>& t,
                                   const std::vector<Caption>& captions) {
      return model.forward(xt, t, captions);
    };
    s.cases.push_back(directional_case(
        "e2e_flow_base", params, [&] { return cfm_loss(vf, batch, caps); }, e2e_h_dir,
        e2e_h_coord, e2e_tol, top_coords));
  }

  {
    Denoiser model(tiny, seed);
    jitter_params(model, seed + 1);
    model.set_requires_grad(false);
    SoftConfig soft_cfg;
    soft_cfg.layer_set = {0, 1};
    // One bucket and one token per layer so the whole batch drives every
    // table entry; amplitude comparable to real token embeddings. Both keep
    // the per-coordinate gradients above the f32 finite-difference noise
    // floor.
    soft_cfg.buckets = 1;
    soft_cfg.tokens = 1;
    soft_cfg.init_std = 0.5f;
    SoftTokenBank bank(soft_cfg, tiny.hidden, seed + 2);
    ForwardOptions opt;
    opt.soft = &bank;
    s.cases.push_back(directional_case(
        "e2e_contrastive_soft", {bank.table},
        [&] { return combined_loss(model, opt, fx.batch, tau, 0.3f); }, e2e_h_dir, e2e_h_coord,
        e2e_tol, top_coords));
  }

  {
    Denoiser model(tiny, seed);
    jitter_params(model, seed + 1);
    model.set_requires_grad(false);
    LoraConfig lora_cfg;
    lora_cfg.layer_set = {0, 1};
    lora_cfg.rank = 2;
    LoraAdapters lora(lora_cfg, tiny.hidden, seed + 3);
    // Both factors away from the zero init so the product parameterization
    // has gradient flow, but modest: the a*b curvature grows fast with
    // amplitude and swamps the direction stencil's truncation budget.
    RngStream amp(seed, "gradcheck_lora_amp", 0);
    for (auto* side : {&lora.a, &lora.b})
      for (Tensor& t : *side)
        for (float& v : t.data()) v = 0.25f * amp.normal();
    ForwardOptions opt;
    opt.lora = &lora;
    std::vector<Tensor> params;
    for (Tensor& t : lora.a) params.push_back(t);
    for (Tensor& t : lora.b) params.push_back(t);
    s.cases.push_back(directional_case(
        "e2e_contrastive_lora", params,
        [&] { return combined_loss(model, opt, fx.batch, tau, 0.0f); }, e2e_h_dir, e2e_h_coord,
        e2e_tol, top_coords));
  }

  return s;
}

}  // namespace softrepa
