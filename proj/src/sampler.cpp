#include "softrepa/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "softrepa/errors.hpp"
#include "softrepa/flow.hpp"
#include "softrepa/rng.hpp"
#include "softrepa/serde.hpp"

namespace softrepa {

void GuidanceConfig::validate() const {
  check<config_error>(std::isfinite(w) && w >= 0.0f, "guidance: w must be finite and non-negative");
  check<config_error>(steps >= 1, "guidance: steps must be at least 1");
}

Tensor guided_velocity(const Checkpoint& ck, const Tensor& x, float t,
                       const std::vector<Caption>& captions, const GuidanceConfig& g) {
  const int B = x.dim(0);
  check<contract_error>(static_cast<int>(captions.size()) == B,
                        "guided_velocity: one caption per row");
  const std::vector<float> ts(B, t);
  const ForwardOptions cond = options_for(ck, g.use_soft);
  const std::vector<Caption> null_caps(B, null_caption());
  if (g.w == 1.0f) return ck.model.forward(x, ts, captions, cond);
  if (g.w == 0.0f) return ck.model.forward(x, ts, null_caps, ForwardOptions{});
  Tensor vc = ck.model.forward(x, ts, captions, cond);
  Tensor vu = ck.model.forward(x, ts, null_caps, ForwardOptions{});
  return add(vu, scale(sub(vc, vu), g.w));
}

namespace {

float grid_t(int k, int steps) { return static_cast<float>(steps - k) / static_cast<float>(steps); }

Tensor euler_step(const Tensor& x, const Tensor& v, float t_eval, float dt,
                  GuidanceConfig::Param param) {
  if (param == GuidanceConfig::Param::velocity) return sub(x, scale(v, dt));
  Tensor x0_hat = x0_from_velocity(x, t_eval, v);
  return sub(x, scale(velocity_from_x0(x, t_eval, x0_hat), dt));
}

Tensor integrate(const Checkpoint& ck, Tensor x, const std::vector<Caption>& captions,
                 const GuidanceConfig& g, Trajectory* traj) {
  if (traj) {
    traj->t.push_back(1.0f);
    traj->x.push_back(x.clone());
  }
  for (int k = 0; k < g.steps; ++k) {
    const float tk = grid_t(k, g.steps);
    const float t_next = grid_t(k + 1, g.steps);
    const float t_eval = std::max(tk, kMinT);
    Tensor v = guided_velocity(ck, x, t_eval, captions, g);
    x = euler_step(x, v, t_eval, tk - t_next, g.parameterization);
    if (traj) {
      traj->t.push_back(t_next);
      traj->x.push_back(x.clone());
    }
  }
  return x;
}

Tensor one_row(const Tensor& image) {
  return reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
}

Tensor drop_row(const Tensor& batch) {
  return reshape(batch, {batch.dim(1), batch.dim(2), batch.dim(3)});
}

}  // namespace

SampleResult sample(const Checkpoint& ck, const Caption& caption, const GuidanceConfig& g,
                    std::uint64_t seed) {
  g.validate();
  NoGrad guard;
  RngStream rng(seed, "x1", 0);
  const auto& mc = ck.config.model;
  Tensor x1 = randn({1, mc.channels, mc.image_size, mc.image_size}, rng);
  SampleResult result;
  Tensor out = integrate(ck, x1, {caption}, g, &result.trajectory);
  result.image = drop_row(out);
  for (std::size_t i = 0; i < result.trajectory.x.size(); ++i)
    result.trajectory.x[i] = drop_row(result.trajectory.x[i]);
  return result;
}

std::vector<Tensor> sample_batch(const Checkpoint& ck, const std::vector<Caption>& captions,
                                 const GuidanceConfig& g,
                                 const std::vector<std::uint64_t>& noise_seeds) {
  g.validate();
  check<contract_error>(!captions.empty() && captions.size() == noise_seeds.size(),
                        "sample_batch: one noise seed per caption");
  NoGrad guard;
  const auto& mc = ck.config.model;
  std::vector<Tensor> rows;
  rows.reserve(captions.size());
  for (std::uint64_t s : noise_seeds) {
    RngStream rng(s, "x1", 0);
    rows.push_back(randn({mc.channels, mc.image_size, mc.image_size}, rng));
  }
  Tensor out = integrate(ck, stack(rows), captions, g, nullptr);
  std::vector<Tensor> images;
  images.reserve(captions.size());
  for (int i = 0; i < static_cast<int>(captions.size()); ++i)
    images.push_back(reshape(slice(out, 0, i, 1), {mc.channels, mc.image_size, mc.image_size}));
  return images;
}

Tensor generate_from(const Checkpoint& ck, const Tensor& x1, const Caption& caption,
                     const GuidanceConfig& g) {
  g.validate();
  check<shape_error>(x1.ndim() == 3, "generate_from: x1 must be [C,G,G]");
  NoGrad guard;
  return drop_row(integrate(ck, one_row(x1), {caption}, g, nullptr));
}

Tensor invert(const Checkpoint& ck, const Tensor& image, const Caption& caption, int steps,
              bool use_soft) {
  check<shape_error>(image.ndim() == 3, "invert: image must be [C,G,G]");
  check<contract_error>(steps >= 0, "invert: steps must be non-negative");
  for (float v : image.data())
    check<domain_error>(v >= -1.0f && v <= 1.0f, "invert: image values outside [-1,1]");
  if (steps == 0) return image.clone();
  NoGrad guard;
  GuidanceConfig g;
  g.w = 1.0f;
  g.steps = steps;
  g.use_soft = use_soft;
  Tensor x = one_row(image);
  const std::vector<Caption> caps = {caption};
  for (int k = 0; k < steps; ++k) {
    const float tk = static_cast<float>(k) / static_cast<float>(steps);
    const float t_next = static_cast<float>(k + 1) / static_cast<float>(steps);
    const float t_eval = std::max(tk, kMinT);
    Tensor v = guided_velocity(ck, x, t_eval, caps, g);
    x = add(x, scale(v, t_next - tk));
  }
  return drop_row(x);
}

EditResult edit(const Checkpoint& ck, const Tensor& image, const Caption& source,
                const Caption& target, const GuidanceConfig& g) {
  g.validate();
  scene_of(source);
  scene_of(target);
  Tensor x1 = invert(ck, image, source, g.steps, g.use_soft);
  EditResult result;
  result.image = generate_from(ck, x1, target, g);
  result.target_report = verify(result.image, target);
  NoGrad guard;
  result.mse_vs_source = mean(square(sub(result.image, image))).item();
  return result;
}

namespace {
constexpr char kImageMagic[4] = {'S', 'R', 'I', 'M'};
}

void save_image(const std::string& path, const Tensor& image, const std::string& digest) {
  check<shape_error>(image.ndim() == 3, "save_image: image must be [C,G,G]");
  ByteWriter w;
  w.bytes(kImageMagic, sizeof kImageMagic);
  w.u32(1);
  w.str(digest);
  w.u32(static_cast<std::uint32_t>(image.dim(0)));
  w.u32(static_cast<std::uint32_t>(image.dim(1)));
  w.u32(static_cast<std::uint32_t>(image.dim(2)));
  for (float v : image.data()) w.f32(v);
  w.u32(crc32(w.buffer().data(), w.buffer().size()));
  write_file(path, w.buffer());
}

LoadedImage load_image(const std::string& path) {
  ByteReader r(read_file(path));
  check<format_error>(r.size() >= sizeof kImageMagic + 8, "image: file too small");
  const std::uint32_t stored_crc = static_cast<std::uint32_t>(r.buffer()[r.size() - 4]) |
                                   static_cast<std::uint32_t>(r.buffer()[r.size() - 3]) << 8 |
                                   static_cast<std::uint32_t>(r.buffer()[r.size() - 2]) << 16 |
                                   static_cast<std::uint32_t>(r.buffer()[r.size() - 1]) << 24;
  check<format_error>(crc32(r.buffer().data(), r.size() - 4) == stored_crc, "image: CRC mismatch");
  char magic[4];
  r.bytes(magic, sizeof magic);
  check<format_error>(std::memcmp(magic, kImageMagic, sizeof kImageMagic) == 0, "image: bad magic");
  check<format_error>(r.u32() == 1, "image: unsupported version");
  LoadedImage out;
  out.digest = r.str();
  const int c = static_cast<int>(r.u32());
  const int h = static_cast<int>(r.u32());
  const int ww = static_cast<int>(r.u32());
  check<format_error>(c > 0 && h > 0 && ww > 0 && static_cast<std::int64_t>(c) * h * ww < (1 << 28),
                      "image: implausible dimensions");
  Tensor img = Tensor::uninit({c, h, ww});
  for (float& v : img.data()) v = r.f32();
  check<format_error>(r.pos() == r.size() - 4, "image: trailing bytes");
  out.image = img;
  return out;
}

}  // namespace softrepa
