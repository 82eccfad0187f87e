#include "softrepa/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "softrepa/errors.hpp"

namespace softrepa {

float TemperatureSchedule::operator()(float t) const {
  check<domain_error>(t >= 0.0f && t <= 1.0f, "temperature: t outside [0,1]");
  float tau = tau0;
  if (kind == Kind::linear_in_t) {
    const float end = tau1.value_or(tau0);
    tau = tau0 + (end - tau0) * t;
  }
  check<domain_error>(tau > 0.0f, "temperature: schedule must stay positive");
  return tau;
}

std::uint64_t ContrastiveBatch::draw_hash(int image) const {
  const Tensor& e = eps_for(image);
  const auto span = e.data();
  std::uint64_t h = fnv1a64(std::string_view(reinterpret_cast<const char*>(span.data()),
                                             span.size() * sizeof(float)));
  const float tv = t_for(image);
  std::uint32_t bits;
  std::memcpy(&bits, &tv, sizeof bits);
  return mix64(h ^ bits);
}

void ContrastiveBatch::validate() const {
  const int P = static_cast<int>(images.size());
  check<contract_error>(P > 0, "contrastive batch: no images");
  check<contract_error>(static_cast<int>(positives.size()) == P,
                        "contrastive batch: one positive caption per image");
  check<contract_error>(eps.size() == t.size() && (eps.size() == 1 || static_cast<int>(eps.size()) == P),
                        "contrastive batch: draws must be shared or one per image");
  for (const Tensor& img : images)
    check<shape_error>(img.defined() && img.shape() == images[0].shape(),
                       "contrastive batch: ragged image shapes");
  for (const Tensor& e : eps)
    check<shape_error>(e.defined() && e.shape() == images[0].shape(),
                       "contrastive batch: noise shape mismatch");
  for (float tv : t)
    check<domain_error>(tv > 0.0f && tv < 1.0f, "contrastive batch: t must lie in (0,1)");
}

CandidateSet candidate_set(const ContrastiveBatch& batch, int image) {
  check<contract_error>(image >= 0 && image < static_cast<int>(batch.images.size()),
                        "candidate_set: image index out of range");
  CandidateSet set;
  auto push = [&](const Caption& c) {
    if (std::find(set.captions.begin(), set.captions.end(), c) == set.captions.end())
      set.captions.push_back(c);
  };
  push(batch.positives[image]);
  for (int j = 0; j < static_cast<int>(batch.positives.size()); ++j)
    if (j != image) push(batch.positives[j]);
  for (const Caption& c : batch.negative_pool) push(c);
  set.positive = 0;
  return set;
}

namespace {

void check_logit_range(std::span<const float> ell) {
  for (float v : ell)
    check<contract_error>(v > 0.0f && v <= 1.0f, "contrastive logit escaped (0,1]");
}

void check_loss_bounds(int count, double loss) {
  const double n1 = static_cast<double>(count - 1);
  const double lo = std::log(1.0 + n1 * std::exp(-1.0));
  const double hi = std::log(1.0 + n1 * std::exp(1.0));
  check<contract_error>(loss >= lo - 1e-4 && loss <= hi + 1e-4,
                        "contrastive per-image loss escaped its logit-range bounds");
}

}  // namespace

Tensor logit(const Denoiser& model, const ForwardOptions& opt, const Tensor& x0,
             const Caption& caption, const Tensor& eps, float t,
             const TemperatureSchedule& tau) {
  check<domain_error>(t > 0.0f && t < 1.0f, "logit: t must lie in (0,1)");
  check<shape_error>(x0.ndim() == 3 && x0.shape() == eps.shape(),
                     "logit: x0 and eps must be matching [C,G,G] tensors");
  Tensor xt = interpolate(x0, eps, t);
  Tensor v = model.forward_one(xt, t, caption, opt);
  Tensor ms = mean(square(sub(v, sub(eps, x0))));
  Tensor ell = exp(scale(ms, -1.0f / tau(t)));
  check_logit_range(ell.data());
  return ell;
}

namespace {

Tensor contrastive_impl(const Denoiser& model, const ForwardOptions& opt,
                        const ContrastiveBatch& batch, const TemperatureSchedule& tau,
                        float dsm_weight, ContrastiveParts* parts) {
  check<domain_error>(std::isfinite(dsm_weight) && dsm_weight >= 0.0f,
                      "combined loss: dsm_weight must be finite and non-negative");
  batch.validate();
  const int P = static_cast<int>(batch.images.size());
  if (batch.shared_draw()) {
    const std::uint64_t h0 = batch.draw_hash(0);
    for (int i = 1; i < P; ++i)
      check<contract_error>(batch.draw_hash(i) == h0,
                            "contrastive batch: shared draw differs between images");
  }

  std::vector<Tensor> row_xt, row_target;
  std::vector<float> row_t;
  std::vector<Caption> row_caption;
  std::vector<int> offset(P + 1, 0);
  std::vector<int> positive_row(P, 0);
  std::vector<float> neg_inv_tau;
  for (int i = 0; i < P; ++i) {
    const CandidateSet set = candidate_set(batch, i);
    const int C = static_cast<int>(set.captions.size());
    check<contract_error>(C >= 2, "contrastive batch: image needs at least 2 candidate captions");
    const float ti = batch.t_for(i);
    const Tensor& ei = batch.eps_for(i);
    Tensor xt = interpolate(batch.images[i], ei, ti);
    Tensor target = sub(ei, batch.images[i]);
    positive_row[i] = offset[i] + set.positive;
    for (const Caption& c : set.captions) {
      row_xt.push_back(xt);
      row_target.push_back(target);
      row_t.push_back(ti);
      row_caption.push_back(c);
      neg_inv_tau.push_back(-1.0f / tau(ti));
    }
    offset[i + 1] = offset[i] + C;
  }
  const int R = offset[P];

  Tensor v = model.forward(stack(row_xt), row_t, row_caption, opt);
  Tensor resid = square(sub(v, stack(row_target)));
  Tensor rm = row_mean(reshape(resid, {R, static_cast<int>(resid.size() / R)}));
  Tensor ell = exp(mul(rm, Tensor::from_data({R}, std::move(neg_inv_tau))));
  check_logit_range(ell.data());

  std::vector<Tensor> per_image;
  per_image.reserve(P);
  for (int i = 0; i < P; ++i) {
    const int C = offset[i + 1] - offset[i];
    Tensor li = slice(ell, 0, offset[i], C);
    Tensor loss_i = sub(log(sum(exp(li))), slice(li, 0, positive_row[i] - offset[i], 1));
    check_loss_bounds(C, static_cast<double>(loss_i.item()));
    per_image.push_back(loss_i);
  }
  Tensor sr = mean(concat(per_image, 0));
  if (parts) parts->softrepa = sr.item();
  if (dsm_weight == 0.0f) return sr;

  std::vector<std::int64_t> pos_idx(positive_row.begin(), positive_row.end());
  Tensor dsm = mean(take_flat(rm, pos_idx, {P}));
  if (parts) parts->dsm = dsm.item();
  return add(sr, scale(dsm, dsm_weight));
}

}  // namespace

Tensor softrepa_loss(const Denoiser& model, const ForwardOptions& opt,
                     const ContrastiveBatch& batch, const TemperatureSchedule& tau) {
  return contrastive_impl(model, opt, batch, tau, 0.0f, nullptr);
}

Tensor combined_loss(const Denoiser& model, const ForwardOptions& opt,
                     const ContrastiveBatch& batch, const TemperatureSchedule& tau,
                     float dsm_weight, ContrastiveParts* parts) {
  return contrastive_impl(model, opt, batch, tau, dsm_weight, parts);
}

}  // namespace softrepa
