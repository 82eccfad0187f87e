#include "softrepa/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "softrepa/errors.hpp"

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

namespace softrepa {

namespace {

thread_local std::vector<Tape*> g_tapes;
thread_local int g_nograd = 0;

bool recording_enabled() { return !g_tapes.empty() && g_nograd == 0; }

std::int64_t numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

void check_shape_valid(const std::vector<int>& shape) {
  check<shape_error>(!shape.empty(), "rank-0 tensors are not supported");
  for (int d : shape) check<shape_error>(d > 0, "non-positive extent in " + shape_str(shape));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw shape_error(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}

std::vector<std::int64_t> strides_of(const std::vector<int>& shape) {
  std::vector<std::int64_t> s(shape.size());
  std::int64_t acc = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = acc;
    acc *= shape[static_cast<std::size_t>(i)];
  }
  return s;
}

// Registers the op on the active tape when any input carries grad.
void maybe_record(const char* name, std::initializer_list<Tensor> ins, Tensor& out,
                  std::function<void()> fn) {
  if (!recording_enabled()) return;
  bool any = false;
  for (const auto& t : ins)
    if (t.defined() && t.requires_grad()) {
      any = true;
      break;
    }
  if (!any) return;
  out.impl_->requires_grad = true;
  Tape::active()->record(name, out.impl_, std::move(fn));
}

// y[j] <- fma(a, x[j], y[j]). One rounding per element per step, identical
// between the vector body and the scalar tail, so accumulation results do not
// depend on where an element falls relative to the vector width.
inline void axpy_fma(float a, const float* x, float* y, std::int64_t n) {
#if defined(__AVX2__) && defined(__FMA__)
  const __m256 va = _mm256_set1_ps(a);
  std::int64_t j = 0;
  for (; j + 8 <= n; j += 8) {
    __m256 vy = _mm256_loadu_ps(y + j);
    vy = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + j), vy);
    _mm256_storeu_ps(y + j, vy);
  }
  for (; j < n; ++j) y[j] = std::fma(a, x[j], y[j]);
#else
  for (std::int64_t j = 0; j < n; ++j) y[j] = std::fma(a, x[j], y[j]);
#endif
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

void gemm_acc(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k,
              std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const float* ar = a + i * k;
    float* cr = c + i * n;
    for (std::int64_t p = 0; p < k; ++p) axpy_fma(ar[p], b + p * n, cr, n);
  }
}

void gemm_nt_acc(const float* a, const float* b, float* c, std::int64_t m, std::int64_t n,
                 std::int64_t k) {
  // c[M,K] += a[M,N] * b[K,N]^T, via an explicit transpose of b.
  std::vector<float> bt(static_cast<std::size_t>(n) * static_cast<std::size_t>(k));
  for (std::int64_t r = 0; r < k; ++r)
    for (std::int64_t j = 0; j < n; ++j) bt[static_cast<std::size_t>(j * k + r)] = b[r * n + j];
  gemm_acc(a, bt.data(), c, m, n, k);
}

void gemm_tn_acc(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k,
                 std::int64_t n) {
  // c[K,N] += a[M,K]^T * b[M,N]
  for (std::int64_t i = 0; i < m; ++i) {
    const float* ar = a + i * k;
    const float* br = b + i * n;
    for (std::int64_t p = 0; p < k; ++p) axpy_fma(ar[p], br, c + p * n, n);
  }
}

}  // namespace detail

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  check_shape_valid(shape);
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->data.assign(static_cast<std::size_t>(numel(shape)), 0.0f);
  t.impl_->shape = std::move(shape);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.impl_->data) v = value;
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
  check_shape_valid(shape);
  check<shape_error>(numel(shape) == static_cast<std::int64_t>(data.size()),
                     "data length does not match " + shape_str(shape));
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

Tensor Tensor::uninit(std::vector<int> shape) {
  check_shape_valid(shape);
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->data.resize(static_cast<std::size_t>(numel(shape)));
  t.impl_->shape = std::move(shape);
  return t;
}

const std::vector<int>& Tensor::shape() const {
  check(defined(), "use of undefined tensor");
  return impl_->shape;
}

int Tensor::dim(int axis) const {
  const auto& s = shape();
  check<shape_error>(axis >= 0 && axis < static_cast<int>(s.size()), "axis out of range");
  return s[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::size() const {
  check(defined(), "use of undefined tensor");
  return impl_->size();
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  check(defined(), "use of undefined tensor");
  impl_->requires_grad = v;
  return *this;
}

std::span<float> Tensor::data() {
  check(defined(), "use of undefined tensor");
  return impl_->data;
}

std::span<const float> Tensor::data() const {
  check(defined(), "use of undefined tensor");
  return impl_->data;
}

std::span<const float> Tensor::grad() const {
  check(defined(), "use of undefined tensor");
  check(impl_->requires_grad, "grad requested on a requires_grad=false tensor");
  impl_->ensure_grad();
  return impl_->grad;
}

void Tensor::zero_grad() {
  check(defined(), "use of undefined tensor");
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::item() const {
  check(defined() && size() == 1, "item() needs a one-element tensor");
  return impl_->data[0];
}

Tensor Tensor::clone() const {
  check(defined(), "use of undefined tensor");
  return from_data(impl_->shape, impl_->data, impl_->requires_grad);
}

Tensor randn(std::vector<int> shape, RngStream& rng, float stddev, bool requires_grad) {
  Tensor t = Tensor::uninit(std::move(shape));
  for (auto& v : t.impl_->data) v = stddev * rng.normal();
  t.impl_->requires_grad = requires_grad;
  return t;
}

// ---- Tape -------------------------------------------------------------------

Tape::Tape() { g_tapes.push_back(this); }

Tape::~Tape() {
  if (!g_tapes.empty() && g_tapes.back() == this) g_tapes.pop_back();
}

Tape* Tape::active() { return g_tapes.empty() ? nullptr : g_tapes.back(); }

void Tape::record(const char* name, std::shared_ptr<TensorImpl> out, std::function<void()> fn) {
  records_.push_back({std::move(out), std::move(fn), name});
}

void Tape::backward(const Tensor& loss) {
  check(loss.defined(), "backward on undefined tensor");
  check(loss.size() == 1, "backward needs a scalar loss, got " + shape_str(loss.shape()));
  loss.impl_->ensure_grad();
  loss.impl_->grad[0] += 1.0f;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->out->grad.empty()) continue;  // not reachable from the loss
    it->fn();
  }
}

void backward(const Tensor& loss) {
  Tape* t = Tape::active();
  check(t != nullptr, "backward with no active tape");
  t->backward(loss);
}

NoGrad::NoGrad() { ++g_nograd; }
NoGrad::~NoGrad() { --g_nograd; }

// ---- elementwise ------------------------------------------------------------

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
  Tensor out = Tensor::uninit(a.shape());
  const auto in = a.data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = fwd(in[i]);
  auto ai = a.impl_;
  auto oi = out.impl_;
  // bwd(input impl, output impl) accumulates into the input grad.
  maybe_record(name, {a}, out, [ai, oi, bwd] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    bwd(*ai, *oi);
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = Tensor::uninit(a.shape());
  const auto pa = a.data();
  const auto pb = b.data();
  auto po = out.data();
  for (std::size_t i = 0; i < pa.size(); ++i) po[i] = pa[i] + pb[i];
  auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
  maybe_record("add", {a, b}, out, [ai, bi, oi] {
    const auto& g = oi->grad;
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i];
    }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = Tensor::uninit(a.shape());
  const auto pa = a.data();
  const auto pb = b.data();
  auto po = out.data();
  for (std::size_t i = 0; i < pa.size(); ++i) po[i] = pa[i] - pb[i];
  auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
  maybe_record("sub", {a, b}, out, [ai, bi, oi] {
    const auto& g = oi->grad;
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] -= g[i];
    }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = Tensor::uninit(a.shape());
  const auto pa = a.data();
  const auto pb = b.data();
  auto po = out.data();
  for (std::size_t i = 0; i < pa.size(); ++i) po[i] = pa[i] * pb[i];
  auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
  maybe_record("mul", {a, b}, out, [ai, bi, oi] {
    const auto& g = oi->grad;
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * ai->data[i];
    }
  });
  return out;
}

Tensor add_scalar(const Tensor& a, float c) {
  return unary_op(
      "add_scalar", a, [c](float x) { return x + c; },
      [](TensorImpl& ai, const TensorImpl& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) ai.grad[i] += o.grad[i];
      });
}

Tensor scale(const Tensor& a, float c) {
  return unary_op(
      "scale", a, [c](float x) { return c * x; },
      [c](TensorImpl& ai, const TensorImpl& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) ai.grad[i] += c * o.grad[i];
      });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](float x) { return std::exp(x); },
      [](TensorImpl& ai, const TensorImpl& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) ai.grad[i] += o.grad[i] * o.data[i];
      });
}

Tensor log(const Tensor& a) {
  for (float v : a.data()) check<domain_error>(v > 0.0f, "log of non-positive input");
  return unary_op(
      "log", a, [](float x) { return std::log(x); },
      [](TensorImpl& ai, const TensorImpl& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) ai.grad[i] += o.grad[i] / ai.data[i];
      });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](float x) { return x * x; },
      [](TensorImpl& ai, const TensorImpl& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i)
          ai.grad[i] += 2.0f * ai.data[i] * o.grad[i];
      });
}

Tensor silu(const Tensor& a) {
  Tensor out = Tensor::uninit(a.shape());
  const auto in = a.data();
  auto o = out.data();
  auto sig = std::make_shared<std::vector<float>>(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    float s = 1.0f / (1.0f + std::exp(-in[i]));
    (*sig)[i] = s;
    o[i] = in[i] * s;
  }
  auto ai = a.impl_, oi = out.impl_;
  maybe_record("silu", {a}, out, [ai, oi, sig] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      float s = (*sig)[i];
      ai->grad[i] += oi->grad[i] * s * (1.0f + ai->data[i] * (1.0f - s));
    }
  });
  return out;
}

// ---- reductions ---------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  auto ai = a.impl_, oi = out.impl_;
  maybe_record("sum", {a}, out, [ai, oi] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    float g = oi->grad[0];
    for (auto& gv : ai->grad) gv += g;
  });
  return out;
}

Tensor mean(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  const double inv = 1.0 / static_cast<double>(a.size());
  Tensor out = Tensor::scalar(static_cast<float>(acc * inv));
  auto ai = a.impl_, oi = out.impl_;
  maybe_record("mean", {a}, out, [ai, oi, inv] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    float g = static_cast<float>(static_cast<double>(oi->grad[0]) * inv);
    for (auto& gv : ai->grad) gv += g;
  });
  return out;
}

Tensor row_mean(const Tensor& a) {
  check<shape_error>(a.ndim() == 2, "row_mean needs a 2-D tensor, got " + shape_str(a.shape()));
  const int rows = a.dim(0), cols = a.dim(1);
  Tensor out = Tensor::uninit({rows});
  const auto in = a.data();
  auto o = out.data();
  const double inv = 1.0 / static_cast<double>(cols);
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int c = 0; c < cols; ++c) acc += in[static_cast<std::size_t>(r * cols + c)];
    o[static_cast<std::size_t>(r)] = static_cast<float>(acc * inv);
  }
  auto ai = a.impl_, oi = out.impl_;
  maybe_record("row_mean", {a}, out, [ai, oi, rows, cols, inv] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (int r = 0; r < rows; ++r) {
      float g = static_cast<float>(static_cast<double>(oi->grad[static_cast<std::size_t>(r)]) * inv);
      for (int c = 0; c < cols; ++c) ai->grad[static_cast<std::size_t>(r * cols + c)] += g;
    }
  });
  return out;
}

// ---- matmul -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  check<shape_error>(sa.size() >= 2 && sb.size() >= 2,
                     "matmul needs rank >= 2: " + shape_str(sa) + " vs " + shape_str(sb));
  const int K = sa.back();
  const int M = sa[sa.size() - 2];
  const int N = sb.back();

  bool weight_case = sb.size() == 2;
  bool batched_case = !weight_case && sa.size() == sb.size() &&
                      std::equal(sa.begin(), sa.end() - 2, sb.begin());
  check<shape_error>(weight_case || batched_case,
                     "matmul: incompatible shapes " + shape_str(sa) + " vs " + shape_str(sb));
  check<shape_error>(sb[sb.size() - 2] == K,
                     "matmul: inner dimensions disagree, " + shape_str(sa) + " vs " +
                         shape_str(sb));

  std::vector<int> out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(N);
  Tensor out = Tensor::zeros(out_shape);

  std::int64_t batch = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];

  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out.data().data();

  if (weight_case) {
    detail::gemm_acc(pa, pb, po, batch * M, K, N);
  } else {
    for (std::int64_t i = 0; i < batch; ++i)
      detail::gemm_acc(pa + i * M * K, pb + i * K * N, po + i * M * N, M, K, N);
  }

  auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
  maybe_record("matmul", {a, b}, out, [ai, bi, oi, batch, M, K, N, weight_case] {
    const float* g = oi->grad.data();
    if (ai->requires_grad) {
      ai->ensure_grad();
      if (weight_case) {
        detail::gemm_nt_acc(g, bi->data.data(), ai->grad.data(), batch * M, N, K);
      } else {
        for (std::int64_t i = 0; i < batch; ++i)
          detail::gemm_nt_acc(g + i * M * N, bi->data.data() + i * K * N,
                              ai->grad.data() + i * M * K, M, N, K);
      }
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      if (weight_case) {
        detail::gemm_tn_acc(ai->data.data(), g, bi->grad.data(), batch * M, K, N);
      } else {
        for (std::int64_t i = 0; i < batch; ++i)
          detail::gemm_tn_acc(ai->data.data() + i * M * K, g + i * M * N,
                              bi->grad.data() + i * K * N, M, K, N);
      }
    }
  });
  return out;
}

// ---- softmax / layer_norm -------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  const auto& s = x.shape();
  check<shape_error>(axis >= 0 && axis < static_cast<int>(s.size()), "softmax axis out of range");
  const int n = s[static_cast<std::size_t>(axis)];
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];

  Tensor out = Tensor::uninit(x.shape());
  const float* in = x.data().data();
  float* o = out.data().data();
  for (std::int64_t ou = 0; ou < outer; ++ou) {
    for (std::int64_t ii = 0; ii < inner; ++ii) {
      const std::int64_t base = ou * n * inner + ii;
      float mx = in[base];
      for (int k = 1; k < n; ++k) mx = std::max(mx, in[base + k * inner]);
      double denom = 0.0;
      for (int k = 0; k < n; ++k) {
        float e = std::exp(in[base + k * inner] - mx);
        o[base + k * inner] = e;
        denom += e;
      }
      const float invd = static_cast<float>(1.0 / denom);
      for (int k = 0; k < n; ++k) o[base + k * inner] *= invd;
    }
  }

  auto xi = x.impl_, oi = out.impl_;
  maybe_record("softmax", {x}, out, [xi, oi, outer, inner, n] {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const float* y = oi->data.data();
    const float* g = oi->grad.data();
    for (std::int64_t ou = 0; ou < outer; ++ou) {
      for (std::int64_t ii = 0; ii < inner; ++ii) {
        const std::int64_t base = ou * n * inner + ii;
        double dot = 0.0;
        for (int k = 0; k < n; ++k) dot += static_cast<double>(g[base + k * inner]) * y[base + k * inner];
        const float d = static_cast<float>(dot);
        for (int k = 0; k < n; ++k)
          xi->grad[static_cast<std::size_t>(base + k * inner)] +=
              (g[base + k * inner] - d) * y[base + k * inner];
      }
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const auto& s = x.shape();
  const int d = s.back();
  check<shape_error>(d >= 2, "layer_norm needs last extent >= 2, got " + shape_str(s));
  if (gain.defined())
    check<shape_error>(gain.ndim() == 1 && gain.dim(0) == d, "layer_norm gain shape mismatch");
  if (bias.defined())
    check<shape_error>(bias.ndim() == 1 && bias.dim(0) == d, "layer_norm bias shape mismatch");

  const std::int64_t rows = x.size() / d;
  Tensor out = Tensor::uninit(x.shape());
  const float* in = x.data().data();
  float* o = out.data().data();
  const float* gq = gain.defined() ? gain.data().data() : nullptr;
  const float* bq = bias.defined() ? bias.data().data() : nullptr;

  auto xhat = std::make_shared<std::vector<float>>(x.data().size());
  auto inv_sd = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));

  for (std::int64_t r = 0; r < rows; ++r) {
    const float* row = in + r * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      double c = row[j] - mu;
      var += c * c;
    }
    var /= d;
    const float inv = static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    (*inv_sd)[static_cast<std::size_t>(r)] = inv;
    for (int j = 0; j < d; ++j) {
      float xh = (row[j] - static_cast<float>(mu)) * inv;
      (*xhat)[static_cast<std::size_t>(r * d + j)] = xh;
      float y = gq ? xh * gq[j] : xh;
      if (bq) y += bq[j];
      o[r * d + j] = y;
    }
  }

  auto xi = x.impl_, gi = gain.impl_, bi = bias.impl_, oi = out.impl_;
  maybe_record("layer_norm", {x, gain, bias}, out, [xi, gi, bi, oi, xhat, inv_sd, rows, d] {
    const float* g = oi->grad.data();
    if (xi->requires_grad) {
      xi->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const float inv = (*inv_sd)[static_cast<std::size_t>(r)];
        double s1 = 0.0, s2 = 0.0;
        for (int j = 0; j < d; ++j) {
          const std::size_t at = static_cast<std::size_t>(r * d + j);
          float dxh = g[at];
          if (gi && !gi->data.empty()) dxh *= gi->data[static_cast<std::size_t>(j)];
          s1 += dxh;
          s2 += static_cast<double>(dxh) * (*xhat)[at];
        }
        const float m1 = static_cast<float>(s1 / d);
        const float m2 = static_cast<float>(s2 / d);
        for (int j = 0; j < d; ++j) {
          const std::size_t at = static_cast<std::size_t>(r * d + j);
          float dxh = g[at];
          if (gi && !gi->data.empty()) dxh *= gi->data[static_cast<std::size_t>(j)];
          xi->grad[at] += inv * (dxh - m1 - (*xhat)[at] * m2);
        }
      }
    }
    if (gi && gi->requires_grad) {
      gi->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j)
          gi->grad[static_cast<std::size_t>(j)] +=
              g[r * d + j] * (*xhat)[static_cast<std::size_t>(r * d + j)];
    }
    if (bi && bi->requires_grad) {
      bi->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) bi->grad[static_cast<std::size_t>(j)] += g[r * d + j];
    }
  });
  return out;
}

// ---- shape ops ------------------------------------------------------------------

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  check_shape_valid(shape);
  check<shape_error>(numel(shape) == a.size(),
                     "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out = Tensor::from_data(std::move(shape), {a.data().begin(), a.data().end()});
  auto ai = a.impl_, oi = out.impl_;
  maybe_record("reshape", {a}, out, [ai, oi] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
  });
  return out;
}

namespace {

// Walks the input in row-major order while tracking the matching output
// offset for a permutation; calls f(in_flat, out_flat).
template <class F>
void permute_walk(const std::vector<int>& in_shape, const std::vector<int>& axes, F f) {
  const int nd = static_cast<int>(in_shape.size());
  std::vector<int> out_shape(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i) out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  const auto out_strides = strides_of(out_shape);
  std::vector<std::int64_t> contrib(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i) contrib[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])] = out_strides[static_cast<std::size_t>(i)];

  std::vector<int> idx(static_cast<std::size_t>(nd), 0);
  std::int64_t total = numel(in_shape);
  std::int64_t off = 0;
  for (std::int64_t i = 0; i < total; ++i) {
    f(i, off);
    for (int d = nd - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      if (++idx[du] < in_shape[du]) {
        off += contrib[du];
        break;
      }
      idx[du] = 0;
      off -= contrib[du] * (in_shape[du] - 1);
    }
  }
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  const int nd = a.ndim();
  check<shape_error>(static_cast<int>(axes.size()) == nd, "permute axes rank mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(nd), false);
  for (int ax : axes) {
    check<shape_error>(ax >= 0 && ax < nd, "permute axis out of range");
    check<shape_error>(!seen[static_cast<std::size_t>(ax)], "permute axes repeat");
    seen[static_cast<std::size_t>(ax)] = true;
  }
  std::vector<int> out_shape(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i) out_shape[static_cast<std::size_t>(i)] = a.dim(axes[static_cast<std::size_t>(i)]);
  Tensor out = Tensor::uninit(out_shape);
  {
    const float* in = a.data().data();
    float* o = out.data().data();
    permute_walk(a.shape(), axes, [&](std::int64_t i, std::int64_t off) { o[off] = in[i]; });
  }
  auto ai = a.impl_, oi = out.impl_;
  auto in_shape = a.shape();
  maybe_record("permute", {a}, out, [ai, oi, in_shape, axes] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const float* g = oi->grad.data();
    float* ga = ai->grad.data();
    permute_walk(in_shape, axes, [&](std::int64_t i, std::int64_t off) { ga[i] += g[off]; });
  });
  return out;
}

Tensor slice(const Tensor& a, int axis, int start, int len) {
  const auto& s = a.shape();
  check<shape_error>(axis >= 0 && axis < static_cast<int>(s.size()), "slice axis out of range");
  const int extent = s[static_cast<std::size_t>(axis)];
  check<shape_error>(start >= 0 && len > 0 && start + len <= extent, "slice range out of bounds");

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];

  std::vector<int> out_shape = s;
  out_shape[static_cast<std::size_t>(axis)] = len;
  Tensor out = Tensor::uninit(out_shape);
  const float* in = a.data().data();
  float* o = out.data().data();
  for (std::int64_t ou = 0; ou < outer; ++ou)
    std::memcpy(o + ou * len * inner, in + (ou * extent + start) * inner,
                static_cast<std::size_t>(len * inner) * sizeof(float));

  auto ai = a.impl_, oi = out.impl_;
  maybe_record("slice", {a}, out, [ai, oi, outer, inner, extent, start, len] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const float* g = oi->grad.data();
    for (std::int64_t ou = 0; ou < outer; ++ou) {
      float* ga = ai->grad.data() + (ou * extent + start) * inner;
      const float* gs = g + ou * len * inner;
      for (std::int64_t i = 0; i < len * inner; ++i) ga[i] += gs[i];
    }
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check(!parts.empty(), "concat of zero tensors");
  const auto& s0 = parts[0].shape();
  const int nd = static_cast<int>(s0.size());
  check<shape_error>(axis >= 0 && axis < nd, "concat axis out of range");
  int total = 0;
  for (const auto& p : parts) {
    const auto& sp = p.shape();
    check<shape_error>(static_cast<int>(sp.size()) == nd, "concat rank mismatch");
    for (int i = 0; i < nd; ++i)
      check<shape_error>(i == axis || sp[static_cast<std::size_t>(i)] == s0[static_cast<std::size_t>(i)],
                         "concat extent mismatch off-axis");
    total += sp[static_cast<std::size_t>(axis)];
  }
  std::vector<int> out_shape = s0;
  out_shape[static_cast<std::size_t>(axis)] = total;

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < nd; ++i) inner *= s0[static_cast<std::size_t>(i)];

  Tensor out = Tensor::uninit(out_shape);
  float* o = out.data().data();
  std::int64_t at = 0;
  for (const auto& p : parts) {
    const int ext = p.dim(axis);
    const float* in = p.data().data();
    for (std::int64_t ou = 0; ou < outer; ++ou)
      std::memcpy(o + (ou * total + at) * inner, in + ou * ext * inner,
                  static_cast<std::size_t>(ext * inner) * sizeof(float));
    at += ext;
  }

  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (recording_enabled() && any) {
    out.impl_->requires_grad = true;
    std::vector<Tensor> held = parts;
    auto oi = out.impl_;
    Tape::active()->record("concat", oi, [held, oi, outer, inner, total, axis] {
      const float* g = oi->grad.data();
      std::int64_t at2 = 0;
      for (const auto& p : held) {
        const int ext = p.dim(axis);
        if (p.impl_->requires_grad) {
          p.impl_->ensure_grad();
          for (std::int64_t ou = 0; ou < outer; ++ou) {
            float* ga = p.impl_->grad.data() + ou * ext * inner;
            const float* gs = g + (ou * total + at2) * inner;
            for (std::int64_t i = 0; i < ext * inner; ++i) ga[i] += gs[i];
          }
        }
        at2 += ext;
      }
    });
  }
  return out;
}

Tensor repeat_axis(const Tensor& a, int axis, int times) {
  const auto& s = a.shape();
  check<shape_error>(axis >= 0 && axis < static_cast<int>(s.size()), "repeat_axis axis out of range");
  check<shape_error>(s[static_cast<std::size_t>(axis)] == 1, "repeat_axis needs extent 1 at axis");
  check(times > 0, "repeat_axis needs times > 0");

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];

  std::vector<int> out_shape = s;
  out_shape[static_cast<std::size_t>(axis)] = times;
  Tensor out = Tensor::uninit(out_shape);
  const float* in = a.data().data();
  float* o = out.data().data();
  for (std::int64_t ou = 0; ou < outer; ++ou)
    for (int r = 0; r < times; ++r)
      std::memcpy(o + (ou * times + r) * inner, in + ou * inner,
                  static_cast<std::size_t>(inner) * sizeof(float));

  auto ai = a.impl_, oi = out.impl_;
  maybe_record("repeat_axis", {a}, out, [ai, oi, outer, inner, times] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const float* g = oi->grad.data();
    for (std::int64_t ou = 0; ou < outer; ++ou) {
      float* ga = ai->grad.data() + ou * inner;
      for (int r = 0; r < times; ++r) {
        const float* gs = g + (ou * times + r) * inner;
        for (std::int64_t i = 0; i < inner; ++i) ga[i] += gs[i];
      }
    }
  });
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  check<shape_error>(table.ndim() == 2, "gather_rows needs a 2-D table");
  const int V = table.dim(0), D = table.dim(1);
  for (int id : ids) check(id >= 0 && id < V, "gather_rows id out of range");
  const int n = static_cast<int>(ids.size());
  check(n > 0, "gather_rows with empty ids");

  Tensor out = Tensor::uninit({n, D});
  const float* in = table.data().data();
  float* o = out.data().data();
  for (int r = 0; r < n; ++r)
    std::memcpy(o + static_cast<std::int64_t>(r) * D, in + static_cast<std::int64_t>(ids[static_cast<std::size_t>(r)]) * D,
                static_cast<std::size_t>(D) * sizeof(float));

  auto ti = table.impl_, oi = out.impl_;
  maybe_record("gather_rows", {table}, out, [ti, oi, ids, D] {
    if (!ti->requires_grad) return;
    ti->ensure_grad();
    const float* g = oi->grad.data();
    for (std::size_t r = 0; r < ids.size(); ++r) {
      float* ga = ti->grad.data() + static_cast<std::int64_t>(ids[r]) * D;
      const float* gs = g + static_cast<std::int64_t>(r) * D;
      for (int j = 0; j < D; ++j) ga[j] += gs[j];
    }
  });
  return out;
}

Tensor take_flat(const Tensor& a, const std::vector<std::int64_t>& idx,
                 std::vector<int> out_shape) {
  check_shape_valid(out_shape);
  check<shape_error>(numel(out_shape) == static_cast<std::int64_t>(idx.size()),
                     "take_flat: index count does not match out shape");
  const std::int64_t n = a.size();
  for (auto i : idx) check(i >= 0 && i < n, "take_flat index out of range");

  Tensor out = Tensor::uninit(std::move(out_shape));
  const float* in = a.data().data();
  float* o = out.data().data();
  for (std::size_t i = 0; i < idx.size(); ++i) o[i] = in[idx[i]];

  auto ai = a.impl_, oi = out.impl_;
  auto idx_ptr = std::make_shared<std::vector<std::int64_t>>(idx);
  maybe_record("take_flat", {a}, out, [ai, oi, idx_ptr] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const float* g = oi->grad.data();
    for (std::size_t i = 0; i < idx_ptr->size(); ++i) ai->grad[(*idx_ptr)[i]] += g[i];
  });
  return out;
}

Tensor detach(const Tensor& a) {
  Tensor out;
  out.impl_ = std::make_shared<TensorImpl>();
  out.impl_->shape = a.shape();
  out.impl_->data = {a.data().begin(), a.data().end()};
  out.impl_->requires_grad = false;
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (!b.defined()) return y;
  const int n = y.shape().back();
  check<shape_error>(b.ndim() == 1 && b.dim(0) == n, "linear bias shape mismatch");
  const int rows = static_cast<int>(y.size() / n);
  Tensor bb = repeat_axis(reshape(b, {1, n}), 0, rows);
  return add(y, reshape(bb, y.shape()));
}

}  // namespace softrepa
