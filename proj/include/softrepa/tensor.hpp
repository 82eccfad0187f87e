#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "softrepa/rng.hpp"

namespace softrepa {

// f32 row-major dense tensor with reverse-mode autodiff over an explicit
// tape. Handles share storage (copying a Tensor aliases it); clone() makes a
// deep copy. Gradients live next to the data and are allocated lazily.

struct TensorImpl {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value);
  // Allocated but uninitialized payload; for op outputs.
  static Tensor uninit(std::vector<int> shape);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const;
  int dim(int axis) const;
  int ndim() const { return static_cast<int>(shape().size()); }
  std::int64_t size() const;
  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);

  std::span<float> data();
  std::span<const float> data() const;
  // Gradient view; allocates zeros on first access. Requires requires_grad.
  std::span<const float> grad() const;
  void zero_grad();
  float item() const;
  Tensor clone() const;

  std::shared_ptr<TensorImpl> impl_;
};

// Draw every element i.i.d. N(0, stddev^2).
Tensor randn(std::vector<int> shape, RngStream& rng, float stddev = 1.0f,
             bool requires_grad = false);

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();
  void record(const char* name, std::shared_ptr<TensorImpl> out, std::function<void()> fn);
  std::size_t size() const { return records_.size(); }

  // Reverse sweep from a scalar loss recorded on this tape. Accumulates into
  // .grad of every requires_grad tensor reachable from the loss; grads of
  // unreachable leaves stay zero.
  void backward(const Tensor& loss);

 private:
  struct Record {
    std::shared_ptr<TensorImpl> out;
    std::function<void()> fn;
    const char* name;
  };
  std::vector<Record> records_;
};

// Sweep on the active tape.
void backward(const Tensor& loss);

// Disables recording (and requires_grad propagation) while alive.
struct NoGrad {
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

// ---- elementwise suite -----------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float c);
Tensor scale(const Tensor& a, float c);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // domain error on any element <= 0
Tensor square(const Tensor& a);
Tensor silu(const Tensor& a);

// ---- reductions (accumulate in f64, emit f32) ------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Mean over the last axis of a 2-D tensor: [R, E] -> [R].
Tensor row_mean(const Tensor& a);

// ---- structured ops ---------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& x, int axis);
// Normalizes over the last axis; gain/bias are optional [d] tensors (pass
// default-constructed Tensors for a plain, affine-free norm).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);

// ---- shape ops ---------------------------------------------------------------
Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor slice(const Tensor& a, int axis, int start, int len);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// Tile an axis of extent 1 to `times`.
Tensor repeat_axis(const Tensor& a, int axis, int times);
// rows[i] = table[ids[i], :]
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
// out.flat[i] = a.flat[idx[i]]; backward scatter-adds.
Tensor take_flat(const Tensor& a, const std::vector<std::int64_t>& idx,
                 std::vector<int> out_shape);
Tensor detach(const Tensor& a);

// matmul + optional bias broadcast over the last axis (composite of
// primitive ops, so the backward rules stay per-op).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

std::string shape_str(const std::vector<int>& shape);

namespace detail {
// C[M,N] += A[M,K] * B[K,N]. Per output element the contraction runs in
// ascending k with one fused multiply-add per step, independent of M/N, so
// results are reproducible across shape changes (zero-padded inputs leave
// untouched elements bit-identical).
void gemm_acc(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k,
              std::int64_t n);
// C[M,K] += A[M,N] * B[K,N]^T
void gemm_nt_acc(const float* a, const float* b, float* c, std::int64_t m, std::int64_t n,
                 std::int64_t k);
// C[K,N] += A[M,K]^T * B[M,N]
void gemm_tn_acc(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k,
                 std::int64_t n);
}  // namespace detail

}  // namespace softrepa
