#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dial/common.hpp"
#include "dial/rng.hpp"

namespace dial {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// One node of the define-by-run computation graph. Values are 32-bit floats
// in row-major order; grad is allocated lazily and matches the value shape.
struct TensorNode {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;
  bool requires_grad = false;
  bool backward_ran = false;  // set on the node backward() was seeded from
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Propagates this node's grad into parents' grads. Null for leaves.
  std::function<void(TensorNode&)> backward_fn;

  std::size_t numel() const { return value.size(); }
  float* grad_data();  // allocates zeros on first use
  bool has_grad() const { return !grad.empty(); }
};

// Value-semantics handle to a graph node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float v);
  // Gaussian init; the usual entry point for parameters.
  static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::size_t numel() const;

  std::span<const float> value() const;
  std::span<float> mutable_value();  // direct writes; for leaves only
  std::span<const float> grad() const;
  bool has_grad() const;
  void zero_grad();
  float item() const;  // scalar tensors

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);

  // New leaf with copied values and no graph history.
  Tensor detach() const;

  std::shared_ptr<TensorNode>& node() { return node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<TensorNode> node_;

  friend Tensor make_op(Shape shape, std::vector<Tensor> parents,
                        std::function<void(TensorNode&)> backward_fn,
                        std::vector<float> value);
};

// ---- primitive ops -------------------------------------------------------
// Every op checks shapes up front, verifies the output is finite, and wires
// an analytic backward that must agree with central finite differences.

Tensor matmul(const Tensor& a, const Tensor& b);
// Same shape; or b broadcast over rows of a (b: [n] against a: [m x n]);
// or b a scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& a, float c);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int lo, int hi);
Tensor mean(const Tensor& x);  // over all entries
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x);  // rows (last dim)
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
// softmax(q k^T / sqrt(d)) v over the full sequence; no causal mask.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);
// Multi-head variant over packed [T x d] projections, d divisible by heads.
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);
Tensor mse(const Tensor& a, const Tensor& b);
// Embedding lookup; backward scatter-adds into the table.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// Reverse-mode sweep from a scalar loss. Populates grad buffers of every
// reachable requires_grad node. Calling it twice on the same loss without a
// reset is an error (it would double-accumulate).
void backward(const Tensor& loss);

// Re-runs kernels with double accumulators; used by the finite-difference
// oracle so its quotients are not drowned in float32 rounding noise.
// The normal path is unaffected.
class PreciseMathScope {
 public:
  PreciseMathScope();
  ~PreciseMathScope();
  PreciseMathScope(const PreciseMathScope&) = delete;
};
bool precise_math_enabled();

namespace detail {
// C (+)= A * B, shapes [m x k] [k x n]. Hot path of the whole artifact.
void gemm_nn(int m, int k, int n, const float* a, const float* b, float* c, bool accumulate);
// C (+)= A * B^T, shapes [m x k] from A[m x n], B[k x n].
void gemm_nt(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);
// C (+)= A^T * B, shapes [k x n] from A[m x k], B[m x n].
void gemm_tn(int m, int k, int n, const float* a, const float* b, float* c, bool accumulate);
void assert_finite(std::span<const float> data, const char* op);
}  // namespace detail

}  // namespace dial
