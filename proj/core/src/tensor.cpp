#include "dial/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace dial {

namespace {
thread_local int g_precise_depth = 0;
constexpr float kInvSqrt2 = 0.70710678118654752440f;
constexpr float kInvSqrt2Pi = 0.39894228040143267794f;
}  // namespace

PreciseMathScope::PreciseMathScope() { ++g_precise_depth; }
PreciseMathScope::~PreciseMathScope() { --g_precise_depth; }
bool precise_math_enabled() { return g_precise_depth > 0; }

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    check(d > 0, "shape dimension must be positive, got ", shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

float* TensorNode::grad_data() {
  if (grad.empty()) grad.assign(value.size(), 0.0f);
  return grad.data();
}

// ---- kernels ---------------------------------------------------------------

namespace detail {

void assert_finite(std::span<const float> data, const char* op) {
  std::uint32_t bad = 0;
  const float* p = data.data();
  std::size_t n = data.size();
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t b;
    std::memcpy(&b, p + i, 4);
    bad |= static_cast<std::uint32_t>((b & 0x7f800000u) == 0x7f800000u);
  }
  if (bad) throw NumericError(strcat("non-finite value produced by op '", op, "'"));
}

void gemm_nn(int m, int k, int n, const float* a, const float* b, float* c, bool accumulate) {
  if (precise_math_enabled()) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        double s = accumulate ? static_cast<double>(c[i * n + j]) : 0.0;
        for (int p = 0; p < k; ++p) s += static_cast<double>(a[i * k + p]) * b[p * n + j];
        c[i * n + j] = static_cast<float>(s);
      }
    }
    return;
  }
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    float* crow = c + static_cast<std::size_t>(i) * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0f);
    int p = 0;
    for (; p + 4 <= k; p += 4) {
      const float a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
      const float* b0 = b + static_cast<std::size_t>(p) * n;
      const float* b1 = b0 + n;
      const float* b2 = b1 + n;
      const float* b3 = b2 + n;
      for (int j = 0; j < n; ++j) crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; p < k; ++p) {
      const float ap = arow[p];
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += ap * brow[j];
    }
  }
}

void gemm_nt(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate) {
  // C[m x k] (+)= A[m x n] * B^T with B[k x n]. Transposing B once keeps the
  // inner loop in the contiguous saxpy form.
  thread_local std::vector<float> scratch;
  scratch.resize(static_cast<std::size_t>(n) * k);
  for (int j = 0; j < k; ++j)
    for (int p = 0; p < n; ++p) scratch[static_cast<std::size_t>(p) * k + j] = b[static_cast<std::size_t>(j) * n + p];
  gemm_nn(m, n, k, a, scratch.data(), c, accumulate);
}

void gemm_tn(int m, int k, int n, const float* a, const float* b, float* c, bool accumulate) {
  if (precise_math_enabled()) {
    for (int p = 0; p < k; ++p) {
      for (int j = 0; j < n; ++j) {
        double s = accumulate ? static_cast<double>(c[p * n + j]) : 0.0;
        for (int i = 0; i < m; ++i) s += static_cast<double>(a[i * k + p]) * b[i * n + j];
        c[p * n + j] = static_cast<float>(s);
      }
    }
    return;
  }
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(k) * n, 0.0f);
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    const float* brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float ap = arow[p];
      if (ap == 0.0f) continue;
      float* crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += ap * brow[j];
    }
  }
}

}  // namespace detail

// ---- graph construction ----------------------------------------------------

Tensor make_op(Shape shape, std::vector<Tensor> parents,
               std::function<void(TensorNode&)> backward_fn, std::vector<float> value) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (auto& p : parents) {
    if (p.node()->requires_grad) n->requires_grad = true;
    n->parents.push_back(p.node());
  }
  if (n->requires_grad) n->backward_fn = std::move(backward_fn);
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  std::size_t count = shape_numel(shape);
  n->shape = std::move(shape);
  n->value.assign(count, 0.0f);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, float v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.node()->value.begin(), t.node()->value.end(), v);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  check(shape_numel(shape) == values.size(), "value count ", values.size(),
        " does not match shape ", shape_str(shape));
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  detail::assert_finite(n->value, "from");
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(float v) { return from({1}, {v}); }

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (auto& x : t.node()->value) x = rng.normal() * stddev;
  return t;
}

const Shape& Tensor::shape() const {
  check(defined(), "use of undefined tensor");
  return node_->shape;
}

int Tensor::dim(int i) const {
  const Shape& s = shape();
  check(i >= 0 && i < static_cast<int>(s.size()), "dim index ", i, " out of range for ", shape_str(s));
  return s[i];
}

std::size_t Tensor::numel() const { return node_ ? node_->value.size() : 0; }

std::span<const float> Tensor::value() const {
  check(defined(), "use of undefined tensor");
  return node_->value;
}

std::span<float> Tensor::mutable_value() {
  check(defined(), "use of undefined tensor");
  check(!node_->backward_fn, "mutable_value is only valid on leaf tensors");
  return node_->value;
}

std::span<const float> Tensor::grad() const {
  check(defined(), "use of undefined tensor");
  return node_->grad;
}

bool Tensor::has_grad() const { return node_ && node_->has_grad(); }

void Tensor::zero_grad() {
  if (node_) {
    node_->grad.clear();
    node_->backward_ran = false;
  }
}

float Tensor::item() const {
  check(numel() == 1, "item() on non-scalar tensor ", shape_str(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  check(defined(), "use of undefined tensor");
  check(!node_->backward_fn, "requires_grad can only be toggled on leaves");
  node_->requires_grad = v;
  return *this;
}

Tensor Tensor::detach() const {
  check(defined(), "use of undefined tensor");
  auto n = std::make_shared<TensorNode>();
  n->shape = node_->shape;
  n->value = node_->value;
  return Tensor(std::move(n));
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul expects 2-d tensors, got ",
        shape_str(a.shape()), " and ", shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ContractError(strcat("matmul inner dimensions disagree: ", shape_str(a.shape()),
                               " vs ", shape_str(b.shape())));
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  detail::gemm_nn(m, k, n, a.value().data(), b.value().data(), out.data(), false);
  Tensor r = make_op({m, n}, {a, b},
                     [m, k, n](TensorNode& self) {
                       const float* g = self.grad.data();
                       auto& pa = self.parents[0];
                       auto& pb = self.parents[1];
                       if (pa->requires_grad)
                         detail::gemm_nt(m, n, k, g, pb->value.data(), pa->grad_data(), true);
                       if (pb->requires_grad)
                         detail::gemm_tn(m, k, n, pa->value.data(), g, pb->grad_data(), true);
                     },
                     std::move(out));
  detail::assert_finite(r.value(), "matmul");
  return r;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const std::size_t na = a.numel(), nb = b.numel();
  std::vector<float> out(na);
  const float* pa = a.value().data();
  const float* pb = b.value().data();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < na; ++i) out[i] = pa[i] + pb[i];
    Tensor r = make_op(a.shape(), {a, b},
                       [](TensorNode& self) {
                         for (int s = 0; s < 2; ++s) {
                           auto& p = self.parents[s];
                           if (!p->requires_grad) continue;
                           float* g = p->grad_data();
                           for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                         }
                       },
                       std::move(out));
    detail::assert_finite(r.value(), "add");
    return r;
  }
  if (nb == 1) {
    const float c = pb[0];
    for (std::size_t i = 0; i < na; ++i) out[i] = pa[i] + c;
    Tensor r = make_op(a.shape(), {a, b},
                       [](TensorNode& self) {
                         auto& pa2 = self.parents[0];
                         auto& pb2 = self.parents[1];
                         if (pa2->requires_grad) {
                           float* g = pa2->grad_data();
                           for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                         }
                         if (pb2->requires_grad) {
                           double s = 0.0;
                           for (float gv : self.grad) s += gv;
                           pb2->grad_data()[0] += static_cast<float>(s);
                         }
                       },
                       std::move(out));
    detail::assert_finite(r.value(), "add");
    return r;
  }
  // Row broadcast: b is [n], a is [... x n].
  check(b.rank() == 1 && a.rank() >= 1 && a.dim(a.rank() - 1) == b.dim(0),
        "add shapes incompatible: ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
  const std::size_t n = nb, rows = na / nb;
  for (std::size_t r0 = 0; r0 < rows; ++r0)
    for (std::size_t j = 0; j < n; ++j) out[r0 * n + j] = pa[r0 * n + j] + pb[j];
  Tensor r = make_op(a.shape(), {a, b},
                     [rows, n](TensorNode& self) {
                       auto& pa2 = self.parents[0];
                       auto& pb2 = self.parents[1];
                       if (pa2->requires_grad) {
                         float* g = pa2->grad_data();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                       }
                       if (pb2->requires_grad) {
                         float* g = pb2->grad_data();
                         for (std::size_t r0 = 0; r0 < rows; ++r0)
                           for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r0 * n + j];
                       }
                     },
                     std::move(out));
  detail::assert_finite(r.value(), "add");
  return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul expects equal shapes, got ", shape_str(a.shape()),
        " vs ", shape_str(b.shape()));
  std::size_t n = a.numel();
  std::vector<float> out(n);
  const float* pa = a.value().data();
  const float* pb = b.value().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
  Tensor r = make_op(a.shape(), {a, b},
                     [](TensorNode& self) {
                       auto& pa2 = self.parents[0];
                       auto& pb2 = self.parents[1];
                       if (pa2->requires_grad) {
                         float* g = pa2->grad_data();
                         const float* v = pb2->value.data();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * v[i];
                       }
                       if (pb2->requires_grad) {
                         float* g = pb2->grad_data();
                         const float* v = pa2->value.data();
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * v[i];
                       }
                     },
                     std::move(out));
  detail::assert_finite(r.value(), "mul");
  return r;
}

Tensor scale(const Tensor& a, float c) {
  std::size_t n = a.numel();
  std::vector<float> out(n);
  const float* pa = a.value().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * c;
  Tensor r = make_op(a.shape(), {a},
                     [c](TensorNode& self) {
                       auto& p = self.parents[0];
                       if (!p->requires_grad) return;
                       float* g = p->grad_data();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * c;
                     },
                     std::move(out));
  detail::assert_finite(r.value(), "scale");
  return r;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check(!parts.empty(), "concat of zero tensors");
  check(axis == 0 || axis == 1, "concat axis must be 0 or 1");
  const int r = parts[0].rank();
  check(r == 2, "concat expects 2-d tensors");
  int rows = 0, cols = 0;
  for (const auto& p : parts) {
    check(p.rank() == 2, "concat expects 2-d tensors");
    if (axis == 0) {
      check(p.dim(1) == parts[0].dim(1), "concat column mismatch: ", shape_str(p.shape()));
      rows += p.dim(0);
      cols = p.dim(1);
    } else {
      check(p.dim(0) == parts[0].dim(0), "concat row mismatch: ", shape_str(p.shape()));
      rows = p.dim(0);
      cols += p.dim(1);
    }
  }
  std::vector<float> out(static_cast<std::size_t>(rows) * cols);
  std::vector<int> spans;  // per-part extent along axis
  if (axis == 0) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      std::memcpy(out.data() + off, p.value().data(), p.numel() * 4);
      off += p.numel();
      spans.push_back(p.dim(0));
    }
  } else {
    int coff = 0;
    for (const auto& p : parts) {
      const int pc = p.dim(1);
      for (int i = 0; i < rows; ++i)
        std::memcpy(out.data() + static_cast<std::size_t>(i) * cols + coff,
                    p.value().data() + static_cast<std::size_t>(i) * pc, pc * 4u);
      coff += pc;
      spans.push_back(pc);
    }
  }
  Tensor result = make_op({rows, cols}, parts,
                          [axis, rows, cols, spans](TensorNode& self) {
                            if (axis == 0) {
                              std::size_t off = 0;
                              for (std::size_t s = 0; s < self.parents.size(); ++s) {
                                auto& p = self.parents[s];
                                std::size_t count = p->value.size();
                                if (p->requires_grad) {
                                  float* g = p->grad_data();
                                  for (std::size_t i = 0; i < count; ++i) g[i] += self.grad[off + i];
                                }
                                off += count;
                              }
                            } else {
                              int coff = 0;
                              for (std::size_t s = 0; s < self.parents.size(); ++s) {
                                auto& p = self.parents[s];
                                const int pc = spans[s];
                                if (p->requires_grad) {
                                  float* g = p->grad_data();
                                  for (int i = 0; i < rows; ++i)
                                    for (int j = 0; j < pc; ++j)
                                      g[static_cast<std::size_t>(i) * pc + j] +=
                                          self.grad[static_cast<std::size_t>(i) * cols + coff + j];
                                }
                                coff += pc;
                              }
                            }
                          },
                          std::move(out));
  detail::assert_finite(result.value(), "concat");
  return result;
}

Tensor slice(const Tensor& x, int axis, int lo, int hi) {
  check(x.rank() == 2, "slice expects a 2-d tensor, got ", shape_str(x.shape()));
  check(axis == 0 || axis == 1, "slice axis must be 0 or 1");
  const int extent = x.dim(axis);
  check(0 <= lo && lo < hi && hi <= extent, "slice range [", lo, ",", hi, ") out of bounds for ",
        shape_str(x.shape()), " axis ", axis);
  const int rows = x.dim(0), cols = x.dim(1);
  const int orows = axis == 0 ? hi - lo : rows;
  const int ocols = axis == 1 ? hi - lo : cols;
  std::vector<float> out(static_cast<std::size_t>(orows) * ocols);
  const float* px = x.value().data();
  for (int i = 0; i < orows; ++i) {
    const int si = axis == 0 ? i + lo : i;
    const int sj = axis == 1 ? lo : 0;
    std::memcpy(out.data() + static_cast<std::size_t>(i) * ocols,
                px + static_cast<std::size_t>(si) * cols + sj, ocols * 4u);
  }
  Tensor r = make_op({orows, ocols}, {x},
                     [axis, lo, cols, orows, ocols](TensorNode& self) {
                       auto& p = self.parents[0];
                       if (!p->requires_grad) return;
                       float* g = p->grad_data();
                       for (int i = 0; i < orows; ++i) {
                         const int si = axis == 0 ? i + lo : i;
                         const int sj = axis == 1 ? lo : 0;
                         for (int j = 0; j < ocols; ++j)
                           g[static_cast<std::size_t>(si) * cols + sj + j] +=
                               self.grad[static_cast<std::size_t>(i) * ocols + j];
                       }
                     },
                     std::move(out));
  return r;
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.numel();
  check(n > 0, "mean of empty tensor");
  double s = 0.0;
  for (float v : x.value()) s += v;
  Tensor r = make_op({1}, {x},
                     [n](TensorNode& self) {
                       auto& p = self.parents[0];
                       if (!p->requires_grad) return;
                       const float g = self.grad[0] / static_cast<float>(n);
                       float* pg = p->grad_data();
                       for (std::size_t i = 0; i < n; ++i) pg[i] += g;
                     },
                     {static_cast<float>(s / static_cast<double>(n))});
  detail::assert_finite(r.value(), "mean");
  return r;
}

Tensor gelu(const Tensor& x) {
  std::size_t n = x.numel();
  std::vector<float> out(n);
  const float* px = x.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    const float v = px[i];
    out[i] = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
  }
  Tensor r = make_op(x.shape(), {x},
                     [](TensorNode& self) {
                       auto& p = self.parents[0];
                       if (!p->requires_grad) return;
                       float* g = p->grad_data();
                       const float* v = p->value.data();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         const float xi = v[i];
                         const float cdf = 0.5f * (1.0f + std::erf(xi * kInvSqrt2));
                         const float pdf = kInvSqrt2Pi * std::exp(-0.5f * xi * xi);
                         g[i] += self.grad[i] * (cdf + xi * pdf);
                       }
                     },
                     std::move(out));
  detail::assert_finite(r.value(), "gelu");
  return r;
}

Tensor softmax(const Tensor& x) {
  check(x.rank() >= 1, "softmax expects rank >= 1");
  const int cols = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / cols;
  std::vector<float> out(x.numel());
  const float* px = x.value().data();
  for (std::size_t r0 = 0; r0 < rows; ++r0) {
    const float* row = px + r0 * cols;
    float* orow = out.data() + r0 * cols;
    float mx = row[0];
    for (int j = 1; j < cols; ++j) mx = row[j] > mx ? row[j] : mx;
    double denom = 0.0;
    for (int j = 0; j < cols; ++j) {
      const float e = std::exp(row[j] - mx);
      orow[j] = e;
      denom += e;
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int j = 0; j < cols; ++j) orow[j] *= inv;
  }
  Tensor r = make_op(x.shape(), {x},
                     [cols, rows](TensorNode& self) {
                       auto& p = self.parents[0];
                       if (!p->requires_grad) return;
                       float* g = p->grad_data();
                       for (std::size_t r0 = 0; r0 < rows; ++r0) {
                         const float* y = self.value.data() + r0 * cols;
                         const float* gy = self.grad.data() + r0 * cols;
                         double dot = 0.0;
                         for (int j = 0; j < cols; ++j) dot += static_cast<double>(gy[j]) * y[j];
                         for (int j = 0; j < cols; ++j)
                           g[r0 * cols + j] += y[j] * (gy[j] - static_cast<float>(dot));
                       }
                     },
                     std::move(out));
  detail::assert_finite(r.value(), "softmax");
  return r;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  check(x.rank() >= 1, "layer_norm expects rank >= 1");
  const int d = x.dim(x.rank() - 1);
  check(d > 0, "layer_norm feature dimension must be positive");
  check(gain.rank() == 1 && gain.dim(0) == d, "layer_norm gain must be [", d, "], got ",
        shape_str(gain.shape()));
  check(bias.rank() == 1 && bias.dim(0) == d, "layer_norm bias must be [", d, "], got ",
        shape_str(bias.shape()));
  constexpr double kEps = 1e-5;
  const std::size_t rows = x.numel() / d;
  std::vector<float> out(x.numel());
  auto stats = std::make_shared<std::vector<float>>(rows * 2);  // mean, rstd per row
  const float* px = x.value().data();
  const float* pg = gain.value().data();
  const float* pb = bias.value().data();
  for (std::size_t r0 = 0; r0 < rows; ++r0) {
    const float* row = px + r0 * d;
    double m = 0.0;
    for (int j = 0; j < d; ++j) m += row[j];
    m /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = row[j] - m;
      var += c * c;
    }
    var /= d;
    const float rstd = static_cast<float>(1.0 / std::sqrt(var + kEps));
    const float mf = static_cast<float>(m);
    (*stats)[r0 * 2] = mf;
    (*stats)[r0 * 2 + 1] = rstd;
    float* orow = out.data() + r0 * d;
    for (int j = 0; j < d; ++j) orow[j] = (row[j] - mf) * rstd * pg[j] + pb[j];
  }
  Tensor r = make_op(x.shape(), {x, gain, bias},
                     [d, rows, stats](TensorNode& self) {
                       auto& px2 = self.parents[0];
                       auto& pgain = self.parents[1];
                       auto& pbias = self.parents[2];
                       const float* xv = px2->value.data();
                       const float* gv = pgain->value.data();
                       float* dx = px2->requires_grad ? px2->grad_data() : nullptr;
                       float* dgain = pgain->requires_grad ? pgain->grad_data() : nullptr;
                       float* dbias = pbias->requires_grad ? pbias->grad_data() : nullptr;
                       for (std::size_t r0 = 0; r0 < rows; ++r0) {
                         const float m = (*stats)[r0 * 2];
                         const float rstd = (*stats)[r0 * 2 + 1];
                         const float* xrow = xv + r0 * d;
                         const float* grow = self.grad.data() + r0 * d;
                         double sum_gg = 0.0, sum_ggx = 0.0;
                         for (int j = 0; j < d; ++j) {
                           const float xhat = (xrow[j] - m) * rstd;
                           const float gg = grow[j] * gv[j];
                           sum_gg += gg;
                           sum_ggx += static_cast<double>(gg) * xhat;
                           if (dgain) dgain[j] += grow[j] * xhat;
                           if (dbias) dbias[j] += grow[j];
                         }
                         if (dx) {
                           const float a = static_cast<float>(sum_gg / d);
                           const float b = static_cast<float>(sum_ggx / d);
                           for (int j = 0; j < d; ++j) {
                             const float xhat = (xrow[j] - m) * rstd;
                             dx[r0 * d + j] += rstd * (grow[j] * gv[j] - a - xhat * b);
                           }
                         }
                       }
                     },
                     std::move(out));
  detail::assert_finite(r.value(), "layer_norm");
  return r;
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  check(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention expects 2-d tensors");
  const int s = q.dim(0), d = q.dim(1), t = k.dim(0);
  check(d > 0, "attention head dimension must be positive");
  check(k.dim(1) == d && v.dim(1) == d && v.dim(0) == t,
        "attention shape mismatch: q=", shape_str(q.shape()), " k=", shape_str(k.shape()),
        " v=", shape_str(v.shape()));
  check(heads > 0 && d % heads == 0, "head count ", heads, " must divide dim ", d);
  const int dh = d / heads;
  const float inv_scale = 1.0f / std::sqrt(static_cast<float>(dh));

  auto probs = std::make_shared<std::vector<float>>(static_cast<std::size_t>(heads) * s * t);
  std::vector<float> out(static_cast<std::size_t>(s) * d, 0.0f);
  thread_local std::vector<float> qh, kh, vh, oh;
  qh.resize(static_cast<std::size_t>(s) * dh);
  kh.resize(static_cast<std::size_t>(t) * dh);
  vh.resize(static_cast<std::size_t>(t) * dh);
  oh.resize(static_cast<std::size_t>(s) * dh);
  const float* pq = q.value().data();
  const float* pk = k.value().data();
  const float* pv = v.value().data();

  auto pack = [](const float* src, float* dst, int rows, int d_full, int off, int dh2) {
    for (int i = 0; i < rows; ++i)
      std::memcpy(dst + static_cast<std::size_t>(i) * dh2,
                  src + static_cast<std::size_t>(i) * d_full + off, dh2 * 4u);
  };

  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    pack(pq, qh.data(), s, d, off, dh);
    pack(pk, kh.data(), t, d, off, dh);
    pack(pv, vh.data(), t, d, off, dh);
    float* P = probs->data() + static_cast<std::size_t>(h) * s * t;
    detail::gemm_nt(s, dh, t, qh.data(), kh.data(), P, false);
    for (int i = 0; i < s; ++i) {
      float* row = P + static_cast<std::size_t>(i) * t;
      float mx = row[0] * inv_scale;
      for (int j = 0; j < t; ++j) {
        row[j] *= inv_scale;
        mx = row[j] > mx ? row[j] : mx;
      }
      double denom = 0.0;
      for (int j = 0; j < t; ++j) {
        row[j] = std::exp(row[j] - mx);
        denom += row[j];
      }
      const float inv = static_cast<float>(1.0 / denom);
      for (int j = 0; j < t; ++j) row[j] *= inv;
    }
    detail::gemm_nn(s, t, dh, P, vh.data(), oh.data(), false);
    for (int i = 0; i < s; ++i)
      std::memcpy(out.data() + static_cast<std::size_t>(i) * d + off,
                  oh.data() + static_cast<std::size_t>(i) * dh, dh * 4u);
  }

  Tensor r = make_op(
      {s, d}, {q, k, v},
      [s, t, d, dh, heads, inv_scale, probs](TensorNode& self) {
        auto& pq2 = self.parents[0];
        auto& pk2 = self.parents[1];
        auto& pv2 = self.parents[2];
        thread_local std::vector<float> gh, kh2, vh2, qh2, dP, dS, tmp;
        gh.resize(static_cast<std::size_t>(s) * dh);
        qh2.resize(static_cast<std::size_t>(s) * dh);
        kh2.resize(static_cast<std::size_t>(t) * dh);
        vh2.resize(static_cast<std::size_t>(t) * dh);
        dP.resize(static_cast<std::size_t>(s) * t);
        dS.resize(static_cast<std::size_t>(s) * t);
        tmp.resize(static_cast<std::size_t>(std::max(s, t)) * dh);
        auto pack2 = [](const float* src, float* dst, int rows, int d_full, int off, int dh3) {
          for (int i = 0; i < rows; ++i)
            std::memcpy(dst + static_cast<std::size_t>(i) * dh3,
                        src + static_cast<std::size_t>(i) * d_full + off, dh3 * 4u);
        };
        auto scatter_add = [](const float* src, float* dst, int rows, int d_full, int off, int dh3) {
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < dh3; ++j)
              dst[static_cast<std::size_t>(i) * d_full + off + j] +=
                  src[static_cast<std::size_t>(i) * dh3 + j];
        };
        float* dq = pq2->requires_grad ? pq2->grad_data() : nullptr;
        float* dk = pk2->requires_grad ? pk2->grad_data() : nullptr;
        float* dv = pv2->requires_grad ? pv2->grad_data() : nullptr;
        for (int h = 0; h < heads; ++h) {
          const int off = h * dh;
          const float* P = probs->data() + static_cast<std::size_t>(h) * s * t;
          pack2(self.grad.data(), gh.data(), s, d, off, dh);
          pack2(pk2->value.data(), kh2.data(), t, d, off, dh);
          pack2(pv2->value.data(), vh2.data(), t, d, off, dh);
          pack2(pq2->value.data(), qh2.data(), s, d, off, dh);
          if (dv) {
            detail::gemm_tn(s, t, dh, P, gh.data(), tmp.data(), false);
            scatter_add(tmp.data(), dv, t, d, off, dh);
          }
          if (dq || dk) {
            detail::gemm_nt(s, dh, t, gh.data(), vh2.data(), dP.data(), false);
            for (int i = 0; i < s; ++i) {
              const float* prow = P + static_cast<std::size_t>(i) * t;
              const float* dprow = dP.data() + static_cast<std::size_t>(i) * t;
              double dot = 0.0;
              for (int j = 0; j < t; ++j) dot += static_cast<double>(dprow[j]) * prow[j];
              float* dsrow = dS.data() + static_cast<std::size_t>(i) * t;
              for (int j = 0; j < t; ++j)
                dsrow[j] = prow[j] * (dprow[j] - static_cast<float>(dot)) * inv_scale;
            }
            if (dq) {
              detail::gemm_nn(s, t, dh, dS.data(), kh2.data(), tmp.data(), false);
              scatter_add(tmp.data(), dq, s, d, off, dh);
            }
            if (dk) {
              detail::gemm_tn(s, t, dh, dS.data(), qh2.data(), tmp.data(), false);
              scatter_add(tmp.data(), dk, t, d, off, dh);
            }
          }
        }
      },
      std::move(out));
  detail::assert_finite(r.value(), "attention");
  return r;
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  return multihead_attention(q, k, v, 1);
}

Tensor mse(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mse expects equal shapes, got ", shape_str(a.shape()), " vs ",
        shape_str(b.shape()));
  const std::size_t n = a.numel();
  const float* pa = a.value().data();
  const float* pb = b.value().data();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pa[i]) - pb[i];
    s += d * d;
  }
  Tensor r = make_op({1}, {a, b},
                     [n](TensorNode& self) {
                       auto& pa2 = self.parents[0];
                       auto& pb2 = self.parents[1];
                       const float c = 2.0f * self.grad[0] / static_cast<float>(n);
                       const float* va = pa2->value.data();
                       const float* vb = pb2->value.data();
                       if (pa2->requires_grad) {
                         float* g = pa2->grad_data();
                         for (std::size_t i = 0; i < n; ++i) g[i] += c * (va[i] - vb[i]);
                       }
                       if (pb2->requires_grad) {
                         float* g = pb2->grad_data();
                         for (std::size_t i = 0; i < n; ++i) g[i] -= c * (va[i] - vb[i]);
                       }
                     },
                     {static_cast<float>(s / static_cast<double>(n))});
  detail::assert_finite(r.value(), "mse");
  return r;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  check(table.rank() == 2, "gather_rows expects a 2-d table");
  const int rows = table.dim(0), cols = table.dim(1);
  std::vector<float> out(ids.size() * static_cast<std::size_t>(cols));
  const float* pt = table.value().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    check(ids[i] >= 0 && ids[i] < rows, "gather_rows id ", ids[i], " out of range [0,", rows, ")");
    std::memcpy(out.data() + i * cols, pt + static_cast<std::size_t>(ids[i]) * cols, cols * 4u);
  }
  auto idcopy = std::make_shared<std::vector<int>>(ids);
  Tensor r = make_op({static_cast<int>(ids.size()), cols}, {table},
                     [idcopy, cols](TensorNode& self) {
                       auto& p = self.parents[0];
                       if (!p->requires_grad) return;
                       float* g = p->grad_data();
                       for (std::size_t i = 0; i < idcopy->size(); ++i) {
                         const std::size_t dst = static_cast<std::size_t>((*idcopy)[i]) * cols;
                         for (int j = 0; j < cols; ++j) g[dst + j] += self.grad[i * cols + j];
                       }
                     },
                     std::move(out));
  return r;
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
  check(loss.defined(), "backward on undefined tensor");
  check(loss.numel() == 1, "backward expects a scalar loss, got ", shape_str(loss.shape()));
  check(loss.requires_grad(), "loss does not require grad; no trainable parameter reaches it");
  TensorNode* root = loss.node().get();
  if (root->backward_ran)
    throw ContractError("backward called twice on the same loss without reset (double accumulation)");
  root->backward_ran = true;

  // Deterministic iterative topological order over the requires_grad subgraph.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* p = node->parents[idx++].get();
      if (p->requires_grad && p->backward_fn && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_data()[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward_fn && node->has_grad()) {
      node->backward_fn(*node);
      detail::assert_finite(node->grad, "backward");
    }
  }
}

}  // namespace dial
