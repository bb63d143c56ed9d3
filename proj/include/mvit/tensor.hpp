#pragma once

// Dense 64-bit tensor engine with reverse-mode differentiation.
//
// Tensors are row-major and contiguous. Gradients are recorded on an
// explicit Tape owned by one forward invocation; ops take a Ctx carrying
// the optional tape and an optional flop counter, so the same code path
// serves plain evaluation, instrumented counting, and differentiation.

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvit {

using Shape = std::vector<int64_t>;

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Compute accounting. `macs` counts multiply-accumulates (GEMM-like ops);
// `pointwise` counts per-element flops of non-GEMM ops. The reported flop
// total follows the MAC=2 convention.
struct FlopCounter {
  long long macs = 0;
  long long pointwise = 0;
  long long flops() const { return 2 * macs + pointwise; }
};

class Tape;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  int64_t extent(int axis) const { return shape_[static_cast<size_t>(axis)]; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  double& at(int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  bool defined() const { return static_cast<bool>(data_); }
  bool tracked() const { return node_ >= 0; }
  int node() const { return node_; }
  bool requires_grad() const { return requires_grad_; }

  // Shallow copy sharing the same buffer, detached from any tape.
  Tensor detached() const;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  int node_ = -1;
  bool requires_grad_ = false;
  friend class Tape;
};

// Records executed ops in topological order; backward() replays adjoints
// in reverse, visiting each node exactly once. A tape must be driven from
// a single thread.
class Tape {
 public:
  // Marks a tensor as a differentiable leaf; returns the tracked handle.
  Tensor leaf(const Tensor& t);

  // Seeds d(out)/d(out) = 1 and accumulates adjoints into every node.
  // `out` must be scalar (one element) and tracked on this tape.
  void backward(const Tensor& out);

  // Gradient buffer of a tracked tensor after backward(); zeros if the
  // tensor never influenced the output.
  Tensor grad(const Tensor& t) const;

  // Internal API used by ops.
  int record(const Shape& shape, std::function<void(Tape&)> back);
  void attach(Tensor& t, int node) const;
  std::vector<double>& grad_buf(int node) { return grads_[static_cast<size_t>(node)]; }
  const std::vector<double>& grad_buf(int node) const { return grads_[static_cast<size_t>(node)]; }
  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::function<void(Tape&)> back;  // empty for leaves
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

// Execution context threaded through every op.
struct Ctx {
  Tape* tape = nullptr;
  FlopCounter* flops = nullptr;
};

inline void count_macs(const Ctx& ctx, long long n) {
  if (ctx.flops) ctx.flops->macs += n;
}
inline void count_pointwise(const Ctx& ctx, long long n) {
  if (ctx.flops) ctx.flops->pointwise += n;
}

// ---- operator suite ------------------------------------------------------

// Batched contraction [..,m,k] x [..,k,n] -> [..,m,n]. Either operand may
// omit the batch dims entirely (broadcast).
Tensor matmul(const Ctx& ctx, const Tensor& a, const Tensor& b);

Tensor reshape(const Ctx& ctx, const Tensor& x, Shape shape);
Tensor permute(const Ctx& ctx, const Tensor& x, const std::vector<int>& perm);

Tensor add(const Ctx& ctx, const Tensor& a, const Tensor& b);
Tensor mul(const Ctx& ctx, const Tensor& a, const Tensor& b);
Tensor scale(const Ctx& ctx, const Tensor& x, double c);
// x: [.., n] plus bias [n] broadcast over leading dims.
Tensor add_rowwise(const Ctx& ctx, const Tensor& x, const Tensor& bias);

Tensor gelu(const Ctx& ctx, const Tensor& x);
// Normalizes the last axis to mean 0 / variance 1 before the affine map.
Tensor layer_norm(const Ctx& ctx, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, double eps = 1e-6);
Tensor softmax_lastdim(const Ctx& ctx, const Tensor& x);

// Depthwise convolution on a token grid. x: [B, L, C] with L = prod(grid);
// kernel: [C, k_0, .., k_{r-1}]. Accumulation order is kernel-major so the
// naive oracle can demand exact equality.
Tensor conv_depthwise(const Ctx& ctx, const Tensor& x, const Tensor& kernel,
                      const std::vector<int64_t>& grid,
                      const std::vector<int64_t>& stride,
                      const std::vector<int64_t>& pad);

// Max pooling on a token grid; padded positions are excluded from the max.
Tensor max_pool(const Ctx& ctx, const Tensor& x,
                const std::vector<int64_t>& grid,
                const std::vector<int64_t>& kernel,
                const std::vector<int64_t>& stride,
                const std::vector<int64_t>& pad);

// Full (non-grouped) convolution, used by the patchify stem.
// x: [L, C_in], weight: [C_out, C_in, k_0, ..], bias: [C_out].
Tensor conv_full(const Ctx& ctx, const Tensor& x, const Tensor& weight,
                 const Tensor& bias, const std::vector<int64_t>& grid,
                 const std::vector<int64_t>& stride,
                 const std::vector<int64_t>& pad);

Tensor sum_all(const Ctx& ctx, const Tensor& x);
// x: [L, C] -> [C], mean over rows.
Tensor mean_rows(const Ctx& ctx, const Tensor& x);

// Output spatial extent of a padded strided sliding window.
int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad);

// ---- gradient verification ----------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must map x to a scalar tensor and be deterministic; eps in [1e-7, 1e-3].
double grad_check(const std::function<Tensor(const Ctx&, const Tensor&)>& f,
                  const Tensor& x, double eps);

}  // namespace mvit
