#include "mvit/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mvit {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void check(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

}  // namespace

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(static_cast<size_t>(numel(shape_)), 0.0)) {
  for (int64_t e : shape_) check(e > 0, "tensor extents must be positive, got " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> values) : Tensor(std::move(shape)) {
  check(static_cast<int64_t>(values.size()) == numel(shape_),
        "value count does not match shape " + shape_str(shape_));
  *data_ = std::move(values);
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_->begin(), t.data_->end(), value);
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.node_ = -1;
  t.requires_grad_ = false;
  return t;
}

// ---- Tape ------------------------------------------------------------------

Tensor Tape::leaf(const Tensor& t) {
  Tensor out = t;
  out.node_ = record(t.shape(), {});
  out.requires_grad_ = true;
  return out;
}

int Tape::record(const Shape& shape, std::function<void(Tape&)> back) {
  nodes_.push_back({shape, std::move(back)});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::attach(Tensor& t, int node) const { t.node_ = node; }

void Tape::backward(const Tensor& out) {
  check(out.size() == 1, "backward requires a scalar output, got " + shape_str(out.shape()));
  check(out.tracked(), "backward output is not on this tape");
  check(!nodes_.empty(), "backward on an empty tape");
  grads_.assign(nodes_.size(), {});
  for (size_t i = 0; i < nodes_.size(); ++i)
    grads_[i].assign(static_cast<size_t>(numel(nodes_[i].shape)), 0.0);
  grads_[static_cast<size_t>(out.node())][0] = 1.0;
  for (size_t i = nodes_.size(); i-- > 0;) {
    if (nodes_[i].back) nodes_[i].back(*this);
  }
}

Tensor Tape::grad(const Tensor& t) const {
  check(t.tracked(), "grad of an untracked tensor");
  check(!grads_.empty(), "grad queried before backward");
  return Tensor(t.shape(), grads_[static_cast<size_t>(t.node())]);
}

namespace {

bool tracking(const Ctx& ctx, std::initializer_list<const Tensor*> ins) {
  if (!ctx.tape) return false;
  for (const Tensor* t : ins)
    if (t->tracked()) return true;
  return false;
}

void axpy(std::vector<double>& dst, const double* src, int64_t n, double c = 1.0) {
  for (int64_t i = 0; i < n; ++i) dst[static_cast<size_t>(i)] += c * src[i];
}

}  // namespace

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Ctx& ctx, const Tensor& a, const Tensor& b) {
  check(a.rank() >= 2 && b.rank() >= 2,
        "matmul requires rank >= 2, got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t m = a.extent(static_cast<int>(a.rank()) - 2);
  const int64_t k = a.extent(static_cast<int>(a.rank()) - 1);
  const int64_t kb = b.extent(static_cast<int>(b.rank()) - 2);
  const int64_t n = b.extent(static_cast<int>(b.rank()) - 1);
  check(k == kb, "matmul inner extents disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  check(batch_a == batch_b || batch_a.empty() || batch_b.empty(),
        "matmul batch extents disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Shape batch = batch_a.empty() ? batch_b : batch_a;
  const int64_t nbatch = numel(batch);
  const bool bcast_a = batch_a.empty() && !batch.empty();
  const bool bcast_b = batch_b.empty() && !batch.empty();

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);

  for (int64_t bi = 0; bi < nbatch; ++bi) {
    ConstMapMat ma(a.data() + (bcast_a ? 0 : bi * m * k), m, k);
    ConstMapMat mb(b.data() + (bcast_b ? 0 : bi * k * n), k, n);
    MapMat mo(out.data() + bi * m * n, m, n);
    mo.noalias() = ma * mb;
  }
  count_macs(ctx, nbatch * m * n * k);

  if (tracking(ctx, {&a, &b})) {
    Tensor av = a.detached(), bv = b.detached();
    const int an = a.node(), bn = b.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(out_shape, [=](Tape& tape) mutable {
      const std::vector<double>& go = tape.grad_buf(out_node);
      for (int64_t bi = 0; bi < nbatch; ++bi) {
        ConstMapMat mg(go.data() + bi * m * n, m, n);
        if (an >= 0) {
          ConstMapMat mb(bv.data() + (bcast_b ? 0 : bi * k * n), k, n);
          MapMat ga(tape.grad_buf(an).data() + (bcast_a ? 0 : bi * m * k), m, k);
          ga.noalias() += mg * mb.transpose();
        }
        if (bn >= 0) {
          ConstMapMat ma(av.data() + (bcast_a ? 0 : bi * m * k), m, k);
          MapMat gb(tape.grad_buf(bn).data() + (bcast_b ? 0 : bi * k * n), k, n);
          gb.noalias() += ma.transpose() * mg;
        }
      }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

// ---- shape ops ---------------------------------------------------------------

Tensor reshape(const Ctx& ctx, const Tensor& x, Shape shape) {
  check(numel(shape) == x.size(),
        "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  Tensor out(shape, std::vector<double>(x.data(), x.data() + x.size()));
  if (tracking(ctx, {&x})) {
    const int xn = x.node();
    const int64_t n = x.size();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(shape, [=](Tape& tape) {
      axpy(tape.grad_buf(xn), tape.grad_buf(out_node).data(), n);
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

namespace {

// Row-major strides of a shape.
std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

void permute_into(const Tensor& x, const std::vector<int>& perm, double* dst) {
  const Shape& in = x.shape();
  Shape out_shape(in.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = in[static_cast<size_t>(perm[i])];
  const auto in_st = strides_of(in);
  const auto out_st = strides_of(out_shape);
  const int64_t n = x.size();
  const size_t r = in.size();
  for (int64_t idx = 0; idx < n; ++idx) {
    int64_t rem = idx, src = 0;
    for (size_t i = 0; i < r; ++i) {
      const int64_t c = rem / out_st[i];
      rem -= c * out_st[i];
      src += c * in_st[static_cast<size_t>(perm[i])];
    }
    dst[idx] = x.data()[src];
  }
}

}  // namespace

Tensor permute(const Ctx& ctx, const Tensor& x, const std::vector<int>& perm) {
  check(perm.size() == static_cast<size_t>(x.rank()), "permute rank mismatch");
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.extent(perm[i]);
  Tensor out(out_shape);
  permute_into(x, perm, out.data());
  if (tracking(ctx, {&x})) {
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    const int xn = x.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(out_shape, [=](Tape& tape) {
      Tensor g(out_shape, tape.grad_buf(out_node));
      std::vector<double> gx(static_cast<size_t>(g.size()));
      permute_into(g, inv, gx.data());
      axpy(tape.grad_buf(xn), gx.data(), g.size());
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Ctx& ctx, const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(),
        "add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t n = a.size();
  Tensor out(a.shape());
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  count_pointwise(ctx, n);
  if (tracking(ctx, {&a, &b})) {
    const int an = a.node(), bn = b.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(a.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      if (an >= 0) axpy(tape.grad_buf(an), go.data(), n);
      if (bn >= 0) axpy(tape.grad_buf(bn), go.data(), n);
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

Tensor mul(const Ctx& ctx, const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(),
        "mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t n = a.size();
  Tensor out(a.shape());
  for (int64_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  count_pointwise(ctx, n);
  if (tracking(ctx, {&a, &b})) {
    Tensor av = a.detached(), bv = b.detached();
    const int an = a.node(), bn = b.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(a.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      if (an >= 0) {
        auto& ga = tape.grad_buf(an);
        for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * bv.at(i);
      }
      if (bn >= 0) {
        auto& gb = tape.grad_buf(bn);
        for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * av.at(i);
      }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

Tensor scale(const Ctx& ctx, const Tensor& x, double c) {
  const int64_t n = x.size();
  Tensor out(x.shape());
  for (int64_t i = 0; i < n; ++i) out.at(i) = c * x.at(i);
  count_pointwise(ctx, n);
  if (tracking(ctx, {&x})) {
    const int xn = x.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(x.shape(), [=](Tape& tape) {
      axpy(tape.grad_buf(xn), tape.grad_buf(out_node).data(), n, c);
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

Tensor add_rowwise(const Ctx& ctx, const Tensor& x, const Tensor& bias) {
  check(bias.rank() == 1 && bias.extent(0) == x.extent(static_cast<int>(x.rank()) - 1),
        "bias extent " + shape_str(bias.shape()) + " does not match last axis of " + shape_str(x.shape()));
  const int64_t c = bias.extent(0);
  const int64_t rows = x.size() / c;
  Tensor out(x.shape());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j) out.at(r * c + j) = x.at(r * c + j) + bias.at(j);
  count_pointwise(ctx, x.size());
  if (tracking(ctx, {&x, &bias})) {
    const int xn = x.node(), bn = bias.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(x.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      if (xn >= 0) axpy(tape.grad_buf(xn), go.data(), rows * c);
      if (bn >= 0) {
        auto& gb = tape.grad_buf(bn);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) gb[static_cast<size_t>(j)] += go[static_cast<size_t>(r * c + j)];
      }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

Tensor gelu(const Ctx& ctx, const Tensor& x) {
  const int64_t n = x.size();
  Tensor out(x.shape());
  for (int64_t i = 0; i < n; ++i) {
    const double v = x.at(i);
    out.at(i) = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  count_pointwise(ctx, 8 * n);
  if (tracking(ctx, {&x})) {
    Tensor xv = x.detached();
    const int xn = x.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(x.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      auto& gx = tape.grad_buf(xn);
      for (int64_t i = 0; i < n; ++i) {
        const double v = xv.at(i);
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        gx[static_cast<size_t>(i)] += go[static_cast<size_t>(i)] * (cdf + v * pdf);
      }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

Tensor layer_norm(const Ctx& ctx, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm eps must be positive");
  const int64_t c = x.extent(static_cast<int>(x.rank()) - 1);
  check(gamma.rank() == 1 && gamma.extent(0) == c && beta.rank() == 1 && beta.extent(0) == c,
        "layer_norm affine extents do not match channel axis of " + shape_str(x.shape()));
  const int64_t rows = x.size() / c;
  Tensor out(x.shape());
  std::vector<double> means(static_cast<size_t>(rows)), istds(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    double m = 0;
    for (int64_t j = 0; j < c; ++j) m += x.at(r * c + j);
    m /= static_cast<double>(c);
    double v = 0;
    for (int64_t j = 0; j < c; ++j) {
      const double d = x.at(r * c + j) - m;
      v += d * d;
    }
    v /= static_cast<double>(c);
    const double istd = 1.0 / std::sqrt(v + eps);
    means[static_cast<size_t>(r)] = m;
    istds[static_cast<size_t>(r)] = istd;
    for (int64_t j = 0; j < c; ++j)
      out.at(r * c + j) = (x.at(r * c + j) - m) * istd * gamma.at(j) + beta.at(j);
  }
  count_pointwise(ctx, 5 * x.size());
  if (tracking(ctx, {&x, &gamma, &beta})) {
    Tensor xv = x.detached(), gv = gamma.detached();
    const int xn = x.node(), gn = gamma.node(), bn = beta.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(x.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      for (int64_t r = 0; r < rows; ++r) {
        const double m = means[static_cast<size_t>(r)];
        const double istd = istds[static_cast<size_t>(r)];
        // dL/dxhat and its row statistics.
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        std::vector<double> dxhat(static_cast<size_t>(c)), xhat(static_cast<size_t>(c));
        for (int64_t j = 0; j < c; ++j) {
          xhat[static_cast<size_t>(j)] = (xv.at(r * c + j) - m) * istd;
          dxhat[static_cast<size_t>(j)] = go[static_cast<size_t>(r * c + j)] * gv.at(j);
          sum_dxhat += dxhat[static_cast<size_t>(j)];
          sum_dxhat_xhat += dxhat[static_cast<size_t>(j)] * xhat[static_cast<size_t>(j)];
        }
        if (xn >= 0) {
          auto& gx = tape.grad_buf(xn);
          for (int64_t j = 0; j < c; ++j) {
            gx[static_cast<size_t>(r * c + j)] +=
                istd * (dxhat[static_cast<size_t>(j)] - sum_dxhat / static_cast<double>(c) -
                        xhat[static_cast<size_t>(j)] * sum_dxhat_xhat / static_cast<double>(c));
          }
        }
        if (gn >= 0) {
          auto& gg = tape.grad_buf(gn);
          for (int64_t j = 0; j < c; ++j)
            gg[static_cast<size_t>(j)] += go[static_cast<size_t>(r * c + j)] * xhat[static_cast<size_t>(j)];
        }
        if (bn >= 0) {
          auto& gb = tape.grad_buf(bn);
          for (int64_t j = 0; j < c; ++j) gb[static_cast<size_t>(j)] += go[static_cast<size_t>(r * c + j)];
        }
      }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

Tensor softmax_lastdim(const Ctx& ctx, const Tensor& x) {
  const int64_t c = x.extent(static_cast<int>(x.rank()) - 1);
  check(c >= 1, "softmax over empty axis");
  const int64_t rows = x.size() / c;
  Tensor out(x.shape());
  for (int64_t r = 0; r < rows; ++r) {
    double mx = x.at(r * c);
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x.at(r * c + j));
    double denom = 0;
    for (int64_t j = 0; j < c; ++j) {
      const double e = std::exp(x.at(r * c + j) - mx);
      out.at(r * c + j) = e;
      denom += e;
    }
    for (int64_t j = 0; j < c; ++j) out.at(r * c + j) /= denom;
  }
  count_pointwise(ctx, 5 * x.size());
  if (tracking(ctx, {&x})) {
    Tensor yv = out.detached();
    const int xn = x.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(x.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      auto& gx = tape.grad_buf(xn);
      for (int64_t r = 0; r < rows; ++r) {
        double dot = 0;
        for (int64_t j = 0; j < c; ++j) dot += go[static_cast<size_t>(r * c + j)] * yv.at(r * c + j);
        for (int64_t j = 0; j < c; ++j)
          gx[static_cast<size_t>(r * c + j)] +=
              yv.at(r * c + j) * (go[static_cast<size_t>(r * c + j)] - dot);
      }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

// ---- grid convolutions -------------------------------------------------------

int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  const int64_t padded = in + 2 * pad;
  check(padded >= k, "kernel extent " + std::to_string(k) + " exceeds padded input " + std::to_string(padded));
  return (padded - k) / stride + 1;
}

namespace {

struct GridIter {
  std::vector<int64_t> extents;
  int64_t count() const { return numel(Shape(extents.begin(), extents.end())); }
  std::vector<int64_t> unravel(int64_t idx) const {
    std::vector<int64_t> pos(extents.size());
    for (size_t i = extents.size(); i-- > 0;) {
      pos[i] = idx % extents[i];
      idx /= extents[i];
    }
    return pos;
  }
};

}  // namespace

Tensor conv_depthwise(const Ctx& ctx, const Tensor& x, const Tensor& kernel,
                      const std::vector<int64_t>& grid,
                      const std::vector<int64_t>& stride,
                      const std::vector<int64_t>& pad) {
  const size_t r = grid.size();
  check(r == 2 || r == 3, "depthwise conv supports 2- or 3-axis grids");
  check(x.rank() == 3, "conv input must be [B, L, C], got " + shape_str(x.shape()));
  check(kernel.rank() == static_cast<int64_t>(r) + 1, "kernel rank must be 1 + grid rank");
  const int64_t B = x.extent(0), L = x.extent(1), C = x.extent(2);
  check(L == numel(Shape(grid.begin(), grid.end())),
        "grid " + shape_str(Shape(grid.begin(), grid.end())) + " inconsistent with token count " + std::to_string(L));
  check(kernel.extent(0) == C, "kernel channel count mismatch");

  std::vector<int64_t> kext(r), oext(r);
  int64_t ktaps = 1;
  for (size_t a = 0; a < r; ++a) {
    kext[a] = kernel.extent(static_cast<int>(a) + 1);
    oext[a] = conv_out_extent(grid[a], kext[a], stride[a], pad[a]);
    ktaps *= kext[a];
  }
  GridIter out_it{oext}, tap_it{kext};
  const int64_t Lo = out_it.count();
  const auto gst = strides_of(Shape(grid.begin(), grid.end()));
  Tensor out({B, Lo, C});

  // Kernel-major accumulation: fixed tap order per output element.
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t o = 0; o < Lo; ++o) {
      const auto opos = out_it.unravel(o);
      for (int64_t ch = 0; ch < C; ++ch) {
        double acc = 0;
        for (int64_t t = 0; t < ktaps; ++t) {
          const auto tpos = tap_it.unravel(t);
          int64_t src = 0;
          bool inside = true;
          for (size_t a = 0; a < r; ++a) {
            const int64_t p = opos[a] * stride[a] + tpos[a] - pad[a];
            if (p < 0 || p >= grid[a]) { inside = false; break; }
            src += p * gst[a];
          }
          if (inside) acc += kernel.at(ch * ktaps + t) * x.at((b * L + src) * C + ch);
        }
        out.at((b * Lo + o) * C + ch) = acc;
      }
    }
  }
  count_macs(ctx, B * Lo * C * ktaps);

  if (tracking(ctx, {&x, &kernel})) {
    Tensor xv = x.detached(), kv = kernel.detached();
    const int xn = x.node(), kn = kernel.node();
    const Shape out_shape = out.shape();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(out_shape, [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      for (int64_t b = 0; b < B; ++b) {
        for (int64_t o = 0; o < Lo; ++o) {
          const auto opos = out_it.unravel(o);
          for (int64_t ch = 0; ch < C; ++ch) {
            const double g = go[static_cast<size_t>((b * Lo + o) * C + ch)];
            for (int64_t t = 0; t < ktaps; ++t) {
              const auto tpos = tap_it.unravel(t);
              int64_t src = 0;
              bool inside = true;
              for (size_t a = 0; a < r; ++a) {
                const int64_t p = opos[a] * stride[a] + tpos[a] - pad[a];
                if (p < 0 || p >= grid[a]) { inside = false; break; }
                src += p * gst[a];
              }
              if (!inside) continue;
              if (xn >= 0)
                tape.grad_buf(xn)[static_cast<size_t>((b * L + src) * C + ch)] += g * kv.at(ch * ktaps + t);
              if (kn >= 0)
                tape.grad_buf(kn)[static_cast<size_t>(ch * ktaps + t)] += g * xv.at((b * L + src) * C + ch);
            }
          }
        }
      }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

Tensor max_pool(const Ctx& ctx, const Tensor& x,
                const std::vector<int64_t>& grid,
                const std::vector<int64_t>& kernel,
                const std::vector<int64_t>& stride,
                const std::vector<int64_t>& pad) {
  const size_t r = grid.size();
  check(x.rank() == 3, "max_pool input must be [B, L, C]");
  const int64_t B = x.extent(0), L = x.extent(1), C = x.extent(2);
  check(L == numel(Shape(grid.begin(), grid.end())), "grid inconsistent with token count");

  std::vector<int64_t> oext(r);
  int64_t ktaps = 1;
  for (size_t a = 0; a < r; ++a) {
    oext[a] = conv_out_extent(grid[a], kernel[a], stride[a], pad[a]);
    ktaps *= kernel[a];
  }
  GridIter out_it{oext}, tap_it{std::vector<int64_t>(kernel.begin(), kernel.end())};
  const int64_t Lo = out_it.count();
  const auto gst = strides_of(Shape(grid.begin(), grid.end()));
  Tensor out({B, Lo, C});
  std::vector<int64_t> argmax(static_cast<size_t>(B * Lo * C), -1);

  for (int64_t b = 0; b < B; ++b) {
    for (int64_t o = 0; o < Lo; ++o) {
      const auto opos = out_it.unravel(o);
      for (int64_t ch = 0; ch < C; ++ch) {
        double best = 0;
        int64_t best_src = -1;
        for (int64_t t = 0; t < ktaps; ++t) {
          const auto tpos = tap_it.unravel(t);
          int64_t src = 0;
          bool inside = true;
          for (size_t a = 0; a < r; ++a) {
            const int64_t p = opos[a] * stride[a] + tpos[a] - pad[a];
            if (p < 0 || p >= grid[a]) { inside = false; break; }
            src += p * gst[a];
          }
          if (!inside) continue;
          const double v = x.at((b * L + src) * C + ch);
          if (best_src < 0 || v > best) { best = v; best_src = src; }
        }
        check(best_src >= 0, "max_pool window contains no valid positions");
        out.at((b * Lo + o) * C + ch) = best;
        argmax[static_cast<size_t>((b * Lo + o) * C + ch)] = best_src;
      }
    }
  }
  count_pointwise(ctx, B * Lo * C * ktaps);

  if (tracking(ctx, {&x})) {
    const int xn = x.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(out.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      auto& gx = tape.grad_buf(xn);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < Lo * C; ++i) {
          const int64_t src = argmax[static_cast<size_t>(b * Lo * C + i)];
          const int64_t ch = i % C;
          gx[static_cast<size_t>((b * L + src) * C + ch)] += go[static_cast<size_t>(b * Lo * C + i)];
        }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

Tensor conv_full(const Ctx& ctx, const Tensor& x, const Tensor& weight,
                 const Tensor& bias, const std::vector<int64_t>& grid,
                 const std::vector<int64_t>& stride,
                 const std::vector<int64_t>& pad) {
  const size_t r = grid.size();
  check(x.rank() == 2, "conv_full input must be [L, C_in]");
  const int64_t L = x.extent(0), Cin = x.extent(1);
  check(L == numel(Shape(grid.begin(), grid.end())), "grid inconsistent with token count");
  check(weight.rank() == static_cast<int64_t>(r) + 2 && weight.extent(1) == Cin,
        "conv_full weight shape mismatch: " + shape_str(weight.shape()));
  const int64_t Cout = weight.extent(0);
  check(bias.rank() == 1 && bias.extent(0) == Cout, "conv_full bias mismatch");

  std::vector<int64_t> kext(r), oext(r);
  int64_t ktaps = 1;
  for (size_t a = 0; a < r; ++a) {
    kext[a] = weight.extent(static_cast<int>(a) + 2);
    oext[a] = conv_out_extent(grid[a], kext[a], stride[a], pad[a]);
    ktaps *= kext[a];
  }
  GridIter out_it{oext}, tap_it{kext};
  const int64_t Lo = out_it.count();
  const auto gst = strides_of(Shape(grid.begin(), grid.end()));
  Tensor out({Lo, Cout});

  for (int64_t o = 0; o < Lo; ++o) {
    const auto opos = out_it.unravel(o);
    for (int64_t co = 0; co < Cout; ++co) {
      double acc = bias.at(co);
      for (int64_t ci = 0; ci < Cin; ++ci) {
        for (int64_t t = 0; t < ktaps; ++t) {
          const auto tpos = tap_it.unravel(t);
          int64_t src = 0;
          bool inside = true;
          for (size_t a = 0; a < r; ++a) {
            const int64_t p = opos[a] * stride[a] + tpos[a] - pad[a];
            if (p < 0 || p >= grid[a]) { inside = false; break; }
            src += p * gst[a];
          }
          if (inside) acc += weight.at((co * Cin + ci) * ktaps + t) * x.at(src * Cin + ci);
        }
      }
      out.at(o * Cout + co) = acc;
    }
  }
  count_macs(ctx, Lo * Cout * Cin * ktaps);
  count_pointwise(ctx, Lo * Cout);  // bias adds

  if (tracking(ctx, {&x, &weight, &bias})) {
    Tensor xv = x.detached(), wv = weight.detached();
    const int xn = x.node(), wn = weight.node(), bn = bias.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(out.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      for (int64_t o = 0; o < Lo; ++o) {
        const auto opos = out_it.unravel(o);
        for (int64_t co = 0; co < Cout; ++co) {
          const double g = go[static_cast<size_t>(o * Cout + co)];
          if (bn >= 0) tape.grad_buf(bn)[static_cast<size_t>(co)] += g;
          for (int64_t ci = 0; ci < Cin; ++ci) {
            for (int64_t t = 0; t < ktaps; ++t) {
              const auto tpos = tap_it.unravel(t);
              int64_t src = 0;
              bool inside = true;
              for (size_t a = 0; a < r; ++a) {
                const int64_t p = opos[a] * stride[a] + tpos[a] - pad[a];
                if (p < 0 || p >= grid[a]) { inside = false; break; }
                src += p * gst[a];
              }
              if (!inside) continue;
              if (xn >= 0)
                tape.grad_buf(xn)[static_cast<size_t>(src * Cin + ci)] +=
                    g * wv.at((co * Cin + ci) * ktaps + t);
              if (wn >= 0)
                tape.grad_buf(wn)[static_cast<size_t>((co * Cin + ci) * ktaps + t)] +=
                    g * xv.at(src * Cin + ci);
            }
          }
        }
      }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

// ---- reductions ----------------------------------------------------------------

Tensor sum_all(const Ctx& ctx, const Tensor& x) {
  double s = 0;
  const int64_t n = x.size();
  for (int64_t i = 0; i < n; ++i) s += x.at(i);
  count_pointwise(ctx, n);
  Tensor out = Tensor::scalar(s);
  if (tracking(ctx, {&x})) {
    const int xn = x.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(out.shape(), [=](Tape& tape) {
      const double g = tape.grad_buf(out_node)[0];
      auto& gx = tape.grad_buf(xn);
      for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g;
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

Tensor mean_rows(const Ctx& ctx, const Tensor& x) {
  check(x.rank() == 2, "mean_rows expects [L, C]");
  const int64_t L = x.extent(0), C = x.extent(1);
  Tensor out({C});
  for (int64_t j = 0; j < C; ++j) {
    double s = 0;
    for (int64_t i = 0; i < L; ++i) s += x.at(i * C + j);
    out.at(j) = s / static_cast<double>(L);
  }
  count_pointwise(ctx, x.size());
  if (tracking(ctx, {&x})) {
    const int xn = x.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(out.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      auto& gx = tape.grad_buf(xn);
      for (int64_t i = 0; i < L; ++i)
        for (int64_t j = 0; j < C; ++j)
          gx[static_cast<size_t>(i * C + j)] += go[static_cast<size_t>(j)] / static_cast<double>(L);
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

// ---- gradient verification ------------------------------------------------------

double grad_check(const std::function<Tensor(const Ctx&, const Tensor&)>& f,
                  const Tensor& x, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3))
    throw std::invalid_argument("grad_check eps must lie in [1e-7, 1e-3]");

  Tape tape;
  Ctx ctx{&tape, nullptr};
  Tensor xt = tape.leaf(x);
  Tensor y = f(ctx, xt);
  if (y.size() != 1) throw std::invalid_argument("grad_check function must return a scalar");
  tape.backward(y);
  Tensor analytic = tape.grad(xt);

  double max_err = 0;
  const int64_t n = x.size();
  std::vector<double> base(x.data(), x.data() + n);
  for (int64_t i = 0; i < n; ++i) {
    auto eval = [&](double v) {
      std::vector<double> probe = base;
      probe[static_cast<size_t>(i)] = v;
      Ctx plain;
      try {
        return f(plain, Tensor(x.shape(), probe)).at(0);
      } catch (const std::exception& e) {
        throw std::runtime_error("grad_check: function raised at coordinate " +
                                 std::to_string(i) + ": " + e.what());
      }
    };
    const double fd = (eval(base[static_cast<size_t>(i)] + eps) -
                       eval(base[static_cast<size_t>(i)] - eps)) /
                      (2.0 * eps);
    const double a = analytic.at(i);
    const double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace mvit
