#include "mvit/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mvit/init.hpp"

namespace mvit {

namespace {

constexpr double kMaskValue = -1e30;

void check(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

int64_t pad_of(int64_t kernel) { return (kernel - 1) / 2; }

Grid pooled_extents(const Grid& grid, const Grid& stride, int64_t kernel) {
  Grid out(grid.size());
  for (size_t a = 0; a < grid.size(); ++a)
    out[a] = conv_out_extent(grid[a], kernel, stride[a], pad_of(kernel));
  return out;
}

bool all_ones(const Grid& g) {
  return std::all_of(g.begin(), g.end(), [](int64_t v) { return v == 1; });
}

int64_t ravel(const Grid& pos, const Grid& extents) {
  int64_t idx = 0;
  for (size_t a = 0; a < extents.size(); ++a) idx = idx * extents[a] + pos[a];
  return idx;
}

Grid unravel(int64_t idx, const Grid& extents) {
  Grid pos(extents.size());
  for (size_t a = extents.size(); a-- > 0;) {
    pos[a] = idx % extents[a];
    idx /= extents[a];
  }
  return pos;
}

}  // namespace

const char* to_string(AttnKind k) {
  switch (k) {
    case AttnKind::full: return "full";
    case AttnKind::fixed_window: return "fixed_window";
    case AttnKind::shifted_window: return "shifted_window";
    case AttnKind::hybrid_window_member: return "hybrid_window";
    case AttnKind::pooling: return "pooling";
  }
  return "?";
}

void AttentionSpec::validate(const Grid& grid) const {
  check(heads > 0 && head_dim > 0, "heads and head_dim must be positive");
  check(q_stride.size() == grid.size() && kv_stride.size() == grid.size(),
        "stride rank does not match grid rank");
  for (size_t a = 0; a < grid.size(); ++a) {
    check(q_stride[a] >= 1 && kv_stride[a] >= 1, "strides must be >= 1");
    check(grid[a] >= 1, "grid extents must be positive");
  }
  if (kind == AttnKind::full)
    check(all_ones(q_stride) && all_ones(kv_stride), "full attention does not pool");
  if (windowed()) {
    check(window.size() == grid.size(), "window rank does not match grid rank");
    check(pool_kernel % 2 == 1, "windowed attention requires an odd pool kernel");
    for (size_t a = 0; a < grid.size(); ++a) {
      check(window[a] >= 1, "window extent 0 is an invalid spec");
      check(window[a] % q_stride[a] == 0, "window must be divisible by q_stride");
    }
  }
  if (kind == AttnKind::shifted_window) {
    check(shift.size() == grid.size(), "shift rank does not match grid rank");
    check(all_ones(q_stride), "shifted windows require q_stride 1");
    for (size_t a = 0; a < grid.size(); ++a)
      check(shift[a] >= 0 && shift[a] < window[a], "shift must lie in [0, window)");
  }
  const bool rel = relpos_mode == RelPosMode::joint || relpos_mode == RelPosMode::decomposed;
  check(rel == (rel_q || rel_k || rel_v),
        "relpos terms must be nonempty iff relpos mode is joint or decomposed");
  check(pool_kernel >= 1, "pool kernel must be >= 1");
}

// ---- RelPosTables ----------------------------------------------------------------

int64_t RelPosTables::rows() const {
  if (mode == RelPosMode::joint) return joint.defined() ? joint.extent(0) : 0;
  int64_t r = 0;
  for (const Tensor& t : axis_tables) r += t.extent(0);
  return r;
}

RelPosTables RelPosTables::zeros(RelPosMode mode, const Grid& extents, int64_t d) {
  RelPosTables t;
  t.mode = mode;
  t.extents = extents;
  if (mode == RelPosMode::decomposed) {
    for (int64_t s : extents) t.axis_tables.emplace_back(Shape{2 * s - 1, d});
  } else if (mode == RelPosMode::joint) {
    int64_t rows = 1;
    for (int64_t s : extents) rows *= 2 * s - 1;
    t.joint = Tensor({rows, d});
  }
  return t;
}

std::vector<Tensor*> RelPosTables::tensors() {
  std::vector<Tensor*> out;
  for (Tensor& t : axis_tables) out.push_back(&t);
  if (joint.defined()) out.push_back(&joint);
  return out;
}

std::vector<std::vector<int64_t>> shared_scale_coords(const Grid& grid, const Grid& shared) {
  check(grid.size() == shared.size(), "coordinate rank mismatch");
  const int64_t L = numel(Shape(grid.begin(), grid.end()));
  std::vector<std::vector<int64_t>> coords(grid.size(), std::vector<int64_t>(static_cast<size_t>(L)));
  for (int64_t i = 0; i < L; ++i) {
    const Grid pos = unravel(i, grid);
    for (size_t a = 0; a < grid.size(); ++a)
      coords[a][static_cast<size_t>(i)] = pos[a] * shared[a] / grid[a];
  }
  return coords;
}

// ---- custom tape ops --------------------------------------------------------------

Tensor gather_rows(const Ctx& ctx, const Tensor& x, const std::vector<int64_t>& idx) {
  check(x.rank() == 2, "gather_rows expects [N, C]");
  const int64_t N = x.extent(0), C = x.extent(1);
  const int64_t M = static_cast<int64_t>(idx.size());
  Tensor out({M, C});
  for (int64_t i = 0; i < M; ++i) {
    const int64_t s = idx[static_cast<size_t>(i)];
    check(s < N, "gather_rows index out of range");
    if (s >= 0)
      for (int64_t j = 0; j < C; ++j) out.at(i * C + j) = x.at(s * C + j);
  }
  if (ctx.tape && x.tracked()) {
    const int xn = x.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(out.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      auto& gx = tape.grad_buf(xn);
      for (int64_t i = 0; i < M; ++i) {
        const int64_t s = idx[static_cast<size_t>(i)];
        if (s < 0) continue;
        for (int64_t j = 0; j < C; ++j) gx[static_cast<size_t>(s * C + j)] += go[static_cast<size_t>(i * C + j)];
      }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

Tensor concat_rows(const Ctx& ctx, const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_rows of nothing");
  const int64_t C = parts.front().extent(1);
  int64_t M = 0;
  for (const Tensor& p : parts) {
    check(p.rank() == 2 && p.extent(1) == C, "concat_rows column mismatch");
    M += p.extent(0);
  }
  Tensor out({M, C});
  int64_t row = 0;
  std::vector<int64_t> offsets;
  std::vector<int> nodes;
  bool any_tracked = false;
  for (const Tensor& p : parts) {
    offsets.push_back(row);
    nodes.push_back(p.node());
    if (p.tracked()) any_tracked = true;
    std::copy(p.data(), p.data() + p.size(), out.data() + row * C);
    row += p.extent(0);
  }
  if (ctx.tape && any_tracked) {
    std::vector<int64_t> sizes;
    for (const Tensor& p : parts) sizes.push_back(p.size());
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(out.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      for (size_t p = 0; p < nodes.size(); ++p) {
        if (nodes[p] < 0) continue;
        auto& gp = tape.grad_buf(nodes[p]);
        const double* src = go.data() + offsets[p] * C;
        for (int64_t i = 0; i < sizes[p]; ++i) gp[static_cast<size_t>(i)] += src[i];
      }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

namespace {

// E[h,i,j] = sum_a P_a[h, row(i,j), off_a(i,j)] where row is i (query rows)
// or j (key rows).
Tensor gather_sum(const Ctx& ctx, const std::vector<Tensor>& P,
                  const std::vector<std::vector<int64_t>>& off,
                  int64_t Lq, int64_t Lk, bool row_is_query) {
  const int64_t h = P.front().extent(0);
  Tensor out({h, Lq, Lk});
  const size_t naxes = P.size();
  for (size_t a = 0; a < naxes; ++a) {
    const Tensor& Pa = P[a];
    const int64_t rows = Pa.extent(1), nr = Pa.extent(2);
    for (int64_t hh = 0; hh < h; ++hh)
      for (int64_t i = 0; i < Lq; ++i)
        for (int64_t j = 0; j < Lk; ++j) {
          const int64_t r = row_is_query ? i : j;
          const int64_t o = off[a][static_cast<size_t>(i * Lk + j)];
          check(r < rows && o >= 0 && o < nr, "relative offset out of table range");
          out.at((hh * Lq + i) * Lk + j) += Pa.at((hh * rows + r) * nr + o);
        }
  }
  count_pointwise(ctx, h * Lq * Lk * static_cast<int64_t>(naxes));
  bool tracked = false;
  for (const Tensor& p : P) tracked |= p.tracked();
  if (ctx.tape && tracked) {
    std::vector<int> nodes;
    std::vector<Shape> shapes;
    for (const Tensor& p : P) { nodes.push_back(p.node()); shapes.push_back(p.shape()); }
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(out.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      for (size_t a = 0; a < nodes.size(); ++a) {
        if (nodes[a] < 0) continue;
        auto& gp = tape.grad_buf(nodes[a]);
        const int64_t rows = shapes[a][1], nr = shapes[a][2];
        for (int64_t hh = 0; hh < h; ++hh)
          for (int64_t i = 0; i < Lq; ++i)
            for (int64_t j = 0; j < Lk; ++j) {
              const int64_t r = row_is_query ? i : j;
              const int64_t o = off[a][static_cast<size_t>(i * Lk + j)];
              gp[static_cast<size_t>((hh * rows + r) * nr + o)] += go[static_cast<size_t>((hh * Lq + i) * Lk + j)];
            }
      }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

// M[h,i,delta] = sum_j A[h,i,j] [off(i,j) == delta].
Tensor scatter_rows(const Ctx& ctx, const Tensor& A, const std::vector<int64_t>& off,
                    int64_t nrows) {
  const int64_t h = A.extent(0), Lq = A.extent(1), Lk = A.extent(2);
  Tensor out({h, Lq, nrows});
  for (int64_t hh = 0; hh < h; ++hh)
    for (int64_t i = 0; i < Lq; ++i)
      for (int64_t j = 0; j < Lk; ++j) {
        const int64_t o = off[static_cast<size_t>(i * Lk + j)];
        check(o >= 0 && o < nrows, "relative offset out of table range");
        out.at((hh * Lq + i) * nrows + o) += A.at((hh * Lq + i) * Lk + j);
      }
  count_pointwise(ctx, h * Lq * Lk);
  if (ctx.tape && A.tracked()) {
    const int an = A.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(out.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      auto& ga = tape.grad_buf(an);
      for (int64_t hh = 0; hh < h; ++hh)
        for (int64_t i = 0; i < Lq; ++i)
          for (int64_t j = 0; j < Lk; ++j) {
            const int64_t o = off[static_cast<size_t>(i * Lk + j)];
            ga[static_cast<size_t>((hh * Lq + i) * Lk + j)] += go[static_cast<size_t>((hh * Lq + i) * nrows + o)];
          }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

// Joint-table bias: E[h,i,j] = dot(Q[h, row(i,j)], R[idx(i,j)]).
Tensor joint_bias(const Ctx& ctx, const Tensor& q, const Tensor& table,
                  const std::vector<int64_t>& idx, int64_t Lq, int64_t Lk,
                  bool row_is_query) {
  const int64_t h = q.extent(0), rows = q.extent(1), d = q.extent(2);
  const int64_t nr = table.extent(0);
  Tensor out({h, Lq, Lk});
  for (int64_t hh = 0; hh < h; ++hh)
    for (int64_t i = 0; i < Lq; ++i)
      for (int64_t j = 0; j < Lk; ++j) {
        const int64_t r = row_is_query ? i : j;
        const int64_t t = idx[static_cast<size_t>(i * Lk + j)];
        check(r < rows && t >= 0 && t < nr, "joint table index out of range");
        double acc = 0;
        for (int64_t c = 0; c < d; ++c) acc += q.at((hh * rows + r) * d + c) * table.at(t * d + c);
        out.at((hh * Lq + i) * Lk + j) = acc;
      }
  count_macs(ctx, h * Lq * Lk * d);
  if (ctx.tape && (q.tracked() || table.tracked())) {
    Tensor qv = q.detached(), tv = table.detached();
    const int qn = q.node(), tn = table.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(out.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      for (int64_t hh = 0; hh < h; ++hh)
        for (int64_t i = 0; i < Lq; ++i)
          for (int64_t j = 0; j < Lk; ++j) {
            const int64_t r = row_is_query ? i : j;
            const int64_t t = idx[static_cast<size_t>(i * Lk + j)];
            const double g = go[static_cast<size_t>((hh * Lq + i) * Lk + j)];
            for (int64_t c = 0; c < d; ++c) {
              if (qn >= 0) tape.grad_buf(qn)[static_cast<size_t>((hh * rows + r) * d + c)] += g * tv.at(t * d + c);
              if (tn >= 0) tape.grad_buf(tn)[static_cast<size_t>(t * d + c)] += g * qv.at((hh * rows + r) * d + c);
            }
          }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

// Joint-table rel_v: out[h,i,:] = sum_j A[h,i,j] * R[idx(i,j)].
Tensor joint_values(const Ctx& ctx, const Tensor& A, const Tensor& table,
                    const std::vector<int64_t>& idx) {
  const int64_t h = A.extent(0), Lq = A.extent(1), Lk = A.extent(2);
  const int64_t d = table.extent(1), nr = table.extent(0);
  Tensor out({h, Lq, d});
  for (int64_t hh = 0; hh < h; ++hh)
    for (int64_t i = 0; i < Lq; ++i)
      for (int64_t j = 0; j < Lk; ++j) {
        const int64_t t = idx[static_cast<size_t>(i * Lk + j)];
        check(t >= 0 && t < nr, "joint table index out of range");
        const double a = A.at((hh * Lq + i) * Lk + j);
        for (int64_t c = 0; c < d; ++c) out.at((hh * Lq + i) * d + c) += a * table.at(t * d + c);
      }
  count_macs(ctx, h * Lq * Lk * d);
  if (ctx.tape && (A.tracked() || table.tracked())) {
    Tensor av = A.detached(), tv = table.detached();
    const int an = A.node(), tn = table.node();
    const int out_node = static_cast<int>(ctx.tape->num_nodes());
    ctx.tape->record(out.shape(), [=](Tape& tape) {
      const auto& go = tape.grad_buf(out_node);
      for (int64_t hh = 0; hh < h; ++hh)
        for (int64_t i = 0; i < Lq; ++i)
          for (int64_t j = 0; j < Lk; ++j) {
            const int64_t t = idx[static_cast<size_t>(i * Lk + j)];
            double gdot = 0;
            for (int64_t c = 0; c < d; ++c) {
              const double g = go[static_cast<size_t>((hh * Lq + i) * d + c)];
              gdot += g * tv.at(t * d + c);
              if (tn >= 0)
                tape.grad_buf(tn)[static_cast<size_t>(t * d + c)] += g * av.at((hh * Lq + i) * Lk + j);
            }
            if (an >= 0) tape.grad_buf(an)[static_cast<size_t>((hh * Lq + i) * Lk + j)] += gdot;
          }
    });
    ctx.tape->attach(out, out_node);
  }
  return out;
}

// Per-axis offset index arrays (and the joint row index) for a pair of
// coordinate sets on a shared scale.
std::vector<std::vector<int64_t>> offset_indices(
    const RelPosTables& tables,
    const std::vector<std::vector<int64_t>>& cq,
    const std::vector<std::vector<int64_t>>& ck) {
  const size_t naxes = tables.extents.size();
  const int64_t Lq = static_cast<int64_t>(cq.front().size());
  const int64_t Lk = static_cast<int64_t>(ck.front().size());
  std::vector<std::vector<int64_t>> off(naxes, std::vector<int64_t>(static_cast<size_t>(Lq * Lk)));
  for (size_t a = 0; a < naxes; ++a) {
    const int64_t S = tables.extents[a];
    for (int64_t i = 0; i < Lq; ++i)
      for (int64_t j = 0; j < Lk; ++j) {
        const int64_t delta = cq[a][static_cast<size_t>(i)] - ck[a][static_cast<size_t>(j)] + (S - 1);
        if (delta < 0 || delta >= 2 * S - 1)
          throw std::out_of_range("relative coordinate outside table range on axis " + std::to_string(a));
        off[a][static_cast<size_t>(i * Lk + j)] = delta;
      }
  }
  return off;
}

std::vector<int64_t> joint_indices(const RelPosTables& tables,
                                   const std::vector<std::vector<int64_t>>& off) {
  const size_t n = off.front().size();
  std::vector<int64_t> idx(n, 0);
  for (size_t a = 0; a < off.size(); ++a) {
    const int64_t rows = 2 * tables.extents[a] - 1;
    for (size_t i = 0; i < n; ++i) idx[i] = idx[i] * rows + off[a][i];
  }
  return idx;
}

}  // namespace

Tensor relpos_bias(const Ctx& ctx, const Tensor& q, const RelPosTables& tables,
                   const std::vector<std::vector<int64_t>>& coords_q,
                   const std::vector<std::vector<int64_t>>& coords_k) {
  const int64_t Lq = static_cast<int64_t>(coords_q.front().size());
  const int64_t Lk = static_cast<int64_t>(coords_k.front().size());
  check(q.rank() == 3 && q.extent(1) == Lq, "relpos_bias expects Q[heads, L_q, d]");
  const auto off = offset_indices(tables, coords_q, coords_k);
  if (tables.mode == RelPosMode::joint)
    return joint_bias(ctx, q, tables.joint, joint_indices(tables, off), Lq, Lk, true);
  std::vector<Tensor> P;
  for (size_t a = 0; a < tables.axis_tables.size(); ++a)
    P.push_back(matmul(ctx, q, permute(ctx, tables.axis_tables[a], {1, 0})));
  return gather_sum(ctx, P, off, Lq, Lk, true);
}

Tensor relpos_bias_keys(const Ctx& ctx, const Tensor& k, const RelPosTables& tables,
                        const std::vector<std::vector<int64_t>>& coords_q,
                        const std::vector<std::vector<int64_t>>& coords_k,
                        bool index_i) {
  const int64_t Lq = static_cast<int64_t>(coords_q.front().size());
  const int64_t Lk = static_cast<int64_t>(coords_k.front().size());
  if (index_i)
    check(k.extent(1) == Lq, "rel_k with K_i indexing requires L_q == L_k");
  const auto off = offset_indices(tables, coords_q, coords_k);
  if (tables.mode == RelPosMode::joint)
    return joint_bias(ctx, k, tables.joint, joint_indices(tables, off), Lq, Lk, index_i);
  std::vector<Tensor> P;
  for (size_t a = 0; a < tables.axis_tables.size(); ++a)
    P.push_back(matmul(ctx, k, permute(ctx, tables.axis_tables[a], {1, 0})));
  return gather_sum(ctx, P, off, Lq, Lk, index_i);
}

Tensor relpos_values(const Ctx& ctx, const Tensor& attn, const RelPosTables& tables,
                     const std::vector<std::vector<int64_t>>& coords_q,
                     const std::vector<std::vector<int64_t>>& coords_k) {
  const auto off = offset_indices(tables, coords_q, coords_k);
  if (tables.mode == RelPosMode::joint)
    return joint_values(ctx, attn, tables.joint, joint_indices(tables, off));
  Tensor out;
  for (size_t a = 0; a < tables.axis_tables.size(); ++a) {
    Tensor M = scatter_rows(ctx, attn, off[a], 2 * tables.extents[a] - 1);
    Tensor contrib = matmul(ctx, M, tables.axis_tables[a]);
    out = out.defined() ? add(ctx, out, contrib) : contrib;
  }
  return out;
}

// ---- parameters -------------------------------------------------------------------

AttentionParams make_attention_params(const AttentionSpec& spec, int64_t d_in,
                                      const Grid& grid, Rng& rng) {
  spec.validate(grid);
  const int64_t d = spec.head_dim;
  const int64_t d_out = spec.d_out();
  AttentionParams p;
  p.w_q = rng.trunc_normal_tensor({d_in, d_out});
  p.w_k = rng.trunc_normal_tensor({d_in, d_out});
  p.w_v = rng.trunc_normal_tensor({d_in, d_out});
  p.b_q = Tensor({d_out});
  p.b_k = Tensor({d_out});
  p.b_v = Tensor({d_out});
  p.w_out = rng.trunc_normal_tensor({d_out, d_out});
  p.b_out = Tensor({d_out});

  const Grid site = spec.windowed() ? spec.window : grid;
  const bool pools = spec.kind != AttnKind::full;
  const bool q_identity =
      !pools || (spec.q_pool_identity_at_stride1 && all_ones(spec.q_stride));
  if (pools && spec.pool_mode == PoolMode::depthwise_conv) {
    Shape kshape{d};
    for (size_t a = 0; a < site.size(); ++a) kshape.push_back(spec.pool_kernel);
    if (!q_identity) {
      p.pool_q_kernel = rng.trunc_normal_tensor(kshape);
      p.pool_q_gamma = Tensor::full({d}, 1.0);
      p.pool_q_beta = Tensor({d});
    }
    p.pool_k_kernel = rng.trunc_normal_tensor(kshape);
    p.pool_k_gamma = Tensor::full({d}, 1.0);
    p.pool_k_beta = Tensor({d});
    p.pool_v_kernel = rng.trunc_normal_tensor(kshape);
    p.pool_v_gamma = Tensor::full({d}, 1.0);
    p.pool_v_beta = Tensor({d});
  }

  if (spec.relpos_mode == RelPosMode::joint || spec.relpos_mode == RelPosMode::decomposed) {
    const Grid shared = q_identity ? site : pooled_extents(site, spec.q_stride, spec.pool_kernel);
    auto make_tables = [&] {
      RelPosTables t = RelPosTables::zeros(spec.relpos_mode, shared, d);
      for (Tensor* tt : t.tensors()) *tt = rng.trunc_normal_tensor(tt->shape());
      return t;
    };
    if (spec.rel_q) p.rel_q_tables = make_tables();
    if (spec.rel_k) p.rel_k_tables = make_tables();
    if (spec.rel_v) p.rel_v_tables = make_tables();
  }
  if (spec.relpos_mode == RelPosMode::absolute_only)
    p.abs_pos = rng.trunc_normal_tensor({numel(Shape(grid.begin(), grid.end())), d_in});
  return p;
}

std::vector<std::pair<std::string, Tensor*>> AttentionParams::named() {
  std::vector<std::pair<std::string, Tensor*>> out;
  auto push = [&](const char* name, Tensor& t) {
    if (t.defined()) out.emplace_back(name, &t);
  };
  push("w_q", w_q); push("b_q", b_q);
  push("w_k", w_k); push("b_k", b_k);
  push("w_v", w_v); push("b_v", b_v);
  push("w_out", w_out); push("b_out", b_out);
  push("pool_q_kernel", pool_q_kernel); push("pool_q_gamma", pool_q_gamma); push("pool_q_beta", pool_q_beta);
  push("pool_k_kernel", pool_k_kernel); push("pool_k_gamma", pool_k_gamma); push("pool_k_beta", pool_k_beta);
  push("pool_v_kernel", pool_v_kernel); push("pool_v_gamma", pool_v_gamma); push("pool_v_beta", pool_v_beta);
  auto push_tables = [&](const char* prefix, RelPosTables& t) {
    for (size_t a = 0; a < t.axis_tables.size(); ++a)
      out.emplace_back(std::string(prefix) + ".axis" + std::to_string(a), &t.axis_tables[a]);
    if (t.joint.defined()) out.emplace_back(std::string(prefix) + ".joint", &t.joint);
  };
  push_tables("rel_q", rel_q_tables);
  push_tables("rel_k", rel_k_tables);
  push_tables("rel_v", rel_v_tables);
  push("abs_pos", abs_pos);
  return out;
}

// ---- pooling attention ---------------------------------------------------------------

AttnOut pool_tokens(const Ctx& ctx, const Tensor& x, const Grid& grid,
                    const Grid& stride, PoolMode mode, int64_t kernel,
                    const Tensor* conv_kernel) {
  check(x.rank() == 3, "pool_tokens expects [B, L, C]");
  check(x.extent(1) == numel(Shape(grid.begin(), grid.end())),
        "grid " + shape_str(Shape(grid.begin(), grid.end())) +
            " inconsistent with token count " + std::to_string(x.extent(1)));
  const Grid pad(grid.size(), pad_of(kernel));
  const Grid kext(grid.size(), kernel);
  Grid out_grid = pooled_extents(grid, stride, kernel);
  Tensor out;
  if (mode == PoolMode::depthwise_conv) {
    check(conv_kernel != nullptr, "conv pooling requires a kernel");
    out = conv_depthwise(ctx, x, *conv_kernel, grid, stride, pad);
  } else {
    out = max_pool(ctx, x, grid, kext, stride, pad);
  }
  return {out, out_grid};
}

namespace {

struct PooledTriple {
  Tensor q, k, v;   // [h, L, d]
  Grid q_grid, kv_grid;
};

// Projections + pooling operators, shared by the global and per-window paths.
PooledTriple project_and_pool(const Ctx& ctx, const Tensor& x, const Grid& grid,
                              const AttentionParams& params, const AttentionSpec& spec) {
  const int64_t L = x.extent(0);
  const int64_t d_out = spec.d_out(), h = spec.heads, d = spec.head_dim;
  check(x.extent(1) == params.w_q.extent(0),
        "input width " + std::to_string(x.extent(1)) + " does not match W_Q rows " +
            std::to_string(params.w_q.extent(0)));
  auto project = [&](const Tensor& w, const Tensor& b) {
    Tensor t = add_rowwise(ctx, matmul(ctx, x, w), b);
    return permute(ctx, reshape(ctx, t, {L, h, d}), {1, 0, 2});
  };
  Tensor q = project(params.w_q, params.b_q);
  Tensor k = project(params.w_k, params.b_k);
  Tensor v = project(params.w_v, params.b_v);
  (void)d_out;

  const bool pools = spec.kind != AttnKind::full;
  const bool q_identity =
      !pools || (spec.q_pool_identity_at_stride1 && all_ones(spec.q_stride));
  PooledTriple out;
  if (q_identity) {
    out.q = q;
    out.q_grid = grid;
  } else {
    AttnOut p = pool_tokens(ctx, q, grid, spec.q_stride, spec.pool_mode, spec.pool_kernel,
                            params.pool_q_kernel.defined() ? &params.pool_q_kernel : nullptr);
    out.q = spec.pool_mode == PoolMode::depthwise_conv
                ? layer_norm(ctx, p.tokens, params.pool_q_gamma, params.pool_q_beta)
                : p.tokens;
    out.q_grid = p.grid;
  }
  if (!pools) {
    out.k = k;
    out.v = v;
    out.kv_grid = grid;
  } else {
    AttnOut pk = pool_tokens(ctx, k, grid, spec.kv_stride, spec.pool_mode, spec.pool_kernel,
                             params.pool_k_kernel.defined() ? &params.pool_k_kernel : nullptr);
    AttnOut pv = pool_tokens(ctx, v, grid, spec.kv_stride, spec.pool_mode, spec.pool_kernel,
                             params.pool_v_kernel.defined() ? &params.pool_v_kernel : nullptr);
    if (spec.pool_mode == PoolMode::depthwise_conv) {
      out.k = layer_norm(ctx, pk.tokens, params.pool_k_gamma, params.pool_k_beta);
      out.v = layer_norm(ctx, pv.tokens, params.pool_v_gamma, params.pool_v_beta);
    } else {
      out.k = pk.tokens;
      out.v = pv.tokens;
    }
    out.kv_grid = pk.grid;
  }
  return out;
}

}  // namespace

AttnOut pooling_attention(const Ctx& ctx, const Tensor& x, const Grid& grid,
                          const AttentionParams& params, const AttentionSpec& spec,
                          const Tensor* key_mask) {
  spec.validate(grid);
  check(x.rank() == 2 && x.extent(0) == numel(Shape(grid.begin(), grid.end())),
        "grid inconsistent with token count");
  const int64_t h = spec.heads, d = spec.head_dim, d_out = spec.d_out();

  PooledTriple t = project_and_pool(ctx, x, grid, params, spec);
  const int64_t Lq = t.q.extent(1), Lk = t.k.extent(1);

  Tensor scores = matmul(ctx, t.q, permute(ctx, t.k, {0, 2, 1}));

  std::vector<std::vector<int64_t>> cq, ck;
  const bool rel = spec.relpos_mode == RelPosMode::joint || spec.relpos_mode == RelPosMode::decomposed;
  if (rel) {
    cq = shared_scale_coords(t.q_grid, t.q_grid);
    ck = shared_scale_coords(t.kv_grid, t.q_grid);
  }
  if (rel && spec.rel_q)
    scores = add(ctx, scores, relpos_bias(ctx, t.q, params.rel_q_tables, cq, ck));
  if (rel && spec.rel_k)
    scores = add(ctx, scores, relpos_bias_keys(ctx, t.k, params.rel_k_tables, cq, ck,
                                               spec.rel_k_index_i));
  scores = scale(ctx, scores, 1.0 / std::sqrt(static_cast<double>(d)));
  if (key_mask) scores = add_rowwise(ctx, scores, *key_mask);

  Tensor attn = softmax_lastdim(ctx, scores);
  Tensor out3 = matmul(ctx, attn, t.v);
  if (rel && spec.rel_v)
    out3 = add(ctx, out3, relpos_values(ctx, attn, params.rel_v_tables, cq, ck));

  Tensor merged = reshape(ctx, permute(ctx, out3, {1, 0, 2}), {Lq, d_out});
  if (spec.residual_pooling) {
    Tensor qm = reshape(ctx, permute(ctx, t.q, {1, 0, 2}), {Lq, d_out});
    merged = add(ctx, merged, qm);
  }
  Tensor out = add_rowwise(ctx, matmul(ctx, merged, params.w_out), params.b_out);
  (void)h; (void)Lk;
  return {out, t.q_grid};
}

// ---- windows ---------------------------------------------------------------------

WindowInfo make_window_info(const Grid& grid, const Grid& window, const Grid& shift) {
  check(grid.size() == window.size(), "window rank mismatch");
  WindowInfo info;
  info.grid = grid;
  info.window = window;
  info.shift = shift.empty() ? Grid(grid.size(), 0) : shift;
  check(info.shift.size() == grid.size(), "shift rank mismatch");
  info.padded.resize(grid.size());
  Grid nwin(grid.size());
  for (size_t a = 0; a < grid.size(); ++a) {
    check(window[a] >= 1, "window extent 0 is an invalid spec");
    nwin[a] = (grid[a] + window[a] - 1) / window[a];
    info.padded[a] = nwin[a] * window[a];
  }
  info.num_windows = numel(Shape(nwin.begin(), nwin.end()));
  info.window_tokens = numel(Shape(window.begin(), window.end()));
  info.slot_src.assign(static_cast<size_t>(info.num_windows),
                       std::vector<int64_t>(static_cast<size_t>(info.window_tokens)));
  for (int64_t w = 0; w < info.num_windows; ++w) {
    const Grid wpos = unravel(w, nwin);
    for (int64_t s = 0; s < info.window_tokens; ++s) {
      const Grid spos = unravel(s, window);
      Grid cell(grid.size());
      bool pad = false;
      for (size_t a = 0; a < grid.size(); ++a) {
        cell[a] = wpos[a] * window[a] + spos[a];
        if (cell[a] >= grid[a]) pad = true;
      }
      if (pad) {
        info.slot_src[static_cast<size_t>(w)][static_cast<size_t>(s)] = -1;
      } else {
        Grid src(grid.size());
        for (size_t a = 0; a < grid.size(); ++a)
          src[a] = (cell[a] - info.shift[a] % grid[a] + grid[a]) % grid[a];
        info.slot_src[static_cast<size_t>(w)][static_cast<size_t>(s)] = ravel(src, grid);
      }
    }
  }
  return info;
}

std::vector<Tensor> window_partition(const Ctx& ctx, const Tensor& x,
                                     const WindowInfo& info) {
  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(info.num_windows));
  for (const auto& idx : info.slot_src) out.push_back(gather_rows(ctx, x, idx));
  return out;
}

Tensor window_merge(const Ctx& ctx, const std::vector<Tensor>& windows,
                    const WindowInfo& info) {
  check(static_cast<int64_t>(windows.size()) == info.num_windows, "window count mismatch");
  Tensor all = concat_rows(ctx, windows);
  const int64_t L = numel(Shape(info.grid.begin(), info.grid.end()));
  std::vector<int64_t> idx(static_cast<size_t>(L));
  Grid nwin(info.grid.size());
  for (size_t a = 0; a < info.grid.size(); ++a) nwin[a] = info.padded[a] / info.window[a];
  for (int64_t p = 0; p < L; ++p) {
    const Grid pos = unravel(p, info.grid);
    Grid cell(info.grid.size()), wpos(info.grid.size()), spos(info.grid.size());
    for (size_t a = 0; a < info.grid.size(); ++a) {
      cell[a] = (pos[a] + info.shift[a]) % info.grid[a];
      wpos[a] = cell[a] / info.window[a];
      spos[a] = cell[a] % info.window[a];
    }
    idx[static_cast<size_t>(p)] = ravel(wpos, nwin) * info.window_tokens + ravel(spos, info.window);
  }
  return gather_rows(ctx, all, idx);
}

AttnOut window_attention(const Ctx& ctx, const Tensor& x, const Grid& grid,
                         const AttentionParams& params, const AttentionSpec& spec) {
  spec.validate(grid);
  const size_t r = grid.size();
  Grid window(r), shift(r, 0);
  for (size_t a = 0; a < r; ++a) window[a] = std::min(spec.window[a], grid[a]);
  if (spec.kind == AttnKind::shifted_window)
    for (size_t a = 0; a < r; ++a) shift[a] = spec.shift[a] % window[a];
  WindowInfo info = make_window_info(grid, window, shift);

  const Grid pw = pooled_extents(window, spec.q_stride, spec.pool_kernel);
  const Grid pk = pooled_extents(window, spec.kv_stride, spec.pool_kernel);
  const int64_t Lk_win = numel(Shape(pk.begin(), pk.end()));
  const int64_t Lq_win = numel(Shape(pw.begin(), pw.end()));

  std::vector<Tensor> outs;
  Grid nwin(r);
  for (size_t a = 0; a < r; ++a) nwin[a] = info.padded[a] / window[a];
  for (int64_t w = 0; w < info.num_windows; ++w) {
    Tensor xw = gather_rows(ctx, x, info.slot_src[static_cast<size_t>(w)]);
    // Pooled key j is padding iff its stride-anchor slot is padding.
    Tensor mask({Lk_win});
    for (int64_t j = 0; j < Lk_win; ++j) {
      const Grid jp = unravel(j, pk);
      Grid anchor(r);
      for (size_t a = 0; a < r; ++a) anchor[a] = jp[a] * spec.kv_stride[a];
      if (info.slot_src[static_cast<size_t>(w)][static_cast<size_t>(ravel(anchor, window))] < 0)
        mask.at(j) = kMaskValue;
    }
    AttnOut o = pooling_attention(ctx, xw, window, params, spec, &mask);
    check(o.tokens.extent(0) == Lq_win, "pooled window length mismatch");
    outs.push_back(o.tokens);
  }
  Tensor all = concat_rows(ctx, outs);

  // Merge at pooled resolution: global pooled position -> (window, pooled slot).
  Grid target(r);
  for (size_t a = 0; a < r; ++a)
    target[a] = conv_out_extent(grid[a], spec.pool_kernel, spec.q_stride[a], pad_of(spec.pool_kernel));
  const int64_t Lt = numel(Shape(target.begin(), target.end()));
  std::vector<int64_t> midx(static_cast<size_t>(Lt));
  for (int64_t g = 0; g < Lt; ++g) {
    const Grid gp = unravel(g, target);
    Grid wpos(r), ppos(r);
    for (size_t a = 0; a < r; ++a) {
      const int64_t anchor = gp[a] * spec.q_stride[a];
      const int64_t cell = (anchor + shift[a]) % grid[a];
      wpos[a] = cell / window[a];
      ppos[a] = (cell % window[a]) / spec.q_stride[a];
    }
    midx[static_cast<size_t>(g)] = ravel(wpos, nwin) * Lq_win + ravel(ppos, pw);
  }
  return {gather_rows(ctx, all, midx), target};
}

AttnOut attention(const Ctx& ctx, const Tensor& x, const Grid& grid,
                  const AttentionParams& params, const AttentionSpec& spec) {
  Tensor input = x;
  if (spec.relpos_mode == RelPosMode::absolute_only)
    input = add(ctx, x, params.abs_pos);
  if (spec.windowed()) return window_attention(ctx, input, grid, params, spec);
  return pooling_attention(ctx, input, grid, params, spec);
}

AttnKind hwin_schedule(int stage_index, int block_index, int blocks_in_stage) {
  if (stage_index < 1 || stage_index > 4) throw std::invalid_argument("stage index must lie in 1..4");
  if (block_index < 0 || block_index >= blocks_in_stage)
    throw std::invalid_argument("block index out of range for stage");
  if (stage_index == 1) return AttnKind::pooling;
  return block_index == blocks_in_stage - 1 ? AttnKind::pooling
                                            : AttnKind::hybrid_window_member;
}

}  // namespace mvit
