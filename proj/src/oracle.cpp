#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "mvit/attention.hpp"

// Naive reference evaluator for the attention variants. Everything here is
// written as direct loops over explicit coordinates with per-pair table
// lookups; it intentionally shares no code with the instrumented fast paths
// so the two can be checked against each other.

namespace mvit {

namespace {

using Vec = std::vector<double>;

struct NGrid {
  Grid ext;
  int64_t count() const {
    int64_t n = 1;
    for (int64_t e : ext) n *= e;
    return n;
  }
  Grid pos(int64_t idx) const {
    Grid p(ext.size());
    for (size_t a = ext.size(); a-- > 0;) {
      p[a] = idx % ext[a];
      idx /= ext[a];
    }
    return p;
  }
  int64_t idx(const Grid& p) const {
    int64_t i = 0;
    for (size_t a = 0; a < ext.size(); ++a) i = i * ext[a] + p[a];
    return i;
  }
};

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

Grid pooled_grid(const Grid& g, const Grid& stride, int64_t k) {
  Grid out(g.size());
  const int64_t pad = (k - 1) / 2;
  for (size_t a = 0; a < g.size(); ++a)
    out[a] = (g[a] + 2 * pad - k) / stride[a] + 1;
  return out;
}

// Depthwise pool of per-head channels laid out as rows[L] x cols[d].
// mode conv: kernel[c * k^r + tap]; mode max over in-bounds taps.
std::vector<Vec> pool_naive(const std::vector<Vec>& x, const Grid& grid,
                            const Grid& stride, int64_t k, PoolMode mode,
                            const Tensor* kernel, int64_t d) {
  const int64_t pad = (k - 1) / 2;
  NGrid in{grid};
  NGrid out{pooled_grid(grid, stride, k)};
  NGrid taps{Grid(grid.size(), k)};
  std::vector<Vec> y(static_cast<size_t>(out.count()), Vec(static_cast<size_t>(d), 0.0));
  for (int64_t o = 0; o < out.count(); ++o) {
    const Grid op = out.pos(o);
    for (int64_t c = 0; c < d; ++c) {
      double acc = 0.0;
      double best = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (int64_t t = 0; t < taps.count(); ++t) {
        const Grid tp = taps.pos(t);
        Grid sp(grid.size());
        bool inside = true;
        for (size_t a = 0; a < grid.size(); ++a) {
          sp[a] = op[a] * stride[a] - pad + tp[a];
          if (sp[a] < 0 || sp[a] >= grid[a]) inside = false;
        }
        if (mode == PoolMode::depthwise_conv) {
          const double w = kernel->at(c * taps.count() + t);
          acc += w * (inside ? x[static_cast<size_t>(in.idx(sp))][static_cast<size_t>(c)] : 0.0);
        } else if (inside) {
          best = std::max(best, x[static_cast<size_t>(in.idx(sp))][static_cast<size_t>(c)]);
          any = true;
        }
      }
      y[static_cast<size_t>(o)][static_cast<size_t>(c)] =
          mode == PoolMode::depthwise_conv ? acc : (any ? best : 0.0);
    }
  }
  return y;
}

void layer_norm_naive(std::vector<Vec>& x, const Tensor& gamma, const Tensor& beta) {
  const int64_t d = gamma.extent(0);
  for (Vec& row : x) {
    double m = 0;
    for (int64_t c = 0; c < d; ++c) m += row[static_cast<size_t>(c)];
    m /= static_cast<double>(d);
    double v = 0;
    for (int64_t c = 0; c < d; ++c) {
      const double dd = row[static_cast<size_t>(c)] - m;
      v += dd * dd;
    }
    v /= static_cast<double>(d);
    const double istd = 1.0 / std::sqrt(v + 1e-6);
    for (int64_t c = 0; c < d; ++c)
      row[static_cast<size_t>(c)] =
          (row[static_cast<size_t>(c)] - m) * istd * gamma.at(c) + beta.at(c);
  }
}

// Per-axis shared-scale coordinates of every cell of `g`, scaled onto `s`.
std::vector<Grid> scaled_coords(const Grid& g, const Grid& s) {
  NGrid ng{g};
  std::vector<Grid> out(static_cast<size_t>(ng.count()));
  for (int64_t i = 0; i < ng.count(); ++i) {
    Grid p = ng.pos(i);
    for (size_t a = 0; a < g.size(); ++a) p[a] = p[a] * s[a] / g[a];
    out[static_cast<size_t>(i)] = p;
  }
  return out;
}

double table_dot(const RelPosTables& t, const Grid& ci, const Grid& cj, const Vec& vec) {
  const int64_t d = static_cast<int64_t>(vec.size());
  if (t.mode == RelPosMode::joint) {
    int64_t row = 0;
    for (size_t a = 0; a < t.extents.size(); ++a)
      row = row * (2 * t.extents[a] - 1) + (ci[a] - cj[a] + t.extents[a] - 1);
    double acc = 0;
    for (int64_t c = 0; c < d; ++c) acc += t.joint.at(row * d + c) * vec[static_cast<size_t>(c)];
    return acc;
  }
  double acc = 0;
  for (size_t a = 0; a < t.extents.size(); ++a) {
    const int64_t row = ci[a] - cj[a] + t.extents[a] - 1;
    for (int64_t c = 0; c < d; ++c)
      acc += t.axis_tables[a].at(row * d + c) * vec[static_cast<size_t>(c)];
  }
  return acc;
}

void table_row_sum(const RelPosTables& t, const Grid& ci, const Grid& cj,
                   double weight, Vec& into) {
  const int64_t d = static_cast<int64_t>(into.size());
  if (t.mode == RelPosMode::joint) {
    int64_t row = 0;
    for (size_t a = 0; a < t.extents.size(); ++a)
      row = row * (2 * t.extents[a] - 1) + (ci[a] - cj[a] + t.extents[a] - 1);
    for (int64_t c = 0; c < d; ++c) into[static_cast<size_t>(c)] += weight * t.joint.at(row * d + c);
    return;
  }
  for (size_t a = 0; a < t.extents.size(); ++a) {
    const int64_t row = ci[a] - cj[a] + t.extents[a] - 1;
    for (int64_t c = 0; c < d; ++c)
      into[static_cast<size_t>(c)] += weight * t.axis_tables[a].at(row * d + c);
  }
}

// One attention site (the whole grid for global kinds, one window for the
// windowed kinds). `key_pad` flags pooled keys whose anchor slot is padding.
std::vector<Vec> site_attention(const std::vector<Vec>& x, const Grid& grid,
                                const AttentionParams& p, const AttentionSpec& spec,
                                const std::vector<bool>* key_pad, Grid* q_grid_out) {
  const int64_t h = spec.heads, d = spec.head_dim, dout = spec.d_out();
  const int64_t din = p.w_q.extent(0);
  const int64_t L = static_cast<int64_t>(x.size());

  auto project = [&](const Tensor& w, const Tensor& b, int64_t head) {
    std::vector<Vec> out(static_cast<size_t>(L), Vec(static_cast<size_t>(d), 0.0));
    for (int64_t i = 0; i < L; ++i)
      for (int64_t c = 0; c < d; ++c) {
        double acc = b.at(head * d + c);
        for (int64_t e = 0; e < din; ++e)
          acc += x[static_cast<size_t>(i)][static_cast<size_t>(e)] * w.at(e * dout + head * d + c);
        out[static_cast<size_t>(i)][static_cast<size_t>(c)] = acc;
      }
    return out;
  };

  const bool pools = spec.kind != AttnKind::full;
  bool q_identity = !pools;
  if (pools && spec.q_pool_identity_at_stride1) {
    q_identity = true;
    for (int64_t s : spec.q_stride) q_identity = q_identity && s == 1;
  }

  const Grid qg = q_identity ? grid : pooled_grid(grid, spec.q_stride, spec.pool_kernel);
  const Grid kg = pools ? pooled_grid(grid, spec.kv_stride, spec.pool_kernel) : grid;
  *q_grid_out = qg;
  const int64_t Lq = NGrid{qg}.count(), Lk = NGrid{kg}.count();

  const bool rel =
      spec.relpos_mode == RelPosMode::joint || spec.relpos_mode == RelPosMode::decomposed;
  const std::vector<Grid> cq = rel ? scaled_coords(qg, qg) : std::vector<Grid>{};
  const std::vector<Grid> ck = rel ? scaled_coords(kg, qg) : std::vector<Grid>{};

  std::vector<Vec> merged(static_cast<size_t>(Lq), Vec(static_cast<size_t>(dout), 0.0));
  for (int64_t head = 0; head < h; ++head) {
    std::vector<Vec> q = project(p.w_q, p.b_q, head);
    std::vector<Vec> k = project(p.w_k, p.b_k, head);
    std::vector<Vec> v = project(p.w_v, p.b_v, head);
    if (!q_identity) {
      q = pool_naive(q, grid, spec.q_stride, spec.pool_kernel, spec.pool_mode,
                     p.pool_q_kernel.defined() ? &p.pool_q_kernel : nullptr, d);
      if (spec.pool_mode == PoolMode::depthwise_conv)
        layer_norm_naive(q, p.pool_q_gamma, p.pool_q_beta);
    }
    if (pools) {
      k = pool_naive(k, grid, spec.kv_stride, spec.pool_kernel, spec.pool_mode,
                     p.pool_k_kernel.defined() ? &p.pool_k_kernel : nullptr, d);
      v = pool_naive(v, grid, spec.kv_stride, spec.pool_kernel, spec.pool_mode,
                     p.pool_v_kernel.defined() ? &p.pool_v_kernel : nullptr, d);
      if (spec.pool_mode == PoolMode::depthwise_conv) {
        layer_norm_naive(k, p.pool_k_gamma, p.pool_k_beta);
        layer_norm_naive(v, p.pool_v_gamma, p.pool_v_beta);
      }
    }

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Vec> attn(static_cast<size_t>(Lq), Vec(static_cast<size_t>(Lk), 0.0));
    for (int64_t i = 0; i < Lq; ++i) {
      Vec& row = attn[static_cast<size_t>(i)];
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < Lk; ++j) {
        double s = 0;
        for (int64_t c = 0; c < d; ++c)
          s += q[static_cast<size_t>(i)][static_cast<size_t>(c)] *
               k[static_cast<size_t>(j)][static_cast<size_t>(c)];
        if (rel && spec.rel_q)
          s += table_dot(p.rel_q_tables, cq[static_cast<size_t>(i)],
                         ck[static_cast<size_t>(j)], q[static_cast<size_t>(i)]);
        if (rel && spec.rel_k) {
          const Vec& kv = spec.rel_k_index_i ? k[static_cast<size_t>(i)] : k[static_cast<size_t>(j)];
          s += table_dot(p.rel_k_tables, cq[static_cast<size_t>(i)],
                         ck[static_cast<size_t>(j)], kv);
        }
        s *= inv_sqrt_d;
        if (key_pad && (*key_pad)[static_cast<size_t>(j)]) s += -1e30;
        row[static_cast<size_t>(j)] = s;
        mx = std::max(mx, s);
      }
      double z = 0;
      for (int64_t j = 0; j < Lk; ++j) {
        row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - mx);
        z += row[static_cast<size_t>(j)];
      }
      for (int64_t j = 0; j < Lk; ++j) row[static_cast<size_t>(j)] /= z;
    }

    for (int64_t i = 0; i < Lq; ++i) {
      Vec out(static_cast<size_t>(d), 0.0);
      for (int64_t j = 0; j < Lk; ++j) {
        const double a = attn[static_cast<size_t>(i)][static_cast<size_t>(j)];
        for (int64_t c = 0; c < d; ++c)
          out[static_cast<size_t>(c)] += a * v[static_cast<size_t>(j)][static_cast<size_t>(c)];
        if (rel && spec.rel_v)
          table_row_sum(p.rel_v_tables, cq[static_cast<size_t>(i)],
                        ck[static_cast<size_t>(j)], a, out);
      }
      if (spec.residual_pooling)
        for (int64_t c = 0; c < d; ++c)
          out[static_cast<size_t>(c)] += q[static_cast<size_t>(i)][static_cast<size_t>(c)];
      for (int64_t c = 0; c < d; ++c)
        merged[static_cast<size_t>(i)][static_cast<size_t>(head * d + c)] = out[static_cast<size_t>(c)];
    }
  }

  std::vector<Vec> y(static_cast<size_t>(Lq), Vec(static_cast<size_t>(dout), 0.0));
  for (int64_t i = 0; i < Lq; ++i)
    for (int64_t o = 0; o < dout; ++o) {
      double acc = p.b_out.at(o);
      for (int64_t e = 0; e < dout; ++e)
        acc += merged[static_cast<size_t>(i)][static_cast<size_t>(e)] * p.w_out.at(e * dout + o);
      y[static_cast<size_t>(i)][static_cast<size_t>(o)] = acc;
    }
  return y;
}

}  // namespace

AttnOut attention_oracle(const Tensor& x, const Grid& grid,
                         const AttentionParams& params, const AttentionSpec& spec) {
  spec.validate(grid);
  const size_t r = grid.size();
  const int64_t din = x.extent(1);
  NGrid g{grid};
  std::vector<Vec> tokens(static_cast<size_t>(g.count()), Vec(static_cast<size_t>(din), 0.0));
  for (int64_t i = 0; i < g.count(); ++i)
    for (int64_t c = 0; c < din; ++c) {
      double v = x.at(i * din + c);
      if (spec.relpos_mode == RelPosMode::absolute_only) v += params.abs_pos.at(i * din + c);
      tokens[static_cast<size_t>(i)][static_cast<size_t>(c)] = v;
    }

  auto to_tensor = [&](const std::vector<Vec>& rows) {
    const int64_t c = static_cast<int64_t>(rows.front().size());
    Tensor t({static_cast<int64_t>(rows.size()), c});
    for (size_t i = 0; i < rows.size(); ++i)
      for (int64_t j = 0; j < c; ++j) t.at(static_cast<int64_t>(i) * c + j) = rows[i][static_cast<size_t>(j)];
    return t;
  };

  if (!spec.windowed()) {
    Grid qg;
    std::vector<Vec> y = site_attention(tokens, grid, params, spec, nullptr, &qg);
    return {to_tensor(y), qg};
  }

  Grid window(r), shift(r, 0);
  for (size_t a = 0; a < r; ++a) window[a] = std::min(spec.window[a], grid[a]);
  if (spec.kind == AttnKind::shifted_window)
    for (size_t a = 0; a < r; ++a) shift[a] = spec.shift[a] % window[a];
  Grid nwin(r);
  for (size_t a = 0; a < r; ++a) nwin[a] = ceil_div(grid[a], window[a]);
  NGrid gw{nwin}, gs{window};

  const Grid pkv = pooled_grid(window, spec.kv_stride, spec.pool_kernel);
  NGrid gpk{pkv};

  // Output at pooled query resolution of the whole grid.
  Grid target(r);
  for (size_t a = 0; a < r; ++a) target[a] = ceil_div(grid[a], spec.q_stride[a]);
  NGrid gt{target};
  std::vector<Vec> result(static_cast<size_t>(gt.count()));

  for (int64_t w = 0; w < gw.count(); ++w) {
    const Grid wp = gw.pos(w);
    std::vector<Vec> xw(static_cast<size_t>(gs.count()), Vec(static_cast<size_t>(din), 0.0));
    std::vector<bool> slot_pad(static_cast<size_t>(gs.count()), false);
    for (int64_t s = 0; s < gs.count(); ++s) {
      const Grid sp = gs.pos(s);
      Grid cell(r), src(r);
      bool pad = false;
      for (size_t a = 0; a < r; ++a) {
        cell[a] = wp[a] * window[a] + sp[a];
        if (cell[a] >= grid[a]) pad = true;
        src[a] = ((cell[a] - shift[a]) % grid[a] + grid[a]) % grid[a];
      }
      slot_pad[static_cast<size_t>(s)] = pad;
      if (!pad) xw[static_cast<size_t>(s)] = tokens[static_cast<size_t>(g.idx(src))];
    }
    std::vector<bool> key_pad(static_cast<size_t>(gpk.count()), false);
    for (int64_t j = 0; j < gpk.count(); ++j) {
      Grid anchor = gpk.pos(j);
      for (size_t a = 0; a < r; ++a) anchor[a] *= spec.kv_stride[a];
      key_pad[static_cast<size_t>(j)] = slot_pad[static_cast<size_t>(gs.idx(anchor))];
    }
    Grid qg;
    std::vector<Vec> y = site_attention(xw, window, params, spec, &key_pad, &qg);
    NGrid gq{qg};
    // Scatter pooled window outputs back to their global pooled positions.
    for (int64_t i = 0; i < gq.count(); ++i) {
      const Grid ip = gq.pos(i);
      Grid tp(r);
      bool keep = true;
      for (size_t a = 0; a < r; ++a) {
        const int64_t cell = wp[a] * window[a] + ip[a] * spec.q_stride[a];
        const int64_t orig = ((cell - shift[a]) % grid[a] + grid[a]) % grid[a];
        if (cell >= grid[a]) keep = false;
        if (orig % spec.q_stride[a] != 0) keep = false;
        tp[a] = orig / spec.q_stride[a];
      }
      if (keep) result[static_cast<size_t>(gt.idx(tp))] = y[static_cast<size_t>(i)];
    }
  }
  for (const Vec& v : result)
    if (v.empty()) throw std::logic_error("oracle window merge left a hole");
  return {to_tensor(result), target};
}

}  // namespace mvit
