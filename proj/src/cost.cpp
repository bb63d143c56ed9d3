#include "mvit/cost.hpp"

#include <algorithm>
#include <sstream>

namespace mvit {

using nlohmann::json;

namespace {

int64_t prod(const Grid& g) {
  int64_t n = 1;
  for (int64_t e : g) n *= e;
  return n;
}

int64_t ipow(int64_t b, size_t e) {
  int64_t r = 1;
  for (size_t i = 0; i < e; ++i) r *= b;
  return r;
}

Grid pooled(const Grid& g, const Grid& stride, int64_t k) {
  Grid out(g.size());
  for (size_t a = 0; a < g.size(); ++a)
    out[a] = conv_out_extent(g[a], k, stride[a], (k - 1) / 2);
  return out;
}

bool all_ones(const Grid& g) {
  return std::all_of(g.begin(), g.end(), [](int64_t v) { return v == 1; });
}

bool q_is_identity(const AttentionSpec& s) {
  const bool pools = s.kind != AttnKind::full;
  return !pools || (s.q_pool_identity_at_stride1 && all_ones(s.q_stride));
}

// Shared-scale table extents, matching make_attention_params.
Grid table_extents(const AttentionSpec& s, const Grid& grid) {
  const Grid site = s.windowed() ? s.window : grid;
  return q_is_identity(s) ? site : pooled(site, s.q_stride, s.pool_kernel);
}

// One attention site: whole grid for global kinds, one window otherwise.
void site_flops(const AttentionSpec& s, const Grid& site, int64_t d_in, bool masked,
                FlopCounter& fc) {
  const int64_t h = s.heads, d = s.head_dim, dout = s.d_out();
  const int64_t L = prod(site);
  const bool pools = s.kind != AttnKind::full;
  const Grid qg = q_is_identity(s) ? site : pooled(site, s.q_stride, s.pool_kernel);
  const Grid kg = pools ? pooled(site, s.kv_stride, s.pool_kernel) : site;
  const int64_t Lq = prod(qg), Lk = prod(kg);
  const int64_t ktaps = ipow(s.pool_kernel, site.size());

  fc.macs += 3 * L * d_in * dout;  // projections
  fc.pointwise += 3 * L * dout;    // projection biases
  auto pool_cost = [&](int64_t Lo) {
    if (s.pool_mode == PoolMode::depthwise_conv) {
      fc.macs += h * Lo * d * ktaps;
      fc.pointwise += 5 * h * Lo * d;  // post-pool norm
    } else {
      fc.pointwise += h * Lo * d * ktaps;
    }
  };
  if (!q_is_identity(s)) pool_cost(Lq);
  if (pools) {
    pool_cost(Lk);
    pool_cost(Lk);
  }

  fc.macs += h * Lq * Lk * d;  // scores
  const bool rel =
      s.relpos_mode == RelPosMode::joint || s.relpos_mode == RelPosMode::decomposed;
  const Grid ext = rel ? table_extents(s, site) : Grid{};
  auto bias_cost = [&](int64_t rows_side) {
    if (s.relpos_mode == RelPosMode::joint) {
      fc.macs += h * Lq * Lk * d;
    } else {
      for (int64_t S : ext) fc.macs += h * rows_side * (2 * S - 1) * d;
      fc.pointwise += h * Lq * Lk * static_cast<int64_t>(ext.size());
    }
    fc.pointwise += h * Lq * Lk;  // add onto scores
  };
  if (rel && s.rel_q) bias_cost(Lq);
  if (rel && s.rel_k) bias_cost(Lk);

  fc.pointwise += h * Lq * Lk;          // scale
  if (masked) fc.pointwise += h * Lq * Lk;
  fc.pointwise += 5 * h * Lq * Lk;      // softmax
  fc.macs += h * Lq * Lk * d;           // attn * V
  if (rel && s.rel_v) {
    if (s.relpos_mode == RelPosMode::joint) {
      fc.macs += h * Lq * Lk * d;
      fc.pointwise += h * Lq * d;  // add
    } else {
      for (int64_t S : ext) {
        fc.pointwise += h * Lq * Lk;           // scatter
        fc.macs += h * Lq * (2 * S - 1) * d;   // table contraction
        fc.pointwise += h * Lq * d;            // add
      }
    }
  }
  if (s.residual_pooling) fc.pointwise += Lq * dout;
  fc.macs += Lq * dout * dout;  // output projection
  fc.pointwise += Lq * dout;
}

// Clamped window and window count, matching window_attention.
void window_geometry(const AttentionSpec& s, const Grid& grid, Grid& window,
                     int64_t& num_windows) {
  window.resize(grid.size());
  num_windows = 1;
  for (size_t a = 0; a < grid.size(); ++a) {
    window[a] = std::min(s.window[a], grid[a]);
    num_windows *= (grid[a] + window[a] - 1) / window[a];
  }
}

}  // namespace

int64_t relpos_table_size(RelPosMode mode, const Grid& extents, int64_t d) {
  if (mode == RelPosMode::joint) {
    int64_t rows = 1;
    for (int64_t s : extents) rows *= 2 * s - 1;
    return rows * d;
  }
  if (mode == RelPosMode::decomposed) {
    int64_t rows = 0;
    for (int64_t s : extents) rows += 2 * s - 1;
    return rows * d;
  }
  return 0;
}

long long attention_memory_estimate(const AttentionSpec& spec, const Grid& grid) {
  const bool pools = spec.kind != AttnKind::full;
  Grid site = grid;
  int64_t sites = 1;
  if (spec.windowed()) window_geometry(spec, grid, site, sites);
  const Grid qg = q_is_identity(spec) ? site : pooled(site, spec.q_stride, spec.pool_kernel);
  const Grid kg = pools ? pooled(site, spec.kv_stride, spec.pool_kernel) : site;
  return 8LL * sites * spec.heads * prod(qg) * prod(kg);
}

void attention_flops(const AttentionSpec& spec, const Grid& grid, int64_t d_in,
                     FlopCounter& fc) {
  if (spec.relpos_mode == RelPosMode::absolute_only) fc.pointwise += prod(grid) * d_in;
  if (!spec.windowed()) {
    site_flops(spec, grid, d_in, false, fc);
    return;
  }
  Grid window;
  int64_t num_windows = 0;
  window_geometry(spec, grid, window, num_windows);
  for (int64_t w = 0; w < num_windows; ++w) site_flops(spec, window, d_in, true, fc);
}

void block_flops(const BlockPlan& bp, int64_t mlp_ratio, FlopCounter& fc) {
  const int64_t L = prod(bp.grid_in), Lo = prod(bp.grid_out);
  const int64_t hidden = mlp_ratio * bp.d_out;
  fc.pointwise += 5 * L * bp.d_in;  // pre-attention norm
  attention_flops(bp.attn, bp.grid_in, bp.d_in, fc);
  if (bp.skip_pool)
    fc.pointwise += Lo * bp.d_in * ipow(bp.attn.pool_kernel, bp.grid_in.size());
  if (bp.skip_proj) fc.macs += Lo * bp.d_in * bp.d_out;
  fc.pointwise += Lo * bp.d_out;      // residual add
  fc.pointwise += 5 * Lo * bp.d_out;  // pre-MLP norm
  fc.macs += Lo * bp.d_out * hidden;
  fc.pointwise += Lo * hidden;        // bias
  fc.pointwise += 8 * Lo * hidden;    // gelu
  fc.macs += Lo * hidden * bp.d_out;
  fc.pointwise += Lo * bp.d_out;      // bias
  fc.pointwise += Lo * bp.d_out;      // residual add
}

int64_t attention_params(const AttentionSpec& spec, const Grid& grid, int64_t d_in) {
  const int64_t d = spec.head_dim, dout = spec.d_out();
  int64_t n = 3 * (d_in * dout + dout) + dout * dout + dout;
  const bool pools = spec.kind != AttnKind::full;
  if (pools && spec.pool_mode == PoolMode::depthwise_conv) {
    const int64_t ktaps = ipow(spec.pool_kernel, grid.size());
    const int64_t kernels = q_is_identity(spec) ? 2 : 3;
    n += kernels * (d * ktaps + 2 * d);
  }
  if (spec.relpos_mode == RelPosMode::joint || spec.relpos_mode == RelPosMode::decomposed) {
    const int64_t rows = relpos_table_size(spec.relpos_mode, table_extents(spec, grid));
    const int64_t per_term = rows * d;
    if (spec.rel_q) n += per_term;
    if (spec.rel_k) n += per_term;
    if (spec.rel_v) n += per_term;
  }
  if (spec.relpos_mode == RelPosMode::absolute_only) n += prod(grid) * d_in;
  return n;
}

int64_t block_params(const BlockPlan& bp, int64_t mlp_ratio) {
  const int64_t hidden = mlp_ratio * bp.d_out;
  int64_t n = 2 * bp.d_in;  // pre-attention norm
  n += attention_params(bp.attn, bp.grid_in, bp.d_in);
  if (bp.skip_proj) n += bp.d_in * bp.d_out;
  n += 2 * bp.d_out;  // pre-MLP norm
  n += bp.d_out * hidden + hidden + hidden * bp.d_out + bp.d_out;
  return n;
}

CostReport count_cost(const ModelConfig& cfg) {
  const ModelPlan plan = plan_blocks(cfg);
  CostReport rep;
  rep.config = cfg.to_json();

  const int64_t L0 = prod(plan.stem_grid);
  const int64_t c0 = cfg.stages[0].channels;
  int64_t stem_taps = cfg.patch_kernel * cfg.patch_kernel;
  if (cfg.video()) stem_taps *= cfg.temporal_kernel;
  rep.stem_params = c0 * cfg.in_channels * stem_taps + c0;
  FlopCounter stem;
  stem.macs += L0 * c0 * cfg.in_channels * stem_taps;
  stem.pointwise += L0 * c0;  // bias
  if (cfg.relpos == RelPosMode::absolute_only) {
    rep.stem_params += L0 * c0;
    stem.pointwise += L0 * c0;  // table add
  }
  rep.stem_macs = stem.macs;
  rep.stem_flops = stem.flops();

  for (const BlockPlan& bp : plan.blocks) {
    BlockCost bc;
    bc.stage = bp.stage;
    bc.block = bp.block;
    bc.kind = to_string(bp.attn.kind);
    Grid site = bp.grid_in;
    int64_t sites = 1;
    if (bp.attn.windowed()) window_geometry(bp.attn, bp.grid_in, site, sites);
    const bool pools = bp.attn.kind != AttnKind::full;
    bc.l_q = prod(q_is_identity(bp.attn)
                      ? site
                      : pooled(site, bp.attn.q_stride, bp.attn.pool_kernel));
    bc.l_k = prod(pools ? pooled(site, bp.attn.kv_stride, bp.attn.pool_kernel) : site);
    bc.params = block_params(bp, cfg.mlp_ratio);
    FlopCounter fc;
    block_flops(bp, cfg.mlp_ratio, fc);
    bc.macs = fc.macs;
    bc.flops = fc.flops();
    bc.act_bytes = attention_memory_estimate(bp.attn, bp.grid_in);
    rep.blocks.push_back(bc);
  }

  const int64_t d_last = cfg.stages[3].channels;
  const int64_t L_last = prod(plan.stage_grids.back());
  rep.head_params = 2 * d_last + d_last * cfg.num_classes + cfg.num_classes;
  FlopCounter head;
  head.pointwise += 5 * L_last * d_last;  // final norm
  head.pointwise += L_last * d_last;      // token mean
  head.macs += d_last * cfg.num_classes;
  head.pointwise += cfg.num_classes;      // bias
  rep.head_macs = head.macs;
  rep.head_flops = head.flops();

  rep.total_params = rep.stem_params + rep.head_params;
  rep.total_macs = rep.stem_macs + rep.head_macs;
  rep.total_flops = rep.stem_flops + rep.head_flops;
  for (const BlockCost& bc : rep.blocks) {
    rep.total_params += bc.params;
    rep.total_macs += bc.macs;
    rep.total_flops += bc.flops;
    rep.total_act_bytes += bc.act_bytes;
  }
  return rep;
}

json CostReport::to_json() const {
  json blocks_j = json::array();
  for (const BlockCost& b : blocks)
    blocks_j.push_back({{"stage", b.stage},
                        {"block", b.block},
                        {"kind", b.kind},
                        {"l_q", b.l_q},
                        {"l_k", b.l_k},
                        {"params", b.params},
                        {"macs", b.macs},
                        {"flops", b.flops},
                        {"act_bytes", b.act_bytes}});
  return json{{"schema", "mvit-cost/1"},
              {"config", config},
              {"stem", {{"params", stem_params}, {"macs", stem_macs}, {"flops", stem_flops}}},
              {"head", {{"params", head_params}, {"macs", head_macs}, {"flops", head_flops}}},
              {"blocks", blocks_j},
              {"totals",
               {{"params", total_params},
                {"macs", total_macs},
                {"flops", total_flops},
                {"act_bytes", total_act_bytes}}}};
}

std::string CostReport::to_csv() const {
  std::ostringstream os;
  os << "section,stage,block,kind,l_q,l_k,params,macs,flops,act_bytes\n";
  os << "stem,,,,,," << stem_params << "," << stem_macs << "," << stem_flops << ",\n";
  for (const BlockCost& b : blocks)
    os << "block," << b.stage << "," << b.block << "," << b.kind << "," << b.l_q << ","
       << b.l_k << "," << b.params << "," << b.macs << "," << b.flops << ","
       << b.act_bytes << "\n";
  os << "head,,,,,," << head_params << "," << head_macs << "," << head_flops << ",\n";
  os << "total,,,,,," << total_params << "," << total_macs << "," << total_flops << ","
     << total_act_bytes << "\n";
  return os.str();
}

}  // namespace mvit
