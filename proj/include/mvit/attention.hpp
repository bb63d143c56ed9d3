#pragma once

// Attention mechanisms: pooling attention with residual pooling and relative
// positional bias (decomposed or joint, with optional rel_q/rel_k/rel_v
// terms), plus full, fixed-window, shifted-window and hybrid-window variants.

#include <optional>
#include <vector>

#include "mvit/tensor.hpp"

namespace mvit {

using Grid = std::vector<int64_t>;

enum class AttnKind { full, fixed_window, shifted_window, hybrid_window_member, pooling };
enum class PoolMode { depthwise_conv, max };
enum class RelPosMode { none, absolute_only, joint, decomposed };

const char* to_string(AttnKind k);

struct AttentionSpec {
  AttnKind kind = AttnKind::full;
  int64_t heads = 1;
  int64_t head_dim = 8;
  Grid q_stride;    // per grid axis, >= 1
  Grid kv_stride;   // per grid axis, >= 1
  PoolMode pool_mode = PoolMode::depthwise_conv;
  int64_t pool_kernel = 3;  // per pooled axis; padding (k-1)/2
  RelPosMode relpos_mode = RelPosMode::none;
  bool rel_q = false, rel_k = false, rel_v = false;
  bool residual_pooling = false;
  Grid window;  // window kinds only
  Grid shift;   // shifted kind only
  // The appendix formula indexes K by i; default follows the E_ij structure
  // and indexes by j.
  bool rel_k_index_i = false;
  // Skip the query pooling operator entirely when all q strides are 1.
  bool q_pool_identity_at_stride1 = false;

  int64_t d_out() const { return heads * head_dim; }
  bool windowed() const {
    return kind == AttnKind::fixed_window || kind == AttnKind::shifted_window ||
           kind == AttnKind::hybrid_window_member;
  }
  void validate(const Grid& grid) const;
};

// Learned relative-offset tables on a shared coordinate scale.
// Decomposed: one [2*S_a - 1, d] table per axis, summed at lookup (lookups
// depend only on coordinate differences). Joint: [prod(2*S_a - 1), d].
struct RelPosTables {
  RelPosMode mode = RelPosMode::decomposed;
  Grid extents;                     // shared-scale extent S_a per axis
  std::vector<Tensor> axis_tables;  // decomposed
  Tensor joint;

  int64_t rows() const;
  static RelPosTables zeros(RelPosMode mode, const Grid& extents, int64_t d);
  std::vector<Tensor*> tensors();
};

// Shared-scale coordinates: token i of `grid` gets, per axis, the coordinate
// floor(pos_a * S_a / grid_a). Identity when grid == shared extents.
std::vector<std::vector<int64_t>> shared_scale_coords(const Grid& grid, const Grid& shared);

struct AttentionParams {
  Tensor w_q, w_k, w_v;  // [D_in, D_out]
  Tensor b_q, b_k, b_v;  // [D_out]
  Tensor w_out, b_out;   // [D_out, D_out], [D_out]
  // Depthwise pooling kernels [d, k, ..] and post-pool norm affines [d]
  // (conv mode only).
  Tensor pool_q_kernel, pool_k_kernel, pool_v_kernel;
  Tensor pool_q_gamma, pool_q_beta;
  Tensor pool_k_gamma, pool_k_beta;
  Tensor pool_v_gamma, pool_v_beta;
  RelPosTables rel_q_tables, rel_k_tables, rel_v_tables;
  Tensor abs_pos;  // [L, D_in], absolute_only mode

  std::vector<std::pair<std::string, Tensor*>> named();
};

class Rng;  // init.hpp

// Allocate (and initialize) parameters for a spec applied to `grid` tokens
// of width d_in. Shared-scale extents follow the query grid of the attention
// site: the whole grid for global kinds, the window for windowed kinds.
AttentionParams make_attention_params(const AttentionSpec& spec, int64_t d_in,
                                      const Grid& grid, Rng& rng);

struct AttnOut {
  Tensor tokens;  // [L_out, D_out]
  Grid grid;
};

// Pooling operator 𝒫: [B, L, C] tokens on `grid` -> pooled tokens.
// conv mode requires the depthwise kernel; output extents are
// conv_out_extent(grid, k, stride, (k-1)/2) = ceil(grid/stride) for k = 3.
AttnOut pool_tokens(const Ctx& ctx, const Tensor& x, const Grid& grid,
                    const Grid& stride, PoolMode mode, int64_t kernel,
                    const Tensor* conv_kernel);

// Relative positional bias E[h,i,j] = Q[h,i] . R_{p(i),p(j)}; decomposed mode
// contracts per axis and never materializes the joint table.
Tensor relpos_bias(const Ctx& ctx, const Tensor& q, const RelPosTables& tables,
                   const std::vector<std::vector<int64_t>>& coords_q,
                   const std::vector<std::vector<int64_t>>& coords_k);

// rel_k bias: E[h,i,j] = R^k_{p(i),p(j)} . K[h,j] (or K[h,i] with the
// index_i flag, which requires L_q == L_k).
Tensor relpos_bias_keys(const Ctx& ctx, const Tensor& k, const RelPosTables& tables,
                        const std::vector<std::vector<int64_t>>& coords_q,
                        const std::vector<std::vector<int64_t>>& coords_k,
                        bool index_i);

// rel_v contribution: out[h,i] = sum_j A[h,i,j] * R^v_{p(i),p(j)}.
Tensor relpos_values(const Ctx& ctx, const Tensor& attn, const RelPosTables& tables,
                     const std::vector<std::vector<int64_t>>& coords_q,
                     const std::vector<std::vector<int64_t>>& coords_k);

// Pooling attention (Q = 𝒫_Q(X W_Q) etc.), optional additive key mask.
// Also serves full attention (all strides 1). Output length equals the
// pooled query length.
AttnOut pooling_attention(const Ctx& ctx, const Tensor& x, const Grid& grid,
                          const AttentionParams& params, const AttentionSpec& spec,
                          const Tensor* key_mask = nullptr);

// ---- windows ----------------------------------------------------------------

struct WindowInfo {
  Grid grid, window, shift;
  Grid padded;                          // per-axis padded extents
  int64_t num_windows = 0;
  int64_t window_tokens = 0;
  // Per window: source token index per slot, -1 for zero padding.
  std::vector<std::vector<int64_t>> slot_src;
};

WindowInfo make_window_info(const Grid& grid, const Grid& window, const Grid& shift);

// Splits tokens into windows; padded slots are zero-filled.
std::vector<Tensor> window_partition(const Ctx& ctx, const Tensor& x,
                                     const WindowInfo& info);
// Inverse of window_partition; restores the original order bit-exactly.
Tensor window_merge(const Ctx& ctx, const std::vector<Tensor>& windows,
                    const WindowInfo& info);

// Windowed attention: pooling-attention computed independently per window,
// padded positions masked out of the softmax. Grid is preserved when all
// q strides are 1; otherwise windows merge at pooled resolution (requires
// window % q_stride == 0 per axis).
AttnOut window_attention(const Ctx& ctx, const Tensor& x, const Grid& grid,
                         const AttentionParams& params, const AttentionSpec& spec);

// Dispatch on spec.kind.
AttnOut attention(const Ctx& ctx, const Tensor& x, const Grid& grid,
                  const AttentionParams& params, const AttentionSpec& spec);

// Hwin rule: stages 2-4 use windowed attention in all but the stage's last
// block, which stays global so the pyramid taps carry cross-window
// information. Stage 1 stays on the model's pooling/global attention.
AttnKind hwin_schedule(int stage_index, int block_index, int blocks_in_stage);

// Independent naive evaluator of the same specification: direct O(L^2) loops
// and explicit per-pair table lookups, sharing no code with the fast paths.
AttnOut attention_oracle(const Tensor& x, const Grid& grid,
                         const AttentionParams& params, const AttentionSpec& spec);

// Row-gather utility op used by the window machinery (idx -1 reads zero).
Tensor gather_rows(const Ctx& ctx, const Tensor& x, const std::vector<int64_t>& idx);
Tensor concat_rows(const Ctx& ctx, const std::vector<Tensor>& parts);

}  // namespace mvit
