#pragma once

// Multiscale transformer assembly: variant tables, stage/block planning,
// parameter construction, forward evaluation with feature-pyramid taps,
// positional-table interpolation, 2D->3D kernel inflation, and
// config/weight serialization.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mvit/attention.hpp"
#include "mvit/init.hpp"

namespace mvit {

struct StageSpec {
  int64_t channels = 0;
  int64_t heads = 0;
  int64_t blocks = 0;
};

struct ModelConfig {
  std::string variant = "T";      // T | S | B | L | H (or "custom")
  std::string task = "classify";  // classify | detect | video
  Grid input;                     // pixels: {H, W}, or {T, H, W} for video
  int64_t in_channels = 3;
  int64_t num_classes = 1000;
  std::vector<StageSpec> stages;  // four stages

  // Patchify stem; the temporal triple applies only when input has rank 3.
  int64_t patch_kernel = 7, patch_stride = 4, patch_pad = 3;
  int64_t temporal_kernel = 3, temporal_stride = 2, temporal_pad = 1;

  int64_t mlp_ratio = 4;
  RelPosMode relpos = RelPosMode::decomposed;
  bool rel_q = true, rel_k = false, rel_v = false;
  bool residual_pooling = true;
  PoolMode pool_mode = PoolMode::depthwise_conv;
  int64_t pool_kernel = 3;

  // Attention schedule: pooling | full | window | swin | hwin.
  std::string attn_mode = "pooling";
  // Per-stage spatial window edge for the window schedules.
  std::vector<int64_t> windows = {56, 28, 14, 7};
  // Spatial K/V pooling stride at stage 1; halves whenever Q pooling halves
  // the grid, so the K/V resolution tracks the query resolution.
  int64_t kv_stride_base = 4;

  bool video() const { return input.size() == 3; }
  nlohmann::json to_json() const;                       // schema mvit-config/1
  static ModelConfig from_json(const nlohmann::json& j);
};

// Canonical variants (Tiny .. Huge) for a task at a given input size.
ModelConfig make_variant(const std::string& variant, const std::string& task,
                         const Grid& input);

struct BlockPlan {
  int stage = 1;  // 1..4
  int block = 0;  // index within the stage
  int64_t d_in = 0, d_out = 0;
  Grid grid_in, grid_out;
  AttentionSpec attn;
  bool skip_pool = false;  // residual path max-pools when Q is strided
  bool skip_proj = false;  // residual path projects on channel expansion
};

struct ModelPlan {
  Grid stem_grid;                 // token grid after the stem
  std::vector<BlockPlan> blocks;
  std::vector<Grid> stage_grids;  // output grid of each stage
};

ModelPlan plan_blocks(const ModelConfig& cfg);

struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  AttentionParams attn;
  Tensor skip_proj;  // [D_in, D_out], bias-free
  Tensor ln2_gamma, ln2_beta;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct TraceEntry {
  std::string name;
  Shape shape;
  Grid grid;
};

struct ForwardResult {
  Tensor logits;                   // [num_classes]
  std::vector<Tensor> pyramid;     // per-stage features [L, C]
  std::vector<Grid> pyramid_grids;
  std::vector<TraceEntry> trace;
};

class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const ModelPlan& plan() const { return plan_; }

  // Stable-order registry of every learnable tensor.
  std::vector<std::pair<std::string, Tensor*>> named_params();
  int64_t num_params();

  // x: [prod(input), in_channels] pixel tokens on the configured input grid.
  ForwardResult forward(const Ctx& ctx, const Tensor& x, bool want_trace = false);

  // Weights as a raw little-endian float64 blob plus a JSON manifest
  // (schema mvit-weights/1) holding the config and tensor layout.
  void save_weights(const std::string& blob_path, const std::string& manifest_path);
  static Model load_weights(const std::string& blob_path, const std::string& manifest_path);

  Tensor stem_weight, stem_bias;
  Tensor abs_pos;  // [L_stem, C0] when relpos == absolute_only
  std::vector<BlockParams> blocks;
  Tensor head_gamma, head_beta;  // final norm
  Tensor head_weight, head_bias;

 private:
  ModelConfig cfg_;
  ModelPlan plan_;
};

// Resize relative-offset tables to new shared extents by (separable) linear
// interpolation over the offset axis; extents of size one broadcast.
RelPosTables interpolate_relpos(const RelPosTables& tables, const Grid& new_extents);

// Inflate an image model into a video model: temporal kernel slices are
// zero except the center slice, which carries the 2D weights; temporal
// relative-position tables start at zero. The video config must agree with
// the source on spatial geometry and stage layout.
Model inflate_2d_to_3d(Model& image_model, const ModelConfig& video_cfg);

}  // namespace mvit
