#include "mvit/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mvit {

using nlohmann::json;

namespace {

constexpr const char* kConfigSchema = "mvit-config/1";
constexpr const char* kWeightsSchema = "mvit-weights/1";

const char* relpos_name(RelPosMode m) {
  switch (m) {
    case RelPosMode::none: return "none";
    case RelPosMode::absolute_only: return "abs";
    case RelPosMode::joint: return "joint";
    case RelPosMode::decomposed: return "decomposed";
  }
  return "?";
}

RelPosMode relpos_from(const std::string& s) {
  if (s == "none") return RelPosMode::none;
  if (s == "abs") return RelPosMode::absolute_only;
  if (s == "joint") return RelPosMode::joint;
  if (s == "decomposed") return RelPosMode::decomposed;
  throw std::invalid_argument("unknown relpos mode: " + s);
}

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

}  // namespace

json ModelConfig::to_json() const {
  json stages_j = json::array();
  for (const StageSpec& s : stages)
    stages_j.push_back({{"channels", s.channels}, {"heads", s.heads}, {"blocks", s.blocks}});
  return json{
      {"schema", kConfigSchema},
      {"variant", variant},
      {"task", task},
      {"input", input},
      {"in_channels", in_channels},
      {"num_classes", num_classes},
      {"stages", stages_j},
      {"patch", {{"kernel", patch_kernel}, {"stride", patch_stride}, {"pad", patch_pad}}},
      {"temporal",
       {{"kernel", temporal_kernel}, {"stride", temporal_stride}, {"pad", temporal_pad}}},
      {"mlp_ratio", mlp_ratio},
      {"relpos", relpos_name(relpos)},
      {"rel_q", rel_q},
      {"rel_k", rel_k},
      {"rel_v", rel_v},
      {"residual_pooling", residual_pooling},
      {"pool_mode", pool_mode == PoolMode::depthwise_conv ? "conv" : "max"},
      {"pool_kernel", pool_kernel},
      {"attn_mode", attn_mode},
      {"windows", windows},
      {"kv_stride_base", kv_stride_base},
  };
}

ModelConfig ModelConfig::from_json(const json& j) {
  if (j.value("schema", "") != kConfigSchema)
    throw std::invalid_argument("unsupported config schema: " + j.value("schema", "(missing)"));
  ModelConfig c;
  c.variant = j.at("variant").get<std::string>();
  c.task = j.at("task").get<std::string>();
  c.input = j.at("input").get<Grid>();
  c.in_channels = j.at("in_channels").get<int64_t>();
  c.num_classes = j.at("num_classes").get<int64_t>();
  c.stages.clear();
  for (const json& s : j.at("stages"))
    c.stages.push_back({s.at("channels").get<int64_t>(), s.at("heads").get<int64_t>(),
                        s.at("blocks").get<int64_t>()});
  c.patch_kernel = j.at("patch").at("kernel").get<int64_t>();
  c.patch_stride = j.at("patch").at("stride").get<int64_t>();
  c.patch_pad = j.at("patch").at("pad").get<int64_t>();
  c.temporal_kernel = j.at("temporal").at("kernel").get<int64_t>();
  c.temporal_stride = j.at("temporal").at("stride").get<int64_t>();
  c.temporal_pad = j.at("temporal").at("pad").get<int64_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<int64_t>();
  c.relpos = relpos_from(j.at("relpos").get<std::string>());
  c.rel_q = j.at("rel_q").get<bool>();
  c.rel_k = j.at("rel_k").get<bool>();
  c.rel_v = j.at("rel_v").get<bool>();
  c.residual_pooling = j.at("residual_pooling").get<bool>();
  c.pool_mode = j.at("pool_mode").get<std::string>() == "max" ? PoolMode::max
                                                              : PoolMode::depthwise_conv;
  c.pool_kernel = j.at("pool_kernel").get<int64_t>();
  c.attn_mode = j.at("attn_mode").get<std::string>();
  c.windows = j.at("windows").get<std::vector<int64_t>>();
  c.kv_stride_base = j.at("kv_stride_base").get<int64_t>();
  return c;
}

ModelConfig make_variant(const std::string& variant, const std::string& task,
                         const Grid& input) {
  ModelConfig c;
  c.variant = variant;
  c.task = task;
  c.input = input;
  if (variant == "T") {
    c.stages = {{96, 1, 1}, {192, 2, 2}, {384, 4, 5}, {768, 8, 2}};
  } else if (variant == "S") {
    c.stages = {{96, 1, 1}, {192, 2, 2}, {384, 4, 11}, {768, 8, 2}};
  } else if (variant == "B") {
    c.stages = {{96, 1, 2}, {192, 2, 3}, {384, 4, 16}, {768, 8, 3}};
  } else if (variant == "L") {
    c.stages = {{144, 2, 2}, {288, 4, 6}, {576, 8, 36}, {1152, 16, 4}};
  } else if (variant == "H") {
    c.stages = {{192, 3, 4}, {384, 6, 8}, {768, 12, 60}, {1536, 24, 8}};
  } else {
    throw std::invalid_argument("unknown variant: " + variant);
  }
  if (task == "classify") {
    c.num_classes = 1000;
  } else if (task == "detect") {
    c.num_classes = 80;
    c.attn_mode = "hwin";
  } else if (task == "video") {
    c.num_classes = 400;
    if (input.size() != 3)
      throw std::invalid_argument("video task needs a {T, H, W} input");
  } else {
    throw std::invalid_argument("unknown task: " + task);
  }
  if (task != "video" && input.size() != 2)
    throw std::invalid_argument("image tasks need an {H, W} input");
  return c;
}

ModelPlan plan_blocks(const ModelConfig& cfg) {
  if (cfg.stages.size() != 4) throw std::invalid_argument("expected four stages");
  for (const StageSpec& s : cfg.stages) {
    if (s.blocks < 1 || s.heads < 1 || s.channels < 1)
      throw std::invalid_argument("stage fields must be positive");
    if (s.channels % s.heads != 0)
      throw std::invalid_argument("stage channels must divide evenly over heads");
  }
  const bool video = cfg.video();
  const size_t r = cfg.input.size();
  if (r != 2 && r != 3) throw std::invalid_argument("input must be {H, W} or {T, H, W}");

  ModelPlan plan;
  plan.stem_grid.resize(r);
  for (size_t a = 0; a < r; ++a) {
    const bool temporal = video && a == 0;
    const int64_t k = temporal ? cfg.temporal_kernel : cfg.patch_kernel;
    const int64_t s = temporal ? cfg.temporal_stride : cfg.patch_stride;
    const int64_t p = temporal ? cfg.temporal_pad : cfg.patch_pad;
    plan.stem_grid[a] = conv_out_extent(cfg.input[a], k, s, p);
  }

  Grid grid = plan.stem_grid;
  int64_t kv_running = cfg.kv_stride_base;
  for (int s = 0; s < 4; ++s) {
    for (int b = 0; b < cfg.stages[static_cast<size_t>(s)].blocks; ++b) {
      BlockPlan bp;
      bp.stage = s + 1;
      bp.block = b;
      const bool transition = s > 0 && b == 0;
      bp.d_in = transition ? cfg.stages[static_cast<size_t>(s - 1)].channels
                           : cfg.stages[static_cast<size_t>(s)].channels;
      bp.d_out = cfg.stages[static_cast<size_t>(s)].channels;
      bp.grid_in = grid;

      AttentionSpec& a = bp.attn;
      a.heads = cfg.stages[static_cast<size_t>(s)].heads;
      a.head_dim = bp.d_out / a.heads;
      a.pool_mode = cfg.pool_mode;
      a.pool_kernel = cfg.pool_kernel;
      a.residual_pooling = cfg.residual_pooling;
      a.relpos_mode = cfg.relpos == RelPosMode::joint || cfg.relpos == RelPosMode::decomposed
                          ? cfg.relpos
                          : RelPosMode::none;
      a.rel_q = cfg.rel_q && a.relpos_mode != RelPosMode::none;
      a.rel_k = cfg.rel_k && a.relpos_mode != RelPosMode::none;
      a.rel_v = cfg.rel_v && a.relpos_mode != RelPosMode::none;

      const int64_t qs = transition ? 2 : 1;
      if (transition) kv_running = std::max<int64_t>(kv_running / 2, 1);
      a.q_stride.assign(r, 1);
      a.kv_stride.assign(r, kv_running);
      for (size_t ax = 0; ax < r; ++ax)
        if (!(video && ax == 0) && qs > 1) a.q_stride[ax] = qs;
      if (video) a.kv_stride[0] = 1;

      // Attention flavor schedule.
      const int blocks_in_stage = static_cast<int>(cfg.stages[static_cast<size_t>(s)].blocks);
      if (cfg.attn_mode == "pooling") {
        a.kind = AttnKind::pooling;
      } else if (cfg.attn_mode == "full") {
        if (transition) {
          a.kind = AttnKind::pooling;
        } else {
          a.kind = AttnKind::full;
          a.q_stride.assign(r, 1);
          a.kv_stride.assign(r, 1);
        }
      } else if (cfg.attn_mode == "window" || cfg.attn_mode == "swin") {
        a.kind = cfg.attn_mode == "swin" && b % 2 == 1 && !transition
                     ? AttnKind::shifted_window
                     : AttnKind::fixed_window;
      } else if (cfg.attn_mode == "hwin") {
        a.kind = hwin_schedule(s + 1, b, blocks_in_stage);
      } else {
        throw std::invalid_argument("unknown attn_mode: " + cfg.attn_mode);
      }

      if (a.windowed()) {
        // Window size follows the block's input resolution, so transition
        // blocks take the previous stage's entry.
        const size_t widx = static_cast<size_t>(transition ? s - 1 : s);
        a.window.assign(r, 1);
        for (size_t ax = 0; ax < r; ++ax) {
          if (video && ax == 0) {
            a.window[ax] = grid[ax];  // full temporal extent
            continue;
          }
          int64_t w = std::min(cfg.windows[widx], grid[ax]);
          w = std::max(a.q_stride[ax], w / a.q_stride[ax] * a.q_stride[ax]);
          a.window[ax] = w;
        }
        if (a.kind == AttnKind::shifted_window) {
          a.shift.assign(r, 0);
          for (size_t ax = 0; ax < r; ++ax)
            if (!(video && ax == 0)) a.shift[ax] = a.window[ax] / 2;
        }
      }

      bp.grid_out = grid;
      for (size_t ax = 0; ax < r; ++ax)
        if (a.q_stride[ax] > 1) bp.grid_out[ax] = ceil_div(grid[ax], a.q_stride[ax]);
      bp.skip_pool = transition;
      bp.skip_proj = bp.d_in != bp.d_out;
      a.validate(bp.grid_in);

      plan.blocks.push_back(bp);
      grid = bp.grid_out;
    }
    plan.stage_grids.push_back(grid);
  }
  return plan;
}

// ---- model -----------------------------------------------------------------------

Model::Model(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)), plan_(plan_blocks(cfg_)) {
  Rng rng(seed);
  const int64_t c0 = cfg_.stages[0].channels;
  Shape stem_shape{c0, cfg_.in_channels};
  if (cfg_.video()) stem_shape.push_back(cfg_.temporal_kernel);
  for (int i = 0; i < 2; ++i) stem_shape.push_back(cfg_.patch_kernel);
  stem_weight = rng.trunc_normal_tensor(stem_shape);
  stem_bias = Tensor({c0});
  if (cfg_.relpos == RelPosMode::absolute_only) {
    const int64_t L0 = numel(Shape(plan_.stem_grid.begin(), plan_.stem_grid.end()));
    abs_pos = rng.trunc_normal_tensor({L0, c0});
  }
  for (const BlockPlan& bp : plan_.blocks) {
    BlockParams p;
    p.ln1_gamma = Tensor::full({bp.d_in}, 1.0);
    p.ln1_beta = Tensor({bp.d_in});
    p.attn = make_attention_params(bp.attn, bp.d_in, bp.grid_in, rng);
    if (bp.skip_proj) p.skip_proj = rng.trunc_normal_tensor({bp.d_in, bp.d_out});
    p.ln2_gamma = Tensor::full({bp.d_out}, 1.0);
    p.ln2_beta = Tensor({bp.d_out});
    const int64_t hidden = cfg_.mlp_ratio * bp.d_out;
    p.mlp_w1 = rng.trunc_normal_tensor({bp.d_out, hidden});
    p.mlp_b1 = Tensor({hidden});
    p.mlp_w2 = rng.trunc_normal_tensor({hidden, bp.d_out});
    p.mlp_b2 = Tensor({bp.d_out});
    blocks.push_back(std::move(p));
  }
  const int64_t d_last = cfg_.stages[3].channels;
  head_gamma = Tensor::full({d_last}, 1.0);
  head_beta = Tensor({d_last});
  head_weight = rng.trunc_normal_tensor({d_last, cfg_.num_classes});
  head_bias = Tensor({cfg_.num_classes});
}

std::vector<std::pair<std::string, Tensor*>> Model::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("stem.weight", &stem_weight);
  out.emplace_back("stem.bias", &stem_bias);
  if (abs_pos.defined()) out.emplace_back("abs_pos", &abs_pos);
  for (size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    BlockParams& b = blocks[i];
    out.emplace_back(p + "ln1.gamma", &b.ln1_gamma);
    out.emplace_back(p + "ln1.beta", &b.ln1_beta);
    for (auto& [name, t] : b.attn.named()) out.emplace_back(p + "attn." + name, t);
    if (b.skip_proj.defined()) out.emplace_back(p + "skip.proj", &b.skip_proj);
    out.emplace_back(p + "ln2.gamma", &b.ln2_gamma);
    out.emplace_back(p + "ln2.beta", &b.ln2_beta);
    out.emplace_back(p + "mlp.w1", &b.mlp_w1);
    out.emplace_back(p + "mlp.b1", &b.mlp_b1);
    out.emplace_back(p + "mlp.w2", &b.mlp_w2);
    out.emplace_back(p + "mlp.b2", &b.mlp_b2);
  }
  out.emplace_back("head.norm.gamma", &head_gamma);
  out.emplace_back("head.norm.beta", &head_beta);
  out.emplace_back("head.weight", &head_weight);
  out.emplace_back("head.bias", &head_bias);
  return out;
}

int64_t Model::num_params() {
  int64_t n = 0;
  for (auto& [name, t] : named_params()) n += t->size();
  return n;
}

ForwardResult Model::forward(const Ctx& ctx, const Tensor& x, bool want_trace) {
  const size_t r = cfg_.input.size();
  ForwardResult res;
  auto trace = [&](const std::string& name, const Tensor& t, const Grid& g) {
    if (want_trace) res.trace.push_back({name, t.shape(), g});
  };

  Grid stride(r, cfg_.patch_stride), pad(r, cfg_.patch_pad);
  if (cfg_.video()) {
    stride[0] = cfg_.temporal_stride;
    pad[0] = cfg_.temporal_pad;
  }
  Tensor h = conv_full(ctx, x, stem_weight, stem_bias, cfg_.input, stride, pad);
  Grid grid = plan_.stem_grid;
  trace("stem", h, grid);
  if (abs_pos.defined()) h = add(ctx, h, abs_pos);

  size_t stage_cursor = 0;
  for (size_t i = 0; i < plan_.blocks.size(); ++i) {
    const BlockPlan& bp = plan_.blocks[i];
    BlockParams& p = blocks[i];
    Tensor normed = layer_norm(ctx, h, p.ln1_gamma, p.ln1_beta);
    AttnOut att = attention(ctx, normed, grid, p.attn, bp.attn);

    Tensor skip = h;
    if (bp.skip_pool) {
      const int64_t L = h.extent(0);
      Tensor batched = reshape(ctx, skip, {1, L, bp.d_in});
      Grid kernel(r, cfg_.pool_kernel), kpad(r, (cfg_.pool_kernel - 1) / 2);
      Tensor pooled = max_pool(ctx, batched, grid, kernel, bp.attn.q_stride, kpad);
      const int64_t Lo = numel(Shape(bp.grid_out.begin(), bp.grid_out.end()));
      skip = reshape(ctx, pooled, {Lo, bp.d_in});
    }
    if (p.skip_proj.defined()) skip = matmul(ctx, skip, p.skip_proj);
    h = add(ctx, skip, att.tokens);
    grid = att.grid;

    Tensor normed2 = layer_norm(ctx, h, p.ln2_gamma, p.ln2_beta);
    Tensor m = add_rowwise(ctx, matmul(ctx, normed2, p.mlp_w1), p.mlp_b1);
    m = gelu(ctx, m);
    m = add_rowwise(ctx, matmul(ctx, m, p.mlp_w2), p.mlp_b2);
    h = add(ctx, h, m);
    trace("stage" + std::to_string(bp.stage) + ".block" + std::to_string(bp.block), h, grid);

    const bool stage_end = i + 1 == plan_.blocks.size() ||
                           plan_.blocks[i + 1].stage != bp.stage;
    if (stage_end) {
      res.pyramid.push_back(h.detached());
      res.pyramid_grids.push_back(grid);
      ++stage_cursor;
    }
  }

  Tensor final_norm = layer_norm(ctx, h, head_gamma, head_beta);
  Tensor pooled = reshape(ctx, mean_rows(ctx, final_norm), {1, cfg_.stages[3].channels});
  Tensor logits = add_rowwise(ctx, matmul(ctx, pooled, head_weight), head_bias);
  res.logits = reshape(ctx, logits, {cfg_.num_classes});
  trace("head", res.logits, {});
  return res;
}

// ---- serialization ---------------------------------------------------------------

void Model::save_weights(const std::string& blob_path, const std::string& manifest_path) {
  json tensors = json::array();
  int64_t offset = 0;
  std::ofstream blob(blob_path, std::ios::binary);
  if (!blob) throw std::runtime_error("cannot open " + blob_path);
  for (auto& [name, t] : named_params()) {
    tensors.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}, {"size", t->size()}});
    blob.write(reinterpret_cast<const char*>(t->data()),
               static_cast<std::streamsize>(t->size() * sizeof(double)));
    offset += t->size();
  }
  blob.close();
  json manifest{{"schema", kWeightsSchema},
                {"config", cfg_.to_json()},
                {"dtype", "float64-le"},
                {"total", offset},
                {"tensors", tensors}};
  std::ofstream mf(manifest_path);
  if (!mf) throw std::runtime_error("cannot open " + manifest_path);
  mf << manifest.dump(2) << "\n";
}

Model Model::load_weights(const std::string& blob_path, const std::string& manifest_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("cannot open " + manifest_path);
  json manifest = json::parse(mf);
  if (manifest.value("schema", "") != kWeightsSchema)
    throw std::runtime_error("unsupported weights schema: " + manifest.value("schema", "(missing)"));
  Model model(ModelConfig::from_json(manifest.at("config")), 0);

  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw std::runtime_error("cannot open " + blob_path);
  auto params = model.named_params();
  size_t cursor = 0;
  for (const json& tj : manifest.at("tensors")) {
    if (cursor >= params.size()) throw std::runtime_error("manifest lists extra tensors");
    auto& [name, t] = params[cursor++];
    if (tj.at("name").get<std::string>() != name)
      throw std::runtime_error("manifest tensor order mismatch at " + name);
    if (tj.at("shape").get<Shape>() != t->shape())
      throw std::runtime_error("shape mismatch for " + name);
    blob.seekg(static_cast<std::streamoff>(tj.at("offset").get<int64_t>() * sizeof(double)));
    blob.read(reinterpret_cast<char*>(t->data()),
              static_cast<std::streamsize>(t->size() * sizeof(double)));
    if (!blob) throw std::runtime_error("weights blob truncated at " + name);
  }
  if (cursor != params.size()) throw std::runtime_error("manifest is missing tensors");
  return model;
}

// ---- positional-table surgery ------------------------------------------------------

namespace {

// Linear interpolation of a [R_old, d] table onto R_new rows, endpoints
// pinned to endpoints (so the center offset maps to the center).
Tensor interp_rows(const Tensor& t, int64_t rows_new) {
  const int64_t rows_old = t.extent(0), d = t.extent(1);
  Tensor out({rows_new, d});
  for (int64_t r = 0; r < rows_new; ++r) {
    double pos = rows_new == 1 ? static_cast<double>(rows_old - 1) / 2.0
                               : static_cast<double>(r) * (rows_old - 1) / (rows_new - 1);
    const int64_t lo = std::min<int64_t>(static_cast<int64_t>(pos), rows_old - 1);
    const int64_t hi = std::min<int64_t>(lo + 1, rows_old - 1);
    const double w = pos - static_cast<double>(lo);
    for (int64_t c = 0; c < d; ++c)
      out.at(r * d + c) = (1.0 - w) * t.at(lo * d + c) + w * t.at(hi * d + c);
  }
  return out;
}

}  // namespace

RelPosTables interpolate_relpos(const RelPosTables& tables, const Grid& new_extents) {
  if (new_extents.size() != tables.extents.size())
    throw std::invalid_argument("interpolation cannot change the number of axes");
  RelPosTables out;
  out.mode = tables.mode;
  out.extents = new_extents;
  if (tables.mode == RelPosMode::decomposed) {
    for (size_t a = 0; a < new_extents.size(); ++a)
      out.axis_tables.push_back(interp_rows(tables.axis_tables[a], 2 * new_extents[a] - 1));
    return out;
  }
  if (tables.mode != RelPosMode::joint)
    throw std::invalid_argument("only joint/decomposed tables can be interpolated");
  // Separable pass: interpolate one offset axis of the joint row structure
  // at a time, treating everything to its right (plus channels) as columns.
  Tensor cur = tables.joint;
  Grid ext = tables.extents;
  const int64_t d = cur.extent(1);
  for (size_t a = 0; a < ext.size(); ++a) {
    int64_t lead = 1, trail = d;
    for (size_t b = 0; b < a; ++b) lead *= 2 * new_extents[b] - 1;
    for (size_t b = a + 1; b < ext.size(); ++b) trail *= 2 * ext[b] - 1;
    const int64_t rows_old = 2 * ext[a] - 1, rows_new = 2 * new_extents[a] - 1;
    Tensor next({lead * rows_new * trail / d, d});
    for (int64_t l = 0; l < lead; ++l) {
      Tensor slab({rows_old, trail});
      for (int64_t r = 0; r < rows_old; ++r)
        for (int64_t c = 0; c < trail; ++c)
          slab.at(r * trail + c) = cur.at((l * rows_old + r) * trail + c);
      Tensor islab = interp_rows(slab, rows_new);
      for (int64_t r = 0; r < rows_new; ++r)
        for (int64_t c = 0; c < trail; ++c)
          next.at((l * rows_new + r) * trail + c) = islab.at(r * trail + c);
    }
    cur = next;
    ext[a] = new_extents[a];
  }
  out.joint = cur;
  return out;
}

// ---- inflation --------------------------------------------------------------------

namespace {

// Copy src[C.., k_sp..] into the center temporal slice of dst[C.., kt, k_sp..].
void inflate_kernel(const Tensor& src, Tensor& dst, int64_t lead, int64_t kt, int64_t sp) {
  std::fill(dst.data(), dst.data() + dst.size(), 0.0);
  const int64_t center = (kt - 1) / 2;
  for (int64_t l = 0; l < lead; ++l)
    for (int64_t s = 0; s < sp; ++s)
      dst.at((l * kt + center) * sp + s) = src.at(l * sp + s);
}

void copy_into(const Tensor& src, Tensor& dst, const std::string& what) {
  if (src.shape() != dst.shape())
    throw std::invalid_argument("inflation shape mismatch at " + what);
  std::copy(src.data(), src.data() + src.size(), dst.data());
}

}  // namespace

Model inflate_2d_to_3d(Model& image_model, const ModelConfig& video_cfg) {
  const ModelConfig& src_cfg = image_model.config();
  if (src_cfg.video()) throw std::invalid_argument("source model already has a temporal axis");
  if (!video_cfg.video()) throw std::invalid_argument("target config lacks a temporal axis");
  if (video_cfg.stages.size() != src_cfg.stages.size())
    throw std::invalid_argument("stage layouts differ");
  Model out(video_cfg, 0);
  if (out.blocks.size() != image_model.blocks.size())
    throw std::invalid_argument("block counts differ between source and target");

  const int64_t c0 = video_cfg.stages[0].channels;
  inflate_kernel(image_model.stem_weight, out.stem_weight, c0 * video_cfg.in_channels,
                 video_cfg.temporal_kernel,
                 video_cfg.patch_kernel * video_cfg.patch_kernel);
  copy_into(image_model.stem_bias, out.stem_bias, "stem.bias");
  if (out.abs_pos.defined()) {
    // Replicate the 2D table across temporal positions.
    const int64_t frames = out.abs_pos.size() / image_model.abs_pos.size();
    for (int64_t f = 0; f < frames; ++f)
      std::copy(image_model.abs_pos.data(),
                image_model.abs_pos.data() + image_model.abs_pos.size(),
                out.abs_pos.data() + f * image_model.abs_pos.size());
  }

  for (size_t i = 0; i < out.blocks.size(); ++i) {
    BlockParams& d = out.blocks[i];
    BlockParams& s = image_model.blocks[i];
    const int64_t head_dim = out.plan().blocks[i].attn.head_dim;
    copy_into(s.ln1_gamma, d.ln1_gamma, "ln1.gamma");
    copy_into(s.ln1_beta, d.ln1_beta, "ln1.beta");
    copy_into(s.ln2_gamma, d.ln2_gamma, "ln2.gamma");
    copy_into(s.ln2_beta, d.ln2_beta, "ln2.beta");
    copy_into(s.mlp_w1, d.mlp_w1, "mlp.w1");
    copy_into(s.mlp_b1, d.mlp_b1, "mlp.b1");
    copy_into(s.mlp_w2, d.mlp_w2, "mlp.w2");
    copy_into(s.mlp_b2, d.mlp_b2, "mlp.b2");
    if (d.skip_proj.defined()) copy_into(s.skip_proj, d.skip_proj, "skip.proj");

    AttentionParams& da = d.attn;
    AttentionParams& sa = s.attn;
    copy_into(sa.w_q, da.w_q, "w_q"); copy_into(sa.b_q, da.b_q, "b_q");
    copy_into(sa.w_k, da.w_k, "w_k"); copy_into(sa.b_k, da.b_k, "b_k");
    copy_into(sa.w_v, da.w_v, "w_v"); copy_into(sa.b_v, da.b_v, "b_v");
    copy_into(sa.w_out, da.w_out, "w_out"); copy_into(sa.b_out, da.b_out, "b_out");
    auto inflate_pool = [&](const Tensor& ks, Tensor& kd, const Tensor& gs, Tensor& gd,
                            const Tensor& bs, Tensor& bd) {
      if (!kd.defined()) return;
      inflate_kernel(ks, kd, head_dim, kd.extent(1), ks.size() / head_dim);
      copy_into(gs, gd, "pool.gamma");
      copy_into(bs, bd, "pool.beta");
    };
    inflate_pool(sa.pool_q_kernel, da.pool_q_kernel, sa.pool_q_gamma, da.pool_q_gamma,
                 sa.pool_q_beta, da.pool_q_beta);
    inflate_pool(sa.pool_k_kernel, da.pool_k_kernel, sa.pool_k_gamma, da.pool_k_gamma,
                 sa.pool_k_beta, da.pool_k_beta);
    inflate_pool(sa.pool_v_kernel, da.pool_v_kernel, sa.pool_v_gamma, da.pool_v_gamma,
                 sa.pool_v_beta, da.pool_v_beta);

    // Temporal table (axis 0) starts at zero; spatial axes carry the 2D
    // tables, resized to the target extents when the grids differ.
    auto inflate_tables = [&](const RelPosTables& ts, RelPosTables& td) {
      if (td.mode != RelPosMode::decomposed || td.axis_tables.empty()) return;
      for (double* p = td.axis_tables[0].data();
           p != td.axis_tables[0].data() + td.axis_tables[0].size(); ++p)
        *p = 0.0;
      for (size_t a = 1; a < td.axis_tables.size(); ++a) {
        Tensor resized = interp_rows(ts.axis_tables[a - 1], td.axis_tables[a].extent(0));
        copy_into(resized, td.axis_tables[a], "relpos axis table");
      }
    };
    inflate_tables(sa.rel_q_tables, da.rel_q_tables);
    inflate_tables(sa.rel_k_tables, da.rel_k_tables);
    inflate_tables(sa.rel_v_tables, da.rel_v_tables);
  }

  copy_into(image_model.head_gamma, out.head_gamma, "head.norm.gamma");
  copy_into(image_model.head_beta, out.head_beta, "head.norm.beta");
  copy_into(image_model.head_weight, out.head_weight, "head.weight");
  copy_into(image_model.head_bias, out.head_bias, "head.bias");
  return out;
}

}  // namespace mvit
