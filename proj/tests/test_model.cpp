#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <cstring>

#include "mvit/cost.hpp"
#include "mvit/model.hpp"

using namespace mvit;

namespace {

int64_t prod(const Grid& g) {
  int64_t n = 1;
  for (int64_t e : g) n *= e;
  return n;
}

ModelConfig tiny(const std::string& attn_mode, RelPosMode relpos, Grid input = {32, 32}) {
  ModelConfig c;
  c.variant = "custom";
  c.task = "classify";
  c.input = std::move(input);
  c.num_classes = 7;
  c.stages = {{8, 1, 2}, {16, 2, 2}, {24, 3, 2}, {32, 4, 2}};
  c.windows = {8, 4, 2, 1};
  c.attn_mode = attn_mode;
  c.relpos = relpos;
  return c;
}

}  // namespace

TEST_CASE("stage resolutions at 224 halve from 56 to 7") {
  const ModelPlan plan = plan_blocks(make_variant("T", "classify", {224, 224}));
  REQUIRE(plan.stage_grids.size() == 4);
  CHECK(plan.stem_grid == Grid{56, 56});
  CHECK(plan.stage_grids[0] == Grid{56, 56});
  CHECK(plan.stage_grids[1] == Grid{28, 28});
  CHECK(plan.stage_grids[2] == Grid{14, 14});
  CHECK(plan.stage_grids[3] == Grid{7, 7});
  CHECK(plan.blocks.size() == 10);  // 1+2+5+2
}

TEST_CASE("ceil divisions at 112 end on a 4x4 grid") {
  const ModelPlan plan = plan_blocks(make_variant("T", "classify", {112, 112}));
  CHECK(plan.stem_grid == Grid{28, 28});
  CHECK(plan.stage_grids[3] == Grid{4, 4});
}

TEST_CASE("K/V pooling stride tracks the query resolution") {
  const ModelPlan plan = plan_blocks(make_variant("S", "classify", {224, 224}));
  // Stage 1: stride 4 on 56^2 puts keys at 14^2; later stages keep 14^2
  // until stage 4.
  CHECK(plan.blocks[0].attn.kv_stride == Grid{4, 4});
  CHECK(plan.blocks[1].attn.kv_stride == Grid{2, 2});  // stage-2 transition
  CHECK(plan.blocks[3].attn.kv_stride == Grid{1, 1});  // stage-3 transition
  CHECK(plan.blocks.back().attn.kv_stride == Grid{1, 1});
  CHECK(plan.blocks[1].attn.q_stride == Grid{2, 2});
  CHECK(plan.blocks[2].attn.q_stride == Grid{1, 1});
}

TEST_CASE("detect task uses hybrid windows sized to the input resolution") {
  const ModelConfig cfg = make_variant("B", "detect", {224, 224});
  CHECK(cfg.attn_mode == "hwin");
  const ModelPlan plan = plan_blocks(cfg);
  for (const BlockPlan& b : plan.blocks) {
    if (b.stage == 1) {
      CHECK(b.attn.kind == AttnKind::pooling);
      continue;
    }
    const bool last = b.block == cfg.stages[static_cast<size_t>(b.stage - 1)].blocks - 1;
    if (last) {
      CHECK(b.attn.kind == AttnKind::pooling);
    } else {
      CHECK(b.attn.kind == AttnKind::hybrid_window_member);
      // Window equals the block's input resolution at 224.
      CHECK(b.attn.window == b.grid_in);
    }
  }
}

TEST_CASE("config JSON round-trips") {
  ModelConfig cfg = make_variant("L", "video", {16, 224, 224});
  cfg.relpos = RelPosMode::joint;
  cfg.rel_v = true;
  const ModelConfig back = ModelConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  nlohmann::json bad = cfg.to_json();
  bad["schema"] = "mvit-config/99";
  CHECK_THROWS(ModelConfig::from_json(bad));
}

TEST_CASE("forward produces logits and four pyramid taps") {
  for (const std::string mode : {"pooling", "hwin", "swin", "window", "full"}) {
    Model model(tiny(mode, RelPosMode::decomposed), 42);
    Rng rng(1);
    Tensor x = rng.normal_tensor({prod(model.config().input), 3});
    Ctx plain;
    ForwardResult r = model.forward(plain, x, true);
    REQUIRE(r.logits.shape() == Shape{7});
    for (int64_t i = 0; i < 7; ++i) CHECK(std::isfinite(r.logits.at(i)));
    REQUIRE(r.pyramid.size() == 4);
    CHECK(r.pyramid_grids[0] == Grid{8, 8});
    CHECK(r.pyramid_grids[3] == Grid{1, 1});
    CHECK(r.pyramid[2].extent(1) == 24);
    CHECK(!r.trace.empty());
  }
}

TEST_CASE("instrumented forward equals the analytic accountant exactly") {
  struct Case { ModelConfig cfg; };
  std::vector<ModelConfig> cases;
  cases.push_back(tiny("pooling", RelPosMode::decomposed));
  cases.push_back(tiny("hwin", RelPosMode::decomposed));
  cases.push_back(tiny("swin", RelPosMode::none));
  cases.push_back(tiny("full", RelPosMode::none));
  cases.push_back(tiny("window", RelPosMode::joint));
  cases.push_back(tiny("pooling", RelPosMode::absolute_only));
  {
    ModelConfig video = tiny("pooling", RelPosMode::decomposed, {4, 32, 32});
    video.task = "video";
    cases.push_back(video);
  }
  {
    ModelConfig rich = tiny("hwin", RelPosMode::decomposed);
    rich.rel_k = rich.rel_v = true;
    rich.pool_mode = PoolMode::max;
    cases.push_back(rich);
  }
  for (const ModelConfig& cfg : cases) {
    CAPTURE(cfg.attn_mode);
    Model model(cfg, 3);
    Rng rng(2);
    Tensor x = rng.normal_tensor({prod(cfg.input), 3});
    FlopCounter measured;
    Ctx ctx{nullptr, &measured};
    model.forward(ctx, x);
    const CostReport rep = count_cost(cfg);
    CHECK(measured.macs == rep.total_macs);
    CHECK(measured.flops() == rep.total_flops);
    CHECK(model.num_params() == rep.total_params);
  }
}

TEST_CASE("weights round-trip through blob and manifest") {
  Model model(tiny("pooling", RelPosMode::decomposed), 9);
  const std::string blob = "tmp_weights.bin", manifest = "tmp_weights.json";
  model.save_weights(blob, manifest);
  Model loaded = Model::load_weights(blob, manifest);
  Rng rng(4);
  Tensor x = rng.normal_tensor({prod(model.config().input), 3});
  Ctx plain;
  Tensor a = model.forward(plain, x).logits;
  Tensor b = loaded.forward(plain, x).logits;
  CHECK(std::memcmp(a.data(), b.data(), static_cast<size_t>(a.size()) * 8) == 0);
  std::remove(blob.c_str());
  std::remove(manifest.c_str());
}

TEST_CASE("table interpolation preserves the center offset") {
  Rng rng(5);
  RelPosTables t = RelPosTables::zeros(RelPosMode::decomposed, {3, 4}, 2);
  for (Tensor* p : t.tensors())
    for (int64_t i = 0; i < p->size(); ++i) p->at(i) = rng.normal();
  RelPosTables same = interpolate_relpos(t, {3, 4});
  CHECK(std::memcmp(same.axis_tables[0].data(), t.axis_tables[0].data(), 5 * 2 * 8) == 0);
  RelPosTables up = interpolate_relpos(t, {5, 4});
  REQUIRE(up.axis_tables[0].shape() == Shape{9, 2});
  // Center row (offset 0) maps onto the old center row.
  CHECK(up.axis_tables[0].at(4 * 2) == doctest::Approx(t.axis_tables[0].at(2 * 2)));
  RelPosTables j = RelPosTables::zeros(RelPosMode::joint, {2, 3}, 2);
  for (int64_t i = 0; i < j.joint.size(); ++i) j.joint.at(i) = rng.normal();
  RelPosTables ju = interpolate_relpos(j, {3, 3});
  CHECK(ju.joint.shape() == Shape{5 * 5, 2});
  // Center joint row maps onto the old center joint row.
  const int64_t c_new = (2 * 5 + 2) * 2, c_old = (1 * 5 + 2) * 2;
  CHECK(ju.joint.at(c_new) == doctest::Approx(j.joint.at(c_old)));
}

TEST_CASE("inflation plants 2D kernels in the center temporal slice") {
  ModelConfig cfg2d = tiny("pooling", RelPosMode::decomposed);
  Model m2d(cfg2d, 11);
  ModelConfig cfg3d = tiny("pooling", RelPosMode::decomposed, {4, 32, 32});
  cfg3d.task = "video";
  Model m3d = inflate_2d_to_3d(m2d, cfg3d);

  // Stem: center slice carries the 2D weights, outer slices are zero.
  const int64_t sp = 49, kt = 3;
  for (int64_t l = 0; l < 8 * 3; ++l)
    for (int64_t s = 0; s < sp; ++s) {
      CHECK(m3d.stem_weight.at((l * kt + 0) * sp + s) == 0.0);
      CHECK(m3d.stem_weight.at((l * kt + 1) * sp + s) == m2d.stem_weight.at(l * sp + s));
      CHECK(m3d.stem_weight.at((l * kt + 2) * sp + s) == 0.0);
    }

  // Temporal rel tables are zero; spatial tables carry over.
  const RelPosTables& t3 = m3d.blocks[0].attn.rel_q_tables;
  const RelPosTables& t2 = m2d.blocks[0].attn.rel_q_tables;
  for (int64_t i = 0; i < t3.axis_tables[0].size(); ++i) CHECK(t3.axis_tables[0].at(i) == 0.0);
  REQUIRE(t3.axis_tables[1].shape() == t2.axis_tables[0].shape());
  CHECK(std::memcmp(t3.axis_tables[1].data(), t2.axis_tables[0].data(),
                    static_cast<size_t>(t2.axis_tables[0].size()) * 8) == 0);

  // Replicated-frame clip: each stem output frame equals the 2D stem output.
  Rng rng(6);
  Tensor frame = rng.normal_tensor({32 * 32, 3});
  Tensor clip({4 * 32 * 32, 3});
  for (int f = 0; f < 4; ++f)
    std::copy(frame.data(), frame.data() + frame.size(), clip.data() + f * frame.size());
  Ctx plain;
  Tensor out2d = conv_full(plain, frame, m2d.stem_weight, m2d.stem_bias, {32, 32}, {4, 4},
                           {3, 3});
  Tensor out3d = conv_full(plain, clip, m3d.stem_weight, m3d.stem_bias, {4, 32, 32},
                           {2, 4, 4}, {1, 3, 3});
  REQUIRE(out3d.extent(0) == 2 * out2d.extent(0));
  double m = 0;
  for (int64_t f = 0; f < 2; ++f)
    for (int64_t i = 0; i < out2d.size(); ++i)
      m = std::max(m, std::abs(out3d.at(f * out2d.size() + i) - out2d.at(i)));
  CHECK(m <= 1e-12);
}
