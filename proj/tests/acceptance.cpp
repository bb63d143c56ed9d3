// Acceptance gate: one pass/fail line per criterion, nonzero exit on any
// failure. Criteria cover Table-1 reproduction, analytic/instrumented
// agreement, oracle equivalence, gradients, positional invariances,
// window structure, inflation, and CLI determinism.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mvit/cost.hpp"
#include "mvit/init.hpp"
#include "mvit/model.hpp"
#include "mvit/verify.hpp"

using namespace mvit;

namespace {

int failures = 0;

void report(int idx, const std::string& name, bool ok, const std::string& detail) {
  std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << idx << ": " << name
            << " — " << detail << "\n";
  if (!ok) ++failures;
}

int64_t prod(const Grid& g) {
  int64_t n = 1;
  for (int64_t e : g) n *= e;
  return n;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool within(double value, double target, double rel_tol) {
  return std::abs(value - target) <= rel_tol * target;
}

// ViT-B-shaped single-scale config: 12 blocks, width 768, 12 heads, 14x14
// token grid behind a patch-16 stem. `pooled` adds stride-2 K/V pooling
// everywhere plus one stride-2 Q pooling at mid depth.
long long vit_b_macs(bool pooled) {
  FlopCounter fc;
  fc.macs += 196LL * 768 * 3 * 256;  // patchify stem
  fc.pointwise += 196LL * 768;
  Grid grid{14, 14};
  for (int b = 0; b < 12; ++b) {
    BlockPlan bp;
    bp.stage = 1;
    bp.block = b;
    bp.d_in = bp.d_out = 768;
    AttentionSpec& a = bp.attn;
    a.heads = 12;
    a.head_dim = 64;
    if (!pooled) {
      a.kind = AttnKind::full;
      a.q_stride = {1, 1};
      a.kv_stride = {1, 1};
      bp.grid_in = bp.grid_out = grid;
    } else {
      a.kind = AttnKind::pooling;
      a.q_pool_identity_at_stride1 = true;
      const bool transition = b == 6;
      a.q_stride = transition ? Grid{2, 2} : Grid{1, 1};
      a.kv_stride = {2, 2};
      bp.grid_in = grid;
      if (transition) grid = {7, 7};
      bp.grid_out = grid;
      bp.skip_pool = transition;
    }
    block_flops(bp, 4, fc);
  }
  const int64_t L = prod(grid);
  fc.pointwise += 5 * L * 768 + L * 768;  // final norm + token mean
  fc.macs += 768 * 1000;
  fc.pointwise += 1000;
  return fc.macs;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MVIT_CLI_PATH) + " " + args;
  return std::system(cmd.c_str());
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

const VerifyLine* find_line(const VerifyResult& res, const std::string& name) {
  for (const VerifyLine& l : res.lines)
    if (l.name == name) return &l;
  return nullptr;
}

}  // namespace

int main() {
  // 1. Table 1 parameters within 5%.
  {
    const char* variants[] = {"T", "S", "B", "L", "H"};
    const double targets[] = {24e6, 35e6, 52e6, 218e6, 667e6};
    bool ok = true;
    std::ostringstream detail;
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < 5; ++i) {
      const CostReport rep = count_cost(make_variant(variants[i], "classify", {224, 224}));
      const double p = static_cast<double>(rep.total_params);
      if (!within(p, targets[i], 0.05)) ok = false;
      detail << variants[i] << "=" << p / 1e6 << "M ";
    }
    const double secs = seconds_since(t0);
    if (secs >= 5.0) ok = false;  // < 1 s per variant
    report(1, "Table 1 parameter reproduction", ok,
           detail.str() + "(" + std::to_string(secs) + "s for all five)");
  }

  // 2. Table 1 compute within 10%, and instrumented == analytic for T and S.
  {
    const char* variants[] = {"T", "S", "B", "L", "H"};
    const double targets[] = {4.7e9, 7.0e9, 10.2e9, 39.6e9, 120.6e9};
    bool ok = true;
    std::ostringstream detail;
    for (int i = 0; i < 5; ++i) {
      const CostReport rep = count_cost(make_variant(variants[i], "classify", {224, 224}));
      const double m = static_cast<double>(rep.total_macs);
      if (!within(m, targets[i], 0.10)) ok = false;
      detail << variants[i] << "=" << m / 1e9 << "G ";
    }
    for (const char* v : {"T", "S"}) {
      const auto t0 = std::chrono::steady_clock::now();
      const ModelConfig cfg = make_variant(v, "classify", {224, 224});
      Model model(cfg, 0);
      Rng rng(0);
      Tensor x = rng.normal_tensor({prod(cfg.input), 3});
      FlopCounter measured;
      Ctx ctx{nullptr, &measured};
      model.forward(ctx, x);
      const CostReport rep = count_cost(cfg);
      const bool exact =
          measured.macs == rep.total_macs && measured.flops() == rep.total_flops;
      if (!exact) ok = false;
      detail << v << (exact ? " instrumented==analytic" : " instrumented!=analytic");
      const double secs = seconds_since(t0);
      detail << " (" << static_cast<int>(secs) << "s) ";
      if (std::string(v) == "T" && secs >= 120.0) ok = false;
    }
    report(2, "Table 1 compute reproduction", ok, detail.str());
  }

  // 3. ViT-B pooling-vs-full ratio.
  {
    const double full = static_cast<double>(vit_b_macs(false));
    const double pooled = static_cast<double>(vit_b_macs(true));
    const double ratio = pooled / full;
    const double target = 10.9 / 17.5;
    const bool ok = within(full, 17.5e9, 0.10) && within(pooled, 10.9e9, 0.10) &&
                    within(ratio, target, 0.10);
    std::ostringstream detail;
    detail << "full=" << full / 1e9 << "G pooled=" << pooled / 1e9 << "G ratio=" << ratio
           << " target=" << target;
    report(3, "pooling vs full attention ratio", ok, detail.str());
  }

  // 4. Stage resolutions at 224.
  {
    bool ok = true;
    for (const char* v : {"T", "S", "B", "L", "H"}) {
      const ModelPlan plan = plan_blocks(make_variant(v, "classify", {224, 224}));
      ok = ok && plan.stage_grids.size() == 4 && plan.stage_grids[0] == Grid{56, 56} &&
           plan.stage_grids[1] == Grid{28, 28} && plan.stage_grids[2] == Grid{14, 14} &&
           plan.stage_grids[3] == Grid{7, 7};
    }
    report(4, "stage resolutions 56/28/14/7", ok, "all five variants at 224x224");
  }

  // 5-7. Property suite: oracle equivalence, gradients, shift invariance.
  {
    const auto t0 = std::chrono::steady_clock::now();
    VerifyOptions opts;
    opts.seed = 0;
    const VerifyResult res = run_verify(opts);
    const double secs = seconds_since(t0);
    const VerifyLine* oracle = find_line(res, "oracle_equivalence");
    const VerifyLine* grad = find_line(res, "grad_pooling_attention");
    const VerifyLine* shift = find_line(res, "relpos_shift_invariance");
    report(5, "oracle equivalence (100 random specs)",
           oracle && oracle->passed && secs < 300.0,
           (oracle ? oracle->detail : "missing") + " suite=" +
               std::to_string(static_cast<int>(secs)) + "s");
    report(6, "gradient correctness (20 seeds)", grad && grad->passed,
           grad ? grad->detail : "missing");
    report(7, "rel-pos shift invariance (1000 pairs)", shift && shift->passed,
           shift ? shift->detail : "missing");
  }

  // 8. Table-size law.
  {
    const bool ok = relpos_table_size(RelPosMode::decomposed, {1, 56, 56}) == 223 &&
                    relpos_table_size(RelPosMode::joint, {1, 56, 56}) == 12321 &&
                    12321.0 / 223.0 > 55.0;
    report(8, "rel-pos table-size law", ok, "joint=12321 decomposed=223 at T=1,H=W=56");
  }

  // 9. Hwin structure for detect configs.
  {
    bool ok = true;
    std::ostringstream detail;
    for (const char* v : {"T", "B"}) {
      const ModelConfig cfg = make_variant(v, "detect", {224, 224});
      const ModelPlan plan = plan_blocks(cfg);
      for (const BlockPlan& b : plan.blocks) {
        if (b.stage == 1) {
          ok = ok && b.attn.kind == AttnKind::pooling;
          continue;
        }
        const bool last =
            b.block == cfg.stages[static_cast<size_t>(b.stage - 1)].blocks - 1;
        if (last) {
          ok = ok && b.attn.kind == AttnKind::pooling;
        } else {
          ok = ok && b.attn.kind == AttnKind::hybrid_window_member;
          // Window edge must come from {56, 28, 14, 7} and match the block's
          // input resolution at 224.
          ok = ok && b.attn.window == b.grid_in;
          const int64_t w = b.attn.window[0];
          ok = ok && (w == 56 || w == 28 || w == 14 || w == 7);
        }
      }
    }
    detail << "stages 2-4: last block global, others windowed at input resolution";
    report(9, "Hwin schedule structure", ok, detail.str());
  }

  // 10. Inflation equivalence.
  {
    ModelConfig cfg2d;
    cfg2d.variant = "custom";
    cfg2d.task = "classify";
    cfg2d.input = {64, 64};
    cfg2d.num_classes = 10;
    cfg2d.stages = {{8, 1, 1}, {16, 2, 1}, {24, 3, 1}, {32, 4, 1}};
    Model m2d(cfg2d, 21);
    ModelConfig cfg3d = cfg2d;
    cfg3d.task = "video";
    cfg3d.input = {6, 64, 64};
    cfg3d.num_classes = 10;
    Model m3d = inflate_2d_to_3d(m2d, cfg3d);

    // Per-frame stem outputs on a replicated-frame clip.
    Rng rng(8);
    Tensor frame = rng.normal_tensor({64 * 64, 3});
    Tensor clip({6 * 64 * 64, 3});
    for (int f = 0; f < 6; ++f)
      std::copy(frame.data(), frame.data() + frame.size(), clip.data() + f * frame.size());
    Ctx plain;
    Tensor out2d =
        conv_full(plain, frame, m2d.stem_weight, m2d.stem_bias, {64, 64}, {4, 4}, {3, 3});
    Tensor out3d = conv_full(plain, clip, m3d.stem_weight, m3d.stem_bias, {6, 64, 64},
                             {2, 4, 4}, {1, 3, 3});
    double stem_err = 0;
    const int64_t frames_out = out3d.size() / out2d.size();
    for (int64_t f = 0; f < frames_out; ++f)
      for (int64_t i = 0; i < out2d.size(); ++i)
        stem_err = std::max(stem_err, std::abs(out3d.at(f * out2d.size() + i) - out2d.at(i)));

    // Zero-initialized temporal tables: video E_rel equals spatial E_rel.
    const RelPosTables& t3 = m3d.blocks[0].attn.rel_q_tables;
    const RelPosTables& t2 = m2d.blocks[0].attn.rel_q_tables;
    const int64_t d = m3d.plan().blocks[0].attn.head_dim;
    const int64_t h = m3d.plan().blocks[0].attn.heads;
    const int64_t L = 9;
    Tensor q = rng.normal_tensor({h, L, d});
    std::vector<std::vector<int64_t>> c2{{0, 0, 0, 1, 1, 1, 2, 2, 2},
                                         {0, 1, 2, 0, 1, 2, 0, 1, 2}};
    std::vector<std::vector<int64_t>> c3 = c2;
    c3.insert(c3.begin(), std::vector<int64_t>(L, 0));  // one shared frame
    Tensor e2 = relpos_bias(plain, q, t2, c2, c2);
    Tensor e3 = relpos_bias(plain, q, t3, c3, c3);
    double erel_err = 0;
    for (int64_t i = 0; i < e2.size(); ++i)
      erel_err = std::max(erel_err, std::abs(e2.at(i) - e3.at(i)));

    const bool ok = stem_err <= 1e-12 && erel_err <= 1e-12;
    std::ostringstream detail;
    detail << "stem_err=" << stem_err << " erel_err=" << erel_err;
    report(10, "2D-to-3D inflation equivalence", ok, detail.str());
  }

  // 11. CLI determinism: byte-identical `cost` and `verify` outputs.
  {
    bool ok = true;
    ok = ok && run_cli("cost --variant T --seed 5 --out acc_cost_1.json") == 0;
    ok = ok && run_cli("cost --variant T --seed 5 --out acc_cost_2.json") == 0;
    ok = ok && run_cli("verify --quick --seed 5 --out acc_ver_1.json > /dev/null") == 0;
    ok = ok && run_cli("verify --quick --seed 5 --out acc_ver_2.json > /dev/null") == 0;
    const std::string c1 = slurp("acc_cost_1.json"), c2 = slurp("acc_cost_2.json");
    const std::string v1 = slurp("acc_ver_1.json"), v2 = slurp("acc_ver_2.json");
    ok = ok && !c1.empty() && c1 == c2 && !v1.empty() && v1 == v2;
    // The fault-injection hook must flip the suite to failure.
    ok = ok && run_cli("verify --quick --fault --seed 5 > /dev/null") != 0;
    for (const char* f : {"acc_cost_1.json", "acc_cost_2.json", "acc_ver_1.json",
                          "acc_ver_2.json"})
      std::remove(f);
    report(11, "CLI determinism", ok,
           "cost and verify outputs byte-identical; fault hook fails the suite");
  }

  if (failures == 0) {
    std::cout << "acceptance: all 11 criteria passed\n";
    return 0;
  }
  std::cout << "acceptance: " << failures << " criterion/criteria FAILED\n";
  return 1;
}
