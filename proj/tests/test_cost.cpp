#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mvit/cost.hpp"
#include "mvit/init.hpp"

using namespace mvit;

TEST_CASE("relpos table sizes follow the closed forms") {
  CHECK(relpos_table_size(RelPosMode::decomposed, {1, 56, 56}) == 223);
  CHECK(relpos_table_size(RelPosMode::joint, {1, 56, 56}) == 12321);
  CHECK(relpos_table_size(RelPosMode::decomposed, {8, 7, 7}, 4) == (15 + 13 + 13) * 4);
  CHECK(relpos_table_size(RelPosMode::joint, {8, 7, 7}, 4) == 15 * 13 * 13 * 4);
  CHECK(relpos_table_size(RelPosMode::none, {8, 7, 7}, 4) == 0);
  CHECK(relpos_table_size(RelPosMode::absolute_only, {8, 7, 7}, 4) == 0);
  CHECK(12321 / 223 >= 55);  // decomposed saving at 56x56
}

TEST_CASE("attention memory estimates") {
  SUBCASE("full attention on 3136 tokens, one head") {
    AttentionSpec s;
    s.kind = AttnKind::full;
    s.heads = 1;
    s.head_dim = 96;
    s.q_stride = {1, 1};
    s.kv_stride = {1, 1};
    CHECK(attention_memory_estimate(s, {56, 56}) == 3136LL * 3136 * 8);
  }
  SUBCASE("stride-4 K/V pooling shrinks scores 16x") {
    AttentionSpec s;
    s.kind = AttnKind::pooling;
    s.heads = 1;
    s.head_dim = 96;
    s.q_stride = {1, 1};
    s.kv_stride = {4, 4};
    CHECK(attention_memory_estimate(s, {56, 56}) == 3136LL * (3136 / 16) * 8);
  }
  SUBCASE("window 7 on a 56 grid scores only within windows") {
    AttentionSpec s;
    s.kind = AttnKind::fixed_window;
    s.heads = 1;
    s.head_dim = 96;
    s.q_stride = {1, 1};
    s.kv_stride = {1, 1};
    s.window = {7, 7};
    CHECK(attention_memory_estimate(s, {56, 56}) == 3136LL * 49 * 8);
  }
}

TEST_CASE("analytic attention params equal the instantiated tensors") {
  Rng rng(19);
  auto check_match = [&](const AttentionSpec& s, const Grid& grid, int64_t d_in) {
    AttentionParams p = make_attention_params(s, d_in, grid, rng);
    int64_t actual = 0;
    for (auto& [name, t] : p.named()) actual += t->size();
    CHECK(attention_params(s, grid, d_in) == actual);
  };
  AttentionSpec pooling;
  pooling.kind = AttnKind::pooling;
  pooling.heads = 2;
  pooling.head_dim = 4;
  pooling.q_stride = {2, 2};
  pooling.kv_stride = {2, 2};
  pooling.relpos_mode = RelPosMode::decomposed;
  pooling.rel_q = pooling.rel_k = true;
  check_match(pooling, {6, 6}, 5);

  AttentionSpec win = pooling;
  win.kind = AttnKind::fixed_window;
  win.window = {4, 4};
  win.relpos_mode = RelPosMode::joint;
  win.rel_k = false;
  win.rel_v = true;
  check_match(win, {6, 6}, 5);

  AttentionSpec full;
  full.kind = AttnKind::full;
  full.heads = 3;
  full.head_dim = 4;
  full.q_stride = {1, 1};
  full.kv_stride = {1, 1};
  check_match(full, {5, 5}, 6);

  AttentionSpec abs = full;
  abs.relpos_mode = RelPosMode::absolute_only;
  check_match(abs, {5, 5}, 6);

  AttentionSpec maxpool = pooling;
  maxpool.pool_mode = PoolMode::max;
  maxpool.relpos_mode = RelPosMode::none;
  maxpool.rel_q = maxpool.rel_k = false;
  check_match(maxpool, {6, 6}, 5);
}

TEST_CASE("cost report totals for the tiny end of Table 1") {
  const CostReport t = count_cost(make_variant("T", "classify", {224, 224}));
  CHECK(t.total_params > 20'000'000);
  CHECK(t.total_params < 28'000'000);
  CHECK(t.total_macs > 4'000'000'000LL);
  CHECK(t.total_macs < 5'400'000'000LL);
  CHECK(t.total_flops > 2 * t.total_macs);  // pointwise work is visible
  CHECK(t.blocks.size() == 10);
  CHECK(t.blocks[0].l_k == 196);  // stride-4 K/V pooling of 56^2

  // Joint tables exceed the decomposed variant by the table-size delta.
  ModelConfig joint_cfg = make_variant("T", "classify", {224, 224});
  joint_cfg.relpos = RelPosMode::joint;
  const CostReport j = count_cost(joint_cfg);
  CHECK(j.total_params > t.total_params);
}

TEST_CASE("report serialization is deterministic") {
  const ModelConfig cfg = make_variant("T", "classify", {224, 224});
  const CostReport a = count_cost(cfg);
  const CostReport b = count_cost(cfg);
  CHECK(a.to_csv() == b.to_csv());
  CHECK(a.to_json().dump(2) == b.to_json().dump(2));
  CHECK(a.to_json().at("schema") == "mvit-cost/1");
  // CSV uses '.' as the decimal separator and plain integers.
  CHECK(a.to_csv().find(',') != std::string::npos);
  CHECK(a.to_csv().find("stage") != std::string::npos);
}
