#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "mvit/attention.hpp"
#include "mvit/init.hpp"

using namespace mvit;

namespace {

int64_t prod(const Grid& g) {
  int64_t n = 1;
  for (int64_t e : g) n *= e;
  return n;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

AttentionSpec base_spec() {
  AttentionSpec s;
  s.kind = AttnKind::pooling;
  s.heads = 2;
  s.head_dim = 4;
  s.q_stride = {2, 2};
  s.kv_stride = {2, 2};
  s.relpos_mode = RelPosMode::decomposed;
  s.rel_q = true;
  s.residual_pooling = true;
  return s;
}

}  // namespace

TEST_CASE("spec validation rejects inconsistent configurations") {
  Grid grid{6, 6};
  AttentionSpec s = base_spec();
  SUBCASE("stride rank mismatch") {
    s.q_stride = {2};
    CHECK_THROWS(s.validate(grid));
  }
  SUBCASE("full attention cannot pool") {
    s.kind = AttnKind::full;
    CHECK_THROWS(s.validate(grid));
  }
  SUBCASE("window must divide by q_stride") {
    s.kind = AttnKind::fixed_window;
    s.window = {3, 3};
    CHECK_THROWS(s.validate(grid));
  }
  SUBCASE("shifted windows need unit q_stride") {
    s.kind = AttnKind::shifted_window;
    s.window = {2, 2};
    s.shift = {1, 1};
    CHECK_THROWS(s.validate(grid));
  }
  SUBCASE("relpos flags must match mode") {
    s.rel_q = false;
    CHECK_THROWS(s.validate(grid));
  }
}

TEST_CASE("pool_tokens geometry") {
  Ctx ctx;
  Rng rng(5);
  Tensor x = rng.normal_tensor({2, 30, 4});
  Tensor k = rng.normal_tensor({4, 3, 3});
  AttnOut out = pool_tokens(ctx, x, {5, 6}, {2, 2}, PoolMode::depthwise_conv, 3, &k);
  CHECK(out.grid == Grid{3, 3});
  CHECK(out.tokens.shape() == Shape{2, 9, 4});
  AttnOut mx = pool_tokens(ctx, x, {5, 6}, {1, 2}, PoolMode::max, 3, nullptr);
  CHECK(mx.grid == Grid{5, 3});
}

TEST_CASE("fast attention equals the naive oracle on fixed specs") {
  Rng rng(11);
  Ctx plain;
  SUBCASE("pooling with decomposed rel terms") {
    Grid grid{6, 6};
    AttentionSpec s = base_spec();
    s.rel_k = true;
    s.rel_v = true;
    AttentionParams p = make_attention_params(s, 5, grid, rng);
    Tensor x = rng.normal_tensor({prod(grid), 5});
    AttnOut fast = attention(plain, x, grid, p, s);
    AttnOut ref = attention_oracle(x, grid, p, s);
    CHECK(fast.grid == Grid{3, 3});
    CHECK(max_abs_diff(fast.tokens, ref.tokens) < 1e-12);
  }
  SUBCASE("full attention with joint tables") {
    Grid grid{4, 5};
    AttentionSpec s;
    s.kind = AttnKind::full;
    s.heads = 1;
    s.head_dim = 6;
    s.q_stride = {1, 1};
    s.kv_stride = {1, 1};
    s.relpos_mode = RelPosMode::joint;
    s.rel_q = true;
    s.rel_v = true;
    AttentionParams p = make_attention_params(s, 4, grid, rng);
    Tensor x = rng.normal_tensor({prod(grid), 4});
    AttnOut fast = attention(plain, x, grid, p, s);
    AttnOut ref = attention_oracle(x, grid, p, s);
    CHECK(fast.grid == grid);
    CHECK(max_abs_diff(fast.tokens, ref.tokens) < 1e-12);
  }
  SUBCASE("max pooling and absolute positions") {
    Grid grid{4, 4, 3};
    AttentionSpec s;
    s.kind = AttnKind::pooling;
    s.heads = 2;
    s.head_dim = 3;
    s.q_stride = {1, 2, 1};
    s.kv_stride = {2, 2, 1};
    s.pool_mode = PoolMode::max;
    s.relpos_mode = RelPosMode::absolute_only;
    AttentionParams p = make_attention_params(s, 4, grid, rng);
    Tensor x = rng.normal_tensor({prod(grid), 4});
    AttnOut fast = attention(plain, x, grid, p, s);
    AttnOut ref = attention_oracle(x, grid, p, s);
    CHECK(fast.grid == Grid{4, 2, 3});
    CHECK(max_abs_diff(fast.tokens, ref.tokens) < 1e-12);
  }
  SUBCASE("rel_k indexed by i versus j") {
    Grid grid{5, 5};
    AttentionSpec s;
    s.kind = AttnKind::full;
    s.heads = 2;
    s.head_dim = 4;
    s.q_stride = {1, 1};
    s.kv_stride = {1, 1};
    s.relpos_mode = RelPosMode::decomposed;
    s.rel_k = true;
    AttentionParams p = make_attention_params(s, 4, grid, rng);
    Tensor x = rng.normal_tensor({prod(grid), 4});
    AttnOut by_j = attention(plain, x, grid, p, s);
    CHECK(max_abs_diff(by_j.tokens, attention_oracle(x, grid, p, s).tokens) < 1e-12);
    s.rel_k_index_i = true;
    AttnOut by_i = attention(plain, x, grid, p, s);
    CHECK(max_abs_diff(by_i.tokens, attention_oracle(x, grid, p, s).tokens) < 1e-12);
    CHECK(max_abs_diff(by_j.tokens, by_i.tokens) > 1e-9);  // genuinely different
  }
}

TEST_CASE("zero rel tables reduce to plain attention") {
  Rng rng(7);
  Ctx plain;
  Grid grid{5, 4};
  AttentionSpec with = base_spec();
  with.q_stride = {1, 1};
  with.kv_stride = {2, 2};
  AttentionParams p = make_attention_params(with, 6, grid, rng);
  for (Tensor* t : p.rel_q_tables.tensors())
    for (int64_t i = 0; i < t->size(); ++i) t->at(i) = 0.0;
  Tensor x = rng.normal_tensor({prod(grid), 6});
  AttnOut biased = attention(plain, x, grid, p, with);

  AttentionSpec without = with;
  without.relpos_mode = RelPosMode::none;
  without.rel_q = false;
  AttnOut bare = attention(plain, x, grid, p, without);
  CHECK(max_abs_diff(biased.tokens, bare.tokens) < 1e-12);
}

TEST_CASE("gradients flow through rel-pos tables and projections") {
  Rng rng(13);
  Grid grid{4, 4};
  AttentionSpec s = base_spec();
  s.rel_v = true;
  AttentionParams p = make_attention_params(s, 5, grid, rng);
  Tensor x = rng.normal_tensor({prod(grid), 5}, 0.5);

  SUBCASE("input gradient") {
    auto f = [&](const Ctx& c, const Tensor& t) {
      return sum_all(c, pooling_attention(c, t, grid, p, s).tokens);
    };
    CHECK(grad_check(f, x, 1e-5) < 1e-4);
  }
  SUBCASE("rel_q table gradient") {
    auto f = [&](const Ctx& c, const Tensor& t) {
      AttentionParams q = p;
      q.rel_q_tables.axis_tables[0] = t;
      return sum_all(c, pooling_attention(c, x, grid, q, s).tokens);
    };
    CHECK(grad_check(f, p.rel_q_tables.axis_tables[0], 1e-5) < 1e-4);
  }
  SUBCASE("rel_v table gradient") {
    auto f = [&](const Ctx& c, const Tensor& t) {
      AttentionParams q = p;
      q.rel_v_tables.axis_tables[1] = t;
      return sum_all(c, pooling_attention(c, x, grid, q, s).tokens);
    };
    CHECK(grad_check(f, p.rel_v_tables.axis_tables[1], 1e-5) < 1e-4);
  }
  SUBCASE("projection weight gradient") {
    auto f = [&](const Ctx& c, const Tensor& t) {
      AttentionParams q = p;
      q.w_v = t;
      return sum_all(c, pooling_attention(c, x, grid, q, s).tokens);
    };
    CHECK(grad_check(f, p.w_v, 1e-5) < 1e-4);
  }
}

TEST_CASE("shared-scale coordinates floor onto the query scale") {
  auto coords = shared_scale_coords({4, 8}, {4, 4});
  CHECK(coords[0][0] == 0);
  // Second axis: key extent 8 onto shared extent 4 -> j/2.
  CHECK(coords[1][7] == 3);
  CHECK(coords[1][5] == 2);
  auto ident = shared_scale_coords({3, 3}, {3, 3});
  CHECK(ident[0][8] == 2);
  CHECK(ident[1][8] == 2);
}

TEST_CASE("parameter registry names every tensor once") {
  Rng rng(17);
  AttentionSpec s = base_spec();
  s.rel_k = s.rel_v = true;
  AttentionParams p = make_attention_params(s, 6, {6, 6}, rng);
  auto named = p.named();
  CHECK(named.size() == 8 + 9 + 3 * 2);  // proj + pools + three 2-axis tables
  // Shared extents follow the pooled query grid (6 -> 3), so 2*3-1 rows.
  CHECK(p.rel_q_tables.axis_tables[0].shape() == Shape{5, 4});
}

TEST_CASE("gather and concat row utilities") {
  Ctx ctx;
  Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor g = gather_rows(ctx, x, {2, -1, 0});
  CHECK(g.at(0) == 5);
  CHECK(g.at(2) == 0);  // padded slot reads zero
  CHECK(g.at(4) == 1);
  Tensor c = concat_rows(ctx, {x, g});
  CHECK(c.shape() == Shape{6, 2});
  CHECK(c.at(6) == 5);
}
