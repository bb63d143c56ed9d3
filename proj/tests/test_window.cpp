#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>

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

}  // namespace

TEST_CASE("window info partitions with padding") {
  WindowInfo info = make_window_info({5, 5}, {2, 2}, {0, 0});
  CHECK(info.num_windows == 9);
  CHECK(info.window_tokens == 4);
  CHECK(info.padded == Grid{6, 6});
  // Bottom-right window holds one real token and three pads.
  const auto& last = info.slot_src.back();
  CHECK(last[0] == 24);
  CHECK(last[1] == -1);
  CHECK(last[2] == -1);
  CHECK(last[3] == -1);
}

TEST_CASE("partition then merge restores token order bit-exactly") {
  Rng rng(23);
  Ctx ctx;
  for (int trial = 0; trial < 20; ++trial) {
    const int rank = trial % 2 == 0 ? 2 : 3;
    Grid grid(rank), window(rank), shift(rank);
    for (int a = 0; a < rank; ++a) {
      grid[a] = rng.uniform_int(2, rank == 2 ? 9 : 5);
      window[a] = rng.uniform_int(1, grid[a]);
      shift[a] = rng.uniform_int(0, window[a] - 1);
    }
    Tensor x = rng.normal_tensor({prod(grid), 3});
    WindowInfo info = make_window_info(grid, window, shift);
    Tensor back = window_merge(ctx, window_partition(ctx, x, info), info);
    CHECK(std::memcmp(x.data(), back.data(), static_cast<size_t>(x.size()) * 8) == 0);
  }
}

TEST_CASE("shifted windows equal fixed windows on cyclically rolled input") {
  Rng rng(29);
  Ctx ctx;
  const Grid grid{6, 8};
  const Grid window{3, 4};
  const Grid shift{1, 2};
  AttentionSpec fixed;
  fixed.kind = AttnKind::fixed_window;
  fixed.heads = 2;
  fixed.head_dim = 4;
  fixed.q_stride = {1, 1};
  fixed.kv_stride = {1, 1};
  fixed.window = window;
  AttentionSpec shifted = fixed;
  shifted.kind = AttnKind::shifted_window;
  shifted.shift = shift;

  AttentionParams p = make_attention_params(fixed, 5, grid, rng);
  Tensor x = rng.normal_tensor({prod(grid), 5});
  // Roll tokens by -shift so fixed windows see what shifted windows see.
  Tensor rolled(x.shape());
  for (int64_t i = 0; i < grid[0]; ++i)
    for (int64_t j = 0; j < grid[1]; ++j) {
      const int64_t si = (i - shift[0] + grid[0]) % grid[0];
      const int64_t sj = (j - shift[1] + grid[1]) % grid[1];
      for (int64_t c = 0; c < 5; ++c)
        rolled.at((i * grid[1] + j) * 5 + c) = x.at((si * grid[1] + sj) * 5 + c);
    }
  AttnOut a = attention(ctx, x, grid, p, shifted);
  AttnOut b = attention(ctx, rolled, grid, p, fixed);
  // a at position p equals b at the rolled position (p + shift) mod grid.
  double m = 0;
  for (int64_t i = 0; i < grid[0]; ++i)
    for (int64_t j = 0; j < grid[1]; ++j) {
      const int64_t ri = (i + shift[0]) % grid[0];
      const int64_t rj = (j + shift[1]) % grid[1];
      for (int64_t c = 0; c < 8; ++c)
        m = std::max(m, std::abs(a.tokens.at((i * grid[1] + j) * 8 + c) -
                                 b.tokens.at((ri * grid[1] + rj) * 8 + c)));
    }
  CHECK(m == 0.0);  // identical windows, identical arithmetic
}

TEST_CASE("windowed attention matches the oracle, including padding masks") {
  Rng rng(31);
  Ctx ctx;
  SUBCASE("pooled queries inside windows") {
    const Grid grid{8, 6};
    AttentionSpec s;
    s.kind = AttnKind::hybrid_window_member;
    s.heads = 2;
    s.head_dim = 4;
    s.q_stride = {2, 2};
    s.kv_stride = {2, 1};
    s.window = {4, 4};  // 6 does not divide by 4: right windows carry padding
    s.relpos_mode = RelPosMode::decomposed;
    s.rel_q = true;
    AttentionParams p = make_attention_params(s, 5, grid, rng);
    Tensor x = rng.normal_tensor({prod(grid), 5});
    AttnOut fast = attention(ctx, x, grid, p, s);
    AttnOut ref = attention_oracle(x, grid, p, s);
    CHECK(fast.grid == Grid{4, 3});
    CHECK(max_abs_diff(fast.tokens, ref.tokens) < 1e-12);
  }
  SUBCASE("shifted windows with relpos") {
    const Grid grid{7, 5};
    AttentionSpec s;
    s.kind = AttnKind::shifted_window;
    s.heads = 1;
    s.head_dim = 6;
    s.q_stride = {1, 1};
    s.kv_stride = {2, 2};
    s.window = {3, 3};
    s.shift = {1, 2};
    s.relpos_mode = RelPosMode::joint;
    s.rel_q = true;
    s.rel_v = true;
    AttentionParams p = make_attention_params(s, 4, grid, rng);
    Tensor x = rng.normal_tensor({prod(grid), 4});
    AttnOut fast = attention(ctx, x, grid, p, s);
    AttnOut ref = attention_oracle(x, grid, p, s);
    CHECK(fast.grid == grid);
    CHECK(max_abs_diff(fast.tokens, ref.tokens) < 1e-12);
  }
}

TEST_CASE("windows larger than the grid behave as global attention") {
  Rng rng(37);
  Ctx ctx;
  const Grid grid{4, 4};
  AttentionSpec win;
  win.kind = AttnKind::fixed_window;
  win.heads = 2;
  win.head_dim = 4;
  win.q_stride = {1, 1};
  win.kv_stride = {1, 1};
  win.window = {9, 9};  // clamped to the grid
  AttentionParams p = make_attention_params(win, 5, grid, rng);
  Tensor x = rng.normal_tensor({prod(grid), 5});
  AttnOut a = attention(ctx, x, grid, p, win);
  AttnOut ref = attention_oracle(x, grid, p, win);
  CHECK(max_abs_diff(a.tokens, ref.tokens) < 1e-12);
  CHECK(a.grid == grid);
}

TEST_CASE("hwin schedule keeps the last block of stages 2-4 global") {
  CHECK(hwin_schedule(1, 0, 3) == AttnKind::pooling);
  CHECK(hwin_schedule(2, 0, 3) == AttnKind::hybrid_window_member);
  CHECK(hwin_schedule(2, 1, 3) == AttnKind::hybrid_window_member);
  CHECK(hwin_schedule(2, 2, 3) == AttnKind::pooling);
  CHECK(hwin_schedule(4, 0, 1) == AttnKind::pooling);
  CHECK_THROWS(hwin_schedule(5, 0, 1));
  CHECK_THROWS(hwin_schedule(2, 3, 3));
}
