#include "mvit/verify.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <sstream>
#include <thread>

#include "mvit/attention.hpp"
#include "mvit/cost.hpp"
#include "mvit/init.hpp"

namespace mvit {

namespace {

int64_t prod(const Grid& g) {
  int64_t n = 1;
  for (int64_t e : g) n *= e;
  return n;
}

uint64_t mix(uint64_t seed, uint64_t salt, uint64_t trial) {
  uint64_t x = seed ^ (salt * 0x9E3779B97F4A7C15ULL) ^ (trial + 1);
  x ^= x >> 30; x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27; x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

// Run `n` independent trials on up to `threads` workers and fold the
// per-trial scores with max(); the result does not depend on scheduling.
template <typename F>
double run_trials(int n, int threads, F&& trial_fn) {
  std::vector<double> scores(static_cast<size_t>(n), 0.0);
  threads = std::max(1, std::min(threads, n));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      scores[static_cast<size_t>(i)] = trial_fn(i);
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  double m = 0;
  for (double s : scores) m = std::max(m, s);
  return m;
}

struct SiteCase {
  Grid grid;
  int64_t d_in = 0;
  AttentionSpec spec;
};

// Random attention configuration covering every kind, strides {1,2,4},
// all relpos modes and term subsets; token count capped at l_cap.
SiteCase random_site(Rng& rng, int64_t l_cap) {
  SiteCase c;
  const int rank = rng.uniform_int(0, 1) == 0 ? 2 : 3;
  for (;;) {
    c.grid.assign(static_cast<size_t>(rank), 0);
    for (int a = 0; a < rank; ++a)
      c.grid[static_cast<size_t>(a)] = rng.uniform_int(2, rank == 2 ? 9 : 5);
    if (prod(c.grid) <= l_cap) break;
  }
  c.d_in = rng.uniform_int(3, 9);

  AttentionSpec& s = c.spec;
  const int64_t kinds[] = {0, 1, 2, 3};
  switch (kinds[rng.uniform_int(0, 3)]) {
    case 0: s.kind = AttnKind::full; break;
    case 1: s.kind = AttnKind::pooling; break;
    case 2: s.kind = AttnKind::fixed_window; break;
    default: s.kind = AttnKind::shifted_window; break;
  }
  s.heads = rng.uniform_int(1, 3);
  s.head_dim = 2 * rng.uniform_int(1, 4);
  s.pool_mode = rng.uniform_int(0, 1) == 0 ? PoolMode::depthwise_conv : PoolMode::max;
  s.pool_kernel = s.kind == AttnKind::pooling && rng.uniform_int(0, 3) == 0 ? 1 : 3;
  s.residual_pooling = rng.uniform_int(0, 1) == 1;
  s.q_pool_identity_at_stride1 = rng.uniform_int(0, 1) == 1;

  const int64_t stride_choices[] = {1, 2, 4};
  s.q_stride.assign(static_cast<size_t>(rank), 1);
  s.kv_stride.assign(static_cast<size_t>(rank), 1);
  if (s.kind == AttnKind::pooling || s.kind == AttnKind::fixed_window) {
    const int hi = s.kind == AttnKind::pooling ? 2 : 1;
    for (int a = 0; a < rank; ++a)
      s.q_stride[static_cast<size_t>(a)] = stride_choices[rng.uniform_int(0, hi)];
  }
  if (s.kind != AttnKind::full)
    for (int a = 0; a < rank; ++a)
      s.kv_stride[static_cast<size_t>(a)] = stride_choices[rng.uniform_int(0, 2)];

  if (s.windowed()) {
    s.window.assign(static_cast<size_t>(rank), 1);
    for (int a = 0; a < rank; ++a) {
      const int64_t qs = s.q_stride[static_cast<size_t>(a)];
      const int64_t m = std::max<int64_t>(1, c.grid[static_cast<size_t>(a)] / qs);
      s.window[static_cast<size_t>(a)] = qs * rng.uniform_int(1, m);
    }
    if (s.kind == AttnKind::shifted_window) {
      s.shift.assign(static_cast<size_t>(rank), 0);
      for (int a = 0; a < rank; ++a)
        s.shift[static_cast<size_t>(a)] =
            rng.uniform_int(0, s.window[static_cast<size_t>(a)] - 1);
    }
  }

  switch (rng.uniform_int(0, 2)) {
    case 0: s.relpos_mode = RelPosMode::none; break;
    case 1: s.relpos_mode = RelPosMode::decomposed; break;
    default: s.relpos_mode = RelPosMode::joint; break;
  }
  if (s.relpos_mode != RelPosMode::none) {
    while (!s.rel_q && !s.rel_k && !s.rel_v) {
      s.rel_q = rng.uniform_int(0, 1) == 1;
      s.rel_k = rng.uniform_int(0, 1) == 1;
      s.rel_v = rng.uniform_int(0, 1) == 1;
    }
    if (s.rel_k && s.kind == AttnKind::full) s.rel_k_index_i = rng.uniform_int(0, 1) == 1;
  }
  return c;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.setf(std::ios::scientific);
  os.precision(3);
  os << v;
  return os.str();
}

}  // namespace

bool VerifyResult::all_passed() const {
  for (const VerifyLine& l : lines)
    if (!l.passed) return false;
  return true;
}

std::string VerifyResult::to_text() const {
  std::ostringstream os;
  for (const VerifyLine& l : lines)
    os << (l.passed ? "[PASS] " : "[FAIL] ") << l.name << " " << l.detail << "\n";
  os << (all_passed() ? "verify: all properties passed\n" : "verify: FAILURES present\n");
  return os.str();
}

int thread_count_from_env() {
  const char* v = std::getenv("MVIT_MECHANICS_THREADS");
  if (!v) return 1;
  const int n = std::atoi(v);
  return n >= 1 ? n : 1;
}

VerifyResult run_verify(const VerifyOptions& opts) {
  const int threads = opts.threads > 0 ? opts.threads : thread_count_from_env();
  VerifyResult res;
  auto line = [&](const std::string& name, bool ok, const std::string& detail) {
    res.lines.push_back({name, ok, detail});
  };

  // Fast path vs independent naive oracle on random specs.
  {
    const int n = opts.quick ? 30 : 100;
    const int64_t l_cap = opts.quick ? 64 : 256;
    const bool fault = opts.fault_injection;
    const double err = run_trials(n, threads, [&](int i) {
      Rng rng(mix(opts.seed, 1, static_cast<uint64_t>(i)));
      SiteCase c = random_site(rng, l_cap);
      AttentionParams params = make_attention_params(c.spec, c.d_in, c.grid, rng);
      Tensor x = rng.normal_tensor({prod(c.grid), c.d_in}, 0.5);
      Ctx plain;
      AttnOut fast = attention(plain, x, c.grid, params, c.spec);
      if (fault && i == 0) fast.tokens.at(0) = -fast.tokens.at(0) - 1.0;
      AttnOut ref = attention_oracle(x, c.grid, params, c.spec);
      if (fast.grid != ref.grid || fast.tokens.shape() != ref.tokens.shape()) return 1.0;
      double m = 0;
      for (int64_t k = 0; k < fast.tokens.size(); ++k)
        m = std::max(m, std::abs(fast.tokens.at(k) - ref.tokens.at(k)));
      return m;
    });
    line("oracle_equivalence", err <= 1e-10,
         "max_abs_err=" + fmt(err) + " trials=" + std::to_string(n));
  }

  // Reverse-mode gradients of the full pooling-attention block against
  // central differences.
  {
    const int n = opts.quick ? 5 : 20;
    const double err = run_trials(n, threads, [&](int i) {
      Rng rng(mix(opts.seed, 2, static_cast<uint64_t>(i)));
      SiteCase c;
      c.grid = {4, 4};
      c.d_in = 6;
      AttentionSpec& s = c.spec;
      s.kind = AttnKind::pooling;
      s.heads = 2;
      s.head_dim = 4;
      s.q_stride = {2, 2};
      s.kv_stride = {2, 2};
      s.pool_mode = PoolMode::depthwise_conv;
      s.relpos_mode = RelPosMode::decomposed;
      s.rel_q = s.rel_k = s.rel_v = true;
      s.residual_pooling = true;
      AttentionParams params = make_attention_params(s, c.d_in, c.grid, rng);
      Tensor x = rng.normal_tensor({prod(c.grid), c.d_in}, 0.5);
      auto f = [&](const Ctx& ctx, const Tensor& t) {
        return sum_all(ctx, pooling_attention(ctx, t, c.grid, params, s).tokens);
      };
      return grad_check(f, x, 1e-5);
    });
    line("grad_pooling_attention", err <= 1e-4,
         "max_rel_err=" + fmt(err) + " seeds=" + std::to_string(n));
  }

  // Relative-position bias depends only on coordinate differences: a common
  // translation of all coordinates leaves E_rel bit-identical.
  {
    const int n = opts.quick ? 200 : 1000;
    const double bad = run_trials(n, threads, [&](int i) {
      Rng rng(mix(opts.seed, 3, static_cast<uint64_t>(i)));
      const int rank = rng.uniform_int(0, 1) == 0 ? 2 : 3;
      Grid ext(static_cast<size_t>(rank));
      for (int a = 0; a < rank; ++a) ext[static_cast<size_t>(a)] = rng.uniform_int(2, 8);
      const RelPosMode mode = i % 2 == 0 ? RelPosMode::decomposed : RelPosMode::joint;
      const int64_t d = 2 * rng.uniform_int(1, 2);
      RelPosTables tables = RelPosTables::zeros(mode, ext, d);
      for (Tensor* t : tables.tensors())
        for (int64_t k = 0; k < t->size(); ++k) t->at(k) = rng.normal();
      const int64_t Lq = rng.uniform_int(1, 12), Lk = rng.uniform_int(1, 12);
      const int64_t h = rng.uniform_int(1, 2);
      Grid offset(static_cast<size_t>(rank));
      std::vector<std::vector<int64_t>> cq(static_cast<size_t>(rank)),
          ck(static_cast<size_t>(rank)), cq2, ck2;
      for (int a = 0; a < rank; ++a) {
        const int64_t S = ext[static_cast<size_t>(a)];
        const int64_t margin = rng.uniform_int(0, S - 1);
        offset[static_cast<size_t>(a)] = rng.uniform_int(0, margin);
        for (int64_t q = 0; q < Lq; ++q)
          cq[static_cast<size_t>(a)].push_back(rng.uniform_int(0, S - 1 - margin));
        for (int64_t k = 0; k < Lk; ++k)
          ck[static_cast<size_t>(a)].push_back(rng.uniform_int(0, S - 1 - margin));
      }
      cq2 = cq;
      ck2 = ck;
      for (int a = 0; a < rank; ++a) {
        for (int64_t& v : cq2[static_cast<size_t>(a)]) v += offset[static_cast<size_t>(a)];
        for (int64_t& v : ck2[static_cast<size_t>(a)]) v += offset[static_cast<size_t>(a)];
      }
      Tensor q = rng.normal_tensor({h, Lq, d});
      Ctx plain;
      Tensor e1 = relpos_bias(plain, q, tables, cq, ck);
      Tensor e2 = relpos_bias(plain, q, tables, cq2, ck2);
      return std::memcmp(e1.data(), e2.data(),
                         static_cast<size_t>(e1.size()) * sizeof(double)) == 0
                 ? 0.0
                 : 1.0;
    });
    line("relpos_shift_invariance", bad == 0.0,
         "mismatched_pairs=" + std::to_string(static_cast<int>(bad)) +
             " pairs=" + std::to_string(n));
  }

  // Window partition followed by merge restores the tokens bit-exactly.
  {
    const int n = opts.quick ? 30 : 100;
    const double bad = run_trials(n, threads, [&](int i) {
      Rng rng(mix(opts.seed, 4, static_cast<uint64_t>(i)));
      const int rank = rng.uniform_int(0, 1) == 0 ? 2 : 3;
      Grid grid(static_cast<size_t>(rank)), window(static_cast<size_t>(rank)),
          shift(static_cast<size_t>(rank));
      for (int a = 0; a < rank; ++a) {
        grid[static_cast<size_t>(a)] = rng.uniform_int(2, rank == 2 ? 9 : 5);
        window[static_cast<size_t>(a)] = rng.uniform_int(1, grid[static_cast<size_t>(a)]);
        shift[static_cast<size_t>(a)] = rng.uniform_int(0, window[static_cast<size_t>(a)] - 1);
      }
      const int64_t C = rng.uniform_int(1, 6);
      Tensor x = rng.normal_tensor({prod(grid), C});
      WindowInfo info = make_window_info(grid, window, shift);
      Ctx plain;
      Tensor back = window_merge(plain, window_partition(plain, x, info), info);
      return std::memcmp(x.data(), back.data(),
                         static_cast<size_t>(x.size()) * sizeof(double)) == 0
                 ? 0.0
                 : 1.0;
    });
    line("window_roundtrip", bad == 0.0, "trials=" + std::to_string(n));
  }

  // Closed-form table sizes.
  {
    const bool ok = relpos_table_size(RelPosMode::decomposed, {1, 56, 56}) == 223 &&
                    relpos_table_size(RelPosMode::joint, {1, 56, 56}) == 12321 &&
                    relpos_table_size(RelPosMode::decomposed, {8, 7, 7}, 4) == (15 + 13 + 13) * 4 &&
                    relpos_table_size(RelPosMode::joint, {8, 7, 7}, 4) == 15 * 13 * 13 * 4 &&
                    relpos_table_size(RelPosMode::none, {8, 7, 7}) == 0 &&
                    12321 / 223 >= 55;
    line("table_size_law", ok, "joint/decomposed@56x56=12321/223");
  }

  // Instrumented counters equal the analytic accountant, case by case.
  {
    const int n = opts.quick ? 20 : 60;
    const int64_t l_cap = opts.quick ? 64 : 144;
    const double bad = run_trials(n, threads, [&](int i) {
      Rng rng(mix(opts.seed, 5, static_cast<uint64_t>(i)));
      SiteCase c = random_site(rng, l_cap);
      AttentionParams params = make_attention_params(c.spec, c.d_in, c.grid, rng);
      Tensor x = rng.normal_tensor({prod(c.grid), c.d_in});
      FlopCounter measured;
      Ctx ctx{nullptr, &measured};
      attention(ctx, x, c.grid, params, c.spec);
      FlopCounter analytic;
      attention_flops(c.spec, c.grid, c.d_in, analytic);
      return measured.macs == analytic.macs && measured.pointwise == analytic.pointwise
                 ? 0.0
                 : 1.0;
    });
    line("flops_instrumented_vs_analytic", bad == 0.0, "trials=" + std::to_string(n));
  }

  return res;
}

}  // namespace mvit
