#pragma once

// Analytic cost accounting: parameter counts, MAC/flop counts that mirror
// the instrumented forward op for op, per-block attention memory estimates,
// and JSON/CSV report emission.

#include <string>
#include <vector>

#include "json.hpp"
#include "mvit/model.hpp"

namespace mvit {

// Scalar count of the relative-position tables: rows * d, with rows the
// product of (2*S_a - 1) for a joint table and the sum for decomposed
// per-axis tables; zero for the other modes.
int64_t relpos_table_size(RelPosMode mode, const Grid& extents, int64_t d = 1);

// Bytes of the attention matrices alone (8-byte reals), per-window for the
// windowed kinds.
long long attention_memory_estimate(const AttentionSpec& spec, const Grid& grid);

// Analytic mirrors of the instrumented forward. These must agree exactly
// with a FlopCounter threaded through the corresponding evaluation.
void attention_flops(const AttentionSpec& spec, const Grid& grid, int64_t d_in,
                     FlopCounter& fc);
void block_flops(const BlockPlan& bp, int64_t mlp_ratio, FlopCounter& fc);

int64_t attention_params(const AttentionSpec& spec, const Grid& grid, int64_t d_in);
int64_t block_params(const BlockPlan& bp, int64_t mlp_ratio);

struct BlockCost {
  int stage = 0, block = 0;
  std::string kind;
  int64_t l_q = 0, l_k = 0;  // tokens per attention site (per window if windowed)
  int64_t params = 0;
  long long macs = 0, flops = 0;
  long long act_bytes = 0;
};

struct CostReport {
  nlohmann::json config;
  std::vector<BlockCost> blocks;
  int64_t stem_params = 0, head_params = 0;
  long long stem_macs = 0, stem_flops = 0;
  long long head_macs = 0, head_flops = 0;
  int64_t total_params = 0;
  long long total_macs = 0, total_flops = 0, total_act_bytes = 0;

  nlohmann::json to_json() const;  // schema mvit-cost/1
  std::string to_csv() const;
};

CostReport count_cost(const ModelConfig& cfg);

}  // namespace mvit
