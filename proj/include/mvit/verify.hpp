#pragma once

// Property/invariant suite: oracle equivalence, gradient checks, relative
// position shift invariance, window round-trips, table-size laws, and
// instrumented-vs-analytic flop agreement. Cases are independently seeded
// and may run on several worker threads; the aggregated report is
// deterministic regardless of the thread count.

#include <cstdint>
#include <string>
#include <vector>

namespace mvit {

struct VerifyOptions {
  bool quick = false;    // subsets to L <= 64 and fewer trials
  uint64_t seed = 0;
  int threads = 0;       // 0: take MVIT_MECHANICS_THREADS (default 1)
  // Test hook: deliberately flips a sign inside the oracle-equivalence
  // property; the suite must then fail on that named property.
  bool fault_injection = false;
};

struct VerifyLine {
  std::string name;
  bool passed = false;
  std::string detail;  // measured error / counts, deterministic text
};

struct VerifyResult {
  std::vector<VerifyLine> lines;
  bool all_passed() const;
  std::string to_text() const;
};

VerifyResult run_verify(const VerifyOptions& opts);

// Worker cap from MVIT_MECHANICS_THREADS (>= 1; 1 when unset or invalid).
int thread_count_from_env();

}  // namespace mvit
