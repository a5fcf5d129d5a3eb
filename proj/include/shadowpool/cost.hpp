#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "shadowpool/common.hpp"

namespace shadowpool {

// Deterministic training-cost accounting. Layer evaluations are counted
// per example per LinearLayer; wall-clock is secondary and hardware-bound.
class CostLedger {
 public:
  struct Counters {
    uint64_t forward_evals = 0;
    uint64_t backward_evals = 0;
    uint64_t update_steps = 0;
    double wallclock_s = 0.0;

    uint64_t total_evals() const { return forward_evals + backward_evals; }
  };

  void add_forward(const std::string& run_id, uint64_t layers, uint64_t examples) {
    runs_[run_id].forward_evals += layers * examples;
  }
  void add_backward(const std::string& run_id, uint64_t layers, uint64_t examples) {
    runs_[run_id].backward_evals += layers * examples;
  }
  void add_update(const std::string& run_id, uint64_t steps = 1) {
    runs_[run_id].update_steps += steps;
  }
  void add_wallclock(const std::string& run_id, double seconds) {
    runs_[run_id].wallclock_s += seconds;
  }

  bool has_run(const std::string& run_id) const { return runs_.count(run_id) > 0; }

  const Counters& run(const std::string& run_id) const {
    auto it = runs_.find(run_id);
    if (it == runs_.end()) throw InputError("CostLedger: unknown run id '" + run_id + "'");
    return it->second;
  }

  const std::map<std::string, Counters>& runs() const { return runs_; }

  void merge(const CostLedger& other) {
    for (const auto& [id, c] : other.runs_) {
      Counters& mine = runs_[id];
      mine.forward_evals += c.forward_evals;
      mine.backward_evals += c.backward_evals;
      mine.update_steps += c.update_steps;
      mine.wallclock_s += c.wallclock_s;
    }
  }

 private:
  std::map<std::string, Counters> runs_;
};

struct CostComparison {
  double evaluation_ratio = 0.0;  // run_a / run_b
  double wallclock_ratio = 0.0;
  double evaluation_reduction_pct = 0.0;  // positive when run_a is cheaper
};

inline CostComparison cost_compare(const CostLedger& ledger, const std::string& run_a,
                                   const std::string& run_b) {
  const auto& a = ledger.run(run_a);
  const auto& b = ledger.run(run_b);
  if (b.total_evals() == 0) throw InputError("cost_compare: reference run has no evaluations");
  CostComparison cmp;
  cmp.evaluation_ratio =
      static_cast<double>(a.total_evals()) / static_cast<double>(b.total_evals());
  cmp.wallclock_ratio = b.wallclock_s > 0.0 ? a.wallclock_s / b.wallclock_s : 0.0;
  cmp.evaluation_reduction_pct = 100.0 * (1.0 - cmp.evaluation_ratio);
  return cmp;
}

// "down 88%" style formatting used in summary tables.
inline std::string format_reduction_pct(double pct) {
  const long rounded = std::lround(pct);
  if (rounded <= 0) return "-";
  return "v " + std::to_string(rounded) + "%";
}

}  // namespace shadowpool
