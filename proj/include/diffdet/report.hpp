#pragma once

// Side-by-side baseline/diffyolo comparison tables, one block per
// condition, as aligned text and CSV. Each cell pair is marked with which
// model scored better.

#include <string>
#include <vector>

#include "diffdet/metrics.hpp"

namespace diffdet::eval {

struct ComparisonDoc {
  std::string text;
  std::string csv;
};

// Reports are grouped by condition; every condition must contribute
// exactly one baseline and one diffyolo report.
ComparisonDoc render_report(const std::vector<EvalReport>& reports);

}  // namespace diffdet::eval
