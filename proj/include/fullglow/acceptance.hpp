#pragma once

// End-to-end acceptance checks, one per criterion. Each check returns a
// verdict plus the measured numbers; run_acceptance prints one line per
// criterion.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace fullglow {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  bool skipped = false;
  std::string detail;
  double seconds = 0.0;
};

struct AcceptanceOptions {
  bool quick = false;  // skip the two training experiments (5 and 6)
  std::vector<int> only;  // empty = all criteria
  // Training-experiment scale.
  std::size_t train_pairs = 64;       // learning run
  std::size_t ablation_pairs = 2000;  // ablation runs: about one pass over the data
  std::size_t heldout_pairs = 16;
  std::size_t iterations = 2000;
  std::size_t n_flows = 4;
  std::size_t coupling_hidden = 64;
  std::uint64_t seed = 7;
};

CriterionResult check_invertibility();
CriterionResult check_change_of_variables();
CriterionResult check_gradients();
CriterionResult check_initialization();
/// Criterion 5 trains on train_pairs; criterion 6 trains all three modes on ablation_pairs.
std::vector<CriterionResult> check_learning_and_ablation(const AcceptanceOptions& options, std::ostream* progress);
CriterionResult check_temperature();
CriterionResult check_content_transfer();
CriterionResult check_checkpointed_gradients();
CriterionResult check_persistence();
CriterionResult check_boundary_maps();

/// Runs the selected criteria, printing "[PASS] <id> <name>: <detail>" lines.
/// Returns true when nothing failed.
bool run_acceptance(const AcceptanceOptions& options, std::ostream& out);

}  // namespace fullglow
