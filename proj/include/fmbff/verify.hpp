#pragma once

#include <string>
#include <vector>

namespace fmbff {

// Finite-difference check of one architectural block in 64-bit at a small,
// fixed configuration.
struct BlockCheck {
  std::string block;
  std::string worst_leaf;  // leaf with the largest relative error
  double max_rel_error = 0;
  double tolerance = 0;
  int leaves = 0;
  bool passed = false;
};

// fmcab, biffm, vitm, frm, model
const std::vector<std::string>& gradcheck_block_names();

// `selection` is "all" or a comma-separated list of block names. Throws
// ConfigError on an unknown name. Honors set_injected_fault().
std::vector<BlockCheck> run_gradcheck_suite(const std::string& selection = "all");

}  // namespace fmbff
