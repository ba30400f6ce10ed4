#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "oracles.hpp"

namespace oracle {

struct SuiteEntry {
  std::string name;
  std::size_t configs = 0;
  std::size_t passed = 0;
  std::size_t rejected = 0;  // draws discarded for sitting too close to a warp kink
  double worst_rel = 0.0;
  std::string worst;
  bool ok() const { return passed == configs; }
};

// Finite-difference checks of every differentiable op and of the full
// Gaussian sequence loss, `configs` random configurations each.
std::vector<SuiteEntry> run_gradient_suite(std::size_t configs, std::uint64_t seed);

}  // namespace oracle
