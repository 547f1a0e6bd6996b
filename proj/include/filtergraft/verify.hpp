#pragma once

#include <cstdint>
#include <string>

namespace fg {

// Randomized comparison of the training backend against the brute-force
// reference convolutions.
struct BackendCheck {
  int cases = 0;
  double max_depthwise = 0.0;
  double max_pointwise = 0.0;
  double max_block = 0.0;

  bool pass(double layer_tol = 1e-5, double block_tol = 1e-4) const {
    return max_depthwise <= layer_tol && max_pointwise <= layer_tol && max_block <= block_tol;
  }
  std::string summary() const;
};

BackendCheck verify_backend(int cases, std::uint64_t seed);

}  // namespace fg
