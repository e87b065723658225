#pragma once

// Frequency (positional) encoding. Each input scalar p expands to
// [sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)],
// scalars laid out one after another.

#include "narf/autodiff.hpp"
#include "narf/tensor.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace narf {

struct EncodingConfig {
  int position_levels = 10;  // for 3D positions
  int other_levels = 4;      // directions, twists, lengths

  void validate() const;
};

constexpr std::size_t encoded_size(std::size_t dims, int levels) {
  return 2 * static_cast<std::size_t>(levels) * dims;
}

std::vector<double> positional_encode(std::span<const double> p, int levels);
// Row-wise: [n x d] -> [n x 2Ld].
Tensor positional_encode(const Tensor& x, int levels);
// Differentiable version of the row-wise encoding.
ad::Var positional_encode(ad::Var x, int levels);

}  // namespace narf
