#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "bimm/errors.hpp"

namespace bimm {

// A masking decision over a token grid: a partition of [0, n_tokens) into
// visible and masked indices, both sorted ascending.
struct MaskSpec {
  size_t n_tokens = 0;
  std::vector<size_t> visible_idx;
  std::vector<size_t> masked_idx;

  size_t n_visible() const { return visible_idx.size(); }
  size_t n_masked() const { return masked_idx.size(); }

  void validate() const {
    if (visible_idx.size() + masked_idx.size() != n_tokens) {
      throw ContractError("MaskSpec: visible + masked must partition the token set");
    }
    std::vector<char> seen(n_tokens, 0);
    for (size_t i : visible_idx) {
      if (i >= n_tokens || seen[i]) throw ContractError("MaskSpec: bad visible index");
      seen[i] = 1;
    }
    for (size_t i : masked_idx) {
      if (i >= n_tokens || seen[i]) throw ContractError("MaskSpec: bad masked index");
      seen[i] = 1;
    }
  }
};

// floor(x + 0.5), the rounding rule used for mask counts.
inline size_t round_half_up(double x) {
  return static_cast<size_t>(std::floor(x + 0.5));
}

}  // namespace bimm
