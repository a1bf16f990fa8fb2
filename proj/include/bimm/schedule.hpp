#pragma once

#include <cmath>
#include <cstddef>

#include "bimm/errors.hpp"

namespace bimm {

// Linear warmup to base_lr, then cosine decay to min_lr at total_steps.
// The ramp starts at zero, so callers skip the optimizer update on a
// zero-rate step (the optimizer itself rejects nonpositive rates).
struct LrSchedule {
  double base_lr = 1e-3;
  double min_lr = 1e-5;
  size_t warmup_steps = 40;
  size_t total_steps = 1000;

  void validate() const {
    if (!(base_lr > 0)) throw ConfigError("LrSchedule: base_lr must be positive");
    if (!(min_lr > 0) || min_lr > base_lr) {
      throw ConfigError("LrSchedule: need 0 < min_lr <= base_lr");
    }
    if (warmup_steps >= total_steps) {
      throw ConfigError("LrSchedule: need warmup_steps < total_steps");
    }
  }
};

inline double lr_at_step(const LrSchedule& s, size_t step) {
  s.validate();
  if (step < s.warmup_steps) {
    return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  if (step >= s.total_steps) return s.min_lr;
  double span = static_cast<double>(s.total_steps - s.warmup_steps);
  double progress = static_cast<double>(step - s.warmup_steps) / span;
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(M_PI * progress));
}

}  // namespace bimm
