#pragma once

// Replicate-level accuracy metrics and Rubin-style pooling of repeated fits.

#include <span>

#include "moca/tensor.hpp"

namespace moca {

inline constexpr Scalar kNormalQuantile975 = 1.96;

inline Scalar ate_bias(Scalar estimate, Scalar truth) { return estimate - truth; }

/// sqrt(mean over replicates of (estimate - truth)^2). UsageError when empty.
Scalar rmse(std::span<const Scalar> estimates, Scalar truth);

struct Summary {
  Scalar mean = 0;
  Scalar median = 0;
  Scalar sd = 0;  // sample SD (n - 1); 0 for a single value
  Index count = 0;
};

/// UsageError when empty.
Summary summarize(std::span<const Scalar> values);

/// sqrt(mean((predicted - truth)^2)). DimensionError on length mismatch.
Scalar cate_rmse(const Vector& predicted, const Vector& truth);

/// U = (1/n) (1/(n-1)) sum (tau_i - mean tau)^2. UsageError when n < 2.
Scalar within_run_variance(const Vector& cate);

struct RunEstimate {
  Scalar tau = 0;
  Scalar within = 0;  // U_j
};

struct PooledEstimate {
  Index runs = 0;
  Scalar tau_bar = 0;
  Scalar within = 0;   // U-bar
  Scalar between = 0;  // B, sample variance of tau_j
  Scalar total = 0;    // T = U-bar + (1 + 1/m) B
  Scalar ci_low = 0;
  Scalar ci_high = 0;
};

/// UsageError when fewer than two runs. The result does not depend on run order.
PooledEstimate rubin_pool(std::span<const RunEstimate> runs);

}  // namespace moca
