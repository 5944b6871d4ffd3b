#pragma once

// Shared-representation baselines. TARNet: trunk Phi(x) with two outcome
// heads fit on the factual squared error. DragonNet adds a propensity head
// g(Phi(x)) and alpha * BCE to the same objective, so treatment-loss
// gradients flow into the trunk.

#include <cstdint>
#include <optional>

#include "moca/dataset.hpp"
#include "moca/moca_model.hpp"
#include "moca/nn.hpp"
#include "moca/training.hpp"

namespace moca {

struct SharedRepConfig {
  Index features = 0;
  Index width = 64;
  Index depth = 2;
  Index head_hidden = 32;
  bool propensity_head = false;  // true for DragonNet
  Scalar alpha = 1.0;
  Scalar learning_rate = 1e-3;
  int epochs = 300;
  Index batch_size = 64;
  int patience = 30;
  std::uint64_t seed = 0;
  bool standardize_covariates = true;
  bool standardize_outcome = true;

  void validate() const;
};

struct SharedRepForwardOut {
  Tensor mu0, mu1;
  std::optional<Tensor> propensity;
};

class SharedRepNet {
 public:
  /// Initializes trunk, outcome heads, then (DragonNet) the propensity head,
  /// so TARNet and DragonNet share trunk and outcome-head draws for a seed.
  SharedRepNet(const SharedRepConfig& config, Rng rng);
  SharedRepNet(SharedRepNet&&) = default;
  SharedRepNet& operator=(SharedRepNet&&) = default;

  SharedRepForwardOut forward(Tape& tape, const Matrix& x) const;

  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

 private:
  ParameterStore store_;
  std::vector<Linear> trunk_;
  Linear h0_hidden_, h0_out_, h1_hidden_, h1_out_;
  std::optional<Linear> g_hidden_, g_out_;
};

/// (1/n) sum (Y - [T mu1 + (1 - T) mu0])^2 plus alpha * BCE when the net has
/// a propensity head.
Tensor shared_rep_loss(Tape& tape, const SharedRepNet& net, const Matrix& x, const Vector& t, const Vector& y,
                       Scalar alpha);

struct SharedRepModel {
  SharedRepConfig config;
  Standardizer standardizer;
  SharedRepNet net;
  LossTrace trace;
};

/// DataError when an arm is empty.
SharedRepModel fit_shared_rep(const Dataset& train, const Dataset* validation, SharedRepConfig config);

EstimateResult estimate(const SharedRepModel& model, const Matrix& x);

}  // namespace moca
