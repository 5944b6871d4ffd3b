#pragma once

// Modular treatment/outcome transformer for treatment-effect estimation.
//
// The treatment module maps covariates to a propensity score and a single
// treatment token. The outcome module attends, per arm, to its own linear and
// self-attention branches and to the treatment token. In one-way mode the
// token reaches the outcome module only through detach(), and the two
// modules are trained in sequence, so the outcome loss never produces a
// gradient for any treatment parameter.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moca/dataset.hpp"
#include "moca/nn.hpp"
#include "moca/tokenizer.hpp"
#include "moca/training.hpp"

namespace moca {

enum class FeedbackMode { kOneWay, kTwoWay };

std::string to_string(FeedbackMode mode);
FeedbackMode parse_feedback_mode(std::string_view text);

struct MocaConfig {
  Index features = 0;
  Index width = 16;
  Index heads = 2;
  Index depth = 1;
  Index ffn_width = 64;
  Scalar gate_temperature = 1.0;
  Index gate_hidden = 32;
  Index head_hidden = 32;
  Scalar lr_treatment = 1e-3;
  Scalar lr_outcome = 1e-3;
  int epochs_treatment = 300;
  int epochs_outcome = 300;
  Index batch_size = 64;
  /// Early-stopping patience in epochs; 0 disables early stopping.
  int patience = 30;
  std::uint64_t seed = 0;
  FeedbackMode mode = FeedbackMode::kOneWay;
  /// Weight of the treatment loss in the two-way joint objective.
  Scalar joint_weight = 1.0;
  bool standardize_covariates = true;
  bool standardize_outcome = true;
  /// One-way step 2 normally feeds the frozen treatment outputs in as
  /// precomputed constants. When set, the treatment module is re-run on every
  /// training tape and its outputs pass through detach instead.
  bool track_frozen_treatment = false;

  void validate() const;
};

struct TreatmentForwardOut {
  Tensor propensity;    // rows x 1, in (0, 1)
  Tensor logit;         // rows x 1
  Tensor token;         // rows x d, one treatment token per unit
  Tensor gate_weights;  // rows x 2 (linear, attention)
};

struct OutcomeForwardOut {
  Tensor mu0;    // rows x 1
  Tensor mu1;    // rows x 1
  Tensor gate0;  // rows x 3 (linear, attention, treatment)
  Tensor gate1;
};

class TreatmentModule {
 public:
  TreatmentModule(const MocaConfig& config, Rng rng);
  TreatmentModule(TreatmentModule&&) = default;
  TreatmentModule& operator=(TreatmentModule&&) = default;

  TreatmentForwardOut forward(Tape& tape, const Matrix& x) const;

  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

 private:
  ParameterStore store_;
  TokenizerParams tok_linear_;
  TokenizerParams tok_attention_;
  std::vector<EncoderLayerParams> encoder_;
  Parameter* query_ = nullptr;
  MhaParams pool_linear_;
  MhaParams pool_attention_;
  GateParams gate_;
  Linear head_hidden_;
  Linear head_out_;
};

class OutcomeModule {
 public:
  OutcomeModule(const MocaConfig& config, Rng rng);
  OutcomeModule(OutcomeModule&&) = default;
  OutcomeModule& operator=(OutcomeModule&&) = default;

  /// In one-way mode the treatment token and propensity enter through detach.
  /// The propensity is carried but not consumed by any outcome computation.
  OutcomeForwardOut forward(Tape& tape, const Matrix& x, const TreatmentForwardOut& treatment,
                            FeedbackMode mode) const;

  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

 private:
  struct Arm {
    Parameter* query = nullptr;
    GateParams gate;
    Linear head_hidden;
    Linear head_out;
  };

  ParameterStore store_;
  TokenizerParams tok_linear_;
  TokenizerParams tok_attention_;
  std::vector<EncoderLayerParams> encoder_;
  MhaParams pool_linear_;
  MhaParams pool_attention_;
  MhaParams pool_treatment_;
  Arm arms_[2];
};

/// Binary cross-entropy of the propensity head.
Tensor treatment_loss(Tape& tape, const TreatmentModule& treatment, const Matrix& x, const Vector& t);

/// Factual two-arm loss, each arm normalized by its own unit count. An arm
/// absent from the batch contributes nothing.
Tensor outcome_loss(Tape& tape, const TreatmentModule& treatment, const OutcomeModule& outcome, const Matrix& x,
                    const Vector& t, const Vector& y, FeedbackMode mode);

/// Step 1: minimizes the treatment loss over the treatment parameters only.
/// Data are expected already standardized.
LossTrace train_treatment(const Dataset& train, const Dataset* validation, TreatmentModule& treatment,
                          const MocaConfig& config, Rng& rng);

/// Step 2 (one-way): minimizes the outcome loss over the outcome parameters
/// with the treatment module frozen. Throws std::logic_error if any treatment
/// parameter ever receives a non-zero gradient.
LossTrace train_outcome(const Dataset& train, const Dataset* validation, TreatmentModule& treatment,
                        OutcomeModule& outcome, const MocaConfig& config, Rng& rng);

/// Two-way variant: one loop over L_Y + joint_weight * L_T with no detach.
LossTrace train_joint(const Dataset& train, const Dataset* validation, TreatmentModule& treatment,
                      OutcomeModule& outcome, const MocaConfig& config, Rng& rng);

struct EstimateResult {
  Vector cate;
  Scalar ate = 0;
  Vector propensity;
  Vector mu0;
  Vector mu1;
};

class MocaModel {
 public:
  explicit MocaModel(MocaConfig config);
  MocaModel(MocaModel&&) = default;
  MocaModel& operator=(MocaModel&&) = default;

  const MocaConfig& config() const { return config_; }
  TreatmentModule& treatment() { return treatment_; }
  const TreatmentModule& treatment() const { return treatment_; }
  OutcomeModule& outcome() { return outcome_; }
  const OutcomeModule& outcome() const { return outcome_; }
  Standardizer& standardizer() { return standardizer_; }
  const Standardizer& standardizer() const { return standardizer_; }

  LossTrace treatment_trace;
  LossTrace outcome_trace;

 private:
  MocaConfig config_;
  Standardizer standardizer_;
  TreatmentModule treatment_;
  OutcomeModule outcome_;
};

/// Fits on `train`, using `validation` (when given) for early stopping.
/// One-way: treatment then outcome. Two-way: joint loop.
MocaModel fit(const Dataset& train, const Dataset* validation, MocaConfig config);

/// Per-unit CATE, ATE as its mean, and propensities, on the original outcome scale.
EstimateResult estimate(const MocaModel& model, const Matrix& x);

/// Copies of all parameter values, in registry order.
std::vector<Matrix> snapshot(const ParameterStore& store);
void restore(ParameterStore& store, const std::vector<Matrix>& values);

}  // namespace moca
