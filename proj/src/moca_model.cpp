#include "moca/moca_model.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "moca/errors.hpp"
#include "moca/optim.hpp"

namespace moca {

std::string to_string(FeedbackMode mode) { return mode == FeedbackMode::kOneWay ? "one-way" : "two-way"; }

FeedbackMode parse_feedback_mode(std::string_view text) {
  if (text == "one-way" || text == "oneway") return FeedbackMode::kOneWay;
  if (text == "two-way" || text == "twoway") return FeedbackMode::kTwoWay;
  throw ConfigError("unknown feedback mode: " + std::string(text));
}

void MocaConfig::validate() const {
  if (features <= 0) throw ConfigError("moca: feature count must be positive");
  if (heads <= 0 || width % heads != 0) {
    throw ConfigError("moca: width " + std::to_string(width) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (width < 2) throw ConfigError("moca: width must be at least 2");
  if (depth < 1) throw ConfigError("moca: encoder depth must be at least 1");
  if (ffn_width < width) throw ConfigError("moca: feed-forward width must be at least the model width");
  if (!(gate_temperature > 0)) throw ConfigError("moca: gate temperature must be positive");
  if (gate_hidden < 1 || head_hidden < 1) throw ConfigError("moca: hidden widths must be positive");
  if (epochs_treatment < 1 || epochs_outcome < 1) throw ConfigError("moca: epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("moca: batch size must be positive");
  if (patience < 0) throw ConfigError("moca: patience must be non-negative");
  if (!(lr_treatment > 0) || !(lr_outcome > 0)) throw ConfigError("moca: learning rates must be positive");
  if (joint_weight < 0) throw ConfigError("moca: joint weight must be non-negative");
}

// ---- modules --------------------------------------------------------------

TreatmentModule::TreatmentModule(const MocaConfig& c, Rng rng) {
  const Index d = c.width;
  tok_linear_ = make_tokenizer(store_, "treatment.tok_linear", c.features, d, rng);
  tok_attention_ = make_tokenizer(store_, "treatment.tok_attention", c.features, d, rng);
  for (Index l = 0; l < c.depth; ++l) {
    encoder_.push_back(make_encoder_layer(store_, "treatment.encoder" + std::to_string(l), d, c.heads, c.ffn_width, rng));
  }
  query_ = &store_.add("treatment.query", uniform_init(1, d, d, rng));
  pool_linear_ = make_mha(store_, "treatment.pool_linear", d, c.heads, rng);
  pool_attention_ = make_mha(store_, "treatment.pool_attention", d, c.heads, rng);
  gate_ = make_gate(store_, "treatment.gate", d, 2, c.gate_hidden, c.gate_temperature, rng);
  head_hidden_ = make_linear(store_, "treatment.head.hidden", 2 * d, c.head_hidden, rng);
  head_out_ = make_linear(store_, "treatment.head.out", c.head_hidden, 1, rng);
}

TreatmentForwardOut TreatmentModule::forward(Tape& tape, const Matrix& x) const {
  const Index rows = x.rows();
  Tensor linear_tokens = tokenize(tape, x, tok_linear_);
  Tensor attention_tokens = tokenize(tape, x, tok_attention_);
  for (const EncoderLayerParams& layer : encoder_) {
    attention_tokens = self_attention_encode(tape, attention_tokens, layer, rows);
  }
  Tensor query = tape.watch(*query_);
  const Tensor summaries[] = {query_pool(tape, query, linear_tokens, pool_linear_, rows),
                              query_pool(tape, query, attention_tokens, pool_attention_, rows)};
  GateOutput gate = fuse_gate(tape, summaries, gate_);

  TreatmentForwardOut out;
  out.logit = feed_forward(tape, head_hidden_, head_out_, gate.weighted_concat);
  out.propensity = sigmoid(out.logit);
  out.token = gate.fused;
  out.gate_weights = gate.weights;
  return out;
}

OutcomeModule::OutcomeModule(const MocaConfig& c, Rng rng) {
  const Index d = c.width;
  tok_linear_ = make_tokenizer(store_, "outcome.tok_linear", c.features, d, rng);
  tok_attention_ = make_tokenizer(store_, "outcome.tok_attention", c.features, d, rng);
  for (Index l = 0; l < c.depth; ++l) {
    encoder_.push_back(make_encoder_layer(store_, "outcome.encoder" + std::to_string(l), d, c.heads, c.ffn_width, rng));
  }
  pool_linear_ = make_mha(store_, "outcome.pool_linear", d, c.heads, rng);
  pool_attention_ = make_mha(store_, "outcome.pool_attention", d, c.heads, rng);
  pool_treatment_ = make_mha(store_, "outcome.pool_treatment", d, c.heads, rng);
  for (int t = 0; t < 2; ++t) {
    const std::string arm = "outcome.arm" + std::to_string(t);
    Arm& a = arms_[t];
    a.query = &store_.add(arm + ".query", uniform_init(1, d, d, rng));
    a.gate = make_gate(store_, arm + ".gate", d, 3, c.gate_hidden, c.gate_temperature, rng);
    a.head_hidden = make_linear(store_, arm + ".head.hidden", 3 * d, c.head_hidden, rng);
    a.head_out = make_linear(store_, arm + ".head.out", c.head_hidden, 1, rng);
  }
}

OutcomeForwardOut OutcomeModule::forward(Tape& tape, const Matrix& x, const TreatmentForwardOut& treatment,
                                         FeedbackMode mode) const {
  const Index rows = x.rows();
  const bool cut = mode == FeedbackMode::kOneWay;
  const Tensor token = cut ? detach(treatment.token) : treatment.token;
  if (token.rows() != rows) throw DimensionError("outcome: treatment token count differs from batch size");

  Tensor linear_tokens = tokenize(tape, x, tok_linear_);
  Tensor attention_tokens = tokenize(tape, x, tok_attention_);
  for (const EncoderLayerParams& layer : encoder_) {
    attention_tokens = self_attention_encode(tape, attention_tokens, layer, rows);
  }

  Tensor mu[2];
  Tensor weights[2];
  for (int t = 0; t < 2; ++t) {
    const Arm& arm = arms_[t];
    Tensor query = tape.watch(*arm.query);
    const Tensor summaries[] = {query_pool(tape, query, linear_tokens, pool_linear_, rows),
                                query_pool(tape, query, attention_tokens, pool_attention_, rows),
                                query_pool(tape, query, token, pool_treatment_, rows)};
    GateOutput gate = fuse_gate(tape, summaries, arm.gate);
    mu[t] = feed_forward(tape, arm.head_hidden, arm.head_out, gate.weighted_concat);
    weights[t] = gate.weights;
  }
  return {mu[0], mu[1], weights[0], weights[1]};
}

// ---- losses ---------------------------------------------------------------

namespace {

Tensor column(const Vector& v) { return Tensor(Matrix(v)); }

Tensor factual_loss(const OutcomeForwardOut& out, const Vector& t, const Vector& y) {
  const Index rows = t.size();
  const Index n1 = static_cast<Index>((t.array() > 0.5).count());
  const Index n0 = rows - n1;
  Matrix w0 = Matrix::Zero(rows, 1);
  Matrix w1 = Matrix::Zero(rows, 1);
  for (Index i = 0; i < rows; ++i) {
    if (t(i) > 0.5) {
      w1(i, 0) = 1.0 / static_cast<Scalar>(n1);
    } else {
      w0(i, 0) = 1.0 / static_cast<Scalar>(n0);
    }
  }
  Tensor target = column(y);
  return add(weighted_sse(out.mu0, target, Tensor(std::move(w0))), weighted_sse(out.mu1, target, Tensor(std::move(w1))));
}

struct JointLosses {
  Tensor treatment;
  Tensor outcome;
};

JointLosses both_losses(Tape& tape, const TreatmentModule& treatment, const OutcomeModule& outcome, const Matrix& x,
                        const Vector& t, const Vector& y, FeedbackMode mode) {
  TreatmentForwardOut tr = treatment.forward(tape, x);
  OutcomeForwardOut out = outcome.forward(tape, x, tr, mode);
  return {bce(tr.propensity, column(t)), factual_loss(out, t, y)};
}

TreatmentForwardOut frozen_outputs(const TreatmentModule& treatment, const Matrix& x) {
  constexpr Index kChunk = 256;
  const Index n = x.rows();
  Matrix token(n, 0), propensity(n, 1), logit(n, 1), gates(n, 2);
  for (Index start = 0; start < n; start += kChunk) {
    const Index len = std::min(kChunk, n - start);
    Tape tape(Tape::Mode::kInference);
    TreatmentForwardOut tr = treatment.forward(tape, x.middleRows(start, len));
    if (token.cols() == 0) token.resize(n, tr.token.cols());
    token.middleRows(start, len) = tr.token.value();
    propensity.middleRows(start, len) = tr.propensity.value();
    logit.middleRows(start, len) = tr.logit.value();
    gates.middleRows(start, len) = tr.gate_weights.value();
  }
  return {Tensor(std::move(propensity)), Tensor(std::move(logit)), Tensor(std::move(token)), Tensor(std::move(gates))};
}

Tensor gather(const Tensor& t, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), t.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = t.value().row(rows[i]);
  return Tensor(std::move(out));
}

TreatmentForwardOut select_rows(const TreatmentForwardOut& all, std::span<const Index> rows) {
  return {gather(all.propensity, rows), gather(all.logit, rows), gather(all.token, rows),
          gather(all.gate_weights, rows)};
}

void require_arms(const Dataset& data) {
  const Index n1 = data.treated_count();
  if (n1 == 0) throw DataError("outcome training: arm t=1 has no units");
  if (n1 == data.size()) throw DataError("outcome training: arm t=0 has no units");
}

std::vector<Parameter*> collect(std::initializer_list<ParameterStore*> stores) {
  std::vector<Parameter*> out;
  for (ParameterStore* s : stores) {
    auto ps = s->all();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

LoopOptions loop_options(const MocaConfig& c, Scalar lr, int epochs) {
  LoopOptions o;
  o.learning_rate = lr;
  o.epochs = epochs;
  o.batch_size = c.batch_size;
  o.patience = c.patience;
  return o;
}

}  // namespace

Tensor treatment_loss(Tape& tape, const TreatmentModule& treatment, const Matrix& x, const Vector& t) {
  return bce(treatment.forward(tape, x).propensity, column(t));
}

Tensor outcome_loss(Tape& tape, const TreatmentModule& treatment, const OutcomeModule& outcome, const Matrix& x,
                    const Vector& t, const Vector& y, FeedbackMode mode) {
  return both_losses(tape, treatment, outcome, x, t, y, mode).outcome;
}

// ---- training -------------------------------------------------------------

LossTrace train_treatment(const Dataset& train, const Dataset* validation, TreatmentModule& treatment,
                          const MocaConfig& config, Rng& rng) {
  train.validate();
  if (validation != nullptr) validation->validate();
  return train_minibatches(
      train, validation, treatment.parameters().all(), loop_options(config, config.lr_treatment, config.epochs_treatment), rng,
      [&](Tape& tape, const Dataset& mb, std::span<const Index>) { return treatment_loss(tape, treatment, mb.x, mb.t); },
      [&](const Dataset& v) {
        Tape tape(Tape::Mode::kInference);
        return treatment_loss(tape, treatment, v.x, v.t).item();
      },
      [] {});
}

LossTrace train_outcome(const Dataset& train, const Dataset* validation, TreatmentModule& treatment,
                        OutcomeModule& outcome, const MocaConfig& config, Rng& rng) {
  train.validate();
  require_arms(train);
  if (validation != nullptr) validation->validate();
  std::vector<Parameter*> frozen = treatment.parameters().all();
  for (Parameter* p : frozen) p->zero_grad();

  // The frozen module's outputs do not change during this stage, so by
  // default they are computed once and fed in as constants.
  const bool cached = !config.track_frozen_treatment;
  TreatmentForwardOut train_tr, valid_tr;
  if (cached) {
    train_tr = frozen_outputs(treatment, train.x);
    if (validation != nullptr) valid_tr = frozen_outputs(treatment, validation->x);
  }
  return train_minibatches(
      train, validation, outcome.parameters().all(), loop_options(config, config.lr_outcome, config.epochs_outcome), rng,
      [&](Tape& tape, const Dataset& mb, std::span<const Index> rows) {
        if (!cached) return outcome_loss(tape, treatment, outcome, mb.x, mb.t, mb.y, FeedbackMode::kOneWay);
        OutcomeForwardOut out = outcome.forward(tape, mb.x, select_rows(train_tr, rows), FeedbackMode::kOneWay);
        return factual_loss(out, mb.t, mb.y);
      },
      [&](const Dataset& v) {
        Tape tape(Tape::Mode::kInference);
        if (!cached) return outcome_loss(tape, treatment, outcome, v.x, v.t, v.y, FeedbackMode::kOneWay).item();
        return factual_loss(outcome.forward(tape, v.x, valid_tr, FeedbackMode::kOneWay), v.t, v.y).item();
      },
      [&] {
        for (const Parameter* p : frozen) {
          if (!p->grad.isZero(0.0)) {
            throw std::logic_error("cutting feedback violated: outcome loss reached " + p->name);
          }
        }
      });
}

LossTrace train_joint(const Dataset& train, const Dataset* validation, TreatmentModule& treatment,
                      OutcomeModule& outcome, const MocaConfig& config, Rng& rng) {
  train.validate();
  require_arms(train);
  if (validation != nullptr) validation->validate();
  auto joint = [&](Tape& tape, const Dataset& d, std::span<const Index> = {}) {
    JointLosses l = both_losses(tape, treatment, outcome, d.x, d.t, d.y, FeedbackMode::kTwoWay);
    return add(l.outcome, scale(l.treatment, config.joint_weight));
  };
  return train_minibatches(
      train, validation, collect({&treatment.parameters(), &outcome.parameters()}),
      loop_options(config, config.lr_outcome, config.epochs_outcome), rng, joint,
      [&](const Dataset& v) {
        Tape tape(Tape::Mode::kInference);
        return joint(tape, v).item();
      },
      [] {});
}

// ---- model ----------------------------------------------------------------

namespace {

MocaConfig checked(MocaConfig c) {
  c.validate();
  return c;
}

}  // namespace

MocaModel::MocaModel(MocaConfig config)
    : config_(checked(std::move(config))), standardizer_(Standardizer::identity(config_.features)),
      treatment_(config_, Rng(derive_seed(config_.seed, "init", 0))),
      outcome_(config_, Rng(derive_seed(config_.seed, "init", 1))) {}

MocaModel fit(const Dataset& train, const Dataset* validation, MocaConfig config) {
  train.validate();
  if (validation != nullptr) {
    validation->validate();
    if (validation->features() != train.features()) throw DimensionError("fit: validation feature count differs");
  }
  if (config.features == 0) config.features = train.features();
  if (config.features != train.features()) {
    throw DimensionError("fit: config expects " + std::to_string(config.features) + " features, data has " +
                         std::to_string(train.features()));
  }
  MocaModel model(config);
  model.standardizer() = Standardizer::fit(train, config.standardize_covariates, config.standardize_outcome);
  const Standardizer& s = model.standardizer();

  auto prepare = [&s](const Dataset& d) {
    Dataset out;
    out.x = s.transform_x(d.x);
    out.t = d.t;
    out.y = s.transform_y(d.y);
    return out;
  };
  const Dataset tr = prepare(train);
  std::optional<Dataset> va;
  if (validation != nullptr) va = prepare(*validation);
  const Dataset* vptr = va ? &*va : nullptr;

  Rng rng(derive_seed(config.seed, "shuffle"));
  if (config.mode == FeedbackMode::kOneWay) {
    require_arms(tr);
    model.treatment_trace = train_treatment(tr, vptr, model.treatment(), model.config(), rng);
    model.outcome_trace = train_outcome(tr, vptr, model.treatment(), model.outcome(), model.config(), rng);
  } else {
    model.outcome_trace = train_joint(tr, vptr, model.treatment(), model.outcome(), model.config(), rng);
  }
  return model;
}

EstimateResult estimate(const MocaModel& model, const Matrix& x) {
  if (x.cols() != model.config().features) throw DimensionError("estimate: feature count mismatch");
  const Standardizer& s = model.standardizer();
  const Matrix xs = s.transform_x(x);
  const Index n = xs.rows();
  EstimateResult r;
  r.mu0.resize(n);
  r.mu1.resize(n);
  r.propensity.resize(n);
  constexpr Index kChunk = 256;
  for (Index start = 0; start < n; start += kChunk) {
    const Index len = std::min(kChunk, n - start);
    Tape tape(Tape::Mode::kInference);
    const Matrix block = xs.middleRows(start, len);
    TreatmentForwardOut tr = model.treatment().forward(tape, block);
    OutcomeForwardOut out = model.outcome().forward(tape, block, tr, model.config().mode);
    for (Index i = 0; i < len; ++i) {
      r.mu0(start + i) = s.restore_y(out.mu0.value()(i, 0));
      r.mu1(start + i) = s.restore_y(out.mu1.value()(i, 0));
      r.propensity(start + i) = tr.propensity.value()(i, 0);
    }
  }
  r.cate = r.mu1 - r.mu0;
  r.ate = r.cate.mean();
  return r;
}

std::vector<Matrix> snapshot(const ParameterStore& store) {
  std::vector<Matrix> out;
  for (const Parameter* p : store.all()) out.push_back(p->value);
  return out;
}

void restore(ParameterStore& store, const std::vector<Matrix>& values) {
  auto params = store.all();
  if (params.size() != values.size()) throw DimensionError("restore: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

}  // namespace moca
