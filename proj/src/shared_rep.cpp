#include "moca/shared_rep.hpp"

#include "moca/errors.hpp"

namespace moca {

void SharedRepConfig::validate() const {
  if (features <= 0) throw ConfigError("shared-rep: feature count must be positive");
  if (width < 1 || depth < 1 || head_hidden < 1) throw ConfigError("shared-rep: widths and depth must be positive");
  if (alpha < 0) throw ConfigError("shared-rep: alpha must be non-negative");
  if (!(learning_rate > 0)) throw ConfigError("shared-rep: learning rate must be positive");
  if (epochs < 1 || batch_size < 1 || patience < 0) throw ConfigError("shared-rep: invalid training schedule");
}

SharedRepNet::SharedRepNet(const SharedRepConfig& c, Rng rng) {
  Index in = c.features;
  for (Index l = 0; l < c.depth; ++l) {
    trunk_.push_back(make_linear(store_, "trunk" + std::to_string(l), in, c.width, rng));
    in = c.width;
  }
  h0_hidden_ = make_linear(store_, "h0.hidden", c.width, c.head_hidden, rng);
  h0_out_ = make_linear(store_, "h0.out", c.head_hidden, 1, rng);
  h1_hidden_ = make_linear(store_, "h1.hidden", c.width, c.head_hidden, rng);
  h1_out_ = make_linear(store_, "h1.out", c.head_hidden, 1, rng);
  if (c.propensity_head) {
    g_hidden_ = make_linear(store_, "g.hidden", c.width, c.head_hidden, rng);
    g_out_ = make_linear(store_, "g.out", c.head_hidden, 1, rng);
  }
}

SharedRepForwardOut SharedRepNet::forward(Tape& tape, const Matrix& x) const {
  Tensor phi(x);
  for (const Linear& layer : trunk_) phi = gelu(apply(tape, layer, phi));
  SharedRepForwardOut out;
  out.mu0 = feed_forward(tape, h0_hidden_, h0_out_, phi);
  out.mu1 = feed_forward(tape, h1_hidden_, h1_out_, phi);
  if (g_hidden_) out.propensity = sigmoid(feed_forward(tape, *g_hidden_, *g_out_, phi));
  return out;
}

Tensor shared_rep_loss(Tape& tape, const SharedRepNet& net, const Matrix& x, const Vector& t, const Vector& y,
                       Scalar alpha) {
  SharedRepForwardOut out = net.forward(tape, x);
  const Tensor tt{Matrix(t)};
  const Tensor ct{Matrix((1.0 - t.array()).matrix())};
  Tensor factual = add(mul(tt, out.mu1), mul(ct, out.mu0));
  Tensor loss = mse(factual, Tensor(Matrix(y)));
  if (out.propensity) loss = add(loss, scale(bce(*out.propensity, tt), alpha));
  return loss;
}

SharedRepModel fit_shared_rep(const Dataset& train, const Dataset* validation, SharedRepConfig config) {
  train.validate();
  if (validation != nullptr) validation->validate();
  if (config.features == 0) config.features = train.features();
  if (config.features != train.features()) throw DimensionError("shared-rep: feature count mismatch");
  config.validate();
  const Index n1 = train.treated_count();
  if (n1 == 0 || n1 == train.size()) throw DataError("shared-rep: both arms must be non-empty");

  SharedRepModel model{config, Standardizer::fit(train, config.standardize_covariates, config.standardize_outcome),
                       SharedRepNet(config, Rng(derive_seed(config.seed, "init"))), {}};
  const Standardizer& s = model.standardizer;
  auto prepare = [&s](const Dataset& d) { return Dataset{s.transform_x(d.x), d.t, s.transform_y(d.y)}; };
  const Dataset tr = prepare(train);
  std::optional<Dataset> va;
  if (validation != nullptr) va = prepare(*validation);

  LoopOptions loop;
  loop.learning_rate = config.learning_rate;
  loop.epochs = config.epochs;
  loop.batch_size = config.batch_size;
  loop.patience = config.patience;
  Rng rng(derive_seed(config.seed, "shuffle"));
  const SharedRepNet& net = model.net;
  model.trace = train_minibatches(
      tr, va ? &*va : nullptr, model.net.parameters().all(), loop, rng,
      [&](Tape& tape, const Dataset& mb, std::span<const Index>) {
        return shared_rep_loss(tape, net, mb.x, mb.t, mb.y, config.alpha);
      },
      [&](const Dataset& v) {
        Tape tape(Tape::Mode::kInference);
        return shared_rep_loss(tape, net, v.x, v.t, v.y, config.alpha).item();
      },
      [] {});
  return model;
}

EstimateResult estimate(const SharedRepModel& model, const Matrix& x) {
  if (x.cols() != model.config.features) throw DimensionError("estimate: feature count mismatch");
  const Standardizer& s = model.standardizer;
  Tape tape(Tape::Mode::kInference);
  SharedRepForwardOut out = model.net.forward(tape, s.transform_x(x));
  EstimateResult r;
  r.mu0 = (out.mu0.value().col(0).array() * s.y_scale + s.y_mean).matrix();
  r.mu1 = (out.mu1.value().col(0).array() * s.y_scale + s.y_mean).matrix();
  r.cate = r.mu1 - r.mu0;
  r.ate = r.cate.mean();
  if (out.propensity) r.propensity = out.propensity->value().col(0);
  return r;
}

}  // namespace moca
