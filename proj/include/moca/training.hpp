#pragma once

// Minibatch loop shared by every neural estimator: per-epoch shuffle, Adam
// steps, optional validation with early stopping and best-epoch restore.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "moca/dataset.hpp"
#include "moca/errors.hpp"
#include "moca/optim.hpp"
#include "moca/rng.hpp"

namespace moca {

struct LossTrace {
  std::vector<Scalar> train;       // per-epoch mean minibatch loss
  std::vector<Scalar> validation;  // per-epoch validation loss (empty without validation data)
  int best_epoch = -1;
};

struct LoopOptions {
  Scalar learning_rate = 1e-3;
  int epochs = 300;
  Index batch_size = 64;
  /// 0 disables early stopping.
  int patience = 30;
};

/// `batch_loss(tape, batch, rows)` builds the loss on a training tape, with
/// `rows` the batch's positions in `train`. `validation_loss(data)` evaluates
/// a whole split. `after_backward()` runs between backward and the step.
template <typename BatchLoss, typename ValidationLoss, typename AfterBackward>
LossTrace train_minibatches(const Dataset& train, const Dataset* validation, std::vector<Parameter*> params,
                            const LoopOptions& loop, Rng& rng, BatchLoss&& batch_loss,
                            ValidationLoss&& validation_loss, AfterBackward&& after_backward) {
  LossTrace trace;
  AdamOptions options;
  options.learning_rate = loop.learning_rate;
  Adam optimizer(params, options);
  optimizer.zero_grad();

  const bool early_stop = validation != nullptr && loop.patience > 0;
  std::vector<Matrix> best;
  Scalar best_loss = std::numeric_limits<Scalar>::infinity();

  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), Index{0});
  const Index batch = std::min(loop.batch_size, train.size());

  for (int epoch = 0; epoch < loop.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    Scalar total = 0;
    int batches = 0;
    for (Index start = 0; start < train.size(); start += batch) {
      const Index len = std::min(batch, train.size() - start);
      const std::span<const Index> rows(order.data() + start, static_cast<std::size_t>(len));
      Dataset mb = train.subset(rows);
      Tape tape;
      Tensor loss = batch_loss(tape, mb, rows);
      tape.backward(loss);
      after_backward();
      optimizer.step();
      optimizer.zero_grad();
      total += loss.item();
      ++batches;
    }
    trace.train.push_back(total / batches);
    if (!std::isfinite(trace.train.back())) throw NumericError("training loss became non-finite");

    if (validation != nullptr) {
      const Scalar v = validation_loss(*validation);
      trace.validation.push_back(v);
      if (v < best_loss) {
        best_loss = v;
        trace.best_epoch = epoch;
        if (early_stop) {
          best.clear();
          for (const Parameter* p : params) best.push_back(p->value);
        }
      } else if (early_stop && epoch - trace.best_epoch >= loop.patience) {
        break;
      }
    }
  }
  if (early_stop && !best.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
  }
  return trace;
}

}  // namespace moca
