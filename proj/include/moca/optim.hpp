#pragma once

#include <vector>

#include "moca/tensor.hpp"

namespace moca {

struct AdamOptions {
  Scalar learning_rate = 1e-3;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar epsilon = 1e-8;
};

/// Adaptive-moment optimizer with bias correction. Only parameters passed at
/// construction are ever updated; moments start at zero.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions options = {});

  void step();
  void zero_grad();

  long steps() const { return step_count_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<Parameter*>& parameters() const { return params_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Matrix> first_moment_;
  std::vector<Matrix> second_moment_;
  AdamOptions options_;
  long step_count_ = 0;
};

}  // namespace moca
