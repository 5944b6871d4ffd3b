#include "moca/optim.hpp"

#include <cmath>

namespace moca {

Adam::Adam(std::vector<Parameter*> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  first_moment_.reserve(params_.size());
  second_moment_.reserve(params_.size());
  for (const Parameter* p : params_) {
    first_moment_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    second_moment_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step() {
  ++step_count_;
  const Scalar b1 = options_.beta1;
  const Scalar b2 = options_.beta2;
  const Scalar c1 = 1.0 - std::pow(b1, static_cast<Scalar>(step_count_));
  const Scalar c2 = 1.0 - std::pow(b2, static_cast<Scalar>(step_count_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    Matrix& m = first_moment_[i];
    Matrix& v = second_moment_[i];
    m = b1 * m + (1.0 - b1) * p.grad;
    v = b2 * v + (1.0 - b2) * p.grad.cwiseAbs2();
    p.value.array() -= options_.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + options_.epsilon);
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

}  // namespace moca
