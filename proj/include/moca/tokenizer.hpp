#pragma once

#include <string>

#include "moca/nn.hpp"

namespace moca {

/// Per-feature scalar embedding: token j = x_j * W_j + b_j + p_j, with W_j,
/// b_j and the positional embedding p_j stored as rows of p x d matrices.
struct TokenizerParams {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;
  Parameter* position = nullptr;

  Index features() const { return weight->value.rows(); }
  Index width() const { return weight->value.cols(); }
};

TokenizerParams make_tokenizer(ParameterStore& store, const std::string& name, Index features, Index d, Rng& rng);

/// Tokenizes each row of `x` (rows x p) into p consecutive token rows, giving
/// (rows*p) x d.
Tensor tokenize(Tape& tape, const Matrix& x, const TokenizerParams& params);

}  // namespace moca
