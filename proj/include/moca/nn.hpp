#pragma once

// Differentiable building blocks: linear layers, multi-head attention,
// post-norm transformer encoder layers and the branch fusion gate.

#include <deque>
#include <string>
#include <vector>

#include "moca/rng.hpp"
#include "moca/tensor.hpp"

namespace moca {

/// Owns named parameters with stable addresses.
class ParameterStore {
 public:
  Parameter& add(std::string name, Matrix value);
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }
  void zero_grad();

 private:
  std::deque<Parameter> params_;
};

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
Matrix uniform_init(Index rows, Index cols, Index fan_in, Rng& rng);

struct Linear {
  Parameter* weight = nullptr;  // in x out
  Parameter* bias = nullptr;    // 1 x out
};

Linear make_linear(ParameterStore& store, const std::string& name, Index in, Index out, Rng& rng);
Tensor apply(Tape& tape, const Linear& layer, const Tensor& x);

struct MhaParams {
  Parameter* wq = nullptr;
  Parameter* wk = nullptr;
  Parameter* wv = nullptr;
  Parameter* wo = nullptr;
  Index heads = 1;

  Index width() const { return wq->value.rows(); }
};

MhaParams make_mha(ParameterStore& store, const std::string& name, Index d, Index heads, Rng& rng);

/// Multi-head attention over `groups` independent blocks of rows.
/// query (groups*nq x d), keys/values (groups*nk x d) -> (groups*nq x d).
Tensor multi_head_attention(Tape& tape, const Tensor& query, const Tensor& keys, const Tensor& values,
                            const MhaParams& params, Index groups = 1);

/// Summarizes each group of token rows in `tokens` with a single learned
/// query (1 x d). Returns one row per group.
Tensor query_pool(Tape& tape, const Tensor& query, const Tensor& tokens, const MhaParams& params, Index groups = 1);

struct EncoderLayerParams {
  MhaParams attention;
  Linear ffn_in;   // d -> d_ff
  Linear ffn_out;  // d_ff -> d
  Parameter* norm1_gain = nullptr;
  Parameter* norm1_bias = nullptr;
  Parameter* norm2_gain = nullptr;
  Parameter* norm2_bias = nullptr;
};

EncoderLayerParams make_encoder_layer(ParameterStore& store, const std::string& name, Index d, Index heads,
                                      Index d_ff, Rng& rng);

/// Post-norm layer: H~ = LN(H + MHA(H)), H+ = LN(H~ + FFN(H~)).
Tensor self_attention_encode(Tape& tape, const Tensor& tokens, const EncoderLayerParams& params, Index groups = 1);

Tensor feed_forward(Tape& tape, const Linear& first, const Linear& second, const Tensor& x);

struct GateParams {
  Linear hidden;  // k*d -> d_g
  Linear logits;  // d_g -> k
  Scalar temperature = 1.0;
  Index branches = 2;
};

GateParams make_gate(ParameterStore& store, const std::string& name, Index d, Index branches, Index hidden,
                     Scalar temperature, Rng& rng);

struct GateOutput {
  Tensor weights;          // rows x k, rows sum to 1
  Tensor fused;            // rows x d, sum_j w_j z_j
  Tensor weighted_concat;  // rows x k*d, [w_1 z_1, ..., w_k z_k]
};

GateOutput fuse_gate(Tape& tape, std::span<const Tensor> summaries, const GateParams& params);

}  // namespace moca
