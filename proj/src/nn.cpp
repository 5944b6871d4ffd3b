#include "moca/nn.hpp"

#include <cmath>

#include "moca/errors.hpp"

namespace moca {

Parameter& ParameterStore::add(std::string name, Matrix value) {
  if (find(name) != nullptr) throw ConfigError("duplicate parameter name: " + name);
  return params_.emplace_back(std::move(name), std::move(value));
}

Parameter* ParameterStore::find(std::string_view name) {
  for (Parameter& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const Parameter* ParameterStore::find(std::string_view name) const {
  for (const Parameter& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (Parameter& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  out.reserve(params_.size());
  for (const Parameter& p : params_) out.push_back(&p);
  return out;
}

void ParameterStore::zero_grad() {
  for (Parameter& p : params_) p.zero_grad();
}

Matrix uniform_init(Index rows, Index cols, Index fan_in, Rng& rng) {
  const Scalar bound = 1.0 / std::sqrt(static_cast<Scalar>(std::max<Index>(fan_in, 1)));
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m(i) = rng.uniform(-bound, bound);
  return m;
}

Linear make_linear(ParameterStore& store, const std::string& name, Index in, Index out, Rng& rng) {
  Linear layer;
  layer.weight = &store.add(name + ".weight", uniform_init(in, out, in, rng));
  layer.bias = &store.add(name + ".bias", uniform_init(1, out, in, rng));
  return layer;
}

Tensor apply(Tape& tape, const Linear& layer, const Tensor& x) {
  return add_row(matmul(x, tape.watch(*layer.weight)), tape.watch(*layer.bias));
}

MhaParams make_mha(ParameterStore& store, const std::string& name, Index d, Index heads, Rng& rng) {
  if (heads <= 0 || d % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  MhaParams p;
  p.wq = &store.add(name + ".wq", uniform_init(d, d, d, rng));
  p.wk = &store.add(name + ".wk", uniform_init(d, d, d, rng));
  p.wv = &store.add(name + ".wv", uniform_init(d, d, d, rng));
  p.wo = &store.add(name + ".wo", uniform_init(d, d, d, rng));
  p.heads = heads;
  return p;
}

Tensor multi_head_attention(Tape& tape, const Tensor& query, const Tensor& keys, const Tensor& values,
                            const MhaParams& params, Index groups) {
  const Index d = params.width();
  if (d % params.heads != 0) throw ConfigError("attention width not divisible by head count");
  if (keys.rows() != values.rows()) {
    throw DimensionError("attention: keys and values have different token counts");
  }
  if (query.cols() != d || keys.cols() != d || values.cols() != d) {
    throw DimensionError("attention: inputs must have width " + std::to_string(d));
  }
  Tensor q = matmul(query, tape.watch(*params.wq));
  Tensor k = matmul(keys, tape.watch(*params.wk));
  Tensor v = matmul(values, tape.watch(*params.wv));
  Tensor heads = grouped_attention(q, k, v, groups, params.heads);
  return matmul(heads, tape.watch(*params.wo));
}

Tensor query_pool(Tape& tape, const Tensor& query, const Tensor& tokens, const MhaParams& params, Index groups) {
  if (query.rows() != 1) throw DimensionError("query_pool: query must be a single row");
  Tensor queries = groups == 1 ? query : repeat_rows(query, groups);
  return multi_head_attention(tape, queries, tokens, tokens, params, groups);
}

EncoderLayerParams make_encoder_layer(ParameterStore& store, const std::string& name, Index d, Index heads,
                                      Index d_ff, Rng& rng) {
  if (d_ff < d) throw ConfigError("feed-forward width must be at least the model width");
  EncoderLayerParams p;
  p.attention = make_mha(store, name + ".attn", d, heads, rng);
  p.ffn_in = make_linear(store, name + ".ffn1", d, d_ff, rng);
  p.ffn_out = make_linear(store, name + ".ffn2", d_ff, d, rng);
  p.norm1_gain = &store.add(name + ".norm1.gain", Matrix::Ones(1, d));
  p.norm1_bias = &store.add(name + ".norm1.bias", Matrix::Zero(1, d));
  p.norm2_gain = &store.add(name + ".norm2.gain", Matrix::Ones(1, d));
  p.norm2_bias = &store.add(name + ".norm2.bias", Matrix::Zero(1, d));
  return p;
}

Tensor feed_forward(Tape& tape, const Linear& first, const Linear& second, const Tensor& x) {
  return apply(tape, second, gelu(apply(tape, first, x)));
}

Tensor self_attention_encode(Tape& tape, const Tensor& tokens, const EncoderLayerParams& params, Index groups) {
  Tensor attended = multi_head_attention(tape, tokens, tokens, tokens, params.attention, groups);
  Tensor mid = layer_norm(add(tokens, attended), tape.watch(*params.norm1_gain), tape.watch(*params.norm1_bias));
  Tensor ff = feed_forward(tape, params.ffn_in, params.ffn_out, mid);
  return layer_norm(add(mid, ff), tape.watch(*params.norm2_gain), tape.watch(*params.norm2_bias));
}

GateParams make_gate(ParameterStore& store, const std::string& name, Index d, Index branches, Index hidden,
                     Scalar temperature, Rng& rng) {
  if (!(temperature > 0)) throw ConfigError("gate temperature must be positive");
  GateParams g;
  g.hidden = make_linear(store, name + ".hidden", branches * d, hidden, rng);
  g.logits = make_linear(store, name + ".logits", hidden, branches, rng);
  g.temperature = temperature;
  g.branches = branches;
  return g;
}

GateOutput fuse_gate(Tape& tape, std::span<const Tensor> summaries, const GateParams& params) {
  if (static_cast<Index>(summaries.size()) != params.branches) {
    throw ConfigError("fuse_gate: expected " + std::to_string(params.branches) + " summaries, got " +
                      std::to_string(summaries.size()));
  }
  const Index d = summaries[0].cols();
  for (const Tensor& z : summaries) {
    if (z.cols() != d || z.rows() != summaries[0].rows()) throw DimensionError("fuse_gate: summary shapes differ");
  }
  Tensor stacked = concat_cols(summaries);
  Tensor logits = feed_forward(tape, params.hidden, params.logits, stacked);

  GateOutput out;
  out.weights = softmax(logits, params.temperature);
  std::vector<Tensor> scaled;
  scaled.reserve(summaries.size());
  for (Index j = 0; j < params.branches; ++j) {
    scaled.push_back(mul_col(summaries[j], slice_cols(out.weights, j, 1)));
  }
  out.weighted_concat = concat_cols(scaled);
  out.fused = scaled[0];
  for (std::size_t j = 1; j < scaled.size(); ++j) out.fused = add(out.fused, scaled[j]);
  return out;
}

}  // namespace moca
