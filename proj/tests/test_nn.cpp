#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "moca/errors.hpp"
#include "moca/tokenizer.hpp"

using namespace moca;
using moca::testing::attention_oracle;
using moca::testing::check_parameters;
using moca::testing::random_matrix;

namespace {

constexpr Scalar kGradTol = 1e-4;

Matrix infer(const std::function<Tensor(Tape&)>& f) {
  Tape tape(Tape::Mode::kInference);
  return f(tape).value();
}

}  // namespace

// ---- multi-head attention ----------------------------------------------------

TEST(MultiHeadAttention, SingleKeyGivesProjectedValue) {
  Rng rng(1);
  ParameterStore store;
  const MhaParams mha = make_mha(store, "mha", 6, 2, rng);
  const Matrix value = random_matrix(1, 6, rng);
  const Matrix expected = value * mha.wv->value * mha.wo->value;
  for (int s = 0; s < 3; ++s) {
    const Matrix query = random_matrix(2, 6, rng, 5.0);
    const Matrix got = infer([&](Tape& t) { return multi_head_attention(t, Tensor(query), Tensor(random_matrix(1, 6, rng)), Tensor(value), mha); });
    for (Index i = 0; i < 2; ++i) EXPECT_LT((got.row(i) - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MultiHeadAttention, IdenticalKeysGiveUniformWeights) {
  Rng rng(2);
  const Matrix key = random_matrix(1, 4, rng);
  Matrix keys(5, 4);
  keys.rowwise() = key.row(0);
  const Matrix p = attention_probabilities(random_matrix(3, 4, rng), keys, 1, 2);
  EXPECT_LT((p.array() - 0.2).abs().maxCoeff(), 1e-12);
}

TEST(MultiHeadAttention, SingleHeadMatchesClosedForm) {
  Rng rng(3);
  for (int s = 0; s < 10; ++s) {
    ParameterStore store;
    const MhaParams mha = make_mha(store, "mha", 4, 1, rng);
    const Matrix q = random_matrix(2, 4, rng), h = random_matrix(3, 4, rng);
    const Matrix got = infer([&](Tape& t) { return multi_head_attention(t, Tensor(q), Tensor(h), Tensor(h), mha); });
    const Matrix oracle =
        attention_oracle(q * mha.wq->value, h * mha.wk->value, h * mha.wv->value, 1, 1) * mha.wo->value;
    EXPECT_LT((got - oracle).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(MultiHeadAttention, RejectsIndivisibleWidth) {
  Rng rng(4);
  ParameterStore store;
  EXPECT_THROW(make_mha(store, "mha", 6, 4, rng), ConfigError);
}

TEST(MultiHeadAttention, GradientCheck) {
  for (int s = 0; s < 10; ++s) {
    Rng rng(40 + static_cast<std::uint64_t>(s));
    ParameterStore store;
    const MhaParams mha = make_mha(store, "mha", 4, 2, rng);
    const Matrix q = random_matrix(4, 4, rng), h = random_matrix(6, 4, rng), w = random_matrix(4, 4, rng);
    const Scalar err = check_parameters(
        [&](Tape& t) { return sum(mul(multi_head_attention(t, Tensor(q), Tensor(h), Tensor(h), mha, 2), Tensor(w))); },
        store.all());
    EXPECT_LT(err, kGradTol) << "seed " << s;
  }
}

// ---- encoder ----------------------------------------------------------------------

TEST(Encoder, PreservesShape) {
  Rng rng(5);
  for (int s = 0; s < 5; ++s) {
    const Index p = 1 + static_cast<Index>(rng.below(6)), d = 2 * (1 + static_cast<Index>(rng.below(4)));
    ParameterStore store;
    const EncoderLayerParams enc = make_encoder_layer(store, "enc", d, 2, 4 * d, rng);
    const Matrix h = random_matrix(p, d, rng);
    const Matrix out = infer([&](Tape& t) { return self_attention_encode(t, Tensor(h), enc); });
    EXPECT_EQ(out.rows(), p);
    EXPECT_EQ(out.cols(), d);
  }
}

TEST(Encoder, PermutationEquivariant) {
  Rng rng(6);
  ParameterStore store;
  const EncoderLayerParams enc = make_encoder_layer(store, "enc", 8, 2, 16, rng);
  const Matrix h = random_matrix(5, 8, rng);
  const std::vector<Index> perm{3, 0, 4, 1, 2};
  Matrix permuted(5, 8);
  for (Index i = 0; i < 5; ++i) permuted.row(i) = h.row(perm[static_cast<std::size_t>(i)]);
  const Matrix out = infer([&](Tape& t) { return self_attention_encode(t, Tensor(h), enc); });
  const Matrix out_perm = infer([&](Tape& t) { return self_attention_encode(t, Tensor(permuted), enc); });
  for (Index i = 0; i < 5; ++i) {
    EXPECT_LT((out_perm.row(i) - out.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Encoder, RejectsNarrowFeedForward) {
  Rng rng(7);
  ParameterStore store;
  EXPECT_THROW(make_encoder_layer(store, "enc", 8, 2, 4, rng), ConfigError);
}

TEST(Encoder, GradientCheck) {
  for (int s = 0; s < 10; ++s) {
    Rng rng(70 + static_cast<std::uint64_t>(s));
    ParameterStore store;
    const EncoderLayerParams enc = make_encoder_layer(store, "enc", 4, 2, 8, rng);
    const Matrix h = random_matrix(6, 4, rng), w = random_matrix(6, 4, rng);
    const Scalar err = check_parameters(
        [&](Tape& t) { return sum(mul(self_attention_encode(t, Tensor(h), enc, 2), Tensor(w))); }, store.all());
    EXPECT_LT(err, kGradTol) << "seed " << s;
  }
}

TEST(Encoder, InputGradientCheck) {
  for (int s = 0; s < 10; ++s) {
    Rng rng(170 + static_cast<std::uint64_t>(s));
    ParameterStore store;
    const EncoderLayerParams enc = make_encoder_layer(store, "enc", 4, 2, 8, rng);
    const Scalar err = moca::testing::check_op(
        [&](Tape& t, const std::vector<Tensor>& a) { return self_attention_encode(t, a[0], enc, 3); },
        {random_matrix(9, 4, rng)}, 900 + static_cast<std::uint64_t>(s));
    EXPECT_LT(err, kGradTol) << "seed " << s;
  }
}

// ---- query pooling -----------------------------------------------------------

TEST(QueryPool, SingleTokenGivesProjectedToken) {
  Rng rng(8);
  ParameterStore store;
  const MhaParams mha = make_mha(store, "pool", 4, 2, rng);
  const Matrix token = random_matrix(1, 4, rng);
  const Matrix got = infer([&](Tape& t) { return query_pool(t, Tensor(random_matrix(1, 4, rng)), Tensor(token), mha); });
  EXPECT_LT((got - token * mha.wv->value * mha.wo->value).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(QueryPool, IdenticalTokensMatchSingleToken) {
  Rng rng(9);
  ParameterStore store;
  const MhaParams mha = make_mha(store, "pool", 4, 2, rng);
  const Matrix q = random_matrix(1, 4, rng), token = random_matrix(1, 4, rng);
  Matrix many(6, 4);
  many.rowwise() = token.row(0);
  const Matrix one = infer([&](Tape& t) { return query_pool(t, Tensor(q), Tensor(token), mha); });
  const Matrix six = infer([&](Tape& t) { return query_pool(t, Tensor(q), Tensor(many), mha); });
  EXPECT_LT((one - six).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(QueryPool, MatchesBruteForcePerGroup) {
  Rng rng(10);
  ParameterStore store;
  const MhaParams mha = make_mha(store, "pool", 6, 3, rng);
  const Index groups = 4, p = 5;
  const Matrix q = random_matrix(1, 6, rng), h = random_matrix(groups * p, 6, rng);
  const Matrix got = infer([&](Tape& t) { return query_pool(t, Tensor(q), Tensor(h), mha, groups); });
  ASSERT_EQ(got.rows(), groups);
  for (Index g = 0; g < groups; ++g) {
    const Matrix hg = h.middleRows(g * p, p);
    const Matrix oracle = attention_oracle(q * mha.wq->value, hg * mha.wk->value, hg * mha.wv->value, 1, 3) * mha.wo->value;
    EXPECT_LT((got.row(g) - oracle).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(QueryPool, GradientCheck) {
  for (int s = 0; s < 10; ++s) {
    Rng rng(100 + static_cast<std::uint64_t>(s));
    ParameterStore store;
    const MhaParams mha = make_mha(store, "pool", 4, 2, rng);
    Parameter& query = store.add("query", random_matrix(1, 4, rng));
    const Matrix h = random_matrix(9, 4, rng), w = random_matrix(3, 4, rng);
    const Scalar err = check_parameters(
        [&](Tape& t) { return sum(mul(query_pool(t, t.watch(query), Tensor(h), mha, 3), Tensor(w))); }, store.all());
    EXPECT_LT(err, kGradTol) << "seed " << s;
  }
}

// ---- gate --------------------------------------------------------------------------

TEST(Gate, IdenticalSummariesFuseToThatSummary) {
  Rng rng(11);
  ParameterStore store;
  const GateParams gate = make_gate(store, "gate", 4, 3, 8, 0.7, rng);
  const Tensor z(random_matrix(2, 4, rng));
  const Tensor zs[] = {z, z, z};
  Tape tape(Tape::Mode::kInference);
  const GateOutput out = fuse_gate(tape, zs, gate);
  EXPECT_LT((out.fused.value() - z.value()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Gate, ZeroLogitLayerGivesUniformWeights) {
  Rng rng(12);
  ParameterStore store;
  const GateParams gate = make_gate(store, "gate", 4, 3, 8, 1.0, rng);
  gate.logits.weight->value.setZero();
  gate.logits.bias->value.setZero();
  const Tensor zs[] = {Tensor(random_matrix(2, 4, rng)), Tensor(random_matrix(2, 4, rng)), Tensor(random_matrix(2, 4, rng))};
  Tape tape(Tape::Mode::kInference);
  EXPECT_LT((fuse_gate(tape, zs, gate).weights.value().array() - 1.0 / 3).abs().maxCoeff(), 1e-15);
}

TEST(Gate, HandSetLogits) {
  Rng rng(13);
  ParameterStore store;
  const GateParams gate = make_gate(store, "gate", 3, 2, 4, 1.0, rng);
  gate.logits.weight->value.setZero();
  gate.logits.bias->value << std::log(2.0), 0.0;
  const Matrix z1 = random_matrix(1, 3, rng), z2 = random_matrix(1, 3, rng);
  const Tensor zs[] = {Tensor(z1), Tensor(z2)};
  Tape tape(Tape::Mode::kInference);
  const GateOutput out = fuse_gate(tape, zs, gate);
  EXPECT_NEAR(out.weights.value()(0), 2.0 / 3, 1e-15);
  EXPECT_NEAR(out.weights.value()(1), 1.0 / 3, 1e-15);
  EXPECT_LT((out.fused.value() - (2 * z1 + z2) / 3).cwiseAbs().maxCoeff(), 1e-15);
  Matrix concat(1, 6);
  concat << 2 * z1 / 3, z2 / 3;
  EXPECT_LT((out.weighted_concat.value() - concat).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Gate, WeightsSumToOne) {
  Rng rng(14);
  for (int s = 0; s < 20; ++s) {
    ParameterStore store;
    const GateParams gate = make_gate(store, "gate", 4, 2 + static_cast<Index>(rng.below(2)), 8, rng.uniform(0.1, 10), rng);
    std::vector<Tensor> zs;
    for (Index j = 0; j < gate.branches; ++j) zs.emplace_back(random_matrix(5, 4, rng, 5.0));
    Tape tape(Tape::Mode::kInference);
    const Matrix w = fuse_gate(tape, zs, gate).weights.value();
    EXPECT_TRUE((w.array() >= 0).all());
    EXPECT_LT((w.rowwise().sum().array() - 1).abs().maxCoeff(), 1e-6);
  }
}

TEST(Gate, BranchCountMismatch) {
  Rng rng(15);
  ParameterStore store;
  const GateParams gate = make_gate(store, "gate", 4, 3, 8, 1.0, rng);
  const Tensor zs[] = {Tensor(Matrix::Zero(1, 4)), Tensor(Matrix::Zero(1, 4))};
  Tape tape;
  EXPECT_THROW(fuse_gate(tape, zs, gate), ConfigError);
  EXPECT_THROW(make_gate(store, "other", 4, 2, 8, 0.0, rng), ConfigError);
}

TEST(Gate, GradientCheck) {
  for (int s = 0; s < 10; ++s) {
    Rng rng(150 + static_cast<std::uint64_t>(s));
    ParameterStore store;
    const GateParams gate = make_gate(store, "gate", 3, 3, 5, 0.8, rng);
    const Matrix z[] = {random_matrix(4, 3, rng), random_matrix(4, 3, rng), random_matrix(4, 3, rng)};
    const Matrix w1 = random_matrix(4, 3, rng), w2 = random_matrix(4, 9, rng);
    const Scalar err = check_parameters(
        [&](Tape& t) {
          const Tensor zs[] = {Tensor(z[0]), Tensor(z[1]), Tensor(z[2])};
          const GateOutput out = fuse_gate(t, zs, gate);
          return add(sum(mul(out.fused, Tensor(w1))), sum(mul(out.weighted_concat, Tensor(w2))));
        },
        store.all());
    EXPECT_LT(err, kGradTol) << "seed " << s;
  }
}

// ---- tokenizer --------------------------------------------------------------------

TEST(Tokenizer, ZeroInputGivesBiasPlusPosition) {
  Rng rng(16);
  ParameterStore store;
  const TokenizerParams tok = make_tokenizer(store, "tok", 5, 4, rng);
  const Matrix out = infer([&](Tape& t) { return tokenize(t, Matrix::Zero(1, 5), tok); });
  EXPECT_EQ(out, tok.bias->value + tok.position->value);
}

TEST(Tokenizer, ZeroWeightsGivePositionTable) {
  Rng rng(17);
  ParameterStore store;
  const TokenizerParams tok = make_tokenizer(store, "tok", 3, 4, rng);
  tok.weight->value.setZero();
  tok.bias->value.setZero();
  const Matrix out = infer([&](Tape& t) { return tokenize(t, random_matrix(2, 3, rng), tok); });
  EXPECT_EQ(out.topRows(3), tok.position->value);
  EXPECT_EQ(out.bottomRows(3), tok.position->value);
}

TEST(Tokenizer, RowsFollowScalarEmbedding) {
  Rng rng(18);
  ParameterStore store;
  const TokenizerParams tok = make_tokenizer(store, "tok", 3, 2, rng);
  const Matrix x = random_matrix(2, 3, rng);
  const Matrix out = infer([&](Tape& t) { return tokenize(t, x, tok); });
  for (Index i = 0; i < 2; ++i) {
    for (Index j = 0; j < 3; ++j) {
      const Matrix expected = x(i, j) * tok.weight->value.row(j) + tok.bias->value.row(j) + tok.position->value.row(j);
      EXPECT_LT((out.row(i * 3 + j) - expected).cwiseAbs().maxCoeff(), 1e-15);
    }
  }
}

TEST(Tokenizer, FeatureCountMismatch) {
  Rng rng(19);
  ParameterStore store;
  const TokenizerParams tok = make_tokenizer(store, "tok", 3, 2, rng);
  Tape tape;
  EXPECT_THROW(tokenize(tape, Matrix::Zero(1, 4), tok), DimensionError);
}

TEST(Tokenizer, GradientCheck) {
  for (int s = 0; s < 10; ++s) {
    Rng rng(190 + static_cast<std::uint64_t>(s));
    ParameterStore store;
    const TokenizerParams tok = make_tokenizer(store, "tok", 3, 4, rng);
    const Matrix x = random_matrix(2, 3, rng), w = random_matrix(6, 4, rng);
    const Scalar err =
        check_parameters([&](Tape& t) { return sum(mul(gelu(tokenize(t, x, tok)), Tensor(w))); }, store.all());
    EXPECT_LT(err, kGradTol) << "seed " << s;
  }
}

TEST(ParameterStore, RejectsDuplicateNames) {
  ParameterStore store;
  store.add("w", Matrix::Zero(1, 1));
  EXPECT_THROW(store.add("w", Matrix::Zero(1, 1)), ConfigError);
}

TEST(ParameterStore, UniformInitRespectsFanIn) {
  Rng rng(20);
  const Matrix m = uniform_init(50, 40, 16, rng);
  EXPECT_LE(m.cwiseAbs().maxCoeff(), 0.25);
  EXPECT_GT(m.cwiseAbs().maxCoeff(), 0.24);
}
