#include "moca/tokenizer.hpp"

#include "moca/errors.hpp"

namespace moca {

TokenizerParams make_tokenizer(ParameterStore& store, const std::string& name, Index features, Index d, Rng& rng) {
  TokenizerParams t;
  t.weight = &store.add(name + ".weight", uniform_init(features, d, 1, rng));
  t.bias = &store.add(name + ".bias", uniform_init(features, d, 1, rng));
  t.position = &store.add(name + ".position", uniform_init(features, d, 1, rng));
  return t;
}

Tensor tokenize(Tape& tape, const Matrix& x, const TokenizerParams& params) {
  const Index p = params.features();
  const Index d = params.width();
  if (x.cols() != p) {
    throw DimensionError("tokenize: expected " + std::to_string(p) + " features, got " + std::to_string(x.cols()));
  }
  Tensor w = tape.watch(*params.weight);
  Tensor b = tape.watch(*params.bias);
  Tensor pos = tape.watch(*params.position);

  const Index rows = x.rows();
  const Matrix offset = b.value() + pos.value();
  Matrix out(rows * p, d);
  for (Index i = 0; i < rows; ++i) {
    out.middleRows(i * p, p) = (w.value().array().colwise() * x.row(i).transpose().array()).matrix() + offset;
  }
  auto xs = std::make_shared<const Matrix>(x);
  const Tensor ins[] = {w, b, pos};
  Tape* tp = &tape;
  return tape.record(std::move(out), ins, [w, b, pos, xs, rows, p, d, tp](const Matrix& g) {
    Matrix dw = Matrix::Zero(p, d);
    Matrix db = Matrix::Zero(p, d);
    for (Index i = 0; i < rows; ++i) {
      const auto block = g.middleRows(i * p, p);
      db += block;
      dw += (block.array().colwise() * xs->row(i).transpose().array()).matrix();
    }
    tp->accumulate(w, dw);
    tp->accumulate(b, db);
    tp->accumulate(pos, db);
  });
}

}  // namespace moca
