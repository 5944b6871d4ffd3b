#include "moca/tensor.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "moca/errors.hpp"

namespace moca {
namespace {

std::string shape_str(const Tensor& t) {
  std::ostringstream os;
  os << "[" << t.rows() << "x" << t.cols() << "]";
  return os.str();
}

// Tape shared by the tracked inputs, or nullptr when none is tracked.
Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->tracked()) continue;
    if (tape != nullptr && tape != t->tape()) {
      throw UsageError("operation mixes tensors from different tapes");
    }
    tape = t->tape();
  }
  return tape;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

Scalar normal_cdf(Scalar x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
Scalar normal_pdf(Scalar x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

void softmax_rows_inplace(Matrix& s) {
  s.colwise() -= s.rowwise().maxCoeff();
  s = s.array().exp().matrix();
  s.array().colwise() /= s.rowwise().sum().array();
}

}  // namespace

Parameter::Parameter(std::string n, Matrix v)
    : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

Tensor::Tensor() : value_(std::make_shared<const Matrix>()) {}

Tensor::Tensor(Matrix value) : value_(std::make_shared<const Matrix>(std::move(value))) {}

Scalar Tensor::item() const {
  if (size() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(*this));
  return (*value_)(0, 0);
}

std::optional<std::size_t> Tensor::node() const {
  if (!tracked()) return std::nullopt;
  return node_;
}

// ---- Tape -----------------------------------------------------------------

Tape::Tape(Mode mode) : mode_(mode) {}

Tensor Tape::push(Node node) {
  Tensor t;
  t.value_ = node.value;
  t.tape_ = this;
  t.node_ = nodes_.size();
  nodes_.push_back(std::move(node));
  return t;
}

Tensor Tape::watch(Parameter& param) {
  if (auto it = watched_.find(&param); it != watched_.end()) return it->second;
  Tensor t;
  if (mode_ == Mode::kInference) {
    t = Tensor(param.value);
  } else {
    Node node;
    node.value = std::make_shared<const Matrix>(param.value);
    node.param = &param;
    t = push(std::move(node));
  }
  watched_.emplace(&param, t);
  return t;
}

Tensor Tape::leaf(Matrix value) {
  Node node;
  node.value = std::make_shared<const Matrix>(std::move(value));
  node.leaf_grad = Matrix::Zero(node.value->rows(), node.value->cols());
  return push(std::move(node));
}

Tensor Tape::record(Matrix value, std::span<const Tensor> inputs, BackwardFn backward) {
  if (mode_ == Mode::kInference) return Tensor(std::move(value));
  Node node;
  for (const Tensor& in : inputs) {
    if (!in.tracked()) continue;
    if (in.tape() != this) throw UsageError("input recorded on a different tape");
    node.inputs.push_back(in.node_);
  }
  if (node.inputs.empty()) return Tensor(std::move(value));
  node.value = std::make_shared<const Matrix>(std::move(value));
  node.backward = std::move(backward);
  return push(std::move(node));
}

void Tape::accumulate(const Tensor& t, const Matrix& g) {
  if (t.tape_ != this) return;
  Node& node = nodes_[t.node_];
  if (node.has_pending) {
    node.pending += g;
  } else {
    node.pending = g;
    node.has_pending = true;
  }
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape_ != this) throw UsageError("backward: loss is not tracked on this tape");
  if (loss.size() != 1) throw UsageError("backward: loss must be scalar, got " + shape_str(loss));

  for (Node& n : nodes_) n.has_pending = false;
  accumulate(loss, Matrix::Ones(1, 1));

  for (std::size_t i = loss.node_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_pending) continue;
    if (n.backward) {
      n.backward(n.pending);
    } else if (n.param != nullptr) {
      n.param->grad += n.pending;
    } else {
      n.leaf_grad += n.pending;
    }
    n.has_pending = false;
    n.pending.resize(0, 0);
  }
}

const Matrix& Tape::grad(const Tensor& t) const {
  if (t.tape_ != this) throw UsageError("grad: tensor is not tracked on this tape");
  const Node& n = nodes_[t.node_];
  if (n.backward) throw UsageError("grad: only leaf gradients are retained");
  if (n.param != nullptr) return n.param->grad;
  return n.leaf_grad;
}

void Tape::zero_grad() {
  for (Node& n : nodes_) {
    if (!n.backward && n.param == nullptr) n.leaf_grad.setZero();
  }
}

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ " + shape_str(a) + " x " + shape_str(b));
  }
  Matrix out = a.value() * b.value();
  Tape* tape = common_tape({&a, &b});
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {a, b};
  return tape->record(std::move(out), ins, [a, b, tape](const Matrix& g) {
    if (a.tracked()) tape->accumulate(a, g * b.value().transpose());
    if (b.tracked()) tape->accumulate(b, a.value().transpose() * g);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Matrix out = a.value() + b.value();
  Tape* tape = common_tape({&a, &b});
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {a, b};
  return tape->record(std::move(out), ins, [a, b, tape](const Matrix& g) {
    tape->accumulate(a, g);
    tape->accumulate(b, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Matrix out = a.value() - b.value();
  Tape* tape = common_tape({&a, &b});
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {a, b};
  return tape->record(std::move(out), ins, [a, b, tape](const Matrix& g) {
    tape->accumulate(a, g);
    if (b.tracked()) tape->accumulate(b, -g);
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: expected 1x" + std::to_string(a.cols()) + " row, got " + shape_str(row));
  }
  Matrix out = a.value().rowwise() + row.value().row(0);
  Tape* tape = common_tape({&a, &row});
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {a, row};
  return tape->record(std::move(out), ins, [a, row, tape](const Matrix& g) {
    tape->accumulate(a, g);
    if (row.tracked()) tape->accumulate(row, g.colwise().sum());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  Tape* tape = common_tape({&a, &b});
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {a, b};
  return tape->record(std::move(out), ins, [a, b, tape](const Matrix& g) {
    if (a.tracked()) tape->accumulate(a, g.cwiseProduct(b.value()));
    if (b.tracked()) tape->accumulate(b, g.cwiseProduct(a.value()));
  });
}

Tensor mul_col(const Tensor& a, const Tensor& c) {
  if (c.cols() != 1 || c.rows() != a.rows()) {
    throw DimensionError("mul_col: expected " + std::to_string(a.rows()) + "x1 column, got " + shape_str(c));
  }
  Matrix out = c.value().col(0).asDiagonal() * a.value();
  Tape* tape = common_tape({&a, &c});
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {a, c};
  return tape->record(std::move(out), ins, [a, c, tape](const Matrix& g) {
    if (a.tracked()) tape->accumulate(a, c.value().col(0).asDiagonal() * g);
    if (c.tracked()) tape->accumulate(c, g.cwiseProduct(a.value()).rowwise().sum());
  });
}

Tensor scale(const Tensor& a, Scalar s) {
  Matrix out = a.value() * s;
  Tape* tape = common_tape({&a});
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {a};
  return tape->record(std::move(out), ins, [a, s, tape](const Matrix& g) { tape->accumulate(a, g * s); });
}

Tensor sigmoid(const Tensor& x) {
  Matrix out = x.value().unaryExpr([](Scalar v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const Scalar e = std::exp(v);
    return e / (1.0 + e);
  });
  Tape* tape = common_tape({&x});
  if (!tape) return Tensor(std::move(out));
  auto y = std::make_shared<const Matrix>(out);
  const Tensor ins[] = {x};
  return tape->record(std::move(out), ins, [x, y, tape](const Matrix& g) {
    tape->accumulate(x, g.cwiseProduct(y->cwiseProduct((1.0 - y->array()).matrix())));
  });
}

Tensor gelu(const Tensor& x) {
  Matrix out = x.value().unaryExpr([](Scalar v) { return v * normal_cdf(v); });
  Tape* tape = common_tape({&x});
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {x};
  return tape->record(std::move(out), ins, [x, tape](const Matrix& g) {
    Matrix d = x.value().unaryExpr([](Scalar v) { return normal_cdf(v) + v * normal_pdf(v); });
    tape->accumulate(x, g.cwiseProduct(d));
  });
}

Tensor softmax(const Tensor& x, Scalar temperature) {
  if (!(temperature > 0)) throw ConfigError("softmax: temperature must be positive");
  Matrix out = x.value() / temperature;
  softmax_rows_inplace(out);
  Tape* tape = common_tape({&x});
  if (!tape) return Tensor(std::move(out));
  auto y = std::make_shared<const Matrix>(out);
  const Tensor ins[] = {x};
  return tape->record(std::move(out), ins, [x, y, temperature, tape](const Matrix& g) {
    Vector dot = g.cwiseProduct(*y).rowwise().sum();
    Matrix dx = y->cwiseProduct(g.colwise() - dot) / temperature;
    tape->accumulate(x, dx);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps) {
  const Index d = x.cols();
  if (d < 2) throw ConfigError("layer_norm: normalized extent must be at least 2");
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(d));
  }
  const Matrix& xv = x.value();
  Vector mu = xv.rowwise().mean();
  auto xhat = std::make_shared<Matrix>(xv.colwise() - mu);
  auto rstd = std::make_shared<Vector>(xhat->rows());
  *rstd = ((xhat->rowwise().squaredNorm() / static_cast<Scalar>(d)).array() + eps).rsqrt().matrix();
  xhat->array().colwise() *= rstd->array();
  Matrix out = (xhat->array().rowwise() * gain.value().row(0).array()).matrix().rowwise() + bias.value().row(0);
  Tape* tape = common_tape({&x, &gain, &bias});
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {x, gain, bias};
  return tape->record(std::move(out), ins, [x, gain, bias, xhat, rstd, d, tape](const Matrix& g) {
    if (gain.tracked()) tape->accumulate(gain, g.cwiseProduct(*xhat).colwise().sum());
    if (bias.tracked()) tape->accumulate(bias, g.colwise().sum());
    if (x.tracked()) {
      Matrix dxhat = g.array().rowwise() * gain.value().row(0).array();
      Vector s1 = dxhat.rowwise().sum();
      Vector s2 = dxhat.cwiseProduct(*xhat).rowwise().sum();
      const Scalar dd = static_cast<Scalar>(d);
      Matrix dx = (dd * dxhat.array() - xhat->array().colwise() * s2.array()).matrix();
      dx.colwise() -= s1;
      dx.array().colwise() *= rstd->array() / dd;
      tape->accumulate(x, dx);
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  const Index rows = parts[0].rows();
  Index cols = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ " + shape_str(parts[0]) + " vs " + shape_str(p));
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Index at = 0;
  Tape* tape = nullptr;
  for (const Tensor& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
    if (p.tracked()) {
      if (tape != nullptr && tape != p.tape()) throw UsageError("operation mixes tensors from different tapes");
      tape = p.tape();
    }
  }
  if (!tape) return Tensor(std::move(out));
  std::vector<Tensor> keep(parts.begin(), parts.end());
  return tape->record(std::move(out), parts, [keep, tape](const Matrix& g) {
    Index off = 0;
    for (const Tensor& p : keep) {
      if (p.tracked()) tape->accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

Tensor slice_cols(const Tensor& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + shape_str(x));
  }
  Matrix out = x.value().middleCols(start, count);
  Tape* tape = common_tape({&x});
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {x};
  return tape->record(std::move(out), ins, [x, start, count, tape](const Matrix& g) {
    Matrix dx = Matrix::Zero(x.rows(), x.cols());
    dx.middleCols(start, count) = g;
    tape->accumulate(x, dx);
  });
}

Tensor repeat_rows(const Tensor& x, Index times) {
  if (x.rows() != 1) throw DimensionError("repeat_rows: expected a single row, got " + shape_str(x));
  Matrix out = x.value().replicate(times, 1);
  Tape* tape = common_tape({&x});
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {x};
  return tape->record(std::move(out), ins, [x, tape](const Matrix& g) { tape->accumulate(x, g.colwise().sum()); });
}

Tensor sum(const Tensor& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  Tape* tape = common_tape({&x});
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {x};
  return tape->record(std::move(out), ins, [x, tape](const Matrix& g) {
    tape->accumulate(x, Matrix::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw UsageError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<Scalar>(x.size()));
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  require_same_shape("mse", pred, target);
  Tensor diff = sub(pred, target);
  return mean(mul(diff, diff));
}

Tensor bce(const Tensor& prob, const Tensor& target) {
  require_same_shape("bce", prob, target);
  const Matrix& p = prob.value();
  const Matrix& t = target.value();
  if ((p.array() < 0.0).any() || (p.array() > 1.0).any() || p.hasNaN()) {
    throw DomainError("bce: probability outside [0, 1]");
  }
  const Scalar n = static_cast<Scalar>(p.size());
  Scalar total = 0;
  for (Index i = 0; i < p.size(); ++i) {
    const Scalar pc = std::clamp(p(i), kBceClamp, 1.0 - kBceClamp);
    total -= t(i) * std::log(pc) + (1.0 - t(i)) * std::log(1.0 - pc);
  }
  Matrix out(1, 1);
  out(0, 0) = total / n;
  Tape* tape = common_tape({&prob, &target});
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {prob, target};
  return tape->record(std::move(out), ins, [prob, target, n, tape](const Matrix& g) {
    const Matrix& p = prob.value();
    const Matrix& t = target.value();
    if (prob.tracked()) {
      Matrix dp(p.rows(), p.cols());
      for (Index i = 0; i < p.size(); ++i) {
        const Scalar pi = p(i);
        if (pi < kBceClamp || pi > 1.0 - kBceClamp) {
          dp(i) = 0;
        } else {
          dp(i) = -(t(i) / pi - (1.0 - t(i)) / (1.0 - pi)) / n;
        }
      }
      tape->accumulate(prob, dp * g(0, 0));
    }
    if (target.tracked()) {
      Matrix dt(p.rows(), p.cols());
      for (Index i = 0; i < p.size(); ++i) {
        const Scalar pc = std::clamp(p(i), kBceClamp, 1.0 - kBceClamp);
        dt(i) = -(std::log(pc) - std::log(1.0 - pc)) / n;
      }
      tape->accumulate(target, dt * g(0, 0));
    }
  });
}

Tensor weighted_sse(const Tensor& pred, const Tensor& target, const Tensor& weights) {
  require_same_shape("weighted_sse", pred, target);
  require_same_shape("weighted_sse", pred, weights);
  Matrix diff = pred.value() - target.value();
  Matrix out(1, 1);
  out(0, 0) = (weights.value().array() * diff.array().square()).sum();
  Tape* tape = common_tape({&pred, &target, &weights});
  if (!tape) return Tensor(std::move(out));
  auto dptr = std::make_shared<const Matrix>(std::move(diff));
  const Tensor ins[] = {pred, target, weights};
  return tape->record(std::move(out), ins, [pred, target, weights, dptr, tape](const Matrix& g) {
    const Matrix wd = 2.0 * g(0, 0) * weights.value().cwiseProduct(*dptr);
    if (pred.tracked()) tape->accumulate(pred, wd);
    if (target.tracked()) tape->accumulate(target, -wd);
    if (weights.tracked()) tape->accumulate(weights, g(0, 0) * dptr->cwiseAbs2());
  });
}

Tensor detach(const Tensor& x) { return Tensor(x.value()); }

namespace {

using TokenView = Eigen::Map<const Matrix, 0, Eigen::OuterStride<>>;
using MutableTokenView = Eigen::Map<Matrix, 0, Eigen::OuterStride<>>;

// Row `i` of every group: a groups x d view into a (groups*per_group) x d matrix.
TokenView token_rows(const Matrix& m, Index i, Index per_group) {
  return TokenView(m.data() + i * m.cols(), m.rows() / per_group, m.cols(), Eigen::OuterStride<>(per_group * m.cols()));
}

MutableTokenView token_rows(Matrix& m, Index i, Index per_group) {
  return MutableTokenView(m.data() + i * m.cols(), m.rows() / per_group, m.cols(),
                          Eigen::OuterStride<>(per_group * m.cols()));
}

struct AttentionShape {
  Index groups, heads, nq, nk, dk;
  Scalar inv_sqrt;
};

AttentionShape check_attention(const Matrix& q, const Matrix& k, Index groups, Index heads) {
  const Index d = q.cols();
  if (heads <= 0 || d % heads != 0) {
    throw ConfigError("attention: model width " + std::to_string(d) + " not divisible by head count " +
                      std::to_string(heads));
  }
  if (k.cols() != d) throw DimensionError("attention: query and key widths differ");
  if (groups <= 0 || q.rows() % groups != 0 || k.rows() % groups != 0) {
    throw DimensionError("attention: row counts not divisible by group count");
  }
  const Index dk = d / heads;
  return {groups, heads, q.rows() / groups, k.rows() / groups, dk, 1.0 / std::sqrt(static_cast<Scalar>(dk))};
}

// Softmax probabilities of one (group, head) block into `s` (nq x nk).
void block_probabilities(const Matrix& q, const Matrix& k, const AttentionShape& a, Index g, Index h, Matrix& s) {
  s.noalias() = q.block(g * a.nq, h * a.dk, a.nq, a.dk) * k.block(g * a.nk, h * a.dk, a.nk, a.dk).transpose();
  s *= a.inv_sqrt;
  softmax_rows_inplace(s);
}

// Few tokens: loop over token pairs, vectorize across groups. Probabilities
// for pair (i, j) live in rows [(i*nk + j)*groups, +groups) of a heads-wide matrix.
Matrix pairwise_forward(const Matrix& q, const Matrix& k, const Matrix& v, const AttentionShape& a, Matrix& probs) {
  const Index G = a.groups;
  probs.resize(a.nq * a.nk * G, a.heads);
  Matrix out = Matrix::Zero(q.rows(), q.cols());
  Matrix mx(G, a.heads), den(G, a.heads);
  for (Index i = 0; i < a.nq; ++i) {
    const auto qi = token_rows(q, i, a.nq);
    auto pi = probs.middleRows(i * a.nk * G, a.nk * G);
    for (Index j = 0; j < a.nk; ++j) {
      const auto kj = token_rows(k, j, a.nk);
      for (Index h = 0; h < a.heads; ++h) {
        pi.block(j * G, h, G, 1) =
            qi.middleCols(h * a.dk, a.dk).cwiseProduct(kj.middleCols(h * a.dk, a.dk)).rowwise().sum() * a.inv_sqrt;
      }
    }
    mx = pi.topRows(G);
    for (Index j = 1; j < a.nk; ++j) mx = mx.cwiseMax(pi.middleRows(j * G, G));
    den.setZero();
    for (Index j = 0; j < a.nk; ++j) {
      auto s = pi.middleRows(j * G, G);
      s = (s - mx).array().exp().matrix();
      den += s;
    }
    auto oi = token_rows(out, i, a.nq);
    for (Index j = 0; j < a.nk; ++j) {
      auto s = pi.middleRows(j * G, G);
      s = s.cwiseQuotient(den);
      const auto vj = token_rows(v, j, a.nk);
      for (Index h = 0; h < a.heads; ++h) {
        oi.middleCols(h * a.dk, a.dk).array() += vj.middleCols(h * a.dk, a.dk).array().colwise() * s.col(h).array();
      }
    }
  }
  return out;
}

void pairwise_backward(const Matrix& q, const Matrix& k, const Matrix& v, const Matrix& probs,
                       const AttentionShape& a, const Matrix& g_out, Matrix& dq, Matrix& dk, Matrix& dv) {
  const Index G = a.groups;
  Matrix da(a.nk * G, a.heads), dot(G, a.heads), ds(G, a.heads);
  for (Index i = 0; i < a.nq; ++i) {
    const auto qi = token_rows(q, i, a.nq);
    const auto go = token_rows(g_out, i, a.nq);
    const auto pi = probs.middleRows(i * a.nk * G, a.nk * G);
    dot.setZero();
    for (Index j = 0; j < a.nk; ++j) {
      const auto vj = token_rows(v, j, a.nk);
      auto dvj = token_rows(dv, j, a.nk);
      const auto p = pi.middleRows(j * G, G);
      for (Index h = 0; h < a.heads; ++h) {
        dvj.middleCols(h * a.dk, a.dk).array() += go.middleCols(h * a.dk, a.dk).array().colwise() * p.col(h).array();
        da.block(j * G, h, G, 1) = go.middleCols(h * a.dk, a.dk).cwiseProduct(vj.middleCols(h * a.dk, a.dk)).rowwise().sum();
      }
      dot += p.cwiseProduct(da.middleRows(j * G, G));
    }
    auto dqi = token_rows(dq, i, a.nq);
    for (Index j = 0; j < a.nk; ++j) {
      ds = pi.middleRows(j * G, G).cwiseProduct(da.middleRows(j * G, G) - dot) * a.inv_sqrt;
      const auto kj = token_rows(k, j, a.nk);
      auto dkj = token_rows(dk, j, a.nk);
      for (Index h = 0; h < a.heads; ++h) {
        dqi.middleCols(h * a.dk, a.dk).array() += kj.middleCols(h * a.dk, a.dk).array().colwise() * ds.col(h).array();
        dkj.middleCols(h * a.dk, a.dk).array() += qi.middleCols(h * a.dk, a.dk).array().colwise() * ds.col(h).array();
      }
    }
  }
}

// Many tokens: per-(group, head) products. Probabilities are recomputed in
// the backward pass instead of stored; at a few hundred tokens they would
// not fit in cache.
Matrix blocked_forward(const Matrix& q, const Matrix& k, const Matrix& v, const AttentionShape& a) {
  Matrix out(q.rows(), q.cols());
  Matrix s(a.nq, a.nk);
  for (Index g = 0; g < a.groups; ++g) {
    for (Index h = 0; h < a.heads; ++h) {
      block_probabilities(q, k, a, g, h, s);
      out.block(g * a.nq, h * a.dk, a.nq, a.dk).noalias() = s * v.block(g * a.nk, h * a.dk, a.nk, a.dk);
    }
  }
  return out;
}

void blocked_backward(const Matrix& q, const Matrix& k, const Matrix& v, const AttentionShape& a,
                      const Matrix& g_out, Matrix& dq, Matrix& dk, Matrix& dv) {
  Matrix s(a.nq, a.nk), da(a.nq, a.nk);
  Vector dot(a.nq);
  for (Index g = 0; g < a.groups; ++g) {
    for (Index h = 0; h < a.heads; ++h) {
      block_probabilities(q, k, a, g, h, s);
      const auto go = g_out.block(g * a.nq, h * a.dk, a.nq, a.dk);
      dv.block(g * a.nk, h * a.dk, a.nk, a.dk).noalias() += s.transpose() * go;
      da.noalias() = go * v.block(g * a.nk, h * a.dk, a.nk, a.dk).transpose();
      dot = da.cwiseProduct(s).rowwise().sum();
      da = s.cwiseProduct(da.colwise() - dot) * a.inv_sqrt;
      dq.block(g * a.nq, h * a.dk, a.nq, a.dk).noalias() += da * k.block(g * a.nk, h * a.dk, a.nk, a.dk);
      dk.block(g * a.nk, h * a.dk, a.nk, a.dk).noalias() += da.transpose() * q.block(g * a.nq, h * a.dk, a.nq, a.dk);
    }
  }
}

}  // namespace

Matrix attention_probabilities(const Matrix& q, const Matrix& k, Index groups, Index heads) {
  const AttentionShape a = check_attention(q, k, groups, heads);
  Matrix probs(groups * heads * a.nq, a.nk);
  Matrix s(a.nq, a.nk);
  for (Index g = 0; g < groups; ++g) {
    for (Index h = 0; h < heads; ++h) {
      block_probabilities(q, k, a, g, h, s);
      probs.middleRows((g * heads + h) * a.nq, a.nq) = s;
    }
  }
  return probs;
}

Tensor grouped_attention(const Tensor& q, const Tensor& k, const Tensor& v, Index groups, Index heads,
                         AttentionKernel kernel) {
  if (k.rows() != v.rows() || k.cols() != v.cols()) {
    throw DimensionError("attention: keys " + shape_str(k) + " and values " + shape_str(v) + " differ");
  }
  const AttentionShape a = check_attention(q.value(), k.value(), groups, heads);
  if (kernel == AttentionKernel::kAuto) {
    kernel = a.nq * a.nk <= 1024 ? AttentionKernel::kPairwise : AttentionKernel::kBlocked;
  }
  Tape* tape = common_tape({&q, &k, &v});
  auto probs = std::make_shared<Matrix>();
  Matrix out = kernel == AttentionKernel::kPairwise ? pairwise_forward(q.value(), k.value(), v.value(), a, *probs)
                                                    : blocked_forward(q.value(), k.value(), v.value(), a);
  if (!tape) return Tensor(std::move(out));
  const Tensor ins[] = {q, k, v};
  return tape->record(std::move(out), ins, [q, k, v, probs, a, kernel, tape](const Matrix& g_out) {
    Matrix dq = Matrix::Zero(q.rows(), q.cols());
    Matrix dk = Matrix::Zero(k.rows(), k.cols());
    Matrix dv = Matrix::Zero(v.rows(), v.cols());
    if (kernel == AttentionKernel::kPairwise) {
      pairwise_backward(q.value(), k.value(), v.value(), *probs, a, g_out, dq, dk, dv);
    } else {
      blocked_backward(q.value(), k.value(), v.value(), a, g_out, dq, dk, dv);
    }
    if (q.tracked()) tape->accumulate(q, dq);
    if (k.tracked()) tape->accumulate(k, dk);
    if (v.tracked()) tape->accumulate(v, dv);
  });
}

}  // namespace moca
