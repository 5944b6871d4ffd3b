#pragma once

// Dense 2-D tensors with tape-based reverse-mode differentiation.
//
// Every value is a row-major Eigen matrix. A Tensor is either a constant
// (no tape linkage) or a handle to a node on a Tape. Operations are free
// functions; an operation records a node only when at least one input is
// tracked, so constants and detached values never appear in the backward
// pass.

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace moca {

using Index = Eigen::Index;

template <typename T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VectorT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Scalar = double;
using Matrix = MatrixT<Scalar>;
using Vector = VectorT<Scalar>;

/// A named trainable matrix with an explicitly zeroed gradient buffer.
struct Parameter {
  Parameter(std::string name, Matrix value);

  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.setZero(); }
};

class Tape;

class Tensor {
 public:
  Tensor();
  explicit Tensor(Matrix value);

  const Matrix& value() const { return *value_; }
  Index rows() const { return value_->rows(); }
  Index cols() const { return value_->cols(); }
  Index size() const { return value_->size(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }

  /// Value of a 1x1 tensor.
  Scalar item() const;

  bool tracked() const { return tape_ != nullptr; }
  std::optional<std::size_t> node() const;
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;

  std::shared_ptr<const Matrix> value_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

class Tape {
 public:
  enum class Mode { kTraining, kInference };
  using BackwardFn = std::function<void(const Matrix& grad_out)>;

  explicit Tape(Mode mode = Mode::kTraining);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Mode mode() const { return mode_; }

  /// Leaf bound to a parameter. Backward adds the leaf gradient into
  /// Parameter::grad. In inference mode this returns an untracked constant.
  /// Repeated calls for the same parameter return the same leaf.
  Tensor watch(Parameter& param);

  /// Tracked leaf not bound to any parameter; its gradient is read with grad().
  Tensor leaf(Matrix value);

  /// Appends an operation node. Returns an untracked tensor when no input is
  /// tracked on this tape (or the tape is in inference mode).
  Tensor record(Matrix value, std::span<const Tensor> inputs, BackwardFn backward);

  /// Adds `g` into the pending gradient of `t`. No-op for untracked tensors.
  void accumulate(const Tensor& t, const Matrix& g);

  /// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls.
  void backward(const Tensor& loss);

  /// Accumulated gradient of a tracked leaf.
  const Matrix& grad(const Tensor& t) const;

  /// Zeroes leaf gradients held by the tape (parameter grads are zeroed
  /// through Parameter::zero_grad).
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::size_t>& inputs_of(std::size_t node) const { return nodes_[node].inputs; }

 private:
  struct Node {
    std::shared_ptr<const Matrix> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    Matrix pending;
    bool has_pending = false;
    Matrix leaf_grad;
  };

  Tensor push(Node node);

  Mode mode_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, Tensor> watched_;
};

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// a + row, with `row` (1 x n) broadcast over the rows of `a`.
Tensor add_row(const Tensor& a, const Tensor& row);
/// Elementwise product.
Tensor mul(const Tensor& a, const Tensor& b);
/// Scales row i of `a` by c(i); `c` is m x 1.
Tensor mul_col(const Tensor& a, const Tensor& c);
Tensor scale(const Tensor& a, Scalar s);

Tensor sigmoid(const Tensor& x);
/// Exact GELU, x * Phi(x).
Tensor gelu(const Tensor& x);
/// Row-wise softmax of x / temperature.
Tensor softmax(const Tensor& x, Scalar temperature = 1.0);
/// Row-wise normalization with affine gain/bias (each 1 x d).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps = 1e-5);

Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, Index start, Index count);
/// Stacks a 1 x n tensor `times` times into times x n.
Tensor repeat_rows(const Tensor& x, Index times);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse(const Tensor& pred, const Tensor& target);
/// Mean binary cross-entropy. Probabilities are clamped to [1e-7, 1 - 1e-7].
Tensor bce(const Tensor& prob, const Tensor& target);
/// sum_i w_i (pred_i - target_i)^2 over column vectors.
Tensor weighted_sse(const Tensor& pred, const Tensor& target, const Tensor& weights);

/// Same value, no tape linkage.
Tensor detach(const Tensor& x);

/// Scaled dot-product attention over `groups` independent blocks.
/// q is (groups*nq) x d, k and v are (groups*nk) x d. Heads partition the d
/// columns into contiguous blocks of d/heads. Returns the concatenated heads,
/// (groups*nq) x d, before any output projection.
///
/// kPairwise vectorizes across groups and suits short token lists; kBlocked
/// runs one product per (group, head). Both compute the same function.
enum class AttentionKernel { kAuto, kPairwise, kBlocked };

Tensor grouped_attention(const Tensor& q, const Tensor& k, const Tensor& v, Index groups, Index heads,
                         AttentionKernel kernel = AttentionKernel::kAuto);

/// Attention probabilities used by grouped_attention, stacked as
/// (groups*heads*nq) x nk with block order (group, head).
Matrix attention_probabilities(const Matrix& q, const Matrix& k, Index groups, Index heads);

inline constexpr Scalar kBceClamp = 1e-7;

}  // namespace moca
