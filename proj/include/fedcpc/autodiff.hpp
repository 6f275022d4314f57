#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every primitive in execution order, so parents always
// precede children. backward() walks the record once in reverse.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "fedcpc/tensor.hpp"

namespace fedcpc::ad {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t index() const noexcept { return index_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

class Tape {
 public:
  /// Receives the output gradient of its node and accumulates into parents.
  using BackwardFn = std::function<void(Tape& tape, std::span<const double> out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Input node; participates in gradients iff value.requires_grad().
  Var leaf(Tensor value);
  /// Input node that never receives a gradient.
  Var constant(Tensor value);

  const Tensor& value(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  bool requires_grad(Var v) const;

  /// Populates gradients of every node reachable backwards from `loss`.
  /// Throws ContractError unless loss holds exactly one element.
  void backward(Var loss);

  /// Gradient of the last backward() w.r.t. v; zeros if v did not reach the loss.
  Tensor grad(Var v) const;

  /// Number of node adjoints evaluated by the last backward().
  std::size_t backward_visits() const noexcept { return visits_; }

  // Primitive-author interface.

  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn);
  /// Gradient accumulator of node `index`, or nullptr if it needs none.
  double* grad_slot(std::size_t index);
  const Tensor& node_value(std::size_t index) const { return nodes_[index].value; }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::size_t visits_ = 0;
};

// Primitive operations. Operands must live on the same tape.

Var matmul(Var a, Var b);
Var transpose(Var a);

/// Same-shape elementwise ops; a 1-element operand broadcasts against the other.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);

Var relu(Var a);  // relu'(0) = 0
Var sigmoid(Var a);
Var tanh(Var a);

enum class Elementwise { add, mul, relu, sigmoid, tanh, scale };

/// Dispatching form of the elementwise family. `factor` is used by scale only.
Var elementwise(Elementwise op, std::span<const Var> args, double factor = 1.0);

/// Sum of all entries, as a scalar.
Var sum(Var a);

/// Row-wise log-softmax with max subtraction. Rank-1 input is one row.
Var log_softmax(Var x);

Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var concat_rows(std::span<const Var> parts);

/// out.flat[i] = a.flat[indices[i]], reshaped to `shape`.
Var gather(Var a, std::vector<std::size_t> indices, Shape shape);

struct LstmWeights {
  Var input;      // d_in x 4H
  Var recurrent;  // H x 4H
  Var bias;       // 1 x 4H
};

struct LstmState {
  Var h;  // 1 x H
  Var c;  // 1 x H
};

/// One LSTM step. Gate blocks are laid out [input | forget | candidate | output];
/// i, f, o use sigmoid, the candidate tanh; no peepholes.
LstmState lstm_cell(Var x, const LstmState& prev, const LstmWeights& weights);

/// lstm_cell with x W_input already computed (1 x 4H), so a whole sequence
/// can be projected with one matmul.
LstmState lstm_cell_projected(Var projected_input, const LstmState& prev, const LstmWeights& weights);

namespace testing {

enum class AdjointFault { none, tanh };

/// Deliberately corrupts one adjoint so gradient checks can be shown to fail.
void set_adjoint_fault(AdjointFault fault);
AdjointFault adjoint_fault();

class ScopedAdjointFault {
 public:
  explicit ScopedAdjointFault(AdjointFault fault) : previous_(adjoint_fault()) { set_adjoint_fault(fault); }
  ~ScopedAdjointFault() { set_adjoint_fault(previous_); }
  ScopedAdjointFault(const ScopedAdjointFault&) = delete;
  ScopedAdjointFault& operator=(const ScopedAdjointFault&) = delete;

 private:
  AdjointFault previous_;
};

}  // namespace testing

}  // namespace fedcpc::ad
