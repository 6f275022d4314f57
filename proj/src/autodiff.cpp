#include "fedcpc/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include "fedcpc/errors.hpp"

namespace fedcpc::ad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::atomic<testing::AdjointFault> g_fault{testing::AdjointFault::none};

ConstMap as_matrix(const Tensor& t) { return ConstMap(t.data(), t.rows(), t.cols()); }

Tape& same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid()) throw ContractError(std::string(op) + ": invalid Var");
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands on different tapes");
  return a.tape();
}

Tape& tape_of(Var a, const char* op) {
  if (!a.valid()) throw ContractError(std::string(op) + ": invalid Var");
  return a.tape();
}

[[noreturn]] void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_to_string(a.shape()) + " and " +
                       shape_to_string(b.shape()));
}

Tensor like(const Tensor& t, std::vector<double> values) { return Tensor(t.shape(), std::move(values)); }

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

enum class BinaryKind { add, sub, mul };

Var binary(Var a, Var b, BinaryKind kind, const char* name) {
  Tape& tape = same_tape(a, b, name);
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  // Broadcast role: 0 = same shape, 1 = a is the scalar, 2 = b is the scalar.
  int broadcast = 0;
  if (va.shape() != vb.shape()) {
    if (va.size() == 1 && vb.size() > 1) {
      broadcast = 1;
    } else if (vb.size() == 1 && va.size() > 1) {
      broadcast = 2;
    } else if (va.size() == 1 && vb.size() == 1) {
      broadcast = 2;
    } else {
      shape_mismatch(name, va, vb);
    }
  }
  const Tensor& big = broadcast == 1 ? vb : va;
  std::size_t n = big.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double x = broadcast == 1 ? va[0] : va[i];
    double y = broadcast == 2 ? vb[0] : vb[i];
    switch (kind) {
      case BinaryKind::add:
        out[i] = x + y;
        break;
      case BinaryKind::sub:
        out[i] = x - y;
        break;
      case BinaryKind::mul:
        out[i] = x * y;
        break;
    }
  }
  std::size_t ia = a.index();
  std::size_t ib = b.index();
  return tape.record(like(big, std::move(out)), {ia, ib},
                     [ia, ib, kind, broadcast](Tape& t, std::span<const double> g) {
                       double* ga = t.grad_slot(ia);
                       double* gb = t.grad_slot(ib);
                       const Tensor& xa = t.node_value(ia);
                       const Tensor& xb = t.node_value(ib);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         std::size_t ja = broadcast == 1 ? 0 : i;
                         std::size_t jb = broadcast == 2 ? 0 : i;
                         double da = 0.0;
                         double db = 0.0;
                         switch (kind) {
                           case BinaryKind::add:
                             da = g[i];
                             db = g[i];
                             break;
                           case BinaryKind::sub:
                             da = g[i];
                             db = -g[i];
                             break;
                           case BinaryKind::mul:
                             da = g[i] * xb[jb];
                             db = g[i] * xa[ja];
                             break;
                         }
                         if (ga) ga[ja] += da;
                         if (gb) gb[jb] += db;
                       }
                     });
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

Tape& Var::tape() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(*this); }

Var Tape::leaf(Tensor value) {
  bool rg = value.requires_grad();
  nodes_.push_back(Node{std::move(value), {}, {}, rg});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  value.set_requires_grad(false);
  return leaf(std::move(value));
}

const Tensor& Tape::value(Var v) const {
  if (v.tape_ != this || v.index_ >= nodes_.size()) throw ContractError("Var does not belong to this tape");
  return nodes_[v.index_].value;
}

bool Tape::requires_grad(Var v) const {
  value(v);
  return nodes_[v.index_].requires_grad;
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn) {
  bool rg = false;
  for (std::size_t p : parents) {
    if (p >= nodes_.size()) throw ContractError("record: parent index out of range");
    rg = rg || nodes_[p].requires_grad;
  }
  value.set_requires_grad(rg);
  nodes_.push_back(Node{std::move(value), std::move(parents), rg ? std::move(fn) : BackwardFn{}, rg});
  return Var(this, nodes_.size() - 1);
}

double* Tape::grad_slot(std::size_t index) {
  if (!nodes_[index].requires_grad) return nullptr;
  auto& slot = grads_[index];
  if (slot.empty()) slot.assign(nodes_[index].value.size(), 0.0);
  return slot.data();
}

void Tape::backward(Var loss) {
  const Tensor& lv = value(loss);
  if (lv.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_to_string(lv.shape()));
  }
  grads_.assign(nodes_.size(), {});
  visits_ = 0;
  if (!nodes_[loss.index_].requires_grad) return;
  grads_[loss.index_].assign(1, 1.0);
  for (std::size_t i = loss.index_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || grads_[i].empty()) continue;
    node.backward(*this, grads_[i]);
    ++visits_;
  }
}

Tensor Tape::grad(Var v) const {
  const Tensor& val = value(v);
  if (v.index_ < grads_.size() && !grads_[v.index_].empty()) return Tensor(val.shape(), grads_[v.index_]);
  return Tensor::zeros(val.shape());
}

// ---------------------------------------------------------------------------
// Primitives

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b, "matmul");
  const Tensor& va = a.value();
  const Tensor& vb = b.value();
  if (va.rank() > 2 || vb.rank() > 2 || va.cols() != vb.rows()) shape_mismatch("matmul", va, vb);
  std::size_t m = va.rows();
  std::size_t n = vb.cols();
  Tensor out = Tensor::zeros({m, n});
  MutMap(out.data(), m, n).noalias() = as_matrix(va) * as_matrix(vb);
  std::size_t ia = a.index();
  std::size_t ib = b.index();
  return tape.record(std::move(out), {ia, ib}, [ia, ib, m, n](Tape& t, std::span<const double> g) {
    ConstMap gm(g.data(), m, n);
    const Tensor& xa = t.node_value(ia);
    const Tensor& xb = t.node_value(ib);
    if (double* ga = t.grad_slot(ia)) MutMap(ga, xa.rows(), xa.cols()).noalias() += gm * as_matrix(xb).transpose();
    if (double* gb = t.grad_slot(ib)) MutMap(gb, xb.rows(), xb.cols()).noalias() += as_matrix(xa).transpose() * gm;
  });
}

Var transpose(Var a) {
  Tape& tape = tape_of(a, "transpose");
  const Tensor& va = a.value();
  std::size_t r = va.rows();
  std::size_t c = va.cols();
  Tensor out = Tensor::zeros({c, r});
  MutMap(out.data(), c, r) = as_matrix(va).transpose();
  std::size_t ia = a.index();
  return tape.record(std::move(out), {ia}, [ia, r, c](Tape& t, std::span<const double> g) {
    if (double* ga = t.grad_slot(ia)) MutMap(ga, r, c) += ConstMap(g.data(), c, r).transpose();
  });
}

Var add(Var a, Var b) { return binary(a, b, BinaryKind::add, "add"); }
Var sub(Var a, Var b) { return binary(a, b, BinaryKind::sub, "sub"); }
Var mul(Var a, Var b) { return binary(a, b, BinaryKind::mul, "mul"); }

Var scale(Var a, double factor) {
  Tape& tape = tape_of(a, "scale");
  const Tensor& va = a.value();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * factor;
  std::size_t ia = a.index();
  return tape.record(like(va, std::move(out)), {ia}, [ia, factor](Tape& t, std::span<const double> g) {
    if (double* ga = t.grad_slot(ia))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Var relu(Var a) {
  Tape& tape = tape_of(a, "relu");
  const Tensor& va = a.value();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] > 0.0 ? va[i] : 0.0;
  std::size_t ia = a.index();
  return tape.record(like(va, std::move(out)), {ia}, [ia](Tape& t, std::span<const double> g) {
    double* ga = t.grad_slot(ia);
    if (!ga) return;
    const Tensor& x = t.node_value(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  });
}

Var sigmoid(Var a) {
  Tape& tape = tape_of(a, "sigmoid");
  const Tensor& va = a.value();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(va[i]);
  std::size_t ia = a.index();
  std::size_t self = tape.size();
  return tape.record(like(va, std::move(out)), {ia}, [ia, self](Tape& t, std::span<const double> g) {
    double* ga = t.grad_slot(ia);
    if (!ga) return;
    const Tensor& y = t.node_value(self);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var tanh(Var a) {
  Tape& tape = tape_of(a, "tanh");
  const Tensor& va = a.value();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(va[i]);
  std::size_t ia = a.index();
  std::size_t self = tape.size();
  return tape.record(like(va, std::move(out)), {ia}, [ia, self](Tape& t, std::span<const double> g) {
    double* ga = t.grad_slot(ia);
    if (!ga) return;
    const Tensor& y = t.node_value(self);
    double fault = g_fault.load(std::memory_order_relaxed) == testing::AdjointFault::tanh ? 1.05 : 1.0;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += fault * g[i] * (1.0 - y[i] * y[i]);
  });
}

Var elementwise(Elementwise op, std::span<const Var> args, double factor) {
  std::size_t arity = (op == Elementwise::add || op == Elementwise::mul) ? 2 : 1;
  if (args.size() != arity) {
    throw ContractError("elementwise: expected " + std::to_string(arity) + " operands, got " +
                        std::to_string(args.size()));
  }
  switch (op) {
    case Elementwise::add:
      return add(args[0], args[1]);
    case Elementwise::mul:
      return mul(args[0], args[1]);
    case Elementwise::relu:
      return relu(args[0]);
    case Elementwise::sigmoid:
      return sigmoid(args[0]);
    case Elementwise::tanh:
      return tanh(args[0]);
    case Elementwise::scale:
      return scale(args[0], factor);
  }
  throw ContractError("elementwise: unknown op");
}

Var sum(Var a) {
  Tape& tape = tape_of(a, "sum");
  const Tensor& va = a.value();
  double total = 0.0;
  for (double x : va.values()) total += x;
  std::size_t ia = a.index();
  return tape.record(Tensor::scalar(total), {ia}, [ia](Tape& t, std::span<const double> g) {
    double* ga = t.grad_slot(ia);
    if (!ga) return;
    std::size_t n = t.node_value(ia).size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
  });
}

Var log_softmax(Var x) {
  Tape& tape = tape_of(x, "log_softmax");
  const Tensor& vx = x.value();
  if (vx.rank() > 2) throw DimensionError("log_softmax: rank > 2");
  std::size_t rows = vx.rows();
  std::size_t cols = vx.cols();
  std::vector<double> out(vx.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = vx.data() + r * cols;
    double* o = out.data() + r * cols;
    double mx = *std::max_element(in, in + cols);
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += std::exp(in[c] - mx);
    double lse = mx + std::log(acc);
    for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] - lse;
  }
  std::size_t ix = x.index();
  std::size_t self = tape.size();
  return tape.record(like(vx, std::move(out)), {ix}, [ix, self, rows, cols](Tape& t, std::span<const double> g) {
    double* gx = t.grad_slot(ix);
    if (!gx) return;
    const Tensor& y = t.node_value(self);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * cols;
      const double* yr = y.data() + r * cols;
      double gsum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gsum += gr[c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += gr[c] - std::exp(yr[c]) * gsum;
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  Tape& tape = tape_of(a, "slice_rows");
  const Tensor& va = a.value();
  std::size_t cols = va.cols();
  if (begin >= end || end > va.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_to_string(va.shape()));
  }
  std::vector<double> out(va.data() + begin * cols, va.data() + end * cols);
  std::size_t ia = a.index();
  return tape.record(Tensor({end - begin, cols}, std::move(out)), {ia},
                     [ia, begin, cols](Tape& t, std::span<const double> g) {
                       if (double* ga = t.grad_slot(ia))
                         for (std::size_t i = 0; i < g.size(); ++i) ga[begin * cols + i] += g[i];
                     });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  Tape& tape = tape_of(a, "slice_cols");
  const Tensor& va = a.value();
  std::size_t rows = va.rows();
  std::size_t cols = va.cols();
  if (begin >= end || end > cols) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_to_string(va.shape()));
  }
  std::size_t width = end - begin;
  std::vector<double> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(va.data() + r * cols + begin, width, out.data() + r * width);
  std::size_t ia = a.index();
  return tape.record(Tensor({rows, width}, std::move(out)), {ia},
                     [ia, rows, cols, begin, width](Tape& t, std::span<const double> g) {
                       double* ga = t.grad_slot(ia);
                       if (!ga) return;
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t c = 0; c < width; ++c) ga[r * cols + begin + c] += g[r * width + c];
                     });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Tape& tape = tape_of(parts[0], "concat_rows");
  std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> parents;
  std::vector<std::size_t> offsets;
  for (Var p : parts) {
    same_tape(parts[0], p, "concat_rows");
    const Tensor& v = p.value();
    if (v.rank() > 2 || v.cols() != cols) shape_mismatch("concat_rows", parts[0].value(), v);
    offsets.push_back(rows * cols);
    rows += v.rows();
    parents.push_back(p.index());
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  for (Var p : parts) {
    auto vals = p.value().values();
    out.insert(out.end(), vals.begin(), vals.end());
  }
  return tape.record(Tensor({rows, cols}, std::move(out)), parents,
                     [parents, offsets](Tape& t, std::span<const double> g) {
                       for (std::size_t k = 0; k < parents.size(); ++k) {
                         double* gp = t.grad_slot(parents[k]);
                         if (!gp) continue;
                         std::size_t n = t.node_value(parents[k]).size();
                         for (std::size_t i = 0; i < n; ++i) gp[i] += g[offsets[k] + i];
                       }
                     });
}

Var gather(Var a, std::vector<std::size_t> indices, Shape shape) {
  Tape& tape = tape_of(a, "gather");
  const Tensor& va = a.value();
  if (shape_size(shape) != indices.size()) {
    throw DimensionError("gather: " + std::to_string(indices.size()) + " indices for shape " +
                         shape_to_string(shape));
  }
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= va.size()) throw DimensionError("gather: index out of range");
    out[i] = va[indices[i]];
  }
  std::size_t ia = a.index();
  return tape.record(Tensor(std::move(shape), std::move(out)), {ia},
                     [ia, idx = std::move(indices)](Tape& t, std::span<const double> g) {
                       if (double* ga = t.grad_slot(ia))
                         for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += g[i];
                     });
}

LstmState lstm_cell(Var x, const LstmState& prev, const LstmWeights& w) {
  const Tensor& wx = w.input.value();
  if (x.value().rank() > 2 || x.value().rows() != 1 || x.value().cols() != wx.rows()) {
    shape_mismatch("lstm_cell(x)", x.value(), wx);
  }
  return lstm_cell_projected(matmul(x, w.input), prev, w);
}

LstmState lstm_cell_projected(Var projected_input, const LstmState& prev, const LstmWeights& w) {
  const Tensor& wx = w.input.value();
  const Tensor& wh = w.recurrent.value();
  const Tensor& b = w.bias.value();
  std::size_t hidden = wh.rows();
  if (wh.cols() != 4 * hidden || wx.cols() != 4 * hidden || b.shape() != Shape{1, 4 * hidden}) {
    throw DimensionError("lstm_cell: weights inconsistent with hidden size " + std::to_string(hidden));
  }
  if (projected_input.value().shape() != Shape{1, 4 * hidden}) {
    shape_mismatch("lstm_cell(projected input)", projected_input.value(), b);
  }
  if (prev.h.value().size() != hidden || prev.c.value().size() != hidden) {
    throw DimensionError("lstm_cell: state size does not match hidden size " + std::to_string(hidden));
  }
  Var pre = add(add(projected_input, matmul(prev.h, w.recurrent)), w.bias);
  Var in_gate = sigmoid(slice_cols(pre, 0, hidden));
  Var forget_gate = sigmoid(slice_cols(pre, hidden, 2 * hidden));
  Var candidate = tanh(slice_cols(pre, 2 * hidden, 3 * hidden));
  Var out_gate = sigmoid(slice_cols(pre, 3 * hidden, 4 * hidden));
  Var c_prev = prev.c;
  if (c_prev.value().rank() != 2) c_prev = slice_rows(c_prev, 0, 1);
  Var c = add(mul(forget_gate, c_prev), mul(in_gate, candidate));
  Var h = mul(out_gate, tanh(c));
  return {h, c};
}

namespace testing {

void set_adjoint_fault(AdjointFault fault) { g_fault.store(fault); }
AdjointFault adjoint_fault() { return g_fault.load(); }

}  // namespace testing

}  // namespace fedcpc::ad
