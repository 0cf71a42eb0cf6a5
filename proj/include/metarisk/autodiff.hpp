#pragma once

#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "metarisk/tensor.hpp"

namespace metarisk::ad {

class AutodiffError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  ScalarMul,
  Matmul,
  Relu,
  Log,
  Exp,
  Sum,      // attrs.axis: -1 full, 0 down rows -> (1,n), 1 across cols -> (m,1)
  Mean,     // full reduction
  Softmax,  // rank-1 input, numerically stabilized
  Gather,   // rank-1 input, attrs.index: injective indices (a permutation or a subset)
  Scatter,  // adjoint of Gather: rank-1, attrs.index + attrs.width
  Square,
  Sqrt,
  Reshape,  // attrs.shape
  Detach,
};

const char* op_name(Op op);

struct OpAttrs {
  double scalar = 0.0;              // ScalarMul
  bool trans_a = false;             // Matmul
  bool trans_b = false;             // Matmul
  int axis = -1;                    // Sum
  std::vector<std::uint32_t> index; // Gather / Scatter
  std::uint32_t width = 0;          // Scatter output length
  std::vector<std::size_t> shape;   // Reshape
};

class Tape;
struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One entry of the recorded computation graph. Parents always precede the
/// node on its tape, so tape order is a topological order.
struct Node {
  Tensor value;
  Op op = Op::Leaf;
  OpAttrs attrs;
  std::vector<NodePtr> parents;
  bool requires_grad = false;
  std::uint64_t id = 0;
  Tape* tape = nullptr;
};

/// Handle to a tape node. Cheap to copy; the tape (and any live handles)
/// own the underlying record.
class Value {
public:
  Value() = default;
  explicit Value(NodePtr n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const std::vector<std::size_t>& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  double item() const { return node_->value.item(); }
  bool requires_grad() const { return node_->requires_grad; }
  Node* node() const { return node_.get(); }
  const NodePtr& ptr() const { return node_; }

private:
  NodePtr node_;
};

enum class Mode { first_order, higher_order };

/// Append-only record of a computation. Nothing recorded is mutated in
/// place; backward passes themselves record onto the same tape so that a
/// gradient can be differentiated again. A tape is confined to one worker.
class Tape {
public:
  explicit Tape(Mode mode = Mode::higher_order) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { truncate(0); }

  Mode mode() const { return mode_; }
  std::size_t size() const { return nodes_.size(); }

  Value leaf(Tensor value, bool requires_grad = false);
  Value constant(Tensor value) { return leaf(std::move(value), false); }

  /// Record one operation: validates shapes, computes the forward value and
  /// appends the node. Throws ShapeError naming the op on invalid inputs.
  Value record(Op op, const std::vector<Value>& inputs, OpAttrs attrs = {});

  /// Drop every node recorded after `mark`. Callers must not hold handles
  /// into the dropped range that they still intend to differentiate.
  void truncate(std::size_t mark);

  /// Recompute every non-leaf value from its parents and compare with the
  /// stored values. True iff every recomputed tensor is bit-identical.
  bool replay_matches() const;

private:
  friend std::vector<Value> backward(const Value&, const std::vector<Value>&, bool);

  std::vector<NodePtr> nodes_;
  Mode mode_;
};

// ---- op helpers (each records onto the inputs' tape) ----

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value div(const Value& a, const Value& b);
Value smul(const Value& a, double s);
Value matmul(const Value& a, const Value& b, bool trans_a = false, bool trans_b = false);
Value relu(const Value& a);
Value log(const Value& a);
Value exp(const Value& a);
Value sum(const Value& a);                 // full reduction to a scalar
Value sum_axis(const Value& a, int axis);  // rank-2, axis 0 or 1
Value mean(const Value& a);
Value softmax(const Value& a);
Value gather(const Value& a, std::vector<std::uint32_t> index);
Value square(const Value& a);
Value sqrt(const Value& a);
Value reshape(const Value& a, std::vector<std::size_t> shape);

/// Same value, no gradient path.
Value detach(const Value& a);

/// Dot product of two equally-shaped tensors.
Value dot(const Value& a, const Value& b);

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator*(const Value& a, const Value& b) { return mul(a, b); }
inline Value operator*(const Value& a, double s) { return smul(a, s); }
inline Value operator*(double s, const Value& a) { return smul(a, s); }

/// Stable descending sort of a rank-1 node. The permutation is a constant
/// under differentiation, so d(sorted)/d(losses) is the permutation matrix;
/// ties keep the lower original index first.
std::pair<Value, std::vector<std::size_t>> sort_desc(const Value& losses);

/// Reverse-mode gradients of a scalar root with respect to `wrt`.
/// With create_graph the results stay connected to the tape and can be
/// differentiated again; otherwise they are returned as detached constants.
/// Unreachable wrt entries yield zeros.
std::vector<Value> backward(const Value& root, const std::vector<Value>& wrt,
                            bool create_graph = false);

/// True iff a gradient path from `wrt` to `root` exists.
bool has_grad_path(const Value& root, const Value& wrt);

/// Shared forward evaluation used by record() and replay.
Tensor eval_op(Op op, const std::vector<const Tensor*>& in, const OpAttrs& attrs);

}  // namespace metarisk::ad
