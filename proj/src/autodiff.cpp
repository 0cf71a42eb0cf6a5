#include "metarisk/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

namespace metarisk::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::ScalarMul: return "scalar-mul";
    case Op::Matmul: return "matmul";
    case Op::Relu: return "relu";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Softmax: return "softmax";
    case Op::Gather: return "gather";
    case Op::Scatter: return "scatter";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::Reshape: return "reshape";
    case Op::Detach: return "detach";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_fail(Op op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + a.shape_str() +
                   " and " + b.shape_str());
}

[[noreturn]] void shape_fail(Op op, const Tensor& a, const std::string& why) {
  throw ShapeError(std::string(op_name(op)) + ": " + why + ", got " + a.shape_str());
}

// Reads a tensor as a broadcast (r x c) grid. Supported operand pairs:
// identical shapes, a single-element tensor with anything, and a rank-2
// (m,n) with a (1,n) row or an (m,1) column.
struct Grid {
  const double* p;
  std::size_t r, c;
  double at(std::size_t i, std::size_t j) const {
    return p[(r == 1 ? 0 : i) * c + (c == 1 ? 0 : j)];
  }
};

Grid as_grid(const Tensor& t) {
  if (t.rank() == 2) return {t.data().data(), t.shape()[0], t.shape()[1]};
  if (t.rank() == 1) return {t.data().data(), 1, t.shape()[0]};
  return {t.data().data(), 1, 1};
}

bool broadcast_ok(const Tensor& a, const Tensor& b, std::vector<std::size_t>* out_shape) {
  if (a.same_shape(b)) {
    *out_shape = a.shape();
    return true;
  }
  if (a.numel() == 1) {
    *out_shape = b.shape();
    return true;
  }
  if (b.numel() == 1) {
    *out_shape = a.shape();
    return true;
  }
  if (a.rank() == 2 && b.rank() == 2) {
    auto m = std::max(a.shape()[0], b.shape()[0]);
    auto n = std::max(a.shape()[1], b.shape()[1]);
    auto fits = [&](const Tensor& t) {
      return (t.shape()[0] == m || t.shape()[0] == 1) &&
             (t.shape()[1] == n || t.shape()[1] == 1);
    };
    if (fits(a) && fits(b)) {
      *out_shape = {m, n};
      return true;
    }
  }
  return false;
}

template <typename F>
Tensor elementwise2(Op op, const Tensor& a, const Tensor& b, F f) {
  std::vector<std::size_t> shape;
  if (!broadcast_ok(a, b, &shape)) shape_fail(op, a, b);
  Tensor out(shape);
  Grid ga = as_grid(a), gb = as_grid(b), go = as_grid(out);
  double* o = out.data().data();
  for (std::size_t i = 0; i < go.r; ++i)
    for (std::size_t j = 0; j < go.c; ++j) o[i * go.c + j] = f(ga.at(i, j), gb.at(i, j));
  return out;
}

template <typename F>
Tensor elementwise1(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
  return out;
}

Tensor matmul_fw(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() != 2 || b.rank() != 2) shape_fail(Op::Matmul, a, b);
  std::size_t m = ta ? a.cols() : a.rows();
  std::size_t ka = ta ? a.rows() : a.cols();
  std::size_t kb = tb ? b.cols() : b.rows();
  std::size_t n = tb ? b.rows() : b.cols();
  if (ka != kb) shape_fail(Op::Matmul, a, b);
  Tensor out({m, n});
  double* o = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < ka; ++k) {
      double av = ta ? a.at(k, i) : a.at(i, k);
      const double* brow = tb ? nullptr : &b.data()[k * n];
      double* orow = &o[i * n];
      if (!tb) {
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * b.at(j, k);
      }
    }
  }
  return out;
}

Tensor sum_fw(const Tensor& a, int axis) {
  if (axis == -1) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return Tensor::scalar(s);
  }
  if (a.rank() != 2) shape_fail(Op::Sum, a, "axis reduction needs a rank-2 input");
  std::size_t m = a.rows(), n = a.cols();
  if (axis == 0) {
    Tensor out({1, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j] += a.at(i, j);
    return out;
  }
  if (axis == 1) {
    Tensor out({m, 1});
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a.at(i, j);
      out[i] = s;
    }
    return out;
  }
  shape_fail(Op::Sum, a, "axis must be -1, 0 or 1");
}

Tensor softmax_fw(const Tensor& a) {
  if (a.rank() != 1) shape_fail(Op::Softmax, a, "expects a rank-1 input");
  std::size_t n = a.numel();
  if (n == 0) shape_fail(Op::Softmax, a, "expects a nonempty input");
  double mx = a[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, a[i]);
  Tensor out(a.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(a[i] - mx);
    s += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= s;
  return out;
}

void check_index(Op op, const Tensor& a, const std::vector<std::uint32_t>& index,
                 std::size_t domain) {
  if (a.rank() != 1) shape_fail(op, a, "expects a rank-1 input");
  std::vector<bool> seen(domain, false);
  for (std::uint32_t i : index) {
    if (i >= domain || seen[i])
      throw ShapeError(std::string(op_name(op)) + ": index list must be injective into [0," +
                       std::to_string(domain) + ")");
    seen[i] = true;
  }
}

}  // namespace

Tensor eval_op(Op op, const std::vector<const Tensor*>& in, const OpAttrs& attrs) {
  switch (op) {
    case Op::Add: return elementwise2(op, *in[0], *in[1], [](double x, double y) { return x + y; });
    case Op::Sub: return elementwise2(op, *in[0], *in[1], [](double x, double y) { return x - y; });
    case Op::Mul: return elementwise2(op, *in[0], *in[1], [](double x, double y) { return x * y; });
    case Op::Div: return elementwise2(op, *in[0], *in[1], [](double x, double y) { return x / y; });
    case Op::ScalarMul:
      return elementwise1(*in[0], [s = attrs.scalar](double x) { return x * s; });
    case Op::Matmul: return matmul_fw(*in[0], *in[1], attrs.trans_a, attrs.trans_b);
    case Op::Relu: return elementwise1(*in[0], [](double x) { return x > 0.0 ? x : 0.0; });
    case Op::Log: return elementwise1(*in[0], [](double x) { return std::log(x); });
    case Op::Exp: return elementwise1(*in[0], [](double x) { return std::exp(x); });
    case Op::Sum: return sum_fw(*in[0], attrs.axis);
    case Op::Mean: {
      if (in[0]->numel() == 0) shape_fail(Op::Mean, *in[0], "expects a nonempty input");
      double s = 0.0;
      for (double v : in[0]->data()) s += v;
      return Tensor::scalar(s / static_cast<double>(in[0]->numel()));
    }
    case Op::Softmax: return softmax_fw(*in[0]);
    case Op::Gather: {
      check_index(op, *in[0], attrs.index, in[0]->numel());
      Tensor out({attrs.index.size()});
      for (std::size_t i = 0; i < attrs.index.size(); ++i) out[i] = (*in[0])[attrs.index[i]];
      return out;
    }
    case Op::Scatter: {
      check_index(op, *in[0], attrs.index, attrs.width);
      if (attrs.index.size() != in[0]->numel())
        shape_fail(op, *in[0], "index count must match input length");
      Tensor out({static_cast<std::size_t>(attrs.width)});
      for (std::size_t i = 0; i < attrs.index.size(); ++i) out[attrs.index[i]] = (*in[0])[i];
      return out;
    }
    case Op::Square: return elementwise1(*in[0], [](double x) { return x * x; });
    case Op::Sqrt: return elementwise1(*in[0], [](double x) { return std::sqrt(x); });
    case Op::Reshape: {
      if (Tensor::count(attrs.shape) != in[0]->numel())
        shape_fail(op, *in[0], "target " + metarisk::shape_str(attrs.shape) + " has wrong size");
      return Tensor(attrs.shape, in[0]->data());
    }
    case Op::Detach: return *in[0];
    case Op::Leaf: break;
  }
  throw AutodiffError("eval_op: cannot evaluate op " + std::string(op_name(op)));
}

Value Tape::leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = Op::Leaf;
  n->requires_grad = requires_grad;
  n->id = nodes_.size();
  n->tape = this;
  nodes_.push_back(n);
  return Value(n);
}

Value Tape::record(Op op, const std::vector<Value>& inputs, OpAttrs attrs) {
  if (op == Op::Leaf) throw AutodiffError("record: leaves are created via Tape::leaf");
  std::vector<const Tensor*> in;
  in.reserve(inputs.size());
  for (const Value& v : inputs) {
    if (!v.defined()) throw AutodiffError("record: undefined input");
    if (v.node()->tape != this)
      throw AutodiffError(std::string("record: input to ") + op_name(op) +
                          " belongs to a different tape");
    in.push_back(&v.node()->value);
  }

  auto n = std::make_shared<Node>();
  n->value = eval_op(op, in, attrs);
  n->op = op;
  n->attrs = std::move(attrs);
  n->parents.reserve(inputs.size());
  for (const Value& v : inputs) n->parents.push_back(v.ptr());
  if (op != Op::Detach)
    for (const Value& v : inputs) n->requires_grad |= v.requires_grad();
  n->id = nodes_.size();
  n->tape = this;
  nodes_.push_back(n);
  return Value(n);
}

void Tape::truncate(std::size_t mark) {
  // Newest first, so a node never outlives the parents the tape still holds.
  while (nodes_.size() > mark) nodes_.pop_back();
}

bool Tape::replay_matches() const {
  std::vector<Tensor> replayed(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = *nodes_[i];
    if (n.op == Op::Leaf) {
      replayed[i] = n.value;
      continue;
    }
    std::vector<const Tensor*> in;
    in.reserve(n.parents.size());
    for (const NodePtr& p : n.parents) in.push_back(&replayed[p->id]);
    replayed[i] = eval_op(n.op, in, n.attrs);
    if (replayed[i].shape() != n.value.shape()) return false;
    if (std::memcmp(replayed[i].data().data(), n.value.data().data(),
                    n.value.numel() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

namespace {

Tape& tape_of(const Value& v) {
  if (!v.defined()) throw AutodiffError("op on undefined value");
  return *v.node()->tape;
}

}  // namespace

Value add(const Value& a, const Value& b) { return tape_of(a).record(Op::Add, {a, b}); }
Value sub(const Value& a, const Value& b) { return tape_of(a).record(Op::Sub, {a, b}); }
Value mul(const Value& a, const Value& b) { return tape_of(a).record(Op::Mul, {a, b}); }
Value div(const Value& a, const Value& b) { return tape_of(a).record(Op::Div, {a, b}); }

Value smul(const Value& a, double s) {
  OpAttrs at;
  at.scalar = s;
  return tape_of(a).record(Op::ScalarMul, {a}, std::move(at));
}

Value matmul(const Value& a, const Value& b, bool trans_a, bool trans_b) {
  OpAttrs at;
  at.trans_a = trans_a;
  at.trans_b = trans_b;
  return tape_of(a).record(Op::Matmul, {a, b}, std::move(at));
}

Value relu(const Value& a) { return tape_of(a).record(Op::Relu, {a}); }
Value log(const Value& a) { return tape_of(a).record(Op::Log, {a}); }
Value exp(const Value& a) { return tape_of(a).record(Op::Exp, {a}); }

Value sum(const Value& a) {
  OpAttrs at;
  at.axis = -1;
  return tape_of(a).record(Op::Sum, {a}, std::move(at));
}

Value sum_axis(const Value& a, int axis) {
  OpAttrs at;
  at.axis = axis;
  return tape_of(a).record(Op::Sum, {a}, std::move(at));
}

Value mean(const Value& a) { return tape_of(a).record(Op::Mean, {a}); }
Value softmax(const Value& a) { return tape_of(a).record(Op::Softmax, {a}); }

Value gather(const Value& a, std::vector<std::uint32_t> index) {
  OpAttrs at;
  at.index = std::move(index);
  return tape_of(a).record(Op::Gather, {a}, std::move(at));
}

Value square(const Value& a) { return tape_of(a).record(Op::Square, {a}); }
Value sqrt(const Value& a) { return tape_of(a).record(Op::Sqrt, {a}); }

Value reshape(const Value& a, std::vector<std::size_t> shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return tape_of(a).record(Op::Reshape, {a}, std::move(at));
}

Value detach(const Value& a) { return tape_of(a).record(Op::Detach, {a}); }

Value dot(const Value& a, const Value& b) { return sum(mul(a, b)); }

std::pair<Value, std::vector<std::size_t>> sort_desc(const Value& losses) {
  const Tensor& t = losses.value();
  if (t.rank() != 1)
    throw ShapeError("sort_desc: expects a rank-1 input, got " + t.shape_str());
  std::vector<std::size_t> perm(t.numel());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](std::size_t i, std::size_t j) { return t[i] > t[j]; });
  std::vector<std::uint32_t> idx(perm.begin(), perm.end());
  return {gather(losses, std::move(idx)), perm};
}

namespace {

std::vector<std::uint32_t> invert_index(const std::vector<std::uint32_t>& index,
                                        std::size_t domain) {
  // Only valid for full permutations; partial gathers go through Scatter.
  std::vector<std::uint32_t> inv(domain);
  for (std::size_t i = 0; i < index.size(); ++i) inv[index[i]] = static_cast<std::uint32_t>(i);
  return inv;
}

/// Sum a broadcast adjoint back down to the shape of the operand it fed.
Value reduce_to(const Value& v, const std::vector<std::size_t>& shape) {
  if (v.shape() == shape) return v;
  std::size_t want = Tensor::count(shape);
  if (want == 1) return reshape(sum(v), shape);
  if (v.shape().size() == 2 && shape.size() == 2) {
    if (shape[0] == 1 && shape[1] == v.shape()[1]) return sum_axis(v, 0);
    if (shape[1] == 1 && shape[0] == v.shape()[0]) return sum_axis(v, 1);
  }
  throw AutodiffError("backward: cannot reduce adjoint " + metarisk::shape_str(v.shape()) +
                      " to " + metarisk::shape_str(shape));
}

/// Per-op vector-Jacobian products, expressed with recorded ops so that the
/// results remain differentiable. `out` is the node being differentiated,
/// `adj` its adjoint; contributions are accumulated into `sink(parent, v)`.
template <typename Sink>
void vjp(const NodePtr& node, const Value& adj, Tape& tape, Sink sink) {
  const auto& ps = node->parents;
  auto parent = [&](std::size_t i) { return Value(ps[i]); };
  Value out(node);

  switch (node->op) {
    case Op::Add:
      sink(0, reduce_to(adj, ps[0]->value.shape()));
      sink(1, reduce_to(adj, ps[1]->value.shape()));
      return;
    case Op::Sub:
      sink(0, reduce_to(adj, ps[0]->value.shape()));
      sink(1, reduce_to(smul(adj, -1.0), ps[1]->value.shape()));
      return;
    case Op::Mul:
      sink(0, reduce_to(mul(adj, parent(1)), ps[0]->value.shape()));
      sink(1, reduce_to(mul(adj, parent(0)), ps[1]->value.shape()));
      return;
    case Op::Div:
      sink(0, reduce_to(div(adj, parent(1)), ps[0]->value.shape()));
      sink(1, reduce_to(smul(mul(adj, div(out, parent(1))), -1.0), ps[1]->value.shape()));
      return;
    case Op::ScalarMul:
      sink(0, smul(adj, node->attrs.scalar));
      return;
    case Op::Matmul: {
      bool ta = node->attrs.trans_a, tb = node->attrs.trans_b;
      Value a = parent(0), b = parent(1);
      if (!ta && !tb) {
        sink(0, matmul(adj, b, false, true));
        sink(1, matmul(a, adj, true, false));
      } else if (ta && !tb) {
        sink(0, matmul(b, adj, false, true));
        sink(1, matmul(a, adj, false, false));
      } else if (!ta && tb) {
        sink(0, matmul(adj, b, false, false));
        sink(1, matmul(adj, a, true, false));
      } else {
        sink(0, matmul(b, adj, true, true));
        sink(1, matmul(adj, a, true, true));
      }
      return;
    }
    case Op::Relu: {
      Tensor mask(ps[0]->value.shape());
      for (std::size_t i = 0; i < mask.numel(); ++i)
        mask[i] = ps[0]->value[i] > 0.0 ? 1.0 : 0.0;
      sink(0, mul(adj, tape.constant(std::move(mask))));
      return;
    }
    case Op::Log:
      sink(0, div(adj, parent(0)));
      return;
    case Op::Exp:
      sink(0, mul(adj, out));
      return;
    case Op::Sum:
      sink(0, mul(tape.constant(Tensor::full(ps[0]->value.shape(), 1.0)), adj));
      return;
    case Op::Mean:
      sink(0, mul(tape.constant(Tensor::full(ps[0]->value.shape(),
                                             1.0 / static_cast<double>(ps[0]->value.numel()))),
                  adj));
      return;
    case Op::Softmax:
      // dx = y * (d - <y, d>)
      sink(0, mul(out, sub(adj, dot(out, adj))));
      return;
    case Op::Gather: {
      std::size_t domain = ps[0]->value.numel();
      if (node->attrs.index.size() == domain) {
        sink(0, gather(adj, invert_index(node->attrs.index, domain)));
      } else {
        OpAttrs at;
        at.index = node->attrs.index;
        at.width = static_cast<std::uint32_t>(domain);
        sink(0, tape.record(Op::Scatter, {adj}, std::move(at)));
      }
      return;
    }
    case Op::Scatter:
      sink(0, gather(adj, node->attrs.index));
      return;
    case Op::Square:
      sink(0, mul(adj, smul(parent(0), 2.0)));
      return;
    case Op::Sqrt:
      sink(0, div(smul(adj, 0.5), out));
      return;
    case Op::Reshape:
      sink(0, reshape(adj, ps[0]->value.shape()));
      return;
    case Op::Detach:
    case Op::Leaf:
      return;
  }
}

/// Ancestors of root reachable through requires_grad edges.
std::unordered_set<const Node*> grad_ancestors(const Value& root) {
  std::unordered_set<const Node*> seen;
  std::vector<const Node*> stack;
  if (root.requires_grad()) {
    seen.insert(root.node());
    stack.push_back(root.node());
  }
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    if (n->op == Op::Detach) continue;
    for (const NodePtr& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  return seen;
}

}  // namespace

std::vector<Value> backward(const Value& root, const std::vector<Value>& wrt,
                            bool create_graph) {
  if (!root.defined()) throw AutodiffError("backward: undefined root");
  if (root.numel() != 1)
    throw AutodiffError("backward: root must be a scalar, got shape " +
                        root.value().shape_str());
  Tape& tape = *root.node()->tape;
  if (create_graph && tape.mode() == Mode::first_order)
    throw AutodiffError("backward: create_graph requires a higher-order tape");
  for (const Value& w : wrt) {
    if (!w.defined()) throw AutodiffError("backward: undefined wrt node");
    if (w.node()->tape != &tape)
      throw AutodiffError("backward: wrt node belongs to a different tape");
    if (!w.requires_grad())
      throw AutodiffError("backward: wrt node is detached (requires_grad is false)");
  }

  auto reach = grad_ancestors(root);

  // Tape order is topological, so walking ids downward visits every node
  // after all of its children.
  std::vector<const Node*> order(reach.begin(), reach.end());
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });

  std::unordered_map<const Node*, Value> adjoint;
  if (!reach.empty())
    adjoint[root.node()] = tape.constant(Tensor::full(root.value().shape(), 1.0));

  for (const Node* n : order) {
    auto it = adjoint.find(n);
    if (it == adjoint.end()) continue;  // no downstream contribution
    Value adj = it->second;
    NodePtr np = tape.nodes_[n->id];
    vjp(np, adj, tape, [&](std::size_t pi, const Value& contrib) {
      const Node* p = np->parents[pi].get();
      if (!p->requires_grad || !reach.count(p)) return;
      auto [slot, fresh] = adjoint.try_emplace(p, contrib);
      if (!fresh) slot->second = add(slot->second, contrib);
    });
  }

  std::vector<Value> grads;
  grads.reserve(wrt.size());
  for (const Value& w : wrt) {
    auto it = adjoint.find(w.node());
    Value g = it != adjoint.end() ? it->second
                                  : tape.constant(Tensor(w.value().shape()));
    grads.push_back(create_graph ? g : detach(g));
  }
  return grads;
}

bool has_grad_path(const Value& root, const Value& wrt) {
  if (!root.defined() || !wrt.defined()) return false;
  auto reach = grad_ancestors(root);
  return reach.count(wrt.node()) > 0;
}

}  // namespace metarisk::ad
