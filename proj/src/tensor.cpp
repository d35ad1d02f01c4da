#include "geico/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

#include "geico/linalg.hpp"

namespace geico {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

Tensor make(Shape shape, std::vector<double> data, const char* op) {
  if (numel(shape) != data.size()) {
    throw ShapeError(std::string(op) + ": shape " + to_string(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  check_finite(data, op);
  return Tensor(std::move(shape), std::move(data));
}

// Strides of `in` aligned against an output of rank `rank`; broadcast axes get 0.
std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t ai = in.size() - 1 - k;
    const std::size_t oi = out.size() - 1 - k;
    strides[oi] = (in[ai] == 1) ? 0 : stride;
    stride *= in[ai];
  }
  return strides;
}

// Calls f(out_index, a_offset, b_offset) for every element of the broadcast output.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
  const std::size_t n = numel(out);
  if (sa == out && sb == out) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  if (sa == out && numel(sb) == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, std::size_t{0});
    return;
  }
  if (sb == out && numel(sa) == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0}, i);
    return;
  }
  const std::size_t rank = out.size();
  const auto st_a = aligned_strides(sa, out);
  const auto st_b = aligned_strides(sb, out);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += st_a[d];
      ob += st_b[d];
      if (idx[d] < out[d]) break;
      oa -= st_a[d] * out[d];
      ob -= st_b[d] * out[d];
      idx[d] = 0;
    }
  }
}

linalg::Matrix as_matrix(const Tensor& t) {
  return linalg::Matrix(t.dim(0), t.dim(1), t.to_vector());
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     to_string(t.shape()));
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void check_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value produced");
  }
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (numel(shape_) != data.size()) {
    throw ShapeError("Tensor: shape " + to_string(shape_) + " does not match " + std::to_string(data.size()) +
                     " values");
  }
  check_finite(data, "Tensor");
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw ShapeError("dim: axis out of range for shape " + to_string(shape_));
  return shape_[axis];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape_) + " is not a scalar");
  return (*data_)[0];
}

Tensor Tensor::view(Shape shape) const {
  if (numel(shape) != size()) throw ShapeError("view: cannot view " + to_string(shape_) + " as " + to_string(shape));
  Tensor t = detach();
  t.shape_ = std::move(shape);
  return t;
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

// ---------------------------------------------------------------------------
// Tape

int Tape::push(Node node) {
  if (consumed_) throw std::logic_error("Tape: recording after backward");
  nodes_.push_back(std::move(node));
  grads_.emplace_back();
  is_leaf_.push_back(false);
  return static_cast<int>(nodes_.size() - 1);
}

Tensor Tape::leaf(const Tensor& value) {
  Tensor t = value.detach();
  t.node_ = push(Node{"leaf", {}, value.size(), nullptr});
  is_leaf_.back() = true;
  t.tape_ = this;
  return t;
}

std::vector<Tensor> Tape::leaves(const std::vector<Tensor>& values) {
  std::vector<Tensor> out;
  out.reserve(values.size());
  for (const auto& v : values) out.push_back(leaf(v));
  return out;
}

Tensor Tape::record(Tensor result, std::string op, std::initializer_list<const Tensor*> inputs,
                    BackwardFn backward) {
  Node node{std::move(op), {}, result.size(), std::move(backward)};
  for (const Tensor* in : inputs) {
    if (in->tape_ == this) node.parents.push_back(in->node_);
  }
  result.node_ = push(std::move(node));
  result.tape_ = this;
  return result;
}

Tensor Tape::record(Tensor result, std::string op, const std::vector<Tensor>& inputs, BackwardFn backward) {
  Node node{std::move(op), {}, result.size(), std::move(backward)};
  for (const Tensor& in : inputs) {
    if (in.tape_ == this) node.parents.push_back(in.node_);
  }
  result.node_ = push(std::move(node));
  result.tape_ = this;
  return result;
}

std::span<double> Tape::grad_for(const Tensor& input) {
  if (input.tape_ != this) return {};
  auto& g = grads_[static_cast<std::size_t>(input.node_)];
  if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(input.node_)].size, 0.0);
  return g;
}

Gradients Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss of shape " + to_string(loss.shape()) + " is not scalar");
  if (consumed_) throw std::logic_error("backward: tape already consumed");
  if (loss.tape_ != nullptr && loss.tape_ != this) throw std::logic_error("backward: loss belongs to another tape");

  if (loss.tape_ == this) {
    grads_[static_cast<std::size_t>(loss.node_)].assign(1, 1.0);
    for (std::size_t i = static_cast<std::size_t>(loss.node_) + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (!n.backward || grads_[i].empty()) continue;
      check_finite(grads_[i], "backward");
      n.backward(grads_[i], *this);
      if (!is_leaf_[i]) std::vector<double>().swap(grads_[i]);
    }
  }
  consumed_ = true;

  Gradients out;
  out.tape_ = this;
  out.grads_.resize(nodes_.size());
  out.shapes_.resize(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!is_leaf_[i]) continue;
    if (grads_[i].empty()) grads_[i].assign(nodes_[i].size, 0.0);
    out.grads_[i] = std::move(grads_[i]);
  }
  // Closures hold references to saved activations; release them now.
  for (auto& n : nodes_) n.backward = nullptr;
  return out;
}

std::span<const double> Gradients::raw(const Tensor& leaf) const {
  if (leaf.tape() != tape_ || leaf.node() < 0) throw std::logic_error("Gradients: tensor is not a leaf of this tape");
  const auto& g = grads_[static_cast<std::size_t>(leaf.node())];
  if (g.size() != leaf.size()) throw std::logic_error("Gradients: tensor is not a leaf of this tape");
  return g;
}

Tensor Gradients::operator[](const Tensor& leaf) const {
  auto g = raw(leaf);
  return Tensor(leaf.shape(), std::vector<double>(g.begin(), g.end()));
}

Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->tracked()) continue;
    if (tape && t->tape() != tape) throw std::logic_error("op mixes tensors from different tapes");
    tape = t->tape();
  }
  return tape;
}

// ---------------------------------------------------------------------------
// Elementwise

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("broadcast: incompatible shapes " + to_string(a) + " and " + to_string(b));
    }
    out[rank - 1 - k] = std::max(da, db);
  }
  return out;
}

Tensor elementwise(UnaryOp op, const Tensor& a) {
  const auto x = a.data();
  std::vector<double> y(x.size());
  const char* name = "unary";
  switch (op) {
    case UnaryOp::Neg: name = "neg"; for (std::size_t i = 0; i < x.size(); ++i) y[i] = -x[i]; break;
    case UnaryOp::Exp: name = "exp"; for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::exp(x[i]); break;
    case UnaryOp::Log: name = "log"; for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::log(x[i]); break;
    case UnaryOp::Tanh: name = "tanh"; for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]); break;
    case UnaryOp::Relu: name = "relu"; for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0; break;
    case UnaryOp::Sigmoid:
      name = "sigmoid";
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
      break;
    case UnaryOp::Square: name = "square"; for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * x[i]; break;
    case UnaryOp::Sqrt: name = "sqrt"; for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::sqrt(x[i]); break;
  }
  Tensor out = make(a.shape(), std::move(y), name);
  Tape* tape = a.tape();
  if (!tape) return out;
  return tape->record(out, name, {&a}, [a, out, op](std::span<const double> g, Tape& t) {
    auto ga = t.grad_for(a);
    if (ga.empty()) return;
    const auto x = a.data();
    const auto y = out.data();
    switch (op) {
      case UnaryOp::Neg: for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i]; break;
      case UnaryOp::Exp: for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i]; break;
      case UnaryOp::Log: for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i]; break;
      case UnaryOp::Tanh: for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]); break;
      case UnaryOp::Relu: for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0; break;
      case UnaryOp::Sigmoid: for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]); break;
      case UnaryOp::Square: for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * g[i] * x[i]; break;
      case UnaryOp::Sqrt: for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 0.5 * g[i] / y[i]; break;
    }
  });
}

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  const Shape shape = broadcast_shape(a.shape(), b.shape());
  const auto x = a.data();
  const auto z = b.data();
  std::vector<double> y(numel(shape));
  const char* name = "binary";
  switch (op) {
    case BinaryOp::Add:
      name = "add";
      for_each_broadcast(shape, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = x[ia] + z[ib]; });
      break;
    case BinaryOp::Sub:
      name = "sub";
      for_each_broadcast(shape, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = x[ia] - z[ib]; });
      break;
    case BinaryOp::Mul:
      name = "mul";
      for_each_broadcast(shape, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = x[ia] * z[ib]; });
      break;
    case BinaryOp::Div:
      name = "div";
      for_each_broadcast(shape, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) { y[i] = x[ia] / z[ib]; });
      break;
  }
  Tensor out = make(shape, std::move(y), name);
  Tape* tape = common_tape({&a, &b});
  if (!tape) return out;
  return tape->record(out, name, {&a, &b}, [a, b, shape, op](std::span<const double> g, Tape& t) {
    auto ga = t.grad_for(a);
    auto gb = t.grad_for(b);
    const auto x = a.data();
    const auto z = b.data();
    const bool wa = !ga.empty();
    const bool wb = !gb.empty();
    switch (op) {
      case BinaryOp::Add:
        for_each_broadcast(shape, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (wa) ga[ia] += g[i];
          if (wb) gb[ib] += g[i];
        });
        break;
      case BinaryOp::Sub:
        for_each_broadcast(shape, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (wa) ga[ia] += g[i];
          if (wb) gb[ib] -= g[i];
        });
        break;
      case BinaryOp::Mul:
        for_each_broadcast(shape, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (wa) ga[ia] += g[i] * z[ib];
          if (wb) gb[ib] += g[i] * x[ia];
        });
        break;
      case BinaryOp::Div:
        for_each_broadcast(shape, a.shape(), b.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (wa) ga[ia] += g[i] / z[ib];
          if (wb) gb[ib] -= g[i] * x[ia] / (z[ib] * z[ib]);
        });
        break;
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * factor;
  Tensor out = make(a.shape(), std::move(y), "scale");
  Tape* tape = a.tape();
  if (!tape) return out;
  return tape->record(out, "scale", {&a}, [a, factor](std::span<const double> g, Tape& t) {
    auto ga = t.grad_for(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * factor;
  });
}

Tensor add_scalar(const Tensor& a, double offset) {
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + offset;
  Tensor out = make(a.shape(), std::move(y), "add_scalar");
  Tape* tape = a.tape();
  if (!tape) return out;
  return tape->record(out, "add_scalar", {&a}, [a](std::span<const double> g, Tape& t) {
    auto ga = t.grad_for(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

Tensor clamp_max(const Tensor& a, double bound) {
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::min(x[i], bound);
  Tensor out = make(a.shape(), std::move(y), "clamp_max");
  Tape* tape = a.tape();
  if (!tape) return out;
  return tape->record(out, "clamp_max", {&a}, [a, bound](std::span<const double> g, Tape& t) {
    auto ga = t.grad_for(a);
    const auto x = a.data();
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (x[i] < bound) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = make({}, {s}, "sum");
  Tape* tape = a.tape();
  if (!tape) return out;
  return tape->record(out, "sum", {&a}, [a](std::span<const double> g, Tape& t) {
    auto ga = t.grad_for(a);
    for (double& v : ga) v += g[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor sum(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("sum: axis out of range for shape " + to_string(a.shape()));
  const Shape& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  const auto x = a.data();
  std::vector<double> y(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += x[(o * len + k) * inner + i];
  Tensor out = make(out_shape, std::move(y), "sum_axis");
  Tape* tape = a.tape();
  if (!tape) return out;
  return tape->record(out, "sum_axis", {&a}, [a, outer, inner, len](std::span<const double> g, Tape& t) {
    auto ga = t.grad_for(a);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < inner; ++i) ga[(o * len + k) * inner + i] += g[o * inner + i];
  });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tensor out = a.detach().view(std::move(shape));
  Tape* tape = a.tape();
  if (!tape) return out;
  return tape->record(out, "reshape", {&a}, [a](std::span<const double> g, Tape& t) {
    auto ga = t.grad_for(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> y(m * n);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x[i * n + j];
  Tensor out = make({n, m}, std::move(y), "transpose");
  Tape* tape = a.tape();
  if (!tape) return out;
  return tape->record(out, "transpose", {&a}, [a, m, n](std::span<const double> g, Tape& t) {
    auto ga = t.grad_for(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  std::vector<double> y(m * n);
  MapMat(y.data(), m, n).noalias() = MapConstMat(a.data().data(), m, k) * MapConstMat(b.data().data(), k, n);
  Tensor out = make({m, n}, std::move(y), "matmul");
  Tape* tape = common_tape({&a, &b});
  if (!tape) return out;
  return tape->record(out, "matmul", {&a, &b}, [a, b, m, k, n](std::span<const double> g, Tape& t) {
    MapConstMat G(g.data(), m, n);
    auto ga = t.grad_for(a);
    if (!ga.empty()) MapMat(ga.data(), m, k).noalias() += G * MapConstMat(b.data().data(), k, n).transpose();
    auto gb = t.grad_for(b);
    if (!gb.empty()) MapMat(gb.data(), k, n).noalias() += MapConstMat(a.data().data(), m, k).transpose() * G;
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) ok = false;
    if (!ok) throw ShapeError("concat: shape " + to_string(s) + " incompatible with " + to_string(s0));
    total += s[axis];
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<double> y(outer * total * inner);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis);
    const auto x = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                  y.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    offset += len;
  }
  Tensor out = make(out_shape, std::move(y), "concat");
  Tape* tape = nullptr;
  for (const auto& p : parts) {
    if (p.tracked()) {
      if (tape && p.tape() != tape) throw std::logic_error("concat mixes tensors from different tapes");
      tape = p.tape();
    }
  }
  if (!tape) return out;
  return tape->record(out, "concat", parts, [parts, axis, outer, inner, total](std::span<const double> g, Tape& t) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t len = p.dim(axis);
      auto gp = t.grad_for(p);
      if (!gp.empty()) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < len * inner; ++i) gp[o * len * inner + i] += g[(o * total + offset) * inner + i];
      }
      offset += len;
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice: invalid range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + to_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis], out_len = end - begin;
  Shape out_shape = s;
  out_shape[axis] = out_len;
  const auto x = a.data();
  std::vector<double> y(outer * out_len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * len + begin) * inner), out_len * inner,
                y.begin() + static_cast<std::ptrdiff_t>(o * out_len * inner));
  Tensor out = make(out_shape, std::move(y), "slice");
  Tape* tape = a.tape();
  if (!tape) return out;
  return tape->record(out, "slice", {&a}, [a, outer, inner, len, begin, out_len](std::span<const double> g, Tape& t) {
    auto ga = t.grad_for(a);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < out_len * inner; ++i) ga[(o * len + begin) * inner + i] += g[o * out_len * inner + i];
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, ho, wo;
  Conv2dParams p;
};

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t hw_out = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = cols + ((ci * g.kh + ky) * g.kw + kx) * hw_out;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.p.stride + ky * g.p.dilation) - static_cast<long>(g.p.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.p.stride + kx * g.p.dilation) - static_cast<long>(g.p.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w);
            row[oy * g.wo + ox] = inside ? x[(ci * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t hw_out = g.ho * g.wo;
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = cols + ((ci * g.kh + ky) * g.kw + kx) * hw_out;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.p.stride + ky * g.p.dilation) - static_cast<long>(g.p.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.p.stride + kx * g.p.dilation) - static_cast<long>(g.p.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            dx[(ci * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, Conv2dParams params) {
  require_rank(x, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  if (params.stride == 0 || params.dilation == 0) throw ShapeError("conv2d: stride and dilation must be positive");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2), kernel.dim(3), 0, 0, params};
  if (kernel.dim(1) != g.c) {
    throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) + " does not match input " + to_string(x.shape()));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  const std::size_t eff_h = (g.kh - 1) * params.dilation + 1;
  const std::size_t eff_w = (g.kw - 1) * params.dilation + 1;
  if (eff_h > g.h + 2 * params.pad || eff_w > g.w + 2 * params.pad) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  g.ho = (g.h + 2 * params.pad - eff_h) / params.stride + 1;
  g.wo = (g.w + 2 * params.pad - eff_w) / params.stride + 1;

  const std::size_t k_rows = g.c * g.kh * g.kw;
  const std::size_t hw_out = g.ho * g.wo;
  const bool pointwise = g.kh == 1 && g.kw == 1 && params.stride == 1 && params.pad == 0;
  std::vector<double> y(g.n * g.o * hw_out);
  std::vector<double> cols(pointwise ? 0 : k_rows * hw_out);
  MapConstMat K(kernel.data().data(), g.o, k_rows);
  for (std::size_t ni = 0; ni < g.n; ++ni) {
    const double* xn = x.data().data() + ni * g.c * g.h * g.w;
    const double* src = xn;
    if (!pointwise) {
      im2col(xn, g, cols.data());
      src = cols.data();
    }
    MapMat(y.data() + ni * g.o * hw_out, g.o, hw_out).noalias() = K * MapConstMat(src, k_rows, hw_out);
  }
  Tensor out = make({g.n, g.o, g.ho, g.wo}, std::move(y), "conv2d");
  Tape* tape = common_tape({&x, &kernel});
  if (!tape) return out;
  return tape->record(out, "conv2d", {&x, &kernel}, [x, kernel, g, k_rows, hw_out, pointwise](std::span<const double> grad, Tape& t) {
    auto gx = t.grad_for(x);
    auto gk = t.grad_for(kernel);
    MapConstMat K(kernel.data().data(), g.o, k_rows);
    std::vector<double> cols(pointwise ? 0 : k_rows * hw_out);
    std::vector<double> dcols(pointwise ? 0 : k_rows * hw_out);
    for (std::size_t ni = 0; ni < g.n; ++ni) {
      MapConstMat G(grad.data() + ni * g.o * hw_out, g.o, hw_out);
      const double* xn = x.data().data() + ni * g.c * g.h * g.w;
      if (!gk.empty()) {
        const double* src = xn;
        if (!pointwise) {
          im2col(xn, g, cols.data());
          src = cols.data();
        }
        MapMat(gk.data(), g.o, k_rows).noalias() += G * MapConstMat(src, k_rows, hw_out).transpose();
      }
      if (!gx.empty()) {
        double* dxn = gx.data() + ni * g.c * g.h * g.w;
        if (pointwise) {
          MapMat(dxn, k_rows, hw_out).noalias() += K.transpose() * G;
        } else {
          MapMat(dcols.data(), k_rows, hw_out).noalias() = K.transpose() * G;
          col2im_add(dcols.data(), g, dxn);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Resampling

Tensor avg_pool2d(const Tensor& x, std::size_t f) {
  require_rank(x, 4, "avg_pool2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (f == 0 || h % f != 0 || w % f != 0) throw ShapeError("avg_pool2d: spatial size not divisible by factor");
  const std::size_t ho = h / f, wo = w / f;
  const double inv = 1.0 / static_cast<double>(f * f);
  const auto xd = x.data();
  std::vector<double> y(n * c * ho * wo, 0.0);
  for (std::size_t p = 0; p < n * c; ++p)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) y[(p * ho + i / f) * wo + j / f] += xd[(p * h + i) * w + j] * inv;
  Tensor out = make({n, c, ho, wo}, std::move(y), "avg_pool2d");
  Tape* tape = x.tape();
  if (!tape) return out;
  return tape->record(out, "avg_pool2d", {&x}, [x, n, c, h, w, ho, wo, f, inv](std::span<const double> g, Tape& t) {
    auto gx = t.grad_for(x);
    for (std::size_t p = 0; p < n * c; ++p)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) gx[(p * h + i) * w + j] += g[(p * ho + i / f) * wo + j / f] * inv;
  });
}

namespace {

struct LinearTaps {
  std::size_t lo, hi;
  double w_lo, w_hi;
};

std::vector<LinearTaps> bilinear_taps(std::size_t in, std::size_t factor) {
  std::vector<LinearTaps> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    const double frac = src - static_cast<double>(lo);
    taps[o] = {lo, hi, 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::size_t factor) {
  require_rank(x, 4, "upsample_bilinear");
  if (factor == 0) throw ShapeError("upsample_bilinear: factor must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h * factor, wo = w * factor;
  const auto ty = bilinear_taps(h, factor);
  const auto tx = bilinear_taps(w, factor);
  const auto xd = x.data();
  std::vector<double> y(n * c * ho * wo);
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* src = xd.data() + p * h * w;
    double* dst = y.data() + p * ho * wo;
    for (std::size_t i = 0; i < ho; ++i) {
      const auto& a = ty[i];
      for (std::size_t j = 0; j < wo; ++j) {
        const auto& b = tx[j];
        dst[i * wo + j] = a.w_lo * (b.w_lo * src[a.lo * w + b.lo] + b.w_hi * src[a.lo * w + b.hi]) +
                          a.w_hi * (b.w_lo * src[a.hi * w + b.lo] + b.w_hi * src[a.hi * w + b.hi]);
      }
    }
  }
  Tensor out = make({n, c, ho, wo}, std::move(y), "upsample_bilinear");
  Tape* tape = x.tape();
  if (!tape) return out;
  return tape->record(out, "upsample_bilinear", {&x}, [x, n, c, h, w, ho, wo, ty, tx](std::span<const double> g, Tape& t) {
    auto gx = t.grad_for(x);
    for (std::size_t p = 0; p < n * c; ++p) {
      double* dst = gx.data() + p * h * w;
      const double* gp = g.data() + p * ho * wo;
      for (std::size_t i = 0; i < ho; ++i) {
        const auto& a = ty[i];
        for (std::size_t j = 0; j < wo; ++j) {
          const auto& b = tx[j];
          const double v = gp[i * wo + j];
          dst[a.lo * w + b.lo] += v * a.w_lo * b.w_lo;
          dst[a.lo * w + b.hi] += v * a.w_lo * b.w_hi;
          dst[a.hi * w + b.lo] += v * a.w_hi * b.w_lo;
          dst[a.hi * w + b.hi] += v * a.w_hi * b.w_hi;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Channel softmax

namespace {

std::vector<double> log_softmax_values(const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto xd = x.data();
  std::vector<double> y(xd.size());
  for (std::size_t ni = 0; ni < n; ++ni) {
    const std::size_t base = ni * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      double mx = xd[base + p];
      for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, xd[base + k * hw + p]);
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += std::exp(xd[base + k * hw + p] - mx);
      const double lse = mx + std::log(s);
      for (std::size_t k = 0; k < c; ++k) y[base + k * hw + p] = xd[base + k * hw + p] - lse;
    }
  }
  return y;
}

}  // namespace

Tensor log_softmax_channels(const Tensor& x) {
  require_rank(x, 4, "log_softmax_channels");
  Tensor out = make(x.shape(), log_softmax_values(x), "log_softmax");
  Tape* tape = x.tape();
  if (!tape) return out;
  return tape->record(out, "log_softmax", {&x}, [x, out](std::span<const double> g, Tape& t) {
    auto gx = t.grad_for(x);
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const auto y = out.data();
    for (std::size_t ni = 0; ni < n; ++ni) {
      const std::size_t base = ni * c * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        double gs = 0.0;
        for (std::size_t k = 0; k < c; ++k) gs += g[base + k * hw + p];
        for (std::size_t k = 0; k < c; ++k) gx[base + k * hw + p] += g[base + k * hw + p] - std::exp(y[base + k * hw + p]) * gs;
      }
    }
  });
}

Tensor softmax_channels(const Tensor& x) {
  require_rank(x, 4, "softmax_channels");
  std::vector<double> y = log_softmax_values(x);
  for (double& v : y) v = std::exp(v);
  Tensor out = make(x.shape(), std::move(y), "softmax");
  Tape* tape = x.tape();
  if (!tape) return out;
  return tape->record(out, "softmax", {&x}, [x, out](std::span<const double> g, Tape& t) {
    auto gx = t.grad_for(x);
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const auto y = out.data();
    for (std::size_t ni = 0; ni < n; ++ni) {
      const std::size_t base = ni * c * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        double dot = 0.0;
        for (std::size_t k = 0; k < c; ++k) dot += g[base + k * hw + p] * y[base + k * hw + p];
        for (std::size_t k = 0; k < c; ++k) gx[base + k * hw + p] += y[base + k * hw + p] * (g[base + k * hw + p] - dot);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Squeeze

namespace {

// Index of x[n, c, 2i+dy, 2j+dx] and of its squeezed position.
template <typename F>
void for_each_squeeze(std::size_t n, std::size_t c, std::size_t h, std::size_t w, F&& f) {
  const std::size_t h2 = h / 2, w2 = w / 2;
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t i = 0; i < h2; ++i)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t j = 0; j < w2; ++j)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t src = ((ni * c + ci) * h + 2 * i + dy) * w + 2 * j + dx;
              const std::size_t dst = ((ni * 4 * c + ci * 4 + dy * 2 + dx) * h2 + i) * w2 + j;
              f(src, dst);
            }
}

}  // namespace

Tensor squeeze2x2(const Tensor& x) {
  require_rank(x, 4, "squeeze2x2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("squeeze2x2: spatial size " + to_string(x.shape()) + " is odd");
  const auto xd = x.data();
  std::vector<double> y(xd.size());
  for_each_squeeze(n, c, h, w, [&](std::size_t src, std::size_t dst) { y[dst] = xd[src]; });
  Tensor out = make({n, 4 * c, h / 2, w / 2}, std::move(y), "squeeze2x2");
  Tape* tape = x.tape();
  if (!tape) return out;
  return tape->record(out, "squeeze2x2", {&x}, [x, n, c, h, w](std::span<const double> g, Tape& t) {
    auto gx = t.grad_for(x);
    for_each_squeeze(n, c, h, w, [&](std::size_t src, std::size_t dst) { gx[src] += g[dst]; });
  });
}

Tensor unsqueeze2x2(const Tensor& x) {
  require_rank(x, 4, "unsqueeze2x2");
  if (x.dim(1) % 4 != 0) throw ShapeError("unsqueeze2x2: channel count not divisible by 4");
  const std::size_t n = x.dim(0), c = x.dim(1) / 4, h = x.dim(2) * 2, w = x.dim(3) * 2;
  const auto xd = x.data();
  std::vector<double> y(xd.size());
  for_each_squeeze(n, c, h, w, [&](std::size_t src, std::size_t dst) { y[src] = xd[dst]; });
  Tensor out = make({n, c, h, w}, std::move(y), "unsqueeze2x2");
  Tape* tape = x.tape();
  if (!tape) return out;
  return tape->record(out, "unsqueeze2x2", {&x}, [x, n, c, h, w](std::span<const double> g, Tape& t) {
    auto gx = t.grad_for(x);
    for_each_squeeze(n, c, h, w, [&](std::size_t src, std::size_t dst) { gx[dst] += g[src]; });
  });
}

// ---------------------------------------------------------------------------
// Matrix determinant and inverse

Tensor logabsdet(const Tensor& a) {
  require_rank(a, 2, "logabsdet");
  if (a.dim(0) != a.dim(1)) throw ShapeError("logabsdet: matrix is not square");
  const linalg::Matrix m = as_matrix(a);
  const auto inv = linalg::invert(m);
  if (!inv) throw NumericError("logabsdet: singular matrix");
  Tensor out = make({}, {linalg::log_abs_det(m)}, "logabsdet");
  Tape* tape = a.tape();
  if (!tape) return out;
  const std::size_t n = a.dim(0);
  // d log|det A| / dA = A^{-T}
  return tape->record(out, "logabsdet", {&a}, [a, inv = *inv, n](std::span<const double> g, Tape& t) {
    auto ga = t.grad_for(a);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[0] * inv(j, i);
  });
}

Tensor inverse(const Tensor& a) {
  require_rank(a, 2, "inverse");
  if (a.dim(0) != a.dim(1)) throw ShapeError("inverse: matrix is not square");
  const auto inv = linalg::invert(as_matrix(a));
  if (!inv) throw NumericError("inverse: singular matrix");
  const std::size_t n = a.dim(0);
  Tensor out = make({n, n}, inv->values, "inverse");
  Tape* tape = a.tape();
  if (!tape) return out;
  // dA = -A^{-T} G A^{-T}
  return tape->record(out, "inverse", {&a}, [a, out, n](std::span<const double> g, Tape& t) {
    auto ga = t.grad_for(a);
    MapConstMat Y(out.data().data(), n, n);
    MapMat(ga.data(), n, n).noalias() -= Y.transpose() * MapConstMat(g.data(), n, n) * Y.transpose();
  });
}

}  // namespace geico
