#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is an immutable value: every op allocates a fresh result. When any
// input is tracked on a Tape the op records a backward closure on that tape;
// untracked inputs produce untracked (frozen) results and cost nothing extra.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace geico {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tape;

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_->size(); }
  std::span<const double> data() const { return *data_; }
  double at(std::size_t flat) const { return (*data_)[flat]; }
  double item() const;

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  // Same values, no tape attachment.
  Tensor detach() const;
  // Untracked tensor sharing these values under another shape of equal size.
  Tensor view(Shape shape) const;
  // Copy of the values that the caller may mutate.
  std::vector<double> to_vector() const { return *data_; }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Gradients of every leaf recorded on a tape, indexed by the leaf tensor.
class Gradients {
 public:
  Tensor operator[](const Tensor& leaf) const;
  std::span<const double> raw(const Tensor& leaf) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::vector<double>> grads_;
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out, Tape& tape)>;

  struct Node {
    std::string op;
    std::vector<int> parents;
    std::size_t size = 0;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(const Tensor& value);
  std::vector<Tensor> leaves(const std::vector<Tensor>& values);

  // Attaches `result` to this tape as the output of an op over `inputs`.
  Tensor record(Tensor result, std::string op, std::initializer_list<const Tensor*> inputs,
                BackwardFn backward);
  Tensor record(Tensor result, std::string op, const std::vector<Tensor>& inputs,
                BackwardFn backward);

  // Gradient accumulator for `input`, allocated on first use. Empty span when
  // the input is not tracked on this tape.
  std::span<double> grad_for(const Tensor& input);

  Gradients backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }
  bool consumed() const { return consumed_; }

 private:
  int push(Node node);

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::vector<bool> is_leaf_;
  bool consumed_ = false;
};

// Returns the tape shared by the tracked inputs (or nullptr when none is
// tracked). Mixing two different tapes is a logic error.
Tape* common_tape(std::initializer_list<const Tensor*> inputs);

// Throws NumericError naming `op` when any value is NaN or infinite.
void check_finite(std::span<const double> values, const char* op);

enum class UnaryOp { Neg, Exp, Log, Tanh, Relu, Sigmoid, Square, Sqrt };
enum class BinaryOp { Add, Sub, Mul, Div };

Tensor elementwise(UnaryOp op, const Tensor& a);
Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);

// Shape of a and b broadcast together (numpy rules over trailing dimensions).
Shape broadcast_shape(const Shape& a, const Shape& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Add, a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Sub, a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Mul, a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::Div, a, b); }
inline Tensor operator-(const Tensor& a) { return elementwise(UnaryOp::Neg, a); }

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator+(double c, const Tensor& a) { return add_scalar(a, c); }
inline Tensor operator-(double c, const Tensor& a) { return add_scalar(-a, c); }

inline Tensor exp(const Tensor& a) { return elementwise(UnaryOp::Exp, a); }
inline Tensor log(const Tensor& a) { return elementwise(UnaryOp::Log, a); }
inline Tensor tanh(const Tensor& a) { return elementwise(UnaryOp::Tanh, a); }
inline Tensor relu(const Tensor& a) { return elementwise(UnaryOp::Relu, a); }
inline Tensor sigmoid(const Tensor& a) { return elementwise(UnaryOp::Sigmoid, a); }
inline Tensor square(const Tensor& a) { return elementwise(UnaryOp::Square, a); }
inline Tensor sqrt(const Tensor& a) { return elementwise(UnaryOp::Sqrt, a); }

// min(a, bound) elementwise; the gradient is 1 where a < bound and 0 otherwise.
Tensor clamp_max(const Tensor& a, double bound);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);  // rank 2 only
Tensor matmul(const Tensor& a, const Tensor& b);

// Concatenation and contiguous slicing along one axis.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t dilation = 1;
};

// Cross-correlation of x[N,C,H,W] with kernel[O,C,kh,kw].
Tensor conv2d(const Tensor& x, const Tensor& kernel, Conv2dParams params = {});

// Non-overlapping average pooling by `factor` on the two trailing axes.
Tensor avg_pool2d(const Tensor& x, std::size_t factor);
// Bilinear upsampling of x[N,C,H,W] by an integer factor (half-pixel centers).
Tensor upsample_bilinear(const Tensor& x, std::size_t factor);

// Softmax / log-softmax over axis 1 of a rank-4 tensor.
Tensor softmax_channels(const Tensor& x);
Tensor log_softmax_channels(const Tensor& x);

// Space-to-depth by 2: [N,C,H,W] -> [N,4C,H/2,W/2] and its inverse.
Tensor squeeze2x2(const Tensor& x);
Tensor unsqueeze2x2(const Tensor& x);

// log|det A| and A^{-1} for a square matrix, both differentiable.
Tensor logabsdet(const Tensor& a);
Tensor inverse(const Tensor& a);

}  // namespace geico
