#pragma once

// Minimal define-by-run reverse-mode differentiation over dense double arrays.
//
// An Array is a shared handle to a node holding a shape, values and (after a
// backward pass) a gradient. Primitives record themselves on the thread's
// active Tape whenever one of their inputs requires a gradient. A Tape is an
// RAII scope: constructing one makes it current for the calling thread,
// destroying it restores the previous one.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rifl {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  int id = -1;  // position on the tape, -1 for leaves
};

}  // namespace detail

class Array {
 public:
  Array();
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> values);

  /// Leaf that participates in gradient computation.
  static Array parameter(Shape shape, std::vector<double> values);
  static Array scalar(double v);

  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return node_->shape.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> values_mut() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const;

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad_mut() { return node_->grad; }
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  int node_id() const { return node_->id; }

  /// Copy of the values with no gradient tracking.
  Array detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Array(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend class Tape;
  friend Array make_result(Shape, std::vector<double>);

  std::shared_ptr<detail::Node> node_;
};

class Tape {
 public:
  using Adjoint =
      std::function<void(const detail::Node& out, std::span<detail::Node* const> inputs)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  std::size_t size() const { return entries_.size(); }

  /// Populates grad of every node reachable on this tape with d(root)/d(node).
  /// Leaf gradients are overwritten, not accumulated.
  void backward(const Array& root);

  void record(const Array& out, std::vector<Array> inputs, Adjoint adjoint);

 private:
  struct Entry {
    std::shared_ptr<detail::Node> out;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    Adjoint adjoint;
  };
  std::vector<Entry> entries_;
  Tape* previous_;
};

/// Temporarily disables recording on this thread (inference paths).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* saved_;
};

// Elementwise arithmetic. Shapes must match exactly.
Array add(const Array& a, const Array& b);
Array sub(const Array& a, const Array& b);
Array mul(const Array& a, const Array& b);
Array scale(const Array& a, double k);
Array add_scalar(const Array& a, double k);
/// x of shape (N, C, ...) plus bias of shape (C); the only broadcast supported.
Array add_channel_bias(const Array& x, const Array& bias);

Array matmul(const Array& a, const Array& b);
/// x: (N, C, H, W), w: (O, C, K, K). Stride 1, zero padding `pad` on all sides.
Array conv2d(const Array& x, const Array& w, std::size_t pad);

Array relu(const Array& x);
Array sigmoid(const Array& x);
Array log(const Array& x);
Array exp(const Array& x);

Array sum(const Array& x);
Array mean(const Array& x);
/// (N, ...) -> (N): sum over every axis but the first.
Array sum_per_sample(const Array& x);

Array reshape(const Array& x, Shape shape);
/// shape -> (n, shape...): n stacked copies along a new leading axis.
Array tile_batch(const Array& x, std::size_t n);
/// (N, C, H, W) -> (N, 4C, H/2, W/2); output channel c*4 + dy*2 + dx.
Array space_to_depth(const Array& x);
Array depth_to_space(const Array& x);
/// Channels [begin, begin+count) of a (N, C, ...) array.
Array channel_split(const Array& x, std::size_t begin, std::size_t count);
Array channel_concat(const Array& a, const Array& b);

/// Round half away from zero; gradient passes straight through.
Array round_ste(const Array& x);

/// Elementwise log P(z) for a logistic distribution with location mu and
/// scale exp(log_scale), discretized over unit bins centered on integers.
Array disc_logistic_logpmf(const Array& z, const Array& mu, const Array& log_scale);

/// Numerically stable softmax on plain values. Throws on NaN.
std::vector<double> softmax(std::span<const double> v);

double round_half_away(double v);

}  // namespace rifl
