#include "rifl/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>
#include <sstream>

namespace rifl {

namespace {

thread_local Tape* g_current_tape = nullptr;

using detail::Node;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op) + ": shape " + shape_string(a) + " " + why);
}

bool wants_grad(std::initializer_list<const Array*> inputs) {
  if (Tape::current() == nullptr) return false;
  for (const Array* a : inputs)
    if (a->requires_grad()) return true;
  return false;
}

double softplus(double a) { return a > 0.0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a)); }

// log(1 - exp(-d)) for d > 0.
double log1mexp(double d) {
  return d < 0.6931471805599453 ? std::log(-std::expm1(-d)) : std::log1p(-std::exp(-d));
}

double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Array make_result(Shape shape, std::vector<double> values);

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Array

Array::Array() : node_(std::make_shared<Node>()) {}

Array::Array(Shape shape, double fill) : node_(std::make_shared<Node>()) {
  node_->value.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Array::Array(Shape shape, std::vector<double> values) : node_(std::make_shared<Node>()) {
  if (values.size() != shape_numel(shape))
    throw ShapeError("Array: " + std::to_string(values.size()) + " values for shape " +
                     shape_string(shape));
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Array Array::parameter(Shape shape, std::vector<double> values) {
  Array a(std::move(shape), std::move(values));
  a.node_->requires_grad = true;
  return a;
}

Array Array::scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }

std::size_t Array::dim(std::size_t axis) const {
  if (axis >= node_->shape.size())
    throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(node_->shape));
  return node_->shape[axis];
}

double Array::item() const {
  if (size() != 1) throw ShapeError("item: array of shape " + shape_string(shape()) + " is not scalar");
  return node_->value[0];
}

void Array::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

Array Array::detach() const { return Array(node_->shape, node_->value); }

Array make_result(Shape shape, std::vector<double> values) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Array(std::move(node));
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : previous_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = previous_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(const Array& out, std::vector<Array> inputs, Adjoint adjoint) {
  Entry e;
  e.out = out.node();
  e.out->requires_grad = true;
  e.out->id = static_cast<int>(entries_.size());
  e.inputs.reserve(inputs.size());
  for (auto& in : inputs) e.inputs.push_back(in.node());
  e.adjoint = std::move(adjoint);
  entries_.push_back(std::move(e));
}

void Tape::backward(const Array& root) {
  if (entries_.empty()) throw std::logic_error("backward: tape is empty");
  if (root.size() != 1)
    throw ShapeError("backward: root must be scalar, got shape " + shape_string(root.shape()));
  const auto& rnode = root.node();
  if (rnode->id < 0 || static_cast<std::size_t>(rnode->id) >= entries_.size() ||
      entries_[rnode->id].out != rnode)
    throw std::logic_error("backward: root was not produced on this tape");

  for (auto& e : entries_) {
    e.out->grad.assign(e.out->value.size(), 0.0);
    for (auto& in : e.inputs) {
      if (in->requires_grad)
        in->grad.assign(in->value.size(), 0.0);
      else
        in->grad.clear();
    }
  }
  rnode->grad[0] = 1.0;

  std::vector<Node*> ptrs;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->out->id > rnode->id) continue;
    ptrs.clear();
    for (auto& in : it->inputs) ptrs.push_back(in.get());
    it->adjoint(*it->out, ptrs);
  }
}

NoGradScope::NoGradScope() : saved_(g_current_tape) { g_current_tape = nullptr; }
NoGradScope::~NoGradScope() { g_current_tape = saved_; }

// ---------------------------------------------------------------------------
// Elementwise

namespace {

void require_same(const char* op, const Array& a, const Array& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

template <typename F>
Array unary(const Array& x, F f) {
  std::vector<double> v(x.size());
  auto xs = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(xs[i]);
  return make_result(x.shape(), std::move(v));
}

}  // namespace

Array add(const Array& a, const Array& b) {
  require_same("add", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  Array out = make_result(a.shape(), std::move(v));
  if (wants_grad({&a, &b})) {
    Tape::current()->record(out, {a, b}, [](const Node& o, std::span<Node* const> in) {
      for (Node* n : in)
        if (!n->grad.empty())
          for (std::size_t i = 0; i < o.grad.size(); ++i) n->grad[i] += o.grad[i];
    });
  }
  return out;
}

Array sub(const Array& a, const Array& b) {
  require_same("sub", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
  Array out = make_result(a.shape(), std::move(v));
  if (wants_grad({&a, &b})) {
    Tape::current()->record(out, {a, b}, [](const Node& o, std::span<Node* const> in) {
      if (!in[0]->grad.empty())
        for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i];
      if (!in[1]->grad.empty())
        for (std::size_t i = 0; i < o.grad.size(); ++i) in[1]->grad[i] -= o.grad[i];
    });
  }
  return out;
}

Array mul(const Array& a, const Array& b) {
  require_same("mul", a, b);
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  Array out = make_result(a.shape(), std::move(v));
  if (wants_grad({&a, &b})) {
    Tape::current()->record(out, {a, b}, [](const Node& o, std::span<Node* const> in) {
      Node* x = in[0];
      Node* y = in[1];
      if (!x->grad.empty())
        for (std::size_t i = 0; i < o.grad.size(); ++i) x->grad[i] += o.grad[i] * y->value[i];
      if (!y->grad.empty())
        for (std::size_t i = 0; i < o.grad.size(); ++i) y->grad[i] += o.grad[i] * x->value[i];
    });
  }
  return out;
}

Array scale(const Array& a, double k) {
  Array out = unary(a, [k](double v) { return v * k; });
  if (wants_grad({&a})) {
    Tape::current()->record(out, {a}, [k](const Node& o, std::span<Node* const> in) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += k * o.grad[i];
    });
  }
  return out;
}

Array add_scalar(const Array& a, double k) {
  Array out = unary(a, [k](double v) { return v + k; });
  if (wants_grad({&a})) {
    Tape::current()->record(out, {a}, [](const Node& o, std::span<Node* const> in) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i];
    });
  }
  return out;
}

Array add_channel_bias(const Array& x, const Array& bias) {
  if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    shape_fail("add_channel_bias", x.shape(), bias.shape());
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.size() / (n * c);
  std::vector<double> v(x.values().begin(), x.values().end());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* row = v.data() + (s * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) row[i] += bias[ch];
    }
  Array out = make_result(x.shape(), std::move(v));
  if (wants_grad({&x, &bias})) {
    Tape::current()->record(out, {x, bias}, [n, c, inner](const Node& o, std::span<Node* const> in) {
      if (!in[0]->grad.empty())
        for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i];
      if (!in[1]->grad.empty())
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double* row = o.grad.data() + (s * c + ch) * inner;
            double acc = 0.0;
            for (std::size_t i = 0; i < inner; ++i) acc += row[i];
            in[1]->grad[ch] += acc;
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

Array matmul(const Array& a, const Array& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(m * n, 0.0);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      double* orow = v.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  Array out = make_result({m, n}, std::move(v));
  if (wants_grad({&a, &b})) {
    Tape::current()->record(out, {a, b}, [m, k, n](const Node& o, std::span<Node* const> in) {
      Node* A = in[0];
      Node* B = in[1];
      if (!A->grad.empty())  // dA = dO * B^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += o.grad[i * n + j] * B->value[p * n + j];
            A->grad[i * k + p] += acc;
          }
      if (!B->grad.empty())  // dB = A^T * dO
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = A->value[i * k + p];
            for (std::size_t j = 0; j < n; ++j) B->grad[p * n + j] += aip * o.grad[i * n + j];
          }
    });
  }
  return out;
}

namespace {

struct ConvDims {
  std::size_t n, c, h, w, o, k, pad, ho, wo;
};

// Visits every (output row segment, input row segment, weight) triple of a
// stride-1 convolution. The callback receives pointers to the first valid
// output and input element in the row and the segment length.
template <typename F>
void conv_rows(const ConvDims& d, F&& f) {
  for (std::size_t s = 0; s < d.n; ++s)
    for (std::size_t oc = 0; oc < d.o; ++oc)
      for (std::size_t ic = 0; ic < d.c; ++ic)
        for (std::size_t ky = 0; ky < d.k; ++ky) {
          // input row iy = y + ky - pad must lie in [0, h)
          const std::size_t y0 = ky < d.pad ? d.pad - ky : 0;
          const std::size_t y1 = std::min(d.ho, d.h + d.pad - ky);
          for (std::size_t kx = 0; kx < d.k; ++kx) {
            const std::size_t x0 = kx < d.pad ? d.pad - kx : 0;
            const std::size_t x1 = std::min(d.wo, d.w + d.pad - kx);
            if (x1 <= x0) continue;
            const std::size_t widx = ((oc * d.c + ic) * d.k + ky) * d.k + kx;
            for (std::size_t y = y0; y < y1; ++y) {
              const std::size_t iy = y + ky - d.pad;
              const std::size_t out_off = ((s * d.o + oc) * d.ho + y) * d.wo + x0;
              const std::size_t in_off = ((s * d.c + ic) * d.h + iy) * d.w + (x0 + kx - d.pad);
              f(out_off, in_off, widx, x1 - x0);
            }
          }
        }
}

}  // namespace

Array conv2d(const Array& x, const Array& w, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3))
    shape_fail("conv2d", x.shape(), w.shape());
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), pad, 0, 0};
  if (d.h + 2 * pad < d.k || d.w + 2 * pad < d.k) shape_fail("conv2d", x.shape(), w.shape());
  d.ho = d.h + 2 * pad - d.k + 1;
  d.wo = d.w + 2 * pad - d.k + 1;

  std::vector<double> v(d.n * d.o * d.ho * d.wo, 0.0);
  const double* xv = x.values().data();
  const double* wv = w.values().data();
  conv_rows(d, [&](std::size_t oo, std::size_t io, std::size_t wi, std::size_t len) {
    const double wk = wv[wi];
    double* orow = v.data() + oo;
    const double* irow = xv + io;
    for (std::size_t i = 0; i < len; ++i) orow[i] += wk * irow[i];
  });
  Array out = make_result({d.n, d.o, d.ho, d.wo}, std::move(v));
  if (wants_grad({&x, &w})) {
    Tape::current()->record(out, {x, w}, [d](const Node& o, std::span<Node* const> in) {
      Node* X = in[0];
      Node* W = in[1];
      const bool gx = !X->grad.empty();
      const bool gw = !W->grad.empty();
      conv_rows(d, [&](std::size_t oo, std::size_t io, std::size_t wi, std::size_t len) {
        const double* grow = o.grad.data() + oo;
        if (gx) {
          const double wk = W->value[wi];
          double* xg = X->grad.data() + io;
          for (std::size_t i = 0; i < len; ++i) xg[i] += wk * grow[i];
        }
        if (gw) {
          const double* irow = X->value.data() + io;
          double acc = 0.0;
          for (std::size_t i = 0; i < len; ++i) acc += grow[i] * irow[i];
          W->grad[wi] += acc;
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities

Array relu(const Array& x) {
  Array out = unary(x, [](double v) { return v > 0.0 ? v : 0.0; });
  if (wants_grad({&x})) {
    Tape::current()->record(out, {x}, [](const Node& o, std::span<Node* const> in) {
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        if (in[0]->value[i] > 0.0) in[0]->grad[i] += o.grad[i];
    });
  }
  return out;
}

Array sigmoid(const Array& x) {
  Array out = unary(x, sigmoid_scalar);
  if (wants_grad({&x})) {
    Tape::current()->record(out, {x}, [](const Node& o, std::span<Node* const> in) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const double s = o.value[i];
        in[0]->grad[i] += o.grad[i] * s * (1.0 - s);
      }
    });
  }
  return out;
}

Array log(const Array& x) {
  Array out = unary(x, [](double v) { return std::log(v); });
  if (wants_grad({&x})) {
    Tape::current()->record(out, {x}, [](const Node& o, std::span<Node* const> in) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i] / in[0]->value[i];
    });
  }
  return out;
}

Array exp(const Array& x) {
  Array out = unary(x, [](double v) { return std::exp(v); });
  if (wants_grad({&x})) {
    Tape::current()->record(out, {x}, [](const Node& o, std::span<Node* const> in) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i] * o.value[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

Array sum(const Array& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Array out = make_result({}, {acc});
  if (wants_grad({&x})) {
    Tape::current()->record(out, {x}, [](const Node& o, std::span<Node* const> in) {
      for (double& g : in[0]->grad) g += o.grad[0];
    });
  }
  return out;
}

Array mean(const Array& x) {
  if (x.size() == 0) throw ShapeError("mean: empty array");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Array sum_per_sample(const Array& x) {
  if (x.rank() < 1 || x.dim(0) == 0) shape_fail("sum_per_sample", x.shape(), "needs a leading batch axis");
  const std::size_t n = x.dim(0), inner = x.size() / n;
  std::vector<double> v(n, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < inner; ++i) v[s] += x[s * inner + i];
  Array out = make_result({n}, std::move(v));
  if (wants_grad({&x})) {
    Tape::current()->record(out, {x}, [n, inner](const Node& o, std::span<Node* const> in) {
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < inner; ++i) in[0]->grad[s * inner + i] += o.grad[s];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layout

Array reshape(const Array& x, Shape shape) {
  if (shape_numel(shape) != x.size()) shape_fail("reshape", x.shape(), shape);
  Array out = make_result(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()));
  if (wants_grad({&x})) {
    Tape::current()->record(out, {x}, [](const Node& o, std::span<Node* const> in) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i];
    });
  }
  return out;
}

Array tile_batch(const Array& x, std::size_t n) {
  if (n == 0) shape_fail("tile_batch", x.shape(), "cannot tile zero times");
  Shape shape{n};
  shape.insert(shape.end(), x.shape().begin(), x.shape().end());
  const std::size_t inner = x.size();
  std::vector<double> v(n * inner);
  for (std::size_t s = 0; s < n; ++s) std::copy_n(x.values().data(), inner, v.data() + s * inner);
  Array out = make_result(std::move(shape), std::move(v));
  if (wants_grad({&x})) {
    Tape::current()->record(out, {x}, [n, inner](const Node& o, std::span<Node* const> in) {
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < inner; ++i) in[0]->grad[i] += o.grad[s * inner + i];
    });
  }
  return out;
}

namespace {

// Index map shared by space_to_depth and its inverse: for each element of the
// squeezed layout, the flat offset of the same element in the spatial layout.
std::vector<std::size_t> squeeze_map(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  const std::size_t h2 = h / 2, w2 = w / 2;
  std::vector<std::size_t> map(n * c * h * w);
  std::size_t k = 0;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx)
          for (std::size_t y = 0; y < h2; ++y)
            for (std::size_t x = 0; x < w2; ++x)
              map[k++] = ((s * c + ch) * h + (2 * y + dy)) * w + (2 * x + dx);
  return map;
}

Array permute(const Array& x, Shape shape, std::vector<std::size_t> map, bool gather) {
  // gather: out[i] = x[map[i]]; otherwise scatter: out[map[i]] = x[i].
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (gather)
      v[i] = x[map[i]];
    else
      v[map[i]] = x[i];
  }
  Array out = make_result(std::move(shape), std::move(v));
  if (wants_grad({&x})) {
    Tape::current()->record(out, {x}, [map = std::move(map), gather](const Node& o, std::span<Node* const> in) {
      for (std::size_t i = 0; i < map.size(); ++i) {
        if (gather)
          in[0]->grad[map[i]] += o.grad[i];
        else
          in[0]->grad[i] += o.grad[map[i]];
      }
    });
  }
  return out;
}

}  // namespace

Array space_to_depth(const Array& x) {
  if (x.rank() != 4 || x.dim(2) % 2 || x.dim(3) % 2)
    shape_fail("space_to_depth", x.shape(), "needs (N, C, H, W) with even H and W");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  return permute(x, {n, 4 * c, h / 2, w / 2}, squeeze_map(n, c, h, w), true);
}

Array depth_to_space(const Array& x) {
  if (x.rank() != 4 || x.dim(1) % 4)
    shape_fail("depth_to_space", x.shape(), "needs (N, C, H, W) with C divisible by 4");
  const std::size_t n = x.dim(0), c = x.dim(1) / 4, h = x.dim(2) * 2, w = x.dim(3) * 2;
  return permute(x, {n, c, h, w}, squeeze_map(n, c, h, w), false);
}

Array channel_split(const Array& x, std::size_t begin, std::size_t count) {
  if (x.rank() < 2 || begin + count > x.dim(1) || count == 0)
    shape_fail("channel_split", x.shape(),
               "cannot take channels [" + std::to_string(begin) + ", " + std::to_string(begin + count) + ")");
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.size() / (n * c);
  Shape shape = x.shape();
  shape[1] = count;
  std::vector<double> v(n * count * inner);
  for (std::size_t s = 0; s < n; ++s)
    std::copy_n(x.values().data() + (s * c + begin) * inner, count * inner, v.data() + s * count * inner);
  Array out = make_result(std::move(shape), std::move(v));
  if (wants_grad({&x})) {
    Tape::current()->record(out, {x}, [n, c, inner, begin, count](const Node& o, std::span<Node* const> in) {
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t i = 0; i < count * inner; ++i)
          in[0]->grad[(s * c + begin) * inner + i] += o.grad[s * count * inner + i];
    });
  }
  return out;
}

Array channel_concat(const Array& a, const Array& b) {
  if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0) ||
      !std::equal(a.shape().begin() + 2, a.shape().end(), b.shape().begin() + 2))
    shape_fail("channel_concat", a.shape(), b.shape());
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), inner = a.size() / (n * ca);
  Shape shape = a.shape();
  shape[1] = ca + cb;
  std::vector<double> v(a.size() + b.size());
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(a.values().data() + s * ca * inner, ca * inner, v.data() + s * (ca + cb) * inner);
    std::copy_n(b.values().data() + s * cb * inner, cb * inner, v.data() + (s * (ca + cb) + ca) * inner);
  }
  Array out = make_result(std::move(shape), std::move(v));
  if (wants_grad({&a, &b})) {
    Tape::current()->record(out, {a, b}, [n, ca, cb, inner](const Node& o, std::span<Node* const> in) {
      for (std::size_t s = 0; s < n; ++s) {
        const double* g = o.grad.data() + s * (ca + cb) * inner;
        if (!in[0]->grad.empty())
          for (std::size_t i = 0; i < ca * inner; ++i) in[0]->grad[s * ca * inner + i] += g[i];
        if (!in[1]->grad.empty())
          for (std::size_t i = 0; i < cb * inner; ++i) in[1]->grad[s * cb * inner + i] += g[ca * inner + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rounding and likelihood

double round_half_away(double v) { return std::round(v); }

Array round_ste(const Array& x) {
  Array out = unary(x, round_half_away);
  if (wants_grad({&x})) {
    Tape::current()->record(out, {x}, [](const Node& o, std::span<Node* const> in) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) in[0]->grad[i] += o.grad[i];
    });
  }
  return out;
}

Array disc_logistic_logpmf(const Array& z, const Array& mu, const Array& log_scale) {
  require_same("disc_logistic_logpmf", z, mu);
  require_same("disc_logistic_logpmf", z, log_scale);
  const std::size_t n = z.size();
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double inv = std::exp(-log_scale[i]);
    const double a = (z[i] + 0.5 - mu[i]) * inv;
    const double b = (z[i] - 0.5 - mu[i]) * inv;
    v[i] = a - softplus(a) - softplus(b) + log1mexp(inv);
  }
  Array out = make_result(z.shape(), std::move(v));
  if (wants_grad({&z, &mu, &log_scale})) {
    Tape::current()->record(out, {z, mu, log_scale}, [](const Node& o, std::span<Node* const> in) {
      Node* Z = in[0];
      Node* M = in[1];
      Node* L = in[2];
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        const double inv = std::exp(-L->value[i]);
        const double a = (Z->value[i] + 0.5 - M->value[i]) * inv;
        const double b = (Z->value[i] - 0.5 - M->value[i]) * inv;
        const double ga = 1.0 - sigmoid_scalar(a);
        const double gb = -sigmoid_scalar(b);
        const double gd = 1.0 / std::expm1(inv);
        const double g = o.grad[i];
        if (!Z->grad.empty()) Z->grad[i] += g * inv * (ga + gb);
        if (!M->grad.empty()) M->grad[i] -= g * inv * (ga + gb);
        if (!L->grad.empty()) L->grad[i] -= g * (a * ga + b * gb + inv * gd);
      }
    });
  }
  return out;
}

std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("softmax: empty input");
  for (double x : v)
    if (!std::isfinite(x)) throw std::invalid_argument("softmax: non-finite input");
  const double m = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) total += out[i] = std::exp(v[i] - m);
  for (double& x : out) x /= total;
  return out;
}

}  // namespace rifl
