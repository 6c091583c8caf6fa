#pragma once

// Reverse-mode automatic differentiation over dense row-major buffers.
//
// A Tape records primitive operations on 2D buffers (rows x cols). Every
// record stores its forward value and, when it depends on a Parameter, an
// adjoint buffer. backward() replays the records in reverse creation order,
// which is a reverse topological order because inputs always precede their
// consumers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace senerf::ad {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  [[nodiscard]] constexpr std::size_t size() const noexcept { return rows * cols; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(Shape s) {
  return "[" + std::to_string(s.rows) + "x" + std::to_string(s.cols) + "]";
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OpKind {
  kConstant,
  kParameter,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kMatMul,
  kAddRowBias,
  kSum,
  kMean,
  kSquaredNorm,
  kExp,
  kLog,
  kRelu,
  kSoftplus,
  kSigmoid,
  kCos,
  kSin,
  kBilinearGather,
  kConcatCols,
  kSliceCols,
  kRowSum,
  kExclusiveCumsum,
  kBatchedMatVec,
  kBroadcastCols,
  kReshape,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAddRowBias: return "add_row_bias";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSquaredNorm: return "squared_norm";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftplus: return "softplus";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kCos: return "cos";
    case OpKind::kSin: return "sin";
    case OpKind::kBilinearGather: return "bilinear_gather";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kRowSum: return "row_sum";
    case OpKind::kExclusiveCumsum: return "exclusive_cumsum";
    case OpKind::kBatchedMatVec: return "batched_matvec";
    case OpKind::kBroadcastCols: return "broadcast_cols";
    case OpKind::kReshape: return "reshape";
  }
  return "unknown";
}

// Guard used by the log primitive.
inline constexpr double kLogFloor = 1e-12;

template <class T>
inline T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <class T>
inline T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

/// Trainable buffer with a same-shape gradient accumulator.
template <class T>
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Shape shape, int group = 0)
      : name_(std::move(name)), shape_(shape), group_(group),
        values_(shape.size(), T(0)), grad_(shape.size(), T(0)) {}

  [[nodiscard]] const std::string& name() const noexcept { return name_; }
  [[nodiscard]] Shape shape() const noexcept { return shape_; }
  [[nodiscard]] int group() const noexcept { return group_; }
  [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }

  std::vector<T>& values() noexcept { return values_; }
  [[nodiscard]] const std::vector<T>& values() const noexcept { return values_; }
  std::vector<T>& grad() noexcept { return grad_; }
  [[nodiscard]] const std::vector<T>& grad() const noexcept { return grad_; }

  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T(0)); }

  void accumulate(std::span<const T> g) {
    if (g.size() != grad_.size())
      throw ShapeError("accumulate: gradient size " + std::to_string(g.size()) +
                       " does not match parameter '" + name_ + "' " + to_string(shape_));
    for (std::size_t i = 0; i < g.size(); ++i) grad_[i] += g[i];
  }

 private:
  std::string name_;
  Shape shape_;
  int group_ = 0;
  std::vector<T> values_;
  std::vector<T> grad_;
};

/// Per-worker gradient storage, one buffer per parameter id.
template <class T>
class GradientBuffer {
 public:
  GradientBuffer() = default;
  explicit GradientBuffer(std::span<Parameter<T>* const> params) {
    buffers_.reserve(params.size());
    for (const auto* p : params) buffers_.emplace_back(p->size(), T(0));
  }

  [[nodiscard]] std::size_t count() const noexcept { return buffers_.size(); }
  std::vector<T>& operator[](std::size_t id) { return buffers_.at(id); }
  const std::vector<T>& operator[](std::size_t id) const { return buffers_.at(id); }

  void zero() {
    for (auto& b : buffers_) std::fill(b.begin(), b.end(), T(0));
  }

  void add_into(std::span<Parameter<T>* const> params) const {
    for (std::size_t i = 0; i < buffers_.size(); ++i) params[i]->accumulate(buffers_[i]);
  }

 private:
  std::vector<std::vector<T>> buffers_;
};

/// Handle to a record on a Tape.
struct Var {
  int id = -1;
  [[nodiscard]] bool valid() const noexcept { return id >= 0; }
};

template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  void reset() { nodes_.clear(); }
  [[nodiscard]] std::size_t record_count() const noexcept { return nodes_.size(); }

  [[nodiscard]] Shape shape(Var v) const { return node(v).shape; }
  [[nodiscard]] std::span<const T> value(Var v) const { return node(v).data(); }
  [[nodiscard]] T scalar(Var v) const {
    const auto& n = node(v);
    if (n.shape.size() != 1) throw ShapeError("scalar: record is " + to_string(n.shape));
    return n.data()[0];
  }
  [[nodiscard]] std::span<const T> grad(Var v) const { return node(v).grad; }
  [[nodiscard]] OpKind kind(Var v) const { return node(v).kind; }
  [[nodiscard]] bool requires_grad(Var v) const { return node(v).needs_grad; }

  // -- leaves ---------------------------------------------------------------

  Var constant(Shape s, std::vector<T> values) {
    if (values.size() != s.size())
      throw ShapeError(std::string("constant: ") + std::to_string(values.size()) +
                       " values for shape " + to_string(s));
    Node n;
    n.kind = OpKind::kConstant;
    n.shape = s;
    n.value = std::move(values);
    return push(std::move(n));
  }

  Var constant(Shape s, T fill) { return constant(s, std::vector<T>(s.size(), fill)); }

  /// Binds a parameter; the record reads the parameter storage in place, so the
  /// parameter must stay alive and unmodified until the tape is reset.
  Var parameter(const Parameter<T>& p, std::size_t param_id) {
    Node n;
    n.kind = OpKind::kParameter;
    n.shape = p.shape();
    n.external = p.values().data();
    n.param_id = static_cast<int>(param_id);
    n.needs_grad = true;
    return push(std::move(n));
  }

  // -- elementwise ----------------------------------------------------------

  Var add(Var a, Var b) { return binary(OpKind::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary(OpKind::kSub, a, b); }
  Var mul(Var a, Var b) { return binary(OpKind::kMul, a, b); }

  Var scale(Var a, T k) {
    Node n = unary_node(OpKind::kScale, a);
    n.attr = k;
    const auto x = node(a).data();
    for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = k * x[i];
    return push(std::move(n));
  }

  Var add_scalar(Var a, T k) {
    Node n = unary_node(OpKind::kAddScalar, a);
    const auto x = node(a).data();
    for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] + k;
    return push(std::move(n));
  }

  Var exp(Var a) { return map(OpKind::kExp, a, [](T x) { return std::exp(x); }); }
  Var log(Var a) {
    return map(OpKind::kLog, a, [](T x) { return std::log(std::max(x, T(kLogFloor))); });
  }
  Var relu(Var a) { return map(OpKind::kRelu, a, [](T x) { return x > T(0) ? x : T(0); }); }
  Var softplus(Var a) { return map(OpKind::kSoftplus, a, [](T x) { return ad::softplus(x); }); }
  Var sigmoid(Var a) { return map(OpKind::kSigmoid, a, [](T x) { return ad::sigmoid(x); }); }
  Var cos(Var a) { return map(OpKind::kCos, a, [](T x) { return std::cos(x); }); }
  Var sin(Var a) { return map(OpKind::kSin, a, [](T x) { return std::sin(x); }); }

  // -- reductions -----------------------------------------------------------

  Var sum(Var a) {
    Node n = reduce_node(OpKind::kSum, a);
    T acc = 0;
    for (T x : node(a).data()) acc += x;
    n.value[0] = acc;
    return push(std::move(n));
  }

  Var mean(Var a) {
    const auto& in = node(a);
    if (in.shape.size() == 0) throw ShapeError("mean: empty input " + to_string(in.shape));
    Node n = reduce_node(OpKind::kMean, a);
    T acc = 0;
    for (T x : in.data()) acc += x;
    n.value[0] = acc / static_cast<T>(in.shape.size());
    return push(std::move(n));
  }

  Var squared_norm(Var a) {
    Node n = reduce_node(OpKind::kSquaredNorm, a);
    T acc = 0;
    for (T x : node(a).data()) acc += x * x;
    n.value[0] = acc;
    return push(std::move(n));
  }

  /// [n x m] -> [n x 1]
  Var row_sum(Var a) {
    const auto& in = node(a);
    Node n = derived(OpKind::kRowSum, {in.shape.rows, 1}, a);
    const auto x = in.data();
    for (std::size_t r = 0; r < in.shape.rows; ++r) {
      T acc = 0;
      for (std::size_t c = 0; c < in.shape.cols; ++c) acc += x[r * in.shape.cols + c];
      n.value[r] = acc;
    }
    return push(std::move(n));
  }

  /// out[r, c] = sum_{k < c} a[r, k]
  Var exclusive_cumsum(Var a) {
    const auto& in = node(a);
    Node n = derived(OpKind::kExclusiveCumsum, in.shape, a);
    const auto x = in.data();
    const std::size_t cols = in.shape.cols;
    for (std::size_t r = 0; r < in.shape.rows; ++r) {
      T acc = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        n.value[r * cols + c] = acc;
        acc += x[r * cols + c];
      }
    }
    return push(std::move(n));
  }

  // -- linear algebra -------------------------------------------------------

  /// [n x k] * [k x m] -> [n x m]
  Var matmul(Var a, Var b) {
    const auto& A = node(a);
    const auto& B = node(b);
    if (A.shape.cols != B.shape.rows)
      throw ShapeError("matmul: shape mismatch " + to_string(A.shape) + " * " + to_string(B.shape));
    const std::size_t n_rows = A.shape.rows, k_dim = A.shape.cols, m = B.shape.cols;
    Node n = derived(OpKind::kMatMul, {n_rows, m}, a, b);
    const auto x = A.data();
    const auto w = B.data();
    T* out = n.value.data();
    for (std::size_t r = 0; r < n_rows; ++r) {
      T* orow = out + r * m;
      const T* xrow = x.data() + r * k_dim;
      for (std::size_t k = 0; k < k_dim; ++k) {
        const T xv = xrow[k];
        const T* wrow = w.data() + k * m;
        for (std::size_t c = 0; c < m; ++c) orow[c] += xv * wrow[c];
      }
    }
    return push(std::move(n));
  }

  /// [n x m] + [1 x m] (bias added to every row)
  Var add_row_bias(Var a, Var bias) {
    const auto& A = node(a);
    const auto& B = node(bias);
    if (B.shape.rows != 1 || B.shape.cols != A.shape.cols)
      throw ShapeError("add_row_bias: shape mismatch " + to_string(A.shape) + " + " +
                       to_string(B.shape));
    Node n = derived(OpKind::kAddRowBias, A.shape, a, bias);
    const auto x = A.data();
    const auto b = B.data();
    const std::size_t m = A.shape.cols;
    for (std::size_t r = 0; r < A.shape.rows; ++r)
      for (std::size_t c = 0; c < m; ++c) n.value[r * m + c] = x[r * m + c] + b[c];
    return push(std::move(n));
  }

  /// weights [R x S], values [R*S x K] -> [R x K] with out[r] = sum_s w[r,s] * v[r*S+s]
  Var batched_matvec(Var weights, Var values) {
    const auto& W = node(weights);
    const auto& V = node(values);
    if (V.shape.rows != W.shape.size())
      throw ShapeError("batched_matvec: shape mismatch " + to_string(W.shape) + " with " +
                       to_string(V.shape));
    const std::size_t R = W.shape.rows, S = W.shape.cols, K = V.shape.cols;
    Node n = derived(OpKind::kBatchedMatVec, {R, K}, weights, values);
    const auto w = W.data();
    const auto v = V.data();
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t s = 0; s < S; ++s) {
        const T ws = w[r * S + s];
        const T* vrow = v.data() + (r * S + s) * K;
        for (std::size_t k = 0; k < K; ++k) n.value[r * K + k] += ws * vrow[k];
      }
    return push(std::move(n));
  }

  /// Bilinear lookup into a grid stored as [H*W x C] (row-major nodes) at
  /// continuous node coordinates (u along width, v along height). Coordinates
  /// are clamped to [0, W-1] x [0, H-1]. coords holds n (u, v) pairs.
  Var bilinear_gather(Var grid, std::size_t grid_h, std::size_t grid_w,
                      std::span<const T> coords) {
    const auto& G = node(grid);
    if (G.shape.rows != grid_h * grid_w || grid_h < 2 || grid_w < 2 || coords.size() % 2 != 0)
      throw ShapeError("bilinear_gather: grid " + to_string(G.shape) + " is not " +
                       std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                       " nodes, or odd coordinate count");
    const std::size_t n_pts = coords.size() / 2, C = G.shape.cols;
    Node n = derived(OpKind::kBilinearGather, {n_pts, C}, grid);
    n.aux.assign(coords.begin(), coords.end());
    n.grid_h = grid_h;
    n.grid_w = grid_w;
    const auto g = G.data();
    for (std::size_t p = 0; p < n_pts; ++p) {
      const auto c = corners(coords[2 * p], coords[2 * p + 1], grid_h, grid_w);
      T* out = n.value.data() + p * C;
      for (int k = 0; k < 4; ++k) {
        const T* src = g.data() + c.index[k] * C;
        const T wk = c.weight[k];
        for (std::size_t ch = 0; ch < C; ++ch) out[ch] += wk * src[ch];
      }
    }
    return push(std::move(n));
  }

  // -- layout ---------------------------------------------------------------

  Var concat_cols(Var a, Var b) {
    const auto& A = node(a);
    const auto& B = node(b);
    if (A.shape.rows != B.shape.rows)
      throw ShapeError("concat_cols: shape mismatch " + to_string(A.shape) + " | " +
                       to_string(B.shape));
    const std::size_t ca = A.shape.cols, cb = B.shape.cols, cols = ca + cb;
    Node n = derived(OpKind::kConcatCols, {A.shape.rows, cols}, a, b);
    const auto x = A.data();
    const auto y = B.data();
    for (std::size_t r = 0; r < A.shape.rows; ++r) {
      std::copy_n(x.data() + r * ca, ca, n.value.data() + r * cols);
      std::copy_n(y.data() + r * cb, cb, n.value.data() + r * cols + ca);
    }
    return push(std::move(n));
  }

  Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    const auto& A = node(a);
    if (begin + count > A.shape.cols || count == 0)
      throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " +
                       std::to_string(begin + count) + ") outside " + to_string(A.shape));
    Node n = derived(OpKind::kSliceCols, {A.shape.rows, count}, a);
    n.offset = begin;
    const auto x = A.data();
    for (std::size_t r = 0; r < A.shape.rows; ++r)
      std::copy_n(x.data() + r * A.shape.cols + begin, count, n.value.data() + r * count);
    return push(std::move(n));
  }

  /// [n x 1] -> [n x m], repeating each row value.
  Var broadcast_cols(Var a, std::size_t m) {
    const auto& A = node(a);
    if (A.shape.cols != 1)
      throw ShapeError("broadcast_cols: expected a column, got " + to_string(A.shape));
    Node n = derived(OpKind::kBroadcastCols, {A.shape.rows, m}, a);
    const auto x = A.data();
    for (std::size_t r = 0; r < A.shape.rows; ++r)
      std::fill_n(n.value.data() + r * m, m, x[r]);
    return push(std::move(n));
  }

  Var reshape(Var a, Shape s) {
    const auto& A = node(a);
    if (A.shape.size() != s.size())
      throw ShapeError("reshape: " + to_string(A.shape) + " -> " + to_string(s));
    Node n = derived(OpKind::kReshape, s, a);
    const auto x = A.data();
    std::copy(x.begin(), x.end(), n.value.begin());
    return push(std::move(n));
  }

  // -- backward -------------------------------------------------------------

  /// Propagates d(output)/d(record) for every record and adds parameter
  /// adjoints into `sink`. The tape keeps its values; call reset() to reuse.
  void backward(Var output, GradientBuffer<T>& sink) {
    propagate(output);
    for (const auto& n : nodes_)
      if (n.kind == OpKind::kParameter) {
        auto& dst = sink[static_cast<std::size_t>(n.param_id)];
        for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i];
      }
  }

  /// Convenience overload accumulating straight into the parameters, indexed
  /// by the ids passed to parameter().
  void backward(Var output, std::span<Parameter<T>* const> params) {
    propagate(output);
    for (const auto& n : nodes_)
      if (n.kind == OpKind::kParameter)
        params[static_cast<std::size_t>(n.param_id)]->accumulate(n.grad);
  }

  /// Throws NonFiniteError naming the first record holding a NaN or Inf.
  void check_finite() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto v = nodes_[i].data();
      for (std::size_t k = 0; k < v.size(); ++k)
        if (!std::isfinite(v[k])) {
          std::ostringstream os;
          os << "non-finite value in record #" << i << " (" << op_name(nodes_[i].kind) << " "
             << to_string(nodes_[i].shape) << ") at element " << k;
          throw NonFiniteError(os.str());
        }
    }
  }

 private:
  struct Corners {
    std::size_t index[4];
    T weight[4];
  };

  static Corners corners(T u, T v, std::size_t h, std::size_t w) {
    u = std::clamp(u, T(0), static_cast<T>(w - 1));
    v = std::clamp(v, T(0), static_cast<T>(h - 1));
    auto u0 = static_cast<std::size_t>(std::floor(u));
    auto v0 = static_cast<std::size_t>(std::floor(v));
    u0 = std::min(u0, w - 2);
    v0 = std::min(v0, h - 2);
    const T fu = u - static_cast<T>(u0);
    const T fv = v - static_cast<T>(v0);
    Corners c{};
    c.index[0] = v0 * w + u0;
    c.index[1] = v0 * w + u0 + 1;
    c.index[2] = (v0 + 1) * w + u0;
    c.index[3] = (v0 + 1) * w + u0 + 1;
    c.weight[0] = (T(1) - fu) * (T(1) - fv);
    c.weight[1] = fu * (T(1) - fv);
    c.weight[2] = (T(1) - fu) * fv;
    c.weight[3] = fu * fv;
    return c;
  }

  struct Node {
    OpKind kind = OpKind::kConstant;
    Shape shape;
    std::vector<T> value;
    const T* external = nullptr;
    std::vector<T> grad;
    int in0 = -1;
    int in1 = -1;
    bool needs_grad = false;
    int param_id = -1;
    T attr = 0;
    std::size_t offset = 0;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::vector<T> aux;

    [[nodiscard]] std::span<const T> data() const {
      if (external) return {external, shape.size()};
      return value;
    }
  };

  const Node& node(Var v) const {
    if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw std::out_of_range("tape: invalid record handle " + std::to_string(v.id));
    return nodes_[static_cast<std::size_t>(v.id)];
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  Node derived(OpKind kind, Shape s, Var a, Var b = Var{}) {
    Node n;
    n.kind = kind;
    n.shape = s;
    n.value.assign(s.size(), T(0));
    n.in0 = a.id;
    n.in1 = b.id;
    n.needs_grad = node(a).needs_grad || (b.valid() && node(b).needs_grad);
    return n;
  }

  Node unary_node(OpKind kind, Var a) { return derived(kind, node(a).shape, a); }
  Node reduce_node(OpKind kind, Var a) { return derived(kind, {1, 1}, a); }

  template <class F>
  Var map(OpKind kind, Var a, F&& f) {
    Node n = unary_node(kind, a);
    const auto x = node(a).data();
    for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = f(x[i]);
    return push(std::move(n));
  }

  Var binary(OpKind kind, Var a, Var b) {
    const auto& A = node(a);
    const auto& B = node(b);
    if (A.shape != B.shape)
      throw ShapeError(std::string(op_name(kind)) + ": shape mismatch " + to_string(A.shape) +
                       " vs " + to_string(B.shape));
    Node n = derived(kind, A.shape, a, b);
    const auto x = A.data();
    const auto y = B.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      switch (kind) {
        case OpKind::kAdd: n.value[i] = x[i] + y[i]; break;
        case OpKind::kSub: n.value[i] = x[i] - y[i]; break;
        default: n.value[i] = x[i] * y[i]; break;
      }
    }
    return push(std::move(n));
  }

  void propagate(Var output) {
    const auto& out = node(output);
    if (out.shape.size() != 1)
      throw ShapeError("backward: output must be a scalar, got " + to_string(out.shape));
    for (auto& n : nodes_) {
      if (n.needs_grad)
        n.grad.assign(n.shape.size(), T(0));
      else
        n.grad.clear();
    }
    if (!out.needs_grad) return;
    nodes_[static_cast<std::size_t>(output.id)].grad[0] = T(1);
    for (std::size_t i = static_cast<std::size_t>(output.id) + 1; i-- > 0;) step_back(nodes_[i]);
  }

  std::vector<T>* grad_of(int id) {
    if (id < 0) return nullptr;
    auto& n = nodes_[static_cast<std::size_t>(id)];
    return n.needs_grad ? &n.grad : nullptr;
  }

  void step_back(Node& n) {
    if (!n.needs_grad || n.kind == OpKind::kParameter || n.kind == OpKind::kConstant) return;
    const auto& g = n.grad;
    std::vector<T>* ga = grad_of(n.in0);
    std::vector<T>* gb = grad_of(n.in1);
    const auto xa = nodes_[static_cast<std::size_t>(n.in0)].data();
    const std::size_t N = g.size();

    switch (n.kind) {
      case OpKind::kAdd:
        if (ga) for (std::size_t i = 0; i < N; ++i) (*ga)[i] += g[i];
        if (gb) for (std::size_t i = 0; i < N; ++i) (*gb)[i] += g[i];
        break;
      case OpKind::kSub:
        if (ga) for (std::size_t i = 0; i < N; ++i) (*ga)[i] += g[i];
        if (gb) for (std::size_t i = 0; i < N; ++i) (*gb)[i] -= g[i];
        break;
      case OpKind::kMul: {
        const auto xb = nodes_[static_cast<std::size_t>(n.in1)].data();
        if (ga) for (std::size_t i = 0; i < N; ++i) (*ga)[i] += g[i] * xb[i];
        if (gb) for (std::size_t i = 0; i < N; ++i) (*gb)[i] += g[i] * xa[i];
        break;
      }
      case OpKind::kScale:
        for (std::size_t i = 0; i < N; ++i) (*ga)[i] += g[i] * n.attr;
        break;
      case OpKind::kAddScalar:
      case OpKind::kReshape:
        for (std::size_t i = 0; i < N; ++i) (*ga)[i] += g[i];
        break;
      case OpKind::kSum:
        for (auto& v : *ga) v += g[0];
        break;
      case OpKind::kMean: {
        const T k = g[0] / static_cast<T>(ga->size());
        for (auto& v : *ga) v += k;
        break;
      }
      case OpKind::kSquaredNorm:
        for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += T(2) * xa[i] * g[0];
        break;
      case OpKind::kExp:
        for (std::size_t i = 0; i < N; ++i) (*ga)[i] += g[i] * n.value[i];
        break;
      case OpKind::kLog:
        for (std::size_t i = 0; i < N; ++i)
          if (xa[i] > T(kLogFloor)) (*ga)[i] += g[i] / xa[i];
        break;
      case OpKind::kRelu:
        for (std::size_t i = 0; i < N; ++i)
          if (xa[i] > T(0)) (*ga)[i] += g[i];
        break;
      case OpKind::kSoftplus:
        for (std::size_t i = 0; i < N; ++i) (*ga)[i] += g[i] * ad::sigmoid(xa[i]);
        break;
      case OpKind::kSigmoid:
        for (std::size_t i = 0; i < N; ++i) {
          const T s = n.value[i];
          (*ga)[i] += g[i] * s * (T(1) - s);
        }
        break;
      case OpKind::kCos:
        for (std::size_t i = 0; i < N; ++i) (*ga)[i] -= g[i] * std::sin(xa[i]);
        break;
      case OpKind::kSin:
        for (std::size_t i = 0; i < N; ++i) (*ga)[i] += g[i] * std::cos(xa[i]);
        break;
      case OpKind::kRowSum: {
        const std::size_t cols = nodes_[static_cast<std::size_t>(n.in0)].shape.cols;
        for (std::size_t r = 0; r < n.shape.rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) (*ga)[r * cols + c] += g[r];
        break;
      }
      case OpKind::kExclusiveCumsum: {
        const std::size_t cols = n.shape.cols;
        for (std::size_t r = 0; r < n.shape.rows; ++r) {
          T acc = 0;
          for (std::size_t c = cols; c-- > 0;) {
            (*ga)[r * cols + c] += acc;
            acc += g[r * cols + c];
          }
        }
        break;
      }
      case OpKind::kMatMul: {
        const auto& A = nodes_[static_cast<std::size_t>(n.in0)];
        const auto& B = nodes_[static_cast<std::size_t>(n.in1)];
        const std::size_t rows = A.shape.rows, k_dim = A.shape.cols, m = B.shape.cols;
        const auto w = B.data();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* grow = g.data() + r * m;
          if (ga) {
            T* garow = ga->data() + r * k_dim;
            for (std::size_t k = 0; k < k_dim; ++k) {
              const T* wrow = w.data() + k * m;
              T acc = 0;
              for (std::size_t c = 0; c < m; ++c) acc += grow[c] * wrow[c];
              garow[k] += acc;
            }
          }
          if (gb) {
            const T* xrow = xa.data() + r * k_dim;
            for (std::size_t k = 0; k < k_dim; ++k) {
              const T xv = xrow[k];
              T* gbrow = gb->data() + k * m;
              for (std::size_t c = 0; c < m; ++c) gbrow[c] += xv * grow[c];
            }
          }
        }
        break;
      }
      case OpKind::kAddRowBias: {
        const std::size_t m = n.shape.cols;
        if (ga) for (std::size_t i = 0; i < N; ++i) (*ga)[i] += g[i];
        if (gb)
          for (std::size_t r = 0; r < n.shape.rows; ++r)
            for (std::size_t c = 0; c < m; ++c) (*gb)[c] += g[r * m + c];
        break;
      }
      case OpKind::kBatchedMatVec: {
        const auto& W = nodes_[static_cast<std::size_t>(n.in0)];
        const auto& V = nodes_[static_cast<std::size_t>(n.in1)];
        const std::size_t R = W.shape.rows, S = W.shape.cols, K = V.shape.cols;
        const auto w = W.data();
        const auto v = V.data();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t s = 0; s < S; ++s) {
            const std::size_t row = r * S + s;
            if (ga) {
              T acc = 0;
              for (std::size_t k = 0; k < K; ++k) acc += g[r * K + k] * v[row * K + k];
              (*ga)[row] += acc;
            }
            if (gb)
              for (std::size_t k = 0; k < K; ++k) (*gb)[row * K + k] += g[r * K + k] * w[row];
          }
        break;
      }
      case OpKind::kBilinearGather: {
        const std::size_t C = n.shape.cols;
        for (std::size_t p = 0; p < n.shape.rows; ++p) {
          const auto c = corners(n.aux[2 * p], n.aux[2 * p + 1], n.grid_h, n.grid_w);
          const T* gp = g.data() + p * C;
          for (int k = 0; k < 4; ++k) {
            T* dst = ga->data() + c.index[k] * C;
            const T wk = c.weight[k];
            for (std::size_t ch = 0; ch < C; ++ch) dst[ch] += wk * gp[ch];
          }
        }
        break;
      }
      case OpKind::kConcatCols: {
        const std::size_t ca = nodes_[static_cast<std::size_t>(n.in0)].shape.cols;
        const std::size_t cols = n.shape.cols, cb = cols - ca;
        for (std::size_t r = 0; r < n.shape.rows; ++r) {
          if (ga) for (std::size_t c = 0; c < ca; ++c) (*ga)[r * ca + c] += g[r * cols + c];
          if (gb) for (std::size_t c = 0; c < cb; ++c) (*gb)[r * cb + c] += g[r * cols + ca + c];
        }
        break;
      }
      case OpKind::kSliceCols: {
        const std::size_t src_cols = nodes_[static_cast<std::size_t>(n.in0)].shape.cols;
        const std::size_t cnt = n.shape.cols;
        for (std::size_t r = 0; r < n.shape.rows; ++r)
          for (std::size_t c = 0; c < cnt; ++c) (*ga)[r * src_cols + n.offset + c] += g[r * cnt + c];
        break;
      }
      case OpKind::kBroadcastCols: {
        const std::size_t m = n.shape.cols;
        for (std::size_t r = 0; r < n.shape.rows; ++r) {
          T acc = 0;
          for (std::size_t c = 0; c < m; ++c) acc += g[r * m + c];
          (*ga)[r] += acc;
        }
        break;
      }
      case OpKind::kConstant:
      case OpKind::kParameter:
        break;
    }
  }

  std::vector<Node> nodes_;
};

/// Result of comparing reverse-mode gradients against central differences.
struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_parameter = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Builds a scalar on a fresh tape from parameters bound in `params` order.
template <class T>
using TapeFunction = std::function<Var(Tape<T>&, std::span<const Var>)>;

template <class T>
Var bind_and_eval(Tape<T>& tape, const TapeFunction<T>& f,
                  std::span<Parameter<T>* const> params) {
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) leaves.push_back(tape.parameter(*params[i], i));
  return f(tape, leaves);
}

/// max over coordinates of |analytic - central difference| / max(1, |central difference|).
/// Parameter gradients are overwritten with the analytic gradient.
template <class T>
GradCheckReport grad_check(const TapeFunction<T>& f, std::span<Parameter<T>* const> params,
                           T epsilon) {
  if (!(epsilon > T(0))) throw std::invalid_argument("grad_check: epsilon must be positive");
  for (auto* p : params) p->zero_grad();
  {
    Tape<T> tape;
    const Var out = bind_and_eval(tape, f, params);
    tape.check_finite();
    tape.backward(out, params);
  }
  GradCheckReport report;
  Tape<T> tape;
  auto eval = [&]() {
    tape.reset();
    const Var out = bind_and_eval(tape, f, params);
    const T v = tape.scalar(out);
    if (!std::isfinite(v)) tape.check_finite();
    return v;
  };
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& values = params[pi]->values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      values[i] = saved + epsilon;
      const T plus = eval();
      values[i] = saved - epsilon;
      const T minus = eval();
      values[i] = saved;
      const double numeric =
          (static_cast<double>(plus) - static_cast<double>(minus)) / (2.0 * static_cast<double>(epsilon));
      const double analytic = static_cast<double>(params[pi]->grad()[i]);
      const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
      ++report.coordinates;
      if (err > report.max_relative_error || report.coordinates == 1) {
        report.max_relative_error = err;
        report.worst_parameter = pi;
        report.worst_index = i;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace senerf::ad
