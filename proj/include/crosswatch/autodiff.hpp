#pragma once

// Dense row-major tensors with a define-by-run reverse-mode tape.
//
// Every tensor is treated as a matrix: rank-2 shapes are [rows, cols],
// rank-1 shapes [n] behave as [1, n] and scalars are [1]. Ops build their
// result eagerly and record a backward rule on the tape; Tape::backward
// sweeps the records once in reverse and accumulates into Parameter::grad.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace crosswatch::ad {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(std::string_view op, const Shape& a, const Shape& b)
      : std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b)) {}
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(count(shape_), fill) {}
  Tensor(Shape shape, const std::vector<double>& values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (count(shape_) != data_.size())
      throw ShapeError("tensor: shape " + shape_str(shape_) + " holds " +
                       std::to_string(count(shape_)) + " values, got " +
                       std::to_string(data_.size()));
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
  static Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({1, n}, std::move(v));
  }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) {
    return Tensor({r, c}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item: tensor " + shape_str(shape_) + " is not a scalar");
    return data_[0];
  }

  std::vector<double> row_values(std::size_t r) const {
    return {data_.begin() + static_cast<std::ptrdiff_t>(r * cols()),
            data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols())};
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static std::size_t count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  // aligned so Eigen kernels take the same path for every allocation
  Shape shape_;
  std::vector<double, Eigen::aligned_allocator<double>> data_;
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<RowMat> as_mat(Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
inline Eigen::Map<const RowMat> as_mat(const Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

/// Named parameters in registration order. Addresses are stable.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor init) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    Tensor grad(init.shape(), 0.0);
    params_.push_back(Parameter{name, std::move(init), std::move(grad)});
    index_.emplace(std::move(name), params_.size() - 1);
    return params_.back();
  }

  Parameter* find(std::string_view name) {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  const Parameter* find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter& at(std::string_view name) {
    if (auto* p = find(name)) return *p;
    throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  }
  const Parameter& at(std::string_view name) const {
    if (const auto* p = find(name)) return *p;
    throw std::out_of_range("unknown parameter '" + std::string(name) + "'");
  }
  bool contains(std::string_view name) const { return find(name) != nullptr; }

  void zero_grad() {
    for (auto& p : params_) p.grad.fill(0.0);
  }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Test hook: scales the backward rule of one primitive so gradient checks can
// be shown to catch a broken rule.
namespace detail {
inline std::string& injected_fault() {
  static std::string op;
  return op;
}
}  // namespace detail

inline double fault_scale(std::string_view op) {
  const auto& f = detail::injected_fault();
  return (!f.empty() && f == op) ? 1.5 : 1.0;
}

class ScopedGradientFault {
 public:
  explicit ScopedGradientFault(std::string op) : previous_(detail::injected_fault()) {
    detail::injected_fault() = std::move(op);
  }
  ~ScopedGradientFault() { detail::injected_fault() = previous_; }
  ScopedGradientFault(const ScopedGradientFault&) = delete;
  ScopedGradientFault& operator=(const ScopedGradientFault&) = delete;

 private:
  std::string previous_;
};

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, {}, "constant", false});
    return {this, nodes_.size() - 1};
  }

  /// Leaf for a trainable parameter; recorded once per tape.
  Var param(Parameter& p) {
    if (auto it = param_index_.find(&p); it != param_index_.end()) return {this, it->second};
    nodes_.push_back(Node{{}, {}, &p, {}, "parameter", true});
    param_index_.emplace(&p, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, const char* op, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) {
      check_owner(v, op);
      needs = needs || nodes_[v.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, nullptr, needs ? std::move(fn) : BackwardFn{},
                          op, needs});
    return {this, nodes_.size() - 1};
  }

  Var record(Tensor value, std::span<const Var> inputs, const char* op, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) {
      check_owner(v, op);
      needs = needs || nodes_[v.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, nullptr, needs ? std::move(fn) : BackwardFn{},
                          op, needs});
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.param ? n.param->value : n.value;
  }

  /// Upstream gradient of a node during backward.
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }

  /// Gradient accumulator for an input, or nullptr when it needs none.
  Tensor* sink(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.param) {
      if (n.param->grad.shape() != n.param->value.shape()) n.param->grad = Tensor(n.param->value.shape());
      return &n.param->grad;
    }
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::size_t id) const { return nodes_[id].op; }

  /// Reverse sweep from a scalar output. Parameter gradients accumulate.
  void backward(const Var& output) {
    check_owner(output, "backward");
    if (value(output.id()).size() != 1)
      throw ShapeError("backward: output must be a scalar, got " + shape_str(output.shape()));
    for (auto& n : nodes_) n.grad = Tensor();
    const std::size_t out = output.id();
    if (!nodes_[out].requires_grad) return;
    if (nodes_[out].param) {
      sink(out)->values()[0] += 1.0;
      return;
    }
    nodes_[out].grad = Tensor(nodes_[out].value.shape(), 1.0);
    for (std::size_t i = out + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Parameter* param = nullptr;
    BackwardFn backward;
    const char* op = "";
    bool requires_grad = false;
  };

  void check_owner(const Var& v, std::string_view op) const {
    if (&v.tape() != this || v.id() >= nodes_.size())
      throw std::invalid_argument(std::string(op) + ": variable does not belong to this tape");
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_index_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

// ---------------------------------------------------------------------------
// primitives

namespace detail {

inline bool is_row_broadcast(const Tensor& a, const Tensor& b) {
  return b.rows() == 1 && b.cols() == a.cols() && a.rows() > 1;
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  return a.tape();
}

inline double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows() || bv.shape().size() > 2 || av.shape().size() > 2)
    throw ShapeError("matmul", av.shape(), bv.shape());
  Tensor out({av.rows(), bv.cols()});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, "matmul", [ia, ib](Tape& t, std::size_t self) {
    const double s = fault_scale("matmul");
    const auto g = as_mat(t.grad(self));
    if (Tensor* ga = t.sink(ia)) as_mat(*ga).noalias() += s * (g * as_mat(t.value(ib)).transpose());
    if (Tensor* gb = t.sink(ib)) as_mat(*gb).noalias() += s * (as_mat(t.value(ia)).transpose() * g);
  });
}

namespace detail {

template <int Sign>
Var add_like(const Var& a, const Var& b, const char* op) {
  Tape& tape = same_tape(a, b, op);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool broadcast = is_row_broadcast(av, bv);
  if (!broadcast && (av.rows() != bv.rows() || av.cols() != bv.cols())) throw ShapeError(op, av.shape(), bv.shape());
  Tensor out = av;
  if (broadcast) {
    as_mat(out).rowwise() += double(Sign) * as_mat(bv).row(0);
  } else {
    as_mat(out) += double(Sign) * as_mat(bv);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, op, [ia, ib, broadcast, op](Tape& t, std::size_t self) {
    const double s = fault_scale(op);
    const auto g = as_mat(t.grad(self));
    if (Tensor* ga = t.sink(ia)) as_mat(*ga) += s * g;
    if (Tensor* gb = t.sink(ib)) {
      if (broadcast)
        as_mat(*gb).row(0) += double(Sign) * s * g.colwise().sum();
      else
        as_mat(*gb) += double(Sign) * s * g;
    }
  });
}

}  // namespace detail

/// Elementwise sum; `b` may be a single row broadcast over the rows of `a`.
inline Var add(const Var& a, const Var& b) { return detail::add_like<1>(a, b, "add"); }
inline Var sub(const Var& a, const Var& b) { return detail::add_like<-1>(a, b, "sub"); }

inline Var mul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) throw ShapeError("mul", av.shape(), bv.shape());
  Tensor out(av.shape());
  as_mat(out) = as_mat(av).cwiseProduct(as_mat(bv));
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {a, b}, "mul", [ia, ib](Tape& t, std::size_t self) {
    const double s = fault_scale("mul");
    const auto g = as_mat(t.grad(self));
    if (Tensor* ga = t.sink(ia)) as_mat(*ga) += s * g.cwiseProduct(as_mat(t.value(ib)));
    if (Tensor* gb = t.sink(ib)) as_mat(*gb) += s * g.cwiseProduct(as_mat(t.value(ia)));
  });
}

/// Multiplies by a constant tensor of the same shape (no gradient to the constant).
inline Var mul_const(const Var& a, const Tensor& c) {
  const Tensor& av = a.value();
  if (av.rows() != c.rows() || av.cols() != c.cols()) throw ShapeError("mul_const", av.shape(), c.shape());
  Tensor out(av.shape());
  as_mat(out) = as_mat(av).cwiseProduct(as_mat(c));
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, "mul_const", [ia, c](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia)) as_mat(*ga) += fault_scale("mul_const") * as_mat(t.grad(self)).cwiseProduct(as_mat(c));
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  as_mat(out) *= s;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, "scale", [ia, s](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia)) as_mat(*ga) += fault_scale("scale") * s * as_mat(t.grad(self));
  });
}

/// 1 - a, elementwise.
inline Var one_minus(const Var& a) {
  Tensor out = detail::map(a.value(), [](double v) { return 1.0 - v; });
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, "one_minus", [ia](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia)) as_mat(*ga) -= fault_scale("one_minus") * as_mat(t.grad(self));
  });
}

/// Concatenation along the last axis.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Tape& tape = parts.front().tape();
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids, widths;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat", parts.front().shape(), p.shape());
    ids.push_back(p.id());
    widths.push_back(p.cols());
    cols += p.cols();
  }
  Tensor out({rows, cols});
  {
    auto o = as_mat(out);
    Eigen::Index off = 0;
    for (const auto& p : parts) {
      const auto w = static_cast<Eigen::Index>(p.cols());
      o.middleCols(off, w) = as_mat(p.value());
      off += w;
    }
  }
  return tape.record(std::move(out), parts, "concat", [ids, widths](Tape& t, std::size_t self) {
    const double s = fault_scale("concat");
    const auto g = as_mat(t.grad(self));
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const auto w = static_cast<Eigen::Index>(widths[k]);
      if (Tensor* gk = t.sink(ids[k])) as_mat(*gk) += s * g.middleCols(off, w);
      off += w;
    }
  });
}

inline Var concat(std::initializer_list<Var> parts) {
  return concat(std::span<const Var>(parts.begin(), parts.size()));
}

/// Mean over rows: [m, n] -> [1, n].
inline Var row_mean(const Var& a) {
  const Tensor& av = a.value();
  if (av.rows() == 0) throw ShapeError("row_mean: empty input " + shape_str(av.shape()));
  Tensor out({1, av.cols()});
  const double inv = 1.0 / static_cast<double>(av.rows());
  as_mat(out) = as_mat(av).colwise().sum() * inv;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, "row_mean", [ia, inv](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia))
      as_mat(*ga).rowwise() += fault_scale("row_mean") * inv * as_mat(t.grad(self)).row(0);
  });
}

/// Elementwise mean of same-shaped operands.
inline Var average(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("average: no operands");
  Tape& tape = parts.front().tape();
  Tensor out = parts.front().value();
  std::vector<std::size_t> ids{parts.front().id()};
  for (std::size_t k = 1; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    if (v.rows() != out.rows() || v.cols() != out.cols()) throw ShapeError("average", out.shape(), v.shape());
    as_mat(out) += as_mat(v);
    ids.push_back(parts[k].id());
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  as_mat(out) *= inv;
  return tape.record(std::move(out), parts, "average", [ids, inv](Tape& t, std::size_t self) {
    const double s = fault_scale("average");
    for (auto id : ids)
      if (Tensor* g = t.sink(id)) as_mat(*g) += s * inv * as_mat(t.grad(self));
  });
}

inline Var sum(const Var& a) {
  const std::size_t ia = a.id();
  return a.tape().record(Tensor::scalar(as_mat(a.value()).sum()), {a}, "sum", [ia](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia)) as_mat(*ga).array() += fault_scale("sum") * t.grad(self)[0];
  });
}

inline Var sigmoid(const Var& a) {
  Tensor out = detail::map(a.value(), detail::sigmoid);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, "sigmoid", [ia](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia)) {
      const auto y = as_mat(t.value(self)).array();
      as_mat(*ga).array() += fault_scale("sigmoid") * as_mat(t.grad(self)).array() * y * (1.0 - y);
    }
  });
}

inline Var tanh(const Var& a) {
  Tensor out(a.value().shape());
  as_mat(out) = as_mat(a.value()).array().tanh().matrix();
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, "tanh", [ia](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia)) {
      const auto y = as_mat(t.value(self)).array();
      as_mat(*ga).array() += fault_scale("tanh") * as_mat(t.grad(self)).array() * (1.0 - y * y);
    }
  });
}

inline Var exp(const Var& a) {
  Tensor out = detail::map(a.value(), [](double v) { return std::exp(v); });
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, "exp", [ia](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia))
      as_mat(*ga).array() += fault_scale("exp") * as_mat(t.grad(self)).array() * as_mat(t.value(self)).array();
  });
}

inline Var log(const Var& a) {
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i)
    if (!(av[i] > 0.0)) throw NumericError("log: non-positive input " + std::to_string(av[i]) + " at index " + std::to_string(i));
  Tensor out = detail::map(av, [](double v) { return std::log(v); });
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, "log", [ia](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia))
      as_mat(*ga).array() += fault_scale("log") * as_mat(t.grad(self)).array() / as_mat(t.value(ia)).array();
  });
}

/// log(sigmoid(a)) without overflow.
inline Var log_sigmoid(const Var& a) {
  Tensor out = detail::map(a.value(), detail::log_sigmoid);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, "log_sigmoid", [ia](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia)) {
      const Tensor& x = t.value(ia);
      const Tensor& g = t.grad(self);
      const double s = fault_scale("log_sigmoid");
      for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += s * g[i] * (1.0 - detail::sigmoid(x[i]));
    }
  });
}

/// Elementwise clamp; the gradient is zero where the input was clipped.
inline Var clamp(const Var& a, double lo, double hi) {
  Tensor out = detail::map(a.value(), [lo, hi](double v) { return std::clamp(v, lo, hi); });
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, "clamp", [ia, lo, hi](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia)) {
      const Tensor& x = t.value(ia);
      const Tensor& g = t.grad(self);
      const double s = fault_scale("clamp");
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] >= lo && x[i] <= hi) (*ga)[i] += s * g[i];
    }
  });
}

inline Var softmax_rows(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  {
    const auto x = as_mat(av);
    auto y = as_mat(out);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      y.row(r) = (x.row(r).array() - x.row(r).maxCoeff()).exp().matrix();
      y.row(r) /= y.row(r).sum();
    }
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, "softmax_rows", [ia](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia)) {
      const auto y = as_mat(t.value(self));
      const auto g = as_mat(t.grad(self));
      auto gx = as_mat(*ga);
      const double s = fault_scale("softmax_rows");
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const double dot = g.row(r).dot(y.row(r));
        gx.row(r).array() += s * y.row(r).array() * (g.row(r).array() - dot);
      }
    }
  });
}

/// Row-wise log-softmax in log-sum-exp form.
inline Var log_softmax_rows(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  {
    const auto x = as_mat(av);
    auto y = as_mat(out);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double m = x.row(r).maxCoeff();
      const double lse = m + std::log((x.row(r).array() - m).exp().sum());
      y.row(r) = (x.row(r).array() - lse).matrix();
    }
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, "log_softmax_rows", [ia](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia)) {
      const auto y = as_mat(t.value(self));
      const auto g = as_mat(t.grad(self));
      auto gx = as_mat(*ga);
      const double s = fault_scale("log_softmax_rows");
      for (Eigen::Index r = 0; r < y.rows(); ++r)
        gx.row(r).array() += s * (g.row(r).array() - y.row(r).array().exp() * g.row(r).sum());
    }
  });
}

/// Selects rows of `a` by index (rows may repeat).
inline Var gather_rows(const Var& a, std::vector<std::size_t> index) {
  const Tensor& av = a.value();
  Tensor out({index.size(), av.cols()});
  {
    const auto x = as_mat(av);
    auto y = as_mat(out);
    for (std::size_t k = 0; k < index.size(); ++k) {
      if (index[k] >= av.rows())
        throw ShapeError("gather_rows: index " + std::to_string(index[k]) + " out of range for " + shape_str(av.shape()));
      y.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(index[k]));
    }
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, "gather_rows", [ia, index = std::move(index)](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia)) {
      const auto g = as_mat(t.grad(self));
      auto gx = as_mat(*ga);
      const double s = fault_scale("gather_rows");
      for (std::size_t k = 0; k < index.size(); ++k)
        gx.row(static_cast<Eigen::Index>(index[k])) += s * g.row(static_cast<Eigen::Index>(k));
    }
  });
}

/// Softmax of an [n, 1] score column within each segment. `segment[k]` names
/// the group of row k.
inline Var segment_softmax(const Var& scores, std::vector<std::size_t> segment, std::size_t segments) {
  const Tensor& sv = scores.value();
  if (sv.cols() != 1 || sv.rows() != segment.size())
    throw ShapeError("segment_softmax: scores " + shape_str(sv.shape()) + " vs " + std::to_string(segment.size()) + " segment ids");
  std::vector<double> mx(segments, -std::numeric_limits<double>::infinity()), den(segments, 0.0);
  for (std::size_t k = 0; k < segment.size(); ++k) {
    if (segment[k] >= segments) throw ShapeError("segment_softmax: segment id out of range");
    mx[segment[k]] = std::max(mx[segment[k]], sv[k]);
  }
  Tensor out(sv.shape());
  for (std::size_t k = 0; k < segment.size(); ++k) {
    out[k] = std::exp(sv[k] - mx[segment[k]]);
    den[segment[k]] += out[k];
  }
  for (std::size_t k = 0; k < segment.size(); ++k) out[k] /= den[segment[k]];
  const std::size_t ia = scores.id();
  return scores.tape().record(std::move(out), {scores}, "segment_softmax",
                              [ia, segment = std::move(segment), segments](Tape& t, std::size_t self) {
    if (Tensor* ga = t.sink(ia)) {
      const Tensor& y = t.value(self);
      const Tensor& g = t.grad(self);
      std::vector<double> dot(segments, 0.0);
      for (std::size_t k = 0; k < segment.size(); ++k) dot[segment[k]] += g[k] * y[k];
      const double s = fault_scale("segment_softmax");
      for (std::size_t k = 0; k < segment.size(); ++k) (*ga)[k] += s * y[k] * (g[k] - dot[segment[k]]);
    }
  });
}

/// out[s] = sum over rows k in segment s of weight[k] * values[k]; empty segments give zero rows.
inline Var segment_weighted_sum(const Var& weights, const Var& values, std::vector<std::size_t> segment,
                                std::size_t segments) {
  Tape& tape = detail::same_tape(weights, values, "segment_weighted_sum");
  const Tensor& wv = weights.value();
  const Tensor& vv = values.value();
  if (wv.cols() != 1 || wv.rows() != vv.rows() || segment.size() != vv.rows())
    throw ShapeError("segment_weighted_sum", wv.shape(), vv.shape());
  Tensor out({segments, vv.cols()});
  {
    const auto v = as_mat(vv);
    auto y = as_mat(out);
    for (std::size_t k = 0; k < segment.size(); ++k) {
      if (segment[k] >= segments) throw ShapeError("segment_weighted_sum: segment id out of range");
      y.row(static_cast<Eigen::Index>(segment[k])) += wv[k] * v.row(static_cast<Eigen::Index>(k));
    }
  }
  const std::size_t iw = weights.id(), iv = values.id();
  return tape.record(std::move(out), {weights, values}, "segment_weighted_sum",
                     [iw, iv, segment = std::move(segment)](Tape& t, std::size_t self) {
    const double s = fault_scale("segment_weighted_sum");
    const auto g = as_mat(t.grad(self));
    Tensor* gw = t.sink(iw);
    Tensor* gv = t.sink(iv);
    const Tensor& w = t.value(iw);
    const auto v = as_mat(t.value(iv));
    for (std::size_t k = 0; k < segment.size(); ++k) {
      const auto row = g.row(static_cast<Eigen::Index>(segment[k]));
      if (gw) (*gw)[k] += s * row.dot(v.row(static_cast<Eigen::Index>(k)));
      if (gv) as_mat(*gv).row(static_cast<Eigen::Index>(k)) += s * w[k] * row;
    }
  });
}

// ---------------------------------------------------------------------------
// gradient checking

/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

struct ParameterCheck {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
};

using LossBuilder = std::function<Var(Tape&)>;

/// Central-difference check of every scalar in `params` against the tape's
/// analytic gradient of `loss`.
inline std::vector<ParameterCheck> grad_check_parameters(ParameterStore& params, const LossBuilder& loss,
                                                         double epsilon) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("grad_check: epsilon must be positive");
  params.zero_grad();
  {
    Tape tape;
    Var out = loss(tape);
    if (!out.value().all_finite()) throw NumericError("grad_check: non-finite loss at the base point");
    tape.backward(out);
  }
  auto evaluate = [&]() {
    Tape tape;
    return loss(tape).value().item();
  };
  std::vector<ParameterCheck> report;
  for (auto& p : params) {
    ParameterCheck check{p.name, 0.0, 0};
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + epsilon;
      const double up = evaluate();
      p.value[i] = saved - epsilon;
      const double down = evaluate();
      p.value[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("grad_check: non-finite value perturbing coordinate " + std::to_string(i) + " of '" +
                           p.name + "'");
      const double numeric = (up - down) / (2.0 * epsilon);
      const double err = relative_error(p.grad[i], numeric);
      if (err > check.max_relative_error) {
        check.max_relative_error = err;
        check.worst_index = i;
      }
    }
    report.push_back(std::move(check));
  }
  return report;
}

/// Max relative error between the analytic and central-difference gradient of
/// a scalar function of one tensor.
inline double grad_check(const std::function<Var(Tape&, const Var&)>& fn, const Tensor& point, double epsilon) {
  ParameterStore store;
  Parameter& x = store.add("x", point);
  auto report = grad_check_parameters(store, [&](Tape& tape) {
    Var out = fn(tape, tape.param(x));
    if (out.value().size() != 1) throw ShapeError("grad_check: function must return a scalar, got " + shape_str(out.shape()));
    return out;
  }, epsilon);
  return report.front().max_relative_error;
}

}  // namespace crosswatch::ad
