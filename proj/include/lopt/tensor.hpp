#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// Every primitive appends one entry to the calling thread's active tape when
// gradients are enabled and at least one input requires a gradient.
// backward() replays that tape in reverse, accumulates into every reachable
// tensor that requires a gradient, and clears the tape. Tapes are
// thread_local, so each worker differentiates independently as long as
// shared tensors are read-only (requires_grad == false).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lopt/errors.hpp"

namespace lopt {

using Shape = std::vector<std::size_t>;

// Observation mask: true marks an observed entry, false a hidden one.
using Mask = std::vector<bool>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

enum class Op : std::uint8_t {
  matmul,
  add,
  scale,
  sub,
  mul,
  leaky_relu,
  tanh,
  sin,
  sum,
  mse,
  l2_norm_sq,
  masked_mse,
};

inline constexpr std::array kAllOps = {
    Op::matmul, Op::add,  Op::scale, Op::sub, Op::mul,        Op::leaky_relu,
    Op::tanh,   Op::sin,  Op::sum,   Op::mse, Op::l2_norm_sq, Op::masked_mse,
};

constexpr std::string_view op_name(Op op) {
  switch (op) {
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::scale: return "scale";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::leaky_relu: return "leaky_relu";
    case Op::tanh: return "tanh";
    case Op::sin: return "sin";
    case Op::sum: return "sum";
    case Op::mse: return "mse";
    case Op::l2_norm_sq: return "l2_norm_sq";
    case Op::masked_mse: return "masked_mse";
  }
  return "?";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until populated
  bool requires_grad = false;
  // Generation of the tape that recorded the op producing this node; 0 for leaves.
  std::uint64_t tape_generation = 0;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

inline thread_local bool grad_mode_enabled = true;

// Test hook: scales the input-gradient contributions of one op's adjoint so
// the gradient checker can prove it notices a broken adjoint.
struct AdjointPerturbation {
  bool active = false;
  Op op = Op::matmul;
  double factor = 1.0;
};
inline AdjointPerturbation adjoint_perturbation;

}  // namespace detail

namespace testing {

inline void perturb_adjoint(Op op, double factor) {
  detail::adjoint_perturbation = {true, op, factor};
}

inline void clear_adjoint_perturbation() { detail::adjoint_perturbation = {}; }

}  // namespace testing

inline bool grad_enabled() { return detail::grad_mode_enabled; }

// Disables recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor;
void backward(const Tensor& loss);

class Tape {
 public:
  struct Entry {
    Op op;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> output;
    // Called with the perturbation factor (1.0 outside tests).
    std::function<void(double)> adjoint;
  };

  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::uint64_t generation() const { return generation_; }

  // Adjoints executed on this thread since it started.
  std::uint64_t adjoint_calls() const { return adjoint_calls_; }

  void clear() {
    entries_.clear();
    ++generation_;
  }

  void record(Entry entry) {
    entry.output->tape_generation = generation_;
    entries_.push_back(std::move(entry));
  }

 private:
  friend void backward(const Tensor& loss);

  std::vector<Entry> entries_;
  std::uint64_t generation_ = 1;
  std::uint64_t adjoint_calls_ = 0;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (values.size() != shape_numel(shape)) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " given " +
                           std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    Shape shape{values.size()};
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  std::span<const double> values() const { return node_->value; }
  // Direct mutation bypasses the tape; used by optimizers and initializers.
  std::span<double> values_mut() { return node_->value; }
  std::vector<double> to_vector() const { return node_->value; }

  double item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }
  // Returns the gradient slot to the unpopulated state.
  void clear_grad() { node_->grad.clear(); }

  // Deep copy of the values with no gradient history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};


namespace detail {

inline bool needs_record(std::initializer_list<const Tensor*> inputs) {
  if (!grad_mode_enabled) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

// Wraps a computed value as the op's output, recording it on the active tape
// when differentiation is needed. `adjoint(out, k)` accumulates input grads.
template <typename Adjoint>
Tensor emit(Op op, Shape shape, std::vector<double> value,
            std::initializer_list<const Tensor*> inputs, Adjoint adjoint) {
  auto out = std::make_shared<Node>();
  out->shape = std::move(shape);
  out->value = std::move(value);
  if (needs_record(inputs)) {
    out->requires_grad = true;
    Tape::Entry entry{op, {}, out, {}};
    entry.inputs.reserve(inputs.size());
    for (const Tensor* t : inputs) entry.inputs.push_back(t->node());
    Node* raw_out = out.get();
    entry.adjoint = [raw_out, adjoint = std::move(adjoint)](double k) { adjoint(*raw_out, k); };
    Tape::active().record(std::move(entry));
  }
  return Tensor::from_node(std::move(out));
}

// Input gradient buffer if the input participates, else nullptr.
inline double* grad_slot(Node* n) {
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

inline void require_same_shape(const char* what, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

template <typename Fwd, typename Deriv>
Tensor unary_elementwise(Op op, const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  Node* xn = x.node().get();
  return emit(op, x.shape(), std::move(out), {&x}, [xn, deriv](Node& o, double k) {
    double* gx = grad_slot(xn);
    if (!gx) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      gx[i] += k * o.grad[i] * deriv(xn->value[i], o.value[i]);
    }
  });
}

}  // namespace detail

// a[m x k] * b[k x n] -> [m x n]. A rank-1 `a` of length k is treated as a
// row vector and yields a rank-1 result of length n.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool row = a.rank() == 1;
  if (b.rank() != 2 || (a.rank() != 2 && !row) || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = row ? 1 : a.dim(0);
  const std::size_t k = b.dim(0);
  const std::size_t n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  Shape shape = row ? Shape{n} : Shape{m, n};
  detail::Node* an = a.node().get();
  detail::Node* bn = b.node().get();
  return detail::emit(Op::matmul, std::move(shape), std::move(out), {&a, &b},
                      [an, bn, m, k, n](detail::Node& o, double s) {
                        const double* g = o.grad.data();
                        if (double* ga = detail::grad_slot(an)) {
                          for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t p = 0; p < k; ++p) {
                              double acc = 0.0;
                              const double* brow = bn->value.data() + p * n;
                              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * brow[j];
                              ga[i * k + p] += s * acc;
                            }
                          }
                        }
                        if (double* gb = detail::grad_slot(bn)) {
                          for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t p = 0; p < k; ++p) {
                              const double aip = s * an->value[i * k + p];
                              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                            }
                          }
                        }
                      });
}

// Elementwise a + b. `b` may also be a bias vector matching the last extent
// of a rank-2 `a`, in which case it is added to every row.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias = a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1);
  if (!bias) detail::require_same_shape("add", a, b);
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t nb = bv.size();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % nb];
  detail::Node* an = a.node().get();
  detail::Node* bn = b.node().get();
  return detail::emit(Op::add, a.shape(), std::move(out), {&a, &b},
                      [an, bn, nb](detail::Node& o, double s) {
                        if (double* ga = detail::grad_slot(an)) {
                          for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += s * o.grad[i];
                        }
                        if (double* gb = detail::grad_slot(bn)) {
                          for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i % nb] += s * o.grad[i];
                        }
                      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  detail::Node* an = a.node().get();
  detail::Node* bn = b.node().get();
  return detail::emit(Op::sub, a.shape(), std::move(out), {&a, &b},
                      [an, bn](detail::Node& o, double s) {
                        if (double* ga = detail::grad_slot(an)) {
                          for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += s * o.grad[i];
                        }
                        if (double* gb = detail::grad_slot(bn)) {
                          for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] -= s * o.grad[i];
                        }
                      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  detail::Node* an = a.node().get();
  detail::Node* bn = b.node().get();
  return detail::emit(Op::mul, a.shape(), std::move(out), {&a, &b},
                      [an, bn](detail::Node& o, double s) {
                        if (double* ga = detail::grad_slot(an)) {
                          for (std::size_t i = 0; i < o.grad.size(); ++i) {
                            ga[i] += s * o.grad[i] * bn->value[i];
                          }
                        }
                        if (double* gb = detail::grad_slot(bn)) {
                          for (std::size_t i = 0; i < o.grad.size(); ++i) {
                            gb[i] += s * o.grad[i] * an->value[i];
                          }
                        }
                      });
}

inline Tensor scale(const Tensor& a, double factor) {
  return detail::unary_elementwise(
      Op::scale, a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

// max(x, slope * x). The subgradient at exactly 0 is taken as 1.
inline Tensor leaky_relu(const Tensor& x, double slope) {
  if (slope < 0.0) throw ContractError("leaky_relu: negative slope");
  return detail::unary_elementwise(
      Op::leaky_relu, x, [slope](double v) { return v >= 0.0 ? v : slope * v; },
      [slope](double v, double) { return v >= 0.0 ? 1.0 : slope; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_elementwise(
      Op::tanh, x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sin(const Tensor& x) {
  return detail::unary_elementwise(
      Op::sin, x, [](double v) { return std::sin(v); },
      [](double v, double) { return std::cos(v); });
}

inline Tensor sum(const Tensor& x) {
  const auto xv = x.values();
  double acc = 0.0;
  for (double v : xv) acc += v;
  detail::Node* xn = x.node().get();
  return detail::emit(Op::sum, {}, {acc}, {&x}, [xn](detail::Node& o, double s) {
    if (double* gx = detail::grad_slot(xn)) {
      const double g = s * o.grad[0];
      for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += g;
    }
  });
}

inline Tensor l2_norm_sq(const Tensor& x) {
  const auto xv = x.values();
  double acc = 0.0;
  for (double v : xv) acc += v * v;
  detail::Node* xn = x.node().get();
  return detail::emit(Op::l2_norm_sq, {}, {acc}, {&x}, [xn](detail::Node& o, double s) {
    if (double* gx = detail::grad_slot(xn)) {
      const double g = 2.0 * s * o.grad[0];
      for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += g * xn->value[i];
    }
  });
}

namespace detail {

// Mean of squared differences over the entries where `mask` is true; an
// empty mask selects every entry.
inline Tensor squared_error_mean(Op op, const Tensor& pred, const Tensor& target,
                                 const Mask& mask) {
  require_same_shape(op_name(op).data(), pred, target);
  const auto pv = pred.values();
  const auto tv = target.values();
  if (!mask.empty() && mask.size() != pv.size()) {
    throw DimensionError("masked_mse: mask of length " + std::to_string(mask.size()) +
                         " for tensor of shape " + shape_str(pred.shape()));
  }
  std::size_t count = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const double d = pv[i] - tv[i];
    acc += d * d;
    ++count;
  }
  if (count == 0) throw InputError("masked_mse: mask hides every entry");
  const double inv = 1.0 / static_cast<double>(count);
  Node* pn = pred.node().get();
  Node* tn = target.node().get();
  return emit(op, {}, {acc * inv}, {&pred, &target},
              [pn, tn, inv, mask](Node& o, double s) {
                const double g = 2.0 * s * o.grad[0] * inv;
                double* gp = grad_slot(pn);
                double* gt = grad_slot(tn);
                for (std::size_t i = 0; i < pn->value.size(); ++i) {
                  if (!mask.empty() && !mask[i]) continue;
                  const double d = g * (pn->value[i] - tn->value[i]);
                  if (gp) gp[i] += d;
                  if (gt) gt[i] -= d;
                }
              });
}

}  // namespace detail

inline Tensor mse(const Tensor& pred, const Tensor& target) {
  return detail::squared_error_mean(Op::mse, pred, target, {});
}

inline Tensor masked_mse(const Tensor& pred, const Tensor& target, const Mask& mask) {
  if (mask.empty()) throw InputError("masked_mse: empty mask");
  return detail::squared_error_mean(Op::masked_mse, pred, target, mask);
}

// Replays the active tape backward from a scalar loss, accumulating into every
// reachable tensor with requires_grad, then clears the tape.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  Tape& tape = Tape::active();
  detail::Node* root = loss.node().get();
  if (!root->requires_grad) {
    throw ContractError("backward: loss does not depend on any tensor requiring a gradient");
  }
  if (root->tape_generation != 0 && root->tape_generation != tape.generation()) {
    throw ContractError("backward: loss was not produced on the active tape");
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  const auto& perturb = detail::adjoint_perturbation;
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    const double k = (perturb.active && perturb.op == it->op) ? perturb.factor : 1.0;
    it->adjoint(k);
    ++tape.adjoint_calls_;
  }
  tape.clear();
}

// Overloads for readable model code.
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace lopt
