#include "keycap/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>
#include <utility>

#include <spdlog/spdlog.h>

#include "keycap/error.hpp"

namespace keycap {

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace {

std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_2d(const Tensor& t, std::string_view op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
  }
}

// C[m×n] += A[m×k] · B[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×n] += A[m×k] · B[n×k]ᵀ
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[k×n] += A[m×k]ᵀ · B[m×n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t r = 0; r < m; ++r) {
    const double* brow = b + r * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[r * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

bool is_bias_of(const Tensor& bias, const Tensor& x) {
  return bias.size() == x.last_dim() && bias.shape() != x.shape() &&
         (bias.rank() == 1 || (bias.rank() == 2 && bias.dim(0) == 1));
}

template <typename F, typename D>
Var unary(std::string_view op, Var a, F f, D df) {
  const Tensor& x = a.value();
  Tensor y(x.shape(), std::vector<double>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.graph().record(op, std::move(y), {a}, [a, df](Graph& g, const Tensor&, const Tensor& gy) {
    if (!g.requires_grad(a)) return;
    const Tensor& x = g.value(a);
    Tensor& gx = g.grad_slot(a);
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gy[i] * df(x[i]);
  });
}

std::atomic<std::size_t> g_floor_hits{0};

}  // namespace

// ---- Tensor ----

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (std::size_t d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  }
  if (shape_product(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                     " values");
  }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  Tensor out(std::move(shape), data_);
  out.requires_grad = requires_grad;
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// ---- SeededRng ----

double SeededRng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::uint64_t SeededRng::below(std::uint64_t bound) {
  if (bound == 0) throw InputError("SeededRng::below: bound must be positive");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return x % bound;
}

double SeededRng::normal() {
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor random_uniform(Shape shape, double lo, double hi, SeededRng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// ---- Graph ----

Var Graph::constant(Tensor value) { return record("constant", std::move(value), {}, {}); }

Var Graph::variable(Tensor value) {
  Var v = record("variable", std::move(value), {}, {});
  nodes_.back().requires_grad = grad_enabled_;
  return v;
}

Var Graph::parameter(const Tensor& value) {
  if (value.empty()) throw ShapeError("parameter: empty tensor");
  if (!value.all_finite()) throw NumericError("parameter: non-finite values");
  Node node;
  node.borrowed = &value;
  node.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Graph::value(Var v) const {
  const Node& n = nodes_[v.id()];
  return n.borrowed ? *n.borrowed : n.owned;
}

Var Graph::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Graph::record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  if (value.empty()) throw ShapeError(std::string(op) + ": empty result");
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite values in result of shape " + shape_str(value.shape()));
  }
  Node node;
  node.owned = std::move(value);
  for (Var in : inputs) {
    if (&in.graph() != this) throw ContractError(std::string(op) + ": input belongs to another graph");
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad_slot(Var v) {
  Tensor& slot = grads_[v.id()];
  if (slot.empty()) slot = Tensor::zeros(value(v).shape());
  return slot;
}

Tensor Graph::grad(Var v) const {
  if (v.id() < grads_.size() && !grads_[v.id()].empty()) return grads_[v.id()];
  return Tensor::zeros(value(v).shape());
}

void Graph::backward(Var loss) {
  if (!grad_enabled_) throw ContractError("backward: graph was built without gradients");
  if (backward_done_) throw ContractError("backward: already run on this graph; call clear_gradients() first");
  if (value(loss).size() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(value(loss).shape()));
  }
  grads_.assign(nodes_.size(), Tensor());
  grads_[loss.id()] = Tensor::filled(value(loss).shape(), 1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || grads_[i].empty()) continue;
    node.backward(*this, value(Var(this, i)), grads_[i]);
  }
  backward_done_ = true;
}

void Graph::clear_gradients() {
  grads_.clear();
  backward_done_ = false;
}

Activation parse_activation(std::string_view name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  throw InputError("unknown activation '" + std::string(name) + "'");
}

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
  }
  return "?";
}

// ---- ops ----

Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_2d(x, "matmul");
  require_2d(y, "matmul");
  if (x.dim(1) != y.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree for " + shape_str(x.shape()) + " and " +
                     shape_str(y.shape()));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = y.dim(1);
  Tensor out = Tensor::zeros({m, n});
  gemm_nn(x.data().data(), y.data().data(), out.data().data(), m, k, n);
  return a.graph().record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Graph& g, const Tensor&, const Tensor& gy) {
    if (g.requires_grad(a)) {
      gemm_nt(gy.data().data(), g.value(b).data().data(), g.grad_slot(a).data().data(), m, n, k);
    }
    if (g.requires_grad(b)) {
      gemm_tn(g.value(a).data().data(), gy.data().data(), g.grad_slot(b).data().data(), m, k, n);
    }
  });
}

Var linear(Var x, Var weight, Var bias) {
  const Tensor& in = x.value();
  const Tensor& w = weight.value();
  require_2d(in, "linear");
  require_2d(w, "linear");
  if (in.dim(1) != w.dim(1)) {
    throw ShapeError("linear: input " + shape_str(in.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  const std::size_t n = in.dim(0), in_dim = in.dim(1), out_dim = w.dim(0);
  Tensor out = Tensor::zeros({n, out_dim});
  gemm_nt(in.data().data(), w.data().data(), out.data().data(), n, in_dim, out_dim);
  if (bias.valid()) {
    const Tensor& b = bias.value();
    if (b.size() != out_dim) {
      throw ShapeError("linear: bias " + shape_str(b.shape()) + " does not match weight " + shape_str(w.shape()));
    }
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < out_dim; ++c) out.at(r, c) += b[c];
    }
  }
  std::vector<Var> inputs{x, weight};
  if (bias.valid()) inputs.push_back(bias);
  return x.graph().record("linear", std::move(out), inputs,
                          [x, weight, bias, n, in_dim, out_dim](Graph& g, const Tensor&, const Tensor& gy) {
                            if (g.requires_grad(x)) {
                              gemm_nn(gy.data().data(), g.value(weight).data().data(),
                                      g.grad_slot(x).data().data(), n, out_dim, in_dim);
                            }
                            if (g.requires_grad(weight)) {
                              gemm_tn(gy.data().data(), g.value(x).data().data(),
                                      g.grad_slot(weight).data().data(), n, out_dim, in_dim);
                            }
                            if (bias.valid() && g.requires_grad(bias)) {
                              Tensor& gb = g.grad_slot(bias);
                              for (std::size_t r = 0; r < n; ++r) {
                                for (std::size_t c = 0; c < out_dim; ++c) gb[c] += gy.at(r, c);
                              }
                            }
                          });
}

Var transpose(Var a) {
  const Tensor& x = a.value();
  require_2d(x, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::zeros({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = x.at(i, j);
  }
  return a.graph().record("transpose", std::move(out), {a}, [a, r, c](Graph& g, const Tensor&, const Tensor& gy) {
    if (!g.requires_grad(a)) return;
    Tensor& gx = g.grad_slot(a);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) gx.at(i, j) += gy.at(j, i);
    }
  });
}

namespace {

// Shared implementation of add/sub: out = a + sign * b.
Var add_signed(std::string_view op, Var a, Var b, double sign) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out = x;
  out.requires_grad = false;
  bool broadcast = false;
  if (x.shape() == y.shape()) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] += sign * y[i];
  } else if (is_bias_of(y, x)) {
    broadcast = true;
    const std::size_t cols = x.last_dim();
    for (std::size_t i = 0; i < x.size(); ++i) out[i] += sign * y[i % cols];
  } else {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(x.shape()) + " and " +
                     shape_str(y.shape()));
  }
  return a.graph().record(op, std::move(out), {a, b}, [a, b, sign, broadcast](Graph& g, const Tensor&, const Tensor& gy) {
    if (g.requires_grad(a)) {
      Tensor& gx = g.grad_slot(a);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_slot(b);
      const std::size_t cols = gb.size();
      for (std::size_t i = 0; i < gy.size(); ++i) gb[broadcast ? i % cols : i] += sign * gy[i];
    }
  });
}

}  // namespace

Var add(Var a, Var b) { return add_signed("add", a, b, 1.0); }
Var sub(Var a, Var b) { return add_signed("sub", a, b, -1.0); }

Var mul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape() != y.shape()) {
    throw ShapeError("mul: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(y.shape()));
  }
  Tensor out(x.shape(), std::vector<double>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return a.graph().record("mul", std::move(out), {a, b}, [a, b](Graph& g, const Tensor&, const Tensor& gy) {
    const Tensor& x = g.value(a);
    const Tensor& y = g.value(b);
    if (g.requires_grad(a)) {
      Tensor& gx = g.grad_slot(a);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * y[i];
    }
    if (g.requires_grad(b)) {
      Tensor& gb = g.grad_slot(b);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * x[i];
    }
  });
}

Var scale(Var a, double factor) {
  return unary("scale", a, [factor](double v) { return factor * v; }, [factor](double) { return factor; });
}

Var tanh(Var a) {
  return unary("tanh", a, [](double v) { return std::tanh(v); },
               [](double v) {
                 const double t = std::tanh(v);
                 return 1.0 - t * t;
               });
}

namespace {
double logistic(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(Var a) {
  return unary("sigmoid", a, logistic, [](double v) {
    const double s = logistic(v);
    return s * (1.0 - s);
  });
}

// Exact (erf) form.
Var gelu(Var a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary("gelu", a, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
               [=](double v) {
                 return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * std::exp(-0.5 * v * v) * inv_sqrt_2pi;
               });
}

Var relu(Var a) {
  return unary("relu", a, [](double v) { return v > 0 ? v : 0.0; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Var activate(Var a, Activation kind) {
  switch (kind) {
    case Activation::gelu: return gelu(a);
    case Activation::tanh: return tanh(a);
    case Activation::relu: return relu(a);
  }
  return a;
}

Var log(Var a) {
  for (double v : a.value().data()) {
    if (!(v > 0)) throw NumericError("log: non-positive input");
  }
  return unary("log", a, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double total = 0.0;
  for (double v : x.data()) total += v;
  return a.graph().record("sum", Tensor::scalar(total), {a}, [a](Graph& g, const Tensor&, const Tensor& gy) {
    if (!g.requires_grad(a)) return;
    for (double& v : g.grad_slot(a).data()) v += gy[0];
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.graph().record("reshape", std::move(out), {a}, [a](Graph& g, const Tensor&, const Tensor& gy) {
    if (!g.requires_grad(a)) return;
    Tensor& gx = g.grad_slot(a);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

Var concat_lastdim(std::initializer_list<Var> parts) {
  return concat_lastdim(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_lastdim(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_lastdim: no inputs");
  const Tensor& first = parts[0].value();
  Shape lead(first.shape().begin(), first.shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    const Tensor& t = p.value();
    Shape l(t.shape().begin(), t.shape().end() - 1);
    if (l != lead) {
      throw ShapeError("concat_lastdim: leading dims of " + shape_str(first.shape()) + " and " +
                       shape_str(t.shape()) + " disagree");
    }
    widths.push_back(t.last_dim());
    total += t.last_dim();
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out = Tensor::zeros(out_shape);
  const std::size_t outer = first.outer();
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& t = parts[k].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(t.data().begin() + o * widths[k], widths[k], out.data().begin() + o * total + offset);
    }
    offset += widths[k];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].graph().record(
      "concat_lastdim", std::move(out), parts, [inputs, widths, total, outer](Graph& g, const Tensor&, const Tensor& gy) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          if (g.requires_grad(inputs[k])) {
            Tensor& gx = g.grad_slot(inputs[k]);
            for (std::size_t o = 0; o < outer; ++o) {
              for (std::size_t j = 0; j < widths[k]; ++j) gx[o * widths[k] + j] += gy[o * total + offset + j];
            }
          }
          offset += widths[k];
        }
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts[0].value().last_dim();
  std::size_t rows = 0;
  std::vector<double> data;
  for (Var p : parts) {
    const Tensor& t = p.value();
    require_2d(t, "concat_rows");
    if (t.dim(1) != cols) {
      throw ShapeError("concat_rows: column counts of " + shape_str(parts[0].shape()) + " and " +
                       shape_str(t.shape()) + " disagree");
    }
    rows += t.dim(0);
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].graph().record("concat_rows", Tensor({rows, cols}, std::move(data)), parts,
                                 [inputs](Graph& g, const Tensor&, const Tensor& gy) {
                                   std::size_t offset = 0;
                                   for (Var in : inputs) {
                                     const std::size_t n = g.value(in).size();
                                     if (g.requires_grad(in)) {
                                       Tensor& gx = g.grad_slot(in);
                                       for (std::size_t i = 0; i < n; ++i) gx[i] += gy[offset + i];
                                     }
                                     offset += n;
                                   }
                                 });
}

Var slice_lastdim(Var a, std::size_t offset, std::size_t length) {
  const Tensor& x = a.value();
  const std::size_t width = x.last_dim();
  if (length == 0 || offset + length > width) {
    throw ShapeError("slice_lastdim: [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                     ") out of range for " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = length;
  Tensor out = Tensor::zeros(out_shape);
  const std::size_t outer = x.outer();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().begin() + o * width + offset, length, out.data().begin() + o * length);
  }
  return a.graph().record("slice_lastdim", std::move(out), {a},
                          [a, offset, length, width, outer](Graph& g, const Tensor&, const Tensor& gy) {
                            if (!g.requires_grad(a)) return;
                            Tensor& gx = g.grad_slot(a);
                            for (std::size_t o = 0; o < outer; ++o) {
                              for (std::size_t j = 0; j < length; ++j) gx[o * width + offset + j] += gy[o * length + j];
                            }
                          });
}

Var row(Var a, std::size_t r) {
  const Tensor& x = a.value();
  require_2d(x, "row");
  if (r >= x.dim(0)) throw IndexError("row: index " + std::to_string(r) + " out of range for " + shape_str(x.shape()));
  const std::size_t cols = x.dim(1);
  std::vector<double> data(x.data().begin() + r * cols, x.data().begin() + (r + 1) * cols);
  return a.graph().record("row", Tensor({1, cols}, std::move(data)), {a}, [a, r, cols](Graph& g, const Tensor&, const Tensor& gy) {
    if (!g.requires_grad(a)) return;
    Tensor& gx = g.grad_slot(a);
    for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += gy[j];
  });
}

Var repeat_rows(Var a, std::size_t n) {
  const Tensor& x = a.value();
  if (n == 0) throw ShapeError("repeat_rows: count must be positive");
  if (!(x.rank() == 1 || (x.rank() == 2 && x.dim(0) == 1))) {
    throw ShapeError("repeat_rows: expected a row vector, got " + shape_str(x.shape()));
  }
  const std::size_t cols = x.size();
  std::vector<double> data;
  data.reserve(n * cols);
  for (std::size_t i = 0; i < n; ++i) data.insert(data.end(), x.data().begin(), x.data().end());
  return a.graph().record("repeat_rows", Tensor({n, cols}, std::move(data)), {a},
                          [a, n, cols](Graph& g, const Tensor&, const Tensor& gy) {
                            if (!g.requires_grad(a)) return;
                            Tensor& gx = g.grad_slot(a);
                            for (std::size_t i = 0; i < n; ++i) {
                              for (std::size_t j = 0; j < cols; ++j) gx[j] += gy[i * cols + j];
                            }
                          });
}

Var embedding_lookup(Var table, std::span<const std::size_t> ids) {
  const Tensor& t = table.value();
  require_2d(t, "embedding_lookup");
  if (ids.empty()) throw ShapeError("embedding_lookup: empty id sequence");
  const std::size_t vocab = t.dim(0), width = t.dim(1);
  std::vector<double> data;
  data.reserve(ids.size() * width);
  for (std::size_t id : ids) {
    if (id >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " out of vocabulary of size " +
                       std::to_string(vocab));
    }
    data.insert(data.end(), t.data().begin() + id * width, t.data().begin() + (id + 1) * width);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return table.graph().record("embedding_lookup", Tensor({ids.size(), width}, std::move(data)), {table},
                              [table, idv, width](Graph& g, const Tensor&, const Tensor& gy) {
                                if (!g.requires_grad(table)) return;
                                Tensor& gt = g.grad_slot(table);
                                for (std::size_t r = 0; r < idv.size(); ++r) {
                                  for (std::size_t j = 0; j < width; ++j) gt[idv[r] * width + j] += gy[r * width + j];
                                }
                              });
}

Var softmax_lastdim(Var a) {
  const Tensor& x = a.value();
  const std::size_t width = x.last_dim(), outer = x.outer();
  Tensor out(x.shape(), std::vector<double>(x.size()));
  for (std::size_t o = 0; o < outer; ++o) {
    const double* in = x.data().data() + o * width;
    double* y = out.data().data() + o * width;
    const double mx = *std::max_element(in, in + width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      y[j] = std::exp(in[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < width; ++j) y[j] /= total;
  }
  return a.graph().record("softmax_lastdim", std::move(out), {a},
                          [a, width, outer](Graph& g, const Tensor& y, const Tensor& gy) {
                            if (!g.requires_grad(a)) return;
                            Tensor& gx = g.grad_slot(a);
                            for (std::size_t o = 0; o < outer; ++o) {
                              const std::size_t base = o * width;
                              double dot = 0.0;
                              for (std::size_t j = 0; j < width; ++j) dot += gy[base + j] * y[base + j];
                              for (std::size_t j = 0; j < width; ++j) gx[base + j] += y[base + j] * (gy[base + j] - dot);
                            }
                          });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& in = x.value();
  const std::size_t width = in.last_dim(), outer = in.outer();
  if (gain.value().size() != width || bias.value().size() != width) {
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                     " do not match last dim of " + shape_str(in.shape()));
  }
  if (eps < 0) throw InputError("layer_norm: eps must be non-negative");
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(in.shape(), std::vector<double>(in.size()));
  // Normalised input and per-slice inverse std, kept for the backward pass.
  std::vector<double> xhat(in.size());
  std::vector<double> inv_std(outer);
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * width;
    double mean = 0.0;
    for (std::size_t j = 0; j < width; ++j) mean += in[base + j];
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      const double d = in[base + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(width);
    const double denom = var + eps;
    // Zero-variance slice with eps=0: the normalised value is defined as 0.
    inv_std[o] = denom > 0 ? 1.0 / std::sqrt(denom) : 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      xhat[base + j] = (in[base + j] - mean) * inv_std[o];
      out[base + j] = gv[j] * xhat[base + j] + bv[j];
    }
  }
  return x.graph().record(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), width, outer](
          Graph& g, const Tensor&, const Tensor& gy) {
        const Tensor& gv = g.value(gain);
        if (g.requires_grad(gain)) {
          Tensor& gg = g.grad_slot(gain);
          for (std::size_t i = 0; i < gy.size(); ++i) gg[i % width] += gy[i] * xhat[i];
        }
        if (g.requires_grad(bias)) {
          Tensor& gb = g.grad_slot(bias);
          for (std::size_t i = 0; i < gy.size(); ++i) gb[i % width] += gy[i];
        }
        if (!g.requires_grad(x)) return;
        Tensor& gx = g.grad_slot(x);
        const double n = static_cast<double>(width);
        for (std::size_t o = 0; o < outer; ++o) {
          const std::size_t base = o * width;
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            const double d = gy[base + j] * gv[j];
            mean_d += d;
            mean_dx += d * xhat[base + j];
          }
          mean_d /= n;
          mean_dx /= n;
          for (std::size_t j = 0; j < width; ++j) {
            const double d = gy[base + j] * gv[j];
            gx[base + j] += inv_std[o] * (d - mean_d - xhat[base + j] * mean_dx);
          }
        }
      });
}

Var masked_fill(Var scores, const Mask& key_valid) {
  const Tensor& s = scores.value();
  require_2d(s, "masked_fill");
  const std::size_t len = s.dim(0);
  if (s.dim(1) != len) throw ShapeError("masked_fill: scores must be square, got " + shape_str(s.shape()));
  if (!key_valid.empty() && key_valid.size() != len) {
    throw ShapeError("masked_fill: key mask of length " + std::to_string(key_valid.size()) + " for " +
                     shape_str(s.shape()));
  }
  std::vector<bool> keep(len * len);
  Tensor out = s;
  out.requires_grad = false;
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < len; ++j) {
      const bool k = j <= i && (key_valid.empty() || key_valid[j]);
      keep[i * len + j] = k;
      if (!k) out.at(i, j) = kMaskedScore;
    }
  }
  return scores.graph().record("masked_fill", std::move(out), {scores},
                               [scores, keep = std::move(keep)](Graph& g, const Tensor&, const Tensor& gy) {
                                 if (!g.requires_grad(scores)) return;
                                 Tensor& gx = g.grad_slot(scores);
                                 for (std::size_t i = 0; i < gy.size(); ++i) {
                                   if (keep[i]) gx[i] += gy[i];
                                 }
                               });
}

Var mean_rows(Var a, const Mask& rows) {
  const Tensor& x = a.value();
  require_2d(x, "mean_rows");
  if (rows.size() != x.dim(0)) {
    throw ShapeError("mean_rows: row mask of length " + std::to_string(rows.size()) + " for " +
                     shape_str(x.shape()));
  }
  const std::size_t cols = x.dim(1);
  const auto count = static_cast<std::size_t>(std::count(rows.begin(), rows.end(), true));
  if (count == 0) throw InputError("mean_rows: no rows selected");
  Tensor out = Tensor::zeros({1, cols});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (!rows[r]) continue;
    for (std::size_t j = 0; j < cols; ++j) out[j] += x.at(r, j);
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (double& v : out.data()) v *= inv;
  std::vector<bool> mask(rows.begin(), rows.end());
  return a.graph().record("mean_rows", std::move(out), {a},
                          [a, mask = std::move(mask), cols, inv](Graph& g, const Tensor&, const Tensor& gy) {
                            if (!g.requires_grad(a)) return;
                            Tensor& gx = g.grad_slot(a);
                            for (std::size_t r = 0; r < mask.size(); ++r) {
                              if (!mask[r]) continue;
                              for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += gy[j] * inv;
                            }
                          });
}

namespace {

std::vector<bool> scored_rows(const Tensor& t, std::span<const std::size_t> labels, const Mask& include,
                              std::string_view op) {
  require_2d(t, op);
  const std::size_t n = t.dim(0), classes = t.dim(1);
  if (labels.size() != n) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " + shape_str(t.shape()));
  }
  if (!include.empty() && include.size() != n) {
    throw ShapeError(std::string(op) + ": include mask of length " + std::to_string(include.size()) + " for " +
                     shape_str(t.shape()));
  }
  std::vector<bool> rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    rows[i] = include.empty() || include[i];
    if (rows[i] && labels[i] >= classes) {
      throw IndexError(std::string(op) + ": label " + std::to_string(labels[i]) + " out of range for " +
                       std::to_string(classes) + " classes");
    }
  }
  if (std::find(rows.begin(), rows.end(), true) == rows.end()) {
    throw InputError(std::string(op) + ": no rows to score");
  }
  return rows;
}

}  // namespace

Var categorical_cross_entropy(Var probs, std::span<const std::size_t> labels, const Mask& include,
                              double floor) {
  const Tensor& p = probs.value();
  std::vector<bool> rows = scored_rows(p, labels, include, "categorical_cross_entropy");
  const double count = static_cast<double>(std::count(rows.begin(), rows.end(), true));
  double total = 0.0;
  std::size_t clamped = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i]) continue;
    const double pv = p.at(i, labels[i]);
    if (pv < floor) ++clamped;
    total -= std::log(std::max(pv, floor));
  }
  if (clamped) {
    g_floor_hits += clamped;
    spdlog::warn("categorical_cross_entropy: {} true-label probabilities clamped to {}", clamped, floor);
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return probs.graph().record(
      "categorical_cross_entropy", Tensor::scalar(total / count), {probs},
      [probs, rows = std::move(rows), lab = std::move(lab), count, floor](Graph& g, const Tensor&, const Tensor& gy) {
        if (!g.requires_grad(probs)) return;
        const Tensor& p = g.value(probs);
        Tensor& gp = g.grad_slot(probs);
        for (std::size_t i = 0; i < rows.size(); ++i) {
          if (!rows[i]) continue;
          const double pv = p.at(i, lab[i]);
          if (pv >= floor) gp.at(i, lab[i]) -= gy[0] / (count * pv);
        }
      });
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels, const Mask& include) {
  const Tensor& z = logits.value();
  std::vector<bool> rows = scored_rows(z, labels, include, "softmax_cross_entropy");
  const double count = static_cast<double>(std::count(rows.begin(), rows.end(), true));
  const std::size_t classes = z.dim(1);
  Tensor probs = Tensor::zeros(z.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* zi = z.data().data() + i * classes;
    const double mx = *std::max_element(zi, zi + classes);
    double acc = 0.0;
    for (std::size_t c = 0; c < classes; ++c) acc += std::exp(zi[c] - mx);
    const double lse = mx + std::log(acc);
    for (std::size_t c = 0; c < classes; ++c) probs.at(i, c) = std::exp(zi[c] - lse);
    if (rows[i]) total += lse - zi[labels[i]];
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return logits.graph().record(
      "softmax_cross_entropy", Tensor::scalar(total / count), {logits},
      [logits, rows = std::move(rows), lab = std::move(lab), probs = std::move(probs), count, classes](
          Graph& g, const Tensor&, const Tensor& gy) {
        if (!g.requires_grad(logits)) return;
        Tensor& gz = g.grad_slot(logits);
        const double s = gy[0] / count;
        for (std::size_t i = 0; i < rows.size(); ++i) {
          if (!rows[i]) continue;
          for (std::size_t c = 0; c < classes; ++c) gz.at(i, c) += s * probs.at(i, c);
          gz.at(i, lab[i]) -= s;
        }
      });
}

std::size_t probability_floor_hits() { return g_floor_hits.load(); }

}  // namespace keycap
