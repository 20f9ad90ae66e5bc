#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace keycap {

using Shape = std::vector<std::size_t>;
// Row/key selection flags; an empty mask selects everything.
using Mask = std::vector<bool>;

std::string shape_str(const Shape& shape);

// Dense row-major array of doubles. A default-constructed Tensor is empty
// (no shape); every constructed one has rank >= 1 and all dims >= 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  // Size of the last axis, and the number of slices along it.
  std::size_t last_dim() const { return shape_.back(); }
  std::size_t outer() const { return data_.size() / shape_.back(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  // 2-D access.
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double item() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  bool requires_grad = false;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Seeded generator. The engine is std::mt19937_64, whose output sequence is
// fixed by the standard; the real-valued transforms below are done by hand
// because the std distributions are implementation-defined.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  static constexpr std::string_view algorithm = "mt19937_64";

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Unbiased integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

Tensor random_uniform(Shape shape, double lo, double hi, SeededRng& rng);

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Define-by-run tape. Nodes are appended in execution order, which is a
// topological order; backward() walks it once in reverse.
//
// A Graph is single-threaded. Parameters registered through parameter() are
// borrowed and must outlive the graph.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& out, const Tensor& out_grad)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Owned leaf that receives a gradient.
  Var variable(Tensor value);
  // Borrowed leaf that receives a gradient.
  Var parameter(const Tensor& value);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  // Gradient w.r.t. v after backward(); zeros when v did not influence the loss.
  Tensor grad(Var v) const;

  void backward(Var loss);
  // Allows a further backward() call.
  void clear_gradients();
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Op plumbing: append a node computed from inputs. fn may be empty.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn fn);
  // Gradient accumulator for v, zero-initialised on first touch.
  Tensor& grad_slot(Var v);

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool grad_enabled_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

inline const Tensor& Var::value() const { return graph_->value(*this); }

enum class Activation { gelu, tanh, relu };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation a);

// Value assigned to masked attention scores; exp() of it underflows to 0.
inline constexpr double kMaskedScore = -1e30;

// ---- differentiable operations ----

Var matmul(Var a, Var b);
// x[n×in] · Wᵀ + bias, with W stored [out×in]. bias may be an invalid Var.
Var linear(Var x, Var weight, Var bias = {});
Var transpose(Var a);
// Same-shape elementwise add, or bias-add of a vector over the last dim.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var tanh(Var a);
Var sigmoid(Var a);
Var gelu(Var a);
Var relu(Var a);
Var activate(Var a, Activation kind);
Var log(Var a);
Var sum(Var a);
Var reshape(Var a, Shape shape);
Var concat_lastdim(std::span<const Var> parts);
Var concat_lastdim(std::initializer_list<Var> parts);
// Stack 2-D tensors with equal column counts on top of each other.
Var concat_rows(std::span<const Var> parts);
Var slice_lastdim(Var a, std::size_t offset, std::size_t length);
// Row r of a 2-D tensor, as [1×C].
Var row(Var a, std::size_t r);
// [1×C] → [n×C].
Var repeat_rows(Var a, std::size_t n);
Var embedding_lookup(Var table, std::span<const std::size_t> ids);
Var softmax_lastdim(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps);
// Causal mask on [L×L] scores: (i, j) with j > i, or with key_valid[j] false,
// becomes kMaskedScore. key_valid may be empty (all keys valid).
Var masked_fill(Var scores, const Mask& key_valid = {});
// Mean over the rows of a 2-D tensor whose flag is set; result is [1×C].
Var mean_rows(Var a, const Mask& rows);
// -(1/N) Σ log max(P[i, y_i], floor) over included rows. include may be empty.
Var categorical_cross_entropy(Var probs, std::span<const std::size_t> labels,
                              const Mask& include = {}, double floor = 1e-12);
// Same objective evaluated from logits through log-sum-exp.
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels,
                          const Mask& include = {});

// Returns clamp events seen by categorical_cross_entropy in this process.
std::size_t probability_floor_hits();

}  // namespace keycap
