#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

// Minimal dense-tensor reverse-mode autodiff. Values live on a Tape; every
// op appends a node whose adjoint runs once, in reverse creation order, when
// Tape::backward is called. Tensors are row-major; broadcasting is limited
// to a trailing-shape operand repeated over the leading axes.

namespace musicssl::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string to_string(const Shape& s);

/// Enables the non-finite check after every op (on by default in debug).
void set_nan_check(bool enabled);
bool nan_check_enabled();

template <typename T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<T> m;  // Adam first moment
  std::vector<T> v;  // Adam second moment
  bool requires_grad = true;

  Parameter() = default;
  Parameter(std::string n, Shape s, std::vector<T> init)
      : name(std::move(n)), shape(std::move(s)), value(std::move(init)),
        grad(value.size(), T(0)), m(value.size(), T(0)), v(value.size(), T(0)) {}

  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
class Tape;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until the backward pass reaches the node
  bool requires_grad = false;
  const char* op = "leaf";
  std::function<void(Tape<T>&, Node<T>&)> backward;
  Parameter<T>* param = nullptr;
};

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const;
  std::size_t dim(int axis) const;  // negative axes count from the end
  std::size_t numel() const;
  std::span<const T> value() const;
  /// Gradient after backward; empty span when the node was not reached.
  std::span<const T> grad() const;
  bool requires_grad() const;
  T item() const;

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Shape shape, std::vector<T> value);
  Var<T> variable(Shape shape, std::vector<T> value);
  /// Leaf bound to a parameter; gradients are accumulated into
  /// param.grad by backward(). Repeated calls return the same node.
  Var<T> param(Parameter<T>& p);

  /// Reverse pass from a scalar loss. A tape supports one backward call.
  void backward(Var<T> loss);

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Node<T>& node(std::size_t id) { return *nodes_[id]; }
  const Node<T>& node(std::size_t id) const { return *nodes_[id]; }
  /// Gradient buffer of a node, zero-initialized on first access.
  std::vector<T>& grad_of(std::size_t id);

  /// Appends an op result. `fn` is kept only when grad is enabled and some
  /// parent requires grad.
  Var<T> push(Shape shape, std::vector<T> value, std::span<const Var<T>> parents,
              std::function<void(Tape<T>&, Node<T>&)> fn, const char* op);

 private:
  bool grad_enabled_;
  bool consumed_ = false;
  std::vector<std::unique_ptr<Node<T>>> nodes_;
  std::unordered_map<Parameter<T>*, std::size_t> param_nodes_;
};

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

/// a[..., M, K] x b[K, N] -> [..., M, N].
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// Batched a[B, M, K] x b[B, K, N] (or b[B, N, K] with trans_b).
template <typename T> Var<T> bmm(Var<T> a, Var<T> b, bool trans_b = false);
/// b has a's shape or a trailing suffix of it.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> transpose(Var<T> a, int axis0, int axis1);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> concat(std::span<const Var<T>> parts, int axis);
template <typename T> Var<T> slice(Var<T> a, int axis, std::size_t begin, std::size_t end);
template <typename T> Var<T> sum(Var<T> a, int axis);
template <typename T> Var<T> mean(Var<T> a, int axis);
template <typename T> Var<T> sum_all(Var<T> a);
/// x[T, C_in] (time-major), w[kernel, C_in, C_out], optional bias[C_out].
/// Output [(T - kernel) / stride + 1, C_out].
template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w, std::optional<Var<T>> bias, std::size_t stride);
/// Normalizes over the last axis; gamma/beta (shape [last]) are optional.
template <typename T>
Var<T> layer_norm(Var<T> x, std::optional<Var<T>> gamma, std::optional<Var<T>> beta,
                  T eps = T(1e-5));
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
/// Over the last axis.
template <typename T> Var<T> softmax(Var<T> a);
template <typename T> Var<T> log_softmax(Var<T> a);
/// Inverted dropout; the keep mask is a pure function of (seed, element).
template <typename T> Var<T> dropout(Var<T> a, double p, std::uint64_t seed);
/// table[K, D] gathered at ids -> [n, D].
template <typename T> Var<T> embedding_lookup(Var<T> table, std::span<const std::uint32_t> ids);
/// Rows of x[N, D] scaled to unit L2 norm; zero rows stay zero.
template <typename T> Var<T> normalize_rows(Var<T> x);
/// x[N, D] with rows where mask[i] is set replaced by row[D].
template <typename T>
Var<T> replace_rows(Var<T> x, const std::vector<bool>& mask, Var<T> row);

// Losses: mean over rows i with mask[i] set (an empty mask means all rows).
// Throws std::invalid_argument when no row is selected.

/// logits[N, K], targets in [0, K).
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::uint32_t> targets,
                     const std::vector<bool>& mask = {});
/// Mean over selected rows of the row-wise sum of squared errors / D.
template <typename T>
Var<T> mse(Var<T> pred, Var<T> target, const std::vector<bool>& mask = {});
template <typename T>
Var<T> smooth_l1(Var<T> pred, Var<T> target, T beta, const std::vector<bool>& mask = {});
/// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
template <typename T>
Var<T> bce_with_logits(Var<T> logits, Var<T> targets, const std::vector<bool>& mask = {});

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
};

/// One bias-corrected Adam update of every trainable parameter; step >= 1.
template <typename T>
void adam_step(std::span<Parameter<T>* const> params, const AdamOptions& opt, std::int64_t step);

/// Seed for a dropout site, independent of evaluation order.
std::uint64_t dropout_seed(std::uint64_t global_seed, std::uint64_t op_id, std::uint64_t step);

}  // namespace musicssl::ad
