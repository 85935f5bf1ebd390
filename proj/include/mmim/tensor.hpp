#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mmim/rng.hpp"

namespace mmim {

using Shape = std::vector<size_t>;

size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Storage precision for newly created tensors. f64 is the default and the
/// precision all gradient checks run at; f32 rounds the result of every
/// forward op through float.
enum class Precision { f64, f32 };
Precision compute_precision();
void set_compute_precision(Precision p);

bool grad_enabled();

/// Disables graph construction for the enclosed scope.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor;

/// One executed primitive: output buffer, parent tensors and the closure
/// that pushes the output gradient back into the parents.
struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first touched; then data-sized
  std::vector<Tensor> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";
  uint64_t id = 0;

  size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

/// Dense n-dimensional array of doubles with optional gradient tracking.
/// Copying a Tensor aliases the underlying node, so parameters held both by
/// a layer and a parameter store see the same data and gradient.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  size_t ndim() const { return shape().size(); }
  size_t size() const;
  bool requires_grad() const;
  void set_requires_grad(bool rg);

  double* data();
  const double* data() const;
  std::vector<double>& vec();
  const std::vector<double>& vec() const;

  /// Gradient buffer; allocates zeros on first access.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  bool has_grad() const;
  void zero_grad();

  double item() const;  // single-element tensors only
  double at(std::initializer_list<size_t> idx) const;

  bool all_finite() const;
  void throw_if_nonfinite(const std::string& where) const;

  std::shared_ptr<Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

/// Topologically ordered list of the ops reachable from a root: every
/// node's parents appear before the node itself.
struct ComputationRecord {
  std::vector<std::shared_ptr<Node>> ops;
};

ComputationRecord record_from(const Tensor& root);

/// Reverse-mode sweep from a scalar loss. Accumulates into .grad of every
/// requires_grad tensor reachable from the loss; callers zero grads
/// explicitly between steps.
void backward(const Tensor& loss);

// ---- primitive ops ---------------------------------------------------------
// Binary elementwise ops broadcast right-aligned (each trailing dim must
// match or be 1 on one side).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor scalar_add(const Tensor& a, double c);

/// Batched matrix product over the last two dims; leading dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& a, Shape new_shape);
Tensor permute(const Tensor& a, const std::vector<size_t>& axes);
Tensor transpose_last2(const Tensor& a);

Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_axis0(const Tensor& x);
Tensor mean_axis0(const Tensor& x);

/// Row selection along axis 0 (duplicates allowed); backward scatter-adds.
Tensor gather_rows(const Tensor& x, const std::vector<size_t>& idx);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& x, size_t start, size_t len);

/// Mean negative log-likelihood of per-row log-probabilities at the label
/// index: -(1/R) * sum_r logp[r, labels[r]].
Tensor nll_rows(const Tensor& log_probs, const std::vector<int>& labels);

/// Mean binary cross-entropy over logits against fixed 0/1 targets,
/// computed in the numerically stable max(z,0) - z*t + log1p(exp(-|z|)) form.
Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets);

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace mmim
