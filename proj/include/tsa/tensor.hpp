#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tsa/config.hpp"

namespace tsa {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class GradTape;

/// Dense row-major tensor handle. Copies share the underlying buffer; clone()
/// makes a deep copy. Gradient storage is allocated only when requires_grad.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, real v, bool requires_grad = false);
  static Tensor from(const Shape& s, std::vector<real> values,
                     bool requires_grad = false);
  static Tensor scalar(real v);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  int64_t size() const;
  std::vector<real>& data();
  const std::vector<real>& data() const;
  real item() const;

  bool requires_grad() const;
  /// Marks a leaf tensor trainable and allocates its gradient buffer.
  void set_requires_grad(bool on);
  std::vector<real>& grad();
  const std::vector<real>& grad() const;
  void zero_grad();

  /// Index of the recording that produced this tensor, -1 for leaves.
  int tape_node() const;
  /// Deep copy; the copy is a leaf and carries no tape linkage.
  Tensor clone() const;

 private:
  friend class GradTape;
  friend struct OpAccess;
  struct Impl {
    Shape shape;
    std::vector<real> data;
    std::vector<real> grad;
    bool requires_grad = false;
    int node = -1;
    uint64_t tape_id = 0;
  };
  explicit Tensor(std::shared_ptr<Impl> i) : impl_(std::move(i)) {}
  std::shared_ptr<Impl> impl_;
};

/// Append-only record of differentiable operations. One tape per forward
/// pass; backward replays the records newest-first exactly once, accumulating
/// gradients additively into every reachable input.
class GradTape {
 public:
  GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  const std::vector<int>& node_parents(int node) const;
  bool backward_done() const { return backward_done_; }

  /// loss must be a scalar recorded on this tape. Callable once.
  void backward(const Tensor& loss);

 private:
  friend struct OpAccess;
  struct Node {
    std::vector<int> parents;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  uint64_t id_;  // never reused, so stale tensors cannot alias a newer tape
  bool backward_done_ = false;
};

/// Makes a tape the active recording target for the current thread. Ops
/// record onto the active tape when any input requires a gradient; without an
/// active tape they only compute values.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* prev_;
};

GradTape* active_tape();

// Elementwise and linear algebra. All ops validate shapes and throw
// std::invalid_argument on mismatch.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise (Hadamard) product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, real v);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& s);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Network ops. Images are NCHW, kernels OIHW.
Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad);
Tensor batchnorm_inference(const Tensor& x, const Tensor& gamma,
                           const Tensor& beta, const Tensor& running_mean,
                           const Tensor& running_var, real eps = 1e-5);
/// Normalizes by batch statistics and folds them into the running buffers
/// (in-place side effect) with the given momentum.
Tensor batchnorm_training(const Tensor& x, const Tensor& gamma,
                          const Tensor& beta, Tensor& running_mean,
                          Tensor& running_var, real momentum = 0.1,
                          real eps = 1e-5);
Tensor global_avg_pool(const Tensor& x);
/// y[n,c,h,w] = x[n,c,h,w] * s[c].
Tensor channel_scale(const Tensor& x, const Tensor& s);

// Rows, reductions and small dense algebra used by the classifier heads.
Tensor l2_normalize(const Tensor& x);
Tensor class_means(const Tensor& emb, const std::vector<int>& labels, int way);
Tensor select_rows(const Tensor& m, const std::vector<int>& rows);
Tensor sub_row(const Tensor& m, const Tensor& row);
Tensor row_sums(const Tensor& m);
Tensor stack_cols(const std::vector<Tensor>& cols);
Tensor trace(const Tensor& a);
/// a + coeff * s * I for square a and scalar s.
Tensor add_scaled_identity(const Tensor& a, const Tensor& s, real coeff);
/// Dense inverse by partial-pivot elimination; throws on singular input.
Tensor mat_inverse(const Tensor& a);
/// Mean cross entropy of row-softmax against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<int>& labels);
/// Value-only row softmax (not recorded).
std::vector<real> softmax_rows(const Tensor& logits);
/// Value-only argmax per row.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace tsa
