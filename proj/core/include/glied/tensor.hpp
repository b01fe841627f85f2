#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "glied/rng.hpp"

namespace glied {

using Shape = std::vector<int>;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same length as data once used
  bool requires_grad = false;
  bool on_tape = false;  // set when a recorded op produced this tensor

  int size() const { return static_cast<int>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense f64 tensor with shared storage. Copies are shallow; the same
// underlying buffer can be registered under several names, which is how
// weight sharing between attention stages is expressed.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_data(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng);
  // Uniform Glorot for a rows x cols matrix.
  static Tensor glorot(int rows, int cols, Rng& rng);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int axis) const { return impl_->shape[static_cast<size_t>(axis)]; }
  int size() const { return impl_->size(); }

  double value() const;            // rank-0 / single-element access
  double at(int i) const;          // rank-1
  double at(int i, int j) const;   // rank-2

  std::span<const double> data() const { return impl_->data; }
  // Direct mutable access to the storage. Used by the optimizer, the
  // checkpoint loader and the finite-difference tests; forward ops never
  // mutate their inputs.
  std::vector<double>& raw_data() { return impl_->data; }

  Tensor& set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
  }
  bool requires_grad() const { return impl_->requires_grad; }
  // True when gradients should flow through this tensor.
  bool tracked() const { return impl_->requires_grad || impl_->on_tape; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::vector<double>& raw_grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  // Deep copy, detached from any tape.
  Tensor clone() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl) { return Tensor(std::move(impl)); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape. Constructing one makes it the active tape for the
// current thread; ops record themselves in execution order, which is a
// topological order by construction. Destruction restores the previous
// tape. A tape and the tensors recorded on it belong to one thread.
class GradientTape {
 public:
  struct Entry {
    const char* op;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    // Reads output->grad, accumulates into input grads.
    std::function<void()> backward;
  };

  GradientTape();
  ~GradientTape();
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  static GradientTape* active();

  void record(Entry entry);
  size_t size() const { return entries_.size(); }

  // Seeds d loss / d loss = 1 and walks the tape once in reverse order.
  // Gradients accumulate: calling backward twice without zeroing doubles
  // every leaf gradient.
  void run_backward(const Tensor& loss);

 private:
  std::vector<Entry> entries_;
  GradientTape* previous_ = nullptr;
};

// Backward through the active tape. The loss must be a scalar produced on
// the active tape.
void backward(const Tensor& loss);

// ---- differentiable ops -------------------------------------------------
// Shapes must match exactly; the only broadcast allowed is scalar-vs-tensor.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, double b);
Tensor relu(const Tensor& x);
Tensor transpose(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis);
// keep[i] == 0 positions are replaced by `value`; gradient flows only
// through kept positions.
Tensor masked_fill(const Tensor& x, const std::vector<uint8_t>& keep, double value);
Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon);
// Inverted dropout: survivors scaled by 1/(1-rate) at train time, exact
// identity in eval mode.
Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor slice_cols(const Tensor& x, int start, int len);
// Row t of the result is log softmax(logits[t])[ids[t]].
Tensor token_log_probs(const Tensor& logits, const std::vector<int>& ids);
// Mean negative log-likelihood over non-pad targets.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, int pad_id);

}  // namespace glied
