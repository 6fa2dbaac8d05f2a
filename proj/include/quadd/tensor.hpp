#pragma once

// Dense row-major tensors of doubles with a define-by-run reverse-mode tape.
//
// Every operation whose operands require a gradient appends a record to the
// calling thread's tape. backward() walks that tape in reverse. Tapes are
// thread_local, so independent workers never share autodiff state.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace quadd {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool is_leaf = true;
};
}  // namespace detail

class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return impl_->data.size(); }
  bool empty() const { return impl_->data.empty(); }

  std::span<const double> data() const { return impl_->data; }
  // In-place mutation is only meaningful on leaves (parameter updates).
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Zeros when no gradient has been accumulated yet.
  std::vector<double> grad() const;
  void zero_grad() { impl_->grad.clear(); }

  Tensor detach() const;
  bool same_node(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// grad_in[i] is null when operand i does not require a gradient.
using BackwardRule =
    std::function<void(std::span<const double> grad_out, std::span<double* const> grad_in)>;

class Tape {
 public:
  struct Record {
    std::string op;
    std::vector<std::shared_ptr<detail::TensorImpl>> inputs;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardRule rule;
  };

  static Tape& current();

  void reset() { records_.clear(); }
  std::size_t size() const { return records_.size(); }
  bool recording() const { return enabled_; }

  void push(Record record) { records_.push_back(std::move(record)); }
  void backward(const Tensor& loss);

 private:
  friend class NoGradGuard;
  friend class TapeScope;
  std::vector<Record> records_;
  bool enabled_ = true;
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Gives the enclosed code a fresh tape and restores the outer one on exit,
// so nested training loops can reset freely.
class TapeScope {
 public:
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  std::vector<Tape::Record> saved_;
  bool saved_enabled_;
};

// Populates grad() of every requires_grad leaf reachable from the scalar
// loss. Leaf gradients accumulate across calls until zero_grad().
void backward(const Tensor& loss);

// Records `output` as the result of `op` when any input requires a gradient.
Tensor record(std::string op, std::vector<Tensor> inputs, Tensor output, BackwardRule rule);

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// Same shape, or b's shape equal to the trailing axes of a (bias broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
// Row-wise softmax of a 2-D tensor.
Tensor softmax(const Tensor& logits);
// Mean cross-entropy of [N, C] logits against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
// Sum of squared differences.
Tensor squared_error(const Tensor& a, const Tensor& b);
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
// 1 where a > 0, else 0. Constant: carries no gradient.
Tensor relu_mask(const Tensor& a);

enum class OpKind {
  matmul,
  add,
  mul,
  relu,
  tanh,
  mean,
  sum,
  softmax_cross_entropy,
  squared_error,
  cosine_similarity,
};

// Uniform dispatch. `mean` reduces axis 0. For softmax_cross_entropy the
// second operand holds the integer labels as reals.
Tensor forward_op(OpKind kind, std::span<const Tensor> operands);

// Forward runs with recording disabled; backward replaces autodiff of it.
// backward_fn must return one gradient per input with the input's shape.
using CustomForward = std::function<Tensor(std::span<const Tensor> inputs)>;
using CustomBackward = std::function<std::vector<Tensor>(
    const Tensor& grad_out, std::span<const Tensor> inputs, const Tensor& output)>;
Tensor custom_grad(const CustomForward& forward_fn, const CustomBackward& backward_fn,
                   std::vector<Tensor> inputs);

}  // namespace quadd
