#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "least/error.hpp"

namespace least {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches this node
  bool requires_grad = false;
  int64_t node_id = -1;  // assigned when first recorded on a tape

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

// Shared-handle tensor. All operations are functional: they allocate a fresh
// output buffer and never write into their inputs, so two distinct tensors
// never end up sharing storage. In-place mutation is reserved for the
// optimizer, which owns its parameters.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& raw_data() { return impl_->data; }  // optimizer/init only

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const;
  std::vector<double>& raw_grad() { return impl_->grad; }
  void zero_grad() {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  }

  double item() const;
  int64_t node_id() const { return impl_->node_id; }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
  std::shared_ptr<TensorImpl> impl_;
};

// Complex values as paired real/imaginary tensors; autodiff sees two real
// streams, which keeps every backward rule real-valued.
struct ComplexTensor {
  Tensor re;
  Tensor im;
};

// Reverse-mode tape. Operations append in execution order, so the list is
// already topologically sorted; backward walks it once in reverse.
class Tape {
public:
  struct OpRecord {
    std::vector<int64_t> input_ids;
    std::vector<int64_t> output_ids;
    std::function<void()> backward;
    std::vector<std::shared_ptr<TensorImpl>> keep_alive;
    std::vector<std::shared_ptr<TensorImpl>> outputs;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int64_t assign_id(const std::shared_ptr<TensorImpl>& t);
  void record(OpRecord op) { ops_.push_back(std::move(op)); }

  // Populates grad on every requires_grad tensor reachable from loss.
  // Accumulates on repeated calls.
  void backward(const Tensor& loss);

  void clear() {
    ops_.clear();
    next_id_ = 0;
  }
  size_t size() const { return ops_.size(); }

  static Tape* current();

  // RAII activation; ops record onto the innermost active tape.
  class Scope {
  public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

  private:
    Tape* prev_;
  };

private:
  std::vector<OpRecord> ops_;
  int64_t next_id_ = 0;
};

// True when an op with any grad-requiring input should be recorded.
bool grad_enabled();

}  // namespace least
