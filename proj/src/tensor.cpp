#include "least/tensor.hpp"

#include <sstream>

namespace least {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

static std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> values,
                                             bool requires_grad) {
  const int64_t n = shape_numel(shape);
  for (int64_t d : shape) {
    if (d <= 0) throw DimensionError("tensor extent must be positive, got shape " + shape_str(shape));
  }
  if (n != static_cast<int64_t>(values.size())) {
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(n) +
                         " values, got " + std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return impl;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0),
                          requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<double>(static_cast<size_t>(n), value),
                          requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_impl({1}, {value}, requires_grad));
}

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) {
    throw UsageError("tensor has no gradient; run backward() first");
  }
  return impl_->grad;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw UsageError("item() requires a scalar tensor, got shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape* Tape::current() { return g_current_tape; }

bool grad_enabled() { return g_current_tape != nullptr; }

Tape::Scope::Scope(Tape& tape) : prev_(g_current_tape) { g_current_tape = &tape; }
Tape::Scope::~Scope() { g_current_tape = prev_; }

int64_t Tape::assign_id(const std::shared_ptr<TensorImpl>& t) {
  if (t->node_id < 0) t->node_id = next_id_++;
  return t->node_id;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  // Grads of op outputs are scratch for one traversal; only leaf tensors
  // accumulate across repeated backward calls.
  for (OpRecord& op : ops_) {
    for (auto& out : op.outputs) {
      if (!out->grad.empty()) out->grad.assign(out->data.size(), 0.0);
    }
  }
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    it->backward();
  }
}

}  // namespace least
