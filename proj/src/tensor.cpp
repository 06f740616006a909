#include "vesselseg/tensor.hpp"

#include <sstream>

namespace vesselseg {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << dims[0] << "," << dims[1] << "," << dims[2] << "," << dims[3] << "," << dims[4] << ")";
  return os.str();
}

template <typename S>
Tensor<S>::Tensor(const Shape& shape, bool requires_grad)
    : Tensor(shape, Array::Zero(shape.numel()), requires_grad) {}

template <typename S>
Tensor<S>::Tensor(const Shape& shape, Array values, bool requires_grad) : s_(std::make_shared<Storage>()) {
  for (Index d : shape.dims)
    if (d < 0) throw ParameterError("negative tensor extent " + shape.str());
  if (values.size() != shape.numel())
    throw ParameterError("tensor data length does not match shape " + shape.str());
  s_->shape = shape;
  s_->value = std::move(values);
  set_requires_grad(requires_grad);
}

template <typename S>
S Tensor<S>::item() const {
  if (numel() != 1) throw ContractError("item() on a tensor with " + std::to_string(numel()) + " elements");
  return s_->value[0];
}

template <typename S>
void Tensor<S>::set_requires_grad(bool on) {
  s_->requires_grad = on;
  if (on && !has_grad()) s_->grad = Array::Zero(s_->value.size());
}

template <typename S>
typename Tensor<S>::Array& Tensor<S>::grad() const {
  if (!has_grad()) s_->grad = Array::Zero(s_->value.size());
  return s_->grad;
}

template <typename S>
void Tensor<S>::zero_grad() {
  if (has_grad()) s_->grad.setZero();
}

template <typename S>
Tensor<S> Tensor<S>::clone() const {
  return Tensor(s_->shape, s_->value);
}

template <typename S>
bool Tape<S>::tracks(std::initializer_list<const Tensor<S>*> inputs) const {
  if (!recording_) return false;
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename S>
void Tape<S>::record(std::string op, std::function<void()> backward) {
  entries_.push_back({std::move(op), std::move(backward)});
}

template <typename S>
std::vector<std::string> Tape<S>::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.push_back(e.op);
  return names;
}

template <typename S>
void Tape<S>::backward(const Tensor<S>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward needs a scalar loss");
  if (!loss.requires_grad()) throw ContractError("loss is not connected to any tensor requiring grad");
  loss.grad().setConstant(S(1));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
  entries_.clear();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace vesselseg
