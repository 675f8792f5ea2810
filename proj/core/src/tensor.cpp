#include "detkd/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace detkd {

std::int64_t shape_size(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor extents must be positive");
    n *= e;
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape_in, std::vector<double> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("tensor data length does not match shape");
  }
}

Tensor Tensor::zeros(std::vector<int> shape_in) {
  const auto n = shape_size(shape_in);
  return Tensor(std::move(shape_in), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::full(std::vector<int> shape_in, double value) {
  const auto n = shape_size(shape_in);
  return Tensor(std::move(shape_in), std::vector<double>(static_cast<std::size_t>(n), value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

std::int64_t Tensor::size() const { return static_cast<std::int64_t>(data.size()); }

Tensor Tensor::detached() const {
  Tensor t;
  t.shape = shape;
  t.data = data;
  return t;
}

double Tensor::item() const {
  if (data.size() != 1) throw std::invalid_argument("item() requires a single-element tensor");
  return data[0];
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Param::Param(std::string name_in, Tensor value_in)
    : name(std::move(name_in)), value(std::move(value_in)) {
  value.tape = nullptr;
  value.node = -1;
}

Tensor Tape::leaf(const Tensor& value) {
  return record(value.shape, value.data, {}, nullptr);
}

Tensor Tape::watch(const Param& param) {
  auto it = watched_.find(&param);
  if (it != watched_.end()) {
    Tensor t;
    t.shape = nodes_[static_cast<std::size_t>(it->second)].shape;
    t.data = param.value.data;
    t.tape = this;
    t.node = it->second;
    return t;
  }
  Tensor t = leaf(param.value);
  watched_.emplace(&param, t.node);
  return t;
}

Tensor Tape::record(std::vector<int> shape, std::vector<double> data,
                    std::vector<int> inputs, BackwardFn backward) {
  for (int in : inputs) {
    if (in < 0 || in >= static_cast<int>(nodes_.size())) {
      throw std::invalid_argument("node input does not precede it on the tape");
    }
  }
  Node node;
  node.inputs = std::move(inputs);
  node.backward = std::move(backward);
  node.shape = shape;
  nodes_.push_back(std::move(node));
  grads_.emplace_back();

  Tensor t(std::move(shape), std::move(data));
  t.tape = this;
  t.node = static_cast<int>(nodes_.size()) - 1;
  return t;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.tracked() || loss.tape != this) {
    throw std::invalid_argument("backward() requires a tensor tracked on this tape");
  }
  if (loss.size() != 1) {
    throw std::invalid_argument("backward() requires a scalar loss");
  }
  for (auto& g : grads_) g.clear();
  accum(loss.node).assign(1, 1.0);
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    const auto idx = static_cast<std::size_t>(i);
    if (grads_[idx].empty()) continue;
    if (nodes_[idx].backward) nodes_[idx].backward(*this, grads_[idx]);
  }
  ran_backward_ = true;
}

Tensor Tape::grad(const Tensor& tracked) const {
  if (!tracked.tracked() || tracked.tape != this) {
    throw std::invalid_argument("grad() requires a tensor tracked on this tape");
  }
  const auto idx = static_cast<std::size_t>(tracked.node);
  if (grads_[idx].empty()) return Tensor::zeros(tracked.shape);
  return Tensor(tracked.shape, grads_[idx]);
}

Tensor Tape::grad(const Param& param) const {
  auto it = watched_.find(&param);
  if (it == watched_.end()) return Tensor::zeros(param.value.shape);
  const auto idx = static_cast<std::size_t>(it->second);
  if (grads_[idx].empty()) return Tensor::zeros(param.value.shape);
  return Tensor(param.value.shape, grads_[idx]);
}

std::vector<double>& Tape::accum(int node) {
  auto& g = grads_.at(static_cast<std::size_t>(node));
  if (g.empty()) {
    g.assign(static_cast<std::size_t>(shape_size(nodes_[static_cast<std::size_t>(node)].shape)), 0.0);
  }
  return g;
}

const std::vector<int>& Tape::node_inputs(std::size_t node) const {
  return nodes_.at(node).inputs;
}

}  // namespace detkd
