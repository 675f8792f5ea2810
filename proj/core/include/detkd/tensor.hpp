#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

namespace detkd {

class Tape;

/// Dense row-major array of 64-bit floats.
///
/// A tensor is either detached (plain data, `node < 0`) or tracked on a
/// gradient tape (`tape` and `node` identify the recorded operation that
/// produced it). Detached tensors flow through the same operations as
/// tracked ones; an operation whose inputs are all detached produces a
/// detached result and records nothing. This is how frozen teachers run:
/// their parameters are never watched, so their entire forward pass stays
/// off the tape.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() = default;
  Tensor(std::vector<int> shape_in, std::vector<double> data_in);

  static Tensor zeros(std::vector<int> shape_in);
  static Tensor full(std::vector<int> shape_in, double value);
  static Tensor scalar(double value);

  std::int64_t size() const;
  int dim() const { return static_cast<int>(shape.size()); }
  bool tracked() const { return node >= 0; }

  /// Same values, off the tape.
  Tensor detached() const;

  /// Value of a single-element tensor.
  double item() const;

  bool all_finite() const;
};

std::int64_t shape_size(const std::vector<int>& shape);

/// Named persistent parameter. Storage lives here across training steps;
/// each step's tape watches it to obtain a tracked leaf.
struct Param {
  std::string name;
  Tensor value;

  Param() = default;
  Param(std::string name_in, Tensor value_in);
};

/// Reverse-mode gradient tape.
///
/// Operations append nodes in execution order, so node inputs always
/// precede the node itself and a single reverse sweep over the node list
/// is a valid topological traversal. Each node carries the ids of its
/// tracked inputs and a backward rule that routes the upstream gradient
/// into the input accumulators.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const std::vector<double>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Tracked leaf holding a copy of the given values.
  Tensor leaf(const Tensor& value);

  /// Tracked leaf for a persistent parameter; at most one per param per
  /// tape, so gradients from every use accumulate in one place.
  Tensor watch(const Param& param);

  /// Appends a node. `inputs` lists tracked input node ids (detached
  /// operands are captured inside `backward` as constants).
  Tensor record(std::vector<int> shape, std::vector<double> data,
                std::vector<int> inputs, BackwardFn backward);

  /// Reverse accumulation from a scalar tracked loss.
  void backward(const Tensor& loss);

  /// Gradient of the last backward() w.r.t. a tracked tensor. Zero if no
  /// gradient reached it.
  Tensor grad(const Tensor& tracked) const;

  /// Gradient w.r.t. a watched parameter; zero if the loss does not
  /// depend on it.
  Tensor grad(const Param& param) const;

  /// Gradient accumulator of a node, allocated on first use. Backward
  /// rules add into this.
  std::vector<double>& accum(int node);

  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<int>& node_inputs(std::size_t node) const;
  bool ran_backward() const { return ran_backward_; }

 private:
  struct Node {
    std::vector<int> inputs;
    BackwardFn backward;
    std::vector<int> shape;
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<const Param*, int> watched_;
  bool ran_backward_ = false;
};

}  // namespace detkd
