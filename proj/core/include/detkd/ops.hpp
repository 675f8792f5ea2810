#pragma once

#include "detkd/tensor.hpp"

namespace detkd {

/// Denominator guard for norms and other near-zero divisions.
inline constexpr double kNormEpsilon = 1e-12;

// Elementwise. Binary ops require equal shapes; a single-element operand
// broadcasts. Mixing tracked and detached operands is allowed; detached
// operands act as constants.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // throws on nonpositive input
Tensor sqrt(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);

// Structure.
Tensor concat(const std::vector<Tensor>& parts);           // 1-D result
Tensor slice(const Tensor& a, std::int64_t start, std::int64_t len);  // flat, 1-D result
Tensor reshape(const Tensor& a, std::vector<int> shape);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);            // [m x k] . [k x n]
Tensor add_rowvec(const Tensor& mat, const Tensor& vec);    // [r x c] + [c]

/// Softmax along `axis`, computed with max subtraction.
Tensor softmax(const Tensor& a, int axis);

// Whole-tensor reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reduce_max(const Tensor& a);

// Metrics (compositions of the primitives above).
Tensor dot(const Tensor& a, const Tensor& b);
Tensor mse(const Tensor& a, const Tensor& b);
Tensor l1(const Tensor& a, const Tensor& b);  // mean absolute difference

/// dot(a,b) / max(|a||b|, kNormEpsilon); two zero vectors give 0.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

/// 2x2 average pool, stride 2, on an [H x W x C] grid with even H and W.
Tensor avg_pool2x2(const Tensor& a);

}  // namespace detkd
