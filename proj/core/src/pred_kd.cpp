#include "detkd/pred_kd.hpp"

#include "detkd/ops.hpp"

#include <stdexcept>

namespace detkd {

Tensor cls_kd_loss(const Tensor& teacher_scores, const Tensor& student_scores) {
  if (teacher_scores.shape != student_scores.shape || teacher_scores.dim() != 2) {
    throw std::invalid_argument("cls_kd_loss requires matching [n x c] scores");
  }
  const int n = teacher_scores.shape[0];
  Tensor ce = sum(mul(teacher_scores.detached(), log(clamp_min(student_scores, kProbFloor))));
  return scale(ce, -1.0 / static_cast<double>(n));
}

Tensor naive_reg_kd(const Tensor& teacher_reg, const Tensor& student_reg) {
  if (teacher_reg.shape != student_reg.shape || teacher_reg.dim() != 2 ||
      teacher_reg.shape[1] != 4) {
    throw std::invalid_argument("naive_reg_kd requires matching [n x 4] regressions");
  }
  const int n = teacher_reg.shape[0];
  return scale(sum(abs(sub(teacher_reg.detached(), student_reg))),
               1.0 / static_cast<double>(n));
}

Tensor class_aware_reg_loss(const Tensor& teacher_fg_scores, const Tensor& teacher_reg,
                            const Tensor& student_reg) {
  if (teacher_reg.shape != student_reg.shape || teacher_reg.dim() != 3 ||
      teacher_reg.shape[2] != 4) {
    throw std::invalid_argument("class_aware_reg_loss requires matching [n x c x 4] regressions");
  }
  const int n = teacher_reg.shape[0];
  const int c = teacher_reg.shape[1];
  if (teacher_fg_scores.dim() != 2 || teacher_fg_scores.shape[0] != n ||
      teacher_fg_scores.shape[1] != c) {
    throw std::invalid_argument("class_aware_reg_loss requires [n x c] teacher scores");
  }

  // Broadcast the per-class score across the 4 coordinates.
  Tensor w = Tensor::zeros({n, c, 4});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const double v = teacher_fg_scores.data[static_cast<std::size_t>(i) * c + j];
      for (int k = 0; k < 4; ++k) {
        w.data[static_cast<std::size_t>((i * c + j) * 4 + k)] = v;
      }
    }
  }

  Tensor weighted = mul(w, sub(teacher_reg.detached(), student_reg));
  // Sum over classes first (cancellation happens here), then |.| per
  // coordinate, summed over the 4 coordinates per proposal.
  std::vector<Tensor> per_proposal;
  per_proposal.reserve(static_cast<std::size_t>(n));
  Tensor flat = reshape(weighted, {n * c * 4});
  const Tensor ones_row({1, c}, std::vector<double>(static_cast<std::size_t>(c), 1.0));
  for (int i = 0; i < n; ++i) {
    Tensor block = reshape(slice(flat, static_cast<std::int64_t>(i) * c * 4, c * 4), {c, 4});
    Tensor summed = matmul(ones_row, block);  // [1 x 4]
    per_proposal.push_back(sum(abs(summed)));
  }
  Tensor total = per_proposal[0];
  for (std::size_t i = 1; i < per_proposal.size(); ++i) total = add(total, per_proposal[i]);
  return scale(total, 1.0 / static_cast<double>(n));
}

Tensor convert_dense_logits(const Tensor& logits) {
  if (logits.dim() != 2 || logits.shape[1] < 2) {
    throw std::invalid_argument("convert_dense_logits requires [n x (c+1)] logits");
  }
  const int n = logits.shape[0];
  const int c1 = logits.shape[1];
  Tensor p = softmax(logits, 1);
  Tensor flat = reshape(p, {n * c1});
  std::vector<Tensor> rows;
  rows.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tensor row = slice(flat, static_cast<std::int64_t>(i) * c1, c1);
    Tensor scaled = divide(row, reduce_max(row));
    // Foreground columns follow the background at kBackgroundIndex == 0.
    rows.push_back(slice(scaled, 1, c1 - 1));
  }
  return reshape(concat(rows), {n, c1 - 1});
}

Tensor total_loss(const std::vector<LossPart>& parts, PairMode mode) {
  Tensor total = Tensor::scalar(0.0);
  for (const auto& part : parts) {
    if (mode == PairMode::heterogeneous && part.homogeneous_only) {
      throw std::invalid_argument("loss part '" + part.name +
                                  "' is homogeneous-only and cannot join a heterogeneous total");
    }
    if (part.value.size() != 1) {
      throw std::invalid_argument("loss part '" + part.name + "' is not scalar");
    }
    total = add(total, scale(part.value, part.weight));
  }
  return total;
}

}  // namespace detkd
