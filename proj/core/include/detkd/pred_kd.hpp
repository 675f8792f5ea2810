#pragma once

#include "detkd/tensor.hpp"

#include <string>
#include <vector>

namespace detkd {

/// Index of the background column in C+1 class layouts. Fixed project
/// convention; the dense-logit conversion depends on it.
inline constexpr int kBackgroundIndex = 0;

/// Floor applied to probabilities before log.
inline constexpr double kProbFloor = 1e-12;

/// Cross-entropy of student scores under the teacher distribution,
/// -(1/N) sum P_t log P_s, rows averaged. Teacher scores arrive detached.
Tensor cls_kd_loss(const Tensor& teacher_scores, const Tensor& student_scores);

/// Mean over proposals of the coordinate-summed L1 gap between teacher and
/// student regressions for the ground-truth class. Inputs are [N x 4].
Tensor naive_reg_kd(const Tensor& teacher_reg, const Tensor& student_reg);

/// Class-aware localization loss: per proposal, regression differences of
/// every foreground class are summed weighted by the teacher's class
/// scores *before* the absolute value, so opposing class predictions may
/// cancel. teacher_fg_scores is [N x C], regs are [N x C x 4].
Tensor class_aware_reg_loss(const Tensor& teacher_fg_scores, const Tensor& teacher_reg,
                            const Tensor& student_reg);

/// Dense-logit conversion: row softmax over C+1, divide by the row max,
/// keep the foreground columns. Output values lie in (0, 1]; a row whose
/// softmax argmax is foreground has a 1 in that column.
Tensor convert_dense_logits(const Tensor& logits);

enum class PairMode { homogeneous, heterogeneous };

struct LossPart {
  std::string name;
  Tensor value;
  double weight = 1.0;
  bool homogeneous_only = false;
};

/// Weighted sum of the enabled parts. Parts flagged homogeneous_only
/// (raw-score classification KD, regression KD, head transfer) are
/// rejected in heterogeneous mode.
Tensor total_loss(const std::vector<LossPart>& parts, PairMode mode);

}  // namespace detkd
