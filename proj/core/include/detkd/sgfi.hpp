#pragma once

#include "detkd/geometry.hpp"
#include "detkd/models.hpp"
#include "detkd/tensor.hpp"

#include <vector>

namespace detkd {

struct SgfiConfig {
  double tau_init = 1.0;  // must be positive; stored as log(tau)
  int key_dim = 16;
  int roi_size = 4;
  bool positives_only = true;
};

/// Trainable pieces of semantic-guided imitation: the per-level adaptation
/// maps, the shared embedding net, and the temperature. tau is kept
/// strictly positive by learning its log.
struct SgfiComponents {
  AdaptationMap adap;
  EmbedNet embed;
  Param log_tau;

  SgfiComponents() = default;
  SgfiComponents(const std::string& prefix, int student_channels, int teacher_channels,
                 int student_levels, const SgfiConfig& cfg, Rng& rng);

  /// tau as a tracked (or detached) scalar tensor, always > 0.
  Tensor tau(Tape* tape) const;

  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;
};

/// softmax(student_keys . teacher_key / tau): one weight per student
/// level, nonnegative, summing to 1. `student_keys` is [L x key_dim],
/// `teacher_key` is [key_dim], `tau` a positive scalar tensor.
Tensor compute_match_weights(const Tensor& student_keys, const Tensor& teacher_key,
                             const Tensor& tau);

/// Cross-level imitation loss: for each proposal, the teacher feature from
/// its assigned level is matched against the weight-aggregated adapted
/// student features from every level; the loss is the mean MSE over
/// proposals. Empty proposal set gives 0. Teacher features must arrive
/// detached.
Tensor sgfi_loss(Tape* tape, const std::vector<LabeledProposal>& proposals,
                 const FeaturePyramid& student_pyramid, const FeaturePyramid& teacher_pyramid,
                 const SgfiComponents& comps, const SgfiConfig& cfg);

/// Binary imitation mask, one grid per pyramid level.
struct ImitationMask {
  std::vector<Tensor> levels;  // values in {0, 1}, shape [H x W x 1]
  double positive_count() const;
};

enum class MaskKind { whole, gt_box };

/// `whole` is all ones; `gt_box` marks cells covered by any ground-truth
/// box projected through each level's stride. The same rule applies to
/// every level.
ImitationMask make_masks(const std::vector<LabeledProposal>& gts,
                         const FeaturePyramid& reference_pyramid, MaskKind kind);

/// Masked per-element imitation baseline, 1/(2 Np) sum of masked squared
/// differences of adapted student vs teacher grids. Homogeneous pyramids
/// only (equal level counts); an all-zero mask gives 0.
Tensor masked_imitation_loss(Tape* tape, const FeaturePyramid& student_pyramid,
                             const FeaturePyramid& teacher_pyramid, const ImitationMask& mask,
                             const AdaptationMap& adap);

}  // namespace detkd
