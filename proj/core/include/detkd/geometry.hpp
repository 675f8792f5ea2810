#pragma once

#include "detkd/rng.hpp"

#include <optional>
#include <vector>

namespace detkd {

/// Background label in the 0..C class layout.
inline constexpr int kBackgroundLabel = 0;

/// Axis-aligned box in input-grid units. Valid boxes have x1 < x2, y1 < y2.
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const { return x1 < x2 && y1 < y2; }
  bool operator==(const Box&) const = default;
};

/// Intersection over union in [0, 1]; throws on degenerate boxes.
double iou(const Box& a, const Box& b);

/// Pyramid-level assignment parameters: level = clamp(floor(k0 +
/// log2(sqrt(area)/s0)), 0, num_levels-1).
struct LevelAssign {
  double base_scale = 8.0;  // s0, grid units
  int base_level = 0;       // k0
};

int assign_pyramid_level(const Box& box, int num_levels, const LevelAssign& la);

struct LabeledProposal {
  Box box;
  int label = kBackgroundLabel;      // 0 = background, 1..C = object classes
  std::optional<int> gt_index;       // present iff label != background
  int image_id = 0;
  int assigned_level = 0;            // local index into the teacher pyramid
};

struct ProposalSample {
  std::vector<LabeledProposal> proposals;
  bool negatives_short = false;  // fewer negatives than requested
};

struct SamplerContext {
  double grid_w = 64.0;
  double grid_h = 64.0;
  int num_levels = 4;
  LevelAssign level_assign;
};

/// Positives are jittered copies of ground-truth boxes (label and gt link
/// kept); negatives are random boxes with IoU < 0.5 to every ground truth.
/// Bounded retries per negative; a degenerate scene yields fewer negatives
/// and sets `negatives_short`.
ProposalSample sample_proposals(const std::vector<LabeledProposal>& gts, int n_total,
                                double pos_fraction, double jitter_scale, Rng& rng,
                                const SamplerContext& ctx);

/// Labels predicted boxes by IoU against ground truths (>= threshold puts
/// the box in the matched gt's class) and samples positives:negatives at
/// 1:neg_ratio; insufficient negative candidates are all kept. When
/// `source_indices` is given it receives, per returned proposal, the index
/// of the predicted box it came from.
std::vector<LabeledProposal> extract_rois_from_dense(const std::vector<Box>& pred_boxes,
                                                     const std::vector<LabeledProposal>& gts,
                                                     double iou_threshold, int neg_ratio,
                                                     Rng& rng, const SamplerContext& ctx,
                                                     std::vector<std::size_t>* source_indices = nullptr);

/// Negative-exclusion rule shared with contrastive sampling: a candidate
/// is removed when it comes from the anchor's image and either overlaps it
/// above the threshold or is the exact same box (exact duplicates of the
/// anchor are never valid negatives, at any threshold).
bool excluded_as_negative(const Box& anchor_box, int anchor_image, const Box& cand_box,
                          int cand_image, double iou_threshold);

std::vector<LabeledProposal> filter_negative_candidates(const LabeledProposal& anchor,
                                                        const std::vector<LabeledProposal>& candidates,
                                                        double iou_threshold);

}  // namespace detkd
