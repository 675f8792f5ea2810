#include "detkd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace detkd {

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("iou of degenerate box");
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1;
  const double ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

int assign_pyramid_level(const Box& box, int num_levels, const LevelAssign& la) {
  if (num_levels < 1) throw std::invalid_argument("num_levels must be >= 1");
  if (box.area() <= 0.0) throw std::invalid_argument("level assignment of nonpositive-area box");
  const double raw =
      std::floor(la.base_level + std::log2(std::sqrt(box.area()) / la.base_scale));
  const int k = static_cast<int>(raw);
  return std::clamp(k, 0, num_levels - 1);
}

namespace {

Box clip_to_grid(Box b, const SamplerContext& ctx) {
  b.x1 = std::clamp(b.x1, 0.0, ctx.grid_w - 1.0);
  b.y1 = std::clamp(b.y1, 0.0, ctx.grid_h - 1.0);
  b.x2 = std::clamp(b.x2, b.x1 + 1.0, ctx.grid_w);
  b.y2 = std::clamp(b.y2, b.y1 + 1.0, ctx.grid_h);
  return b;
}

double max_iou_to_gts(const Box& b, const std::vector<LabeledProposal>& gts) {
  double best = 0.0;
  for (const auto& gt : gts) best = std::max(best, iou(b, gt.box));
  return best;
}

}  // namespace

ProposalSample sample_proposals(const std::vector<LabeledProposal>& gts, int n_total,
                                double pos_fraction, double jitter_scale, Rng& rng,
                                const SamplerContext& ctx) {
  if (gts.empty()) throw std::invalid_argument("sample_proposals requires >= 1 ground truth");
  ProposalSample out;
  const int n_pos = static_cast<int>(std::lround(n_total * pos_fraction));
  const int n_neg = n_total - n_pos;

  for (int i = 0; i < n_pos; ++i) {
    const auto& gt = gts[rng.uniform_index(gts.size())];
    Box b = gt.box;
    const double jw = jitter_scale * gt.box.width();
    const double jh = jitter_scale * gt.box.height();
    b.x1 += rng.uniform(-jw, jw);
    b.x2 += rng.uniform(-jw, jw);
    b.y1 += rng.uniform(-jh, jh);
    b.y2 += rng.uniform(-jh, jh);
    b = clip_to_grid(b, ctx);
    LabeledProposal p;
    p.box = b;
    p.label = gt.label;
    p.gt_index = gt.gt_index;
    p.image_id = gt.image_id;
    p.assigned_level = assign_pyramid_level(b, ctx.num_levels, ctx.level_assign);
    out.proposals.push_back(p);
  }

  const int kMaxRetries = 100;
  const int image_id = gts.front().image_id;
  for (int i = 0; i < n_neg; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
      const double w = rng.uniform(4.0, ctx.grid_w * 0.6);
      const double h = rng.uniform(4.0, ctx.grid_h * 0.6);
      const double x = rng.uniform(0.0, ctx.grid_w - w);
      const double y = rng.uniform(0.0, ctx.grid_h - h);
      Box b{x, y, x + w, y + h};
      if (max_iou_to_gts(b, gts) >= 0.5) continue;
      LabeledProposal p;
      p.box = b;
      p.label = kBackgroundLabel;
      p.image_id = image_id;
      p.assigned_level = assign_pyramid_level(b, ctx.num_levels, ctx.level_assign);
      out.proposals.push_back(p);
      placed = true;
      break;
    }
    if (!placed) out.negatives_short = true;
  }
  return out;
}

std::vector<LabeledProposal> extract_rois_from_dense(const std::vector<Box>& pred_boxes,
                                                     const std::vector<LabeledProposal>& gts,
                                                     double iou_threshold, int neg_ratio,
                                                     Rng& rng, const SamplerContext& ctx,
                                                     std::vector<std::size_t>* source_indices) {
  std::vector<LabeledProposal> positives, neg_candidates;
  std::vector<std::size_t> pos_src, neg_src;
  const int image_id = gts.empty() ? 0 : gts.front().image_id;

  for (std::size_t i = 0; i < pred_boxes.size(); ++i) {
    const Box& b = pred_boxes[i];
    if (!b.valid()) continue;
    double best = 0.0;
    const LabeledProposal* best_gt = nullptr;
    for (const auto& gt : gts) {
      const double v = iou(b, gt.box);
      if (v > best) {
        best = v;
        best_gt = &gt;
      }
    }
    LabeledProposal p;
    p.box = b;
    p.image_id = image_id;
    p.assigned_level = assign_pyramid_level(b, ctx.num_levels, ctx.level_assign);
    if (best_gt && best >= iou_threshold) {
      p.label = best_gt->label;
      p.gt_index = best_gt->gt_index;
      positives.push_back(p);
      pos_src.push_back(i);
    } else {
      p.label = kBackgroundLabel;
      neg_candidates.push_back(p);
      neg_src.push_back(i);
    }
  }

  const std::size_t want_neg = positives.size() * static_cast<std::size_t>(neg_ratio);
  std::vector<LabeledProposal> out = positives;
  std::vector<std::size_t> out_src = pos_src;
  if (neg_candidates.size() <= want_neg) {
    out.insert(out.end(), neg_candidates.begin(), neg_candidates.end());
    out_src.insert(out_src.end(), neg_src.begin(), neg_src.end());
  } else {
    for (std::size_t idx : rng.sample_indices(neg_candidates.size(), want_neg)) {
      out.push_back(neg_candidates[idx]);
      out_src.push_back(neg_src[idx]);
    }
  }
  if (source_indices) *source_indices = std::move(out_src);
  return out;
}

bool excluded_as_negative(const Box& anchor_box, int anchor_image, const Box& cand_box,
                          int cand_image, double iou_threshold) {
  if (cand_image != anchor_image) return false;
  if (cand_box == anchor_box) return true;
  return iou(anchor_box, cand_box) > iou_threshold;
}

std::vector<LabeledProposal> filter_negative_candidates(const LabeledProposal& anchor,
                                                        const std::vector<LabeledProposal>& candidates,
                                                        double iou_threshold) {
  std::vector<LabeledProposal> kept;
  kept.reserve(candidates.size());
  for (const auto& c : candidates) {
    if (!excluded_as_negative(anchor.box, anchor.image_id, c.box, c.image_id, iou_threshold)) {
      kept.push_back(c);
    }
  }
  return kept;
}

}  // namespace detkd
