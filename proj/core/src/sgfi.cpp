#include "detkd/sgfi.hpp"

#include <cmath>
#include <stdexcept>

namespace detkd {

SgfiComponents::SgfiComponents(const std::string& prefix, int student_channels,
                               int teacher_channels, int student_levels, const SgfiConfig& cfg,
                               Rng& rng)
    : adap(prefix + ".adap", student_channels, teacher_channels, student_levels, rng),
      embed(prefix + ".embed", teacher_channels, cfg.key_dim, cfg.roi_size, rng) {
  if (cfg.tau_init <= 0.0) throw std::invalid_argument("tau_init must be positive");
  log_tau = Param(prefix + ".log_tau", Tensor::scalar(std::log(cfg.tau_init)));
}

Tensor SgfiComponents::tau(Tape* tape) const {
  return exp(tape ? tape->watch(log_tau) : log_tau.value);
}

void SgfiComponents::collect(std::vector<Param*>& out) {
  adap.collect(out);
  embed.collect(out);
  out.push_back(&log_tau);
}

void SgfiComponents::collect(std::vector<const Param*>& out) const {
  adap.collect(out);
  embed.collect(out);
  out.push_back(&log_tau);
}

Tensor compute_match_weights(const Tensor& student_keys, const Tensor& teacher_key,
                             const Tensor& tau) {
  if (tau.item() <= 0.0) throw std::invalid_argument("match weights require tau > 0");
  if (student_keys.dim() != 2 || teacher_key.dim() != 1 ||
      student_keys.shape[1] != teacher_key.shape[0]) {
    throw std::invalid_argument("match weights require [L x k] keys and [k] teacher key");
  }
  const int num_levels = student_keys.shape[0];
  const int key_dim = student_keys.shape[1];
  Tensor scores = reshape(matmul(student_keys, reshape(teacher_key, {key_dim, 1})), {num_levels});
  return softmax(divide(scores, tau), 0);
}

Tensor sgfi_loss(Tape* tape, const std::vector<LabeledProposal>& proposals,
                 const FeaturePyramid& student_pyramid, const FeaturePyramid& teacher_pyramid,
                 const SgfiComponents& comps, const SgfiConfig& cfg) {
  if (comps.adap.num_levels() != student_pyramid.num_levels()) {
    throw std::invalid_argument("adaptation maps do not match student pyramid");
  }
  std::vector<const LabeledProposal*> used;
  for (const auto& p : proposals) {
    if (!cfg.positives_only || p.label != kBackgroundLabel) used.push_back(&p);
  }
  if (used.empty()) return Tensor::scalar(0.0);

  const int num_levels = student_pyramid.num_levels();
  Tensor tau = comps.tau(tape);
  std::vector<Tensor> per_proposal;
  per_proposal.reserve(used.size());

  for (const LabeledProposal* p : used) {
    Tensor teacher_feat =
        roi_align(teacher_pyramid, p->box, p->assigned_level, cfg.roi_size).detached();
    Tensor teacher_key = comps.embed.forward(tape, teacher_feat);

    std::vector<Tensor> adapted(static_cast<std::size_t>(num_levels));
    std::vector<Tensor> key_rows;
    key_rows.reserve(static_cast<std::size_t>(num_levels));
    for (int l = 0; l < num_levels; ++l) {
      Tensor feat = roi_align(student_pyramid, p->box, l, cfg.roi_size);
      adapted[static_cast<std::size_t>(l)] = comps.adap.apply(tape, l, feat);
      key_rows.push_back(comps.embed.forward(tape, adapted[static_cast<std::size_t>(l)]));
    }
    Tensor keys = reshape(concat(key_rows), {num_levels, cfg.key_dim});
    Tensor alpha = compute_match_weights(keys, teacher_key, tau);

    Tensor agg;
    for (int l = 0; l < num_levels; ++l) {
      Tensor term = mul(adapted[static_cast<std::size_t>(l)], slice(alpha, l, 1));
      agg = l == 0 ? term : add(agg, term);
    }
    per_proposal.push_back(mse(agg, teacher_feat));
  }

  Tensor total = per_proposal[0];
  for (std::size_t i = 1; i < per_proposal.size(); ++i) total = add(total, per_proposal[i]);
  return scale(total, 1.0 / static_cast<double>(per_proposal.size()));
}

double ImitationMask::positive_count() const {
  double n = 0.0;
  for (const Tensor& lvl : levels) {
    for (double v : lvl.data) n += v;
  }
  return n;
}

ImitationMask make_masks(const std::vector<LabeledProposal>& gts,
                         const FeaturePyramid& reference_pyramid, MaskKind kind) {
  ImitationMask mask;
  for (int l = 0; l < reference_pyramid.num_levels(); ++l) {
    const Tensor& lvl = reference_pyramid.levels[static_cast<std::size_t>(l)];
    const int h = lvl.shape[0], w = lvl.shape[1];
    Tensor m = Tensor::zeros({h, w, 1});
    if (kind == MaskKind::whole) {
      std::fill(m.data.begin(), m.data.end(), 1.0);
    } else {
      const double stride = reference_pyramid.stride(l);
      for (const auto& gt : gts) {
        const int x0 = std::max(0, static_cast<int>(std::floor(gt.box.x1 / stride)));
        const int y0 = std::max(0, static_cast<int>(std::floor(gt.box.y1 / stride)));
        const int x1 = std::min(w, static_cast<int>(std::ceil(gt.box.x2 / stride)));
        const int y1 = std::min(h, static_cast<int>(std::ceil(gt.box.y2 / stride)));
        for (int y = y0; y < y1; ++y) {
          for (int x = x0; x < x1; ++x) m.data[static_cast<std::size_t>(y * w + x)] = 1.0;
        }
      }
    }
    mask.levels.push_back(std::move(m));
  }
  return mask;
}

Tensor masked_imitation_loss(Tape* tape, const FeaturePyramid& student_pyramid,
                             const FeaturePyramid& teacher_pyramid, const ImitationMask& mask,
                             const AdaptationMap& adap) {
  if (student_pyramid.num_levels() != teacher_pyramid.num_levels()) {
    throw std::invalid_argument(
        "masked imitation requires aligned pyramids; heterogeneous pairs are unsupported");
  }
  if (static_cast<int>(mask.levels.size()) != student_pyramid.num_levels()) {
    throw std::invalid_argument("mask level count mismatch");
  }
  const double np = mask.positive_count();
  if (np == 0.0) return Tensor::scalar(0.0);

  Tensor total;
  for (int l = 0; l < student_pyramid.num_levels(); ++l) {
    const Tensor& s = student_pyramid.levels[static_cast<std::size_t>(l)];
    const Tensor& t = teacher_pyramid.levels[static_cast<std::size_t>(l)];
    const Tensor& m = mask.levels[static_cast<std::size_t>(l)];
    if (s.shape[0] != t.shape[0] || s.shape[1] != t.shape[1]) {
      throw std::invalid_argument("pyramid spatial shape mismatch");
    }
    // Expand the [h x w x 1] mask across channels.
    const int h = t.shape[0], w = t.shape[1], c = t.shape[2];
    Tensor mc = Tensor::zeros({h, w, c});
    for (int i = 0; i < h * w; ++i) {
      for (int ch = 0; ch < c; ++ch) {
        mc.data[static_cast<std::size_t>(i * c + ch)] = m.data[static_cast<std::size_t>(i)];
      }
    }
    Tensor diff = sub(adap.apply(tape, l, s), t.detached());
    Tensor term = sum(mul(mul(diff, diff), mc));
    total = l == 0 ? term : add(total, term);
  }
  return scale(total, 1.0 / (2.0 * np));
}

}  // namespace detkd
