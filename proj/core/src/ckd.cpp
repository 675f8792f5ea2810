#include "detkd/ckd.hpp"

#include <cmath>
#include <stdexcept>

namespace detkd {

void MemoryQueue::push(Entry entry) {
  if (capacity_ == 0) return;
  if (entries_.size() == capacity_) entries_.pop_front();
  entries_.push_back(std::move(entry));
}

Tensor critic(Tape* tape, const Tensor& student_rep, const Tensor& teacher_rep,
              const ProjectionHead& proj, double gamma) {
  if (gamma <= 0.0) throw std::invalid_argument("critic requires gamma > 0");
  Tensor ps = proj.apply(tape, student_rep);
  Tensor pt = proj.apply(tape, teacher_rep);
  return exp(scale(cosine_similarity(ps, pt), 1.0 / gamma));
}

std::vector<Tensor> gather_negatives(std::size_t anchor_index, const std::vector<BatchRep>& batch,
                                     const MemoryQueue& queue, const CkdConfig& cfg, Rng& rng) {
  const BatchRep& anchor = batch.at(anchor_index);

  auto excluded = [&](const Box& box, int image_id) {
    if (cfg.filter_cross_image && image_id != anchor.image_id) {
      return box == anchor.box || iou(anchor.box, box) > cfg.iou_threshold;
    }
    return excluded_as_negative(anchor.box, anchor.image_id, box, image_id, cfg.iou_threshold);
  };

  std::vector<const std::vector<double>*> candidates;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    if (j == anchor_index) continue;
    if (excluded(batch[j].box, batch[j].image_id)) continue;
    candidates.push_back(&batch[j].teacher_rep);
  }
  for (std::size_t j = 0; j < queue.size(); ++j) {
    const auto& e = queue.at(j);
    if (excluded(e.box, e.image_id)) continue;
    candidates.push_back(&e.rep);
  }

  std::vector<Tensor> out;
  const std::size_t want = static_cast<std::size_t>(cfg.max_negatives);
  auto as_tensor = [](const std::vector<double>& rep) {
    return Tensor({static_cast<int>(rep.size())}, rep);
  };
  if (candidates.size() <= want) {
    out.reserve(candidates.size());
    for (const auto* rep : candidates) out.push_back(as_tensor(*rep));
  } else {
    for (std::size_t idx : rng.sample_indices(candidates.size(), want)) {
      out.push_back(as_tensor(*candidates[idx]));
    }
  }
  return out;
}

Tensor infonce_loss(Tape* tape, const std::vector<ContrastivePair>& pairs,
                    const ProjectionHead& proj, double gamma) {
  if (gamma <= 0.0) throw std::invalid_argument("infonce requires gamma > 0");
  if (pairs.empty()) return Tensor::scalar(0.0);

  const double inv_gamma = 1.0 / gamma;
  Tensor total;
  bool first = true;
  for (const auto& pair : pairs) {
    Tensor ps = proj.apply(tape, pair.student_rep);
    std::vector<Tensor> scores;
    scores.reserve(pair.negatives.size() + 1);
    scores.push_back(scale(cosine_similarity(ps, proj.apply(tape, pair.teacher_rep)), inv_gamma));
    for (const Tensor& neg : pair.negatives) {
      scores.push_back(scale(cosine_similarity(ps, proj.apply(tape, neg)), inv_gamma));
    }
    Tensor all = concat(scores);
    // -log(e^{s0} / sum e^{s}) = log(sum e^{s}) - s0
    Tensor item = sub(log(sum(exp(all))), slice(all, 0, 1));
    total = first ? item : add(total, item);
    first = false;
  }
  return scale(total, 1.0 / static_cast<double>(pairs.size()));
}

double mi_lower_bound(double loss_value, int num_negatives) {
  if (num_negatives < 1) throw std::invalid_argument("mi bound requires K >= 1");
  return std::log(static_cast<double>(num_negatives)) - loss_value;
}

}  // namespace detkd
