#pragma once

#include "detkd/geometry.hpp"
#include "detkd/models.hpp"
#include "detkd/rng.hpp"
#include "detkd/tensor.hpp"

#include <deque>
#include <vector>

namespace detkd {

struct CkdConfig {
  double gamma = 0.2;          // critic temperature (the value is a project choice)
  int max_negatives = 256;     // K, negatives per anchor
  int queue_capacity = 1024;   // K_q
  double iou_threshold = 0.5;
  bool filter_cross_image = false;  // also IoU-screen candidates from other images
  int proj_dim = 8;
};

/// Bounded FIFO of detached teacher representations with their box and
/// image of origin. Oldest entries leave first once capacity is reached.
class MemoryQueue {
 public:
  struct Entry {
    std::vector<double> rep;
    int image_id = 0;
    Box box;
  };

  explicit MemoryQueue(std::size_t capacity) : capacity_(capacity) {}

  void push(Entry entry);
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Entry& at(std::size_t i) const { return entries_[i]; }

 private:
  std::size_t capacity_;
  std::deque<Entry> entries_;
};

/// One anchor of the contrastive loss: tracked student representation,
/// detached teacher positive, detached teacher negatives.
struct ContrastivePair {
  Tensor student_rep;
  Tensor teacher_rep;
  std::vector<Tensor> negatives;
};

/// Batch-side view of an anchor used when assembling negatives.
struct BatchRep {
  std::vector<double> teacher_rep;
  int image_id = 0;
  Box box;
};

/// g(r_s, r_t) = exp(cos(f(r_s), f(r_t)) / gamma); bounded in
/// [e^{-1/gamma}, e^{1/gamma}].
Tensor critic(Tape* tape, const Tensor& student_rep, const Tensor& teacher_rep,
              const ProjectionHead& proj, double gamma);

/// Negatives for one anchor: the other batch teacher representations plus
/// the queue contents, minus candidates excluded by the overlap rule;
/// capped at max_negatives by a seeded subsample. Never returns the
/// anchor's own positive.
std::vector<Tensor> gather_negatives(std::size_t anchor_index, const std::vector<BatchRep>& batch,
                                     const MemoryQueue& queue, const CkdConfig& cfg, Rng& rng);

/// InfoNCE over anchors: mean of -log(g_pos / (g_pos + sum g_neg)).
/// Empty anchor list gives 0.
Tensor infonce_loss(Tape* tape, const std::vector<ContrastivePair>& pairs,
                    const ProjectionHead& proj, double gamma);

/// log(K) - loss, in nats. Requires K >= 1.
double mi_lower_bound(double loss_value, int num_negatives);

}  // namespace detkd
