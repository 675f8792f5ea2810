#pragma once

#include "detkd/geometry.hpp"
#include "detkd/rng.hpp"
#include "detkd/tensor.hpp"

#include <vector>

namespace detkd {

struct SceneParams {
  int grid = 64;
  int in_channels = 4;
  int num_classes = 5;
  int min_objects = 1;
  int max_objects = 3;
  double box_min = 14.0;  // box side range, grid units
  double box_max = 44.0;
  double noise_sigma = 0.05;
  double blob_amplitude = 2.0;
};

/// Synthesized input: one truncated Gaussian blob per object carrying its
/// class's channel signature, plus i.i.d. noise.
struct Scene {
  Tensor grid;  // [grid x grid x in_channels], detached
  std::vector<LabeledProposal> gts;
  int image_id = 0;
};

/// Fixed, well-separated per-class channel signatures (unit vectors).
std::vector<std::vector<double>> class_signatures(int num_classes, int in_channels);

/// Deterministic under the rng state; throws if objects cannot be placed
/// after bounded retries.
Scene generate_scene(const SceneParams& params, int image_id, Rng& rng,
                     const SamplerContext& ctx);

}  // namespace detkd
