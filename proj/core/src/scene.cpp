#include "detkd/scene.hpp"

#include <cmath>
#include <stdexcept>

namespace detkd {

std::vector<std::vector<double>> class_signatures(int num_classes, int in_channels) {
  std::vector<std::vector<double>> sigs;
  sigs.reserve(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    Rng rng(0xC1A55u + static_cast<std::uint64_t>(c) * 7919u);
    std::vector<double> best;
    double best_worst_cos = 2.0;
    for (int attempt = 0; attempt < 64; ++attempt) {
      std::vector<double> v(static_cast<std::size_t>(in_channels));
      double norm = 0.0;
      for (auto& x : v) {
        x = rng.normal();
        norm += x * x;
      }
      norm = std::sqrt(norm);
      for (auto& x : v) x /= norm;
      double worst = 0.0;
      for (const auto& prev : sigs) {
        double cos = 0.0;
        for (std::size_t j = 0; j < v.size(); ++j) cos += v[j] * prev[j];
        worst = std::max(worst, std::fabs(cos));
      }
      if (worst < best_worst_cos) {
        best_worst_cos = worst;
        best = v;
      }
      if (best_worst_cos < 0.5) break;
    }
    sigs.push_back(std::move(best));
  }
  return sigs;
}

Scene generate_scene(const SceneParams& params, int image_id, Rng& rng,
                     const SamplerContext& ctx) {
  if (params.num_classes < 1 || params.in_channels < 1 || params.grid < 8) {
    throw std::invalid_argument("bad scene params");
  }
  const int g = params.grid;
  const int c_in = params.in_channels;
  const auto sigs = class_signatures(params.num_classes, c_in);

  Scene scene;
  scene.image_id = image_id;
  scene.grid = Tensor::zeros({g, g, c_in});

  const int n_objects =
      params.min_objects +
      static_cast<int>(rng.uniform_index(
          static_cast<std::uint64_t>(params.max_objects - params.min_objects + 1)));

  for (int k = 0; k < n_objects; ++k) {
    Box box;
    bool placed = false;
    for (int attempt = 0; attempt < 40; ++attempt) {
      const double w = rng.uniform(params.box_min, params.box_max);
      const double h = w * rng.uniform(0.75, 1.33);
      if (w >= g - 2 || h >= g - 2) continue;
      const double x = rng.uniform(1.0, g - w - 1.0);
      const double y = rng.uniform(1.0, g - h - 1.0);
      Box cand{x, y, x + w, y + h};
      bool overlaps = false;
      for (const auto& gt : scene.gts) {
        if (iou(cand, gt.box) > 0.3) {
          overlaps = true;
          break;
        }
      }
      if (overlaps) continue;
      box = cand;
      placed = true;
      break;
    }
    if (!placed) throw std::runtime_error("scene generation could not place an object box");

    const int label = 1 + static_cast<int>(rng.uniform_index(
                              static_cast<std::uint64_t>(params.num_classes)));
    const auto& sig = sigs[static_cast<std::size_t>(label - 1)];

    // Truncated Gaussian bump over the box, support 1.5x the box extent.
    const double cx = 0.5 * (box.x1 + box.x2);
    const double cy = 0.5 * (box.y1 + box.y2);
    const double sx = box.width() / 4.0;
    const double sy = box.height() / 4.0;
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - 0.75 * box.width())));
    const int x1 = std::min(g, static_cast<int>(std::ceil(cx + 0.75 * box.width())));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - 0.75 * box.height())));
    const int y1 = std::min(g, static_cast<int>(std::ceil(cy + 0.75 * box.height())));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        const double dx = (x + 0.5 - cx) / sx;
        const double dy = (y + 0.5 - cy) / sy;
        const double e = params.blob_amplitude * std::exp(-0.5 * (dx * dx + dy * dy));
        for (int ch = 0; ch < c_in; ++ch) {
          scene.grid.data[static_cast<std::size_t>((y * g + x) * c_in + ch)] +=
              e * sig[static_cast<std::size_t>(ch)];
        }
      }
    }

    LabeledProposal gt;
    gt.box = box;
    gt.label = label;
    gt.gt_index = k;
    gt.image_id = image_id;
    gt.assigned_level = assign_pyramid_level(box, ctx.num_levels, ctx.level_assign);
    scene.gts.push_back(gt);
  }

  if (params.noise_sigma > 0.0) {
    for (auto& v : scene.grid.data) v += rng.normal(0.0, params.noise_sigma);
  }
  return scene;
}

}  // namespace detkd
