#include "detkd/geometry.hpp"

#include <cmath>

#include <stdexcept>

#include "doctest.h"

using namespace detkd;

namespace {

Box random_box(Rng& rng, double extent) {
  const double w = rng.uniform(2.0, extent / 2.0);
  const double h = rng.uniform(2.0, extent / 2.0);
  const double x = rng.uniform(0.0, extent - w);
  const double y = rng.uniform(0.0, extent - h);
  return Box{x, y, x + w, y + h};
}

std::vector<LabeledProposal> two_gts() {
  LabeledProposal g0, g1;
  g0.box = {10, 10, 26, 26};
  g0.label = 1;
  g0.gt_index = 0;
  g0.image_id = 7;
  g1.box = {40, 36, 58, 60};
  g1.label = 3;
  g1.gt_index = 1;
  g1.image_id = 7;
  return {g0, g1};
}

}  // namespace

TEST_CASE("iou basics") {
  Box b{0, 0, 2, 2};
  CHECK(iou(b, b) == doctest::Approx(1.0));
  CHECK(iou(b, Box{5, 5, 7, 7}) == 0.0);
  CHECK(iou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0));
  CHECK_THROWS_AS(iou(b, Box{3, 3, 3, 3}), std::invalid_argument);
}

TEST_CASE("iou is symmetric and bounded") {
  Rng rng(21);
  for (int it = 0; it < 200; ++it) {
    const Box a = random_box(rng, 64);
    const Box b = random_box(rng, 64);
    const double v = iou(a, b);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(v == doctest::Approx(iou(b, a)).epsilon(1e-14));
  }
}

TEST_CASE("pyramid level assignment") {
  LevelAssign la;  // s0 = 8, k0 = 0
  const double s0 = la.base_scale;
  CHECK(assign_pyramid_level(Box{0, 0, s0, s0}, 4, la) == 0);
  CHECK(assign_pyramid_level(Box{0, 0, 4 * s0, 4 * s0}, 8, la) == 2);
  CHECK(assign_pyramid_level(Box{0, 0, 1.5, 1.5}, 4, la) == 0);    // clamped low
  CHECK(assign_pyramid_level(Box{0, 0, 500, 500}, 4, la) == 3);    // clamped high
  CHECK_THROWS_AS(assign_pyramid_level(Box{0, 0, 0, 0}, 4, la), std::invalid_argument);

  // scale-monotone
  Rng rng(4);
  for (int it = 0; it < 100; ++it) {
    const double side = rng.uniform(2.0, 60.0);
    const double bigger = side * rng.uniform(1.0, 2.0);
    const int a = assign_pyramid_level(Box{0, 0, side, side}, 4, la);
    const int b = assign_pyramid_level(Box{0, 0, bigger, bigger}, 4, la);
    CHECK(a <= b);
  }
}

TEST_CASE("sample_proposals") {
  const auto gts = two_gts();
  SamplerContext ctx;

  SUBCASE("zero jitter copies ground truths") {
    Rng rng(3);
    const auto sample = sample_proposals(gts, 8, 0.5, 0.0, rng, ctx);
    int pos = 0;
    for (const auto& p : sample.proposals) {
      if (p.label == kBackgroundLabel) continue;
      ++pos;
      bool matches = false;
      for (const auto& gt : gts) matches = matches || gt.box == p.box;
      CHECK(matches);
    }
    CHECK(pos == 4);
  }

  SUBCASE("positive count arithmetic") {
    Rng rng(3);
    const auto sample = sample_proposals(gts, 64, 0.25, 0.1, rng, ctx);
    int pos = 0;
    for (const auto& p : sample.proposals) pos += p.label != kBackgroundLabel ? 1 : 0;
    CHECK(pos == 16);
    CHECK(sample.proposals.size() == 64);
  }

  SUBCASE("negatives stay under the overlap cap") {
    Rng rng(11);
    const auto sample = sample_proposals(gts, 48, 0.25, 0.1, rng, ctx);
    for (const auto& p : sample.proposals) {
      if (p.label != kBackgroundLabel) continue;
      for (const auto& gt : gts) CHECK(iou(p.box, gt.box) < 0.5);
    }
  }

  SUBCASE("deterministic under seed") {
    Rng r1(9), r2(9);
    const auto a = sample_proposals(gts, 16, 0.25, 0.2, r1, ctx);
    const auto b = sample_proposals(gts, 16, 0.25, 0.2, r2, ctx);
    REQUIRE(a.proposals.size() == b.proposals.size());
    for (std::size_t i = 0; i < a.proposals.size(); ++i) {
      CHECK(a.proposals[i].box == b.proposals[i].box);
      CHECK(a.proposals[i].label == b.proposals[i].label);
    }
  }

  Rng rng(1);
  CHECK_THROWS_AS(sample_proposals({}, 8, 0.5, 0.0, rng, ctx), std::invalid_argument);
}

TEST_CASE("extract_rois_from_dense") {
  const auto gts = two_gts();
  SamplerContext ctx;

  SUBCASE("exact gt box becomes a positive with the gt label") {
    Rng rng(2);
    const auto rois = extract_rois_from_dense({gts[0].box}, gts, 0.5, 3, rng, ctx);
    REQUIRE(rois.size() == 1);
    CHECK(rois[0].label == 1);
    CHECK(rois[0].gt_index == 0);
  }

  SUBCASE("disjoint box is a negative candidate") {
    Rng rng(2);
    // one positive keeps the 1:3 budget open for the disjoint candidate
    const auto rois =
        extract_rois_from_dense({gts[0].box, Box{0, 40, 6, 48}}, gts, 0.5, 3, rng, ctx);
    REQUIRE(rois.size() == 2);
    CHECK(rois[0].label == 1);
    CHECK(rois[1].label == kBackgroundLabel);
    CHECK(rois[1].box == Box{0, 40, 6, 48});
  }

  SUBCASE("1:3 ratio with subsampled negatives") {
    std::vector<Box> boxes;
    // 4 positives: the two gts and two slightly shifted copies
    boxes.push_back(gts[0].box);
    boxes.push_back(gts[1].box);
    boxes.push_back(Box{11, 11, 27, 27});
    boxes.push_back(Box{41, 37, 59, 61});
    // 40 negatives along the top edge
    for (int i = 0; i < 40; ++i) {
      const double x = 0.5 * i;
      boxes.push_back(Box{x, 0.0, x + 5.0, 5.0});
    }
    Rng rng(5);
    std::vector<std::size_t> src;
    const auto rois = extract_rois_from_dense(boxes, gts, 0.5, 3, rng, ctx, &src);
    int pos = 0, neg = 0;
    for (const auto& r : rois) (r.label == kBackgroundLabel ? neg : pos) += 1;
    CHECK(pos == 4);
    CHECK(neg == 12);
    REQUIRE(src.size() == rois.size());
    for (std::size_t i = 0; i < rois.size(); ++i) CHECK(boxes[src[i]] == rois[i].box);
  }

  SUBCASE("never labels a weak-overlap box positive") {
    Rng rng(17);
    std::vector<Box> boxes;
    for (int it = 0; it < 100; ++it) boxes.push_back(random_box(rng, 64));
    Rng rng2(18);
    const auto rois = extract_rois_from_dense(boxes, gts, 0.5, 3, rng2, ctx);
    for (const auto& r : rois) {
      double best = 0.0;
      for (const auto& gt : gts) best = std::max(best, iou(r.box, gt.box));
      if (r.label != kBackgroundLabel) CHECK(best >= 0.5);
    }
  }

  SUBCASE("empty prediction list") {
    Rng rng(2);
    CHECK(extract_rois_from_dense({}, gts, 0.5, 3, rng, ctx).empty());
  }
}

TEST_CASE("filter_negative_candidates") {
  LabeledProposal anchor;
  anchor.box = {10, 10, 20, 20};
  anchor.image_id = 1;

  LabeledProposal self = anchor;
  LabeledProposal cross = anchor;
  cross.image_id = 2;
  LabeledProposal near = anchor;
  near.box = {11, 11, 21, 21};
  LabeledProposal far = anchor;
  far.box = {40, 40, 50, 50};

  SUBCASE("default threshold") {
    const auto kept = filter_negative_candidates(anchor, {self, cross, near, far}, 0.5);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].image_id == 2);
    CHECK(kept[1].box == far.box);
  }

  SUBCASE("threshold 1.0 removes only exact same-image duplicates") {
    const auto kept = filter_negative_candidates(anchor, {self, cross, near, far}, 1.0);
    REQUIRE(kept.size() == 3);
    for (const auto& k : kept) {
      CHECK(!(k.image_id == anchor.image_id && k.box == anchor.box));
    }
  }

  SUBCASE("cross-image candidates always pass") {
    Rng rng(8);
    for (int it = 0; it < 100; ++it) {
      LabeledProposal cand;
      cand.box = random_box(rng, 64);
      cand.image_id = 2;
      const auto kept = filter_negative_candidates(anchor, {cand}, 0.0);
      CHECK(kept.size() == 1);
    }
  }
}
