#include "detkd/models.hpp"
#include "detkd/optim.hpp"
#include "detkd/ops.hpp"

#include <cmath>

#include <stdexcept>

#include "doctest.h"

using namespace detkd;

namespace {

Tensor random_grid(int h, int w, int c, Rng& rng) {
  Tensor t = Tensor::zeros({h, w, c});
  for (auto& v : t.data) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("backbone pyramid shapes") {
  Rng rng(1);
  BackboneSpec spec;  // 4 levels, offset 0, stride-4 first level
  ToyBackbone bb("bb", spec, rng);
  Tensor scene = random_grid(64, 64, spec.in_channels, rng);
  const FeaturePyramid pyr = bb.forward(nullptr, scene);
  REQUIRE(pyr.num_levels() == 4);
  CHECK(pyr.levels[0].shape == std::vector<int>{16, 16, 8});
  CHECK(pyr.levels[1].shape == std::vector<int>{8, 8, 8});
  CHECK(pyr.levels[2].shape == std::vector<int>{4, 4, 8});
  CHECK(pyr.levels[3].shape == std::vector<int>{2, 2, 8});
  CHECK(pyr.stride(0) == doctest::Approx(4.0));
  CHECK(pyr.stride(3) == doctest::Approx(32.0));

  CHECK_THROWS_AS(bb.forward(nullptr, random_grid(48, 48, spec.in_channels, rng)),
                  std::invalid_argument);
}

TEST_CASE("zero input with zero bias gives a zero pyramid") {
  Rng rng(2);
  ToyBackbone bb("bb", BackboneSpec{}, rng);
  for (auto& m : bb.level_maps) {
    std::fill(m.bias.value.data.begin(), m.bias.value.data.end(), 0.0);
  }
  const FeaturePyramid pyr = bb.forward(nullptr, Tensor::zeros({64, 64, 4}));
  for (const auto& lvl : pyr.levels) {
    for (double v : lvl.data) CHECK(v == 0.0);
  }
}

TEST_CASE("offset pyramid halves resolution") {
  Rng rng(3);
  BackboneSpec het;
  het.level_offset = 1;
  ToyBackbone bb("bb", het, rng);
  Tensor scene = random_grid(64, 64, het.in_channels, rng);
  const FeaturePyramid pyr = bb.forward(nullptr, scene);
  CHECK(pyr.levels[0].shape == std::vector<int>{8, 8, 8});
  CHECK(pyr.levels[3].shape == std::vector<int>{1, 1, 8});
  CHECK(pyr.stride(0) == doctest::Approx(8.0));
  CHECK(pyr.level_offset == 1);
}

TEST_CASE("roi_align sampling") {
  SUBCASE("constant map gives constant output") {
    Tensor lvl = Tensor::full({8, 8, 2}, 1.25);
    const Tensor out = roi_align(lvl, Box{3.7, 1.2, 6.9, 5.5}, 1.0, 4);
    for (double v : out.data) CHECK(v == doctest::Approx(1.25).epsilon(1e-12));
  }

  SUBCASE("integer-aligned box on a unit-stride map hits exact cells") {
    Tensor lvl = Tensor::zeros({4, 4, 1});
    for (int i = 0; i < 16; ++i) lvl.data[static_cast<std::size_t>(i)] = i;
    const Tensor out = roi_align(lvl, Box{0, 0, 4, 4}, 1.0, 4);
    CHECK(out.data == lvl.data);
  }

  SUBCASE("gradient w.r.t. features") {
    Rng rng(5);
    Tensor lvl = random_grid(6, 6, 2, rng);
    const Box box{0.8, 1.3, 4.9, 5.2};
    Tape tape;
    Tensor tracked = tape.leaf(lvl);
    Tensor out = roi_align(tracked, box, 1.0, 4);
    Tensor loss = sum(mul(out, out));
    tape.backward(loss);
    const Tensor analytic = tape.grad(tracked);

    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < lvl.data.size(); ++i) {
      const double keep = lvl.data[i];
      auto eval = [&](double v) {
        Tensor probe = lvl;
        probe.data[i] = v;
        Tensor o = roi_align(probe, box, 1.0, 4);
        return sum(mul(o, o)).item();
      };
      const double gn = (eval(keep + h) - eval(keep - h)) / (2.0 * h);
      const double ga = analytic.data[i];
      if (std::fabs(ga - gn) <= 1e-10) continue;
      worst = std::max(worst, std::fabs(ga - gn) / std::max({std::fabs(ga), std::fabs(gn), 1e-8}));
    }
    CHECK(worst <= 1e-4);
  }

  SUBCASE("level range is checked") {
    Rng rng(6);
    ToyBackbone bb("bb", BackboneSpec{}, rng);
    const FeaturePyramid pyr = bb.forward(nullptr, random_grid(64, 64, 4, rng));
    CHECK_THROWS_AS(roi_align(pyr, Box{0, 0, 8, 8}, 7, 4), std::invalid_argument);
  }
}

TEST_CASE("decouple_anchor_rep slices per anchor") {
  Tensor f({6}, {0, 1, 2, 3, 4, 5});
  CHECK(decouple_anchor_rep(f, 0, 1, 6).data == f.data);
  CHECK(decouple_anchor_rep(f, 1, 2, 3).data == std::vector<double>{3, 4, 5});

  std::vector<double> rebuilt;
  for (int a = 0; a < 2; ++a) {
    const auto part = decouple_anchor_rep(f, a, 2, 3).data;
    rebuilt.insert(rebuilt.end(), part.begin(), part.end());
  }
  CHECK(rebuilt == f.data);
  CHECK_THROWS_AS(decouple_anchor_rep(f, 2, 2, 3), std::invalid_argument);
  CHECK_THROWS_AS(decouple_anchor_rep(f, 0, 2, 4), std::invalid_argument);
}

TEST_CASE("head transfer copies, freezes, and rejects mismatches") {
  Rng rng(7);
  TwoStageHeadSpec spec;
  spec.roi_channels = 4;
  spec.roi_size = 4;
  spec.rep_dim = 8;
  spec.num_classes = 3;
  TwoStageHead teacher("teacher.head", spec, rng);
  TwoStageHead student = transfer_head(teacher, spec, "student.head");
  CHECK(student.frozen);

  Tensor feat = random_grid(4, 4, 4, rng);
  const auto a = teacher.forward(nullptr, feat);
  const auto b = student.forward(nullptr, feat);
  CHECK(a.cls_logits.data == b.cls_logits.data);
  CHECK(a.reg.data == b.reg.data);
  CHECK(a.rep.data == b.rep.data);

  // frozen head exposes no trainable params and survives optimizer steps
  std::vector<Param*> trainable;
  student.collect(trainable);
  CHECK(trainable.empty());

  Param dummy("dummy", Tensor::scalar(1.0));
  SgdConfig cfg;
  cfg.total_steps = 3;
  SgdOptimizer opt({&dummy}, cfg);
  const auto before = student.fc1.weight.value.data;
  for (int i = 0; i < 3; ++i) {
    Tape tape;
    Tensor x = tape.watch(dummy);
    Tensor out = student.forward(&tape, mul(Tensor({4, 4, 4}, feat.data), x)).cls_logits;
    tape.backward(sum(out));
    opt.step(tape);
  }
  CHECK(student.fc1.weight.value.data == before);

  TwoStageHeadSpec other = spec;
  other.rep_dim = 16;
  CHECK_THROWS_AS(transfer_head(teacher, other, "student.head"), std::invalid_argument);
}

TEST_CASE("frozen head still passes gradients to its input") {
  Rng rng(8);
  TwoStageHeadSpec spec;
  spec.roi_channels = 2;
  spec.roi_size = 4;
  spec.rep_dim = 4;
  spec.num_classes = 2;
  TwoStageHead teacher("t", spec, rng);
  TwoStageHead frozen = transfer_head(teacher, spec, "s");

  Tape tape;
  Tensor feat = tape.leaf(random_grid(4, 4, 2, rng));
  tape.backward(sum(frozen.forward(&tape, feat).cls_logits));
  double norm = 0.0;
  for (double g : tape.grad(feat).data) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("embed net output width is level independent") {
  Rng rng(9);
  EmbedNet embed("e", 8, 16, 4, rng);
  const Tensor a = embed.forward(nullptr, random_grid(4, 4, 8, rng));
  CHECK(a.shape == std::vector<int>{16});
  // same spatial extent arrives from every level, so width is fixed
  const Tensor b = embed.forward(nullptr, random_grid(4, 4, 8, rng));
  CHECK(b.shape == std::vector<int>{16});
  CHECK_THROWS_AS(embed.forward(nullptr, random_grid(8, 8, 8, rng)), std::invalid_argument);
  CHECK_THROWS_AS(EmbedNet("bad", 8, 16, 6, rng), std::invalid_argument);
}

TEST_CASE("adaptation map identity init for square maps") {
  Rng rng(10);
  AdaptationMap adap("a", 8, 8, 3, rng);
  Tensor x = random_grid(4, 4, 8, rng);
  const Tensor y = adap.apply(nullptr, 1, x);
  CHECK(y.data == x.data);
  CHECK_THROWS_AS(adap.apply(nullptr, 3, x), std::invalid_argument);
}

TEST_CASE("dense head layout") {
  Rng rng(11);
  DenseHeadSpec spec;
  spec.in_channels = 8;
  spec.anchors = 2;
  spec.rep_dim = 6;
  spec.num_classes = 3;
  DenseHead head("d", spec, rng);
  const auto out = head.forward(nullptr, random_grid(4, 4, 8, rng));
  CHECK(out.cls_feat.shape == std::vector<int>{4, 4, 12});
  CHECK(out.cls_logits.shape == std::vector<int>{4, 4, 8});  // anchors * (classes+1)
  CHECK(out.reg.shape == std::vector<int>{4, 4, 8});         // anchors * 4
}

TEST_CASE("box delta encode and apply round trip") {
  Rng rng(12);
  for (int it = 0; it < 50; ++it) {
    const double w = rng.uniform(4.0, 20.0), h = rng.uniform(4.0, 20.0);
    const double x = rng.uniform(0.0, 40.0), y = rng.uniform(0.0, 40.0);
    Box prop{x, y, x + w, y + h};
    Box target{x + rng.uniform(-2, 2), y + rng.uniform(-2, 2), x + w + rng.uniform(-2, 2),
               y + h + rng.uniform(-2, 2)};
    const Box rebuilt = apply_box_delta(prop, encode_box_delta(prop, target));
    CHECK(rebuilt.x1 == doctest::Approx(target.x1).epsilon(1e-12));
    CHECK(rebuilt.y2 == doctest::Approx(target.y2).epsilon(1e-12));
  }
}
