#include "detkd/harness.hpp"

#include "detkd/optim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace detkd {

namespace {

using nlohmann::json;

constexpr std::uint64_t kStreamInit = 1;
constexpr std::uint64_t kStreamEval = 2;
constexpr std::uint64_t kStreamTrainScene = 0xA11CE;
constexpr std::uint64_t kStreamEvalScene = 0xE7A1;
constexpr std::uint64_t kStreamStep = 0x5000;

TwoStageHeadSpec head_spec_for(const ModelSpec& spec, int num_classes, int roi_size) {
  TwoStageHeadSpec hs;
  hs.roi_channels = spec.channels;
  hs.roi_size = roi_size;
  hs.rep_dim = spec.rep_dim;
  hs.num_classes = num_classes;
  return hs;
}

BackboneSpec backbone_spec_for(const ModelSpec& spec, int in_channels) {
  BackboneSpec bs;
  bs.in_channels = in_channels;
  bs.channels = spec.channels;
  bs.num_levels = spec.num_levels;
  bs.level_offset = spec.level_offset;
  return bs;
}

}  // namespace

TwoStageDetector::TwoStageDetector(const std::string& prefix, const ModelSpec& spec_in,
                                   int num_classes, int in_channels, int roi_size, Rng& rng)
    : spec(spec_in),
      backbone(prefix + ".backbone", backbone_spec_for(spec_in, in_channels), rng),
      head(prefix + ".head", head_spec_for(spec_in, num_classes, roi_size), rng) {}

void TwoStageDetector::collect(std::vector<Param*>& out) {
  backbone.collect(out);
  head.collect(out);
}

void TwoStageDetector::collect_all(std::vector<Param*>& out) {
  backbone.collect(out);
  head.collect_all(out);
}

void TwoStageDetector::collect_all(std::vector<const Param*>& out) const {
  backbone.collect(out);
  head.collect_all(out);
}

DenseDetector::DenseDetector(const std::string& prefix, const ModelSpec& spec_in, int num_classes,
                             int in_channels, Rng& rng)
    : spec(spec_in), backbone(prefix + ".backbone", backbone_spec_for(spec_in, in_channels), rng) {
  DenseHeadSpec hs;
  hs.in_channels = spec_in.channels;
  hs.anchors = spec_in.anchors;
  hs.rep_dim = spec_in.rep_dim;
  hs.num_classes = num_classes;
  head = DenseHead(prefix + ".head", hs, rng);
}

void DenseDetector::collect(std::vector<Param*>& out) {
  backbone.collect(out);
  head.collect(out);
}

void DenseDetector::collect_all(std::vector<Param*>& out) {
  backbone.collect(out);
  head.collect(out);
}

void DenseDetector::collect_all(std::vector<const Param*>& out) const {
  backbone.collect(out);
  head.collect(out);
}

int local_assigned_level(const Box& box, const ModelSpec& spec) {
  LevelAssign la;
  la.base_level = -spec.level_offset;  // shift the global scale into local indices
  return assign_pyramid_level(box, spec.num_levels, la);
}

SamplerContext make_sampler_context(const ExperimentConfig& cfg) {
  SamplerContext ctx;
  ctx.grid_w = cfg.scene.grid;
  ctx.grid_h = cfg.scene.grid;
  ctx.num_levels = cfg.teacher.num_levels;
  ctx.level_assign.base_level = -cfg.teacher.level_offset;
  return ctx;
}

std::vector<Scene> build_scene_set(const ExperimentConfig& cfg) {
  const SamplerContext ctx = make_sampler_context(cfg);
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(cfg.num_scenes));
  for (int i = 0; i < cfg.num_scenes; ++i) {
    Rng rng = Rng::derive(cfg.seed, kStreamTrainScene + static_cast<std::uint64_t>(i));
    scenes.push_back(generate_scene(cfg.scene, i, rng, ctx));
  }
  return scenes;
}

std::vector<Scene> build_eval_scenes(const ExperimentConfig& cfg) {
  const SamplerContext ctx = make_sampler_context(cfg);
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(cfg.eval_scenes));
  for (int i = 0; i < cfg.eval_scenes; ++i) {
    Rng rng = Rng::derive(cfg.seed, kStreamEvalScene + static_cast<std::uint64_t>(i));
    scenes.push_back(generate_scene(cfg.scene, 1000000 + i, rng, ctx));
  }
  return scenes;
}

namespace {

// Per-proposal two-stage forward at the model's own assigned level.
TwoStageHead::Output forward_proposal(Tape* tape, const TwoStageDetector& model,
                                      const FeaturePyramid& pyramid, const Box& box,
                                      int roi_size) {
  const int level = local_assigned_level(box, model.spec);
  Tensor feat = roi_align(pyramid, box, level, roi_size);
  return model.head.forward(tape, feat);
}

Tensor ce_from_logits(const Tensor& logits, int label) {
  Tensor p = softmax(logits, 0);
  return scale(log(clamp_min(slice(p, label, 1), kProbFloor)), -1.0);
}

// Ground-truth losses of a two-stage student over sampled proposals:
// class cross-entropy over all, coordinate-summed L1 box refinement over
// positives.
struct GtLosses {
  Tensor cls;
  Tensor reg;
};

GtLosses two_stage_gt_loss(const std::vector<TwoStageHead::Output>& outs,
                           const std::vector<LabeledProposal>& proposals,
                           const std::vector<LabeledProposal>& gts, int num_classes) {
  GtLosses out;
  Tensor ce_total = Tensor::scalar(0.0);
  Tensor reg_total = Tensor::scalar(0.0);
  int n_pos = 0;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const auto& p = proposals[i];
    ce_total = add(ce_total, ce_from_logits(outs[i].cls_logits, p.label));
    if (p.label != kBackgroundLabel && p.gt_index) {
      const Box& gt_box = gts[static_cast<std::size_t>(*p.gt_index)].box;
      const auto target = encode_box_delta(p.box, gt_box);
      Tensor pred = slice(reshape(outs[i].reg, {num_classes * 4}),
                          static_cast<std::int64_t>(p.label - 1) * 4, 4);
      Tensor t({4}, {target[0], target[1], target[2], target[3]});
      reg_total = add(reg_total, sum(abs(sub(pred, t))));
      ++n_pos;
    }
  }
  out.cls = scale(ce_total, 1.0 / static_cast<double>(proposals.size()));
  out.reg = n_pos > 0 ? scale(reg_total, 1.0 / n_pos) : Tensor::scalar(0.0);
  return out;
}

}  // namespace

TeacherBundle train_teacher(const ExperimentConfig& cfg) {
  if (cfg.teacher.family != "two_stage") {
    throw ConfigError("train_teacher requires a two-stage teacher");
  }
  const SamplerContext ctx = make_sampler_context(cfg);
  const auto scenes = build_scene_set(cfg);
  const auto eval_scenes = build_eval_scenes(cfg);

  Rng init_rng = Rng::derive(cfg.seed, kStreamInit);
  TeacherBundle bundle{
      TwoStageDetector("teacher", cfg.teacher, cfg.scene.num_classes, cfg.scene.in_channels,
                       cfg.sgfi.roi_size, init_rng),
      {}};
  bundle.report.seed = cfg.seed;

  std::vector<Param*> params;
  bundle.model.collect(params);
  SgdOptimizer opt(params, cfg.optim);

  for (std::int64_t step = 0; step < cfg.optim.total_steps; ++step) {
    const Scene& scene = scenes[static_cast<std::size_t>(step) % scenes.size()];
    Rng step_rng = Rng::derive(cfg.seed, kStreamStep + static_cast<std::uint64_t>(step));
    const auto sample = sample_proposals(scene.gts, cfg.proposals_per_scene, cfg.pos_fraction,
                                         cfg.jitter, step_rng, ctx);

    Tape tape;
    FeaturePyramid pyr = bundle.model.backbone.forward(&tape, scene.grid);
    std::vector<TwoStageHead::Output> outs;
    outs.reserve(sample.proposals.size());
    for (const auto& p : sample.proposals) {
      outs.push_back(forward_proposal(&tape, bundle.model, pyr, p.box, cfg.sgfi.roi_size));
    }
    GtLosses gt = two_stage_gt_loss(outs, sample.proposals, scene.gts, cfg.scene.num_classes);
    Tensor total = add(gt.cls, gt.reg);
    if (!total.all_finite()) {
      throw NumericalError("teacher training diverged at step " + std::to_string(step));
    }
    tape.backward(total);
    opt.step(tape);

    bundle.report.losses["gt"].push_back(total.item());
    bundle.report.losses["total"].push_back(total.item());
  }
  bundle.report.steps = static_cast<int>(cfg.optim.total_steps);

  const Metrics m = evaluate_two_stage(bundle.model, eval_scenes, cfg, cfg.seed);
  bundle.report.final_accuracy = m.accuracy;
  bundle.report.final_mean_iou = m.mean_iou;
  return bundle;
}

void save_teacher(const std::string& path, const TwoStageDetector& teacher) {
  std::vector<const Param*> params;
  teacher.collect_all(params);
  checkpoint_save(path, params);
}

TwoStageDetector load_teacher(const std::string& path, const ExperimentConfig& cfg) {
  Rng rng(0);
  TwoStageDetector teacher("teacher", cfg.teacher, cfg.scene.num_classes, cfg.scene.in_channels,
                           cfg.sgfi.roi_size, rng);
  std::vector<Param*> params;
  teacher.collect_all(params);
  try {
    checkpoint_load(path, params);
  } catch (const std::runtime_error& e) {
    throw ConfigError(std::string("teacher checkpoint: ") + e.what());
  }
  return teacher;
}

Metrics evaluate_two_stage(const TwoStageDetector& model, const std::vector<Scene>& scenes,
                           const ExperimentConfig& cfg, std::uint64_t seed) {
  const SamplerContext ctx = make_sampler_context(cfg);
  std::int64_t correct = 0, count = 0;
  double iou_sum = 0.0;
  for (const Scene& scene : scenes) {
    Rng rng = Rng::derive(seed, kStreamEval + static_cast<std::uint64_t>(scene.image_id));
    const auto sample =
        sample_proposals(scene.gts, cfg.eval_proposals, 1.0, cfg.jitter, rng, ctx);
    FeaturePyramid pyr = model.backbone.forward(nullptr, scene.grid);
    for (const auto& p : sample.proposals) {
      if (p.label == kBackgroundLabel || !p.gt_index) continue;
      const auto out = forward_proposal(nullptr, model, pyr, p.box, cfg.sgfi.roi_size);
      int argmax = 0;
      for (std::size_t j = 1; j < out.cls_logits.data.size(); ++j) {
        if (out.cls_logits.data[j] > out.cls_logits.data[static_cast<std::size_t>(argmax)]) {
          argmax = static_cast<int>(j);
        }
      }
      if (argmax == p.label) ++correct;
      const std::size_t row = static_cast<std::size_t>(p.label - 1) * 4;
      const std::array<double, 4> delta{out.reg.data[row], out.reg.data[row + 1],
                                        out.reg.data[row + 2], out.reg.data[row + 3]};
      const Box refined = apply_box_delta(p.box, delta);
      const Box& gt_box = scene.gts[static_cast<std::size_t>(*p.gt_index)].box;
      iou_sum += refined.valid() ? iou(refined, gt_box) : 0.0;
      ++count;
    }
  }
  Metrics m;
  if (count > 0) {
    m.accuracy = static_cast<double>(correct) / static_cast<double>(count);
    m.mean_iou = iou_sum / static_cast<double>(count);
  }
  return m;
}

namespace {

// Dense prior with its provenance.
struct PriorRef {
  int level = 0, y = 0, x = 0, anchor = 0;
  Box box;
};

std::vector<PriorRef> enumerate_priors(const DenseDetector& model, const FeaturePyramid& pyr) {
  std::vector<PriorRef> priors;
  for (int l = 0; l < pyr.num_levels(); ++l) {
    const double stride = pyr.stride(l);
    const int h = pyr.levels[static_cast<std::size_t>(l)].shape[0];
    const int w = pyr.levels[static_cast<std::size_t>(l)].shape[1];
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int a = 0; a < model.spec.anchors; ++a) {
          priors.push_back({l, y, x, a, dense_prior_box(stride, y, x, a, model.spec.anchors)});
        }
      }
    }
  }
  return priors;
}

// Tracked C+1 logits row of one prior.
Tensor dense_logits_row(const DenseHead::LevelOutput& out, const PriorRef& ref, int anchors,
                        int num_classes) {
  const int w = out.cls_logits.shape[1];
  const int width = anchors * (num_classes + 1);
  Tensor flat = reshape(out.cls_logits, {out.cls_logits.shape[0] * w * width});
  const std::int64_t base = (static_cast<std::int64_t>(ref.y) * w + ref.x) * width +
                            static_cast<std::int64_t>(ref.anchor) * (num_classes + 1);
  return slice(flat, base, num_classes + 1);
}

Tensor dense_reg_row(const DenseHead::LevelOutput& out, const PriorRef& ref, int anchors) {
  const int w = out.reg.shape[1];
  const int width = anchors * 4;
  Tensor flat = reshape(out.reg, {out.reg.shape[0] * w * width});
  const std::int64_t base = (static_cast<std::int64_t>(ref.y) * w + ref.x) * width +
                            static_cast<std::int64_t>(ref.anchor) * 4;
  return slice(flat, base, 4);
}

Tensor dense_rep_row(const DenseHead::LevelOutput& out, const PriorRef& ref, int anchors,
                     int rep_dim) {
  const int w = out.cls_feat.shape[1];
  const int width = anchors * rep_dim;
  Tensor flat = reshape(out.cls_feat, {out.cls_feat.shape[0] * w * width});
  const std::int64_t base = (static_cast<std::int64_t>(ref.y) * w + ref.x) * width;
  Tensor position = slice(flat, base, width);
  return decouple_anchor_rep(position, ref.anchor, anchors, rep_dim);
}

struct DenseMatch {
  std::size_t prior_index = 0;
  int label = kBackgroundLabel;
  int gt_index = -1;
};

// IoU matching of priors to ground truths: >= 0.5 positive, < 0.4
// negative candidate, in between ignored.
void match_priors(const std::vector<PriorRef>& priors, const std::vector<LabeledProposal>& gts,
                  std::vector<DenseMatch>& positives, std::vector<std::size_t>& negatives) {
  for (std::size_t i = 0; i < priors.size(); ++i) {
    double best = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(priors[i].box, gts[g].box);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best >= 0.5 && best_gt >= 0) {
      positives.push_back({i, gts[static_cast<std::size_t>(best_gt)].label, best_gt});
    } else if (best < 0.4) {
      negatives.push_back(i);
    }
  }
}

Box clip_box(Box b, double grid) {
  b.x1 = std::clamp(b.x1, 0.0, grid);
  b.y1 = std::clamp(b.y1, 0.0, grid);
  b.x2 = std::clamp(b.x2, 0.0, grid);
  b.y2 = std::clamp(b.y2, 0.0, grid);
  return b;
}

}  // namespace

Metrics evaluate_dense(const DenseDetector& model, const std::vector<Scene>& scenes,
                       const ExperimentConfig& cfg, std::uint64_t /*seed*/) {
  std::int64_t correct = 0, count = 0;
  double iou_sum = 0.0;
  const int c1 = cfg.scene.num_classes + 1;
  for (const Scene& scene : scenes) {
    FeaturePyramid pyr = model.backbone.forward(nullptr, scene.grid);
    std::vector<DenseHead::LevelOutput> outs;
    for (const auto& lvl : pyr.levels) outs.push_back(model.head.forward(nullptr, lvl));
    const auto priors = enumerate_priors(model, pyr);
    std::vector<DenseMatch> positives;
    std::vector<std::size_t> negatives;
    match_priors(priors, scene.gts, positives, negatives);
    for (const auto& m : positives) {
      const PriorRef& ref = priors[m.prior_index];
      const auto& out = outs[static_cast<std::size_t>(ref.level)];
      Tensor logits = dense_logits_row(out, ref, model.spec.anchors, cfg.scene.num_classes);
      int argmax = 0;
      for (int j = 1; j < c1; ++j) {
        if (logits.data[static_cast<std::size_t>(j)] >
            logits.data[static_cast<std::size_t>(argmax)]) {
          argmax = j;
        }
      }
      if (argmax == m.label) ++correct;
      Tensor reg = dense_reg_row(out, ref, model.spec.anchors);
      const Box refined = apply_box_delta(
          ref.box, {reg.data[0], reg.data[1], reg.data[2], reg.data[3]});
      const Box& gt_box = scene.gts[static_cast<std::size_t>(m.gt_index)].box;
      iou_sum += refined.valid() ? iou(refined, gt_box) : 0.0;
      ++count;
    }
  }
  Metrics m;
  if (count > 0) {
    m.accuracy = static_cast<double>(correct) / static_cast<double>(count);
    m.mean_iou = iou_sum / static_cast<double>(count);
  }
  return m;
}

namespace {

// Everything one homogeneous distillation step shares.
struct TeacherOutputs {
  std::vector<TwoStageHead::Output> outs;  // detached
};

TeacherOutputs teacher_forward(const TwoStageDetector& teacher, const FeaturePyramid& pyr,
                               const std::vector<LabeledProposal>& proposals, int roi_size) {
  TeacherOutputs t;
  t.outs.reserve(proposals.size());
  for (const auto& p : proposals) {
    t.outs.push_back(forward_proposal(nullptr, teacher, pyr, p.box, roi_size));
  }
  return t;
}

Tensor stack_rows(const std::vector<Tensor>& rows, int cols) {
  return reshape(concat(rows), {static_cast<int>(rows.size()), cols});
}

}  // namespace

StudentBundle make_teacher_copy_student(const TwoStageDetector& teacher,
                                        const ExperimentConfig& cfg, std::uint64_t seed) {
  Rng rng = Rng::derive(seed, kStreamInit);
  StudentBundle student;
  student.spec = teacher.spec;
  student.two_stage = TwoStageDetector("student", teacher.spec, cfg.scene.num_classes,
                                       cfg.scene.in_channels, cfg.sgfi.roi_size, rng);
  std::vector<Param*> dst;
  student.two_stage.collect_all(dst);
  std::vector<const Param*> src;
  teacher.collect_all(src);
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value.data = src[i]->value.data;

  student.sgfi = SgfiComponents("sgfi", teacher.spec.channels, teacher.spec.channels,
                                teacher.spec.num_levels, cfg.sgfi, rng);
  student.sgfi_built = true;
  return student;
}

DistillResult distill_one(const ExperimentConfig& cfg, const TwoStageDetector& teacher,
                          const std::vector<Scene>& scenes, const std::vector<Scene>& eval_scenes,
                          std::uint64_t run_seed) {
  const SamplerContext ctx = make_sampler_context(cfg);
  const bool dense = cfg.student.is_dense();
  const PairMode mode = dense ? PairMode::heterogeneous : PairMode::homogeneous;
  const int num_classes = cfg.scene.num_classes;
  const int roi_size = cfg.sgfi.roi_size;

  Rng init_rng = Rng::derive(run_seed, kStreamInit);
  DistillResult result;
  StudentBundle& student = result.student;
  student.spec = cfg.student;
  if (dense) {
    student.dense =
        DenseDetector("student", cfg.student, num_classes, cfg.scene.in_channels, init_rng);
  } else {
    student.two_stage = TwoStageDetector("student", cfg.student, num_classes,
                                         cfg.scene.in_channels, roi_size, init_rng);
    if (cfg.has(Method::head_transfer)) {
      student.two_stage.head =
          transfer_head(teacher.head, student.two_stage.head.spec, "student.head");
    }
  }

  const bool needs_adap = cfg.has(Method::sgfi) || cfg.has(Method::mask_whole) ||
                          cfg.has(Method::mask_gt);
  if (needs_adap) {
    student.sgfi = SgfiComponents("sgfi", cfg.student.channels, cfg.teacher.channels,
                                  cfg.student.num_levels, cfg.sgfi, init_rng);
    student.sgfi_built = true;
  }
  if (cfg.has(Method::ckd)) {
    student.proj = ProjectionHead("ckd", cfg.student.rep_dim, cfg.ckd.proj_dim, init_rng);
    student.proj_built = true;
  }

  std::vector<Param*> params;
  if (dense) {
    student.dense.collect(params);
  } else {
    student.two_stage.collect(params);
  }
  if (cfg.has(Method::sgfi)) {
    student.sgfi.collect(params);
  } else if (needs_adap) {
    student.sgfi.adap.collect(params);
  }
  if (cfg.has(Method::ckd)) student.proj.collect(params);
  SgdOptimizer opt(params, cfg.optim);

  MemoryQueue queue(static_cast<std::size_t>(cfg.ckd.queue_capacity));
  SeedReport& report = result.report;
  report.seed = run_seed;

  for (std::int64_t step = 0; step < cfg.optim.total_steps; ++step) {
    const Scene& scene = scenes[static_cast<std::size_t>(step) % scenes.size()];
    Rng step_rng = Rng::derive(run_seed, kStreamStep + static_cast<std::uint64_t>(step));

    Tape tape;
    FeaturePyramid teacher_pyr = teacher.backbone.forward(nullptr, scene.grid);
    std::vector<LossPart> parts;
    std::vector<std::pair<std::string, double>> logged;

    // KD proposal set, student-side representations and teacher targets.
    std::vector<LabeledProposal> proposals;
    std::vector<Tensor> student_reps;           // tracked
    std::vector<Tensor> student_logits_rows;    // tracked
    std::vector<Tensor> student_reg_rows;       // tracked [C x 4] flattened rows
    TeacherOutputs teacher_out;

    if (!dense) {
      FeaturePyramid student_pyr = student.two_stage.backbone.forward(&tape, scene.grid);
      const auto sample = sample_proposals(scene.gts, cfg.proposals_per_scene, cfg.pos_fraction,
                                           cfg.jitter, step_rng, ctx);
      proposals = sample.proposals;
      teacher_out = teacher_forward(teacher, teacher_pyr, proposals, roi_size);

      std::vector<TwoStageHead::Output> outs;
      outs.reserve(proposals.size());
      for (const auto& p : proposals) {
        outs.push_back(forward_proposal(&tape, student.two_stage, student_pyr, p.box, roi_size));
      }
      for (const auto& o : outs) {
        student_reps.push_back(o.rep);
        student_logits_rows.push_back(o.cls_logits);
        student_reg_rows.push_back(reshape(o.reg, {num_classes * 4}));
      }

      GtLosses gt = two_stage_gt_loss(outs, proposals, scene.gts, num_classes);
      parts.push_back({"gt", add(gt.cls, gt.reg), cfg.weight_for("gt"), false});

      if (cfg.has(Method::sgfi)) {
        Tensor loss = sgfi_loss(&tape, proposals, student_pyr, teacher_pyr, student.sgfi,
                                cfg.sgfi);
        parts.push_back({"sgfi", loss, cfg.weight_for("sgfi"), false});
      }
      if (cfg.has(Method::mask_whole)) {
        const auto mask = make_masks(scene.gts, teacher_pyr, MaskKind::whole);
        parts.push_back({"mask_whole",
                         masked_imitation_loss(&tape, student_pyr, teacher_pyr, mask,
                                               student.sgfi.adap),
                         cfg.weight_for("mask_whole"), true});
      }
      if (cfg.has(Method::mask_gt)) {
        const auto mask = make_masks(scene.gts, teacher_pyr, MaskKind::gt_box);
        parts.push_back({"mask_gt",
                         masked_imitation_loss(&tape, student_pyr, teacher_pyr, mask,
                                               student.sgfi.adap),
                         cfg.weight_for("mask_gt"), true});
      }
    } else {
      FeaturePyramid student_pyr = student.dense.backbone.forward(&tape, scene.grid);
      std::vector<DenseHead::LevelOutput> level_outs;
      level_outs.reserve(student_pyr.levels.size());
      for (const auto& lvl : student_pyr.levels) {
        level_outs.push_back(student.dense.head.forward(&tape, lvl));
      }
      const auto priors = enumerate_priors(student.dense, student_pyr);

      // Ground-truth losses over matched priors.
      std::vector<DenseMatch> positives;
      std::vector<std::size_t> neg_candidates;
      match_priors(priors, scene.gts, positives, neg_candidates);
      std::vector<std::size_t> sampled_negs;
      {
        const std::size_t want = std::max<std::size_t>(positives.size() * 3, 8);
        if (neg_candidates.size() <= want) {
          sampled_negs = neg_candidates;
        } else {
          for (std::size_t idx : step_rng.sample_indices(neg_candidates.size(), want)) {
            sampled_negs.push_back(neg_candidates[idx]);
          }
        }
      }
      Tensor ce_total = Tensor::scalar(0.0);
      Tensor reg_total = Tensor::scalar(0.0);
      std::int64_t ce_count = 0;
      for (const auto& m : positives) {
        const PriorRef& ref = priors[m.prior_index];
        const auto& out = level_outs[static_cast<std::size_t>(ref.level)];
        ce_total = add(ce_total, ce_from_logits(dense_logits_row(out, ref, cfg.student.anchors,
                                                                 num_classes),
                                                m.label));
        ++ce_count;
        const auto target =
            encode_box_delta(ref.box, scene.gts[static_cast<std::size_t>(m.gt_index)].box);
        Tensor t({4}, {target[0], target[1], target[2], target[3]});
        reg_total =
            add(reg_total, sum(abs(sub(dense_reg_row(out, ref, cfg.student.anchors), t))));
      }
      for (std::size_t idx : sampled_negs) {
        const PriorRef& ref = priors[idx];
        const auto& out = level_outs[static_cast<std::size_t>(ref.level)];
        ce_total = add(ce_total,
                       ce_from_logits(dense_logits_row(out, ref, cfg.student.anchors, num_classes),
                                      kBackgroundLabel));
        ++ce_count;
      }
      Tensor gt_loss = ce_count > 0 ? scale(ce_total, 1.0 / static_cast<double>(ce_count))
                                    : Tensor::scalar(0.0);
      if (!positives.empty()) {
        gt_loss = add(gt_loss, scale(reg_total, 1.0 / static_cast<double>(positives.size())));
      }
      parts.push_back({"gt", gt_loss, cfg.weight_for("gt"), false});

      // KD RoIs from the student's predicted boxes.
      std::vector<Box> pred_boxes;
      std::vector<std::size_t> pred_prior;  // provenance into priors
      for (std::size_t i = 0; i < priors.size(); ++i) {
        const PriorRef& ref = priors[i];
        const auto& out = level_outs[static_cast<std::size_t>(ref.level)];
        const int w = out.reg.shape[1];
        const int width = cfg.student.anchors * 4;
        const std::size_t base = static_cast<std::size_t>((ref.y * w + ref.x) * width +
                                                          ref.anchor * 4);
        const std::array<double, 4> delta{out.reg.data[base], out.reg.data[base + 1],
                                          out.reg.data[base + 2], out.reg.data[base + 3]};
        Box b = clip_box(apply_box_delta(ref.box, delta), cfg.scene.grid);
        if (b.width() < 1.0 || b.height() < 1.0) continue;
        pred_boxes.push_back(b);
        pred_prior.push_back(i);
      }
      std::vector<std::size_t> roi_sources;
      proposals = extract_rois_from_dense(pred_boxes, scene.gts, cfg.dense_roi_iou_threshold,
                                          cfg.dense_roi_neg_ratio, step_rng, ctx, &roi_sources);
      teacher_out = teacher_forward(teacher, teacher_pyr, proposals, roi_size);

      for (std::size_t i = 0; i < proposals.size(); ++i) {
        const PriorRef& ref = priors[pred_prior[roi_sources[i]]];
        const auto& out = level_outs[static_cast<std::size_t>(ref.level)];
        student_reps.push_back(
            dense_rep_row(out, ref, cfg.student.anchors, cfg.student.rep_dim));
        student_logits_rows.push_back(
            dense_logits_row(out, ref, cfg.student.anchors, num_classes));
      }

      if (cfg.has(Method::sgfi)) {
        Tensor loss =
            sgfi_loss(&tape, proposals, student_pyr, teacher_pyr, student.sgfi, cfg.sgfi);
        parts.push_back({"sgfi", loss, cfg.weight_for("sgfi"), false});
      }
    }

    if (cfg.has(Method::ckd)) {
      std::vector<BatchRep> batch;
      batch.reserve(proposals.size());
      for (std::size_t i = 0; i < proposals.size(); ++i) {
        batch.push_back(
            {teacher_out.outs[i].rep.data, proposals[i].image_id, proposals[i].box});
      }
      std::vector<ContrastivePair> pairs;
      pairs.reserve(proposals.size());
      for (std::size_t i = 0; i < proposals.size(); ++i) {
        ContrastivePair pair;
        pair.student_rep = student_reps[i];
        pair.teacher_rep = teacher_out.outs[i].rep.detached();
        pair.negatives = gather_negatives(i, batch, queue, cfg.ckd, step_rng);
        pairs.push_back(std::move(pair));
      }
      Tensor loss = infonce_loss(&tape, pairs, student.proj, cfg.ckd.gamma);
      parts.push_back({"ckd", loss, cfg.weight_for("ckd"), false});
      for (auto& b : batch) queue.push({std::move(b.teacher_rep), b.image_id, b.box});
    }

    if (cfg.has(Method::pred_cls) && !proposals.empty()) {
      const int c1 = num_classes + 1;
      std::vector<Tensor> teacher_rows;
      teacher_rows.reserve(proposals.size());
      for (const auto& o : teacher_out.outs) teacher_rows.push_back(softmax(o.cls_logits, 0));
      if (!dense) {
        Tensor pt = stack_rows(teacher_rows, c1);
        Tensor ps = softmax(stack_rows(student_logits_rows, c1), 1);
        parts.push_back(
            {"pred_cls", cls_kd_loss(pt, ps), cfg.weight_for("pred_cls"), false});
      } else {
        // Heterogeneous: convert dense logits, compare on foreground
        // scores only.
        std::vector<Tensor> fg_rows;
        fg_rows.reserve(proposals.size());
        for (auto& row : teacher_rows) fg_rows.push_back(slice(row, 1, num_classes));
        Tensor pt = stack_rows(fg_rows, num_classes);
        Tensor ps = convert_dense_logits(stack_rows(student_logits_rows, c1));
        parts.push_back(
            {"pred_cls", cls_kd_loss(pt, ps), cfg.weight_for("pred_cls"), false});
      }
    }

    if (cfg.has(Method::pred_reg_naive)) {
      std::vector<Tensor> t_rows, s_rows;
      for (std::size_t i = 0; i < proposals.size(); ++i) {
        const auto& p = proposals[i];
        if (p.label == kBackgroundLabel) continue;
        const std::int64_t at = static_cast<std::int64_t>(p.label - 1) * 4;
        t_rows.push_back(slice(reshape(teacher_out.outs[i].reg, {num_classes * 4}), at, 4));
        s_rows.push_back(slice(student_reg_rows[i], at, 4));
      }
      Tensor loss = t_rows.empty()
                        ? Tensor::scalar(0.0)
                        : naive_reg_kd(stack_rows(t_rows, 4), stack_rows(s_rows, 4));
      parts.push_back({"pred_reg_naive", loss, cfg.weight_for("pred_reg_naive"), true});
    }

    if (cfg.has(Method::pred_reg_ca) && !proposals.empty()) {
      const int n = static_cast<int>(proposals.size());
      std::vector<Tensor> score_rows, t_rows, s_rows;
      for (std::size_t i = 0; i < proposals.size(); ++i) {
        Tensor p = softmax(teacher_out.outs[i].cls_logits, 0);
        score_rows.push_back(slice(p, 1, num_classes));
        t_rows.push_back(reshape(teacher_out.outs[i].reg, {num_classes * 4}));
        s_rows.push_back(student_reg_rows[i]);
      }
      Tensor loss = class_aware_reg_loss(
          stack_rows(score_rows, num_classes),
          reshape(concat(t_rows), {n, num_classes, 4}),
          reshape(concat(s_rows), {n, num_classes, 4}));
      parts.push_back({"pred_reg_ca", loss, cfg.weight_for("pred_reg_ca"), true});
    }

    Tensor total = total_loss(parts, mode);
    if (!total.all_finite()) {
      throw NumericalError("distillation diverged at step " + std::to_string(step));
    }
    tape.backward(total);
    opt.step(tape);

    for (const auto& part : parts) report.losses[part.name].push_back(part.value.item());
    report.losses["total"].push_back(total.item());
  }
  report.steps = static_cast<int>(cfg.optim.total_steps);

  const Metrics m = dense ? evaluate_dense(student.dense, eval_scenes, cfg, run_seed)
                          : evaluate_two_stage(student.two_stage, eval_scenes, cfg, run_seed);
  report.final_accuracy = m.accuracy;
  report.final_mean_iou = m.mean_iou;
  return result;
}

int worker_thread_count() {
  const char* env = std::getenv("DETKD_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return std::clamp(n, 1, 64);
}

ExperimentReport distill(const ExperimentConfig& cfg, const TwoStageDetector& teacher) {
  const auto scenes = build_scene_set(cfg);
  const auto eval_scenes = build_eval_scenes(cfg);
  const auto seeds = cfg.run_seeds();

  ExperimentReport report;
  report.command = "distill";
  for (Method m : cfg.methods) report.methods.push_back(method_name(m));
  report.per_seed.resize(seeds.size());

  const int workers = std::min<int>(worker_thread_count(), static_cast<int>(seeds.size()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      report.per_seed[i] = distill_one(cfg, teacher, scenes, eval_scenes, seeds[i]).report;
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&]() {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= seeds.size()) return;
          try {
            report.per_seed[i] = distill_one(cfg, teacher, scenes, eval_scenes, seeds[i]).report;
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
            return;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  double acc = 0.0, miou = 0.0;
  for (const auto& s : report.per_seed) {
    acc += s.final_accuracy;
    miou += s.final_mean_iou;
  }
  report.mean_accuracy = acc / static_cast<double>(report.per_seed.size());
  report.mean_iou = miou / static_cast<double>(report.per_seed.size());
  return report;
}

std::int64_t MatchHistogram::total() const {
  std::int64_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

int MatchHistogram::mode_delta() const {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < counts.size(); ++i) {
    if (counts[i] > counts[arg]) arg = i;
  }
  return static_cast<int>(arg) - (num_levels - 1);
}

double MatchHistogram::mass_within(int radius) const {
  std::int64_t inside = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const int delta = static_cast<int>(i) - (num_levels - 1);
    if (std::abs(delta) <= radius) inside += counts[i];
  }
  const std::int64_t n = total();
  return n > 0 ? static_cast<double>(inside) / static_cast<double>(n) : 0.0;
}

MatchHistogram match_level_histogram(const StudentBundle& student, const TwoStageDetector& teacher,
                                     const std::vector<Scene>& scenes,
                                     const ExperimentConfig& cfg, std::uint64_t seed) {
  if (!student.sgfi_built) {
    throw std::invalid_argument("match histogram requires trained imitation components");
  }
  const SamplerContext ctx = make_sampler_context(cfg);
  MatchHistogram hist;
  hist.num_levels = std::max(cfg.student.num_levels, cfg.teacher.num_levels);
  hist.counts.assign(static_cast<std::size_t>(2 * hist.num_levels - 1), 0);

  std::int64_t seen = 0;
  for (const Scene& scene : scenes) {
    Rng rng = Rng::derive(seed, kStreamEval + static_cast<std::uint64_t>(scene.image_id));
    const auto sample =
        sample_proposals(scene.gts, cfg.eval_proposals, 1.0, cfg.jitter, rng, ctx);
    FeaturePyramid teacher_pyr = teacher.backbone.forward(nullptr, scene.grid);
    FeaturePyramid student_pyr = student.backbone().forward(nullptr, scene.grid);
    for (const auto& p : sample.proposals) {
      if (p.label == kBackgroundLabel) continue;
      Tensor t_feat = roi_align(teacher_pyr, p.box, p.assigned_level, cfg.sgfi.roi_size);
      Tensor t_key = student.sgfi.embed.forward(nullptr, t_feat);
      int best_level = 0;
      double best_score = -1e300;
      for (int l = 0; l < student_pyr.num_levels(); ++l) {
        Tensor s_feat = roi_align(student_pyr, p.box, l, cfg.sgfi.roi_size);
        Tensor key = student.sgfi.embed.forward(
            nullptr, student.sgfi.adap.apply(nullptr, l, s_feat));
        const double score = dot(key, t_key).item();
        if (score > best_score) {
          best_score = score;
          best_level = l;
        }
      }
      const int delta = best_level - p.assigned_level;
      hist.counts[static_cast<std::size_t>(delta + hist.num_levels - 1)] += 1;
      ++seen;
    }
  }
  if (seen == 0) throw std::invalid_argument("match histogram saw no positive proposals");
  return hist;
}

CorrDiffResult logits_correlation_diff(const StudentBundle& student,
                                       const TwoStageDetector& teacher,
                                       const std::vector<Scene>& scenes,
                                       const ExperimentConfig& cfg, std::uint64_t seed) {
  const SamplerContext ctx = make_sampler_context(cfg);
  const int dim = cfg.scene.num_classes + 1;
  std::vector<std::vector<double>> teacher_rows, student_rows;

  for (const Scene& scene : scenes) {
    Rng rng = Rng::derive(seed, kStreamEval + static_cast<std::uint64_t>(scene.image_id));
    const auto sample =
        sample_proposals(scene.gts, cfg.eval_proposals, 1.0, cfg.jitter, rng, ctx);
    FeaturePyramid teacher_pyr = teacher.backbone.forward(nullptr, scene.grid);
    FeaturePyramid student_pyr = student.backbone().forward(nullptr, scene.grid);

    std::vector<DenseHead::LevelOutput> dense_outs;
    std::vector<PriorRef> priors;
    if (student.spec.is_dense()) {
      for (const auto& lvl : student_pyr.levels) {
        dense_outs.push_back(student.dense.head.forward(nullptr, lvl));
      }
      priors = enumerate_priors(student.dense, student_pyr);
    }

    for (const auto& p : sample.proposals) {
      if (p.label == kBackgroundLabel) continue;
      const auto t_out = forward_proposal(nullptr, teacher, teacher_pyr, p.box, cfg.sgfi.roi_size);
      teacher_rows.push_back(t_out.cls_logits.data);
      if (!student.spec.is_dense()) {
        const auto s_out =
            forward_proposal(nullptr, student.two_stage, student_pyr, p.box, cfg.sgfi.roi_size);
        student_rows.push_back(s_out.cls_logits.data);
      } else {
        // Best-overlapping prior anchor stands in for the proposal.
        double best = -1.0;
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < priors.size(); ++i) {
          const double v = iou(priors[i].box, p.box);
          if (v > best) {
            best = v;
            best_i = i;
          }
        }
        const PriorRef& ref = priors[best_i];
        Tensor row = dense_logits_row(dense_outs[static_cast<std::size_t>(ref.level)], ref,
                                      student.spec.anchors, cfg.scene.num_classes);
        student_rows.push_back(row.data);
      }
    }
  }
  if (teacher_rows.size() < 2) {
    throw std::invalid_argument("correlation diff requires >= 2 proposals");
  }

  auto pearson = [dim](const std::vector<std::vector<double>>& rows, bool& warn) {
    const std::size_t n = rows.size();
    std::vector<double> mean(static_cast<std::size_t>(dim), 0.0);
    for (const auto& r : rows) {
      for (int j = 0; j < dim; ++j) mean[static_cast<std::size_t>(j)] += r[static_cast<std::size_t>(j)];
    }
    for (auto& m : mean) m /= static_cast<double>(n);
    std::vector<double> var(static_cast<std::size_t>(dim), 0.0);
    std::vector<double> corr(static_cast<std::size_t>(dim) * dim, 0.0);
    for (const auto& r : rows) {
      for (int j = 0; j < dim; ++j) {
        const double d = r[static_cast<std::size_t>(j)] - mean[static_cast<std::size_t>(j)];
        var[static_cast<std::size_t>(j)] += d * d;
      }
    }
    for (int a = 0; a < dim; ++a) {
      for (int b = 0; b < dim; ++b) {
        if (var[static_cast<std::size_t>(a)] <= 0.0 || var[static_cast<std::size_t>(b)] <= 0.0) {
          warn = true;
          continue;  // zero-variance dimension: entry stays 0
        }
        double cov = 0.0;
        for (const auto& r : rows) {
          cov += (r[static_cast<std::size_t>(a)] - mean[static_cast<std::size_t>(a)]) *
                 (r[static_cast<std::size_t>(b)] - mean[static_cast<std::size_t>(b)]);
        }
        corr[static_cast<std::size_t>(a) * dim + b] =
            cov / std::sqrt(var[static_cast<std::size_t>(a)] * var[static_cast<std::size_t>(b)]);
      }
    }
    return corr;
  };

  CorrDiffResult result;
  result.dim = dim;
  bool warn = false;
  const auto corr_t = pearson(teacher_rows, warn);
  const auto corr_s = pearson(student_rows, warn);
  result.zero_variance_warning = warn;
  result.diff.resize(static_cast<std::size_t>(dim) * dim);
  double frob = 0.0;
  for (std::size_t i = 0; i < result.diff.size(); ++i) {
    result.diff[i] = corr_s[i] - corr_t[i];
    frob += result.diff[i] * result.diff[i];
  }
  result.frobenius = std::sqrt(frob);
  return result;
}

std::vector<MiBoundResult> mi_bound_experiment(const MiBoundParams& params) {
  if (std::fabs(params.rho) >= 1.0) throw std::invalid_argument("mi bound requires |rho| < 1");
  const double noise = std::sqrt(1.0 - params.rho * params.rho);

  auto draw_vec = [&](Rng& rng, int d) {
    std::vector<double> v(static_cast<std::size_t>(d));
    for (auto& x : v) x = rng.normal();
    return v;
  };
  auto draw_pair = [&](Rng& rng, std::vector<double>& x, std::vector<double>& y) {
    x = draw_vec(rng, params.dim);
    y.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = params.rho * x[i] + noise * rng.normal();
  };
  auto as_tensor = [](const std::vector<double>& v) {
    return Tensor({static_cast<int>(v.size())}, v);
  };

  std::vector<MiBoundResult> results;
  for (int k : params.k_list) {
    MiBoundResult res;
    res.k = k;
    res.true_mi = oracle::gaussian_mi_true(params.rho, params.dim);
    for (std::uint64_t seed : params.seeds) {
      Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(k));
      ProjectionHead proj("mi.proj", params.dim, params.proj_dim, rng);
      std::vector<Param*> proj_params;
      proj.collect(proj_params);
      SgdConfig oc;
      oc.lr0 = params.lr;
      oc.lr_min = 0.0;
      oc.momentum = 0.9;
      oc.weight_decay = 0.0;
      oc.total_steps = params.steps;
      SgdOptimizer opt(proj_params, oc);

      for (int step = 0; step < params.steps; ++step) {
        Tape tape;
        // Fresh negatives each step, shared across the batch's anchors.
        std::vector<Tensor> negatives;
        negatives.reserve(static_cast<std::size_t>(k));
        for (int j = 0; j < k; ++j) negatives.push_back(as_tensor(draw_vec(rng, params.dim)));
        std::vector<ContrastivePair> pairs(static_cast<std::size_t>(params.batch_anchors));
        for (auto& pair : pairs) {
          std::vector<double> x, y;
          draw_pair(rng, x, y);
          pair.student_rep = as_tensor(x);
          pair.teacher_rep = as_tensor(y);
          pair.negatives = negatives;
        }
        Tensor loss = infonce_loss(&tape, pairs, proj, params.gamma);
        if (!loss.all_finite()) throw NumericalError("mi-bound training diverged");
        tape.backward(loss);
        opt.step(tape);
      }

      double eval_loss = 0.0;
      for (int b = 0; b < params.eval_batches; ++b) {
        std::vector<Tensor> negatives;
        negatives.reserve(static_cast<std::size_t>(k));
        for (int j = 0; j < k; ++j) negatives.push_back(as_tensor(draw_vec(rng, params.dim)));
        std::vector<ContrastivePair> pairs(static_cast<std::size_t>(params.eval_anchors));
        for (auto& pair : pairs) {
          std::vector<double> x, y;
          draw_pair(rng, x, y);
          pair.student_rep = as_tensor(x);
          pair.teacher_rep = as_tensor(y);
          pair.negatives = negatives;
        }
        eval_loss += infonce_loss(nullptr, pairs, proj, params.gamma).item();
      }
      eval_loss /= static_cast<double>(params.eval_batches);
      res.per_seed_bound.push_back(mi_lower_bound(eval_loss, k));
    }
    double m = 0.0;
    for (double b : res.per_seed_bound) m += b;
    res.mean_bound = m / static_cast<double>(res.per_seed_bound.size());
    results.push_back(std::move(res));
  }
  return results;
}

bool GradcheckSummary::passed() const { return worst() <= tolerance; }

double GradcheckSummary::worst() const {
  double w = 0.0;
  for (const auto& [name, err] : per_loss_worst) w = std::max(w, err);
  return w;
}

namespace {

// Small fixed-size fixture shared by the gradient checks: a random scene,
// a two-stage teacher, a narrower two-stage student, imitation and
// projection components.
struct GradcheckFixture {
  ExperimentConfig cfg;
  Scene scene;
  TwoStageDetector teacher;
  TwoStageDetector student;
  SgfiComponents sgfi;
  ProjectionHead proj;
  std::vector<LabeledProposal> proposals;

  explicit GradcheckFixture(std::uint64_t seed) {
    cfg.scene.grid = 32;
    cfg.scene.in_channels = 3;
    cfg.scene.num_classes = 3;
    cfg.scene.max_objects = 2;
    cfg.scene.box_min = 8.0;
    cfg.scene.box_max = 20.0;
    // Moderate feature magnitudes keep softmax/exp curvature low enough
    // for h = 1e-5 central differences to stay within tolerance.
    cfg.scene.blob_amplitude = 1.0;
    cfg.teacher.channels = 4;
    cfg.teacher.rep_dim = 6;
    cfg.teacher.num_levels = 2;
    cfg.student.channels = 3;
    cfg.student.rep_dim = 6;
    cfg.student.num_levels = 2;
    cfg.sgfi.key_dim = 4;
    cfg.sgfi.roi_size = 4;
    cfg.ckd.gamma = 0.4;
    cfg.proposals_per_scene = 6;
    cfg.pos_fraction = 0.5;
    cfg.seed = seed;

    const SamplerContext ctx = make_sampler_context(cfg);
    Rng scene_rng = Rng::derive(seed, 11);
    scene = generate_scene(cfg.scene, 0, scene_rng, ctx);
    Rng trng = Rng::derive(seed, 12);
    teacher = TwoStageDetector("teacher", cfg.teacher, cfg.scene.num_classes,
                               cfg.scene.in_channels, cfg.sgfi.roi_size, trng);
    Rng srng = Rng::derive(seed, 13);
    student = TwoStageDetector("student", cfg.student, cfg.scene.num_classes,
                               cfg.scene.in_channels, cfg.sgfi.roi_size, srng);
    sgfi = SgfiComponents("sgfi", cfg.student.channels, cfg.teacher.channels,
                          cfg.student.num_levels, cfg.sgfi, srng);
    // A non-identity temperature exercises the tau gradient.
    sgfi.log_tau.value.data[0] = 0.3;
    proj = ProjectionHead("ckd", cfg.student.rep_dim, 4, srng);
    Rng prng = Rng::derive(seed, 14);
    proposals = sample_proposals(scene.gts, cfg.proposals_per_scene, cfg.pos_fraction, 0.2,
                                 prng, ctx)
                    .proposals;
  }
};

// Checks one loss: analytic tape gradients vs central differences over
// every parameter the loss can reach.
double gradcheck_loss(const std::function<Tensor(Tape*)>& build,
                      std::vector<Param*> params) {
  Tape tape;
  Tensor loss = build(&tape);
  tape.backward(loss);
  std::vector<std::string> names;
  std::vector<std::vector<double>> analytic;
  std::vector<std::vector<double>*> flat;
  for (Param* p : params) {
    names.push_back(p->name);
    analytic.push_back(tape.grad(*p).data);
    flat.push_back(&p->value.data);
  }
  auto eval = [&]() { return build(nullptr).item(); };
  auto check = [&](double h) {
    // Cancellation noise in (f(p+h) - f(p-h)) / 2h scales with |f| / h.
    const double noise_floor = 1e-9 * (1e-5 / h) * std::max(1.0, std::fabs(loss.item()));
    const auto numeric = oracle::finite_diff_grad(eval, flat, h);
    return oracle::compare_gradients(names, analytic, numeric, h, 1e-4, noise_floor).worst();
  };
  const double err = check(1e-5);
  if (err <= 1e-4) return err;
  // A relu (or |.|) kink within h of an evaluation point makes the central
  // difference straddle it; remeasuring with a smaller step separates that
  // from a wrong gradient, which fails at every step.
  return std::min(err, check(1e-6));
}

}  // namespace

GradcheckSummary run_gradcheck_suite(std::uint64_t seed) {
  GradcheckFixture fx(seed);
  const int roi = fx.cfg.sgfi.roi_size;
  const int classes = fx.cfg.scene.num_classes;
  GradcheckSummary summary;

  auto student_params = [&]() {
    std::vector<Param*> p;
    fx.student.collect(p);
    return p;
  };

  {  // Eq. 1 imitation loss through the full student path.
    auto build = [&](Tape* tape) {
      FeaturePyramid sp = fx.student.backbone.forward(tape, fx.scene.grid);
      FeaturePyramid tp = fx.teacher.backbone.forward(nullptr, fx.scene.grid);
      return sgfi_loss(tape, fx.proposals, sp, tp, fx.sgfi, fx.cfg.sgfi);
    };
    std::vector<Param*> params = student_params();
    fx.sgfi.collect(params);
    summary.per_loss_worst.emplace_back("sgfi", gradcheck_loss(build, params));
  }

  {  // Contrastive loss through student head and projection.
    auto build = [&](Tape* tape) {
      FeaturePyramid sp = fx.student.backbone.forward(tape, fx.scene.grid);
      FeaturePyramid tp = fx.teacher.backbone.forward(nullptr, fx.scene.grid);
      std::vector<ContrastivePair> pairs;
      for (std::size_t i = 0; i < fx.proposals.size(); ++i) {
        const auto& p = fx.proposals[i];
        ContrastivePair pair;
        pair.student_rep =
            forward_proposal(tape, fx.student, sp, p.box, roi).rep;
        pair.teacher_rep = forward_proposal(nullptr, fx.teacher, tp, p.box, roi).rep;
        for (std::size_t j = 0; j < fx.proposals.size(); ++j) {
          if (j == i) continue;
          pair.negatives.push_back(
              forward_proposal(nullptr, fx.teacher, tp, fx.proposals[j].box, roi).rep);
        }
        pairs.push_back(std::move(pair));
      }
      return infonce_loss(tape, pairs, fx.proj, fx.cfg.ckd.gamma);
    };
    std::vector<Param*> params = student_params();
    fx.proj.collect(params);
    summary.per_loss_worst.emplace_back("infonce", gradcheck_loss(build, params));
  }

  {  // Classification KD.
    auto build = [&](Tape* tape) {
      FeaturePyramid sp = fx.student.backbone.forward(tape, fx.scene.grid);
      FeaturePyramid tp = fx.teacher.backbone.forward(nullptr, fx.scene.grid);
      std::vector<Tensor> t_rows, s_rows;
      for (const auto& p : fx.proposals) {
        t_rows.push_back(
            softmax(forward_proposal(nullptr, fx.teacher, tp, p.box, roi).cls_logits, 0));
        s_rows.push_back(forward_proposal(tape, fx.student, sp, p.box, roi).cls_logits);
      }
      Tensor pt = stack_rows(t_rows, classes + 1);
      Tensor ps = softmax(stack_rows(s_rows, classes + 1), 1);
      return cls_kd_loss(pt, ps);
    };
    summary.per_loss_worst.emplace_back("cls_kd", gradcheck_loss(build, student_params()));
  }

  {  // Naive localization KD on positives.
    auto build = [&](Tape* tape) {
      FeaturePyramid sp = fx.student.backbone.forward(tape, fx.scene.grid);
      FeaturePyramid tp = fx.teacher.backbone.forward(nullptr, fx.scene.grid);
      std::vector<Tensor> t_rows, s_rows;
      for (const auto& p : fx.proposals) {
        if (p.label == kBackgroundLabel) continue;
        const std::int64_t at = static_cast<std::int64_t>(p.label - 1) * 4;
        t_rows.push_back(slice(
            reshape(forward_proposal(nullptr, fx.teacher, tp, p.box, roi).reg, {classes * 4}),
            at, 4));
        s_rows.push_back(slice(
            reshape(forward_proposal(tape, fx.student, sp, p.box, roi).reg, {classes * 4}), at,
            4));
      }
      return naive_reg_kd(stack_rows(t_rows, 4), stack_rows(s_rows, 4));
    };
    summary.per_loss_worst.emplace_back("naive_reg", gradcheck_loss(build, student_params()));
  }

  {  // Class-aware localization KD (Eq. 3).
    auto build = [&](Tape* tape) {
      FeaturePyramid sp = fx.student.backbone.forward(tape, fx.scene.grid);
      FeaturePyramid tp = fx.teacher.backbone.forward(nullptr, fx.scene.grid);
      const int n = static_cast<int>(fx.proposals.size());
      std::vector<Tensor> score_rows, t_rows, s_rows;
      for (const auto& p : fx.proposals) {
        const auto t_out = forward_proposal(nullptr, fx.teacher, tp, p.box, roi);
        score_rows.push_back(slice(softmax(t_out.cls_logits, 0), 1, classes));
        t_rows.push_back(reshape(t_out.reg, {classes * 4}));
        s_rows.push_back(
            reshape(forward_proposal(tape, fx.student, sp, p.box, roi).reg, {classes * 4}));
      }
      return class_aware_reg_loss(stack_rows(score_rows, classes),
                                  reshape(concat(t_rows), {n, classes, 4}),
                                  reshape(concat(s_rows), {n, classes, 4}));
    };
    summary.per_loss_worst.emplace_back("class_aware_reg",
                                        gradcheck_loss(build, student_params()));
  }

  for (MaskKind kind : {MaskKind::whole, MaskKind::gt_box}) {  // Mask baselines.
    auto build = [&, kind](Tape* tape) {
      FeaturePyramid sp = fx.student.backbone.forward(tape, fx.scene.grid);
      FeaturePyramid tp = fx.teacher.backbone.forward(nullptr, fx.scene.grid);
      const auto mask = make_masks(fx.scene.gts, tp, kind);
      return masked_imitation_loss(tape, sp, tp, mask, fx.sgfi.adap);
    };
    std::vector<Param*> params = student_params();
    fx.sgfi.adap.collect(params);
    summary.per_loss_worst.emplace_back(
        kind == MaskKind::whole ? "masked_whole" : "masked_gt",
        gradcheck_loss(build, params));
  }

  return summary;
}

OracleCheckSummary run_oracle_equivalence(std::uint64_t seed, int instances, int max_anchors,
                                          int max_negatives) {
  OracleCheckSummary summary;
  summary.instances = instances;
  const int rep_dim = 6;
  const int proj_dim = 4;
  Rng rng(seed);

  for (int inst = 0; inst < instances; ++inst) {
    Rng prng = Rng::derive(seed, 100 + static_cast<std::uint64_t>(inst));
    ProjectionHead proj("oracle.proj", rep_dim, proj_dim, prng);
    const double gamma = 0.1 + rng.uniform() * 0.9;
    const int n = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(max_anchors)));

    std::vector<ContrastivePair> pairs;
    std::vector<oracle::ScalarPair> scalar_pairs;
    for (int i = 0; i < n; ++i) {
      const int k = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(max_negatives + 1)));
      ContrastivePair pair;
      oracle::ScalarPair sp;
      auto draw = [&]() {
        std::vector<double> v(static_cast<std::size_t>(rep_dim));
        for (auto& x : v) x = rng.normal();
        return v;
      };
      sp.student_rep = draw();
      sp.teacher_rep = draw();
      pair.student_rep = Tensor({rep_dim}, sp.student_rep);
      pair.teacher_rep = Tensor({rep_dim}, sp.teacher_rep);
      for (int j = 0; j < k; ++j) {
        sp.negatives.push_back(draw());
        pair.negatives.push_back(Tensor({rep_dim}, sp.negatives.back()));
      }
      pairs.push_back(std::move(pair));
      scalar_pairs.push_back(std::move(sp));
    }

    oracle::ScalarProjection sproj;
    sproj.in = rep_dim;
    sproj.out = proj_dim;
    sproj.weight = proj.map.weight.value.data;
    sproj.bias = proj.map.bias.value.data;

    const double tensor_loss = infonce_loss(nullptr, pairs, proj, gamma).item();
    const double oracle_loss = oracle::brute_force_infonce(scalar_pairs, sproj, gamma);
    summary.max_abs_diff = std::max(summary.max_abs_diff, std::fabs(tensor_loss - oracle_loss));
  }
  summary.passed = summary.max_abs_diff <= 1e-9;
  return summary;
}

namespace {

json seed_report_json(const SeedReport& s) {
  json j;
  j["seed"] = s.seed;
  j["steps"] = s.steps;
  j["final_accuracy"] = s.final_accuracy;
  j["final_mean_iou"] = s.final_mean_iou;
  json finals = json::object();
  for (const auto& [name, curve] : s.losses) {
    if (!curve.empty()) finals[name] = curve.back();
  }
  j["final_losses"] = finals;
  return j;
}

void ensure_dir(const std::string& dir) {
  std::filesystem::create_directories(dir);
}

}  // namespace

std::string report_to_json(const ExperimentReport& report) {
  json j;
  j["format_version"] = 1;
  j["command"] = report.command;
  j["methods"] = report.methods;
  json seeds = json::array();
  for (const auto& s : report.per_seed) seeds.push_back(seed_report_json(s));
  j["per_seed"] = seeds;
  j["mean_accuracy"] = report.mean_accuracy;
  j["mean_iou"] = report.mean_iou;
  return j.dump(2);
}

void write_report_json(const std::string& dir, const ExperimentReport& report) {
  ensure_dir(dir);
  std::ofstream out(dir + "/report.json");
  if (!out) throw std::runtime_error("cannot write report.json under " + dir);
  out << report_to_json(report) << "\n";
}

void write_losses_csv(const std::string& dir, const ExperimentReport& report) {
  ensure_dir(dir);
  auto write_one = [](const std::string& path, const SeedReport& s) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "step,component,value\n";
    char buf[64];
    for (const auto& [name, curve] : s.losses) {
      for (std::size_t step = 0; step < curve.size(); ++step) {
        std::snprintf(buf, sizeof(buf), "%.17g", curve[step]);
        out << step << "," << name << "," << buf << "\n";
      }
    }
  };
  if (report.per_seed.empty()) return;
  write_one(dir + "/losses.csv", report.per_seed.front());
  if (report.per_seed.size() > 1) {
    for (const auto& s : report.per_seed) {
      write_one(dir + "/losses_seed_" + std::to_string(s.seed) + ".csv", s);
    }
  }
}

void write_hist_csv(const std::string& dir, const MatchHistogram& hist) {
  ensure_dir(dir);
  std::ofstream out(dir + "/hist.csv");
  if (!out) throw std::runtime_error("cannot write hist.csv under " + dir);
  out << "delta,count\n";
  for (std::size_t i = 0; i < hist.counts.size(); ++i) {
    out << (static_cast<int>(i) - (hist.num_levels - 1)) << "," << hist.counts[i] << "\n";
  }
}

void write_corr_csv(const std::string& dir, const CorrDiffResult& corr) {
  ensure_dir(dir);
  std::ofstream out(dir + "/corr.csv");
  if (!out) throw std::runtime_error("cannot write corr.csv under " + dir);
  out << "row,col,value\n";
  char buf[64];
  for (int r = 0; r < corr.dim; ++r) {
    for (int c = 0; c < corr.dim; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g",
                    corr.diff[static_cast<std::size_t>(r) * corr.dim + c]);
      out << r << "," << c << "," << buf << "\n";
    }
  }
}

std::string mi_bound_report_json(const std::vector<MiBoundResult>& results) {
  json j;
  j["format_version"] = 1;
  j["command"] = "mi-bound";
  json arr = json::array();
  for (const auto& r : results) {
    json e;
    e["k"] = r.k;
    e["per_seed_bound"] = r.per_seed_bound;
    e["mean_bound"] = r.mean_bound;
    e["true_mi"] = r.true_mi;
    arr.push_back(e);
  }
  j["results"] = arr;
  return j.dump(2);
}

}  // namespace detkd
