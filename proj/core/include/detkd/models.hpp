#pragma once

#include "detkd/geometry.hpp"
#include "detkd/ops.hpp"
#include "detkd/rng.hpp"
#include "detkd/tensor.hpp"

#include <array>
#include <string>
#include <vector>

namespace detkd {

/// Stride of the finest pyramid level at global index 0.
inline constexpr double kBaseStride = 4.0;

/// Linear map applied along the last axis; the per-position "conv" of the
/// toy models. `tape == nullptr` keeps the parameters constant (frozen or
/// teacher-side use) while still letting gradients flow through the input.
struct LinearMap {
  Param weight;  // [in x out]
  Param bias;    // [out]

  LinearMap() = default;
  LinearMap(const std::string& name, int in, int out, Rng& rng);

  void init_identity();  // square maps only

  int in_dim() const { return weight.value.shape[0]; }
  int out_dim() const { return weight.value.shape[1]; }

  Tensor apply(Tape* tape, const Tensor& x) const;

  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;
};

/// Ordered feature grids, halving spatially per level. `level_offset` is
/// the global index of the first level; the stride of local level l is
/// kBaseStride * 2^(l + level_offset), so pyramids with different offsets
/// cover shifted scale ranges (the two-stage vs dense misalignment).
struct FeaturePyramid {
  std::vector<Tensor> levels;
  int level_offset = 0;

  int num_levels() const { return static_cast<int>(levels.size()); }
  double stride(int local) const;
};

struct BackboneSpec {
  int in_channels = 4;
  int channels = 8;
  int num_levels = 4;
  int level_offset = 0;
};

/// Per-level channel maps over a progressively pooled input grid.
struct ToyBackbone {
  BackboneSpec spec;
  std::vector<LinearMap> level_maps;

  ToyBackbone() = default;
  ToyBackbone(const std::string& prefix, const BackboneSpec& spec_in, Rng& rng);

  /// Requires H and W divisible by 2^(num_levels + level_offset + 1).
  FeaturePyramid forward(Tape* tape, const Tensor& scene_grid) const;

  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;
};

struct TwoStageHeadSpec {
  int roi_channels = 8;
  int roi_size = 4;
  int rep_dim = 16;
  int num_classes = 5;

  int input_dim() const { return roi_size * roi_size * roi_channels; }
  bool operator==(const TwoStageHeadSpec&) const = default;
};

/// RCNN-style head: two fc+relu layers to the penultimate representation,
/// then C+1 class logits (background at index 0) and 4 per-class
/// regression values.
struct TwoStageHead {
  TwoStageHeadSpec spec;
  LinearMap fc1, fc2, cls_out, reg_out;
  bool frozen = false;

  TwoStageHead() = default;
  TwoStageHead(const std::string& prefix, const TwoStageHeadSpec& spec_in, Rng& rng);

  struct Output {
    Tensor rep;         // [rep_dim]
    Tensor cls_logits;  // [num_classes + 1]
    Tensor reg;         // [num_classes x 4]
  };
  Output forward(Tape* tape, const Tensor& roi_feat) const;

  /// Trainable params; empty while frozen.
  void collect(std::vector<Param*>& out);
  /// Everything, frozen or not (checkpoints).
  void collect_all(std::vector<const Param*>& out) const;
  void collect_all(std::vector<Param*>& out);
};

/// Copies the teacher head and freezes it. Throws unless the student spec
/// matches exactly; transfer across head families is unsupported.
TwoStageHead transfer_head(const TwoStageHead& teacher, const TwoStageHeadSpec& student_spec,
                           const std::string& prefix);

struct DenseHeadSpec {
  int in_channels = 8;
  int anchors = 2;
  int rep_dim = 16;
  int num_classes = 5;
  bool operator==(const DenseHeadSpec&) const = default;
};

/// Dense (one-stage) head with separate classification and localization
/// branches applied per grid position. The classification tower's final
/// feature holds `anchors` contiguous groups of rep_dim channels; logits
/// are per-anchor C+1 with background at index 0 so dense scores convert
/// to teacher-style class scores.
struct DenseHead {
  DenseHeadSpec spec;
  LinearMap cls_t1, cls_t2, cls_out;
  LinearMap loc_t1, loc_t2, loc_out;

  DenseHead() = default;
  DenseHead(const std::string& prefix, const DenseHeadSpec& spec_in, Rng& rng);

  struct LevelOutput {
    Tensor cls_feat;    // [H x W x anchors*rep_dim]
    Tensor cls_logits;  // [H x W x anchors*(num_classes+1)]
    Tensor reg;         // [H x W x anchors*4]
  };
  LevelOutput forward(Tape* tape, const Tensor& level) const;

  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;
};

/// Contiguous per-anchor slice [index*dim, (index+1)*dim) of a dense
/// feature vector of width anchors*dim.
Tensor decouple_anchor_rep(const Tensor& feature, int anchor_index, int anchors, int dim);

/// Per-level linear maps from student channels to teacher channels.
/// Square maps initialize to identity.
struct AdaptationMap {
  std::vector<LinearMap> per_level;

  AdaptationMap() = default;
  AdaptationMap(const std::string& prefix, int student_channels, int teacher_channels,
                int num_levels, Rng& rng);

  Tensor apply(Tape* tape, int level, const Tensor& feat) const;
  int num_levels() const { return static_cast<int>(per_level.size()); }

  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;
};

/// Two stages of (2x2 average pool, per-position linear, relu), then a
/// flatten to the key vector. Requires roi_size divisible by 4 and
/// key_dim divisible by (roi_size/4)^2.
struct EmbedNet {
  LinearMap l1, l2;
  int roi_size = 4;
  int key_dim = 16;

  EmbedNet() = default;
  EmbedNet(const std::string& prefix, int in_channels, int key_dim_in, int roi_size_in, Rng& rng);

  Tensor forward(Tape* tape, const Tensor& roi_feat) const;  // [P x P x C] -> [key_dim]

  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;
};

/// Single linear projection shared between student and teacher
/// representations.
struct ProjectionHead {
  LinearMap map;

  ProjectionHead() = default;
  ProjectionHead(const std::string& prefix, int rep_dim, int proj_dim, Rng& rng);

  Tensor apply(Tape* tape, const Tensor& rep) const;

  void collect(std::vector<Param*>& out);
  void collect(std::vector<const Param*>& out) const;
};

/// Bilinear P x P sampling of a box from one pyramid level. Differentiable
/// w.r.t. the level's features (the box is a constant). Sample points are
/// the centers of a regular P x P grid over the box, mapped through the
/// stride; indices clamp at the border.
Tensor roi_align(const Tensor& level, const Box& box, double stride, int out_size);

/// Level-checked variant over a pyramid (local level index).
Tensor roi_align(const FeaturePyramid& pyramid, const Box& box, int local_level, int out_size);

/// Square prior box for a dense-head cell, side stride * 3 * 2^(a / A).
Box dense_prior_box(double stride, int y, int x, int anchor_index, int num_anchors);

/// Corner-offset regression encoding, normalized by proposal size.
std::array<double, 4> encode_box_delta(const Box& proposal, const Box& target);
Box apply_box_delta(const Box& proposal, const std::array<double, 4>& delta);

}  // namespace detkd
