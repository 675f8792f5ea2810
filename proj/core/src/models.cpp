#include "detkd/models.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace detkd {

namespace {

double pow2(int e) { return std::ldexp(1.0, e); }

}  // namespace

LinearMap::LinearMap(const std::string& name, int in, int out, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(in) * out);
  const double s = std::sqrt(2.0 / (in + out));
  for (auto& v : w) v = rng.normal(0.0, s);
  weight = Param(name + ".weight", Tensor({in, out}, std::move(w)));
  // Small positive bias keeps relu pre-activations off the exact kink
  // (finite-difference checks straddle x = 0 otherwise).
  bias = Param(name + ".bias", Tensor::full({out}, 0.01));
}

void LinearMap::init_identity() {
  const int in = in_dim(), out = out_dim();
  if (in != out) throw std::invalid_argument("identity init requires a square map");
  std::fill(weight.value.data.begin(), weight.value.data.end(), 0.0);
  for (int i = 0; i < in; ++i) weight.value.data[static_cast<std::size_t>(i) * out + i] = 1.0;
  std::fill(bias.value.data.begin(), bias.value.data.end(), 0.0);
}

Tensor LinearMap::apply(Tape* tape, const Tensor& x) const {
  const int in = in_dim(), out = out_dim();
  if (x.dim() < 1 || x.shape.back() != in) {
    throw std::invalid_argument("linear map input width mismatch for " + weight.name);
  }
  const int rows = static_cast<int>(x.size() / in);
  Tensor w = tape ? tape->watch(weight) : weight.value;
  Tensor b = tape ? tape->watch(bias) : bias.value;
  Tensor y = add_rowvec(matmul(reshape(x, {rows, in}), w), b);
  std::vector<int> out_shape = x.shape;
  out_shape.back() = out;
  return reshape(y, std::move(out_shape));
}

void LinearMap::collect(std::vector<Param*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

void LinearMap::collect(std::vector<const Param*>& out) const {
  out.push_back(&weight);
  out.push_back(&bias);
}

double FeaturePyramid::stride(int local) const {
  if (local < 0 || local >= num_levels()) throw std::invalid_argument("pyramid level out of range");
  return kBaseStride * pow2(local + level_offset);
}

ToyBackbone::ToyBackbone(const std::string& prefix, const BackboneSpec& spec_in, Rng& rng)
    : spec(spec_in) {
  level_maps.reserve(static_cast<std::size_t>(spec.num_levels));
  for (int l = 0; l < spec.num_levels; ++l) {
    level_maps.emplace_back(prefix + ".level" + std::to_string(l), spec.in_channels,
                            spec.channels, rng);
  }
}

FeaturePyramid ToyBackbone::forward(Tape* tape, const Tensor& scene_grid) const {
  if (scene_grid.dim() != 3 || scene_grid.shape[2] != spec.in_channels) {
    throw std::invalid_argument("backbone input must be [h x w x in_channels]");
  }
  const int div = 1 << (spec.num_levels + spec.level_offset + 1);
  if (scene_grid.shape[0] % div != 0 || scene_grid.shape[1] % div != 0) {
    throw std::invalid_argument("grid size not divisible by 2^(num_levels + level_offset + 1)");
  }

  FeaturePyramid pyr;
  pyr.level_offset = spec.level_offset;
  Tensor current = scene_grid;
  const int pre_pools = 2 + spec.level_offset;  // stride of local level 0
  for (int i = 0; i < pre_pools; ++i) current = avg_pool2x2(current);
  for (int l = 0; l < spec.num_levels; ++l) {
    pyr.levels.push_back(level_maps[static_cast<std::size_t>(l)].apply(tape, current));
    if (l + 1 < spec.num_levels) current = avg_pool2x2(current);
  }
  return pyr;
}

void ToyBackbone::collect(std::vector<Param*>& out) {
  for (auto& m : level_maps) m.collect(out);
}

void ToyBackbone::collect(std::vector<const Param*>& out) const {
  for (const auto& m : level_maps) m.collect(out);
}

TwoStageHead::TwoStageHead(const std::string& prefix, const TwoStageHeadSpec& spec_in, Rng& rng)
    : spec(spec_in),
      fc1(prefix + ".fc1", spec_in.input_dim(), spec_in.rep_dim, rng),
      fc2(prefix + ".fc2", spec_in.rep_dim, spec_in.rep_dim, rng),
      cls_out(prefix + ".cls_out", spec_in.rep_dim, spec_in.num_classes + 1, rng),
      reg_out(prefix + ".reg_out", spec_in.rep_dim, 4 * spec_in.num_classes, rng) {}

TwoStageHead::Output TwoStageHead::forward(Tape* tape, const Tensor& roi_feat) const {
  if (roi_feat.size() != spec.input_dim()) {
    throw std::invalid_argument("two-stage head input size mismatch");
  }
  Tape* tp = frozen ? nullptr : tape;
  Tensor x = reshape(roi_feat, {spec.input_dim()});
  Tensor h = relu(fc1.apply(tp, x));
  Tensor rep = relu(fc2.apply(tp, h));
  Output out;
  out.rep = rep;
  out.cls_logits = cls_out.apply(tp, rep);
  out.reg = reshape(reg_out.apply(tp, rep), {spec.num_classes, 4});
  return out;
}

void TwoStageHead::collect(std::vector<Param*>& out) {
  if (frozen) return;
  fc1.collect(out);
  fc2.collect(out);
  cls_out.collect(out);
  reg_out.collect(out);
}

void TwoStageHead::collect_all(std::vector<const Param*>& out) const {
  fc1.collect(out);
  fc2.collect(out);
  cls_out.collect(out);
  reg_out.collect(out);
}

void TwoStageHead::collect_all(std::vector<Param*>& out) {
  fc1.collect(out);
  fc2.collect(out);
  cls_out.collect(out);
  reg_out.collect(out);
}

TwoStageHead transfer_head(const TwoStageHead& teacher, const TwoStageHeadSpec& student_spec,
                           const std::string& prefix) {
  if (!(teacher.spec == student_spec)) {
    throw std::invalid_argument(
        "head transfer unsupported: student and teacher head shapes differ");
  }
  TwoStageHead head;
  head.spec = student_spec;
  auto copy = [&prefix](const LinearMap& src, const std::string& tag) {
    LinearMap m;
    m.weight = Param(prefix + "." + tag + ".weight", src.weight.value.detached());
    m.bias = Param(prefix + "." + tag + ".bias", src.bias.value.detached());
    return m;
  };
  head.fc1 = copy(teacher.fc1, "fc1");
  head.fc2 = copy(teacher.fc2, "fc2");
  head.cls_out = copy(teacher.cls_out, "cls_out");
  head.reg_out = copy(teacher.reg_out, "reg_out");
  head.frozen = true;
  return head;
}

DenseHead::DenseHead(const std::string& prefix, const DenseHeadSpec& spec_in, Rng& rng)
    : spec(spec_in),
      cls_t1(prefix + ".cls_t1", spec_in.in_channels, spec_in.anchors * spec_in.rep_dim, rng),
      cls_t2(prefix + ".cls_t2", spec_in.anchors * spec_in.rep_dim,
             spec_in.anchors * spec_in.rep_dim, rng),
      cls_out(prefix + ".cls_out", spec_in.anchors * spec_in.rep_dim,
              spec_in.anchors * (spec_in.num_classes + 1), rng),
      loc_t1(prefix + ".loc_t1", spec_in.in_channels, spec_in.anchors * spec_in.rep_dim, rng),
      loc_t2(prefix + ".loc_t2", spec_in.anchors * spec_in.rep_dim,
             spec_in.anchors * spec_in.rep_dim, rng),
      loc_out(prefix + ".loc_out", spec_in.anchors * spec_in.rep_dim, spec_in.anchors * 4, rng) {}

DenseHead::LevelOutput DenseHead::forward(Tape* tape, const Tensor& level) const {
  if (level.dim() != 3 || level.shape[2] != spec.in_channels) {
    throw std::invalid_argument("dense head input must be [h x w x in_channels]");
  }
  LevelOutput out;
  Tensor c = relu(cls_t1.apply(tape, level));
  out.cls_feat = relu(cls_t2.apply(tape, c));
  out.cls_logits = cls_out.apply(tape, out.cls_feat);
  Tensor l = relu(loc_t1.apply(tape, level));
  l = relu(loc_t2.apply(tape, l));
  out.reg = loc_out.apply(tape, l);
  return out;
}

void DenseHead::collect(std::vector<Param*>& out) {
  cls_t1.collect(out);
  cls_t2.collect(out);
  cls_out.collect(out);
  loc_t1.collect(out);
  loc_t2.collect(out);
  loc_out.collect(out);
}

void DenseHead::collect(std::vector<const Param*>& out) const {
  cls_t1.collect(out);
  cls_t2.collect(out);
  cls_out.collect(out);
  loc_t1.collect(out);
  loc_t2.collect(out);
  loc_out.collect(out);
}

Tensor decouple_anchor_rep(const Tensor& feature, int anchor_index, int anchors, int dim) {
  if (anchor_index < 0 || anchor_index >= anchors) {
    throw std::invalid_argument("anchor index out of range");
  }
  if (feature.size() != static_cast<std::int64_t>(anchors) * dim) {
    throw std::invalid_argument("feature width is not anchors * dim");
  }
  return slice(feature, static_cast<std::int64_t>(anchor_index) * dim, dim);
}

AdaptationMap::AdaptationMap(const std::string& prefix, int student_channels,
                             int teacher_channels, int num_levels, Rng& rng) {
  per_level.reserve(static_cast<std::size_t>(num_levels));
  for (int l = 0; l < num_levels; ++l) {
    per_level.emplace_back(prefix + ".level" + std::to_string(l), student_channels,
                           teacher_channels, rng);
    if (student_channels == teacher_channels) per_level.back().init_identity();
  }
}

Tensor AdaptationMap::apply(Tape* tape, int level, const Tensor& feat) const {
  if (level < 0 || level >= num_levels()) throw std::invalid_argument("adaptation level out of range");
  return per_level[static_cast<std::size_t>(level)].apply(tape, feat);
}

void AdaptationMap::collect(std::vector<Param*>& out) {
  for (auto& m : per_level) m.collect(out);
}

void AdaptationMap::collect(std::vector<const Param*>& out) const {
  for (const auto& m : per_level) m.collect(out);
}

EmbedNet::EmbedNet(const std::string& prefix, int in_channels, int key_dim_in, int roi_size_in,
                   Rng& rng)
    : roi_size(roi_size_in), key_dim(key_dim_in) {
  if (roi_size % 4 != 0) throw std::invalid_argument("embed net requires roi_size divisible by 4");
  const int cells = (roi_size / 4) * (roi_size / 4);
  if (key_dim % cells != 0) {
    throw std::invalid_argument("key_dim not divisible by final grid cell count");
  }
  const int c2 = key_dim / cells;
  l1 = LinearMap(prefix + ".l1", in_channels, key_dim, rng);
  l2 = LinearMap(prefix + ".l2", key_dim, c2, rng);
}

Tensor EmbedNet::forward(Tape* tape, const Tensor& roi_feat) const {
  if (roi_feat.dim() != 3 || roi_feat.shape[0] != roi_size || roi_feat.shape[1] != roi_size) {
    throw std::invalid_argument("embed net input must be [roi_size x roi_size x c]");
  }
  Tensor x = avg_pool2x2(roi_feat);
  x = relu(l1.apply(tape, x));
  x = avg_pool2x2(x);
  x = relu(l2.apply(tape, x));
  return reshape(x, {key_dim});
}

void EmbedNet::collect(std::vector<Param*>& out) {
  l1.collect(out);
  l2.collect(out);
}

void EmbedNet::collect(std::vector<const Param*>& out) const {
  l1.collect(out);
  l2.collect(out);
}

ProjectionHead::ProjectionHead(const std::string& prefix, int rep_dim, int proj_dim, Rng& rng)
    : map(prefix + ".proj", rep_dim, proj_dim, rng) {}

Tensor ProjectionHead::apply(Tape* tape, const Tensor& rep) const {
  return map.apply(tape, rep);
}

void ProjectionHead::collect(std::vector<Param*>& out) { map.collect(out); }

void ProjectionHead::collect(std::vector<const Param*>& out) const { map.collect(out); }

Tensor roi_align(const Tensor& level, const Box& box, double stride, int out_size) {
  if (level.dim() != 3) throw std::invalid_argument("roi_align level must be [h x w x c]");
  if (!box.valid()) throw std::invalid_argument("roi_align of degenerate box");
  if (out_size < 1 || stride <= 0.0) throw std::invalid_argument("roi_align bad arguments");
  const int h = level.shape[0], w = level.shape[1], c = level.shape[2];
  const int p = out_size;

  struct SamplePoint {
    int x0, x1, y0, y1;
    double wx, wy;
  };
  std::vector<SamplePoint> pts(static_cast<std::size_t>(p) * p);
  for (int gy = 0; gy < p; ++gy) {
    for (int gx = 0; gx < p; ++gx) {
      double px = (box.x1 + (gx + 0.5) * box.width() / p) / stride - 0.5;
      double py = (box.y1 + (gy + 0.5) * box.height() / p) / stride - 0.5;
      px = std::clamp(px, 0.0, static_cast<double>(w - 1));
      py = std::clamp(py, 0.0, static_cast<double>(h - 1));
      SamplePoint s;
      s.x0 = static_cast<int>(px);
      s.y0 = static_cast<int>(py);
      s.x1 = std::min(s.x0 + 1, w - 1);
      s.y1 = std::min(s.y0 + 1, h - 1);
      s.wx = px - s.x0;
      s.wy = py - s.y0;
      pts[static_cast<std::size_t>(gy) * p + gx] = s;
    }
  }

  auto at = [w, c](int y, int x, int ch) {
    return static_cast<std::size_t>((y * w + x) * c + ch);
  };
  std::vector<double> out(static_cast<std::size_t>(p) * p * c);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto& s = pts[i];
    for (int ch = 0; ch < c; ++ch) {
      const double top = (1.0 - s.wx) * level.data[at(s.y0, s.x0, ch)] +
                         s.wx * level.data[at(s.y0, s.x1, ch)];
      const double bot = (1.0 - s.wx) * level.data[at(s.y1, s.x0, ch)] +
                         s.wx * level.data[at(s.y1, s.x1, ch)];
      out[i * c + ch] = (1.0 - s.wy) * top + s.wy * bot;
    }
  }

  if (!level.tracked()) return Tensor({p, p, c}, std::move(out));

  const int node = level.node;
  return level.tape->record(
      {p, p, c}, std::move(out), {node},
      [node, pts = std::move(pts), w, c](Tape& t, const std::vector<double>& gout) {
        auto& g = t.accum(node);
        auto at = [w, c](int y, int x, int ch) {
          return static_cast<std::size_t>((y * w + x) * c + ch);
        };
        for (std::size_t i = 0; i < pts.size(); ++i) {
          const auto& s = pts[i];
          for (int ch = 0; ch < c; ++ch) {
            const double go = gout[i * c + ch];
            g[at(s.y0, s.x0, ch)] += go * (1.0 - s.wx) * (1.0 - s.wy);
            g[at(s.y0, s.x1, ch)] += go * s.wx * (1.0 - s.wy);
            g[at(s.y1, s.x0, ch)] += go * (1.0 - s.wx) * s.wy;
            g[at(s.y1, s.x1, ch)] += go * s.wx * s.wy;
          }
        }
      });
}

Tensor roi_align(const FeaturePyramid& pyramid, const Box& box, int local_level, int out_size) {
  if (local_level < 0 || local_level >= pyramid.num_levels()) {
    throw std::invalid_argument("roi_align level out of range");
  }
  return roi_align(pyramid.levels[static_cast<std::size_t>(local_level)], box,
                   pyramid.stride(local_level), out_size);
}

Box dense_prior_box(double stride, int y, int x, int anchor_index, int num_anchors) {
  const double cx = (x + 0.5) * stride;
  const double cy = (y + 0.5) * stride;
  const double side = stride * 3.0 * std::pow(2.0, static_cast<double>(anchor_index) / num_anchors);
  return Box{cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0};
}

std::array<double, 4> encode_box_delta(const Box& proposal, const Box& target) {
  const double pw = proposal.width(), ph = proposal.height();
  return {(target.x1 - proposal.x1) / pw, (target.y1 - proposal.y1) / ph,
          (target.x2 - proposal.x2) / pw, (target.y2 - proposal.y2) / ph};
}

Box apply_box_delta(const Box& proposal, const std::array<double, 4>& delta) {
  const double pw = proposal.width(), ph = proposal.height();
  return Box{proposal.x1 + delta[0] * pw, proposal.y1 + delta[1] * ph,
             proposal.x2 + delta[2] * pw, proposal.y2 + delta[3] * ph};
}

}  // namespace detkd
