#pragma once

#include "detkd/ckd.hpp"
#include "detkd/optim.hpp"
#include "detkd/scene.hpp"
#include "detkd/sgfi.hpp"

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace detkd {

/// Config or schema problem; the CLI maps this to exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// NaN or divergence during a run; the CLI maps this to exit code 2.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Method {
  sgfi,
  ckd,
  pred_cls,
  pred_reg_naive,
  pred_reg_ca,
  head_transfer,
  mask_whole,
  mask_gt,
};

const char* method_name(Method m);
Method method_from_name(const std::string& name);

struct ModelSpec {
  std::string family = "two_stage";  // "two_stage" or "dense"
  int channels = 8;
  int rep_dim = 16;
  int num_levels = 4;
  int level_offset = 0;
  int anchors = 2;  // dense heads only

  bool is_dense() const { return family == "dense"; }
};

struct ExperimentConfig {
  SceneParams scene;
  int num_scenes = 200;
  ModelSpec teacher;
  ModelSpec student;
  SgdConfig optim;  // total_steps is the training length
  SgfiConfig sgfi;
  CkdConfig ckd;
  std::set<Method> methods;
  std::map<std::string, double> loss_weights;  // default 1.0 per part

  int proposals_per_scene = 64;
  double pos_fraction = 0.25;
  double jitter = 0.15;
  double dense_roi_iou_threshold = 0.5;
  int dense_roi_neg_ratio = 3;

  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds;  // overrides seed when nonempty

  int eval_scenes = 16;
  int eval_proposals = 32;

  std::vector<std::uint64_t> run_seeds() const;
  double weight_for(const std::string& part) const;
  bool has(Method m) const { return methods.count(m) > 0; }
};

/// Parses and validates; unknown keys are rejected with their field path,
/// and method/pair-type invariants are enforced (head transfer and the
/// mask baselines and per-class regression KD require a homogeneous
/// two-stage pair).
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

void validate_experiment_config(const ExperimentConfig& cfg);

}  // namespace detkd
