#pragma once

#include "detkd/checkpoint.hpp"
#include "detkd/ckd.hpp"
#include "detkd/config.hpp"
#include "detkd/models.hpp"
#include "detkd/oracle.hpp"
#include "detkd/pred_kd.hpp"
#include "detkd/scene.hpp"
#include "detkd/sgfi.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace detkd {

struct TwoStageDetector {
  ModelSpec spec;
  ToyBackbone backbone;
  TwoStageHead head;

  TwoStageDetector() = default;
  TwoStageDetector(const std::string& prefix, const ModelSpec& spec_in, int num_classes,
                   int in_channels, int roi_size, Rng& rng);

  void collect(std::vector<Param*>& out);  // trainable
  void collect_all(std::vector<Param*>& out);
  void collect_all(std::vector<const Param*>& out) const;
};

struct DenseDetector {
  ModelSpec spec;
  ToyBackbone backbone;
  DenseHead head;

  DenseDetector() = default;
  DenseDetector(const std::string& prefix, const ModelSpec& spec_in, int num_classes,
                int in_channels, Rng& rng);

  void collect(std::vector<Param*>& out);
  void collect_all(std::vector<Param*>& out);
  void collect_all(std::vector<const Param*>& out) const;
};

/// Trained student state after a distillation run.
struct StudentBundle {
  ModelSpec spec;
  TwoStageDetector two_stage;  // used when !spec.is_dense()
  DenseDetector dense;         // used when spec.is_dense()
  SgfiComponents sgfi;
  bool sgfi_built = false;
  ProjectionHead proj;
  bool proj_built = false;

  const ToyBackbone& backbone() const { return spec.is_dense() ? dense.backbone : two_stage.backbone; }
};

struct SeedReport {
  std::uint64_t seed = 0;
  std::map<std::string, std::vector<double>> losses;  // per enabled component, per step
  double final_accuracy = 0.0;
  double final_mean_iou = 0.0;
  int steps = 0;
};

struct ExperimentReport {
  std::string command;
  std::vector<std::string> methods;
  std::vector<SeedReport> per_seed;
  double mean_accuracy = 0.0;
  double mean_iou = 0.0;
};

struct Metrics {
  double accuracy = 0.0;
  double mean_iou = 0.0;
};

/// Local pyramid level of a model for a box: the global scale heuristic
/// shifted by the model's level offset, clamped to its levels.
int local_assigned_level(const Box& box, const ModelSpec& spec);

SamplerContext make_sampler_context(const ExperimentConfig& cfg);

/// Training scenes derive from cfg.seed alone (the fixed dataset); eval
/// scenes use a disjoint stream.
std::vector<Scene> build_scene_set(const ExperimentConfig& cfg);
std::vector<Scene> build_eval_scenes(const ExperimentConfig& cfg);

// -- teacher -----------------------------------------------------------

struct TeacherBundle {
  TwoStageDetector model;
  SeedReport report;
};

/// Trains the two-stage teacher on ground-truth losses only.
TeacherBundle train_teacher(const ExperimentConfig& cfg);

void save_teacher(const std::string& path, const TwoStageDetector& teacher);
TwoStageDetector load_teacher(const std::string& path, const ExperimentConfig& cfg);

Metrics evaluate_two_stage(const TwoStageDetector& model, const std::vector<Scene>& scenes,
                           const ExperimentConfig& cfg, std::uint64_t seed);
Metrics evaluate_dense(const DenseDetector& model, const std::vector<Scene>& scenes,
                       const ExperimentConfig& cfg, std::uint64_t seed);

// -- distillation ------------------------------------------------------

struct DistillResult {
  SeedReport report;
  StudentBundle student;
};

DistillResult distill_one(const ExperimentConfig& cfg, const TwoStageDetector& teacher,
                          const std::vector<Scene>& scenes, const std::vector<Scene>& eval_scenes,
                          std::uint64_t run_seed);

/// Runs every seed in cfg.run_seeds(); DETKD_THREADS bounds worker
/// parallelism (each run is fully isolated).
ExperimentReport distill(const ExperimentConfig& cfg, const TwoStageDetector& teacher);

/// Student initialized as an exact copy of the teacher, with fresh
/// (identity-adaptation) imitation components; the self-match fixture for
/// the level-matching analysis.
StudentBundle make_teacher_copy_student(const TwoStageDetector& teacher,
                                        const ExperimentConfig& cfg, std::uint64_t seed);

// -- analyses ----------------------------------------------------------

/// Histogram of (student best-matching level) - (teacher assigned level),
/// both as local pyramid indices, over positive proposals.
struct MatchHistogram {
  int num_levels = 0;                 // L; delta spans [-(L-1), L-1]
  std::vector<std::int64_t> counts;   // index = delta + L - 1

  std::int64_t total() const;
  int mode_delta() const;
  double mass_within(int radius) const;  // fraction with |delta| <= radius
};

MatchHistogram match_level_histogram(const StudentBundle& student, const TwoStageDetector& teacher,
                                     const std::vector<Scene>& scenes,
                                     const ExperimentConfig& cfg, std::uint64_t seed);

/// Difference of class-pair Pearson correlation matrices of student and
/// teacher classification logits over positive proposals.
struct CorrDiffResult {
  int dim = 0;                // C + 1
  std::vector<double> diff;   // row-major dim x dim
  double frobenius = 0.0;
  bool zero_variance_warning = false;
};

CorrDiffResult logits_correlation_diff(const StudentBundle& student,
                                       const TwoStageDetector& teacher,
                                       const std::vector<Scene>& scenes,
                                       const ExperimentConfig& cfg, std::uint64_t seed);

// -- mutual-information bound experiment --------------------------------

struct MiBoundParams {
  double rho = 0.8;
  int dim = 8;
  int proj_dim = 8;
  double gamma = 0.2;
  std::vector<int> k_list{32, 128, 512};
  int steps = 250;
  int batch_anchors = 8;
  int eval_batches = 25;
  int eval_anchors = 16;
  double lr = 0.05;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
};

struct MiBoundResult {
  int k = 0;
  std::vector<double> per_seed_bound;
  double mean_bound = 0.0;
  double true_mi = 0.0;
};

/// Trains the shared projection on correlated Gaussian pairs by
/// minimizing the contrastive loss and reports log(K) - loss per K next
/// to the analytic mutual information.
std::vector<MiBoundResult> mi_bound_experiment(const MiBoundParams& params);

// -- verification suites -------------------------------------------------

struct GradcheckSummary {
  std::vector<std::pair<std::string, double>> per_loss_worst;
  double tolerance = 1e-4;

  bool passed() const;
  double worst() const;
};

/// Finite-difference check of every distillation loss against the tape
/// gradients on small random fixtures.
GradcheckSummary run_gradcheck_suite(std::uint64_t seed);

struct OracleCheckSummary {
  int instances = 0;
  double max_abs_diff = 0.0;
  bool passed = false;
};

/// Tensor InfoNCE vs the scalar brute-force oracle on random instances.
OracleCheckSummary run_oracle_equivalence(std::uint64_t seed, int instances, int max_anchors,
                                          int max_negatives);

// -- report output -------------------------------------------------------

std::string report_to_json(const ExperimentReport& report);
void write_report_json(const std::string& dir, const ExperimentReport& report);
void write_losses_csv(const std::string& dir, const ExperimentReport& report);
void write_hist_csv(const std::string& dir, const MatchHistogram& hist);
void write_corr_csv(const std::string& dir, const CorrDiffResult& corr);
std::string mi_bound_report_json(const std::vector<MiBoundResult>& results);

/// DETKD_THREADS, default 1.
int worker_thread_count();

}  // namespace detkd
