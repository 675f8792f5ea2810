// Command-line front end: synthetic-scene teacher training, distillation
// experiments, gradient and oracle verification, and the matching /
// correlation / MI-bound analyses. Exit codes: 0 success, 1 config error,
// 2 numerical failure.

#include "detkd/harness.hpp"

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

namespace {

using namespace detkd;

ExperimentConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  return load_experiment_config(path);
}

void apply_overrides(ExperimentConfig& cfg, const std::string& method_csv,
                     std::int64_t seed, const std::vector<std::uint64_t>& seeds) {
  if (!method_csv.empty()) {
    cfg.methods.clear();
    std::stringstream ss(method_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) cfg.methods.insert(method_from_name(item));
    }
    validate_experiment_config(cfg);
  }
  if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
  if (!seeds.empty()) cfg.seeds = seeds;
}

int cmd_train_teacher(const std::string& config_path, const std::string& out_dir,
                      std::int64_t seed) {
  ExperimentConfig cfg = load_config_or_default(config_path);
  apply_overrides(cfg, "", seed, {});
  TeacherBundle bundle = train_teacher(cfg);

  std::filesystem::create_directories(out_dir);
  save_teacher(out_dir + "/teacher.json", bundle.model);
  ExperimentReport report;
  report.command = "train-teacher";
  report.per_seed.push_back(bundle.report);
  report.mean_accuracy = bundle.report.final_accuracy;
  report.mean_iou = bundle.report.final_mean_iou;
  write_report_json(out_dir, report);
  write_losses_csv(out_dir, report);
  std::printf("teacher trained: accuracy %.4f mean-iou %.4f -> %s/teacher.json\n",
              bundle.report.final_accuracy, bundle.report.final_mean_iou, out_dir.c_str());
  return 0;
}

int cmd_distill(const std::string& config_path, const std::string& teacher_path,
                const std::string& out_dir, std::int64_t seed,
                const std::vector<std::uint64_t>& seeds, const std::string& method_csv) {
  ExperimentConfig cfg = load_config_or_default(config_path);
  apply_overrides(cfg, method_csv, seed, seeds);
  TwoStageDetector teacher = load_teacher(teacher_path, cfg);
  ExperimentReport report = distill(cfg, teacher);
  write_report_json(out_dir, report);
  write_losses_csv(out_dir, report);
  std::printf("distilled %zu seed(s): mean accuracy %.4f mean-iou %.4f -> %s/report.json\n",
              report.per_seed.size(), report.mean_accuracy, report.mean_iou, out_dir.c_str());
  return 0;
}

int cmd_gradcheck(std::int64_t seed, int seeds, const std::string& out_dir) {
  bool all_pass = true;
  double worst = 0.0;
  for (int s = 0; s < seeds; ++s) {
    const auto summary = run_gradcheck_suite(static_cast<std::uint64_t>(seed + s));
    for (const auto& [name, err] : summary.per_loss_worst) {
      const bool ok = err <= summary.tolerance;
      all_pass = all_pass && ok;
      worst = std::max(worst, err);
      std::printf("[%s] seed %lld loss %-16s rel-err %.3e\n", ok ? "PASS" : "FAIL",
                  static_cast<long long>(seed + s), name.c_str(), err);
    }
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir + "/gradcheck.txt");
    out << "worst_rel_error " << worst << "\npassed " << (all_pass ? 1 : 0) << "\n";
  }
  std::printf("gradcheck %s (worst rel err %.3e)\n", all_pass ? "passed" : "FAILED", worst);
  return all_pass ? 0 : 2;
}

int cmd_oracle_check(std::int64_t seed, int instances) {
  const auto summary = run_oracle_equivalence(static_cast<std::uint64_t>(seed), instances, 64, 256);
  std::printf("[%s] oracle equivalence: %d instances, max |diff| %.3e\n",
              summary.passed ? "PASS" : "FAIL", summary.instances, summary.max_abs_diff);
  return summary.passed ? 0 : 2;
}

int cmd_mi_bound(double rho, int dim, const std::string& k_csv, int steps, int num_seeds,
                 const std::string& out_dir) {
  MiBoundParams params;
  params.rho = rho;
  params.dim = dim;
  params.steps = steps;
  params.seeds.clear();
  for (int s = 1; s <= num_seeds; ++s) params.seeds.push_back(static_cast<std::uint64_t>(s));
  if (!k_csv.empty()) {
    params.k_list.clear();
    std::stringstream ss(k_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) params.k_list.push_back(std::stoi(item));
    }
  }
  const auto results = mi_bound_experiment(params);
  for (const auto& r : results) {
    std::printf("K=%-5d mean bound %.4f nats (true MI %.4f)\n", r.k, r.mean_bound, r.true_mi);
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir + "/report.json");
    out << mi_bound_report_json(results) << "\n";
  }
  return 0;
}

int cmd_match_hist(const std::string& config_path, const std::string& teacher_path,
                   const std::string& out_dir, std::int64_t seed) {
  ExperimentConfig cfg = load_config_or_default(config_path);
  apply_overrides(cfg, "", seed, {});
  TwoStageDetector teacher = load_teacher(teacher_path, cfg);

  const auto scenes = build_scene_set(cfg);
  const auto eval_scenes = build_eval_scenes(cfg);
  StudentBundle student;
  if (cfg.methods.empty()) {
    // No training requested: analyze the self-match fixture.
    student = make_teacher_copy_student(teacher, cfg, cfg.seed);
  } else {
    student = distill_one(cfg, teacher, scenes, eval_scenes, cfg.seed).student;
  }
  const auto hist = match_level_histogram(student, teacher, eval_scenes, cfg, cfg.seed);
  write_hist_csv(out_dir, hist);
  std::printf("match histogram over %lld proposals, mode delta %d -> %s/hist.csv\n",
              static_cast<long long>(hist.total()), hist.mode_delta(), out_dir.c_str());
  return 0;
}

int cmd_corr_diff(const std::string& config_path, const std::string& teacher_path,
                  const std::string& out_dir, std::int64_t seed) {
  ExperimentConfig cfg = load_config_or_default(config_path);
  apply_overrides(cfg, "", seed, {});
  TwoStageDetector teacher = load_teacher(teacher_path, cfg);

  const auto scenes = build_scene_set(cfg);
  const auto eval_scenes = build_eval_scenes(cfg);
  StudentBundle student = distill_one(cfg, teacher, scenes, eval_scenes, cfg.seed).student;
  const auto corr = logits_correlation_diff(student, teacher, eval_scenes, cfg, cfg.seed);
  write_corr_csv(out_dir, corr);
  std::printf("correlation diff frobenius %.4f%s -> %s/corr.csv\n", corr.frobenius,
              corr.zero_variance_warning ? " (zero-variance dims zeroed)" : "", out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale detector distillation laboratory"};
  app.require_subcommand(1);

  std::string config_path, teacher_path, out_dir = "results", method_csv, k_csv;
  std::int64_t seed = -1;
  std::vector<std::uint64_t> seeds;
  int gradcheck_seeds = 10, oracle_instances = 100;
  double rho = 0.8;
  int mi_dim = 8, mi_steps = 250, mi_seeds = 5;

  auto* train = app.add_subcommand("train-teacher", "train the two-stage teacher");
  train->add_option("--config", config_path, "experiment config JSON");
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--seed", seed, "seed override");

  auto* dist = app.add_subcommand("distill", "distill a student from a teacher checkpoint");
  dist->add_option("--config", config_path, "experiment config JSON");
  dist->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  dist->add_option("--out", out_dir, "output directory")->required();
  dist->add_option("--seed", seed, "seed override");
  dist->add_option("--seeds", seeds, "run one experiment per seed");
  dist->add_option("--method", method_csv, "comma list overriding config methods");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every loss");
  grad->add_option("--seed", seed, "base seed");
  grad->add_option("--seeds", gradcheck_seeds, "number of seeds");
  grad->add_option("--out", out_dir, "optional output directory");

  auto* orc = app.add_subcommand("oracle-check", "tensor vs brute-force InfoNCE equivalence");
  orc->add_option("--seed", seed, "base seed");
  orc->add_option("--n", oracle_instances, "random instances");

  auto* mib = app.add_subcommand("mi-bound", "contrastive mutual-information bound experiment");
  mib->add_option("--rho", rho, "gaussian correlation");
  mib->add_option("--dim", mi_dim, "coordinate pairs");
  mib->add_option("--k-list", k_csv, "comma list of negative counts");
  mib->add_option("--steps", mi_steps, "training steps per run");
  mib->add_option("--seeds", mi_seeds, "seeds per K");
  mib->add_option("--out", out_dir, "output directory");

  auto* hist = app.add_subcommand("match-hist", "pyramid level matching histogram");
  hist->add_option("--config", config_path, "experiment config JSON");
  hist->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  hist->add_option("--out", out_dir, "output directory")->required();
  hist->add_option("--seed", seed, "seed override");

  auto* corr = app.add_subcommand("corr-diff", "classification-logit correlation difference");
  corr->add_option("--config", config_path, "experiment config JSON");
  corr->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  corr->add_option("--out", out_dir, "output directory")->required();
  corr->add_option("--seed", seed, "seed override");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train_teacher(config_path, out_dir, seed);
    if (dist->parsed()) return cmd_distill(config_path, teacher_path, out_dir, seed, seeds, method_csv);
    if (grad->parsed()) {
      return cmd_gradcheck(seed < 0 ? 1 : seed, gradcheck_seeds,
                           out_dir == "results" ? "" : out_dir);
    }
    if (orc->parsed()) return cmd_oracle_check(seed < 0 ? 1 : seed, oracle_instances);
    if (mib->parsed()) return cmd_mi_bound(rho, mi_dim, k_csv, mi_steps, mi_seeds, out_dir);
    if (hist->parsed()) return cmd_match_hist(config_path, teacher_path, out_dir, seed);
    if (corr->parsed()) return cmd_corr_diff(config_path, teacher_path, out_dir, seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
