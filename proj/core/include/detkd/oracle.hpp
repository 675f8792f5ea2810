#pragma once

#include <functional>
#include <string>
#include <vector>

namespace detkd::oracle {

// Verification engines, deliberately written against plain scalars with no
// tensor or tape code: their value comes from being an independent route
// to the same numbers.

/// One anchor for the brute-force contrastive loss. Raw representations,
/// not yet projected.
struct ScalarPair {
  std::vector<double> student_rep;
  std::vector<double> teacher_rep;
  std::vector<std::vector<double>> negatives;
};

/// Plain copy of a linear projection y = x W + b, W is [in x out]
/// row-major.
struct ScalarProjection {
  int in = 0;
  int out = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  std::vector<double> apply(const std::vector<double>& x) const;
};

/// Loop-and-scalar InfoNCE; must agree with the tensor implementation to
/// 1e-9.
double brute_force_infonce(const std::vector<ScalarPair>& pairs, const ScalarProjection& proj,
                           double gamma);

/// Central differences (f(p+h) - f(p-h)) / 2h per coordinate.
/// `params` is a set of flat parameter vectors f reads from.
std::vector<std::vector<double>> finite_diff_grad(
    const std::function<double()>& f, const std::vector<std::vector<double>*>& params,
    double h = 1e-5);

struct GradCheckEntry {
  std::string param_name;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double step = 1e-5;
  double tolerance = 1e-4;

  double worst() const;
  bool passed() const { return worst() <= tolerance; }
};

/// rel err = |ga - gn| / max(|ga|, |gn|, 1e-8), elementwise max per param.
/// Differences at or below `noise_floor` count as agreement: central
/// differences at step h on a 64-bit loss f carry cancellation noise of
/// order |f| eps / h, so smaller differences are unmeasurable rather than
/// meaningful.
GradCheckReport compare_gradients(const std::vector<std::string>& names,
                                  const std::vector<std::vector<double>>& analytic,
                                  const std::vector<std::vector<double>>& numeric,
                                  double step = 1e-5, double tolerance = 1e-4,
                                  double noise_floor = 0.0);

/// Mutual information of d independent coordinate pairs of unit Gaussians
/// with correlation rho: -(d/2) ln(1 - rho^2) nats. Requires |rho| < 1.
double gaussian_mi_true(double rho, int dim);

}  // namespace detkd::oracle
