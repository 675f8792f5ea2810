#include "detkd/oracle.hpp"

#include <cmath>
#include <stdexcept>

namespace detkd::oracle {

std::vector<double> ScalarProjection::apply(const std::vector<double>& x) const {
  if (static_cast<int>(x.size()) != in) throw std::invalid_argument("projection input mismatch");
  std::vector<double> y(static_cast<std::size_t>(out), 0.0);
  for (int j = 0; j < out; ++j) {
    double s = bias[static_cast<std::size_t>(j)];
    for (int i = 0; i < in; ++i) {
      s += x[static_cast<std::size_t>(i)] * weight[static_cast<std::size_t>(i) * out + j];
    }
    y[static_cast<std::size_t>(j)] = s;
  }
  return y;
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return dot / (denom > 1e-12 ? denom : 1e-12);
}

}  // namespace

double brute_force_infonce(const std::vector<ScalarPair>& pairs, const ScalarProjection& proj,
                           double gamma) {
  if (gamma <= 0.0) throw std::invalid_argument("gamma must be positive");
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& pair : pairs) {
    const auto ps = proj.apply(pair.student_rep);
    const auto pt = proj.apply(pair.teacher_rep);
    const double g_pos = std::exp(cosine(ps, pt) / gamma);
    double denom = g_pos;
    for (const auto& neg : pair.negatives) {
      denom += std::exp(cosine(ps, proj.apply(neg)) / gamma);
    }
    total += -std::log(g_pos / denom);
  }
  return total / static_cast<double>(pairs.size());
}

std::vector<std::vector<double>> finite_diff_grad(
    const std::function<double()>& f, const std::vector<std::vector<double>*>& params,
    double h) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (std::vector<double>* p : params) {
    std::vector<double> g(p->size(), 0.0);
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double keep = (*p)[i];
      (*p)[i] = keep + h;
      const double up = f();
      (*p)[i] = keep - h;
      const double down = f();
      (*p)[i] = keep;
      g[i] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_error);
  return w;
}

GradCheckReport compare_gradients(const std::vector<std::string>& names,
                                  const std::vector<std::vector<double>>& analytic,
                                  const std::vector<std::vector<double>>& numeric,
                                  double step, double tolerance, double noise_floor) {
  if (analytic.size() != numeric.size() || analytic.size() != names.size()) {
    throw std::invalid_argument("gradient list size mismatch");
  }
  GradCheckReport report;
  report.step = step;
  report.tolerance = tolerance;
  for (std::size_t p = 0; p < analytic.size(); ++p) {
    if (analytic[p].size() != numeric[p].size()) {
      throw std::invalid_argument("gradient length mismatch for " + names[p]);
    }
    GradCheckEntry entry;
    entry.param_name = names[p];
    for (std::size_t i = 0; i < analytic[p].size(); ++i) {
      const double ga = analytic[p][i];
      const double gn = numeric[p][i];
      if (std::fabs(ga - gn) <= noise_floor) continue;
      const double denom = std::max({std::fabs(ga), std::fabs(gn), 1e-8});
      entry.max_rel_error = std::max(entry.max_rel_error, std::fabs(ga - gn) / denom);
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

double gaussian_mi_true(double rho, int dim) {
  if (std::fabs(rho) >= 1.0) throw std::invalid_argument("gaussian MI requires |rho| < 1");
  if (dim < 1) throw std::invalid_argument("gaussian MI requires dim >= 1");
  return -0.5 * static_cast<double>(dim) * std::log(1.0 - rho * rho);
}

}  // namespace detkd::oracle
