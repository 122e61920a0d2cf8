#include "posicaic/caic.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "posicaic/errors.hpp"
#include "posicaic/linalg.hpp"

namespace posicaic {

void CandidateSet::validate() const {
  if (specs.empty()) throw std::invalid_argument("candidate set is empty");
  std::set<std::string> labels;
  for (const auto& s : specs) {
    if (s.total() != specs.front().total()) throw std::invalid_argument("candidate masks differ in length");
    for (int j = 0; j < a; ++j)
      if (!s.included[j]) throw std::invalid_argument("candidate " + s.label + " omits a forced covariate");
    if (!labels.insert(s.label).second) throw std::invalid_argument("duplicate candidate label " + s.label);
  }
  if (structure == Structure::nested) {
    for (std::size_t j = 1; j < specs.size(); ++j) {
      if (!specs[j - 1].subset_of(specs[j]) || specs[j].size() != specs[j - 1].size() + 1)
        throw std::invalid_argument("nested candidates must add exactly one covariate per step");
    }
  }
}

BiasCorrection bias_correction_general(const ClusteredDataset& data, const std::vector<int>& cols,
                                       const VarianceParams& theta_hat, FitMethod method, int reps,
                                       std::uint64_t seed, const OptimOptions& opt) {
  const int h = theta_hat.h();
  const int n = data.n();
  const double s = theta_hat.r_scale();
  std::vector<Eigen::MatrixXd> vsqrt(n), vinv(n);
  std::vector<std::vector<Eigen::MatrixXd>> D(h, std::vector<Eigen::MatrixXd>(n));
  Eigen::VectorXd tr_dv = Eigen::VectorXd::Zero(h);
  Eigen::VectorXd c2 = Eigen::VectorXd::Zero(h);
  Eigen::MatrixXd c3 = Eigen::MatrixXd::Zero(h, h);
  for (int i = 0; i < n; ++i) {
    const Eigen::MatrixXd v = cluster_V(data, theta_hat, i);
    const auto mi = v.rows();
    vsqrt[i] = sym_sqrt(v);
    vinv[i] = spd_inverse(v, "V_i", i);
    const Eigen::MatrixXd vrv = s * vinv[i] * vinv[i];
    for (int k = 0; k < h; ++k) {
      const Eigen::MatrixXd vk = cluster_V_slope(data, theta_hat, i, k);
      const double rk = theta_hat.r_slope(k);
      D[k][i] = -vinv[i] * vk * vrv + rk * vinv[i] * vinv[i] - vrv * vk * vinv[i];
      D[k][i] = symmetrize(D[k][i]);
      tr_dv(k) += (D[k][i] * v).trace();
      c2(k) += rk * (static_cast<double>(mi) / s - vinv[i].trace());
      for (int l = 0; l < h; ++l) {
        const Eigen::MatrixXd vl = cluster_V_slope(data, theta_hat, i, l);
        c3(k, l) += rk * (-static_cast<double>(mi) * theta_hat.r_slope(l) / (s * s) + (vinv[i] * vl * vinv[i]).trace());
      }
    }
  }
  Eigen::VectorXd start = theta_hat.theta;
  std::vector<Eigen::VectorXd> th, qf;
  BiasCorrection out;
  for (int b = 0; b < reps; ++b) {
    const Eigen::VectorXd z = bootstrap_normals(data, seed, b);
    Eigen::VectorXd eps(data.m());
    for (int i = 0; i < n; ++i)
      eps.segment(data.offset(i), data.size(i)) = vsqrt[i] * z.segment(data.offset(i), data.size(i));
    Eigen::VectorXd q(h);
    for (int k = 0; k < h; ++k) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        auto e = eps.segment(data.offset(i), data.size(i));
        acc += e.dot(D[k][i] * e);
      }
      q(k) = acc - tr_dv(k);
    }
    try {
      const ClusteredDataset boot = data.with_response(eps);
      const GeneralOptimum o = general_optimize(boot, cols, theta_hat.structure, method, opt, &start);
      th.push_back(o.theta);
      qf.push_back(q);
    } catch (const Error&) {
      ++out.failures;
    }
  }
  if (out.failures > 0.05 * reps) throw ConvergenceError("more than 5% of bootstrap refits failed in b(theta)");
  const double cnt = static_cast<double>(th.size());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(h);
  for (const auto& t : th) mean += t;
  mean /= cnt;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(h, h);
  double t1 = 0.0;
  for (std::size_t b = 0; b < th.size(); ++b) {
    const Eigen::VectorXd d = th[b] - mean;
    cov += d * d.transpose();
    t1 += (th[b] - theta_hat.theta).dot(qf[b]);
  }
  cov /= cnt;
  t1 /= cnt;
  out.term_hessian = -0.5 * t1;
  out.term_bias = -c2.dot(mean - theta_hat.theta);
  out.term_cov = -(c3.cwiseProduct(cov)).sum();
  out.b = out.term_hessian + out.term_bias + out.term_cov;
  return out;
}

double bias_correction_b(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta_hat,
                         FitOptions::BiasMethod method, int reps, std::uint64_t seed, FitMethod fit_method) {
  if (method == FitOptions::BiasMethod::zero) return 0.0;
  if (reps < 2) throw std::invalid_argument("bootstrap needs at least 2 replicates");
  const auto cols = spec.indices();
  OptimOptions opt;
  if (theta_hat.is_nerm() && data.is_random_intercept()) {
    std::vector<int> all(data.p());
    for (int j = 0; j < data.p(); ++j) all[j] = j;
    const NermStats full = nerm_stats(data, all);
    const NermBootstrap draws = nerm_bootstrap(data, reps, seed);
    return nerm_bias_correction(full, cols, theta_hat.sigma2_u(), theta_hat.sigma2_e(), fit_method, draws, opt).b;
  }
  return bias_correction_general(data, cols, theta_hat, fit_method, reps, seed, opt).b;
}

double caic_value(double loglik_conditional, double rho, double b) { return -2.0 * loglik_conditional + 2.0 * rho + 2.0 * b; }

double caic(const ClusteredDataset& data, const ModelSpec& spec, const FittedLMM& fit) {
  if (spec.included != fit.spec.included || fit.data->m() != data.m())
    throw std::invalid_argument("fit does not belong to this dataset and model");
  return caic_value(fit.loglik_conditional, fit.rho_hat, fit.b_hat);
}

int argmin_caic(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("no cAIC values");
  int best = 0;
  for (int j = 1; j < static_cast<int>(values.size()); ++j)
    if (values[j] < values[best]) best = j;
  return best;
}

SelectionResult select_model(const ClusteredDataset& data, const CandidateSet& candidates, const FitOptions& opts) {
  return select_model(std::make_shared<const ClusteredDataset>(data), candidates, opts);
}

SelectionResult select_model(std::shared_ptr<const ClusteredDataset> data, const CandidateSet& candidates,
                             const FitOptions& opts) {
  candidates.validate();
  SelectionResult res;
  const bool fast = data->is_random_intercept() && opts.structure.kind == VarianceStructure::Kind::nerm && !opts.force_general;
  NermStats full;
  NermBootstrap draws;
  if (fast) {
    std::vector<int> all(data->p());
    for (int j = 0; j < data->p(); ++j) all[j] = j;
    full = nerm_stats(*data, all);
    if (opts.b_method == FitOptions::BiasMethod::monte_carlo) draws = nerm_bootstrap(*data, opts.b_reps, opts.b_seed);
  }
  for (const auto& spec : candidates.specs) {
    try {
      res.fits.push_back(fast ? fit_model(data, spec, opts, &draws, &full) : fit_model(data, spec, opts));
    } catch (const ConvergenceError& e) {
      throw ConvergenceError("model " + spec.label + ": " + e.what());
    } catch (const NumericalError& e) {
      throw NumericalError("model " + spec.label + ": " + e.what(), e.cluster);
    }
    res.caic.push_back(res.fits.back().caic);
    res.rho_hat.push_back(res.fits.back().rho_hat);
    res.b_hat.push_back(res.fits.back().b_hat);
  }
  const int k = candidates.size();
  res.trace.resize(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) res.trace(i, j) = res.caic[i] - res.caic[j];
  res.selected = argmin_caic(res.caic);
  return res;
}

}  // namespace posicaic
