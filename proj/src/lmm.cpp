#include "posicaic/lmm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "posicaic/caic.hpp"
#include "posicaic/errors.hpp"
#include "posicaic/linalg.hpp"

namespace posicaic {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Eigen::VectorXd restrict(const Eigen::VectorXd& v, const std::vector<int>& cols) {
  Eigen::VectorXd out(cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c) out(c) = v(cols[c]);
  return out;
}

Eigen::VectorXd pad(const Eigen::VectorXd& v, const std::vector<int>& cols, int p) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(p);
  for (std::size_t c = 0; c < cols.size(); ++c) out(cols[c]) = v(c);
  return out;
}

// Accepts either the padded a+K vector or the model-length vector.
Eigen::VectorXd model_beta(const Eigen::VectorXd& beta, const ModelSpec& spec) {
  const auto cols = spec.indices();
  if (beta.size() == spec.total()) return restrict(beta, cols);
  if (beta.size() == static_cast<Eigen::Index>(cols.size())) return beta;
  throw std::invalid_argument("beta length matches neither a+K nor |M|");
}

Eigen::MatrixXd cols_of(const ClusteredDataset& data, const std::vector<int>& cols) {
  Eigen::MatrixXd x(data.m(), cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c) x.col(c) = data.X().col(cols[c]);
  return x;
}

// GLS pieces at theta.
struct Gls {
  ClusterCache cache;
  Eigen::MatrixXd A;  // X^t V^{-1} X
  Eigen::MatrixXd A_inv;
  double logdet_a = 0.0;
  Eigen::VectorXd beta;
  Eigen::VectorXd rt;  // V^{-1} (y - X beta), stacked
  double quad = 0.0;   // (y - X beta)^t V^{-1} (y - X beta)
};

Gls gls(const ClusteredDataset& data, const Eigen::MatrixXd& x, const VarianceParams& theta) {
  Gls g;
  g.cache = cluster_cache(data, theta);
  const auto p = x.cols();
  g.A = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
  for (int i = 0; i < data.n(); ++i) {
    auto xi = x.middleRows(data.offset(i), data.size(i));
    const Eigen::MatrixXd vx = g.cache.v_inv[i] * xi;
    g.A.noalias() += xi.transpose() * vx;
    b.noalias() += vx.transpose() * data.y_i(i);
  }
  g.A = symmetrize(g.A);
  auto llt = guarded_llt(g.A, "X^t V^{-1} X");
  g.A_inv = symmetrize(llt.solve(Eigen::MatrixXd::Identity(p, p)));
  g.logdet_a = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  g.beta = llt.solve(b);
  g.rt.resize(data.m());
  for (int i = 0; i < data.n(); ++i) {
    const Eigen::VectorXd res = data.y_i(i) - x.middleRows(data.offset(i), data.size(i)) * g.beta;
    g.rt.segment(data.offset(i), data.size(i)) = g.cache.v_inv[i] * res;
    g.quad += res.dot(g.rt.segment(data.offset(i), data.size(i)));
  }
  return g;
}

// F_i = (Z_i^t R_i^{-1} Z_i + G^{-1})^{-1}, written so that G = 0 is allowed.
Eigen::MatrixXd cluster_F(const ClusteredDataset& data, const VarianceParams& theta, const Eigen::MatrixXd& g, int i) {
  const auto& z = data.Z_i(i);
  const Eigen::MatrixXd ztz = z.transpose() * z / theta.r_scale();
  const Eigen::MatrixXd m = Eigen::MatrixXd::Identity(g.rows(), g.cols()) + g * ztz;
  return symmetrize(m.partialPivLu().solve(g));
}

}  // namespace

Eigen::VectorXd FittedLMM::beta_model() const { return restrict(beta_hat, spec.indices()); }

Eigen::MatrixXd cluster_V(const ClusteredDataset& data, const VarianceParams& theta, int i) {
  const auto& z = data.Z_i(i);
  Eigen::MatrixXd v = z * theta.G() * z.transpose();
  v.diagonal().array() += theta.r_scale();
  return v;
}

Eigen::MatrixXd cluster_V_slope(const ClusteredDataset& data, const VarianceParams& theta, int i, int k) {
  const auto& z = data.Z_i(i);
  Eigen::MatrixXd v = z * theta.G_slope(k) * z.transpose();
  v.diagonal().array() += theta.r_slope(k);
  return v;
}

ClusterCache cluster_cache(const ClusteredDataset& data, const VarianceParams& theta) {
  theta.validate();
  ClusterCache c;
  c.v_inv.resize(data.n());
  for (int i = 0; i < data.n(); ++i) {
    const Eigen::MatrixXd v = cluster_V(data, theta, i);
    auto llt = guarded_llt(v, "V_i", i);
    c.v_inv[i] = symmetrize(llt.solve(Eigen::MatrixXd::Identity(v.rows(), v.cols())));
    c.logdet_v += 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  }
  return c;
}

Eigen::MatrixXd model_columns(const ClusteredDataset& data, const ModelSpec& spec) {
  return cols_of(data, spec.indices());
}

double marginal_loglik(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta,
                       const Eigen::VectorXd& beta) {
  const Eigen::VectorXd b = model_beta(beta, spec);
  const Eigen::MatrixXd x = model_columns(data, spec);
  const ClusterCache c = cluster_cache(data, theta);
  double quad = 0.0;
  for (int i = 0; i < data.n(); ++i) {
    const Eigen::VectorXd res = data.y_i(i) - x.middleRows(data.offset(i), data.size(i)) * b;
    quad += res.dot(c.v_inv[i] * res);
  }
  return -0.5 * (static_cast<double>(data.m()) * kLog2Pi + c.logdet_v + quad);
}

double conditional_loglik(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta,
                          const Eigen::VectorXd& beta, const Eigen::VectorXd& u) {
  theta.validate();
  if (u.size() != data.r()) throw std::invalid_argument("u length must be r");
  const Eigen::VectorXd b = model_beta(beta, spec);
  const Eigen::MatrixXd x = model_columns(data, spec);
  const double s = theta.r_scale();
  double rss = 0.0;
  for (int i = 0; i < data.n(); ++i) {
    const Eigen::VectorXd e = data.y_i(i) - x.middleRows(data.offset(i), data.size(i)) * b -
                              data.Z_i(i) * u.segment(static_cast<Eigen::Index>(i) * data.q(), data.q());
    rss += e.squaredNorm();
  }
  const double m = static_cast<double>(data.m());
  return -0.5 * (m * kLog2Pi + m * std::log(s) + rss / s);
}

double random_effects_loglik(const ClusteredDataset& data, const VarianceParams& theta, const Eigen::VectorXd& u) {
  const Eigen::MatrixXd g = theta.G();
  auto llt = guarded_llt(g, "G");
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  double quad = 0.0;
  for (int i = 0; i < data.n(); ++i) {
    const Eigen::VectorXd ui = u.segment(static_cast<Eigen::Index>(i) * data.q(), data.q());
    quad += ui.dot(llt.solve(ui));
  }
  return -0.5 * (static_cast<double>(data.r()) * kLog2Pi + data.n() * logdet + quad);
}

HendersonSolution solve_henderson(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta) {
  theta.validate();
  const auto cols = spec.indices();
  const Eigen::MatrixXd x = cols_of(data, cols);
  const Eigen::Index p = x.cols();
  const double s = theta.r_scale();
  const Eigen::MatrixXd g_inv = spd_inverse(theta.G(), "G");
  // eliminate each u_i block, then solve the reduced fixed-effect system
  Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p);
  std::vector<Eigen::LLT<Eigen::MatrixXd>> blocks;
  blocks.reserve(data.n());
  for (int i = 0; i < data.n(); ++i) {
    auto xi = x.middleRows(data.offset(i), data.size(i));
    const auto& zi = data.Z_i(i);
    const Eigen::MatrixXd d = zi.transpose() * zi / s + g_inv;
    blocks.push_back(guarded_llt(d, "Z_i^t R^{-1} Z_i + G^{-1}", i));
    const Eigen::MatrixXd zx = zi.transpose() * xi / s;
    const Eigen::VectorXd zy = zi.transpose() * data.y_i(i) / s;
    lhs.noalias() += xi.transpose() * xi / s - zx.transpose() * blocks.back().solve(zx);
    rhs.noalias() += xi.transpose() * data.y_i(i) / s - zx.transpose() * blocks.back().solve(zy);
  }
  auto llt = guarded_llt(symmetrize(lhs), "Henderson reduced system");
  const Eigen::VectorXd beta = llt.solve(rhs);
  HendersonSolution out;
  out.beta = pad(beta, cols, spec.total());
  out.u.resize(data.r());
  for (int i = 0; i < data.n(); ++i) {
    auto xi = x.middleRows(data.offset(i), data.size(i));
    const auto& zi = data.Z_i(i);
    const Eigen::VectorXd rhs_u = zi.transpose() * (data.y_i(i) - xi * beta) / s;
    out.u.segment(static_cast<Eigen::Index>(i) * data.q(), data.q()) = blocks[i].solve(rhs_u);
  }
  return out;
}

double effective_dof(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta) {
  theta.validate();
  const Eigen::MatrixXd x = model_columns(data, spec);
  const double s = theta.r_scale();
  const Eigen::MatrixXd g = theta.G();
  const int q = data.q();
  const ClusterCache c = cluster_cache(data, theta);
  double rho = 0.0;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(x.cols(), x.cols());
  Eigen::MatrixXd B = Eigen::MatrixXd::Zero(x.cols(), x.cols());
  for (int i = 0; i < data.n(); ++i) {
    const auto& zi = data.Z_i(i);
    const Eigen::MatrixXd m = Eigen::MatrixXd::Identity(q, q) + g * (zi.transpose() * zi) / s;
    rho += q - m.partialPivLu().inverse().trace();
    const Eigen::MatrixXd vx = c.v_inv[i] * x.middleRows(data.offset(i), data.size(i));
    A.noalias() += x.middleRows(data.offset(i), data.size(i)).transpose() * vx;
    B.noalias() += s * vx.transpose() * vx;
  }
  auto llt = guarded_llt(symmetrize(A), "X^t V^{-1} X");
  rho += llt.solve(B).trace();
  return rho;
}

double general_objective(const ClusteredDataset& data, const std::vector<int>& cols, const VarianceParams& theta,
                         FitMethod method, Eigen::VectorXd* grad) {
  const Eigen::MatrixXd x = cols_of(data, cols);
  const Gls g = gls(data, x, theta);
  const double m = static_cast<double>(data.m());
  const double p = static_cast<double>(cols.size());
  double f = g.cache.logdet_v + g.quad;
  if (method == FitMethod::reml)
    f += (m - p) * kLog2Pi + g.logdet_a;
  else
    f += m * kLog2Pi;
  if (grad) {
    const int h = theta.h();
    grad->setZero(h);
    for (int k = 0; k < h; ++k) {
      double tr = 0.0, quad = 0.0;
      Eigen::MatrixXd bk = Eigen::MatrixXd::Zero(x.cols(), x.cols());
      for (int i = 0; i < data.n(); ++i) {
        const Eigen::MatrixXd vk = cluster_V_slope(data, theta, i, k);
        const Eigen::MatrixXd& vi = g.cache.v_inv[i];
        tr += (vi * vk).trace();
        auto rti = g.rt.segment(data.offset(i), data.size(i));
        quad += rti.dot(vk * rti);
        if (method == FitMethod::reml) {
          const Eigen::MatrixXd vx = vi * x.middleRows(data.offset(i), data.size(i));
          bk.noalias() += vx.transpose() * vk * vx;
        }
      }
      (*grad)(k) = tr - quad;
      if (method == FitMethod::reml) (*grad)(k) -= (g.A_inv * bk).trace();
    }
  }
  return f;
}

GeneralOptimum general_optimize(const ClusteredDataset& data, const std::vector<int>& cols,
                                const VarianceStructure& structure, FitMethod method, const OptimOptions& opt,
                                const Eigen::VectorXd* start) {
  const int h = structure.h();
  Eigen::VectorXd theta0(h);
  if (start) {
    theta0 = *start;
  } else {
    const Eigen::MatrixXd x = cols_of(data, cols);
    const Eigen::VectorXd res = data.y() - x * x.colPivHouseholderQr().solve(data.y());
    const double s2 = res.squaredNorm() / std::max<double>(1.0, data.m() - cols.size());
    theta0.setConstant(s2 / h);
  }
  std::vector<bool> fixed(h, false);
  for (int k = 0; k < h; ++k)
    if (!(theta0(k) > 0.0)) theta0(k) = 1e-3 * std::max(1e-8, theta0.maxCoeff());

  GeneralOptimum out;
  out.at_boundary.assign(h, false);
  int total_iter = 0;
  for (int restart = 0; restart <= h; ++restart) {
    std::vector<int> free;
    for (int k = 0; k < h; ++k)
      if (!fixed[k]) free.push_back(k);
    auto theta_of = [&](const Eigen::VectorXd& phi) {
      Eigen::VectorXd th = Eigen::VectorXd::Zero(h);
      for (std::size_t j = 0; j < free.size(); ++j) th(free[j]) = std::exp(phi(j));
      return th;
    };
    auto eval = [&](const Eigen::VectorXd& phi, Eigen::VectorXd& gphi) {
      const Eigen::VectorXd th = theta_of(phi);
      Eigen::VectorXd gth;
      const double f = general_objective(data, cols, VarianceParams(th, structure), method, &gth);
      gphi.resize(free.size());
      for (std::size_t j = 0; j < free.size(); ++j) gphi(j) = gth(free[j]) * th(free[j]);
      return f;
    };
    Eigen::VectorXd phi(free.size());
    for (std::size_t j = 0; j < free.size(); ++j) phi(j) = std::log(theta0(free[j]));
    Eigen::VectorXd g;
    double f = eval(phi, g);
    out.trace.push_back(f);
    Eigen::MatrixXd hinv = Eigen::MatrixXd::Identity(free.size(), free.size());
    bool converged = false, hit_boundary = false;
    for (int it = 0; it < opt.max_iter; ++it, ++total_iter) {
      if (g.lpNorm<Eigen::Infinity>() < opt.tol_grad) {
        converged = true;
        break;
      }
      Eigen::VectorXd d = -hinv * g;
      if (g.dot(d) >= 0.0) {
        hinv.setIdentity();
        d = -g;
      }
      const double dn = d.norm();
      if (dn > 3.0) d *= 3.0 / dn;
      double alpha = 1.0;
      bool accepted = false;
      Eigen::VectorXd phi_new, g_new;
      double f_new = f;
      for (int ls = 0; ls < 50; ++ls) {
        phi_new = phi + alpha * d;
        try {
          f_new = eval(phi_new, g_new);
          if (f_new <= f + 1e-4 * alpha * g.dot(d)) {
            accepted = true;
            break;
          }
        } catch (const NumericalError&) {
        }
        alpha *= 0.5;
      }
      if (!accepted) {
        converged = true;
        break;
      }
      const Eigen::VectorXd sv = phi_new - phi, yv = g_new - g;
      const double sy = sv.dot(yv);
      if (sy > 1e-12) {
        const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(sv.size(), sv.size());
        const double rho = 1.0 / sy;
        hinv = (I - rho * sv * yv.transpose()) * hinv * (I - rho * yv * sv.transpose()) + rho * sv * sv.transpose();
      }
      const double rel = std::abs(f - f_new) / std::max(1.0, std::abs(f));
      phi = phi_new;
      g = g_new;
      f = f_new;
      out.trace.push_back(f);
      for (std::size_t j = 0; j < free.size(); ++j) {
        if (phi(j) < -25.0 && structure.r_slopes[free[j]] == 0.0) {
          fixed[free[j]] = true;
          hit_boundary = true;
        }
      }
      if (hit_boundary) break;
      if (rel < opt.tol_obj) {
        converged = true;
        ++total_iter;
        break;
      }
    }
    const Eigen::VectorXd th = theta_of(phi);
    if (hit_boundary) {
      theta0 = th;
      for (int k = 0; k < h; ++k)
        if (fixed[k]) theta0(k) = 0.0;
      continue;
    }
    if (!converged) throw ConvergenceError("variance parameter optimizer exceeded max iterations");
    out.theta = th;
    for (int k = 0; k < h; ++k) out.at_boundary[k] = fixed[k];
    out.objective = f;
    out.grad_norm = g.size() ? g.lpNorm<Eigen::Infinity>() : 0.0;
    out.iterations = total_iter;
    return out;
  }
  throw ConvergenceError("variance parameter optimizer: every component at the boundary");
}

FittedLMM fit_model(const ClusteredDataset& data, const ModelSpec& spec, const FitOptions& opts) {
  return fit_model(std::make_shared<const ClusteredDataset>(data), spec, opts);
}

FittedLMM fit_model(std::shared_ptr<const ClusteredDataset> data_ptr, const ModelSpec& spec, const FitOptions& opts,
                    const NermBootstrap* draws, const NermStats* full_stats) {
  const ClusteredDataset& data = *data_ptr;
  if (spec.total() != data.p()) throw std::invalid_argument("model mask length differs from a+K");
  for (int j = 0; j < data.a(); ++j)
    if (!spec.included[j]) throw std::invalid_argument("model omits a forced covariate");
  const auto cols = spec.indices();
  FittedLMM fit;
  fit.data = data_ptr;
  fit.spec = spec;
  fit.method = opts.method;
  const double m = static_cast<double>(data.m());
  const int n = data.n();

  if (data.is_random_intercept() && opts.structure.kind == VarianceStructure::Kind::nerm && !opts.force_general) {
    NermStats local;
    const NermStats* full = full_stats;
    if (!full) {
      std::vector<int> all(data.p());
      for (int j = 0; j < data.p(); ++j) all[j] = j;
      local = nerm_stats(data, all);
      full = &local;
    }
    const NermStats s = nerm_subset(*full, cols);
    const NermOptimum o = nerm_optimize(s, opts.method, opts.optim);
    const double se = o.sigma2_e, su = o.sigma2_u, lam = o.lambda;
    fit.theta_hat = VarianceParams::nerm(su, se);
    fit.theta_hat.boundary = o.boundary;
    const Eigen::VectorXd beta = o.eval.beta;
    fit.beta_hat = pad(beta, cols, data.p());
    fit.objective = nerm_neg2_loglik(s, opts.method, o.eval);
    fit.iterations = o.iterations;
    fit.grad_norm = std::abs(o.grad);
    fit.converged = o.converged;
    fit.objective_trace = o.trace;
    // marginal: y^t V^{-1} y residual form equals Q / sigma2_e at the GLS beta
    fit.loglik_marginal = -0.5 * (m * kLog2Pi + m * std::log(se) + o.eval.logdet_h + o.eval.Q / se);
    fit.u_tilde.resize(n);
    double rss = s.Syy - 2.0 * beta.dot(s.Sxy) + beta.dot(s.Sxx * beta);
    double gamma_sum = 0.0, w2 = 0.0;
    Eigen::MatrixXd B = s.Sxx;
    for (int i = 0; i < n; ++i) {
      const double mi = s.sizes(i);
      const double ri = s.sy(i) - s.sx.col(i).dot(beta);
      const double ui = su / (se + mi * su) * ri;
      fit.u_tilde(i) = ui;
      rss += -2.0 * ui * ri + mi * ui * ui;
      gamma_sum += mi * lam / (1.0 + mi * lam);
    }
    for (std::size_t gi = 0; gi < s.gsize.size(); ++gi) {
      const double w = lam / (1.0 + s.gsize[gi] * lam);
      w2 = 2.0 * w - s.gsize[gi] * w * w;
      B -= w2 * s.Txx[gi];
    }
    fit.loglik_conditional = -0.5 * (m * kLog2Pi + m * std::log(se) + rss / se);
    auto llt = guarded_llt(o.eval.A, "X^t V^{-1} X");
    fit.rho_hat = gamma_sum + llt.solve(B).trace();
    fit.info_marginal = o.eval.A / se;
    fit.hessian_conditional = s.Sxx / se;
    if (opts.b_method == FitOptions::BiasMethod::monte_carlo) {
      NermBootstrap own;
      const NermBootstrap* bs = draws;
      if (!bs) {
        own = nerm_bootstrap(data, opts.b_reps, opts.b_seed);
        bs = &own;
      }
      const BiasCorrection bc = nerm_bias_correction(*full, cols, su, se, opts.method, *bs, opts.optim);
      fit.b_hat = bc.b;
      fit.b_failures = bc.failures;
    }
  } else {
    const GeneralOptimum o = general_optimize(data, cols, opts.structure, opts.method, opts.optim);
    bool any_boundary = false;
    for (bool b : o.at_boundary) any_boundary = any_boundary || b;
    fit.theta_hat = VarianceParams(o.theta, opts.structure, any_boundary);
    const Eigen::MatrixXd x = cols_of(data, cols);
    const Gls g = gls(data, x, fit.theta_hat);
    fit.beta_hat = pad(g.beta, cols, data.p());
    fit.objective = o.objective;
    fit.iterations = o.iterations;
    fit.grad_norm = o.grad_norm;
    fit.converged = true;
    fit.objective_trace = o.trace;
    fit.loglik_marginal = -0.5 * (m * kLog2Pi + g.cache.logdet_v + g.quad);
    const Eigen::MatrixXd gm = fit.theta_hat.G();
    const int q = data.q();
    fit.u_tilde.resize(data.r());
    for (int i = 0; i < n; ++i)
      fit.u_tilde.segment(static_cast<Eigen::Index>(i) * q, q) =
          gm * data.Z_i(i).transpose() * g.rt.segment(data.offset(i), data.size(i));
    fit.loglik_conditional = conditional_loglik(data, spec, fit.theta_hat, fit.beta_hat, fit.u_tilde);
    fit.rho_hat = effective_dof(data, spec, fit.theta_hat);
    fit.info_marginal = g.A;
    fit.hessian_conditional = x.transpose() * x / fit.theta_hat.r_scale();
    if (opts.b_method == FitOptions::BiasMethod::monte_carlo) {
      const BiasCorrection bc =
          bias_correction_general(data, cols, fit.theta_hat, opts.method, opts.b_reps, opts.b_seed, opts.optim);
      fit.b_hat = bc.b;
      fit.b_failures = bc.failures;
    }
  }
  fit.caic = caic_value(fit.loglik_conditional, fit.rho_hat, fit.b_hat);
  if (opts.compute_K) {
    KBlocks kb = build_K(data, spec, fit.theta_hat);
    fit.K_matrix = std::move(kb.K);
    fit.K_inverse = std::move(kb.K_inverse);
  }
  return fit;
}

KBlocks build_K(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta) {
  theta.validate();
  const Eigen::MatrixXd x = model_columns(data, spec);
  const int p = static_cast<int>(x.cols());
  const int q = data.q();
  const Eigen::Index r = data.r();
  const double s = theta.r_scale();
  const Eigen::MatrixXd g = theta.G();
  const Eigen::MatrixXd g_pinv = g.completeOrthogonalDecomposition().pseudoInverse();
  KBlocks kb;
  kb.p = p;
  kb.K = Eigen::MatrixXd::Zero(p + r, p + r);
  kb.K.topLeftCorner(p, p) = x.transpose() * x / s;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
  std::vector<Eigen::MatrixXd> F(data.n()), XRZF(data.n());
  const ClusterCache c = cluster_cache(data, theta);
  for (int i = 0; i < data.n(); ++i) {
    auto xi = x.middleRows(data.offset(i), data.size(i));
    const auto& zi = data.Z_i(i);
    const Eigen::Index o = p + static_cast<Eigen::Index>(i) * q;
    const Eigen::MatrixXd xz = xi.transpose() * zi / s;
    kb.K.block(0, o, p, q) = xz;
    kb.K.block(o, 0, q, p) = xz.transpose();
    kb.K.block(o, o, q, q) = zi.transpose() * zi / s + g_pinv;
    A.noalias() += xi.transpose() * c.v_inv[i] * xi;
    F[i] = cluster_F(data, theta, g, i);
    XRZF[i] = xz * F[i];
  }
  const Eigen::MatrixXd a_inv = spd_inverse(symmetrize(A), "X^t V^{-1} X");
  kb.K_inverse = Eigen::MatrixXd::Zero(p + r, p + r);
  kb.K_inverse.topLeftCorner(p, p) = a_inv;
  for (int i = 0; i < data.n(); ++i) {
    const Eigen::Index oi = p + static_cast<Eigen::Index>(i) * q;
    const Eigen::MatrixXd k12 = -a_inv * XRZF[i];
    kb.K_inverse.block(0, oi, p, q) = k12;
    kb.K_inverse.block(oi, 0, q, p) = k12.transpose();
    const Eigen::MatrixXd left = XRZF[i].transpose() * a_inv;
    for (int j = 0; j < data.n(); ++j) {
      const Eigen::Index oj = p + static_cast<Eigen::Index>(j) * q;
      kb.K_inverse.block(oi, oj, q, q) = left * XRZF[j];
    }
    kb.K_inverse.block(oi, oi, q, q) += F[i];
  }
  return kb;
}

double predict_mixed(const FittedLMM& fit, const MixedTarget& target) {
  const ClusteredDataset& data = *fit.data;
  if (target.k.size() != data.p()) throw std::invalid_argument("k must have length a+K");
  if (target.m.size() != data.q()) throw std::invalid_argument("m must have length q");
  if (target.cluster < 0 || target.cluster >= data.n()) throw std::invalid_argument("cluster index out of range");
  return target.k.dot(fit.beta_hat) +
         target.m.dot(fit.u_tilde.segment(static_cast<Eigen::Index>(target.cluster) * data.q(), data.q()));
}

namespace {
MseTerms mse_impl(const FittedLMM& fit, const MixedTarget& target, bool with_g3) {
  const ClusteredDataset& data = *fit.data;
  if (target.k.size() != data.p() || target.m.size() != data.q()) throw std::invalid_argument("target dimension mismatch");
  if (target.cluster < 0 || target.cluster >= data.n()) throw std::invalid_argument("cluster index out of range");
  const auto cols = fit.spec.indices();
  const Eigen::MatrixXd x = cols_of(data, cols);
  const VarianceParams& th = fit.theta_hat;
  const int i = target.cluster;
  const Eigen::MatrixXd g = th.G();
  const auto& zi = data.Z_i(i);
  const Eigen::MatrixXd vi_inv = spd_inverse(cluster_V(data, th, i), "V_i", i);
  auto xi = x.middleRows(data.offset(i), data.size(i));
  MseTerms t;
  const Eigen::VectorXd gm = g * target.m;
  t.g1 = target.m.dot(gm) - gm.dot(zi.transpose() * vi_inv * zi * gm);
  t.g1 = std::max(t.g1, 0.0);
  const Eigen::VectorXd d = restrict(target.k, cols) - xi.transpose() * vi_inv * zi * gm;
  const Eigen::MatrixXd a_inv = spd_inverse(fit.info_marginal, "X^t V^{-1} X");
  t.g2 = std::max(d.dot(a_inv * d), 0.0);
  if (!with_g3 || target.m.isZero(0.0)) return t;
  const Eigen::MatrixXd va = theta_covariance(data, fit.spec, th, fit.method);
  const Eigen::MatrixXd da = a_derivative(data, th, target);
  const Eigen::MatrixXd vi = cluster_V(data, th, i);
  t.g3 = (da * vi * da.transpose() * va).trace();
  if (t.g3 < -1e-12 * std::max(1.0, t.g1 + t.g2)) throw NumericalError("g3 negative: theta covariance not positive semidefinite");
  t.g3 = std::max(t.g3, 0.0);
  return t;
}

}  // namespace

MseTerms mse_terms(const FittedLMM& fit, const MixedTarget& target) { return mse_impl(fit, target, true); }

std::pair<double, double> mse_first_order(const FittedLMM& fit, const MixedTarget& target) {
  const MseTerms t = mse_impl(fit, target, false);
  return {t.g1, t.g2};
}

double mse_second_order(const FittedLMM& fit, const MixedTarget& target) { return mse_terms(fit, target).mse2(); }

Eigen::MatrixXd theta_covariance(const ClusteredDataset& data, const ModelSpec& spec, const VarianceParams& theta,
                                 FitMethod method) {
  const Eigen::MatrixXd x = model_columns(data, spec);
  const int h = theta.h();
  const int p = static_cast<int>(x.cols());
  const ClusterCache c = cluster_cache(data, theta);
  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(h, h);
  std::vector<Eigen::MatrixXd> B(h, Eigen::MatrixXd::Zero(p, p));
  std::vector<std::vector<Eigen::MatrixXd>> C(h, std::vector<Eigen::MatrixXd>(h, Eigen::MatrixXd::Zero(p, p)));
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(p, p);
  for (int i = 0; i < data.n(); ++i) {
    const Eigen::MatrixXd& vi = c.v_inv[i];
    auto xi = x.middleRows(data.offset(i), data.size(i));
    const Eigen::MatrixXd vx = vi * xi;
    A.noalias() += xi.transpose() * vx;
    std::vector<Eigen::MatrixXd> mk(h);
    for (int k = 0; k < h; ++k) mk[k] = vi * cluster_V_slope(data, theta, i, k);
    for (int k = 0; k < h; ++k) {
      B[k].noalias() += vx.transpose() * cluster_V_slope(data, theta, i, k) * vx;
      for (int l = 0; l < h; ++l) {
        T(k, l) += (mk[k] * mk[l]).trace();
        C[k][l].noalias() += vx.transpose() * cluster_V_slope(data, theta, i, k) * mk[l] * vx;
      }
    }
  }
  Eigen::MatrixXd info(h, h);
  if (method == FitMethod::reml) {
    const Eigen::MatrixXd a_inv = spd_inverse(symmetrize(A), "X^t V^{-1} X");
    for (int k = 0; k < h; ++k)
      for (int l = 0; l < h; ++l)
        info(k, l) = 0.5 * (T(k, l) - 2.0 * (a_inv * C[k][l]).trace() + (a_inv * B[k] * a_inv * B[l]).trace());
  } else {
    info = 0.5 * T;
  }
  info = symmetrize(info);
  // boundary components carry no information about the direction into the interior
  std::vector<int> active;
  for (int k = 0; k < h; ++k)
    if (!(theta.boundary && theta.is_nerm() && k == 0)) active.push_back(k);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(h, h);
  Eigen::MatrixXd sub(active.size(), active.size());
  for (std::size_t a = 0; a < active.size(); ++a)
    for (std::size_t b = 0; b < active.size(); ++b) sub(a, b) = info(active[a], active[b]);
  const Eigen::MatrixXd sub_inv = spd_inverse(sub, "expected information of theta");
  for (std::size_t a = 0; a < active.size(); ++a)
    for (std::size_t b = 0; b < active.size(); ++b) out(active[a], active[b]) = sub_inv(a, b);
  return out;
}

Eigen::RowVectorXd a_vector(const ClusteredDataset& data, const VarianceParams& theta, const MixedTarget& target) {
  const int i = target.cluster;
  const Eigen::MatrixXd vi_inv = spd_inverse(cluster_V(data, theta, i), "V_i", i);
  return target.m.transpose() * theta.G() * data.Z_i(i).transpose() * vi_inv;
}

Eigen::MatrixXd a_derivative(const ClusteredDataset& data, const VarianceParams& theta, const MixedTarget& target) {
  const int i = target.cluster;
  const auto& zi = data.Z_i(i);
  const Eigen::MatrixXd vi_inv = spd_inverse(cluster_V(data, theta, i), "V_i", i);
  const Eigen::RowVectorXd a = target.m.transpose() * theta.G() * zi.transpose() * vi_inv;
  Eigen::MatrixXd out(theta.h(), data.size(i));
  for (int k = 0; k < theta.h(); ++k) {
    out.row(k) = target.m.transpose() * theta.G_slope(k) * zi.transpose() * vi_inv -
                 a * cluster_V_slope(data, theta, i, k) * vi_inv;
  }
  return out;
}

}  // namespace posicaic
