#include "posicaic/nerm_kernel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "posicaic/errors.hpp"
#include "posicaic/rng.hpp"

namespace posicaic {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kBoundaryLogLambda = -20.0;
constexpr double kUpperLogLambda = 20.0;
}  // namespace

NermStats nerm_stats(const ClusteredDataset& data, const std::vector<int>& cols) {
  NermStats s;
  s.p = static_cast<int>(cols.size());
  s.n = data.n();
  s.m = data.m();
  Eigen::MatrixXd x(data.m(), s.p);
  for (int c = 0; c < s.p; ++c) x.col(c) = data.X().col(cols[c]);
  const Eigen::VectorXd& y = data.y();
  s.Sxx = x.transpose() * x;
  s.Sxy = x.transpose() * y;
  s.Syy = y.squaredNorm();
  s.sx.resize(s.p, s.n);
  s.sy.resize(s.n);
  s.sizes.resize(s.n);
  std::map<Eigen::Index, int> groups;
  s.group_of.resize(s.n);
  for (int i = 0; i < s.n; ++i) {
    const auto off = data.offset(i);
    const auto mi = data.size(i);
    s.sx.col(i) = x.middleRows(off, mi).colwise().sum().transpose();
    s.sy(i) = y.segment(off, mi).sum();
    s.sizes(i) = static_cast<double>(mi);
    auto it = groups.find(mi);
    if (it == groups.end()) {
      it = groups.emplace(mi, static_cast<int>(s.gsize.size())).first;
      s.gsize.push_back(static_cast<double>(mi));
      s.gcount.push_back(0);
      s.Txx.push_back(Eigen::MatrixXd::Zero(s.p, s.p));
      s.Txy.push_back(Eigen::VectorXd::Zero(s.p));
      s.Tyy.push_back(0.0);
    }
    s.group_of[i] = it->second;
    s.gcount[it->second] += 1;
    s.Txx[it->second] += s.sx.col(i) * s.sx.col(i).transpose();
  }
  s.set_response(s.Sxy, s.Syy, s.sy);
  return s;
}

void NermStats::set_response(const Eigen::VectorXd& sxy, double syy, const Eigen::VectorXd& sy_new) {
  Sxy = sxy;
  Syy = syy;
  sy = sy_new;
  for (std::size_t g = 0; g < Txy.size(); ++g) {
    Txy[g].setZero();
    Tyy[g] = 0.0;
  }
  for (int i = 0; i < n; ++i) {
    const int g = group_of[i];
    Txy[g].noalias() += sy(i) * sx.col(i);
    Tyy[g] += sy(i) * sy(i);
  }
}

NermStats nerm_subset(const NermStats& full, const std::vector<int>& cols) {
  NermStats s;
  s.p = static_cast<int>(cols.size());
  s.n = full.n;
  s.m = full.m;
  s.Syy = full.Syy;
  s.sy = full.sy;
  s.sizes = full.sizes;
  s.group_of = full.group_of;
  s.gsize = full.gsize;
  s.gcount = full.gcount;
  s.Tyy = full.Tyy;
  s.Sxx.resize(s.p, s.p);
  s.Sxy.resize(s.p);
  s.sx.resize(s.p, s.n);
  for (int a = 0; a < s.p; ++a) {
    s.Sxy(a) = full.Sxy(cols[a]);
    s.sx.row(a) = full.sx.row(cols[a]);
    for (int b = 0; b < s.p; ++b) s.Sxx(a, b) = full.Sxx(cols[a], cols[b]);
  }
  for (std::size_t g = 0; g < full.Txx.size(); ++g) {
    Eigen::MatrixXd t(s.p, s.p);
    Eigen::VectorXd v(s.p);
    for (int a = 0; a < s.p; ++a) {
      v(a) = full.Txy[g](cols[a]);
      for (int b = 0; b < s.p; ++b) t(a, b) = full.Txx[g](cols[a], cols[b]);
    }
    s.Txx.push_back(std::move(t));
    s.Txy.push_back(std::move(v));
  }
  return s;
}

NermEval nerm_objective(const NermStats& s, FitMethod method, double lambda, bool want_grad) {
  NermEval e;
  e.A = s.Sxx;
  Eigen::VectorXd b = s.Sxy;
  double c = s.Syy;
  Eigen::MatrixXd ad;
  Eigen::VectorXd bd;
  double cd = 0.0, dlogh = 0.0;
  if (want_grad) {
    ad = Eigen::MatrixXd::Zero(s.p, s.p);
    bd = Eigen::VectorXd::Zero(s.p);
  }
  for (std::size_t g = 0; g < s.gsize.size(); ++g) {
    const double mg = s.gsize[g];
    const double den = 1.0 + mg * lambda;
    const double w = lambda / den;
    e.A.noalias() -= w * s.Txx[g];
    b.noalias() -= w * s.Txy[g];
    c -= w * s.Tyy[g];
    e.logdet_h += s.gcount[g] * std::log1p(mg * lambda);
    if (want_grad) {
      const double wd = 1.0 / (den * den);
      ad.noalias() -= wd * s.Txx[g];
      bd.noalias() -= wd * s.Txy[g];
      cd -= wd * s.Tyy[g];
      dlogh += s.gcount[g] * mg / den;
    }
  }
  Eigen::LLT<Eigen::MatrixXd> llt(e.A);
  if (llt.info() != Eigen::Success) throw NumericalError("X^t V^{-1} X not positive definite");
  e.beta = llt.solve(b);
  e.Q = c - b.dot(e.beta);
  if (!(e.Q > 0.0)) throw NumericalError("residual quadratic form is not positive (perfect fit)");
  e.logdet_a = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const double dof = method == FitMethod::reml ? static_cast<double>(s.m - s.p) : static_cast<double>(s.m);
  e.f = dof * std::log(e.Q) + e.logdet_h + (method == FitMethod::reml ? e.logdet_a : 0.0);
  if (want_grad) {
    const double qd = cd - 2.0 * e.beta.dot(bd) + e.beta.dot(ad * e.beta);
    e.df = dof * qd / e.Q + dlogh;
    if (method == FitMethod::reml) e.df += llt.solve(ad).trace();
  }
  return e;
}

double nerm_neg2_loglik(const NermStats& s, FitMethod method, const NermEval& e) {
  if (method == FitMethod::reml) {
    const double d = static_cast<double>(s.m - s.p);
    return d * (kLog2Pi + std::log(e.Q / d) + 1.0) + e.logdet_h + e.logdet_a;
  }
  const double d = static_cast<double>(s.m);
  return d * (kLog2Pi + std::log(e.Q / d) + 1.0) + e.logdet_h;
}

NermOptimum nerm_optimize(const NermStats& s, FitMethod method, const OptimOptions& opt, double warm_log_lambda) {
  const double dof = method == FitMethod::reml ? static_cast<double>(s.m - s.p) : static_cast<double>(s.m);
  if (dof <= 0) throw std::invalid_argument("not enough observations for the number of covariates");
  NermOptimum out;
  auto eval_t = [&](double t) { return nerm_objective(s, method, std::exp(t)); };

  double t = warm_log_lambda;
  NermEval cur;
  if (!std::isfinite(t)) {
    double best = std::numeric_limits<double>::infinity();
    for (double tg = -10.0; tg <= 8.0; tg += 2.0) {
      NermEval e = nerm_objective(s, method, std::exp(tg), false);
      if (e.f < best) {
        best = e.f;
        t = tg;
      }
    }
  }
  cur = eval_t(t);
  out.trace.push_back(cur.f);

  int iter = 0;
  bool converged = false;
  for (; iter < opt.max_iter; ++iter) {
    const double g = std::exp(t) * cur.df;
    if (std::abs(g) < opt.tol_grad) {
      converged = true;
      break;
    }
    if (t < kBoundaryLogLambda) {
      converged = true;
      break;
    }
    constexpr double delta = 1e-5;
    const NermEval e2 = eval_t(t + delta);
    const double h = (std::exp(t + delta) * e2.df - g) / delta;
    double step = h > 0.0 ? -g / h : (g > 0.0 ? -1.0 : 1.0);
    step = std::clamp(step, -3.0, 3.0);
    double alpha = 1.0;
    bool accepted = false;
    NermEval next;
    for (int ls = 0; ls < 50; ++ls) {
      next = eval_t(t + alpha * step);
      if (next.f <= cur.f + 1e-4 * alpha * g * step) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      converged = true;  // no further decrease representable
      break;
    }
    const double rel = std::abs(cur.f - next.f) / std::max(1.0, std::abs(cur.f));
    t += alpha * step;
    cur = std::move(next);
    out.trace.push_back(cur.f);
    if (t > kUpperLogLambda) throw ConvergenceError("variance ratio diverged (sigma2_e -> 0)");
    if (rel < opt.tol_obj) {
      converged = true;
      ++iter;
      break;
    }
  }
  out.iterations = iter;
  out.converged = converged;
  if (!converged) throw ConvergenceError("profiled likelihood optimizer exceeded max iterations");

  const NermEval e0 = nerm_objective(s, method, 0.0);
  if (t < kBoundaryLogLambda || e0.f <= cur.f) {
    out.boundary = true;
    out.lambda = 0.0;
    out.grad = e0.df;
    if (e0.f < out.trace.back()) out.trace.push_back(e0.f);
    cur = e0;
  } else {
    out.lambda = std::exp(t);
    out.grad = out.lambda * cur.df;
  }
  out.objective = cur.f;
  out.sigma2_e = cur.Q / dof;
  out.sigma2_u = out.lambda * out.sigma2_e;
  out.eval = std::move(cur);
  return out;
}

Eigen::VectorXd bootstrap_normals(const ClusteredDataset& data, std::uint64_t seed, int b) {
  auto gen = make_stream(seed, static_cast<std::uint64_t>(b));
  std::normal_distribution<double> nd;
  Eigen::VectorXd z(data.m());
  for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = nd(gen);
  return z;
}

NermBootstrap nerm_bootstrap(const ClusteredDataset& data, int reps, std::uint64_t seed) {
  NermBootstrap bs;
  bs.xz.resize(data.p(), reps);
  bs.zsum.resize(data.n(), reps);
  bs.zsq.resize(data.n(), reps);
  for (int b = 0; b < reps; ++b) {
    const Eigen::VectorXd z = bootstrap_normals(data, seed, b);
    bs.xz.col(b).noalias() = data.X().transpose() * z;
    for (int i = 0; i < data.n(); ++i) {
      auto zi = z.segment(data.offset(i), data.size(i));
      bs.zsum(i, b) = zi.sum();
      bs.zsq(i, b) = zi.squaredNorm();
    }
  }
  return bs;
}

BiasCorrection nerm_bias_correction(const NermStats& full, const std::vector<int>& cols, double su, double se,
                                    FitMethod method, const NermBootstrap& draws, const OptimOptions& opt) {
  NermStats s = nerm_subset(full, cols);
  const int n = s.n;
  const int reps = draws.reps();
  const double sde = std::sqrt(se);
  Eigen::VectorXd v1(n), sq(n);
  for (int i = 0; i < n; ++i) {
    v1(i) = se + s.sizes(i) * su;
    sq(i) = std::sqrt(v1(i));
  }
  // eigenvalues of D_k on the within-cluster (0) and cluster-mean (1) eigenspaces
  const double du0 = 0.0, de0 = -1.0 / (se * se);
  Eigen::VectorXd du1(n), de1(n);
  double tr_du = 0.0, tr_de = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = v1(i), m = s.sizes(i);
    du1(i) = -2.0 * m * se / (v * v * v);
    de1(i) = -2.0 * se / (v * v * v) + 1.0 / (v * v);
    tr_du += du0 * se * (m - 1.0) + du1(i) * v;
    tr_de += de0 * se * (m - 1.0) + de1(i) * v;
  }

  const double warm = su > 0.0 ? std::log(su / se) : -10.0;
  std::vector<Eigen::Vector2d> th;
  std::vector<Eigen::Vector2d> qf;
  th.reserve(reps);
  qf.reserve(reps);
  BiasCorrection out;
  Eigen::VectorXd sy(n), sxy(s.p);
  for (int b = 0; b < reps; ++b) {
    double syy = 0.0, qu = 0.0, qe = 0.0;
    for (int c = 0; c < s.p; ++c) sxy(c) = sde * draws.xz(cols[c], b);
    for (int i = 0; i < n; ++i) {
      const double m = s.sizes(i);
      const double zs = draws.zsum(i, b);
      const double within = se * (draws.zsq(i, b) - zs * zs / m);
      const double between = v1(i) * zs * zs / m;
      sy(i) = sq(i) * zs;
      syy += within + between;
      sxy.noalias() += ((sq(i) - sde) * zs / m) * s.sx.col(i);
      qu += du0 * within + du1(i) * between;
      qe += de0 * within + de1(i) * between;
    }
    s.set_response(sxy, syy, sy);
    try {
      const NermOptimum o = nerm_optimize(s, method, opt, warm);
      th.emplace_back(o.sigma2_u, o.sigma2_e);
      qf.emplace_back(qu - tr_du, qe - tr_de);
    } catch (const Error&) {
      ++out.failures;
    }
  }
  if (out.failures > 0.05 * reps) throw ConvergenceError("more than 5% of bootstrap refits failed in b(theta)");
  const double cnt = static_cast<double>(th.size());
  const Eigen::Vector2d hat(su, se);
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const auto& t : th) mean += t;
  mean /= cnt;
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  double t1 = 0.0;
  for (std::size_t b = 0; b < th.size(); ++b) {
    const Eigen::Vector2d d = th[b] - mean;
    cov += d * d.transpose();
    t1 += (th[b] - hat).dot(qf[b]);
  }
  cov /= cnt;
  t1 /= cnt;
  const Eigen::Vector2d bias = mean - hat;
  double tr_re = 0.0, c_u = 0.0, c_e = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = v1(i);
    tr_re += 1.0 / se - 1.0 / v;
    c_u += s.sizes(i) / (v * v);
    c_e += 1.0 / (v * v) - 1.0 / (se * se);
  }
  out.term_hessian = -0.5 * t1;
  out.term_bias = -tr_re * bias(1);
  out.term_cov = -(c_u * cov(1, 0) + c_e * cov(1, 1));
  out.b = out.term_hessian + out.term_bias + out.term_cov;
  return out;
}

double nerm_a_coef(double su, double se, double mi) { return su / (se + mi * su); }

Eigen::Vector2d nerm_a_coef_grad(double su, double se, double mi) {
  const double d = se + mi * su;
  return Eigen::Vector2d(se / (d * d), -su / (d * d));
}

}  // namespace posicaic
