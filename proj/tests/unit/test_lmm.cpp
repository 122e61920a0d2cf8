#include <doctest.h>

#include <cmath>

#include "../common/oracles.hpp"
#include "posicaic/linalg.hpp"
#include "posicaic/lmm.hpp"

using namespace posicaic;

namespace {

ClusteredDataset tiny(const std::vector<std::vector<double>>& y, const std::vector<Eigen::MatrixXd>& x) {
  std::vector<Eigen::VectorXd> ys;
  for (const auto& c : y) ys.push_back(Eigen::Map<const Eigen::VectorXd>(c.data(), c.size()));
  return ClusteredDataset::random_intercept(ys, x, 1);
}

}  // namespace

TEST_CASE("marginal loglik of a single standard normal observation") {
  const auto d = tiny({{0.0}}, {Eigen::MatrixXd::Ones(1, 1)});
  const auto spec = ModelSpec::full(1, 1);
  const double l = marginal_loglik(d, spec, VarianceParams::nerm(0.5, 0.5), Eigen::VectorXd::Zero(1));
  CHECK(l == doctest::Approx(-0.5 * std::log(2.0 * M_PI)).epsilon(1e-12));
  CHECK(l == doctest::Approx(-0.91894).epsilon(1e-5));
}

TEST_CASE("doubling residuals with V = I adds -3/2 sum r^2") {
  const auto d = oracle::random_nerm(3, 4, 2, 3, 2, 1.0, 1.0);
  const auto spec = ModelSpec::full(2, 1);
  const auto th = VarianceParams::nerm(0.0, 1.0);
  const Eigen::VectorXd beta = Eigen::VectorXd::Zero(2);
  const double l1 = marginal_loglik(d, spec, th, beta);
  const double l2 = marginal_loglik(d.with_response(2.0 * d.y()), spec, th, beta);
  CHECK(l2 - l1 == doctest::Approx(-1.5 * d.y().squaredNorm()).epsilon(1e-10));
}

TEST_CASE("blockwise marginal loglik equals dense V oracle") {
  std::vector<Eigen::MatrixXd> x(2, Eigen::MatrixXd::Ones(2, 1));
  const auto d = tiny({{0.0, 0.0}, {0.0, 0.0}}, x);
  const auto th = VarianceParams::nerm(1.0, 1.0);
  const Eigen::MatrixXd V = oracle::dense_V(d, th);
  const double want = -0.5 * (4 * std::log(2 * M_PI) + std::log(V.determinant()));
  CHECK(marginal_loglik(d, ModelSpec::full(1, 1), th, Eigen::VectorXd::Zero(1)) == doctest::Approx(want).epsilon(1e-12));

  const auto r = oracle::random_nerm(11, 6, 1, 5, 3, 0.7, 1.3);
  const auto th2 = VarianceParams::nerm(0.7, 1.3);
  const Eigen::VectorXd b = Eigen::VectorXd::LinSpaced(3, -1.0, 1.0);
  const Eigen::VectorXd res = r.y() - r.X() * b;
  const Eigen::MatrixXd V2 = oracle::dense_V(r, th2);
  const double want2 =
      -0.5 * (r.m() * std::log(2 * M_PI) + std::log(V2.determinant()) + res.dot(V2.ldlt().solve(res)));
  CHECK(marginal_loglik(r, ModelSpec::full(3, 1), th2, b) == doctest::Approx(want2).epsilon(1e-10));
}

TEST_CASE("conditional loglik") {
  const auto d = oracle::random_nerm(5, 5, 2, 4, 2, 1.0, 1.0);
  const auto spec = ModelSpec::full(2, 1);
  const auto th = VarianceParams::nerm(0.8, 1.0);
  const Eigen::VectorXd b(Eigen::Vector2d(0.3, -0.2));
  SUBCASE("u = 0 equals marginal with V = R") {
    const double lc = conditional_loglik(d, spec, th, b, Eigen::VectorXd::Zero(d.n()));
    CHECK(lc == doctest::Approx(marginal_loglik(d, spec, VarianceParams::nerm(0.0, 1.0), b)).epsilon(1e-12));
  }
  SUBCASE("perfect fit gives -(m/2) log 2 pi") {
    Eigen::VectorXd u = Eigen::VectorXd::LinSpaced(d.n(), -1.0, 1.0);
    const Eigen::VectorXd y = d.X() * b + oracle::dense_Z(d) * u;
    const double lc = conditional_loglik(d.with_response(y), spec, th, b, u);
    CHECK(lc == doctest::Approx(-0.5 * d.m() * std::log(2 * M_PI)).epsilon(1e-12));
  }
  SUBCASE("extended likelihood equals dense oracle") {
    const Eigen::VectorXd u = Eigen::VectorXd::LinSpaced(d.n(), -0.5, 0.7);
    const Eigen::VectorXd e = d.y() - d.X() * b - oracle::dense_Z(d) * u;
    const double s2e = th.sigma2_e(), s2u = th.sigma2_u();
    const double want = -0.5 * (d.m() * std::log(2 * M_PI * s2e) + e.squaredNorm() / s2e) -
                        0.5 * (d.n() * std::log(2 * M_PI * s2u) + u.squaredNorm() / s2u);
    const double got = conditional_loglik(d, spec, th, b, u) + random_effects_loglik(d, th, u);
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("Henderson solution equals GLS on random instances") {
  for (int rep = 0; rep < 20; ++rep) {
    const auto d = oracle::random_nerm(100 + rep, 8, 1, 6, 3, 0.5 + rep * 0.1, 1.0);
    const auto spec = ModelSpec::full(3, 1);
    const auto th = VarianceParams::nerm(0.3 + 0.2 * rep, 0.5 + 0.05 * rep);
    const HendersonSolution h = solve_henderson(d, spec, th);
    CHECK(oracle::rel(h.beta, oracle::gls_beta(d, spec, th)) < 1e-8);
    const Eigen::MatrixXd z = oracle::dense_Z(d);
    const Eigen::VectorXd u = oracle::dense_G(d, th) * z.transpose() *
                              oracle::dense_V(d, th).ldlt().solve(d.y() - d.X() * h.beta);
    CHECK(oracle::rel(h.u, u) < 1e-8);
  }
}

TEST_CASE("Henderson limits") {
  const auto d = oracle::random_nerm(7, 10, 3, 3, 2, 1.0, 1.0);
  const auto spec = ModelSpec::full(2, 1);
  SUBCASE("tiny random-effect variance shrinks u to zero and beta to OLS") {
    const auto h = solve_henderson(d, spec, VarianceParams::nerm(1e-12, 1.0));
    CHECK(h.u.cwiseAbs().maxCoeff() < 1e-9);
    const Eigen::VectorXd ols = (d.X().transpose() * d.X()).ldlt().solve(d.X().transpose() * d.y());
    CHECK(oracle::rel(h.beta, ols) < 1e-9);
  }
}

TEST_CASE("Woodbury identity for V inverse") {
  for (int rep = 0; rep < 10; ++rep) {
    const auto d = oracle::random_nerm(200 + rep, 6, 1, 5, 2, 1.0, 1.0);
    const auto th = VarianceParams::nerm(0.2 + rep * 0.3, 0.4 + rep * 0.1);
    const ClusterCache c = cluster_cache(d, th);
    std::vector<Eigen::MatrixXd> blocks = c.v_inv;
    const Eigen::MatrixXd got = oracle::block_diag(blocks);
    const Eigen::MatrixXd z = oracle::dense_Z(d);
    const Eigen::MatrixXd ri = oracle::dense_R(d, th).inverse();
    const Eigen::MatrixXd inner = z.transpose() * ri * z + oracle::dense_G(d, th).inverse();
    const Eigen::MatrixXd want = ri - ri * z * inner.inverse() * z.transpose() * ri;
    CHECK(oracle::rel(got, want) < 1e-10);
  }
}

TEST_CASE("effective degrees of freedom") {
  const auto d = oracle::random_nerm(9, 30, 5, 5, 3, 1.0, 1.0);
  const auto spec = ModelSpec::full(3, 1);
  SUBCASE("dense oracle and monotone in the variance ratio") {
    double prev = 0.0;
    for (double lam : {0.01, 0.1, 0.5, 1.0, 2.0, 10.0}) {
      const auto th = VarianceParams::nerm(lam, 1.0);
      const double rho = effective_dof(d, spec, th);
      CHECK(rho == doctest::Approx(oracle::dense_dof(d, spec, th)).epsilon(1e-9));
      CHECK(rho >= prev - 1e-12);
      prev = rho;
    }
  }
  SUBCASE("limits") {
    CHECK(effective_dof(d, spec, VarianceParams::nerm(1e-10, 1.0)) == doctest::Approx(3.0).epsilon(1e-6));
    CHECK(effective_dof(d, spec, VarianceParams::nerm(1e10, 1.0)) == doctest::Approx(32.0).epsilon(1e-6));
  }
  SUBCASE("bounds on random instances") {
    for (int rep = 0; rep < 100; ++rep) {
      const auto r = oracle::random_nerm(1000 + rep, 5 + rep % 7, 1, 6, 2 + rep % 3, 1.0, 1.0);
      const auto s = ModelSpec::full(r.p(), 1);
      const double rho = effective_dof(r, s, VarianceParams::nerm(0.05 + 0.1 * (rep % 13), 0.5 + 0.1 * (rep % 5)));
      CHECK(rho >= r.p() - 1e-9);
      CHECK(rho <= r.p() + r.n() + 1e-9);
    }
  }
}

TEST_CASE("K matrix blocks") {
  const auto d = oracle::random_nerm(21, 7, 2, 5, 3, 1.0, 1.0);
  const auto spec = ModelSpec::full(3, 1);
  const auto th = VarianceParams::nerm(0.8, 1.2);
  const KBlocks kb = build_K(d, spec, th);
  const Eigen::MatrixXd K = oracle::dense_K(d, spec, th);
  CHECK(oracle::rel(kb.K, K) < 1e-12);
  CHECK(oracle::rel(kb.K_inverse, K.inverse()) < 1e-9);
  const Eigen::MatrixXd x = d.X();
  const Eigen::MatrixXd a = x.transpose() * oracle::dense_V(d, th).inverse() * x;
  CHECK(oracle::rel(kb.K_inverse.topLeftCorner(3, 3), a.inverse()) < 1e-9);
  CHECK((kb.K_inverse - kb.K_inverse.transpose()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("fits, predictions and MSE terms") {
  auto data = std::make_shared<const ClusteredDataset>(oracle::random_nerm(31, 20, 5, 5, 3, 1.0, 1.0));
  FitOptions o;
  o.b_method = FitOptions::BiasMethod::zero;
  FittedLMM fit = fit_model(data, ModelSpec::full(3, 1), o);
  SUBCASE("beta equals GLS at the fitted theta") {
    CHECK(oracle::rel(fit.beta_hat, oracle::gls_beta(*data, fit.spec, fit.theta_hat)) < 1e-8);
  }
  SUBCASE("synthetic predictions") {
    MixedTarget t{Eigen::Vector3d(0.0, 1.0, 0.0), Eigen::VectorXd::Zero(1), 2};
    CHECK(predict_mixed(fit, t) == doctest::Approx(fit.beta_hat(1)));
    const auto g = mse_first_order(fit, t);
    CHECK(g.first == doctest::Approx(0.0));
    const Eigen::MatrixXd ai = spd_inverse(fit.info_marginal, "A");
    CHECK(g.second == doctest::Approx(ai(1, 1)).epsilon(1e-10));
    const MseTerms m = mse_terms(fit, t);
    CHECK(m.g3 == doctest::Approx(0.0));
  }
  SUBCASE("closed-form BLUP of a cluster mean") {
    const int i = 4;
    const Eigen::VectorXd k = data->X_i(i).colwise().mean().transpose();
    MixedTarget t{k, Eigen::VectorXd::Ones(1), i};
    const double s2u = fit.theta_hat.sigma2_u(), s2e = fit.theta_hat.sigma2_e();
    const double gamma = s2u / (s2u + s2e / 5.0);
    const double ybar = data->y_i(i).mean();
    const double want = gamma * ybar + (1.0 - gamma) * k.dot(fit.beta_hat);
    CHECK(predict_mixed(fit, t) == doctest::Approx(want).epsilon(1e-9));
  }
  SUBCASE("g1 = 1/6 at unit variances with five rows per cluster") {
    fit.theta_hat = VarianceParams::nerm(1.0, 1.0);
    MixedTarget t{Eigen::Vector3d::Zero(), Eigen::VectorXd::Ones(1), 0};
    CHECK(mse_first_order(fit, t).first == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
  }
  SUBCASE("c^t K^-1 c = g1 + g2 and mse2 >= mse1") {
    const KBlocks kb = build_K(*data, fit.spec, fit.theta_hat);
    for (int i = 0; i < data->n(); ++i) {
      MixedTarget t{data->X_i(i).colwise().mean().transpose(), Eigen::VectorXd::Ones(1), i};
      Eigen::VectorXd c = Eigen::VectorXd::Zero(3 + data->n());
      c.head(3) = t.k;
      c(3 + i) = 1.0;
      const auto g = mse_first_order(fit, t);
      CHECK(c.dot(kb.K_inverse * c) == doctest::Approx(g.first + g.second).epsilon(1e-8));
      const MseTerms m = mse_terms(fit, t);
      CHECK(m.g1 >= 0.0);
      CHECK(m.g2 >= 0.0);
      CHECK(m.g3 >= 0.0);
      CHECK(m.mse2() >= m.mse1());
    }
  }
}

TEST_CASE("derivative of a_i against central differences") {
  for (int rep = 0; rep < 20; ++rep) {
    const double s2u = 0.2 + 0.17 * rep, s2e = 0.3 + 0.11 * rep, mi = 1 + rep % 9;
    const Eigen::Vector2d g = nerm_a_coef_grad(s2u, s2e, mi);
    const double h0 = 1e-5 * s2u, h1 = 1e-5 * s2e;
    const double fd0 = (nerm_a_coef(s2u + h0, s2e, mi) - nerm_a_coef(s2u - h0, s2e, mi)) / (2 * h0);
    const double fd1 = (nerm_a_coef(s2u, s2e + h1, mi) - nerm_a_coef(s2u, s2e - h1, mi)) / (2 * h1);
    CHECK(std::abs(g(0) - fd0) / std::abs(fd0) < 1e-5);
    CHECK(std::abs(g(1) - fd1) / std::abs(fd1) < 1e-5);

    const auto d = oracle::random_nerm(500 + rep, 3, 1, 6, 2, 1.0, 1.0);
    const MixedTarget t{Eigen::Vector2d::Zero(), Eigen::VectorXd::Ones(1), rep % 3};
    const Eigen::MatrixXd da = a_derivative(d, VarianceParams::nerm(s2u, s2e), t);
    const Eigen::RowVectorXd f0 = (a_vector(d, VarianceParams::nerm(s2u + h0, s2e), t) -
                                   a_vector(d, VarianceParams::nerm(s2u - h0, s2e), t)) / (2 * h0);
    const Eigen::RowVectorXd f1 = (a_vector(d, VarianceParams::nerm(s2u, s2e + h1), t) -
                                   a_vector(d, VarianceParams::nerm(s2u, s2e - h1), t)) / (2 * h1);
    CHECK(oracle::rel(da.row(0), f0) < 1e-5);
    CHECK(oracle::rel(da.row(1), f1) < 1e-5);
  }
}

TEST_CASE("random-intercept fast path matches the dense general path") {
  for (FitMethod m : {FitMethod::reml, FitMethod::ml}) {
    auto data = std::make_shared<const ClusteredDataset>(oracle::random_nerm(41, 15, 2, 6, 3, 0.8, 1.0));
    FitOptions o;
    o.method = m;
    o.b_method = FitOptions::BiasMethod::zero;
    const FittedLMM a = fit_model(data, ModelSpec::full(3, 1), o);
    o.force_general = true;
    const FittedLMM b = fit_model(data, ModelSpec::full(3, 1), o);
    CHECK(oracle::rel(a.theta_hat.theta, b.theta_hat.theta) < 1e-4);
    CHECK(oracle::rel(a.beta_hat, b.beta_hat) < 1e-5);
    CHECK(a.loglik_marginal == doctest::Approx(b.loglik_marginal).epsilon(1e-7));
    CHECK(a.rho_hat == doctest::Approx(b.rho_hat).epsilon(1e-5));
  }
}

TEST_CASE("REML estimates are consistent at n = 90") {
  double bias_u = 0.0, bias_e = 0.0;
  const int reps = 200;
  FitOptions o;
  o.b_method = FitOptions::BiasMethod::zero;
  o.compute_K = false;
  for (int r = 0; r < reps; ++r) {
    const auto d = oracle::random_nerm(7000 + r, 90, 5, 5, 3, 1.0, 1.0);
    const FittedLMM f = fit_model(d, ModelSpec::full(3, 1), o);
    bias_u += f.theta_hat.sigma2_u() - 1.0;
    bias_e += f.theta_hat.sigma2_e() - 1.0;
  }
  CHECK(std::abs(bias_u / reps) < 0.05);
  CHECK(std::abs(bias_e / reps) < 0.05);
}

TEST_CASE("pure-noise data hits the variance boundary with a flag") {
  int flagged = 0;
  FitOptions o;
  o.b_method = FitOptions::BiasMethod::zero;
  for (int r = 0; r < 40; ++r) {
    const auto d = oracle::random_nerm(9000 + r, 10, 3, 3, 2, 0.0, 1.0);
    const FittedLMM f = fit_model(d, ModelSpec::full(2, 1), o);
    if (f.theta_hat.boundary) {
      ++flagged;
      CHECK(f.theta_hat.sigma2_u() == 0.0);
    }
  }
  CHECK(flagged > 0);
}
