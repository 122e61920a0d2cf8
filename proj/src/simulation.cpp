#include "posicaic/simulation.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>

#include "posicaic/errors.hpp"
#include "posicaic/linalg.hpp"
#include "posicaic/rng.hpp"

namespace posicaic {

namespace {

constexpr std::uint64_t kBootSalt = 0xb0075eedull;
constexpr std::uint64_t kSamplerSalt = 0x5a3b1e5ull;

int find_spec(const CandidateSet& c, const std::vector<bool>& mask) {
  for (int m = 0; m < c.size(); ++m)
    if (c.specs[m].included == mask) return m;
  return -1;
}

bool misses_any(const ModelSpec& s, const std::vector<bool>& truth) {
  for (std::size_t j = 0; j < truth.size(); ++j)
    if (truth[j] && !s.included[j]) return true;
  return false;
}

Eigen::MatrixXd cluster_means(const ClusteredDataset& d) {
  Eigen::MatrixXd out(d.n(), d.p());
  for (int i = 0; i < d.n(); ++i) out.row(i) = d.X_i(i).colwise().mean();
  return out;
}

struct Tally {
  double covered = 0.0;
  double length = 0.0;
};

struct AttemptResult {
  bool ok = false;
  int selected = -1;
  bool under = false;
  bool conditioned = false;
  std::map<std::pair<std::string, std::string>, Tally> tallies;
  double acceptance = 0.0;
  bool chain = false;
  std::string error;
};

FitOptions selection_options(const SimScenario& sc, std::uint64_t attempt) {
  FitOptions o;
  o.method = sc.method;
  o.b_reps = sc.b_reps;
  o.b_seed = substream(sc.seed ^ kBootSalt, attempt);
  o.compute_K = false;
  return o;
}

void add(AttemptResult& r, const std::string& method, const std::string& target, bool covered, double length,
         double weight = 1.0) {
  Tally& t = r.tallies[{method, target}];
  t.covered += covered ? weight : 0.0;
  t.length += length * weight;
}

AttemptResult run_attempt(const SimScenario& sc, const CandidateFamily& fam, const CandidateSubset& over,
                          const ExtendedSelectionMatrix& over_ups, int target, int full, long k) {
  AttemptResult r;
  const NermDraw draw = generate_nerm_draw(sc, substream(sc.seed, static_cast<std::uint64_t>(k)));
  auto data = std::make_shared<const ClusteredDataset>(draw.data);
  const SelectionResult sel = select_model(data, fam.candidates, selection_options(sc, k));
  r.ok = true;
  r.selected = sel.selected;
  r.under = misses_any(fam.candidates.specs[sel.selected], sc.true_model);
  if (sel.selected != target) return r;
  r.conditioned = true;

  FittedLMM fit = sel.fits[sel.selected];
  const KBlocks kb = build_K(*data, fit.spec, fit.theta_hat);
  fit.K_matrix = kb.K;
  fit.K_inverse = kb.K_inverse;
  std::vector<double> rho_b(fam.candidates.size());
  for (int m = 0; m < fam.candidates.size(); ++m) rho_b[m] = sel.rho_hat[m] + sel.b_hat[m];
  const std::vector<double> rho_b_over = over.pick(rho_b);
  const int sel_over = over.position(sel.selected);
  const FittedLMM& full_fit = sel.fits[full];
  const ConstraintSet region =
      sc.orthogonal_regions
          ? general_region_orthogonal(sigma_matrix(full_fit), over_ups, over.set, rho_b_over, sel_over)
          : general_region_nonorthogonal(stacked_information(full_fit, over.set), rho_b_over, sel_over, true);

  SamplerConfig cfg;
  cfg.B = sc.B;
  cfg.seed = substream(sc.seed ^ kSamplerSalt, static_cast<std::uint64_t>(k));
  const int n = data->n();
  const SampleBatch batch = sample_posi_joint(region, n, cfg);
  r.chain = batch.method == SamplerMethod::chain;
  r.acceptance = batch.method == SamplerMethod::rejection ? batch.acceptance_rate : 0.0;

  const Eigen::MatrixXd bd = beta_draws(fit, region, batch);
  const auto cols = fit.spec.indices();
  for (std::size_t c = 0; c < cols.size(); ++c) {
    const int j = cols[c];
    const std::string id = "beta" + std::to_string(j + 1);
    const double truth = sc.beta_true(j);
    const IntervalResult post = interval_from_draws(id, fit.beta_hat(j), bd.col(c), sc.alpha, batch);
    const IntervalResult naive = naive_ci_beta(fit, j, sc.alpha);
    add(r, "post-caic", id, post.covers(truth), post.length());
    add(r, "naive", id, naive.covers(truth), naive.length());
  }

  const Eigen::MatrixXd kbar = cluster_means(*data);
  const double w = 1.0 / n;
  Eigen::VectorXd ks(cols.size());
  for (int i = 0; i < n; ++i) {
    const Eigen::VectorXd ki = kbar.row(i).transpose();
    for (std::size_t c = 0; c < cols.size(); ++c) ks(c) = ki(cols[c]);
    const double truth = ki.dot(sc.beta_true);
    const Eigen::VectorXd d = bd * ks;
    const IntervalResult post = interval_from_draws("combo", ki.dot(fit.beta_hat), d, sc.alpha, batch);
    const IntervalResult naive = naive_ci_linear_combo(fit, ki, sc.alpha);
    add(r, "post-caic", "combo", post.covers(truth), post.length(), w);
    add(r, "naive", "combo", naive.covers(truth), naive.length(), w);
  }

  const ConstraintSet region_mu = region.with_free_tail(n);
  const MixedReadout mr = mixed_readout(fit);
  for (int i = 0; i < n; ++i) {
    MixedTarget t;
    t.k = kbar.row(i).transpose();
    t.m = Eigen::VectorXd::Ones(1);
    t.cluster = i;
    const double truth = t.k.dot(sc.beta_true) + draw.u(i);
    const Eigen::VectorXd d = mixed_draws(fit, mr, region_mu, batch, t);
    const IntervalResult post = interval_from_draws("mu", predict_mixed(fit, t), d, sc.alpha, batch);
    const IntervalResult n1 = naive_ci_mixed(fit, t, sc.alpha, 1);
    const IntervalResult n2 = naive_ci_mixed(fit, t, sc.alpha, 2);
    add(r, "post-caic", "mu", post.covers(truth), post.length(), w);
    add(r, "naive-1", "mu", n1.covers(truth), n1.length(), w);
    add(r, "naive-2", "mu", n2.covers(truth), n2.length(), w);
  }
  return r;
}

}  // namespace

SimScenario SimScenario::paper(const std::string& setting, int n, int mi, const std::string& tag) {
  SimScenario s;
  s.setting = setting;
  s.beta_true = (Eigen::VectorXd(5) << 2.25, -1.1, 2.43, 0.0, 0.0).finished();
  if (setting == "S1") {
    s.sigma2_e = 1.0;
    s.sigma2_u = 1.0;
  } else if (setting == "S2") {
    s.sigma2_e = 1.0;
    s.sigma2_u = 0.5;
  } else {
    throw std::invalid_argument("setting must be S1 or S2");
  }
  s.n = n;
  s.mi = mi;
  s.sel_tag = tag;
  s.true_model = {true, true, true, false, false};
  s.target.assign(5, true);
  return s;
}

void SimScenario::validate() const {
  if (n < 2 || mi < 2) throw std::invalid_argument("scenario needs n >= 2 and m_i >= 2");
  if (I < 1) throw std::invalid_argument("I must be at least 1");
  if (beta_true.size() < 2) throw std::invalid_argument("beta_true needs an intercept and a covariate");
  if (!(sigma2_e > 0.0) || sigma2_u < 0.0) throw std::invalid_argument("variance components out of range");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
  if (static_cast<Eigen::Index>(true_model.size()) != beta_true.size())
    throw std::invalid_argument("true_model mask length differs from beta");
}

NermDraw generate_nerm_draw(const SimScenario& sc, std::uint64_t rep_seed) {
  sc.validate();
  const int p = static_cast<int>(sc.beta_true.size());
  const int kx = p - 1;
  Eigen::MatrixXd omega = Eigen::MatrixXd::Constant(kx, kx, sc.omega_offdiag);
  omega.diagonal().setOnes();
  const Eigen::MatrixXd L = Eigen::LLT<Eigen::MatrixXd>(omega).matrixL();
  auto gen = make_stream(rep_seed, 0);
  std::normal_distribution<double> nd;
  std::vector<Eigen::VectorXd> ys(sc.n);
  std::vector<Eigen::MatrixXd> xs(sc.n);
  Eigen::VectorXd u(sc.n);
  const double su = std::sqrt(sc.sigma2_u), se = std::sqrt(sc.sigma2_e);
  Eigen::VectorXd z(kx);
  for (int i = 0; i < sc.n; ++i) {
    Eigen::MatrixXd x(sc.mi, p);
    for (int j = 0; j < sc.mi; ++j) {
      for (int c = 0; c < kx; ++c) z(c) = nd(gen);
      x(j, 0) = 1.0;
      x.row(j).tail(kx) = (L * z).transpose();
    }
    u(i) = su * nd(gen);
    Eigen::VectorXd y = x * sc.beta_true;
    for (int j = 0; j < sc.mi; ++j) y(j) += u(i) + se * nd(gen);
    ys[i] = std::move(y);
    xs[i] = std::move(x);
  }
  const int a = sc.sel_tag == "v3" ? 3 : sc.sel_tag == "v4" ? 4 : 2;
  return {ClusteredDataset::random_intercept(ys, xs, std::min(a, p)), u};
}

ClusteredDataset generate_nerm(const SimScenario& scenario, std::uint64_t rep_seed) {
  return generate_nerm_draw(scenario, rep_seed).data;
}

CandidateFamily candidate_set_for(const std::string& tag, int p) {
  int a = 0;
  if (tag == "v2")
    a = 2;
  else if (tag == "v3")
    a = 3;
  else if (tag == "v4")
    a = 4;
  else
    throw std::invalid_argument("selection matrix tag must be v2, v3 or v4");
  if (a >= p) throw std::invalid_argument("no selectable covariates left");
  const int free = p - a;
  std::vector<unsigned> subsets;
  for (unsigned s = 0; s < (1u << free); ++s) subsets.push_back(s);
  // by size, then by the sorted index list
  std::stable_sort(subsets.begin(), subsets.end(), [&](unsigned x, unsigned y) {
    const int cx = __builtin_popcount(x), cy = __builtin_popcount(y);
    if (cx != cy) return cx < cy;
    for (int b = 0; b < free; ++b) {
      const bool bx = x >> b & 1u, by = y >> b & 1u;
      if (bx != by) return bx;
    }
    return false;
  });
  CandidateFamily fam;
  fam.candidates.a = a;
  fam.candidates.structure = CandidateSet::Structure::general;
  for (unsigned s : subsets) {
    std::vector<int> idx;
    for (int j = 0; j < a; ++j) idx.push_back(j);
    for (int b = 0; b < free; ++b)
      if (s >> b & 1u) idx.push_back(a + b);
    fam.candidates.specs.push_back(ModelSpec::from_indices(idx, p, a));
  }
  fam.upsilon = ExtendedSelectionMatrix::from_candidates(fam.candidates);
  return fam;
}

const CoverageRow& CoverageTable::find(const std::string& method, const std::string& target) const {
  for (const auto& r : rows)
    if (r.method == method && r.target == target) return r;
  throw std::out_of_range("no coverage row for " + method + "/" + target);
}

CoverageTable run_until_selected(const SimScenario& sc) {
  sc.validate();
  const CandidateFamily fam = candidate_set_for(sc.sel_tag, static_cast<int>(sc.beta_true.size()));
  const int p = static_cast<int>(sc.beta_true.size());
  const std::vector<bool> target_mask = sc.target.empty() ? std::vector<bool>(p, true) : sc.target;
  const int target = find_spec(fam.candidates, target_mask);
  const int full = find_spec(fam.candidates, std::vector<bool>(p, true));
  if (target < 0) throw std::invalid_argument("target model is not in the candidate set");
  if (full < 0) throw std::invalid_argument("candidate set lacks the full model");
  const CandidateSubset over = overparametrised_subset(fam.candidates, sc.true_model);
  if (over.position(target) < 0) throw std::invalid_argument("target model does not contain the true model");
  const ExtendedSelectionMatrix over_ups = ExtendedSelectionMatrix::from_candidates(over.set);

  CoverageTable table;
  table.selection_counts.assign(fam.candidates.size(), 0);
  std::map<std::pair<std::string, std::string>, Tally> total;
  const long max_attempts = static_cast<long>(sc.max_attempt_factor) * sc.I;
  long failures = 0;
  double acc_sum = 0.0;
  for (long start = 0; table.conditioned < sc.I && start < max_attempts; start += sc.wave) {
    const long stop = std::min(start + sc.wave, max_attempts);
    std::vector<AttemptResult> wave(stop - start);
    std::exception_ptr err = nullptr;
#pragma omp parallel for schedule(dynamic)
    for (long k = start; k < stop; ++k) {
      try {
        wave[k - start] = run_attempt(sc, fam, over, over_ups, target, full, k);
      } catch (const ConvergenceError& e) {
        wave[k - start].error = e.what();
      } catch (const NumericalError& e) {
        wave[k - start].error = e.what();
      } catch (...) {
#pragma omp critical
        if (!err) err = std::current_exception();
      }
    }
    if (err) std::rethrow_exception(err);
    for (auto& r : wave) {
      if (table.conditioned >= sc.I) break;
      ++table.attempts;
      if (!r.ok) {
        ++failures;
        continue;
      }
      ++table.selection_counts[r.selected];
      table.underselected += r.under;
      if (!r.conditioned) continue;
      ++table.conditioned;
      acc_sum += r.acceptance;
      table.chain_batches += r.chain;
      for (const auto& [key, t] : r.tallies) {
        total[key].covered += t.covered;
        total[key].length += t.length;
      }
    }
  }
  if (failures > 0) warn(std::to_string(failures) + " attempts skipped after fit failures");
  if (table.conditioned < sc.I)
    throw TargetNeverSelected("target model selected " + std::to_string(table.conditioned) + " times in " +
                              std::to_string(table.attempts) + " attempts; needed " + std::to_string(sc.I));
  table.mean_acceptance = acc_sum / table.conditioned;
  const double I = table.conditioned;
  for (const auto& [key, t] : total) {
    CoverageRow row;
    row.setting = sc.setting + " (" + std::to_string(sc.n) + ":" + std::to_string(sc.mi) + ")";
    row.method = key.first;
    row.target = key.second;
    const double cov = t.covered / I;
    row.coverage = 100.0 * cov;
    row.length = t.length / I;
    row.mc_se = 100.0 * std::sqrt(cov * (1.0 - cov) / I);
    row.replications = table.conditioned;
    table.rows.push_back(row);
  }
  return table;
}

void write_coverage_csv(const CoverageTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "setting,method,target,coverage,length,mc_se\n" << std::setprecision(10);
  for (const auto& r : table.rows)
    out << r.setting << ',' << r.method << ',' << r.target << ',' << r.coverage << ',' << r.length << ',' << r.mc_se
        << '\n';
}

UnderselectionStats underselection_stats(const SimScenario& sc, const CandidateSet& candidates, int reps,
                                         std::uint64_t seed) {
  sc.validate();
  candidates.validate();
  if (reps < 1) throw std::invalid_argument("reps must be positive");
  std::vector<signed char> under(reps, 0);
  std::exception_ptr err = nullptr;
#pragma omp parallel for schedule(dynamic)
  for (int k = 0; k < reps; ++k) {
    try {
      SimScenario local = sc;
      local.seed = seed;
      auto data = std::make_shared<const ClusteredDataset>(generate_nerm(local, substream(seed, k)));
      const SelectionResult res = select_model(data, candidates, selection_options(local, k));
      under[k] = misses_any(candidates.specs[res.selected], sc.true_model);
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  UnderselectionStats s;
  s.reps = reps;
  for (signed char u : under) s.count += u;
  s.rate = static_cast<double>(s.count) / reps;
  s.se = std::sqrt(s.rate * (1.0 - s.rate) / reps);
  return s;
}

double underselection_rate(const SimScenario& scenario, const CandidateSet& candidates, int reps, std::uint64_t seed) {
  return underselection_stats(scenario, candidates, reps, seed).rate;
}

RegionDemo region_demo(const ClusteredDataset& data, const CandidateSet& candidates, const FitOptions& opts, int draws,
                       std::uint64_t seed) {
  candidates.validate();
  const int p = data.p();
  const int full = find_spec(candidates, std::vector<bool>(p, true));
  if (full < 0) throw std::invalid_argument("region demo needs the full model among the candidates");
  const SelectionResult sel = select_model(data, candidates, opts);
  RegionDemo demo;
  demo.caic = sel.caic;
  for (int m = 0; m < candidates.size(); ++m) {
    demo.labels.push_back(candidates.specs[m].label);
    demo.rho_b.push_back(sel.rho_hat[m] + sel.b_hat[m]);
  }
  const SigmaEstimate sigma = sigma_matrix(sel.fits[full]);
  demo.sigma = sigma.Sigma;
  bool prefix_chain = candidates.structure == CandidateSet::Structure::nested;
  for (int m = 0; m < candidates.size() && prefix_chain; ++m)
    for (int j = 0; j < p; ++j) prefix_chain = prefix_chain && candidates.specs[m].included[j] == (j < candidates.a + m);
  const auto ups = ExtendedSelectionMatrix::from_candidates(candidates);
  for (int s = 0; s < candidates.size(); ++s) {
    if (prefix_chain)
      demo.regions.push_back(nested_region(sigma, demo.rho_b, candidates.a, p - candidates.a, s));
    else
      demo.regions.push_back(general_region_orthogonal(sigma, ups, candidates, demo.rho_b, s));
  }
  auto gen = make_stream(seed, 0);
  std::normal_distribution<double> nd;
  Eigen::VectorXd w(p);
  long one = 0, none = 0, several = 0;
  for (int d = 0; d < draws; ++d) {
    for (int j = 0; j < p; ++j) w(j) = nd(gen);
    int hits = 0;
    for (const auto& r : demo.regions) hits += region_contains(w, r);
    one += hits == 1;
    none += hits == 0;
    several += hits > 1;
  }
  demo.draws = draws;
  demo.exactly_one = static_cast<double>(one) / draws;
  demo.none = static_cast<double>(none) / draws;
  demo.several = static_cast<double>(several) / draws;
  return demo;
}

std::string RegionDemo::report() const {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "models:\n";
  for (std::size_t m = 0; m < labels.size(); ++m)
    os << "  " << labels[m] << "  cAIC=" << caic[m] << "  rho+b=" << rho_b[m] << '\n';
  os << "Sigma:\n" << sigma << "\n";
  for (std::size_t m = 0; m < regions.size(); ++m) os << "region when " << labels[m] << " is selected:\n" << region_to_json(regions[m]) << '\n';
  os << "partition over " << draws << " draws: exactly one=" << exactly_one << " none=" << none << " several=" << several
     << '\n';
  return os.str();
}

}  // namespace posicaic
