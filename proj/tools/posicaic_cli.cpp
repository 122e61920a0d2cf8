#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>

#include "posicaic/caic.hpp"
#include "posicaic/data_io.hpp"
#include "posicaic/errors.hpp"
#include "posicaic/posi_ci.hpp"
#include "posicaic/region.hpp"
#include "posicaic/simulation.hpp"

using namespace posicaic;
using nlohmann::json;

namespace {

FitMethod parse_method(const std::string& s) {
  if (s == "reml") return FitMethod::reml;
  if (s == "ml") return FitMethod::ml;
  throw std::invalid_argument("method must be ml or reml");
}

CandidateSet all_subsets(int p, int a) {
  CandidateSet c;
  c.a = a;
  const int free = p - a;
  for (int size = 0; size <= free; ++size)
    for (unsigned s = 0; s < (1u << free); ++s) {
      if (__builtin_popcount(s) != size) continue;
      std::vector<int> idx;
      for (int j = 0; j < a; ++j) idx.push_back(j);
      for (int b = 0; b < free; ++b)
        if (s >> b & 1u) idx.push_back(a + b);
      c.specs.push_back(ModelSpec::from_indices(idx, p, a));
    }
  return c;
}

CandidateSet nested_chain(int p, int a) {
  CandidateSet c;
  c.a = a;
  c.structure = CandidateSet::Structure::nested;
  for (int k = a; k <= p; ++k) {
    std::vector<int> idx;
    for (int j = 0; j < k; ++j) idx.push_back(j);
    c.specs.push_back(ModelSpec::from_indices(idx, p, a));
  }
  return c;
}

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw Error("cannot write " + path);
  return file;
}

std::map<std::string, std::string> read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\"");
      const auto e = s.find_last_not_of(" \t\"\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

struct DataArgs {
  std::string path;
  int a = 1;
  std::string method = "reml";
  int b_reps = 200;
  std::uint64_t seed = 1;
};

void add_data_args(CLI::App* app, DataArgs& d) {
  app->add_option("--data", d.path, "clustered CSV (cluster_id,y,x1..xK[,weight])")->required();
  app->add_option("--forced", d.a, "forced leading columns, intercept included");
  app->add_option("--method", d.method, "ml or reml");
  app->add_option("--b-reps", d.b_reps, "bootstrap replicates for the cAIC correction");
  app->add_option("--seed", d.seed);
}

FitOptions fit_options(const DataArgs& d) {
  FitOptions o;
  o.method = parse_method(d.method);
  o.b_reps = d.b_reps;
  o.b_seed = d.seed;
  return o;
}

json fit_json(const FittedLMM& f) {
  json j;
  j["model"] = f.spec.label;
  j["beta"] = std::vector<double>(f.beta_hat.data(), f.beta_hat.data() + f.beta_hat.size());
  j["theta"] = std::vector<double>(f.theta_hat.theta.data(), f.theta_hat.theta.data() + f.theta_hat.theta.size());
  j["loglik_marginal"] = f.loglik_marginal;
  j["loglik_conditional"] = f.loglik_conditional;
  j["rho"] = f.rho_hat;
  j["b"] = f.b_hat;
  j["caic"] = f.caic;
  return j;
}

int run_simulate(const SimScenario& sc, const std::string& out) {
  const CoverageTable t = run_until_selected(sc);
  if (!out.empty()) write_coverage_csv(t, out);
  std::cout << "attempts " << t.attempts << ", conditioned " << t.conditioned << ", underselected "
            << t.underselected << ", chain batches " << t.chain_batches << "\n";
  for (const auto& r : t.rows)
    std::cout << r.method << ' ' << r.target << " coverage " << r.coverage << " (se " << r.mc_se << ") length "
              << r.length << '\n';
  return 0;
}

int run_region_demo(const std::string& config, const std::string& out) {
  auto kv = config.empty() ? std::map<std::string, std::string>{} : read_config(config);
  auto get = [&](const std::string& k, const std::string& d) { return kv.count(k) ? kv[k] : d; };
  const std::string structure = get("structure", "nested");
  FitOptions opts;
  opts.method = parse_method(get("method", "reml"));
  opts.b_reps = std::stoi(get("b_reps", "200"));
  opts.b_seed = std::stoull(get("seed", "7"));
  std::unique_ptr<ClusteredDataset> data;
  int a = 0;
  if (kv.count("data")) {
    CsvSchema schema;
    schema.a = std::stoi(get("forced", "1"));
    data = std::make_unique<ClusteredDataset>(load_clustered_csv(kv["data"], schema).data);
    a = schema.a;
  } else {
    SimScenario sc = SimScenario::paper(get("setting", "S1"), std::stoi(get("n", "30")), std::stoi(get("mi", "5")),
                                        structure == "nested" ? "v3" : structure);
    sc.seed = std::stoull(get("seed", "7"));
    data = std::make_unique<ClusteredDataset>(generate_nerm(sc, sc.seed));
    a = data->a();
  }
  const int p = data->p();
  CandidateSet cands;
  if (structure == "nested")
    cands = nested_chain(p, a);
  else if (kv.count("data"))
    cands = all_subsets(p, a);
  else
    cands = candidate_set_for(structure, p).candidates;
  const RegionDemo demo = region_demo(*data, cands, opts, std::stoi(get("draws", "100000")),
                                      std::stoull(get("seed", "7")));
  std::ofstream f;
  open_out(out, f) << demo.report();
  return 0;
}

int run_fit(const DataArgs& d, const std::string& out) {
  CsvSchema schema;
  schema.a = d.a;
  const LoadedData ld = load_clustered_csv(d.path, schema);
  const FittedLMM f = fit_model(ld.data, ModelSpec::full(ld.data.p(), ld.data.a()), fit_options(d));
  std::ofstream file;
  open_out(out, file) << fit_json(f).dump(2) << '\n';
  return 0;
}

int run_select(const DataArgs& d, const std::string& candidates, const std::string& out) {
  CsvSchema schema;
  schema.a = d.a;
  const LoadedData ld = load_clustered_csv(d.path, schema);
  const CandidateSet c = candidates == "nested" ? nested_chain(ld.data.p(), d.a) : all_subsets(ld.data.p(), d.a);
  const SelectionResult r = select_model(ld.data, c, fit_options(d));
  json j;
  j["selected"] = c.specs[r.selected].label;
  for (int m = 0; m < c.size(); ++m)
    j["models"].push_back({{"model", c.specs[m].label}, {"caic", r.caic[m]}, {"rho", r.rho_hat[m]}, {"b", r.b_hat[m]}});
  std::ofstream file;
  open_out(out, file) << j.dump(2) << '\n';
  return 0;
}

int run_ci(const DataArgs& d, const std::string& targets, double alpha, int B, const std::string& regions,
           const std::vector<int>& contains, const std::string& out) {
  CsvSchema schema;
  schema.a = d.a;
  const LoadedData ld = load_clustered_csv(d.path, schema);
  auto data = std::make_shared<const ClusteredDataset>(ld.data);
  const int p = data->p();
  const CandidateSet c = all_subsets(p, d.a);
  const SelectionResult sel = select_model(data, c, fit_options(d));
  const FittedLMM& fit = sel.fits[sel.selected];
  const FittedLMM& full = sel.fits.back();
  std::vector<double> all_rho_b(c.size());
  for (int m = 0; m < c.size(); ++m) all_rho_b[m] = sel.rho_hat[m] + sel.b_hat[m];
  std::vector<bool> truth(p, false);
  for (int j : contains) {
    if (j < 1 || j > p) throw std::invalid_argument("--contains index out of range");
    truth[j - 1] = true;
  }
  const CandidateSubset over = overparametrised_subset(c, truth);
  const int sel_over = over.position(sel.selected);
  if (sel_over < 0) throw std::invalid_argument("selected model lacks a --contains column");
  const std::vector<double> rho_b = over.pick(all_rho_b);
  ConstraintSet region;
  if (regions == "orthogonal")
    region = general_region_orthogonal(sigma_matrix(full), ExtendedSelectionMatrix::from_candidates(over.set),
                                       over.set, rho_b, sel_over);
  else
    region = general_region_nonorthogonal(stacked_information(full, over.set), rho_b, sel_over, true);
  std::cerr << "selected " << fit.spec.label << '\n';

  SamplerConfig cfg;
  cfg.B = B;
  cfg.seed = d.seed;
  const int n = data->n();
  const SampleBatch batch = sample_posi_joint(region, n, cfg);
  const Eigen::MatrixXd bd = beta_draws(fit, region, batch);
  const Eigen::MatrixXd kbar = weighted_covariate_means(*data, ld.weights);
  const auto cols = fit.spec.indices();
  std::vector<IntervalResult> res;
  if (targets == "betas") {
    for (std::size_t k = 0; k < cols.size(); ++k) {
      const int j = cols[k];
      res.push_back(interval_from_draws("beta" + std::to_string(j + 1), fit.beta_hat(j), bd.col(k), alpha, batch));
      res.push_back(naive_ci_beta(fit, j, alpha));
    }
  } else if (targets == "combos") {
    Eigen::VectorXd ks(cols.size());
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd ki = kbar.row(i).transpose();
      for (std::size_t k = 0; k < cols.size(); ++k) ks(k) = ki(cols[k]);
      const std::string id = "combo:" + ld.cluster_ids[i];
      res.push_back(interval_from_draws(id, ki.dot(fit.beta_hat), bd * ks, alpha, batch));
      res.push_back(naive_ci_linear_combo(fit, ki, alpha));
      res.back().target_id = id;
    }
  } else if (targets == "mixed") {
    FittedLMM fk = fit;
    const KBlocks kb = build_K(*data, fk.spec, fk.theta_hat);
    fk.K_matrix = kb.K;
    fk.K_inverse = kb.K_inverse;
    const MixedReadout mr = mixed_readout(fk);
    const ConstraintSet region_mu = region.with_free_tail(n);
    for (int i = 0; i < n; ++i) {
      MixedTarget t;
      t.k = kbar.row(i).transpose();
      t.m = Eigen::VectorXd::Ones(data->q());
      t.cluster = i;
      const std::string id = "mu:" + ld.cluster_ids[i];
      res.push_back(interval_from_draws(id, predict_mixed(fk, t), mixed_draws(fk, mr, region_mu, batch, t), alpha,
                                        batch));
      for (int order : {1, 2}) {
        res.push_back(naive_ci_mixed(fk, t, alpha, order));
        res.back().target_id = id;
      }
    }
  } else {
    throw std::invalid_argument("targets must be betas, combos or mixed");
  }
  if (out.empty() || out == "-") {
    std::cout << interval_csv_header() << '\n';
    for (const auto& r : res) std::cout << interval_csv_row(r) << '\n';
  } else {
    emit_report(res, out);
  }
  return 0;
}

int run_transform(const DataArgs& d, int points, const std::string& out) {
  CsvSchema schema;
  schema.a = d.a;
  LoadedData ld = load_clustered_csv(d.path, schema);
  const LogShiftResult r = log_shift_transform(ld.data, points);
  std::cerr << "c* = " << r.c_star << '\n';
  if (!out.empty()) {
    LoadedData t{ld.data.with_response(r.y_transformed), ld.weights, ld.cluster_ids, ld.row_order};
    write_clustered_csv(t, out, schema);
  } else {
    std::cout << r.c_star << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"post-cAIC confidence intervals for linear mixed models"};
  app.require_subcommand(1);

  SimScenario sc = SimScenario::paper("S1", 30, 5);
  std::string setting = "S1", sim_out;
  auto* sim = app.add_subcommand("simulate", "coverage simulation conditional on selecting the full model");
  sim->add_option("--setting", setting)->check(CLI::IsMember({"S1", "S2"}));
  sim->add_option("--n", sc.n);
  sim->add_option("--mi", sc.mi);
  sim->add_option("--sel-matrix", sc.sel_tag)->check(CLI::IsMember({"v2", "v3", "v4"}));
  sim->add_option("--I", sc.I);
  sim->add_option("--B", sc.B);
  sim->add_option("--alpha", sc.alpha);
  sim->add_option("--seed", sc.seed);
  sim->add_option("--b-reps", sc.b_reps);
  sim->add_flag("!--stacked-regions", sc.orthogonal_regions, "use the correlated stacked regions");
  sim->add_option("--out", sim_out);

  std::string demo_config, demo_out;
  auto* demo = app.add_subcommand("region-demo", "print selection regions and the partition check");
  demo->add_option("--config", demo_config, "key = value file");
  demo->add_option("--out", demo_out);

  DataArgs fit_args, sel_args, ci_args, tr_args;
  std::string fit_out, sel_out, ci_out, tr_out, cand = "all", targets = "betas", regions = "stacked";
  double alpha = 0.05;
  int B = 10000, points = 200;
  auto* fit = app.add_subcommand("fit", "fit the full model");
  add_data_args(fit, fit_args);
  fit->add_option("--out", fit_out);
  auto* sel = app.add_subcommand("select", "cAIC selection over the candidate set");
  add_data_args(sel, sel_args);
  sel->add_option("--candidates", cand)->check(CLI::IsMember({"all", "nested"}));
  sel->add_option("--out", sel_out);
  std::vector<int> contains;
  auto* ci = app.add_subcommand("ci", "post-cAIC and naive intervals");
  add_data_args(ci, ci_args);
  ci->add_option("--targets", targets)->check(CLI::IsMember({"betas", "combos", "mixed"}));
  ci->add_option("--alpha", alpha);
  ci->add_option("--B", B);
  ci->add_option("--regions", regions)->check(CLI::IsMember({"orthogonal", "stacked"}));
  ci->add_option("--contains", contains, "1-based columns every region candidate must include")->delimiter(',');
  ci->add_option("--out", ci_out);
  auto* tr = app.add_subcommand("transform", "log-shift transform of the response");
  add_data_args(tr, tr_args);
  tr->add_option("--grid-points", points);
  tr->add_option("--out", tr_out);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*sim) {
      SimScenario s = SimScenario::paper(setting, sc.n, sc.mi, sc.sel_tag);
      s.I = sc.I;
      s.B = sc.B;
      s.alpha = sc.alpha;
      s.seed = sc.seed;
      s.b_reps = sc.b_reps;
      s.orthogonal_regions = sc.orthogonal_regions;
      return run_simulate(s, sim_out);
    }
    if (*demo) return run_region_demo(demo_config, demo_out);
    if (*fit) return run_fit(fit_args, fit_out);
    if (*sel) return run_select(sel_args, cand, sel_out);
    if (*ci) return run_ci(ci_args, targets, alpha, B, regions, contains, ci_out);
    if (*tr) return run_transform(tr_args, points, tr_out);
  } catch (const ConvergenceError& e) {
    std::cerr << "non-convergence: " << e.what() << '\n';
    return 2;
  } catch (const TargetNeverSelected& e) {
    std::cerr << "target never selected: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
