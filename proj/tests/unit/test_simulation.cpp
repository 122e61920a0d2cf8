#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "posicaic/simulation.hpp"

using namespace posicaic;

TEST_CASE("generated data moments") {
  SimScenario sc = SimScenario::paper("S1", 2000, 5);
  const NermDraw d = generate_nerm_draw(sc, 11);
  CHECK(d.data.n() == 2000);
  CHECK(d.data.p() == 5);
  CHECK(d.data.a() == 2);
  CHECK((d.data.X().col(0).array() == 1.0).all());

  const Eigen::MatrixXd xc = d.data.X().rightCols(4).rowwise() - d.data.X().rightCols(4).colwise().mean();
  const Eigen::MatrixXd cov = xc.transpose() * xc / (d.data.m() - 1);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) CHECK(std::abs(cov(a, b) - (a == b ? 1.0 : 0.25)) < 0.06);

  const Eigen::VectorXd e = d.data.y() - d.data.X() * sc.beta_true;
  double total = 0.0, within = 0.0;
  long pairs = 0;
  for (int i = 0; i < d.data.n(); ++i) {
    const auto ei = e.segment(d.data.offset(i), d.data.size(i));
    total += ei.squaredNorm();
    for (int j = 0; j < ei.size(); ++j)
      for (int k = j + 1; k < ei.size(); ++k, ++pairs) within += ei(j) * ei(k);
  }
  CHECK(total / d.data.m() == doctest::Approx(2.0).epsilon(0.05));
  CHECK(within / pairs == doctest::Approx(1.0).epsilon(0.12));
  CHECK(d.u.squaredNorm() / d.u.size() == doctest::Approx(1.0).epsilon(0.1));

  sc.beta_true.setZero();
  sc.sigma2_u = 0.0;
  const NermDraw z = generate_nerm_draw(sc, 12);
  CHECK(z.data.y().squaredNorm() / z.data.m() == doctest::Approx(1.0).epsilon(0.05));
  CHECK(z.u.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("generation is deterministic in the seed") {
  const SimScenario sc = SimScenario::paper("S2", 15, 5);
  CHECK(generate_nerm(sc, 3).y() == generate_nerm(sc, 3).y());
  CHECK_FALSE(generate_nerm(sc, 3).y() == generate_nerm(sc, 4).y());
}

TEST_CASE("paper scenarios") {
  const SimScenario s1 = SimScenario::paper("S1", 30, 5);
  const SimScenario s2 = SimScenario::paper("S2", 15, 5, "v3");
  CHECK(s1.sigma2_u == 1.0);
  CHECK(s2.sigma2_u == 0.5);
  CHECK(s2.sigma2_e == 1.0);
  CHECK(s1.beta_true(2) == 2.43);
  CHECK(s1.true_model == std::vector<bool>{true, true, true, false, false});
  CHECK_THROWS(SimScenario::paper("S3", 30, 5));
}

TEST_CASE("candidate families") {
  const CandidateFamily v2 = candidate_set_for("v2");
  const CandidateFamily v3 = candidate_set_for("v3");
  const CandidateFamily v4 = candidate_set_for("v4");
  CHECK(v2.candidates.size() == 8);
  CHECK(v3.candidates.size() == 4);
  CHECK(v4.candidates.size() == 2);
  CHECK(v2.candidates.specs.front().indices() == std::vector<int>{0, 1});
  CHECK(v2.candidates.specs.back().indices() == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(v2.candidates.specs[1].indices() == std::vector<int>{0, 1, 2});
  CHECK(v2.candidates.specs[4].indices() == std::vector<int>{0, 1, 2, 3});
  for (int m = 1; m < v2.candidates.size(); ++m)
    CHECK(v2.candidates.specs[m - 1].size() <= v2.candidates.specs[m].size());
  CHECK(v2.upsilon.upsilon.rows() == 8);
  CHECK(v4.upsilon.upsilon.rows() == 2);
  CHECK_THROWS(candidate_set_for("v9"));
}

TEST_CASE("small coverage run is reproducible") {
  SimScenario sc = SimScenario::paper("S1", 15, 5, "v4");
  sc.I = 2;
  sc.B = 300;
  sc.b_reps = 20;
  sc.wave = 4;
  const CoverageTable a = run_until_selected(sc);
  const CoverageTable b = run_until_selected(sc);
  CHECK(a.conditioned == 2);
  CHECK(a.attempts == b.attempts);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t k = 0; k < a.rows.size(); ++k) {
    CHECK(a.rows[k].coverage == b.rows[k].coverage);
    CHECK(a.rows[k].length == b.rows[k].length);
  }
  const CoverageRow& r = a.find("post-caic", "beta5");
  CHECK(r.replications == 2);
  CHECK(r.length > 0.0);
  CHECK(a.find("naive-2", "mu").replications == 2);
  CHECK_THROWS(a.find("post-caic", "nothing"));

  const auto path = std::filesystem::temp_directory_path() / "posicaic_cov.csv";
  write_coverage_csv(a, path.string());
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "setting,method,target,coverage,length,mc_se");
  int lines = 0;
  for (std::string s; std::getline(in, s);) ++lines;
  CHECK(lines == static_cast<int>(a.rows.size()));
  std::filesystem::remove(path);
}

TEST_CASE("one conditioned replication with two candidates") {
  SimScenario sc = SimScenario::paper("S2", 15, 5, "v4");
  sc.I = 1;
  sc.B = 200;
  sc.b_reps = 10;
  sc.wave = 2;
  const CoverageTable t = run_until_selected(sc);
  CHECK(t.conditioned == 1);
  CHECK(t.selection_counts.size() == 2);
  CHECK(t.underselected == 0);
  for (const auto& r : t.rows)
    if (r.target.rfind("beta", 0) == 0) CHECK((r.coverage == 0.0 || r.coverage == 100.0));
}

TEST_CASE("region demo partitions the sample space") {
  SimScenario sc = SimScenario::paper("S1", 15, 5);
  const ClusteredDataset d = generate_nerm(sc, 2);
  FitOptions o;
  o.b_reps = 20;
  const RegionDemo r = region_demo(d, candidate_set_for("v3").candidates, o, 20000, 3);
  CHECK(r.regions.size() == 4);
  CHECK(r.exactly_one == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(r.none + r.several < 1e-3);
  CHECK(r.report().find("exactly one") != std::string::npos);
}
