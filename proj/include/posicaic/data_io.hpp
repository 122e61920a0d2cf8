#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "posicaic/errors.hpp"
#include "posicaic/lmm.hpp"
#include "posicaic/posi_ci.hpp"

namespace posicaic {

struct CsvSchema {
  int K = 0;               // covariate columns x1..xK; 0 means infer from the header
  bool add_intercept = true;
  int a = 1;               // forced leading columns of the final design, intercept included
};

struct LoadedData {
  ClusteredDataset data;
  Eigen::VectorXd weights;               // stacked like data.y()
  std::vector<std::string> cluster_ids;  // first-appearance order
  std::vector<long> row_order;           // source line of each stacked row
};

// Header: cluster_id,y,x1,...,xK[,weight]. Rows are grouped by cluster in first-appearance order.
LoadedData load_clustered_csv(const std::string& path, const CsvSchema& schema = {});
// Inverse of load_clustered_csv, dropping the intercept column when the schema added one.
void write_clustered_csv(const LoadedData& d, const std::string& path, const CsvSchema& schema = {});

struct LogShiftResult {
  Eigen::VectorXd y_transformed;
  double c_star = 0.0;
  std::vector<double> grid;
  std::vector<double> skewness;  // |Fisher skewness| at each grid point
};

double fisher_skewness(const Eigen::Ref<const Eigen::VectorXd>& v);
// 200 points over [max(eps - min y, 0) + eps, max y], eps = 1e-6 range(y).
std::vector<double> log_shift_grid(const Eigen::VectorXd& y, int points = 200);
// Residuals are y_l - X beta_hat from a full-model REML fit of each shifted response.
LogShiftResult log_shift_transform(const ClusteredDataset& data, int grid_points = 200);
LogShiftResult log_shift_transform(const ClusteredDataset& data, const std::vector<double>& grid);

// Per-cluster sum w_j x_j / sum w_j.
Eigen::MatrixXd weighted_covariate_means(const ClusteredDataset& data, const Eigen::VectorXd& weights);

struct LengthSummary {
  double min = 0.0, max = 0.0, median = 0.0, mean = 0.0, sd = 0.0;
  int count = 0;
};
LengthSummary summarize_lengths(const std::vector<IntervalResult>& intervals);

// Writes the interval CSV to path and the length summary to path + ".summary.csv".
void emit_report(const std::vector<IntervalResult>& intervals, const std::string& path);
std::vector<IntervalResult> read_report(const std::string& path);

}  // namespace posicaic
