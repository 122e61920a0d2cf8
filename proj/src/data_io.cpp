#include "posicaic/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

#include "posicaic/errors.hpp"

namespace posicaic {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, long line, const std::string& column) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = b + s.size();
  if (b != e && *b == '+') ++b;
  const auto [ptr, ec] = std::from_chars(b, e, v);
  if (s.empty() || ec != std::errc() || ptr != e || !std::isfinite(v))
    throw DataError("bad or missing value '" + s + "' in column " + column, line);
  return v;
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

LoadedData load_clustered_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  long line_no = 1;
  if (!std::getline(in, line)) throw DataError("empty file", 1);
  const auto header = split_csv(line);
  if (header.size() < 2 || header[0] != "cluster_id" || header[1] != "y")
    throw DataError("header must start with cluster_id,y", 1);
  const bool has_weight = header.back() == "weight";
  const int K = static_cast<int>(header.size()) - 2 - (has_weight ? 1 : 0);
  if (schema.K > 0 && K != schema.K)
    throw DataError("expected " + std::to_string(schema.K) + " covariates, found " + std::to_string(K), 1);
  for (int k = 0; k < K; ++k)
    if (header[2 + k] != "x" + std::to_string(k + 1)) throw DataError("unexpected column " + header[2 + k], 1);

  std::map<std::string, int> index;
  std::vector<std::string> ids;
  std::vector<std::vector<std::pair<long, std::vector<double>>>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size())
      throw DataError("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(cells.size()),
                      line_no);
    if (cells[0].empty()) throw DataError("missing cluster_id", line_no);
    std::vector<double> v(cells.size() - 1);
    for (std::size_t c = 1; c < cells.size(); ++c) v[c - 1] = parse_number(cells[c], line_no, header[c]);
    if (has_weight && !(v.back() > 0.0)) throw DataError("weight must be positive", line_no);
    auto [it, fresh] = index.try_emplace(cells[0], static_cast<int>(ids.size()));
    if (fresh) {
      ids.push_back(cells[0]);
      rows.emplace_back();
    }
    rows[it->second].emplace_back(line_no, std::move(v));
  }
  if (ids.empty()) throw DataError("no data rows");

  const int p = K + (schema.add_intercept ? 1 : 0);
  if (p == 0) throw DataError("design has no columns");
  std::vector<Eigen::VectorXd> ys;
  std::vector<Eigen::MatrixXd> xs;
  std::vector<double> w;
  std::vector<long> order;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& rs = rows[i];
    Eigen::VectorXd y(rs.size());
    Eigen::MatrixXd x(rs.size(), p);
    for (std::size_t j = 0; j < rs.size(); ++j) {
      const auto& v = rs[j].second;
      y(j) = v[0];
      int c = 0;
      if (schema.add_intercept) x(j, c++) = 1.0;
      for (int k = 0; k < K; ++k) x(j, c++) = v[1 + k];
      w.push_back(has_weight ? v.back() : 1.0);
      order.push_back(rs[j].first);
    }
    ys.push_back(std::move(y));
    xs.push_back(std::move(x));
  }
  Eigen::MatrixXd stacked(order.size(), p);
  for (Eigen::Index off = 0; const auto& x : xs) {
    stacked.middleRows(off, x.rows()) = x;
    off += x.rows();
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(stacked);
  if (qr.rank() < p) throw DataError("design matrix is rank deficient");
  if (schema.a < 0 || schema.a > p) throw DataError("forced column count out of range");
  return {ClusteredDataset::random_intercept(ys, xs, schema.a, schema.add_intercept),
          Eigen::Map<Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size())), ids, order};
}

void write_clustered_csv(const LoadedData& d, const std::string& path, const CsvSchema& schema) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  const int skip = schema.add_intercept ? 1 : 0;
  const int K = d.data.p() - skip;
  out << "cluster_id,y";
  for (int k = 0; k < K; ++k) out << ",x" << k + 1;
  out << ",weight\n";
  for (int i = 0; i < d.data.n(); ++i) {
    const auto off = d.data.offset(i);
    for (Eigen::Index j = 0; j < d.data.size(i); ++j) {
      out << d.cluster_ids[i] << ',' << format_double(d.data.y()(off + j));
      for (int k = 0; k < K; ++k) out << ',' << format_double(d.data.X()(off + j, skip + k));
      out << ',' << format_double(d.weights(off + j)) << '\n';
    }
  }
}

double fisher_skewness(const Eigen::Ref<const Eigen::VectorXd>& v) {
  if (v.size() < 3) throw std::invalid_argument("skewness needs at least 3 values");
  const double mean = v.mean();
  const Eigen::ArrayXd d = v.array() - mean;
  const double m2 = d.square().mean();
  const double m3 = d.cube().mean();
  if (m2 <= 1e-28 * std::max(1.0, mean * mean)) return 0.0;
  return m3 / std::pow(m2, 1.5);
}

std::vector<double> log_shift_grid(const Eigen::VectorXd& y, int points) {
  if (y.size() == 0) throw std::invalid_argument("empty response");
  if (points < 2) throw std::invalid_argument("grid needs at least 2 points");
  const double lo_y = y.minCoeff(), hi_y = y.maxCoeff();
  const double range = hi_y - lo_y;
  const double eps = 1e-6 * (range > 0.0 ? range : std::max(1.0, std::abs(hi_y)));
  const double lo = std::max(eps - lo_y, 0.0) + eps;
  const double hi = hi_y;
  if (!(hi > lo)) throw DataError("log-shift grid is empty: max(y) must exceed the positivity bound");
  std::vector<double> g(points);
  for (int k = 0; k < points; ++k) g[k] = lo + (hi - lo) * k / (points - 1);
  return g;
}

LogShiftResult log_shift_transform(const ClusteredDataset& data, int grid_points) {
  return log_shift_transform(data, log_shift_grid(data.y(), grid_points));
}

LogShiftResult log_shift_transform(const ClusteredDataset& data, const std::vector<double>& grid) {
  if (grid.empty()) throw DataError("log-shift grid is empty");
  const double min_y = data.y().minCoeff();
  for (double c : grid)
    if (!(min_y + c > 0.0)) throw DataError("grid point leaves y + c nonpositive");
  FitOptions opts;
  opts.method = FitMethod::reml;
  opts.b_method = FitOptions::BiasMethod::zero;
  opts.compute_K = false;
  const ModelSpec full = ModelSpec::full(data.p(), data.a());
  const int G = static_cast<int>(grid.size());
  std::vector<double> skew(G);
  std::exception_ptr err = nullptr;
#pragma omp parallel for schedule(dynamic)
  for (int g = 0; g < G; ++g) {
    try {
      const Eigen::VectorXd yl = (data.y().array() + grid[g]).log().matrix();
      if (yl.maxCoeff() - yl.minCoeff() <= 1e-12 * std::max(1.0, yl.cwiseAbs().maxCoeff())) {
        skew[g] = 0.0;
        continue;
      }
      const ClusteredDataset shifted = data.with_response(yl);
      const FittedLMM f = fit_model(shifted, full, opts);
      skew[g] = std::abs(fisher_skewness(yl - data.X() * f.beta_hat));
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  int best = 0;
  for (int g = 1; g < G; ++g)
    if (skew[g] < skew[best]) best = g;
  LogShiftResult r;
  r.c_star = grid[best];
  r.y_transformed = (data.y().array() + r.c_star).log().matrix();
  r.grid = grid;
  r.skewness = std::move(skew);
  return r;
}

Eigen::MatrixXd weighted_covariate_means(const ClusteredDataset& data, const Eigen::VectorXd& weights) {
  if (weights.size() != data.m()) throw std::invalid_argument("one weight per row required");
  Eigen::MatrixXd out(data.n(), data.p());
  for (int i = 0; i < data.n(); ++i) {
    const auto w = weights.segment(data.offset(i), data.size(i));
    if ((w.array() <= 0.0).any()) throw DataError("weights must be positive");
    const double total = w.sum();
    if (!(total > 0.0)) throw DataError("zero total weight in cluster " + std::to_string(i));
    out.row(i) = (w.transpose() * data.X_i(i)) / total;
  }
  return out;
}

LengthSummary summarize_lengths(const std::vector<IntervalResult>& intervals) {
  if (intervals.empty()) throw std::invalid_argument("no intervals to summarize");
  std::vector<double> len;
  for (const auto& r : intervals) len.push_back(r.length());
  std::sort(len.begin(), len.end());
  LengthSummary s;
  s.count = static_cast<int>(len.size());
  s.min = len.front();
  s.max = len.back();
  const std::size_t n = len.size();
  s.median = n % 2 ? len[n / 2] : 0.5 * (len[n / 2 - 1] + len[n / 2]);
  for (double v : len) s.mean += v;
  s.mean /= n;
  if (n > 1) {
    double ss = 0.0;
    for (double v : len) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / (n - 1));
  }
  return s;
}

void emit_report(const std::vector<IntervalResult>& intervals, const std::string& path) {
  if (intervals.empty()) throw std::invalid_argument("emit_report needs at least one interval");
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << interval_csv_header() << '\n';
  for (const auto& r : intervals) out << interval_csv_row(r) << '\n';
  if (!out) throw Error("write failed for " + path);

  std::map<std::string, std::vector<IntervalResult>> by_method;
  for (const auto& r : intervals) by_method[method_tag(r.method)].push_back(r);
  std::ofstream sum(path + ".summary.csv");
  if (!sum) throw Error("cannot write " + path + ".summary.csv");
  sum << "method,count,min,max,median,mean,sd\n" << std::setprecision(12);
  for (const auto& [m, rs] : by_method) {
    const LengthSummary s = summarize_lengths(rs);
    sum << m << ',' << s.count << ',' << s.min << ',' << s.max << ',' << s.median << ',' << s.mean << ',' << s.sd
        << '\n';
  }
}

std::vector<IntervalResult> read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  long line_no = 1;
  if (!std::getline(in, line) || split_csv(line) != split_csv(interval_csv_header()))
    throw DataError("unexpected report header", 1);
  std::vector<IntervalResult> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto c = split_csv(line);
    if (c.size() != 8) throw DataError("expected 8 fields", line_no);
    IntervalResult r;
    r.target_id = c[0];
    if (c[1] == "post-caic")
      r.method = IntervalMethod::post_caic;
    else if (c[1] == "naive-1")
      r.method = IntervalMethod::naive_1;
    else if (c[1] == "naive-2")
      r.method = IntervalMethod::naive_2;
    else
      throw DataError("unknown method " + c[1], line_no);
    r.point_estimate = parse_number(c[2], line_no, "estimate");
    r.lower = parse_number(c[3], line_no, "lower");
    r.upper = parse_number(c[4], line_no, "upper");
    r.alpha = parse_number(c[5], line_no, "alpha");
    r.B = static_cast<int>(parse_number(c[6], line_no, "B"));
    r.seed = std::stoull(c[7]);
    r.critical = 0.5 * (r.upper - r.lower);
    out.push_back(r);
  }
  return out;
}

}  // namespace posicaic
