#include "posicaic/sampler.hpp"

#include <omp.h>

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <random>
#include <stdexcept>

#include "posicaic/errors.hpp"
#include "posicaic/rng.hpp"

namespace posicaic {

namespace {

using Intervals = std::vector<std::pair<double, double>>;
constexpr double kInf = std::numeric_limits<double>::infinity();
const boost::math::normal kStd(0.0, 1.0);

Intervals intersect(const Intervals& a, const Intervals& b) {
  Intervals out;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double lo = std::max(a[i].first, b[j].first);
    const double hi = std::min(a[i].second, b[j].second);
    if (lo < hi) out.emplace_back(lo, hi);
    if (a[i].second < b[j].second)
      ++i;
    else
      ++j;
  }
  return out;
}

// {t : f(t) < 0} or {t : f(t) >= 0} for f(t) = a t^2 + b t + c, up to measure-zero boundaries.
Intervals solve_quadratic(double a, double b, double c, Sense sense, double scale) {
  const bool less = sense == Sense::strict_less;
  const Intervals all{{-kInf, kInf}}, none{};
  if (std::abs(a) <= 1e-13 * scale) {
    if (std::abs(b) <= 1e-13 * scale) return (less ? c < 0.0 : c >= 0.0) ? all : none;
    const double root = -c / b;
    // f < 0 left of root when b > 0
    if ((b > 0.0) == less) return {{-kInf, root}};
    return {{root, kInf}};
  }
  const double disc = b * b - 4.0 * a * c;
  if (disc <= 0.0) {
    const bool nonneg = a > 0.0;
    if (less) return nonneg ? none : all;
    return nonneg ? all : none;
  }
  const double sq = std::sqrt(disc);
  const double q = -0.5 * (b + std::copysign(sq, b));
  double t1 = q / a, t2 = c / q;
  if (t1 > t2) std::swap(t1, t2);
  const bool inside_negative = a > 0.0;
  if (less == inside_negative) return {{t1, t2}};
  return {{-kInf, t1}, {t2, kInf}};
}

// Mass of the standard normal on [l, u] computed on the side that avoids cancellation.
double normal_mass(double l, double u) {
  if (u <= 0.0) return boost::math::cdf(kStd, u) - (std::isinf(l) ? 0.0 : boost::math::cdf(kStd, l));
  if (l >= 0.0)
    return (std::isinf(l) ? 1.0 : boost::math::cdf(boost::math::complement(kStd, l))) -
           (std::isinf(u) ? 0.0 : boost::math::cdf(boost::math::complement(kStd, u)));
  return 1.0 - (std::isinf(l) ? 0.0 : boost::math::cdf(kStd, l)) -
         (std::isinf(u) ? 0.0 : boost::math::cdf(boost::math::complement(kStd, u)));
}

double sample_interval(double l, double u, double v) {
  constexpr double tiny = 1e-300;
  if (l >= 0.0) {
    const double ql = std::isinf(l) ? 1.0 : boost::math::cdf(boost::math::complement(kStd, l));
    const double qu = std::isinf(u) ? 0.0 : boost::math::cdf(boost::math::complement(kStd, u));
    const double target = std::clamp(ql - v * (ql - qu), tiny, 1.0 - 1e-16);
    return std::clamp(boost::math::quantile(boost::math::complement(kStd, target)), l, u);
  }
  const double pl = std::isinf(l) ? 0.0 : boost::math::cdf(kStd, l);
  const double pu = std::isinf(u) ? 1.0 : boost::math::cdf(kStd, u);
  const double target = std::clamp(pl + v * (pu - pl), tiny, 1.0 - 1e-16);
  return std::clamp(boost::math::quantile(kStd, target), l, u);
}

// Draw t ~ N(mu, 1) restricted to the union; returns 0 when every piece has zero mass.
double sample_line(const Intervals& set, double mu, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> mass(set.size());
  double total = 0.0;
  for (std::size_t k = 0; k < set.size(); ++k) {
    mass[k] = std::max(0.0, normal_mass(set[k].first - mu, set[k].second - mu));
    total += mass[k];
  }
  if (!(total > 0.0)) return 0.0;
  double pick = unif(gen) * total;
  std::size_t k = 0;
  for (; k + 1 < set.size(); ++k) {
    if (pick < mass[k]) break;
    pick -= mass[k];
  }
  return mu + sample_interval(set[k].first - mu, set[k].second - mu, unif(gen));
}

bool constrained_ok(const Eigen::Ref<const Eigen::VectorXd>& w, const ConstraintSet& region) {
  for (const auto& c : region.constraints)
    if (!c.satisfied(w)) return false;
  return true;
}

struct ChunkResult {
  long long proposals = 0;
  double step_sum = 0.0;
  long long moves = 0;
};

void fill_normals(Eigen::Ref<Eigen::VectorXd> v, std::mt19937_64& gen) {
  std::normal_distribution<double> nd;
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = nd(gen);
}

ChunkResult rejection_chunk(const ConstraintSet& region, Eigen::Ref<Eigen::MatrixXd> rows, std::mt19937_64& gen,
                            long long budget) {
  ChunkResult res;
  const int d = region.constrained_dim();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(region.dim);
  for (Eigen::Index b = 0; b < rows.rows(); ++b) {
    for (;;) {
      if (res.proposals >= budget)
        throw SamplerError("rejection sampler exhausted its proposal budget; use the chain method");
      ++res.proposals;
      fill_normals(w.head(d), gen);
      if (constrained_ok(w, region)) break;
    }
    fill_normals(w.tail(region.r), gen);
    rows.row(b) = w.transpose();
  }
  return res;
}

ChunkResult chain_chunk(const ConstraintSet& region, const SamplerConfig& cfg, Eigen::Ref<Eigen::MatrixXd> rows,
                        std::mt19937_64& gen) {
  ChunkResult res;
  const int d = region.constrained_dim();
  Eigen::VectorXd w = Eigen::VectorXd::Zero(region.dim);
  bool found = false;
  for (long long k = 0; k < cfg.probe_budget; ++k) {
    fill_normals(w.head(d), gen);
    if (constrained_ok(w, region)) {
      found = true;
      break;
    }
  }
  if (!found) throw SamplerError("no starting point found inside the region: region empty or negligible");
  ConstraintSet block = region;
  block.dim = d;
  block.r = 0;
  Eigen::VectorXd u(d);
  int still = 0;
  auto step = [&]() {
    fill_normals(u, gen);
    u.normalize();
    const Intervals set = line_feasible_set(block, w.head(d), u);
    const double t = sample_line(set, -u.dot(w.head(d)), gen);
    const Eigen::VectorXd cand = w.head(d) + t * u;
    if (std::abs(t) > 1e-14 && constrained_ok(cand, block)) {
      w.head(d) = cand;
      still = 0;
      res.step_sum += std::abs(t);
      ++res.moves;
    } else if (++still >= cfg.stuck_limit) {
      throw SamplerError("chain sampler made no move in " + std::to_string(cfg.stuck_limit) + " steps");
    }
  };
  for (int k = 0; k < cfg.burn_in; ++k) step();
  for (Eigen::Index b = 0; b < rows.rows(); ++b) {
    for (int k = 0; k < cfg.thinning; ++k) step();
    fill_normals(w.tail(region.r), gen);
    rows.row(b) = w.transpose();
  }
  return res;
}

SampleBatch run(const ConstraintSet& region, const SamplerConfig& cfg, bool parallel) {
  cfg.validate();
  for (const auto& c : region.constraints)
    if (c.Q.rows() > region.constrained_dim() || c.linear.size() > region.constrained_dim())
      throw std::invalid_argument("constraint touches the free tail");
  SampleBatch batch;
  batch.seed = cfg.seed;
  batch.method = cfg.method;
  if (batch.method == SamplerMethod::automatic) {
    const double acc = region.constraints.empty() ? 1.0 : acceptance_estimate(region, cfg.auto_probes, cfg.seed ^ 0xa5a5a5a5ull);
    batch.method = acc < cfg.auto_threshold ? SamplerMethod::chain : SamplerMethod::rejection;
  }
  batch.draws.resize(cfg.B, region.dim);
  const int streams = std::min(cfg.streams, cfg.B);
  std::vector<ChunkResult> parts(streams);
  std::exception_ptr err = nullptr;
  const long long budget = std::max<long long>(1, cfg.max_proposals / streams);
  auto body = [&](int c) {
    const Eigen::Index lo = static_cast<Eigen::Index>(c) * cfg.B / streams;
    const Eigen::Index hi = static_cast<Eigen::Index>(c + 1) * cfg.B / streams;
    auto gen = make_stream(cfg.seed, static_cast<std::uint64_t>(c));
    auto rows = batch.draws.middleRows(lo, hi - lo);
    parts[c] = batch.method == SamplerMethod::chain ? chain_chunk(region, cfg, rows, gen)
                                                    : rejection_chunk(region, rows, gen, budget);
  };
  if (parallel) {
#pragma omp parallel for schedule(dynamic)
    for (int c = 0; c < streams; ++c) {
      try {
        body(c);
      } catch (...) {
#pragma omp critical
        if (!err) err = std::current_exception();
      }
    }
  } else {
    for (int c = 0; c < streams; ++c) body(c);
  }
  if (err) std::rethrow_exception(err);
  long long moves = 0;
  double steps = 0.0;
  for (const auto& p : parts) {
    batch.proposals += p.proposals;
    moves += p.moves;
    steps += p.step_sum;
  }
  if (batch.method == SamplerMethod::rejection)
    batch.acceptance_rate = static_cast<double>(cfg.B) / static_cast<double>(batch.proposals);
  else
    batch.mean_step = moves ? steps / static_cast<double>(moves) : 0.0;
  return batch;
}

}  // namespace

void SamplerConfig::validate() const {
  if (B < 1) throw std::invalid_argument("B must be at least 1");
  if (max_proposals < B) throw std::invalid_argument("max_proposals must be at least B");
  if (streams < 1) throw std::invalid_argument("streams must be positive");
  if (thinning < 1 || burn_in < 0) throw std::invalid_argument("bad chain settings");
}

const char* method_name(SamplerMethod m) {
  switch (m) {
    case SamplerMethod::automatic:
      return "auto";
    case SamplerMethod::rejection:
      return "rejection";
    case SamplerMethod::chain:
      return "chain";
  }
  return "?";
}

std::vector<std::pair<double, double>> line_feasible_set(const ConstraintSet& region,
                                                         const Eigen::Ref<const Eigen::VectorXd>& w,
                                                         const Eigen::Ref<const Eigen::VectorXd>& u) {
  Intervals set{{-kInf, kInf}};
  for (const auto& c : region.constraints) {
    double a = 0.0, b = 0.0, c0 = 0.0, scale = 1.0;
    const auto d = c.Q.rows();
    if (d > 0) {
      const Eigen::VectorXd qu = c.Q * u.head(d);
      a = u.head(d).dot(qu);
      b = 2.0 * w.head(d).dot(qu);
      c0 = w.head(d).dot(c.Q * w.head(d));
      scale += c.Q.cwiseAbs().maxCoeff();
    }
    if (c.linear.size() > 0) {
      b += c.linear.dot(u.head(c.linear.size()));
      c0 += c.linear.dot(w.head(c.linear.size()));
      scale += c.linear.cwiseAbs().maxCoeff();
    }
    set = intersect(set, solve_quadratic(a, b, c0 - c.rhs, c.sense, scale));
    if (set.empty()) break;
  }
  return set;
}

double acceptance_estimate(const ConstraintSet& region, int n_probe, std::uint64_t seed) {
  if (n_probe < 100) throw std::invalid_argument("n_probe must be at least 100");
  if (region.constraints.empty()) return 1.0;
  auto gen = make_stream(seed, 0xacce97ull);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(region.dim);
  int inside = 0;
  for (int k = 0; k < n_probe; ++k) {
    fill_normals(w.head(region.constrained_dim()), gen);
    if (constrained_ok(w, region)) ++inside;
  }
  return static_cast<double>(inside) / n_probe;
}

SampleBatch sample_truncated(const ConstraintSet& region, const SamplerConfig& cfg) { return run(region, cfg, true); }

SampleBatch sample_truncated_serial(const ConstraintSet& region, const SamplerConfig& cfg) {
  return run(region, cfg, false);
}

SampleBatch sample_posi_joint(const ConstraintSet& region_fixed, int r, const SamplerConfig& cfg) {
  if (region_fixed.r != 0) throw std::invalid_argument("region_fixed must not carry a free tail");
  return run(region_fixed.with_free_tail(r), cfg, true);
}

void write_batch_csv(const SampleBatch& batch, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "# seed=" << batch.seed << " method=" << method_name(batch.method);
  if (!std::isnan(batch.acceptance_rate)) out << " acceptance=" << batch.acceptance_rate;
  out << '\n';
  for (Eigen::Index j = 0; j < batch.draws.cols(); ++j) out << (j ? "," : "") << "w" << (j + 1);
  out << '\n' << std::setprecision(17);
  for (Eigen::Index i = 0; i < batch.draws.rows(); ++i) {
    for (Eigen::Index j = 0; j < batch.draws.cols(); ++j) out << (j ? "," : "") << batch.draws(i, j);
    out << '\n';
  }
}

}  // namespace posicaic
