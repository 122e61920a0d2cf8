#include "posicaic/region.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "posicaic/errors.hpp"
#include "posicaic/linalg.hpp"

namespace posicaic {

namespace {

Eigen::MatrixXd selector(const std::vector<int>& cols, int p) {
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cols.size()), p);
  for (std::size_t k = 0; k < cols.size(); ++k) s(static_cast<Eigen::Index>(k), cols[k]) = 1.0;
  return s;
}

Eigen::MatrixXd submatrix(const Eigen::MatrixXd& a, const std::vector<int>& rows, const std::vector<int>& cols) {
  Eigen::MatrixXd out(rows.size(), cols.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = a(rows[i], cols[j]);
  return out;
}

std::vector<int> mask_indices(const std::vector<bool>& mask) {
  std::vector<int> out;
  for (std::size_t j = 0; j < mask.size(); ++j)
    if (mask[j]) out.push_back(static_cast<int>(j));
  return out;
}

std::vector<bool> prefix_mask(int p, int len) {
  std::vector<bool> m(p, false);
  for (int j = 0; j < len; ++j) m[j] = true;
  return m;
}

bool strict_superset(const ModelSpec& big, const ModelSpec& small) {
  return small.subset_of(big) && big.size() > small.size();
}

// Constraint from the cAIC comparison of sel against other given their quadratic-form contrast
// d = Q_sel - Q_other. A strictly larger competitor is stored as Q_other - Q_sel < rhs.
QuadraticConstraint comparison(const Eigen::MatrixXd& d, double rb_sel, double rb_other, bool other_is_superset,
                               std::string note) {
  QuadraticConstraint c;
  if (other_is_superset) {
    c.Q = -d;
    c.rhs = 2.0 * (rb_other - rb_sel);
    c.sense = Sense::strict_less;
  } else {
    c.Q = d;
    c.rhs = 2.0 * (rb_sel - rb_other);
    c.sense = Sense::greater_equal;
  }
  c.note = std::move(note);
  return c;
}

}  // namespace

double QuadraticConstraint::value(const Eigen::Ref<const Eigen::VectorXd>& w) const {
  const auto d = Q.rows();
  double v = 0.0;
  if (d > 0) {
    auto x = w.head(d);
    v = x.dot(Q * x);
  }
  if (linear.size() > 0) v += linear.dot(w.head(linear.size()));
  return v;
}

bool QuadraticConstraint::satisfied(const Eigen::Ref<const Eigen::VectorXd>& w) const {
  const double v = value(w);
  return sense == Sense::strict_less ? v < rhs : v >= rhs;
}

ConstraintSet ConstraintSet::with_free_tail(int r_extra) const {
  if (r_extra < 0) throw std::invalid_argument("negative free tail");
  ConstraintSet out = *this;
  out.dim += r_extra;
  out.r += r_extra;
  return out;
}

Eigen::MatrixXd ConstraintSet::readout_matrix() const {
  if (readout.size() > 0) return readout;
  return Eigen::MatrixXd::Identity(constrained_dim(), constrained_dim());
}

bool region_contains(const Eigen::Ref<const Eigen::VectorXd>& w, const ConstraintSet& region) {
  if (w.size() != region.dim) throw std::invalid_argument("w length differs from region dimension");
  for (const auto& c : region.constraints)
    if (!c.satisfied(w)) return false;
  return true;
}

ExtendedSelectionMatrix ExtendedSelectionMatrix::from_candidates(const CandidateSet& candidates) {
  candidates.validate();
  ExtendedSelectionMatrix u;
  u.p = candidates.specs.front().total();
  const int slots = u.p + u.p * (u.p - 1) / 2;
  u.upsilon = Eigen::MatrixXi::Zero(candidates.size(), slots);
  for (int m = 0; m < candidates.size(); ++m) {
    const auto& mask = candidates.specs[m].included;
    for (int i = 0; i < u.p; ++i) {
      if (!mask[i]) continue;
      u.upsilon(m, i) = 1;
      for (int j = i + 1; j < u.p; ++j)
        if (mask[j]) u.upsilon(m, u.pair_slot(i, j)) = 1;
    }
  }
  return u;
}

int ExtendedSelectionMatrix::pair_slot(int i, int j) const {
  if (i == j) throw std::invalid_argument("pair slot needs i != j");
  if (i > j) std::swap(i, j);
  // pairs (0,1),(0,2),...,(0,p-1),(1,2),...
  return p + i * p - i * (i + 1) / 2 + (j - i - 1);
}

Eigen::MatrixXd ExtendedSelectionMatrix::projection(int model) const {
  std::vector<int> on;
  for (int s = 0; s < slots(); ++s)
    if (upsilon(model, s)) on.push_back(s);
  return selector(on, slots());
}

int CandidateSubset::position(int original) const {
  const auto it = std::find(index.begin(), index.end(), original);
  return it == index.end() ? -1 : static_cast<int>(it - index.begin());
}

std::vector<double> CandidateSubset::pick(const std::vector<double>& per_candidate) const {
  std::vector<double> out;
  for (int m : index) out.push_back(per_candidate.at(m));
  return out;
}

CandidateSubset overparametrised_subset(const CandidateSet& candidates, const std::vector<bool>& truth) {
  CandidateSubset sub;
  sub.set.a = candidates.a;
  sub.set.structure = candidates.structure;
  for (int m = 0; m < candidates.size(); ++m) {
    const auto& s = candidates.specs[m];
    if (static_cast<int>(truth.size()) != s.total()) throw std::invalid_argument("truth mask length differs");
    bool keep = true;
    for (std::size_t j = 0; j < truth.size(); ++j) keep = keep && (!truth[j] || s.included[j]);
    if (!keep) continue;
    sub.set.specs.push_back(s);
    sub.index.push_back(m);
  }
  if (sub.index.empty()) throw std::invalid_argument("no candidate contains the true model");
  return sub;
}

SigmaEstimate sigma_matrix(const Eigen::MatrixXd& I_m, const Eigen::MatrixXd& J_c) {
  SigmaEstimate s;
  s.I_m = symmetrize(I_m);
  s.J_c = symmetrize(J_c);
  const Eigen::MatrixXd h = sym_inv_sqrt(s.I_m, "marginal information I^m");
  s.Sigma = symmetrize(h * s.J_c * h);
  return s;
}

SigmaEstimate sigma_matrix(const FittedLMM& full_fit) {
  if (full_fit.spec.size() != full_fit.spec.total()) throw std::invalid_argument("sigma_matrix needs the full-model fit");
  return sigma_matrix(full_fit.info_marginal, full_fit.hessian_conditional);
}

Eigen::MatrixXd model_form(const Eigen::MatrixXd& sigma, const std::vector<bool>& mask) {
  const auto p = sigma.rows();
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(p, p);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < p; ++j)
      if (mask[i] && mask[j]) q(i, j) = sigma(i, j);
  return q;
}

ConstraintSet nested_region(const SigmaEstimate& sigma, const std::vector<double>& rho_b, int a, int K, int p, int p0,
                            int r_free) {
  const int full = a + K;
  if (sigma.Sigma.rows() != full) throw std::invalid_argument("Sigma dimension differs from a+K");
  if (static_cast<int>(rho_b.size()) != K + 1) throw std::invalid_argument("rho_b needs one entry per chain order");
  if (p < p0 || p > K || p0 < 0) throw std::invalid_argument("selected order outside p0..K");
  for (int j = 1; j <= K; ++j)
    if (rho_b[j] < rho_b[j - 1]) {
      warn("rho+b not increasing along the nested chain; the region may be empty");
      break;
    }
  ConstraintSet out;
  out.dim = full;
  out.model_columns.resize(a + p);
  for (int j = 0; j < a + p; ++j) out.model_columns[j] = j;
  out.readout = selector(out.model_columns, full);
  const Eigen::MatrixXd qp = model_form(sigma.Sigma, prefix_mask(full, a + p));
  for (int j = p0; j <= K; ++j) {
    if (j == p) continue;
    const Eigen::MatrixXd qj = model_form(sigma.Sigma, prefix_mask(full, a + j));
    out.constraints.push_back(
        comparison(qp - qj, rho_b[p], rho_b[j], j > p, "M" + std::to_string(p) + " vs M" + std::to_string(j)));
  }
  return r_free > 0 ? out.with_free_tail(r_free) : out;
}

ConstraintSet general_region_orthogonal(const SigmaEstimate& sigma, const ExtendedSelectionMatrix& upsilon,
                                        const CandidateSet& candidates, const std::vector<double>& rho_b, int selected,
                                        int r_free) {
  const int p = upsilon.p;
  if (sigma.Sigma.rows() != p) throw std::invalid_argument("Sigma dimension differs from the selection matrix");
  if (upsilon.upsilon.rows() != candidates.size() || static_cast<int>(rho_b.size()) != candidates.size())
    throw std::invalid_argument("one selection-matrix row and one rho+b per candidate required");
  if (selected < 0 || selected >= candidates.size()) throw std::invalid_argument("selected index out of range");
  // slot s carries Sigma_ii w_i^2 or 2 Sigma_ij w_i w_j
  std::vector<Eigen::MatrixXd> slot_form(upsilon.slots(), Eigen::MatrixXd::Zero(p, p));
  for (int i = 0; i < p; ++i) {
    slot_form[i](i, i) = sigma.Sigma(i, i);
    for (int j = i + 1; j < p; ++j) {
      auto& f = slot_form[upsilon.pair_slot(i, j)];
      f(i, j) = sigma.Sigma(i, j);
      f(j, i) = sigma.Sigma(j, i);
    }
  }
  ConstraintSet out;
  out.dim = p;
  const ModelSpec& sel = candidates.specs[selected];
  out.model_columns = sel.indices();
  out.readout = selector(out.model_columns, p);
  for (int m = 0; m < candidates.size(); ++m) {
    if (m == selected) continue;
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(p, p);
    for (int s = 0; s < upsilon.slots(); ++s) {
      const int coef = upsilon.upsilon(selected, s) - upsilon.upsilon(m, s);
      if (coef == 1)
        d += slot_form[s];
      else if (coef == -1)
        d -= slot_form[s];
    }
    const ModelSpec& other = candidates.specs[m];
    out.constraints.push_back(comparison(d, rho_b[selected], rho_b[m], strict_superset(other, sel),
                                         sel.label + " vs " + other.label));
  }
  return r_free > 0 ? out.with_free_tail(r_free) : out;
}

StackedInformation stacked_information(const FittedLMM& reference, const CandidateSet& candidates) {
  if (reference.spec.size() != reference.spec.total())
    throw std::invalid_argument("the reference fit must be the full model");
  candidates.validate();
  StackedInformation info;
  const Eigen::MatrixXd& I = reference.info_marginal;
  const Eigen::MatrixXd& J = reference.hessian_conditional;
  std::vector<Eigen::MatrixXd> ih;
  for (const auto& s : candidates.specs) {
    info.cols.push_back(s.indices());
    info.offset.push_back(info.e);
    info.e += s.size();
    const auto& c = info.cols.back();
    ih.push_back(sym_inv_sqrt(submatrix(I, c, c), "I^m(M)"));
    info.sigma_own.push_back(symmetrize(ih.back() * submatrix(J, c, c) * ih.back()));
  }
  info.E.resize(info.e, info.e);
  const int k = candidates.size();
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j)
      info.E.block(info.offset[i], info.offset[j], info.cols[i].size(), info.cols[j].size()) =
          ih[i] * submatrix(I, info.cols[i], info.cols[j]) * ih[j];
  info.E = symmetrize(info.E);
  info.E_half = sym_sqrt(info.E);
  return info;
}

Eigen::MatrixXd whitened_contrast(const StackedInformation& info, int selected, int other) {
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(info.e, info.e);
  const auto ns = static_cast<Eigen::Index>(info.cols[selected].size());
  const auto no = static_cast<Eigen::Index>(info.cols[other].size());
  b.block(info.offset[selected], info.offset[selected], ns, ns) += info.sigma_own[selected];
  b.block(info.offset[other], info.offset[other], no, no) -= info.sigma_own[other];
  return b;
}

ConstraintSet general_region_nonorthogonal(const StackedInformation& info, const std::vector<double>& rho_b,
                                           int selected, bool correlate, int r_free) {
  const int k = static_cast<int>(info.cols.size());
  if (static_cast<int>(rho_b.size()) != k) throw std::invalid_argument("one rho+b per candidate required");
  if (selected < 0 || selected >= k) throw std::invalid_argument("selected index out of range");
  ConstraintSet out;
  out.dim = info.e;
  out.model_columns = info.cols[selected];
  const auto ns = static_cast<Eigen::Index>(info.cols[selected].size());
  if (correlate) {
    out.readout = info.E_half.middleRows(info.offset[selected], ns);
  } else {
    out.readout = Eigen::MatrixXd::Zero(ns, info.e);
    out.readout.middleCols(info.offset[selected], ns).setIdentity();
  }
  for (int m = 0; m < k; ++m) {
    if (m == selected) continue;
    QuadraticConstraint c;
    const Eigen::MatrixXd b = whitened_contrast(info, selected, m);
    c.Q = correlate ? symmetrize(info.E_half * b * info.E_half) : b;
    c.rhs = 2.0 * (rho_b[selected] - rho_b[m]);
    c.sense = Sense::greater_equal;
    c.note = "block " + std::to_string(selected) + " vs " + std::to_string(m);
    out.constraints.push_back(std::move(c));
  }
  return r_free > 0 ? out.with_free_tail(r_free) : out;
}

ConstraintSet misspecified_region(const StackedInformation& info, const CandidateSet& candidates,
                                  const std::vector<double>& rho_b, int selected, int r_free) {
  const int k = candidates.size();
  int smallest = -1;
  for (int s = 0; s < k && smallest < 0; ++s) {
    bool nested_in_all = true;
    for (int m = 0; m < k; ++m) nested_in_all = nested_in_all && candidates.specs[s].subset_of(candidates.specs[m]);
    if (nested_in_all) smallest = s;
  }
  if (smallest < 0) throw std::invalid_argument("no candidate is nested in all others");
  if (selected < 0 || selected >= k) throw std::invalid_argument("selected index out of range");
  const int d = info.e + r_free;
  auto a_matrix = [&](int model) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(d, d);
    a.topLeftCorner(info.e, info.e) = whitened_contrast(info, model, smallest);
    if (model == smallest) a.topLeftCorner(info.e, info.e).setZero();
    a.bottomRightCorner(r_free, r_free).setIdentity();
    return a;
  };
  Eigen::MatrixXd e_half = Eigen::MatrixXd::Identity(d, d);
  e_half.topLeftCorner(info.e, info.e) = info.E_half;
  const Eigen::MatrixXd a_sel = a_matrix(selected);
  ConstraintSet out;
  out.dim = d;
  out.r = r_free;
  out.model_columns = info.cols[selected];
  out.readout = info.E_half.middleRows(info.offset[selected], static_cast<Eigen::Index>(info.cols[selected].size()));
  for (int m = 0; m < k; ++m) {
    if (m == selected) continue;
    const Eigen::MatrixXd diff = e_half * (a_sel - a_matrix(m)) * e_half;
    QuadraticConstraint c;
    c.Q = symmetrize(diff.topLeftCorner(info.e, info.e));
    c.rhs = 2.0 * (rho_b[selected] - rho_b[m]);
    c.sense = Sense::greater_equal;
    c.note = candidates.specs[selected].label + " vs " + candidates.specs[m].label + " (base " +
             candidates.specs[smallest].label + ")";
    out.constraints.push_back(std::move(c));
  }
  return out;
}

OrthogonalityCheck check_orthogonality(const FittedLMM& full_fit, const ModelSpec& mi, const ModelSpec& mj,
                                       double tol) {
  if (full_fit.spec.size() != full_fit.spec.total()) throw std::invalid_argument("check needs the full-model fit");
  const Eigen::MatrixXd& J = full_fit.hessian_conditional;
  OrthogonalityCheck out;
  for (int a : mi.indices())
    for (int b : mj.indices()) {
      const double s = std::abs(J(a, b)) / std::sqrt(J(a, a) * J(b, b));
      out.stat = std::max(out.stat, s);
    }
  out.pass = out.stat < tol;
  return out;
}

std::string region_to_json(const ConstraintSet& region, int indent) {
  using nlohmann::json;
  auto mat = [](const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      json row = json::array();
      for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
      rows.push_back(row);
    }
    return rows;
  };
  json j;
  j["dim"] = region.dim;
  j["r"] = region.r;
  j["model_columns"] = region.model_columns;
  j["readout"] = mat(region.readout);
  j["constraints"] = json::array();
  for (const auto& c : region.constraints) {
    json jc;
    jc["Q"] = mat(c.Q);
    jc["linear"] = std::vector<double>(c.linear.data(), c.linear.data() + c.linear.size());
    jc["rhs"] = c.rhs;
    jc["sense"] = c.sense == Sense::strict_less ? "<" : ">=";
    jc["note"] = c.note;
    j["constraints"].push_back(jc);
  }
  return j.dump(indent);
}

ConstraintSet region_from_json(const std::string& text) {
  using nlohmann::json;
  const json j = json::parse(text);
  auto mat = [](const json& rows) {
    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto m = n ? static_cast<Eigen::Index>(rows[0].size()) : 0;
    Eigen::MatrixXd out(n, m);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index k = 0; k < m; ++k) out(i, k) = rows[i][k].get<double>();
    return out;
  };
  ConstraintSet s;
  s.dim = j.at("dim").get<int>();
  s.r = j.at("r").get<int>();
  s.model_columns = j.at("model_columns").get<std::vector<int>>();
  s.readout = mat(j.at("readout"));
  for (const auto& jc : j.at("constraints")) {
    QuadraticConstraint c;
    c.Q = mat(jc.at("Q"));
    const auto lin = jc.at("linear").get<std::vector<double>>();
    c.linear = Eigen::Map<const Eigen::VectorXd>(lin.data(), static_cast<Eigen::Index>(lin.size()));
    c.rhs = jc.at("rhs").get<double>();
    c.sense = jc.at("sense").get<std::string>() == "<" ? Sense::strict_less : Sense::greater_equal;
    c.note = jc.value("note", "");
    s.constraints.push_back(std::move(c));
  }
  return s;
}

}  // namespace posicaic
