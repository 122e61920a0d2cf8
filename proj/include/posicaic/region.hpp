#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

#include "posicaic/caic.hpp"
#include "posicaic/lmm.hpp"

namespace posicaic {

enum class Sense { strict_less, greater_equal };

// w^t Q w + l^t w  {<, >=}  rhs, acting on the constrained block of w.
struct QuadraticConstraint {
  Eigen::MatrixXd Q;
  Eigen::VectorXd linear;  // empty or same length as Q
  double rhs = 0.0;
  Sense sense = Sense::strict_less;
  std::string note;

  double value(const Eigen::Ref<const Eigen::VectorXd>& w) const;
  bool satisfied(const Eigen::Ref<const Eigen::VectorXd>& w) const;
};

struct ConstraintSet {
  int dim = 0;  // total length of w, free tail included
  int r = 0;    // trailing unconstrained coordinates
  std::vector<QuadraticConstraint> constraints;
  // Maps the constrained block of w to the standardized coordinates of the selected model
  // (|M| x (dim - r)). Empty means identity.
  Eigen::MatrixXd readout;
  std::vector<int> model_columns;  // covariate indices of the selected model, in readout order

  int constrained_dim() const { return dim - r; }
  // Same constraints with r free coordinates appended.
  ConstraintSet with_free_tail(int r_extra) const;
  Eigen::MatrixXd readout_matrix() const;
};

bool region_contains(const Eigen::Ref<const Eigen::VectorXd>& w, const ConstraintSet& region);

// Rows are models; columns are the p diagonal slots then the p(p-1)/2 pairs (i<j) in row-major order.
struct ExtendedSelectionMatrix {
  Eigen::MatrixXi upsilon;
  int p = 0;

  static ExtendedSelectionMatrix from_candidates(const CandidateSet& candidates);
  int slots() const { return static_cast<int>(upsilon.cols()); }
  // Slot index of the pair (i, j), i != j.
  int pair_slot(int i, int j) const;
  // Projection P_m of model m: one row per slot it touches.
  Eigen::MatrixXd projection(int model) const;
};

// Candidates containing every covariate of truth. Regions are built over this set.
struct CandidateSubset {
  CandidateSet set;
  std::vector<int> index;  // original positions
  int position(int original) const;
  std::vector<double> pick(const std::vector<double>& per_candidate) const;
};
CandidateSubset overparametrised_subset(const CandidateSet& candidates, const std::vector<bool>& truth);

struct SigmaEstimate {
  Eigen::MatrixXd Sigma;  // I^{-1/2} J I^{-1/2}
  Eigen::MatrixXd I_m;    // X^t V^{-1} X
  Eigen::MatrixXd J_c;    // X^t R^{-1} X
};

SigmaEstimate sigma_matrix(const FittedLMM& full_fit);
SigmaEstimate sigma_matrix(const Eigen::MatrixXd& I_m, const Eigen::MatrixXd& J_c);

// Quadratic form w^t Sigma_M w of a model, embedded in the full coordinates.
Eigen::MatrixXd model_form(const Eigen::MatrixXd& sigma, const std::vector<bool>& mask);

// Nested chain M_0 (a covariates) ... M_K (all). Selected order p; comparisons against
// orders p0..K other than p.
ConstraintSet nested_region(const SigmaEstimate& sigma, const std::vector<double>& rho_b, int a, int K, int p,
                            int p0 = 0, int r_free = 0);

ConstraintSet general_region_orthogonal(const SigmaEstimate& sigma, const ExtendedSelectionMatrix& upsilon,
                                        const CandidateSet& candidates, const std::vector<double>& rho_b,
                                        int selected, int r_free = 0);

// Stacked per-model coordinates of dimension e = sum |M|. Every block uses the reference
// fit's V: I(M) = X_M^t V^{-1} X_M, J(M) = X_M^t R^{-1} X_M, and the correlation
// E(M_i, M_j) = I(M_i)^{-1/2} X_i^t V^{-1} X_j I(M_j)^{-1/2}.
struct StackedInformation {
  std::vector<std::vector<int>> cols;
  std::vector<int> offset;
  int e = 0;
  std::vector<Eigen::MatrixXd> sigma_own;  // I(M)^{-1/2} J(M) I(M)^{-1/2}
  Eigen::MatrixXd E;
  Eigen::MatrixXd E_half;
};
StackedInformation stacked_information(const FittedLMM& reference, const CandidateSet& candidates);

// B_{sel,i} in whitened coordinates: +Sigma(sel) on the selected block, -Sigma(i) on block i.
Eigen::MatrixXd whitened_contrast(const StackedInformation& info, int selected, int other);

// correlate=false gives the literal form with independent blocks; correlate=true maps w
// through E^{1/2} so shared covariates stay tied across blocks.
ConstraintSet general_region_nonorthogonal(const StackedInformation& info, const std::vector<double>& rho_b,
                                           int selected, bool correlate = true, int r_free = 0);

// The A-matrix form with the smallest model as baseline; needs one candidate nested in all others.
ConstraintSet misspecified_region(const StackedInformation& info, const CandidateSet& candidates,
                                  const std::vector<double>& rho_b, int selected, int r_free = 0);

struct OrthogonalityCheck {
  double stat = 0.0;
  bool pass = true;
};
// Largest |J_ab| / sqrt(J_aa J_bb) over a in M_i, b in M_j, J = X^t R^{-1} X of the full fit.
OrthogonalityCheck check_orthogonality(const FittedLMM& full_fit, const ModelSpec& mi, const ModelSpec& mj,
                                       double tol = 0.1);

std::string region_to_json(const ConstraintSet& region, int indent = 2);
ConstraintSet region_from_json(const std::string& text);

}  // namespace posicaic
