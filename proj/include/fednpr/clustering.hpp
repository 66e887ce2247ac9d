#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fednpr/nn_core.hpp"

namespace fednpr {

/// Rows scaled to unit L2 norm. Rows with norm below 1e-12 indicate a
/// collapsed extractor and raise a degenerate-feature error.
template <typename Derived>
MatrixX<typename Derived::Scalar> normalize_rows(const Eigen::MatrixBase<Derived>& Z) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out = Z;
  for (Index i = 0; i < out.rows(); ++i) {
    const Scalar norm = out.row(i).norm();
    if (!(norm >= Scalar(1e-12)))
      throw Error(ErrorKind::degenerate_feature, "feature row " + std::to_string(i) + " has near-zero norm");
    out.row(i) /= norm;
  }
  return out;
}

/// Pulls a gradient taken with respect to normalize_rows(Z) back onto Z:
/// dZ_i = (g_i - u_i <u_i, g_i>) / |Z_i|.
template <typename DerivedZ, typename DerivedG>
MatrixX<typename DerivedZ::Scalar> normalize_rows_backward(const Eigen::MatrixBase<DerivedZ>& Z,
                                                           const Eigen::MatrixBase<DerivedG>& grad_unit) {
  using Scalar = typename DerivedZ::Scalar;
  MatrixX<Scalar> out(Z.rows(), Z.cols());
  for (Index i = 0; i < Z.rows(); ++i) {
    const Scalar norm = Z.row(i).norm();
    const auto u = Z.row(i) / norm;
    out.row(i) = (grad_unit.row(i) - u * u.dot(grad_unit.row(i))) / norm;
  }
  return out;
}

struct SinkhornConfig {
  double epsilon = 0.05;
  int max_iters = 500;
  double marginal_tol = 1e-6;
  // Replace the soft plan by its row-argmax before the prototype update.
  bool harden = false;
};

void validate(const SinkhornConfig& config);

struct SinkhornScaling {
  Vector row_scaling;
  Vector col_scaling;
};

/// Transport plan Q (n x K_c) with unit row mass and n/K_c column mass.
struct AssignmentMatrix {
  Matrix mass;
};

struct SinkhornResult {
  AssignmentMatrix assignment;
  // Scalings are relative to the max-shifted kernel exp((S - max S) / eps).
  SinkhornScaling scaling;
  int iterations = 0;
  // Newton steps on the column scaling after Sinkhorn stalled (0 if it did not).
  int newton_steps = 0;
  double residual = 0.0;
  bool log_domain = false;
};

/// Entropic OT between the n features of one class and its K_c prototypes.
///
/// Kernel M = exp(Z_c P_c / eps); rows are rescaled to mass 1 and columns to
/// mass n/K_c alternately until the worst marginal violation drops below
/// marginal_tol. Falls back to log-domain updates when the shifted kernel
/// underflows below 1e-300. Nearly block-diagonal kernels make plain scaling
/// crawl, so a plan still off by more than marginal_tol after max_iters is
/// finished with Newton steps on the log column scaling (same fixed point).
/// Throws a convergence error if the residual still exceeds
/// 100 * marginal_tol after that.
SinkhornResult sinkhorn_assign(const Matrix& class_features, const Matrix& class_prototypes,
                               const SinkhornConfig& config);

/// Row-argmax hardening of a soft plan (ties to the lowest column).
AssignmentMatrix harden(const AssignmentMatrix& q);

struct ClassPrototypes {
  Matrix centers;  // d x K_c, unit columns
  Vector mass;     // N_k per sub-cluster
};

/// Mass-weighted means of the features per sub-cluster, then unit columns.
ClassPrototypes update_prototypes(const Matrix& class_features, const AssignmentMatrix& q);

/// Per-client sub-cluster centres, K_c = min(K, |D^c|) per class.
struct PrototypeBank {
  Index feature_dim = 0;
  std::vector<ClassPrototypes> classes;

  Index n_classes() const { return static_cast<Index>(classes.size()); }
  Index count(Index c) const { return classes[static_cast<std::size_t>(c)].centers.cols(); }
  Index total() const;
  bool has(Index c) const { return c >= 0 && c < n_classes() && count(c) > 0; }
  /// All centres side by side, d x total(), class-major.
  Matrix stacked() const;
};

/// First-round bank: per present class, K_c copies of the normalized class
/// mean each perturbed by seeded Gaussian noise of scale `perturbation`,
/// renormalized. Absent classes get no prototypes.
PrototypeBank init_prototypes(const Matrix& features, std::span<const int> labels, Index n_classes, Index k,
                              std::uint64_t seed, double perturbation = 0.01);

/// One refresh of the bank from the current features (one Sinkhorn
/// assignment per class against the previous bank, then the mass-weighted
/// update). Classes whose previous prototype count does not match K_c are
/// initialised via init_prototypes. Features are normalized internally.
PrototypeBank cluster_client(const Matrix& features, std::span<const int> labels, Index n_classes, Index k,
                             const PrototypeBank& previous, const SinkhornConfig& config, std::uint64_t seed);

}  // namespace fednpr
