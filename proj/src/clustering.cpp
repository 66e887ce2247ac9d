#include "fednpr/clustering.hpp"

#include <cmath>
#include <limits>
#include <random>

namespace fednpr {

namespace {

constexpr double kUnderflow = 1e-300;
constexpr double kMinMass = 1e-12;

std::vector<std::vector<Index>> rows_by_class(std::span<const int> labels, Index n_classes) {
  std::vector<std::vector<Index>> out(static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= n_classes) throw Error(ErrorKind::label, "label " + std::to_string(y) + " out of range");
    out[static_cast<std::size_t>(y)].push_back(static_cast<Index>(i));
  }
  return out;
}

Matrix gather_rows(const Matrix& m, const std::vector<Index>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

double marginal_residual(const Matrix& q, double col_target) {
  const double rows = (q.rowwise().sum().array() - 1.0).abs().maxCoeff();
  const double cols = (q.colwise().sum().array() - col_target).abs().maxCoeff();
  return std::max(rows, cols);
}

double log_sum_exp(const Eigen::Ref<const Vector>& x) {
  const double c = x.maxCoeff();
  return c + std::log((x.array() - c).exp().sum());
}

SinkhornResult sinkhorn_linear(const Matrix& kernel, double col_target, const SinkhornConfig& config) {
  const Index n = kernel.rows();
  const Index k = kernel.cols();
  Vector a = Vector::Ones(n);
  Vector b = Vector::Ones(k);
  SinkhornResult out;
  for (int it = 1; it <= config.max_iters; ++it) {
    a = (kernel * b).cwiseInverse();
    b = (col_target * (kernel.transpose() * a).cwiseInverse()).eval();
    out.iterations = it;
    // Columns are exact after the column update; rows carry the violation.
    out.residual = (a.cwiseProduct(kernel * b).array() - 1.0).abs().maxCoeff();
    if (out.residual < config.marginal_tol) break;
  }
  out.assignment.mass = a.asDiagonal() * kernel * b.asDiagonal();
  out.scaling = {std::move(a), std::move(b)};
  out.residual = marginal_residual(out.assignment.mass, col_target);
  return out;
}

SinkhornResult sinkhorn_log(const Matrix& log_kernel, double col_target, const SinkhornConfig& config) {
  const Index n = log_kernel.rows();
  const Index k = log_kernel.cols();
  const double log_col = std::log(col_target);
  Vector f = Vector::Zero(n);
  Vector g = Vector::Zero(k);
  SinkhornResult out;
  out.log_domain = true;
  for (int it = 1; it <= config.max_iters; ++it) {
    for (Index j = 0; j < n; ++j) f(j) = -log_sum_exp(log_kernel.row(j).transpose() + g);
    for (Index c = 0; c < k; ++c) g(c) = log_col - log_sum_exp(log_kernel.col(c) + f);
    out.iterations = it;
    double worst = 0.0;
    for (Index j = 0; j < n; ++j)
      worst = std::max(worst, std::abs(std::exp(f(j) + log_sum_exp(log_kernel.row(j).transpose() + g)) - 1.0));
    out.residual = worst;
    if (worst < config.marginal_tol) break;
  }
  Matrix q = log_kernel;
  q.colwise() += f;
  q.rowwise() += g.transpose();
  out.assignment.mass = q.array().exp().matrix();
  out.scaling = {f.array().exp().matrix(), g.array().exp().matrix()};
  out.residual = marginal_residual(out.assignment.mass, col_target);
  return out;
}

// Rows are exact for any g: f_i = -lse(L_i + g). Returns the concave
// semi-dual col_target * sum(g) + sum(f) that Newton maximises.
double semi_dual(const Matrix& log_kernel, double col_target, const Vector& g, Vector& f, Matrix& q) {
  q = log_kernel;
  q.rowwise() += g.transpose();
  for (Index j = 0; j < q.rows(); ++j) f(j) = -log_sum_exp(q.row(j).transpose());
  q.colwise() += f;
  q = q.array().exp().matrix();
  return col_target * g.sum() + f.sum();
}

void newton_polish(const Matrix& log_kernel, double col_target, const SinkhornConfig& config, SinkhornResult& out) {
  constexpr int kMaxSteps = 100;
  const Index n = log_kernel.rows();
  const Index k = log_kernel.cols();
  if (k < 2) return;
  Vector g = out.scaling.col_scaling.array().log().matrix();
  g.array() -= g(k - 1);
  Vector f(n), f_try(n);
  Matrix q, q_try;
  double objective = semi_dual(log_kernel, col_target, g, f, q);
  for (int step = 0; step < kMaxSteps; ++step) {
    const Vector mass = q.colwise().sum().transpose();
    const Vector grad = Vector::Constant(k, col_target) - mass;
    if (grad.cwiseAbs().maxCoeff() < config.marginal_tol) break;
    // The Hessian is singular along the all-ones shift; pin the last column.
    Matrix hess = -(q.transpose() * q);
    hess.diagonal() += mass;
    const Index m = k - 1;
    Vector dir = Vector::Zero(k);
    dir.head(m) = hess.topLeftCorner(m, m).ldlt().solve(grad.head(m));
    double t = 1.0;
    for (int halvings = 0; halvings < 40; ++halvings, t *= 0.5) {
      const Vector g_try = g + t * dir;
      const double obj_try = semi_dual(log_kernel, col_target, g_try, f_try, q_try);
      if (obj_try >= objective) {
        g = g_try;
        f.swap(f_try);
        q.swap(q_try);
        objective = obj_try;
        break;
      }
    }
    ++out.newton_steps;
  }
  out.assignment.mass = q;
  out.scaling = {f.array().exp().matrix(), g.array().exp().matrix()};
}

}  // namespace

void validate(const SinkhornConfig& config) {
  if (!(config.epsilon > 0.0)) throw Error(ErrorKind::config, "sinkhorn epsilon must be > 0");
  if (!(config.marginal_tol > 0.0)) throw Error(ErrorKind::config, "sinkhorn marginal_tol must be > 0");
  if (config.max_iters < 1) throw Error(ErrorKind::config, "sinkhorn max_iters must be >= 1");
}

SinkhornResult sinkhorn_assign(const Matrix& class_features, const Matrix& class_prototypes,
                               const SinkhornConfig& config) {
  validate(config);
  const Index n = class_features.rows();
  const Index k = class_prototypes.cols();
  if (n < 1 || k < 1) throw Error(ErrorKind::shape, "sinkhorn needs at least one feature and one prototype");
  if (class_features.cols() != class_prototypes.rows())
    throw Error(ErrorKind::shape, "feature and prototype dimensions differ");

  Matrix log_kernel = (class_features * class_prototypes) / config.epsilon;
  log_kernel.array() -= log_kernel.maxCoeff();
  const double col_target = static_cast<double>(n) / static_cast<double>(k);

  SinkhornResult out;
  if (log_kernel.minCoeff() < std::log(kUnderflow))
    out = sinkhorn_log(log_kernel, col_target, config);
  else
    out = sinkhorn_linear(log_kernel.array().exp().matrix(), col_target, config);

  if (!(out.residual < config.marginal_tol)) {
    newton_polish(log_kernel, col_target, config, out);
    out.residual = marginal_residual(out.assignment.mass, col_target);
  }
  if (!(out.residual <= 100.0 * config.marginal_tol))
    throw Error(ErrorKind::convergence, "sinkhorn did not converge after " + std::to_string(out.iterations) +
                                            " iterations, residual " + std::to_string(out.residual));
  return out;
}

AssignmentMatrix harden(const AssignmentMatrix& q) {
  AssignmentMatrix out{Matrix::Zero(q.mass.rows(), q.mass.cols())};
  for (Index j = 0; j < q.mass.rows(); ++j) {
    Index best = 0;
    q.mass.row(j).maxCoeff(&best);
    out.mass(j, best) = 1.0;
  }
  return out;
}

ClassPrototypes update_prototypes(const Matrix& class_features, const AssignmentMatrix& q) {
  if (q.mass.rows() != class_features.rows())
    throw Error(ErrorKind::shape, "assignment rows do not match feature rows");
  ClassPrototypes out;
  out.mass = q.mass.colwise().sum().transpose();
  for (Index k = 0; k < out.mass.size(); ++k)
    if (!(out.mass(k) >= kMinMass))
      throw Error(ErrorKind::empty_cluster, "sub-cluster " + std::to_string(k) + " received no mass");
  out.centers = class_features.transpose() * q.mass;
  for (Index k = 0; k < out.centers.cols(); ++k) {
    out.centers.col(k) /= out.mass(k);
    const double norm = out.centers.col(k).norm();
    if (!(norm >= 1e-12))
      throw Error(ErrorKind::degenerate_feature, "prototype " + std::to_string(k) + " has near-zero norm");
    out.centers.col(k) /= norm;
  }
  return out;
}

Index PrototypeBank::total() const {
  Index t = 0;
  for (const auto& c : classes) t += c.centers.cols();
  return t;
}

Matrix PrototypeBank::stacked() const {
  Matrix out(feature_dim, total());
  Index at = 0;
  for (const auto& c : classes) {
    out.middleCols(at, c.centers.cols()) = c.centers;
    at += c.centers.cols();
  }
  return out;
}

PrototypeBank init_prototypes(const Matrix& features, std::span<const int> labels, Index n_classes, Index k,
                              std::uint64_t seed, double perturbation) {
  if (k < 1) throw Error(ErrorKind::config, "K must be >= 1");
  if (static_cast<Index>(labels.size()) != features.rows())
    throw Error(ErrorKind::shape, "label count does not match feature rows");
  const auto groups = rows_by_class(labels, n_classes);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);

  PrototypeBank bank;
  bank.feature_dim = features.cols();
  bank.classes.resize(static_cast<std::size_t>(n_classes));
  for (Index c = 0; c < n_classes; ++c) {
    const auto& rows = groups[static_cast<std::size_t>(c)];
    auto& proto = bank.classes[static_cast<std::size_t>(c)];
    const Index kc = std::min<Index>(k, static_cast<Index>(rows.size()));
    proto.centers = Matrix(features.cols(), kc);
    proto.mass = Vector::Zero(kc);
    if (kc == 0) continue;
    const Vector mean = gather_rows(features, rows).colwise().mean().transpose();
    for (Index j = 0; j < kc; ++j) {
      Vector p = mean;
      if (perturbation != 0.0)
        for (Index e = 0; e < p.size(); ++e) p(e) += perturbation * noise(rng);
      const double norm = p.norm();
      if (!(norm >= 1e-12))
        throw Error(ErrorKind::degenerate_feature, "class " + std::to_string(c) + " mean has near-zero norm");
      proto.centers.col(j) = p / norm;
      proto.mass(j) = static_cast<double>(rows.size()) / static_cast<double>(kc);
    }
  }
  return bank;
}

PrototypeBank cluster_client(const Matrix& features, std::span<const int> labels, Index n_classes, Index k,
                             const PrototypeBank& previous, const SinkhornConfig& config, std::uint64_t seed) {
  if (k < 1) throw Error(ErrorKind::config, "K must be >= 1");
  if (static_cast<Index>(labels.size()) != features.rows())
    throw Error(ErrorKind::shape, "label count does not match feature rows");
  const Matrix unit = normalize_rows(features);
  const auto groups = rows_by_class(labels, n_classes);

  PrototypeBank fresh;
  bool have_fresh = false;

  PrototypeBank bank;
  bank.feature_dim = unit.cols();
  bank.classes.resize(static_cast<std::size_t>(n_classes));
  for (Index c = 0; c < n_classes; ++c) {
    const auto& rows = groups[static_cast<std::size_t>(c)];
    auto& out = bank.classes[static_cast<std::size_t>(c)];
    const Index kc = std::min<Index>(k, static_cast<Index>(rows.size()));
    if (kc == 0) {
      out.centers = Matrix(unit.cols(), 0);
      out.mass = Vector(0);
      continue;
    }
    const Matrix class_feats = gather_rows(unit, rows);

    Matrix anchor;
    if (previous.feature_dim == unit.cols() && previous.has(c) && previous.count(c) == kc) {
      anchor = previous.classes[static_cast<std::size_t>(c)].centers;
    } else {
      if (!have_fresh) {
        fresh = init_prototypes(unit, labels, n_classes, k, seed);
        have_fresh = true;
      }
      anchor = fresh.classes[static_cast<std::size_t>(c)].centers;
    }

    AssignmentMatrix q = sinkhorn_assign(class_feats, anchor, config).assignment;
    if (!config.harden) {
      out = update_prototypes(class_feats, q);
      continue;
    }

    q = harden(q);
    Vector mass = q.mass.colwise().sum().transpose();
    // Empty sub-clusters restart from the feature least similar to any anchor.
    std::vector<bool> taken(static_cast<std::size_t>(class_feats.rows()), false);
    for (Index j = 0; j < kc; ++j) {
      if (mass(j) >= kMinMass) continue;
      const Vector best_sim = (class_feats * anchor).rowwise().maxCoeff();
      Index far = -1;
      for (Index r = 0; r < best_sim.size(); ++r)
        if (!taken[static_cast<std::size_t>(r)] && (far < 0 || best_sim(r) < best_sim(far))) far = r;
      taken[static_cast<std::size_t>(far)] = true;
      q.mass.row(far).setZero();
      q.mass(far, j) = 1.0;
      mass = q.mass.colwise().sum().transpose();
    }
    // A restart can empty the cluster it took from; that one keeps its anchor.
    Matrix centers(unit.cols(), kc);
    for (Index j = 0; j < kc; ++j) {
      if (mass(j) < kMinMass) {
        centers.col(j) = anchor.col(j);
        continue;
      }
      Vector p = class_feats.transpose() * q.mass.col(j) / mass(j);
      const double norm = p.norm();
      if (!(norm >= 1e-12))
        throw Error(ErrorKind::degenerate_feature, "prototype " + std::to_string(j) + " has near-zero norm");
      centers.col(j) = p / norm;
    }
    out.centers = std::move(centers);
    out.mass = std::move(mass);
  }
  return bank;
}

}  // namespace fednpr
