#include "fednpr/losses.hpp"

#include <cmath>

namespace fednpr {

namespace {

void check_labels(std::span<const int> labels, Index n_rows, Index n_classes) {
  if (static_cast<Index>(labels.size()) != n_rows)
    throw Error(ErrorKind::shape, "label count does not match batch rows");
  for (int y : labels)
    if (y < 0 || y >= n_classes) throw Error(ErrorKind::label, "label " + std::to_string(y) + " out of range");
}

}  // namespace

ClassPrior compute_class_prior(std::span<const Index> counts, double smoothing) {
  if (counts.empty()) throw Error(ErrorKind::empty_prior, "no classes");
  if (smoothing < 0.0) throw Error(ErrorKind::config, "prior smoothing must be >= 0");
  double total = 0.0;
  for (Index c : counts) {
    if (c < 0) throw Error(ErrorKind::config, "negative class count");
    total += static_cast<double>(c);
  }
  const double denom = total + static_cast<double>(counts.size()) * smoothing;
  if (!(denom > 0.0)) throw Error(ErrorKind::empty_prior, "all-zero counts without smoothing");
  ClassPrior prior;
  prior.smoothing = smoothing;
  prior.pi = Vector(static_cast<Index>(counts.size()));
  for (std::size_t c = 0; c < counts.size(); ++c)
    prior.pi(static_cast<Index>(c)) = (static_cast<double>(counts[c]) + smoothing) / denom;
  return prior;
}

SupervisedTerm balanced_softmax_loss(const Matrix& logits, std::span<const int> labels, const ClassPrior& prior) {
  const Index n = logits.rows();
  const Index C = logits.cols();
  if (prior.pi.size() != C) throw Error(ErrorKind::shape, "prior length does not match logit columns");
  check_labels(labels, n, C);
  SupervisedTerm out;
  out.logit_grad = Matrix::Zero(n, C);
  if (n == 0) return out;

  const Vector log_pi = prior.pi.array().log().matrix();
  double sum = 0.0;
  for (Index i = 0; i < n; ++i) {
    Vector shifted = logits.row(i).transpose() + log_pi;
    const double m = shifted.maxCoeff();
    Vector e = (shifted.array() - m).exp().matrix();
    const double z = e.sum();
    const int y = labels[static_cast<std::size_t>(i)];
    sum += -(shifted(y) - m - std::log(z));
    out.logit_grad.row(i) = (e / z).transpose();
    out.logit_grad(i, y) -= 1.0;
  }
  out.value = sum / static_cast<double>(n);
  out.logit_grad /= static_cast<double>(n);
  return out;
}

NprTerm npr_loss(const Matrix& unit_features, std::span<const int> labels, const PrototypeBank& bank) {
  const Index n = unit_features.rows();
  const Index d = unit_features.cols();
  if (d != bank.feature_dim) throw Error(ErrorKind::shape, "feature dim does not match prototype bank");
  check_labels(labels, n, bank.n_classes());

  std::vector<Index> present;
  for (Index c = 0; c < bank.n_classes(); ++c)
    if (bank.has(c)) present.push_back(c);
  for (int y : labels)
    if (!bank.has(y))
      throw Error(ErrorKind::missing_prototype, "class " + std::to_string(y) + " has no prototypes");

  NprTerm out;
  out.feature_grad = Matrix::Zero(n, d);
  if (n == 0) return out;

  const std::size_t P = present.size();
  Vector scores(static_cast<Index>(P));
  std::vector<Index> best(P);
  double sum = 0.0;
  for (Index i = 0; i < n; ++i) {
    const auto z = unit_features.row(i);
    Index label_slot = 0;
    for (std::size_t s = 0; s < P; ++s) {
      const Matrix& centers = bank.classes[static_cast<std::size_t>(present[s])].centers;
      const Eigen::RowVectorXd sims = z * centers;
      Index arg = 0;
      for (Index k = 1; k < sims.size(); ++k)
        if (sims(k) > sims(arg)) arg = k;
      scores(static_cast<Index>(s)) = sims(arg);
      best[s] = arg;
      if (present[s] == labels[static_cast<std::size_t>(i)]) label_slot = static_cast<Index>(s);
    }
    const double m = scores.maxCoeff();
    const Vector e = (scores.array() - m).exp().matrix();
    const double zsum = e.sum();
    sum += -(scores(label_slot) - m - std::log(zsum));
    for (std::size_t s = 0; s < P; ++s) {
      double w = e(static_cast<Index>(s)) / zsum;
      if (static_cast<Index>(s) == label_slot) w -= 1.0;
      out.feature_grad.row(i) += w * bank.classes[static_cast<std::size_t>(present[s])].centers.col(best[s]).transpose();
    }
  }
  out.value = sum / static_cast<double>(n);
  out.feature_grad /= static_cast<double>(n);
  return out;
}

LossValue combined_loss(const Matrix& logits, const Matrix& features, std::span<const int> labels,
                        const ClassPrior& prior, const PrototypeBank& bank, double npr_weight, double sup_weight) {
  if (npr_weight < 0.0) throw Error(ErrorKind::config, "npr weight must be >= 0");
  if (logits.rows() != features.rows()) throw Error(ErrorKind::shape, "logits and features differ in rows");
  const SupervisedTerm sup = balanced_softmax_loss(logits, labels, prior);
  const Matrix unit = normalize_rows(features);
  const NprTerm npr = npr_loss(unit, labels, bank);

  LossValue out;
  out.sup_term = sup.value;
  out.npr_term = npr.value;
  out.total = sup_weight * sup.value + npr_weight * npr.value;
  out.logit_grad = sup_weight * sup.logit_grad;
  if (npr_weight == 0.0)
    out.feature_grad = Matrix::Zero(features.rows(), features.cols());
  else
    out.feature_grad = npr_weight * normalize_rows_backward(features, npr.feature_grad);
  return out;
}

LossValue supervised_loss(const Matrix& logits, Index feature_dim, std::span<const int> labels,
                          const ClassPrior& prior) {
  SupervisedTerm sup = balanced_softmax_loss(logits, labels, prior);
  LossValue out;
  out.sup_term = sup.value;
  out.total = sup.value;
  out.logit_grad = std::move(sup.logit_grad);
  out.feature_grad = Matrix::Zero(logits.rows(), feature_dim);
  return out;
}

}  // namespace fednpr
