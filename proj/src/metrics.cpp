#include "fednpr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace fednpr {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_labels(std::span<const int> labels, Index n_classes) {
  for (int y : labels)
    if (y < 0 || y >= n_classes) throw Error(ErrorKind::label, "label " + std::to_string(y) + " out of range");
}

}  // namespace

AccuracyResult balanced_accuracy(std::span<const int> predictions, std::span<const int> labels, Index n_classes) {
  if (labels.empty()) throw Error(ErrorKind::metric, "balanced accuracy of an empty set");
  if (predictions.size() != labels.size()) throw Error(ErrorKind::shape, "predictions and labels differ in length");
  check_labels(labels, n_classes);
  check_labels(predictions, n_classes);
  std::vector<double> hits(static_cast<std::size_t>(n_classes), 0.0), totals(static_cast<std::size_t>(n_classes), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    totals[y] += 1.0;
    if (predictions[i] == labels[i]) hits[y] += 1.0;
  }
  AccuracyResult out;
  out.per_class = Vector::Constant(n_classes, kNaN);
  double sum = 0.0;
  int present = 0;
  for (Index c = 0; c < n_classes; ++c) {
    const auto k = static_cast<std::size_t>(c);
    if (totals[k] == 0.0) continue;
    out.per_class(c) = hits[k] / totals[k];
    sum += out.per_class(c);
    ++present;
  }
  out.bacc = sum / present;
  return out;
}

AucResult balanced_auc(const Matrix& scores, std::span<const int> labels, Index n_classes) {
  const auto n = static_cast<Index>(labels.size());
  if (n == 0) throw Error(ErrorKind::metric, "balanced AUC of an empty set");
  if (scores.rows() != n || scores.cols() != n_classes) throw Error(ErrorKind::shape, "score matrix shape mismatch");
  check_labels(labels, n_classes);

  AucResult out;
  out.per_class = Vector::Constant(n_classes, kNaN);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::vector<double> rank(static_cast<std::size_t>(n));
  double sum = 0.0;
  int evaluated = 0;
  for (Index c = 0; c < n_classes; ++c) {
    double pos = 0.0;
    for (int y : labels) pos += (y == c) ? 1.0 : 0.0;
    const double neg = static_cast<double>(n) - pos;
    if (pos == 0.0 || neg == 0.0) {
      out.unevaluable.push_back(static_cast<int>(c));
      continue;
    }
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return scores(a, c) < scores(b, c); });
    // Mid-ranks, 1-based.
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j + 1 < order.size() && scores(order[j + 1], c) == scores(order[i], c)) ++j;
      const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t t = i; t <= j; ++t) rank[static_cast<std::size_t>(order[t])] = mid;
      i = j + 1;
    }
    double pos_rank = 0.0;
    for (Index i = 0; i < n; ++i)
      if (labels[static_cast<std::size_t>(i)] == c) pos_rank += rank[static_cast<std::size_t>(i)];
    const double auc = (pos_rank - pos * (pos + 1.0) / 2.0) / (pos * neg);
    out.per_class(c) = auc;
    sum += auc;
    ++evaluated;
  }
  out.bauc = evaluated > 0 ? sum / evaluated : kNaN;
  return out;
}

FederatedMean federated_average(std::span<const EvalRecord> records) {
  if (records.empty()) throw Error(ErrorKind::metric, "federated average of no records");
  FederatedMean out;
  double auc_sum = 0.0;
  int auc_n = 0;
  for (const auto& r : records) {
    out.bacc += r.bacc;
    if (!std::isnan(r.bauc)) {
      auc_sum += r.bauc;
      ++auc_n;
    }
  }
  out.bacc /= static_cast<double>(records.size());
  out.bauc = auc_n > 0 ? auc_sum / auc_n : kNaN;
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out = logits;
  for (Index i = 0; i < out.rows(); ++i) {
    out.row(i).array() -= out.row(i).maxCoeff();
    out.row(i) = out.row(i).array().exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

}  // namespace fednpr
