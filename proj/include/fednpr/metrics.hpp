#pragma once

#include <span>
#include <vector>

#include "fednpr/data.hpp"
#include "fednpr/nn_core.hpp"

namespace fednpr {

struct AccuracyResult {
  double bacc = 0.0;
  // Recall per class; NaN for classes absent from the labels.
  Vector per_class;
};

struct AucResult {
  // NaN when no class has both positives and negatives.
  double bauc = 0.0;
  // One-vs-rest AUC per class; NaN for classes that could not be evaluated.
  Vector per_class;
  std::vector<int> unevaluable;
};

/// Mean per-class recall over the classes present in `labels`.
AccuracyResult balanced_accuracy(std::span<const int> predictions, std::span<const int> labels, Index n_classes);

/// Mean one-vs-rest AUC over classes with at least one positive and one
/// negative, computed from mid-ranks (ties count half).
AucResult balanced_auc(const Matrix& scores, std::span<const int> labels, Index n_classes);

struct EvalRecord {
  int client = 0;
  int round = 0;
  Split split = Split::test;
  double bacc = 0.0;
  double bauc = 0.0;
  Vector per_class_acc;
  Vector per_class_auc;
  std::vector<int> unevaluable;
  double loss_sup = 0.0;
  double loss_npr = 0.0;
};

struct FederatedMean {
  double bacc = 0.0;
  double bauc = 0.0;
};

/// Unweighted mean over clients. Clients without a defined bAUC are left out
/// of the bAUC mean.
FederatedMean federated_average(std::span<const EvalRecord> records);

/// Row-wise softmax.
Matrix softmax_rows(const Matrix& logits);

}  // namespace fednpr
