#pragma once

#include <span>

#include "fednpr/clustering.hpp"
#include "fednpr/nn_core.hpp"

namespace fednpr {

/// Smoothed local class frequencies pi_c = (n_c + s) / (sum n + C s).
struct ClassPrior {
  Vector pi;
  double smoothing = 1.0;
};

ClassPrior compute_class_prior(std::span<const Index> counts, double smoothing = 1.0);

struct SupervisedTerm {
  double value = 0.0;
  Matrix logit_grad;  // n x C
};

struct NprTerm {
  double value = 0.0;
  Matrix feature_grad;  // n x d, with respect to the unit features
};

struct LossValue {
  double total = 0.0;
  double sup_term = 0.0;
  double npr_term = 0.0;
  Matrix logit_grad;
  Matrix feature_grad;
};

/// Balanced softmax: mean cross-entropy of softmax(logits + log pi).
SupervisedTerm balanced_softmax_loss(const Matrix& logits, std::span<const int> labels, const ClassPrior& prior);

/// Prototype regularizer on unit features.
///
/// Per sample the score of class j is the best similarity to any of its
/// prototypes, s_j = max_k <z, p_{j,k}>; the loss is the mean of
/// -log softmax(s)_y over classes that hold prototypes. Prototypes are
/// constants. The subgradient flows through the argmax prototype, ties to
/// the lowest index.
NprTerm npr_loss(const Matrix& unit_features, std::span<const int> labels, const PrototypeBank& bank);

/// L = sup_weight * L_sup + npr_weight * L_npr.
///
/// `features` are raw extractor outputs; they are normalized here and the
/// returned feature_grad is taken with respect to the raw features, so it
/// can be handed straight to backward(). With npr_weight == 0 the NPR term
/// is still reported but contributes no gradient.
LossValue combined_loss(const Matrix& logits, const Matrix& features, std::span<const int> labels,
                        const ClassPrior& prior, const PrototypeBank& bank, double npr_weight,
                        double sup_weight = 1.0);

/// Supervised-only objective (no prototypes available).
LossValue supervised_loss(const Matrix& logits, Index feature_dim, std::span<const int> labels,
                          const ClassPrior& prior);

}  // namespace fednpr
