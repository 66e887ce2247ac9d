#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fednpr/error.hpp"

namespace fednpr {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using Index = Eigen::Index;
using Labels = std::vector<int>;

/// Affine layer y = x * weight + bias, weight shaped (in, out).
struct Layer {
  Matrix weight;
  Vector bias;

  Index in_dim() const { return weight.rows(); }
  Index out_dim() const { return weight.cols(); }
};

/// Flat view over one parameter tensor, keyed by its path
/// ("extractor.0.weight", "classifier.bias", ...).
template <typename VectorT>
struct TensorView {
  std::string path;
  Eigen::Map<VectorT> values;
  bool in_classifier;
};

/// Layered tensors shaped like the split model: an extractor stack f_u
/// followed by a single affine classifier g_v.
struct ParamTensors {
  std::vector<Layer> extractor;
  Layer classifier;

  Index input_dim() const { return extractor.empty() ? 0 : extractor.front().in_dim(); }
  Index feature_dim() const { return extractor.empty() ? 0 : extractor.back().out_dim(); }
  Index n_classes() const { return classifier.out_dim(); }

  std::vector<TensorView<Vector>> tensors();
  std::vector<TensorView<const Vector>> tensors() const;
};

struct ModelParams : ParamTensors {};
struct GradientSet : ParamTensors {};

/// Throws a shape error unless every layer chains into the next and the
/// classifier consumes the extractor output.
void check_chain(const ParamTensors& params);

bool congruent(const ParamTensors& a, const ParamTensors& b);

template <typename T>
T zeros_like(const ParamTensors& shape) {
  T out;
  out.extractor.reserve(shape.extractor.size());
  for (const auto& l : shape.extractor)
    out.extractor.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
  out.classifier = {Matrix::Zero(shape.classifier.weight.rows(), shape.classifier.weight.cols()),
                    Vector::Zero(shape.classifier.bias.size())};
  return out;
}

/// y += alpha * x over every tensor.
void axpy(ParamTensors& y, double alpha, const ParamTensors& x);

/// Sum over all entries of a * b.
double dot(const ParamTensors& a, const ParamTensors& b);

/// He-style uniform init, U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
/// `extractor_dims` = {input, hidden..., feature}.
ModelParams init_model(std::span<const Index> extractor_dims, Index n_classes, std::uint64_t seed);

/// Extractor forward pass: ReLU between layers, identity on the feature layer.
Matrix forward_features(const ModelParams& params, const Matrix& X);

/// Affine classifier head, no softmax.
Matrix forward_logits(const ModelParams& params, const Matrix& Z);

/// Exact gradients of sum(logits .* logit_grad) + sum(Z .* feature_grad)
/// with respect to every parameter.
GradientSet backward(const ModelParams& params, const Matrix& X, const Matrix& upstream_logit_grad,
                     const Matrix& upstream_feature_grad);

struct AdamState {
  ParamTensors first_moment;
  ParamTensors second_moment;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

AdamState make_adam_state(const ParamTensors& params);

/// One Adam step with decoupled weight decay (params *= 1 - lr * wd first).
void adam_step(ModelParams& params, const GradientSet& grads, AdamState& state, double lr, double weight_decay);

/// Piecewise-constant schedule: x0.1 from 75% of total_rounds, x0.01 from 87.5%.
double lr_at_round(double base_lr, int round, int total_rounds);

}  // namespace fednpr
