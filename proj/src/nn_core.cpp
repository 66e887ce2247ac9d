#include "fednpr/nn_core.hpp"

#include <cmath>
#include <random>

namespace fednpr {

namespace {

template <typename VectorT, typename Tensors>
std::vector<TensorView<VectorT>> collect_views(Tensors& t) {
  std::vector<TensorView<VectorT>> out;
  out.reserve(2 * t.extractor.size() + 2);
  auto add = [&](const std::string& path, auto& m, bool cls) {
    out.push_back({path, Eigen::Map<VectorT>(m.data(), m.size()), cls});
  };
  for (std::size_t l = 0; l < t.extractor.size(); ++l) {
    add("extractor." + std::to_string(l) + ".weight", t.extractor[l].weight, false);
    add("extractor." + std::to_string(l) + ".bias", t.extractor[l].bias, false);
  }
  add("classifier.weight", t.classifier.weight, true);
  add("classifier.bias", t.classifier.bias, true);
  return out;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorKind::shape, what);
}

struct ForwardTrace {
  std::vector<Matrix> pre;    // pre-activation of every extractor layer
  std::vector<Matrix> input;  // input of every extractor layer
};

Matrix run_extractor(const ModelParams& params, const Matrix& X, ForwardTrace* trace) {
  require(!params.extractor.empty(), "model has no extractor layers");
  require(X.cols() == params.input_dim(),
          "input has " + std::to_string(X.cols()) + " columns, extractor expects " +
              std::to_string(params.input_dim()));
  Matrix h = X;
  const std::size_t last = params.extractor.size() - 1;
  for (std::size_t l = 0; l < params.extractor.size(); ++l) {
    const Layer& layer = params.extractor[l];
    Matrix a = h * layer.weight;
    a.rowwise() += layer.bias.transpose();
    if (trace) {
      trace->input.push_back(std::move(h));
      trace->pre.push_back(a);
    }
    h = (l == last) ? std::move(a) : Matrix(a.cwiseMax(0.0));
  }
  return h;
}

}  // namespace

std::vector<TensorView<Vector>> ParamTensors::tensors() { return collect_views<Vector>(*this); }

std::vector<TensorView<const Vector>> ParamTensors::tensors() const { return collect_views<const Vector>(*this); }

void check_chain(const ParamTensors& params) {
  require(!params.extractor.empty(), "model has no extractor layers");
  for (std::size_t l = 0; l < params.extractor.size(); ++l) {
    const Layer& layer = params.extractor[l];
    require(layer.bias.size() == layer.out_dim(), "bias size mismatch in extractor layer " + std::to_string(l));
    if (l + 1 < params.extractor.size())
      require(params.extractor[l + 1].in_dim() == layer.out_dim(),
              "extractor layer " + std::to_string(l + 1) + " does not chain");
  }
  require(params.classifier.in_dim() == params.feature_dim(), "classifier input does not match feature dim");
  require(params.classifier.bias.size() == params.classifier.out_dim(), "classifier bias size mismatch");
}

bool congruent(const ParamTensors& a, const ParamTensors& b) {
  if (a.extractor.size() != b.extractor.size()) return false;
  auto same = [](const Layer& x, const Layer& y) {
    return x.weight.rows() == y.weight.rows() && x.weight.cols() == y.weight.cols() &&
           x.bias.size() == y.bias.size();
  };
  for (std::size_t l = 0; l < a.extractor.size(); ++l)
    if (!same(a.extractor[l], b.extractor[l])) return false;
  return same(a.classifier, b.classifier);
}

void axpy(ParamTensors& y, double alpha, const ParamTensors& x) {
  require(congruent(y, x), "axpy on non-congruent tensors");
  auto ys = y.tensors();
  auto xs = x.tensors();
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i].values += alpha * xs[i].values;
}

double dot(const ParamTensors& a, const ParamTensors& b) {
  require(congruent(a, b), "dot on non-congruent tensors");
  auto as = a.tensors();
  auto bs = b.tensors();
  double s = 0.0;
  for (std::size_t i = 0; i < as.size(); ++i) s += as[i].values.dot(bs[i].values);
  return s;
}

ModelParams init_model(std::span<const Index> extractor_dims, Index n_classes, std::uint64_t seed) {
  if (extractor_dims.size() < 2 || n_classes < 1)
    throw Error(ErrorKind::config, "need at least input and feature dims and one class");
  std::mt19937_64 rng(seed);
  auto make = [&](Index in, Index out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Layer layer{Matrix(in, out), Vector::Zero(out)};
    for (Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = u(rng);
    return layer;
  };
  ModelParams params;
  for (std::size_t l = 0; l + 1 < extractor_dims.size(); ++l)
    params.extractor.push_back(make(extractor_dims[l], extractor_dims[l + 1]));
  params.classifier = make(extractor_dims.back(), n_classes);
  return params;
}

Matrix forward_features(const ModelParams& params, const Matrix& X) { return run_extractor(params, X, nullptr); }

Matrix forward_logits(const ModelParams& params, const Matrix& Z) {
  require(Z.cols() == params.classifier.in_dim(),
          "features have " + std::to_string(Z.cols()) + " columns, classifier expects " +
              std::to_string(params.classifier.in_dim()));
  Matrix logits = Z * params.classifier.weight;
  logits.rowwise() += params.classifier.bias.transpose();
  return logits;
}

GradientSet backward(const ModelParams& params, const Matrix& X, const Matrix& upstream_logit_grad,
                     const Matrix& upstream_feature_grad) {
  ForwardTrace trace;
  const Matrix Z = run_extractor(params, X, &trace);
  const Index n = X.rows();
  require(upstream_logit_grad.rows() == n && upstream_logit_grad.cols() == params.n_classes(),
          "logit gradient shape mismatch");
  require(upstream_feature_grad.rows() == n && upstream_feature_grad.cols() == params.feature_dim(),
          "feature gradient shape mismatch");

  GradientSet g = zeros_like<GradientSet>(params);
  g.classifier.weight.noalias() = Z.transpose() * upstream_logit_grad;
  g.classifier.bias = upstream_logit_grad.colwise().sum().transpose();

  // Both branches meet at Z.
  Matrix delta = upstream_logit_grad * params.classifier.weight.transpose() + upstream_feature_grad;
  for (std::size_t l = params.extractor.size(); l-- > 0;) {
    if (l + 1 < params.extractor.size()) delta = delta.cwiseProduct((trace.pre[l].array() > 0.0).cast<double>().matrix());
    g.extractor[l].weight.noalias() = trace.input[l].transpose() * delta;
    g.extractor[l].bias = delta.colwise().sum().transpose();
    if (l > 0) delta = delta * params.extractor[l].weight.transpose();
  }
  return g;
}

AdamState make_adam_state(const ParamTensors& params) {
  AdamState state;
  state.first_moment = zeros_like<ParamTensors>(params);
  state.second_moment = zeros_like<ParamTensors>(params);
  return state;
}

void adam_step(ModelParams& params, const GradientSet& grads, AdamState& state, double lr, double weight_decay) {
  require(congruent(params, grads) && congruent(params, state.first_moment) &&
              congruent(params, state.second_moment),
          "adam_step on non-congruent tensors");
  if (!(lr > 0.0)) throw Error(ErrorKind::config, "learning rate must be positive");
  auto gs = grads.tensors();
  for (const auto& t : gs)
    if (!t.values.allFinite()) throw Error(ErrorKind::numeric, "non-finite gradient in " + t.path);

  state.step += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  auto ps = params.tensors();
  auto ms = state.first_moment.tensors();
  auto vs = state.second_moment.tensors();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = ps[i].values;
    const auto& g = gs[i].values;
    if (weight_decay != 0.0) p *= (1.0 - lr * weight_decay);
    ms[i].values = state.beta1 * ms[i].values + (1.0 - state.beta1) * g;
    vs[i].values = state.beta2 * vs[i].values + (1.0 - state.beta2) * g.cwiseProduct(g);
    p.array() -= lr * (ms[i].values.array() / c1) / ((vs[i].values.array() / c2).sqrt() + state.epsilon);
  }
}

double lr_at_round(double base_lr, int round, int total_rounds) {
  // Integer comparisons keep the boundaries exact: 4r >= 3T and 8r >= 7T.
  if (8LL * round >= 7LL * total_rounds) return base_lr * 0.01;
  if (4LL * round >= 3LL * total_rounds) return base_lr * 0.1;
  return base_lr;
}

}  // namespace fednpr
