#include "fednpr/federation.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace fednpr {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t a = 0, std::uint64_t b = 0) {
  return splitmix(splitmix(splitmix(seed ^ splitmix(stream)) + a) + b);
}

enum Stream : std::uint64_t { kInit = 1, kShuffle = 2, kPrototypes = 3 };

void check_deltas(const ServerState& server, std::span<const ModelDelta> deltas) {
  if (deltas.empty()) throw Error(ErrorKind::aggregation, "no deltas to aggregate");
  for (std::size_t i = 0; i < deltas.size(); ++i)
    if (!congruent(server.global_model, deltas[i].values))
      throw Error(ErrorKind::aggregation, "delta " + std::to_string(i) + " does not match the global model");
}

std::vector<std::size_t> sample_counts(std::span<const ModelDelta> deltas) {
  std::vector<std::size_t> counts;
  counts.reserve(deltas.size());
  for (const auto& d : deltas) counts.push_back(d.sample_count);
  return counts;
}

int argmax_row(const Matrix& m, Index row) {
  Index best = 0;
  for (Index c = 1; c < m.cols(); ++c)
    if (m(row, c) > m(row, best)) best = c;
  return static_cast<int>(best);
}

}  // namespace

const char* to_string(Algorithm algorithm) {
  switch (algorithm) {
    case Algorithm::fednpr: return "fednpr";
    case Algorithm::fednpr_per: return "fednpr_per";
    case Algorithm::fedavg: return "fedavg";
    case Algorithm::fedprox: return "fedprox";
    case Algorithm::local_only: return "local_only";
  }
  return "unknown";
}

Algorithm parse_algorithm(const std::string& name) {
  for (auto a : {Algorithm::fednpr, Algorithm::fednpr_per, Algorithm::fedavg, Algorithm::fedprox, Algorithm::local_only})
    if (name == to_string(a)) return a;
  throw Error(ErrorKind::config, "unknown algorithm '" + name + "'");
}

void validate(const FederationConfig& config) {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::config, what); };
  if (config.rounds < 1) fail("rounds must be >= 1");
  if (config.n_clients < 1) fail("n_clients must be >= 1");
  if (config.sub_clusters < 1) fail("K must be >= 1");
  if (!(config.npr_weight >= 0.0)) fail("lambda must be >= 0");
  if (config.local_epochs < 1) fail("local_epochs must be >= 1");
  if (config.batch_size < 1) fail("batch_size must be >= 1");
  if (!(config.base_lr > 0.0)) fail("learning rate must be > 0");
  if (!(config.weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(config.fedprox_mu >= 0.0)) fail("fedprox_mu must be >= 0");
  if (config.feature_dim < 1) fail("feature_dim must be >= 1");
  for (Index h : config.hidden_dims)
    if (h < 1) fail("hidden dims must be >= 1");
  validate(config.sinkhorn);
}

bool uses_npr(const FederationConfig& config) {
  return (config.algorithm == Algorithm::fednpr || config.algorithm == Algorithm::fednpr_per) &&
         config.npr_weight > 0.0;
}

bool uses_proximal(const FederationConfig& config) {
  const bool prox_arm = config.algorithm == Algorithm::fedprox ||
                        (config.proximal_with_npr &&
                         (config.algorithm == Algorithm::fednpr || config.algorithm == Algorithm::fednpr_per));
  return prox_arm && config.fedprox_mu > 0.0;
}

std::vector<double> compute_client_weights(std::span<const std::size_t> sample_counts) {
  double total = 0.0;
  for (auto n : sample_counts) total += static_cast<double>(n);
  if (!(total > 0.0)) throw Error(ErrorKind::config, "all clients report zero samples");
  std::vector<double> w;
  w.reserve(sample_counts.size());
  for (auto n : sample_counts) w.push_back(static_cast<double>(n) / total);
  return w;
}

ClientState make_client(ClientDataset data, const ModelParams& global, const FederationConfig& config) {
  ClientState state;
  const auto counts = class_counts(data, Split::train);
  state.prior = compute_class_prior(counts, config.prior_smoothing);
  state.data = std::move(data);
  state.model = global;
  state.adam = make_adam_state(global);
  if (config.algorithm == Algorithm::fednpr_per) state.personal_head = global.classifier;
  return state;
}

LocalUpdate local_update(ClientState& client, const ModelParams& downloaded, double lr,
                         const FederationConfig& config, int round) {
  const auto& train = client.data.train_idx;
  if (train.empty()) throw Error(ErrorKind::split, "client " + std::to_string(client.data.client_id) + " has no training data");

  const bool personal = config.algorithm == Algorithm::fednpr_per;
  const bool npr = uses_npr(config);
  const bool prox = uses_proximal(config);
  const double sup_weight = config.global_supervision ? 1.0 : 0.0;

  client.model = downloaded;
  if (personal) client.model.classifier = *client.personal_head;
  const ModelParams anchor = client.model;

  const Matrix X = client.data.rows(train);
  const Labels y = client.data.labels_at(train);
  if (npr) {
    const Matrix Z = forward_features(client.model, X);
    client.bank = cluster_client(Z, y, client.data.n_classes, config.sub_clusters, client.bank, config.sinkhorn,
                                 derive_seed(config.seed, kPrototypes, static_cast<std::uint64_t>(client.data.client_id),
                                             static_cast<std::uint64_t>(round)));
  }

  std::mt19937_64 rng(derive_seed(config.seed, kShuffle, static_cast<std::uint64_t>(client.data.client_id),
                                  static_cast<std::uint64_t>(round)));
  std::vector<Index> order(train.size());
  std::iota(order.begin(), order.end(), Index{0});

  LocalUpdate out;
  int batches = 0;
  const auto n = static_cast<Index>(order.size());
  for (int epoch = 0; epoch < config.local_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (Index start = 0; start < n; start += config.batch_size) {
      const Index end = std::min<Index>(n, start + config.batch_size);
      Matrix Xb(end - start, X.cols());
      Labels yb;
      yb.reserve(static_cast<std::size_t>(end - start));
      for (Index r = start; r < end; ++r) {
        Xb.row(r - start) = X.row(order[static_cast<std::size_t>(r)]);
        yb.push_back(y[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])]);
      }
      const Matrix Z = forward_features(client.model, Xb);
      const Matrix logits = forward_logits(client.model, Z);
      const LossValue loss =
          npr ? combined_loss(logits, Z, yb, client.prior, client.bank, config.npr_weight, sup_weight)
              : supervised_loss(logits, Z.cols(), yb, client.prior);
      GradientSet grads = backward(client.model, Xb, loss.logit_grad, loss.feature_grad);
      if (prox) {
        axpy(grads, config.fedprox_mu, client.model);
        axpy(grads, -config.fedprox_mu, anchor);
      }
      adam_step(client.model, grads, client.adam, lr, config.weight_decay);
      out.loss_sup += loss.sup_term;
      out.loss_npr += loss.npr_term;
      ++batches;
    }
  }
  if (batches > 0) {
    out.loss_sup /= batches;
    out.loss_npr /= batches;
  }

  out.delta.values = client.model;
  axpy(out.delta.values, -1.0, anchor);
  out.delta.sample_count = train.size();
  if (personal) {
    client.personal_head = client.model.classifier;
    out.delta.values.classifier.weight.setZero();
    out.delta.values.classifier.bias.setZero();
  }
  return out;
}

void aggregate_full(ServerState& server, std::span<const ModelDelta> deltas) {
  check_deltas(server, deltas);
  const auto counts = sample_counts(deltas);
  const auto w = compute_client_weights(counts);
  auto sum = zeros_like<ParamTensors>(server.global_model);
  for (std::size_t i = 0; i < deltas.size(); ++i) axpy(sum, w[i], deltas[i].values);
  axpy(server.global_model, 1.0, sum);
  server.round += 1;
}

void aggregate_extractor_only(ServerState& server, std::span<const ModelDelta> deltas) {
  check_deltas(server, deltas);
  const auto counts = sample_counts(deltas);
  const auto w = compute_client_weights(counts);
  auto global = server.global_model.tensors();
  std::vector<Vector> sums;
  for (const auto& t : global) sums.push_back(Vector::Zero(t.values.size()));
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    const auto views = deltas[i].values.tensors();
    for (std::size_t t = 0; t < views.size(); ++t)
      if (!views[t].in_classifier) sums[t] += w[i] * views[t].values;
  }
  for (std::size_t t = 0; t < global.size(); ++t)
    if (!global[t].in_classifier) global[t].values += sums[t];
  server.round += 1;
}

ModelParams evaluation_model(const ClientState& client, const ServerState& server, const FederationConfig& config) {
  if (config.algorithm == Algorithm::local_only) return client.model;
  ModelParams model = server.global_model;
  if (config.algorithm == Algorithm::fednpr_per) model.classifier = *client.personal_head;
  return model;
}

EvalRecord evaluate_client(const ClientState& client, const ModelParams& model, Split split, int round,
                           const FederationConfig& config) {
  const auto& idx = client.data.indices(split);
  EvalRecord rec;
  rec.client = client.data.client_id;
  rec.round = round;
  rec.split = split;
  if (idx.empty()) throw Error(ErrorKind::metric, "client " + std::to_string(rec.client) + " has an empty " + to_string(split) + " split");

  const Matrix X = client.data.rows(idx);
  const Labels y = client.data.labels_at(idx);
  const Matrix Z = forward_features(model, X);
  const Matrix logits = forward_logits(model, Z);
  Labels preds(y.size());
  for (Index i = 0; i < logits.rows(); ++i) preds[static_cast<std::size_t>(i)] = argmax_row(logits, i);

  const Index C = client.data.n_classes;
  const auto acc = balanced_accuracy(preds, y, C);
  const auto auc = balanced_auc(softmax_rows(logits), y, C);
  rec.bacc = acc.bacc;
  rec.per_class_acc = acc.per_class;
  rec.bauc = auc.bauc;
  rec.per_class_auc = auc.per_class;
  rec.unevaluable = auc.unevaluable;
  rec.loss_sup = balanced_softmax_loss(logits, y, client.prior).value;
  if (uses_npr(config) && client.bank.n_classes() == C) {
    bool covered = true;
    for (int label : y) covered = covered && client.bank.has(label);
    if (covered) rec.loss_npr = npr_loss(normalize_rows(Z), y, client.bank).value;
  }
  return rec;
}

ServerState run_federation(const FederationConfig& config, std::vector<ClientDataset> clients) {
  validate(config);
  if (static_cast<int>(clients.size()) != config.n_clients)
    throw Error(ErrorKind::config, "config expects " + std::to_string(config.n_clients) + " clients, got " +
                                       std::to_string(clients.size()));
  const Index input_dim = clients.front().features.cols();
  const Index n_classes = clients.front().n_classes;
  for (const auto& c : clients)
    if (c.features.cols() != input_dim || c.n_classes != n_classes)
      throw Error(ErrorKind::config, "clients disagree on input dim or class count");

  std::vector<Index> dims{input_dim};
  dims.insert(dims.end(), config.hidden_dims.begin(), config.hidden_dims.end());
  dims.push_back(config.feature_dim);

  ServerState server;
  server.global_model = init_model(dims, n_classes, derive_seed(config.seed, kInit));

  std::vector<ClientState> states;
  states.reserve(clients.size());
  for (auto& c : clients) states.push_back(make_client(std::move(c), server.global_model, config));

  const bool local = config.algorithm == Algorithm::local_only;
  for (int t = 1; t <= config.rounds; ++t) {
    const double lr = lr_at_round(config.base_lr, t, config.rounds);
    std::vector<ModelDelta> deltas;
    deltas.reserve(states.size());
    for (auto& s : states) {
      const ModelParams downloaded = local ? s.model : server.global_model;
      deltas.push_back(local_update(s, downloaded, lr, config, t).delta);
    }
    if (local)
      server.round += 1;
    else if (config.algorithm == Algorithm::fednpr_per)
      aggregate_extractor_only(server, deltas);
    else
      aggregate_full(server, deltas);

    for (const auto& s : states) {
      const ModelParams model = evaluation_model(s, server, config);
      for (Split split : {Split::train, Split::test})
        if (!s.data.indices(split).empty()) server.history.push_back(evaluate_client(s, model, split, t, config));
    }
  }
  return server;
}

}  // namespace fednpr
