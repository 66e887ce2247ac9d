#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fednpr/clustering.hpp"
#include "fednpr/data.hpp"
#include "fednpr/losses.hpp"
#include "fednpr/metrics.hpp"
#include "fednpr/nn_core.hpp"

namespace fednpr {

enum class Algorithm { fednpr, fednpr_per, fedavg, fedprox, local_only };

const char* to_string(Algorithm algorithm);
Algorithm parse_algorithm(const std::string& name);

struct FederationConfig {
  int n_clients = 6;
  int rounds = 40;
  int sub_clusters = 4;
  double npr_weight = 0.1;
  SinkhornConfig sinkhorn;
  double base_lr = 1e-3;
  double weight_decay = 5e-4;
  int batch_size = 64;
  int local_epochs = 1;
  Algorithm algorithm = Algorithm::fednpr;
  double fedprox_mu = 0.01;
  // Proximal term on top of the NPR variants (FedProx + NPR).
  bool proximal_with_npr = false;
  // Weight of the balanced-softmax term; 0 trains on the NPR loss alone.
  bool global_supervision = true;
  std::vector<Index> hidden_dims{64, 32};
  Index feature_dim = 16;
  double prior_smoothing = 1.0;
  std::uint64_t seed = 0;
};

void validate(const FederationConfig& config);

/// NPR runs only for the NPR variants with a positive weight; with a zero
/// weight they train exactly like their NPR-free counterparts.
bool uses_npr(const FederationConfig& config);
bool uses_proximal(const FederationConfig& config);

struct ClientState {
  ClientDataset data;
  ModelParams model;
  std::optional<Layer> personal_head;
  PrototypeBank bank;
  AdamState adam;
  ClassPrior prior;
};

/// The only artefact a client hands to the server.
struct ModelDelta {
  ParamTensors values;
  std::size_t sample_count = 0;
};

struct LocalUpdate {
  ModelDelta delta;
  double loss_sup = 0.0;
  double loss_npr = 0.0;
};

struct ServerState {
  ModelParams global_model;
  int round = 0;
  std::vector<EvalRecord> history;
};

/// w_i = n_i / sum_j n_j.
std::vector<double> compute_client_weights(std::span<const std::size_t> sample_counts);

ClientState make_client(ClientDataset data, const ModelParams& global, const FederationConfig& config);

/// One client's round: download, refresh prototypes (NPR variants), run
/// local_epochs of shuffled mini-batch Adam, return params - downloaded.
/// Under fednpr_per only the extractor is downloaded and the classifier
/// part of the delta is zero; the trained head stays in personal_head.
LocalUpdate local_update(ClientState& client, const ModelParams& downloaded, double lr,
                         const FederationConfig& config, int round);

/// global += sum_i w_i delta_i, summed in client order; round += 1.
void aggregate_full(ServerState& server, std::span<const ModelDelta> deltas);

/// As aggregate_full on the extractor tensors only.
void aggregate_extractor_only(ServerState& server, std::span<const ModelDelta> deltas);

/// The model a client is evaluated with: its own copy (local_only), the
/// global extractor with its personal head (fednpr_per), or the global model.
ModelParams evaluation_model(const ClientState& client, const ServerState& server, const FederationConfig& config);

EvalRecord evaluate_client(const ClientState& client, const ModelParams& model, Split split, int round,
                           const FederationConfig& config);

/// Runs config.rounds synchronous rounds over all clients and records one
/// train and one test EvalRecord per client per round.
ServerState run_federation(const FederationConfig& config, std::vector<ClientDataset> clients);

}  // namespace fednpr
