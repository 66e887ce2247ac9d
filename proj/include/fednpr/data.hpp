#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fednpr/nn_core.hpp"

namespace fednpr {

struct SyntheticDataConfig {
  Index n_classes = 5;
  Index input_dim = 32;
  std::vector<Index> samples_per_class;  // empty: geometric 1000 * 0.4^c
  double class_mean_separation = 3.0;
  double noise_scale = 1.0;
  // Each class is a mixture of this many Gaussian modes around its mean.
  Index modes_per_class = 1;
  double mode_spread = 0.0;
  std::uint64_t seed = 0;
};

std::vector<Index> default_samples_per_class(Index n_classes);
void validate(const SyntheticDataConfig& config);

struct LabeledData {
  Matrix features;
  Labels labels;
  Index n_classes = 0;
};

/// Per class, isotropic Gaussian samples (std noise_scale) around a seeded
/// random unit direction scaled by class_mean_separation.
LabeledData generate_synthetic(const SyntheticDataConfig& config);

struct PartitionConfig {
  Index n_clients = 6;
  std::vector<double> dirichlet_alpha_per_class;  // empty: 1.0 for every class
  double missing_class_prob = 0.3;
  std::uint64_t seed = 0;
};

enum class Split { train, test, all };

const char* to_string(Split split);

struct ClientDataset {
  int client_id = 0;
  Matrix features;
  Labels labels;
  Index n_classes = 0;
  std::vector<Index> train_idx;
  std::vector<Index> test_idx;

  Index size() const { return features.rows(); }
  Matrix rows(const std::vector<Index>& idx) const;
  Labels labels_at(const std::vector<Index>& idx) const;
  const std::vector<Index>& indices(Split split) const;
};

/// Non-IID split: per class, client shares from Dirichlet(alpha_c); each
/// (client, class) cell is dropped with missing_class_prob and its share
/// handed to the surviving holders. Every holder receives one sample first
/// (when the class has at least one per holder) and the rest follow a
/// multinomial draw over the renormalised shares. Masks that empty a client
/// or drop a class everywhere are redrawn (at most 100 attempts).
std::vector<ClientDataset> dirichlet_partition(const LabeledData& data, const PartitionConfig& config);

/// Per class: floor(n_c * f) samples to train (at least 1 when n_c >= 2),
/// the rest to test; single-sample classes go to train.
ClientDataset stratified_split(ClientDataset client, double train_fraction, std::uint64_t seed);

std::vector<Index> class_counts(const ClientDataset& client, Split split);

// Columnar text format shared with other implementations:
//   FEDNPR-DATA-v1 dims=<d> classes=<C> clients=<N>
//   <client>,<train|test|none>,<label>,<x_0>,...,<x_{d-1}>
void write_clients(std::ostream& os, const std::vector<ClientDataset>& clients);
std::vector<ClientDataset> read_clients(std::istream& is);

}  // namespace fednpr
