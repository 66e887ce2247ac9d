#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fednpr/data.hpp"
#include "fednpr/federation.hpp"

namespace fednpr {

/// A named training arm. Beyond the five base algorithms:
///   fedprox_npr       FedNPR with the FedProx proximal term
///   fednpr_nosup      FedNPR trained on the NPR loss alone
///   fednpr_per_nosup  FedNPR-Per trained on the NPR loss alone
struct Arm {
  std::string name;
  Algorithm algorithm = Algorithm::fednpr;
  bool proximal_with_npr = false;
  bool global_supervision = true;
};

Arm parse_arm(const std::string& name);
bool arm_uses_npr(const Arm& arm);

struct ExperimentSpec {
  FederationConfig federation;
  SyntheticDataConfig data;
  PartitionConfig partition;
  double train_fraction = 0.8;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output = "results";
  std::vector<std::string> algorithms{"fednpr"};
  std::vector<int> ks{4};
  std::vector<double> lambdas{0.1};
  std::string preset;
};

/// Command-line values; each one set here wins over the config file.
struct ConfigOverrides {
  std::optional<std::string> preset;
  std::optional<std::vector<std::string>> algorithms;
  std::optional<int> clients;
  std::optional<int> rounds;
  std::optional<std::vector<int>> ks;
  std::optional<std::vector<double>> lambdas;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<std::filesystem::path> output;
};

/// Built-in presets: "isic-like" (the default) and "ich-like".
void apply_preset(ExperimentSpec& spec, const std::string& name);

/// Resolves preset, then JSON config keys, then overrides. An empty text is
/// an empty config. Unknown keys and out-of-range values raise config errors
/// naming the key.
ExperimentSpec parse_config(const std::string& json_text, const ConfigOverrides& overrides = {});
ExperimentSpec parse_config_file(const std::filesystem::path& path, const ConfigOverrides& overrides = {});

void validate(const ExperimentSpec& spec);

struct SweepPoint {
  std::string algorithm;
  int k = 0;
  double lambda = 0.0;
};

/// Cartesian product of algorithms x K x lambda; arms without NPR ignore K
/// and lambda and appear once, with lambda reported as 0.
std::vector<SweepPoint> sweep_points(const ExperimentSpec& spec);

/// Client datasets for one seed (generation, partition, stratified split).
std::vector<ClientDataset> build_clients(const ExperimentSpec& spec, std::uint64_t seed);

/// Federation config for one sweep point and seed.
FederationConfig point_config(const ExperimentSpec& spec, const SweepPoint& point, std::uint64_t seed);

struct ResultRow {
  std::string algorithm;
  int k = 0;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  EvalRecord record;
};

struct PointSummary {
  SweepPoint point;
  std::vector<double> seed_bacc;  // final-round federated means, one per seed
  std::vector<double> seed_bauc;
  double mean_bacc = 0.0;
  double std_bacc = 0.0;
  double mean_bauc = 0.0;
  double std_bauc = 0.0;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::vector<PointSummary> summary;
};

/// Final-round federated averages of a single run's history.
FederatedMean final_test_mean(const ServerState& server);

/// Runs every (sweep point, seed) job. Jobs run on FEDNPR_WORKERS threads
/// (default 1); results are ordered by point then seed regardless. When
/// `write_outputs` is set, results go to spec.output; a failing job still
/// flushes the completed jobs before the error propagates.
ExperimentResult run_experiment(const ExperimentSpec& spec, bool write_outputs = true);

/// Population mean and standard deviation.
std::pair<double, double> mean_std(const std::vector<double>& values);

inline constexpr const char* kRoundsHeader = "round,client,split,algorithm,K,lambda,seed,bacc,bauc,loss_sup,loss_npr";

void write_rounds_csv(std::ostream& os, const std::vector<ResultRow>& rows);
void write_summary(std::ostream& os, const std::vector<PointSummary>& summary);

/// Writes rounds.csv and summary.txt under `dir`.
void emit_results(const ExperimentResult& result, const std::filesystem::path& dir);

struct VerifyReport {
  bool ok = true;
  std::size_t points = 0;
  std::vector<std::string> problems;
};

/// Recomputes every summary statistic from rounds.csv.
VerifyReport verify_results(const std::filesystem::path& dir);

/// Environment variable holding the worker count.
inline constexpr const char* kWorkersEnv = "FEDNPR_WORKERS";

}  // namespace fednpr
