#include "fednpr/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

namespace fednpr {

std::vector<Index> default_samples_per_class(Index n_classes) {
  std::vector<Index> out;
  double v = 1000.0;
  for (Index c = 0; c < n_classes; ++c, v *= 0.4) out.push_back(static_cast<Index>(std::floor(v)));
  return out;
}

void validate(const SyntheticDataConfig& config) {
  if (config.n_classes < 1) throw Error(ErrorKind::config, "n_classes must be >= 1");
  if (config.input_dim < 2) throw Error(ErrorKind::config, "input_dim must be >= 2");
  if (!config.samples_per_class.empty() && static_cast<Index>(config.samples_per_class.size()) != config.n_classes)
    throw Error(ErrorKind::config, "samples_per_class length must equal n_classes");
  for (Index s : config.samples_per_class)
    if (s < 0) throw Error(ErrorKind::config, "samples_per_class entries must be >= 0");
  if (config.noise_scale < 0.0 || config.mode_spread < 0.0)
    throw Error(ErrorKind::config, "noise_scale and mode_spread must be >= 0");
  if (config.modes_per_class < 1) throw Error(ErrorKind::config, "modes_per_class must be >= 1");
}

LabeledData generate_synthetic(const SyntheticDataConfig& config) {
  validate(config);
  const auto counts =
      config.samples_per_class.empty() ? default_samples_per_class(config.n_classes) : config.samples_per_class;
  Index total = 0;
  for (Index c : counts) total += c;

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto unit_direction = [&]() {
    Vector v(config.input_dim);
    do {
      for (Index e = 0; e < v.size(); ++e) v(e) = normal(rng);
    } while (v.norm() < 1e-12);
    return Vector(v / v.norm());
  };

  LabeledData out;
  out.n_classes = config.n_classes;
  out.features = Matrix(total, config.input_dim);
  out.labels.reserve(static_cast<std::size_t>(total));
  Index row = 0;
  for (Index c = 0; c < config.n_classes; ++c) {
    const Vector mean = config.class_mean_separation * unit_direction();
    std::vector<Vector> modes;
    for (Index m = 0; m < config.modes_per_class; ++m)
      modes.push_back(config.modes_per_class == 1 ? mean : Vector(mean + config.mode_spread * unit_direction()));
    for (Index s = 0; s < counts[static_cast<std::size_t>(c)]; ++s, ++row) {
      const Vector& centre = modes[static_cast<std::size_t>(s % config.modes_per_class)];
      for (Index e = 0; e < config.input_dim; ++e) out.features(row, e) = centre(e) + config.noise_scale * normal(rng);
      out.labels.push_back(static_cast<int>(c));
    }
  }
  return out;
}

const char* to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::all: return "all";
  }
  return "unknown";
}

Matrix ClientDataset::rows(const std::vector<Index>& idx) const {
  Matrix out(static_cast<Index>(idx.size()), features.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = features.row(idx[i]);
  return out;
}

Labels ClientDataset::labels_at(const std::vector<Index>& idx) const {
  Labels out;
  out.reserve(idx.size());
  for (Index i : idx) out.push_back(labels[static_cast<std::size_t>(i)]);
  return out;
}

const std::vector<Index>& ClientDataset::indices(Split split) const {
  if (split == Split::train) return train_idx;
  if (split == Split::test) return test_idx;
  throw Error(ErrorKind::split, "indices() needs train or test");
}

std::vector<ClientDataset> dirichlet_partition(const LabeledData& data, const PartitionConfig& config) {
  const Index N = config.n_clients;
  const Index C = data.n_classes;
  if (data.features.rows() == 0) throw Error(ErrorKind::partition, "empty dataset");
  if (N < 1) throw Error(ErrorKind::config, "n_clients must be >= 1");
  if (!(config.missing_class_prob >= 0.0 && config.missing_class_prob < 1.0))
    throw Error(ErrorKind::config, "missing_class_prob must lie in [0, 1)");
  std::vector<double> alpha = config.dirichlet_alpha_per_class;
  if (alpha.empty()) alpha.assign(static_cast<std::size_t>(C), 1.0);
  if (static_cast<Index>(alpha.size()) != C)
    throw Error(ErrorKind::config, "dirichlet_alpha_per_class length must equal n_classes");
  for (double a : alpha)
    if (!(a > 0.0)) throw Error(ErrorKind::config, "dirichlet alpha must be > 0");

  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(C));
  for (std::size_t i = 0; i < data.labels.size(); ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(static_cast<Index>(i));

  std::mt19937_64 rng(config.seed);
  std::bernoulli_distribution drop(config.missing_class_prob);

  for (int attempt = 0; attempt < 100; ++attempt) {
    // shares(c, i), mask(c, i)
    Matrix shares(C, N);
    for (Index c = 0; c < C; ++c) {
      std::gamma_distribution<double> gamma(alpha[static_cast<std::size_t>(c)], 1.0);
      for (Index i = 0; i < N; ++i) shares(c, i) = gamma(rng);
    }
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> keep(C, N);
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < N; ++i) keep(c, i) = !drop(rng);

    bool valid = true;
    for (Index c = 0; c < C && valid; ++c)
      if (!by_class[static_cast<std::size_t>(c)].empty() && !keep.row(c).any()) valid = false;
    if (!valid) continue;

    std::vector<std::vector<Index>> assigned(static_cast<std::size_t>(N));
    for (Index c = 0; c < C; ++c) {
      auto rows = by_class[static_cast<std::size_t>(c)];
      if (rows.empty()) continue;
      Vector p = Vector::Zero(N);
      for (Index i = 0; i < N; ++i)
        if (keep(c, i)) p(i) = shares(c, i);
      if (!(p.sum() > 0.0))
        for (Index i = 0; i < N; ++i) p(i) = keep(c, i) ? 1.0 : 0.0;
      p /= p.sum();
      std::shuffle(rows.begin(), rows.end(), rng);
      // A kept cell should not come out empty by sampling chance alone, so
      // every holder gets one sample up front when the class has enough.
      std::size_t at = 0;
      const auto holders = static_cast<std::size_t>(keep.row(c).count());
      if (rows.size() >= holders)
        for (Index i = 0; i < N; ++i)
          if (keep(c, i)) assigned[static_cast<std::size_t>(i)].push_back(rows[at++]);
      // Sequential binomials give the multinomial counts.
      double remaining_p = 1.0;
      for (Index i = 0; i < N; ++i) {
        const std::size_t left = rows.size() - at;
        std::size_t take = left;
        if (i + 1 < N && remaining_p > 0.0) {
          const double q = std::clamp(p(i) / remaining_p, 0.0, 1.0);
          std::binomial_distribution<long long> binom(static_cast<long long>(left), q);
          take = static_cast<std::size_t>(binom(rng));
        }
        if (!keep(c, i)) take = 0;
        for (std::size_t t = 0; t < take; ++t) assigned[static_cast<std::size_t>(i)].push_back(rows[at + t]);
        at += take;
        remaining_p -= p(i);
      }
      // Rounding residue in remaining_p can leave samples; give them to the last keeper.
      if (at < rows.size()) {
        Index last = N - 1;
        while (!keep(c, last)) --last;
        for (; at < rows.size(); ++at) assigned[static_cast<std::size_t>(last)].push_back(rows[at]);
      }
    }

    bool nonempty = true;
    for (const auto& a : assigned) nonempty = nonempty && !a.empty();
    if (!nonempty) continue;

    std::vector<ClientDataset> clients(static_cast<std::size_t>(N));
    for (Index i = 0; i < N; ++i) {
      auto& rows = assigned[static_cast<std::size_t>(i)];
      std::sort(rows.begin(), rows.end());
      auto& cd = clients[static_cast<std::size_t>(i)];
      cd.client_id = static_cast<int>(i);
      cd.n_classes = C;
      cd.features = Matrix(static_cast<Index>(rows.size()), data.features.cols());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        cd.features.row(static_cast<Index>(r)) = data.features.row(rows[r]);
        cd.labels.push_back(data.labels[static_cast<std::size_t>(rows[r])]);
      }
    }
    return clients;
  }
  throw Error(ErrorKind::partition, "no valid partition after 100 attempts");
}

ClientDataset stratified_split(ClientDataset client, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw Error(ErrorKind::config, "train_fraction must lie in (0, 1)");
  if (client.size() == 0) throw Error(ErrorKind::split, "client " + std::to_string(client.client_id) + " is empty");
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(client.n_classes));
  for (std::size_t i = 0; i < client.labels.size(); ++i)
    by_class[static_cast<std::size_t>(client.labels[i])].push_back(static_cast<Index>(i));

  std::mt19937_64 rng(seed);
  client.train_idx.clear();
  client.test_idx.clear();
  for (auto& rows : by_class) {
    const auto n = static_cast<Index>(rows.size());
    if (n == 0) continue;
    std::shuffle(rows.begin(), rows.end(), rng);
    Index n_train = static_cast<Index>(std::floor(static_cast<double>(n) * train_fraction));
    if (n >= 2) n_train = std::clamp<Index>(n_train, 1, n - 1);
    else n_train = n;
    client.train_idx.insert(client.train_idx.end(), rows.begin(), rows.begin() + n_train);
    client.test_idx.insert(client.test_idx.end(), rows.begin() + n_train, rows.end());
  }
  std::sort(client.train_idx.begin(), client.train_idx.end());
  std::sort(client.test_idx.begin(), client.test_idx.end());
  return client;
}

std::vector<Index> class_counts(const ClientDataset& client, Split split) {
  std::vector<Index> counts(static_cast<std::size_t>(client.n_classes), 0);
  auto add = [&](Index i) { ++counts[static_cast<std::size_t>(client.labels[static_cast<std::size_t>(i)])]; };
  if (split == Split::all) {
    for (Index i = 0; i < client.size(); ++i) add(i);
  } else {
    for (Index i : client.indices(split)) add(i);
  }
  return counts;
}

void write_clients(std::ostream& os, const std::vector<ClientDataset>& clients) {
  const Index dims = clients.empty() ? 0 : clients.front().features.cols();
  const Index C = clients.empty() ? 0 : clients.front().n_classes;
  os << "FEDNPR-DATA-v1 dims=" << dims << " classes=" << C << " clients=" << clients.size() << '\n';
  char buf[32];
  for (const auto& cd : clients) {
    std::vector<const char*> split(static_cast<std::size_t>(cd.size()), "none");
    for (Index i : cd.train_idx) split[static_cast<std::size_t>(i)] = "train";
    for (Index i : cd.test_idx) split[static_cast<std::size_t>(i)] = "test";
    for (Index i = 0; i < cd.size(); ++i) {
      os << cd.client_id << ',' << split[static_cast<std::size_t>(i)] << ',' << cd.labels[static_cast<std::size_t>(i)];
      for (Index e = 0; e < cd.features.cols(); ++e) {
        std::snprintf(buf, sizeof buf, "%.17g", cd.features(i, e));
        os << ',' << buf;
      }
      os << '\n';
    }
  }
}

std::vector<ClientDataset> read_clients(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error(ErrorKind::io, "missing dataset header");
  long long dims = -1, C = -1, N = -1;
  if (std::sscanf(line.c_str(), "FEDNPR-DATA-v1 dims=%lld classes=%lld clients=%lld", &dims, &C, &N) != 3 ||
      dims < 0 || C < 0 || N < 0)
    throw Error(ErrorKind::io, "bad dataset header: " + line);

  std::vector<ClientDataset> clients(static_cast<std::size_t>(N));
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(N));
  for (std::size_t i = 0; i < clients.size(); ++i) {
    clients[i].client_id = static_cast<int>(i);
    clients[i].n_classes = C;
  }
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (static_cast<long long>(fields.size()) != 3 + dims)
      throw Error(ErrorKind::io, "line " + std::to_string(line_no) + ": expected " + std::to_string(3 + dims) + " fields");
    try {
      const int id = std::stoi(fields[0]);
      const int label = std::stoi(fields[2]);
      if (id < 0 || id >= N || label < 0 || label >= C) throw Error(ErrorKind::io, "value out of range");
      auto& cd = clients[static_cast<std::size_t>(id)];
      const auto idx = static_cast<Index>(cd.labels.size());
      cd.labels.push_back(label);
      if (fields[1] == "train") cd.train_idx.push_back(idx);
      else if (fields[1] == "test") cd.test_idx.push_back(idx);
      else if (fields[1] != "none") throw Error(ErrorKind::io, "unknown split '" + fields[1] + "'");
      for (long long e = 0; e < dims; ++e) rows[static_cast<std::size_t>(id)].push_back(std::stod(fields[3 + e]));
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::io, "line " + std::to_string(line_no) + ": malformed number");
    }
  }
  for (std::size_t i = 0; i < clients.size(); ++i) {
    const auto n = static_cast<Index>(clients[i].labels.size());
    clients[i].features = Eigen::Map<const Matrix>(rows[i].data(), n, dims);
  }
  return clients;
}

}  // namespace fednpr
