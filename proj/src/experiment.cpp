#include "fednpr/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace fednpr {

using json = nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ULL + stream;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

[[noreturn]] void config_error(const std::string& key, const std::string& what) {
  throw Error(ErrorKind::config, key + ": " + what);
}

std::string fmt6(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  // Avoid "-0.000000" so equal values always print equal.
  if (std::string(buf) == "-0.000000") return "0.000000";
  return buf;
}

template <typename T>
std::vector<T> scalar_or_list(const json& v) {
  if (v.is_array()) return v.get<std::vector<T>>();
  return {v.get<T>()};
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "preset",        "algorithms",        "k",
      "lambda",        "seeds",             "out",
      "clients",       "rounds",            "lr",
      "weight_decay",  "batch_size",        "local_epochs",
      "fedprox_mu",    "epsilon",           "sinkhorn_max_iters",
      "sinkhorn_tol",  "harden_assignments", "hidden_dims",
      "feature_dim",   "prior_smoothing",   "classes",
      "input_dim",     "samples_per_class", "separation",
      "noise",         "modes_per_class",   "mode_spread",
      "dirichlet_alpha", "missing_class_prob", "train_fraction"};
  return keys;
}

void apply_json(ExperimentSpec& spec, const json& cfg) {
  if (!cfg.is_object()) config_error("<root>", "config must be a JSON object");
  for (const auto& [key, value] : cfg.items()) {
    if (!known_keys().count(key)) config_error(key, "unknown key");
    try {
      auto& f = spec.federation;
      auto& d = spec.data;
      auto& p = spec.partition;
      if (key == "preset") continue;
      else if (key == "algorithms") spec.algorithms = scalar_or_list<std::string>(value);
      else if (key == "k") spec.ks = scalar_or_list<int>(value);
      else if (key == "lambda") spec.lambdas = scalar_or_list<double>(value);
      else if (key == "seeds") spec.seeds = scalar_or_list<std::uint64_t>(value);
      else if (key == "out") spec.output = value.get<std::string>();
      else if (key == "clients") f.n_clients = value.get<int>();
      else if (key == "rounds") f.rounds = value.get<int>();
      else if (key == "lr") f.base_lr = value.get<double>();
      else if (key == "weight_decay") f.weight_decay = value.get<double>();
      else if (key == "batch_size") f.batch_size = value.get<int>();
      else if (key == "local_epochs") f.local_epochs = value.get<int>();
      else if (key == "fedprox_mu") f.fedprox_mu = value.get<double>();
      else if (key == "epsilon") f.sinkhorn.epsilon = value.get<double>();
      else if (key == "sinkhorn_max_iters") f.sinkhorn.max_iters = value.get<int>();
      else if (key == "sinkhorn_tol") f.sinkhorn.marginal_tol = value.get<double>();
      else if (key == "harden_assignments") f.sinkhorn.harden = value.get<bool>();
      else if (key == "hidden_dims") f.hidden_dims = value.get<std::vector<Index>>();
      else if (key == "feature_dim") f.feature_dim = value.get<Index>();
      else if (key == "prior_smoothing") f.prior_smoothing = value.get<double>();
      else if (key == "classes") {
        d.n_classes = value.get<Index>();
        if (!cfg.contains("samples_per_class")) d.samples_per_class = default_samples_per_class(d.n_classes);
        if (!cfg.contains("dirichlet_alpha")) p.dirichlet_alpha_per_class.clear();
      } else if (key == "input_dim") d.input_dim = value.get<Index>();
      else if (key == "samples_per_class") d.samples_per_class = value.get<std::vector<Index>>();
      else if (key == "separation") d.class_mean_separation = value.get<double>();
      else if (key == "noise") d.noise_scale = value.get<double>();
      else if (key == "modes_per_class") d.modes_per_class = value.get<Index>();
      else if (key == "mode_spread") d.mode_spread = value.get<double>();
      else if (key == "dirichlet_alpha") p.dirichlet_alpha_per_class = value.get<std::vector<double>>();
      else if (key == "missing_class_prob") p.missing_class_prob = value.get<double>();
      else if (key == "train_fraction") spec.train_fraction = value.get<double>();
    } catch (const json::exception& e) {
      config_error(key, std::string("bad value: ") + e.what());
    }
  }
}

void apply_overrides(ExperimentSpec& spec, const ConfigOverrides& o) {
  if (o.algorithms) spec.algorithms = *o.algorithms;
  if (o.clients) spec.federation.n_clients = *o.clients;
  if (o.rounds) spec.federation.rounds = *o.rounds;
  if (o.ks) spec.ks = *o.ks;
  if (o.lambdas) spec.lambdas = *o.lambdas;
  if (o.seeds) spec.seeds = *o.seeds;
  if (o.output) spec.output = *o.output;
}

std::string point_context(const SweepPoint& p, std::uint64_t seed) {
  return "algorithm=" + p.algorithm + " K=" + std::to_string(p.k) + " lambda=" + fmt6(p.lambda) +
         " seed=" + std::to_string(seed);
}

unsigned worker_count() {
  if (const char* env = std::getenv(kWorkersEnv)) {
    const int n = std::atoi(env);
    if (n >= 1) return static_cast<unsigned>(n);
  }
  return 1;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

}  // namespace

Arm parse_arm(const std::string& name) {
  if (name == "fedprox_npr") return {name, Algorithm::fednpr, true, true};
  if (name == "fednpr_nosup") return {name, Algorithm::fednpr, false, false};
  if (name == "fednpr_per_nosup") return {name, Algorithm::fednpr_per, false, false};
  return {name, parse_algorithm(name), false, true};
}

bool arm_uses_npr(const Arm& arm) {
  return arm.algorithm == Algorithm::fednpr || arm.algorithm == Algorithm::fednpr_per;
}

void apply_preset(ExperimentSpec& spec, const std::string& name) {
  const std::string bare = name.rfind("preset:", 0) == 0 ? name.substr(7) : name;
  auto& f = spec.federation;
  auto& d = spec.data;
  auto& p = spec.partition;
  if (bare == "isic-like") {
    // Global class totals of the six dermoscopy sources, scaled to ~3k.
    f.n_clients = 6;
    spec.ks = {4};
    spec.lambdas = {0.1};
    d.n_classes = 8;
    d.samples_per_class = {544, 1473, 432, 113, 315, 31, 31, 60};
    d.noise_scale = 0.8;  // FedAvg near 70% bACC
    p.dirichlet_alpha_per_class.assign(8, 1.0);
    p.missing_class_prob = 0.3;
  } else if (bare == "ich-like") {
    // Hemorrhage subtypes (epidural, intraparenchymal, intraventricular,
    // subarachnoid, subdural) scaled to ~3k, with per-class Dirichlet alpha.
    // Noise puts FedAvg near 60% bACC; lambda from a K x lambda grid search
    // on tuning seeds 100-104.
    f.n_clients = 10;
    spec.ks = {2};
    spec.lambdas = {1.0};
    d.n_classes = 5;
    d.samples_per_class = {66, 615, 393, 650, 1276};
    d.noise_scale = 1.4;
    p.dirichlet_alpha_per_class = {0.5, 5.0, 10.0, 30.0, 50.0};
    p.missing_class_prob = 0.3;
  } else {
    config_error("preset", "unknown preset '" + name + "'");
  }
  spec.preset = bare;
  p.n_clients = f.n_clients;
}

void validate(const ExperimentSpec& spec) {
  if (spec.seeds.empty()) config_error("seeds", "seed list must be non-empty");
  if (spec.algorithms.empty()) config_error("algorithms", "algorithm list must be non-empty");
  if (spec.ks.empty()) config_error("k", "K list must be non-empty");
  if (spec.lambdas.empty()) config_error("lambda", "lambda list must be non-empty");
  for (int k : spec.ks)
    if (k < 1) config_error("k", "K must be >= 1");
  for (double l : spec.lambdas)
    if (!(l >= 0.0)) config_error("lambda", "lambda must be >= 0");
  for (const auto& a : spec.algorithms) {
    try {
      parse_arm(a);
    } catch (const Error& e) {
      config_error("algorithms", e.what());
    }
  }
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) config_error("train_fraction", "must lie in (0, 1)");
  if (spec.partition.n_clients != spec.federation.n_clients)
    config_error("clients", "partition and federation client counts differ");
  try {
    validate(spec.federation);
    validate(spec.data);
  } catch (const Error& e) {
    throw Error(ErrorKind::config, std::string(e.what()));
  }
  if (!spec.partition.dirichlet_alpha_per_class.empty() &&
      static_cast<Index>(spec.partition.dirichlet_alpha_per_class.size()) != spec.data.n_classes)
    config_error("dirichlet_alpha", "length must equal the class count");
  for (double a : spec.partition.dirichlet_alpha_per_class)
    if (!(a > 0.0)) config_error("dirichlet_alpha", "entries must be > 0");
  if (!(spec.partition.missing_class_prob >= 0.0 && spec.partition.missing_class_prob < 1.0))
    config_error("missing_class_prob", "must lie in [0, 1)");
}

ExperimentSpec parse_config(const std::string& json_text, const ConfigOverrides& overrides) {
  json cfg = json::object();
  if (json_text.find_first_not_of(" \t\r\n") != std::string::npos) {
    try {
      cfg = json::parse(json_text);
    } catch (const json::parse_error& e) {
      config_error("<file>", std::string("malformed JSON: ") + e.what());
    }
  }
  if (!cfg.is_object()) config_error("<root>", "config must be a JSON object");

  ExperimentSpec spec;
  std::string preset = "isic-like";
  if (cfg.contains("preset")) {
    if (!cfg["preset"].is_string()) config_error("preset", "must be a string");
    preset = cfg["preset"].get<std::string>();
  }
  if (overrides.preset) preset = *overrides.preset;
  apply_preset(spec, preset);
  apply_json(spec, cfg);
  apply_overrides(spec, overrides);
  spec.partition.n_clients = spec.federation.n_clients;
  validate(spec);
  return spec;
}

ExperimentSpec parse_config_file(const std::filesystem::path& path, const ConfigOverrides& overrides) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::config, "cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

std::vector<SweepPoint> sweep_points(const ExperimentSpec& spec) {
  std::vector<SweepPoint> out;
  for (const auto& name : spec.algorithms) {
    const Arm arm = parse_arm(name);
    if (!arm_uses_npr(arm)) {
      out.push_back({name, spec.ks.front(), 0.0});
      continue;
    }
    for (int k : spec.ks)
      for (double l : spec.lambdas) out.push_back({name, k, l});
  }
  return out;
}

std::vector<ClientDataset> build_clients(const ExperimentSpec& spec, std::uint64_t seed) {
  SyntheticDataConfig data = spec.data;
  data.seed = mix(seed, 11);
  PartitionConfig part = spec.partition;
  part.seed = mix(seed, 12);
  auto clients = dirichlet_partition(generate_synthetic(data), part);
  for (auto& c : clients)
    c = stratified_split(std::move(c), spec.train_fraction, mix(seed, 13 + static_cast<std::uint64_t>(c.client_id)));
  return clients;
}

FederationConfig point_config(const ExperimentSpec& spec, const SweepPoint& point, std::uint64_t seed) {
  const Arm arm = parse_arm(point.algorithm);
  FederationConfig cfg = spec.federation;
  cfg.algorithm = arm.algorithm;
  cfg.proximal_with_npr = arm.proximal_with_npr;
  cfg.global_supervision = arm.global_supervision;
  cfg.sub_clusters = point.k;
  cfg.npr_weight = arm_uses_npr(arm) ? point.lambda : 0.0;
  cfg.seed = seed;
  return cfg;
}

FederatedMean final_test_mean(const ServerState& server) {
  std::vector<EvalRecord> last;
  for (const auto& r : server.history)
    if (r.round == server.round && r.split == Split::test) last.push_back(r);
  return federated_average(last);
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
  if (values.empty()) return {std::nan(""), std::nan("")};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return {mean, std::sqrt(var)};
}

ExperimentResult run_experiment(const ExperimentSpec& spec, bool write_outputs) {
  validate(spec);
  const auto points = sweep_points(spec);
  const std::size_t n_seeds = spec.seeds.size();
  const std::size_t n_jobs = points.size() * n_seeds;

  struct JobOutput {
    bool done = false;
    ServerState server;
    std::exception_ptr error;
  };
  std::vector<JobOutput> jobs(n_jobs);
  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (std::size_t j = next++; j < n_jobs; j = next++) {
      const auto& point = points[j / n_seeds];
      const auto seed = spec.seeds[j % n_seeds];
      try {
        jobs[j].server = run_federation(point_config(spec, point, seed), build_clients(spec, seed));
        jobs[j].done = true;
      } catch (...) {
        jobs[j].error = std::current_exception();
      }
    }
  };
  const unsigned workers = std::min<unsigned>(worker_count(), static_cast<unsigned>(std::max<std::size_t>(n_jobs, 1)));
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }

  ExperimentResult result;
  std::size_t failed = n_jobs;
  for (std::size_t p = 0; p < points.size(); ++p) {
    PointSummary summary;
    summary.point = points[p];
    for (std::size_t s = 0; s < n_seeds; ++s) {
      const std::size_t j = p * n_seeds + s;
      if (!jobs[j].done) {
        if (failed == n_jobs) failed = j;
        continue;
      }
      for (const auto& rec : jobs[j].server.history)
        result.rows.push_back({points[p].algorithm, points[p].k, points[p].lambda, spec.seeds[s], rec});
      const auto fm = final_test_mean(jobs[j].server);
      summary.seed_bacc.push_back(fm.bacc);
      summary.seed_bauc.push_back(fm.bauc);
    }
    std::tie(summary.mean_bacc, summary.std_bacc) = mean_std(summary.seed_bacc);
    std::tie(summary.mean_bauc, summary.std_bauc) = mean_std(summary.seed_bauc);
    if (!summary.seed_bacc.empty()) result.summary.push_back(std::move(summary));
  }

  if (write_outputs) emit_results(result, spec.output);
  if (failed != n_jobs) {
    const auto& point = points[failed / n_seeds];
    const auto seed = spec.seeds[failed % n_seeds];
    try {
      std::rethrow_exception(jobs[failed].error);
    } catch (const Error& e) {
      throw Error(e.kind(), point_context(point, seed) + ": " + e.what());
    } catch (const std::exception& e) {
      throw Error(ErrorKind::numeric, point_context(point, seed) + ": " + e.what());
    }
  }
  return result;
}

void write_rounds_csv(std::ostream& os, const std::vector<ResultRow>& rows) {
  os << kRoundsHeader << '\n';
  for (const auto& r : rows) {
    const auto& e = r.record;
    os << e.round << ',' << e.client << ',' << to_string(e.split) << ',' << r.algorithm << ',' << r.k << ','
       << fmt6(r.lambda) << ',' << r.seed << ',' << fmt6(e.bacc) << ',' << fmt6(e.bauc) << ',' << fmt6(e.loss_sup)
       << ',' << fmt6(e.loss_npr) << '\n';
  }
}

void write_summary(std::ostream& os, const std::vector<PointSummary>& summary) {
  for (const auto& s : summary) {
    os << "algorithm=" << s.point.algorithm << " K=" << s.point.k << " lambda=" << fmt6(s.point.lambda)
       << " seeds=" << s.seed_bacc.size() << " mean_bacc=" << fmt6(s.mean_bacc) << " std_bacc=" << fmt6(s.std_bacc)
       << " mean_bauc=" << fmt6(s.mean_bauc) << " std_bauc=" << fmt6(s.std_bauc) << '\n';
  }
}

void emit_results(const ExperimentResult& result, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
  auto open = [](const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
    return out;
  };
  {
    auto out = open(dir / "rounds.csv");
    write_rounds_csv(out, result.rows);
    if (!out) throw Error(ErrorKind::io, "write failed for rounds.csv");
  }
  {
    auto out = open(dir / "summary.txt");
    write_summary(out, result.summary);
    if (!out) throw Error(ErrorKind::io, "write failed for summary.txt");
  }
}

VerifyReport verify_results(const std::filesystem::path& dir) {
  VerifyReport report;
  std::ifstream rounds(dir / "rounds.csv");
  std::ifstream summary(dir / "summary.txt");
  if (!rounds || !summary) throw Error(ErrorKind::io, "missing rounds.csv or summary.txt in " + dir.string());

  std::string line;
  if (!std::getline(rounds, line) || line != kRoundsHeader) throw Error(ErrorKind::io, "rounds.csv header mismatch");

  // key -> seed -> (final round, per-client bacc, bauc)
  struct SeedFinal {
    int round = -1;
    std::vector<double> bacc, bauc;
  };
  std::map<std::string, std::map<std::string, SeedFinal>> finals;
  std::size_t line_no = 1;
  while (std::getline(rounds, line)) {
    ++line_no;
    const auto f = split_csv(line);
    if (f.size() != 11) throw Error(ErrorKind::io, "rounds.csv line " + std::to_string(line_no) + ": expected 11 fields");
    if (f[2] != "test") continue;
    const std::string key = "algorithm=" + f[3] + " K=" + f[4] + " lambda=" + f[5];
    auto& sf = finals[key][f[6]];
    const int round = std::stoi(f[0]);
    if (round > sf.round) {
      sf = SeedFinal{};
      sf.round = round;
    }
    if (round == sf.round) {
      sf.bacc.push_back(std::stod(f[7]));
      sf.bauc.push_back(std::stod(f[8]));
    }
  }

  constexpr double kTol = 2e-6;
  while (std::getline(summary, line)) {
    if (line.empty()) continue;
    std::map<std::string, std::string> kv;
    std::stringstream ss(line);
    std::string tok;
    while (ss >> tok) {
      const auto eq = tok.find('=');
      if (eq != std::string::npos) kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    const std::string key = "algorithm=" + kv["algorithm"] + " K=" + kv["K"] + " lambda=" + kv["lambda"];
    ++report.points;
    auto it = finals.find(key);
    if (it == finals.end()) {
      report.problems.push_back(key + ": no rows in rounds.csv");
      continue;
    }
    std::vector<double> seed_bacc, seed_bauc;
    for (const auto& [seed, sf] : it->second) {
      EvalRecord dummy;
      std::vector<EvalRecord> recs;
      for (std::size_t i = 0; i < sf.bacc.size(); ++i) {
        dummy.bacc = sf.bacc[i];
        dummy.bauc = sf.bauc[i];
        recs.push_back(dummy);
      }
      const auto fm = federated_average(recs);
      seed_bacc.push_back(fm.bacc);
      seed_bauc.push_back(fm.bauc);
    }
    const auto [mb, sb] = mean_std(seed_bacc);
    const auto [ma, sa] = mean_std(seed_bauc);
    auto check = [&](const char* name, double expected) {
      const std::string& text = kv[name];
      const double got = text == "nan" ? std::nan("") : std::stod(text.empty() ? "nan" : text);
      const bool both_nan = std::isnan(got) && std::isnan(expected);
      if (!both_nan && !(std::abs(got - expected) <= kTol))
        report.problems.push_back(key + ": " + name + " is " + text + ", rows give " + fmt6(expected));
    };
    if (kv["seeds"] != std::to_string(seed_bacc.size()))
      report.problems.push_back(key + ": seeds is " + kv["seeds"] + ", rows hold " + std::to_string(seed_bacc.size()));
    check("mean_bacc", mb);
    check("std_bacc", sb);
    check("mean_bauc", ma);
    check("std_bauc", sa);
  }
  if (report.points != finals.size())
    report.problems.push_back("summary lists " + std::to_string(report.points) + " points, rows hold " +
                              std::to_string(finals.size()));
  report.ok = report.problems.empty();
  return report;
}

}  // namespace fednpr
