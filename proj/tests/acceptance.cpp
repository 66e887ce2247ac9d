// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
// Criteria 7-9 train on the ich-like preset (40 rounds, seeds 0-4) and share
// a run cache, so the first criterion that needs an arm pays for it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "fednpr/experiment.hpp"
#include "fednpr/payload.hpp"

using namespace fednpr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, a, b, c, d);
  return buf;
}

Matrix gaussian(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Labels random_labels(Index n, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  Labels y(static_cast<std::size_t>(n));
  for (auto& v : y) v = u(rng);
  return y;
}

ClassPrior random_prior(int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, 50);
  std::vector<Index> counts(static_cast<std::size_t>(classes));
  for (auto& c : counts) c = u(rng);
  return compute_class_prior(counts, 1.0);
}

PrototypeBank random_bank(Index d, int classes, Index k, std::mt19937_64& rng) {
  PrototypeBank bank;
  bank.feature_dim = d;
  bank.classes.resize(static_cast<std::size_t>(classes));
  for (auto& c : bank.classes) {
    c.centers = gaussian(d, k, rng);
    for (Index j = 0; j < k; ++j) c.centers.col(j).normalize();
    c.mass = Vector::Ones(k);
  }
  return bank;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-4}); }

// Central differences of f over every entry of m against grad; entries whose
// stencil straddles a kink (argmax switch) are skipped.
void fd_check(Matrix& m, const Matrix& grad, const std::function<double()>& f, double& worst, int& entries) {
  const double base = f(), h = 1e-5;
  for (Index i = 0; i < m.size(); ++i) {
    const double keep = m.data()[i];
    m.data()[i] = keep + h;
    const double up = f();
    m.data()[i] = keep - h;
    const double down = f();
    m.data()[i] = keep;
    if (std::abs((up + down) / 2 - base) > 1e-8) continue;
    worst = std::max(worst, rel_err((up - down) / (2 * h), grad.data()[i]));
    ++entries;
  }
}

// 2x2 entropic OT with unit marginals, plan [[1-t, t], [t, 1-t]]: grid scan
// over t with successive refinement.
double best_t(const Matrix& S, double eps) {
  auto objective = [&](double t) {
    auto h = [](double q) { return q > 0 ? -q * std::log(q) : 0.0; };
    return ((1 - t) * (S(0, 0) + S(1, 1)) + t * (S(0, 1) + S(1, 0))) / eps + 2 * h(t) + 2 * h(1 - t);
  };
  double lo = 0.0, hi = 1.0;
  for (int pass = 0; pass < 6; ++pass) {
    const int steps = 1000;
    double best = lo, best_val = -1e300;
    for (int i = 0; i <= steps; ++i) {
      const double t = lo + (hi - lo) * i / steps;
      const double v = objective(t);
      if (v > best_val) best_val = v, best = t;
    }
    const double w = (hi - lo) / steps;
    lo = std::max(0.0, best - w);
    hi = std::min(1.0, best + w);
  }
  return 0.5 * (lo + hi);
}

Outcome sinkhorn_correctness() {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> n_dist(4, 128), k_dist(1, 8);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = n_dist(rng), k = k_dist(rng), d = 16;
    const Matrix Z = normalize_rows(gaussian(n, d, rng));
    const Matrix P = normalize_rows(gaussian(k, d, rng)).transpose();
    const auto r = sinkhorn_assign(Z, P, {});
    const Matrix& q = r.assignment.mass;
    worst = std::max(worst, (q.rowwise().sum().array() - 1.0).abs().maxCoeff());
    worst = std::max(worst, (q.colwise().sum().array() - double(n) / double(k)).abs().maxCoeff());
  }
  double worst_2x2 = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix Z = normalize_rows(gaussian(2, 3, rng));
    const Matrix P = normalize_rows(gaussian(2, 3, rng)).transpose();
    const auto r = sinkhorn_assign(Z, P, {});
    const double t = best_t(Z * P, 0.05);
    Matrix expect(2, 2);
    expect << 1 - t, t, t, 1 - t;
    worst_2x2 = std::max(worst_2x2, (r.assignment.mass - expect).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-6 && worst_2x2 <= 1e-3,
          fmt("200 problems, worst marginal error %.2e; 50 2x2 problems, worst plan error %.2e", worst, worst_2x2)};
}

Outcome gradient_suite() {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> size(2, 7);
  double w_bsm = 0, w_npr = 0, w_comb = 0, w_e2e = 0;
  int e_bsm = 0, e_npr = 0, e_comb = 0, e_e2e = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int C = size(rng);
    const Index n = size(rng), d = size(rng);
    const Labels y = random_labels(n, C, rng);
    const ClassPrior prior = random_prior(C, rng);
    const PrototypeBank bank = random_bank(d, C, 1 + trial % 4, rng);

    Matrix L = gaussian(n, C, rng, 3.0);
    const Matrix g_bsm = balanced_softmax_loss(L, y, prior).logit_grad;
    fd_check(L, g_bsm, [&] { return balanced_softmax_loss(L, y, prior).value; }, w_bsm, e_bsm);

    Matrix U = normalize_rows(gaussian(n, d, rng));
    const Matrix g_npr = npr_loss(U, y, bank).feature_grad;
    fd_check(U, g_npr, [&] { return npr_loss(U, y, bank).value; }, w_npr, e_npr);

    Matrix F = gaussian(n, d, rng, 3.0);
    const auto comb = combined_loss(L, F, y, prior, bank, 0.5);
    fd_check(F, comb.feature_grad, [&] { return combined_loss(L, F, y, prior, bank, 0.5).total; }, w_comb, e_comb);
    fd_check(L, comb.logit_grad, [&] { return combined_loss(L, F, y, prior, bank, 0.5).total; }, w_comb, e_comb);

    const std::vector<Index> dims{size(rng), size(rng), d};
    ModelParams p = init_model(dims, C, static_cast<std::uint64_t>(trial));
    for (auto& t : p.tensors()) t.values += Vector::Constant(t.values.size(), 0.05);
    const Matrix X = gaussian(n, dims.front(), rng);
    auto total = [&] {
      const Matrix Z = forward_features(p, X);
      return combined_loss(forward_logits(p, Z), Z, y, prior, bank, 0.5).total;
    };
    const Matrix Z = forward_features(p, X);
    const auto r = combined_loss(forward_logits(p, Z), Z, y, prior, bank, 0.5);
    const GradientSet g = backward(p, X, r.logit_grad, r.feature_grad);
    auto ps = p.tensors();
    const auto gs = g.tensors();
    for (std::size_t t = 0; t < ps.size(); ++t) {
      Matrix values = ps[t].values;
      Matrix grad = gs[t].values;
      fd_check(values, grad,
               [&] {
                 ps[t].values = values.reshaped();
                 return total();
               },
               w_e2e, e_e2e);
      ps[t].values = values.reshaped();
    }
  }
  const double worst = std::max({w_bsm, w_npr, w_comb, w_e2e});
  const bool enough = std::min({e_bsm, e_npr, e_comb, e_e2e}) >= 100;
  return {worst <= 1e-4 && enough,
          fmt("worst relative error bsm %.1e, npr %.1e, combined %.1e, end-to-end %.1e", w_bsm, w_npr, w_comb, w_e2e) +
              " over " + std::to_string(e_bsm + e_npr + e_comb + e_e2e) + " entries in 100 cases each"};
}

std::vector<ClientDataset> small_clients(int n_clients, std::uint64_t seed) {
  SyntheticDataConfig d;
  d.n_classes = 4;
  d.input_dim = 8;
  d.samples_per_class = {80, 60, 40, 20};
  d.seed = seed;
  PartitionConfig p;
  p.n_clients = n_clients;
  p.seed = seed + 1;
  auto clients = dirichlet_partition(generate_synthetic(d), p);
  for (auto& c : clients) c = stratified_split(std::move(c), 0.8, seed + 2);
  return clients;
}

bool same_history(const ServerState& a, const ServerState& b) {
  if (a.history.size() != b.history.size()) return false;
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    const auto& x = a.history[i];
    const auto& y = b.history[i];
    const bool auc = x.bauc == y.bauc || (std::isnan(x.bauc) && std::isnan(y.bauc));
    if (x.round != y.round || x.client != y.client || x.split != y.split || x.bacc != y.bacc || !auc ||
        x.loss_sup != y.loss_sup || x.per_class_acc.size() != y.per_class_acc.size())
      return false;
  }
  const auto p = a.global_model.tensors();
  const auto q = b.global_model.tensors();
  for (std::size_t t = 0; t < p.size(); ++t)
    if (p[t].values != q[t].values) return false;
  return true;
}

Outcome degeneracy() {
  const auto clients = small_clients(4, 3);
  FederationConfig base;
  base.n_clients = 4;
  base.rounds = 10;
  base.hidden_dims = {32};
  base.feature_dim = 8;
  base.batch_size = 16;
  base.seed = 3;
  base.algorithm = Algorithm::fedavg;
  const auto avg = run_federation(base, clients);
  auto npr = base;
  npr.algorithm = Algorithm::fednpr;
  npr.npr_weight = 0.0;
  auto prox = base;
  prox.algorithm = Algorithm::fedprox;
  prox.fedprox_mu = 0.0;
  const bool a = same_history(avg, run_federation(npr, clients));
  const bool b = same_history(avg, run_federation(prox, clients));
  return {a && b, std::string("fednpr(lambda=0) ") + (a ? "identical" : "differs") + ", fedprox(mu=0) " +
                      (b ? "identical" : "differs") + " over " + std::to_string(avg.history.size()) + " records"};
}

Outcome aggregation_algebra() {
  const std::vector<std::size_t> counts{1807, 9930, 655, 2691, 351, 3163};
  const auto w = compute_client_weights(counts);
  const double wsum = std::accumulate(w.begin(), w.end(), 0.0);

  std::mt19937_64 rng(4);
  const std::vector<Index> dims{6, 10, 5};
  const ModelParams start = init_model(dims, 3, 4);
  auto delta = [&](std::size_t n) {
    ModelDelta d{zeros_like<ParamTensors>(start), n};
    for (auto& t : d.values.tensors()) t.values = gaussian(t.values.size(), 1, rng).reshaped();
    return d;
  };
  std::vector<ModelDelta> deltas;
  for (std::size_t n : counts) deltas.push_back(delta(n));

  ServerState full{start, 0, {}};
  aggregate_full(full, deltas);
  double worst = 0.0;
  const auto g = full.global_model.tensors();
  const auto s = start.tensors();
  for (std::size_t t = 0; t < g.size(); ++t)
    for (Index e = 0; e < g[t].values.size(); ++e) {
      double expect = s[t].values(e);
      for (std::size_t i = 0; i < deltas.size(); ++i)
        expect += static_cast<double>(counts[i]) / 18597.0 * deltas[i].values.tensors()[t].values(e);
      worst = std::max(worst, std::abs(g[t].values(e) - expect));
    }

  ServerState ext{start, 0, {}};
  aggregate_extractor_only(ext, deltas);
  const bool cls_same = ext.global_model.classifier.weight == start.classifier.weight &&
                        ext.global_model.classifier.bias == start.classifier.bias;
  return {std::abs(wsum - 1.0) <= 1e-15 && worst <= 1e-15 && cls_same,
          fmt("weights sum to 1 %+.1e, weighted sum error %.1e, ", wsum - 1.0, worst) +
              (cls_same ? "classifier bit-unchanged" : "classifier changed")};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> n_dist(2, 200), c_dist(2, 6), level(0, 9);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = n_dist(rng), C = c_dist(rng);
    const Labels y = random_labels(n, C, rng);
    Matrix s(n, C);
    for (Index i = 0; i < s.size(); ++i) s.data()[i] = trial % 2 ? level(rng) / 10.0 : std::normal_distribution<>()(rng);
    const auto r = balanced_auc(s, y, C);
    for (int c = 0; c < C; ++c) {
      double wins = 0, pairs = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          if (y[i] == c && y[j] != c) {
            wins += s(i, c) > s(j, c) ? 1.0 : (s(i, c) == s(j, c) ? 0.5 : 0.0);
            pairs += 1;
          }
      if (pairs == 0) {
        if (!std::isnan(r.per_class(c))) worst = 1.0;
        continue;
      }
      worst = std::max(worst, std::abs(wins / pairs - r.per_class(c)));
    }
  }
  const Labels truth{0, 0, 0, 1}, pred{0, 0, 1, 1};
  const auto b = balanced_accuracy(pred, truth, 2);
  const Labels y3{0, 1, 2, 2, 1};
  const bool bacc_ok = b.per_class(0) == 2.0 / 3.0 && b.per_class(1) == 1.0 &&
                       std::abs(b.bacc - 5.0 / 6.0) <= 1e-15 && balanced_accuracy(y3, y3, 3).bacc == 1.0;
  return {worst <= 1e-12 && bacc_ok, fmt("worst AUC error vs pair counting %.1e; ", worst) +
                                         (bacc_ok ? "bACC fixtures exact" : "bACC fixture mismatch")};
}

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t m = i; m <= j; ++m) r[idx[m]] = 0.5 * static_cast<double>(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

Outcome partition_balance() {
  const std::vector<double> alphas{0.5, 5.0, 50.0};
  SyntheticDataConfig d;
  d.n_classes = 3;
  d.input_dim = 2;
  d.samples_per_class = {3000, 3000, 3000};
  const auto data = generate_synthetic(d);
  std::vector<double> xs, vs;
  bool conserved = true;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    PartitionConfig p;
    p.n_clients = 10;
    p.dirichlet_alpha_per_class = alphas;
    p.missing_class_prob = 0.0;
    p.seed = seed;
    const auto clients = dirichlet_partition(data, p);
    std::vector<std::vector<double>> share(3);
    for (const auto& c : clients) {
      const auto counts = class_counts(c, Split::all);
      for (int k = 0; k < 3; ++k) share[k].push_back(static_cast<double>(counts[k]) / 3000.0);
    }
    for (int k = 0; k < 3; ++k) {
      conserved = conserved && std::abs(std::accumulate(share[k].begin(), share[k].end(), 0.0) - 1.0) < 1e-12;
      double mean = 0.1, var = 0.0;
      for (double s : share[k]) var += (s - mean) * (s - mean);
      xs.push_back(alphas[k]);
      vs.push_back(var / 10.0);
    }
    // Conservation again with missing classes, where shares get redistributed.
    p.missing_class_prob = 0.3;
    std::vector<Index> total(3, 0);
    for (const auto& c : dirichlet_partition(data, p)) {
      const auto counts = class_counts(c, Split::all);
      for (int k = 0; k < 3; ++k) total[k] += counts[k];
    }
    conserved = conserved && total == std::vector<Index>{3000, 3000, 3000};
  }
  const double rho = spearman(xs, vs);
  return {conserved && rho < -0.9, std::string(conserved ? "counts conserved" : "counts NOT conserved") +
                                       fmt(" over 50 seeds; Spearman(alpha, share variance) = %.3f over 150 pairs", rho)};
}

// Final-round per-seed bACC (percent) for one arm on the ich-like preset.
class RunCache {
 public:
  RunCache() {
    ConfigOverrides o;
    o.preset = "ich-like";
    o.rounds = 40;
    o.seeds = std::vector<std::uint64_t>{0, 1, 2, 3, 4};
    spec_ = parse_config("", o);
  }

  double lambda() const { return spec_.lambdas.front(); }
  int k() const { return spec_.ks.front(); }

  const std::vector<double>& bacc(const std::string& arm, int k = 0) {
    if (k == 0) k = this->k();
    const std::string key = arm + "/" + std::to_string(k);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    ExperimentSpec s = spec_;
    s.algorithms = {arm};
    s.ks = {k};
    std::vector<double> out;
    const auto result = run_experiment(s, false);
    for (double v : result.summary.front().seed_bacc) out.push_back(100.0 * v);
    return cache_[key] = out;
  }

  double mean(const std::string& arm, int k = 0) {
    const auto& v = bacc(arm, k);
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }

 private:
  ExperimentSpec spec_;
  std::map<std::string, std::vector<double>> cache_;
};

Outcome trend_reproduction(RunCache& runs) {
  const double avg = runs.mean("fedavg"), npr = runs.mean("fednpr"), per = runs.mean("fednpr_per");
  const bool ok = per > npr && npr > avg && npr - avg >= 1.0 && per - npr >= 1.0;
  return {ok, fmt("FedAvg %.2f, FedNPR %.2f (%+.2f), FedNPR-Per %.2f", avg, npr, npr - avg, per) +
                  fmt(" (%+.2f) mean bACC over seeds 0-4", per - npr)};
}

Outcome ablation_trends(RunCache& runs) {
  const auto& k1 = runs.bacc("fednpr_per", 1);
  const auto& k2 = runs.bacc("fednpr_per", 2);
  const auto& k4 = runs.bacc("fednpr_per", 4);
  int wins = 0;
  for (std::size_t s = 0; s < k1.size(); ++s) wins += (k2[s] + k4[s]) / 2 >= k1[s] ? 1 : 0;
  const double with_sup = runs.mean("fednpr_per"), without = runs.mean("fednpr_per_nosup");
  const bool a = wins >= 3, b = with_sup - without >= 5.0;
  return {a && b, "(a) K in {2,4} >= K=1 in " + std::to_string(wins) + " of 5 seeds" +
                      fmt(" (means K1 %.2f, K2 %.2f, K4 %.2f); ", runs.mean("fednpr_per", 1),
                          runs.mean("fednpr_per", 2), runs.mean("fednpr_per", 4)) +
                      fmt("(b) NPR-only FedNPR-Per %.2f vs combined %.2f (%+.2f)", without, with_sup, without - with_sup)};
}

Outcome npr_as_module(RunCache& runs) {
  const double avg = runs.mean("fedavg"), npr = runs.mean("fednpr");
  const double prox = runs.mean("fedprox"), prox_npr = runs.mean("fedprox_npr");
  return {npr > avg && prox_npr > prox, fmt("FedAvg+NPR %+.2f (%.2f vs %.2f), ", npr - avg, npr, avg) +
                                            fmt("FedProx+NPR %+.2f (%.2f vs %.2f)", prox_npr - prox, prox_npr, prox)};
}

Outcome determinism() {
  ConfigOverrides o;
  o.preset = "ich-like";
  o.rounds = 5;
  o.algorithms = std::vector<std::string>{"fedavg", "fednpr", "fednpr_per", "fedprox"};
  o.seeds = std::vector<std::uint64_t>{0, 1};
  const fs::path root = fs::temp_directory_path() / "fednpr_acceptance_determinism";
  fs::remove_all(root);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  o.output = root / "a";
  run_experiment(parse_config("", o));
  o.output = root / "b";
  run_experiment(parse_config("", o));
  const bool rounds = slurp(root / "a" / "rounds.csv") == slurp(root / "b" / "rounds.csv");
  const bool summary = slurp(root / "a" / "summary.txt") == slurp(root / "b" / "summary.txt");
  const auto report = verify_results(root / "a");
  fs::remove_all(root);
  return {rounds && summary && report.ok,
          std::string("rounds.csv ") + (rounds ? "identical" : "differs") + ", summary.txt " +
              (summary ? "identical" : "differs") + ", verifier " + (report.ok ? "ok" : "mismatch")};
}

}  // namespace

int main() {
  RunCache runs;
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
    double limit_s;  // runtime bound, 0 for none
  };
  const std::vector<Criterion> criteria{
      {"sinkhorn correctness", sinkhorn_correctness, 10},
      {"gradient suite", gradient_suite, 60},
      {"degeneracy equivalences", degeneracy, 60},
      {"aggregation algebra", aggregation_algebra, 0},
      {"metric oracles", metric_oracles, 0},
      {"partition conservation and balance", partition_balance, 0},
      {"trend reproduction", [&] { return trend_reproduction(runs); }, 600},
      {"ablation trends", [&] { return ablation_trends(runs); }, 600},
      {"NPR as a module", [&] { return npr_as_module(runs); }, 600},
      {"determinism", determinism, 0},
  };
  std::printf("ich-like preset: K=%d, lambda=%g\n", runs.k(), runs.lambda());
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (criteria[i].limit_s > 0 && secs >= criteria[i].limit_s) {
      o.pass = false;
      o.detail += fmt("; over the %.0f s limit", criteria[i].limit_s);
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s %2zu %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].name,
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
