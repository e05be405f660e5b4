// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "cli_support.hpp"
#include "fedsim/client.hpp"
#include "fedsim/datagen.hpp"
#include "fedsim/experiment.hpp"
#include "fedsim/models.hpp"
#include "fedsim/server.hpp"
#include "fedsim/transport.hpp"
#include "support.hpp"

using namespace fedsim;
namespace fs = std::filesystem;
using testing::pick;
using testing::uniform;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail << "first failure: " << what << "; ";
    pass = pass && ok;
  }
};

double max_diff(const ParamVector& a, const ParamVector& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<client::ClientState> states_for(const datagen::LabeledDataset& train, const datagen::Partition& p) {
  std::vector<client::ClientState> out;
  for (std::size_t k = 0; k < p.num_clients; ++k) {
    out.push_back({static_cast<std::uint32_t>(k), train.subset(p.assignments[k]), std::nullopt});
  }
  return out;
}

// Equal-size shards over a random permutation; leftovers are dropped.
datagen::Partition equal_partition(std::mt19937_64& rng, std::size_t n, std::size_t k, std::size_t per) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  datagen::Partition p{k, std::vector<std::vector<std::size_t>>(k)};
  for (std::size_t c = 0; c < k; ++c) {
    p.assignments[c].assign(perm.begin() + static_cast<std::ptrdiff_t>(c * per),
                            perm.begin() + static_cast<std::ptrdiff_t>((c + 1) * per));
    std::sort(p.assignments[c].begin(), p.assignments[c].end());
  }
  return p;
}

// Plain reimplementation of local training, used as the oracle for reductions.
ParamVector reference_local(const models::Model& model, const datagen::LabeledDataset& shard,
                            const client::ClientConfig& cfg, std::uint32_t id, std::size_t round,
                            ParamVector w) {
  const double lr = client::effective_lr(cfg, round);
  const double beta = cfg.optimizer.kind == client::OptimizerKind::MomentumSgd ? cfg.optimizer.beta : 0.0;
  std::vector<double> buf(w.size(), 0.0);
  for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
    const auto order = client::epoch_order(cfg, id, round, e, shard.size());
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(s),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(s + cfg.batch_size, order.size())));
      const auto batch = shard.subset(idx);
      const auto g = model.grad(w, models::view_of(batch));
      for (std::size_t i = 0; i < w.size(); ++i) {
        buf[i] = beta * buf[i] + g[i];
        w[i] -= lr * buf[i];
      }
    }
  }
  return w;
}

// Sample-weighted mean accumulated naively, in long double.
ParamVector naive_average(const std::vector<ParamVector>& ws, const std::vector<std::size_t>& ns) {
  const long double total = std::accumulate(ns.begin(), ns.end(), 0.0L);
  ParamVector out(ws[0].size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    long double s = 0;
    for (std::size_t k = 0; k < ws.size(); ++k) s += static_cast<long double>(ns[k]) / total * ws[k][i];
    out[i] = static_cast<double>(s);
  }
  return out;
}

double max_fd_error(const models::Model& m, ParamVector w, const models::BatchView& batch, double h) {
  const auto g = m.grad(w, batch);
  double worst = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double orig = w[i];
    w[i] = orig + h;
    const double up = m.loss(w, batch);
    w[i] = orig - h;
    const double down = m.loss(w, batch);
    w[i] = orig;
    worst = std::max(worst, std::abs((up - down) / (2 * h) - g[i]));
  }
  return worst;
}

client::ClientConfig random_client(std::mt19937_64& rng) {
  client::ClientConfig c;
  c.local_epochs = pick(rng, 1, 3);
  c.batch_size = pick(rng, 1, 16);
  c.base_lr = uniform(rng, 0.01, 0.3);
  if (pick(rng, 0, 1)) c.optimizer = {client::OptimizerKind::MomentumSgd, uniform(rng, 0.1, 0.95)};
  c.shuffle_seed = rng();
  return c;
}

// --- criteria ---------------------------------------------------------------

void one_step_equivalence(Verdict& v) {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    const auto ds = datagen::generate_synthetic(4, 10, 125, uniform(rng, 0.5, 4.0), seed);
    const auto part = datagen::lda_partition(ds, datagen::LdaConfig{uniform(rng, 0.1, 10.0), 5, 1, seed});
    client::ClientConfig cfg;
    cfg.batch_size = ds.size();
    cfg.base_lr = uniform(rng, 0.01, 1.0);
    std::shared_ptr<const models::Classifier> model =
        models::make_model(models::ModelSpec{models::ModelKind::LogisticRegression, 10, 4, 16, seed, 0.5});
    const auto w0 = model->init_params();
    server::LocalExecutor exec(states_for(ds, part), cfg, model);
    auto st = server::ServerState::initial(w0, {});
    server::run_round(st, server::FederationConfig{5, 5, 1, seed}, exec, {});
    const auto central = axpy(-cfg.base_lr, model->grad(w0, models::view_of(ds)), w0);
    worst = std::max(worst, max_diff(st.global_params, central));
  }
  v.require(worst <= 1e-12, "max deviation above 1e-12");
  v.detail << "50 seeds, max |fedavg - centralized| = " << worst;
}

void reductions(Verdict& v) {
  double prox = 0, fednova = 0;
  bool fedopt_exact = true;
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto k = pick(rng, 2, 8);
    const auto classes = static_cast<std::uint32_t>(pick(rng, 2, 5));
    const auto dim = pick(rng, 2, 8);
    const auto ds = datagen::generate_synthetic(classes, dim, pick(rng, 10, 40), uniform(rng, 0.5, 3.0), rng());
    const models::ModelSpec spec{trial % 2 ? models::ModelKind::Mlp : models::ModelKind::LogisticRegression,
                                 dim, classes, pick(rng, 2, 8), rng(), 0.3};
    std::shared_ptr<const models::Classifier> model = models::make_model(spec);
    const auto w0 = model->init_params();
    auto cfg = random_client(rng);
    const server::FederationConfig fed{k, pick(rng, 1, k), 1, rng()};
    const std::size_t round = pick(rng, 0, 5);

    // FedProx with mu = 0 against the independent local-training oracle.
    const auto part = datagen::lda_partition(ds, datagen::LdaConfig{uniform(rng, 0.3, 5.0), k, 1, rng()});
    auto prox_cfg = cfg;
    prox_cfg.prox_mu = 0.0;
    const auto states = states_for(ds, part);
    server::LocalExecutor exec(states, prox_cfg, model);
    const auto cohort = server::sample_cohort(fed, round);
    const auto results = exec.run_clients(round, cohort, w0);
    std::vector<ParamVector> ws;
    std::vector<std::size_t> ns;
    for (auto c : cohort) {
      ws.push_back(reference_local(*model, states[c].shard, cfg, c, round, w0));
      ns.push_back(states[c].shard.size());
    }
    prox = std::max(prox, max_diff(server::aggregate_fedavg(results), naive_average(ws, ns)));

    // FedOpt with server SGD at lr = 1 on the same results.
    server::AggregatorConfig opt{server::AggregatorKind::FedOpt, {server::ServerOptKind::Sgd, 1.0}};
    auto st = server::ServerState::initial(w0, opt);
    fedopt_exact = fedopt_exact && server::aggregate_fedopt(st, opt, results) == server::aggregate_fedavg(results);

    // FedNova with equal shards, hence equal local step counts.
    const auto per = ds.size() / k;
    const auto eq = equal_partition(rng, ds.size(), k, per);
    server::LocalExecutor eq_exec(states_for(ds, eq), cfg, model);
    const auto eq_results = eq_exec.run_clients(round, cohort, w0);
    fednova = std::max(fednova, max_diff(server::aggregate_fednova(w0, eq_results), server::aggregate_fedavg(eq_results)));
  }
  v.require(prox <= 1e-12, "FedProx(mu=0) deviates from the FedAvg oracle");
  v.require(fedopt_exact, "FedOpt(sgd, lr=1) is not bit-equal to FedAvg");
  v.require(fednova <= 1e-12, "FedNova with uniform steps deviates from FedAvg");
  v.detail << "50 instances each; fedprox " << prox << ", fedopt bit-exact " << (fedopt_exact ? "yes" : "no")
           << ", fednova " << fednova;
}

void gradient_oracle(Verdict& v) {
  std::mt19937_64 rng(21);
  double worst_lr = 0, worst_mlp = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto d = pick(rng, 1, 8);
    const auto c = static_cast<std::uint32_t>(pick(rng, 2, 6));
    const auto ds = testing::random_dataset(rng, pick(rng, 1, 12), d, c);
    const auto lr = models::make_model({models::ModelKind::LogisticRegression, d, c, 1, 0, 0.0});
    worst_lr = std::max(worst_lr, max_fd_error(*lr, testing::random_params(rng, lr->parameter_count()),
                                               models::view_of(ds), 1e-6));
    const auto mlp = models::make_model({models::ModelKind::Mlp, d, c, pick(rng, 1, 8), 0, 0.0});
    worst_mlp = std::max(worst_mlp, max_fd_error(*mlp, testing::random_params(rng, mlp->parameter_count()),
                                                 models::view_of(ds), 1e-6));
  }
  v.require(worst_lr <= 1e-6, "logistic regression gradient");
  v.require(worst_mlp <= 1e-6, "mlp gradient");
  v.detail << "100 instances per model; max error lr " << worst_lr << ", mlp " << worst_mlp;
}

// Surrogate for the label-skew experiment. Three feature dimensions for ten
// classes: the class means overlap enough that skewed shards pull the
// averaged model apart.
experiment::ExperimentConfig surrogate(double alpha, std::uint64_t seed, std::size_t clients) {
  std::ostringstream s;
  s << R"({"master_seed": )" << seed << R"(,
    "federation": {"num_clients": )" << clients << R"(, "clients_per_round": )" << clients << R"(, "num_rounds": 100},
    "dataset": {"synthetic": {"num_classes": 10, "dim": 3, "samples_per_class": 200, "class_separation": 80}},
    "partition": {"lda": {"alpha": )" << alpha << R"(}},
    "model": {"kind": "logistic_regression"},
    "client": {"base_lr": 0.003, "batch_size": 8, "local_epochs": 1},
    "eval_interval": 100})";
  return experiment::parse_config(s.str());
}

double final_accuracy(const experiment::ExperimentConfig& cfg) {
  const auto prep = experiment::prepare(cfg);
  server::LocalExecutor exec(prep.client_states(), cfg.client, prep.classifier, 4);
  return experiment::run_with_executor(cfg, prep, exec).metrics.back().test_accuracy;
}

std::vector<double> iid_accuracy;

void non_iid_trend(Verdict& v) {
  double skewed = 0, iid = 0;
  iid_accuracy.clear();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    skewed += final_accuracy(surrogate(0.1, seed, 10)) / 5;
    iid_accuracy.push_back(final_accuracy(surrogate(100, seed, 10)));
    iid += iid_accuracy.back() / 5;
  }
  v.require(iid - skewed >= 0.03, "gap below 3 percentage points");
  v.detail << "mean final accuracy alpha=0.1 " << skewed << ", alpha=100 " << iid << ", gap "
           << 100 * (iid - skewed) << " pp";
}

void convergence(Verdict& v) {
  if (iid_accuracy.size() != 5) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) iid_accuracy.push_back(final_accuracy(surrogate(100, seed, 10)));
  }
  double central_min = 1;
  for (std::uint64_t seed = 0; seed < 5; ++seed) central_min = std::min(central_min, final_accuracy(surrogate(100, seed, 1)));
  const double iid_min = *std::min_element(iid_accuracy.begin(), iid_accuracy.end());
  v.require(iid_min >= 0.95, "alpha=100 below 0.95");
  v.require(central_min >= 0.99, "centralized below 0.99");
  v.detail << "worst seed alpha=100 " << iid_min << ", worst seed centralized " << central_min;
}

const char* kCliConfig = R"({
  "master_seed": 5,
  "federation": {"num_clients": 8, "clients_per_round": 5, "num_rounds": 12},
  "dataset": {"synthetic": {"num_classes": 5, "dim": 6, "samples_per_class": 60}},
  "partition": {"lda": {"alpha": 0.3}},
  "model": {"kind": "mlp", "hidden_dim": 8, "init_scale": 0.3},
  "client": {"base_lr": 0.05, "batch_size": 10, "local_epochs": 2,
             "optimizer": {"momentum_sgd": {"beta": 0.9}}, "scheduler": "linear_decay"},
  "aggregator": {"kind": "fedopt", "server_opt": {"kind": "adam", "server_lr": 0.02}},
  "eval_interval": 3
})";

bool same_outputs(const fs::path& a, const fs::path& b, Verdict& v) {
  bool same = true;
  for (const char* f : {"metrics.csv", "final_params.bin"}) {
    if (!fs::exists(a / f) || !fs::exists(b / f)) {
      v.require(false, std::string("missing ") + f);
      return false;
    }
    same = same && testing::slurp(a / f) == testing::slurp(b / f);
  }
  return same;
}

void carrier_equivalence(Verdict& v) {
  const auto dir = testing::fresh_dir("fedsim_acceptance_carriers");
  testing::spit(dir / "config.json", kCliConfig);
  const auto cfg = testing::shell_quote((dir / "config.json").string());
  const auto sim = testing::run_cli("run --config " + cfg + " --mode simulate --workers 4 --out " +
                                    testing::shell_quote((dir / "sim").string()));
  const auto tcp = testing::run_cli("run --config " + cfg + " --mode sockets --workers 4 --port 0 --out " +
                                    testing::shell_quote((dir / "tcp").string()));
  v.require(sim.exit_code == 0, "simulate run failed: " + sim.output);
  v.require(tcp.exit_code == 0, "sockets run failed: " + tcp.output);
  if (!v.pass) return;
  v.require(same_outputs(dir / "sim", dir / "tcp", v), "outputs differ");
  v.detail << "simulate vs 4 worker processes over TCP: metrics.csv and final_params.bin identical";
}

void partition_properties(Verdict& v) {
  std::mt19937_64 rng(31);
  int bad = 0, rejected = 0, conserved = 0;
  while (conserved + bad < 1000) {
    const auto classes = static_cast<std::uint32_t>(pick(rng, 2, 12));
    const auto ds = datagen::generate_synthetic(classes, 2, pick(rng, 5, 60), 1.0, rng());
    const auto k = pick(rng, 1, 12);
    const double alpha = std::exp(uniform(rng, std::log(0.05), std::log(1000.0)));
    datagen::Partition p;
    try {
      p = datagen::lda_partition(ds, datagen::LdaConfig{alpha, k, 1, rng()});
    } catch (const datagen::PartitionError&) {
      ++rejected;  // no draw left every shard non-empty; reported, not silently counted
      continue;
    }
    std::vector<int> seen(ds.size(), 0);
    for (const auto& shard : p.assignments) {
      for (auto i : shard) {
        if (i < seen.size()) ++seen[i];
      }
    }
    if (p.assignments.size() != k || std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; })) {
      ++bad;
    } else {
      ++conserved;
    }
  }
  v.require(bad == 0, std::to_string(bad) + " configs broke conservation or disjointness");

  const auto ds = datagen::generate_synthetic(10, 2, 50, 1.0, 1);
  double zero[3] = {0, 0, 0};
  const double alphas[3] = {0.1, 0.5, 100};
  for (int a = 0; a < 3; ++a) {
    for (std::uint64_t s = 0; s < 100; ++s) {
      const auto p = datagen::lda_partition(ds, datagen::LdaConfig{alphas[a], 10, 1, s});
      zero[a] += datagen::distribution_matrix(ds, p).zero_cell_fraction() / 100;
    }
  }
  v.require(zero[0] > zero[1] && zero[1] > zero[2], "zero-cell fraction not monotone");
  v.require(rejected <= 50, std::to_string(rejected) + " draws rejected as infeasible");
  v.detail << conserved << " of 1000 configs conserved and disjoint (" << rejected
           << " infeasible draws skipped); zero-cell fraction " << zero[0] << " > " << zero[1] << " > " << zero[2];
}

void wire_golden(Verdict& v) {
  using transport::RoundMessage;
  const std::vector<unsigned char> shutdown = {0xC5, 0xFD, 0x01, 0x03, 0, 0, 0, 0, 0xFF, 0xFF,
                                               0xFF, 0xFF, 0,    0,    0, 0, 0, 0, 0,    0};
  const std::vector<unsigned char> bcast = {0xC5, 0xFD, 0x01, 0x01, 0, 0, 0, 0, 0xFF, 0xFF, 0xFF, 0xFF,
                                            0x10, 0,    0,    0,    0, 0, 0, 0, 0x01, 0,    0,    0,
                                            0,    0,    0,    0,    0, 0, 0, 0, 0,    0,    0xF0, 0x3F};
  v.require(transport::encode(RoundMessage::shutdown(0)) == shutdown, "shutdown encoding");
  v.require(transport::encode(RoundMessage::broadcast(0, ParamVector{1.0})) == bcast, "broadcast encoding");
  std::mt19937_64 rng(41);
  int mismatches = 0;
  for (int i = 0; i < 10000; ++i) {
    ParamVector p(pick(rng, 0, 64));
    for (auto& x : p) x = std::bit_cast<double>(rng());
    const auto round = static_cast<std::uint32_t>(rng());
    RoundMessage m;
    switch (i % 4) {
      case 0: m = RoundMessage::broadcast(round, p); break;
      case 1:
        m = RoundMessage::result(round, {static_cast<std::uint32_t>(rng()), p, rng(), std::bit_cast<double>(rng()), rng()});
        break;
      case 2: m = RoundMessage::shutdown(round); break;
      default: m = RoundMessage::ack(round, static_cast<std::uint32_t>(rng()));
    }
    if (!transport::decode(transport::encode(m)).bit_equal(m)) ++mismatches;
  }
  v.require(mismatches == 0, std::to_string(mismatches) + " round-trip mismatches");
  v.detail << "both golden encodings match; 10000 random round-trips identical";
}

void replay(Verdict& v) {
  const auto dir = testing::fresh_dir("fedsim_acceptance_replay");
  testing::spit(dir / "config.json", kCliConfig);
  const auto cfg = testing::shell_quote((dir / "config.json").string());
  for (const char* out : {"a", "b"}) {
    const auto r = testing::run_cli("run --config " + cfg + " --workers 3 --out " + testing::shell_quote((dir / out).string()));
    v.require(r.exit_code == 0, std::string("run failed: ") + r.output);
  }
  if (!v.pass) return;
  v.require(same_outputs(dir / "a", dir / "b", v), "outputs differ between runs");
  v.detail << "two runs of one config wrote identical metrics.csv and final_params.bin";
}

void momentum_clearing(Verdict& v) {
  const auto ds = datagen::generate_synthetic(4, 5, 40, 1.5, 51);
  const auto part = datagen::lda_partition(ds, datagen::LdaConfig{1.0, 4, 1, 51});
  std::shared_ptr<const models::Classifier> model =
      models::make_model({models::ModelKind::LogisticRegression, 5, 4, 16, 51, 0.1});
  client::ClientConfig cfg;
  cfg.batch_size = 8;
  cfg.base_lr = 0.05;
  cfg.optimizer = {client::OptimizerKind::MomentumSgd, 0.9};
  server::LocalExecutor exec(states_for(ds, part), cfg, model);

  // At step 0 the buffer must be clear and the applied update must be the
  // plain SGD step, visible as the parameters seen at step 1.
  std::size_t first_steps = 0, checked = 0, dirty = 0, mismatched = 0, nonzero_later = 0;
  std::map<std::uint32_t, ParamVector> expected_after_first;
  exec.set_observer([&](const client::StepTrace& t) {
    const auto id = t.state.client_id;
    if (t.step == 0) {
      ++first_steps;
      if (!client::momentum_is_cleared(t.state)) ++dirty;
      expected_after_first[id] = axpy(-t.lr, t.gradient, t.params);
    } else if (t.step == 1) {
      ++checked;
      if (!(t.params == expected_after_first[id])) ++mismatched;
      if (!client::momentum_is_cleared(t.state)) ++nonzero_later;
    }
  });
  auto st = server::ServerState::initial(model->init_params(), {});
  server::run_rounds(st, server::FederationConfig{4, 3, 10, 51}, exec, {}, {}, 10);
  v.require(first_steps == 30, "expected 30 client rounds");
  v.require(dirty == 0, "momentum buffer not cleared at a round's first step");
  v.require(checked == 30 && mismatched == 0, "first step differs from plain SGD");
  v.require(nonzero_later == 30, "momentum never accumulated");
  v.detail << "10 rounds x 3 clients: buffer clear at every first step, first update equals plain SGD";
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<void(Verdict&)> run;
    double budget_s;
  };
  const std::vector<Criterion> criteria = {
      {"one-step centralized equivalence", one_step_equivalence, 10},
      {"algorithm reductions", reductions, 10},
      {"gradient oracle", gradient_oracle, 30},
      {"non-iid degradation trend", non_iid_trend, 120},
      {"convergence sanity", convergence, 60},
      {"carrier equivalence", carrier_equivalence, 120},
      {"partition properties", partition_properties, 60},
      {"wire golden bytes", wire_golden, 30},
      {"replay determinism", replay, 120},
      {"momentum clearing", momentum_clearing, 30},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
      criteria[i].run(v);
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    v.require(secs <= criteria[i].budget_s, "over the time budget");
    if (!v.pass) ++failures;
    std::printf("criterion %zu %s: %s (%s; %.2f s)\n", i + 1, criteria[i].name, v.pass ? "PASS" : "FAIL",
                v.detail.str().c_str(), secs);
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
