#include "fedsim/server.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "fedsim/seed.hpp"

namespace fedsim::server {

void FederationConfig::validate() const {
  if (num_clients == 0) throw std::invalid_argument("num_clients must be >= 1");
  if (clients_per_round == 0 || clients_per_round > num_clients) {
    throw std::invalid_argument("clients_per_round must satisfy 1 <= C <= K (C=" +
                                std::to_string(clients_per_round) +
                                ", K=" + std::to_string(num_clients) + ")");
  }
  if (num_rounds == 0) throw std::invalid_argument("num_rounds must be >= 1");
  if (num_clients > 0xFFFFFFFEULL) throw std::invalid_argument("num_clients too large");
}

void AggregatorConfig::validate() const {
  if (kind != AggregatorKind::FedOpt) return;
  const auto& o = server_opt;
  if (!(o.server_lr > 0.0) || !std::isfinite(o.server_lr)) {
    throw std::invalid_argument("server_lr must be finite and > 0");
  }
  if (o.kind == ServerOptKind::Adam) {
    if (!(o.beta1 >= 0.0 && o.beta1 < 1.0)) throw std::invalid_argument("beta1 must lie in [0, 1)");
    if (!(o.beta2 >= 0.0 && o.beta2 < 1.0)) throw std::invalid_argument("beta2 must lie in [0, 1)");
    if (!(o.tau > 0.0) || !std::isfinite(o.tau)) throw std::invalid_argument("tau must be > 0");
  }
}

const char* to_string(AggregatorKind kind) noexcept {
  switch (kind) {
    case AggregatorKind::FedAvg: return "fedavg";
    case AggregatorKind::FedOpt: return "fedopt";
    case AggregatorKind::FedNova: return "fednova";
  }
  return "unknown";
}

ServerState ServerState::initial(ParamVector w0, const AggregatorConfig& agg) {
  if (w0.empty()) throw std::invalid_argument("initial parameters are empty");
  ServerState s;
  s.round = 0;
  if (agg.uses_adam()) {
    s.adam_m = ParamVector(w0.size());
    s.adam_v = ParamVector(w0.size());
  }
  s.global_params = std::move(w0);
  return s;
}

std::vector<std::uint32_t> sample_cohort(const FederationConfig& cfg, std::size_t round) {
  if (cfg.clients_per_round > cfg.num_clients) {
    throw std::invalid_argument("cannot sample " + std::to_string(cfg.clients_per_round) +
                                " of " + std::to_string(cfg.num_clients) + " clients");
  }
  std::vector<std::uint32_t> ids(cfg.num_clients);
  std::iota(ids.begin(), ids.end(), 0u);
  if (cfg.clients_per_round == cfg.num_clients) return ids;
  std::mt19937_64 rng(derive_seed(cfg.sampling_seed, {round}));
  std::vector<std::uint32_t> cohort;
  cohort.reserve(cfg.clients_per_round);
  std::sample(ids.begin(), ids.end(), std::back_inserter(cohort), cfg.clients_per_round, rng);
  std::sort(cohort.begin(), cohort.end());
  return cohort;
}

namespace {

std::vector<ClientResult> sorted_checked(std::span<const ClientResult> results) {
  if (results.empty()) throw std::invalid_argument("aggregation over zero client results");
  std::vector<ClientResult> sorted(results.begin(), results.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const ClientResult& a, const ClientResult& b) { return a.client_id < b.client_id; });
  const std::size_t len = sorted.front().params.size();
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto& r = sorted[i];
    if (i > 0 && r.client_id == sorted[i - 1].client_id) {
      throw std::invalid_argument("duplicate result for client " + std::to_string(r.client_id));
    }
    if (r.num_samples == 0) {
      throw std::invalid_argument("client " + std::to_string(r.client_id) + " reported zero samples");
    }
    if (r.params.size() != len) throw DimensionMismatch(r.params.size(), len);
  }
  return sorted;
}

}  // namespace

std::vector<double> sample_weights(std::span<const ClientResult> sorted_results) {
  std::uint64_t total = 0;
  for (const auto& r : sorted_results) total += r.num_samples;
  std::vector<double> w;
  w.reserve(sorted_results.size());
  for (const auto& r : sorted_results) {
    w.push_back(static_cast<double>(r.num_samples) / static_cast<double>(total));
  }
  return w;
}

ParamVector aggregate_fedavg(std::span<const ClientResult> results) {
  const auto sorted = sorted_checked(results);
  std::vector<ParamVector> params;
  params.reserve(sorted.size());
  for (const auto& r : sorted) params.push_back(r.params);
  return weighted_sum(params, sample_weights(sorted));
}

ParamVector aggregate_fedopt(ServerState& state, const AggregatorConfig& agg,
                             std::span<const ClientResult> results) {
  const auto avg = aggregate_fedavg(results);
  const auto& w = state.global_params;
  if (avg.size() != w.size()) throw DimensionMismatch(avg.size(), w.size());
  const auto& opt = agg.server_opt;

  if (opt.kind == ServerOptKind::Sgd) {
    // W + lr (avg - W) written as (1 - lr) W + lr avg, so that lr = 1 returns
    // the average itself.
    return axpy(1.0 - opt.server_lr, w, axpy(opt.server_lr, avg, ParamVector(w.size())));
  }

  if (!state.adam_m || !state.adam_v) {
    state.adam_m = ParamVector(w.size());
    state.adam_v = ParamVector(w.size());
  }
  auto& m = *state.adam_m;
  auto& v = *state.adam_v;
  if (m.size() != w.size()) throw DimensionMismatch(m.size(), w.size());
  if (v.size() != w.size()) throw DimensionMismatch(v.size(), w.size());

  const auto delta = subtract(avg, w);
  m = axpy(opt.beta1, m, axpy(1.0 - opt.beta1, delta, ParamVector(w.size())));
  v = axpy(opt.beta2, v, axpy(1.0 - opt.beta2, elementwise_square(delta), ParamVector(w.size())));
  return axpy(opt.server_lr, elementwise_div_add(m, v, opt.tau), w);
}

ParamVector aggregate_fednova(const ParamVector& w_t, std::span<const ClientResult> results) {
  const auto sorted = sorted_checked(results);
  if (sorted.front().params.size() != w_t.size()) {
    throw DimensionMismatch(sorted.front().params.size(), w_t.size());
  }
  const auto weights = sample_weights(sorted);
  std::vector<ParamVector> directions;
  directions.reserve(sorted.size());
  double tau_eff = 0.0;
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    const auto steps = sorted[k].local_steps;
    if (steps == 0) {
      throw std::invalid_argument("client " + std::to_string(sorted[k].client_id) +
                                  " reported zero local steps");
    }
    const double inv = 1.0 / static_cast<double>(steps);
    ParamVector d = subtract(w_t, sorted[k].params);
    for (double& x : d) x *= inv;
    directions.push_back(std::move(d));
    tau_eff += weights[k] * static_cast<double>(steps);
  }
  return axpy(-tau_eff, weighted_sum(directions, weights), w_t);
}

ParamVector aggregate(ServerState& state, const AggregatorConfig& agg,
                      std::span<const ClientResult> results) {
  switch (agg.kind) {
    case AggregatorKind::FedAvg: return aggregate_fedavg(results);
    case AggregatorKind::FedOpt: return aggregate_fedopt(state, agg, results);
    case AggregatorKind::FedNova: return aggregate_fednova(state.global_params, results);
  }
  throw std::invalid_argument("unknown aggregator");
}

// ---------------------------------------------------------------------------

LocalExecutor::LocalExecutor(std::vector<client::ClientState> clients, client::ClientConfig cfg,
                             std::shared_ptr<const models::Model> model, std::size_t threads)
    : clients_(std::move(clients)),
      cfg_(std::move(cfg)),
      model_(std::move(model)),
      threads_(std::max<std::size_t>(threads, 1)) {
  cfg_.validate();
  for (std::size_t k = 0; k < clients_.size(); ++k) {
    if (clients_[k].client_id != k) {
      throw std::invalid_argument("client states must be indexed by client id");
    }
  }
}

std::vector<ClientResult> LocalExecutor::run_clients(std::size_t round,
                                                     std::span<const std::uint32_t> cohort,
                                                     const ParamVector& global_params) {
  std::vector<ClientResult> results(cohort.size());
  std::vector<std::exception_ptr> errors(cohort.size());
  auto work = [&](std::size_t slot) {
    const auto id = cohort[slot];
    try {
      if (id >= clients_.size()) throw std::out_of_range("unknown client id " + std::to_string(id));
      auto update = client::client_update(clients_[id], cfg_, *model_, global_params, round, observer_);
      results[slot] = ClientResult{id, std::move(update.params), update.num_samples,
                                   update.train_loss, update.local_steps};
    } catch (...) {
      errors[slot] = std::current_exception();
    }
  };

  const std::size_t nthreads = std::min(threads_, cohort.size());
  if (nthreads <= 1) {
    for (std::size_t s = 0; s < cohort.size(); ++s) work(s);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    for (std::size_t t = 0; t < nthreads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t s = t; s < cohort.size(); s += nthreads) work(s);
      });
    }
    for (auto& th : pool) th.join();
  }

  for (std::size_t s = 0; s < cohort.size(); ++s) {
    if (!errors[s]) continue;
    try {
      std::rethrow_exception(errors[s]);
    } catch (const std::exception& e) {
      throw RoundAbort("round " + std::to_string(round) + ": client " +
                       std::to_string(cohort[s]) + " failed: " + e.what());
    }
  }
  return results;
}

// ---------------------------------------------------------------------------

RoundMetrics run_round(ServerState& state, const FederationConfig& federation,
                       ClientExecutor& executor, const AggregatorConfig& agg,
                       const Evaluator& evaluator) {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t t = state.round;
  const auto cohort = sample_cohort(federation, t);

  std::vector<ClientResult> results;
  try {
    results = executor.run_clients(t, cohort, state.global_params);
  } catch (const RoundAbort&) {
    throw;
  } catch (const std::exception& e) {
    throw RoundAbort("round " + std::to_string(t) + ": " + e.what());
  }

  if (results.size() != cohort.size()) {
    throw RoundAbort("round " + std::to_string(t) + ": expected " + std::to_string(cohort.size()) +
                     " client results, got " + std::to_string(results.size()));
  }
  std::vector<std::uint32_t> reported;
  for (const auto& r : results) {
    if (r.params.size() != state.global_params.size()) {
      throw RoundAbort("round " + std::to_string(t) + ": client " + std::to_string(r.client_id) +
                       " returned " + std::to_string(r.params.size()) + " parameters, expected " +
                       std::to_string(state.global_params.size()));
    }
    reported.push_back(r.client_id);
  }
  std::sort(reported.begin(), reported.end());
  if (reported != cohort) throw RoundAbort("round " + std::to_string(t) + ": results do not match cohort");

  ServerState next = state;
  try {
    next.global_params = aggregate(next, agg, results);
  } catch (const std::exception& e) {
    throw RoundAbort("round " + std::to_string(t) + ": aggregation failed: " + e.what());
  }
  next.round = t + 1;
  state = std::move(next);

  RoundMetrics m;
  m.round = state.round;
  double loss = 0.0;
  std::vector<ClientResult> sorted = results;
  std::sort(sorted.begin(), sorted.end(),
            [](const ClientResult& a, const ClientResult& b) { return a.client_id < b.client_id; });
  for (const auto& r : sorted) loss += r.train_loss;
  m.mean_client_train_loss = loss / static_cast<double>(sorted.size());
  if (evaluator) {
    const auto ev = evaluator(state.global_params);
    m.evaluated = true;
    m.test_accuracy = ev.accuracy;
    m.test_loss = ev.mean_loss;
  }
  m.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return m;
}

std::vector<RoundMetrics> run_rounds(ServerState& state, const FederationConfig& federation,
                                     ClientExecutor& executor, const AggregatorConfig& agg,
                                     const Evaluator& evaluator, std::size_t eval_interval) {
  federation.validate();
  agg.validate();
  if (eval_interval == 0) throw std::invalid_argument("eval_interval must be >= 1");
  std::vector<RoundMetrics> rows;
  while (state.round < federation.num_rounds) {
    const std::size_t completed = state.round + 1;
    const bool eval_now = completed % eval_interval == 0 || completed == federation.num_rounds;
    auto m = run_round(state, federation, executor, agg, eval_now ? evaluator : Evaluator{});
    if (eval_now) rows.push_back(m);
  }
  return rows;
}

namespace {

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string metrics_csv(std::span<const RoundMetrics> rows, bool include_wall_time) {
  std::ostringstream os;
  os << "round,test_acc,test_loss,train_loss,wall_time_ms\n";
  for (const auto& r : rows) {
    const long long wall = include_wall_time ? std::llround(r.wall_time_ms) : 0;
    os << r.round << ',' << shortest(r.test_accuracy) << ',' << shortest(r.test_loss) << ','
       << shortest(r.mean_client_train_loss) << ',' << wall << '\n';
  }
  return os.str();
}

}  // namespace fedsim::server
