#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsim/client.hpp"
#include "fedsim/models.hpp"
#include "fedsim/params.hpp"

namespace fedsim::server {

struct FederationConfig {
  std::size_t num_clients = 1;        // K
  std::size_t clients_per_round = 1;  // C
  std::size_t num_rounds = 1;         // R
  std::uint64_t sampling_seed = 0;

  void validate() const;
  friend bool operator==(const FederationConfig&, const FederationConfig&) = default;
};

enum class AggregatorKind { FedAvg, FedOpt, FedNova };
enum class ServerOptKind { Sgd, Adam };

struct ServerOptimizer {
  ServerOptKind kind = ServerOptKind::Sgd;
  double server_lr = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double tau = 1e-3;
  friend bool operator==(const ServerOptimizer&, const ServerOptimizer&) = default;
};

struct AggregatorConfig {
  AggregatorKind kind = AggregatorKind::FedAvg;
  ServerOptimizer server_opt;  // FedOpt only

  void validate() const;
  bool uses_adam() const noexcept {
    return kind == AggregatorKind::FedOpt && server_opt.kind == ServerOptKind::Adam;
  }
  friend bool operator==(const AggregatorConfig&, const AggregatorConfig&) = default;
};

const char* to_string(AggregatorKind kind) noexcept;

struct ServerState {
  std::size_t round = 0;
  ParamVector global_params;
  std::optional<ParamVector> adam_m;
  std::optional<ParamVector> adam_v;

  /// W_0 plus zeroed moments when FedOpt-Adam is configured.
  static ServerState initial(ParamVector w0, const AggregatorConfig& agg);
};

struct ClientResult {
  std::uint32_t client_id = 0;
  ParamVector params;
  std::uint64_t num_samples = 0;
  double train_loss = 0.0;
  std::uint64_t local_steps = 0;

  friend bool operator==(const ClientResult&, const ClientResult&) = default;
};

/// C distinct client ids drawn without replacement, seeded by
/// (sampling_seed, round), ascending.
std::vector<std::uint32_t> sample_cohort(const FederationConfig& cfg, std::size_t round);

/// n_k / sum(n) for results sorted by client id.
std::vector<double> sample_weights(std::span<const ClientResult> sorted_results);

/// Sample-weighted average of client parameters, summed in ascending
/// client-id order regardless of input order.
ParamVector aggregate_fedavg(std::span<const ClientResult> results);

/// Server optimizer on the pseudo-gradient avg - W_t. Updates the Adam
/// moments in `state` (no bias correction). Does not advance the round.
ParamVector aggregate_fedopt(ServerState& state, const AggregatorConfig& agg,
                             std::span<const ClientResult> results);

/// Normalized averaging: each displacement is divided by its local step count
/// and the sum is rescaled by the weighted mean step count.
ParamVector aggregate_fednova(const ParamVector& w_t, std::span<const ClientResult> results);

/// Dispatches on agg.kind. FedProx aggregates like FedAvg.
ParamVector aggregate(ServerState& state, const AggregatorConfig& agg,
                      std::span<const ClientResult> results);

/// Raised when a round cannot complete; no partial aggregation happens.
class RoundAbort : public std::runtime_error {
 public:
  explicit RoundAbort(const std::string& what) : std::runtime_error(what) {}
};

/// Runs local training for a cohort and returns one result per sampled client.
class ClientExecutor {
 public:
  virtual ~ClientExecutor() = default;
  virtual std::vector<ClientResult> run_clients(std::size_t round,
                                                std::span<const std::uint32_t> cohort,
                                                const ParamVector& global_params) = 0;
};

/// Executes client updates in this process, optionally on worker threads.
class LocalExecutor final : public ClientExecutor {
 public:
  LocalExecutor(std::vector<client::ClientState> clients, client::ClientConfig cfg,
                std::shared_ptr<const models::Model> model, std::size_t threads = 1);

  std::vector<ClientResult> run_clients(std::size_t round,
                                        std::span<const std::uint32_t> cohort,
                                        const ParamVector& global_params) override;

  const client::ClientState& state(std::uint32_t client_id) const { return clients_.at(client_id); }
  std::size_t num_clients() const noexcept { return clients_.size(); }
  void set_observer(client::StepObserver observer) { observer_ = std::move(observer); }

 private:
  std::vector<client::ClientState> clients_;
  client::ClientConfig cfg_;
  std::shared_ptr<const models::Model> model_;
  std::size_t threads_;
  client::StepObserver observer_;
};

struct RoundMetrics {
  std::size_t round = 0;  // 1-based count of completed rounds
  bool evaluated = false;
  double test_accuracy = 0.0;
  double test_loss = 0.0;
  double mean_client_train_loss = 0.0;
  double wall_time_ms = 0.0;
};

using Evaluator = std::function<models::Evaluation(const ParamVector&)>;

/// One synchronous round: sample, dispatch, barrier, aggregate, advance.
RoundMetrics run_round(ServerState& state, const FederationConfig& federation,
                       ClientExecutor& executor, const AggregatorConfig& agg,
                       const Evaluator& evaluator = {});

/// Runs rounds until state.round == num_rounds, evaluating after every
/// `eval_interval`-th round and after the last one. Returns the evaluated rows.
std::vector<RoundMetrics> run_rounds(ServerState& state, const FederationConfig& federation,
                                     ClientExecutor& executor, const AggregatorConfig& agg,
                                     const Evaluator& evaluator, std::size_t eval_interval);

/// Header "round,test_acc,test_loss,train_loss,wall_time_ms". Wall time is
/// written as 0 unless `include_wall_time`.
std::string metrics_csv(std::span<const RoundMetrics> rows, bool include_wall_time);

}  // namespace fedsim::server
