#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>

#include "fedsim/datagen.hpp"
#include "fedsim/models.hpp"
#include "fedsim/params.hpp"

namespace fedsim::client {

enum class OptimizerKind { Sgd, MomentumSgd };
enum class SchedulerKind { None, LinearDecay };

inline constexpr double kDefaultMomentum = 0.9;

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Sgd;
  double beta = kDefaultMomentum;  // MomentumSgd only
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct SchedulerConfig {
  SchedulerKind kind = SchedulerKind::None;
  std::size_t total_rounds = 1;  // LinearDecay only
  friend bool operator==(const SchedulerConfig&, const SchedulerConfig&) = default;
};

struct ClientConfig {
  std::size_t local_epochs = 1;
  std::size_t batch_size = 32;
  double base_lr = 0.1;
  OptimizerConfig optimizer;
  SchedulerConfig scheduler;
  double prox_mu = 0.0;  // 0 = plain FedAvg objective
  std::uint64_t shuffle_seed = 0;

  void validate() const;
  friend bool operator==(const ClientConfig&, const ClientConfig&) = default;
};

/// A client's local data D^k.
using ClientShard = datagen::LabeledDataset;

struct ClientState {
  std::uint32_t client_id = 0;
  ClientShard shard;
  std::optional<ParamVector> momentum_buffer;
};

struct LocalUpdate {
  ParamVector params;
  std::uint64_t num_samples = 0;
  double train_loss = 0.0;
  std::uint64_t local_steps = 0;
};

/// Snapshot handed to a StepObserver just before an optimizer step is applied.
struct StepTrace {
  std::size_t round = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;            // within the round
  const ClientState& state;        // momentum buffer not yet updated
  const ParamVector& params;       // W before the step
  const ParamVector& gradient;     // including any proximal correction
  double lr = 0.0;
};

using StepObserver = std::function<void(const StepTrace&)>;

/// Per-round learning rate. LinearDecay: base_lr * (1 - t / R), t < R.
double effective_lr(const ClientConfig& cfg, std::size_t round);

/// Local training for one round starting from `global_params`:
/// resets momentum, runs E epochs of (re-shuffled) mini-batch steps at a
/// learning rate fixed for the round, and returns the final parameters.
/// μ > 0 adds the proximal gradient μ (W - global_params).
LocalUpdate client_update(ClientState& state, const ClientConfig& cfg,
                          const models::Model& model, const ParamVector& global_params,
                          std::size_t round, const StepObserver& observer = {});

LocalUpdate client_update(ClientState& state, const ClientConfig& cfg,
                          const models::ModelSpec& spec, const ParamVector& global_params,
                          std::size_t round, const StepObserver& observer = {});

/// True iff the momentum buffer is absent or all zeros.
bool momentum_is_cleared(const ClientState& state);

/// Sample order for one epoch, derived from (shuffle_seed, client_id, round, epoch).
std::vector<std::size_t> epoch_order(const ClientConfig& cfg, std::uint32_t client_id,
                                     std::size_t round, std::size_t epoch, std::size_t n);

}  // namespace fedsim::client
