#include "fedsim/client.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "fedsim/seed.hpp"

namespace fedsim::client {

void ClientConfig::validate() const {
  if (local_epochs == 0) throw std::invalid_argument("local_epochs must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) {
    throw std::invalid_argument("base_lr must be finite and > 0");
  }
  if (optimizer.kind == OptimizerKind::MomentumSgd &&
      !(optimizer.beta >= 0.0 && optimizer.beta < 1.0)) {
    throw std::invalid_argument("momentum beta must lie in [0, 1)");
  }
  if (scheduler.kind == SchedulerKind::LinearDecay && scheduler.total_rounds == 0) {
    throw std::invalid_argument("linear decay total_rounds must be >= 1");
  }
  if (!(prox_mu >= 0.0) || !std::isfinite(prox_mu)) {
    throw std::invalid_argument("prox_mu must be finite and >= 0");
  }
}

double effective_lr(const ClientConfig& cfg, std::size_t round) {
  switch (cfg.scheduler.kind) {
    case SchedulerKind::None:
      return cfg.base_lr;
    case SchedulerKind::LinearDecay: {
      const auto total = cfg.scheduler.total_rounds;
      if (round >= total) {
        throw std::out_of_range("round " + std::to_string(round) +
                                " outside linear decay horizon " + std::to_string(total));
      }
      return cfg.base_lr *
             (1.0 - static_cast<double>(round) / static_cast<double>(total));
    }
  }
  return cfg.base_lr;
}

std::vector<std::size_t> epoch_order(const ClientConfig& cfg, std::uint32_t client_id,
                                     std::size_t round, std::size_t epoch, std::size_t n) {
  const auto round_seed = derive_seed(cfg.shuffle_seed, {client_id, round});
  std::mt19937_64 rng(derive_seed(round_seed, {epoch}));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // A single full batch is order-invariant; natural order keeps its gradient
  // bit-equal to the unshuffled shard gradient.
  if (cfg.batch_size < n) std::shuffle(order.begin(), order.end(), rng);
  return order;
}

bool momentum_is_cleared(const ClientState& state) {
  return !state.momentum_buffer || state.momentum_buffer->is_zero();
}

LocalUpdate client_update(ClientState& state, const ClientConfig& cfg,
                          const models::Model& model, const ParamVector& global_params,
                          std::size_t round, const StepObserver& observer) {
  cfg.validate();
  const auto& shard = state.shard;
  if (shard.size() == 0) {
    throw std::invalid_argument("client " + std::to_string(state.client_id) + " has an empty shard");
  }
  if (global_params.size() != model.parameter_count()) {
    throw DimensionMismatch(global_params.size(), model.parameter_count());
  }

  ParamVector w = global_params;
  const bool momentum = cfg.optimizer.kind == OptimizerKind::MomentumSgd;
  if (momentum) {
    state.momentum_buffer = ParamVector(w.size());
  } else {
    state.momentum_buffer.reset();
  }
  const double lr = effective_lr(cfg, round);
  const std::size_t n = shard.size();
  const std::size_t dim = shard.dim;

  std::vector<double> batch_x;
  std::vector<std::uint32_t> batch_y;
  batch_x.reserve(std::min(cfg.batch_size, n) * dim);
  batch_y.reserve(std::min(cfg.batch_size, n));
  ParamVector g;

  double loss_sum = 0.0;
  std::uint64_t loss_samples = 0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    const auto order = epoch_order(cfg, state.client_id, round, epoch, n);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(start + cfg.batch_size, n);
      batch_x.clear();
      batch_y.clear();
      for (std::size_t i = start; i < stop; ++i) {
        const auto row = shard.row(order[i]);
        batch_x.insert(batch_x.end(), row.begin(), row.end());
        batch_y.push_back(shard.labels[order[i]]);
      }
      const models::BatchView batch{dim, batch_x, batch_y};
      const double batch_loss = model.loss_and_grad(w, batch, g);
      loss_sum += batch_loss * static_cast<double>(batch.size());
      loss_samples += batch.size();

      if (cfg.prox_mu > 0.0) {
        for (std::size_t i = 0; i < w.size(); ++i) g[i] += cfg.prox_mu * (w[i] - global_params[i]);
      }
      if (observer) observer(StepTrace{round, epoch, step, state, w, g, lr});

      if (momentum) {
        auto& buf = *state.momentum_buffer;
        const double beta = cfg.optimizer.beta;
        for (std::size_t i = 0; i < w.size(); ++i) {
          buf[i] = beta * buf[i] + g[i];
          w[i] -= lr * buf[i];
        }
      } else {
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
      }
      ++step;
    }
  }
  if (!w.all_finite()) {
    throw NonFinite("client " + std::to_string(state.client_id) + " diverged in round " +
                    std::to_string(round));
  }
  return LocalUpdate{std::move(w), n, loss_sum / static_cast<double>(loss_samples), step};
}

LocalUpdate client_update(ClientState& state, const ClientConfig& cfg,
                          const models::ModelSpec& spec, const ParamVector& global_params,
                          std::size_t round, const StepObserver& observer) {
  const auto model = models::make_model(spec);
  return client_update(state, cfg, *model, global_params, round, observer);
}

}  // namespace fedsim::client
