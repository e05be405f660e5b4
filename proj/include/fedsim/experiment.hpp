#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsim/client.hpp"
#include "fedsim/datagen.hpp"
#include "fedsim/models.hpp"
#include "fedsim/server.hpp"

namespace fedsim::experiment {

/// Config validation failure. `line` is 1-based, 0 when unknown.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::size_t line, const std::string& message);
  std::size_t line() const noexcept { return line_; }
  const std::string& message() const noexcept { return message_; }

 private:
  std::size_t line_;
  std::string message_;
};

struct SyntheticDataset {
  std::uint32_t num_classes = 10;
  std::size_t dim = 10;
  std::size_t samples_per_class = 100;
  double class_separation = 2.0;
  std::uint64_t seed = 0;
  friend bool operator==(const SyntheticDataset&, const SyntheticDataset&) = default;
};

struct DatasetConfig {
  enum class Source { Synthetic, File } source = Source::Synthetic;
  SyntheticDataset synthetic;
  std::string path;       // File
  std::string test_path;  // File; empty = hold out test_fraction of `path`
  double test_fraction = 0.2;
  std::uint64_t split_seed = 0;
  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct PartitionConfig {
  enum class Kind { Lda, Frequency, File } kind = Kind::Lda;
  datagen::LdaConfig lda;
  std::size_t num_clients = 1;  // Frequency
  std::string path;             // File: partition JSON
  std::string items_path;       // Frequency: optional multi-label items JSON
  friend bool operator==(const PartitionConfig& a, const PartitionConfig& b) {
    return a.kind == b.kind && a.lda.alpha == b.lda.alpha && a.lda.num_clients == b.lda.num_clients &&
           a.lda.min_shard_size == b.lda.min_shard_size && a.lda.seed == b.lda.seed &&
           a.num_clients == b.num_clients && a.path == b.path && a.items_path == b.items_path;
  }
};

struct ModeConfig {
  enum class Kind { Simulate, Sockets } kind = Kind::Simulate;
  std::size_t workers = 1;
  friend bool operator==(const ModeConfig&, const ModeConfig&) = default;
};

/// Whole-run description. Every seed left out of the JSON is derived from
/// master_seed with derive_seed(master_seed, tag); see kSeedTags.
struct ExperimentConfig {
  DatasetConfig dataset;
  PartitionConfig partition;
  models::ModelSpec model;
  client::ClientConfig client;
  server::FederationConfig federation;
  server::AggregatorConfig aggregator;
  ModeConfig mode;
  std::size_t eval_interval = 1;
  std::string output_dir = "out";
  std::uint64_t master_seed = 0;
  bool record_wall_time = false;

  std::size_t num_clients() const noexcept { return federation.num_clients; }
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Domain tags for seed splitting, in the order they are documented.
inline constexpr const char* kSeedTags[] = {"dataset", "split", "partition", "model_init",
                                            "shuffle", "sampling"};

/// Parses and validates. Errors carry the line of the offending key.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Fully explicit JSON (all seeds written out); parses back to an equal config.
std::string serialize_config(const ExperimentConfig& cfg);

/// Datasets, shards and initial parameters for a run.
struct Prepared {
  datagen::LabeledDataset train;
  datagen::LabeledDataset test;
  datagen::Partition partition;
  // Category sets behind a frequency partition, one per training sample.
  std::optional<datagen::MultiLabelDataset> items;
  models::ModelSpec model;
  std::shared_ptr<const models::Classifier> classifier;
  ParamVector initial_params;

  std::vector<client::ClientState> client_states() const;
};

/// Loads or generates the data and builds the partition. Cross-file
/// consistency problems raise ConfigError.
Prepared prepare(const ExperimentConfig& cfg);

struct TrainingOutcome {
  std::vector<server::RoundMetrics> metrics;
  ParamVector final_params;
};

/// Round loop over a caller-supplied executor.
TrainingOutcome run_with_executor(const ExperimentConfig& cfg, const Prepared& prepared,
                                  server::ClientExecutor& executor);

/// Runs with simulate mode: cfg.mode.workers worker threads joined to the
/// server through the in-process bus.
TrainingOutcome run_simulated(const ExperimentConfig& cfg, const Prepared& prepared);

struct SocketOptions {
  std::filesystem::path worker_executable;  // invoked as: <exe> worker --config ...
  std::filesystem::path config_path;
  std::string host = "127.0.0.1";
  std::uint16_t port = 9898;  // 0 = ephemeral
  std::chrono::milliseconds accept_timeout{30000};
  std::chrono::milliseconds shutdown_grace{5000};
};

/// Runs with socket mode: spawns cfg.mode.workers worker processes that
/// connect back over TCP.
TrainingOutcome run_sockets(const ExperimentConfig& cfg, const Prepared& prepared,
                            const SocketOptions& opts);

/// Entry point of a spawned worker process.
void run_worker_process(const ExperimentConfig& cfg, std::uint32_t worker_id,
                        const std::string& host, std::uint16_t port);

/// Writes metrics.csv and final_params.bin under `dir`.
void write_outputs(const ExperimentConfig& cfg, const TrainingOutcome& outcome,
                   const std::filesystem::path& dir);

/// Final parameters in the dataset binary layout: one row of d = len values,
/// one class, label 0.
void write_params(const ParamVector& params, const std::filesystem::path& path);
ParamVector read_params(const std::filesystem::path& path);

}  // namespace fedsim::experiment
