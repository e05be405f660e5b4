// fedsim command-line entry point: partition, run, inspect (and the internal
// worker subcommand used by socket mode).

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedsim/datagen.hpp"
#include "fedsim/experiment.hpp"
#include "fedsim/server.hpp"
#include "fedsim/transport.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace fedsim;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kRuntime = 3, kIo = 4 };

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::vector<double> parse_alphas(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    double a = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), a);
    if (ec != std::errc() || ptr != item.data() + item.size() || !(a > 0)) {
      throw experiment::ConfigError(0, "--alphas: \"" + item + "\" is not a positive number");
    }
    out.push_back(a);
  }
  if (out.empty()) throw experiment::ConfigError(0, "--alphas: empty list");
  return out;
}

// --- partition --------------------------------------------------------------

struct PartitionArgs {
  std::string config;
  std::string out;
  std::string alphas;
};

void write_partition_files(const experiment::Prepared& prep, const fs::path& dir,
                           const std::string& suffix) {
  datagen::write_partition(prep.partition, dir / ("partition" + suffix + ".json"));
  const auto matrix = prep.items ? datagen::distribution_matrix(*prep.items, prep.partition)
                                 : datagen::distribution_matrix(prep.train, prep.partition);
  datagen::write_distribution_csv(matrix, dir / ("distribution" + suffix + ".csv"));
  std::cout << "wrote " << (dir / ("partition" + suffix + ".json")).string() << " ("
            << prep.partition.num_clients << " clients, zero-cell fraction "
            << format_double(matrix.zero_cell_fraction()) << ")\n";
}

int cmd_partition(const PartitionArgs& args) {
  auto cfg = experiment::load_config(args.config);
  const fs::path dir = args.out.empty() ? fs::path(cfg.output_dir) : fs::path(args.out);

  if (args.alphas.empty()) {
    const auto prep = experiment::prepare(cfg);
    fs::create_directories(dir);
    write_partition_files(prep, dir, "");
    return kOk;
  }
  if (cfg.partition.kind != experiment::PartitionConfig::Kind::Lda) {
    throw experiment::ConfigError(0, "--alphas needs an lda partition");
  }
  // Everything is prepared before the first write so a bad preset leaves no files.
  std::vector<std::pair<std::string, experiment::Prepared>> runs;
  for (double a : parse_alphas(args.alphas)) {
    auto c = cfg;
    c.partition.lda.alpha = a;
    runs.emplace_back("_alpha_" + format_double(a), experiment::prepare(c));
  }
  fs::create_directories(dir);
  for (const auto& [suffix, prep] : runs) write_partition_files(prep, dir, suffix);
  return kOk;
}

// --- run --------------------------------------------------------------------

struct RunArgs {
  std::string config;
  std::string out;
  std::string mode;
  std::size_t workers = 0;
  std::string port;
  std::string host = "127.0.0.1";
};

int cmd_run(const RunArgs& args) {
  auto cfg = experiment::load_config(args.config);
  if (args.mode == "simulate") {
    cfg.mode.kind = experiment::ModeConfig::Kind::Simulate;
  } else if (args.mode == "sockets") {
    cfg.mode.kind = experiment::ModeConfig::Kind::Sockets;
  }
  if (args.workers) cfg.mode.workers = args.workers;
  if (cfg.mode.workers > cfg.num_clients()) {
    throw experiment::ConfigError(0, "more workers than clients");
  }
  const fs::path dir = args.out.empty() ? fs::path(cfg.output_dir) : fs::path(args.out);
  std::uint16_t port = 0;
  try {
    port = transport::resolve_port(args.port);
  } catch (const std::invalid_argument& e) {
    throw experiment::ConfigError(0, e.what());
  }

  const auto prep = experiment::prepare(cfg);
  experiment::TrainingOutcome outcome;
  if (cfg.mode.kind == experiment::ModeConfig::Kind::Simulate) {
    outcome = experiment::run_simulated(cfg, prep);
  } else {
    experiment::SocketOptions opts;
    opts.worker_executable = fs::read_symlink("/proc/self/exe");
    opts.config_path = fs::absolute(args.config);
    opts.host = args.host;
    opts.port = port;
    outcome = experiment::run_sockets(cfg, prep, opts);
  }
  experiment::write_outputs(cfg, outcome, dir);

  const auto& last = outcome.metrics.back();
  std::cout << "rounds " << last.round << ", final test_acc " << format_double(last.test_accuracy)
            << ", test_loss " << format_double(last.test_loss) << "\n"
            << "wrote " << (dir / "metrics.csv").string() << " and "
            << (dir / "final_params.bin").string() << "\n";
  return kOk;
}

// --- worker (internal) ------------------------------------------------------

struct WorkerArgs {
  std::string config;
  std::uint32_t worker_id = 0;
  std::size_t workers = 1;
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

int cmd_worker(const WorkerArgs& args) {
  auto cfg = experiment::load_config(args.config);
  cfg.mode.kind = experiment::ModeConfig::Kind::Sockets;
  cfg.mode.workers = args.workers;
  experiment::run_worker_process(cfg, args.worker_id, args.host, args.port);
  return kOk;
}

// --- inspect ----------------------------------------------------------------

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw datagen::IoError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  return out;
}

void inspect_dataset(const std::string& bytes) {
  const auto ds = datagen::decode_dataset(
      std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()));
  std::cout << "dataset: n=" << ds.size() << " d=" << ds.dim << " classes=" << ds.num_classes << "\n";
  std::vector<std::size_t> counts(ds.num_classes, 0);
  for (auto l : ds.labels) ++counts[l];
  std::cout << "class counts:";
  for (auto c : counts) std::cout << " " << c;
  std::cout << "\n";
}

void inspect_metrics(const std::vector<std::string>& lines) {
  const auto header = split(lines[0], ',');
  const auto col = [&](const char* name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::invalid_argument(std::string("metrics CSV lacks column ") + name);
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto round_col = col("round");
  const auto acc_col = col("test_acc");
  const auto loss_col = col("test_loss");
  std::size_t rows = 0;
  std::string best_round, final_round;
  double best = -1, final_acc = 0, final_loss = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto cells = split(lines[i], ',');
    if (cells.size() < header.size()) {
      throw std::invalid_argument("metrics CSV line " + std::to_string(i + 1) + " is short");
    }
    const double acc = std::stod(cells[acc_col]);
    ++rows;
    if (acc > best) {
      best = acc;
      best_round = cells[round_col];
    }
    final_acc = acc;
    final_loss = std::stod(cells[loss_col]);
    final_round = cells[round_col];
  }
  if (rows == 0) {
    std::cout << "metrics: no rows\n";
    return;
  }
  std::cout << "metrics: " << rows << " rows, last round " << final_round << "\n"
            << "best test_acc " << format_double(best) << " at round " << best_round << "\n"
            << "final test_acc " << format_double(final_acc) << ", test_loss " << format_double(final_loss)
            << "\n";
}

void inspect_distribution(const std::vector<std::string>& lines) {
  const auto header = split(lines[0], ',');
  const std::size_t classes = header.size() - 1;
  std::size_t clients = 0, zero = 0, total = 0;
  std::size_t smallest = SIZE_MAX, largest = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto cells = split(lines[i], ',');
    std::size_t shard = 0;
    for (std::size_t c = 1; c < cells.size(); ++c) {
      const auto v = std::stoull(cells[c]);
      zero += v == 0;
      shard += v;
    }
    total += shard;
    smallest = std::min(smallest, shard);
    largest = std::max(largest, shard);
    ++clients;
  }
  std::cout << "distribution: " << clients << " clients x " << classes << " classes, " << total
            << " samples\n";
  if (clients) {
    std::cout << "shard sizes " << smallest << ".." << largest << ", zero-cell fraction "
              << format_double(static_cast<double>(zero) / static_cast<double>(clients * classes)) << "\n";
  }
}

void inspect_json(const std::string& text) {
  const auto doc = nlohmann::json::parse(text);
  if (doc.is_object() && doc.contains("assignments")) {
    const auto p = datagen::partition_from_json(text);
    std::size_t smallest = SIZE_MAX, largest = 0;
    for (const auto& a : p.assignments) {
      smallest = std::min(smallest, a.size());
      largest = std::max(largest, a.size());
    }
    std::cout << "partition: " << p.num_clients << " clients, " << p.total_size() << " samples, shard sizes "
              << smallest << ".." << largest << "\n";
    return;
  }
  if (doc.is_object() && doc.contains("num_categories") && doc.contains("items")) {
    std::cout << "multi-label items: " << doc["items"].size() << " items, " << doc["num_categories"]
              << " categories\n";
    return;
  }
  if (doc.is_object() && doc.contains("federation")) {
    const auto cfg = experiment::parse_config(text);
    std::cout << "config: " << cfg.num_clients() << " clients, " << cfg.federation.clients_per_round
              << " per round, " << cfg.federation.num_rounds << " rounds, aggregator "
              << server::to_string(cfg.aggregator.kind) << "\n";
    return;
  }
  throw std::invalid_argument("unrecognised JSON document");
}

int cmd_inspect(const std::string& path) {
  const auto bytes = read_all(path);
  if (!bytes.empty() && (bytes[0] == '{' || bytes[0] == '[')) {
    inspect_json(bytes);
    return kOk;
  }
  if (bytes.rfind("round,", 0) == 0 || bytes.rfind("client,", 0) == 0) {
    std::vector<std::string> lines;
    std::stringstream ss(bytes);
    for (std::string line; std::getline(ss, line);) lines.push_back(line);
    if (bytes[0] == 'r') {
      inspect_metrics(lines);
    } else {
      inspect_distribution(lines);
    }
    return kOk;
  }
  // Anything else is read as a dataset, which reports what is wrong with it.
  inspect_dataset(bytes);
  return kOk;
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const experiment::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const datagen::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const datagen::DatasetFormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const server::RoundAbort& e) {
    std::cerr << "round aborted: " << e.what() << "\n";
    return kRuntime;
  } catch (const NonFinite& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated training simulator"};
  app.require_subcommand(1);

  PartitionArgs part;
  auto* partition = app.add_subcommand("partition", "Write a partition JSON and client x class CSV");
  partition->add_option("--config", part.config, "Experiment config JSON")->required();
  partition->add_option("--out", part.out, "Output directory (default: output_dir)");
  partition->add_option("--alphas", part.alphas, "Comma-separated LDA alphas, one file pair each");

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Train and write metrics.csv and final_params.bin");
  run_cmd->add_option("--config", run.config, "Experiment config JSON")->required();
  run_cmd->add_option("--out", run.out, "Output directory (default: output_dir)");
  run_cmd->add_option("--mode", run.mode, "Override mode")->check(CLI::IsMember({"simulate", "sockets"}));
  run_cmd->add_option("--workers", run.workers, "Override worker count")->check(CLI::PositiveNumber);
  run_cmd->add_option("--port", run.port, "Listen port for sockets mode (0 = ephemeral)");
  run_cmd->add_option("--host", run.host, "Listen address for sockets mode");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "Summarize a dataset, partition, metrics or CSV file");
  inspect->add_option("path", inspect_path, "File to inspect")->required();

  WorkerArgs worker;
  auto* worker_cmd = app.add_subcommand("worker", "");
  worker_cmd->group("");
  worker_cmd->add_option("--config", worker.config)->required();
  worker_cmd->add_option("--worker-id", worker.worker_id)->required();
  worker_cmd->add_option("--workers", worker.workers)->required();
  worker_cmd->add_option("--host", worker.host);
  worker_cmd->add_option("--port", worker.port)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  if (*partition) return guarded([&] { return cmd_partition(part); });
  if (*run_cmd) return guarded([&] { return cmd_run(run); });
  if (*inspect) return guarded([&] { return cmd_inspect(inspect_path); });
  if (*worker_cmd) return guarded([&] { return cmd_worker(worker); });
  return kConfig;
}
