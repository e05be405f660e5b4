#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "cli_support.hpp"
#include "fedsim/datagen.hpp"
#include "fedsim/experiment.hpp"

using namespace fedsim;
using testing::run_cli;
using testing::shell_quote;
using testing::slurp;
using testing::spit;
namespace fs = std::filesystem;

namespace {

const char* kConfig = R"({
  "master_seed": 3,
  "federation": {"num_clients": 6, "clients_per_round": 3, "num_rounds": 4},
  "dataset": {"synthetic": {"num_classes": 4, "dim": 5, "samples_per_class": 40}},
  "partition": {"lda": {"alpha": 0.5}},
  "model": {"kind": "logistic_regression"},
  "client": {"base_lr": 0.1, "batch_size": 8, "optimizer": "momentum_sgd"},
  "eval_interval": 2
})";

struct Workspace {
  fs::path dir;
  fs::path config;
  explicit Workspace(const std::string& name, const std::string& text = kConfig)
      : dir(testing::fresh_dir("fedsim_cli_" + name)), config(dir / "config.json") {
    spit(config, text);
  }
  std::string q(const std::string& rel) const { return shell_quote((dir / rel).string()); }
  std::string cfg() const { return shell_quote(config.string()); }
};

}  // namespace

TEST_CASE("bad usage exits 2") {
  CHECK(run_cli("").exit_code == 2);
  CHECK(run_cli("frobnicate").exit_code == 2);
  CHECK(run_cli("run").exit_code == 2);
  Workspace ws("usage");
  CHECK(run_cli("run --config " + ws.cfg() + " --mode banana").exit_code == 2);
  CHECK(run_cli("run --config " + ws.cfg() + " --port 99999 --out " + ws.q("o")).exit_code == 2);
  CHECK(run_cli("run --config " + ws.cfg() + " --workers 7 --out " + ws.q("o")).exit_code == 2);
}

TEST_CASE("config errors exit 2 and name the line") {
  std::string text = kConfig;
  text.replace(text.find("\"alpha\": 0.5"), 12, "\"alpha\": -1");
  Workspace ws("config_error", text);
  const auto r = run_cli("run --config " + ws.cfg() + " --out " + ws.q("o"));
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("line 5") != std::string::npos);
  CHECK_FALSE(fs::exists(ws.dir / "o"));
}

TEST_CASE("missing or malformed files exit 4") {
  Workspace ws("io");
  CHECK(run_cli("run --config " + ws.q("nope.json")).exit_code == 4);
  spit(ws.dir / "junk.bin", "XXjunkjunkjunk");
  const auto r = run_cli("inspect " + ws.q("junk.bin"));
  CHECK(r.exit_code == 4);
  CHECK(r.output.find("offset") != std::string::npos);
  CHECK(run_cli("inspect " + ws.q("absent.bin")).exit_code == 4);
}

TEST_CASE("a diverging run exits 3") {
  std::string text = kConfig;
  text.replace(text.find("\"base_lr\": 0.1"), 14, "\"base_lr\": 1e308, \"local_epochs\": 5");
  Workspace ws("diverge", text);
  const auto r = run_cli("run --config " + ws.cfg() + " --out " + ws.q("o"));
  CHECK(r.exit_code == 3);
  CHECK(r.output.find("diverged") != std::string::npos);
  CHECK_FALSE(fs::exists(ws.dir / "o" / "metrics.csv"));
}

TEST_CASE("partition presets") {
  Workspace ws("presets");
  const auto r = run_cli("partition --config " + ws.cfg() + " --out " + ws.q("p") + " --alphas 0.1,1,100");
  REQUIRE(r.exit_code == 0);
  for (const char* a : {"0.1", "1", "100"}) {
    CHECK(fs::exists(ws.dir / "p" / (std::string("distribution_alpha_") + a + ".csv")));
    CHECK(fs::exists(ws.dir / "p" / (std::string("partition_alpha_") + a + ".json")));
  }
  const auto first = slurp(ws.dir / "p" / "distribution_alpha_0.1.csv");
  CHECK(first.rfind("client,", 0) == 0);
  REQUIRE(run_cli("partition --config " + ws.cfg() + " --out " + ws.q("p") + " --alphas 0.1,1,100").exit_code == 0);
  CHECK(slurp(ws.dir / "p" / "distribution_alpha_0.1.csv") == first);

  // A bad entry fails before anything is written.
  CHECK(run_cli("partition --config " + ws.cfg() + " --out " + ws.q("bad") + " --alphas 1,zero").exit_code == 2);
  CHECK_FALSE(fs::exists(ws.dir / "bad"));

  REQUIRE(run_cli("partition --config " + ws.cfg() + " --out " + ws.q("single")).exit_code == 0);
  const auto part = datagen::read_partition(ws.dir / "single" / "partition.json");
  CHECK(part.num_clients == 6);
  CHECK(part.total_size() == 128);
}

TEST_CASE("partition rejects a shard count that disagrees with the federation") {
  const auto dir = testing::fresh_dir("fedsim_cli_part_mismatch");
  datagen::Partition p{2, {{0, 1}, {2}}};
  datagen::write_partition(p, dir / "part.json");
  std::string text = kConfig;
  text.replace(text.find("{\"lda\": {\"alpha\": 0.5}}"), 23,
               "{\"file\": {\"path\": \"" + (dir / "part.json").string() + "\"}}");
  spit(dir / "config.json", text);
  const auto r = run_cli("partition --config " + shell_quote((dir / "config.json").string()) + " --out " +
                         shell_quote((dir / "o").string()));
  CHECK(r.exit_code == 2);
  CHECK_FALSE(fs::exists(dir / "o"));
}

TEST_CASE("run, replay and inspect") {
  Workspace ws("run");
  const auto a = run_cli("run --config " + ws.cfg() + " --out " + ws.q("a"));
  REQUIRE_MESSAGE(a.exit_code == 0, a.output);
  CHECK(a.output.find("final test_acc") != std::string::npos);
  REQUIRE(run_cli("run --config " + ws.cfg() + " --out " + ws.q("b") + " --workers 3").exit_code == 0);
  CHECK(slurp(ws.dir / "a" / "metrics.csv") == slurp(ws.dir / "b" / "metrics.csv"));
  CHECK(slurp(ws.dir / "a" / "final_params.bin") == slurp(ws.dir / "b" / "final_params.bin"));

  const auto metrics = slurp(ws.dir / "a" / "metrics.csv");
  CHECK(metrics.rfind("round,", 0) == 0);
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);  // header plus rounds 2 and 4

  const auto m = run_cli("inspect " + ws.q("a/metrics.csv"));
  CHECK(m.exit_code == 0);
  CHECK(m.output.find("metrics: 2 rows, last round 4") != std::string::npos);
  const auto p = run_cli("inspect " + ws.q("a/final_params.bin"));
  CHECK(p.exit_code == 0);
  CHECK(p.output.find("dataset: n=1 d=24") != std::string::npos);
  const auto c = run_cli("inspect " + ws.cfg());
  CHECK(c.exit_code == 0);
  CHECK(c.output.find("config: 6 clients") != std::string::npos);
}

TEST_CASE("sockets mode matches simulate mode byte for byte") {
  Workspace ws("sockets");
  const auto sim = run_cli("run --config " + ws.cfg() + " --out " + ws.q("sim") + " --mode simulate --workers 2");
  REQUIRE_MESSAGE(sim.exit_code == 0, sim.output);
  const auto tcp = run_cli("run --config " + ws.cfg() + " --out " + ws.q("tcp") +
                           " --mode sockets --workers 3 --port 0");
  REQUIRE_MESSAGE(tcp.exit_code == 0, tcp.output);
  CHECK(slurp(ws.dir / "sim" / "metrics.csv") == slurp(ws.dir / "tcp" / "metrics.csv"));
  CHECK(slurp(ws.dir / "sim" / "final_params.bin") == slurp(ws.dir / "tcp" / "final_params.bin"));
}
