#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <random>
#include <set>

#include "fedsim/datagen.hpp"
#include "fedsim/server.hpp"
#include "support.hpp"

using namespace fedsim;
using namespace fedsim::server;

namespace {

ClientResult result(std::uint32_t id, ParamVector p, std::uint64_t n, std::uint64_t steps = 1) {
  return ClientResult{id, std::move(p), n, 0.5, steps};
}

std::vector<ClientResult> random_results(std::mt19937_64& rng, std::size_t k, std::size_t len) {
  std::vector<ClientResult> rs;
  for (std::size_t i = 0; i < k; ++i) {
    rs.push_back(result(static_cast<std::uint32_t>(i * 3 + 1), testing::random_params(rng, len),
                        testing::pick(rng, 1, 200), testing::pick(rng, 1, 20)));
  }
  return rs;
}

AggregatorConfig fedopt(ServerOptKind kind, double lr) {
  AggregatorConfig a;
  a.kind = AggregatorKind::FedOpt;
  a.server_opt.kind = kind;
  a.server_opt.server_lr = lr;
  return a;
}

// Executor that lets tests inject faulty results.
class Scripted final : public ClientExecutor {
 public:
  std::function<std::vector<ClientResult>(std::span<const std::uint32_t>, const ParamVector&)> fn;
  std::vector<ClientResult> run_clients(std::size_t, std::span<const std::uint32_t> cohort,
                                        const ParamVector& w) override {
    return fn(cohort, w);
  }
};

struct Federation {
  std::vector<client::ClientState> states;
  datagen::LabeledDataset test;
  std::shared_ptr<models::Classifier> model;
};

Federation make_federation(std::size_t k, double alpha, std::uint64_t seed) {
  const auto all = datagen::generate_synthetic(10, 10, 100, 2.0, seed);
  auto [train, test] = datagen::train_test_split(all, 0.2, seed);
  const auto part = datagen::lda_partition(train, datagen::LdaConfig{alpha, k, 1, seed});
  Federation f;
  for (std::size_t c = 0; c < k; ++c) {
    f.states.push_back(client::ClientState{static_cast<std::uint32_t>(c), train.subset(part.assignments[c]),
                                           std::nullopt});
  }
  f.test = std::move(test);
  f.model = models::make_model(models::ModelSpec{models::ModelKind::LogisticRegression, 10, 10, 16, seed, 0.01});
  return f;
}

}  // namespace

TEST_CASE("sample_cohort") {
  FederationConfig full{5, 5, 1, 9};
  CHECK(sample_cohort(full, 3) == std::vector<std::uint32_t>{0, 1, 2, 3, 4});
  FederationConfig gld{233, 10, 1, 42};
  for (std::size_t t = 0; t < 50; ++t) {
    const auto c = sample_cohort(gld, t);
    CHECK(c.size() == 10);
    CHECK(std::set<std::uint32_t>(c.begin(), c.end()).size() == 10);
    CHECK(std::all_of(c.begin(), c.end(), [](auto id) { return id < 233; }));
    CHECK(std::is_sorted(c.begin(), c.end()));
    CHECK(c == sample_cohort(gld, t));
  }
  CHECK_FALSE(sample_cohort(gld, 0) == sample_cohort(gld, 1));
  CHECK_THROWS(sample_cohort(FederationConfig{3, 4, 1, 0}, 0));
  CHECK_THROWS(FederationConfig{3, 0, 1, 0}.validate());
  CHECK_THROWS(FederationConfig{0, 0, 1, 0}.validate());
  CHECK_THROWS(FederationConfig{3, 3, 0, 0}.validate());
}

TEST_CASE("fedavg examples") {
  const std::vector one{result(4, {1.5, -2}, 10)};
  CHECK(aggregate_fedavg(one) == ParamVector{1.5, -2});
  const std::vector two{result(0, {0}, 1), result(1, {4}, 3)};
  CHECK(aggregate_fedavg(two) == ParamVector{3});
}

TEST_CASE("fedavg rejects malformed inputs") {
  CHECK_THROWS(aggregate_fedavg(std::vector<ClientResult>{}));
  CHECK_THROWS(aggregate_fedavg(std::vector{result(0, {1}, 1), result(0, {2}, 1)}));
  CHECK_THROWS(aggregate_fedavg(std::vector{result(0, {1}, 0)}));
  CHECK_THROWS_AS(aggregate_fedavg(std::vector{result(0, {1}, 1), result(1, {1, 2}, 1)}), DimensionMismatch);
}

TEST_CASE("property: aggregation ignores input order and weights sum to one") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    auto rs = random_results(rng, testing::pick(rng, 1, 12), testing::pick(rng, 1, 20));
    const auto expected = aggregate_fedavg(rs);
    std::shuffle(rs.begin(), rs.end(), rng);
    CHECK(aggregate_fedavg(rs) == expected);
    const ParamVector wt = testing::random_params(rng, rs.front().params.size());
    auto rs2 = rs;
    std::shuffle(rs2.begin(), rs2.end(), rng);
    CHECK(aggregate_fednova(wt, rs) == aggregate_fednova(wt, rs2));

    std::sort(rs.begin(), rs.end(), [](auto& a, auto& b) { return a.client_id < b.client_id; });
    double sum = 0;
    for (double w : sample_weights(rs)) sum += w;
    CHECK(std::abs(sum - 1.0) <= 1e-15);
  }
}

TEST_CASE("fedopt") {
  const ParamVector w{0.5, -1.0};
  SUBCASE("no movement with zero pseudo-gradient") {
    auto agg = fedopt(ServerOptKind::Adam, 0.1);
    auto st = ServerState::initial(w, agg);
    const std::vector same{result(0, w, 3), result(1, w, 5)};
    CHECK(aggregate_fedopt(st, agg, same) == w);
  }
  SUBCASE("Adam first step, constant delta") {
    auto agg = fedopt(ServerOptKind::Adam, 0.1);
    auto st = ServerState::initial(ParamVector{0.0, 0.0}, agg);
    const std::vector c{result(0, {1.0, 1.0}, 2)};
    const auto next = aggregate_fedopt(st, agg, c);
    // 0.1 * 0.1 / (sqrt(0.01) + 0.001) = 0.0990099...
    for (double v : next) CHECK(v == doctest::Approx(0.1 * 0.1 / (0.1 + 0.001)).epsilon(1e-14));
    CHECK(next[0] == doctest::Approx(0.0990099).epsilon(1e-6));
    CHECK((*st.adam_m)[0] == doctest::Approx(0.1));
    CHECK((*st.adam_v)[0] == doctest::Approx(0.01));
  }
  SUBCASE("server SGD with lr 1 is FedAvg, lr 0.5 is halfway") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 50; ++trial) {
      const auto rs = random_results(rng, testing::pick(rng, 1, 8), 6);
      auto st = ServerState::initial(testing::random_params(rng, 6), AggregatorConfig{});
      CHECK(aggregate_fedopt(st, fedopt(ServerOptKind::Sgd, 1.0), rs) == aggregate_fedavg(rs));
      const auto half = aggregate_fedopt(st, fedopt(ServerOptKind::Sgd, 0.5), rs);
      const auto avg = aggregate_fedavg(rs);
      for (std::size_t i = 0; i < 6; ++i) {
        CHECK(half[i] == doctest::Approx(0.5 * (st.global_params[i] + avg[i])).epsilon(1e-12));
      }
    }
  }
  SUBCASE("server optimizer validation") {
    CHECK_THROWS(fedopt(ServerOptKind::Sgd, 0.0).validate());
    auto a = fedopt(ServerOptKind::Adam, 0.1);
    a.server_opt.beta2 = 1.0;
    CHECK_THROWS(a.validate());
    a = fedopt(ServerOptKind::Adam, 0.1);
    a.server_opt.tau = 0;
    CHECK_THROWS(a.validate());
  }
}

TEST_CASE("fednova") {
  const std::vector hand{result(0, {-1}, 5, 1), result(1, {-3}, 5, 3)};
  CHECK(aggregate_fednova(ParamVector{0}, hand) == ParamVector{-2});

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto wt = testing::random_params(rng, 5);
    auto single = random_results(rng, 1, 5);
    CHECK(max_abs_diff(aggregate_fednova(wt, single), single[0].params) <= 1e-12);

    auto rs = random_results(rng, testing::pick(rng, 2, 8), 5);
    const auto a = testing::pick(rng, 1, 30);
    for (auto& r : rs) r.local_steps = a;
    CHECK(max_abs_diff(aggregate_fednova(wt, rs), aggregate_fedavg(rs)) <= 1e-12);
  }
  CHECK_THROWS(aggregate_fednova(ParamVector{0}, std::vector{result(0, {1}, 1, 0)}));
}

TEST_CASE("run_round: single client adopts its result") {
  auto f = make_federation(1, 1.0, 4);
  LocalExecutor exec(f.states, client::ClientConfig{}, f.model);
  auto st = ServerState::initial(f.model->init_params(), AggregatorConfig{});
  client::ClientState copy = f.states[0];
  const auto expected = client::client_update(copy, client::ClientConfig{}, *f.model, st.global_params, 0);
  const auto m = run_round(st, FederationConfig{1, 1, 1, 0}, exec, AggregatorConfig{});
  CHECK(st.global_params == expected.params);
  CHECK(st.round == 1);
  CHECK(m.round == 1);
  CHECK(m.mean_client_train_loss == expected.train_loss);
  CHECK_FALSE(m.evaluated);
}

TEST_CASE("run_round: failures abort without partial aggregation") {
  const ParamVector w0{1.0, 2.0};
  const FederationConfig fed{3, 2, 5, 11};
  Scripted ex;
  auto st = ServerState::initial(w0, AggregatorConfig{});
  auto expect_abort = [&] {
    CHECK_THROWS_AS(run_round(st, fed, ex, AggregatorConfig{}), RoundAbort);
    CHECK(st.global_params == w0);
    CHECK(st.round == 0);
  };
  ex.fn = [](auto, const ParamVector&) -> std::vector<ClientResult> { throw std::runtime_error("boom"); };
  expect_abort();
  ex.fn = [](auto cohort, const ParamVector& w) { return std::vector{result(cohort[0], w, 1)}; };
  expect_abort();
  ex.fn = [](auto cohort, const ParamVector& w) {
    return std::vector{result(cohort[0], w, 1), result(cohort[0], w, 1)};
  };
  expect_abort();
  ex.fn = [](auto cohort, const ParamVector&) {
    return std::vector{result(cohort[0], {1.0}, 1), result(cohort[1], {1.0}, 1)};
  };
  expect_abort();
  ex.fn = [](auto cohort, const ParamVector& w) {
    return std::vector{result(cohort[0], w, 1), result(cohort[1], {INFINITY, 0.0}, 1)};
  };
  expect_abort();

  // A diverging client inside LocalExecutor also surfaces as RoundAbort.
  std::shared_ptr<models::Classifier> model =
      models::make_model(models::ModelSpec{models::ModelKind::LogisticRegression, 1, 2, 1, 0, 0.0});
  std::vector<client::ClientState> states{{0, datagen::LabeledDataset{1, 2, {1e200}, {1}}, std::nullopt}};
  client::ClientConfig huge;
  huge.base_lr = 1e200;
  LocalExecutor bad(states, huge, model);
  auto st2 = ServerState::initial(model->init_params(), AggregatorConfig{});
  CHECK_THROWS_AS(run_round(st2, FederationConfig{1, 1, 1, 0}, bad, AggregatorConfig{}), RoundAbort);
  CHECK(st2.round == 0);
}

TEST_CASE("run_rounds evaluates on schedule and replays exactly") {
  auto f = make_federation(6, 0.5, 7);
  const FederationConfig fed{6, 3, 7, 5};
  client::ClientConfig cfg;
  cfg.batch_size = 8;
  auto model = f.model;
  const auto* test = &f.test;
  Evaluator eval = [model, test](const ParamVector& w) { return models::evaluate(*model, w, *test); };

  auto run = [&](std::size_t threads) {
    LocalExecutor exec(f.states, cfg, f.model, threads);
    auto st = ServerState::initial(f.model->init_params(), AggregatorConfig{});
    auto rows = run_rounds(st, fed, exec, AggregatorConfig{}, eval, 3);
    return std::make_pair(rows, st.global_params);
  };
  const auto [rows, w] = run(1);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].round == 3);
  CHECK(rows[1].round == 6);
  CHECK(rows[2].round == 7);
  for (const auto& r : rows) CHECK(r.evaluated);

  const auto [rows2, w2] = run(4);
  CHECK(w2 == w);
  CHECK(metrics_csv(rows2, false) == metrics_csv(rows, false));
  CHECK(metrics_csv(rows, false).rfind("round,test_acc,test_loss,train_loss,wall_time_ms\n3,", 0) == 0);
}

TEST_CASE("federated IID training reaches 95% in 20 rounds") {
  auto f = make_federation(10, 100.0, 8);
  client::ClientConfig cfg;
  cfg.batch_size = 16;
  cfg.base_lr = 0.1;
  LocalExecutor exec(f.states, cfg, f.model, 4);
  auto st = ServerState::initial(f.model->init_params(), AggregatorConfig{});
  auto model = f.model;
  const auto* test = &f.test;
  const auto rows = run_rounds(st, FederationConfig{10, 10, 20, 1}, exec, AggregatorConfig{},
                               [&](const ParamVector& w) { return models::evaluate(*model, w, *test); }, 20);
  CHECK(rows.back().test_accuracy >= 0.95);
}

TEST_CASE("metrics_csv formatting") {
  RoundMetrics r{2, true, 0.5, 1.25, 0.75, 12.6};
  const std::vector rows{r};
  CHECK(metrics_csv(rows, false) == "round,test_acc,test_loss,train_loss,wall_time_ms\n2,0.5,1.25,0.75,0\n");
  CHECK(metrics_csv(rows, true) == "round,test_acc,test_loss,train_loss,wall_time_ms\n2,0.5,1.25,0.75,13\n");
}
