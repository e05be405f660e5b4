#include "fedsim/experiment.hpp"

#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <thread>

#include "fedsim/seed.hpp"
#include "fedsim/transport.hpp"
#include "json.hpp"

extern char** environ;

namespace fedsim::experiment {

using nlohmann::json;
using nlohmann::ordered_json;

ConfigError::ConfigError(std::size_t line, const std::string& message)
    : std::invalid_argument(line ? "line " + std::to_string(line) + ": " + message : message),
      line_(line),
      message_(message) {}

// ---------------------------------------------------------------------------
// Parsing

namespace {

using Path = std::vector<std::string>;

std::string join(const Path& p) {
  std::string out;
  for (const auto& k : p) out += (out.empty() ? "" : ".") + k;
  return out.empty() ? "<root>" : out;
}

class Parser {
 public:
  explicit Parser(const std::string& text) : text_(text) {}

  // Line of the deepest key of `p` found by walking the quoted keys in order.
  std::size_t line_of(const Path& p) const {
    std::size_t pos = 0;
    bool found_any = false;
    for (const auto& key : p) {
      const auto at = text_.find("\"" + key + "\"", pos);
      if (at == std::string::npos) break;
      pos = at;
      found_any = true;
    }
    if (!found_any) return 1;
    return 1 + static_cast<std::size_t>(std::count(text_.begin(), text_.begin() + pos, '\n'));
  }

  [[noreturn]] void fail(const Path& p, const std::string& msg) const {
    throw ConfigError(line_of(p), join(p) + ": " + msg);
  }

  const json& object(const json& j, const Path& p) const {
    if (!j.is_object()) fail(p, "expected an object");
    return j;
  }

  void allow_keys(const json& obj, const Path& p, std::initializer_list<const char*> allowed) const {
    for (const auto& [key, _] : obj.items()) {
      if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
        Path q = p;
        q.push_back(key);
        fail(q, "unknown key");
      }
    }
  }

  const json* find(const json& obj, const char* key) const {
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
  }

  const json& require(const json& obj, const Path& p, const char* key) const {
    const json* v = find(obj, key);
    if (!v) fail(p, std::string("missing required key \"") + key + "\"");
    return *v;
  }

  std::uint64_t u64(const json& v, const Path& p) const {
    if (!v.is_number_unsigned()) fail(p, "expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  double number(const json& v, const Path& p) const {
    if (!v.is_number()) fail(p, "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) fail(p, "expected a finite number");
    return d;
  }

  std::string string(const json& v, const Path& p) const {
    if (!v.is_string()) fail(p, "expected a string");
    return v.get<std::string>();
  }

  bool boolean(const json& v, const Path& p) const {
    if (!v.is_boolean()) fail(p, "expected true or false");
    return v.get<bool>();
  }

  // get-or-default helpers keyed by name under `p`.
  std::uint64_t u64(const json& obj, const Path& p, const char* key, std::uint64_t dflt) const {
    const json* v = find(obj, key);
    return v ? u64(*v, sub(p, key)) : dflt;
  }
  std::uint64_t u64_required(const json& obj, const Path& p, const char* key) const {
    return u64(require(obj, p, key), sub(p, key));
  }
  double number(const json& obj, const Path& p, const char* key, double dflt) const {
    const json* v = find(obj, key);
    return v ? number(*v, sub(p, key)) : dflt;
  }

  static Path sub(const Path& p, const std::string& key) {
    Path q = p;
    q.push_back(key);
    return q;
  }

  // A tagged union written either as "tag" or {"tag": {...}}.
  std::pair<std::string, const json*> variant(const json& v, const Path& p) const {
    static const json kEmpty = json::object();
    if (v.is_string()) return {v.get<std::string>(), &kEmpty};
    if (!v.is_object() || v.size() != 1) fail(p, "expected a string or a single-key object");
    const auto it = v.begin();
    if (!it.value().is_object()) fail(sub(p, it.key()), "expected an object");
    return {it.key(), &it.value()};
  }

 private:
  const std::string& text_;
};

std::uint64_t seed_or_derived(const Parser& ps, const json& obj, const Path& p, const char* key,
                              std::uint64_t master, const char* tag) {
  const json* v = ps.find(obj, key);
  return v ? ps.u64(*v, Parser::sub(p, key)) : derive_seed(master, tag);
}

template <typename Fn>
void guarded(const Parser& ps, const Path& p, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    ps.fail(p, e.what());
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto byte = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + static_cast<std::size_t>(
                              std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte ? byte - 1 : 0), '\n'));
    throw ConfigError(line, std::string("invalid JSON: ") + e.what());
  }
  Parser ps(text);
  const Path root;
  ps.object(doc, root);
  ps.allow_keys(doc, root,
                {"dataset", "partition", "model", "client", "federation", "aggregator", "mode",
                 "eval_interval", "output_dir", "master_seed", "record_wall_time"});

  ExperimentConfig cfg;
  cfg.master_seed = ps.u64(doc, root, "master_seed", 0);
  const auto master = cfg.master_seed;
  cfg.eval_interval = ps.u64(doc, root, "eval_interval", 1);
  if (cfg.eval_interval == 0) ps.fail({"eval_interval"}, "must be >= 1");
  if (const json* v = ps.find(doc, "output_dir")) cfg.output_dir = ps.string(*v, {"output_dir"});
  if (const json* v = ps.find(doc, "record_wall_time")) {
    cfg.record_wall_time = ps.boolean(*v, {"record_wall_time"});
  }

  // federation
  {
    const Path p{"federation"};
    const auto& fed = ps.object(ps.require(doc, root, "federation"), p);
    ps.allow_keys(fed, p, {"num_clients", "clients_per_round", "num_rounds", "sampling_seed"});
    cfg.federation.num_clients = ps.u64_required(fed, p, "num_clients");
    cfg.federation.clients_per_round = ps.u64(fed, p, "clients_per_round", cfg.federation.num_clients);
    cfg.federation.num_rounds = ps.u64_required(fed, p, "num_rounds");
    cfg.federation.sampling_seed = seed_or_derived(ps, fed, p, "sampling_seed", master, "sampling");
    guarded(ps, p, [&] { cfg.federation.validate(); });
  }
  const auto k = cfg.federation.num_clients;

  // dataset
  {
    const Path p{"dataset"};
    const auto& ds = ps.object(ps.require(doc, root, "dataset"), p);
    ps.allow_keys(ds, p, {"synthetic", "file", "test_fraction", "split_seed"});
    cfg.dataset.test_fraction = ps.number(ds, p, "test_fraction", 0.2);
    cfg.dataset.split_seed = seed_or_derived(ps, ds, p, "split_seed", master, "split");
    const bool has_syn = ps.find(ds, "synthetic") != nullptr;
    const bool has_file = ps.find(ds, "file") != nullptr;
    if (has_syn == has_file) ps.fail(p, "exactly one of \"synthetic\" or \"file\" is required");
    if (has_syn) {
      const Path q{"dataset", "synthetic"};
      const auto& s = ps.object(ds["synthetic"], q);
      ps.allow_keys(s, q, {"num_classes", "dim", "samples_per_class", "class_separation", "seed"});
      cfg.dataset.source = DatasetConfig::Source::Synthetic;
      auto& syn = cfg.dataset.synthetic;
      const auto classes = ps.u64_required(s, q, "num_classes");
      if (classes == 0 || classes > 0xFFFFFFFFULL) ps.fail(Parser::sub(q, "num_classes"), "out of range");
      syn.num_classes = static_cast<std::uint32_t>(classes);
      syn.dim = ps.u64_required(s, q, "dim");
      syn.samples_per_class = ps.u64_required(s, q, "samples_per_class");
      syn.class_separation = ps.number(s, q, "class_separation", 2.0);
      syn.seed = seed_or_derived(ps, s, q, "seed", master, "dataset");
      if (syn.dim == 0) ps.fail(Parser::sub(q, "dim"), "must be >= 1");
      if (syn.samples_per_class == 0) ps.fail(Parser::sub(q, "samples_per_class"), "must be >= 1");
      if (syn.class_separation < 0) ps.fail(Parser::sub(q, "class_separation"), "must be >= 0");
    } else {
      const Path q{"dataset", "file"};
      const auto& f = ps.object(ds["file"], q);
      ps.allow_keys(f, q, {"path", "test_path"});
      cfg.dataset.source = DatasetConfig::Source::File;
      cfg.dataset.path = ps.string(ps.require(f, q, "path"), Parser::sub(q, "path"));
      if (const json* v = ps.find(f, "test_path")) cfg.dataset.test_path = ps.string(*v, Parser::sub(q, "test_path"));
    }
    if (cfg.dataset.test_path.empty() &&
        !(cfg.dataset.test_fraction > 0.0 && cfg.dataset.test_fraction < 1.0)) {
      ps.fail(Parser::sub(p, "test_fraction"), "must lie in (0, 1)");
    }
  }

  // partition
  {
    const Path p{"partition"};
    const auto [kind, body] = ps.variant(ps.require(doc, root, "partition"), p);
    const Path q = Parser::sub(p, kind);
    if (kind == "lda") {
      ps.allow_keys(*body, q, {"alpha", "num_clients", "min_shard_size", "seed"});
      cfg.partition.kind = PartitionConfig::Kind::Lda;
      cfg.partition.lda.alpha = ps.number(ps.require(*body, q, "alpha"), Parser::sub(q, "alpha"));
      if (!(cfg.partition.lda.alpha > 0.0)) ps.fail(Parser::sub(q, "alpha"), "must be > 0");
      cfg.partition.lda.num_clients = ps.u64(*body, q, "num_clients", k);
      if (cfg.partition.lda.num_clients != k) {
        ps.fail(Parser::sub(q, "num_clients"),
                "partition has " + std::to_string(cfg.partition.lda.num_clients) +
                    " clients but federation.num_clients is " + std::to_string(k));
      }
      cfg.partition.lda.min_shard_size = ps.u64(*body, q, "min_shard_size", 1);
      if (cfg.partition.lda.min_shard_size == 0) ps.fail(Parser::sub(q, "min_shard_size"), "must be >= 1");
      cfg.partition.lda.seed = seed_or_derived(ps, *body, q, "seed", master, "partition");
      cfg.partition.num_clients = k;
    } else if (kind == "frequency") {
      ps.allow_keys(*body, q, {"num_clients", "items_path"});
      cfg.partition.kind = PartitionConfig::Kind::Frequency;
      cfg.partition.num_clients = ps.u64(*body, q, "num_clients", k);
      if (cfg.partition.num_clients != k) {
        ps.fail(Parser::sub(q, "num_clients"),
                "partition has " + std::to_string(cfg.partition.num_clients) +
                    " clients but federation.num_clients is " + std::to_string(k));
      }
      if (const json* v = ps.find(*body, "items_path")) {
        cfg.partition.items_path = ps.string(*v, Parser::sub(q, "items_path"));
      }
      cfg.partition.lda.num_clients = k;
    } else if (kind == "file") {
      ps.allow_keys(*body, q, {"path"});
      cfg.partition.kind = PartitionConfig::Kind::File;
      cfg.partition.path = ps.string(ps.require(*body, q, "path"), Parser::sub(q, "path"));
      cfg.partition.num_clients = k;
      cfg.partition.lda.num_clients = k;
    } else {
      ps.fail(p, "unknown partition kind \"" + kind + "\" (lda, frequency, file)");
    }
  }

  // model
  {
    const Path p{"model"};
    const auto& m = ps.object(ps.require(doc, root, "model"), p);
    ps.allow_keys(m, p, {"kind", "input_dim", "num_classes", "hidden_dim", "init_seed", "init_scale"});
    auto& spec = cfg.model;
    guarded(ps, Parser::sub(p, "kind"), [&] {
      spec.kind = models::model_kind_from_string(ps.string(ps.require(m, p, "kind"), Parser::sub(p, "kind")));
    });
    const bool synthetic = cfg.dataset.source == DatasetConfig::Source::Synthetic;
    // For file datasets 0 means "take from the file"; checked in prepare().
    spec.input_dim = ps.u64(m, p, "input_dim", synthetic ? cfg.dataset.synthetic.dim : 0);
    const auto classes = ps.u64(m, p, "num_classes", synthetic ? cfg.dataset.synthetic.num_classes : 0);
    if (classes > 0xFFFFFFFFULL) ps.fail(Parser::sub(p, "num_classes"), "out of range");
    spec.num_classes = static_cast<std::uint32_t>(classes);
    spec.hidden_dim = ps.u64(m, p, "hidden_dim", spec.hidden_dim);
    spec.init_seed = seed_or_derived(ps, m, p, "init_seed", master, "model_init");
    spec.init_scale = ps.number(m, p, "init_scale", 0.01);
    if (synthetic) {
      if (spec.input_dim != cfg.dataset.synthetic.dim) {
        ps.fail(Parser::sub(p, "input_dim"), "does not match dataset.synthetic.dim");
      }
      if (spec.num_classes != cfg.dataset.synthetic.num_classes) {
        ps.fail(Parser::sub(p, "num_classes"), "does not match dataset.synthetic.num_classes");
      }
      guarded(ps, p, [&] { spec.validate(); });
    }
  }

  // client
  {
    const Path p{"client"};
    const auto& c = ps.object(ps.require(doc, root, "client"), p);
    ps.allow_keys(c, p, {"local_epochs", "batch_size", "base_lr", "optimizer", "scheduler", "prox_mu",
                         "shuffle_seed"});
    auto& cc = cfg.client;
    cc.local_epochs = ps.u64(c, p, "local_epochs", 1);
    cc.batch_size = ps.u64(c, p, "batch_size", 32);
    cc.base_lr = ps.number(ps.require(c, p, "base_lr"), Parser::sub(p, "base_lr"));
    cc.prox_mu = ps.number(c, p, "prox_mu", 0.0);
    cc.shuffle_seed = seed_or_derived(ps, c, p, "shuffle_seed", master, "shuffle");
    if (const json* v = ps.find(c, "optimizer")) {
      const Path q = Parser::sub(p, "optimizer");
      const auto [kind, body] = ps.variant(*v, q);
      if (kind == "sgd") {
        ps.allow_keys(*body, Parser::sub(q, kind), {});
        cc.optimizer.kind = client::OptimizerKind::Sgd;
      } else if (kind == "momentum_sgd") {
        ps.allow_keys(*body, Parser::sub(q, kind), {"beta"});
        cc.optimizer.kind = client::OptimizerKind::MomentumSgd;
        cc.optimizer.beta = ps.number(*body, Parser::sub(q, kind), "beta", client::kDefaultMomentum);
      } else {
        ps.fail(q, "unknown optimizer \"" + kind + "\" (sgd, momentum_sgd)");
      }
    }
    if (const json* v = ps.find(c, "scheduler")) {
      const Path q = Parser::sub(p, "scheduler");
      const auto [kind, body] = ps.variant(*v, q);
      if (kind == "none") {
        ps.allow_keys(*body, Parser::sub(q, kind), {});
        cc.scheduler.kind = client::SchedulerKind::None;
      } else if (kind == "linear_decay") {
        ps.allow_keys(*body, Parser::sub(q, kind), {"total_rounds"});
        cc.scheduler.kind = client::SchedulerKind::LinearDecay;
        cc.scheduler.total_rounds = ps.u64(*body, Parser::sub(q, kind), "total_rounds", cfg.federation.num_rounds);
        if (cc.scheduler.total_rounds < cfg.federation.num_rounds) {
          ps.fail(Parser::sub(Parser::sub(q, kind), "total_rounds"), "must be >= federation.num_rounds");
        }
      } else {
        ps.fail(q, "unknown scheduler \"" + kind + "\" (none, linear_decay)");
      }
    }
    guarded(ps, p, [&] { cc.validate(); });
  }

  // aggregator
  {
    const Path p{"aggregator"};
    const json* a = ps.find(doc, "aggregator");
    if (a) {
      ps.object(*a, p);
      ps.allow_keys(*a, p, {"kind", "server_opt"});
      const auto kind = ps.string(ps.require(*a, p, "kind"), Parser::sub(p, "kind"));
      auto& agg = cfg.aggregator;
      if (kind == "fedavg") {
        agg.kind = server::AggregatorKind::FedAvg;
      } else if (kind == "fedopt") {
        agg.kind = server::AggregatorKind::FedOpt;
      } else if (kind == "fednova") {
        agg.kind = server::AggregatorKind::FedNova;
      } else {
        ps.fail(Parser::sub(p, "kind"), "unknown aggregator \"" + kind + "\" (fedavg, fedopt, fednova)");
      }
      if (const json* so = ps.find(*a, "server_opt")) {
        const Path q = Parser::sub(p, "server_opt");
        if (agg.kind != server::AggregatorKind::FedOpt) ps.fail(q, "only valid with kind \"fedopt\"");
        ps.object(*so, q);
        ps.allow_keys(*so, q, {"kind", "server_lr", "beta1", "beta2", "tau"});
        const auto opt = ps.string(ps.require(*so, q, "kind"), Parser::sub(q, "kind"));
        if (opt == "sgd") {
          agg.server_opt.kind = server::ServerOptKind::Sgd;
        } else if (opt == "adam") {
          agg.server_opt.kind = server::ServerOptKind::Adam;
        } else {
          ps.fail(Parser::sub(q, "kind"), "unknown server optimizer \"" + opt + "\" (sgd, adam)");
        }
        agg.server_opt.server_lr = ps.number(*so, q, "server_lr", 1.0);
        agg.server_opt.beta1 = ps.number(*so, q, "beta1", 0.9);
        agg.server_opt.beta2 = ps.number(*so, q, "beta2", 0.99);
        agg.server_opt.tau = ps.number(*so, q, "tau", 1e-3);
      }
      guarded(ps, p, [&] { agg.validate(); });
    }
  }

  // mode
  if (const json* m = ps.find(doc, "mode")) {
    const Path p{"mode"};
    const auto [kind, body] = ps.variant(*m, p);
    const Path q = Parser::sub(p, kind);
    ps.allow_keys(*body, q, {"workers"});
    if (kind == "simulate") {
      cfg.mode.kind = ModeConfig::Kind::Simulate;
      cfg.mode.workers = ps.u64(*body, q, "workers", 1);
    } else if (kind == "sockets") {
      cfg.mode.kind = ModeConfig::Kind::Sockets;
      cfg.mode.workers = ps.u64(*body, q, "workers", 1);
    } else {
      ps.fail(p, "unknown mode \"" + kind + "\" (simulate, sockets)");
    }
    if (cfg.mode.workers == 0) ps.fail(Parser::sub(q, "workers"), "must be >= 1");
    if (cfg.mode.workers > k) ps.fail(Parser::sub(q, "workers"), "more workers than clients");
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw datagen::IoError("cannot open config " + path.string());
  std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return parse_config(text);
}

std::string serialize_config(const ExperimentConfig& cfg) {
  ordered_json doc;
  ordered_json ds;
  if (cfg.dataset.source == DatasetConfig::Source::Synthetic) {
    const auto& s = cfg.dataset.synthetic;
    ds["synthetic"] = {{"num_classes", s.num_classes},
                       {"dim", s.dim},
                       {"samples_per_class", s.samples_per_class},
                       {"class_separation", s.class_separation},
                       {"seed", s.seed}};
  } else {
    ordered_json f = {{"path", cfg.dataset.path}};
    if (!cfg.dataset.test_path.empty()) f["test_path"] = cfg.dataset.test_path;
    ds["file"] = f;
  }
  ds["test_fraction"] = cfg.dataset.test_fraction;
  ds["split_seed"] = cfg.dataset.split_seed;
  doc["dataset"] = ds;

  const auto& p = cfg.partition;
  switch (p.kind) {
    case PartitionConfig::Kind::Lda:
      doc["partition"] = {{"lda", {{"alpha", p.lda.alpha},
                                   {"num_clients", p.lda.num_clients},
                                   {"min_shard_size", p.lda.min_shard_size},
                                   {"seed", p.lda.seed}}}};
      break;
    case PartitionConfig::Kind::Frequency: {
      ordered_json f = {{"num_clients", p.num_clients}};
      if (!p.items_path.empty()) f["items_path"] = p.items_path;
      doc["partition"] = {{"frequency", f}};
      break;
    }
    case PartitionConfig::Kind::File:
      doc["partition"] = {{"file", {{"path", p.path}}}};
      break;
  }

  const auto& m = cfg.model;
  doc["model"] = {{"kind", models::to_string(m.kind)},
                  {"input_dim", m.input_dim},
                  {"num_classes", m.num_classes},
                  {"hidden_dim", m.hidden_dim},
                  {"init_seed", m.init_seed},
                  {"init_scale", m.init_scale}};

  const auto& c = cfg.client;
  ordered_json optimizer = c.optimizer.kind == client::OptimizerKind::Sgd
                               ? ordered_json{{"sgd", ordered_json::object()}}
                               : ordered_json{{"momentum_sgd", {{"beta", c.optimizer.beta}}}};
  ordered_json scheduler = c.scheduler.kind == client::SchedulerKind::None
                               ? ordered_json{{"none", ordered_json::object()}}
                               : ordered_json{{"linear_decay", {{"total_rounds", c.scheduler.total_rounds}}}};
  doc["client"] = {{"local_epochs", c.local_epochs}, {"batch_size", c.batch_size},
                   {"base_lr", c.base_lr},           {"optimizer", optimizer},
                   {"scheduler", scheduler},         {"prox_mu", c.prox_mu},
                   {"shuffle_seed", c.shuffle_seed}};

  const auto& f = cfg.federation;
  doc["federation"] = {{"num_clients", f.num_clients},
                       {"clients_per_round", f.clients_per_round},
                       {"num_rounds", f.num_rounds},
                       {"sampling_seed", f.sampling_seed}};

  const auto& a = cfg.aggregator;
  ordered_json agg = {{"kind", server::to_string(a.kind)}};
  if (a.kind == server::AggregatorKind::FedOpt) {
    agg["server_opt"] = {{"kind", a.server_opt.kind == server::ServerOptKind::Sgd ? "sgd" : "adam"},
                         {"server_lr", a.server_opt.server_lr},
                         {"beta1", a.server_opt.beta1},
                         {"beta2", a.server_opt.beta2},
                         {"tau", a.server_opt.tau}};
  }
  doc["aggregator"] = agg;
  doc["mode"] = {{cfg.mode.kind == ModeConfig::Kind::Simulate ? "simulate" : "sockets",
                  {{"workers", cfg.mode.workers}}}};
  doc["eval_interval"] = cfg.eval_interval;
  doc["output_dir"] = cfg.output_dir;
  doc["master_seed"] = cfg.master_seed;
  doc["record_wall_time"] = cfg.record_wall_time;
  return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Preparation

std::vector<client::ClientState> Prepared::client_states() const {
  std::vector<client::ClientState> states;
  states.reserve(partition.num_clients);
  for (std::size_t k = 0; k < partition.num_clients; ++k) {
    states.push_back(client::ClientState{static_cast<std::uint32_t>(k),
                                         train.subset(partition.assignments[k]), std::nullopt});
  }
  return states;
}

Prepared prepare(const ExperimentConfig& cfg) {
  Prepared out;
  const auto& dc = cfg.dataset;
  datagen::LabeledDataset full;
  if (dc.source == DatasetConfig::Source::Synthetic) {
    const auto& s = dc.synthetic;
    full = datagen::generate_synthetic(s.num_classes, s.dim, s.samples_per_class, s.class_separation, s.seed);
  } else {
    full = datagen::read_dataset(dc.path);
  }
  if (dc.test_path.empty()) {
    std::tie(out.train, out.test) = datagen::train_test_split(full, dc.test_fraction, dc.split_seed);
  } else {
    out.train = std::move(full);
    out.test = datagen::read_dataset(dc.test_path);
    if (out.test.dim != out.train.dim || out.test.num_classes != out.train.num_classes) {
      throw ConfigError(0, "dataset.file.test_path: shape differs from the training file");
    }
  }

  out.model = cfg.model;
  if (out.model.input_dim == 0) out.model.input_dim = out.train.dim;
  if (out.model.num_classes == 0) out.model.num_classes = out.train.num_classes;
  if (out.model.input_dim != out.train.dim) {
    throw ConfigError(0, "model.input_dim " + std::to_string(out.model.input_dim) +
                             " does not match dataset dimension " + std::to_string(out.train.dim));
  }
  if (out.model.num_classes != out.train.num_classes) {
    throw ConfigError(0, "model.num_classes " + std::to_string(out.model.num_classes) +
                             " does not match dataset classes " + std::to_string(out.train.num_classes));
  }
  try {
    out.model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(0, std::string("model: ") + e.what());
  }

  const auto k = cfg.federation.num_clients;
  switch (cfg.partition.kind) {
    case PartitionConfig::Kind::Lda:
      out.partition = datagen::lda_partition(out.train, cfg.partition.lda);
      break;
    case PartitionConfig::Kind::Frequency:
      if (cfg.partition.items_path.empty()) {
        out.items = datagen::as_multilabel(out.train);
      } else {
        out.items = datagen::read_multilabel(cfg.partition.items_path);
        if (out.items->item_categories.size() != out.train.size()) {
          throw ConfigError(0, "partition.frequency.items_path lists " +
                                   std::to_string(out.items->item_categories.size()) +
                                   " items but the training set has " + std::to_string(out.train.size()));
        }
      }
      out.partition = datagen::frequency_partition(*out.items, k);
      break;
    case PartitionConfig::Kind::File:
      out.partition = datagen::read_partition(cfg.partition.path);
      if (out.partition.num_clients != k) {
        throw ConfigError(0, "partition file has " + std::to_string(out.partition.num_clients) +
                                 " clients but federation.num_clients is " + std::to_string(k));
      }
      break;
  }
  out.partition.validate(out.train.size(), 1);

  out.classifier = models::make_model(out.model);
  out.initial_params = out.classifier->init_params();
  return out;
}

// ---------------------------------------------------------------------------
// Running

TrainingOutcome run_with_executor(const ExperimentConfig& cfg, const Prepared& prepared,
                                  server::ClientExecutor& executor) {
  auto state = server::ServerState::initial(prepared.initial_params, cfg.aggregator);
  const auto classifier = prepared.classifier;
  const auto* test = &prepared.test;
  server::Evaluator eval = [classifier, test](const ParamVector& w) {
    return models::evaluate(*classifier, w, *test);
  };
  TrainingOutcome out;
  out.metrics = server::run_rounds(state, cfg.federation, executor, cfg.aggregator, eval, cfg.eval_interval);
  out.final_params = std::move(state.global_params);
  return out;
}

namespace {

std::vector<client::ClientState> hosted_states(const Prepared& prepared, const transport::Endpoint& ep) {
  std::vector<client::ClientState> states;
  for (auto c : ep.clients_hosted) {
    states.push_back(client::ClientState{c, prepared.train.subset(prepared.partition.assignments[c]),
                                         std::nullopt});
  }
  return states;
}

}  // namespace

TrainingOutcome run_simulated(const ExperimentConfig& cfg, const Prepared& prepared) {
  const auto topology = transport::assign_clients(cfg.num_clients(), cfg.mode.workers);
  transport::validate_topology(topology, cfg.num_clients());

  std::vector<std::unique_ptr<transport::Connection>> server_side;
  std::vector<std::thread> threads;
  std::vector<std::string> worker_errors(topology.size());
  for (std::size_t w = 0; w < topology.size(); ++w) {
    auto [server_end, worker_end] = transport::inproc_pair();
    server_side.push_back(std::move(server_end));
    threads.emplace_back([&, w, conn = std::shared_ptr<transport::Connection>(std::move(worker_end))] {
      try {
        auto states = hosted_states(prepared, topology[w]);
        transport::run_worker(*conn, topology[w], states, cfg.client, *prepared.classifier,
                              cfg.federation, false);
      } catch (const std::exception& e) {
        worker_errors[w] = e.what();
      }
      conn->close();
    });
  }

  TrainingOutcome out;
  std::exception_ptr failure;
  {
    transport::RemoteExecutor executor(std::move(server_side), topology);
    try {
      out = run_with_executor(cfg, prepared, executor);
    } catch (...) {
      failure = std::current_exception();
    }
    executor.shutdown(std::chrono::milliseconds(5000));
  }
  for (auto& t : threads) t.join();
  if (failure) {
    // A worker-side exception shows up on the server only as a lost connection.
    std::string detail;
    for (std::size_t w = 0; w < worker_errors.size(); ++w) {
      if (!worker_errors[w].empty()) detail += "; worker " + std::to_string(w) + ": " + worker_errors[w];
    }
    if (!detail.empty()) {
      try {
        std::rethrow_exception(failure);
      } catch (const server::RoundAbort& e) {
        throw server::RoundAbort(e.what() + detail);
      }
    }
    std::rethrow_exception(failure);
  }
  return out;
}

namespace {

struct SpawnedWorkers {
  std::vector<pid_t> pids;

  // Waits up to `grace` for every child to exit, then kills stragglers.
  // Returns true if all exited on their own with status 0.
  bool reap(std::chrono::milliseconds grace) {
    bool clean = true;
    const auto deadline = std::chrono::steady_clock::now() + grace;
    for (auto& pid : pids) {
      if (pid <= 0) continue;
      int status = 0;
      while (true) {
        const pid_t r = ::waitpid(pid, &status, WNOHANG);
        if (r == pid) {
          clean = clean && WIFEXITED(status) && WEXITSTATUS(status) == 0;
          break;
        }
        if (r < 0) {
          clean = false;
          break;
        }
        if (std::chrono::steady_clock::now() >= deadline) {
          ::kill(pid, SIGKILL);
          ::waitpid(pid, &status, 0);
          clean = false;
          break;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      pid = -1;
    }
    return clean;
  }

  ~SpawnedWorkers() { reap(std::chrono::milliseconds(0)); }
};

}  // namespace

TrainingOutcome run_sockets(const ExperimentConfig& cfg, const Prepared& prepared,
                            const SocketOptions& opts) {
  const auto topology = transport::assign_clients(cfg.num_clients(), cfg.mode.workers);
  transport::validate_topology(topology, cfg.num_clients());

  transport::TcpListener listener(opts.host, opts.port);
  const auto port = std::to_string(listener.port());

  SpawnedWorkers children;
  for (std::size_t w = 0; w < topology.size(); ++w) {
    std::vector<std::string> args = {opts.worker_executable.string(), "worker",
                                     "--config", opts.config_path.string(),
                                     "--worker-id", std::to_string(w),
                                     "--workers", std::to_string(topology.size()),
                                     "--host", opts.host,
                                     "--port", port};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_t pid = -1;
    const int rc = ::posix_spawn(&pid, argv[0], nullptr, nullptr, argv.data(), environ);
    if (rc != 0) {
      throw std::runtime_error("cannot spawn worker " + std::to_string(w) + ": " + std::strerror(rc));
    }
    children.pids.push_back(pid);
  }

  // Workers identify themselves with a hello; order connections by worker id.
  std::vector<std::unique_ptr<transport::Connection>> conns(topology.size());
  for (std::size_t i = 0; i < topology.size(); ++i) {
    auto conn = listener.accept(opts.accept_timeout);
    const auto hello = conn->receive(opts.accept_timeout);
    if (hello.type != transport::MessageType::Ack || hello.client_id >= topology.size() ||
        conns[hello.client_id]) {
      throw server::RoundAbort("bad hello from a worker connection");
    }
    conns[hello.client_id] = std::move(conn);
  }

  TrainingOutcome out;
  std::exception_ptr failure;
  {
    transport::RemoteExecutor executor(std::move(conns), topology);
    try {
      out = run_with_executor(cfg, prepared, executor);
    } catch (...) {
      failure = std::current_exception();
    }
    executor.shutdown(opts.shutdown_grace);
  }
  const bool clean = children.reap(opts.shutdown_grace);
  if (failure) std::rethrow_exception(failure);
  if (!clean) throw server::RoundAbort("a worker process did not exit cleanly");
  return out;
}

void run_worker_process(const ExperimentConfig& cfg, std::uint32_t worker_id,
                        const std::string& host, std::uint16_t port) {
  const auto topology = transport::assign_clients(cfg.num_clients(), cfg.mode.workers);
  if (worker_id >= topology.size()) {
    throw std::invalid_argument("worker id " + std::to_string(worker_id) + " out of range");
  }
  const auto prepared = prepare(cfg);
  auto conn = transport::tcp_connect(host, port, std::chrono::milliseconds(30000));
  auto states = hosted_states(prepared, topology[worker_id]);
  transport::run_worker(*conn, topology[worker_id], states, cfg.client, *prepared.classifier,
                        cfg.federation, true);
}

// ---------------------------------------------------------------------------
// Outputs

void write_params(const ParamVector& params, const std::filesystem::path& path) {
  datagen::LabeledDataset row;
  row.dim = params.size();
  row.num_classes = 1;
  row.features = params.values();
  row.labels = {0};
  datagen::write_dataset(row, path);
}

ParamVector read_params(const std::filesystem::path& path) {
  auto row = datagen::read_dataset(path);
  if (row.size() != 1) throw std::runtime_error(path.string() + " is not a parameter file");
  return ParamVector(std::move(row.features));
}

void write_outputs(const ExperimentConfig& cfg, const TrainingOutcome& outcome,
                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "metrics.csv", std::ios::binary | std::ios::trunc);
    if (!out) throw datagen::IoError("cannot write " + (dir / "metrics.csv").string());
    out << server::metrics_csv(outcome.metrics, cfg.record_wall_time);
    if (!out) throw datagen::IoError("write failed for metrics.csv");
  }
  write_params(outcome.final_params, dir / "final_params.bin");
}

}  // namespace fedsim::experiment
