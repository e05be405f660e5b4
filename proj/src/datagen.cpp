#include "fedsim/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>

#include "fedsim/bytes.hpp"
#include "fedsim/seed.hpp"
#include "json.hpp"

namespace fedsim::datagen {

using nlohmann::json;

void LabeledDataset::validate() const {
  if (labels.empty()) throw std::invalid_argument("dataset has no samples");
  if (dim == 0) throw std::invalid_argument("dataset dimension must be >= 1");
  if (num_classes == 0) throw std::invalid_argument("dataset needs at least one class");
  if (features.size() != labels.size() * dim) {
    throw std::invalid_argument("feature matrix has " + std::to_string(features.size()) +
                                " entries, expected " + std::to_string(labels.size() * dim));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) {
      throw std::invalid_argument("label " + std::to_string(labels[i]) + " at row " +
                                  std::to_string(i) + " out of range");
    }
  }
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.dim = dim;
  out.num_classes = num_classes;
  out.features.reserve(indices.size() * dim);
  out.labels.reserve(indices.size());
  for (std::size_t idx : indices) {
    if (idx >= size()) throw std::out_of_range("sample index " + std::to_string(idx));
    auto r = row(idx);
    out.features.insert(out.features.end(), r.begin(), r.end());
    out.labels.push_back(labels[idx]);
  }
  return out;
}

void MultiLabelDataset::validate() const {
  if (num_categories == 0) throw std::invalid_argument("multi-label dataset needs categories");
  if (item_categories.empty()) throw std::invalid_argument("multi-label dataset has no items");
  for (std::size_t i = 0; i < item_categories.size(); ++i) {
    if (item_categories[i].empty() && !allow_empty_items) {
      throw std::invalid_argument("item " + std::to_string(i) + " has no categories");
    }
    for (auto c : item_categories[i]) {
      if (c >= num_categories) {
        throw std::invalid_argument("item " + std::to_string(i) + " has category " +
                                    std::to_string(c) + " out of range");
      }
    }
  }
}

std::size_t Partition::total_size() const noexcept {
  std::size_t n = 0;
  for (const auto& a : assignments) n += a.size();
  return n;
}

void Partition::validate(std::size_t n, std::size_t min_shard_size) const {
  if (num_clients == 0) throw PartitionError("partition has no clients");
  if (assignments.size() != num_clients) {
    throw PartitionError("partition lists " + std::to_string(assignments.size()) +
                         " shards for " + std::to_string(num_clients) + " clients");
  }
  std::vector<bool> seen(n, false);
  for (std::size_t k = 0; k < num_clients; ++k) {
    if (assignments[k].size() < min_shard_size) {
      throw PartitionError("client " + std::to_string(k) + " holds " +
                           std::to_string(assignments[k].size()) +
                           " samples, below minimum " + std::to_string(min_shard_size));
    }
    for (std::size_t idx : assignments[k]) {
      if (idx >= n) {
        throw PartitionError("client " + std::to_string(k) + " references index " +
                             std::to_string(idx) + " >= " + std::to_string(n));
      }
      if (seen[idx]) throw PartitionError("index " + std::to_string(idx) + " assigned twice");
      seen[idx] = true;
    }
  }
  if (total_size() != n) {
    throw PartitionError("partition covers " + std::to_string(total_size()) + " of " +
                         std::to_string(n) + " samples");
  }
}

std::uint64_t DistributionMatrix::total() const noexcept {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

double DistributionMatrix::zero_cell_fraction() const noexcept {
  if (counts.empty()) return 0.0;
  auto zeros = std::count(counts.begin(), counts.end(), std::uint64_t{0});
  return static_cast<double>(zeros) / static_cast<double>(counts.size());
}

const char* to_string(FormatErrorKind kind) noexcept {
  switch (kind) {
    case FormatErrorKind::BadMagic: return "BadMagic";
    case FormatErrorKind::MalformedHeader: return "MalformedHeader";
    case FormatErrorKind::Truncated: return "Truncated";
    case FormatErrorKind::LabelOutOfRange: return "LabelOutOfRange";
  }
  return "Unknown";
}

DatasetFormatError::DatasetFormatError(FormatErrorKind kind, std::uint64_t offset,
                                       const std::string& detail)
    : std::runtime_error(std::string(to_string(kind)) + " at offset " + std::to_string(offset) +
                         ": " + detail),
      kind_(kind),
      offset_(offset) {}

// ---------------------------------------------------------------------------
// Generation

LabeledDataset generate_synthetic(std::uint32_t num_classes, std::size_t dim,
                                  std::size_t samples_per_class, double class_separation,
                                  std::uint64_t seed) {
  if (num_classes == 0 || dim == 0 || samples_per_class == 0) {
    throw std::invalid_argument("generate_synthetic: counts must be >= 1");
  }
  if (!(class_separation >= 0.0) || !std::isfinite(class_separation)) {
    throw std::invalid_argument("generate_synthetic: class_separation must be >= 0");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> means(static_cast<std::size_t>(num_classes) * dim, 0.0);
  if (dim >= num_classes) {
    // |a e_i - a e_j| = a sqrt(2) = separation * sqrt(dim)
    const double a = class_separation * std::sqrt(static_cast<double>(dim) / 2.0);
    for (std::uint32_t c = 0; c < num_classes; ++c) means[c * dim + c] = a;
  } else {
    const double s = class_separation / std::sqrt(2.0);
    for (double& m : means) m = s * normal(rng);
  }

  LabeledDataset ds;
  ds.dim = dim;
  ds.num_classes = num_classes;
  const std::size_t n = samples_per_class * num_classes;
  ds.features.reserve(n * dim);
  ds.labels.reserve(n);
  for (std::uint32_t c = 0; c < num_classes; ++c) {
    for (std::size_t s = 0; s < samples_per_class; ++s) {
      for (std::size_t j = 0; j < dim; ++j) ds.features.push_back(means[c * dim + j] + normal(rng));
      ds.labels.push_back(c);
    }
  }
  return ds;
}

std::pair<LabeledDataset, LabeledDataset> train_test_split(const LabeledDataset& ds,
                                                           double test_fraction,
                                                           std::uint64_t seed) {
  ds.validate();
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("test_fraction must lie in (0, 1)");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

  std::vector<bool> is_test(ds.size(), false);
  for (auto& idx : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    auto take = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < take; ++i) is_test[idx[i]] = true;
  }
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t i = 0; i < ds.size(); ++i) (is_test[i] ? test_idx : train_idx).push_back(i);
  if (train_idx.empty() || test_idx.empty()) {
    throw std::invalid_argument("train_test_split: split leaves an empty side");
  }
  return {ds.subset(train_idx), ds.subset(test_idx)};
}

// ---------------------------------------------------------------------------
// Partitioners

namespace {

std::vector<double> draw_dirichlet(double alpha, std::size_t k, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(k);
  double sum = 0.0;
  for (auto& v : p) {
    v = gamma(rng);
    sum += v;
  }
  if (!(sum > 0.0)) {
    // Every draw underflowed; fall back to uniform.
    std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(k));
    return p;
  }
  for (auto& v : p) v /= sum;
  return p;
}

// Integer counts summing exactly to `total`; leftover units go to the largest
// fractional parts, ties to the lowest id.
std::vector<std::size_t> largest_remainder(const std::vector<double>& proportions,
                                           std::size_t total) {
  const std::size_t k = proportions.size();
  std::vector<std::size_t> counts(k);
  std::vector<double> frac(k);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double quota = proportions[i] * static_cast<double>(total);
    const double fl = std::floor(quota);
    counts[i] = static_cast<std::size_t>(fl);
    frac[i] = quota - fl;
    assigned += counts[i];
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % k) {
    ++counts[order[i]];
    ++assigned;
  }
  // Proportions summing a hair above 1 can overshoot.
  for (auto it = order.rbegin(); assigned > total; ++it) {
    if (it == order.rend()) it = order.rbegin();
    if (counts[*it] > 0) {
      --counts[*it];
      --assigned;
    }
  }
  return counts;
}

}  // namespace

Partition lda_partition(const LabeledDataset& ds, const LdaConfig& cfg) {
  ds.validate();
  if (!(cfg.alpha > 0.0) || !std::isfinite(cfg.alpha)) {
    throw std::invalid_argument("lda_partition: alpha must be > 0");
  }
  if (cfg.num_clients == 0) throw std::invalid_argument("lda_partition: num_clients must be >= 1");
  if (cfg.min_shard_size == 0) {
    throw std::invalid_argument("lda_partition: min_shard_size must be >= 1");
  }
  if (cfg.min_shard_size * cfg.num_clients > ds.size()) {
    throw PartitionError("lda_partition: infeasible, " + std::to_string(cfg.num_clients) +
                         " clients x " + std::to_string(cfg.min_shard_size) +
                         " minimum exceeds " + std::to_string(ds.size()) + " samples");
  }

  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

  const std::size_t k = cfg.num_clients;
  for (int attempt = 0; attempt < kLdaMaxAttempts; ++attempt) {
    std::mt19937_64 rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(attempt)}));
    Partition p;
    p.num_clients = k;
    p.assignments.assign(k, {});
    for (const auto& members : by_class) {
      const auto proportions = draw_dirichlet(cfg.alpha, k, rng);
      std::vector<std::size_t> shuffled = members;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      const auto counts = largest_remainder(proportions, shuffled.size());
      auto it = shuffled.begin();
      for (std::size_t client = 0; client < k; ++client) {
        auto next = it + static_cast<std::ptrdiff_t>(counts[client]);
        p.assignments[client].insert(p.assignments[client].end(), it, next);
        it = next;
      }
    }
    bool ok = true;
    for (auto& a : p.assignments) {
      std::sort(a.begin(), a.end());
      ok = ok && a.size() >= cfg.min_shard_size;
    }
    if (ok) return p;
  }
  throw PartitionError("lda_partition: no draw met min_shard_size=" +
                       std::to_string(cfg.min_shard_size) + " after " +
                       std::to_string(kLdaMaxAttempts) + " attempts");
}

Partition frequency_partition(const MultiLabelDataset& ds, std::size_t num_clients) {
  ds.validate();
  if (num_clients == 0) throw std::invalid_argument("frequency_partition: num_clients must be >= 1");
  if (ds.size() < num_clients) {
    throw std::invalid_argument("frequency_partition: fewer items than clients");
  }
  // Each item counts once per category, however many instances it contains.
  std::vector<std::vector<std::uint32_t>> cats(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    cats[i] = ds.item_categories[i];
    std::sort(cats[i].begin(), cats[i].end());
    cats[i].erase(std::unique(cats[i].begin(), cats[i].end()), cats[i].end());
  }

  Partition p;
  p.num_clients = num_clients;
  p.assignments.assign(num_clients, {});
  std::vector<bool> assigned(ds.size(), false);
  std::vector<std::size_t> freq(ds.num_categories);

  while (true) {
    std::fill(freq.begin(), freq.end(), 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (assigned[i]) continue;
      for (auto c : cats[i]) ++freq[c];
    }
    auto top = std::max_element(freq.begin(), freq.end());  // first max = lowest id
    if (*top == 0) break;
    const auto category = static_cast<std::uint32_t>(top - freq.begin());

    std::size_t target = 0;
    for (std::size_t k = 1; k < num_clients; ++k) {
      if (p.assignments[k].size() < p.assignments[target].size()) target = k;
    }
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (assigned[i]) continue;
      if (std::binary_search(cats[i].begin(), cats[i].end(), category)) {
        p.assignments[target].push_back(i);
        assigned[i] = true;
      }
    }
  }

  std::size_t next = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (assigned[i]) continue;
    p.assignments[next].push_back(i);
    assigned[i] = true;
    next = (next + 1) % num_clients;
  }
  for (auto& a : p.assignments) std::sort(a.begin(), a.end());
  return p;
}

MultiLabelDataset as_multilabel(const LabeledDataset& ds) {
  MultiLabelDataset out;
  out.num_categories = ds.num_classes;
  out.item_categories.reserve(ds.size());
  for (auto label : ds.labels) out.item_categories.push_back({label});
  return out;
}

DistributionMatrix distribution_matrix(const LabeledDataset& ds, const Partition& p) {
  DistributionMatrix m;
  m.num_clients = p.num_clients;
  m.num_classes = ds.num_classes;
  m.counts.assign(m.num_clients * m.num_classes, 0);
  for (std::size_t k = 0; k < p.assignments.size(); ++k) {
    for (std::size_t idx : p.assignments[k]) {
      if (idx >= ds.size()) throw std::out_of_range("partition index " + std::to_string(idx));
      ++m.counts[k * m.num_classes + ds.labels[idx]];
    }
  }
  return m;
}

DistributionMatrix distribution_matrix(const MultiLabelDataset& ds, const Partition& p) {
  DistributionMatrix m;
  m.num_clients = p.num_clients;
  m.num_classes = ds.num_categories;
  m.counts.assign(m.num_clients * m.num_classes, 0);
  std::vector<std::uint32_t> cats;
  for (std::size_t k = 0; k < p.assignments.size(); ++k) {
    for (std::size_t idx : p.assignments[k]) {
      if (idx >= ds.size()) throw std::out_of_range("partition index " + std::to_string(idx));
      cats = ds.item_categories[idx];
      std::sort(cats.begin(), cats.end());
      cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
      for (auto c : cats) ++m.counts[k * m.num_classes + c];
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// File formats

namespace {

constexpr unsigned char kDatasetMagic[4] = {'F', 'C', 'V', 'D'};
constexpr std::uint16_t kDatasetVersion = 1;
constexpr std::size_t kDatasetHeaderSize = 4 + 2 + 8 + 8 + 4 + 4;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

std::vector<unsigned char> encode_dataset(const LabeledDataset& ds) {
  ds.validate();
  std::vector<unsigned char> out;
  out.reserve(kDatasetHeaderSize + ds.features.size() * 8 + ds.labels.size() * 4);
  ByteWriter w(out);
  w.put_bytes(kDatasetMagic);
  w.put<std::uint16_t>(kDatasetVersion);
  w.put<std::uint64_t>(ds.size());
  w.put<std::uint64_t>(ds.dim);
  w.put<std::uint32_t>(ds.num_classes);
  w.put<std::uint32_t>(0);
  for (double v : ds.features) w.put_f64(v);
  for (auto l : ds.labels) w.put<std::uint32_t>(l);
  return out;
}

LabeledDataset decode_dataset(std::span<const unsigned char> bytes) {
  if (bytes.size() < 4) {
    throw DatasetFormatError(FormatErrorKind::Truncated, bytes.size(), "file shorter than magic");
  }
  for (std::size_t i = 0; i < 4; ++i) {
    if (bytes[i] != kDatasetMagic[i]) {
      throw DatasetFormatError(FormatErrorKind::BadMagic, i, "expected \"FCVD\"");
    }
  }
  if (bytes.size() < kDatasetHeaderSize) {
    throw DatasetFormatError(FormatErrorKind::Truncated, bytes.size(), "incomplete header");
  }
  ByteReader r(bytes);
  r.get<std::uint32_t>();
  const auto version = r.get<std::uint16_t>();
  if (version != kDatasetVersion) {
    throw DatasetFormatError(FormatErrorKind::MalformedHeader, 4,
                             "unsupported version " + std::to_string(version));
  }
  const auto n = r.get<std::uint64_t>();
  const auto d = r.get<std::uint64_t>();
  const auto num_classes = r.get<std::uint32_t>();
  const auto padding = r.get<std::uint32_t>();
  if (n == 0 || d == 0 || num_classes == 0) {
    throw DatasetFormatError(FormatErrorKind::MalformedHeader, 6, "n, d and num_classes must be >= 1");
  }
  if (padding != 0) {
    throw DatasetFormatError(FormatErrorKind::MalformedHeader, 26, "nonzero padding");
  }
  // Guard the size arithmetic before trusting it.
  const std::uint64_t max_rows = (std::uint64_t{1} << 40);
  if (n > max_rows || d > max_rows || n * d > max_rows) {
    throw DatasetFormatError(FormatErrorKind::MalformedHeader, 6, "implausible shape");
  }
  const std::uint64_t body = n * d * 8 + n * 4;
  if (r.remaining() < body) {
    throw DatasetFormatError(FormatErrorKind::Truncated, bytes.size(),
                             "expected " + std::to_string(kDatasetHeaderSize + body) + " bytes");
  }
  if (r.remaining() > body) {
    throw DatasetFormatError(FormatErrorKind::MalformedHeader, kDatasetHeaderSize + body,
                             "trailing bytes after labels");
  }
  LabeledDataset ds;
  ds.dim = static_cast<std::size_t>(d);
  ds.num_classes = num_classes;
  ds.features.resize(static_cast<std::size_t>(n * d));
  for (auto& v : ds.features) v = r.get_f64();
  ds.labels.resize(static_cast<std::size_t>(n));
  for (auto& l : ds.labels) {
    const std::size_t at = r.offset();
    l = r.get<std::uint32_t>();
    if (l >= num_classes) {
      throw DatasetFormatError(FormatErrorKind::LabelOutOfRange, at,
                               "label " + std::to_string(l) + " >= " + std::to_string(num_classes));
    }
  }
  return ds;
}

void write_dataset(const LabeledDataset& ds, const std::filesystem::path& path) {
  const auto bytes = encode_dataset(ds);
  write_file(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

LabeledDataset read_dataset(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return decode_dataset(bytes);
}

std::string partition_to_json(const Partition& p) {
  // Written by hand so that client ids appear in numeric order.
  std::ostringstream os;
  os << "{\n  \"num_clients\": " << p.num_clients << ",\n  \"assignments\": {";
  for (std::size_t k = 0; k < p.assignments.size(); ++k) {
    os << (k == 0 ? "\n" : ",\n") << "    \"" << k << "\": [";
    for (std::size_t i = 0; i < p.assignments[k].size(); ++i) {
      if (i) os << ", ";
      os << p.assignments[k][i];
    }
    os << "]";
  }
  os << "\n  }\n}\n";
  return os.str();
}

Partition partition_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw PartitionError(std::string("partition JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("num_clients") || !doc.contains("assignments")) {
    throw PartitionError("partition JSON needs \"num_clients\" and \"assignments\"");
  }
  const auto& nc = doc["num_clients"];
  if (!nc.is_number_unsigned() || nc.get<std::size_t>() == 0) {
    throw PartitionError("num_clients must be a positive integer");
  }
  Partition p;
  p.num_clients = nc.get<std::size_t>();
  p.assignments.assign(p.num_clients, {});
  const auto& assignments = doc["assignments"];
  if (!assignments.is_object()) throw PartitionError("assignments must be an object");
  std::vector<bool> present(p.num_clients, false);
  for (const auto& [key, value] : assignments.items()) {
    std::size_t client = 0;
    std::size_t used = 0;
    try {
      client = std::stoul(key, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != key.size() || key.empty() || !std::isdigit(static_cast<unsigned char>(key[0]))) {
      throw PartitionError("client id \"" + key + "\" is not a decimal integer");
    }
    if (client >= p.num_clients) throw PartitionError("client id " + key + " >= num_clients");
    if (present[client]) throw PartitionError("client id " + key + " listed twice");
    present[client] = true;
    if (!value.is_array()) throw PartitionError("client " + key + ": indices must be an array");
    auto& out = p.assignments[client];
    for (const auto& idx : value) {
      if (!idx.is_number_unsigned()) {
        throw PartitionError("client " + key + ": indices must be non-negative integers");
      }
      const auto v = idx.get<std::size_t>();
      if (!out.empty() && v <= out.back()) {
        throw PartitionError("client " + key + ": indices must be strictly ascending");
      }
      out.push_back(v);
    }
  }
  // Disjointness across clients.
  std::vector<std::size_t> all;
  for (const auto& a : p.assignments) all.insert(all.end(), a.begin(), a.end());
  std::sort(all.begin(), all.end());
  auto dup = std::adjacent_find(all.begin(), all.end());
  if (dup != all.end()) {
    throw PartitionError("index " + std::to_string(*dup) + " assigned to more than one client");
  }
  return p;
}

void write_partition(const Partition& p, const std::filesystem::path& path) {
  write_file(path, partition_to_json(p));
}

Partition read_partition(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return partition_from_json(std::string(bytes.begin(), bytes.end()));
}

std::string distribution_csv(const DistributionMatrix& m) {
  std::ostringstream os;
  os << "client";
  for (std::size_t c = 0; c < m.num_classes; ++c) os << ",class_" << c;
  os << "\n";
  for (std::size_t k = 0; k < m.num_clients; ++k) {
    os << k;
    for (std::size_t c = 0; c < m.num_classes; ++c) os << "," << m.at(k, c);
    os << "\n";
  }
  return os.str();
}

void write_distribution_csv(const DistributionMatrix& m, const std::filesystem::path& path) {
  write_file(path, distribution_csv(m));
}

MultiLabelDataset read_multilabel(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  json doc;
  try {
    doc = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("multi-label JSON: ") + e.what());
  }
  MultiLabelDataset ds;
  try {
    ds.num_categories = doc.at("num_categories").get<std::uint32_t>();
    ds.allow_empty_items = doc.value("allow_empty_items", false);
    for (const auto& item : doc.at("items")) {
      ds.item_categories.push_back(item.get<std::vector<std::uint32_t>>());
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("multi-label JSON: ") + e.what());
  }
  ds.validate();
  return ds;
}

void write_multilabel(const MultiLabelDataset& ds, const std::filesystem::path& path) {
  json doc;
  doc["num_categories"] = ds.num_categories;
  if (ds.allow_empty_items) doc["allow_empty_items"] = true;
  doc["items"] = ds.item_categories;
  write_file(path, doc.dump() + "\n");
}

}  // namespace fedsim::datagen
