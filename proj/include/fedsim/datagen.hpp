#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fedsim::datagen {

/// n x d feature matrix (row-major) with one integer label per row.
struct LabeledDataset {
  std::size_t dim = 0;
  std::uint32_t num_classes = 0;
  std::vector<double> features;
  std::vector<std::uint32_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(features).subspan(i * dim, dim);
  }
  /// Throws std::invalid_argument if shapes or labels are inconsistent.
  void validate() const;
  /// Rows selected by `indices`, in that order.
  LabeledDataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

/// Items carrying sets of category ids (object-detection style labels).
struct MultiLabelDataset {
  std::uint32_t num_categories = 0;
  std::vector<std::vector<std::uint32_t>> item_categories;
  bool allow_empty_items = false;

  std::size_t size() const noexcept { return item_categories.size(); }
  void validate() const;
};

struct Partition {
  std::size_t num_clients = 0;
  /// assignments[k] holds client k's sample indices in ascending order.
  std::vector<std::vector<std::size_t>> assignments;

  std::size_t total_size() const noexcept;
  /// Checks disjointness, coverage of [0, n) and the minimum shard size.
  /// Throws PartitionError on the first violation.
  void validate(std::size_t n, std::size_t min_shard_size = 1) const;

  friend bool operator==(const Partition&, const Partition&) = default;
};

/// File could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

class PartitionError : public std::invalid_argument {
 public:
  explicit PartitionError(const std::string& what) : std::invalid_argument(what) {}
};

struct LdaConfig {
  double alpha = 0.5;
  std::size_t num_clients = 1;
  std::size_t min_shard_size = 1;
  std::uint64_t seed = 0;
};

/// counts[k][c]: samples (or items) of class c on client k.
struct DistributionMatrix {
  std::size_t num_clients = 0;
  std::size_t num_classes = 0;
  std::vector<std::uint64_t> counts;

  std::uint64_t at(std::size_t client, std::size_t cls) const {
    return counts[client * num_classes + cls];
  }
  std::uint64_t total() const noexcept;
  /// Fraction of (client, class) cells holding zero samples.
  double zero_cell_fraction() const noexcept;
};

enum class FormatErrorKind { BadMagic, MalformedHeader, Truncated, LabelOutOfRange };

const char* to_string(FormatErrorKind kind) noexcept;

/// Raised by the binary dataset reader. `offset` is the byte position at which
/// the problem was detected.
class DatasetFormatError : public std::runtime_error {
 public:
  DatasetFormatError(FormatErrorKind kind, std::uint64_t offset, const std::string& detail);
  FormatErrorKind kind() const noexcept { return kind_; }
  std::uint64_t offset() const noexcept { return offset_; }
  /// Bad magic is a header defect too.
  bool is_malformed_header() const noexcept {
    return kind_ == FormatErrorKind::BadMagic || kind_ == FormatErrorKind::MalformedHeader;
  }

 private:
  FormatErrorKind kind_;
  std::uint64_t offset_;
};

/// Gaussian blobs with identity covariance. Pairwise mean distance is
/// class_separation * sqrt(dim) exactly when dim >= num_classes (means along
/// scaled basis vectors); otherwise means are Gaussian draws with that
/// expected pairwise distance. Rows are class-major.
LabeledDataset generate_synthetic(std::uint32_t num_classes, std::size_t dim,
                                  std::size_t samples_per_class, double class_separation,
                                  std::uint64_t seed);

/// Stratified hold-out split: per class, round(test_fraction * count) rows go
/// to the test set. Both halves keep the original row order.
std::pair<LabeledDataset, LabeledDataset> train_test_split(const LabeledDataset& ds,
                                                           double test_fraction,
                                                           std::uint64_t seed);

/// Dirichlet label-skew partition: per class, proportions over clients from
/// Dirichlet(alpha * 1_K), converted to integer counts by largest remainder.
/// Redraws with derived sub-seeds (up to 100 attempts) while any shard is
/// below min_shard_size.
Partition lda_partition(const LabeledDataset& ds, const LdaConfig& cfg);

inline constexpr int kLdaMaxAttempts = 100;

/// Greedy most-frequent-category partition for multi-label items. Category
/// frequency counts each item at most once. The chosen category's unassigned
/// items go to the currently smallest client; items without categories are
/// dealt round-robin at the end. Shards may come out empty; callers check
/// with Partition::validate.
Partition frequency_partition(const MultiLabelDataset& ds, std::size_t num_clients);

/// Single-label view of a labeled dataset: item i carries {labels[i]}.
MultiLabelDataset as_multilabel(const LabeledDataset& ds);

DistributionMatrix distribution_matrix(const LabeledDataset& ds, const Partition& p);
/// Per-client, per-category count of items containing the category.
DistributionMatrix distribution_matrix(const MultiLabelDataset& ds, const Partition& p);

void write_dataset(const LabeledDataset& ds, const std::filesystem::path& path);
LabeledDataset read_dataset(const std::filesystem::path& path);
/// Parses the binary layout from memory (used by the reader and by inspect).
LabeledDataset decode_dataset(std::span<const unsigned char> bytes);
std::vector<unsigned char> encode_dataset(const LabeledDataset& ds);

void write_partition(const Partition& p, const std::filesystem::path& path);
/// Parses and checks disjointness and ascending order. Coverage of a specific
/// dataset is checked separately with Partition::validate.
Partition read_partition(const std::filesystem::path& path);
std::string partition_to_json(const Partition& p);
Partition partition_from_json(const std::string& text);

std::string distribution_csv(const DistributionMatrix& m);
void write_distribution_csv(const DistributionMatrix& m, const std::filesystem::path& path);

/// Multi-label items as JSON: {"num_categories": C, "items": [[c, ...], ...]}.
MultiLabelDataset read_multilabel(const std::filesystem::path& path);
void write_multilabel(const MultiLabelDataset& ds, const std::filesystem::path& path);

}  // namespace fedsim::datagen
