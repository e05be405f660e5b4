#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedsim {

class DimensionMismatch : public std::invalid_argument {
 public:
  DimensionMismatch(std::size_t lhs, std::size_t rhs);
};

class NonFinite : public std::invalid_argument {
 public:
  explicit NonFinite(const std::string& what) : std::invalid_argument(what) {}
};

/// Flat vector of model parameters exchanged between server and clients.
///
/// Value type. Arithmetic helpers below validate their inputs (matching
/// lengths, finite entries) and never truncate.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t len, double fill = 0.0) : values_(len, fill) {}
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}
  ParamVector(std::initializer_list<double> values) : values_(values) {}

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> span() noexcept { return values_; }
  std::span<const double> span() const noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  auto begin() noexcept { return values_.begin(); }
  auto end() noexcept { return values_.end(); }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  bool all_finite() const noexcept;
  bool is_zero() const noexcept;

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  std::vector<double> values_;
};

/// Returns a*x + y.
ParamVector axpy(double a, const ParamVector& x, const ParamVector& y);

/// Returns sum_k weights[k] * vectors[k], accumulated in ascending k so the
/// result is reproducible bit for bit.
ParamVector weighted_sum(std::span<const ParamVector> vectors,
                         std::span<const double> weights);

double l2_norm(const ParamVector& x);
ParamVector elementwise_square(const ParamVector& x);

/// num[i] / (sqrt(den[i]) + tau), tau > 0.
ParamVector elementwise_div_add(const ParamVector& num, const ParamVector& den,
                                double tau);

/// x - y
ParamVector subtract(const ParamVector& x, const ParamVector& y);

/// Largest |x[i] - y[i]|.
double max_abs_diff(const ParamVector& x, const ParamVector& y);

}  // namespace fedsim
