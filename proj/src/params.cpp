#include "fedsim/params.hpp"

#include <algorithm>
#include <cmath>

namespace fedsim {

DimensionMismatch::DimensionMismatch(std::size_t lhs, std::size_t rhs)
    : std::invalid_argument("parameter length mismatch: " + std::to_string(lhs) +
                            " vs " + std::to_string(rhs)) {}

bool ParamVector::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(),
                     [](double v) { return std::isfinite(v); });
}

bool ParamVector::is_zero() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return v == 0.0; });
}

namespace {

void require_same_len(const ParamVector& x, const ParamVector& y) {
  if (x.size() != y.size()) throw DimensionMismatch(x.size(), y.size());
}

void require_finite(const ParamVector& x, const char* name) {
  if (!x.all_finite()) throw NonFinite(std::string(name) + " contains NaN or infinity");
}

void require_finite(double a, const char* name) {
  if (!std::isfinite(a)) throw NonFinite(std::string(name) + " is not finite");
}

ParamVector checked_result(ParamVector out) {
  // Finite inputs can still overflow.
  require_finite(out, "result");
  return out;
}

}  // namespace

ParamVector axpy(double a, const ParamVector& x, const ParamVector& y) {
  require_same_len(x, y);
  require_finite(a, "scalar");
  require_finite(x, "x");
  require_finite(y, "y");
  ParamVector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + y[i];
  return checked_result(std::move(out));
}

ParamVector weighted_sum(std::span<const ParamVector> vectors,
                         std::span<const double> weights) {
  if (vectors.empty()) throw std::invalid_argument("weighted_sum: empty input");
  if (vectors.size() != weights.size()) {
    throw std::invalid_argument("weighted_sum: " + std::to_string(vectors.size()) +
                                " vectors but " + std::to_string(weights.size()) +
                                " weights");
  }
  const std::size_t len = vectors.front().size();
  for (std::size_t k = 0; k < vectors.size(); ++k) {
    require_same_len(vectors.front(), vectors[k]);
    require_finite(vectors[k], "vector");
    require_finite(weights[k], "weight");
    if (weights[k] < 0.0) throw std::invalid_argument("weighted_sum: negative weight");
  }
  // Anchored at the first vector: (sum w) v_0 + sum_k w_k (v_k - v_0). Same
  // value as the plain sum, but identical inputs with weights summing to
  // exactly 1 come back bit for bit.
  const ParamVector& anchor = vectors.front();
  double total = 0.0;
  for (double w : weights) total += w;
  ParamVector out(len);
  for (std::size_t i = 0; i < len; ++i) {
    double acc = 0.0;
    for (std::size_t k = 1; k < vectors.size(); ++k) acc += weights[k] * (vectors[k][i] - anchor[i]);
    out[i] = total * anchor[i] + acc;
  }
  return checked_result(std::move(out));
}

double l2_norm(const ParamVector& x) {
  require_finite(x, "x");
  // Scaled by the largest magnitude so huge entries do not overflow.
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak == 0.0) return 0.0;
  double sum = 0.0;
  for (double v : x) sum += (v / peak) * (v / peak);
  return peak * std::sqrt(sum);
}

ParamVector elementwise_square(const ParamVector& x) {
  require_finite(x, "x");
  ParamVector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * x[i];
  return checked_result(std::move(out));
}

ParamVector elementwise_div_add(const ParamVector& num, const ParamVector& den,
                                double tau) {
  require_same_len(num, den);
  require_finite(tau, "tau");
  if (tau <= 0.0) throw std::invalid_argument("elementwise_div_add: tau must be > 0");
  require_finite(num, "numerator");
  require_finite(den, "denominator");
  ParamVector out(num.size());
  for (std::size_t i = 0; i < num.size(); ++i) {
    if (den[i] < 0.0) throw std::invalid_argument("elementwise_div_add: negative denominator");
    out[i] = num[i] / (std::sqrt(den[i]) + tau);
  }
  return checked_result(std::move(out));
}

ParamVector subtract(const ParamVector& x, const ParamVector& y) {
  return axpy(-1.0, y, x);
}

double max_abs_diff(const ParamVector& x, const ParamVector& y) {
  require_same_len(x, y);
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

}  // namespace fedsim
