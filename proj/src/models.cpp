#include "fedsim/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

namespace fedsim::models {

const char* to_string(ModelKind kind) noexcept {
  switch (kind) {
    case ModelKind::LogisticRegression: return "logistic_regression";
    case ModelKind::Mlp: return "mlp";
  }
  return "unknown";
}

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "logistic_regression") return ModelKind::LogisticRegression;
  if (s == "mlp") return ModelKind::Mlp;
  throw std::invalid_argument("unknown model kind \"" + s + "\"");
}

void ModelSpec::validate() const {
  if (input_dim == 0) throw std::invalid_argument("model input_dim must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("model num_classes must be >= 2");
  if (kind == ModelKind::Mlp && hidden_dim == 0) {
    throw std::invalid_argument("mlp hidden_dim must be >= 1");
  }
  if (!(init_scale >= 0.0) || !std::isfinite(init_scale)) {
    throw std::invalid_argument("model init_scale must be finite and >= 0");
  }
}

namespace {

void check_shapes(const ParamVector& params, std::size_t expected, const BatchView& batch,
                  std::size_t dim, std::uint32_t classes) {
  if (params.size() != expected) throw DimensionMismatch(params.size(), expected);
  if (batch.dim != dim) {
    throw std::invalid_argument("batch dimension " + std::to_string(batch.dim) +
                                " does not match model input " + std::to_string(dim));
  }
  if (batch.size() == 0) throw std::invalid_argument("empty batch");
  if (batch.features.size() != batch.size() * dim) {
    throw std::invalid_argument("batch feature buffer has wrong size");
  }
  for (auto label : batch.labels) {
    if (label >= classes) {
      throw std::invalid_argument("label " + std::to_string(label) + " out of range for " +
                                  std::to_string(classes) + " classes");
    }
  }
}

// In-place softmax of `z`; returns -log p[label].
double softmax_xent(std::span<double> z, std::uint32_t label) {
  const double zmax = *std::max_element(z.begin(), z.end());
  const double shifted_label = z[label] - zmax;
  double sum = 0.0;
  double others = 0.0;
  for (std::size_t c = 0; c < z.size(); ++c) {
    z[c] = std::exp(z[c] - zmax);
    sum += z[c];
    if (c != label) others += z[c];
  }
  for (double& v : z) v /= sum;
  // log1p keeps the loss strictly positive when the true class dominates.
  // Past a margin of ~745 even that underflows; report the smallest positive
  // double instead of an exact zero.
  if (shifted_label == 0.0) {
    return std::max(std::log1p(others), std::numeric_limits<double>::denorm_min());
  }
  return std::log(sum) - shifted_label;
}

void fill_uniform(std::span<double> out, double scale, std::mt19937_64& rng) {
  if (scale == 0.0) {
    std::fill(out.begin(), out.end(), 0.0);
    return;
  }
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (double& v : out) v = dist(rng);
}

}  // namespace

// ---------------------------------------------------------------------------

LogisticRegression::LogisticRegression(const ModelSpec& spec)
    : dim_(spec.input_dim),
      classes_(spec.num_classes),
      seed_(spec.init_seed),
      scale_(spec.init_scale) {
  spec.validate();
}

ParamVector LogisticRegression::init_params() const {
  ParamVector p(parameter_count());
  std::mt19937_64 rng(seed_);
  fill_uniform(p.span().first(classes_ * dim_), scale_, rng);
  return p;
}

void LogisticRegression::logits(const ParamVector& params, std::span<const double> x,
                                std::span<double> out) const {
  const double* w = params.data();
  const double* b = params.data() + classes_ * dim_;
  for (std::uint32_t c = 0; c < classes_; ++c) {
    double z = b[c];
    const double* wc = w + c * dim_;
    for (std::size_t j = 0; j < dim_; ++j) z += wc[j] * x[j];
    out[c] = z;
  }
}

double LogisticRegression::loss(const ParamVector& params, const BatchView& batch) const {
  check_shapes(params, parameter_count(), batch, dim_, classes_);
  std::vector<double> z(classes_);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    logits(params, batch.row(i), z);
    total += softmax_xent(z, batch.labels[i]);
  }
  return total / static_cast<double>(batch.size());
}

double LogisticRegression::loss_and_grad(const ParamVector& params, const BatchView& batch,
                                         ParamVector& grad_out) const {
  check_shapes(params, parameter_count(), batch, dim_, classes_);
  grad_out = ParamVector(parameter_count());
  double* gw = grad_out.data();
  double* gb = grad_out.data() + classes_ * dim_;
  std::vector<double> z(classes_);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto x = batch.row(i);
    logits(params, x, z);
    total += softmax_xent(z, batch.labels[i]);
    z[batch.labels[i]] -= 1.0;  // dL/dz = p - onehot
    for (std::uint32_t c = 0; c < classes_; ++c) {
      double* gwc = gw + c * dim_;
      for (std::size_t j = 0; j < dim_; ++j) gwc[j] += z[c] * x[j];
      gb[c] += z[c];
    }
  }
  const double b = static_cast<double>(batch.size());
  for (double& g : grad_out) g /= b;
  return total / b;
}

ParamVector LogisticRegression::grad(const ParamVector& params, const BatchView& batch) const {
  ParamVector g;
  loss_and_grad(params, batch, g);
  return g;
}

// ---------------------------------------------------------------------------

Mlp::Mlp(const ModelSpec& spec)
    : dim_(spec.input_dim),
      hidden_(spec.hidden_dim),
      classes_(spec.num_classes),
      seed_(spec.init_seed),
      scale_(spec.init_scale) {
  spec.validate();
  if (spec.kind != ModelKind::Mlp) throw std::invalid_argument("Mlp built from non-mlp spec");
}

std::size_t Mlp::parameter_count() const {
  return hidden_ * dim_ + hidden_ + classes_ * hidden_ + classes_;
}

ParamVector Mlp::init_params() const {
  ParamVector p(parameter_count());
  std::mt19937_64 rng(seed_);
  auto s = p.span();
  fill_uniform(s.subspan(0, hidden_ * dim_), scale_, rng);
  fill_uniform(s.subspan(hidden_ * dim_ + hidden_, classes_ * hidden_), scale_, rng);
  return p;
}

void Mlp::logits(const ParamVector& params, std::span<const double> x,
                 std::span<double> out) const {
  const double* w1 = params.data();
  const double* b1 = w1 + hidden_ * dim_;
  const double* w2 = b1 + hidden_;
  const double* b2 = w2 + classes_ * hidden_;
  std::vector<double> h(hidden_);
  for (std::size_t u = 0; u < hidden_; ++u) {
    double a = b1[u];
    for (std::size_t j = 0; j < dim_; ++j) a += w1[u * dim_ + j] * x[j];
    h[u] = a > 0.0 ? a : 0.0;
  }
  for (std::uint32_t c = 0; c < classes_; ++c) {
    double z = b2[c];
    for (std::size_t u = 0; u < hidden_; ++u) z += w2[c * hidden_ + u] * h[u];
    out[c] = z;
  }
}

double Mlp::forward_backward(const ParamVector& params, const BatchView& batch,
                             ParamVector* grad_out) const {
  check_shapes(params, parameter_count(), batch, dim_, classes_);
  const double* w1 = params.data();
  const double* b1 = w1 + hidden_ * dim_;
  const double* w2 = b1 + hidden_;
  const double* b2 = w2 + classes_ * hidden_;

  double *gw1 = nullptr, *gb1 = nullptr, *gw2 = nullptr, *gb2 = nullptr;
  if (grad_out) {
    *grad_out = ParamVector(parameter_count());
    gw1 = grad_out->data();
    gb1 = gw1 + hidden_ * dim_;
    gw2 = gb1 + hidden_;
    gb2 = gw2 + classes_ * hidden_;
  }

  std::vector<double> pre(hidden_), h(hidden_), z(classes_), dh(hidden_);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto x = batch.row(i);
    for (std::size_t u = 0; u < hidden_; ++u) {
      double a = b1[u];
      for (std::size_t j = 0; j < dim_; ++j) a += w1[u * dim_ + j] * x[j];
      pre[u] = a;
      h[u] = a > 0.0 ? a : 0.0;
    }
    for (std::uint32_t c = 0; c < classes_; ++c) {
      double s = b2[c];
      for (std::size_t u = 0; u < hidden_; ++u) s += w2[c * hidden_ + u] * h[u];
      z[c] = s;
    }
    total += softmax_xent(z, batch.labels[i]);
    if (!grad_out) continue;

    z[batch.labels[i]] -= 1.0;
    std::fill(dh.begin(), dh.end(), 0.0);
    for (std::uint32_t c = 0; c < classes_; ++c) {
      for (std::size_t u = 0; u < hidden_; ++u) {
        gw2[c * hidden_ + u] += z[c] * h[u];
        dh[u] += w2[c * hidden_ + u] * z[c];
      }
      gb2[c] += z[c];
    }
    for (std::size_t u = 0; u < hidden_; ++u) {
      if (pre[u] <= 0.0) continue;  // ReLU gate
      for (std::size_t j = 0; j < dim_; ++j) gw1[u * dim_ + j] += dh[u] * x[j];
      gb1[u] += dh[u];
    }
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  if (grad_out) {
    for (double& g : *grad_out) g *= inv_b;
  }
  return total * inv_b;
}

double Mlp::loss(const ParamVector& params, const BatchView& batch) const {
  return forward_backward(params, batch, nullptr);
}

ParamVector Mlp::grad(const ParamVector& params, const BatchView& batch) const {
  ParamVector g;
  forward_backward(params, batch, &g);
  return g;
}

double Mlp::loss_and_grad(const ParamVector& params, const BatchView& batch,
                          ParamVector& grad_out) const {
  return forward_backward(params, batch, &grad_out);
}

// ---------------------------------------------------------------------------

std::unique_ptr<Classifier> make_model(const ModelSpec& spec) {
  switch (spec.kind) {
    case ModelKind::LogisticRegression: return std::make_unique<LogisticRegression>(spec);
    case ModelKind::Mlp: return std::make_unique<Mlp>(spec);
  }
  throw std::invalid_argument("unknown model kind");
}

std::size_t parameter_count(const ModelSpec& spec) { return make_model(spec)->parameter_count(); }

ParamVector init_params(const ModelSpec& spec) { return make_model(spec)->init_params(); }

double loss(const ModelSpec& spec, const ParamVector& params, const BatchView& batch) {
  return make_model(spec)->loss(params, batch);
}

ParamVector grad(const ModelSpec& spec, const ParamVector& params, const BatchView& batch) {
  return make_model(spec)->grad(params, batch);
}

Evaluation evaluate(const Classifier& model, const ParamVector& params,
                    const datagen::LabeledDataset& ds) {
  const auto batch = view_of(ds);
  check_shapes(params, model.parameter_count(), batch, model.input_dim(), model.num_classes());
  std::vector<double> z(model.num_classes());
  std::size_t correct = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    model.logits(params, batch.row(i), z);
    const auto predicted = static_cast<std::uint32_t>(std::max_element(z.begin(), z.end()) - z.begin());
    if (predicted == batch.labels[i]) ++correct;
    total += softmax_xent(z, batch.labels[i]);
  }
  const double n = static_cast<double>(batch.size());
  return {static_cast<double>(correct) / n, total / n};
}

Evaluation evaluate(const ModelSpec& spec, const ParamVector& params,
                    const datagen::LabeledDataset& ds) {
  return evaluate(*make_model(spec), params, ds);
}

}  // namespace fedsim::models
