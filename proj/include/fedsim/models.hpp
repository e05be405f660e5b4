#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>

#include "fedsim/datagen.hpp"
#include "fedsim/params.hpp"

namespace fedsim::models {

enum class ModelKind { LogisticRegression, Mlp };

const char* to_string(ModelKind kind) noexcept;
ModelKind model_kind_from_string(const std::string& s);

struct ModelSpec {
  ModelKind kind = ModelKind::LogisticRegression;
  std::size_t input_dim = 1;
  std::uint32_t num_classes = 2;
  std::size_t hidden_dim = 16;  // Mlp only
  std::uint64_t init_seed = 0;
  double init_scale = 0.01;

  void validate() const;
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Non-owning view of b rows.
struct BatchView {
  std::size_t dim = 0;
  std::span<const double> features;
  std::span<const std::uint32_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const double> row(std::size_t i) const { return features.subspan(i * dim, dim); }
};

inline BatchView view_of(const datagen::LabeledDataset& ds) {
  return BatchView{ds.dim, ds.features, ds.labels};
}

/// Differentiable objective consumed by local training. Loss and gradient are
/// means over the batch.
class Model {
 public:
  virtual ~Model() = default;
  virtual std::size_t parameter_count() const = 0;
  virtual ParamVector init_params() const = 0;
  virtual double loss(const ParamVector& params, const BatchView& batch) const = 0;
  virtual ParamVector grad(const ParamVector& params, const BatchView& batch) const = 0;
  /// Writes the gradient into `grad_out` and returns the loss.
  virtual double loss_and_grad(const ParamVector& params, const BatchView& batch,
                               ParamVector& grad_out) const {
    grad_out = grad(params, batch);
    return loss(params, batch);
  }
};

/// Model producing class scores; cross-entropy over softmax(logits).
class Classifier : public Model {
 public:
  virtual std::uint32_t num_classes() const = 0;
  virtual std::size_t input_dim() const = 0;
  virtual void logits(const ParamVector& params, std::span<const double> x,
                      std::span<double> out) const = 0;
};

/// Layout: W (C x d, row-major) then b (C).
class LogisticRegression final : public Classifier {
 public:
  explicit LogisticRegression(const ModelSpec& spec);

  std::size_t parameter_count() const override { return classes_ * dim_ + classes_; }
  ParamVector init_params() const override;
  double loss(const ParamVector& params, const BatchView& batch) const override;
  ParamVector grad(const ParamVector& params, const BatchView& batch) const override;
  double loss_and_grad(const ParamVector& params, const BatchView& batch,
                       ParamVector& grad_out) const override;
  std::uint32_t num_classes() const override { return classes_; }
  std::size_t input_dim() const override { return dim_; }
  void logits(const ParamVector& params, std::span<const double> x,
              std::span<double> out) const override;

 private:
  std::size_t dim_;
  std::uint32_t classes_;
  std::uint64_t seed_;
  double scale_;
};

/// One hidden ReLU layer. Layout: W1 (h x d), b1 (h), W2 (C x h), b2 (C).
class Mlp final : public Classifier {
 public:
  explicit Mlp(const ModelSpec& spec);

  std::size_t parameter_count() const override;
  ParamVector init_params() const override;
  double loss(const ParamVector& params, const BatchView& batch) const override;
  ParamVector grad(const ParamVector& params, const BatchView& batch) const override;
  double loss_and_grad(const ParamVector& params, const BatchView& batch,
                       ParamVector& grad_out) const override;
  std::uint32_t num_classes() const override { return classes_; }
  std::size_t input_dim() const override { return dim_; }
  void logits(const ParamVector& params, std::span<const double> x,
              std::span<double> out) const override;

 private:
  double forward_backward(const ParamVector& params, const BatchView& batch,
                          ParamVector* grad_out) const;

  std::size_t dim_;
  std::size_t hidden_;
  std::uint32_t classes_;
  std::uint64_t seed_;
  double scale_;
};

std::unique_ptr<Classifier> make_model(const ModelSpec& spec);

std::size_t parameter_count(const ModelSpec& spec);
ParamVector init_params(const ModelSpec& spec);
double loss(const ModelSpec& spec, const ParamVector& params, const BatchView& batch);
ParamVector grad(const ModelSpec& spec, const ParamVector& params, const BatchView& batch);

struct Evaluation {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

/// Argmax accuracy (ties to the lowest class id) and mean cross-entropy.
Evaluation evaluate(const Classifier& model, const ParamVector& params,
                    const datagen::LabeledDataset& ds);
Evaluation evaluate(const ModelSpec& spec, const ParamVector& params,
                    const datagen::LabeledDataset& ds);

}  // namespace fedsim::models
