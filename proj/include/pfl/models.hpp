#pragma once

// Differentiable model families with hand-derived gradients.
//
// Parameter layout (row-major, weights then biases per layer):
//   linear_regression / linear_svm : "output" = d weights, 1 bias
//   softmax_classifier             : "output" = C x d weights, C biases
//   mlp_*                          : "hidden" = H x d weights, H biases,
//                                    "output" = C x H weights, C biases
// The MLP hidden activation is tanh. linear_svm stores labels as {0, 1}
// and trains on {-1, +1}.

#include <cstdint>
#include <span>
#include <vector>

#include "pfl/types.hpp"

namespace pfl {

bool is_linear_family(ModelFamily f);
bool is_classifier(ModelFamily f);
TaskKind task_of(ModelFamily f);

/// Throws ConfigError on nonpositive dims or a class count the family cannot take.
void validate_arch(const ArchDescriptor& arch);
std::size_t param_count(const ArchDescriptor& arch);
std::vector<LayerSlice> layer_layout(const ArchDescriptor& arch);

ModelParams zero_params(const ArchDescriptor& arch);

/// Linear families start at zero. MLP weights are U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
ModelParams init_params(const ArchDescriptor& arch, std::uint64_t seed);

struct Prediction {
  /// Class scores (classifiers) or the single regression output.
  std::vector<double> scores;
  /// Softmax of `scores`; empty for regression.
  std::vector<double> probs;
  /// Regression output, or the SVM margin w.x + b; 0 for softmax/MLP classifiers.
  double value = 0.0;
  /// argmax of probs (ties to the lowest class) or the regression output.
  double label = 0.0;
};

Prediction predict(const ModelParams& params, std::span<const double> x);

/// Mean example loss plus (l2_reg / 2) * ||weights||^2 (biases excluded).
double loss(const ModelParams& params, Batch batch);
double loss(const ModelParams& params, std::span<const Example> batch);

std::vector<double> gradient(const ModelParams& params, Batch batch);
std::vector<double> gradient(const ModelParams& params, std::span<const Example> batch);

/// Writes the gradient into `grad` (overwritten) and returns the loss.
double loss_and_gradient(const ModelParams& params, Batch batch, std::span<double> grad);

/// Hidden activations for MLPs, the input itself for linear families.
std::vector<double> representation(const ModelParams& params, std::span<const double> x);

/// Accuracy or mean squared error of the model's predictions.
double evaluate_metric(const ModelParams& params, Batch batch, MetricKind kind);

}  // namespace pfl
