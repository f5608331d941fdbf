#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lowrank/netgraph.hpp"

namespace lowrank {

/// One labelled example. `y` holds the regression target, the one-hot class
/// vector, or a single {0,1} label for the logistic loss.
struct Sample {
  Tensor3 x;
  std::vector<double> y;
};

enum class LossKind { MSE, SoftmaxCE, Logistic };

std::string to_string(LossKind kind);
/// Accepts "mse", "ce"/"softmax_ce", "logistic". Throws BadConfig.
LossKind loss_from_string(const std::string& name);

struct LossValue {
  double value = 0.0;
  std::vector<double> derivative;  // d loss / d f(x)
};

/// MSE: mean_k (f_k - y_k)^2. SoftmaxCE: -sum_k y_k log softmax(f)_k in
/// log-sum-exp form. Logistic: log(1 + exp(-s f)) with s = +1 for y > 0.5,
/// else -1.
LossValue evaluate_loss(LossKind kind, std::span<const double> f, std::span<const double> y);

struct OutputGradTag {
  std::size_t sample = 0;
  std::size_t component = 0;
};

struct LossGradTag {
  std::uint64_t batch_id = 0;
  double lambda = 0.0;
};

/// Per-trainable-edge gradients aligned with NetworkGraph::trainable_edges().
struct GradientSet {
  std::vector<Matrix> grads;
  std::variant<std::monostate, OutputGradTag, LossGradTag> tag;

  std::size_t size() const noexcept { return grads.size(); }
  Matrix& operator[](std::size_t e) { return grads[e]; }
  const Matrix& operator[](std::size_t e) const { return grads[e]; }

  static GradientSet zeros_like(const Parameters& params);
};

/// Vector-Jacobian product through a traced forward. `output_seed` is
/// d(scalar)/d(output). ReLU masks and max-pool argmaxes are taken from the
/// trace and held fixed.
GradientSet backward(const NetworkGraph& g, const Parameters& params, const ActivationTrace& trace,
                     std::span<const double> output_seed);

/// Gradient of f_W(x)_component. Throws TraceMismatch.
GradientSet output_gradient(const NetworkGraph& g, const Parameters& params,
                            const ActivationTrace& trace, std::size_t component);

struct BatchLoss {
  GradientSet gradient;
  double mean_loss = 0.0;  // data term only
};

/// (1/B) sum l'(f(x), y) grad f(x) + 2 lambda W. Throws EmptyBatch,
/// NonFiniteLoss.
BatchLoss loss_gradient_with_value(const NetworkGraph& g, const Parameters& params,
                                   std::span<const Sample> batch, LossKind loss, double lambda);
GradientSet loss_gradient(const NetworkGraph& g, const Parameters& params,
                          std::span<const Sample> batch, LossKind loss, double lambda);

/// l'(f(x_k), y_k) grad f(x_k) for every sample, without the decay term.
/// Throws MultiOutputUnsupported unless k_out == 1.
std::vector<GradientSet> per_sample_scaled_gradients(const NetworkGraph& g,
                                                     const Parameters& params,
                                                     std::span<const Sample> data, LossKind loss);

struct OuterProduct {
  std::vector<double> a;  // backward signal at the edge output
  std::vector<double> b;  // edge input activation
  double maxdiff = 0.0;   // max |G - a b^T|
};

/// Rank-one factorization of the output gradient of a fully-connected edge
/// (`edge` indexes trainable_edges()). Throws NotFullyConnected,
/// MultiOutputUnsupported.
OuterProduct outer_product_reconstruction(const NetworkGraph& g, const Parameters& params,
                                          const ActivationTrace& trace, std::size_t edge);

/// Scalar function of the parameters with its analytic gradient.
struct Probe {
  std::function<double(const Parameters&)> value;
  std::function<std::vector<Matrix>(const Parameters&)> gradient;
};

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t edge = 0, row = 0, col = 0;  // worst coordinate
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

inline constexpr double kFiniteDiffAbsFloor = 1e-8;

/// Central differences over every weight coordinate. The error is
/// |a - n| / max(|a|, |n|), or the absolute error when max(|a|, |n|) is
/// below kFiniteDiffAbsFloor.
FiniteDiffReport finite_diff_check(const NetworkGraph& g, const Parameters& params,
                                   const Probe& probe, double step);

/// Probe for the regularized batch loss (1/B) sum l + lambda ||W||^2.
Probe batch_loss_probe(const NetworkGraph& g, std::span<const Sample> batch, LossKind loss,
                       double lambda);

/// Regularized empirical risk value.
double regularized_loss(const NetworkGraph& g, const Parameters& params,
                        std::span<const Sample> batch, LossKind loss, double lambda);

}  // namespace lowrank
