#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lowrank/autodiff.hpp"
#include "lowrank/rng.hpp"

namespace lowrank {

enum class SamplingMode { WithoutReplacementPerEpoch, UniformWithReplacement };

std::string to_string(SamplingMode mode);
SamplingMode sampling_from_string(const std::string& name);

/// From `epoch` (0-based) on, the learning rate is multiplied by
/// `multiplier`; entries compound.
struct ScheduleStep {
  std::size_t epoch = 0;
  double multiplier = 1.0;
};

struct SgdConfig {
  double lr = 0.1;
  double weight_decay = 5e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  std::vector<ScheduleStep> schedule;
  std::uint64_t seed = 0;
  SamplingMode sampling = SamplingMode::WithoutReplacementPerEpoch;

  double lr_at_epoch(std::size_t epoch) const;
  /// Throws BadParams. With `theorem_analysis`, also requires lr*lambda < 0.5
  /// for every scheduled rate.
  void validate(std::size_t dataset_size, bool theorem_analysis = false) const;
};

/// Decay by 0.1 at epochs 60, 100 and 200 of 500, rescaled to `epochs`.
std::vector<ScheduleStep> proportional_step_schedule(std::size_t epochs);

class BatchSampler {
 public:
  BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed,
               SamplingMode mode);

  /// floor(m / B) batches. Without replacement, a fresh permutation is cut
  /// into consecutive batches and the ragged tail is dropped. In uniform
  /// mode every batch is an independent uniformly random B-subset.
  std::vector<std::vector<std::size_t>> next_epoch();
  std::size_t batches_per_epoch() const noexcept { return m_ / b_; }

 private:
  std::size_t m_;
  std::size_t b_;
  SamplingMode mode_;
  Rng rng_;
};

/// W' = W - lr * G for every edge. Throws ShapeMismatch.
Parameters sgd_step(const Parameters& params, const GradientSet& grad, double lr);

/// Tracks, for every window length k <= k_max, the decomposition
/// W_t = (1 - 2 lr lambda)^k W_{t-k} + U with
/// U = -lr sum_{l=1..k} (1 - 2 lr lambda)^{l-1} G_{t-l}, G the data gradient.
class UnrollRecorder {
 public:
  UnrollRecorder(const NetworkGraph& g, double weight_decay, std::size_t batch_size,
                 std::size_t k_max = 64);

  /// One SGD step: `before` is W_{t-1}, `data_grad` the batch gradient
  /// without the decay term, `after` is W_t.
  void record(const Parameters& before, const GradientSet& data_grad, double lr,
              const Parameters& after);

  std::size_t steps() const noexcept { return steps_; }
  std::size_t k_max() const noexcept { return k_max_; }
  double weight_decay() const noexcept { return lambda_; }
  std::size_t batch_size() const noexcept { return batch_; }
  std::size_t edge_count() const noexcept { return patch_counts_.size(); }
  std::size_t patch_count(std::size_t edge) const { return patch_counts_.at(edge); }
  const Parameters& current() const;

  /// Powers of two below the step count, up to k_max.
  std::vector<std::size_t> thinned_ks() const;

  struct Window {
    std::size_t k = 0;
    Matrix w_now;
    Matrix w_past;
    Matrix u;
    double decay = 1.0;  // prod (1 - 2 lr_s lambda) over the window
    double lr = 0.0;     // rate at the start of the window
    bool constant_lr = true;
    std::size_t rank_budget = 0;  // N * B * k
  };

  /// Throws InsufficientHistory unless 1 <= k < steps and k <= k_max.
  Window window(std::size_t edge, std::size_t k) const;

  /// ||W_t - decay W_{t-k} - U||_F.
  double identity_residual(std::size_t edge, std::size_t k) const;

 private:
  struct Anchor {
    Parameters start;
    std::vector<Matrix> u;
    double decay = 1.0;
    double lr = 0.0;
    bool constant_lr = true;
    std::size_t age = 0;
  };

  double lambda_;
  std::size_t batch_;
  std::size_t k_max_;
  std::vector<std::size_t> patch_counts_;
  std::deque<Anchor> anchors_;  // front = newest
  std::optional<Parameters> current_;
  std::size_t steps_ = 0;
};

struct UnrollBound {
  double bound = 0.0;  // decay * ||W_{t-k}|| / ||W_t||
  std::size_t rank_budget = 0;
  Matrix u;
  bool constant_lr = true;
  MatrixNorm norm = MatrixNorm::Frobenius;
};

/// Throws InsufficientHistory; BadParams when lr * lambda >= 0.5.
UnrollBound unroll_bound(const UnrollRecorder& recorder, std::size_t edge, std::size_t k,
                         MatrixNorm norm = MatrixNorm::Frobenius);

struct EpsilonBudget {
  std::size_t k = 1;           // smallest k >= 1 with (1 - 2 lr lambda)^k <= eps
  double loose_factor = 0.0;   // log(1/eps) / (2 lr lambda)
};

/// Throws BadParams unless 0 < eps < 1 and 0 < lr*lambda < 0.5.
EpsilonBudget k_for_epsilon(double lr, double lambda, double eps);

// ---------------------------------------------------------------- training

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double avg_rank = 0.0;
  double d_metric = 0.0;
  std::vector<std::size_t> edge_ranks;
};

struct TrainingOptions {
  double rank_epsilon = 1e-3;
  bool compute_accuracy = true;
  /// Keep a copy of the parameters after every epoch.
  bool keep_epoch_params = false;
};

struct TrainingHooks {
  /// After every SGD step (1-based global step index).
  std::function<void(std::size_t step, const Parameters&, const UnrollRecorder*)> on_step;
  std::function<void(const EpochMetrics&, const Parameters&)> on_epoch;
};

struct TrainingResult {
  Parameters params;
  std::vector<EpochMetrics> series;
  std::vector<Parameters> epoch_params;
  std::size_t steps = 0;
};

/// Fraction of correct predictions. k_out > 1: argmax match. k_out == 1:
/// threshold at 0 for logistic, 0.5 otherwise. NaN for an empty set.
double accuracy(const NetworkGraph& g, const Parameters& params, std::span<const Sample> data,
                LossKind loss);

/// Mini-batch SGD with weight decay. Throws NonFiniteLoss naming the step.
TrainingResult run_training(const NetworkGraph& g, Parameters params,
                            std::span<const Sample> train, std::span<const Sample> test,
                            LossKind loss, const SgdConfig& cfg, UnrollRecorder* recorder = nullptr,
                            const TrainingOptions& options = {}, const TrainingHooks& hooks = {});

// -------------------------------------------------------------- checkpoints

struct Checkpoint {
  NetworkGraph graph;
  SgdConfig config;
  std::size_t step = 0;
  std::size_t epoch = 0;
  Parameters params;
};

/// Layout: 8-byte magic "LRCKPT01", uint64 LE header length H, H bytes of
/// UTF-8 JSON header, then one block per trainable edge in (src, dst) order,
/// each rows*cols IEEE-754 float64 little-endian values in row-major order.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_bytes(const Checkpoint& ckpt);
Checkpoint checkpoint_from_bytes(const std::string& bytes);

}  // namespace lowrank
