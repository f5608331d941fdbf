#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lowrank/optimizer.hpp"

namespace lowrank {

// ------------------------------------------------------------------- ranks

/// Number of singular values of m / ||m||_2 strictly above eps. A zero
/// matrix has rank 0. Throws NonFiniteInput, BadParams (eps <= 0).
std::size_t effective_rank(const Matrix& m, double eps);
std::size_t effective_rank_from_spectrum(std::span<const double> sigma, double eps);

struct EdgeRank {
  std::size_t edge = 0;
  std::size_t rows = 0, cols = 0;
  std::vector<double> normalized_spectrum;
  std::size_t rank = 0;
};

struct RankReport {
  double epsilon = 1e-3;
  std::vector<EdgeRank> edges;
  double average_rank = 0.0;
};

RankReport rank_report(const Parameters& params, double eps);
/// One report per checkpoint. Throws GraphMismatch.
std::vector<RankReport> rank_time_series(std::span<const Checkpoint> checkpoints, double eps);

// ------------------------------------------------------- gradient-rank lemma

inline constexpr double kLemmaRankTolerance = 1e-8;
inline constexpr double kDegenerateMargin = 1e-9;

struct EdgeGradientRank {
  std::size_t edge = 0;
  std::size_t patch_count = 0;
  std::size_t worst_rank = 0;
  std::size_t checks = 0;
  std::size_t violations = 0;
  std::vector<double> worst_spectrum;
};

struct GradientRankReport {
  std::vector<EdgeGradientRank> edges;
  std::size_t samples_checked = 0;
  std::size_t samples_skipped = 0;  // zero input or pre-activation within the margin
  bool ok() const;
};

/// For every sample and output component, the numerical rank (sigma_k >
/// tolerance * sigma_1) of every edge gradient is compared against N^{ij}.
GradientRankReport verify_gradient_rank(const NetworkGraph& g, const Parameters& params,
                                        std::span<const Tensor3> samples,
                                        double tolerance = kLemmaRankTolerance);

// ------------------------------------------------------------ proximity bounds

struct BoundEntry {
  std::size_t edge = 0;
  std::size_t k = 0;
  double bound = 0.0;
  std::size_t rank_budget = 0;
  double actual_spectral = 0.0;   // of W_t / ||W_t||_2
  double actual_frobenius = 0.0;  // of W_t / ||W_t||_F
  double slack = 0.0;             // bound - actual in the declared norm
  bool constant_lr = true;
  bool vacuous = false;           // bound >= 1
  MatrixNorm norm = MatrixNorm::Frobenius;
};

struct GradientFormEntry {
  std::size_t edge = 0;
  std::size_t rank_budget = 0;  // N * B
  double min_ratio = 0.0;       // min ||grad L^lambda_S~|| / ||W||
  double mean_ratio = 0.0;
  double max_ratio = 0.0;
  double implied_bound = 0.0;   // min_ratio / (2 lambda)
  double actual = 0.0;          // distance of W / ||W|| to rank N*B
  bool holds = true;
  MatrixNorm norm = MatrixNorm::Frobenius;
};

struct BoundReport {
  std::vector<BoundEntry> windows;
  std::vector<GradientFormEntry> gradient_form;
  std::size_t batches_evaluated = 0;
  bool exhaustive = false;
  std::size_t excluded_windows = 0;  // spanning a learning-rate change
  bool ok() const;
};

inline constexpr double kBoundSlackTolerance = 1e-9;

/// Unrolled bound against the Eckart-Young distance for every edge and k.
/// Windows that span a learning-rate change are counted and skipped.
BoundReport theorem_bound_report(const UnrollRecorder& recorder, std::span<const std::size_t> ks,
                                 MatrixNorm norm = MatrixNorm::Frobenius);

inline constexpr std::uint64_t kExhaustiveBatchLimit = 5000;
inline constexpr std::size_t kSampledBatchCount = 1000;

/// Minimum over batches of ||grad L^lambda_S~|| / (2 lambda ||W||). Every
/// C(m, B) batch is enumerated when C(m, B) <= 5000; otherwise `batch_budget`
/// batches are sampled and `holds` is reported without being asserted.
/// Throws LambdaZero, BadParams.
BoundReport gradient_form_bound(const NetworkGraph& g, const Parameters& params,
                                std::span<const Sample> data, LossKind loss, double lambda,
                                std::size_t batch_size, std::size_t batch_budget = kSampledBatchCount,
                                std::uint64_t seed = 0, MatrixNorm norm = MatrixNorm::Frobenius);

std::uint64_t binomial(std::uint64_t n, std::uint64_t k);
/// All k-subsets of [0, n) in lexicographic order.
std::vector<std::vector<std::size_t>> enumerate_subsets(std::size_t n, std::size_t k);

// ------------------------------------------------------------------- noise

/// Mean Frobenius distance over trainable edges. Throws GraphMismatch.
double d_metric(const Parameters& a, const Parameters& b);

struct Collinearity {
  double score = 1.0;  // min over edges and pairs of |cos|
  std::size_t edge = 0, first = 0, second = 0;
  std::size_t zero_vectors = 0;
  bool collinear = true;  // score >= 1 - 1e-9
};

/// Throws TooFewSamples.
Collinearity collinearity_check(std::span<const GradientSet> scaled);

struct PairDependence {
  double sigma_min = 0.0;
  std::size_t first = 0, second = 0;
};

struct NoiseReport {
  std::vector<std::vector<double>> residuals;  // [sample][edge]
  double min_residual = 0.0;
  double max_abs_output = 0.0;
  bool zero_function = false;
  std::vector<double> loss_derivatives;
  /// Min over pairs of the smallest singular value of the 2 x n matrix of
  /// normalized inputs (whole-input collinearity).
  PairDependence input_collinearity;
  /// Same on the stacked patch matrices of the first trainable edge.
  PairDependence patch_dependence;
  Collinearity scaled_gradients;
  std::vector<double> d_metric_series;
};

inline constexpr double kZeroFunctionTolerance = 1e-12;

/// Stationarity residuals ||l'(f(x_k), y_k) grad f(x_k) + 2 lambda W||,
/// zero-function test, per-sample loss derivatives, and input dependence
/// diagnostics. Requires k_out == 1.
NoiseReport degeneracy_check(const NetworkGraph& g, const Parameters& params,
                             std::span<const Sample> data, LossKind loss, double lambda);

// ----------------------------------------------------------- serialization

std::string to_json(const RankReport& r);
std::string to_json(const BoundReport& r);
std::string to_json(const NoiseReport& r);
std::string to_json(const GradientRankReport& r);
/// CSV rows edge,k,bound,actual_spectral,actual_frobenius,rank_budget,slack
std::string bound_csv(const BoundReport& r);

}  // namespace lowrank
