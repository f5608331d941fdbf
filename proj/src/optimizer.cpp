#include "lowrank/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lowrank/analysis.hpp"

namespace lowrank {

std::string to_string(SamplingMode mode) {
  return mode == SamplingMode::WithoutReplacementPerEpoch ? "without_replacement" : "uniform";
}

SamplingMode sampling_from_string(const std::string& name) {
  if (name == "without_replacement" || name == "epoch") return SamplingMode::WithoutReplacementPerEpoch;
  if (name == "uniform" || name == "with_replacement") return SamplingMode::UniformWithReplacement;
  throw Error(ErrorCode::BadConfig, "unknown sampling mode '" + name + "'");
}

double SgdConfig::lr_at_epoch(std::size_t epoch) const {
  double rate = lr;
  for (const auto& s : schedule)
    if (epoch >= s.epoch) rate *= s.multiplier;
  return rate;
}

void SgdConfig::validate(std::size_t dataset_size, bool theorem_analysis) const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::BadParams, "learning rate must be > 0");
  if (!(weight_decay >= 0.0)) throw Error(ErrorCode::BadParams, "weight decay must be >= 0");
  if (batch_size < 1 || batch_size > dataset_size) {
    throw Error(ErrorCode::BadParams, "batch size must lie in [1, m]");
  }
  for (const auto& s : schedule) {
    if (!(s.multiplier > 0.0)) throw Error(ErrorCode::BadParams, "schedule multiplier must be > 0");
  }
  if (theorem_analysis) {
    for (std::size_t e = 0; e < std::max<std::size_t>(epochs, 1); ++e) {
      if (lr_at_epoch(e) * weight_decay >= 0.5) {
        throw Error(ErrorCode::BadParams, "unrolling analysis requires lr * lambda < 0.5");
      }
    }
  }
}

std::vector<ScheduleStep> proportional_step_schedule(std::size_t epochs) {
  std::vector<ScheduleStep> s;
  for (std::size_t at : {60u, 100u, 200u}) {
    const auto e = static_cast<std::size_t>(std::llround(static_cast<double>(epochs * at) / 500.0));
    s.push_back({e, 0.1});
  }
  return s;
}

// ------------------------------------------------------------------ sampler

BatchSampler::BatchSampler(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed,
                           SamplingMode mode)
    : m_(dataset_size), b_(batch_size), mode_(mode), rng_(seed) {
  if (b_ < 1 || b_ > m_) throw Error(ErrorCode::BadParams, "batch size must lie in [1, m]");
}

std::vector<std::vector<std::size_t>> BatchSampler::next_epoch() {
  std::vector<std::vector<std::size_t>> batches;
  const std::size_t nb = m_ / b_;
  batches.reserve(nb);
  if (mode_ == SamplingMode::WithoutReplacementPerEpoch) {
    const auto perm = rng_.permutation(m_);
    for (std::size_t k = 0; k < nb; ++k)
      batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(k * b_),
                           perm.begin() + static_cast<std::ptrdiff_t>((k + 1) * b_));
  } else {
    for (std::size_t k = 0; k < nb; ++k) {
      // Partial Fisher-Yates: a uniform B-subset.
      std::vector<std::size_t> pool(m_);
      for (std::size_t i = 0; i < m_; ++i) pool[i] = i;
      for (std::size_t i = 0; i < b_; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng_.below(m_ - i));
        std::swap(pool[i], pool[j]);
      }
      pool.resize(b_);
      batches.push_back(std::move(pool));
    }
  }
  return batches;
}

Parameters sgd_step(const Parameters& params, const GradientSet& grad, double lr) {
  if (params.size() != grad.size()) throw Error(ErrorCode::ShapeMismatch, "gradient edge count");
  Parameters out = params;
  for (std::size_t e = 0; e < out.size(); ++e) {
    if (!out[e].same_shape(grad[e])) throw Error(ErrorCode::ShapeMismatch, "gradient shape");
    out[e].axpy(-lr, grad[e]);
  }
  return out;
}

// ----------------------------------------------------------------- unrolling

UnrollRecorder::UnrollRecorder(const NetworkGraph& g, double weight_decay, std::size_t batch_size,
                               std::size_t k_max)
    : lambda_(weight_decay), batch_(batch_size), k_max_(k_max) {
  if (k_max_ == 0) throw Error(ErrorCode::BadParams, "k_max must be >= 1");
  for (std::size_t idx : g.trainable_edges()) patch_counts_.push_back(lowrank::patch_count(g, idx));
}

void UnrollRecorder::record(const Parameters& before, const GradientSet& data_grad, double lr,
                            const Parameters& after) {
  if (before.size() != patch_counts_.size() || data_grad.size() != patch_counts_.size()) {
    throw Error(ErrorCode::ShapeMismatch, "recorder edge count mismatch");
  }
  Anchor fresh;
  fresh.start = before;
  fresh.lr = lr;
  for (const auto& w : before.weights) fresh.u.emplace_back(w.rows(), w.cols());
  anchors_.push_front(std::move(fresh));

  const double shrink = 1.0 - 2.0 * lr * lambda_;
  for (auto& a : anchors_) {
    for (std::size_t e = 0; e < a.u.size(); ++e) {
      a.u[e] *= shrink;
      a.u[e].axpy(-lr, data_grad[e]);
    }
    a.decay *= shrink;
    if (lr != a.lr) a.constant_lr = false;
    ++a.age;
  }
  while (!anchors_.empty() && anchors_.back().age > k_max_) anchors_.pop_back();
  current_ = after;
  ++steps_;
}

const Parameters& UnrollRecorder::current() const {
  if (!current_) throw Error(ErrorCode::InsufficientHistory, "no step recorded yet");
  return *current_;
}

std::vector<std::size_t> UnrollRecorder::thinned_ks() const {
  std::vector<std::size_t> ks;
  const std::size_t limit = std::min(k_max_, steps_ == 0 ? 0 : steps_ - 1);
  for (std::size_t k = 1; k <= limit; k *= 2) ks.push_back(k);
  return ks;
}

UnrollRecorder::Window UnrollRecorder::window(std::size_t edge, std::size_t k) const {
  if (k == 0 || k >= steps_ || k > k_max_) {
    throw Error(ErrorCode::InsufficientHistory,
                "window k=" + std::to_string(k) + " needs more history (steps=" +
                    std::to_string(steps_) + ", k_max=" + std::to_string(k_max_) + ")");
  }
  if (edge >= patch_counts_.size()) throw Error(ErrorCode::BadParams, "edge index out of range");
  const Anchor& a = anchors_[k - 1];
  Window w;
  w.k = k;
  w.w_now = current_->weights[edge];
  w.w_past = a.start.weights[edge];
  w.u = a.u[edge];
  w.decay = a.decay;
  w.lr = a.lr;
  w.constant_lr = a.constant_lr;
  w.rank_budget = patch_counts_[edge] * batch_ * k;
  return w;
}

double UnrollRecorder::identity_residual(std::size_t edge, std::size_t k) const {
  const Window w = window(edge, k);
  Matrix r = w.w_now;
  r.axpy(-w.decay, w.w_past);
  r -= w.u;
  return frobenius_norm(r);
}

UnrollBound unroll_bound(const UnrollRecorder& recorder, std::size_t edge, std::size_t k,
                         MatrixNorm norm) {
  const auto w = recorder.window(edge, k);
  if (w.lr * recorder.weight_decay() >= 0.5) {
    throw Error(ErrorCode::BadParams, "unrolled bound requires lr * lambda < 0.5");
  }
  UnrollBound b;
  b.norm = norm;
  b.rank_budget = w.rank_budget;
  b.constant_lr = w.constant_lr;
  const double now = matrix_norm(w.w_now, norm);
  const double past = matrix_norm(w.w_past, norm);
  b.bound = now > 0.0 ? w.decay * past / now : std::numeric_limits<double>::infinity();
  b.u = w.u;
  return b;
}

EpsilonBudget k_for_epsilon(double lr, double lambda, double eps) {
  if (!(eps > 0.0 && eps < 1.0)) throw Error(ErrorCode::BadParams, "epsilon must lie in (0, 1)");
  const double ml = lr * lambda;
  if (!(ml > 0.0 && ml < 0.5)) throw Error(ErrorCode::BadParams, "need 0 < lr*lambda < 0.5");
  const double q = 1.0 - 2.0 * ml;
  EpsilonBudget out;
  const double ratio = std::log(eps) / std::log(q);
  auto k = static_cast<std::size_t>(std::max(1.0, std::ceil(ratio)));
  // Guard the ceiling against rounding in the logarithms.
  while (k > 1 && std::pow(q, static_cast<double>(k - 1)) <= eps) --k;
  while (std::pow(q, static_cast<double>(k)) > eps) ++k;
  out.k = k;
  out.loose_factor = std::log(1.0 / eps) / (2.0 * ml);
  return out;
}

// ----------------------------------------------------------------- training

double accuracy(const NetworkGraph& g, const Parameters& params, std::span<const Sample> data,
                LossKind loss) {
  if (data.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t correct = 0;
  for (const auto& s : data) {
    const auto out = forward(g, params, s.x).output;
    bool ok;
    if (out.size() > 1) {
      const auto pa = std::max_element(out.begin(), out.end()) - out.begin();
      const auto pb = std::max_element(s.y.begin(), s.y.end()) - s.y.begin();
      ok = pa == pb;
    } else {
      const double threshold = loss == LossKind::Logistic ? 0.0 : 0.5;
      ok = (out[0] > threshold) == (s.y[0] > 0.5);
    }
    correct += ok ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainingResult run_training(const NetworkGraph& g, Parameters params,
                            std::span<const Sample> train, std::span<const Sample> test,
                            LossKind loss, const SgdConfig& cfg, UnrollRecorder* recorder,
                            const TrainingOptions& options, const TrainingHooks& hooks) {
  require_valid(g);
  check_parameters(g, params);
  if (train.empty()) throw Error(ErrorCode::EmptyBatch, "training set is empty");
  cfg.validate(train.size(), recorder != nullptr);

  TrainingResult res;
  BatchSampler sampler(train.size(), cfg.batch_size, cfg.seed, cfg.sampling);
  Parameters epoch_start = params;
  std::vector<Sample> batch;
  batch.reserve(cfg.batch_size);
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at_epoch(epoch);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (const auto& idx : sampler.next_epoch()) {
      batch.clear();
      for (std::size_t i : idx) batch.push_back(train[i]);
      ++step;
      BatchLoss bl;
      try {
        bl = loss_gradient_with_value(g, params, batch, loss, 0.0);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::NonFiniteLoss) throw;
        throw Error(ErrorCode::NonFiniteLoss, "step " + std::to_string(step) + ": " + e.what());
      }
      GradientSet full = bl.gradient;
      for (std::size_t e = 0; e < full.size(); ++e) full[e].axpy(2.0 * cfg.weight_decay, params[e]);
      Parameters next = sgd_step(params, full, lr);
      for (const auto& w : next.weights) {
        if (!w.all_finite()) {
          throw Error(ErrorCode::NonFiniteLoss,
                      "step " + std::to_string(step) + ": weights became non-finite");
        }
      }
      if (recorder) recorder->record(params, bl.gradient, lr, next);
      params = std::move(next);
      loss_sum += bl.mean_loss;
      ++loss_count;
      if (hooks.on_step) hooks.on_step(step, params, recorder);
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.lr = lr;
    m.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    if (options.compute_accuracy) {
      m.train_acc = accuracy(g, params, train, loss);
      m.test_acc = accuracy(g, params, test, loss);
    } else {
      m.train_acc = m.test_acc = std::numeric_limits<double>::quiet_NaN();
    }
    const RankReport rr = rank_report(params, options.rank_epsilon);
    m.avg_rank = rr.average_rank;
    for (const auto& er : rr.edges) m.edge_ranks.push_back(er.rank);
    m.d_metric = d_metric(params, epoch_start);
    epoch_start = params;
    if (options.keep_epoch_params) res.epoch_params.push_back(params);
    if (hooks.on_epoch) hooks.on_epoch(m, params);
    res.series.push_back(std::move(m));
  }
  res.steps = step;
  res.params = std::move(params);
  return res;
}

}  // namespace lowrank
