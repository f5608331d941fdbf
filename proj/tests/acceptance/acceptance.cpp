// Acceptance suite: one PASS/FAIL line per criterion.
// Usage: acceptance [criterion ...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <future>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "lowrank/harness.hpp"

using namespace lowrank;

namespace {

// Pinned tolerances.
constexpr double kRankTol = 1e-8;           // sigma_k > kRankTol * sigma_1
constexpr double kFdStep = 1e-5;
constexpr double kFdTol = 1e-5;
constexpr double kIdentityTol = 1e-10;      // relative to max(1, ||W_t||_F)
constexpr double kBoundTol = 1e-9;
constexpr double kEckartYoungTol = 1e-9;
constexpr double kNoiseRatio = 10.0;
constexpr double kCollapseRatio = 1e-3;
constexpr double kRankDrop = 0.10;
constexpr double kSpreadLimit = 0.05;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor3 random_input(const Shape3& s, Rng& rng) {
  Tensor3 x(s);
  for (double& v : x.data()) v = rng.uniform(-1, 1);
  return x;
}

// ----------------------------------------------------------------------- 1

Outcome lemma_fc() {
  std::size_t checked = 0, skipped = 0, worst = 0, violations = 0, seeds_without_check = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t layers = 2 + rng.below(4);  // trainable layers
    std::vector<std::size_t> widths{4 + rng.below(29)};
    for (std::size_t l = 1; l < layers; ++l) widths.push_back(4 + rng.below(29));
    widths.push_back(1 + rng.below(3));
    const Network net = build_mlp(widths, false, rng);
    std::vector<Tensor3> xs;
    for (int i = 0; i < 10; ++i) xs.push_back(random_input(net.graph.layers.front(), rng));
    const auto rep = verify_gradient_rank(net.graph, net.params, xs, kRankTol);
    checked += rep.samples_checked;
    skipped += rep.samples_skipped;
    if (rep.samples_checked == 0) ++seeds_without_check;
    for (const auto& e : rep.edges) {
      worst = std::max(worst, e.worst_rank);
      violations += e.violations;
    }
  }
  return {violations == 0 && worst <= 1 && seeds_without_check == 0,
          fmt("100 MLPs, %zu samples checked, %zu skipped, max rank %zu, violations %zu", checked, skipped,
              worst, violations)};
}

// ----------------------------------------------------------------------- 2

Network random_convnet(Rng& rng) {
  while (true) {
    const Shape3 in{1 + rng.below(3), 4 + rng.below(5), 4 + rng.below(5)};
    std::vector<ConvStage> stages;
    const std::size_t n_stages = 1 + rng.below(2);
    for (std::size_t s = 0; s < n_stages; ++s) {
      ConvStage st{1 + rng.below(4), 1 + rng.below(3), 1 + rng.below(2), rng.below(2), {}};
      if (rng.below(2)) st.pool = PoolStage{rng.below(2) ? PoolOp::Max : PoolOp::Avg, {2, 2, 2, 0}};
      stages.push_back(st);
    }
    std::vector<std::size_t> fc;
    if (rng.below(2)) fc.push_back(2 + rng.below(6));
    fc.push_back(1 + rng.below(3));
    try {
      return build_convnet(in, stages, fc, rng);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::BadGeometry) throw;
    }
  }
}

Outcome lemma_conv() {
  std::size_t checked = 0, skipped = 0, violations = 0, conv_checks = 0, nets_without_check = 0;
  std::size_t max_excess = 0;  // worst rank minus the budget N (0 when tight)
  bool any_full = false;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(1000 + seed);
    const Network net = random_convnet(rng);
    std::vector<Tensor3> xs;
    for (int i = 0; i < 8; ++i) xs.push_back(random_input(net.graph.layers.front(), rng));
    const auto rep = verify_gradient_rank(net.graph, net.params, xs, kRankTol);
    checked += rep.samples_checked;
    skipped += rep.samples_skipped;
    if (rep.samples_checked == 0) ++nets_without_check;
    const auto edges = net.graph.trainable_edges();
    for (const auto& e : rep.edges) {
      violations += e.violations;
      if (!std::holds_alternative<ConvKind>(net.graph.connections[edges[e.edge]].kind)) continue;
      conv_checks += e.checks;
      if (e.worst_rank > e.patch_count) max_excess = std::max(max_excess, e.worst_rank - e.patch_count);
      const auto& w = net.params[e.edge];
      if (e.worst_rank == std::min({e.patch_count, w.rows(), w.cols()})) any_full = true;
    }
  }
  return {violations == 0 && nets_without_check == 0,
          fmt("50 conv nets, %zu samples checked, %zu skipped, %zu conv-edge checks, violations %zu%s",
              checked, skipped, conv_checks, violations, any_full ? ", bound attained" : "")};
}

// ----------------------------------------------------------------------- 3

Outcome autodiff_oracle() {
  double worst = 0;
  std::string where;
  std::size_t probes = 0, coords = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (LossKind loss : {LossKind::MSE, LossKind::SoftmaxCE, LossKind::Logistic}) {
      for (int arch = 0; arch < 2; ++arch) {
        Rng rng(seed * 7919 + static_cast<std::uint64_t>(loss) * 31 + static_cast<std::uint64_t>(arch));
        const std::size_t k = loss == LossKind::Logistic ? 1 : 3;
        Network net =
            arch == 0 ? build_mlp({5, 6 + rng.below(5), 6 + rng.below(5), k}, false, rng)
                      : build_convnet({2, 6, 6},
                                      {{3, 3, 1, 1, PoolStage{seed % 2 ? PoolOp::Max : PoolOp::Avg, {}}}},
                                      {6, k}, rng);
        std::vector<Sample> batch;
        while (batch.size() < 4) {
          // Inputs whose trace sits within 1e-3 of a ReLU kink are redrawn:
          // central differences are not a valid oracle across a kink.
          Sample s{random_input(net.graph.layers.front(), rng), std::vector<double>(k, 0.0)};
          if (forward(net.graph, net.params, s.x).trace.min_abs_preactivation < 1e-3) continue;
          if (loss == LossKind::MSE) {
            for (double& y : s.y) y = rng.uniform(-1, 1);
          } else if (loss == LossKind::SoftmaxCE) {
            s.y[rng.below(k)] = 1.0;
          } else {
            s.y[0] = static_cast<double>(rng.below(2));
          }
          batch.push_back(std::move(s));
        }
        const auto probe = batch_loss_probe(net.graph, batch, loss, 1e-3);
        const auto rep = finite_diff_check(net.graph, net.params, probe, kFdStep);
        ++probes;
        coords += rep.coordinates;
        if (rep.max_rel_error > worst) {
          worst = rep.max_rel_error;
          where = fmt("seed %llu %s %s", static_cast<unsigned long long>(seed), to_string(loss).c_str(),
                      arch == 0 ? "mlp" : "conv");
        }
      }
    }
  }
  return {worst <= kFdTol, fmt("%zu probes, %zu coordinates, max rel error %.3g (%s)", probes, coords, worst,
                               where.c_str())};
}

// ------------------------------------------------------------------- 4 + 5

struct UnrollRun {
  double worst_identity = 0;
  std::size_t rank_violations = 0;
  std::size_t u_checks = 0;
  double worst_slack = std::numeric_limits<double>::infinity();
  std::size_t bound_checks = 0;
  std::size_t nonvacuous = 0;
  std::size_t steps = 0;
};

const UnrollRun& unroll_run() {
  static const UnrollRun run = [] {
    UnrollRun r;
    const auto data = gen_synthetic(16, 200, 4, 5);
    const auto train = to_samples(data, data.train_indices, 4);
    Network net = network_preset("mlp-3-32", data.input_shape(), 4, 5);
    SgdConfig cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 1e-3;
    cfg.batch_size = 8;
    cfg.epochs = 500 / (train.size() / cfg.batch_size);
    cfg.seed = 5;
    UnrollRecorder rec(net.graph, cfg.weight_decay, cfg.batch_size, 64);
    TrainingOptions opts;
    opts.compute_accuracy = false;
    TrainingHooks hooks;
    hooks.on_step = [&](std::size_t step, const Parameters& p, const UnrollRecorder* rr) {
      r.steps = step;
      const auto ks = rr->thinned_ks();
      for (std::size_t e = 0; e < rr->edge_count(); ++e) {
        const double scale = std::max(1.0, frobenius_norm(p[e]));
        for (std::size_t k : ks) {
          const auto w = rr->window(e, k);
          r.worst_identity = std::max(r.worst_identity, rr->identity_residual(e, k) / scale);
          ++r.u_checks;
          if (numerical_rank(w.u, kRankTol) > w.rank_budget) ++r.rank_violations;
        }
      }
      const auto rep = theorem_bound_report(*rr, ks, MatrixNorm::Spectral);
      for (const auto& b : rep.windows) {
        ++r.bound_checks;
        r.worst_slack = std::min(r.worst_slack, b.slack);
        if (!b.vacuous) ++r.nonvacuous;
      }
    };
    run_training(net.graph, net.params, train, {}, LossKind::SoftmaxCE, cfg, &rec, opts, hooks);
    return r;
  }();
  return run;
}

Outcome unrolling_identity() {
  const auto& r = unroll_run();
  return {r.steps == 500 && r.worst_identity <= kIdentityTol && r.rank_violations == 0 && r.u_checks > 0,
          fmt("%zu steps, %zu (edge,k,t) windows, max relative residual %.3g, rank(U) violations %zu", r.steps,
              r.u_checks, r.worst_identity, r.rank_violations)};
}

Outcome theorem_bound() {
  const auto& r = unroll_run();
  return {r.bound_checks > 0 && r.worst_slack >= -kBoundTol,
          fmt("%zu checks (%zu non-vacuous), min slack %.3g", r.bound_checks, r.nonvacuous, r.worst_slack)};
}

// ----------------------------------------------------------------------- 6

Outcome gradient_form() {
  Rng rng(6);
  Network net = build_mlp({4, 6, 6, 1}, false, rng);
  std::vector<Sample> data;
  for (int i = 0; i < 8; ++i) data.push_back({random_input({4, 1, 1}, rng), {rng.uniform(-1, 1)}});
  SgdConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = 1e-2;
  cfg.batch_size = 2;
  cfg.epochs = 200;
  TrainingOptions opts;
  opts.compute_accuracy = false;
  const auto res = run_training(net.graph, net.params, data, {}, LossKind::MSE, cfg, nullptr, opts);
  bool pass = true;
  std::ostringstream os;
  double min_slack = std::numeric_limits<double>::infinity();
  std::size_t batches = 0;
  for (MatrixNorm norm : {MatrixNorm::Spectral, MatrixNorm::Frobenius}) {
    const auto rep = gradient_form_bound(net.graph, res.params, data, LossKind::MSE, cfg.weight_decay, 2,
                                         kSampledBatchCount, 0, norm);
    pass = pass && rep.exhaustive && rep.batches_evaluated == 28;
    batches = rep.batches_evaluated;
    for (const auto& g : rep.gradient_form) {
      min_slack = std::min(min_slack, g.implied_bound - g.actual);
      if (g.actual > g.implied_bound + kBoundTol) pass = false;
    }
  }
  return {pass, fmt("%zu batches per norm (spectral, Frobenius), 3 edges, min slack %.3g", batches, min_slack)};
}

// ----------------------------------------------------------------------- 7

double power_spectral_norm(const Matrix& m) {
  // Largest eigenvalue of m^T m by power iteration.
  std::vector<double> v(m.cols(), 1.0);
  double lam = 0;
  for (int it = 0; it < 500; ++it) {
    auto mv = matvec(m, v);
    auto w = matvec(m.transpose(), mv);
    double n = 0;
    for (double x : w) n += x * x;
    n = std::sqrt(n);
    if (n == 0) return 0;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = w[i] / n;
    lam = n;
  }
  return std::sqrt(lam);
}

Outcome eckart_young() {
  Rng rng(7);
  double worst = -std::numeric_limits<double>::infinity();
  std::size_t candidates = 0;
  for (int t = 0; t < 20; ++t) {
    const Matrix a = Matrix::random_uniform(6, 6, rng);
    const auto s = svd(a, true);
    for (std::size_t r = 0; r < 6; ++r) {
      const double d2 = spectral_distance_to_rank(a, r);
      const double df = frobenius_distance_to_rank(a, r);
      const Matrix best = truncated(a, r);
      for (int c = 0; c < 200; ++c) {
        Matrix cand(6, 6);
        if (r > 0) {
          // Half of the candidates perturb the optimal factors, half are
          // independent rank-r products.
          const double scale = c % 2 ? std::pow(10.0, rng.uniform(-6, 0)) : 1.0;
          Matrix x(6, r), y(6, r);
          for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t j = 0; j < r; ++j) {
              x(i, j) = rng.uniform(-1, 1) * scale;
              y(i, j) = rng.uniform(-1, 1) * scale;
              if (c % 2) {
                x(i, j) += (*s.left_vectors)(i, j) * s.singular_values[j];
                y(i, j) += (*s.right_vectors)(i, j);
              }
            }
          cand = matmul(x, y.transpose());
        }
        const Matrix diff = a - cand;
        worst = std::max(worst, d2 - power_spectral_norm(diff));
        worst = std::max(worst, df - frobenius_norm(diff));
        ++candidates;
      }
      worst = std::max(worst, std::abs(frobenius_norm(a - best) - df) - 1e-12);
    }
  }
  return {worst <= kEckartYoungTol,
          fmt("20 matrices x 6 ranks, %zu candidates, max improvement over truncated SVD %.3g", candidates, worst)};
}

// ----------------------------------------------------------------------- 8

struct NoiseRun {
  double tail_d = 0;
  double weight_ratio = 0;
  double final_loss = 0;
};

NoiseRun noise_run(double lambda) {
  const auto data = gen_synthetic(16, 64, 2, 8, 0.0);
  const auto train = to_samples(data, data.train_indices, 2);
  Network net = network_preset("mlp-3-64", data.input_shape(), 2, 8);
  SgdConfig cfg;
  cfg.lr = 0.05;
  cfg.weight_decay = lambda;
  cfg.batch_size = 8;
  cfg.epochs = 1000;
  cfg.seed = 8;
  TrainingOptions opts;
  opts.compute_accuracy = false;
  const auto res = run_training(net.graph, net.params, train, {}, LossKind::MSE, cfg, nullptr, opts);
  NoiseRun out;
  for (std::size_t e = res.series.size() - 100; e < res.series.size(); ++e) out.tail_d += res.series[e].d_metric;
  out.tail_d /= 100.0;
  double w0 = 0, w1 = 0;
  for (std::size_t e = 0; e < res.params.size(); ++e) {
    w0 += std::pow(frobenius_norm(net.params[e]), 2);
    w1 += std::pow(frobenius_norm(res.params[e]), 2);
  }
  out.weight_ratio = std::sqrt(w1 / w0);
  out.final_loss = res.series.back().train_loss;
  return out;
}

Outcome sgd_noise() {
  auto with = std::async(std::launch::async, noise_run, 1e-3);
  const NoiseRun without = noise_run(0.0);
  const NoiseRun decay = with.get();
  const double ratio = decay.tail_d / without.tail_d;
  const bool noise = ratio >= kNoiseRatio;
  const bool collapse = decay.weight_ratio <= kCollapseRatio;
  const char* outcome = noise ? "persistent SGD noise" : collapse ? "zero-function collapse" : "neither";
  return {noise || collapse,
          fmt("outcome: %s; tail d lambda=1e-3 %.3g vs lambda=0 %.3g (ratio %.3g); ||W||/||W0|| %.3g; final loss "
              "%.3g vs %.3g",
              outcome, decay.tail_d, without.tail_d, ratio, decay.weight_ratio, decay.final_loss,
              without.final_loss)};
}

// ----------------------------------------------------------------------- 9

double final_rank(double lambda, std::size_t batch) {
  const auto data = gen_synthetic(16, 1000, 4, 9);
  const auto train = to_samples(data, data.train_indices, 4);
  Network net = network_preset("mlp-3-64", data.input_shape(), 4, 9);
  SgdConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = lambda;
  cfg.batch_size = batch;
  cfg.epochs = 300;
  cfg.seed = 9;
  TrainingOptions opts;
  opts.compute_accuracy = false;
  opts.rank_epsilon = 1e-3;
  const auto res = run_training(net.graph, net.params, train, {}, LossKind::SoftmaxCE, cfg, nullptr, opts);
  return res.series.back().avg_rank;
}

Outcome rank_vs_batch() {
  const std::vector<std::size_t> bs{4, 16, 64};
  std::vector<std::future<double>> decay, plain;
  for (auto b : bs) {
    decay.push_back(std::async(std::launch::async, final_rank, 5e-4, b));
    plain.push_back(std::async(std::launch::async, final_rank, 0.0, b));
  }
  std::vector<double> rd, rp;
  for (auto& f : decay) rd.push_back(f.get());
  for (auto& f : plain) rp.push_back(f.get());
  const bool monotone = rd[0] <= rd[1] && rd[1] <= rd[2];
  const double drop = (rd[2] - rd[0]) / rd[2];
  const double hi = *std::max_element(rp.begin(), rp.end());
  const double lo = *std::min_element(rp.begin(), rp.end());
  const double spread = (hi - lo) / hi;
  return {monotone && drop >= kRankDrop && spread < kSpreadLimit,
          fmt("lambda=5e-4 avg rank B=4/16/64: %.2f/%.2f/%.2f (drop %.1f%%); lambda=0: %.2f/%.2f/%.2f (spread %.1f%%)",
              rd[0], rd[1], rd[2], 100 * drop, rp[0], rp[1], rp[2], 100 * spread)};
}

// ---------------------------------------------------------------------- 10

Outcome effective_rank_properties() {
  Rng rng(10);
  std::size_t scale_fail = 0, mono_fail = 0;
  const std::vector<double> eps{1e-6, 1e-4, 1e-3, 1e-2, 1e-1, 0.5};
  for (int t = 0; t < 1000; ++t) {
    const std::size_t r = 1 + rng.below(12), c = 1 + rng.below(12);
    Matrix m = Matrix::random_uniform(r, c, rng);
    if (t % 3 == 0) m = truncated(m, rng.below(std::min(r, c) + 1));
    if (t % 5 == 0) {
      // Graded spectrum so that the tolerances actually bite.
      const auto s = svd(m, true);
      std::vector<double> sig(s.singular_values.size());
      for (std::size_t i = 0; i < sig.size(); ++i) sig[i] = std::pow(10.0, -rng.uniform(0, 7));
      std::sort(sig.rbegin(), sig.rend());
      m = matmul(matmul(*s.left_vectors, Matrix::diagonal(sig)), s.right_vectors->transpose());
    }
    std::size_t prev = std::numeric_limits<std::size_t>::max();
    for (double e : eps) {
      const std::size_t base = effective_rank(m, e);
      for (double cs : {1e-3, 1.0, 1e3})
        if (effective_rank(cs * m, e) != base) ++scale_fail;
      if (base > prev) ++mono_fail;
      prev = base;
    }
  }
  return {scale_fail == 0 && mono_fail == 0,
          fmt("1000 matrices x 6 tolerances: scale mismatches %zu, monotonicity violations %zu", scale_fail,
              mono_fail)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "gradient-rank lemma (fully connected)", 30, lemma_fc},
      {2, "gradient-rank lemma (convolutional)", 120, lemma_conv},
      {3, "autodiff vs central differences", 120, autodiff_oracle},
      {4, "unrolling identity", 60, unrolling_identity},
      {5, "unrolled proximity bound", 60, theorem_bound},
      {6, "gradient-form bound (exhaustive)", 30, gradient_form},
      {7, "Eckart-Young oracle equivalence", 30, eckart_young},
      {8, "SGD noise with weight decay", 300, sgd_noise},
      {9, "rank vs batch size", 600, rank_vs_batch},
      {10, "effective rank invariances", 10, effective_rank_properties},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = o.pass && in_time;
    if (!pass) ++failures;
    std::cout << (pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << " (" << fmt("%.1f", secs) << " s of "
              << c.budget_seconds << " s" << (in_time ? "" : ", over budget") << "): " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
