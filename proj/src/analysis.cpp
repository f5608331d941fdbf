#include "lowrank/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <sstream>

namespace lowrank {

using nlohmann::json;

// ------------------------------------------------------------------- ranks

std::size_t effective_rank_from_spectrum(std::span<const double> sigma, double eps) {
  if (!(eps > 0.0)) throw Error(ErrorCode::BadParams, "rank tolerance must be > 0");
  if (sigma.empty() || sigma.front() == 0.0) return 0;
  const double top = sigma.front();
  return static_cast<std::size_t>(
      std::count_if(sigma.begin(), sigma.end(), [&](double s) { return s / top > eps; }));
}

std::size_t effective_rank(const Matrix& m, double eps) {
  if (!(eps > 0.0)) throw Error(ErrorCode::BadParams, "rank tolerance must be > 0");
  return effective_rank_from_spectrum(singular_values(m), eps);
}

RankReport rank_report(const Parameters& params, double eps) {
  RankReport r;
  r.epsilon = eps;
  double total = 0.0;
  for (std::size_t e = 0; e < params.size(); ++e) {
    EdgeRank er;
    er.edge = e;
    er.rows = params[e].rows();
    er.cols = params[e].cols();
    er.normalized_spectrum = singular_values(params[e]);
    er.rank = effective_rank_from_spectrum(er.normalized_spectrum, eps);
    const double top = er.normalized_spectrum.front();
    if (top > 0.0)
      for (double& s : er.normalized_spectrum) s /= top;
    total += static_cast<double>(er.rank);
    r.edges.push_back(std::move(er));
  }
  r.average_rank = params.size() ? total / static_cast<double>(params.size()) : 0.0;
  return r;
}

std::vector<RankReport> rank_time_series(std::span<const Checkpoint> checkpoints, double eps) {
  std::vector<RankReport> out;
  for (const auto& ck : checkpoints) {
    if (!(ck.graph == checkpoints.front().graph)) {
      throw Error(ErrorCode::GraphMismatch, "checkpoints do not share one graph");
    }
    out.push_back(rank_report(ck.params, eps));
  }
  return out;
}

// ------------------------------------------------------- gradient-rank lemma

bool GradientRankReport::ok() const {
  return std::all_of(edges.begin(), edges.end(), [](const auto& e) { return e.violations == 0; });
}

GradientRankReport verify_gradient_rank(const NetworkGraph& g, const Parameters& params,
                                        std::span<const Tensor3> samples, double tolerance) {
  const auto edges = g.trainable_edges();
  GradientRankReport rep;
  for (std::size_t e = 0; e < edges.size(); ++e) {
    EdgeGradientRank er;
    er.edge = e;
    er.patch_count = patch_count(g, edges[e]);
    rep.edges.push_back(er);
  }
  for (const auto& x : samples) {
    const bool zero_input =
        std::all_of(x.data().begin(), x.data().end(), [](double v) { return v == 0.0; });
    if (zero_input) {
      ++rep.samples_skipped;
      continue;
    }
    const auto fw = forward(g, params, x);
    if (fw.trace.min_abs_preactivation <= kDegenerateMargin) {
      ++rep.samples_skipped;
      continue;
    }
    ++rep.samples_checked;
    for (std::size_t comp = 0; comp < g.k_out; ++comp) {
      const GradientSet gs = output_gradient(g, params, fw.trace, comp);
      for (std::size_t e = 0; e < gs.size(); ++e) {
        auto& er = rep.edges[e];
        const auto sigma = singular_values(gs[e]);
        std::size_t rank = 0;
        if (sigma.front() > 0.0) {
          rank = static_cast<std::size_t>(std::count_if(
              sigma.begin(), sigma.end(), [&](double s) { return s > tolerance * sigma.front(); }));
        }
        ++er.checks;
        if (rank > er.patch_count) ++er.violations;
        if (rank > er.worst_rank || er.checks == 1) {
          er.worst_rank = std::max(er.worst_rank, rank);
          er.worst_spectrum = sigma;
        }
      }
    }
  }
  return rep;
}

// ------------------------------------------------------------ proximity bounds

bool BoundReport::ok() const {
  for (const auto& w : windows)
    if (w.slack < -kBoundSlackTolerance) return false;
  for (const auto& gf : gradient_form)
    if (!gf.holds) return false;
  return true;
}

BoundReport theorem_bound_report(const UnrollRecorder& recorder, std::span<const std::size_t> ks,
                                 MatrixNorm norm) {
  BoundReport rep;
  for (std::size_t e = 0; e < recorder.edge_count(); ++e) {
    for (std::size_t k : ks) {
      const UnrollBound ub = unroll_bound(recorder, e, k, norm);
      if (!ub.constant_lr) {
        ++rep.excluded_windows;
        continue;
      }
      const Matrix& wt = recorder.current()[e];
      const auto sigma = singular_values(wt);
      const std::size_t r = std::min(ub.rank_budget, sigma.size());
      BoundEntry be;
      be.edge = e;
      be.k = k;
      be.bound = ub.bound;
      be.rank_budget = ub.rank_budget;
      be.norm = norm;
      be.constant_lr = true;
      const double fro = frobenius_norm(wt);
      be.actual_spectral = sigma.front() > 0.0 ? spectral_tail(sigma, r) / sigma.front() : 0.0;
      be.actual_frobenius = fro > 0.0 ? frobenius_tail(sigma, r) / fro : 0.0;
      const double actual = norm == MatrixNorm::Spectral ? be.actual_spectral : be.actual_frobenius;
      be.slack = be.bound - actual;
      be.vacuous = be.bound >= 1.0;
      rep.windows.push_back(be);
    }
  }
  return rep;
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    const std::uint64_t num = n - k + i;
    // r * num / i is exact at every step; saturate on overflow.
    if (r > std::numeric_limits<std::uint64_t>::max() / num) {
      return std::numeric_limits<std::uint64_t>::max();
    }
    r = r * num / i;
  }
  return r;
}

std::vector<std::vector<std::size_t>> enumerate_subsets(std::size_t n, std::size_t k) {
  std::vector<std::vector<std::size_t>> out;
  if (k > n) return out;
  std::vector<std::size_t> cur(k);
  for (std::size_t i = 0; i < k; ++i) cur[i] = i;
  while (true) {
    out.push_back(cur);
    if (k == 0) break;
    std::size_t i = k;
    while (i > 0 && cur[i - 1] == n - k + i - 1) --i;
    if (i == 0) break;
    ++cur[i - 1];
    for (std::size_t j = i; j < k; ++j) cur[j] = cur[j - 1] + 1;
  }
  return out;
}

BoundReport gradient_form_bound(const NetworkGraph& g, const Parameters& params,
                                std::span<const Sample> data, LossKind loss, double lambda,
                                std::size_t batch_size, std::size_t batch_budget,
                                std::uint64_t seed, MatrixNorm norm) {
  if (lambda == 0.0) throw Error(ErrorCode::LambdaZero, "gradient-form bound needs lambda > 0");
  if (batch_size < 1 || batch_size > data.size()) {
    throw Error(ErrorCode::BadParams, "batch size must lie in [1, m]");
  }
  const std::uint64_t total = binomial(data.size(), batch_size);
  BoundReport rep;
  rep.exhaustive = total <= kExhaustiveBatchLimit;
  std::vector<std::vector<std::size_t>> batches;
  if (rep.exhaustive) {
    batches = enumerate_subsets(data.size(), batch_size);
  } else {
    BatchSampler sampler(data.size(), batch_size, seed, SamplingMode::UniformWithReplacement);
    while (batches.size() < batch_budget) {
      for (auto& b : sampler.next_epoch()) {
        if (batches.size() == batch_budget) break;
        std::sort(b.begin(), b.end());
        batches.push_back(std::move(b));
      }
    }
  }
  rep.batches_evaluated = batches.size();

  const auto edges = g.trainable_edges();
  const std::size_t ne = edges.size();
  std::vector<double> wnorm(ne);
  for (std::size_t e = 0; e < ne; ++e) wnorm[e] = matrix_norm(params[e], norm);
  std::vector<double> mn(ne, std::numeric_limits<double>::infinity()), mx(ne, 0.0), sum(ne, 0.0);

  std::vector<Sample> batch;
  for (const auto& idx : batches) {
    batch.clear();
    for (std::size_t i : idx) batch.push_back(data[i]);
    const GradientSet gs = loss_gradient(g, params, batch, loss, lambda);
    for (std::size_t e = 0; e < ne; ++e) {
      const double ratio = wnorm[e] > 0.0 ? matrix_norm(gs[e], norm) / wnorm[e]
                                          : std::numeric_limits<double>::infinity();
      mn[e] = std::min(mn[e], ratio);
      mx[e] = std::max(mx[e], ratio);
      sum[e] += ratio;
    }
  }

  for (std::size_t e = 0; e < ne; ++e) {
    GradientFormEntry ge;
    ge.edge = e;
    ge.norm = norm;
    ge.rank_budget = patch_count(g, edges[e]) * batch_size;
    ge.min_ratio = mn[e];
    ge.max_ratio = mx[e];
    ge.mean_ratio = sum[e] / static_cast<double>(batches.size());
    ge.implied_bound = mn[e] / (2.0 * lambda);
    if (wnorm[e] > 0.0) {
      const std::size_t r = std::min(ge.rank_budget, std::min(params[e].rows(), params[e].cols()));
      ge.actual = distance_to_rank(params[e], r, norm) / wnorm[e];
    }
    const bool within = ge.actual <= ge.implied_bound + kBoundSlackTolerance;
    // Sampled minima over-estimate the true minimum, so only the exhaustive
    // mode can refute the bound.
    ge.holds = rep.exhaustive ? within : true;
    rep.gradient_form.push_back(ge);
  }
  return rep;
}

// ------------------------------------------------------------------- noise

double d_metric(const Parameters& a, const Parameters& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::GraphMismatch, "parameter sets differ in edges");
  if (a.size() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t e = 0; e < a.size(); ++e) {
    if (!a[e].same_shape(b[e])) throw Error(ErrorCode::GraphMismatch, "edge shapes differ");
    total += frobenius_norm(a[e] - b[e]);
  }
  return total / static_cast<double>(a.size());
}

Collinearity collinearity_check(std::span<const GradientSet> scaled) {
  if (scaled.size() < 2) throw Error(ErrorCode::TooFewSamples, "collinearity needs >= 2 samples");
  Collinearity out;
  const std::size_t ne = scaled.front().size();
  for (std::size_t e = 0; e < ne; ++e) {
    std::vector<double> norms(scaled.size());
    for (std::size_t i = 0; i < scaled.size(); ++i) {
      norms[i] = frobenius_norm(scaled[i][e]);
      if (norms[i] == 0.0) ++out.zero_vectors;
    }
    for (std::size_t i = 0; i < scaled.size(); ++i) {
      for (std::size_t j = i + 1; j < scaled.size(); ++j) {
        double c = 1.0;
        if (norms[i] > 0.0 && norms[j] > 0.0) {
          double dot = 0.0;
          const auto& a = scaled[i][e].data();
          const auto& b = scaled[j][e].data();
          for (std::size_t q = 0; q < a.size(); ++q) dot += a[q] * b[q];
          c = std::min(1.0, std::fabs(dot) / (norms[i] * norms[j]));
        }
        if (c < out.score) {
          out.score = c;
          out.edge = e;
          out.first = i;
          out.second = j;
        }
      }
    }
  }
  out.collinear = out.score >= 1.0 - 1e-9;
  return out;
}

namespace {

constexpr std::size_t kPairDiagnosticCap = 64;

double smallest_singular(const Matrix& m) {
  const auto s = singular_values(m);
  return s.back();
}

Matrix normalized_stack(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() + b.rows(), a.cols());
  const double na = frobenius_norm(a);
  const double nb = frobenius_norm(b);
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(r, c) = na > 0 ? a(r, c) / na : 0.0;
  for (std::size_t r = 0; r < b.rows(); ++r)
    for (std::size_t c = 0; c < b.cols(); ++c) out(a.rows() + r, c) = nb > 0 ? b(r, c) / nb : 0.0;
  return out;
}

}  // namespace

NoiseReport degeneracy_check(const NetworkGraph& g, const Parameters& params,
                             std::span<const Sample> data, LossKind loss, double lambda) {
  if (g.k_out != 1) throw Error(ErrorCode::MultiOutputUnsupported, "degeneracy check needs k_out = 1");
  NoiseReport rep;
  const auto scaled = per_sample_scaled_gradients(g, params, data, loss);
  rep.min_residual = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto out = forward(g, params, data[s].x).output;
    rep.max_abs_output = std::max(rep.max_abs_output, std::fabs(out[0]));
    rep.loss_derivatives.push_back(evaluate_loss(loss, out, data[s].y).derivative[0]);
    std::vector<double> res;
    double sq = 0.0;
    for (std::size_t e = 0; e < params.size(); ++e) {
      Matrix r = scaled[s][e];
      r.axpy(2.0 * lambda, params[e]);
      const double v = frobenius_norm(r);
      res.push_back(v);
      sq += v * v;
    }
    rep.min_residual = std::min(rep.min_residual, std::sqrt(sq));
    rep.residuals.push_back(std::move(res));
  }
  if (data.empty()) rep.min_residual = 0.0;
  rep.zero_function = rep.max_abs_output <= kZeroFunctionTolerance;

  const std::size_t cap = std::min(data.size(), kPairDiagnosticCap);
  rep.input_collinearity.sigma_min = std::numeric_limits<double>::infinity();
  rep.patch_dependence.sigma_min = std::numeric_limits<double>::infinity();
  std::optional<ConvGeometry> first_geo;
  for (std::size_t idx : g.trainable_edges()) {
    if (g.connections[idx].src == 0) {
      first_geo = conv_geometry(g.connections[idx]);
      break;
    }
  }
  for (std::size_t i = 0; i < cap; ++i) {
    for (std::size_t j = i + 1; j < cap; ++j) {
      const Matrix xi(1, data[i].x.size(), data[i].x.data());
      const Matrix xj(1, data[j].x.size(), data[j].x.data());
      const double s = smallest_singular(normalized_stack(xi, xj));
      if (s < rep.input_collinearity.sigma_min) rep.input_collinearity = {s, i, j};
      if (first_geo) {
        const Matrix pi = vec_patches(data[i].x, first_geo->k1, first_geo->k2, first_geo->s, first_geo->p);
        const Matrix pj = vec_patches(data[j].x, first_geo->k1, first_geo->k2, first_geo->s, first_geo->p);
        const double sp = smallest_singular(normalized_stack(pi, pj));
        if (sp < rep.patch_dependence.sigma_min) rep.patch_dependence = {sp, i, j};
      }
    }
  }
  if (cap < 2) {
    rep.input_collinearity.sigma_min = 0.0;
    rep.patch_dependence.sigma_min = 0.0;
  }
  if (scaled.size() >= 2) rep.scaled_gradients = collinearity_check(scaled);
  return rep;
}

// ----------------------------------------------------------- serialization

namespace {

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

std::string to_json(const RankReport& r) {
  json j;
  j["epsilon"] = r.epsilon;
  j["average_rank"] = r.average_rank;
  j["edges"] = json::array();
  for (const auto& e : r.edges) {
    j["edges"].push_back({{"edge", e.edge},
                          {"rows", e.rows},
                          {"cols", e.cols},
                          {"rank", e.rank},
                          {"normalized_spectrum", e.normalized_spectrum}});
  }
  return j.dump(2);
}

std::string to_json(const BoundReport& r) {
  json j;
  j["windows"] = json::array();
  for (const auto& w : r.windows) {
    j["windows"].push_back({{"edge", w.edge},
                            {"k", w.k},
                            {"bound", finite_or_null(w.bound)},
                            {"actual_spectral", w.actual_spectral},
                            {"actual_frobenius", w.actual_frobenius},
                            {"rank_budget", w.rank_budget},
                            {"slack", finite_or_null(w.slack)},
                            {"vacuous", w.vacuous},
                            {"norm", std::string(to_string(w.norm))}});
  }
  j["gradient_form"] = json::array();
  for (const auto& g : r.gradient_form) {
    j["gradient_form"].push_back({{"edge", g.edge},
                                  {"rank_budget", g.rank_budget},
                                  {"min_ratio", finite_or_null(g.min_ratio)},
                                  {"mean_ratio", finite_or_null(g.mean_ratio)},
                                  {"max_ratio", finite_or_null(g.max_ratio)},
                                  {"implied_bound", finite_or_null(g.implied_bound)},
                                  {"actual", g.actual},
                                  {"holds", g.holds},
                                  {"norm", std::string(to_string(g.norm))}});
  }
  j["batches_evaluated"] = r.batches_evaluated;
  j["exhaustive"] = r.exhaustive;
  j["excluded_windows"] = r.excluded_windows;
  return j.dump(2);
}

std::string to_json(const NoiseReport& r) {
  json j;
  j["residuals"] = r.residuals;
  j["min_residual"] = finite_or_null(r.min_residual);
  j["max_abs_output"] = r.max_abs_output;
  j["zero_function"] = r.zero_function;
  j["loss_derivatives"] = r.loss_derivatives;
  j["input_collinearity"] = {{"sigma_min", finite_or_null(r.input_collinearity.sigma_min)},
                             {"pair", {r.input_collinearity.first, r.input_collinearity.second}}};
  j["patch_dependence"] = {{"sigma_min", finite_or_null(r.patch_dependence.sigma_min)},
                           {"pair", {r.patch_dependence.first, r.patch_dependence.second}}};
  j["scaled_gradients"] = {{"score", r.scaled_gradients.score},
                           {"edge", r.scaled_gradients.edge},
                           {"pair", {r.scaled_gradients.first, r.scaled_gradients.second}},
                           {"zero_vectors", r.scaled_gradients.zero_vectors},
                           {"collinear", r.scaled_gradients.collinear}};
  j["d_metric_series"] = r.d_metric_series;
  return j.dump(2);
}

std::string to_json(const GradientRankReport& r) {
  json j;
  j["samples_checked"] = r.samples_checked;
  j["samples_skipped"] = r.samples_skipped;
  j["ok"] = r.ok();
  j["edges"] = json::array();
  for (const auto& e : r.edges) {
    j["edges"].push_back({{"edge", e.edge},
                          {"patch_count", e.patch_count},
                          {"worst_rank", e.worst_rank},
                          {"checks", e.checks},
                          {"violations", e.violations}});
  }
  return j.dump(2);
}

std::string bound_csv(const BoundReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "edge,k,bound,actual_spectral,actual_frobenius,rank_budget,slack\n";
  for (const auto& w : r.windows) {
    os << w.edge << ',' << w.k << ',' << w.bound << ',' << w.actual_spectral << ','
       << w.actual_frobenius << ',' << w.rank_budget << ',' << w.slack << '\n';
  }
  return os.str();
}

}  // namespace lowrank
