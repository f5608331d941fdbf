#include "lowrank/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace lowrank {

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::MSE: return "mse";
    case LossKind::SoftmaxCE: return "softmax_ce";
    case LossKind::Logistic: return "logistic";
  }
  return "unknown";
}

LossKind loss_from_string(const std::string& name) {
  if (name == "mse") return LossKind::MSE;
  if (name == "ce" || name == "softmax_ce" || name == "cross_entropy") return LossKind::SoftmaxCE;
  if (name == "logistic") return LossKind::Logistic;
  throw Error(ErrorCode::BadConfig, "unknown loss '" + name + "'");
}

LossValue evaluate_loss(LossKind kind, std::span<const double> f, std::span<const double> y) {
  if (f.size() != y.size()) throw Error(ErrorCode::ShapeMismatch, "loss target size differs");
  LossValue out;
  out.derivative.assign(f.size(), 0.0);
  const double k = static_cast<double>(f.size());
  switch (kind) {
    case LossKind::MSE:
      for (std::size_t i = 0; i < f.size(); ++i) {
        const double d = f[i] - y[i];
        out.value += d * d / k;
        out.derivative[i] = 2.0 * d / k;
      }
      break;
    case LossKind::SoftmaxCE: {
      const double mx = *std::max_element(f.begin(), f.end());
      double z = 0.0;
      for (double v : f) z += std::exp(v - mx);
      const double lse = mx + std::log(z);
      double ysum = 0.0;
      for (std::size_t i = 0; i < f.size(); ++i) {
        ysum += y[i];
        out.value += y[i] * (lse - f[i]);
      }
      for (std::size_t i = 0; i < f.size(); ++i) {
        out.derivative[i] = std::exp(f[i] - lse) * ysum - y[i];
      }
      out.value = std::max(out.value, 0.0);
      break;
    }
    case LossKind::Logistic: {
      if (f.size() != 1) throw Error(ErrorCode::MultiOutputUnsupported, "logistic loss is scalar");
      const double s = y[0] > 0.5 ? 1.0 : -1.0;
      const double m = -s * f[0];
      // softplus(m) and its derivative sigmoid(m), both stable.
      out.value = m > 0 ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m));
      const double sig = m > 0 ? 1.0 / (1.0 + std::exp(-m)) : std::exp(m) / (1.0 + std::exp(m));
      out.derivative[0] = -s * sig;
      break;
    }
  }
  return out;
}

GradientSet GradientSet::zeros_like(const Parameters& params) {
  GradientSet g;
  g.grads.reserve(params.size());
  for (const auto& w : params.weights) g.grads.emplace_back(w.rows(), w.cols());
  return g;
}

namespace {

void check_trace(const NetworkGraph& g, const ActivationTrace& trace) {
  if (trace.pre.size() != g.layers.size() || trace.post.size() != g.layers.size() ||
      trace.mask.size() != g.layers.size() || trace.argmax.size() != g.connections.size()) {
    throw Error(ErrorCode::TraceMismatch, "trace was not produced by this graph");
  }
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    if (!(trace.post[i].shape() == g.layers[i]) || !(trace.mask[i].shape() == g.layers[i])) {
      throw Error(ErrorCode::TraceMismatch, "trace layer shape differs from graph");
    }
  }
}

struct BackwardState {
  GradientSet grads;
  std::vector<Tensor3> delta_pre;  // d(scalar)/d u_i
};

BackwardState backward_full(const NetworkGraph& g, const Parameters& params,
                            const ActivationTrace& trace, std::span<const double> seed) {
  check_trace(g, trace);
  check_parameters(g, params);
  const std::size_t n = g.layers.size();
  const std::size_t last = n - 1;
  if (seed.size() != g.layers[last].size()) {
    throw Error(ErrorCode::ShapeMismatch, "output seed length differs from output size");
  }
  const auto edges = g.trainable_edges();
  std::vector<std::ptrdiff_t> slot(g.connections.size(), -1);
  for (std::size_t e = 0; e < edges.size(); ++e) slot[edges[e]] = static_cast<std::ptrdiff_t>(e);
  std::vector<std::vector<std::size_t>> incoming(n);
  for (std::size_t k = 0; k < g.connections.size(); ++k) incoming[g.connections[k].dst].push_back(k);

  BackwardState st;
  st.grads = GradientSet::zeros_like(params);
  st.delta_pre.resize(n);
  std::vector<Tensor3> dpost(n);
  for (std::size_t i = 0; i < n; ++i) dpost[i] = Tensor3(g.layers[i]);
  std::copy(seed.begin(), seed.end(), dpost[last].data().begin());

  const auto order = g.topological_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const std::size_t i = *it;
    if (i == 0) continue;
    Tensor3 du = dpost[i];
    const Tensor3& mask = trace.mask[i];
    for (std::size_t q = 0; q < du.size(); ++q) du[q] *= mask[q];

    for (std::size_t k : incoming[i]) {
      const auto& spec = g.connections[k];
      const std::size_t j = spec.src;
      Tensor3& dv = dpost[j];
      const Tensor3& vin = trace.post[j];
      const bool need_input = j != 0;
      if (slot[k] >= 0) {
        const std::size_t e = static_cast<std::size_t>(slot[k]);
        const ConvGeometry geo = *conv_geometry(spec);
        const Matrix& w = params[e];
        Matrix& gw = st.grads[e];
        const bool dense = geo.k1 == 1 && geo.k2 == 1 && geo.p == 0 && vin.height() == 1 &&
                           vin.width() == 1;
        if (dense) {
          for (std::size_t r = 0; r < w.rows(); ++r) {
            const double d = du[r];
            if (d == 0.0) continue;
            auto grow = gw.row(r);
            for (std::size_t c = 0; c < w.cols(); ++c) grow[c] += d * vin[c];
          }
          if (need_input) {
            for (std::size_t r = 0; r < w.rows(); ++r) {
              const double d = du[r];
              if (d == 0.0) continue;
              auto wrow = w.row(r);
              for (std::size_t c = 0; c < w.cols(); ++c) dv[c] += d * wrow[c];
            }
          }
        } else {
          const Matrix patches = vec_patches(vin, geo.k1, geo.k2, geo.s, geo.p);
          const std::size_t npatch = patches.rows();
          // G(c, col) = sum_t du(c, t) P(t, col)
          for (std::size_t c = 0; c < geo.c_out; ++c) {
            auto grow = gw.row(c);
            for (std::size_t t = 0; t < npatch; ++t) {
              const double d = du[c * npatch + t];
              if (d == 0.0) continue;
              auto prow = patches.row(t);
              for (std::size_t col = 0; col < grow.size(); ++col) grow[col] += d * prow[col];
            }
          }
          if (need_input) {
            const std::size_t wo = trace.post[i].width();
            const long H = static_cast<long>(vin.height());
            const long W = static_cast<long>(vin.width());
            const long P = static_cast<long>(geo.p);
            for (std::size_t t = 0; t < npatch; ++t) {
              const std::size_t tr = t / wo;
              const std::size_t tl = t % wo;
              for (std::size_t c = 0; c < geo.c_out; ++c) {
                const double d = du[c * npatch + t];
                if (d == 0.0) continue;
                auto wrow = w.row(c);
                std::size_t col = 0;
                for (std::size_t c2 = 0; c2 < geo.c_in; ++c2)
                  for (std::size_t a = 0; a < geo.k1; ++a) {
                    const long r = static_cast<long>(tr * geo.s + a) - P;
                    for (std::size_t b = 0; b < geo.k2; ++b, ++col) {
                      const long q = static_cast<long>(tl * geo.s + b) - P;
                      if (r < 0 || r >= H || q < 0 || q >= W) continue;
                      dv(c2, static_cast<std::size_t>(r), static_cast<std::size_t>(q)) +=
                          d * wrow[col];
                    }
                  }
              }
            }
          }
        }
        continue;
      }
      if (!need_input) continue;
      if (const auto* mp = std::get_if<MaxPoolKind>(&spec.kind)) {
        const auto& am = trace.argmax[k];
        const std::size_t hp = vin.height() + 2 * mp->p;
        const std::size_t wp = vin.width() + 2 * mp->p;
        for (std::size_t q = 0; q < du.size(); ++q) {
          const std::size_t idx = am[q];
          const std::size_t c = idx / (hp * wp);
          const std::size_t r = (idx / wp) % hp;
          const std::size_t s = idx % wp;
          if (r < mp->p || s < mp->p || r >= mp->p + vin.height() || s >= mp->p + vin.width()) {
            continue;  // padding won the max
          }
          dv(c, r - mp->p, s - mp->p) += du[q];
        }
      } else if (const auto* ap = std::get_if<AvgPoolKind>(&spec.kind)) {
        const double inv = 1.0 / static_cast<double>(ap->k1 * ap->k2);
        const long H = static_cast<long>(vin.height());
        const long W = static_cast<long>(vin.width());
        const long P = static_cast<long>(ap->p);
        const Shape3 os = trace.post[i].shape();
        for (std::size_t c = 0; c < os.c; ++c)
          for (std::size_t t = 0; t < os.h; ++t)
            for (std::size_t l = 0; l < os.w; ++l) {
              const double d = du(c, t, l) * inv;
              for (std::size_t a = 0; a < ap->k1; ++a) {
                const long r = static_cast<long>(t * ap->s + a) - P;
                if (r < 0 || r >= H) continue;
                for (std::size_t b = 0; b < ap->k2; ++b) {
                  const long q = static_cast<long>(l * ap->s + b) - P;
                  if (q < 0 || q >= W) continue;
                  dv(c, static_cast<std::size_t>(r), static_cast<std::size_t>(q)) += d;
                }
              }
            }
      } else if (const auto* ra = std::get_if<RearrangeKind>(&spec.kind)) {
        if (ra->permutation.empty()) {
          for (std::size_t q = 0; q < du.size(); ++q) dv[q] += du[q];
        } else {
          for (std::size_t q = 0; q < du.size(); ++q) dv[ra->permutation[q]] += du[q];
        }
      } else {  // identity
        for (std::size_t q = 0; q < du.size(); ++q) dv[q] += du[q];
      }
    }
    st.delta_pre[i] = std::move(du);
  }
  return st;
}

}  // namespace

GradientSet backward(const NetworkGraph& g, const Parameters& params, const ActivationTrace& trace,
                     std::span<const double> output_seed) {
  return backward_full(g, params, trace, output_seed).grads;
}

GradientSet output_gradient(const NetworkGraph& g, const Parameters& params,
                            const ActivationTrace& trace, std::size_t component) {
  if (component >= g.k_out) throw Error(ErrorCode::TraceMismatch, "output component out of range");
  std::vector<double> seed(g.k_out, 0.0);
  seed[component] = 1.0;
  GradientSet gs = backward(g, params, trace, seed);
  gs.tag = OutputGradTag{0, component};
  return gs;
}

BatchLoss loss_gradient_with_value(const NetworkGraph& g, const Parameters& params,
                                   std::span<const Sample> batch, LossKind loss, double lambda) {
  if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "loss gradient over an empty batch");
  BatchLoss out;
  out.gradient = GradientSet::zeros_like(params);
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto fw = forward(g, params, batch[s].x);
    const LossValue lv = evaluate_loss(loss, fw.output, batch[s].y);
    if (!std::isfinite(lv.value)) {
      throw Error(ErrorCode::NonFiniteLoss, "non-finite loss on batch sample " + std::to_string(s));
    }
    out.mean_loss += lv.value * inv_b;
    const GradientSet gs = backward(g, params, fw.trace, lv.derivative);
    for (std::size_t e = 0; e < gs.size(); ++e) out.gradient[e].axpy(inv_b, gs[e]);
  }
  if (lambda != 0.0) {
    for (std::size_t e = 0; e < params.size(); ++e) out.gradient[e].axpy(2.0 * lambda, params[e]);
  }
  out.gradient.tag = LossGradTag{0, lambda};
  return out;
}

GradientSet loss_gradient(const NetworkGraph& g, const Parameters& params,
                          std::span<const Sample> batch, LossKind loss, double lambda) {
  return loss_gradient_with_value(g, params, batch, loss, lambda).gradient;
}

std::vector<GradientSet> per_sample_scaled_gradients(const NetworkGraph& g,
                                                     const Parameters& params,
                                                     std::span<const Sample> data, LossKind loss) {
  if (g.k_out != 1) {
    throw Error(ErrorCode::MultiOutputUnsupported, "scaled gradients need a scalar output");
  }
  std::vector<GradientSet> out;
  out.reserve(data.size());
  for (std::size_t s = 0; s < data.size(); ++s) {
    const auto fw = forward(g, params, data[s].x);
    const LossValue lv = evaluate_loss(loss, fw.output, data[s].y);
    GradientSet gs = backward(g, params, fw.trace, lv.derivative);
    gs.tag = OutputGradTag{s, 0};
    out.push_back(std::move(gs));
  }
  return out;
}

OuterProduct outer_product_reconstruction(const NetworkGraph& g, const Parameters& params,
                                          const ActivationTrace& trace, std::size_t edge) {
  const auto edges = g.trainable_edges();
  if (edge >= edges.size()) throw Error(ErrorCode::BadParams, "edge index out of range");
  const auto& spec = g.connections[edges[edge]];
  if (!std::holds_alternative<FullyConnectedKind>(spec.kind)) {
    throw Error(ErrorCode::NotFullyConnected, "outer product form needs a fully-connected edge");
  }
  if (g.k_out != 1) throw Error(ErrorCode::MultiOutputUnsupported, "scalar output required");
  const std::vector<double> seed{1.0};
  BackwardState st = backward_full(g, params, trace, seed);
  OuterProduct op;
  op.a = st.delta_pre[spec.dst].data();
  op.b = trace.post[spec.src].data();
  op.maxdiff = max_abs_diff(st.grads[edge], outer(op.a, op.b));
  return op;
}

FiniteDiffReport finite_diff_check(const NetworkGraph& g, const Parameters& params,
                                   const Probe& probe, double step) {
  check_parameters(g, params);
  if (!(step > 0.0)) throw Error(ErrorCode::BadParams, "finite-difference step must be positive");
  const std::vector<Matrix> analytic = probe.gradient(params);
  FiniteDiffReport rep;
  Parameters work = params;
  for (std::size_t e = 0; e < work.size(); ++e) {
    for (std::size_t r = 0; r < work[e].rows(); ++r) {
      for (std::size_t c = 0; c < work[e].cols(); ++c) {
        const double orig = work[e](r, c);
        work[e](r, c) = orig + step;
        const double fp = probe.value(work);
        work[e](r, c) = orig - step;
        const double fm = probe.value(work);
        work[e](r, c) = orig;
        const double num = (fp - fm) / (2.0 * step);
        const double ana = analytic[e](r, c);
        const double scale = std::max(std::fabs(ana), std::fabs(num));
        const double err =
            scale < kFiniteDiffAbsFloor ? std::fabs(ana - num) : std::fabs(ana - num) / scale;
        ++rep.coordinates;
        if (err > rep.max_rel_error || rep.coordinates == 1) {
          rep.max_rel_error = err;
          rep.edge = e;
          rep.row = r;
          rep.col = c;
          rep.analytic = ana;
          rep.numeric = num;
        }
      }
    }
  }
  return rep;
}

double regularized_loss(const NetworkGraph& g, const Parameters& params,
                        std::span<const Sample> batch, LossKind loss, double lambda) {
  if (batch.empty()) throw Error(ErrorCode::EmptyBatch, "loss over an empty batch");
  double total = 0.0;
  for (const auto& s : batch) {
    const auto fw = forward(g, params, s.x);
    total += evaluate_loss(loss, fw.output, s.y).value;
  }
  total /= static_cast<double>(batch.size());
  double sq = 0.0;
  for (const auto& w : params.weights)
    for (double v : w.data()) sq += v * v;
  return total + lambda * sq;
}

Probe batch_loss_probe(const NetworkGraph& g, std::span<const Sample> batch, LossKind loss,
                       double lambda) {
  Probe p;
  p.value = [&g, batch, loss, lambda](const Parameters& w) {
    return regularized_loss(g, w, batch, loss, lambda);
  };
  p.gradient = [&g, batch, loss, lambda](const Parameters& w) {
    return loss_gradient(g, w, batch, loss, lambda).grads;
  };
  return p;
}

}  // namespace lowrank
