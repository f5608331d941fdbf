#include "lowrank/netgraph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <set>
#include <tuple>
#include <sstream>

#include "lowrank/rng.hpp"

namespace lowrank {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string shape_str(const Shape3& s) {
  std::ostringstream os;
  os << s.c << "x" << s.h << "x" << s.w;
  return os.str();
}

}  // namespace

// ------------------------------------------------------------- connections

std::optional<ConvGeometry> conv_geometry(const ConnectionSpec& spec) {
  if (const auto* c = std::get_if<ConvKind>(&spec.kind)) {
    return ConvGeometry{c->k1, c->k2, c->s, c->p, c->c_in, c->c_out};
  }
  if (const auto* f = std::get_if<FullyConnectedKind>(&spec.kind)) {
    return ConvGeometry{1, 1, 1, 0, f->d_in, f->d_out};
  }
  return std::nullopt;
}

bool is_trainable_kind(const ConnectionKind& kind) {
  return std::holds_alternative<ConvKind>(kind) || std::holds_alternative<FullyConnectedKind>(kind);
}

std::string kind_name(const ConnectionKind& kind) {
  return std::visit(overloaded{[](const ConvKind&) { return std::string("conv"); },
                               [](const FullyConnectedKind&) { return std::string("fc"); },
                               [](const AvgPoolKind&) { return std::string("avgpool"); },
                               [](const MaxPoolKind&) { return std::string("maxpool"); },
                               [](const RearrangeKind&) { return std::string("rearrange"); },
                               [](const IdentityKind&) { return std::string("identity"); }},
                    kind);
}

std::optional<Shape3> connection_output_shape(const ConnectionSpec& spec, const Shape3& in) {
  if (auto geo = conv_geometry(spec)) {
    if (std::holds_alternative<FullyConnectedKind>(spec.kind) && (in.h != 1 || in.w != 1)) {
      return std::nullopt;
    }
    if (in.c != geo->c_in || geo->c_out == 0) return std::nullopt;
    auto h = window_output_dim(in.h, geo->k1, geo->s, geo->p);
    auto w = window_output_dim(in.w, geo->k2, geo->s, geo->p);
    if (!h || !w) return std::nullopt;
    return Shape3{geo->c_out, *h, *w};
  }
  if (const auto* pw = std::get_if<AvgPoolKind>(&spec.kind)) {
    auto h = window_output_dim(in.h, pw->k1, pw->s, pw->p);
    auto w = window_output_dim(in.w, pw->k2, pw->s, pw->p);
    if (!h || !w) return std::nullopt;
    return Shape3{in.c, *h, *w};
  }
  if (const auto* pw = std::get_if<MaxPoolKind>(&spec.kind)) {
    auto h = window_output_dim(in.h, pw->k1, pw->s, pw->p);
    auto w = window_output_dim(in.w, pw->k2, pw->s, pw->p);
    if (!h || !w) return std::nullopt;
    return Shape3{in.c, *h, *w};
  }
  // Rearrange and identity keep the element count; the destination decides
  // the shape.
  return in;
}

// ------------------------------------------------------------------- graph

std::vector<std::size_t> NetworkGraph::trainable_edges() const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < connections.size(); ++i)
    if (is_trainable_kind(connections[i].kind)) idx.push_back(i);
  std::stable_sort(idx.begin(), idx.end(), [this](std::size_t a, std::size_t b) {
    const auto& ca = connections[a];
    const auto& cb = connections[b];
    return std::tie(ca.src, ca.dst) < std::tie(cb.src, cb.dst);
  });
  return idx;
}

std::vector<std::size_t> NetworkGraph::topological_order() const {
  const std::size_t n = layers.size();
  std::vector<std::size_t> indeg(n, 0);
  std::vector<std::vector<std::size_t>> out(n);
  for (const auto& c : connections) {
    if (c.src >= n || c.dst >= n) throw Error(ErrorCode::InvalidGraph, "edge endpoint out of range");
    out[c.src].push_back(c.dst);
    ++indeg[c.dst];
  }
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < n; ++i)
    if (indeg[i] == 0) ready.push(i);
  std::vector<std::size_t> order;
  order.reserve(n);
  while (!ready.empty()) {
    const std::size_t v = ready.top();
    ready.pop();
    order.push_back(v);
    for (std::size_t d : out[v])
      if (--indeg[d] == 0) ready.push(d);
  }
  if (order.size() != n) throw Error(ErrorCode::InvalidGraph, "graph has a cycle");
  return order;
}

std::vector<GraphIssue> validate_graph(const NetworkGraph& g) {
  std::vector<GraphIssue> issues;
  auto add = [&](std::string code, std::string msg) {
    issues.push_back({std::move(code), std::move(msg)});
  };
  const std::size_t n = g.layers.size();
  if (n < 2) {
    add("too-few-layers", "a network needs an input and an output layer");
    return issues;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (g.layers[i].size() == 0) add("empty-layer", "layer " + std::to_string(i) + " has zero size");
  }
  const std::size_t last = n - 1;
  // A one-layer skip runs parallel to its FC edge, so a pair may carry one
  // trainable and one fixed connection.
  std::set<std::tuple<std::size_t, std::size_t, bool>> seen;
  std::vector<std::size_t> incoming(n, 0);
  bool endpoints_ok = true;
  for (std::size_t k = 0; k < g.connections.size(); ++k) {
    const auto& c = g.connections[k];
    const std::string tag = "connection " + std::to_string(k) + " (" + std::to_string(c.src) +
                            "->" + std::to_string(c.dst) + ", " + kind_name(c.kind) + ")";
    if (c.src >= n || c.dst >= n) {
      add("bad-endpoint", tag + ": layer index out of range");
      endpoints_ok = false;
      continue;
    }
    ++incoming[c.dst];
    if (c.src == c.dst) add("self-loop", tag + ": self loop");
    if (c.src == last) add("edge-from-output", tag + ": edge from output layer");
    if (c.dst == 0) add("edge-into-input", tag + ": edge into input layer");
    if (!seen.insert({c.src, c.dst, is_trainable_kind(c.kind)}).second) add("duplicate-edge", tag + ": duplicate edge");
    if (c.trainable != is_trainable_kind(c.kind)) {
      add("trainable-flag", tag + ": trainable flag must be set exactly for conv/fc");
    }
    const Shape3& in = g.layers[c.src];
    const Shape3& out = g.layers[c.dst];
    if (const auto* r = std::get_if<RearrangeKind>(&c.kind)) {
      if (in.size() != out.size()) {
        add("shape-mismatch", tag + ": rearrange changes element count " + shape_str(in) +
                                  " -> " + shape_str(out));
      } else if (!r->permutation.empty()) {
        try {
          check_permutation(r->permutation, in.size());
        } catch (const Error& e) {
          add("bad-permutation", tag + ": " + e.what());
        }
      }
      continue;
    }
    if (std::holds_alternative<IdentityKind>(c.kind)) {
      if (!(in == out)) {
        add("shape-mismatch",
            tag + ": skip shape " + shape_str(in) + " differs from " + shape_str(out));
      }
      continue;
    }
    auto produced = connection_output_shape(c, in);
    if (!produced) {
      add("bad-geometry", tag + ": geometry invalid for input " + shape_str(in));
    } else if (!(*produced == out)) {
      add("shape-mismatch", tag + ": produces " + shape_str(*produced) + " but layer " +
                                std::to_string(c.dst) + " is " + shape_str(out));
    }
  }
  for (std::size_t i = 1; i < n; ++i) {
    if (incoming[i] == 0) add("no-input", "layer " + std::to_string(i) + " has no incoming edge");
  }
  if (g.k_out != g.layers[last].size()) {
    add("k-out", "k_out " + std::to_string(g.k_out) + " differs from output layer size " +
                     std::to_string(g.layers[last].size()));
  }
  if (endpoints_ok) {
    try {
      (void)g.topological_order();
    } catch (const Error&) {
      add("cycle", "graph has a cycle");
    }
  }
  return issues;
}

void require_valid(const NetworkGraph& g) {
  const auto issues = validate_graph(g);
  if (issues.empty()) return;
  std::string msg;
  for (const auto& i : issues) msg += "\n  " + i.message;
  throw Error(ErrorCode::InvalidGraph, "invalid network graph:" + msg);
}

std::size_t patch_count(const ConnectionSpec& spec, const Shape3& in) {
  if (!is_trainable_kind(spec.kind)) {
    throw Error(ErrorCode::NotApplicable, "patch count is defined for conv/fc edges only");
  }
  auto out = connection_output_shape(spec, in);
  if (!out) throw Error(ErrorCode::BadGeometry, "invalid connection geometry");
  return out->h * out->w;
}

std::size_t patch_count(const NetworkGraph& g, std::size_t connection) {
  const auto& spec = g.connections.at(connection);
  return patch_count(spec, g.layers.at(spec.src));
}

// -------------------------------------------------------------- parameters

Parameters Parameters::zeros(const NetworkGraph& g) {
  Parameters p;
  for (std::size_t idx : g.trainable_edges()) {
    const auto geo = *conv_geometry(g.connections[idx]);
    p.weights.emplace_back(geo.c_out, geo.c_in * geo.k1 * geo.k2);
  }
  return p;
}

Parameters Parameters::init_uniform(const NetworkGraph& g, Rng& rng) {
  Parameters p = zeros(g);
  for (Matrix& w : p.weights) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    for (double& v : w.data()) v = rng.uniform(-bound, bound);
  }
  return p;
}

void check_parameters(const NetworkGraph& g, const Parameters& params) {
  const auto edges = g.trainable_edges();
  if (edges.size() != params.size()) {
    throw Error(ErrorCode::ShapeMismatch, "parameter count differs from trainable edge count");
  }
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto geo = *conv_geometry(g.connections[edges[e]]);
    if (params[e].rows() != geo.c_out || params[e].cols() != geo.c_in * geo.k1 * geo.k2) {
      throw Error(ErrorCode::ShapeMismatch, "weight matrix " + std::to_string(e) + " has shape " +
                                                std::to_string(params[e].rows()) + "x" +
                                                std::to_string(params[e].cols()));
    }
  }
}

// ----------------------------------------------------------- layer kernels

namespace {

struct OutDims {
  std::size_t h, w;
};

OutDims conv_out_dims(const ConvGeometry& geo, const Shape3& in) {
  auto h = window_output_dim(in.h, geo.k1, geo.s, geo.p);
  auto w = window_output_dim(in.w, geo.k2, geo.s, geo.p);
  if (!h || !w || in.c != geo.c_in) {
    throw Error(ErrorCode::BadGeometry, "convolution geometry does not fit input " + shape_str(in));
  }
  return {*h, *w};
}

void check_weight(const ConvGeometry& geo, const Matrix& w) {
  if (w.rows() != geo.c_out || w.cols() != geo.c_in * geo.k1 * geo.k2) {
    throw Error(ErrorCode::ShapeMismatch, "weight matrix shape does not match kernel geometry");
  }
}

}  // namespace

Tensor3 conv_apply(const ConvGeometry& geo, const Matrix& w, const Tensor3& x) {
  check_weight(geo, w);
  const auto [ho, wo] = conv_out_dims(geo, x.shape());
  Tensor3 y(geo.c_out, ho, wo);
  if (geo.k1 == 1 && geo.k2 == 1 && geo.p == 0 && x.height() == 1 && x.width() == 1) {
    const auto v = matvec(w, x.data());
    std::copy(v.begin(), v.end(), y.data().begin());
    return y;
  }
  const Tensor3 xp = pad(x, geo.p);
  for (std::size_t c = 0; c < geo.c_out; ++c) {
    for (std::size_t t = 0; t < ho; ++t) {
      for (std::size_t l = 0; l < wo; ++l) {
        double acc = 0.0;
        for (std::size_t c2 = 0; c2 < geo.c_in; ++c2)
          for (std::size_t a = 0; a < geo.k1; ++a)
            for (std::size_t b = 0; b < geo.k2; ++b)
              acc += kernel_entry(w, geo, c, c2, a, b) * xp(c2, t * geo.s + a, l * geo.s + b);
        y(c, t, l) = acc;
      }
    }
  }
  return y;
}

Tensor3 conv_apply_im2col(const ConvGeometry& geo, const Matrix& w, const Tensor3& x) {
  check_weight(geo, w);
  const auto [ho, wo] = conv_out_dims(geo, x.shape());
  const Matrix patches = vec_patches(x, geo.k1, geo.k2, geo.s, geo.p);
  const Matrix y = matmul_transposed(patches, w);  // N x c_out
  Tensor3 out(geo.c_out, ho, wo);
  for (std::size_t t = 0; t < ho * wo; ++t)
    for (std::size_t c = 0; c < geo.c_out; ++c) out[c * ho * wo + t] = y(t, c);
  return out;
}

Matrix conv_dense_operator(const ConvGeometry& geo, const Matrix& w, const Shape3& in) {
  check_weight(geo, w);
  const auto [ho, wo] = conv_out_dims(geo, in);
  Matrix v(geo.c_out * ho * wo, in.size());
  const long H = static_cast<long>(in.h);
  const long W = static_cast<long>(in.w);
  const long P = static_cast<long>(geo.p);
  for (std::size_t c = 0; c < geo.c_out; ++c)
    for (std::size_t t = 0; t < ho; ++t)
      for (std::size_t l = 0; l < wo; ++l) {
        const std::size_t row = (c * ho + t) * wo + l;
        for (std::size_t c2 = 0; c2 < geo.c_in; ++c2)
          for (std::size_t a = 0; a < geo.k1; ++a) {
            const long r = static_cast<long>(t * geo.s + a) - P;
            if (r < 0 || r >= H) continue;
            for (std::size_t b = 0; b < geo.k2; ++b) {
              const long q = static_cast<long>(l * geo.s + b) - P;
              if (q < 0 || q >= W) continue;
              const std::size_t col =
                  (c2 * in.h + static_cast<std::size_t>(r)) * in.w + static_cast<std::size_t>(q);
              v(row, col) += kernel_entry(w, geo, c, c2, a, b);
            }
          }
      }
  return v;
}

Matrix conv_block_operator(const ConvGeometry& geo, const Matrix& w, const Shape3& in) {
  check_weight(geo, w);
  const auto [ho, wo] = conv_out_dims(geo, in);
  const std::size_t n = ho * wo;
  Matrix u(n * w.rows(), n * w.cols());
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (std::size_t c = 0; c < w.cols(); ++c) u(t * w.rows() + r, t * w.cols() + c) = w(r, c);
  return u;
}

std::vector<double> concatenated_patches(const ConvGeometry& geo, const Tensor3& x) {
  return vec_patches(x, geo.k1, geo.k2, geo.s, geo.p).data();
}

Tensor3 from_patch_major(const std::vector<double>& y, std::size_t c_out, std::size_t h,
                         std::size_t w) {
  if (y.size() != c_out * h * w) throw Error(ErrorCode::ShapeMismatch, "patch-major length");
  Tensor3 out(c_out, h, w);
  for (std::size_t t = 0; t < h * w; ++t)
    for (std::size_t c = 0; c < c_out; ++c) out[c * h * w + t] = y[t * c_out + c];
  return out;
}

Tensor3 pool_apply(PoolOp op, const PoolWindow& win, const Tensor3& x,
                   std::vector<std::size_t>* argmax) {
  auto ho = window_output_dim(x.height(), win.k1, win.s, win.p);
  auto wo = window_output_dim(x.width(), win.k2, win.s, win.p);
  if (!ho || !wo) throw Error(ErrorCode::BadGeometry, "pool window does not fit input");
  const Tensor3 xp = pad(x, win.p);
  Tensor3 y(x.channels(), *ho, *wo);
  if (argmax) argmax->assign(y.size(), 0);
  const double inv = 1.0 / static_cast<double>(win.k1 * win.k2);
  for (std::size_t c = 0; c < x.channels(); ++c)
    for (std::size_t t = 0; t < *ho; ++t)
      for (std::size_t l = 0; l < *wo; ++l) {
        double acc = op == PoolOp::Max ? -std::numeric_limits<double>::infinity() : 0.0;
        std::size_t best = 0;
        for (std::size_t a = 0; a < win.k1; ++a)
          for (std::size_t b = 0; b < win.k2; ++b) {
            const std::size_t idx = xp.index(c, t * win.s + a, l * win.s + b);
            const double v = xp[idx];
            if (op == PoolOp::Max) {
              if (v > acc) {  // strict: first maximizer wins
                acc = v;
                best = idx;
              }
            } else {
              acc += v;
            }
          }
        const std::size_t out_idx = y.index(c, t, l);
        y[out_idx] = op == PoolOp::Max ? acc : acc * inv;
        if (argmax) (*argmax)[out_idx] = best;
      }
  return y;
}

void check_permutation(const std::vector<std::size_t>& perm, std::size_t n) {
  if (perm.size() != n) {
    throw Error(ErrorCode::BadPermutation, "permutation length " + std::to_string(perm.size()) +
                                               " differs from " + std::to_string(n));
  }
  std::vector<bool> hit(n, false);
  for (std::size_t v : perm) {
    if (v >= n || hit[v]) throw Error(ErrorCode::BadPermutation, "permutation is not a bijection");
    hit[v] = true;
  }
}

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) inv[perm[k]] = k;
  return inv;
}

Tensor3 rearrange_apply(const RearrangeKind& kind, const Tensor3& x, const Shape3& out_shape) {
  if (out_shape.size() != x.size()) {
    throw Error(ErrorCode::BadPermutation, "rearrange target size differs from input size");
  }
  if (kind.permutation.empty()) return x.reshaped(out_shape);
  check_permutation(kind.permutation, x.size());
  Tensor3 y(out_shape);
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = x[kind.permutation[k]];
  return y;
}

Tensor3 apply_connection(const ConnectionSpec& spec, const Matrix* w, const Tensor3& x,
                         const Shape3& out_shape, std::vector<std::size_t>* argmax) {
  return std::visit(
      overloaded{
          [&](const ConvKind&) { return conv_apply(*conv_geometry(spec), *w, x); },
          [&](const FullyConnectedKind&) { return conv_apply(*conv_geometry(spec), *w, x); },
          [&](const AvgPoolKind& k) { return pool_apply(PoolOp::Avg, k, x); },
          [&](const MaxPoolKind& k) { return pool_apply(PoolOp::Max, k, x, argmax); },
          [&](const RearrangeKind& k) { return rearrange_apply(k, x, out_shape); },
          [&](const IdentityKind&) { return x; }},
      spec.kind);
}

// ----------------------------------------------------------------- forward

ForwardResult forward(const NetworkGraph& g, const Parameters& params, const Tensor3& x) {
  if (g.layers.empty() || !(x.shape() == g.layers[0])) {
    throw Error(ErrorCode::ShapeMismatch, "input shape " + shape_str(x.shape()) +
                                              " does not match the input layer");
  }
  check_parameters(g, params);
  const std::size_t n = g.layers.size();
  const std::size_t last = n - 1;

  // Parameter slot for each connection.
  std::vector<std::ptrdiff_t> slot(g.connections.size(), -1);
  {
    const auto edges = g.trainable_edges();
    for (std::size_t e = 0; e < edges.size(); ++e) slot[edges[e]] = static_cast<std::ptrdiff_t>(e);
  }
  std::vector<std::vector<std::size_t>> incoming(n);
  for (std::size_t k = 0; k < g.connections.size(); ++k) incoming[g.connections[k].dst].push_back(k);

  ForwardResult res;
  ActivationTrace& tr = res.trace;
  tr.pre.resize(n);
  tr.post.resize(n);
  tr.mask.resize(n);
  tr.argmax.resize(g.connections.size());
  tr.min_abs_preactivation = std::numeric_limits<double>::infinity();

  for (std::size_t i : g.topological_order()) {
    if (i == 0) {
      tr.pre[0] = x;
      tr.post[0] = x;
      tr.mask[0] = Tensor3(x.shape(), 1.0);
      continue;
    }
    Tensor3 u(g.layers[i]);
    for (std::size_t k : incoming[i]) {
      const auto& spec = g.connections[k];
      const Matrix* w = slot[k] >= 0 ? &params[static_cast<std::size_t>(slot[k])] : nullptr;
      const Tensor3 contrib = apply_connection(spec, w, tr.post[spec.src], g.layers[i],
                                               &tr.argmax[k]);
      if (!(contrib.shape() == u.shape())) {
        throw Error(ErrorCode::ShapeMismatch, "connection output does not match layer shape");
      }
      for (std::size_t q = 0; q < u.size(); ++q) u[q] += contrib[q];
    }
    if (i == last) {
      tr.mask[i] = Tensor3(u.shape(), 1.0);
      tr.post[i] = u;
    } else {
      Tensor3 v(u.shape());
      Tensor3 d(u.shape());
      for (std::size_t q = 0; q < u.size(); ++q) {
        if (u[q] == 0.0) ++tr.exact_zero_count;
        else tr.min_abs_preactivation = std::min(tr.min_abs_preactivation, std::fabs(u[q]));
        if (u[q] > 0.0) {
          v[q] = u[q];
          d[q] = 1.0;
        }
      }
      tr.post[i] = std::move(v);
      tr.mask[i] = std::move(d);
    }
    tr.pre[i] = std::move(u);
  }
  res.output = tr.post[last].data();
  return res;
}

// ---------------------------------------------------------------- builders

namespace {

ConnectionSpec fc_edge(std::size_t src, std::size_t dst, std::size_t d_in, std::size_t d_out) {
  return ConnectionSpec{src, dst, FullyConnectedKind{d_in, d_out}, true};
}

}  // namespace

Network build_mlp(const std::vector<std::size_t>& widths, bool with_residual, Rng& rng) {
  if (widths.size() < 2) throw Error(ErrorCode::BadParams, "build_mlp needs input and output widths");
  NetworkGraph g;
  for (std::size_t w : widths) g.layers.push_back({w, 1, 1});
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    g.connections.push_back(fc_edge(i, i + 1, widths[i], widths[i + 1]));
  if (with_residual) {
    const std::size_t last_hidden = widths.size() - 2;
    std::size_t i = 1;
    while (i < last_hidden) {
      if (i + 2 <= last_hidden && widths[i] == widths[i + 2]) {
        g.connections.push_back({i, i + 2, IdentityKind{}, false});
        i += 2;
      } else if (widths[i] == widths[i + 1]) {
        g.connections.push_back({i, i + 1, IdentityKind{}, false});
        i += 1;
      } else {
        i += 1;
      }
    }
  }
  g.k_out = widths.back();
  require_valid(g);
  Parameters p = Parameters::init_uniform(g, rng);
  return {std::move(g), std::move(p)};
}

Network build_convnet(const Shape3& input, const std::vector<ConvStage>& stages,
                      const std::vector<std::size_t>& fc_widths, Rng& rng) {
  if (fc_widths.empty()) throw Error(ErrorCode::BadParams, "build_convnet needs an output width");
  NetworkGraph g;
  g.layers.push_back(input);
  Shape3 cur = input;
  for (const auto& st : stages) {
    ConnectionSpec conv{g.layers.size() - 1, g.layers.size(),
                        ConvKind{st.k, st.k, st.s, st.p, cur.c, st.c_out}, true};
    auto out = connection_output_shape(conv, cur);
    if (!out) throw Error(ErrorCode::BadGeometry, "conv stage does not fit " + shape_str(cur));
    g.connections.push_back(conv);
    g.layers.push_back(*out);
    cur = *out;
    if (st.pool) {
      ConnectionSpec pool{g.layers.size() - 1, g.layers.size(), {}, false};
      if (st.pool->op == PoolOp::Max) {
        pool.kind = MaxPoolKind{st.pool->window};
      } else {
        pool.kind = AvgPoolKind{st.pool->window};
      }
      auto pout = connection_output_shape(pool, cur);
      if (!pout) throw Error(ErrorCode::BadGeometry, "pool stage does not fit " + shape_str(cur));
      g.connections.push_back(pool);
      g.layers.push_back(*pout);
      cur = *pout;
    }
  }
  const std::size_t flat = cur.size();
  g.connections.push_back({g.layers.size() - 1, g.layers.size(), RearrangeKind{}, false});
  g.layers.push_back({flat, 1, 1});
  std::size_t prev = flat;
  for (std::size_t w : fc_widths) {
    g.connections.push_back(fc_edge(g.layers.size() - 1, g.layers.size(), prev, w));
    g.layers.push_back({w, 1, 1});
    prev = w;
  }
  g.k_out = fc_widths.back();
  require_valid(g);
  Parameters p = Parameters::init_uniform(g, rng);
  return {std::move(g), std::move(p)};
}

Network maxpool_as_relu_net(const PoolWindow& win, const Shape3& in) {
  auto ho = window_output_dim(in.h, win.k1, win.s, win.p);
  auto wo = window_output_dim(in.w, win.k2, win.s, win.p);
  if (!ho || !wo) throw Error(ErrorCode::BadGeometry, "pool window does not fit input");
  const std::size_t cells = in.c * *ho * *wo;

  // Each value is a linear form over the previous layer (empty = constant 0).
  using Form = std::vector<double>;
  std::vector<std::vector<Form>> values(cells);
  const long H = static_cast<long>(in.h);
  const long W = static_cast<long>(in.w);
  const long P = static_cast<long>(win.p);
  for (std::size_t c = 0; c < in.c; ++c)
    for (std::size_t t = 0; t < *ho; ++t)
      for (std::size_t l = 0; l < *wo; ++l) {
        auto& cell = values[(c * *ho + t) * *wo + l];
        for (std::size_t a = 0; a < win.k1; ++a)
          for (std::size_t b = 0; b < win.k2; ++b) {
            Form f(in.size(), 0.0);
            const long r = static_cast<long>(t * win.s + a) - P;
            const long q = static_cast<long>(l * win.s + b) - P;
            if (r >= 0 && r < H && q >= 0 && q < W) {
              f[(c * in.h + static_cast<std::size_t>(r)) * in.w + static_cast<std::size_t>(q)] = 1.0;
            }
            cell.push_back(std::move(f));
          }
      }

  NetworkGraph g;
  g.layers.push_back(in);
  std::vector<Matrix> weights;
  std::size_t prev_width = in.size();
  auto add_layer = [&](const std::vector<Form>& rows) {
    Matrix w(rows.size(), prev_width);
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(rows[r].begin(), rows[r].end(), w.row(r).begin());
    const std::size_t src = g.layers.size() - 1;
    if (src == 0) {
      g.connections.push_back(
          {0, 1, ConvKind{in.h, in.w, 1, 0, in.c, rows.size()}, true});
    } else {
      g.connections.push_back(fc_edge(src, src + 1, prev_width, rows.size()));
    }
    g.layers.push_back({rows.size(), 1, 1});
    weights.push_back(std::move(w));
    prev_width = rows.size();
  };
  auto scaled_diff = [](const Form& a, const Form& b, double sa, double sb) {
    Form f(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) f[i] = sa * a[i] + sb * b[i];
    return f;
  };

  bool more = std::any_of(values.begin(), values.end(), [](const auto& v) { return v.size() > 1; });
  while (more) {
    std::vector<Form> hidden;
    std::vector<std::vector<Form>> next(cells);
    // Record node positions; forms over the new layer are built after its
    // width is known.
    struct Pending {
      std::size_t cell;
      std::vector<std::pair<std::size_t, double>> terms;
    };
    std::vector<Pending> pending;
    for (std::size_t ci = 0; ci < cells; ++ci) {
      auto& cell = values[ci];
      for (std::size_t k = 0; k < cell.size(); k += 2) {
        Pending pd{ci, {}};
        if (k + 1 < cell.size()) {
          // max(x, y) = sigma(x - y) + sigma(y) - sigma(-y)
          const Form& x = cell[k];
          const Form& y = cell[k + 1];
          hidden.push_back(scaled_diff(x, y, 1.0, -1.0));
          pd.terms.push_back({hidden.size() - 1, 1.0});
          hidden.push_back(y);
          pd.terms.push_back({hidden.size() - 1, 1.0});
          hidden.push_back(scaled_diff(y, y, -1.0, 0.0));
          pd.terms.push_back({hidden.size() - 1, -1.0});
        } else {
          // x = sigma(x) - sigma(-x)
          const Form& x = cell[k];
          hidden.push_back(x);
          pd.terms.push_back({hidden.size() - 1, 1.0});
          hidden.push_back(scaled_diff(x, x, -1.0, 0.0));
          pd.terms.push_back({hidden.size() - 1, -1.0});
        }
        pending.push_back(std::move(pd));
      }
    }
    add_layer(hidden);
    for (const auto& pd : pending) {
      Form f(hidden.size(), 0.0);
      for (auto [idx, coef] : pd.terms) f[idx] += coef;
      next[pd.cell].push_back(std::move(f));
    }
    values = std::move(next);
    more = std::any_of(values.begin(), values.end(), [](const auto& v) { return v.size() > 1; });
  }
  std::vector<Form> out_rows;
  out_rows.reserve(cells);
  for (auto& v : values) out_rows.push_back(std::move(v.front()));
  add_layer(out_rows);
  g.k_out = cells;
  require_valid(g);
  return {std::move(g), Parameters{std::move(weights)}};
}

}  // namespace lowrank
