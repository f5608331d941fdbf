#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "lowrank/linalg.hpp"

namespace lowrank {

class Rng;

// ------------------------------------------------------------- connections

struct ConvKind {
  std::size_t k1 = 1, k2 = 1, s = 1, p = 0;
  std::size_t c_in = 0, c_out = 0;
  friend bool operator==(const ConvKind&, const ConvKind&) = default;
};

/// Dense layer d_in -> d_out; evaluated as a 1x1 convolution on d x 1 x 1.
struct FullyConnectedKind {
  std::size_t d_in = 0, d_out = 0;
  friend bool operator==(const FullyConnectedKind&, const FullyConnectedKind&) = default;
};

struct PoolWindow {
  std::size_t k1 = 2, k2 = 2, s = 2, p = 0;
  friend bool operator==(const PoolWindow&, const PoolWindow&) = default;
};

struct AvgPoolKind : PoolWindow {};
struct MaxPoolKind : PoolWindow {};

/// Output flat index k holds input flat index permutation[k]. An empty
/// permutation means the identity order (a plain reshape).
struct RearrangeKind {
  std::vector<std::size_t> permutation;
  friend bool operator==(const RearrangeKind&, const RearrangeKind&) = default;
};

/// Residual skip.
struct IdentityKind {
  friend bool operator==(const IdentityKind&, const IdentityKind&) = default;
};

using ConnectionKind =
    std::variant<ConvKind, FullyConnectedKind, AvgPoolKind, MaxPoolKind, RearrangeKind, IdentityKind>;

struct ConnectionSpec {
  std::size_t src = 0;
  std::size_t dst = 0;
  ConnectionKind kind;
  bool trainable = false;

  friend bool operator==(const ConnectionSpec&, const ConnectionSpec&) = default;
};

/// Unified convolution geometry; FullyConnected maps to k1=k2=s=1, p=0.
struct ConvGeometry {
  std::size_t k1, k2, s, p, c_in, c_out;
};

std::optional<ConvGeometry> conv_geometry(const ConnectionSpec& spec);
bool is_trainable_kind(const ConnectionKind& kind);
std::string kind_name(const ConnectionKind& kind);

/// Output shape of a connection for a given input shape, or nullopt when the
/// geometry is invalid.
std::optional<Shape3> connection_output_shape(const ConnectionSpec& spec, const Shape3& in);

// ------------------------------------------------------------------- graph

/// DAG of layers. Layer 0 is the input, the last layer is the output.
struct NetworkGraph {
  std::vector<Shape3> layers;
  std::vector<ConnectionSpec> connections;
  std::size_t k_out = 1;

  std::size_t input_layer() const noexcept { return 0; }
  std::size_t output_layer() const noexcept { return layers.empty() ? 0 : layers.size() - 1; }

  /// Connection indices of E_T, sorted by (src, dst). Every per-edge
  /// container in the library is aligned with this order.
  std::vector<std::size_t> trainable_edges() const;
  /// Throws InvalidGraph on a cycle.
  std::vector<std::size_t> topological_order() const;

  friend bool operator==(const NetworkGraph&, const NetworkGraph&) = default;
};

struct GraphIssue {
  std::string code;
  std::string message;
};

std::vector<GraphIssue> validate_graph(const NetworkGraph& g);
/// Throws InvalidGraph listing every issue.
void require_valid(const NetworkGraph& g);

/// Number of patches N^{ij} a trainable edge acts on (h_i * w_i).
/// Throws NotApplicable for non-trainable kinds.
std::size_t patch_count(const NetworkGraph& g, std::size_t connection);
std::size_t patch_count(const ConnectionSpec& spec, const Shape3& in);

// -------------------------------------------------------------- parameters

/// Weight matrices W^{ij} (c_out x c_in*k1*k2, rows are vectorized filters),
/// aligned with NetworkGraph::trainable_edges().
struct Parameters {
  std::vector<Matrix> weights;

  std::size_t size() const noexcept { return weights.size(); }
  Matrix& operator[](std::size_t e) { return weights[e]; }
  const Matrix& operator[](std::size_t e) const { return weights[e]; }

  static Parameters zeros(const NetworkGraph& g);
  /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] with fan_in = c_in*k1*k2.
  static Parameters init_uniform(const NetworkGraph& g, Rng& rng);

  friend bool operator==(const Parameters&, const Parameters&) = default;
};

/// Kernel entry Z_{c, c', a, b} read from the matrix form.
inline double kernel_entry(const Matrix& w, const ConvGeometry& geo, std::size_t c,
                           std::size_t c2, std::size_t a, std::size_t b) {
  return w(c, (c2 * geo.k1 + a) * geo.k2 + b);
}

/// Throws ShapeMismatch when shapes disagree with the graph.
void check_parameters(const NetworkGraph& g, const Parameters& params);

// ----------------------------------------------------------- layer kernels

/// Direct convolution y_{c,t,l} = sum_{c'} <Z_{c,c'}, Pad_p(x) window>.
Tensor3 conv_apply(const ConvGeometry& geo, const Matrix& w, const Tensor3& x);
/// im2col route: vec_patches(x) * W^T, reshaped.
Tensor3 conv_apply_im2col(const ConvGeometry& geo, const Matrix& w, const Tensor3& x);
/// Full linear operator V on vec(x): (c_out h' w') x (c_in h w).
Matrix conv_dense_operator(const ConvGeometry& geo, const Matrix& w, const Shape3& in);
/// Block matrix with N copies of W on the diagonal; acts on the concatenated
/// patch vector vec^{ij}(x).
Matrix conv_block_operator(const ConvGeometry& geo, const Matrix& w, const Shape3& in);
/// Concatenated patch vector vec^{ij}(x) (patch-major).
std::vector<double> concatenated_patches(const ConvGeometry& geo, const Tensor3& x);
/// Reorders a patch-major output (t, c) back into a c x h' x w' tensor.
Tensor3 from_patch_major(const std::vector<double>& y, std::size_t c_out, std::size_t h,
                         std::size_t w);

enum class PoolOp { Max, Avg };

/// Pooling over windows of Pad_p(x). For max pooling the flat index (into the
/// padded tensor) of the first maximizer of every output cell is written to
/// `argmax` when provided.
Tensor3 pool_apply(PoolOp op, const PoolWindow& win, const Tensor3& x,
                   std::vector<std::size_t>* argmax = nullptr);

Tensor3 rearrange_apply(const RearrangeKind& kind, const Tensor3& x, const Shape3& out_shape);
/// Throws BadPermutation unless `perm` is a bijection on [0, n).
void check_permutation(const std::vector<std::size_t>& perm, std::size_t n);
std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm);

// ----------------------------------------------------------------- forward

struct ActivationTrace {
  std::vector<Tensor3> pre;   // u_i
  std::vector<Tensor3> post;  // v_i
  std::vector<Tensor3> mask;  // D_i = sigma'(u_i); all ones on input/output
  /// Max-pool argmax per connection index (empty for other kinds).
  std::vector<std::vector<std::size_t>> argmax;
  /// Hidden pre-activations equal to exactly 0 (sigma'(0) = 0 fired).
  std::size_t exact_zero_count = 0;
  /// min |u| over the nonzero hidden pre-activations; +inf if there are
  /// none. Exact zeros come from all-zero inputs to a unit and stay zero
  /// under small weight perturbations, so they are counted separately.
  double min_abs_preactivation = 0.0;
};

struct ForwardResult {
  std::vector<double> output;
  ActivationTrace trace;
};

/// Topological evaluation v_i = sigma(sum_j C^{ij}(v_j)); no ReLU on the
/// output layer. Throws ShapeMismatch.
ForwardResult forward(const NetworkGraph& g, const Parameters& params, const Tensor3& x);

/// Applies one connection; `argmax` receives max-pool indices.
Tensor3 apply_connection(const ConnectionSpec& spec, const Matrix* w, const Tensor3& x,
                         const Shape3& out_shape, std::vector<std::size_t>* argmax = nullptr);

// ---------------------------------------------------------------- builders

struct Network {
  NetworkGraph graph;
  Parameters params;
};

/// widths = {d_in, hidden..., d_out}. With `residual`, consecutive hidden
/// layers of equal width are grouped into two-layer blocks whose skip edge
/// jumps over the block; a trailing single equal-width transition gets a
/// one-layer skip.
Network build_mlp(const std::vector<std::size_t>& widths, bool with_residual, Rng& rng);

struct PoolStage {
  PoolOp op = PoolOp::Max;
  PoolWindow window;
};

struct ConvStage {
  std::size_t c_out = 1, k = 3, s = 1, p = 0;
  std::optional<PoolStage> pool;
};

/// Conv stages on `input`, then a flatten, then fully-connected layers with
/// the given widths (the last one is the output).
Network build_convnet(const Shape3& input, const std::vector<ConvStage>& stages,
                      const std::vector<std::size_t>& fc_widths, Rng& rng);

/// Pairwise-max ReLU circuit equivalent to max pooling, using
/// max(x, y) = sigma(x - y) + sigma(y) - sigma(-y). The first edge is a conv
/// whose kernel spans the whole input; the rest are fully connected.
Network maxpool_as_relu_net(const PoolWindow& win, const Shape3& in);

// -------------------------------------------------------------------- JSON

/// Schema: {version, layers:[{c,h,w}], connections:[{src,dst,kind,params,
/// trainable}], k_out[, seed]}.
std::string graph_to_json(const NetworkGraph& g, std::optional<std::uint64_t> seed = {});
NetworkGraph graph_from_json(const std::string& text, std::optional<std::uint64_t>* seed = nullptr);

inline constexpr int kGraphSchemaVersion = 1;

}  // namespace lowrank
