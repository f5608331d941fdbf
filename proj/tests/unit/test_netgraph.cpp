#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "lowrank/netgraph.hpp"
#include "lowrank/rng.hpp"
#include "test_util.hpp"

using namespace lowrank;
using lowrank::testing::fc_chain;
using lowrank::testing::random_tensor;

namespace {

bool has_issue(const NetworkGraph& g, const std::string& code) {
  const auto issues = validate_graph(g);
  return std::any_of(issues.begin(), issues.end(), [&](const GraphIssue& i) { return i.code == code; });
}

double relu(double x) { return x > 0 ? x : 0; }

}  // namespace

TEST(Validate, ChainIsValid) {
  EXPECT_TRUE(validate_graph(fc_chain({3, 4, 2})).empty());
  EXPECT_NO_THROW(require_valid(fc_chain({3, 4, 2})));
}

TEST(Validate, ReportsEachIssue) {
  {
    NetworkGraph g = fc_chain({3, 4, 2});
    g.connections.push_back({1, 2, FullyConnectedKind{4, 2}, true});
    EXPECT_TRUE(has_issue(g, "duplicate-edge"));
    g.connections.pop_back();
    g.connections.push_back({0, 1, RearrangeKind{}, false});
    EXPECT_FALSE(has_issue(g, "duplicate-edge"));
  }
  {
    NetworkGraph g = fc_chain({3, 4, 2});
    g.k_out = 3;
    EXPECT_TRUE(has_issue(g, "k-out"));
  }
  {
    NetworkGraph g = fc_chain({3, 4, 2});
    g.connections[0].kind = FullyConnectedKind{3, 5};
    EXPECT_TRUE(has_issue(g, "shape-mismatch"));
  }
  {
    NetworkGraph g = fc_chain({3, 4, 2});
    g.connections[0].trainable = false;
    EXPECT_TRUE(has_issue(g, "trainable-flag"));
  }
  {
    NetworkGraph g = fc_chain({3, 4, 4, 2});
    g.connections.push_back({2, 1, IdentityKind{}, false});
    EXPECT_TRUE(has_issue(g, "cycle"));
    EXPECT_THROW(g.topological_order(), Error);
  }
  {
    NetworkGraph g = fc_chain({3, 3, 2});
    g.connections.push_back({1, 0, IdentityKind{}, false});
    EXPECT_TRUE(has_issue(g, "edge-into-input"));
  }
  {
    NetworkGraph g = fc_chain({3, 4, 2});
    g.layers.insert(g.layers.begin() + 1, Shape3{5, 1, 1});
    g.connections = {{0, 2, FullyConnectedKind{3, 4}, true}, {2, 3, FullyConnectedKind{4, 2}, true},
                     {1, 2, FullyConnectedKind{5, 4}, true}};
    EXPECT_TRUE(has_issue(g, "no-input"));
  }
  {
    NetworkGraph g;
    g.layers = {{4, 1, 1}, {2, 1, 1}};
    g.connections = {{0, 1, RearrangeKind{{0, 1, 2, 3}}, false}};
    g.k_out = 2;
    EXPECT_TRUE(has_issue(g, "shape-mismatch"));
  }
  {
    NetworkGraph g;
    g.layers = {{3, 1, 1}, {3, 1, 1}};
    g.connections = {{0, 1, RearrangeKind{{0, 0, 2}}, false}};
    g.k_out = 3;
    EXPECT_TRUE(has_issue(g, "bad-permutation"));
  }
  {
    NetworkGraph g;
    g.layers = {{1, 2, 2}, {1, 1, 1}};
    g.connections = {{0, 1, ConvKind{3, 3, 1, 0, 1, 1}, true}};
    g.k_out = 1;
    EXPECT_TRUE(has_issue(g, "bad-geometry"));
  }
  {
    NetworkGraph g = fc_chain({3});
    EXPECT_TRUE(has_issue(g, "too-few-layers"));
  }
  try {
    NetworkGraph g = fc_chain({3, 4, 2});
    g.k_out = 7;
    require_valid(g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidGraph);
  }
}

TEST(Graph, TrainableEdgesSortedBySrcDst) {
  NetworkGraph g = fc_chain({3, 3, 3, 2});
  g.connections.push_back({1, 3, FullyConnectedKind{3, 2}, true});
  std::swap(g.connections[0], g.connections[2]);
  const auto e = g.trainable_edges();
  ASSERT_EQ(e.size(), 4u);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (auto i : e) pairs.push_back({g.connections[i].src, g.connections[i].dst});
  EXPECT_TRUE(std::is_sorted(pairs.begin(), pairs.end()));
}

TEST(PatchCount, Examples) {
  const ConnectionSpec same{0, 1, ConvKind{3, 3, 1, 1, 1, 2}, true};
  EXPECT_EQ(patch_count(same, {1, 4, 4}), 16u);
  const ConnectionSpec strided{0, 1, ConvKind{2, 2, 2, 0, 1, 2}, true};
  EXPECT_EQ(patch_count(strided, {1, 4, 4}), 4u);
  const ConnectionSpec fc{0, 1, FullyConnectedKind{4, 2}, true};
  EXPECT_EQ(patch_count(fc, {4, 1, 1}), 1u);
  const ConnectionSpec pool{0, 1, MaxPoolKind{}, false};
  EXPECT_THROW(patch_count(pool, {1, 4, 4}), Error);
}

TEST(Conv, AllRoutesAgree) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t c_in = 1 + rng.below(3), c_out = 1 + rng.below(3);
    const std::size_t k = 1 + rng.below(3), s = 1 + rng.below(2), p = rng.below(2);
    const Shape3 in{c_in, k + rng.below(4), k + rng.below(4)};
    const ConvGeometry geo{k, k, s, p, c_in, c_out};
    const Matrix w = Matrix::random_uniform(c_out, c_in * k * k, rng);
    const Tensor3 x = random_tensor(in, rng);

    const Tensor3 direct = conv_apply(geo, w, x);
    const Tensor3 im2col = conv_apply_im2col(geo, w, x);
    ASSERT_EQ(direct.shape(), im2col.shape());
    for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_NEAR(direct[i], im2col[i], 1e-12);

    const auto dense = matvec(conv_dense_operator(geo, w, in), x.data());
    for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_NEAR(direct[i], dense[i], 1e-12);

    const auto block = matvec(conv_block_operator(geo, w, in), concatenated_patches(geo, x));
    const Tensor3 from_block = from_patch_major(block, c_out, direct.height(), direct.width());
    for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_NEAR(direct[i], from_block[i], 1e-12);
  }
}

TEST(Conv, HandComputedExample) {
  // 1 channel, 3x3 input, 2x2 kernel of ones: sums of 2x2 windows.
  const Tensor3 x(Shape3{1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Matrix w{{1, 1, 1, 1}};
  const Tensor3 y = conv_apply({2, 2, 1, 0, 1, 1}, w, x);
  EXPECT_EQ(y, Tensor3(Shape3{1, 2, 2}, {12, 16, 24, 28}));
}

TEST(Pool, MaxAndAverage) {
  Tensor3 x(1, 4, 4);
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  std::vector<std::size_t> argmax;
  EXPECT_EQ(pool_apply(PoolOp::Max, {}, x, &argmax), Tensor3(Shape3{1, 2, 2}, {5, 7, 13, 15}));
  EXPECT_EQ(argmax, (std::vector<std::size_t>{5, 7, 13, 15}));
  EXPECT_EQ(pool_apply(PoolOp::Avg, {}, x), Tensor3(Shape3{1, 2, 2}, {2.5, 4.5, 10.5, 12.5}));
}

TEST(Pool, FirstMaximizerWinsTies) {
  const Tensor3 x(1, 2, 2, 3.0);
  std::vector<std::size_t> argmax;
  pool_apply(PoolOp::Max, {}, x, &argmax);
  EXPECT_EQ(argmax, (std::vector<std::size_t>{0}));
}

TEST(Rearrange, PermutationAndInverse) {
  const Tensor3 x = Tensor3::from_vector({10, 20, 30});
  const RearrangeKind k{{2, 0, 1}};
  const Tensor3 y = rearrange_apply(k, x, {3, 1, 1});
  EXPECT_EQ(y.data(), (std::vector<double>{30, 10, 20}));
  const Tensor3 back = rearrange_apply(RearrangeKind{inverse_permutation(k.permutation)}, y, {3, 1, 1});
  EXPECT_EQ(back, x);
  EXPECT_THROW(check_permutation({0, 3, 1}, 3), Error);
  EXPECT_THROW(check_permutation({0, 1}, 3), Error);
}

TEST(Forward, StraightLineMlpOracle) {
  Rng rng(21);
  const NetworkGraph g = fc_chain({4, 8, 1});
  const Parameters p = Parameters::init_uniform(g, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor3 x = random_tensor({4, 1, 1}, rng);
    double y = 0;
    for (std::size_t h = 0; h < 8; ++h) {
      double u = 0;
      for (std::size_t i = 0; i < 4; ++i) u += p[0](h, i) * x[i];
      y += p[1](0, h) * relu(u);
    }
    const auto res = forward(g, p, x);
    ASSERT_EQ(res.output.size(), 1u);
    EXPECT_NEAR(res.output[0], y, 1e-14);
    ASSERT_EQ(res.trace.mask.size(), 3u);
    for (std::size_t h = 0; h < 8; ++h)
      EXPECT_EQ(res.trace.mask[1][h], res.trace.pre[1][h] > 0 ? 1.0 : 0.0);
  }
}

TEST(Forward, ResidualSumsBeforeActivation) {
  Rng rng(4);
  Network net = build_mlp({3, 5, 5, 5, 1}, true, rng);
  const Tensor3 x = random_tensor({3, 1, 1}, rng);
  const auto res = forward(net.graph, net.params, x);
  // Layer 3 receives the skip from layer 1 and the FC edge from layer 2.
  const auto& p = net.params;
  for (std::size_t h = 0; h < 5; ++h) {
    double u = res.trace.post[1][h];
    for (std::size_t i = 0; i < 5; ++i) u += p[2](h, i) * res.trace.post[2][i];
    EXPECT_NEAR(res.trace.pre[3][h], u, 1e-14);
    EXPECT_NEAR(res.trace.post[3][h], relu(u), 1e-14);
  }
}

TEST(Forward, ReluDerivativeAtZeroIsZero) {
  NetworkGraph g = fc_chain({1, 1, 1});
  Parameters p = Parameters::zeros(g);
  p[1](0, 0) = 1;
  const auto res = forward(g, p, Tensor3::from_vector({1}));
  EXPECT_EQ(res.trace.mask[1][0], 0.0);
  EXPECT_EQ(res.trace.exact_zero_count, 1u);
  EXPECT_TRUE(std::isinf(res.trace.min_abs_preactivation));
}

TEST(Forward, ShapeMismatch) {
  const NetworkGraph g = fc_chain({4, 2});
  Rng rng(1);
  const Parameters p = Parameters::init_uniform(g, rng);
  EXPECT_THROW(forward(g, p, Tensor3::from_vector({1, 2, 3})), Error);
  Parameters bad = p;
  bad[0] = Matrix(3, 4);
  EXPECT_THROW(check_parameters(g, bad), Error);
}

TEST(MaxPoolRelu, MatchesPoolingExactlyOnDyadicInputs) {
  Rng rng(6);
  const std::vector<std::pair<PoolWindow, Shape3>> cases = {
      {{2, 2, 2, 0}, {1, 4, 4}}, {{3, 3, 1, 0}, {2, 4, 4}}, {{2, 2, 2, 1}, {1, 3, 3}}, {{3, 2, 1, 0}, {1, 3, 3}}};
  for (const auto& [win, in] : cases) {
    const Network net = maxpool_as_relu_net(win, in);
    for (int trial = 0; trial < 125; ++trial) {
      Tensor3 x(in);
      for (double& v : x.data()) v = static_cast<double>(static_cast<int>(rng.below(64)) - 32) / 8.0;
      const auto want = pool_apply(PoolOp::Max, win, x).data();
      EXPECT_EQ(forward(net.graph, net.params, x).output, want);

      const Tensor3 r = random_tensor(in, rng);
      const auto got = forward(net.graph, net.params, r).output;
      const auto ref = pool_apply(PoolOp::Max, win, r).data();
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-12);
    }
  }
}

TEST(Builders, MlpShapes) {
  Rng rng(1);
  const Network net = build_mlp({4, 8, 8, 1}, false, rng);
  EXPECT_EQ(net.graph.layers.size(), 4u);
  EXPECT_EQ(net.graph.trainable_edges().size(), 3u);
  EXPECT_EQ(net.params[1].rows(), 8u);
  EXPECT_EQ(net.params[1].cols(), 8u);
  const double bound = 1.0 / std::sqrt(8.0);
  EXPECT_LE(max_abs(net.params[1]), bound);

  const Network res = build_mlp({4, 8, 8, 8, 8, 1}, true, rng);
  std::size_t skips = 0;
  for (const auto& c : res.graph.connections)
    if (std::holds_alternative<IdentityKind>(c.kind)) ++skips;
  EXPECT_EQ(skips, 2u);

  const Network small = build_mlp({4, 8, 8, 1}, true, rng);
  EXPECT_EQ(small.graph.trainable_edges().size(), 3u);
  EXPECT_EQ(small.graph.connections.size(), 4u);
  const Tensor3 x = random_tensor({4, 1, 1}, rng);
  const auto fw = forward(small.graph, small.params, x);
  for (std::size_t h = 0; h < 8; ++h) {
    double u = fw.trace.post[1][h];
    for (std::size_t i = 0; i < 8; ++i) u += small.params[1](h, i) * fw.trace.post[1][i];
    EXPECT_NEAR(fw.trace.pre[2][h], u, 1e-14);
  }
}

TEST(Builders, ConvnetShapes) {
  Rng rng(1);
  const Network net = build_convnet({1, 8, 8}, {{4, 3, 1, 1, PoolStage{PoolOp::Max, {}}}}, {10, 3}, rng);
  EXPECT_EQ(net.graph.layers[1], (Shape3{4, 8, 8}));
  EXPECT_EQ(net.graph.layers[2], (Shape3{4, 4, 4}));
  EXPECT_EQ(net.graph.layers[3], (Shape3{64, 1, 1}));
  EXPECT_EQ(net.graph.k_out, 3u);
  EXPECT_EQ(net.params[0].rows(), 4u);
  EXPECT_EQ(net.params[0].cols(), 9u);
  EXPECT_EQ(patch_count(net.graph, net.graph.trainable_edges()[0]), 64u);
}

TEST(Json, RoundTrip) {
  Rng rng(2);
  NetworkGraph g = build_convnet({2, 6, 6}, {{3, 3, 1, 1, PoolStage{PoolOp::Avg, {}}}}, {5, 2}, rng).graph;
  std::optional<std::uint64_t> seed;
  const NetworkGraph back = graph_from_json(graph_to_json(g, 77), &seed);
  EXPECT_EQ(back, g);
  EXPECT_EQ(seed, 77u);

  NetworkGraph r = fc_chain({3, 3, 2});
  r.connections.push_back({0, 1, RearrangeKind{{2, 0, 1}}, false});
  const NetworkGraph rb = graph_from_json(graph_to_json(r));
  EXPECT_EQ(rb, r);
}

TEST(Json, RejectsMalformed) {
  EXPECT_THROW(graph_from_json("{"), Error);
  EXPECT_THROW(graph_from_json(R"({"version":1,"layers":[],"connections":[{"src":0,"dst":1,"kind":"bogus"}],"k_out":1})"),
               Error);
}
