#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>

#include "lowrank/harness.hpp"
#include "test_util.hpp"

using namespace lowrank;
using lowrank::testing::scratch_dir;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::Io;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

const char* kSmallConfig = R"(
output_dir = "out"
loss = "ce"
[network]
preset = "mlp-1-8"
[dataset]
kind = "synthetic"
n = 6
m = 40
classes = 3
seed = 2
[sgd]
lr = 0.05
weight_decay = 0.001
batch_size = 4
epochs = 3
seed = 11
[analysis]
k_max = 8
)";

}  // namespace

TEST(Synthetic, BalancedDeterministicAndSeparated) {
  const auto d = gen_synthetic(8, 100, 4, 7);
  EXPECT_EQ(d.size(), 100u);
  EXPECT_EQ(d.classes, 4u);
  EXPECT_EQ(d.input_shape(), (Shape3{8, 1, 1}));
  std::map<std::size_t, int> counts;
  for (auto l : d.labels) ++counts[l];
  for (auto [l, c] : counts) EXPECT_EQ(c, 25);
  EXPECT_EQ(d.test_indices.size(), 20u);
  EXPECT_EQ(d.train_indices.size(), 80u);
  std::map<std::size_t, int> test_counts;
  for (auto i : d.test_indices) ++test_counts[d.labels[i]];
  for (auto [l, c] : test_counts) EXPECT_EQ(c, 5);

  const auto again = gen_synthetic(8, 100, 4, 7);
  EXPECT_EQ(again.inputs, d.inputs);
  EXPECT_EQ(again.test_indices, d.test_indices);
  EXPECT_NE(gen_synthetic(8, 100, 4, 8).inputs, d.inputs);

  const auto means = synthetic_means(8, 4, 7);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b) EXPECT_NEAR(distance(means[a], means[b]), 2.0, 1e-12);
}

TEST(Synthetic, SampleSpreadMatchesStddev) {
  const auto d = gen_synthetic(4, 4000, 2, 1);
  const auto means = synthetic_means(4, 2, 1);
  double s2 = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      const double r = d.inputs[i][k] - means[d.labels[i]][k];
      s2 += r * r;
    }
  EXPECT_NEAR(std::sqrt(s2 / (4.0 * 4000)), kSyntheticStddev, 0.01);
}

TEST(Synthetic, BadShapes) {
  EXPECT_EQ(code_of([] { gen_synthetic(4, 10, 1, 0); }), ErrorCode::BadShape);
  EXPECT_EQ(code_of([] { gen_synthetic(2, 10, 3, 0); }), ErrorCode::BadShape);
  EXPECT_EQ(code_of([] { gen_synthetic(4, 2, 3, 0); }), ErrorCode::BadShape);
}

TEST(Idx, FixtureBytesDecodeToScaledPixels) {
  const std::vector<std::vector<std::uint8_t>> imgs{{0, 255, 51, 102}, {0, 0, 0, 0}, {1, 2, 3, 4}};
  const std::vector<std::uint8_t> labels{3, 1, 7};
  const std::string ib = idx_images_bytes(imgs, 2, 2);
  const std::string lb = idx_labels_bytes(labels);
  ASSERT_EQ(ib.size(), 16u + 12u);
  EXPECT_EQ(static_cast<unsigned char>(ib[3]), 0x03);
  EXPECT_EQ(static_cast<unsigned char>(ib[2]), 0x08);
  EXPECT_EQ(static_cast<unsigned char>(lb[3]), 0x01);

  const auto d = idx_from_bytes(ib, lb, 0, 0, 0.0);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.skipped_zero, 1u);
  EXPECT_EQ(d.input_shape(), (Shape3{1, 2, 2}));
  EXPECT_EQ(d.inputs[0].data(), (std::vector<double>{0, 1, 0.2, 0.4}));
  EXPECT_EQ(d.inputs[1][3], 4.0 / 255.0);
  EXPECT_EQ(d.labels, (std::vector<std::size_t>{3, 7}));

  const auto dir = scratch_dir("idx");
  write(dir / "img.idx", ib);
  write(dir / "lbl.idx", lb);
  EXPECT_EQ(load_idx(dir / "img.idx", dir / "lbl.idx", 0, 0, 0.0).inputs, d.inputs);
  EXPECT_EQ(code_of([&] { load_idx(dir / "missing", dir / "lbl.idx"); }), ErrorCode::Io);
}

TEST(Idx, Errors) {
  const std::vector<std::vector<std::uint8_t>> imgs{{1, 2, 3, 4}, {5, 6, 7, 8}};
  const std::string ib = idx_images_bytes(imgs, 2, 2);
  const std::string lb = idx_labels_bytes({1, 2});
  EXPECT_EQ(code_of([&] { idx_from_bytes(ib, idx_labels_bytes({1})); }), ErrorCode::CountMismatch);
  EXPECT_EQ(code_of([&] { idx_from_bytes(lb, lb); }), ErrorCode::BadMagic);
  EXPECT_EQ(code_of([&] { idx_from_bytes(ib, ib); }), ErrorCode::BadMagic);
  EXPECT_EQ(code_of([&] { idx_from_bytes(ib.substr(0, ib.size() - 1), lb); }), ErrorCode::TruncatedFile);
  EXPECT_EQ(code_of([&] { idx_from_bytes(ib.substr(0, 10), lb); }), ErrorCode::TruncatedFile);
  EXPECT_EQ(code_of([&] { idx_from_bytes(ib, lb.substr(0, 9)); }), ErrorCode::TruncatedFile);
}

TEST(Idx, SubsetIsSeeded) {
  std::vector<std::vector<std::uint8_t>> imgs;
  std::vector<std::uint8_t> labels;
  for (int i = 0; i < 30; ++i) {
    imgs.push_back({static_cast<std::uint8_t>(i + 1)});
    labels.push_back(static_cast<std::uint8_t>(i % 3));
  }
  const auto ib = idx_images_bytes(imgs, 1, 1), lb = idx_labels_bytes(labels);
  const auto a = idx_from_bytes(ib, lb, 10, 4);
  EXPECT_EQ(a.size(), 10u);
  EXPECT_EQ(idx_from_bytes(ib, lb, 10, 4).inputs, a.inputs);
  EXPECT_NE(idx_from_bytes(ib, lb, 10, 5).inputs, a.inputs);
}

TEST(Csv, RoundTripAndErrors) {
  const auto d = gen_synthetic(3, 12, 3, 1);
  const auto back = csv_dataset_from_text(dataset_csv(d), 1);
  EXPECT_EQ(back.labels, d.labels);
  ASSERT_EQ(back.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(back.inputs[i].data(), d.inputs[i].data());
  EXPECT_EQ(back.test_indices, d.test_indices);

  const auto plain = csv_dataset_from_text("0,1,2\n1,0,0\n1,3,4\n", 0, 0.0);
  EXPECT_EQ(plain.size(), 2u);
  EXPECT_EQ(plain.skipped_zero, 1u);
  EXPECT_EQ(code_of([] { csv_dataset_from_text("0,1,2\n1,3\n"); }), ErrorCode::BadShape);
  EXPECT_EQ(code_of([] { csv_dataset_from_text("0.5,1,2\n"); }), ErrorCode::BadShape);
  EXPECT_EQ(code_of([] { csv_dataset_from_text("0,1,abc\n"); }), ErrorCode::BadShape);
  EXPECT_EQ(code_of([] { load_csv_dataset("/nonexistent.csv"); }), ErrorCode::Io);
}

TEST(Standardize, UsesTrainStatistics) {
  auto d = csv_dataset_from_text("label,a,b\n0,1,5\n0,3,5\n1,5,5\n1,7,5\n", 0, 0.5);
  ASSERT_EQ(d.train_indices.size(), 2u);
  std::vector<double> col;
  for (auto i : d.train_indices) col.push_back(d.inputs[i][0]);
  const double mean = (col[0] + col[1]) / 2, sd = std::abs(col[0] - col[1]) / 2;
  const auto raw = d.inputs;
  standardize(d);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_NEAR(d.inputs[i][0], (raw[i][0] - mean) / sd, 1e-15);
    EXPECT_EQ(d.inputs[i][1], 0.0);
  }
}

TEST(Samples, TargetsFollowOutputWidth) {
  const auto d = gen_synthetic(3, 6, 3, 0, 0.0);
  const std::vector<std::size_t> idx{0, 1, 2};
  const auto onehot = to_samples(d, idx, 3);
  EXPECT_EQ(onehot[1].y, (std::vector<double>{0, 1, 0}));
  EXPECT_EQ(output_width(LossKind::Logistic, 2), 1u);
  EXPECT_EQ(output_width(LossKind::MSE, 4), 4u);
  const auto d2 = gen_synthetic(2, 4, 2, 0, 0.0);
  EXPECT_EQ(to_samples(d2, idx, 1)[1].y, (std::vector<double>{1}));
  EXPECT_THROW(to_samples(d, idx, 2), Error);
}

TEST(Config, ParsesAllSections) {
  const auto cfg = parse_config(R"(
output_dir = "o"
loss = "mse"
[network]
preset = "resmlp-2-4"
[dataset]
kind = "csv"
path = "d.csv"
seed = 3
standardize = true
test_fraction = 0.25
[sgd]
lr = 0.5
weight_decay = 1e-3
batch_size = 8
epochs = 12
seed = 5
sampling = "uniform"
schedule = [[4, 0.5], [8, 0.1]]
[sweep]
axis = "weight_decay"
values = [0, 1e-4, 1e-3]
[analysis]
epsilon = 1e-4
ks = [1, 2, 4]
k_max = 16
batch_budget = 200
norm = "spectral"
bound_report = false
noise_report = false
)");
  EXPECT_EQ(cfg.output_dir, "o");
  EXPECT_EQ(cfg.loss, LossKind::MSE);
  EXPECT_EQ(cfg.network.preset, "resmlp-2-4");
  ASSERT_TRUE(std::holds_alternative<CsvSpec>(cfg.dataset.source));
  EXPECT_EQ(std::get<CsvSpec>(cfg.dataset.source).path, "d.csv");
  EXPECT_TRUE(cfg.dataset.standardize);
  EXPECT_EQ(cfg.dataset.test_fraction, 0.25);
  EXPECT_EQ(cfg.sgd.lr, 0.5);
  EXPECT_EQ(cfg.sgd.batch_size, 8u);
  EXPECT_EQ(cfg.sgd.sampling, SamplingMode::UniformWithReplacement);
  ASSERT_EQ(cfg.sgd.schedule.size(), 2u);
  EXPECT_EQ(cfg.sgd.schedule[1].epoch, 8u);
  EXPECT_EQ(cfg.sweep_axis, SweepAxis::WeightDecay);
  EXPECT_EQ(cfg.sweep_values.size(), 3u);
  EXPECT_EQ(cfg.analysis.ks, (std::vector<std::size_t>{1, 2, 4}));
  EXPECT_EQ(cfg.analysis.norm, MatrixNorm::Spectral);
  EXPECT_FALSE(cfg.analysis.bound_report);
  EXPECT_EQ(cfg.run_config(2).weight_decay, 1e-3);
  EXPECT_EQ(cfg.run_config(2).seed, 5u ^ 2u);

  const auto canon = config_toml(cfg);
  const auto re = parse_config(canon);
  EXPECT_EQ(config_toml(re), canon);
  EXPECT_EQ(config_hash(re), config_hash(cfg));
  EXPECT_EQ(config_hash(cfg).size(), 16u);
}

TEST(Config, ErrorsNameTheKey) {
  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::BadConfig);
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message("[sgd]\nlearning = 1\n").find("sgd.learning"), std::string::npos);
  EXPECT_NE(message("[sgd]\nlr = \"fast\"\n").find("sgd.lr"), std::string::npos);
  EXPECT_NE(message("[sgd]\nbatch_size = -3\n").find("sgd.batch_size"), std::string::npos);
  EXPECT_NE(message("bogus = 1\n").find("bogus"), std::string::npos);
  EXPECT_NE(message("loss = \"hinge\"\n").find("loss"), std::string::npos);
  EXPECT_NE(message("[sweep]\naxis = \"lr\"\n").find("sweep"), std::string::npos);
  EXPECT_NE(message("[dataset]\nkind = \"tape\"\n").find("dataset"), std::string::npos);
  EXPECT_NE(message("x = [").find("line"), std::string::npos);

  ExperimentConfig cfg;
  cfg.sweep_values = {2.5};
  EXPECT_THROW(cfg.validate(), Error);
  cfg.sweep_values = {};
  cfg.analysis.ks = {100};
  EXPECT_THROW(cfg.validate(), Error);
  EXPECT_FALSE(config_schema().empty());
}

TEST(Config, LoadResolvesRelativePaths) {
  const auto dir = scratch_dir("cfg_load");
  write(dir / "c.toml", "[dataset]\nkind = \"csv\"\npath = \"data.csv\"\n");
  const auto cfg = load_config(dir / "c.toml");
  EXPECT_EQ(std::get<CsvSpec>(cfg.dataset.source).path, dir / "data.csv");
  EXPECT_EQ(code_of([&] { load_config(dir / "none.toml"); }), ErrorCode::Io);
}

TEST(Config, SeedEnvironmentOverride) {
  ExperimentConfig cfg;
  cfg.sgd.seed = 1;
  ::setenv("LOWRANK_SEED", "424242", 1);
  apply_env_overrides(cfg);
  EXPECT_EQ(cfg.sgd.seed, 424242u);
  ::setenv("LOWRANK_SEED", "12abc", 1);
  EXPECT_EQ(code_of([&] { apply_env_overrides(cfg); }), ErrorCode::BadConfig);
  ::setenv("LOWRANK_SEED", "-4", 1);
  EXPECT_EQ(code_of([&] { apply_env_overrides(cfg); }), ErrorCode::BadConfig);
  ::unsetenv("LOWRANK_SEED");
  apply_env_overrides(cfg);
  EXPECT_EQ(cfg.sgd.seed, 424242u);
}

TEST(Presets, Shapes) {
  const auto mlp = network_preset("mlp-3-16", {5, 1, 1}, 2, 0);
  EXPECT_EQ(mlp.graph.layers.size(), 5u);
  EXPECT_EQ(mlp.graph.layers[2], (Shape3{16, 1, 1}));
  const auto res = network_preset("resmlp-3-16", {5, 1, 1}, 2, 0);
  EXPECT_GT(res.graph.connections.size(), mlp.graph.connections.size());
  const auto cnn = network_preset("cnn-4", {1, 8, 8}, 10, 0);
  EXPECT_EQ(cnn.graph.k_out, 10u);
  EXPECT_EQ(cnn.graph.layers[1], (Shape3{4, 8, 8}));
  EXPECT_EQ(code_of([] { network_preset("transformer", {1, 1, 1}, 1, 0); }), ErrorCode::BadConfig);
  EXPECT_EQ(network_preset("mlp-2-4", {3, 1, 1}, 1, 9).params, network_preset("mlp-2-4", {3, 1, 1}, 1, 9).params);
}

TEST(Metrics, CsvRoundTripAndHeader) {
  EXPECT_EQ(metrics_header(2), "run_id,epoch,train_loss,train_acc,test_acc,avg_rank,d_metric,rank_edge_0,rank_edge_1");
  const std::vector<MetricsRow> rows{{"a", 1, 0.1, 0.5, 0.25, 1.5, 1e-3, {1, 2}},
                                     {"a", 2, 1.0 / 3.0, 0.75, 0.5, 2.0, 2e-17, {2, 2}},
                                     {"b", 1, 0.2, 0.5, 0.5, 1.0, 0.3, {1, 1}}};
  const auto csv = metrics_csv(rows, 2);
  const auto back = parse_metrics_csv(csv);
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[1].train_loss, 1.0 / 3.0);
  EXPECT_EQ(back[1].d_metric, 2e-17);
  EXPECT_EQ(back[2].edge_ranks, (std::vector<std::size_t>{1, 1}));
  EXPECT_EQ(metrics_csv(back, 2), csv);
  EXPECT_THROW(parse_metrics_csv("run,epoch\n"), Error);
  EXPECT_THROW(parse_metrics_csv(metrics_header(0) + "\na,1,2\n"), Error);
  EXPECT_THROW(metrics_csv(rows, 3), Error);
  EXPECT_EQ(metrics_csv({}, 1), metrics_header(1) + "\n");
}

TEST(Plot, OnePolylinePerSeries) {
  const std::vector<MetricsRow> rows{{"a", 1, 0, 0, 0, 3, 1e-2, {}}, {"a", 2, 0, 0, 0, 2, 1e-3, {}},
                                     {"b", 1, 0, 0, 0, 3, 0.0, {}}, {"b", 2, 0, 0, 0, 1, 1e-4, {}}};
  const auto series = series_from_metrics(rows, "avg_rank");
  ASSERT_EQ(series.size(), 2u);
  EXPECT_EQ(series[1].y, (std::vector<double>{3, 1}));
  PlotOptions opt;
  opt.title = "rank <&>";
  const auto svg = render_svg(series, opt);
  EXPECT_EQ(svg.rfind("<?xml", 0), 0u);
  std::size_t count = 0;
  for (std::size_t p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++count;
  EXPECT_EQ(count, 2u);
  EXPECT_NE(svg.find("rank &lt;&amp;&gt;"), std::string::npos);
  opt.log_y = true;
  EXPECT_NO_THROW(render_svg(series_from_metrics(rows, "d_metric"), opt));
  EXPECT_THROW(series_from_metrics(rows, "nope"), Error);
  EXPECT_NO_THROW(render_svg({}, opt));
}

TEST(Experiment, SmallRunWritesArtifacts) {
  auto cfg = parse_config(kSmallConfig);
  cfg.output_dir = scratch_dir("experiment") / "out";
  const auto res = run_experiment(cfg, 1);
  ASSERT_TRUE(res.all_ok()) << res.runs[0].error;
  ASSERT_EQ(res.runs.size(), 1u);
  const auto run_dir = res.runs[0].directory;
  for (const char* f : {"network.json", "metrics.csv", "final.ckpt", "bound_report.json", "bound.csv",
                        "noise_report.json", "manifest.json"})
    EXPECT_TRUE(std::filesystem::exists(run_dir / f)) << f;
  for (const char* f : {"metrics.csv", "manifest.json", "rank.svg", "accuracy.svg", "d_metric.svg"})
    EXPECT_TRUE(std::filesystem::exists(cfg.output_dir / f)) << f;

  const auto rows = parse_metrics_csv(slurp(res.metrics_path));
  EXPECT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].edge_ranks.size(), 2u);
  const auto manifest = nlohmann::json::parse(slurp(run_dir / "manifest.json"));
  EXPECT_EQ(manifest["status"], "ok");
  EXPECT_EQ(manifest["config_hash"], config_hash(cfg));
  EXPECT_EQ(manifest["seed"], 11);
  const auto ck = load_checkpoint(run_dir / "final.ckpt");
  EXPECT_EQ(ck.epoch, 3u);

  // Same config, same numbers.
  auto cfg2 = cfg;
  cfg2.output_dir = scratch_dir("experiment2") / "out";
  const auto res2 = run_experiment(cfg2, 1);
  EXPECT_EQ(slurp(res2.metrics_path), slurp(res.metrics_path));
}

TEST(Experiment, SweepRunsInParallelAndZeroEpochs) {
  auto cfg = parse_config(kSmallConfig);
  cfg.output_dir = scratch_dir("sweep") / "out";
  cfg.sweep_axis = SweepAxis::BatchSize;
  cfg.sweep_values = {2, 4, 8};
  const auto res = run_experiment(cfg, 3);
  ASSERT_TRUE(res.all_ok());
  EXPECT_EQ(res.runs[2].run_id, "r2_batch_size_8");
  EXPECT_EQ(parse_metrics_csv(slurp(res.metrics_path)).size(), 9u);
  const auto single = [&] {
    auto c = cfg;
    c.sweep_values = {8};
    c.output_dir = scratch_dir("sweep_single") / "out";
    return run_experiment(c, 1);
  }();
  // Run 0 of the single sweep uses seed ^ 0, run 2 of the triple seed ^ 2.
  EXPECT_NE(single.runs[0].rows[2].train_loss, res.runs[2].rows[2].train_loss);

  cfg.sweep_values.clear();
  cfg.sgd.epochs = 0;
  cfg.output_dir = scratch_dir("zero") / "out";
  const auto zero = run_experiment(cfg, 1);
  EXPECT_TRUE(zero.all_ok());
  EXPECT_EQ(slurp(zero.metrics_path), metrics_header(2) + "\n");
}

TEST(Experiment, FailedRunIsRecorded) {
  auto cfg = parse_config(kSmallConfig);
  cfg.output_dir = scratch_dir("failed") / "out";
  cfg.sweep_axis = SweepAxis::LearningRate;
  cfg.sweep_values = {0.05, 1e9};
  cfg.sgd.epochs = 30;
  const auto res = run_experiment(cfg, 2);
  EXPECT_FALSE(res.all_ok());
  EXPECT_TRUE(res.runs[0].ok);
  EXPECT_FALSE(res.runs[1].ok);
  const auto manifest = nlohmann::json::parse(slurp(res.runs[1].directory / "manifest.json"));
  EXPECT_EQ(manifest["status"], "failed");
  EXPECT_NE(manifest["error"].get<std::string>().find("NonFiniteLoss"), std::string::npos);
}
