#include <atomic>
#include <fstream>
#include <json.hpp>
#include <regex>
#include <sstream>
#include <thread>

#include "lowrank/harness.hpp"

namespace lowrank {

using nlohmann::json;

bool ExperimentResult::all_ok() const {
  return std::all_of(runs.begin(), runs.end(), [](const RunOutcome& r) { return r.ok; });
}

DatasetHandle load_dataset(const DatasetSpec& spec) {
  DatasetHandle d = std::visit(
      [&](const auto& sp) -> DatasetHandle {
        using T = std::decay_t<decltype(sp)>;
        if constexpr (std::is_same_v<T, SyntheticSpec>) {
          return gen_synthetic(sp.n, sp.m, sp.classes, sp.seed, spec.test_fraction);
        } else if constexpr (std::is_same_v<T, IdxSpec>) {
          return load_idx(sp.images, sp.labels, sp.subset, sp.seed, spec.test_fraction);
        } else {
          return load_csv_dataset(sp.path, sp.seed, spec.test_fraction);
        }
      },
      spec.source);
  if (d.size() == 0) throw Error(ErrorCode::BadShape, "dataset has no nonzero samples");
  if (spec.standardize) standardize(d);
  return d;
}

Network network_preset(const std::string& name, const Shape3& input, std::size_t k_out,
                       std::uint64_t init_seed) {
  static const std::regex mlp(R"((res)?mlp-(\d+)-(\d+))");
  static const std::regex cnn(R"(cnn-(\d+))");
  std::smatch m;
  Rng rng(init_seed);
  if (std::regex_match(name, m, mlp)) {
    const auto layers = std::stoul(m[2]);
    const auto width = std::stoul(m[3]);
    if (layers < 1 || width < 1) throw Error(ErrorCode::BadConfig, "preset '" + name + "' needs L, H >= 1");
    std::vector<std::size_t> widths{input.size()};
    widths.insert(widths.end(), layers, width);
    widths.push_back(k_out);
    return build_mlp(widths, m[1].matched, rng);
  }
  if (std::regex_match(name, m, cnn)) {
    const auto channels = std::stoul(m[1]);
    if (channels < 1) throw Error(ErrorCode::BadConfig, "preset '" + name + "' needs C >= 1");
    std::vector<ConvStage> stages;
    std::size_t h = input.h, w = input.w;
    while (stages.size() < 2 && h >= 4 && w >= 4) {
      stages.push_back({channels, 3, 1, 1, PoolStage{PoolOp::Max, {}}});
      h /= 2;
      w /= 2;
    }
    if (stages.empty()) stages.push_back({channels, std::min<std::size_t>({3, input.h, input.w}), 1, 0, {}});
    return build_convnet(input, stages, {k_out}, rng);
  }
  throw Error(ErrorCode::BadConfig, "unknown network preset '" + name + "'");
}

Network make_network(const NetworkSpec& spec, const Shape3& input, std::size_t k_out,
                     std::uint64_t init_seed) {
  if (spec.file.empty()) return network_preset(spec.preset, input, k_out, init_seed);
  std::ifstream f(spec.file);
  if (!f) throw Error(ErrorCode::Io, "cannot read network " + spec.file.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  std::optional<std::uint64_t> seed;
  Network net;
  net.graph = graph_from_json(ss.str(), &seed);
  require_valid(net.graph);
  if (net.graph.layers.front().size() != input.size()) {
    throw Error(ErrorCode::ShapeMismatch, "network input size differs from the data");
  }
  if (net.graph.k_out != k_out) throw Error(ErrorCode::ShapeMismatch, "network k_out differs from the data");
  Rng rng(seed.value_or(init_seed));
  net.params = Parameters::init_uniform(net.graph, rng);
  return net;
}

namespace {

std::string format_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

std::string run_name(const ExperimentConfig& cfg, std::size_t i) {
  if (cfg.sweep_values.empty()) return "run";
  return "r" + std::to_string(i) + "_" + to_string(cfg.sweep_axis) + "_" + format_value(cfg.sweep_values[i]);
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error(ErrorCode::Io, "cannot write " + p.string());
  f << text;
}

struct Prepared {
  DatasetHandle data;
  std::size_t k_out = 0;
  std::size_t edge_count = 0;
};

RunOutcome execute_run(const ExperimentConfig& cfg, const Prepared& prep, std::size_t index) {
  RunOutcome out;
  out.index = index;
  out.run_id = run_name(cfg, index);
  out.sweep_value = index < cfg.sweep_values.size() ? cfg.sweep_values[index] : 0.0;
  out.directory = cfg.output_dir / out.run_id;
  const SgdConfig sgd = cfg.run_config(index);
  out.seed = sgd.seed;
  const std::uint64_t init_seed = cfg.sgd.seed;

  json manifest = {{"run_id", out.run_id},
                   {"index", index},
                   {"code_version", kCodeVersion},
                   {"config_hash", config_hash(cfg)},
                   {"seed", sgd.seed},
                   {"init_seed", init_seed},
                   {"sweep_axis", to_string(cfg.sweep_axis)},
                   {"sweep_value", out.sweep_value},
                   {"config", config_toml(cfg)}};
  std::filesystem::create_directories(out.directory);
  try {
    Network net = make_network(cfg.network, prep.data.input_shape(), prep.k_out, init_seed);
    write_text(out.directory / "network.json", graph_to_json(net.graph, init_seed));
    DatasetHandle data = prep.data;
    const Shape3 in_shape = net.graph.layers.front();
    if (!(data.input_shape() == in_shape))
      for (auto& x : data.inputs) x = x.reshaped(in_shape);
    const auto train = to_samples(data, data.train_indices, prep.k_out);
    const auto test = to_samples(data, data.test_indices, prep.k_out);

    std::optional<UnrollRecorder> recorder;
    bool analysable = sgd.weight_decay > 0.0 && cfg.analysis.bound_report && sgd.epochs > 0;
    for (std::size_t e = 0; analysable && e < sgd.epochs; ++e)
      if (sgd.lr_at_epoch(e) * sgd.weight_decay >= 0.5) analysable = false;
    if (analysable) recorder.emplace(net.graph, sgd.weight_decay, sgd.batch_size, cfg.analysis.k_max);

    TrainingOptions opts;
    opts.rank_epsilon = cfg.analysis.epsilon;
    TrainingHooks hooks;
    std::vector<double> d_series;
    hooks.on_epoch = [&](const EpochMetrics& m, const Parameters&) {
      out.rows.push_back(metrics_row(out.run_id, m));
      d_series.push_back(m.d_metric);
    };
    TrainingResult res;
    try {
      res = run_training(net.graph, net.params, train, test, cfg.loss, sgd,
                         recorder ? &*recorder : nullptr, opts, hooks);
    } catch (...) {
      write_text(out.directory / "metrics.csv", metrics_csv(out.rows, prep.edge_count));
      throw;
    }
    write_text(out.directory / "metrics.csv", metrics_csv(out.rows, prep.edge_count));
    save_checkpoint(out.directory / "final.ckpt", {net.graph, sgd, res.steps, sgd.epochs, res.params});

    if (recorder && recorder->steps() > 1) {
      std::vector<std::size_t> ks;
      if (cfg.analysis.ks.empty()) {
        ks = recorder->thinned_ks();
      } else {
        for (std::size_t k : cfg.analysis.ks)
          if (k < recorder->steps()) ks.push_back(k);
      }
      BoundReport rep = theorem_bound_report(*recorder, ks, cfg.analysis.norm);
      const BoundReport gf = gradient_form_bound(net.graph, res.params, train, cfg.loss, sgd.weight_decay,
                                                 sgd.batch_size, cfg.analysis.batch_budget, sgd.seed,
                                                 cfg.analysis.norm);
      rep.gradient_form = gf.gradient_form;
      rep.batches_evaluated = gf.batches_evaluated;
      rep.exhaustive = gf.exhaustive;
      write_text(out.directory / "bound_report.json", to_json(rep));
      write_text(out.directory / "bound.csv", bound_csv(rep));
      out.bounds = std::move(rep);
    }
    if (cfg.analysis.noise_report) {
      NoiseReport noise;
      if (net.graph.k_out == 1) noise = degeneracy_check(net.graph, res.params, train, cfg.loss, sgd.weight_decay);
      noise.d_metric_series = d_series;
      write_text(out.directory / "noise_report.json", to_json(noise));
    }
    out.ok = true;
  } catch (const std::exception& e) {
    out.ok = false;
    out.error = e.what();
  }
  manifest["status"] = out.ok ? "ok" : "failed";
  manifest["error"] = out.error;
  manifest["epochs_completed"] = out.rows.size();
  write_text(out.directory / "manifest.json", manifest.dump(2));
  return out;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, std::size_t threads) {
  cfg.validate();
  Prepared prep;
  prep.data = load_dataset(cfg.dataset);
  prep.k_out = output_width(cfg.loss, std::max<std::size_t>(prep.data.classes, 2));
  prep.edge_count =
      make_network(cfg.network, prep.data.input_shape(), prep.k_out, cfg.sgd.seed).graph.trainable_edges().size();
  std::filesystem::create_directories(cfg.output_dir);

  const std::size_t n_runs = std::max<std::size_t>(cfg.sweep_values.size(), 1);
  ExperimentResult result;
  result.edge_count = prep.edge_count;
  result.runs.resize(n_runs);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n_runs; i = next++) result.runs[i] = execute_run(cfg, prep, i);
  };
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, n_runs);
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::vector<MetricsRow> all;
  json runs = json::array();
  for (const auto& r : result.runs) {
    all.insert(all.end(), r.rows.begin(), r.rows.end());
    runs.push_back({{"run_id", r.run_id},
                    {"sweep_value", r.sweep_value},
                    {"seed", r.seed},
                    {"status", r.ok ? "ok" : "failed"},
                    {"error", r.error},
                    {"directory", r.directory.filename().string()}});
  }
  result.metrics_path = cfg.output_dir / "metrics.csv";
  write_text(result.metrics_path, metrics_csv(all, prep.edge_count));
  const json manifest = {{"code_version", kCodeVersion},
                         {"config_hash", config_hash(cfg)},
                         {"seed", cfg.sgd.seed},
                         {"sweep_axis", to_string(cfg.sweep_axis)},
                         {"skipped_zero_samples", prep.data.skipped_zero},
                         {"runs", runs}};
  write_text(cfg.output_dir / "manifest.json", manifest.dump(2));

  PlotOptions po;
  po.title = "average effective rank";
  po.y_label = "rank";
  write_text(cfg.output_dir / "rank.svg", render_svg(series_from_metrics(all, "avg_rank"), po));
  std::vector<PlotSeries> acc;
  for (auto s : series_from_metrics(all, "train_acc")) {
    s.name += " train";
    acc.push_back(std::move(s));
  }
  for (auto s : series_from_metrics(all, "test_acc")) {
    s.name += " test";
    acc.push_back(std::move(s));
  }
  po.title = "accuracy";
  po.y_label = "accuracy";
  write_text(cfg.output_dir / "accuracy.svg", render_svg(acc, po));
  po.title = "d-metric";
  po.y_label = "d";
  po.log_y = true;
  write_text(cfg.output_dir / "d_metric.svg", render_svg(series_from_metrics(all, "d_metric"), po));
  return result;
}

}  // namespace lowrank
