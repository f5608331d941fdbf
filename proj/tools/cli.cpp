#include "lowrank/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <thread>

#include "lowrank/harness.hpp"

namespace lowrank {

namespace {

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadConfig:
    case ErrorCode::Io:
    case ErrorCode::BadMagic:
    case ErrorCode::TruncatedFile:
    case ErrorCode::CountMismatch:
    case ErrorCode::BadShape:
    case ErrorCode::BadParams:
    case ErrorCode::ShapeMismatch:
    case ErrorCode::GraphMismatch:
    case ErrorCode::MultiOutputUnsupported:
      return kExitUsage;
    default:
      return kExitAssertion;
  }
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error(ErrorCode::Io, "cannot write " + p.string());
  f << text;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error(ErrorCode::Io, "cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

ExperimentConfig config_or_default(const std::string& path) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load_config(path);
  apply_env_overrides(cfg);
  return cfg;
}

std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

struct Prepared {
  Network net;
  std::vector<Sample> train;
  SgdConfig sgd;
};

// Dataset, network and SGD settings of one run of an experiment config.
Prepared prepare_run(const ExperimentConfig& cfg, std::size_t run) {
  DatasetHandle data = load_dataset(cfg.dataset);
  const std::size_t k_out = output_width(cfg.loss, std::max<std::size_t>(data.classes, 2));
  Prepared p;
  p.net = make_network(cfg.network, data.input_shape(), k_out, cfg.sgd.seed);
  const Shape3 in = p.net.graph.layers.front();
  for (auto& x : data.inputs)
    if (!(x.shape() == in)) x = x.reshaped(in);
  p.train = to_samples(data, data.train_indices, k_out);
  p.sgd = cfg.run_config(run);
  return p;
}

int print_experiment(const ExperimentResult& res, std::ostream& out, std::ostream& err) {
  out << std::left << std::setw(32) << "run" << std::setw(8) << "status" << std::setw(12) << "avg_rank"
      << std::setw(12) << "train_acc" << "test_acc\n";
  for (const auto& r : res.runs) {
    out << std::setw(32) << r.run_id << std::setw(8) << (r.ok ? "ok" : "failed");
    if (!r.rows.empty()) {
      const auto& last = r.rows.back();
      out << std::setw(12) << last.avg_rank << std::setw(12) << last.train_acc << last.test_acc;
    }
    out << '\n';
    if (!r.ok) err << r.run_id << ": " << r.error << '\n';
  }
  out << "metrics: " << res.metrics_path.string() << '\n';
  return res.all_ok() ? kExitOk : kExitAssertion;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Low-rank bias of SGD: training and verification toolkit", "lowrank"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic Gaussian-cluster dataset as CSV");
  std::size_t gen_n = 16, gen_m = 200, gen_classes = 4;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--n", gen_n, "Input dimension")->capture_default_str();
  gen->add_option("--m", gen_m, "Sample count")->capture_default_str();
  gen->add_option("--classes", gen_classes, "Class count")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Seed")->capture_default_str();
  gen->add_option("--out", gen_out, "Output CSV (label,x0,x1,...)")->required();

  // train / sweep
  std::string cfg_path, out_dir;
  std::size_t threads = default_threads();
  auto* train = app.add_subcommand("train", "Train the base configuration of an experiment");
  train->add_option("--config", cfg_path, "Experiment TOML")->required();
  train->add_option("--out", out_dir, "Override output_dir");
  auto* sweep = app.add_subcommand("sweep", "Run every sweep value of an experiment");
  sweep->add_option("--config", cfg_path, "Experiment TOML")->required();
  sweep->add_option("--out", out_dir, "Override output_dir");
  sweep->add_option("--threads", threads, "Maximum concurrent runs")->check(CLI::PositiveNumber);
  train->add_option("--threads", threads, "Accepted for symmetry with sweep")->check(CLI::PositiveNumber);

  // verify-lemma
  auto* lemma = app.add_subcommand("verify-lemma", "Check rank(grad_W f) <= N on random networks");
  std::string lemma_net = "mlp-3-16";
  std::size_t lemma_seeds = 100, lemma_dim = 8, lemma_image = 8, lemma_channels = 1, lemma_outputs = 1,
              lemma_samples = 1;
  double lemma_tol = kLemmaRankTolerance;
  std::string lemma_json;
  lemma->add_option("--net", lemma_net, "mlp-L-H, resmlp-L-H or cnn-C")->capture_default_str();
  lemma->add_option("--seeds", lemma_seeds, "Number of random networks")->capture_default_str();
  lemma->add_option("--input-dim", lemma_dim, "MLP input dimension")->capture_default_str();
  lemma->add_option("--image", lemma_image, "CNN input height and width")->capture_default_str();
  lemma->add_option("--channels", lemma_channels, "CNN input channels")->capture_default_str();
  lemma->add_option("--outputs", lemma_outputs, "Output units k")->capture_default_str();
  lemma->add_option("--samples", lemma_samples, "Random inputs per network")->capture_default_str();
  lemma->add_option("--tol", lemma_tol, "Relative singular value tolerance")->capture_default_str();
  lemma->add_option("--json", lemma_json, "Write the per-edge report as JSON");

  // verify-bound
  auto* bound = app.add_subcommand("verify-bound", "Train and check the unrolled proximity bounds");
  std::size_t bound_run = 0, bound_every = 1;
  std::string bound_norm = "spectral", bound_out;
  bound->add_option("--config", cfg_path, "Experiment TOML (defaults apply without it)");
  bound->add_option("--run", bound_run, "Sweep value index")->capture_default_str();
  bound->add_option("--every", bound_every, "Check every N steps")->capture_default_str()->check(CLI::PositiveNumber);
  bound->add_option("--norm", bound_norm, "spectral or frobenius")
      ->capture_default_str()
      ->check(CLI::IsMember({"spectral", "frobenius"}));
  bound->add_option("--out", bound_out, "Directory for bound_report.json and bound.csv");

  // noise-diag
  auto* noise = app.add_subcommand("noise-diag", "Stationarity and degeneracy diagnostics");
  std::string noise_ckpt, noise_data, noise_loss = "mse", noise_out;
  double noise_lambda = -1.0;
  noise->add_option("--checkpoint", noise_ckpt, "Checkpoint file");
  noise->add_option("--data", noise_data, "Dataset CSV for --checkpoint");
  noise->add_option("--config", cfg_path, "Train this config first and diagnose the result");
  noise->add_option("--loss", noise_loss, "Loss for --checkpoint")->capture_default_str();
  noise->add_option("--lambda", noise_lambda, "Weight decay (default: from the checkpoint)");
  noise->add_option("--out", noise_out, "Write the JSON report here");

  // plot
  auto* plot = app.add_subcommand("plot", "Render a metrics CSV column as an SVG line plot");
  std::string plot_in, plot_out, plot_metric = "avg_rank", plot_title;
  bool plot_log = false;
  plot->add_option("--input", plot_in, "Metrics CSV")->required();
  plot->add_option("--out", plot_out, "SVG file")->required();
  plot->add_option("--metric", plot_metric, "Column to plot")->capture_default_str();
  plot->add_option("--title", plot_title, "Plot title");
  plot->add_flag("--log", plot_log, "Log-scale y axis");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return kExitOk;
    if (app.got_subcommand(train) || app.got_subcommand(sweep)) err << '\n' << config_schema();
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      const DatasetHandle d = gen_synthetic(gen_n, gen_m, gen_classes, gen_seed);
      write_file(gen_out, dataset_csv(d));
      out << "wrote " << d.size() << " samples (" << d.classes << " classes, dim " << gen_n << ") to "
          << gen_out << '\n';
      return kExitOk;
    }

    if (train->parsed() || sweep->parsed()) {
      ExperimentConfig cfg = config_or_default(cfg_path);
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      if (train->parsed()) cfg.sweep_values.clear();
      return print_experiment(run_experiment(cfg, threads), out, err);
    }

    if (lemma->parsed()) {
      struct Row {
        std::string label, kind;
        std::size_t n = 0, worst = 0, checks = 0, violations = 0;
      };
      std::vector<Row> rows;
      std::size_t checked = 0, skipped = 0;
      const bool is_cnn = lemma_net.rfind("cnn-", 0) == 0;
      const Shape3 shape = is_cnn ? Shape3{lemma_channels, lemma_image, lemma_image} : Shape3{lemma_dim, 1, 1};
      for (std::size_t s = 0; s < lemma_seeds; ++s) {
        const Network net = network_preset(lemma_net, shape, lemma_outputs, s);
        Rng rng = Rng(s).split(0x1e77a);
        std::vector<Tensor3> xs;
        for (std::size_t k = 0; k < lemma_samples; ++k) {
          Tensor3 x(shape);
          for (double& v : x.data()) v = rng.uniform(-1.0, 1.0);
          xs.push_back(std::move(x));
        }
        const auto rep = verify_gradient_rank(net.graph, net.params, xs, lemma_tol);
        checked += rep.samples_checked;
        skipped += rep.samples_skipped;
        const auto edges = net.graph.trainable_edges();
        if (rows.empty()) {
          for (std::size_t e = 0; e < edges.size(); ++e) {
            const auto& c = net.graph.connections[edges[e]];
            rows.push_back({std::to_string(c.src) + "->" + std::to_string(c.dst), kind_name(c.kind)});
          }
        }
        for (std::size_t e = 0; e < rep.edges.size(); ++e) {
          rows[e].n = rep.edges[e].patch_count;
          rows[e].worst = std::max(rows[e].worst, rep.edges[e].worst_rank);
          rows[e].checks += rep.edges[e].checks;
          rows[e].violations += rep.edges[e].violations;
        }
      }
      out << "network " << lemma_net << ", " << lemma_seeds << " seeds, " << checked << " samples checked, "
          << skipped << " skipped (degenerate)\n";
      out << std::left << std::setw(8) << "edge" << std::setw(10) << "src->dst" << std::setw(8) << "kind"
          << std::setw(8) << "N" << std::setw(10) << "max_rank" << std::setw(8) << "checks" << "violations\n";
      std::size_t violations = 0;
      std::ostringstream js;
      js << "{\"network\":\"" << lemma_net << "\",\"seeds\":" << lemma_seeds << ",\"samples_checked\":" << checked
         << ",\"samples_skipped\":" << skipped << ",\"edges\":[";
      for (std::size_t e = 0; e < rows.size(); ++e) {
        const auto& r = rows[e];
        out << std::setw(8) << e << std::setw(10) << r.label << std::setw(8) << r.kind << std::setw(8) << r.n
            << std::setw(10) << r.worst << std::setw(8) << r.checks << r.violations << '\n';
        violations += r.violations;
        js << (e ? "," : "") << "{\"edge\":" << e << ",\"patch_count\":" << r.n << ",\"max_rank\":" << r.worst
           << ",\"checks\":" << r.checks << ",\"violations\":" << r.violations << "}";
      }
      js << "]}\n";
      if (!lemma_json.empty()) write_file(lemma_json, js.str());
      out << (violations == 0 ? "all gradients within the rank budget\n" : "rank budget violated\n");
      return violations == 0 ? kExitOk : kExitAssertion;
    }

    if (bound->parsed()) {
      ExperimentConfig cfg = config_or_default(cfg_path);
      if (bound_run >= std::max<std::size_t>(cfg.sweep_values.size(), 1)) {
        throw Error(ErrorCode::BadConfig, "--run exceeds the number of sweep values");
      }
      const MatrixNorm norm = bound_norm == "spectral" ? MatrixNorm::Spectral : MatrixNorm::Frobenius;
      Prepared p = prepare_run(cfg, bound_run);
      if (p.sgd.weight_decay <= 0.0) throw Error(ErrorCode::BadConfig, "verify-bound needs weight_decay > 0");
      UnrollRecorder rec(p.net.graph, p.sgd.weight_decay, p.sgd.batch_size, cfg.analysis.k_max);
      std::size_t windows = 0, excluded = 0, violations = 0;
      double worst_slack = std::numeric_limits<double>::infinity();
      double worst_identity = 0.0;
      BoundReport last;
      TrainingHooks hooks;
      hooks.on_step = [&](std::size_t step, const Parameters& params, const UnrollRecorder*) {
        if (step % bound_every != 0) return;
        const auto ks = rec.thinned_ks();
        last = theorem_bound_report(rec, ks, norm);
        windows += last.windows.size();
        excluded += last.excluded_windows;
        for (const auto& w : last.windows) {
          worst_slack = std::min(worst_slack, w.slack);
          if (w.slack < -kBoundSlackTolerance) ++violations;
        }
        for (std::size_t e = 0; e < rec.edge_count(); ++e) {
          const double scale = std::max(1.0, frobenius_norm(params[e]));
          for (std::size_t k : ks) worst_identity = std::max(worst_identity, rec.identity_residual(e, k) / scale);
        }
      };
      TrainingOptions opts;
      opts.rank_epsilon = cfg.analysis.epsilon;
      opts.compute_accuracy = false;
      const TrainingResult res =
          run_training(p.net.graph, p.net.params, p.train, {}, cfg.loss, p.sgd, &rec, opts, hooks);
      const BoundReport gf = gradient_form_bound(p.net.graph, res.params, p.train, cfg.loss, p.sgd.weight_decay,
                                                 p.sgd.batch_size, cfg.analysis.batch_budget, p.sgd.seed, norm);
      last.gradient_form = gf.gradient_form;
      last.batches_evaluated = gf.batches_evaluated;
      last.exhaustive = gf.exhaustive;
      const bool identity_ok = worst_identity <= 1e-10;
      const bool ok = violations == 0 && identity_ok && last.ok();

      out << "steps " << res.steps << ", windows checked " << windows << ", excluded (lr change) " << excluded
          << '\n';
      out << "worst slack (" << to_string(norm) << ") " << worst_slack << ", violations " << violations << '\n';
      out << "worst relative unrolling residual " << worst_identity << '\n';
      out << "gradient-form bound over " << gf.batches_evaluated << (gf.exhaustive ? " (all)" : " (sampled)")
          << " batches:\n";
      out << std::left << std::setw(6) << "edge" << std::setw(8) << "N*B" << std::setw(14) << "implied"
          << std::setw(14) << "actual" << "holds\n";
      for (const auto& g : gf.gradient_form) {
        out << std::setw(6) << g.edge << std::setw(8) << g.rank_budget << std::setw(14) << g.implied_bound
            << std::setw(14) << g.actual << (g.holds ? "yes" : "no") << '\n';
      }
      if (!bound_out.empty()) {
        write_file(std::filesystem::path(bound_out) / "bound_report.json", to_json(last));
        write_file(std::filesystem::path(bound_out) / "bound.csv", bound_csv(last));
      }
      out << (ok ? "bounds hold\n" : "bound violated\n");
      return ok ? kExitOk : kExitAssertion;
    }

    if (noise->parsed()) {
      NetworkGraph g;
      Parameters params;
      std::vector<Sample> data;
      LossKind loss;
      double lambda;
      if (!cfg_path.empty()) {
        ExperimentConfig cfg = config_or_default(cfg_path);
        Prepared p = prepare_run(cfg, 0);
        TrainingOptions opts;
        opts.compute_accuracy = false;
        const auto res = run_training(p.net.graph, p.net.params, p.train, {}, cfg.loss, p.sgd, nullptr, opts);
        g = p.net.graph;
        params = res.params;
        data = p.train;
        loss = cfg.loss;
        lambda = noise_lambda >= 0.0 ? noise_lambda : p.sgd.weight_decay;
      } else {
        if (noise_ckpt.empty() || noise_data.empty()) {
          err << "noise-diag needs --config, or --checkpoint with --data\n";
          return kExitUsage;
        }
        const Checkpoint ck = load_checkpoint(noise_ckpt);
        g = ck.graph;
        params = ck.params;
        loss = loss_from_string(noise_loss);
        lambda = noise_lambda >= 0.0 ? noise_lambda : ck.config.weight_decay;
        DatasetHandle d = load_csv_dataset(noise_data, 0, 0.0);
        const Shape3 in = g.layers.front();
        for (auto& x : d.inputs)
          if (!(x.shape() == in)) x = x.reshaped(in);
        data = to_samples(d, d.train_indices, g.k_out);
      }
      const NoiseReport rep = degeneracy_check(g, params, data, loss, lambda);
      const std::string json = to_json(rep);
      if (!noise_out.empty()) write_file(noise_out, json);
      out << "samples " << data.size() << ", lambda " << lambda << '\n';
      out << "min stationarity residual " << rep.min_residual << '\n';
      out << "max |f(x)| " << rep.max_abs_output << (rep.zero_function ? " (zero function)" : "") << '\n';
      out << "scaled-gradient collinearity " << rep.scaled_gradients.score
          << (rep.scaled_gradients.collinear ? " (collinear)" : "") << '\n';
      out << "input pair sigma_min " << rep.input_collinearity.sigma_min << ", patch pair sigma_min "
          << rep.patch_dependence.sigma_min << '\n';
      if (noise_out.empty()) out << json << '\n';
      return kExitOk;
    }

    if (plot->parsed()) {
      const auto rows = parse_metrics_csv(read_file(plot_in));
      PlotOptions po;
      po.title = plot_title.empty() ? plot_metric : plot_title;
      po.y_label = plot_metric;
      po.log_y = plot_log;
      const auto series = series_from_metrics(rows, plot_metric);
      write_file(plot_out, render_svg(series, po));
      out << "wrote " << series.size() << " series, " << rows.size() << " points to " << plot_out << '\n';
      return kExitOk;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    if (e.code() == ErrorCode::BadConfig && (train->parsed() || sweep->parsed())) err << '\n' << config_schema();
    return exit_code_for(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error [Io]: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace lowrank
