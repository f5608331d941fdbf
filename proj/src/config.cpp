#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <toml.hpp>

#include "lowrank/harness.hpp"

namespace lowrank {

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::BatchSize: return "batch_size";
    case SweepAxis::WeightDecay: return "weight_decay";
    case SweepAxis::LearningRate: return "lr";
  }
  return "?";
}

SweepAxis sweep_axis_from_string(const std::string& name) {
  if (name == "batch_size") return SweepAxis::BatchSize;
  if (name == "weight_decay" || name == "lambda") return SweepAxis::WeightDecay;
  if (name == "lr" || name == "learning_rate") return SweepAxis::LearningRate;
  throw Error(ErrorCode::BadConfig, "unknown sweep axis '" + name + "'");
}

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& what) {
  throw Error(ErrorCode::BadConfig, key + ": " + what);
}

void check_keys(const toml::table& t, const std::string& where, std::set<std::string> allowed) {
  for (const auto& [k, v] : t) {
    const std::string key(k.str());
    if (!allowed.count(key)) bad(where.empty() ? key : where + "." + key, "unknown key");
  }
}

const toml::table* sub_table(const toml::table& root, const char* name) {
  const toml::node* n = root.get(name);
  if (!n) return nullptr;
  if (!n->is_table()) bad(name, "expected a table");
  return n->as_table();
}

template <typename T>
void read(const toml::table& t, const std::string& where, const char* key, T& out) {
  const toml::node* n = t.get(key);
  if (!n) return;
  const std::string full = where + "." + key;
  if constexpr (std::is_same_v<T, bool>) {
    auto v = n->value<bool>();
    if (!v) bad(full, "expected a boolean");
    out = *v;
  } else if constexpr (std::is_same_v<T, std::string>) {
    auto v = n->value<std::string>();
    if (!v) bad(full, "expected a string");
    out = *v;
  } else if constexpr (std::is_floating_point_v<T>) {
    auto v = n->value<double>();
    if (!v) bad(full, "expected a number");
    out = *v;
  } else {
    auto v = n->value<std::int64_t>();
    if (!v || *v < 0) bad(full, "expected a non-negative integer");
    out = static_cast<T>(*v);
  }
}

const toml::array& array_at(const toml::table& t, const std::string& full, const char* key) {
  const toml::node* n = t.get(key);
  if (!n->is_array()) bad(full, "expected an array");
  return *n->as_array();
}

}  // namespace

ExperimentConfig parse_config(const std::string& toml_text) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "TOML parse error at line " << e.source().begin.line << ": " << e.description();
    throw Error(ErrorCode::BadConfig, os.str());
  }
  check_keys(root, "", {"output_dir", "loss", "network", "dataset", "sgd", "sweep", "analysis"});
  ExperimentConfig cfg;
  cfg.source_text = toml_text;
  std::string s;
  if (root.get("output_dir")) {
    read(root, "", "output_dir", s);
    cfg.output_dir = s;
  }
  if (root.get("loss")) {
    read(root, "", "loss", s);
    try {
      cfg.loss = loss_from_string(s);
    } catch (const Error& e) {
      bad("loss", e.what());
    }
  }

  if (const auto* t = sub_table(root, "network")) {
    check_keys(*t, "network", {"preset", "file"});
    read(*t, "network", "preset", cfg.network.preset);
    if (t->get("file")) {
      read(*t, "network", "file", s);
      cfg.network.file = s;
      cfg.network.preset.clear();
    }
  }

  if (const auto* t = sub_table(root, "dataset")) {
    check_keys(*t, "dataset", {"kind", "n", "m", "classes", "seed", "images", "labels", "subset",
                               "path", "standardize", "test_fraction"});
    std::string kind = "synthetic";
    read(*t, "dataset", "kind", kind);
    std::uint64_t seed = 0;
    read(*t, "dataset", "seed", seed);
    if (kind == "synthetic") {
      SyntheticSpec sp;
      read(*t, "dataset", "n", sp.n);
      read(*t, "dataset", "m", sp.m);
      read(*t, "dataset", "classes", sp.classes);
      sp.seed = seed;
      cfg.dataset.source = sp;
    } else if (kind == "idx") {
      IdxSpec sp;
      read(*t, "dataset", "images", s);
      sp.images = s;
      s.clear();
      read(*t, "dataset", "labels", s);
      sp.labels = s;
      read(*t, "dataset", "subset", sp.subset);
      sp.seed = seed;
      if (sp.images.empty() || sp.labels.empty()) bad("dataset", "idx needs images and labels");
      cfg.dataset.source = sp;
    } else if (kind == "csv") {
      CsvSpec sp;
      read(*t, "dataset", "path", s);
      sp.path = s;
      sp.seed = seed;
      if (sp.path.empty()) bad("dataset.path", "csv needs a path");
      cfg.dataset.source = sp;
    } else {
      bad("dataset.kind", "expected synthetic, idx or csv");
    }
    read(*t, "dataset", "standardize", cfg.dataset.standardize);
    read(*t, "dataset", "test_fraction", cfg.dataset.test_fraction);
  }

  if (const auto* t = sub_table(root, "sgd")) {
    check_keys(*t, "sgd", {"lr", "weight_decay", "batch_size", "epochs", "seed", "sampling",
                           "step_schedule", "schedule"});
    read(*t, "sgd", "lr", cfg.sgd.lr);
    read(*t, "sgd", "weight_decay", cfg.sgd.weight_decay);
    read(*t, "sgd", "batch_size", cfg.sgd.batch_size);
    read(*t, "sgd", "epochs", cfg.sgd.epochs);
    read(*t, "sgd", "seed", cfg.sgd.seed);
    read(*t, "sgd", "step_schedule", cfg.step_schedule);
    if (t->get("sampling")) {
      read(*t, "sgd", "sampling", s);
      try {
        cfg.sgd.sampling = sampling_from_string(s);
      } catch (const Error& e) {
        bad("sgd.sampling", e.what());
      }
    }
    if (t->get("schedule")) {
      for (const auto& el : array_at(*t, "sgd.schedule", "schedule")) {
        const auto* pair = el.as_array();
        if (!pair || pair->size() != 2) bad("sgd.schedule", "entries must be [epoch, multiplier]");
        auto e = (*pair)[0].value<std::int64_t>();
        auto mlt = (*pair)[1].value<double>();
        if (!e || *e < 0 || !mlt) bad("sgd.schedule", "entries must be [epoch, multiplier]");
        cfg.sgd.schedule.push_back({static_cast<std::size_t>(*e), *mlt});
      }
    }
  }

  if (const auto* t = sub_table(root, "sweep")) {
    check_keys(*t, "sweep", {"axis", "values"});
    if (!t->get("axis") || !t->get("values")) bad("sweep", "needs both axis and values");
    read(*t, "sweep", "axis", s);
    try {
      cfg.sweep_axis = sweep_axis_from_string(s);
    } catch (const Error& e) {
      bad("sweep.axis", e.what());
    }
    for (const auto& el : array_at(*t, "sweep.values", "values")) {
      auto v = el.value<double>();
      if (!v) bad("sweep.values", "expected numbers");
      cfg.sweep_values.push_back(*v);
    }
  }

  if (const auto* t = sub_table(root, "analysis")) {
    check_keys(*t, "analysis", {"epsilon", "ks", "k_max", "batch_budget", "norm", "bound_report",
                                "noise_report"});
    read(*t, "analysis", "epsilon", cfg.analysis.epsilon);
    read(*t, "analysis", "k_max", cfg.analysis.k_max);
    read(*t, "analysis", "batch_budget", cfg.analysis.batch_budget);
    read(*t, "analysis", "bound_report", cfg.analysis.bound_report);
    read(*t, "analysis", "noise_report", cfg.analysis.noise_report);
    if (t->get("norm")) {
      read(*t, "analysis", "norm", s);
      if (s == "spectral") cfg.analysis.norm = MatrixNorm::Spectral;
      else if (s == "frobenius") cfg.analysis.norm = MatrixNorm::Frobenius;
      else bad("analysis.norm", "expected spectral or frobenius");
    }
    if (t->get("ks")) {
      for (const auto& el : array_at(*t, "analysis.ks", "ks")) {
        auto v = el.value<std::int64_t>();
        if (!v || *v < 1) bad("analysis.ks", "expected positive integers");
        cfg.analysis.ks.push_back(static_cast<std::size_t>(*v));
      }
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::Io, "cannot read config " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  ExperimentConfig cfg = parse_config(ss.str());
  // Input paths are relative to the config file.
  const auto base = path.parent_path();
  auto resolve = [&](std::filesystem::path& p) {
    if (!p.empty() && p.is_relative()) p = base / p;
  };
  resolve(cfg.network.file);
  if (auto* sp = std::get_if<IdxSpec>(&cfg.dataset.source)) {
    resolve(sp->images);
    resolve(sp->labels);
  } else if (auto* cp = std::get_if<CsvSpec>(&cfg.dataset.source)) {
    resolve(cp->path);
  }
  return cfg;
}

void apply_env_overrides(ExperimentConfig& cfg) {
  const char* env = std::getenv("LOWRANK_SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (errno != 0 || *end != '\0' || env[0] == '-') {
    throw Error(ErrorCode::BadConfig, std::string("LOWRANK_SEED is not an unsigned integer: ") + env);
  }
  cfg.sgd.seed = v;
}

void ExperimentConfig::validate() const {
  if (network.preset.empty() && network.file.empty()) bad("network", "needs preset or file");
  if (!(sgd.lr > 0.0)) bad("sgd.lr", "must be > 0");
  if (!(sgd.weight_decay >= 0.0)) bad("sgd.weight_decay", "must be >= 0");
  if (sgd.batch_size < 1) bad("sgd.batch_size", "must be >= 1");
  if (!(analysis.epsilon > 0.0)) bad("analysis.epsilon", "must be > 0");
  if (analysis.k_max < 1) bad("analysis.k_max", "must be >= 1");
  for (std::size_t k : analysis.ks)
    if (k > analysis.k_max) bad("analysis.ks", "entries must not exceed k_max");
  if (!(dataset.test_fraction >= 0.0 && dataset.test_fraction < 1.0)) {
    bad("dataset.test_fraction", "must lie in [0, 1)");
  }
  for (double v : sweep_values) {
    switch (sweep_axis) {
      case SweepAxis::BatchSize:
        if (v < 1 || v != std::floor(v)) bad("sweep.values", "batch sizes must be positive integers");
        break;
      case SweepAxis::WeightDecay:
        if (!(v >= 0.0)) bad("sweep.values", "weight decay must be >= 0");
        break;
      case SweepAxis::LearningRate:
        if (!(v > 0.0)) bad("sweep.values", "learning rates must be > 0");
        break;
    }
  }
}

SgdConfig ExperimentConfig::run_config(std::size_t run_index) const {
  SgdConfig c = sgd;
  if (run_index < sweep_values.size()) {
    const double v = sweep_values[run_index];
    switch (sweep_axis) {
      case SweepAxis::BatchSize: c.batch_size = static_cast<std::size_t>(v); break;
      case SweepAxis::WeightDecay: c.weight_decay = v; break;
      case SweepAxis::LearningRate: c.lr = v; break;
    }
  }
  if (step_schedule) c.schedule = proportional_step_schedule(c.epochs);
  c.seed = sgd.seed ^ static_cast<std::uint64_t>(run_index);
  return c;
}

std::string config_toml(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << std::setprecision(17);
  auto q = [](const std::string& s) {
    std::string out = "\"";
    for (char ch : s) {
      if (ch == '"' || ch == '\\') out += '\\';
      out += ch;
    }
    return out + "\"";
  };
  os << "output_dir = " << q(cfg.output_dir.string()) << "\n";
  os << "loss = " << q(to_string(cfg.loss)) << "\n\n[network]\n";
  if (!cfg.network.file.empty()) os << "file = " << q(cfg.network.file.string()) << "\n";
  else os << "preset = " << q(cfg.network.preset) << "\n";
  os << "\n[dataset]\n";
  std::visit(
      [&](const auto& sp) {
        using T = std::decay_t<decltype(sp)>;
        if constexpr (std::is_same_v<T, SyntheticSpec>) {
          os << "kind = \"synthetic\"\nn = " << sp.n << "\nm = " << sp.m << "\nclasses = " << sp.classes
             << "\nseed = " << sp.seed << "\n";
        } else if constexpr (std::is_same_v<T, IdxSpec>) {
          os << "kind = \"idx\"\nimages = " << q(sp.images.string()) << "\nlabels = "
             << q(sp.labels.string()) << "\nsubset = " << sp.subset << "\nseed = " << sp.seed << "\n";
        } else {
          os << "kind = \"csv\"\npath = " << q(sp.path.string()) << "\nseed = " << sp.seed << "\n";
        }
      },
      cfg.dataset.source);
  os << "standardize = " << (cfg.dataset.standardize ? "true" : "false")
     << "\ntest_fraction = " << cfg.dataset.test_fraction << "\n\n[sgd]\n";
  os << "lr = " << cfg.sgd.lr << "\nweight_decay = " << cfg.sgd.weight_decay
     << "\nbatch_size = " << cfg.sgd.batch_size << "\nepochs = " << cfg.sgd.epochs
     << "\nseed = " << cfg.sgd.seed << "\nsampling = " << q(to_string(cfg.sgd.sampling))
     << "\nstep_schedule = " << (cfg.step_schedule ? "true" : "false") << "\nschedule = [";
  for (std::size_t i = 0; i < cfg.sgd.schedule.size(); ++i) {
    os << (i ? ", " : "") << "[" << cfg.sgd.schedule[i].epoch << ", " << cfg.sgd.schedule[i].multiplier << "]";
  }
  os << "]\n";
  if (!cfg.sweep_values.empty()) {
    os << "\n[sweep]\naxis = " << q(to_string(cfg.sweep_axis)) << "\nvalues = [";
    for (std::size_t i = 0; i < cfg.sweep_values.size(); ++i) os << (i ? ", " : "") << cfg.sweep_values[i];
    os << "]\n";
  }
  os << "\n[analysis]\nepsilon = " << cfg.analysis.epsilon << "\nks = [";
  for (std::size_t i = 0; i < cfg.analysis.ks.size(); ++i) os << (i ? ", " : "") << cfg.analysis.ks[i];
  os << "]\nk_max = " << cfg.analysis.k_max << "\nbatch_budget = " << cfg.analysis.batch_budget
     << "\nnorm = " << q(std::string(to_string(cfg.analysis.norm)))
     << "\nbound_report = " << (cfg.analysis.bound_report ? "true" : "false")
     << "\nnoise_report = " << (cfg.analysis.noise_report ? "true" : "false") << "\n";
  return os.str();
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : config_toml(cfg)) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string config_schema() {
  return R"(Experiment config (TOML):

output_dir = "runs/demo"        # per-run directories are created below it
loss = "ce"                     # mse | ce | logistic

[network]
preset = "mlp-3-32"             # mlp-L-H | resmlp-L-H | cnn-C
# file = "net.json"             # network JSON instead of a preset

[dataset]
kind = "synthetic"              # synthetic | idx | csv
n = 16                          # synthetic: input dimension
m = 200                         # synthetic: sample count
classes = 4                     # synthetic: class count
seed = 0
# images = "train-images.idx3-ubyte"   # idx
# labels = "train-labels.idx1-ubyte"   # idx
# subset = 0                           # idx: 0 keeps every image
# path = "data.csv"                    # csv: label,x0,x1,...
standardize = false             # per-feature, train-split statistics
test_fraction = 0.2

[sgd]
lr = 0.1
weight_decay = 5e-4
batch_size = 16
epochs = 10
seed = 0                        # LOWRANK_SEED overrides; run i uses seed xor i
sampling = "without_replacement"   # or "uniform"
step_schedule = false           # x0.1 at epochs {60,100,200}/500 of the budget
schedule = []                   # [[epoch, multiplier], ...]

[sweep]                         # optional; exactly one axis
axis = "batch_size"             # batch_size | weight_decay | lr
values = [4, 16, 64]

[analysis]
epsilon = 1e-3                  # effective-rank tolerance
ks = []                         # window lengths; empty = powers of two
k_max = 64
batch_budget = 1000             # sampled batches for the gradient-form bound
norm = "frobenius"              # or "spectral"
bound_report = true
noise_report = true
)";
}

}  // namespace lowrank
