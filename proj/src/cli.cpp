#include "stgcn/cli.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "stgcn/datagen.hpp"
#include "stgcn/errors.hpp"
#include "stgcn/grad_check.hpp"
#include "stgcn/io.hpp"
#include "stgcn/trainer.hpp"

namespace stgcn::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    if (item.empty() || *end != '\0') throw InvalidConfig(std::string("bad number in ") + what + ": '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw InvalidConfig(std::string(what) + " is empty");
  return out;
}

/// Hyperparameters shared by train / crossval / gradcheck: optional JSON
/// config file, then explicit flags on top.
struct HyperFlags {
  std::string config_file;
  std::optional<int> cheb_order, blocks, hidden, kernel_t, epochs, steps, folds;
  std::optional<double> dropout, lr, threshold;
  std::optional<std::size_t> batch;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "JSON file with hyperparameters");
    cmd->add_option("--K", cheb_order, "Chebyshev order");
    cmd->add_option("--blocks", blocks, "stacked spatial-temporal blocks");
    cmd->add_option("--hidden", hidden, "hidden features per channel");
    cmd->add_option("--kernel-t", kernel_t, "temporal kernel length (odd)");
    cmd->add_option("--dropout", dropout, "dropout rate");
    cmd->add_option("--batch", batch, "minibatch size");
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--steps", steps, "steps per epoch");
    cmd->add_option("--lr", lr, "Adam learning rate");
    cmd->add_option("--folds", folds, "cross-validation folds");
    cmd->add_option("--threshold", threshold, "test accuracy a model must reach to be accepted");
  }

  void apply(ModelConfig& m, TrainConfig& t) const {
    if (!config_file.empty()) {
      json j;
      try {
        j = json::parse(io::read_file(config_file));
      } catch (const json::exception& e) {
        throw InvalidConfig("config file: " + std::string(e.what()));
      }
      for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        const auto& v = it.value();
        if (k == "K") m.cheb_order = v.get<int>();
        else if (k == "blocks") m.blocks = v.get<int>();
        else if (k == "hidden") m.hidden = v.get<int>();
        else if (k == "kernel_t") m.kernel_t = v.get<int>();
        else if (k == "dropout") m.dropout = v.get<double>();
        else if (k == "batch") t.batch_size = v.get<std::size_t>();
        else if (k == "epochs") t.epochs = v.get<int>();
        else if (k == "steps") t.steps_per_epoch = v.get<int>();
        else if (k == "lr") t.learning_rate = v.get<double>();
        else if (k == "folds") t.folds = v.get<int>();
        else if (k == "threshold") t.accept_threshold = v.get<double>();
        else throw InvalidConfig("unknown config key '" + k + "'");
      }
    }
    if (cheb_order) m.cheb_order = *cheb_order;
    if (blocks) m.blocks = *blocks;
    if (hidden) m.hidden = *hidden;
    if (kernel_t) m.kernel_t = *kernel_t;
    if (dropout) m.dropout = *dropout;
    if (batch) t.batch_size = *batch;
    if (epochs) t.epochs = *epochs;
    if (steps) t.steps_per_epoch = *steps;
    if (lr) t.learning_rate = *lr;
    if (folds) t.folds = *folds;
    if (threshold) t.accept_threshold = *threshold;
    m.validate();
    t.validate();
  }
};

void print_config(std::ostream& out, const ModelConfig& m, const TrainConfig& t) {
  out << "config: K=" << m.cheb_order << " blocks=" << m.blocks << " hidden=" << m.hidden
      << " kernel_t=" << m.kernel_t << " dropout=" << m.dropout << " lr=" << t.learning_rate
      << " batch=" << t.batch_size << " epochs=" << t.epochs << " steps=" << t.steps_per_epoch
      << " folds=" << t.folds << "\n";
}

void print_balance(std::ostream& out, const LabeledDataset& ds) {
  const auto u = ds.unstable_count();
  out << "samples: " << ds.size() << " stable: " << ds.size() - u << " unstable: " << u << "\n";
}

int exit_code_for(const std::exception& e, bool dataset_stage) {
  if (dynamic_cast<const NonFiniteValue*>(&e)) return kNonFinite;
  if (dynamic_cast<const InvalidConfig*>(&e)) return kInvalidConfig;
  if (dynamic_cast<const SingleClassDataset*>(&e) || dynamic_cast<const EmptyDataset*>(&e) ||
      dynamic_cast<const DimensionMismatch*>(&e) || dynamic_cast<const TopologyMismatch*>(&e) ||
      dynamic_cast<const FormatError*>(&e) || dynamic_cast<const IsolatedNode*>(&e)) {
    return dataset_stage ? kDatasetError : kInvalidConfig;
  }
  if (dynamic_cast<const IoError*>(&e)) return dataset_stage ? kDatasetError : kIoFailure;
  return kInvalidConfig;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string topology_file, gen = "ring-chords", severity = "0,1", motors = "0.3,0.5,0.7,0.9", out;
  std::size_t buses = 10, count = 100;
  std::optional<std::size_t> fault_bus, planted_bus;
  std::optional<std::uint64_t> topology_seed;
  std::optional<double> snr;
  int perturb = 0;
  double sample_rate = 25.0, window = 1.0;
  std::uint64_t seed = 0, operating_point_seed = 1;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  out << "seed: " << a.seed << "\n";
  Topology topo = a.topology_file.empty()
                      ? generate_topology(parse_topology_kind(a.gen), a.buses, a.topology_seed.value_or(a.seed))
                      : io::load_topology(a.topology_file);
  if (a.perturb > 0) topo = perturb_topology(topo, a.perturb, Rng::derive(a.seed, {0x70657274}).next());

  ScenarioConfig cfg;
  const auto sev = parse_list(a.severity, "--severity-range");
  if (sev.size() != 2) throw InvalidConfig("--severity-range needs two values 'min,max'");
  cfg.severity_min = sev[0];
  cfg.severity_max = sev[1];
  cfg.motor_ratios = parse_list(a.motors, "--motor-ratios");
  cfg.fault_bus = a.fault_bus;
  cfg.planted_bus = a.planted_bus;
  cfg.sample_rate = a.sample_rate;
  cfg.window_seconds = a.window;
  cfg.seed = a.seed;
  cfg.operating_point_seed = a.operating_point_seed;
  cfg.validate(topo.size());

  auto ds = generate(cfg, topo, a.count);
  ds.topology_changes = a.perturb;
  if (a.snr) ds = add_noise(ds, *a.snr, Rng::derive(a.seed, {0x6e6f6973}).next());
  io::save_dataset(a.out, ds);
  print_balance(out, ds);
  out << "wrote " << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  std::string data, test_data, out, resume;
  double holdout = 0.2;
  std::uint64_t seed = 0;
  HyperFlags hyper;
};

ModelConfig model_config_for(const LabeledDataset& ds) {
  ModelConfig m;
  m.buses = ds.topology.size();
  m.window = ds.samples.empty() ? ds.config.window_steps() : ds.samples.front().steps();
  return m;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  out << "seed: " << a.seed << "\n";
  const auto ds = io::load_dataset(a.data);
  ModelConfig mcfg = model_config_for(ds);
  TrainConfig tcfg;
  tcfg.seed = a.seed;
  tcfg.threads = default_workers();
  a.hyper.apply(mcfg, tcfg);
  print_config(out, mcfg, tcfg);
  if (!(a.holdout >= 0.0 && a.holdout < 1.0)) throw InvalidConfig("--holdout must lie in [0, 1)");

  LabeledDataset train_set, test_set;
  bool have_test = false;
  if (!a.test_data.empty()) {
    train_set = ds;
    test_set = io::load_dataset(a.test_data);
    have_test = true;
  } else if (a.holdout > 0.0) {
    std::vector<std::size_t> order(ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = Rng::derive(a.seed, {0x686f6c64});
    rng.shuffle(order);
    const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(a.holdout * static_cast<double>(ds.size()))));
    std::vector<std::size_t> test_idx(order.begin(), order.begin() + static_cast<long>(n_test));
    std::vector<std::size_t> train_idx(order.begin() + static_cast<long>(n_test), order.end());
    std::sort(test_idx.begin(), test_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    train_set = ds.subset(train_idx);
    test_set = ds.subset(test_idx);
    have_test = true;
  } else {
    train_set = ds;
  }
  print_balance(out, train_set);

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = io::load_checkpoint(a.resume);
  const auto result = train(train_set, have_test ? &test_set : nullptr, mcfg, tcfg, resume ? &*resume : nullptr,
                            [&](const EpochMetrics& e) {
                              out << "epoch " << e.epoch << " loss " << e.loss << " train_acc " << e.train_acc
                                  << " test_acc " << e.test_acc << " (" << std::fixed << std::setprecision(1)
                                  << e.seconds << "s)" << std::defaultfloat << std::setprecision(6) << "\n";
                            });
  const fs::path dir = a.out;
  io::save_checkpoint(dir / "checkpoint.bin", result.final_model);
  io::save_checkpoint(dir / "best.bin", result.best_model);
  io::write_file_atomic(dir / "metrics.csv", io::metrics_csv(result.metrics));
  json extra{{"seed", a.seed},
             {"best_test_acc", result.best_test_acc},
             {"accepted", result.accepted},
             {"accept_threshold", tcfg.accept_threshold}};
  io::write_file_atomic(dir / "metrics.json", io::metrics_json(result.metrics, extra.dump()));
  out << "best test accuracy " << result.best_test_acc << (result.accepted ? " (accepted)" : " (below threshold)")
      << "\nwrote " << a.out << "\n";
  return kOk;
}

int cmd_crossval(const TrainArgs& a, std::ostream& out) {
  out << "seed: " << a.seed << "\n";
  const auto ds = io::load_dataset(a.data);
  ModelConfig mcfg = model_config_for(ds);
  TrainConfig tcfg;
  tcfg.seed = a.seed;
  a.hyper.apply(mcfg, tcfg);
  print_config(out, mcfg, tcfg);
  print_balance(out, ds);
  const auto report = kfold(ds, mcfg, tcfg, default_workers());
  const fs::path dir = a.out;
  json folds = json::array();
  for (std::size_t f = 0; f < report.folds.size(); ++f) {
    const auto& fr = report.folds[f];
    out << "fold " << f + 1 << ": train_acc " << fr.train_acc << " test_acc " << fr.test_acc << " final_loss "
        << fr.result.metrics.history.back().loss << "\n";
    io::write_file_atomic(dir / ("fold" + std::to_string(f + 1) + "_metrics.csv"), io::metrics_csv(fr.result.metrics));
    folds.push_back({{"fold", f + 1},
                     {"test_size", fr.test_indices.size()},
                     {"train_acc", fr.train_acc},
                     {"test_acc", fr.test_acc},
                     {"final_loss", fr.result.metrics.history.back().loss}});
  }
  out << "mean: train_acc " << report.mean_train_acc << " test_acc " << report.mean_test_acc << "\n";
  json summary{{"seed", a.seed},
               {"folds", folds},
               {"mean_train_acc", report.mean_train_acc},
               {"mean_test_acc", report.mean_test_acc},
               {"mean_final_loss", report.mean_final_loss}};
  io::write_file_atomic(dir / "crossval.json", summary.dump(2) + "\n");
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, data, out;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto ck = io::load_checkpoint(a.checkpoint);
  out << "seed: " << ck.seed << "\n";
  const auto ds = io::load_dataset(a.data);
  const auto m = evaluate(ck, ds);
  const auto& c = m.confusion;
  out << "accuracy " << std::setprecision(10) << c.accuracy() << std::setprecision(6) << " loss " << m.history.back().loss
      << "\nconfusion tp " << c.tp << " tn " << c.tn << " fp " << c.fp << " fn " << c.fn << "\n";
  if (!a.out.empty()) io::write_file_atomic(fs::path(a.out) / "eval.json", io::metrics_json(m));
  return kOk;
}

struct AssessArgs {
  std::string checkpoint, sample, topology;
  std::size_t index = 0;
};

int cmd_assess(const AssessArgs& a, std::ostream& out) {
  const auto ck = io::load_checkpoint(a.checkpoint);
  out << "seed: " << ck.seed << "\n";
  const auto ds = io::load_dataset(a.sample);
  if (a.index >= ds.size()) throw InvalidConfig("--index beyond the dataset");
  const Topology topo = a.topology.empty() ? ds.topology : io::load_topology(a.topology);
  const Stgcn net(ck.model, topo);
  const auto r = net.assess(ds.samples[a.index], ck.params, ck.norm);
  out << std::setprecision(6) << "p_stable " << r.probs[0] << " p_unstable " << r.probs[1] << "\nverdict "
      << label_name(r.predicted) << "\n";
  return r.predicted == Label::Stable ? kOk : kUnstable;
}

struct ExplainArgs {
  std::string checkpoint, csv;
};

int cmd_explain(const ExplainArgs& a, std::ostream& out) {
  const auto ck = io::load_checkpoint(a.checkpoint);
  out << "seed: " << ck.seed << "\n";
  auto sb = ad::Var::constant(ck.params.all()[ModelParams::sb_index(ck.model)].value);
  const auto snode = ad::Var::constant(Tensor({1, ck.model.buses}, 0.0));
  const auto influence = system_layer(snode, sb).influence.value();
  std::vector<std::size_t> order(influence.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return influence[x] < influence[y]; });
  std::ostringstream csv;
  csv << "bus,influence,sign\n";
  out << "bus  influence      sign\n";
  for (auto i : order) {
    const double s = influence[i];
    const char* sign = s > 0 ? "beneficial" : (s < 0 ? "detrimental" : "neutral");
    out << std::setw(4) << i << "  " << std::setw(13) << std::setprecision(6) << s << "  " << sign << "\n";
    csv << i << ',' << std::setprecision(17) << s << ',' << sign << '\n';
  }
  if (!a.csv.empty()) io::write_file_atomic(a.csv, csv.str());
  return kOk;
}

struct GradCheckArgs {
  double tol = 1e-4, step = 1e-5;
  std::uint64_t seed = 0;
  std::size_t buses = 5, window = 10, batch = 4;
  HyperFlags hyper;
};

int cmd_gradcheck(const GradCheckArgs& a, std::ostream& out) {
  out << "seed: " << a.seed << "\n";
  ModelConfig m;
  m.buses = a.buses;
  m.window = a.window;
  m.hidden = 2;
  m.blocks = 2;
  m.cheb_order = 2;
  m.dropout = 0.0;
  TrainConfig t;
  a.hyper.apply(m, t);
  out << "config: n=" << m.buses << " N=" << m.window << " H=" << m.hidden << " blocks=" << m.blocks
      << " K=" << m.cheb_order << " tol=" << a.tol << "\n";

  const auto topo = generate_topology(TopologyKind::Ring, m.buses, a.seed);
  const Stgcn net(m, topo);
  Rng rng = Rng::derive(a.seed, {0x67726164});
  auto params = ModelParams::initialize(m, rng.next());
  // Nonzero assignments and channel weights so every group receives gradient.
  for (auto& v : params.all()[ModelParams::sb_index(m)].value.data()) v = rng.normal();
  for (auto c : kChannels) params.all()[ModelParams::psi_index(m, c)].value[0] = rng.uniform(0.5, 1.5);
  Batch batch;
  for (auto& t_in : batch.inputs) {
    t_in = Tensor({a.batch, m.window, m.buses, 1});
    for (auto& v : t_in.data()) v = rng.normal();
  }
  for (std::size_t b = 0; b < a.batch; ++b) batch.labels.push_back(static_cast<int>(b % 2));

  std::vector<Parameter*> ptrs;
  for (auto& p : params.all()) ptrs.push_back(&p);
  const auto report = grad_check(
      [&](const std::vector<ad::Var>& leaves) {
        Rng unused(0);
        const auto fw = net.forward(batch, BoundParams{leaves}, false, unused);
        return Stgcn::loss(fw, batch);
      },
      ptrs, a.step, a.tol);
  for (const auto& e : report.entries) {
    out << std::left << std::setw(24) << e.name << std::right << " max_rel " << std::scientific << std::setprecision(3)
        << e.max_rel_error << " max_abs " << e.max_abs_error << std::defaultfloat << (e.passed ? "  PASS" : "  FAIL")
        << "\n";
  }
  out << (report.passed() ? "gradcheck PASS" : "gradcheck FAIL") << " (max relative error " << std::scientific
      << report.max_rel_error() << std::defaultfloat << ")\n";
  return report.passed() ? kOk : kGradCheckFailed;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spatial-temporal graph convolutional network for short-term voltage stability assessment", "stgcn"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "generate a labeled synthetic dataset");
  auto* g_topo = g->add_option("--topology", gen.topology_file, "topology edge-list file");
  g->add_option("--gen", gen.gen, "topology generator: ring, ring-chords, tree, grid")->excludes(g_topo);
  g->add_option("--buses", gen.buses, "bus count for generated topologies");
  g->add_option("--topology-seed", gen.topology_seed, "seed for generated topologies (default: --seed)");
  g->add_option("--count", gen.count, "number of cases");
  g->add_option("--severity-range", gen.severity, "fault severity range 'min,max' within [0,1]");
  g->add_option("--motor-ratios", gen.motors, "comma-separated induction motor ratios");
  g->add_option("--fault-bus", gen.fault_bus, "fix the faulted bus");
  g->add_option("--planted-bus", gen.planted_bus, "only faults at this bus may destabilize");
  g->add_option("--sample-rate", gen.sample_rate, "samples per second");
  g->add_option("--window", gen.window, "seconds of post-fault data given to the model");
  g->add_option("--snr", gen.snr, "measurement noise SNR in dB");
  g->add_option("--perturb", gen.perturb, "number of topology changes to apply");
  g->add_option("--seed", gen.seed, "random seed");
  g->add_option("--operating-point-seed", gen.operating_point_seed, "seed of the base bus injections");
  g->add_option("--out", gen.out, "output dataset directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--test-data", tr.test_data, "separate test dataset directory");
  t->add_option("--holdout", tr.holdout, "fraction held out for testing when no --test-data is given");
  t->add_option("--resume", tr.resume, "checkpoint to continue training from");
  t->add_option("--seed", tr.seed, "random seed");
  t->add_option("--out", tr.out, "output directory")->required();
  tr.hyper.add_to(t);

  TrainArgs cv;
  auto* c = app.add_subcommand("crossval", "k-fold cross-validation");
  c->add_option("--data", cv.data, "dataset directory")->required();
  c->add_option("--seed", cv.seed, "random seed");
  c->add_option("--out", cv.out, "output directory")->required();
  cv.hyper.add_to(c);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  e->add_option("--data", ev.data, "dataset directory")->required();
  e->add_option("--out", ev.out, "directory for eval.json");

  AssessArgs as;
  auto* s = app.add_subcommand("assess", "assess one case; exit 0 stable, 10 unstable");
  s->add_option("--checkpoint", as.checkpoint, "checkpoint file")->required();
  s->add_option("--sample", as.sample, "dataset directory holding the case")->required();
  s->add_option("--index", as.index, "case index within the dataset");
  s->add_option("--topology", as.topology, "topology file overriding the dataset's");

  ExplainArgs ex;
  auto* x = app.add_subcommand("explain", "per-bus influence weights of the system layer");
  x->add_option("--checkpoint", ex.checkpoint, "checkpoint file")->required();
  x->add_option("--csv", ex.csv, "also write the table as CSV");

  GradCheckArgs gc;
  auto* gcc = app.add_subcommand("gradcheck", "compare analytic gradients with finite differences");
  gcc->add_option("--tol", gc.tol, "maximum relative error");
  gcc->add_option("--step", gc.step, "finite-difference step");
  gcc->add_option("--seed", gc.seed, "random seed");
  gcc->add_option("--buses", gc.buses, "bus count");
  gcc->add_option("--window", gc.window, "time steps");
  gc.hyper.add_to(gcc);

  std::vector<const char*> argv{"stgcn"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& pe) {
    err << "error: " << pe.what() << "\n";
    return kInvalidConfig;
  }

  const bool is_assess = s->parsed();
  const bool dataset_stage = t->parsed() || c->parsed() || e->parsed();
  try {
    if (g->parsed()) return cmd_generate(gen, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (c->parsed()) return cmd_crossval(cv, out);
    if (e->parsed()) return cmd_eval(ev, out);
    if (is_assess) return cmd_assess(as, out);
    if (x->parsed()) return cmd_explain(ex, out);
    if (gcc->parsed()) return cmd_gradcheck(gc, out);
  } catch (const std::exception& ex_err) {
    err << "error: " << ex_err.what() << "\n";
    if (is_assess) return kInvalidConfig;
    return exit_code_for(ex_err, dataset_stage);
  }
  return kInvalidConfig;
}

}  // namespace stgcn::cli
