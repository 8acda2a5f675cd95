// SPDX-License-Identifier: Apache-2.0
#include "dmu/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmu/experiment.hpp"

namespace dmu {

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Recurrent block sizes of the synthetic-task comparison.
std::vector<std::size_t> reference_arch(TaskKind task, CellKind cell) {
  switch (task) {
    case TaskKind::adding:
      switch (cell) {
        case CellKind::rnn: return {5, 5};
        case CellKind::lstm: return {2, 2};
        case CellKind::gru: return {3, 2};
        case CellKind::dmu: return {5, 5};
      }
      break;
    case TaskKind::tempord:
      switch (cell) {
        case CellKind::rnn: return {6, 6};
        case CellKind::lstm: return {2, 3};
        case CellKind::gru: return {2, 4};
        case CellKind::dmu: return {5, 6};
      }
      break;
    case TaskKind::noiseseq:
      switch (cell) {
        case CellKind::rnn: return {5, 5};
        case CellKind::lstm: return {2, 2};
        case CellKind::gru: return {2, 3};
        case CellKind::dmu: return {5, 4};
      }
      break;
  }
  return {};
}

constexpr CellKind kAllCells[] = {CellKind::rnn, CellKind::lstm, CellKind::gru, CellKind::dmu};
constexpr TaskKind kAllTasks[] = {TaskKind::noiseseq, TaskKind::adding, TaskKind::tempord};

TaskKind task_or_throw(const std::string& name) {
  const auto kind = parse_task_kind(name);
  if (!kind) throw UsageError("unknown task kind '" + name + "'");
  return *kind;
}

CellKind cell_or_throw(const std::string& name) {
  const auto kind = parse_cell_kind(name);
  if (!kind) throw UsageError("unknown cell kind '" + name + "'");
  return *kind;
}

std::vector<std::size_t> arch_or_default(const std::string& text, TaskKind task, CellKind cell) {
  if (text.empty()) return reference_arch(task, cell);
  try {
    return parse_arm("dmu:" + text).arch;
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

std::string arch_string(const std::vector<std::size_t>& arch) {
  std::string s;
  for (std::size_t i = 0; i < arch.size(); ++i) s += (i ? "," : "") + std::to_string(arch[i]);
  return s;
}

/// Flags shared by the subcommands that build a task.
struct TaskFlags {
  std::string task = "adding";
  std::string scale = "full";
  std::optional<std::size_t> n;

  void attach(CLI::App* app) {
    app->add_option("--task", task, "adding | tempord | noiseseq")->capture_default_str();
    app->add_option("--scale", scale, "full | desk sequence lengths")
        ->check(CLI::IsMember({"full", "desk"}))
        ->capture_default_str();
    app->add_option("--n", n, "NoiseSeq alphabet size");
  }

  TaskSpec build() const {
    const TaskKind kind = task_or_throw(task);
    TaskSpec spec = scale == "desk" ? TaskSpec::desk_scale(kind) : TaskSpec::full_scale(kind);
    if (n) spec.noiseseq.n = *n;
    try {
      spec.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    return spec;
  }
};

/// Training knobs shared by `train` and `experiment`.
struct TrainFlags {
  std::optional<std::size_t> epochs, batch, samples, validation, test;
  std::optional<double> stop, lr, clip, p, eps;
  std::optional<std::string> optimizer;

  void attach(CLI::App* app) {
    app->add_option("--epochs", epochs, "epoch budget (default 300)");
    app->add_option("--stop", stop, "stop once validation loss <= this");
    app->add_option("--lr", lr, "learning rate (default 1e-3)");
    app->add_option("--optimizer", optimizer, "adam | sgd")->check(CLI::IsMember({"adam", "sgd"}));
    app->add_option("--clip", clip, "global gradient-norm clip");
    app->add_option("--batch", batch, "minibatch size (default 16)");
    app->add_option("--samples", samples, "training samples per epoch (default 1024)");
    app->add_option("--validation", validation, "validation samples (default 512)");
    app->add_option("--test-samples", test, "test samples (default 512)");
    app->add_option("--p", p, "scaling norm exponent (default 1)");
    app->add_option("--eps", eps, "scaling damping epsilon (default 0.2)");
  }

  void apply(TrainConfig& tc) const {
    if (epochs) tc.max_epochs = *epochs;
    if (stop) tc.stop_threshold = *stop;
    if (lr) tc.optimizer.learning_rate = *lr;
    if (optimizer) tc.optimizer.kind = *parse_optimizer_kind(*optimizer);
    if (clip) tc.optimizer.clip_norm = *clip;
    if (batch) tc.sizes.batch_size = *batch;
    if (samples) tc.sizes.train_per_epoch = *samples;
    if (validation) tc.sizes.validation = *validation;
    if (test) tc.sizes.test = *test;
    if (p) tc.scaling.p = *p;
    if (eps) tc.scaling.epsilon = *eps;
  }
};

int run_train(const TaskFlags& tf, const TrainFlags& trf, const std::string& cell,
              const std::string& arch, bool no_scaling, std::uint64_t seed,
              const std::string& history_csv, const std::string& save_path, bool quiet,
              std::ostream& out) {
  const TaskSpec task = tf.build();
  const CellKind kind = cell_or_throw(cell);
  ModelSpec ms{kind, arch_or_default(arch, task.kind, kind), task.input_width(),
               task.output_width()};
  try {
    ms.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const RunSeeds seeds = run_seeds(seed, 0);
  Rng rng(seeds.model);
  SequenceModel model = SequenceModel::init(ms, rng);
  TrainConfig tc;
  trf.apply(tc);
  tc.seed = seeds.data;
  tc.scaling.enabled = !no_scaling;

  out << "# " << to_string(kind) << " (" << arch_string(ms.arch) << "), "
      << model.weight_count() << " weights, task " << to_string(task.kind) << '\n';
  std::ofstream csv;
  if (!history_csv.empty()) {
    csv.open(history_csv, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write " + history_csv);
    csv << "epoch,train_loss,val_loss,scale_S,wall_time\n";
  }
  const RunReport report = run_until_stop(model, task, tc, [&](const EpochRecord& r) {
    if (!quiet) {
      out << "epoch " << r.epoch << " train " << format_real(r.train_loss) << " val "
          << format_real(r.val_loss) << " S " << format_real(r.scale_S) << '\n';
    }
    if (csv.is_open()) {
      csv << r.epoch << ',' << format_real(r.train_loss) << ',' << format_real(r.val_loss)
          << ',' << format_real(r.scale_S) << ',' << format_real(r.wall_time) << '\n';
    }
  });
  out << "status " << to_string(report.status) << " epochs " << report.history.size()
      << " test_loss " << format_real(report.test_loss) << '\n';
  if (!save_path.empty()) {
    const auto params = std::as_const(model).parameters();
    save_parameters(save_path, params);
  }
  return report.status == RunStatus::diverged ? 1 : 0;
}

int run_count_weights(const TaskFlags& tf, const std::string& cell, const std::string& arch,
                      std::ostream& out) {
  if (!cell.empty()) {
    const TaskSpec task = tf.build();
    const CellKind kind = cell_or_throw(cell);
    ModelSpec ms{kind, arch_or_default(arch, task.kind, kind), task.input_width(),
                 task.output_width()};
    try {
      ms.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    out << count_weights(ms) << '\n';
    return 0;
  }
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %-6s %-10s %s\n", "task", "cell", "arch", "weights");
  out << line;
  for (TaskKind t : kAllTasks) {
    TaskFlags flags = tf;
    flags.task = std::string(to_string(t));
    const TaskSpec task = flags.build();
    for (CellKind c : kAllCells) {
      ModelSpec ms{c, reference_arch(t, c), task.input_width(), task.output_width()};
      const std::string a = "(" + arch_string(ms.arch) + ")";
      std::snprintf(line, sizeof line, "%-10s %-6s %-10s %zu\n", std::string(to_string(t)).c_str(),
                    std::string(to_string(c)).c_str(), a.c_str(), count_weights(ms));
      out << line;
    }
  }
  return 0;
}

int run_gen_data(const TaskFlags& tf, std::size_t count, std::uint64_t seed,
                 const std::string& path, std::ostream& out) {
  const TaskSpec task = tf.build();
  const TaskGenerator gen(task, derive_seed(seed, {0}));
  Rng rng(derive_seed(seed, {1}));
  std::ofstream file;
  if (!path.empty() && path != "-") {
    file.open(path, std::ios::binary);
    if (!file) throw std::runtime_error("cannot write " + path);
  }
  std::ostream& sink = file.is_open() ? file : out;
  for (std::size_t i = 0; i < count; ++i) sink << sample_to_json(gen.generate(rng)).dump() << '\n';
  return 0;
}

int run_check_scaling(const std::vector<double>& norms, double p, double eps, std::uint64_t k,
                      std::ostream& out) {
  ScalingChain chain;
  try {
    chain = interpolation_chain(norms, p, eps, k);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  out << "ratio " << format_real(growth_ratio(norms, p, 1e-12)) << '\n'
      << "S0 " << format_real(chain.s0) << '\n'
      << "S1 " << format_real(chain.s1) << '\n'
      << "S2 " << format_real(chain.s2) << '\n'
      << "S3 " << format_real(chain.s3) << '\n'
      << "S4 " << format_real(chain.s4) << '\n'
      << "S_next " << format_real(std::min(chain.s4, 1.0)) << '\n';
  return 0;
}

struct ExperimentFlags {
  std::string config;
  std::vector<std::string> arms;
  std::optional<std::size_t> runs, workers;
  std::optional<std::uint64_t> master_seed;
  std::string out_dir;
  bool gnuplot = false;
  bool quiet = false;
};

int run_experiment_cmd(const TaskFlags& tf, bool task_given, const TrainFlags& trf,
                       const ExperimentFlags& ef, std::ostream& out) {
  ExperimentSpec spec;
  if (!ef.config.empty()) {
    try {
      spec = load_experiment_spec(ef.config);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(ef.config + ": " + e.what());
    }
    if (task_given) spec.task = tf.build();
  } else {
    spec.task = tf.build();
  }
  if (!ef.arms.empty()) {
    spec.arms.clear();
    for (const std::string& a : ef.arms) {
      try {
        spec.arms.push_back(parse_arm(a));
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
    }
  } else if (spec.arms.empty()) {
    for (CellKind c : kAllCells) {
      spec.arms.push_back(Arm{std::string(to_string(c)), c, reference_arch(spec.task.kind, c), true});
    }
  }
  trf.apply(spec.train);
  if (ef.runs) spec.runs = *ef.runs;
  if (ef.workers) spec.workers = *ef.workers;
  if (ef.master_seed) spec.master_seed = *ef.master_seed;
  if (!ef.out_dir.empty()) spec.output_dir = ef.out_dir;
  if (spec.output_dir.empty()) spec.output_dir = "results";
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const ExperimentResult result = run_experiment(spec, default_trainer, [&](const RunRecord& r) {
    if (ef.quiet) return;
    out << spec.arms[r.arm].label << " run " << r.run_id << ' ' << to_string(r.report.status)
        << " epochs " << r.report.history.size();
    if (!r.error.empty()) out << " error: " << r.error;
    out << '\n' << std::flush;
  });
  emit_reports(result, spec.output_dir, EmitOptions{ef.gnuplot});
  out << "wrote " << spec.output_dir.string() << '\n';
  return 0;
}

}  // namespace

int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dynamic memory unit: training, experiments and utilities", "dmu"};
  app.require_subcommand(1);

  TaskFlags task_flags;
  TrainFlags train_flags;

  auto* train = app.add_subcommand("train", "train one model and report its losses");
  std::string cell = "dmu", arch, history_csv, save_path;
  bool no_scaling = false, quiet = false;
  std::uint64_t seed = 0;
  task_flags.attach(train);
  train_flags.attach(train);
  train->add_option("--cell", cell, "dmu | rnn | lstm | gru")->capture_default_str();
  train->add_option("--arch", arch, "comma-separated widths; default is the reference block");
  train->add_flag("--no-scaling", no_scaling, "keep the memory scale fixed at 1");
  train->add_option("--seed", seed, "master seed")->capture_default_str();
  train->add_option("--history", history_csv, "write per-epoch history CSV here");
  train->add_option("--save", save_path, "write trained parameters (JSON) here");
  train->add_flag("--quiet", quiet, "print only the final line");

  auto* experiment = app.add_subcommand("experiment", "multi-seed comparison with report files");
  ExperimentFlags ef;
  experiment->add_option("--config", ef.config, "JSON experiment description")
      ->check(CLI::ExistingFile);
  task_flags.attach(experiment);
  train_flags.attach(experiment);
  experiment->add_option("--arm", ef.arms, "kind:w1,w2[:nos], repeatable");
  experiment->add_option("--runs", ef.runs, "runs per arm (default 51)");
  experiment->add_option("--workers", ef.workers, "parallel runs (default $DMU_WORKERS or cores)");
  experiment->add_option("--master-seed", ef.master_seed, "seed all runs derive from");
  experiment->add_option("--out", ef.out_dir, "output directory (default results)");
  experiment->add_flag("--gnuplot", ef.gnuplot, "also write curves_<cell>.dat");
  experiment->add_flag("--quiet", ef.quiet, "no per-run progress lines");

  auto* count = app.add_subcommand("count-weights", "trainable scalars per architecture");
  std::string count_cell, count_arch;
  task_flags.attach(count);
  count->add_option("--cell", count_cell, "cell kind; omit for the full table");
  count->add_option("--arch", count_arch, "comma-separated widths");

  auto* gen = app.add_subcommand("gen-data", "dump task samples as JSON lines");
  std::size_t gen_count = 10;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  task_flags.attach(gen);
  gen->add_option("--count", gen_count, "number of samples")->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
  gen->add_option("--out", gen_out, "output file (default stdout)");

  auto* check = app.add_subcommand("check-scaling", "memory-scale interpolation chain for a norm list");
  std::vector<double> norms;
  double p = 1.0, eps = 0.2;
  std::uint64_t k = 1;
  check->add_option("--norms", norms, "per-step gradient norms, oldest first")
      ->required()
      ->delimiter(',');
  check->add_option("--p", p, "norm exponent")->capture_default_str();
  check->add_option("--eps", eps, "damping epsilon")->capture_default_str();
  check->add_option("--k", k, "episode index")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    CLI::App* sub = nullptr;
    for (CLI::App* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return 2;
  }

  try {
    if (train->parsed()) {
      return run_train(task_flags, train_flags, cell, arch, no_scaling, seed, history_csv,
                       save_path, quiet, out);
    }
    if (experiment->parsed()) {
      return run_experiment_cmd(task_flags, experiment->count("--task") > 0, train_flags, ef, out);
    }
    if (count->parsed()) return run_count_weights(task_flags, count_cell, count_arch, out);
    if (gen->parsed()) return run_gen_data(task_flags, gen_count, gen_seed, gen_out, out);
    if (check->parsed()) return run_check_scaling(norms, p, eps, k, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

int cli_main(int argc, char** argv) { return cli_main(argc, argv, std::cout, std::cerr); }

}  // namespace dmu
