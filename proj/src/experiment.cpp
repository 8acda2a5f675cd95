// SPDX-License-Identifier: Apache-2.0
#include "dmu/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace dmu {

using json = nlohmann::json;

// Arms & spec -------------------------------------------------------------

namespace {

std::vector<std::size_t> parse_widths(std::string_view text) {
  std::vector<std::size_t> widths;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    const std::string item(text.substr(pos, comma - pos));
    char* end = nullptr;
    const unsigned long long v = std::strtoull(item.c_str(), &end, 10);
    if (item.empty() || end != item.c_str() + item.size() || v == 0) {
      throw std::invalid_argument("bad layer width '" + item + "'");
    }
    widths.push_back(static_cast<std::size_t>(v));
    pos = comma + 1;
  }
  return widths;
}

}  // namespace

Arm parse_arm(std::string_view text) {
  const std::size_t colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw std::invalid_argument("arm '" + std::string(text) + "' must look like kind:w1,w2");
  }
  const auto kind = parse_cell_kind(text.substr(0, colon));
  if (!kind) {
    throw std::invalid_argument("unknown cell kind '" + std::string(text.substr(0, colon)) + "'");
  }
  std::string_view rest = text.substr(colon + 1);
  Arm arm;
  arm.kind = *kind;
  arm.label = std::string(to_string(*kind));
  const std::size_t flag = rest.find(':');
  if (flag != std::string_view::npos) {
    if (rest.substr(flag + 1) != "nos" || *kind != CellKind::dmu) {
      throw std::invalid_argument("only 'dmu:...:nos' is a valid arm suffix");
    }
    arm.scaling = false;
    arm.label = "dmu-nos";
    rest = rest.substr(0, flag);
  }
  arm.arch = parse_widths(rest);
  return arm;
}

void ExperimentSpec::validate() const {
  task.validate();
  train.validate();
  if (runs == 0) throw std::invalid_argument("experiment needs runs >= 1");
  if (arms.empty()) throw std::invalid_argument("experiment needs at least one arm");
  for (std::size_t i = 1; i < thresholds.size(); ++i) {
    if (!(thresholds[i] < thresholds[i - 1])) {
      throw std::invalid_argument("thresholds must be strictly decreasing");
    }
  }
  for (std::size_t i = 0; i < arms.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (arms[i].label == arms[j].label) {
        throw std::invalid_argument("duplicate arm label '" + arms[i].label + "'");
      }
    }
    ModelSpec ms{arms[i].kind, arms[i].arch, task.input_width(), task.output_width()};
    ms.validate();
  }
}

ExperimentSpec experiment_from_json(const json& doc) {
  ExperimentSpec spec;
  const json task = doc.value("task", json::object());
  const std::string kind_name = task.value("kind", "adding");
  const auto kind = parse_task_kind(kind_name);
  if (!kind) throw std::invalid_argument("unknown task kind '" + kind_name + "'");
  const std::string scale = task.value("scale", "full");
  if (scale != "full" && scale != "desk") {
    throw std::invalid_argument("task scale must be 'full' or 'desk'");
  }
  spec.task = scale == "desk" ? TaskSpec::desk_scale(*kind) : TaskSpec::full_scale(*kind);
  AddingConfig& ad = spec.task.adding;
  ad.min_length = task.value("min_length", ad.min_length);
  ad.max_length = task.value("max_length", ad.max_length);
  ad.original_windows = task.value("original_windows", ad.original_windows);
  if (task.contains("tempord")) {
    const json& t = task["tempord"];
    TempOrdConfig& c = spec.task.tempord;
    c.min_length = t.value("min_length", c.min_length);
    c.max_length = t.value("max_length", c.max_length);
    c.t1_min = t.value("t1_min", c.t1_min), c.t1_max = t.value("t1_max", c.t1_max);
    c.t2_min = t.value("t2_min", c.t2_min), c.t2_max = t.value("t2_max", c.t2_max);
    c.t3_min = t.value("t3_min", c.t3_min), c.t3_max = t.value("t3_max", c.t3_max);
  }
  spec.task.noiseseq.n = task.value("n", spec.task.noiseseq.n);

  for (const json& a : doc.at("arms")) {
    Arm arm;
    const std::string cell = a.at("cell").get<std::string>();
    const auto ck = parse_cell_kind(cell);
    if (!ck) throw std::invalid_argument("unknown cell kind '" + cell + "'");
    arm.kind = *ck;
    arm.arch = a.at("arch").get<std::vector<std::size_t>>();
    arm.scaling = a.value("scaling", true);
    arm.label = a.value("label", arm.scaling ? cell : cell + "-nos");
    spec.arms.push_back(std::move(arm));
  }
  spec.runs = doc.value("runs", spec.runs);
  spec.thresholds = doc.value("thresholds", spec.thresholds);
  spec.master_seed = doc.value("master_seed", spec.master_seed);
  spec.workers = doc.value("workers", spec.workers);
  spec.output_dir = doc.value("output", std::string{});

  const json train = doc.value("train", json::object());
  TrainConfig& tc = spec.train;
  tc.sizes.batch_size = train.value("batch_size", tc.sizes.batch_size);
  tc.sizes.train_per_epoch = train.value("samples_per_epoch", tc.sizes.train_per_epoch);
  tc.sizes.validation = train.value("validation_samples", tc.sizes.validation);
  tc.sizes.test = train.value("test_samples", tc.sizes.test);
  tc.max_epochs = train.value("max_epochs", tc.max_epochs);
  tc.stop_threshold = train.value("stop_threshold", tc.stop_threshold);
  tc.patience = train.value("patience", tc.patience);
  const json opt = train.value("optimizer", json::object());
  const std::string opt_name = opt.value("kind", "adam");
  const auto ok = parse_optimizer_kind(opt_name);
  if (!ok) throw std::invalid_argument("unknown optimizer '" + opt_name + "'");
  tc.optimizer.kind = *ok;
  tc.optimizer.learning_rate = opt.value("learning_rate", tc.optimizer.learning_rate);
  tc.optimizer.beta1 = opt.value("beta1", tc.optimizer.beta1);
  tc.optimizer.beta2 = opt.value("beta2", tc.optimizer.beta2);
  tc.optimizer.eps = opt.value("eps", tc.optimizer.eps);
  if (opt.contains("clip_norm") && !opt["clip_norm"].is_null()) {
    tc.optimizer.clip_norm = opt["clip_norm"].get<double>();
  }
  const json sc = train.value("scaling", json::object());
  tc.scaling.p = sc.value("p", tc.scaling.p);
  tc.scaling.epsilon = sc.value("epsilon", tc.scaling.epsilon);
  tc.scaling.norm_floor = sc.value("norm_floor", tc.scaling.norm_floor);

  spec.validate();
  return spec;
}

json experiment_to_json(const ExperimentSpec& spec) {
  json task{{"kind", std::string(to_string(spec.task.kind))},
            {"min_length", spec.task.adding.min_length},
            {"max_length", spec.task.adding.max_length},
            {"original_windows", spec.task.adding.original_windows},
            {"n", spec.task.noiseseq.n}};
  const TempOrdConfig& t = spec.task.tempord;
  task["tempord"] = {{"min_length", t.min_length}, {"max_length", t.max_length},
                     {"t1_min", t.t1_min},         {"t1_max", t.t1_max},
                     {"t2_min", t.t2_min},         {"t2_max", t.t2_max},
                     {"t3_min", t.t3_min},         {"t3_max", t.t3_max}};
  json arms = json::array();
  for (const Arm& a : spec.arms) {
    arms.push_back({{"label", a.label},
                    {"cell", std::string(to_string(a.kind))},
                    {"arch", a.arch},
                    {"scaling", a.scaling}});
  }
  const TrainConfig& tc = spec.train;
  json opt{{"kind", std::string(to_string(tc.optimizer.kind))},
           {"learning_rate", tc.optimizer.learning_rate},
           {"beta1", tc.optimizer.beta1},
           {"beta2", tc.optimizer.beta2},
           {"eps", tc.optimizer.eps},
           {"clip_norm", tc.optimizer.clip_norm ? json(*tc.optimizer.clip_norm) : json()}};
  json train{{"batch_size", tc.sizes.batch_size},
             {"samples_per_epoch", tc.sizes.train_per_epoch},
             {"validation_samples", tc.sizes.validation},
             {"test_samples", tc.sizes.test},
             {"max_epochs", tc.max_epochs},
             {"stop_threshold", tc.stop_threshold},
             {"patience", tc.patience},
             {"optimizer", opt},
             {"scaling",
              {{"p", tc.scaling.p},
               {"epsilon", tc.scaling.epsilon},
               {"norm_floor", tc.scaling.norm_floor}}}};
  return json{{"task", task},
              {"arms", arms},
              {"runs", spec.runs},
              {"thresholds", spec.thresholds},
              {"master_seed", spec.master_seed},
              {"workers", spec.workers},
              {"output", spec.output_dir.string()},
              {"train", train}};
}

ExperimentSpec load_experiment_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  return experiment_from_json(json::parse(in, nullptr, true, true));
}

std::size_t resolve_workers(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("DMU_WORKERS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

RunSeeds run_seeds(std::uint64_t master_seed, std::size_t run) {
  RunSeeds s;
  s.run = derive_seed(master_seed, {run});
  s.data = derive_seed(s.run, {0});
  s.model = derive_seed(s.run, {1});
  return s;
}

// Running -----------------------------------------------------------------

RunReport default_trainer(const Arm& arm, const RunSeeds& seeds, const ExperimentSpec& spec) {
  ModelSpec ms{arm.kind, arm.arch, spec.task.input_width(), spec.task.output_width()};
  Rng rng(seeds.model);
  SequenceModel model = SequenceModel::init(ms, rng);
  TrainConfig tc = spec.train;
  tc.seed = seeds.data;
  tc.scaling.enabled = arm.scaling;
  return run_until_stop(model, spec.task, tc);
}

std::optional<std::size_t> first_reach(const RunReport& report, double threshold) {
  if (report.status == RunStatus::diverged || report.status == RunStatus::failed) {
    return std::nullopt;
  }
  for (const EpochRecord& rec : report.history) {
    if (rec.val_loss <= threshold) return rec.epoch;
  }
  return std::nullopt;
}

std::vector<ThresholdCurve> threshold_curves(const ExperimentSpec& spec,
                                             const std::vector<RunRecord>& runs,
                                             std::size_t epochs) {
  std::vector<ThresholdCurve> curves;
  for (std::size_t a = 0; a < spec.arms.size(); ++a) {
    for (std::size_t ti = 0; ti < spec.thresholds.size(); ++ti) {
      ThresholdCurve c;
      c.cell = spec.arms[a].label;
      c.threshold = spec.thresholds[ti];
      c.counts.assign(epochs, 0);
      for (const RunRecord& r : runs) {
        if (r.arm != a || !r.first_reach[ti]) continue;
        for (std::size_t e = *r.first_reach[ti]; e <= epochs; ++e) ++c.counts[e - 1];
      }
      curves.push_back(std::move(c));
    }
  }
  return curves;
}

ExperimentResult run_experiment(const ExperimentSpec& spec, const Trainer& trainer,
                                const std::function<void(const RunRecord&)>& on_run) {
  spec.validate();
  ExperimentResult result;
  result.spec = spec;
  const std::size_t total = spec.arms.size() * spec.runs;
  result.runs.resize(total);

  std::atomic<std::size_t> next{0};
  std::mutex callback_mutex;
  auto worker = [&] {
    for (std::size_t job = next++; job < total; job = next++) {
      RunRecord& r = result.runs[job];
      r.arm = job / spec.runs;
      r.run_id = job % spec.runs;
      r.seeds = run_seeds(spec.master_seed, r.run_id);
      try {
        r.report = trainer(spec.arms[r.arm], r.seeds, spec);
      } catch (const std::exception& e) {
        r.report = RunReport{};
        r.report.status = RunStatus::failed;
        r.report.test_loss = std::numeric_limits<double>::quiet_NaN();
        r.error = e.what();
      }
      for (double th : spec.thresholds) r.first_reach.push_back(first_reach(r.report, th));
      if (on_run) {
        std::lock_guard lock(callback_mutex);
        on_run(r);
      }
    }
  };
  const std::size_t n_workers = std::min(resolve_workers(spec.workers), std::max<std::size_t>(total, 1));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (const RunRecord& r : result.runs) {
    result.epochs = std::max(result.epochs, r.report.history.size());
  }
  result.curves = threshold_curves(spec, result.runs, result.epochs);
  return result;
}

// Reports -----------------------------------------------------------------

std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

LossStats loss_stats(const std::vector<double>& values) {
  LossStats s;
  s.count = values.size();
  if (values.empty()) {
    s.best = s.mean = s.std_dev = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  s.best = *std::min_element(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.std_dev = std::sqrt(sq / static_cast<double>(values.size()));
  return s;
}

namespace {

bool usable(const RunRecord& r) {
  return r.report.status != RunStatus::diverged && r.report.status != RunStatus::failed;
}

json stats_json(const LossStats& s) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(); };
  return json{{"count", s.count}, {"best", num(s.best)}, {"mean", num(s.mean)},
              {"std", num(s.std_dev)}};
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

}  // namespace

json summary_json(const ExperimentResult& result) {
  json cells = json::array();
  for (std::size_t a = 0; a < result.spec.arms.size(); ++a) {
    std::vector<double> train, test;
    std::size_t runs = 0, diverged = 0;
    for (const RunRecord& r : result.runs) {
      if (r.arm != a) continue;
      ++runs;
      if (!usable(r)) {
        ++diverged;
        continue;
      }
      if (!r.report.history.empty()) train.push_back(r.report.history.back().train_loss);
      test.push_back(r.report.test_loss);
    }
    cells.push_back({{"cell", result.spec.arms[a].label},
                     {"runs", runs},
                     {"diverged", diverged},
                     {"train_loss", stats_json(loss_stats(train))},
                     {"test_loss", stats_json(loss_stats(test))}});
  }
  return json{{"task", std::string(to_string(result.spec.task.kind))},
              {"epochs", result.epochs},
              {"cells", cells}};
}

void emit_reports(const ExperimentResult& result, const std::filesystem::path& dir,
                  const EmitOptions& options) {
  std::filesystem::create_directories(dir);
  const auto& arms = result.spec.arms;

  {
    std::ofstream out = open_out(dir / "runs.csv");
    out << "run_id,seed,cell,epoch,train_loss,val_loss,scale_S,status\n";
    for (const RunRecord& r : result.runs) {
      const std::string_view status = to_string(r.report.status);
      for (const EpochRecord& e : r.report.history) {
        out << r.run_id << ',' << r.seeds.run << ',' << arms[r.arm].label << ',' << e.epoch
            << ',' << format_real(e.train_loss) << ',' << format_real(e.val_loss) << ','
            << format_real(e.scale_S) << ',' << status << '\n';
      }
    }
  }
  {
    std::ofstream out = open_out(dir / "curves.csv");
    out << "cell,threshold,epoch,cumulative_count\n";
    for (const ThresholdCurve& c : result.curves) {
      for (std::size_t e = 0; e < c.counts.size(); ++e) {
        out << c.cell << ',' << format_real(c.threshold) << ',' << e + 1 << ',' << c.counts[e]
            << '\n';
      }
    }
  }
  {
    std::ofstream out = open_out(dir / "final.csv");
    out << "run_id,seed,cell,status,epochs,train_loss,val_loss,test_loss\n";
    for (const RunRecord& r : result.runs) {
      const double nan = std::numeric_limits<double>::quiet_NaN();
      const bool has = !r.report.history.empty();
      out << r.run_id << ',' << r.seeds.run << ',' << arms[r.arm].label << ','
          << to_string(r.report.status) << ',' << r.report.history.size() << ','
          << format_real(has ? r.report.history.back().train_loss : nan) << ','
          << format_real(has ? r.report.history.back().val_loss : nan) << ','
          << format_real(r.report.test_loss) << '\n';
    }
  }
  {
    std::ofstream out = open_out(dir / "summary.json");
    out << summary_json(result).dump(2) << '\n';
  }
  {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    json meta{{"generated_at", stamp}, {"spec", experiment_to_json(result.spec)}};
    std::vector<json> errors;
    for (const RunRecord& r : result.runs) {
      if (!r.error.empty()) {
        errors.push_back({{"cell", arms[r.arm].label}, {"run_id", r.run_id}, {"error", r.error}});
      }
    }
    meta["errors"] = errors;
    std::ofstream out = open_out(dir / "metadata.json");
    out << meta.dump(2) << '\n';
  }
  if (options.gnuplot) {
    for (const Arm& arm : arms) {
      std::ofstream out = open_out(dir / ("curves_" + arm.label + ".dat"));
      out << "# epoch";
      std::vector<const ThresholdCurve*> mine;
      for (const ThresholdCurve& c : result.curves) {
        if (c.cell == arm.label) {
          mine.push_back(&c);
          out << ' ' << format_real(c.threshold);
        }
      }
      out << '\n';
      for (std::size_t e = 0; e < result.epochs; ++e) {
        out << e + 1;
        for (const ThresholdCurve* c : mine) out << ' ' << c->counts[e];
        out << '\n';
      }
    }
  }
}

}  // namespace dmu
