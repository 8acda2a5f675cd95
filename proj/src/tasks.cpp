// SPDX-License-Identifier: Apache-2.0
#include "dmu/tasks.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace dmu {

using ad::Matrix;

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::adding: return "adding";
    case TaskKind::tempord: return "tempord";
    case TaskKind::noiseseq: return "noiseseq";
  }
  return "?";
}

std::optional<TaskKind> parse_task_kind(std::string_view name) {
  for (TaskKind k : {TaskKind::adding, TaskKind::tempord, TaskKind::noiseseq}) {
    if (name == to_string(k)) return k;
  }
  return std::nullopt;
}

TempOrdConfig TempOrdConfig::desk_scale() {
  TempOrdConfig c;
  c.min_length = 20;
  c.max_length = 25;
  c.t1_min = 2, c.t1_max = 4;
  c.t2_min = 8, c.t2_max = 10;
  c.t3_min = 14, c.t3_max = 16;
  return c;
}

void TempOrdConfig::validate() const {
  const bool ok = min_length <= max_length && t1_min >= 1 && t1_min <= t1_max &&
                  t2_min <= t2_max && t3_min <= t3_max && t1_max < t2_min &&
                  t2_max < t3_min && t3_max + 1 < min_length;
  if (!ok) {
    throw std::invalid_argument(
        "TempOrd ranges must satisfy 1 <= t1 < t2 < t3 < length - 1 for every draw");
  }
}

TaskSpec TaskSpec::full_scale(TaskKind kind) {
  TaskSpec s;
  s.kind = kind;
  return s;
}

TaskSpec TaskSpec::desk_scale(TaskKind kind) {
  TaskSpec s;
  s.kind = kind;
  s.adding.min_length = 20;
  s.adding.max_length = 30;
  s.tempord = TempOrdConfig::desk_scale();
  s.noiseseq.n = 10;
  return s;
}

void TaskSpec::validate() const {
  switch (kind) {
    case TaskKind::adding:
      if (adding.min_length < 4 || adding.min_length > adding.max_length) {
        throw std::invalid_argument("Adding lengths must satisfy 4 <= min <= max");
      }
      break;
    case TaskKind::tempord: tempord.validate(); break;
    case TaskKind::noiseseq:
      if (noiseseq.n < 3) throw std::invalid_argument("NoiseSeq needs n >= 3");
      break;
  }
}

std::size_t TaskSpec::input_width() const {
  switch (kind) {
    case TaskKind::adding: return 2;
    case TaskKind::tempord: return tempord::kSymbols;
    case TaskKind::noiseseq: return noiseseq.n;
  }
  return 0;
}

std::size_t TaskSpec::output_width() const {
  switch (kind) {
    case TaskKind::adding: return 1;
    case TaskKind::tempord: return tempord::kSymbols;
    case TaskKind::noiseseq: return noiseseq.n;
  }
  return 0;
}

LossKind TaskSpec::loss() const {
  return kind == TaskKind::adding ? LossKind::mse : LossKind::cross_entropy;
}

// Adding ------------------------------------------------------------------

namespace {

Sample adding_sample(std::size_t length, bool original_windows, Rng& rng) {
  Sample s;
  s.inputs = Matrix(length, 2);
  for (std::size_t t = 0; t < length; ++t) s.inputs(t, 0) = rng.uniform(-1.0, 1.0);
  s.inputs(0, 1) = -1.0;
  s.inputs(length - 1, 1) = -1.0;

  std::size_t first = 0, second = 0;
  if (original_windows) {
    const std::size_t first_hi = std::min<std::size_t>(10, length - 2);
    const std::size_t second_hi = std::max<std::size_t>(1, length / 2 - 1);
    do {
      first = rng.uniform_int(1, first_hi);
      second = rng.uniform_int(1, second_hi);
    } while (first == second);
  } else {
    first = rng.uniform_int(1, length - 2);
    do {
      second = rng.uniform_int(1, length - 2);
    } while (second == first);
  }
  s.inputs(first, 1) = 1.0;
  s.inputs(second, 1) = 1.0;
  s.target = {s.inputs(first, 0) + s.inputs(second, 0)};
  s.loss_at = length - 1;
  return s;
}

std::size_t draw_between(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.uniform_int(lo, hi));
}

}  // namespace

Sample gen_adding(std::size_t min_length, std::size_t max_length, Rng& rng) {
  AddingConfig c;
  c.min_length = min_length;
  c.max_length = max_length;
  return gen_adding(c, rng);
}

Sample gen_adding(const AddingConfig& config, Rng& rng) {
  if (config.min_length < 4 || config.min_length > config.max_length) {
    throw std::invalid_argument("Adding lengths must satisfy 4 <= min <= max, got [" +
                                std::to_string(config.min_length) + ", " +
                                std::to_string(config.max_length) + "]");
  }
  const std::size_t length = draw_between(rng, config.min_length, config.max_length);
  return adding_sample(length, config.original_windows, rng);
}

// TempOrd -----------------------------------------------------------------

Sample gen_tempord(const TempOrdConfig& config, Rng& rng) {
  config.validate();
  const std::size_t length = draw_between(rng, config.min_length, config.max_length);
  const std::size_t marks[3] = {draw_between(rng, config.t1_min, config.t1_max),
                                draw_between(rng, config.t2_min, config.t2_max),
                                draw_between(rng, config.t3_min, config.t3_max)};
  Sample s;
  s.inputs = Matrix(length, tempord::kSymbols);
  std::size_t cls = 0;
  std::size_t next_mark = 0;
  for (std::size_t t = 0; t < length; ++t) {
    std::size_t symbol;
    if (t == 0) {
      symbol = tempord::kStart;
    } else if (t + 1 == length) {
      symbol = tempord::kEnd;
    } else if (next_mark < 3 && t == marks[next_mark]) {
      const bool y = rng.coin();
      symbol = y ? tempord::kY : tempord::kX;
      cls = 2 * cls + (y ? 1 : 0);
      ++next_mark;
    } else {
      symbol = tempord::kFirstFiller + draw_between(rng, 0, 3);
    }
    s.inputs(t, symbol) = 1.0;
  }
  s.target_class = cls;
  s.loss_at = length - 1;
  return s;
}

Sample gen_tempord(Rng& rng) { return gen_tempord(TempOrdConfig{}, rng); }

// NoiseSeq ----------------------------------------------------------------

NoiseSeqSymbols draw_noiseseq_symbols(std::size_t n, Rng& rng) {
  if (n < 3) throw std::invalid_argument("NoiseSeq needs n >= 3");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[draw_between(rng, 0, i)]);
  NoiseSeqSymbols s;
  s.n = n;
  s.x = perm[0];
  s.y = perm[1];
  s.fillers.assign(perm.begin() + 2, perm.end());
  return s;
}

Sample gen_noiseseq(const NoiseSeqSymbols& symbols, Rng& rng) {
  const std::size_t n = symbols.n;
  if (n < 3 || symbols.fillers.size() != n - 2) {
    throw std::invalid_argument("NoiseSeq symbol table is inconsistent with n");
  }
  const std::size_t first = rng.coin() ? symbols.y : symbols.x;
  Sample s;
  s.inputs = Matrix(n - 1, n);
  s.inputs(0, first) = 1.0;
  for (std::size_t t = 1; t < n - 1; ++t) s.inputs(t, symbols.fillers[t - 1]) = 1.0;
  s.target_class = first;
  s.loss_at = n - 2;
  return s;
}

// Batching ----------------------------------------------------------------

Batch collate(std::span<const Sample> samples) {
  if (samples.empty()) throw std::invalid_argument("collate: no samples");
  const std::size_t length = samples.front().length();
  const std::size_t width = samples.front().inputs.cols();
  const std::size_t b = samples.size();
  Batch batch;
  batch.steps.assign(length, Matrix(b, width));
  const bool regression = !samples.front().target.empty();
  if (regression) batch.targets = Matrix(b, samples.front().target.size());
  for (std::size_t i = 0; i < b; ++i) {
    const Sample& s = samples[i];
    if (s.length() != length || s.inputs.cols() != width) {
      throw std::invalid_argument("collate: samples differ in length or width");
    }
    for (std::size_t t = 0; t < length; ++t) {
      for (std::size_t c = 0; c < width; ++c) batch.steps[t](i, c) = s.inputs(t, c);
    }
    if (regression) {
      for (std::size_t c = 0; c < s.target.size(); ++c) batch.targets(i, c) = s.target[c];
    } else {
      if (!s.target_class) throw std::invalid_argument("collate: mixed target kinds");
      batch.classes.push_back(*s.target_class);
    }
  }
  return batch;
}

std::size_t sample_count(const Dataset& data) {
  std::size_t n = 0;
  for (const auto& b : data) n += b.size();
  return n;
}

TaskGenerator::TaskGenerator(TaskSpec spec, std::uint64_t table_seed) : spec_(std::move(spec)) {
  spec_.validate();
  if (spec_.kind == TaskKind::noiseseq) {
    Rng rng(table_seed);
    symbols_ = draw_noiseseq_symbols(spec_.noiseseq.n, rng);
  }
}

std::size_t TaskGenerator::draw_length(Rng& rng) const {
  switch (spec_.kind) {
    case TaskKind::adding:
      return draw_between(rng, spec_.adding.min_length, spec_.adding.max_length);
    case TaskKind::tempord:
      return draw_between(rng, spec_.tempord.min_length, spec_.tempord.max_length);
    case TaskKind::noiseseq: return spec_.noiseseq.n - 1;
  }
  return 0;
}

Sample TaskGenerator::generate(Rng& rng, std::size_t length) const {
  switch (spec_.kind) {
    case TaskKind::adding: {
      AddingConfig c = spec_.adding;
      c.min_length = c.max_length = length;
      return gen_adding(c, rng);
    }
    case TaskKind::tempord: {
      TempOrdConfig c = spec_.tempord;
      c.min_length = c.max_length = length;
      return gen_tempord(c, rng);
    }
    case TaskKind::noiseseq:
      if (length != spec_.noiseseq.n - 1) {
        throw std::invalid_argument("NoiseSeq sequences have length n - 1");
      }
      return gen_noiseseq(symbols_, rng);
  }
  throw std::logic_error("unknown task kind");
}

Sample TaskGenerator::generate(Rng& rng) const { return generate(rng, draw_length(rng)); }

Dataset TaskGenerator::make_dataset(std::size_t samples, std::size_t batch_size,
                                    Rng& rng) const {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  Dataset data;
  std::vector<Sample> buffer;
  for (std::size_t done = 0; done < samples;) {
    const std::size_t b = std::min(batch_size, samples - done);
    const std::size_t length = draw_length(rng);
    buffer.clear();
    for (std::size_t i = 0; i < b; ++i) buffer.push_back(generate(rng, length));
    data.push_back(collate(buffer));
    done += b;
  }
  return data;
}

// Splits ------------------------------------------------------------------

namespace {
enum Stream : std::uint64_t { kSymbolTable = 0, kTrain = 1, kValidation = 2, kTest = 3 };
}

Split::Split(const TaskSpec& spec, const SplitSizes& sizes, std::uint64_t seed)
    : seed_(seed), sizes_(sizes), generator_(spec, derive_seed(seed, {kSymbolTable})) {
  if (sizes.train_per_epoch == 0 || sizes.validation == 0 || sizes.test == 0 ||
      sizes.batch_size == 0) {
    throw std::invalid_argument("split sizes must be positive");
  }
  Rng val(derive_seed(seed, {kValidation}));
  validation_ = generator_.make_dataset(sizes.validation, sizes.batch_size, val);
  Rng test(derive_seed(seed, {kTest}));
  test_ = generator_.make_dataset(sizes.test, sizes.batch_size, test);
}

Dataset Split::train_epoch(std::size_t epoch) const {
  Rng rng(derive_seed(seed_, {kTrain, epoch}));
  return generator_.make_dataset(sizes_.train_per_epoch, sizes_.batch_size, rng);
}

Split make_split(const TaskSpec& spec, const SplitSizes& sizes, std::uint64_t seed) {
  return Split(spec, sizes, seed);
}

nlohmann::json sample_to_json(const Sample& sample) {
  nlohmann::json inputs = nlohmann::json::array();
  for (std::size_t t = 0; t < sample.length(); ++t) {
    std::vector<double> row(sample.inputs.cols());
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = sample.inputs(t, c);
    inputs.push_back(std::move(row));
  }
  nlohmann::json j;
  j["inputs"] = std::move(inputs);
  if (sample.target_class) {
    j["target"] = *sample.target_class;
  } else {
    j["target"] = sample.target;
  }
  j["loss_at"] = sample.loss_at;
  return j;
}

}  // namespace dmu
