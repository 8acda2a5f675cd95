// SPDX-License-Identifier: Apache-2.0
//
// Synthetic long-time-lag benchmarks: Adding, TempOrd (temporal order) and
// NoiseSeq (noisy sequences). Every generator is a pure function of its
// configuration and the random stream it is handed.
//
// Adding is trained as a regression with a linear readout and mean squared
// error: a softmax layer cannot emit a real-valued sum.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dmu/autodiff.hpp"
#include "dmu/rng.hpp"

namespace dmu {

enum class TaskKind { adding, tempord, noiseseq };
enum class LossKind { mse, cross_entropy };

std::string_view to_string(TaskKind kind);
std::optional<TaskKind> parse_task_kind(std::string_view name);

struct AddingConfig {
  std::size_t min_length = 100;
  std::size_t max_length = 110;
  /// Marker windows of the original formulation: first marker within the
  /// first ten steps, second within the first T/2 - 1 steps.
  bool original_windows = false;
};

struct TempOrdConfig {
  std::size_t min_length = 100;
  std::size_t max_length = 110;
  std::size_t t1_min = 10, t1_max = 20;
  std::size_t t2_min = 33, t2_max = 43;
  std::size_t t3_min = 66, t3_max = 76;

  /// Length 20-25, t1 in [2,4], t2 in [8,10], t3 in [14,16].
  static TempOrdConfig desk_scale();
  void validate() const;
};

struct NoiseSeqConfig {
  std::size_t n = 50;
};

struct TaskSpec {
  TaskKind kind = TaskKind::adding;
  AddingConfig adding;
  TempOrdConfig tempord;
  NoiseSeqConfig noiseseq;

  /// Lengths of the original benchmarks (T in [100,110], n = 50).
  static TaskSpec full_scale(TaskKind kind);
  /// Scaled-down lengths: Adding T in [20,30], TempOrd length 20-25, NoiseSeq n = 10.
  static TaskSpec desk_scale(TaskKind kind);

  void validate() const;
  std::size_t input_width() const;
  std::size_t output_width() const;
  LossKind loss() const;
};

/// One sequence. inputs is T x input_width; the loss is taken at loss_at.
struct Sample {
  ad::Matrix inputs;
  std::vector<double> target;             // regression target (Adding)
  std::optional<std::size_t> target_class;  // class target (TempOrd, NoiseSeq)
  std::size_t loss_at = 0;

  std::size_t length() const { return inputs.rows(); }
};

/// Steps are [a, b]: a ~ U[-1, 1]; b = -1 at both ends, 1 at two distinct
/// interior steps, 0 elsewhere. Target is the sum of the two marked a's.
/// Requires 4 <= min_length <= max_length.
Sample gen_adding(std::size_t min_length, std::size_t max_length, Rng& rng);
Sample gen_adding(const AddingConfig& config, Rng& rng);

/// One-hot symbol indices for TempOrd.
namespace tempord {
inline constexpr std::size_t kStart = 0;  // E
inline constexpr std::size_t kEnd = 1;    // B
inline constexpr std::size_t kX = 2;
inline constexpr std::size_t kY = 3;
inline constexpr std::size_t kFirstFiller = 4;  // a, b, c, d
inline constexpr std::size_t kSymbols = 8;
}  // namespace tempord

/// E at step 0, B at the last step, X/Y at t1 < t2 < t3, fillers a-d
/// elsewhere. Class = 4 s1 + 2 s2 + s3 with X -> 0, Y -> 1.
Sample gen_tempord(const TempOrdConfig& config, Rng& rng);
Sample gen_tempord(Rng& rng);

/// Fixed symbol assignment for one NoiseSeq experiment: a permutation of the
/// n one-hot indices into x, y and the fillers a_1 .. a_{n-2}.
struct NoiseSeqSymbols {
  std::size_t n = 0;
  std::size_t x = 0;
  std::size_t y = 1;
  std::vector<std::size_t> fillers;
};
NoiseSeqSymbols draw_noiseseq_symbols(std::size_t n, Rng& rng);

/// (x, a_1, .., a_{n-2}) or (y, a_1, .., a_{n-2}) with probability 1/2 each;
/// target class is the first symbol's index.
Sample gen_noiseseq(const NoiseSeqSymbols& symbols, Rng& rng);

/// Samples stacked along the batch axis; all samples share one length.
struct Batch {
  std::vector<ad::Matrix> steps;  // each batch x input_width
  ad::Matrix targets;             // batch x output_width (regression)
  std::vector<std::size_t> classes;
  std::size_t size() const { return steps.empty() ? 0 : steps.front().rows(); }
  std::size_t length() const { return steps.size(); }
};

/// Throws std::invalid_argument on empty input or mixed lengths.
Batch collate(std::span<const Sample> samples);

using Dataset = std::vector<Batch>;
std::size_t sample_count(const Dataset& data);

/// Task bound to its per-experiment state (the NoiseSeq symbol table).
/// Batches share a sequence length drawn once per batch, so every sample's
/// length is still uniform over the configured range.
class TaskGenerator {
 public:
  TaskGenerator(TaskSpec spec, std::uint64_t table_seed);

  const TaskSpec& spec() const { return spec_; }
  const NoiseSeqSymbols& noiseseq_symbols() const { return symbols_; }

  std::size_t draw_length(Rng& rng) const;
  Sample generate(Rng& rng, std::size_t length) const;
  Sample generate(Rng& rng) const;

  Dataset make_dataset(std::size_t samples, std::size_t batch_size, Rng& rng) const;

 private:
  TaskSpec spec_;
  NoiseSeqSymbols symbols_;
};

struct SplitSizes {
  std::size_t train_per_epoch = 1024;
  std::size_t validation = 512;
  std::size_t test = 512;
  std::size_t batch_size = 16;
};

/// Training data regenerated each epoch from its own substream; validation
/// and test sets are fixed. All three streams derive from one seed.
class Split {
 public:
  Split(const TaskSpec& spec, const SplitSizes& sizes, std::uint64_t seed);

  const TaskGenerator& generator() const { return generator_; }
  const SplitSizes& sizes() const { return sizes_; }
  Dataset train_epoch(std::size_t epoch) const;
  const Dataset& validation() const { return validation_; }
  const Dataset& test() const { return test_; }

 private:
  std::uint64_t seed_;
  SplitSizes sizes_;
  TaskGenerator generator_;
  Dataset validation_;
  Dataset test_;
};

Split make_split(const TaskSpec& spec, const SplitSizes& sizes, std::uint64_t seed);

/// {"inputs": [[...], ...], "target": [...] | class, "loss_at": t}
nlohmann::json sample_to_json(const Sample& sample);

}  // namespace dmu
