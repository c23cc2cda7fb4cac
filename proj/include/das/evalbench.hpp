#pragma once
// Word error rate, decoder-by-dataset WER grids, and the fan-out latency
// benchmark (batched vs sequential adapters against the base model).

#include <chrono>
#include <cstddef>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "das/adml.hpp"
#include "das/datagen.hpp"
#include "das/lora.hpp"
#include "das/model.hpp"
#include "json.hpp"

namespace das {

struct WerCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t reference = 0;

  std::size_t errors() const noexcept { return substitutions + deletions + insertions; }
  double wer() const;
  WerCounts& operator+=(const WerCounts& o);
};

/// Minimum edit alignment with unit costs. When costs tie the backtrace
/// prefers substitution (or match), then insertion, then deletion.
/// Empty reference -> ParameterError.
WerCounts wer(std::span<const int> reference, std::span<const int> hypothesis);
WerCounts wer(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis);

/// Drops pad, bos and everything from eos on. Toy transcripts carry no
/// punctuation or wakewords, so no further normalisation applies.
std::vector<int> normalize_transcript(std::span<const int> tokens);

struct NamedDecoder {
  std::string name;
  std::string tokenizer;  // lexicon fingerprint
  std::function<std::vector<int>(const CorpusExample&)> decode;
};

struct NamedDataset {
  std::string name;
  std::string tokenizer;
  std::span<const CorpusExample> examples;
};

struct WerGrid {
  std::vector<std::string> decoders;  // row 0 is the baseline
  std::vector<std::string> datasets;
  std::vector<std::vector<WerCounts>> cells;

  double wer_at(std::size_t row, std::size_t col) const { return cells.at(row).at(col).wer(); }
  /// 100 * (wer - baseline) / baseline; 0 when both are 0, +inf when only the baseline is 0.
  double relative_change(std::size_t row, std::size_t col) const;

  nlohmann::json to_json() const;
  /// Aligned plain-text table, WER in percent with relative changes.
  std::string to_table(const std::string& title) const;
};

/// Corpus-level WER of every decoder on every dataset. Throws ConfigError
/// when a decoder and a dataset use different tokenizers.
WerGrid eval_matrix(std::span<const NamedDecoder> decoders, std::span<const NamedDataset> datasets);

struct BenchConfig {
  std::size_t repetitions = 5;
  std::size_t warmup = 3;
  SelectionPolicy policy;
  /// Self-test of the agreement guard: perturbs the sequential transcripts.
  bool inject_mismatch = false;
};

struct BenchRow {
  std::string mode;  // base | batched | sequential
  std::size_t k = 0;
  std::size_t rep = 0;
  std::size_t tokens = 0;
  double seconds = 0.0;
};

struct BenchReport {
  std::size_t k = 0;
  std::size_t utterances = 0;
  double base_per_token = 0.0;  // median seconds per generated token
  double batched_per_token = 0.0;
  double sequential_per_token = 0.0;
  double delta_p = 0.0;  // batched / base - 1
  double delta_s = 0.0;  // sequential / base - 1
  double speedup = 0.0;  // delta_s / delta_p
  double base_cov = 0.0;  // coefficient of variation over repetitions
  double batched_cov = 0.0;
  double sequential_cov = 0.0;
  std::string hardware;
  double timer_resolution = 0.0;  // seconds
  std::vector<BenchRow> rows;

  nlohmann::json to_json() const;
};

std::string hardware_descriptor();

/// Times base greedy decoding and ADML over `adapters` in batched and
/// sequential fan-out on the same sources. Both fan-out modes must produce
/// identical transcripts first, otherwise CorrectnessError and no timing.
BenchReport bench_latency(const TransformerWeights& base, const std::vector<LoraAdapter>& adapters,
                          std::span<const std::vector<int>> sources, const BenchConfig& config);

/// Copies of `adapters` cycled until there are k, renamed "<domain>#<i>".
std::vector<LoraAdapter> replicate_adapters(const std::vector<LoraAdapter>& adapters, std::size_t k);

void write_bench_csv(std::ostream& out, std::span<const BenchReport> reports);
/// Table with RTF-analog (ms per token), delta_p, delta_s and speedup rows.
std::string bench_table(std::span<const BenchReport> reports);

}  // namespace das
