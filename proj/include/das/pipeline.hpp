#pragma once
// The full toy pipeline: corpora, base model, one adapter per domain, WER
// grids and the latency benchmark, all written under one output directory.

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "das/evalbench.hpp"
#include "das/lora.hpp"
#include "das/model.hpp"
#include "das/train.hpp"
#include "json.hpp"

namespace das {

struct PipelineConfig {
  std::uint64_t seed = 7;
  double noise_rate = 0.15;
  std::vector<std::string> domains{"music-toy", "weather-toy", "sports-toy"};
  std::string generic = "generic-toy";
  std::size_t generic_train = 4000;
  std::size_t domain_train = 4000;
  std::size_t test_size = 400;
  std::size_t pretrain_per_domain = 200;  // domain sentences mixed into base pretraining
  double sanity_ceiling = 0.25;           // generic-toy test WER bound for the base model

  ModelConfig model;  // vocabulary sizes are filled from the lexicon
  TrainConfig base_train;
  TrainConfig adapter_train;
  LoraConfig lora;
  SelectionPolicy policy;

  bool scope_study = true;
  std::size_t scope_last_n = 1;
  TrainConfig scope_train;

  std::vector<std::size_t> bench_k{1, 2, 3, 10, 25};
  std::size_t bench_utterances = 100;
  BenchConfig bench;

  static PipelineConfig defaults();
  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
};

struct PipelineResult {
  WerGrid grid;     // rows original, lora-<domain>..., das, das-fallback; cols domains then generic
  WerGrid scope;    // empty unless enabled
  std::vector<BenchReport> bench;
  nlohmann::json summary;
};

PipelineResult reproduce_tables(const PipelineConfig& config, const std::filesystem::path& out_dir,
                                std::ostream* progress = nullptr);

}  // namespace das
