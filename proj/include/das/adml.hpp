#pragma once
// Auto-regressive decoding with multiple adapters: every step fans out to the
// base and all adapters over one shared prefix, then one next token is chosen
// by the confidence-threshold rule
//   max_i c_i - c_0 >= tau   OR   min_i c_i - c_0 <= -tau   (i = 0..k).

#include <cstddef>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "das/model.hpp"
#include "das/multilora.hpp"

namespace das {

enum class MinOnlyBehavior { literal_min_word, fallback_to_base };

enum class Condition { none, max_only, min_only, both };

std::string to_string(MinOnlyBehavior b);
std::string to_string(Condition c);
MinOnlyBehavior parse_min_only_behavior(const std::string& text);

struct SelectionPolicy {
  float tau = 0.025f;
  std::size_t max_len = 64;
  MinOnlyBehavior min_only = MinOnlyBehavior::literal_min_word;

  static constexpr float kNever = std::numeric_limits<float>::infinity();

  /// Throws ParameterError unless tau >= 0 (infinity allowed) and max_len >= 1.
  void validate() const;
};

struct Selection {
  int token = 0;
  std::size_t branch = 0;
  Condition condition = Condition::none;
};

/// Applies the threshold rule to k + 1 candidates (branch 0 first).
Selection select_next(std::span<const Candidate> candidates, const SelectionPolicy& policy);

struct StepRecord {
  std::size_t step = 0;
  std::size_t chosen_branch = 0;
  Condition condition = Condition::none;
  std::vector<int> tokens;
  std::vector<float> confidences;
};

struct DecodedOutput {
  std::vector<int> tokens;  // excludes bos, includes eos if produced
  std::vector<StepRecord> provenance;
  bool hit_max_len = false;
};

DecodedOutput adml_decode(const AdapterBank& bank, const EncoderOutput& enc, const SelectionPolicy& policy,
                          FanoutMode mode = FanoutMode::batched);

/// One line-delimited JSON record per step.
void write_provenance(std::ostream& out, const DecodedOutput& decoded, const std::vector<std::string>& branch_names);

}  // namespace das
