#pragma once
// Grammar-based domain corpora and a noisy symbol channel.
//
// Every content word belongs to a confusion group of up to four words, one
// per spec (spec order generic, music, weather, sports for the built-ins).
// Group members share a consonant prefix and end in different vowels of one
// vowel quad; channel noise swaps a symbol for another member of its
// confusable set, so a noisy vowel can turn a domain word into its neighbour
// from another domain and only the sentence context tells them apart.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace das {

struct Template {
  std::string text;  // words and {slot} references
  double weight = 1.0;
};

struct DomainSpec {
  std::string name;
  std::vector<Template> templates;
  std::map<std::string, std::vector<std::string>> slots;

  /// Throws ConfigError on unknown slots, empty vocabularies or bad weights.
  void validate() const;
  /// Slot words in a fixed order (slot name order, then list order), unique.
  std::vector<std::string> content_words() const;
  /// Literal template words, unique, in first-appearance order.
  std::vector<std::string> template_words() const;
};

std::vector<DomainSpec> builtin_domain_specs();  // generic-toy, music-toy, weather-toy, sports-toy
const DomainSpec& builtin_domain_spec(const std::string& name);
std::vector<std::string> builtin_domain_names();

DomainSpec domain_spec_from_json(const nlohmann::json& j);
nlohmann::json domain_spec_to_json(const DomainSpec& spec);
/// A JSON file holding one spec object or an array of them.
std::vector<DomainSpec> load_domain_specs(const std::filesystem::path& file);

enum class Split { train, test };
std::string to_string(Split s);
Split parse_split(const std::string& text);

/// Target vocabulary plus the channel's pronunciation table.
class Lexicon {
 public:
  static constexpr int kSeparator = 1;  // source symbol between words; 0 is unused padding
  static constexpr std::size_t kConsonants = 16;
  static constexpr std::size_t kVowels = 16;

  /// Specials, then template words, then content words, spec by spec.
  static Lexicon build(std::span<const DomainSpec> specs);
  static Lexicon builtin();

  std::size_t vocab_size() const noexcept { return words_.size(); }
  static constexpr std::size_t source_vocab_size() { return 2 + kConsonants + kVowels; }

  const std::string& word(int id) const;
  int id(const std::string& word) const;  // VocabularyError when unknown
  bool contains(const std::string& word) const { return index_.count(word) != 0; }
  const std::vector<std::string>& words() const noexcept { return words_; }

  /// Pronunciation of one token: 2 or 3 symbols.
  const std::vector<int>& code(int id) const;
  /// Symbols a given symbol may be confused with (excluding itself).
  std::span<const int> confusable(int symbol) const;

  std::vector<int> tokenize(const std::string& text) const;
  std::string detokenize(std::span<const int> tokens) const;

  /// Table lookup of separator-delimited codes; unknown codes map to nothing.
  std::vector<int> decode_clean(std::span<const int> source) const;

  /// Hash over words and codes; recorded with corpora and checkpoints.
  std::string fingerprint() const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
  std::vector<std::vector<int>> codes_;
  std::map<std::vector<int>, int> by_code_;
  std::vector<std::vector<int>> confusable_;
};

/// Maps tokens to separator-delimited symbols and substitutes each non
/// separator symbol with probability `noise_rate` by a random confusable one.
std::vector<int> channel_encode(const Lexicon& lex, std::span<const int> tokens, double noise_rate,
                                std::uint64_t seed);

struct CorpusExample {
  std::string text;
  std::vector<int> target;  // token ids, no bos/eos
  std::vector<int> source;  // channel symbols
  std::string domain;
};

struct DomainCorpus {
  std::vector<CorpusExample> examples;
  Split split = Split::train;
  std::uint64_t seed = 0;
};

/// Distinct sentences available to one split.
std::size_t split_capacity(const DomainSpec& spec, Split split);

/// n distinct sentences of one split. Each (template, filler) tuple has a fixed
/// split, so train and test never share a sentence.
DomainCorpus gen_domain_corpus(const DomainSpec& spec, const Lexicon& lex, std::size_t n, std::uint64_t seed,
                               Split split, double noise_rate);

void write_corpus(const std::filesystem::path& file, const DomainCorpus& corpus);
DomainCorpus read_corpus(const std::filesystem::path& file, const Lexicon& lex);

/// Deterministic helpers (std distributions are implementation-defined).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);
std::uint64_t mix_seed(std::uint64_t seed, const std::string& salt);
std::size_t uniform_index(std::mt19937_64& rng, std::size_t n);
double uniform_unit(std::mt19937_64& rng);

}  // namespace das
