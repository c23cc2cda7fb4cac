#include "das/datagen.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "das/error.hpp"
#include "das/model.hpp"

namespace das {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Deterministic randomness

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t seed, const std::string& salt) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : salt) h = (h ^ c) * 1099511628211ULL;
  return mix_seed(seed, h);
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  if (n == 0) throw ParameterError("uniform_index: empty range");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t v = rng();
  while (v >= limit) v = rng();
  return static_cast<std::size_t>(v % n);
}

double uniform_unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// ---------------------------------------------------------------------------
// Specs

namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

bool is_slot(const std::string& w) { return w.size() > 2 && w.front() == '{' && w.back() == '}'; }
std::string slot_name(const std::string& w) { return w.substr(1, w.size() - 2); }

}  // namespace

void DomainSpec::validate() const {
  if (name.empty()) throw ConfigError("domain spec without a name");
  if (templates.empty()) throw ConfigError("domain '" + name + "' has no templates");
  std::set<std::string> seen_templates;
  for (const auto& t : templates) {
    if (!(t.weight > 0.0)) throw ConfigError("domain '" + name + "': template weight must be positive");
    if (!seen_templates.insert(t.text).second) throw ConfigError("domain '" + name + "': duplicate template");
    const auto words = split_words(t.text);
    if (words.empty()) throw ConfigError("domain '" + name + "': empty template");
    for (const auto& w : words) {
      if (!is_slot(w)) continue;
      auto it = slots.find(slot_name(w));
      if (it == slots.end()) throw ConfigError("domain '" + name + "': template uses unknown slot " + w);
      if (it->second.empty()) throw ConfigError("domain '" + name + "': slot " + w + " has no words");
    }
  }
}

std::vector<std::string> DomainSpec::content_words() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& [slot, words] : slots)
    for (const auto& w : words)
      if (seen.insert(w).second) out.push_back(w);
  return out;
}

std::vector<std::string> DomainSpec::template_words() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& t : templates)
    for (const auto& w : split_words(t.text))
      if (!is_slot(w) && seen.insert(w).second) out.push_back(w);
  return out;
}

std::vector<DomainSpec> builtin_domain_specs() {
  std::vector<DomainSpec> specs(4);

  DomainSpec& g = specs[0];
  g.name = "generic-toy";
  g.slots = {
      {"name", {"mary", "john", "thomas", "elizabeth", "henry", "anne", "charles", "margaret", "george", "alice"}},
      {"noun", {"house", "river", "garden", "letter", "window", "horse", "king", "soldier", "village", "mother",
                "doctor", "forest", "kitchen", "ship", "church", "road"}},
      {"adj", {"old", "little", "dark", "quiet", "bright", "strange", "heavy", "gentle", "empty", "ancient",
               "narrow", "silent"}},
      {"verb", {"opened", "carried", "followed", "watched", "remembered", "wrote", "crossed", "found", "left",
                "heard", "painted", "built"}},
  };
  g.templates = {
      {"{name} {verb} the {adj} {noun}", 3.0},
      {"the {noun} was {adj} and {adj}", 2.0},
      {"{name} {verb} the {noun} in the {noun}", 2.0},
      {"it was a {adj} {noun} by the {noun}", 2.0},
      {"she {verb} a {noun} for {name}", 1.5},
      {"there was an {adj} {noun} near the {adj} {noun}", 1.5},
      {"{name} and {name} {verb} the {noun}", 1.0},
  };

  DomainSpec& m = specs[1];
  m.name = "music-toy";
  m.slots = {
      {"artist", {"adele", "beyonce", "coldplay", "drake", "eminem", "madonna", "metallica", "nirvana", "queen",
                  "rihanna", "shakira", "springsteen"}},
      {"song", {"yesterday", "thriller", "imagine", "halo", "roar", "believer", "jolene", "dreams", "hurt",
                "creep", "clocks", "vogue"}},
      {"genre", {"jazz", "rock", "blues", "reggae", "techno", "country", "disco", "opera"}},
      {"thing", {"album", "playlist", "track", "singer", "band", "concert", "chorus", "lyrics", "guitar",
                 "radio"}},
      {"era", {"eighties", "nineties", "seventies", "sixties", "classic", "acoustic", "live", "remix"}},
  };
  m.templates = {
      {"what's the title of {artist} first {era} {thing}", 1.0},
      {"play {song} by {artist} on the {thing}", 2.0},
      {"play some {era} {genre} music by {artist}", 1.5},
      {"who sings the song {song} on the {era} {thing}", 1.5},
      {"add {song} by {artist} to my {genre} {thing}", 2.0},
      {"when did {artist} release the {era} {thing}", 1.5},
      {"is {artist} a {genre} {thing}", 1.0},
  };

  DomainSpec& w = specs[2];
  w.name = "weather-toy";
  w.slots = {
      {"city", {"paris", "london", "tokyo", "chicago", "boston", "denver", "seattle", "dallas", "miami", "berlin",
                "madrid", "sydney"}},
      {"day", {"monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "today",
               "tomorrow", "tonight"}},
      {"sky", {"rain", "snow", "sunny", "cloudy", "windy", "foggy", "storm", "thunder", "humid", "freezing"}},
      {"measure", {"forecast", "temperature", "degrees", "umbrella", "jacket", "humidity", "sunrise", "sunset"}},
      {"part", {"morning", "afternoon", "evening", "noon", "midnight", "weekend", "overnight", "hourly"}},
  };
  w.templates = {
      {"what's the weather in {city} {day} {part}", 2.0},
      {"will it {sky} in {city} on {day} {part}", 2.0},
      {"tell me the {measure} for {city} this {part}", 2.0},
      {"do i need an {measure} in {city} {day}", 1.5},
      {"is it {sky} in {city} right now or {day}", 1.0},
      {"what is the {measure} on {day} {part}", 1.5},
      {"how {sky} will {city} be {day}", 1.0},
  };

  DomainSpec& s = specs[3];
  s.name = "sports-toy";
  s.slots = {
      {"team", {"lakers", "yankees", "patriots", "warriors", "celtics", "dodgers", "packers", "cowboys", "bulls",
                "giants", "eagles", "steelers"}},
      {"sport", {"football", "basketball", "baseball", "hockey", "soccer", "tennis", "golf", "cricket"}},
      {"player", {"jordan", "brady", "messi", "serena", "federer", "lebron", "curry", "ronaldo", "kobe",
                  "ohtani", "mahomes", "bird"}},
      {"event", {"score", "game", "match", "season", "playoffs", "championship", "league", "coach", "stadium",
                 "tournament"}},
      {"result", {"won", "lost", "beat", "tied", "scored", "drafted", "traded", "signed"}},
  };
  s.templates = {
      {"who {result} the {team} {event} last night", 2.0},
      {"what's the {event} of the {team} {sport} {event}", 1.5},
      {"did {player} play in the {event} for the {team}", 2.0},
      {"how many points has {player} {result} this {event}", 1.5},
      {"when is the next {team} {sport} {event}", 1.5},
      {"tell me about {player} and the {team} {event}", 1.0},
      {"which {sport} team {result} the {event}", 1.0},
  };

  for (const auto& spec : specs) spec.validate();
  return specs;
}

std::vector<std::string> builtin_domain_names() {
  std::vector<std::string> out;
  for (const auto& s : builtin_domain_specs()) out.push_back(s.name);
  return out;
}

const DomainSpec& builtin_domain_spec(const std::string& name) {
  static const std::vector<DomainSpec> specs = builtin_domain_specs();
  for (const auto& s : specs)
    if (s.name == name) return s;
  std::string list;
  for (const auto& s : specs) list += (list.empty() ? "" : ", ") + s.name;
  throw ConfigError("unknown domain '" + name + "'; available: " + list);
}

DomainSpec domain_spec_from_json(const json& j) {
  DomainSpec s;
  try {
    s.name = j.at("name").get<std::string>();
    for (const auto& t : j.at("templates")) {
      if (t.is_string())
        s.templates.push_back({t.get<std::string>(), 1.0});
      else
        s.templates.push_back({t.at("text").get<std::string>(), t.value("weight", 1.0)});
    }
    for (const auto& [slot, words] : j.at("slots").items()) s.slots[slot] = words.get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("domain spec: ") + e.what());
  }
  s.validate();
  return s;
}

json domain_spec_to_json(const DomainSpec& spec) {
  json templates = json::array();
  for (const auto& t : spec.templates) templates.push_back({{"text", t.text}, {"weight", t.weight}});
  return json{{"name", spec.name}, {"templates", templates}, {"slots", spec.slots}};
}

std::vector<DomainSpec> load_domain_specs(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed domain spec file " + file.string() + ": " + e.what());
  }
  std::vector<DomainSpec> out;
  if (j.is_array()) {
    for (const auto& e : j) out.push_back(domain_spec_from_json(e));
  } else {
    out.push_back(domain_spec_from_json(j));
  }
  return out;
}

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

Split parse_split(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "test") return Split::test;
  throw ConfigError("unknown split '" + text + "'");
}

// ---------------------------------------------------------------------------
// Lexicon

namespace {

constexpr int kFirstConsonant = 2;
constexpr int kFirstVowel = 2 + static_cast<int>(Lexicon::kConsonants);
constexpr std::size_t kQuads = Lexicon::kVowels / 4;
constexpr std::size_t kMaxGroups = (Lexicon::kConsonants + Lexicon::kConsonants * Lexicon::kConsonants) * kQuads;

std::vector<int> group_code(std::size_t group, std::size_t member) {
  const std::size_t prefix = group / kQuads;
  const std::size_t quad = group % kQuads;
  std::vector<int> code;
  if (prefix < Lexicon::kConsonants) {
    code.push_back(kFirstConsonant + static_cast<int>(prefix));
  } else {
    const std::size_t p = prefix - Lexicon::kConsonants;
    code.push_back(kFirstConsonant + static_cast<int>(p / Lexicon::kConsonants));
    code.push_back(kFirstConsonant + static_cast<int>(p % Lexicon::kConsonants));
  }
  code.push_back(kFirstVowel + static_cast<int>(quad * 4 + member));
  return code;
}

}  // namespace

Lexicon Lexicon::build(std::span<const DomainSpec> specs) {
  Lexicon lex;
  auto add = [&](const std::string& w) {
    lex.index_[w] = static_cast<int>(lex.words_.size());
    lex.words_.push_back(w);
  };
  add("<pad>");
  add("<bos>");
  add("<eos>");
  lex.codes_.assign(3, {});

  std::map<std::string, std::string> owner;
  for (const auto& spec : specs) {
    spec.validate();
    for (const auto& w : spec.content_words()) {
      auto [it, fresh] = owner.emplace(w, spec.name);
      if (!fresh && it->second != spec.name)
        throw ConfigError("content word '" + w + "' appears in both " + it->second + " and " + spec.name);
    }
  }
  std::size_t group = 0;
  for (const auto& spec : specs) {
    for (const auto& w : spec.template_words()) {
      if (owner.count(w)) throw ConfigError("word '" + w + "' is both a template word and a content word");
      if (lex.index_.count(w)) continue;
      if (group >= kMaxGroups) throw CapacityError("lexicon: too many words for the channel alphabet");
      add(w);
      lex.codes_.push_back(group_code(group++, 0));
    }
  }
  // Content word j of spec s joins group j of its block of four specs, as
  // member s % 4.
  std::size_t block_start = group;
  for (std::size_t first = 0; first < specs.size(); first += 4) {
    std::size_t widest = 0;
    for (std::size_t s = first; s < std::min(specs.size(), first + 4); ++s) {
      const auto words = specs[s].content_words();
      for (std::size_t j = 0; j < words.size(); ++j) {
        if (block_start + j >= kMaxGroups) throw CapacityError("lexicon: too many words for the channel alphabet");
        add(words[j]);
        lex.codes_.push_back(group_code(block_start + j, s % 4));
      }
      widest = std::max(widest, words.size());
    }
    block_start += widest;
  }
  for (std::size_t i = 3; i < lex.codes_.size(); ++i) {
    if (!lex.by_code_.emplace(lex.codes_[i], static_cast<int>(i)).second)
      throw InvariantError("lexicon: duplicate channel code");
  }

  lex.confusable_.assign(source_vocab_size(), {});
  for (std::size_t c = 0; c < kConsonants; ++c) {
    const int sym = kFirstConsonant + static_cast<int>(c);
    lex.confusable_[sym] = {kFirstConsonant + static_cast<int>(c ^ 1)};
  }
  for (std::size_t v = 0; v < kVowels; ++v) {
    const int sym = kFirstVowel + static_cast<int>(v);
    const std::size_t base = v - v % 4;
    for (std::size_t o = base; o < base + 4; ++o)
      if (o != v) lex.confusable_[sym].push_back(kFirstVowel + static_cast<int>(o));
  }
  return lex;
}

Lexicon Lexicon::builtin() {
  const auto specs = builtin_domain_specs();
  return build(specs);
}

const std::string& Lexicon::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
  return words_[static_cast<std::size_t>(id)];
}

int Lexicon::id(const std::string& w) const {
  auto it = index_.find(w);
  if (it == index_.end()) throw VocabularyError("unknown word '" + w + "'");
  return it->second;
}

const std::vector<int>& Lexicon::code(int id) const {
  if (id < 3 || static_cast<std::size_t>(id) >= codes_.size())
    throw VocabularyError("token id " + std::to_string(id) + " has no pronunciation");
  return codes_[static_cast<std::size_t>(id)];
}

std::span<const int> Lexicon::confusable(int symbol) const {
  if (symbol < 0 || static_cast<std::size_t>(symbol) >= confusable_.size())
    throw VocabularyError("source symbol " + std::to_string(symbol) + " outside alphabet");
  return confusable_[static_cast<std::size_t>(symbol)];
}

std::vector<int> Lexicon::tokenize(const std::string& text) const {
  std::vector<int> out;
  for (const auto& w : split_words(text)) out.push_back(id(w));
  return out;
}

std::string Lexicon::detokenize(std::span<const int> tokens) const {
  std::string out;
  for (int t : tokens) {
    if (t == kEos) break;
    if (t == kPad || t == kBos) continue;
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

std::vector<int> Lexicon::decode_clean(std::span<const int> source) const {
  std::vector<int> out;
  std::vector<int> cur;
  auto flush = [&] {
    if (cur.empty()) return;
    auto it = by_code_.find(cur);
    if (it != by_code_.end()) out.push_back(it->second);
    cur.clear();
  };
  for (int s : source) {
    if (s == kSeparator)
      flush();
    else
      cur.push_back(s);
  }
  flush();
  return out;
}

std::string Lexicon::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](unsigned char c) { h = (h ^ c) * 1099511628211ULL; };
  for (std::size_t i = 0; i < words_.size(); ++i) {
    for (unsigned char c : words_[i]) feed(c);
    feed(0);
    for (int s : codes_[i]) feed(static_cast<unsigned char>(s));
    feed(0xff);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<int> channel_encode(const Lexicon& lex, std::span<const int> tokens, double noise_rate,
                                std::uint64_t seed) {
  if (!(noise_rate >= 0.0 && noise_rate <= 0.5)) throw ParameterError("noise_rate must lie in [0, 0.5]");
  std::mt19937_64 rng(seed);
  std::vector<int> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out.push_back(Lexicon::kSeparator);
    for (int sym : lex.code(tokens[i])) {
      if (noise_rate > 0.0 && uniform_unit(rng) < noise_rate) {
        const auto alts = lex.confusable(sym);
        sym = alts[uniform_index(rng, alts.size())];
      }
      out.push_back(sym);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus generation

namespace {

constexpr std::uint64_t kSaturate = std::uint64_t{1} << 62;
constexpr std::uint64_t kTestStride = 10;  // index % 10 == 9 belongs to test

struct ParsedTemplate {
  std::vector<std::string> parts;                     // literal word or ""
  std::vector<const std::vector<std::string>*> vocab;  // per part, null for literals
  std::uint64_t product = 1;
};

std::vector<ParsedTemplate> parse_templates(const DomainSpec& spec) {
  spec.validate();
  std::vector<ParsedTemplate> out;
  for (const auto& t : spec.templates) {
    ParsedTemplate p;
    for (const auto& w : split_words(t.text)) {
      if (is_slot(w)) {
        const auto* v = &spec.slots.at(slot_name(w));
        p.parts.emplace_back();
        p.vocab.push_back(v);
        p.product = p.product > kSaturate / v->size() ? kSaturate : p.product * v->size();
      } else {
        p.parts.push_back(w);
        p.vocab.push_back(nullptr);
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::uint64_t template_capacity(std::uint64_t product, Split split) {
  const std::uint64_t test = product / kTestStride;
  return split == Split::test ? test : product - test;
}

std::uint64_t split_to_index(std::uint64_t j, Split split) {
  if (split == Split::test) return j * kTestStride + (kTestStride - 1);
  return (j / (kTestStride - 1)) * kTestStride + j % (kTestStride - 1);
}

std::string render(const ParsedTemplate& t, std::uint64_t index) {
  std::vector<std::string> words(t.parts.size());
  for (std::size_t i = t.parts.size(); i-- > 0;) {
    if (t.vocab[i] == nullptr) {
      words[i] = t.parts[i];
    } else {
      const std::size_t n = t.vocab[i]->size();
      words[i] = (*t.vocab[i])[index % n];
      index /= n;
    }
  }
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

}  // namespace

std::size_t split_capacity(const DomainSpec& spec, Split split) {
  std::uint64_t total = 0;
  for (const auto& t : parse_templates(spec)) total = std::min(kSaturate, total + template_capacity(t.product, split));
  return static_cast<std::size_t>(total);
}

DomainCorpus gen_domain_corpus(const DomainSpec& spec, const Lexicon& lex, std::size_t n, std::uint64_t seed,
                               Split split, double noise_rate) {
  if (n == 0) throw ParameterError("corpus size must be >= 1");
  const auto templates = parse_templates(spec);
  const std::size_t capacity = split_capacity(spec, split);
  if (n > capacity)
    throw CapacityError("domain '" + spec.name + "' holds " + std::to_string(capacity) + " distinct " +
                        to_string(split) + " sentences; " + std::to_string(n) + " requested");

  std::vector<double> weights;
  std::vector<std::uint64_t> left;
  for (std::size_t i = 0; i < templates.size(); ++i) {
    left.push_back(template_capacity(templates[i].product, split));
    weights.push_back(left.back() > 0 ? spec.templates[i].weight : 0.0);
  }
  std::mt19937_64 rng(mix_seed(seed, spec.name + "/" + to_string(split)));
  std::set<std::pair<std::size_t, std::uint64_t>> used;

  DomainCorpus corpus;
  corpus.split = split;
  corpus.seed = seed;
  corpus.examples.reserve(n);
  while (corpus.examples.size() < n) {
    double total = 0.0;
    for (double w : weights) total += w;
    double pick = uniform_unit(rng) * total;
    std::size_t t = 0;
    while (t + 1 < weights.size() && (weights[t] == 0.0 || pick >= weights[t])) {
      pick -= weights[t];
      ++t;
    }
    const std::uint64_t cap = template_capacity(templates[t].product, split);
    // Draw fillers until an unused one turns up; a nearly exhausted template
    // is enumerated instead.
    std::uint64_t index = 0;
    bool found = false;
    if (left[t] * 4 >= cap) {
      for (int tries = 0; tries < 64 && !found; ++tries) {
        index = split_to_index(static_cast<std::uint64_t>(uniform_index(rng, cap)), split);
        found = used.emplace(t, index).second;
      }
    }
    if (!found) {
      std::uint64_t skip = uniform_index(rng, left[t]);
      for (std::uint64_t j = 0; j < cap; ++j) {
        const std::uint64_t candidate = split_to_index(j, split);
        if (used.count({t, candidate})) continue;
        if (skip-- == 0) {
          index = candidate;
          used.emplace(t, index);
          break;
        }
      }
    }
    if (--left[t] == 0) weights[t] = 0.0;

    CorpusExample ex;
    ex.text = render(templates[t], index);
    ex.domain = spec.name;
    ex.target = lex.tokenize(ex.text);
    ex.source = channel_encode(lex, ex.target, noise_rate, mix_seed(seed, spec.name + "#" + to_string(split) + "#" +
                                                                             std::to_string(corpus.examples.size())));
    corpus.examples.push_back(std::move(ex));
  }
  return corpus;
}

void write_corpus(const std::filesystem::path& file, const DomainCorpus& corpus) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  for (const auto& ex : corpus.examples) {
    json j{{"text", ex.text}, {"domain", ex.domain}, {"source", ex.source}, {"split", to_string(corpus.split)}};
    out << j.dump() << '\n';
  }
}

DomainCorpus read_corpus(const std::filesystem::path& file, const Lexicon& lex) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open " + file.string());
  DomainCorpus corpus;
  std::string line;
  std::size_t lineno = 0;
  bool split_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      CorpusExample ex;
      ex.text = j.at("text").get<std::string>();
      ex.domain = j.at("domain").get<std::string>();
      ex.source = j.at("source").get<std::vector<int>>();
      ex.target = lex.tokenize(ex.text);
      const Split s = parse_split(j.at("split").get<std::string>());
      if (split_seen && s != corpus.split) throw ConfigError("mixed splits");
      corpus.split = s;
      split_seen = true;
      for (int sym : ex.source)
        if (sym < 0 || static_cast<std::size_t>(sym) >= Lexicon::source_vocab_size())
          throw VocabularyError("source symbol " + std::to_string(sym) + " outside alphabet");
      corpus.examples.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw IoError(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw IoError(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return corpus;
}

}  // namespace das
