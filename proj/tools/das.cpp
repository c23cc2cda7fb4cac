// das: command-line front end for data generation, training, decoding,
// evaluation and benchmarking.
//
// Every command resolves its parameters as defaults <- --config file <-
// flags, writes the result to <out>/resolved_config.json, and can be rerun
// from that snapshot with --config.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "das/adml.hpp"
#include "das/checkpoint.hpp"
#include "das/datagen.hpp"
#include "das/error.hpp"
#include "das/evalbench.hpp"
#include "das/lora.hpp"
#include "das/model.hpp"
#include "das/multilora.hpp"
#include "das/pipeline.hpp"
#include "das/simd.hpp"
#include "das/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kOutputRootEnv = "DAS_OUTPUT_ROOT";

int exit_code_for(const das::Error& e) {
  const std::string k = e.kind();
  if (k == "parameter") return 1;
  if (k == "numeric" || k == "training" || k == "invariant" || k == "correctness") return 3;
  return 2;
}

json read_json_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw das::IoError("cannot open " + file.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw das::ConfigError(file.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& file, const json& j) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw das::IoError("cannot write " + file.string());
  out << j.dump(2) << '\n';
}

void write_text_file(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw das::IoError("cannot write " + file.string());
  out << text;
}

// Flags that override entries of the resolved parameter object. Each binds a
// CLI option to a JSON pointer; only options present on the command line are
// applied.
class Overrides {
 public:
  template <typename T>
  CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& pointer, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(flag, *value, help);
    entries_.push_back({opt, [value, pointer](json& j) { j[json::json_pointer(pointer)] = *value; }});
    return opt;
  }
  CLI::Option* add_flag(CLI::App* app, const std::string& flag, const std::string& pointer, const std::string& help) {
    auto value = std::make_shared<bool>(false);
    CLI::Option* opt = app->add_flag(flag, *value, help);
    entries_.push_back({opt, [value, pointer](json& j) { j[json::json_pointer(pointer)] = *value; }});
    return opt;
  }
  void apply(json& j) const {
    for (const auto& e : entries_)
      if (e.option->count() > 0) e.set(j);
  }

 private:
  struct Entry {
    CLI::Option* option;
    std::function<void(json&)> set;
  };
  std::vector<Entry> entries_;
};

struct Common {
  std::string config_file;
  std::string out;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c, Overrides& ov) {
  app->add_option("--config", c.config_file, "JSON file with parameters (flags take precedence)");
  app->add_option("--out", c.out, std::string("output directory (default $") + kOutputRootEnv + "/<command>)");
  app->add_flag("--quiet", c.quiet, "suppress progress output");
  ov.add<std::uint64_t>(app, "--seed", "/seed", "random seed");
}

fs::path resolve_out(const Common& c, const std::string& command) {
  if (!c.out.empty()) return c.out;
  const char* root = std::getenv(kOutputRootEnv);
  return fs::path(root && *root ? root : "das-out") / command;
}

json resolve(const json& defaults, const Common& c, const Overrides& ov) {
  json j = defaults;
  if (!c.config_file.empty()) {
    json file = read_json_file(c.config_file);
    if (!file.is_object()) throw das::ConfigError("--config must hold a JSON object");
    file.erase("command");
    j.merge_patch(file);
  }
  ov.apply(j);
  return j;
}

void snapshot(const fs::path& out, const std::string& command, json resolved) {
  resolved["command"] = command;
  write_json_file(out / "resolved_config.json", resolved);
}

std::ostream& progress(const Common& c) {
  static std::ostringstream sink;
  return c.quiet ? static_cast<std::ostream&>(sink) : std::cerr;
}

// ---------------------------------------------------------------------------
// Lexicon and corpora

std::vector<das::DomainSpec> all_specs(const json& p) {
  auto specs = das::builtin_domain_specs();
  const std::string file = p.value("spec_file", "");
  if (!file.empty())
    for (auto& s : das::load_domain_specs(file)) specs.push_back(std::move(s));
  return specs;
}

const das::DomainSpec& find_spec(const std::vector<das::DomainSpec>& specs, const std::string& name) {
  for (const auto& s : specs)
    if (s.name == name) return s;
  std::string list;
  for (const auto& s : specs) list += (list.empty() ? "" : ", ") + s.name;
  throw das::ConfigError("unknown domain spec '" + name + "' (available: " + list + ")");
}

struct LoadedCorpus {
  std::string name;
  das::DomainCorpus corpus;
};

std::string corpus_name(const fs::path& file, const das::DomainCorpus& c) {
  if (!c.examples.empty() && !c.examples.front().domain.empty()) return c.examples.front().domain;
  return file.stem().string();
}

std::vector<LoadedCorpus> load_corpora(const std::vector<std::string>& files, const das::Lexicon& lex) {
  std::vector<LoadedCorpus> out;
  for (const auto& f : files) {
    auto c = das::read_corpus(f, lex);
    if (c.examples.empty()) throw das::InputError("corpus " + f + " is empty");
    out.push_back({corpus_name(f, c), std::move(c)});
  }
  return out;
}

void check_lexicon(const json& meta, const das::Lexicon& lex, const std::string& what) {
  const std::string recorded = meta.value("lexicon", "");
  if (!recorded.empty() && recorded != lex.fingerprint())
    throw das::ConfigError(what + " was trained with lexicon " + recorded + ", current lexicon is " +
                           lex.fingerprint() + " (pass the same --spec-file)");
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(const Common& c, const Overrides& ov) {
  const json defaults{{"seed", 7},
                      {"domains", json::array({"music-toy"})},
                      {"n", 100},
                      {"split", "train"},
                      {"noise_rate", 0.15},
                      {"spec_file", ""}};
  const json p = resolve(defaults, c, ov);
  const auto specs = all_specs(p);
  const das::Lexicon lex = das::Lexicon::build(specs);
  const auto split = das::parse_split(p.at("split").get<std::string>());
  const auto seed = p.at("seed").get<std::uint64_t>();
  const auto n = p.at("n").get<std::size_t>();
  const auto noise = p.at("noise_rate").get<double>();
  const auto domains = p.at("domains").get<std::vector<std::string>>();
  for (const auto& d : domains) find_spec(specs, d);  // fail before writing anything

  const fs::path out = resolve_out(c, "gen-data");
  fs::create_directories(out);
  snapshot(out, "gen-data", p);
  for (const auto& d : domains) {
    const auto corpus = das::gen_domain_corpus(find_spec(specs, d), lex, n, seed, split, noise);
    const fs::path file = out / (d + "." + das::to_string(split) + ".jsonl");
    das::write_corpus(file, corpus);
    progress(c) << "wrote " << corpus.examples.size() << " sentences to " << file.string() << "\n";
  }
  write_json_file(out / "lexicon.json", json{{"fingerprint", lex.fingerprint()}, {"words", lex.words()}});
  return 0;
}

// ---------------------------------------------------------------------------
// training

das::TrainConfig train_config_from(const json& p, const std::string& scope) {
  json t = das::TrainConfig::from_preset(p.value("preset", "toy")).to_json();
  t["scope"] = scope;
  if (p.contains("train")) t.merge_patch(p.at("train"));
  t["seed"] = das::mix_seed(p.at("seed").get<std::uint64_t>(), "train");
  return das::TrainConfig::from_json(t);
}

das::TrainLog train_log(const Common& c, std::ofstream& metrics, std::size_t epochs) {
  das::TrainLog log;
  log.metrics = &metrics;
  log.on_epoch = [&c, epochs](std::size_t e, double loss) {
    progress(c) << "epoch " << e + 1 << "/" << epochs << " loss " << loss << "\n";
  };
  return log;
}

void add_train_flags(CLI::App* app, Overrides& ov) {
  ov.add<std::vector<std::string>>(app, "--train", "/train_corpora", "training corpus file(s)");
  ov.add<std::string>(app, "--preset", "/preset", "training preset: toy | paper-recipe");
  ov.add<double>(app, "--lr", "/train/lr", "learning rate");
  ov.add<std::size_t>(app, "--epochs", "/train/epochs", "epochs");
  ov.add<std::size_t>(app, "--batch", "/train/batch_size", "batch size");
  ov.add<double>(app, "--warmup", "/train/warmup_fraction", "linear warmup fraction of all steps");
  ov.add<double>(app, "--weight-decay", "/train/weight_decay", "decoupled weight decay");
  ov.add<std::string>(app, "--spec-file", "/spec_file", "extra domain specs (JSON)");
}

int cmd_train_base(const Common& c, const Overrides& ov) {
  const das::ModelConfig mc;
  const json defaults{{"seed", 7},
                      {"preset", "toy"},
                      {"train_corpora", json::array()},
                      {"spec_file", ""},
                      {"scope", "full-model"},
                      {"train", json::object()},
                      {"model", das::config_to_json(mc)}};
  json p = resolve(defaults, c, ov);
  const auto files = p.at("train_corpora").get<std::vector<std::string>>();
  if (files.empty()) throw das::ParameterError("train-base needs --train corpus files");
  const das::Lexicon lex = das::Lexicon::build(all_specs(p));
  p["model"]["vocab_size"] = lex.vocab_size();
  p["model"]["source_vocab_size"] = das::Lexicon::source_vocab_size();
  const das::ModelConfig model = das::config_from_json(p.at("model"));
  const das::TrainConfig tc = train_config_from(p, p.at("scope").get<std::string>());
  if (tc.scope.lora()) throw das::ConfigError("train-base cannot use the lora-only scope");
  std::vector<das::CorpusExample> examples;
  for (auto& lc : load_corpora(files, lex))
    examples.insert(examples.end(), lc.corpus.examples.begin(), lc.corpus.examples.end());

  const fs::path out = resolve_out(c, "train-base");
  fs::create_directories(out);
  snapshot(out, "train-base", p);
  std::ofstream metrics(out / "metrics.jsonl");
  const das::TransformerWeights w = das::train_base(model, tc, examples, train_log(c, metrics, tc.epochs));
  das::save_model(out / "checkpoint", w, json{{"train", tc.to_json()}, {"lexicon", lex.fingerprint()}});
  progress(c) << "base checkpoint " << das::model_id(w) << " -> " << (out / "checkpoint").string() << "\n";
  return 0;
}

das::LoraConfig lora_config_from(const json& p) {
  das::LoraConfig l;
  l.rank = p.at("rank").get<std::size_t>();
  l.alpha = p.at("alpha").get<float>();
  const std::string init = p.at("init").get<std::string>();
  if (init != "pissa" && init != "zero") throw das::ConfigError("--init must be pissa or zero");
  l.init = init == "pissa" ? das::LoraInit::pissa : das::LoraInit::zero;
  l.attach_paths = p.at("attach").get<std::vector<std::string>>();
  l.seed = das::mix_seed(p.at("seed").get<std::uint64_t>(), "lora");
  return l;
}

int cmd_train_adapter(const Common& c, const Overrides& ov) {
  const json defaults{{"seed", 7},
                      {"preset", "toy"},
                      {"base", ""},
                      {"base_id", ""},
                      {"domain", ""},
                      {"train_corpora", json::array()},
                      {"spec_file", ""},
                      {"rank", 4},
                      {"alpha", 8.0},
                      {"init", "pissa"},
                      {"attach", json::array()},
                      {"train", json::object()}};
  const json p = resolve(defaults, c, ov);
  const std::string base_dir = p.at("base").get<std::string>();
  if (base_dir.empty()) throw das::ParameterError("train-adapter needs --base");
  const auto files = p.at("train_corpora").get<std::vector<std::string>>();
  if (files.empty()) throw das::ParameterError("train-adapter needs --train corpus files");
  const das::TrainConfig tc = train_config_from(p, "lora-only");
  const das::LoraConfig lcfg = lora_config_from(p);

  json meta;
  const das::TransformerWeights base = das::load_model(fs::path(base_dir), &meta);
  const std::string expected = p.at("base_id").get<std::string>();
  if (!expected.empty() && expected != das::model_id(base))
    throw das::ConfigError("base checkpoint " + base_dir + " has id " + das::model_id(base) + ", expected " + expected);
  const das::Lexicon lex = das::Lexicon::build(all_specs(p));
  check_lexicon(meta, lex, "base checkpoint");
  const auto corpora = load_corpora(files, lex);
  std::vector<das::CorpusExample> examples;
  for (const auto& lc : corpora)
    examples.insert(examples.end(), lc.corpus.examples.begin(), lc.corpus.examples.end());
  const std::string domain = p.at("domain").get<std::string>().empty() ? corpora.front().name
                                                                        : p.at("domain").get<std::string>();

  const fs::path out = resolve_out(c, "train-adapter");
  fs::create_directories(out);
  snapshot(out, "train-adapter", p);
  std::ofstream metrics(out / "metrics.jsonl");
  const das::LoraAdapter ad =
      das::train_adapter(base, examples, tc, lcfg, domain, train_log(c, metrics, tc.epochs));
  das::save_adapter(out / "checkpoint", ad, json{{"train", tc.to_json()}, {"lexicon", lex.fingerprint()}});
  progress(c) << "adapter " << domain << " over base " << ad.base_id << " -> " << (out / "checkpoint").string()
              << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// decoding, evaluation, benchmark

struct Loaded {
  das::TransformerWeights base;
  std::vector<das::LoraAdapter> adapters;
  das::Lexicon lex;
};

Loaded load_models(const json& p) {
  Loaded l;
  const std::string base_dir = p.at("base").get<std::string>();
  if (base_dir.empty()) throw das::ParameterError("--base checkpoint is required");
  json meta;
  l.base = das::load_model(fs::path(base_dir), &meta);
  l.lex = das::Lexicon::build(all_specs(p));
  check_lexicon(meta, l.lex, "base checkpoint");
  const std::string id = das::model_id(l.base);
  for (const auto& dir : p.at("adapters").get<std::vector<std::string>>()) {
    json ameta;
    l.adapters.push_back(das::load_adapter(fs::path(dir), id, &ameta));
    check_lexicon(ameta, l.lex, "adapter " + dir);
  }
  return l;
}

das::SelectionPolicy policy_from(const json& p) {
  das::SelectionPolicy pol;
  pol.tau = p.at("tau").get<float>();
  pol.max_len = p.at("max_len").get<std::size_t>();
  pol.min_only = das::parse_min_only_behavior(p.at("min_only_behavior").get<std::string>());
  pol.validate();
  return pol;
}

void add_model_flags(CLI::App* app, Overrides& ov) {
  ov.add<std::string>(app, "--base", "/base", "base checkpoint directory");
  ov.add<std::vector<std::string>>(app, "--adapter", "/adapters", "adapter checkpoint directory (repeatable)");
  ov.add<float>(app, "--tau", "/tau", "confidence threshold tau");
  ov.add<std::size_t>(app, "--max-len", "/max_len", "decode length cap");
  ov.add<std::string>(app, "--min-only", "/min_only_behavior", "literal-min-word | fallback-to-base");
  ov.add<std::string>(app, "--spec-file", "/spec_file", "extra domain specs (JSON)");
}

json model_defaults() {
  const das::SelectionPolicy pol;
  return json{{"seed", 7},
              {"base", ""},
              {"adapters", json::array()},
              {"tau", pol.tau},
              {"max_len", pol.max_len},
              {"min_only_behavior", das::to_string(pol.min_only)},
              {"spec_file", ""}};
}

std::vector<int> parse_symbols(const std::string& line) {
  std::istringstream is(line);
  std::vector<int> out;
  for (std::string tok; is >> tok;) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw das::InputError("source symbols must be integers, got '" + tok + "'");
    }
  }
  if (out.empty()) throw das::InputError("empty source line");
  return out;
}

int cmd_decode(const Common& c, const Overrides& ov) {
  json defaults = model_defaults();
  defaults["mode"] = "adml-batched";
  defaults["input"] = "";
  defaults["source"] = "";
  const json p = resolve(defaults, c, ov);
  const Loaded m = load_models(p);
  const das::SelectionPolicy pol = policy_from(p);
  const std::string mode = p.at("mode").get<std::string>();
  if (mode != "base" && mode != "adml-batched" && mode != "adml-sequential")
    throw das::ParameterError("--mode must be base, adml-batched or adml-sequential");

  std::vector<das::CorpusExample> inputs;
  const std::string input = p.at("input").get<std::string>(), source = p.at("source").get<std::string>();
  if (input.empty() == source.empty()) throw das::ParameterError("decode needs exactly one of --input or --source");
  if (!input.empty()) {
    inputs = das::read_corpus(input, m.lex).examples;
  } else {
    das::CorpusExample ex;
    ex.source = parse_symbols(source);
    inputs.push_back(ex);
  }

  const fs::path out = resolve_out(c, "decode");
  fs::create_directories(out);
  snapshot(out, "decode", p);
  const das::AdapterBank bank(m.base, m.adapters);
  std::vector<std::string> names{"base"};
  for (const auto& a : m.adapters) names.push_back(a.domain);
  const std::size_t cap = std::min(pol.max_len, m.base.config.max_tgt_len);

  std::ofstream tout(out / "transcripts.jsonl");
  std::ofstream pout(out / "provenance.jsonl");
  das::WerCounts total;
  bool have_refs = false;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& ex = inputs[i];
    if (ex.source.size() > m.base.config.max_src_len) throw das::InputError("source longer than max_src_len");
    const das::EncoderOutput enc = das::encode(m.base, ex.source);
    std::vector<int> tokens;
    if (mode == "base") {
      tokens = das::greedy_decode(m.base, enc, cap);
    } else {
      const auto fan = mode == "adml-batched" ? das::FanoutMode::batched : das::FanoutMode::sequential;
      const das::DecodedOutput d = das::adml_decode(bank, enc, pol, fan);
      tokens = d.tokens;
      pout << json{{"utterance", i}}.dump() << '\n';
      das::write_provenance(pout, d, names);
    }
    const auto hyp = das::normalize_transcript(tokens);
    json rec{{"utterance", i}, {"hypothesis", m.lex.detokenize(hyp)}, {"tokens", hyp}};
    if (!ex.target.empty()) {
      const das::WerCounts w = das::wer(ex.target, hyp);
      total += w;
      have_refs = true;
      rec["reference"] = ex.text;
      rec["errors"] = w.errors();
    }
    tout << rec.dump() << '\n';
    if (!source.empty()) std::cout << m.lex.detokenize(hyp) << '\n';
  }
  if (have_refs) progress(c) << "WER " << 100.0 * total.wer() << "% over " << inputs.size() << " utterances\n";
  return 0;
}

int cmd_eval(const Common& c, const Overrides& ov) {
  json defaults = model_defaults();
  defaults["test_corpora"] = json::array();
  defaults["das"] = true;
  const json p = resolve(defaults, c, ov);
  const Loaded m = load_models(p);
  const das::SelectionPolicy pol = policy_from(p);
  const auto files = p.at("test_corpora").get<std::vector<std::string>>();
  if (files.empty()) throw das::ParameterError("eval needs --test corpus files");
  const auto corpora = load_corpora(files, m.lex);

  const fs::path out = resolve_out(c, "eval");
  fs::create_directories(out);
  snapshot(out, "eval", p);
  const std::string tok = m.lex.fingerprint();
  const das::AdapterBank bank(m.base, m.adapters);
  const std::size_t cap = std::min(pol.max_len, m.base.config.max_tgt_len);
  std::vector<das::NamedDecoder> decoders;
  decoders.push_back({"original", tok, [&](const das::CorpusExample& ex) {
                        return das::greedy_decode(m.base, das::encode(m.base, ex.source), cap);
                      }});
  for (const auto& a : m.adapters) {
    const das::LoraAdapter* ap = &a;
    decoders.push_back({"lora-" + a.domain, tok, [&, ap](const das::CorpusExample& ex) {
                          return das::greedy_decode(m.base, das::encode(m.base, ex.source), cap, ap);
                        }});
  }
  if (p.at("das").get<bool>() && !m.adapters.empty())
    decoders.push_back({"das", tok, [&](const das::CorpusExample& ex) {
                          return das::adml_decode(bank, das::encode(m.base, ex.source), pol).tokens;
                        }});
  std::vector<das::NamedDataset> datasets;
  for (const auto& lc : corpora) datasets.push_back({lc.name, tok, lc.corpus.examples});
  const das::WerGrid grid = das::eval_matrix(decoders, datasets);
  write_json_file(out / "wer_grid.json", grid.to_json());
  const std::string table = grid.to_table("WER by decoder and test set");
  write_text_file(out / "wer_table.txt", table);
  if (!c.quiet) std::cout << table;
  return 0;
}

int cmd_bench(const Common& c, const Overrides& ov) {
  json defaults = model_defaults();
  defaults["input"] = "";
  defaults["k"] = json::array({3});
  defaults["mode"] = "both";
  defaults["repetitions"] = 5;
  defaults["warmup"] = 3;
  defaults["utterances"] = 30;
  defaults["inject_mismatch"] = false;
  const json p = resolve(defaults, c, ov);
  const Loaded m = load_models(p);
  const std::string mode = p.at("mode").get<std::string>();
  if (mode != "both" && mode != "batched" && mode != "sequential")
    throw das::ParameterError("--mode must be batched, sequential or both");
  const std::string input = p.at("input").get<std::string>();
  if (input.empty()) throw das::ParameterError("bench needs --input corpus");
  if (m.adapters.empty()) throw das::ParameterError("bench needs at least one --adapter");
  const auto corpus = das::read_corpus(input, m.lex);
  std::vector<std::vector<int>> sources;
  const auto want = p.at("utterances").get<std::size_t>();
  for (std::size_t i = 0; i < corpus.examples.size() && i < want; ++i) sources.push_back(corpus.examples[i].source);

  das::BenchConfig bc;
  bc.repetitions = p.at("repetitions").get<std::size_t>();
  bc.warmup = p.at("warmup").get<std::size_t>();
  bc.policy = policy_from(p);
  bc.inject_mismatch = p.at("inject_mismatch").get<bool>();

  const fs::path out = resolve_out(c, "bench");
  fs::create_directories(out);
  snapshot(out, "bench", p);
  std::vector<das::BenchReport> reports;
  reports.push_back(das::bench_latency(m.base, {}, sources, bc));
  for (std::size_t k : p.at("k").get<std::vector<std::size_t>>()) {
    if (k == 0) continue;
    reports.push_back(das::bench_latency(m.base, das::replicate_adapters(m.adapters, k), sources, bc));
    progress(c) << "k=" << k << " done\n";
  }
  json rj = json::array();
  for (const auto& r : reports) {
    json j = r.to_json();
    if (mode != "both") {
      const std::string drop = mode == "batched" ? "sequential" : "batched";
      j.erase(drop + "_seconds_per_token");
      j.erase(drop + "_cov");
      j.erase(mode == "batched" ? "delta_s" : "delta_p");
      j.erase("speedup");
    }
    j["mode"] = mode;
    rj.push_back(j);
  }
  write_json_file(out / "bench.json", rj);
  std::ofstream csv(out / "bench.csv");
  das::write_bench_csv(csv, reports);
  const std::string table = das::bench_table(reports);
  write_text_file(out / "bench_table.txt", table);
  if (!c.quiet) std::cout << table;
  return 0;
}

// ---------------------------------------------------------------------------
// reproduce-tables

int cmd_reproduce(const Common& c, const Overrides& ov) {
  const json p = resolve(das::PipelineConfig::defaults().to_json(), c, ov);
  const das::PipelineConfig cfg = das::PipelineConfig::from_json(p);
  const fs::path out = resolve_out(c, "reproduce-tables");
  fs::create_directories(out);
  snapshot(out, "reproduce-tables", cfg.to_json());
  const das::PipelineResult r = das::reproduce_tables(cfg, out, &progress(c));
  if (!c.quiet) {
    std::ifstream in_domain(out / "reports" / "in_domain.txt"),
        out_of_domain(out / "reports" / "out_of_domain.txt"), latency(out / "reports" / "latency.txt");
    std::cout << in_domain.rdbuf() << '\n' << out_of_domain.rdbuf() << '\n' << latency.rdbuf();
  }
  (void)r;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain adapter switching: LoRA adapters, multi-adapter decoding, WER and latency"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "das 1.0");
  std::string simd_choice;
  app.add_option("--simd", simd_choice, "kernel table: scalar | avx2 (default: best available)");

  struct Sub {
    CLI::App* app;
    Common common;
    Overrides ov;
    std::function<int(const Common&, const Overrides&)> run;
  };
  std::vector<std::unique_ptr<Sub>> subs;
  auto make = [&](const char* name, const char* help, std::function<int(const Common&, const Overrides&)> run) {
    auto s = std::make_unique<Sub>();
    s->app = app.add_subcommand(name, help);
    s->run = std::move(run);
    add_common(s->app, s->common, s->ov);
    subs.push_back(std::move(s));
    return subs.back().get();
  };

  Sub* gen = make("gen-data", "generate seeded toy corpora", cmd_gen_data);
  gen->ov.add<std::vector<std::string>>(gen->app, "--domain", "/domains", "domain spec name(s)");
  gen->ov.add<std::size_t>(gen->app, "--n", "/n", "sentences per domain");
  gen->ov.add<std::string>(gen->app, "--split", "/split", "train | test");
  gen->ov.add<double>(gen->app, "--noise", "/noise_rate", "channel substitution rate in [0, 0.5]");
  gen->ov.add<std::string>(gen->app, "--spec-file", "/spec_file", "extra domain specs (JSON)");

  Sub* tb = make("train-base", "train the base encoder-decoder", cmd_train_base);
  add_train_flags(tb->app, tb->ov);
  tb->ov.add<std::string>(tb->app, "--scope", "/scope", "full-model | decoder-full | decoder-last-<n>");
  tb->ov.add<std::size_t>(tb->app, "--d-model", "/model/d_model", "model width");
  tb->ov.add<std::size_t>(tb->app, "--heads", "/model/n_heads", "attention heads");
  tb->ov.add<std::size_t>(tb->app, "--enc-layers", "/model/n_enc_layers", "encoder layers");
  tb->ov.add<std::size_t>(tb->app, "--dec-layers", "/model/n_dec_layers", "decoder layers");
  tb->ov.add<std::size_t>(tb->app, "--d-ff", "/model/d_ff", "feed-forward width");

  Sub* ta = make("train-adapter", "train one LoRA domain adapter over a frozen base", cmd_train_adapter);
  add_train_flags(ta->app, ta->ov);
  ta->ov.add<std::string>(ta->app, "--base", "/base", "base checkpoint directory");
  ta->ov.add<std::string>(ta->app, "--base-id", "/base_id", "refuse to train unless the base has this id");
  ta->ov.add<std::string>(ta->app, "--domain", "/domain", "domain name recorded in the adapter");
  ta->ov.add<std::size_t>(ta->app, "--rank", "/rank", "LoRA rank r");
  ta->ov.add<float>(ta->app, "--alpha", "/alpha", "LoRA alpha (scaling alpha/sqrt(r))");
  ta->ov.add<std::string>(ta->app, "--init", "/init", "pissa | zero");
  ta->ov.add<std::vector<std::string>>(ta->app, "--attach", "/attach", "weight paths to adapt");

  Sub* dec = make("decode", "decode with the base model or multi-adapter decoding", cmd_decode);
  add_model_flags(dec->app, dec->ov);
  dec->ov.add<std::string>(dec->app, "--mode", "/mode", "base | adml-batched | adml-sequential");
  dec->ov.add<std::string>(dec->app, "--input", "/input", "corpus file to decode");
  dec->ov.add<std::string>(dec->app, "--source", "/source", "one line of space-separated source symbols");

  Sub* ev = make("eval", "WER grid of decoders over test sets", cmd_eval);
  add_model_flags(ev->app, ev->ov);
  ev->ov.add<std::vector<std::string>>(ev->app, "--test", "/test_corpora", "test corpus file(s)");
  ev->ov.add<bool>(ev->app, "--das", "/das", "include the multi-adapter row (default true)");

  Sub* be = make("bench", "latency of batched vs sequential adapter fan-out", cmd_bench);
  add_model_flags(be->app, be->ov);
  be->ov.add<std::string>(be->app, "--input", "/input", "corpus file supplying sources");
  be->ov.add<std::vector<std::size_t>>(be->app, "--k", "/k", "adapter counts (replicating the given adapters)");
  be->ov.add<std::string>(be->app, "--mode", "/mode", "batched | sequential | both");
  be->ov.add<std::size_t>(be->app, "--reps", "/repetitions", "timed repetitions (>= 3)");
  be->ov.add<std::size_t>(be->app, "--warmup", "/warmup", "untimed warm-up runs");
  be->ov.add<std::size_t>(be->app, "--utterances", "/utterances", "sources taken from the corpus");
  be->ov.add_flag(be->app, "--inject-mismatch", "/inject_mismatch", "self-test: corrupt sequential output")
      ->group("");

  Sub* rt = make("reproduce-tables", "run the whole toy pipeline and write every report", cmd_reproduce);
  rt->ov.add<float>(rt->app, "--tau", "/policy/tau", "confidence threshold tau");
  rt->ov.add<std::size_t>(rt->app, "--rank", "/lora/rank", "LoRA rank r");
  rt->ov.add<float>(rt->app, "--alpha", "/lora/alpha", "LoRA alpha");
  rt->ov.add<double>(rt->app, "--noise", "/noise_rate", "channel substitution rate");
  rt->ov.add<std::vector<std::string>>(rt->app, "--domain", "/domains", "adapter domains");
  rt->ov.add<std::size_t>(rt->app, "--domain-train", "/domain_train", "training sentences per domain");
  rt->ov.add<std::size_t>(rt->app, "--test-size", "/test_size", "test sentences per domain");
  rt->ov.add<std::vector<std::size_t>>(rt->app, "--bench-k", "/bench_k", "adapter counts for the latency table");
  rt->ov.add<std::size_t>(rt->app, "--bench-reps", "/bench_repetitions", "timed repetitions");
  rt->ov.add<bool>(rt->app, "--scope-study", "/scope_study", "run the fine-tuning scope comparison");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (!simd_choice.empty()) {
      if (simd_choice != "scalar" && simd_choice != "avx2") throw das::ParameterError("--simd must be scalar or avx2");
      das::simd::set_active(simd_choice == "scalar" ? das::simd::Isa::scalar : das::simd::Isa::avx2);
    }
    for (const auto& s : subs)
      if (s->app->parsed()) return s->run(s->common, s->ov);
  } catch (const das::Error& e) {
    std::cerr << "error (" << e.kind() << "): " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const json::exception& e) {
    std::cerr << "error (config): " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
