#include "das/pipeline.hpp"

#include <chrono>
#include <fstream>

#include "das/adml.hpp"
#include "das/checkpoint.hpp"
#include "das/datagen.hpp"
#include "das/error.hpp"
#include "das/multilora.hpp"

namespace das {

namespace fs = std::filesystem;
using nlohmann::json;

PipelineConfig PipelineConfig::defaults() {
  PipelineConfig c;
  c.base_train.lr = 1e-3;
  c.base_train.epochs = 6;
  c.base_train.batch_size = 16;
  c.base_train.warmup_fraction = 0.05;
  c.base_train.scope = TrainableScope::parse("full-model");

  c.adapter_train.lr = 5e-4;
  c.adapter_train.epochs = 2;
  c.adapter_train.batch_size = 16;
  c.adapter_train.warmup_fraction = 0.10;
  c.adapter_train.weight_decay = 0.0;
  c.adapter_train.scope = TrainableScope::parse("lora-only");

  c.scope_train = c.adapter_train;
  c.scope_train.lr = 3e-4;
  c.scope_train.weight_decay = 0.01;
  return c;
}

namespace {

json lora_to_json(const LoraConfig& l) {
  return json{{"rank", l.rank},
              {"alpha", l.alpha},
              {"init", l.init == LoraInit::pissa ? "pissa" : "zero"},
              {"attach_paths", l.attach_paths}};
}

LoraConfig lora_from_json(const json& j, LoraConfig l) {
  l.rank = j.value("rank", l.rank);
  l.alpha = j.value("alpha", l.alpha);
  if (j.contains("init")) {
    const auto s = j.at("init").get<std::string>();
    if (s != "pissa" && s != "zero") throw ConfigError("lora init must be pissa or zero");
    l.init = s == "pissa" ? LoraInit::pissa : LoraInit::zero;
  }
  l.attach_paths = j.value("attach_paths", l.attach_paths);
  return l;
}

json policy_to_json(const SelectionPolicy& p) {
  return json{{"tau", p.tau}, {"max_len", p.max_len}, {"min_only_behavior", to_string(p.min_only)}};
}

SelectionPolicy policy_from_json(const json& j, SelectionPolicy p) {
  p.tau = j.value("tau", p.tau);
  p.max_len = j.value("max_len", p.max_len);
  if (j.contains("min_only_behavior")) p.min_only = parse_min_only_behavior(j.at("min_only_behavior"));
  p.validate();
  return p;
}

}  // namespace

json PipelineConfig::to_json() const {
  return json{{"seed", seed},
              {"noise_rate", noise_rate},
              {"domains", domains},
              {"generic", generic},
              {"generic_train", generic_train},
              {"domain_train", domain_train},
              {"test_size", test_size},
              {"pretrain_per_domain", pretrain_per_domain},
              {"sanity_ceiling", sanity_ceiling},
              {"model", config_to_json(model)},
              {"base_train", base_train.to_json()},
              {"adapter_train", adapter_train.to_json()},
              {"lora", lora_to_json(lora)},
              {"policy", policy_to_json(policy)},
              {"scope_study", scope_study},
              {"scope_last_n", scope_last_n},
              {"scope_train", scope_train.to_json()},
              {"bench_k", bench_k},
              {"bench_utterances", bench_utterances},
              {"bench_repetitions", bench.repetitions},
              {"bench_warmup", bench.warmup}};
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c = defaults();
  try {
    c.seed = j.value("seed", c.seed);
    c.noise_rate = j.value("noise_rate", c.noise_rate);
    c.domains = j.value("domains", c.domains);
    c.generic = j.value("generic", c.generic);
    c.generic_train = j.value("generic_train", c.generic_train);
    c.domain_train = j.value("domain_train", c.domain_train);
    c.test_size = j.value("test_size", c.test_size);
    c.pretrain_per_domain = j.value("pretrain_per_domain", c.pretrain_per_domain);
    c.sanity_ceiling = j.value("sanity_ceiling", c.sanity_ceiling);
    if (j.contains("model")) {
      json m = config_to_json(c.model);
      m.update(j.at("model"));
      c.model.d_model = m.at("d_model");
      c.model.n_heads = m.at("n_heads");
      c.model.n_enc_layers = m.at("n_enc_layers");
      c.model.n_dec_layers = m.at("n_dec_layers");
      c.model.d_ff = m.at("d_ff");
      c.model.max_src_len = m.at("max_src_len");
      c.model.max_tgt_len = m.at("max_tgt_len");
    }
    auto merged = [](const TrainConfig& base, const json& over) {
      json b = base.to_json();
      b.update(over);
      return TrainConfig::from_json(b);
    };
    if (j.contains("base_train")) c.base_train = merged(c.base_train, j.at("base_train"));
    if (j.contains("adapter_train")) c.adapter_train = merged(c.adapter_train, j.at("adapter_train"));
    if (j.contains("scope_train")) c.scope_train = merged(c.scope_train, j.at("scope_train"));
    if (j.contains("lora")) c.lora = lora_from_json(j.at("lora"), c.lora);
    if (j.contains("policy")) c.policy = policy_from_json(j.at("policy"), c.policy);
    c.scope_study = j.value("scope_study", c.scope_study);
    c.scope_last_n = j.value("scope_last_n", c.scope_last_n);
    c.bench_k = j.value("bench_k", c.bench_k);
    c.bench_utterances = j.value("bench_utterances", c.bench_utterances);
    c.bench.repetitions = j.value("bench_repetitions", c.bench.repetitions);
    c.bench.warmup = j.value("bench_warmup", c.bench.warmup);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("pipeline config: ") + e.what());
  }
  return c;
}

namespace {

class Progress {
 public:
  explicit Progress(std::ostream* out) : out_(out), t0_(std::chrono::steady_clock::now()) {}
  void operator()(const std::string& msg) {
    if (out_ == nullptr) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    char buf[32];
    std::snprintf(buf, sizeof buf, "[%7.1fs] ", s);
    *out_ << buf << msg << std::endl;
  }

 private:
  std::ostream* out_;
  std::chrono::steady_clock::time_point t0_;
};

void write_text(const fs::path& file, const std::string& text) {
  fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  out << text;
}

void write_json(const fs::path& file, const json& j) { write_text(file, j.dump(2) + "\n"); }

WerGrid select_rows(const WerGrid& g, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols) {
  WerGrid out;
  for (auto r : rows) out.decoders.push_back(g.decoders.at(r));
  for (auto c : cols) out.datasets.push_back(g.datasets.at(c));
  for (auto r : rows) {
    std::vector<WerCounts> line;
    for (auto c : cols) line.push_back(g.cells.at(r).at(c));
    out.cells.push_back(line);
  }
  return out;
}

}  // namespace

PipelineResult reproduce_tables(const PipelineConfig& config_in, const fs::path& out, std::ostream* progress_out) {
  Progress progress(progress_out);
  PipelineConfig config = config_in;
  config.policy.validate();

  std::vector<DomainSpec> specs{builtin_domain_spec(config.generic)};
  for (const auto& d : config.domains) specs.push_back(builtin_domain_spec(d));
  const Lexicon lex = Lexicon::build(specs);
  config.model.vocab_size = lex.vocab_size();
  config.model.source_vocab_size = Lexicon::source_vocab_size();
  config.model.validate();
  fs::create_directories(out);
  write_json(out / "config.json", config.to_json());

  // ---- corpora
  std::map<std::string, DomainCorpus> train, test;
  const std::uint64_t data_seed = mix_seed(config.seed, "data");
  for (const auto& spec : specs) {
    const std::size_t n = spec.name == config.generic ? config.generic_train : config.domain_train;
    train[spec.name] = gen_domain_corpus(spec, lex, n, data_seed, Split::train, config.noise_rate);
    test[spec.name] = gen_domain_corpus(spec, lex, config.test_size, data_seed, Split::test, config.noise_rate);
    write_corpus(out / "data" / (spec.name + ".train.jsonl"), train[spec.name]);
    write_corpus(out / "data" / (spec.name + ".test.jsonl"), test[spec.name]);
  }
  DomainCorpus pretrain;
  pretrain.examples = train[config.generic].examples;
  for (const auto& d : config.domains) {
    const auto& ex = train[d].examples;
    const std::size_t n = std::min(config.pretrain_per_domain, ex.size());
    pretrain.examples.insert(pretrain.examples.end(), ex.begin(), ex.begin() + static_cast<std::ptrdiff_t>(n));
  }
  write_corpus(out / "data" / "pretrain.train.jsonl", pretrain);
  write_json(out / "data" / "lexicon.json", json{{"fingerprint", lex.fingerprint()}, {"words", lex.words()}});
  progress("corpora written (" + std::to_string(pretrain.examples.size()) + " pretraining sentences)");

  // ---- base model
  TrainConfig base_cfg = config.base_train;
  base_cfg.seed = mix_seed(config.seed, "base");
  fs::create_directories(out / "logs");
  TransformerWeights base;
  {
    std::ofstream metrics(out / "logs" / "base.metrics.jsonl");
    TrainLog log;
    log.metrics = &metrics;
    log.on_epoch = [&](std::size_t e, double loss) {
      progress("base epoch " + std::to_string(e + 1) + "/" + std::to_string(base_cfg.epochs) + " loss " +
               std::to_string(loss));
    };
    base = train_base(config.model, base_cfg, pretrain.examples, log);
  }
  WerCounts sanity;
  for (const auto& ex : test[config.generic].examples)
    sanity += wer(ex.target, normalize_transcript(greedy_decode(base, encode(base, ex.source), config.model.max_tgt_len)));
  const double sanity_wer = sanity.wer();
  save_model(out / "checkpoints" / "base", base,
             json{{"train", base_cfg.to_json()},
                  {"lexicon", lex.fingerprint()},
                  {"sanity", {{"dataset", config.generic + ".test"}, {"wer", sanity_wer},
                              {"ceiling", config.sanity_ceiling}, {"passed", sanity_wer < config.sanity_ceiling}}}});
  progress("base model trained, " + config.generic + " test WER " + std::to_string(100.0 * sanity_wer) + "%");
  if (!(sanity_wer < config.sanity_ceiling))
    throw TrainingError("base model " + config.generic + " test WER " + std::to_string(sanity_wer) +
                        " is not below the sanity ceiling " + std::to_string(config.sanity_ceiling));
  const std::string base_id = model_id(base);

  // ---- adapters
  std::vector<LoraAdapter> adapters;
  for (const auto& d : config.domains) {
    TrainConfig cfg = config.adapter_train;
    cfg.seed = mix_seed(config.seed, "adapter/" + d);
    LoraConfig lcfg = config.lora;
    lcfg.seed = mix_seed(config.seed, "lora/" + d);
    std::ofstream metrics(out / "logs" / ("lora-" + d + ".metrics.jsonl"));
    TrainLog log;
    log.metrics = &metrics;
    log.on_epoch = [&](std::size_t e, double loss) {
      progress("adapter " + d + " epoch " + std::to_string(e + 1) + "/" + std::to_string(cfg.epochs) + " loss " +
               std::to_string(loss));
    };
    adapters.push_back(train_adapter(base, train[d].examples, cfg, lcfg, d, log));
    save_adapter(out / "checkpoints" / ("lora-" + d), adapters.back(),
                 json{{"train", cfg.to_json()}, {"lexicon", lex.fingerprint()}});
  }

  // ---- WER grid
  const std::string tok = lex.fingerprint();
  const AdapterBank bank(base, adapters);
  const std::size_t max_len = std::min(config.policy.max_len, config.model.max_tgt_len);
  std::vector<NamedDecoder> decoders;
  decoders.push_back({"original", tok, [&](const CorpusExample& ex) {
                        return greedy_decode(base, encode(base, ex.source), max_len);
                      }});
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    const LoraAdapter* a = &adapters[i];
    decoders.push_back({"lora-" + config.domains[i], tok, [&, a](const CorpusExample& ex) {
                          return greedy_decode(base, encode(base, ex.source), max_len, a);
                        }});
  }
  SelectionPolicy literal = config.policy;
  literal.min_only = MinOnlyBehavior::literal_min_word;
  SelectionPolicy fallback = config.policy;
  fallback.min_only = MinOnlyBehavior::fallback_to_base;
  decoders.push_back({"das", tok, [&](const CorpusExample& ex) {
                        return adml_decode(bank, encode(base, ex.source), literal).tokens;
                      }});
  decoders.push_back({"das-fallback", tok, [&](const CorpusExample& ex) {
                        return adml_decode(bank, encode(base, ex.source), fallback).tokens;
                      }});
  std::vector<NamedDataset> datasets;
  for (const auto& d : config.domains) datasets.push_back({d, tok, test[d].examples});
  datasets.push_back({config.generic, tok, test[config.generic].examples});

  PipelineResult result;
  result.grid = eval_matrix(decoders, datasets);
  progress("WER grid evaluated");

  const std::size_t n_dom = config.domains.size();
  const std::size_t das_row = 1 + n_dom, fb_row = das_row + 1;
  std::vector<std::size_t> dom_cols(n_dom), all_rows(decoders.size());
  for (std::size_t i = 0; i < n_dom; ++i) dom_cols[i] = i;
  for (std::size_t i = 0; i < all_rows.size(); ++i) all_rows[i] = i;
  write_json(out / "reports" / "wer_grid.json", result.grid.to_json());
  write_text(out / "reports" / "in_domain.txt",
             select_rows(result.grid, all_rows, dom_cols).to_table("In-domain WER"));
  write_text(out / "reports" / "out_of_domain.txt",
             select_rows(result.grid, {0, das_row, fb_row}, {n_dom})
                 .to_table("Out-of-domain WER"));

  // Provenance of the default decoder on every test set.
  std::vector<std::string> names{"base"};
  for (const auto& d : config.domains) names.push_back(d);
  for (const auto& ds : datasets) {
    fs::create_directories(out / "reports" / "provenance");
    std::ofstream pout(out / "reports" / "provenance" / (ds.name + ".jsonl"));
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
      const DecodedOutput dec = adml_decode(bank, encode(base, ds.examples[i].source), config.policy);
      pout << json{{"utterance", i}, {"hypothesis", lex.detokenize(dec.tokens)}}.dump() << '\n';
      write_provenance(pout, dec, names);
    }
  }

  // ---- fine-tuning scope comparison on the first domain
  if (config.scope_study && !config.domains.empty()) {
    const std::string d = config.domains.front();
    struct Variant {
      std::string name;
      TrainableScope scope;
    };
    const std::vector<Variant> variants{
        {"ft enc-dec", TrainableScope::parse("full-model")},
        {"ft dec (last " + std::to_string(config.scope_last_n) + ")",
         TrainableScope::parse("decoder-last-" + std::to_string(config.scope_last_n))},
        {"ft full dec", TrainableScope::parse("decoder-full")},
    };
    std::vector<TransformerWeights> tuned;
    for (const auto& v : variants) {
      TrainConfig cfg = config.scope_train;
      cfg.scope = v.scope;
      cfg.seed = mix_seed(config.seed, "scope/" + v.name);
      TransformerWeights w = base;
      train_model(w, cfg, train[d].examples);
      tuned.push_back(std::move(w));
      progress("scope variant '" + v.name + "' trained");
    }
    std::vector<NamedDecoder> scope_bank;
    scope_bank.push_back(decoders[0]);
    for (std::size_t i = 0; i < variants.size(); ++i) {
      const TransformerWeights* w = &tuned[i];
      scope_bank.push_back({variants[i].name, tok, [w, max_len](const CorpusExample& ex) {
                              return greedy_decode(*w, encode(*w, ex.source), max_len);
                            }});
    }
    scope_bank.push_back(decoders[1]);
    scope_bank.back().name = "lora dec";
    std::vector<NamedDataset> scope_sets{datasets.front(), datasets.back()};
    result.scope = eval_matrix(scope_bank, scope_sets);
    write_json(out / "reports" / "scope.json", result.scope.to_json());
    write_text(out / "reports" / "scope.txt", result.scope.to_table("Fine-tuning scope on " + d));
  }

  // ---- latency
  std::vector<std::vector<int>> sample;
  {
    std::vector<const CorpusExample*> pool;
    for (const auto& d : config.domains)
      for (const auto& ex : test[d].examples) pool.push_back(&ex);
    std::mt19937_64 rng(mix_seed(config.seed, "bench"));
    for (std::size_t i = 0; i < config.bench_utterances && !pool.empty(); ++i) {
      const std::size_t j = i + uniform_index(rng, pool.size() - i);
      std::swap(pool[i], pool[j]);
      sample.push_back(pool[i]->source);
      if (i + 1 == pool.size()) break;
    }
  }
  if (!config.bench_k.empty() && !sample.empty()) {
    BenchConfig bcfg = config.bench;
    bcfg.policy = config.policy;
    result.bench.push_back(bench_latency(base, {}, sample, bcfg));
    for (std::size_t k : config.bench_k) {
      result.bench.push_back(bench_latency(base, replicate_adapters(adapters, k), sample, bcfg));
      progress("latency benchmark k=" + std::to_string(k) + " done");
    }
    std::ofstream csv(out / "reports" / "bench.csv");
    write_bench_csv(csv, result.bench);
    json bj = json::array();
    for (const auto& r : result.bench) bj.push_back(r.to_json());
    write_json(out / "reports" / "bench.json", bj);
    write_text(out / "reports" / "latency.txt", bench_table(result.bench));
  }

  // ---- summary
  json per_domain = json::array();
  for (std::size_t i = 0; i < n_dom; ++i) {
    per_domain.push_back({{"domain", config.domains[i]},
                          {"base_wer", result.grid.wer_at(0, i)},
                          {"lora_wer", result.grid.wer_at(1 + i, i)},
                          {"lora_rel_change_pct", result.grid.relative_change(1 + i, i)},
                          {"das_wer", result.grid.wer_at(das_row, i)},
                          {"das_rel_change_pct", result.grid.relative_change(das_row, i)},
                          {"das_fallback_wer", result.grid.wer_at(fb_row, i)},
                          {"das_fallback_rel_change_pct", result.grid.relative_change(fb_row, i)}});
  }
  result.summary = json{{"base_id", base_id},
                        {"lexicon", tok},
                        {"sanity_wer", sanity_wer},
                        {"domains", per_domain},
                        {"ood", {{"dataset", config.generic},
                                 {"base_wer", result.grid.wer_at(0, n_dom)},
                                 {"das_wer", result.grid.wer_at(das_row, n_dom)},
                                 {"das_rel_change_pct", result.grid.relative_change(das_row, n_dom)},
                                 {"das_fallback_wer", result.grid.wer_at(fb_row, n_dom)},
                                 {"das_fallback_rel_change_pct", result.grid.relative_change(fb_row, n_dom)}}}};
  write_json(out / "reports" / "summary.json", result.summary);
  progress("done");
  return result;
}

}  // namespace das
