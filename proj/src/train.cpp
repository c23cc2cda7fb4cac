#include "das/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "das/error.hpp"

namespace das {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1]");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
}

TrainConfig TrainConfig::from_preset(const std::string& name) {
  TrainConfig c;
  if (name == "toy") return c;
  if (name == "paper-recipe") {
    c.lr = 3e-6;
    c.epochs = 10;
    c.batch_size = 16;
    c.warmup_fraction = 0.10;
    c.preset = name;
    return c;
  }
  throw ConfigError("unknown training preset '" + name + "' (toy, paper-recipe)");
}

json TrainConfig::to_json() const {
  return json{{"lr", lr},
              {"epochs", epochs},
              {"batch_size", batch_size},
              {"warmup_fraction", warmup_fraction},
              {"weight_decay", weight_decay},
              {"beta1", beta1},
              {"beta2", beta2},
              {"epsilon", epsilon},
              {"seed", seed},
              {"scope", scope.to_string()},
              {"preset", preset}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.seed = j.value("seed", c.seed);
    c.preset = j.value("preset", c.preset);
    if (j.contains("scope")) c.scope = TrainableScope::parse(j.at("scope").get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

double scheduled_lr(double base_lr, std::size_t t, std::size_t total_steps, double warmup_fraction) {
  const double warm = warmup_fraction * static_cast<double>(total_steps);
  if (warm <= 0.0) return base_lr;
  return base_lr * std::min(1.0, static_cast<double>(t) / warm);
}

AdamW::AdamW(const TrainConfig& config) : config_(config) {}

void AdamW::step(std::span<const ParamRef> params, double lr) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (const ParamRef& p : params) {
    if (!p.value->same_shape(*p.grad)) throw ParameterError("adamw: gradient shape differs for '" + p.name + "'");
    auto [it, fresh] = moments_.try_emplace(p.name);
    Moments& mo = it->second;
    if (fresh) {
      mo.m.assign(p.value->size(), 0.0);
      mo.v.assign(p.value->size(), 0.0);
      mo.rows = p.value->rows();
      mo.cols = p.value->cols();
    } else if (mo.rows != p.value->rows() || mo.cols != p.value->cols()) {
      throw ParameterError("adamw: state shape differs for '" + p.name + "'");
    }
    float* x = p.value->data();
    const float* g = p.grad->data();
    const double wd = p.decay ? config_.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      const double gi = g[i];
      const double m = b1 * mo.m[i] + (1.0 - b1) * gi;
      const double v = b2 * mo.v[i] + (1.0 - b2) * gi * gi;
      mo.m[i] = m;
      mo.v[i] = v;
      const double update = (m / c1) / (std::sqrt(v / c2) + config_.epsilon) + wd * x[i];
      x[i] = static_cast<float>(x[i] - lr * update);
    }
  }
}

BatchLoss loss_and_grads(const TransformerWeights& w, const LoraAdapter* adapter, std::span<const SeqExample> batch,
                         const TrainableScope& scope, Gradients& grads) {
  if (batch.empty()) throw ParameterError("loss_and_grads: empty batch");
  if (scope.lora() && adapter == nullptr) throw ParameterError("lora-only scope needs an adapter");
  std::size_t tokens = 0;
  for (const auto& ex : batch) tokens += ex.target.size() + 1;
  const AdapterView view = adapter ? AdapterView::build(*adapter) : AdapterView{};
  const AdapterView* vp = adapter ? &view : nullptr;
  const float scale = 1.0f / static_cast<float>(tokens);
  double sum = 0.0;
  for (const auto& ex : batch) sum += accumulate_example(w, vp, ex, scope, scale, grads).loss_sum;
  const double mean = sum / static_cast<double>(tokens);
  if (!std::isfinite(mean)) throw NumericError("loss is not finite (" + std::to_string(mean) + ")");
  return {mean, tokens};
}

std::vector<ParamRef> collect_params(TransformerWeights* w, LoraAdapter* adapter, const TrainableScope& scope,
                                     const Gradients& grads) {
  std::vector<ParamRef> out;
  if (scope.lora()) {
    if (adapter == nullptr) throw ParameterError("lora-only scope needs an adapter");
    for (auto& [path, piece] : adapter->pieces) {
      const LoraGrad& g = grads.lora.at(path);
      out.push_back({path + ".a", &piece.a, &g.a, true});
      out.push_back({path + ".b", &piece.b, &g.b, true});
    }
    return out;
  }
  if (w == nullptr || !grads.has_base) throw ParameterError("base scope needs weights and base gradients");
  std::map<std::string, const Matrix*> gmap;
  grads.base.visit([&](const std::string& path, const Matrix& m) { gmap.emplace(path, &m); });
  w->visit([&](const std::string& path, Matrix& m) {
    if (!scope.base_param(path, w->config)) return;
    // Layer-norm parameters, biases and embeddings are not decayed.
    const bool decay = m.rows() > 1 && path.find("embed") == std::string::npos;
    out.push_back({path, &m, gmap.at(path), decay});
  });
  return out;
}

namespace {

struct Prepared {
  std::vector<SeqExample> items;
  std::vector<EncoderOutput> encoded;
};

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, "epoch#" + std::to_string(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

void log_step(const TrainLog& log, std::size_t step, std::size_t epoch, double lr, double loss) {
  if (log.metrics == nullptr) return;
  *log.metrics << json{{"step", step}, {"epoch", epoch}, {"lr", lr}, {"loss", loss}}.dump() << '\n';
}

template <typename StepFn>
void run_epochs(const TrainConfig& config, std::span<const SeqExample> items, const TrainLog& log, StepFn&& step_fn) {
  const std::size_t n = items.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total = per_epoch * config.epochs;
  std::size_t t = 0;
  std::vector<SeqExample> batch;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    const auto order = epoch_order(n, config.seed, e);
    double epoch_sum = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t b = 0; b < n; b += config.batch_size) {
      batch.clear();
      for (std::size_t i = b; i < std::min(n, b + config.batch_size); ++i) batch.push_back(items[order[i]]);
      ++t;
      const double lr = scheduled_lr(config.lr, t, total, config.warmup_fraction);
      BatchLoss bl;
      try {
        bl = step_fn(std::span<const SeqExample>(batch), lr);
      } catch (const NumericError& err) {
        throw TrainingError("training diverged at step " + std::to_string(t) + ": " + err.what());
      }
      epoch_sum += bl.mean_loss * static_cast<double>(bl.tokens);
      epoch_tokens += bl.tokens;
      log_step(log, t, e, lr, bl.mean_loss);
    }
    if (log.on_epoch) log.on_epoch(e, epoch_sum / static_cast<double>(epoch_tokens));
  }
}

void check_examples(const ModelConfig& cfg, std::span<const CorpusExample> examples) {
  if (examples.empty()) throw ParameterError("training corpus is empty");
  for (const auto& ex : examples) {
    if (ex.source.empty() || ex.source.size() > cfg.max_src_len)
      throw InputError("source length " + std::to_string(ex.source.size()) + " outside [1, max_src_len]");
    if (ex.target.size() + 1 > cfg.max_tgt_len) throw InputError("target longer than max_tgt_len");
  }
}

}  // namespace

void train_model(TransformerWeights& w, const TrainConfig& config, std::span<const CorpusExample> examples,
                 const TrainLog& log) {
  config.validate();
  if (config.scope.lora()) throw ConfigError("train_model does not take the lora-only scope");
  check_examples(w.config, examples);
  std::vector<SeqExample> items;
  for (const auto& ex : examples) items.push_back({ex.source, ex.target, nullptr});
  AdamW opt(config);
  Gradients grads = Gradients::zeros_like(w, nullptr, config.scope);
  const auto params = collect_params(&w, nullptr, config.scope, grads);
  run_epochs(config, items, log, [&](std::span<const SeqExample> batch, double lr) {
    grads.clear();
    const BatchLoss bl = loss_and_grads(w, nullptr, batch, config.scope, grads);
    opt.step(params, lr);
    return bl;
  });
}

TransformerWeights train_base(const ModelConfig& model_config, const TrainConfig& config,
                              std::span<const CorpusExample> examples, const TrainLog& log) {
  model_config.validate();
  TransformerWeights w = TransformerWeights::random(model_config, mix_seed(config.seed, "init"));
  train_model(w, config, examples, log);
  return w;
}

LoraAdapter train_adapter(const TransformerWeights& base, std::span<const CorpusExample> examples,
                          const TrainConfig& config, const LoraConfig& lora_config, const std::string& domain,
                          const TrainLog& log) {
  config.validate();
  if (!config.scope.lora()) throw ConfigError("adapter training requires the lora-only scope");
  check_examples(base.config, examples);
  const std::uint64_t before = base.checksum();

  LoraAdapter adapter = make_adapter(base, lora_config);
  adapter.domain = domain;

  // The encoder is frozen, so every source is encoded once.
  std::vector<EncoderOutput> encoded;
  encoded.reserve(examples.size());
  for (const auto& ex : examples) encoded.push_back(encode(base, ex.source));
  std::vector<SeqExample> items;
  for (std::size_t i = 0; i < examples.size(); ++i)
    items.push_back({examples[i].source, examples[i].target, &encoded[i]});

  AdamW opt(config);
  Gradients grads = Gradients::zeros_like(base, &adapter, config.scope);
  const auto params = collect_params(nullptr, &adapter, config.scope, grads);
  run_epochs(config, items, log, [&](std::span<const SeqExample> batch, double lr) {
    grads.clear();
    const BatchLoss bl = loss_and_grads(base, &adapter, batch, config.scope, grads);
    opt.step(params, lr);
    return bl;
  });

  if (base.checksum() != before) throw InvariantError("base weights changed during adapter training");
  return adapter;
}

}  // namespace das
