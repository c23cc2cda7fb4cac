#pragma once
// Teacher-forced cross-entropy training with AdamW and a linear warmup.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "das/backprop.hpp"
#include "das/datagen.hpp"
#include "das/lora.hpp"
#include "das/model.hpp"
#include "json.hpp"

namespace das {

struct TrainConfig {
  double lr = 3e-4;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double warmup_fraction = 0.10;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  TrainableScope scope;
  std::string preset = "toy";

  void validate() const;

  /// "toy" (defaults above) or "paper-recipe" (lr 3e-6, 10 epochs, batch 16, warmup 10%).
  static TrainConfig from_preset(const std::string& name);

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// base_lr * min(1, t / (warmup_fraction * total_steps)); t counts updates from 1.
double scheduled_lr(double base_lr, std::size_t t, std::size_t total_steps, double warmup_fraction);

/// One trainable tensor with its gradient.
struct ParamRef {
  std::string name;
  Matrix* value = nullptr;
  const Matrix* grad = nullptr;
  bool decay = true;
};

/// Decoupled-weight-decay Adam over named parameters.
class AdamW {
 public:
  explicit AdamW(const TrainConfig& config);

  /// Applies one update with learning rate `lr`. Throws ParameterError when a
  /// gradient's shape differs from its parameter or from earlier steps.
  void step(std::span<const ParamRef> params, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
    std::size_t rows = 0, cols = 0;
  };
  TrainConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

struct BatchLoss {
  double mean_loss = 0.0;  // per target token
  std::size_t tokens = 0;
};

/// Mean token cross-entropy over the batch and its gradients (added into a
/// cleared `grads`) for every parameter in scope. NaN -> NumericError.
BatchLoss loss_and_grads(const TransformerWeights& w, const LoraAdapter* adapter, std::span<const SeqExample> batch,
                         const TrainableScope& scope, Gradients& grads);

/// Trainable parameters of `scope` paired with their gradients; `w` may be
/// null for the lora-only scope.
std::vector<ParamRef> collect_params(TransformerWeights* w, LoraAdapter* adapter, const TrainableScope& scope,
                                     const Gradients& grads);

struct TrainLog {
  std::ostream* metrics = nullptr;  // line-delimited {"step","epoch","lr","loss"}
  std::function<void(std::size_t epoch, double mean_loss)> on_epoch;
};

/// Randomly initialised model trained on `examples` with config.scope.
TransformerWeights train_base(const ModelConfig& model_config, const TrainConfig& config,
                              std::span<const CorpusExample> examples, const TrainLog& log = {});

/// Continues training `w` in place (any non-LoRA scope).
void train_model(TransformerWeights& w, const TrainConfig& config, std::span<const CorpusExample> examples,
                 const TrainLog& log = {});

/// LoRA-only training of one domain adapter over a frozen base. The base
/// checksum is compared before and after; a change raises InvariantError.
LoraAdapter train_adapter(const TransformerWeights& base, std::span<const CorpusExample> examples,
                          const TrainConfig& config, const LoraConfig& lora_config, const std::string& domain,
                          const TrainLog& log = {});

}  // namespace das
