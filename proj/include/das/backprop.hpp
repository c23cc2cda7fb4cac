#pragma once
// Full-sequence forward pass with recorded activations and the hand-derived
// backward pass for the encoder-decoder, including LoRA factors.

#include <cstddef>
#include <map>
#include <span>
#include <string>

#include "das/lora.hpp"
#include "das/model.hpp"
#include "das/tensor.hpp"

namespace das {

/// Effective (base-relative) factors of every piece of one adapter, resolved
/// once so a training step does not re-pack them per example.
struct AdapterView {
  struct Site {
    Matrix a;  // r_eff x d_in
    Matrix b;  // d_out x r_eff
    float gamma = 0.0f;
    std::size_t trainable_rank = 0;  // leading rows of a / columns of b
  };
  std::map<std::string, Site> sites;

  static AdapterView build(const LoraAdapter& adapter);
  const Site* find(const std::string& path) const;
};

struct TrainableScope {
  enum class Kind { full_model, decoder_full, decoder_last_n, lora_only };
  Kind kind = Kind::full_model;
  std::size_t last_n = 0;

  bool base_param(const std::string& path, const ModelConfig& config) const;
  bool any_encoder_param() const { return kind == Kind::full_model; }
  bool lora() const { return kind == Kind::lora_only; }

  static TrainableScope parse(const std::string& text);
  std::string to_string() const;
};

struct LoraGrad {
  Matrix a;  // trainable_rank x d_in
  Matrix b;  // d_out x trainable_rank
};

struct Gradients {
  bool has_base = false;
  TransformerWeights base;  // same shapes as the model; untouched entries stay zero
  std::map<std::string, LoraGrad> lora;

  static Gradients zeros_like(const TransformerWeights& w, const LoraAdapter* adapter, const TrainableScope& scope);
  void clear();
};

struct SeqExample {
  std::span<const int> source;
  std::span<const int> target;          // content tokens, no bos/eos
  const EncoderOutput* encoded = nullptr;  // reused when the encoder is frozen
};

/// Encoder features (src_len x d).
Matrix encoder_forward(const TransformerWeights& w, std::span<const int> source);

/// Logits for every position of `tokens` (T x vocab), causal.
Matrix decoder_forward(const TransformerWeights& w, const AdapterView* adapter, const Matrix& enc,
                       std::span<const int> tokens);

struct LossStats {
  double loss_sum = 0.0;  // summed token cross-entropy
  std::size_t tokens = 0;
};

/// Teacher-forced cross-entropy of one example; adds grad_scale * dLoss/dtheta
/// into `grads` for every parameter in scope.
LossStats accumulate_example(const TransformerWeights& w, const AdapterView* adapter, const SeqExample& ex,
                             const TrainableScope& scope, float grad_scale, Gradients& grads);

/// Loss only, no gradients.
LossStats example_loss(const TransformerWeights& w, const AdapterView* adapter, const SeqExample& ex);

}  // namespace das
