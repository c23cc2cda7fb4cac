#pragma once
// Pre-LN encoder-decoder transformer with sinusoidal positions.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "das/lora.hpp"
#include "das/tensor.hpp"

namespace das {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t source_vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t d_ff = 256;
  std::size_t max_src_len = 96;
  std::size_t max_tgt_len = 64;

  /// Throws ConfigError on a violated invariant.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerNormWeights {
  Matrix g;  // 1 x d
  Matrix b;  // 1 x d
};

struct AttentionWeights {
  Matrix q, k, v, o;  // d x d, output-major
};

struct FeedForwardWeights {
  Matrix w1;  // d_ff x d
  Matrix b1;  // 1 x d_ff
  Matrix w2;  // d x d_ff
  Matrix b2;  // 1 x d
};

struct EncoderLayerWeights {
  LayerNormWeights ln1;
  AttentionWeights self;
  LayerNormWeights ln2;
  FeedForwardWeights ff;
};

struct DecoderLayerWeights {
  LayerNormWeights ln1;
  AttentionWeights self;
  LayerNormWeights ln2;
  AttentionWeights cross;
  LayerNormWeights ln3;
  FeedForwardWeights ff;
};

struct TransformerWeights {
  ModelConfig config;
  Matrix src_embed;  // source_vocab x d
  std::vector<EncoderLayerWeights> enc;
  LayerNormWeights enc_ln;
  Matrix tgt_embed;  // vocab x d
  std::vector<DecoderLayerWeights> dec;
  LayerNormWeights dec_ln;
  Matrix out_w;  // vocab x d
  Matrix out_b;  // 1 x vocab

  /// Shape-correct, all-zero parameters (layer-norm gains zero too).
  static TransformerWeights zeros(const ModelConfig& config);
  /// Seeded random initialisation.
  static TransformerWeights random(const ModelConfig& config, std::uint64_t seed);

  /// Visits every parameter with its canonical path, in a fixed order.
  void visit(const std::function<void(const std::string&, Matrix&)>& fn);
  void visit(const std::function<void(const std::string&, const Matrix&)>& fn) const;

  Matrix* find(const std::string& path);
  const Matrix* find(const std::string& path) const;
  std::size_t parameter_count() const;
  /// FNV-1a over every parameter's bytes in visit order.
  std::uint64_t checksum() const;
};

struct EncoderOutput {
  Matrix features;  // src_len x d_model
};

/// Sinusoidal position code for one position.
void add_position_code(std::span<float> row, std::size_t pos);

/// Stable identifier of a set of weights (hex checksum); adapters record the
/// id of the base they were trained against.
std::string model_id(const TransformerWeights& w);

EncoderOutput encode(const TransformerWeights& w, std::span<const int> source);

/// Final-position logits for `prefix` (which starts with bos), computed by a
/// full forward pass over the prefix. `adapter` may be null (base branch).
std::vector<float> decoder_step(const TransformerWeights& w, const LoraAdapter* adapter, const EncoderOutput& enc,
                                std::span<const int> prefix);

/// Greedy decoding; result excludes bos and includes eos if produced.
std::vector<int> greedy_decode(const TransformerWeights& w, const EncoderOutput& enc, std::size_t max_len,
                               const LoraAdapter* adapter = nullptr);

}  // namespace das
