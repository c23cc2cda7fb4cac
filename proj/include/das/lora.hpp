#pragma once
// Low-rank adapters: h = W0 x + gamma * B (A x), gamma = alpha / sqrt(r).

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "das/tensor.hpp"

namespace das {

struct TransformerWeights;

enum class LoraInit { zero, pissa };

/// Trainable factors for one attached weight path.
///
/// PiSSA-initialised pieces also carry the frozen initial factors (a0, b0).
/// The frozen weight of PiSSA is W0 - gamma*b0*a0, so the adapted weight
/// W_res + gamma*b*a equals W0 + gamma*(b*a - b0*a0): the piece stays relative
/// to the shared base weights, which is what the multi-adapter fan-out needs.
struct LoraPiece {
  Matrix a;   // r x d_in
  Matrix b;   // d_out x r
  Matrix a0;  // r x d_in, empty unless PiSSA
  Matrix b0;  // d_out x r, empty unless PiSSA

  std::size_t rank() const noexcept { return a.rows(); }
  std::size_t d_in() const noexcept { return a.cols(); }
  std::size_t d_out() const noexcept { return b.rows(); }
  bool has_offset() const noexcept { return !a0.empty(); }

  /// Factors of the base-relative delta: [a; a0] and [b, -b0] (or a, b).
  Matrix effective_a() const;
  Matrix effective_b() const;
};

struct LoraConfig {
  std::size_t rank = 4;
  float alpha = 8.0f;
  LoraInit init = LoraInit::pissa;
  std::vector<std::string> attach_paths;  // empty: default_attach_paths()
  std::uint64_t seed = 0;
};

struct LoraAdapter {
  std::size_t rank = 0;
  float alpha = 0.0f;
  float scaling = 0.0f;
  LoraInit init = LoraInit::zero;
  std::string domain;
  std::string base_id;
  std::map<std::string, LoraPiece> pieces;

  const LoraPiece* find(const std::string& path) const;
  std::vector<std::string> attach_paths() const;
  /// Trainable entries (a and b) across all pieces.
  std::size_t parameter_count() const;
};

/// alpha / sqrt(rank)
float rank_stable_scaling(float alpha, std::size_t rank);

/// Decoder query and value projections of self- and cross-attention.
std::vector<std::string> default_attach_paths(const TransformerWeights& w);

/// Paths an adapter may attach to: decoder linear weights only.
bool is_attachable_path(const TransformerWeights& w, const std::string& path);

/// B = 0 and A small random, so the adapted model starts equal to the base.
LoraPiece init_zero_piece(std::size_t d_out, std::size_t d_in, std::size_t rank, std::mt19937_64& rng);

struct PissaInit {
  LoraPiece piece;   // a, b set; a0 and b0 hold copies of them
  Matrix residual;   // W0 - gamma * b * a
};

/// Principal-singular-value initialisation: gamma*b*a is the best rank-r
/// approximation of W0, split symmetrically with gamma divided out.
PissaInit init_pissa(const Matrix& w0, std::size_t rank, float alpha);

/// Builds an adapter over `weights` per `config` (zero or PiSSA init).
LoraAdapter make_adapter(const TransformerWeights& weights, const LoraConfig& config);

/// x (n x d_in) -> x W^T + gamma * (x A^T) B^T with two skinny products.
Matrix apply(const Matrix& w, const LoraPiece& piece, float gamma, const Matrix& x);

/// W + gamma * B A, over the effective (base-relative) factors.
Matrix merge(const Matrix& w, const LoraPiece& piece, float gamma);

/// Weights with every attached matrix replaced by its merged view.
TransformerWeights merged_weights(const TransformerWeights& base, const LoraAdapter& adapter);

}  // namespace das
