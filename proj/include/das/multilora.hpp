#pragma once
// k adapters plus the base branch evaluated in one pass.
//
// For a weight path with adapters (A_i, B_i), the batched low-rank term is
//   { gamma_i B_i A_i x_i } = blk_diag(B_1..B_k) (concat(A_1..A_k) X)
// restricted to its diagonal blocks. PackedLoraSite holds concat(A_i) as one
// row-stacked buffer and the B_i side by side; block-diagonal B is never
// materialised because its off-diagonal blocks are zero by construction.

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "das/lora.hpp"
#include "das/model.hpp"
#include "das/tensor.hpp"

namespace das {

struct PackedLoraSite {
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  Matrix a_cat;                     // (sum r_i) x d_in
  Matrix b_cat;                     // d_out x (sum r_i)
  std::vector<std::size_t> offset;  // k + 1 prefix sums of ranks
  std::vector<float> gamma;         // k

  std::size_t count() const noexcept { return gamma.size(); }
  std::size_t rank(std::size_t i) const noexcept { return offset[i + 1] - offset[i]; }

  /// Packs the effective factors of each piece; null pieces get rank 0.
  static PackedLoraSite pack(std::size_t d_out, std::size_t d_in, std::span<const LoraPiece* const> pieces,
                             std::span<const float> gammas);
};

/// outputs[i] = gamma_i * B_i (A_i x_i^T), row-wise: x_i is n_i x d_in.
std::vector<Matrix> batched_lora_forward(const PackedLoraSite& site, std::span<const Matrix> xs);

/// y.row(r) += gamma_s * B_s A_s x.row(r) with s = slot_of_row[r] (skipped when < 0).
void accumulate_lora_rows(const PackedLoraSite& site, const Matrix& x, std::span<const int> slot_of_row, Matrix& y);

/// Ordered domain adapters over one frozen base model. Branch 0 is the base;
/// adapter i sits at branch i + 1.
class AdapterBank {
 public:
  AdapterBank(const TransformerWeights& base, std::vector<LoraAdapter> adapters);

  const TransformerWeights& base() const noexcept { return *base_; }
  std::size_t size() const noexcept { return adapters_.size(); }
  bool empty() const noexcept { return adapters_.empty(); }
  const LoraAdapter& adapter(std::size_t i) const { return adapters_.at(i); }
  const std::vector<LoraAdapter>& adapters() const noexcept { return adapters_; }
  std::vector<std::string> domains() const;

  /// Packs every adapter's piece at `path` (missing pieces get rank 0).
  PackedLoraSite pack(const std::string& path) const;

 private:
  const TransformerWeights* base_;
  std::vector<LoraAdapter> adapters_;
};

std::vector<Matrix> batched_lora_forward(const AdapterBank& bank, const std::string& path, std::span<const Matrix> xs);

/// Incremental decoder over R branches sharing one encoder output and one
/// token prefix. A null branch is the base model. Per-branch self-attention
/// caches grow by one row per step; cross-attention keys and values are
/// computed once, with the unadapted projection shared by all branches.
///
/// Every branch row goes through the same kernels whether R is 1 or many, so
/// a branch's logits are bit-identical across batched and one-branch runs.
class BranchDecoder {
 public:
  BranchDecoder(const TransformerWeights& w, std::span<const LoraAdapter* const> branches, const EncoderOutput& enc);
  ~BranchDecoder();
  BranchDecoder(BranchDecoder&&) noexcept;
  BranchDecoder& operator=(BranchDecoder&&) noexcept;

  /// Appends `token` to the shared prefix and returns R x vocab logits for it.
  const Matrix& step(int token);

  std::size_t branch_count() const noexcept;
  /// Tokens consumed so far (equals every cache's length).
  std::size_t length() const noexcept;
  /// Cached self-attention rows of (branch, layer); test hook.
  std::size_t cache_rows(std::size_t branch, std::size_t layer) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct Candidate {
  int token = 0;
  float confidence = 0.0f;
  std::vector<float> distribution;  // filled only when requested
};

enum class FanoutMode { batched, sequential };

/// Stateful fan-out session: base plus every bank adapter, either stacked in
/// one BranchDecoder (batched) or one BranchDecoder per branch (sequential).
class MultiBranchSession {
 public:
  MultiBranchSession(const AdapterBank& bank, const EncoderOutput& enc, FanoutMode mode);

  /// Feeds the shared token, returns k + 1 candidates for the next position.
  std::vector<Candidate> step(int token, bool keep_distributions = false);
  std::size_t branch_count() const noexcept { return branch_count_; }
  FanoutMode mode() const noexcept { return mode_; }

 private:
  FanoutMode mode_;
  std::size_t branch_count_;
  std::vector<const LoraAdapter*> branch_ptrs_;
  std::vector<BranchDecoder> decoders_;
};

/// One fan-out over a full prefix (starts with bos), batched evaluation.
std::vector<Candidate> multi_decoder_step(const AdapterBank& bank, const EncoderOutput& enc,
                                          std::span<const int> prefix, bool keep_distributions = false);

/// Same contract computed branch by branch with decoder_step (full recompute).
std::vector<Candidate> multi_decoder_step_recompute(const AdapterBank& bank, const EncoderOutput& enc,
                                                    std::span<const int> prefix, bool keep_distributions = false);

/// argmax (lowest index on ties) and max probability of softmax(logits).
Candidate candidate_from_logits(std::span<const float> logits, bool keep_distribution);

}  // namespace das
