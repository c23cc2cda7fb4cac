#include "das/lora.hpp"

#include <cmath>
#include <regex>
#include <set>

#include "das/error.hpp"
#include "das/model.hpp"

namespace das {

Matrix LoraPiece::effective_a() const {
  if (!has_offset()) return a;
  const Matrix parts[2] = {a, a0};
  return concat_rows(parts);
}

Matrix LoraPiece::effective_b() const {
  if (!has_offset()) return b;
  const Matrix parts[2] = {b, scaled(b0, -1.0f)};
  return concat_cols(parts);
}

const LoraPiece* LoraAdapter::find(const std::string& path) const {
  auto it = pieces.find(path);
  return it == pieces.end() ? nullptr : &it->second;
}

std::vector<std::string> LoraAdapter::attach_paths() const {
  std::vector<std::string> out;
  for (const auto& [p, piece] : pieces) out.push_back(p);
  return out;
}

std::size_t LoraAdapter::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [p, piece] : pieces) n += piece.a.size() + piece.b.size();
  return n;
}

float rank_stable_scaling(float alpha, std::size_t rank) {
  if (rank == 0) throw ParameterError("rank must be positive");
  if (!(alpha > 0.0f)) throw ParameterError("alpha must be positive");
  return alpha / std::sqrt(static_cast<float>(rank));
}

std::vector<std::string> default_attach_paths(const TransformerWeights& w) {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < w.dec.size(); ++l) {
    const std::string p = "dec." + std::to_string(l);
    for (const char* s : {".self.q", ".self.v", ".cross.q", ".cross.v"}) out.push_back(p + s);
  }
  return out;
}

bool is_attachable_path(const TransformerWeights& w, const std::string& path) {
  static const std::regex kSite(R"(dec\.\d+\.(self|cross)\.[qkvo]|dec\.\d+\.ff\.w[12]|dec\.out\.w)");
  return std::regex_match(path, kSite) && w.find(path) != nullptr;
}

LoraPiece init_zero_piece(std::size_t d_out, std::size_t d_in, std::size_t rank, std::mt19937_64& rng) {
  if (rank < 1 || rank > std::min(d_in, d_out))
    throw ParameterError("lora rank " + std::to_string(rank) + " outside [1, " + std::to_string(std::min(d_in, d_out)) + "]");
  LoraPiece p;
  p.a = Matrix::uniform(rank, d_in, 1.0f / std::sqrt(static_cast<float>(d_in)), rng);
  p.b = Matrix(d_out, rank);
  return p;
}

PissaInit init_pissa(const Matrix& w0, std::size_t rank, float alpha) {
  if (rank < 1 || rank > std::min(w0.rows(), w0.cols()))
    throw ParameterError("lora rank " + std::to_string(rank) + " outside [1, " +
                         std::to_string(std::min(w0.rows(), w0.cols())) + "]");
  const float gamma = rank_stable_scaling(alpha, rank);
  const TruncatedSvd svd = svd_truncate(w0, rank);
  const float inv_sqrt_gamma = 1.0f / std::sqrt(gamma);
  LoraPiece p;
  p.a = Matrix(rank, w0.cols());
  p.b = Matrix(w0.rows(), rank);
  for (std::size_t k = 0; k < rank; ++k) {
    const float root = std::sqrt(svd.s[k]) * inv_sqrt_gamma;
    for (std::size_t c = 0; c < w0.cols(); ++c) p.a(k, c) = root * svd.v(c, k);
    for (std::size_t r = 0; r < w0.rows(); ++r) p.b(r, k) = svd.u(r, k) * root;
  }
  p.a0 = p.a;
  p.b0 = p.b;
  Matrix residual = sub(w0, scaled(matmul(p.b, p.a), gamma));
  return PissaInit{std::move(p), std::move(residual)};
}

LoraAdapter make_adapter(const TransformerWeights& weights, const LoraConfig& config) {
  LoraAdapter ad;
  ad.rank = config.rank;
  ad.alpha = config.alpha;
  ad.scaling = rank_stable_scaling(config.alpha, config.rank);
  ad.init = config.init;
  ad.base_id = model_id(weights);
  const std::vector<std::string> paths =
      config.attach_paths.empty() ? default_attach_paths(weights) : config.attach_paths;
  std::set<std::string> seen;
  std::mt19937_64 rng(config.seed);
  for (const auto& path : paths) {
    if (!is_attachable_path(weights, path))
      throw ParameterError("cannot attach adapter to '" + path + "' (decoder linear weights only)");
    if (!seen.insert(path).second) throw ParameterError("duplicate attach path '" + path + "'");
    const Matrix& w = *weights.find(path);
    if (config.init == LoraInit::zero) {
      ad.pieces.emplace(path, init_zero_piece(w.rows(), w.cols(), config.rank, rng));
    } else {
      ad.pieces.emplace(path, init_pissa(w, config.rank, config.alpha).piece);
    }
  }
  return ad;
}

namespace {

void check_piece(const Matrix& w, const LoraPiece& piece) {
  if (piece.a.cols() != w.cols() || piece.b.rows() != w.rows() || piece.a.rows() != piece.b.cols())
    throw ShapeError("lora piece (" + std::to_string(piece.b.rows()) + "x" + std::to_string(piece.b.cols()) + ")(" +
                     std::to_string(piece.a.rows()) + "x" + std::to_string(piece.a.cols()) + ") does not fit weight " +
                     std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
}

}  // namespace

Matrix apply(const Matrix& w, const LoraPiece& piece, float gamma, const Matrix& x) {
  check_piece(w, piece);
  if (x.cols() != w.cols()) throw ShapeError("lora apply: input width " + std::to_string(x.cols()) + " != " + std::to_string(w.cols()));
  Matrix y = matmul_nt(x, w);
  const Matrix z = matmul_nt(x, piece.effective_a());
  const Matrix l = matmul_nt(z, piece.effective_b());
  float* yp = y.data();
  const float* lp = l.data();
  for (std::size_t i = 0; i < y.size(); ++i) yp[i] = yp[i] + gamma * lp[i];
  return y;
}

Matrix merge(const Matrix& w, const LoraPiece& piece, float gamma) {
  check_piece(w, piece);
  return add(w, scaled(matmul(piece.effective_b(), piece.effective_a()), gamma));
}

TransformerWeights merged_weights(const TransformerWeights& base, const LoraAdapter& adapter) {
  TransformerWeights out = base;
  for (const auto& [path, piece] : adapter.pieces) {
    Matrix* w = out.find(path);
    if (w == nullptr) throw ParameterError("adapter path '" + path + "' missing from base");
    *w = merge(*w, piece, adapter.scaling);
  }
  return out;
}

}  // namespace das
