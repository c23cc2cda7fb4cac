#include "das/checkpoint.hpp"

#include <bit>
#include <fstream>

#include "das/error.hpp"

namespace das {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");

namespace {

constexpr const char* kFormat = "das-checkpoint-v1";

json read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  if (j.value("format", "") != kFormat) throw IoError("not a checkpoint: " + dir.string());
  return j;
}

void write_manifest(const fs::path& dir, const json& j) {
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << j.dump(2) << '\n';
}

json shape_entry(const std::string& name, const Matrix& m) {
  return json{{"path", name}, {"shape", {m.rows(), m.cols()}}};
}

std::string init_name(LoraInit i) { return i == LoraInit::pissa ? "pissa" : "zero"; }

}  // namespace

json config_to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size},     {"source_vocab_size", c.source_vocab_size},
              {"d_model", c.d_model},           {"n_heads", c.n_heads},
              {"n_enc_layers", c.n_enc_layers}, {"n_dec_layers", c.n_dec_layers},
              {"d_ff", c.d_ff},                 {"max_src_len", c.max_src_len},
              {"max_tgt_len", c.max_tgt_len}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.source_vocab_size = j.at("source_vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_enc_layers = j.at("n_enc_layers").get<std::size_t>();
    c.n_dec_layers = j.at("n_dec_layers").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.max_src_len = j.at("max_src_len").get<std::size_t>();
    c.max_tgt_len = j.at("max_tgt_len").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

void write_matrix_blob(const fs::path& file, const Matrix& m) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write " + file.string());
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
  if (!out) throw IoError("short write to " + file.string());
}

Matrix read_matrix_blob(const fs::path& file, std::size_t rows, std::size_t cols) {
  std::ifstream in(file, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + file.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != rows * cols * sizeof(float))
    throw IoError(file.string() + ": expected " + std::to_string(rows * cols * sizeof(float)) + " bytes, found " +
                  std::to_string(bytes));
  Matrix m(rows, cols);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("short read from " + file.string());
  return m;
}

void save_model(const fs::path& dir, const TransformerWeights& w, const json& meta) {
  fs::create_directories(dir);
  json params = json::array();
  w.visit([&](const std::string& path, const Matrix& m) {
    params.push_back(shape_entry(path, m));
    write_matrix_blob(dir / path, m);
  });
  json j{{"format", kFormat}, {"kind", "model"}, {"id", model_id(w)}, {"config", config_to_json(w.config)},
         {"parameters", params}, {"meta", meta.is_null() ? json::object() : meta}};
  write_manifest(dir, j);
}

TransformerWeights load_model(const fs::path& dir, json* meta_out) {
  const json j = read_manifest(dir);
  if (j.value("kind", "") != "model") throw IoError(dir.string() + " is not a model checkpoint");
  const ModelConfig cfg = config_from_json(j.at("config"));
  TransformerWeights w = TransformerWeights::zeros(cfg);
  std::size_t seen = 0;
  for (const auto& p : j.at("parameters")) {
    const std::string path = p.at("path").get<std::string>();
    Matrix* m = w.find(path);
    if (m == nullptr) throw IoError("checkpoint lists unknown parameter '" + path + "'");
    const auto rows = p.at("shape").at(0).get<std::size_t>();
    const auto cols = p.at("shape").at(1).get<std::size_t>();
    if (rows != m->rows() || cols != m->cols()) throw ShapeError("checkpoint shape mismatch at '" + path + "'");
    *m = read_matrix_blob(dir / path, rows, cols);
    ++seen;
  }
  std::size_t expected = 0;
  w.visit([&](const std::string&, const Matrix&) { ++expected; });
  if (seen != expected) throw IoError("checkpoint " + dir.string() + " is missing parameters");
  if (j.contains("id") && j.at("id").get<std::string>() != model_id(w))
    throw IoError("checkpoint " + dir.string() + " failed its checksum");
  if (meta_out) *meta_out = j.value("meta", json::object());
  return w;
}

void save_adapter(const fs::path& dir, const LoraAdapter& a, const json& meta) {
  fs::create_directories(dir);
  json pieces = json::array();
  for (const auto& [path, piece] : a.pieces) {
    json e{{"path", path}, {"a", {piece.a.rows(), piece.a.cols()}}, {"b", {piece.b.rows(), piece.b.cols()}},
           {"offset", piece.has_offset()}};
    write_matrix_blob(dir / (path + ".a"), piece.a);
    write_matrix_blob(dir / (path + ".b"), piece.b);
    if (piece.has_offset()) {
      write_matrix_blob(dir / (path + ".a0"), piece.a0);
      write_matrix_blob(dir / (path + ".b0"), piece.b0);
    }
    pieces.push_back(e);
  }
  json j{{"format", kFormat},
         {"kind", "adapter"},
         {"rank", a.rank},
         {"alpha", a.alpha},
         {"scaling", a.scaling},
         {"scaling_rule", "alpha/sqrt(rank)"},
         {"init", init_name(a.init)},
         {"domain", a.domain},
         {"base_id", a.base_id},
         {"attach_paths", a.attach_paths()},
         {"pieces", pieces},
         {"meta", meta.is_null() ? json::object() : meta}};
  write_manifest(dir, j);
}

std::string adapter_base_id(const fs::path& dir) {
  const json j = read_manifest(dir);
  if (j.value("kind", "") != "adapter") throw IoError(dir.string() + " is not an adapter checkpoint");
  return j.at("base_id").get<std::string>();
}

LoraAdapter load_adapter(const fs::path& dir, const std::string& expected_base_id, json* meta_out) {
  const json j = read_manifest(dir);
  if (j.value("kind", "") != "adapter") throw IoError(dir.string() + " is not an adapter checkpoint");
  LoraAdapter a;
  a.rank = j.at("rank").get<std::size_t>();
  a.alpha = j.at("alpha").get<float>();
  a.scaling = j.at("scaling").get<float>();
  a.init = j.at("init").get<std::string>() == "pissa" ? LoraInit::pissa : LoraInit::zero;
  a.domain = j.at("domain").get<std::string>();
  a.base_id = j.at("base_id").get<std::string>();
  if (!expected_base_id.empty() && a.base_id != expected_base_id)
    throw ConfigError("adapter " + dir.string() + " belongs to base " + a.base_id + ", not " + expected_base_id);
  if (a.scaling != rank_stable_scaling(a.alpha, a.rank))
    throw ConfigError("adapter " + dir.string() + " records a scaling other than alpha/sqrt(rank)");
  for (const auto& e : j.at("pieces")) {
    const std::string path = e.at("path").get<std::string>();
    LoraPiece p;
    p.a = read_matrix_blob(dir / (path + ".a"), e.at("a").at(0), e.at("a").at(1));
    p.b = read_matrix_blob(dir / (path + ".b"), e.at("b").at(0), e.at("b").at(1));
    if (e.value("offset", false)) {
      p.a0 = read_matrix_blob(dir / (path + ".a0"), p.a.rows(), p.a.cols());
      p.b0 = read_matrix_blob(dir / (path + ".b0"), p.b.rows(), p.b.cols());
    }
    if (p.a.rows() != a.rank || p.b.cols() != a.rank) throw ShapeError("adapter piece '" + path + "' has wrong rank");
    a.pieces.emplace(path, std::move(p));
  }
  if (meta_out) *meta_out = j.value("meta", json::object());
  return a;
}

}  // namespace das
