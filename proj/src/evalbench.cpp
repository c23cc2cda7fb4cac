#include "das/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "das/error.hpp"
#include "das/simd.hpp"

namespace das {

using nlohmann::json;

double WerCounts::wer() const {
  if (reference == 0) throw ParameterError("wer of an empty reference");
  return static_cast<double>(errors()) / static_cast<double>(reference);
}

WerCounts& WerCounts::operator+=(const WerCounts& o) {
  substitutions += o.substitutions;
  deletions += o.deletions;
  insertions += o.insertions;
  reference += o.reference;
  return *this;
}

namespace {

template <typename T>
WerCounts align(std::span<const T> ref, std::span<const T> hyp) {
  if (ref.empty()) throw ParameterError("wer: empty reference");
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i, j - 1) + 1, at(i - 1, j) + 1});

  WerCounts c;
  c.reference = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    const std::size_t here = at(i, j);
    if (i > 0 && j > 0 && here == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++c.substitutions;
      --i;
      --j;
    } else if (j > 0 && here == at(i, j - 1) + 1) {
      ++c.insertions;
      --j;
    } else {
      ++c.deletions;
      --i;
    }
  }
  return c;
}

}  // namespace

WerCounts wer(std::span<const int> reference, std::span<const int> hypothesis) {
  return align<int>(reference, hypothesis);
}

WerCounts wer(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis) {
  return align<std::string>(reference, hypothesis);
}

std::vector<int> normalize_transcript(std::span<const int> tokens) {
  std::vector<int> out;
  for (int t : tokens) {
    if (t == kEos) break;
    if (t == kPad || t == kBos) continue;
    out.push_back(t);
  }
  return out;
}

double WerGrid::relative_change(std::size_t row, std::size_t col) const {
  const double base = wer_at(0, col);
  const double v = wer_at(row, col);
  if (base == 0.0) return v == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return 100.0 * (v - base) / base;
}

json WerGrid::to_json() const {
  json rows = json::array();
  for (std::size_t r = 0; r < decoders.size(); ++r) {
    json cols = json::array();
    for (std::size_t c = 0; c < datasets.size(); ++c) {
      const WerCounts& w = cells[r][c];
      const double rel = relative_change(r, c);
      cols.push_back({{"dataset", datasets[c]},
                      {"substitutions", w.substitutions},
                      {"deletions", w.deletions},
                      {"insertions", w.insertions},
                      {"reference", w.reference},
                      {"wer", w.wer()},
                      {"relative_change_pct", std::isfinite(rel) ? json(rel) : json(nullptr)}});
    }
    rows.push_back({{"decoder", decoders[r]}, {"cells", cols}});
  }
  return json{{"baseline", decoders.empty() ? "" : decoders[0]}, {"rows", rows}};
}

std::string WerGrid::to_table(const std::string& title) const {
  std::vector<std::vector<std::string>> cells_txt;
  std::vector<std::string> header{""};
  for (const auto& d : datasets) header.push_back(d);
  cells_txt.push_back(header);
  char buf[64];
  for (std::size_t r = 0; r < decoders.size(); ++r) {
    std::vector<std::string> line{decoders[r]};
    for (std::size_t c = 0; c < datasets.size(); ++c) {
      const double rel = relative_change(r, c);
      if (r == 0)
        std::snprintf(buf, sizeof buf, "%.2f", 100.0 * wer_at(r, c));
      else if (std::isfinite(rel))
        std::snprintf(buf, sizeof buf, "%.2f (%+.1f%%)", 100.0 * wer_at(r, c), rel);
      else
        std::snprintf(buf, sizeof buf, "%.2f (n/a)", 100.0 * wer_at(r, c));
      line.push_back(buf);
    }
    cells_txt.push_back(line);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells_txt)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  std::ostringstream out;
  out << title << "\n";
  for (std::size_t i = 0; i < cells_txt.size(); ++i) {
    for (std::size_t c = 0; c < cells_txt[i].size(); ++c) {
      const std::string& s = cells_txt[i][c];
      if (c == 0)
        out << s << std::string(width[c] - s.size(), ' ');
      else
        out << " | " << std::string(width[c] - s.size(), ' ') << s;
    }
    out << "\n";
    if (i == 0) {
      std::size_t total = width[0];
      for (std::size_t c = 1; c < width.size(); ++c) total += 3 + width[c];
      out << std::string(total, '-') << "\n";
    }
  }
  out << "WER in percent; parentheses give the relative change against " << (decoders.empty() ? "" : decoders[0])
      << ".\n";
  return out.str();
}

WerGrid eval_matrix(std::span<const NamedDecoder> decoders, std::span<const NamedDataset> datasets) {
  if (decoders.empty() || datasets.empty()) throw ParameterError("eval_matrix needs decoders and datasets");
  WerGrid grid;
  for (const auto& d : decoders) grid.decoders.push_back(d.name);
  for (const auto& s : datasets) grid.datasets.push_back(s.name);
  for (const auto& d : decoders) {
    std::vector<WerCounts> row;
    for (const auto& s : datasets) {
      if (d.tokenizer != s.tokenizer)
        throw ConfigError("decoder '" + d.name + "' and dataset '" + s.name + "' use different tokenizers");
      if (s.examples.empty()) throw ParameterError("dataset '" + s.name + "' is empty");
      WerCounts total;
      for (const auto& ex : s.examples) total += wer(normalize_transcript(ex.target), normalize_transcript(d.decode(ex)));
      row.push_back(total);
    }
    grid.cells.push_back(std::move(row));
  }
  return grid;
}

// ---------------------------------------------------------------------------

std::string hardware_descriptor() {
  std::ifstream in("/proc/cpuinfo");
  std::string line, model;
  std::size_t cores = 0;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      ++cores;
      if (model.empty()) {
        auto pos = line.find(':');
        model = pos == std::string::npos ? line : line.substr(pos + 2);
      }
    }
  }
  if (model.empty()) model = "unknown cpu";
  return model + ", " + std::to_string(cores) + " logical cpu(s), kernels " + simd::active().name +
         ", single-threaded";
}

std::vector<LoraAdapter> replicate_adapters(const std::vector<LoraAdapter>& adapters, std::size_t k) {
  if (k > 0 && adapters.empty()) throw ParameterError("cannot replicate an empty adapter list");
  std::vector<LoraAdapter> out;
  for (std::size_t i = 0; i < k; ++i) {
    LoraAdapter a = adapters[i % adapters.size()];
    if (i >= adapters.size()) a.domain += "#" + std::to_string(i / adapters.size());
    out.push_back(std::move(a));
  }
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double cov(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  return mean > 0.0 ? std::sqrt(var) / mean : 0.0;
}

}  // namespace

BenchReport bench_latency(const TransformerWeights& base, const std::vector<LoraAdapter>& adapters,
                          std::span<const std::vector<int>> sources, const BenchConfig& config) {
  if (config.repetitions < 3) throw ParameterError("bench_latency needs at least 3 repetitions");
  if (sources.empty()) throw ParameterError("bench_latency needs at least one source");
  config.policy.validate();
  const AdapterBank bank(base, adapters);
  const std::size_t max_len = std::min(config.policy.max_len, base.config.max_tgt_len);

  // Unequal work would make the comparison meaningless.
  std::size_t adml_tokens = 0;
  for (const auto& src : sources) {
    const EncoderOutput enc = encode(base, src);
    const DecodedOutput b = adml_decode(bank, enc, config.policy, FanoutMode::batched);
    DecodedOutput s = adml_decode(bank, enc, config.policy, FanoutMode::sequential);
    if (config.inject_mismatch) s.tokens.push_back(kPad);
    if (b.tokens != s.tokens) throw CorrectnessError("batched and sequential fan-out decoded different tokens");
    adml_tokens += b.tokens.size();
  }

  auto run_base = [&] {
    std::size_t tokens = 0;
    for (const auto& src : sources) tokens += greedy_decode(base, encode(base, src), max_len).size();
    return tokens;
  };
  auto run_adml = [&](FanoutMode mode) {
    std::size_t tokens = 0;
    for (const auto& src : sources) tokens += adml_decode(bank, encode(base, src), config.policy, mode).tokens.size();
    return tokens;
  };
  auto timed = [](auto&& fn) {
    const auto t0 = Clock::now();
    const std::size_t tokens = fn();
    const auto t1 = Clock::now();
    return std::pair<std::size_t, double>(tokens, std::chrono::duration<double>(t1 - t0).count());
  };

  const std::size_t k = adapters.size();
  for (std::size_t i = 0; i < config.warmup; ++i) {
    run_base();
    if (k > 0) {
      run_adml(FanoutMode::batched);
      run_adml(FanoutMode::sequential);
    }
  }

  BenchReport rep;
  rep.k = k;
  rep.utterances = sources.size();
  rep.hardware = hardware_descriptor();
  rep.timer_resolution = static_cast<double>(Clock::period::num) / static_cast<double>(Clock::period::den);
  std::vector<double> base_t, batched_t, seq_t;
  for (std::size_t r = 0; r < config.repetitions; ++r) {
    const auto [bt, bs] = timed(run_base);
    rep.rows.push_back({"base", k, r, bt, bs});
    base_t.push_back(bs / static_cast<double>(bt));
    if (k == 0) continue;
    const auto [pt, ps] = timed([&] { return run_adml(FanoutMode::batched); });
    rep.rows.push_back({"batched", k, r, pt, ps});
    batched_t.push_back(ps / static_cast<double>(pt));
    const auto [st, ss] = timed([&] { return run_adml(FanoutMode::sequential); });
    rep.rows.push_back({"sequential", k, r, st, ss});
    seq_t.push_back(ss / static_cast<double>(st));
    if (pt != adml_tokens || st != adml_tokens) throw CorrectnessError("decoded token count changed between runs");
  }
  rep.base_per_token = median(base_t);
  rep.base_cov = cov(base_t);
  if (k == 0) {
    rep.batched_per_token = rep.sequential_per_token = rep.base_per_token;
    return rep;
  }
  rep.batched_per_token = median(batched_t);
  rep.sequential_per_token = median(seq_t);
  rep.batched_cov = cov(batched_t);
  rep.sequential_cov = cov(seq_t);
  rep.delta_p = rep.batched_per_token / rep.base_per_token - 1.0;
  rep.delta_s = rep.sequential_per_token / rep.base_per_token - 1.0;
  rep.speedup = rep.delta_p != 0.0 ? rep.delta_s / rep.delta_p : 0.0;
  return rep;
}

json BenchReport::to_json() const {
  return json{{"k", k},
              {"utterances", utterances},
              {"base_seconds_per_token", base_per_token},
              {"batched_seconds_per_token", batched_per_token},
              {"sequential_seconds_per_token", sequential_per_token},
              {"delta_p", delta_p},
              {"delta_s", delta_s},
              {"speedup", speedup},
              {"base_cov", base_cov},
              {"batched_cov", batched_cov},
              {"sequential_cov", sequential_cov},
              {"hardware", hardware},
              {"timer_resolution_seconds", timer_resolution},
              {"latency_unit", "seconds per generated token (stands in for RTF; no audio duration exists)"}};
}

void write_bench_csv(std::ostream& out, std::span<const BenchReport> reports) {
  out << "mode,k,rep,tokens,seconds\n";
  char buf[64];
  for (const auto& r : reports)
    for (const auto& row : r.rows) {
      std::snprintf(buf, sizeof buf, "%.9f", row.seconds);
      out << row.mode << ',' << row.k << ',' << row.rep << ',' << row.tokens << ',' << buf << '\n';
    }
}

std::string bench_table(std::span<const BenchReport> reports) {
  std::ostringstream out;
  char buf[160];
  out << "Latency per generated token (ms; stands in for RTF), median over repetitions\n";
  std::snprintf(buf, sizeof buf, "%-10s | %10s | %10s | %10s | %8s | %8s | %8s\n", "", "base", "batched", "sequential",
                "dP", "dS", "speedup");
  out << buf << std::string(80, '-') << "\n";
  for (const auto& r : reports) {
    const std::string name = r.k == 0 ? "original" : std::to_string(r.k) + "-domain";
    if (r.k == 0)
      std::snprintf(buf, sizeof buf, "%-10s | %10.4f | %10s | %10s | %8s | %8s | %8s\n", name.c_str(),
                    1e3 * r.base_per_token, "-", "-", "-", "-", "-");
    else
      std::snprintf(buf, sizeof buf, "%-10s | %10.4f | %10.4f | %10.4f | %8.3f | %8.3f | %7.2fx\n", name.c_str(),
                    1e3 * r.base_per_token, 1e3 * r.batched_per_token, 1e3 * r.sequential_per_token, r.delta_p,
                    r.delta_s, r.speedup);
    out << buf;
  }
  if (!reports.empty()) out << "hardware: " << reports.front().hardware << "\n";
  out << "dP = batched/base - 1, dS = sequential/base - 1, speedup = dS/dP.\n";
  return out.str();
}

}  // namespace das
