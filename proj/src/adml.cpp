#include "das/adml.hpp"

#include <cmath>

#include "das/error.hpp"
#include "json.hpp"

namespace das {

std::string to_string(MinOnlyBehavior b) {
  return b == MinOnlyBehavior::literal_min_word ? "literal-min-word" : "fallback-to-base";
}

std::string to_string(Condition c) {
  switch (c) {
    case Condition::none:
      return "none";
    case Condition::max_only:
      return "max";
    case Condition::min_only:
      return "min";
    case Condition::both:
      return "both";
  }
  return "none";
}

MinOnlyBehavior parse_min_only_behavior(const std::string& text) {
  if (text == "literal-min-word") return MinOnlyBehavior::literal_min_word;
  if (text == "fallback-to-base") return MinOnlyBehavior::fallback_to_base;
  throw ConfigError("unknown min-only behavior '" + text + "' (literal-min-word, fallback-to-base)");
}

void SelectionPolicy::validate() const {
  if (std::isnan(tau) || tau < 0.0f) throw ParameterError("tau must be >= 0");
  if (max_len == 0) throw ParameterError("max_len must be >= 1");
}

Selection select_next(std::span<const Candidate> cands, const SelectionPolicy& policy) {
  if (cands.empty()) throw ParameterError("select_next: no candidates");
  const float c0 = cands[0].confidence;
  std::size_t hi = 0, lo = 0;
  for (std::size_t i = 1; i < cands.size(); ++i) {
    if (cands[i].confidence > cands[hi].confidence) hi = i;
    if (cands[i].confidence < cands[lo].confidence) lo = i;
  }
  const bool max_fires = cands[hi].confidence - c0 >= policy.tau;
  const bool min_fires = cands[lo].confidence - c0 <= -policy.tau;

  Selection s;
  if (max_fires) {
    s.branch = hi;
    s.condition = min_fires ? Condition::both : Condition::max_only;
  } else if (min_fires) {
    s.branch = policy.min_only == MinOnlyBehavior::literal_min_word ? lo : 0;
    s.condition = Condition::min_only;
  }
  s.token = cands[s.branch].token;
  return s;
}

DecodedOutput adml_decode(const AdapterBank& bank, const EncoderOutput& enc, const SelectionPolicy& policy,
                          FanoutMode mode) {
  policy.validate();
  const std::size_t cap = std::min(policy.max_len, bank.base().config.max_tgt_len);
  MultiBranchSession session(bank, enc, mode);
  DecodedOutput out;
  int token = kBos;
  while (out.tokens.size() < cap) {
    const std::vector<Candidate> cands = session.step(token);
    const Selection sel = select_next(cands, policy);
    StepRecord rec;
    rec.step = out.tokens.size();
    rec.chosen_branch = sel.branch;
    rec.condition = sel.condition;
    for (const auto& c : cands) {
      rec.tokens.push_back(c.token);
      rec.confidences.push_back(c.confidence);
    }
    out.provenance.push_back(std::move(rec));
    out.tokens.push_back(sel.token);
    token = sel.token;
    if (token == kEos) return out;
  }
  out.hit_max_len = true;
  return out;
}

void write_provenance(std::ostream& out, const DecodedOutput& decoded, const std::vector<std::string>& names) {
  for (const auto& r : decoded.provenance) {
    nlohmann::json branches = nlohmann::json::array();
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
      branches.push_back({{"branch", i},
                          {"name", i < names.size() ? names[i] : std::to_string(i)},
                          {"token", r.tokens[i]},
                          {"confidence", r.confidences[i]}});
    }
    nlohmann::json j{{"step", r.step},
                     {"chosen_branch", r.chosen_branch},
                     {"condition", to_string(r.condition)},
                     {"branches", branches}};
    if (decoded.hit_max_len && &r == &decoded.provenance.back()) j["max_len_reached"] = true;
    out << j.dump() << '\n';
  }
}

}  // namespace das
