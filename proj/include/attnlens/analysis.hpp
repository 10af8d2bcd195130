#pragma once

#include "corpus.hpp"
#include "distribution.hpp"
#include "lens.hpp"
#include "model.hpp"
#include "tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace attnlens {

inline constexpr int default_top_k = 50;
inline constexpr const char* report_format = "attnlens.report/1";

struct top_k_entry {
  int token_id = 0;
  std::string token;
  double logit = 0;
  double probability = 0;  // softmax over the full vocabulary
  friend bool operator==(const top_k_entry&, const top_k_entry&) = default;
};

// Highest-logit tokens, ties broken by ascending id. For probability inputs the
// "logit" column holds ln p.
inline std::vector<top_k_entry> top_k_tokens(const token_distribution& dist, const tokenizer& tok, int k) {
  const auto n = static_cast<int>(dist.size());
  if (k < 1 || k > n) throw input_error("k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  const auto lp = dist.log_probs();
  const auto& scores = dist.kind() == distribution_kind::logits ? dist.values() : lp;
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), [&](int a, int b) {
    const double sa = scores[static_cast<std::size_t>(a)];
    const double sb = scores[static_cast<std::size_t>(b)];
    return sa > sb || (sa == sb && a < b);
  });
  std::vector<top_k_entry> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    out.push_back({id, id < tok.vocab_size() ? tok.token_string(id) : std::string(), scores[static_cast<std::size_t>(id)],
                   std::exp(lp[static_cast<std::size_t>(id)])});
  }
  return out;
}

struct top_k_report {
  int layer = 0;
  int head = 0;
  int position = 0;
  int k = 0;
  std::vector<top_k_entry> entries;
  friend bool operator==(const top_k_report&, const top_k_report&) = default;
};

struct head_inspection {
  std::string prompt;
  top_k_report lens;
  top_k_report baseline;
  double lens_kl = 0;      // KL(lens || model output) at the inspected position
  double baseline_kl = 0;  // KL(baseline || model output)
};

namespace detail {

inline std::vector<int> encode_prompt(const tokenizer& tok, const model_config& c, const std::string& prompt) {
  if (prompt.empty()) throw input_error("prompt is empty");
  auto ids = tok.encode(prompt);
  if (ids.empty()) throw input_error("prompt produced no tokens");
  if (ids.size() > static_cast<std::size_t>(c.max_seq_len))
    throw input_error("prompt is " + std::to_string(ids.size()) + " tokens, the model accepts " +
                      std::to_string(c.max_seq_len));
  return ids;
}

inline int resolve_position(std::optional<int> position, std::size_t len) {
  const int n = static_cast<int>(len);
  int p = position.value_or(n - 1);
  if (p < 0) p += n;  // negative positions count from the end
  if (p < 0 || p >= n) throw input_error("position out of range for a " + std::to_string(n) + "-token prompt");
  return p;
}

}  // namespace detail

// Top-k under the lens and under the unembedding baseline for one head's
// output at `position` (default: last prompt token).
inline head_inspection inspect_head(const model_bundle& model, const tokenizer& tok, const lens& l,
                                    const std::string& prompt, std::optional<int> position = std::nullopt,
                                    int k = default_top_k, baseline_variant variant = baseline_variant::layernorm) {
  check_binding(l, model);
  const auto ids = detail::encode_prompt(tok, model.config(), prompt);
  const int pos = detail::resolve_position(position, ids.size());
  const auto result = forward_with_capture(model, ids, true);
  const auto a = head_contribution(result, l.layer, l.head, pos);
  const auto lens_dist = apply_lens(l, a);
  const auto base_dist = baseline_projection(model, a, variant);
  const auto model_dist = result.distribution_at(pos);
  head_inspection out;
  out.prompt = prompt;
  out.lens = {l.layer, l.head, pos, k, top_k_tokens(lens_dist, tok, k)};
  out.baseline = {l.layer, l.head, pos, k, top_k_tokens(base_dist, tok, k)};
  out.lens_kl = kl_divergence(lens_dist, model_dist);
  out.baseline_kl = kl_divergence(base_dist, model_dist);
  return out;
}

struct scan_hit {
  std::string token;
  int token_id = 0;
  int rank = 0;  // 1-based rank in the head's top-k
};

struct head_hits {
  int layer = 0;
  int head = 0;
  std::vector<scan_hit> hits;
};

struct scan_report {
  std::string prompt;
  int k = 0;
  int position = 0;
  std::vector<std::string> flagged;   // strings that were scanned for
  std::vector<std::string> warnings;  // flagged strings skipped as not single tokens
  std::vector<head_hits> heads;       // only heads with at least one hit
  int heads_scanned = 0;
  int heads_with_hits = 0;
  int total_hits = 0;
};

// Intersects every lens's top-k at the last prompt position with the flagged
// vocabulary. Matching is exact single-token string equality.
inline scan_report scan_prompt(const model_bundle& model, const tokenizer& tok, const std::vector<lens>& lenses,
                               const std::string& prompt, const std::vector<std::string>& flagged_vocab,
                               int k = default_top_k) {
  for (const auto& l : lenses) check_binding(l, model);
  const auto ids = detail::encode_prompt(tok, model.config(), prompt);
  const int pos = static_cast<int>(ids.size()) - 1;
  scan_report report;
  report.prompt = prompt;
  report.k = k;
  report.position = pos;

  std::map<int, std::string> flagged_ids;
  for (const auto& s : flagged_vocab) {
    const auto id = tok.single_token(s);
    if (!id) {
      report.warnings.push_back("'" + s + "' is not a single token; skipped");
      continue;
    }
    if (flagged_ids.emplace(*id, s).second) report.flagged.push_back(s);
  }

  const auto result = forward_with_capture(model, ids, true);
  for (const auto& l : lenses) {
    ++report.heads_scanned;
    const auto top = top_k_tokens(apply_lens(l, head_contribution(result, l.layer, l.head, pos)), tok, k);
    head_hits hh{l.layer, l.head, {}};
    for (std::size_t r = 0; r < top.size(); ++r) {
      const auto it = flagged_ids.find(top[r].token_id);
      if (it != flagged_ids.end()) hh.hits.push_back({it->second, it->first, static_cast<int>(r) + 1});
    }
    if (!hh.hits.empty()) {
      ++report.heads_with_hits;
      report.total_hits += static_cast<int>(hh.hits.size());
      report.heads.push_back(std::move(hh));
    }
  }
  return report;
}

struct transfer_entry {
  int layer_a = 0, head_a = 0, layer_b = 0, head_b = 0;
  std::size_t n_eval = 0;
  double kl_ab = 0;  // mean KL(a || b)
  double kl_ba = 0;  // mean KL(b || a)
  double ce_ab = 0;  // mean H(a, b)
  double ce_ba = 0;
};

// Disagreement between two lenses' token distributions over shared inputs.
inline transfer_entry transfer_divergence(const lens& a, const lens& b, const std::vector<hidden_vector>& eval_inputs) {
  if (a.d_model() != b.d_model() || a.vocab_size() != b.vocab_size())
    throw input_error("lenses have different shapes");
  if (eval_inputs.empty()) throw input_error("evaluation set is empty");
  transfer_entry e{a.layer, a.head, b.layer, b.head, eval_inputs.size(), 0, 0, 0, 0};
  for (const auto& x : eval_inputs) {
    const auto pa = apply_lens(a, x);
    const auto pb = apply_lens(b, x);
    e.kl_ab += kl_divergence(pa, pb);
    e.kl_ba += kl_divergence(pb, pa);
    e.ce_ab += cross_entropy(pa, pb);
    e.ce_ba += cross_entropy(pb, pa);
  }
  const auto n = static_cast<double>(eval_inputs.size());
  e.kl_ab /= n;
  e.kl_ba /= n;
  e.ce_ab /= n;
  e.ce_ba /= n;
  for (double v : {e.kl_ab, e.kl_ba, e.ce_ab, e.ce_ba})
    if (!std::isfinite(v)) throw divergence_error("transfer divergence is not finite");
  return e;
}

// Deterministic evenly spaced windows from a token slice.
inline std::vector<std::vector<int>> eval_windows(std::span<const int> tokens, int seq_len, int count) {
  if (count < 1) throw input_error("evaluation count must be >= 1");
  if (tokens.size() < static_cast<std::size_t>(seq_len)) throw input_error("evaluation slice is shorter than seq_len");
  const auto span = tokens.size() - static_cast<std::size_t>(seq_len);
  std::vector<std::vector<int>> out;
  for (int i = 0; i < count; ++i) {
    const std::size_t start = count > 1 ? span * static_cast<std::size_t>(i) / static_cast<std::size_t>(count - 1) : 0;
    const auto w = tokens.subspan(start, static_cast<std::size_t>(seq_len));
    out.emplace_back(w.begin(), w.end());
  }
  return out;
}

// Last-position head outputs of (layer, head) over the given windows.
inline std::vector<hidden_vector> collect_head_outputs(const model_bundle& model, int layer, int head,
                                                       const std::vector<std::vector<int>>& windows) {
  detail::check_index(model.config(), layer, head);
  std::vector<hidden_vector> out;
  for (const auto& w : windows) {
    const auto r = forward_with_capture(model, w, true);
    out.push_back(head_contribution(r, layer, head, r.seq_len() - 1));
  }
  return out;
}

struct transfer_report {
  std::vector<transfer_entry> entries;  // every ordered pair (a, b)
};

// Pairwise divergences; each pair is evaluated on head a's own outputs.
inline transfer_report transfer_matrix(const model_bundle& model, const std::vector<lens>& lenses,
                                       const std::vector<std::vector<int>>& windows) {
  transfer_report report;
  std::map<std::pair<int, int>, std::vector<hidden_vector>> inputs;
  for (const auto& l : lenses) {
    check_binding(l, model);
    inputs[{l.layer, l.head}] = collect_head_outputs(model, l.layer, l.head, windows);
  }
  for (const auto& a : lenses)
    for (const auto& b : lenses) report.entries.push_back(transfer_divergence(a, b, inputs[{a.layer, a.head}]));
  return report;
}

struct head_eval {
  int layer = 0, head = 0;
  std::size_t n_eval = 0;
  double lens_kl = 0;      // mean KL(lens || model output)
  double baseline_kl = 0;  // mean KL(baseline || model output)
  bool lens_better() const { return lens_kl < baseline_kl; }
};

struct eval_summary {
  std::vector<head_eval> heads;
  int lens_better = 0;
  double fraction_better() const { return heads.empty() ? 0.0 : static_cast<double>(lens_better) / heads.size(); }
};

// Lens vs baseline KL against the model's own last-position output over the
// evaluation windows.
inline eval_summary evaluate_lenses(const model_bundle& model, const std::vector<lens>& lenses,
                                    const std::vector<std::vector<int>>& windows,
                                    baseline_variant variant = baseline_variant::layernorm) {
  eval_summary s;
  for (const auto& l : lenses) {
    check_binding(l, model);
    s.heads.push_back({l.layer, l.head, windows.size(), 0, 0});
  }
  for (const auto& w : windows) {
    const auto r = forward_with_capture(model, w, true);
    const auto pos = r.seq_len() - 1;
    const auto target = r.distribution_at(pos);
    for (std::size_t i = 0; i < lenses.size(); ++i) {
      const auto a = head_contribution(r, lenses[i].layer, lenses[i].head, pos);
      s.heads[i].lens_kl += kl_divergence(apply_lens(lenses[i], a), target);
      s.heads[i].baseline_kl += kl_divergence(baseline_projection(model, a, variant), target);
    }
  }
  for (auto& h : s.heads) {
    h.lens_kl /= static_cast<double>(windows.size());
    h.baseline_kl /= static_cast<double>(windows.size());
    if (h.lens_better()) ++s.lens_better;
  }
  return s;
}

// --- serialization ------------------------------------------------------------

using json = nlohmann::ordered_json;

inline json to_json(const top_k_entry& e) {
  return {{"token_id", e.token_id}, {"token", e.token}, {"logit", e.logit}, {"probability", e.probability}};
}

inline json to_json(const std::vector<top_k_entry>& entries) {
  json arr = json::array();
  for (const auto& e : entries) arr.push_back(to_json(e));
  return arr;
}

inline json to_json(const head_inspection& h) {
  return {{"layer", h.lens.layer},           {"head", h.lens.head},         {"position", h.lens.position},
          {"k", h.lens.k},                   {"lens", to_json(h.lens.entries)}, {"baseline", to_json(h.baseline.entries)},
          {"lens_kl", h.lens_kl},            {"baseline_kl", h.baseline_kl}};
}

inline json to_json(const scan_report& r) {
  json heads = json::array();
  for (const auto& hh : r.heads) {
    json hits = json::array();
    for (const auto& h : hh.hits) hits.push_back({{"token", h.token}, {"token_id", h.token_id}, {"rank", h.rank}});
    heads.push_back({{"layer", hh.layer}, {"head", hh.head}, {"hits", hits}});
  }
  return {{"prompt", r.prompt},
          {"k", r.k},
          {"position", r.position},
          {"flagged_vocab", r.flagged},
          {"warnings", r.warnings},
          {"hits", heads},
          {"coverage", {{"heads_scanned", r.heads_scanned}, {"heads_with_hits", r.heads_with_hits}, {"total_hits", r.total_hits}}}};
}

inline json to_json(const transfer_entry& e) {
  return {{"layer_a", e.layer_a}, {"head_a", e.head_a}, {"layer_b", e.layer_b}, {"head_b", e.head_b},
          {"n_eval", e.n_eval},   {"kl_ab", e.kl_ab},   {"kl_ba", e.kl_ba},     {"ce_ab", e.ce_ab},
          {"ce_ba", e.ce_ba}};
}

inline json to_json(const head_eval& h) {
  return {{"layer", h.layer},       {"head", h.head},
          {"n_eval", h.n_eval},     {"lens_kl", h.lens_kl},
          {"baseline_kl", h.baseline_kl}, {"lens_better", h.lens_better()}};
}

// JSON text that tolerates arbitrary bytes in token strings.
inline std::string dump(const json& j, int indent = -1) {
  return j.dump(indent, ' ', false, json::error_handler_t::replace);
}

// Line-delimited records, one per head, each tagged with the report format.
inline std::string to_jsonl(const std::string& kind, const std::vector<json>& records) {
  std::string out;
  for (const auto& r : records) {
    json line = {{"format", report_format}, {"kind", kind}};
    line.update(r);
    out += dump(line) + '\n';
  }
  return out;
}

inline std::string printable(const std::string& token) {
  std::string out;
  for (unsigned char c : token) {
    if (c == '\n')
      out += "\\n";
    else if (c == '\t')
      out += "\\t";
    else if (c < 0x20 || c == 0x7f) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "\\x%02x", c);
      out += buf;
    } else
      out += static_cast<char>(c);
  }
  return "'" + out + "'";
}

// Side-by-side table of lens and baseline top-k.
inline std::string format_table(const head_inspection& h) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "layer %d head %d position %d  (lens KL %.4f, baseline KL %.4f)\n", h.lens.layer,
                h.lens.head, h.lens.position, h.lens_kl, h.baseline_kl);
  out << line;
  std::snprintf(line, sizeof line, "%4s  %-18s %9s %8s   %-18s %9s %8s\n", "rank", "lens", "logit", "prob", "baseline",
                "logit", "prob");
  out << line;
  for (std::size_t i = 0; i < h.lens.entries.size(); ++i) {
    const auto& a = h.lens.entries[i];
    const auto& b = h.baseline.entries[i];
    std::snprintf(line, sizeof line, "%4zu  %-18s %9.4f %8.5f   %-18s %9.4f %8.5f\n", i + 1, printable(a.token).c_str(),
                  a.logit, a.probability, printable(b.token).c_str(), b.logit, b.probability);
    out << line;
  }
  return out.str();
}

inline std::string format_table(const scan_report& r) {
  std::ostringstream out;
  out << "scan k=" << r.k << " heads=" << r.heads_scanned << " heads_with_hits=" << r.heads_with_hits
      << " hits=" << r.total_hits << '\n';
  for (const auto& w : r.warnings) out << "warning: " << w << '\n';
  for (const auto& hh : r.heads) {
    out << "  layer " << hh.layer << " head " << hh.head << ':';
    for (const auto& h : hh.hits) out << ' ' << printable(h.token) << "@" << h.rank;
    out << '\n';
  }
  return out.str();
}

inline std::string format_table(const transfer_report& r) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %-8s %10s %10s %10s %10s\n", "a", "b", "KL(a|b)", "KL(b|a)", "CE(a,b)", "CE(b,a)");
  out << line;
  for (const auto& e : r.entries) {
    const auto a = "L" + std::to_string(e.layer_a) + "H" + std::to_string(e.head_a);
    const auto b = "L" + std::to_string(e.layer_b) + "H" + std::to_string(e.head_b);
    std::snprintf(line, sizeof line, "%-8s %-8s %10.5f %10.5f %10.5f %10.5f\n", a.c_str(), b.c_str(), e.kl_ab, e.kl_ba,
                  e.ce_ab, e.ce_ba);
    out << line;
  }
  return out.str();
}

inline std::string format_table(const eval_summary& s) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-6s %-6s %12s %12s\n", "layer", "head", "lens_kl", "baseline_kl");
  out << line;
  for (const auto& h : s.heads) {
    std::snprintf(line, sizeof line, "%-6d %-6d %12.5f %12.5f%s\n", h.layer, h.head, h.lens_kl, h.baseline_kl,
                  h.lens_better() ? "  *" : "");
    out << line;
  }
  std::snprintf(line, sizeof line, "lens_better %d/%zu fraction %.4f\n", s.lens_better, s.heads.size(), s.fraction_better());
  out << line;
  return out.str();
}

}  // namespace attnlens
