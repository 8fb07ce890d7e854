#pragma once

// Causal ablations: zero whole attention heads or individual FFN activations,
// re-run the full forward pass and measure the HIT@10 change.

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "glpi/attribution.hpp"
#include "glpi/metrics.hpp"
#include "glpi/model.hpp"

namespace glpi {

struct RankedHead {
  HeadRef head;
  double score = 0.0;
};

// Heads by the summed mean |I| of their attention neurons, best first.
inline std::vector<RankedHead> rank_heads(const ImportanceTable& table) {
  std::map<HeadRef, double> score;
  for (const auto& n : table.neurons) {
    if (n.ref.kind == NeuronKind::ATTN) score[{n.ref.layer, n.ref.unit}] += n.mean_abs_I;
  }
  std::vector<RankedHead> out;
  for (const auto& [h, s] : score) out.push_back({h, s});
  std::stable_sort(out.begin(), out.end(), [](const RankedHead& a, const RankedHead& b) { return a.score > b.score; });
  return out;
}

inline ForwardTrace masked_forward(const std::vector<int>& tokens, const Checkpoint& ck, const MaskSpec& mask) {
  mask.validate(ck.config);
  return forward_batch(ck, {tokens}, &mask);
}

struct EvalExample {
  std::vector<int> prompt;
  std::size_t target = 0;
  std::string relation;
};

// Logits at the prediction position of every example.
inline std::vector<Vector> prediction_logits(const Checkpoint& ck, const std::vector<EvalExample>& examples,
                                             const MaskSpec* mask = nullptr, std::size_t chunk = 64) {
  std::vector<Vector> out;
  out.reserve(examples.size());
  for (std::size_t b = 0; b < examples.size(); b += chunk) {
    std::vector<std::vector<int>> seqs;
    for (std::size_t i = b; i < std::min(examples.size(), b + chunk); ++i) seqs.push_back(examples[i].prompt);
    const auto tr = forward_batch(ck, seqs, mask);
    for (std::size_t s = 0; s < tr.sequences(); ++s) {
      const auto row = tr.logits.row(tr.last_row(s));
      out.emplace_back(row.begin(), row.end());
    }
  }
  return out;
}

struct InterventionResult {
  double baseline = 0.0;
  double masked = 0.0;
  std::optional<double> drop_pct;  // 100 (baseline - masked) / baseline; absent if baseline == 0
};

inline std::optional<double> relative_drop(double baseline, double masked) {
  if (baseline == 0.0) return std::nullopt;
  return 100.0 * (baseline - masked) / baseline;
}

struct AblationOutcome {
  InterventionResult overall;
  std::map<std::string, InterventionResult> per_relation;
};

inline AblationOutcome ablation_drop(const Checkpoint& ck, const std::vector<EvalExample>& examples,
                                     const MaskSpec& mask) {
  if (examples.empty()) throw DataError("ablation_drop: no examples");
  mask.validate(ck.config);
  const auto base_logits = prediction_logits(ck, examples);
  const auto masked_logits = mask.empty() ? base_logits : prediction_logits(ck, examples, &mask);
  std::vector<std::size_t> targets;
  for (const auto& e : examples) targets.push_back(e.target);
  AblationOutcome out;
  out.overall.baseline = hit_at_k(base_logits, targets, 10);
  out.overall.masked = hit_at_k(masked_logits, targets, 10);
  out.overall.drop_pct = relative_drop(out.overall.baseline, out.overall.masked);

  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < examples.size(); ++i) groups[examples[i].relation].push_back(i);
  for (const auto& [rel, idx] : groups) {
    std::vector<Vector> bl, ml;
    std::vector<std::size_t> tg;
    for (auto i : idx) {
      bl.push_back(base_logits[i]);
      ml.push_back(masked_logits[i]);
      tg.push_back(targets[i]);
    }
    InterventionResult r;
    r.baseline = hit_at_k(bl, tg, 10);
    r.masked = hit_at_k(ml, tg, 10);
    r.drop_pct = relative_drop(r.baseline, r.masked);
    out.per_relation[rel] = r;
  }
  return out;
}

// The three masks compared across architectures.
struct AblationMasks {
  MaskSpec top1_head;
  MaskSpec top_heads;
  MaskSpec top_ffn;
};

inline AblationMasks build_masks(const ImportanceTable& table, std::size_t top_heads, double fraction) {
  AblationMasks m;
  const auto heads = rank_heads(table);
  if (!heads.empty()) m.top1_head.heads.insert(heads.front().head);
  for (std::size_t i = 0; i < std::min(top_heads, heads.size()); ++i) m.top_heads.heads.insert(heads[i].head);
  const auto ffn = top_set(table, fraction, NeuronKind::FFN);
  for (const auto& n : ffn.members) m.top_ffn.neurons.insert({n.layer, n.unit, n.column});
  return m;
}

inline std::string describe(const MaskSpec& m) {
  std::string s;
  for (const auto& h : m.heads) s += (s.empty() ? "" : ";") + std::string("H") + std::to_string(h.layer) + "." + std::to_string(h.head);
  for (const auto& n : m.neurons)
    s += (s.empty() ? "" : ";") + std::string("N") + std::to_string(n.layer) + "." + std::to_string(n.unit) + "." +
         std::to_string(n.column);
  return s.empty() ? "none" : s;
}

}  // namespace glpi
