#pragma once

// Evaluation and stability metrics over importance tables.

#include <algorithm>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "glpi/attribution.hpp"
#include "glpi/numerics.hpp"
#include "glpi/random.hpp"

namespace glpi {

// ---------------------------------------------------------------------------
// HIT@k

// Rank of `target` in `logits` (0 = best); equal logits rank by ascending id.
inline std::size_t target_rank(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) throw DataError("target outside vocabulary");
  const double t = logits[target];
  std::size_t rank = 0;
  for (std::size_t v = 0; v < logits.size(); ++v) {
    if (logits[v] > t || (logits[v] == t && v < target)) ++rank;
  }
  return rank;
}

inline double hit_at_k(const std::vector<Vector>& logits, const std::vector<std::size_t>& targets, std::size_t k) {
  require_same_size(logits.size(), targets.size(), "hit_at_k");
  if (logits.empty()) throw DataError("hit_at_k: no examples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (target_rank(logits[i], targets[i]) < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.size());
}

// A vocabulary of 10 or fewer makes the metric trivially 1.
inline double hit_at_10(const std::vector<Vector>& logits, const std::vector<std::size_t>& targets) {
  if (!logits.empty() && logits.front().size() <= 10) {
    std::cerr << "warning: HIT@10 over a vocabulary of " << logits.front().size() << " tokens is degenerate\n";
  }
  return hit_at_k(logits, targets, 10);
}

// ---------------------------------------------------------------------------
// Top sets

struct TopSet {
  std::size_t step = 0;
  double fraction = 0.01;
  NeuronKind scope = NeuronKind::FFN;
  std::set<NeuronRef> members;
};

// Top ceil(fraction * n) items by score, ties broken by position (which is
// canonical order for tables).
inline std::vector<std::size_t> top_fraction_indices(const std::vector<double>& scores, double fraction) {
  const std::size_t count = fraction_count(fraction, scores.size());
  if (count == 0) return {};
  return topk_indices(scores, count);
}

inline TopSet top_set(const ImportanceTable& table, double fraction, NeuronKind scope) {
  const auto items = table.scope(scope);
  if (items.empty()) throw DataError("top_set: table has no " + to_string(scope) + " neurons");
  std::vector<double> scores;
  for (const auto* n : items) scores.push_back(n->mean_abs_I);
  TopSet ts{table.step, fraction, scope, {}};
  for (auto i : top_fraction_indices(scores, fraction)) ts.members.insert(items[i]->ref);
  return ts;
}

inline double jaccard(const std::set<NeuronRef>& a, const std::set<NeuronRef>& b) {
  std::size_t inter = 0;
  for (const auto& x : a) inter += b.count(x);
  const std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct JaccardResult {
  std::vector<double> pairs;  // pair i compares sets i and i+1
  double j_stab = 0.0;
};

inline JaccardResult jaccard_stability(const std::vector<TopSet>& sets) {
  if (sets.size() < 2) throw DataError("jaccard_stability: need >= 2 checkpoints");
  for (const auto& s : sets) {
    if (s.fraction != sets.front().fraction || s.scope != sets.front().scope) {
      throw DataError("jaccard_stability: sets differ in fraction or scope");
    }
  }
  JaccardResult r;
  for (std::size_t i = 0; i + 1 < sets.size(); ++i) r.pairs.push_back(jaccard(sets[i].members, sets[i + 1].members));
  r.j_stab = mean(r.pairs);
  return r;
}

// ---------------------------------------------------------------------------
// Positive-gain concentration

// Share of the total positive |I| gain between two checkpoints captured by
// the `fraction` of neurons with the largest gain. nullopt when no neuron
// gained.
inline std::optional<double> positive_gain_concentration(const ImportanceTable& prev, const ImportanceTable& cur,
                                                         double fraction, NeuronKind scope) {
  const auto a = prev.scope(scope), b = cur.scope(scope);
  if (a.size() != b.size() || a.empty()) throw DataError("positive_gain_concentration: tables do not match");
  std::vector<double> gains(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->ref != b[i]->ref) throw DataError("positive_gain_concentration: neuron order differs");
    gains[i] = std::max(0.0, b[i]->mean_abs_I - a[i]->mean_abs_I);
  }
  double total = 0.0;
  for (double g : gains) total += g;
  const auto top = top_fraction_indices(gains, fraction);
  if (total <= 0.0) return std::nullopt;
  std::vector<std::size_t> ordered(top.begin(), top.end());
  std::sort(ordered.begin(), ordered.end());
  double captured = 0.0;
  for (auto i : ordered) captured += gains[i];
  return std::clamp(captured / total, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Layer-profile metrics

struct ConsistencyResult {
  std::optional<double> rho_avg;  // absent when every pair was degenerate
  std::vector<std::pair<std::size_t, std::size_t>> excluded_pairs;
  std::size_t pairs_used = 0;
};

inline ConsistencyResult layer_consistency(const std::vector<Vector>& profiles) {
  if (profiles.size() < 2) throw DataError("layer_consistency: need >= 2 checkpoints");
  if (profiles.front().size() < 2) throw DataError("layer_consistency: need >= 2 layers");
  ConsistencyResult r;
  double sum = 0.0;
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    for (std::size_t j = i + 1; j < profiles.size(); ++j) {
      try {
        sum += pearson_corr(profiles[i], profiles[j]);
        ++r.pairs_used;
      } catch (const DegenerateCorrelation&) {
        r.excluded_pairs.emplace_back(i, j);
      }
    }
  }
  if (r.pairs_used > 0) r.rho_avg = std::clamp(sum / static_cast<double>(r.pairs_used), -1.0, 1.0);
  return r;
}

struct VariationResult {
  std::optional<double> sigma_rel;
  std::vector<std::size_t> excluded_layers;  // layers with zero mean
};

inline VariationResult cross_step_cv(const std::vector<Vector>& profiles) {
  if (profiles.size() < 2) throw DataError("cross_step_cv: need >= 2 checkpoints");
  const std::size_t layers = profiles.front().size();
  VariationResult r;
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    Vector series;
    for (const auto& p : profiles) {
      require_same_size(p.size(), layers, "cross_step_cv");
      series.push_back(p[l]);
    }
    const double mu = mean(series);
    if (mu == 0.0) {
      r.excluded_layers.push_back(l);
      continue;
    }
    sum += std::sqrt(variance(series)) / std::abs(mu);
    ++used;
  }
  if (used > 0) r.sigma_rel = sum / static_cast<double>(used);
  return r;
}

// ---------------------------------------------------------------------------
// Random-subset baseline

inline double random_jaccard_baseline(std::size_t n, double fraction, std::size_t trials, std::uint64_t seed) {
  if (trials < 1) throw UsageError("random_jaccard_baseline: trials must be >= 1");
  const std::size_t m = fraction_count(fraction, n);
  const Rng root(seed);
  double sum = 0.0;
  std::vector<std::size_t> perm(n);
  auto draw = [&](Rng& rng) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = 0; i < m; ++i) std::swap(perm[i], perm[i + rng.below(n - i)]);
    return std::vector<std::size_t>(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
  };
  std::vector<char> in_a(n);
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng = root.split(t);
    const auto a = draw(rng);
    const auto b = draw(rng);
    std::fill(in_a.begin(), in_a.end(), 0);
    for (auto x : a) in_a[x] = 1;
    std::size_t inter = 0;
    for (auto x : b) inter += static_cast<std::size_t>(in_a[x]);
    const std::size_t uni = 2 * m - inter;
    sum += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return sum / static_cast<double>(trials);
}

// ---------------------------------------------------------------------------
// Stability report for one architecture and one scope

struct StepValue {
  std::size_t step = 0;
  std::optional<double> value;
};

struct ScopeStability {
  NeuronKind scope = NeuronKind::FFN;
  std::vector<StepValue> jaccard;  // keyed by the earlier checkpoint of each pair
  double j_stab = 0.0;
  std::optional<double> j_early;   // mean over the early window
  std::optional<double> j_late;    // mean over the late window
  std::vector<StepValue> r_t;      // keyed by the later checkpoint
  std::optional<double> mean_r_t;
  std::optional<double> rho_avg;
  std::size_t rho_excluded_pairs = 0;
  std::optional<double> sigma_rel;
  std::size_t sigma_excluded_layers = 0;
  std::vector<std::pair<std::size_t, Vector>> profiles;  // step -> layer profile
};

struct StabilityOptions {
  double fraction = 0.01;
  // Windows as fractions of the final step: early (0, 0.12], late [0.17, 1].
  double early_end = 0.12;
  double late_begin = 0.17;
};

inline std::optional<double> mean_of(const std::vector<StepValue>& xs, std::size_t lo, std::size_t hi) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& x : xs) {
    if (x.value && x.step >= lo && x.step <= hi) {
      s += *x.value;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

// `tables` must be ordered by step.
inline ScopeStability stability_for_scope(const std::vector<ImportanceTable>& tables, NeuronKind scope,
                                          const StabilityOptions& opt) {
  if (tables.size() < 2) throw DataError("need ≥ 2 checkpoints");
  ScopeStability r;
  r.scope = scope;
  std::vector<TopSet> sets;
  for (const auto& t : tables) sets.push_back(top_set(t, opt.fraction, scope));
  const auto j = jaccard_stability(sets);
  r.j_stab = j.j_stab;
  for (std::size_t i = 0; i < j.pairs.size(); ++i) r.jaccard.push_back({tables[i].step, j.pairs[i]});
  const std::size_t last = tables.back().step;
  const auto early_hi = static_cast<std::size_t>(std::floor(opt.early_end * static_cast<double>(last)));
  const auto late_lo = static_cast<std::size_t>(std::ceil(opt.late_begin * static_cast<double>(last)));
  r.j_early = mean_of(r.jaccard, 1, early_hi);
  r.j_late = mean_of(r.jaccard, late_lo, last);

  for (std::size_t i = 1; i < tables.size(); ++i) {
    r.r_t.push_back({tables[i].step, positive_gain_concentration(tables[i - 1], tables[i], opt.fraction, scope)});
  }
  r.mean_r_t = mean_of(r.r_t, 0, last);

  std::vector<Vector> profiles;
  for (const auto& t : tables) {
    profiles.push_back(t.profile(scope));
    r.profiles.emplace_back(t.step, t.profile(scope));
  }
  if (profiles.front().size() >= 2) {
    const auto c = layer_consistency(profiles);
    r.rho_avg = c.rho_avg;
    r.rho_excluded_pairs = c.excluded_pairs.size();
  }
  const auto v = cross_step_cv(profiles);
  r.sigma_rel = v.sigma_rel;
  r.sigma_excluded_layers = v.excluded_layers.size();
  return r;
}

}  // namespace glpi
