#pragma once

// Brute-force reference implementations and randomized comparisons against
// the library. Used by `glpi selftest` and by the acceptance suite. The
// oracles here deliberately avoid the library's kernels: plain loops, full
// sorts, two-pass statistics.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "glpi/attribution.hpp"
#include "glpi/intervention.hpp"
#include "glpi/metrics.hpp"
#include "glpi/model.hpp"
#include "glpi/random.hpp"

namespace glpi {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

namespace oracle {

// Smallest m with m >= fraction * n (up to 1e-9 slack).
inline std::size_t top_count(double fraction, std::size_t n) {
  std::size_t m = 0;
  while (m < n && static_cast<double>(m) < fraction * static_cast<double>(n) - 1e-9) ++m;
  return m;
}

// Indices by descending score, ascending index among ties.
inline std::vector<std::size_t> ranked(const std::vector<double>& s) {
  std::vector<std::size_t> idx(s.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] != s[b] ? s[a] > s[b] : a < b; });
  return idx;
}

inline std::set<std::size_t> top(const std::vector<double>& s, double fraction) {
  const auto r = ranked(s);
  return {r.begin(), r.begin() + static_cast<std::ptrdiff_t>(top_count(fraction, s.size()))};
}

inline double jaccard(const std::set<std::size_t>& a, const std::set<std::size_t>& b) {
  std::vector<std::size_t> i, u;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(i));
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(u));
  return u.empty() ? 1.0 : static_cast<double>(i.size()) / static_cast<double>(u.size());
}

inline double j_stab(const std::vector<std::vector<double>>& scores, double fraction) {
  double s = 0.0;
  for (std::size_t t = 0; t + 1 < scores.size(); ++t) s += jaccard(top(scores[t], fraction), top(scores[t + 1], fraction));
  return s / static_cast<double>(scores.size() - 1);
}

inline std::optional<double> r_t(const std::vector<double>& prev, const std::vector<double>& cur, double fraction) {
  std::vector<double> g(prev.size());
  double total = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = cur[i] > prev[i] ? cur[i] - prev[i] : 0.0;
    total += g[i];
  }
  if (!(total > 0.0)) return std::nullopt;
  double c = 0.0;
  for (auto i : top(g, fraction)) c += g[i];
  return c / total;
}

inline std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

inline std::optional<double> rho_avg(const std::vector<std::vector<double>>& p) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = i + 1; j < p.size(); ++j)
      if (auto r = pearson(p[i], p[j])) {
        s += *r;
        ++n;
      }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

inline std::optional<double> sigma_rel(const std::vector<std::vector<double>>& p) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t l = 0; l < p[0].size(); ++l) {
    double mu = 0.0;
    for (const auto& x : p) mu += x[l];
    mu /= static_cast<double>(p.size());
    if (mu == 0.0) continue;
    double var = 0.0;
    for (const auto& x : p) var += (x[l] - mu) * (x[l] - mu);
    var /= static_cast<double>(p.size());
    s += std::sqrt(var) / std::fabs(mu);
    ++n;
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

inline double hit10(const std::vector<std::vector<double>>& logits, const std::vector<std::size_t>& targets) {
  std::size_t hits = 0;
  for (std::size_t e = 0; e < logits.size(); ++e) {
    const auto r = ranked(logits[e]);
    const auto pos = static_cast<std::size_t>(std::find(r.begin(), r.end(), targets[e]) - r.begin());
    if (pos < 10) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.size());
}

inline std::vector<double> layer_norm(const std::vector<double>& x, const Vector& g, const Vector& b) {
  const double n = static_cast<double>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + kLayerNormEps) * g[i] + b[i];
  return y;
}

inline std::vector<double> mat_vec(const Matrix& w, const std::vector<double>& x) {
  std::vector<double> y(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) y[r] += w(r, c) * x[c];
  return y;
}

inline double act(Nonlinearity n, double u) { return n == Nonlinearity::SiLU ? u / (1.0 + std::exp(-u)) : std::max(u, 0.0); }

// FFN / MoE block output for one residual row (LayerNorm included).
inline std::vector<double> ffn_out(const ModelConfig& cfg, const LayerWeights& lw, const std::vector<double>& resid) {
  const auto x = layer_norm(resid, lw.ln2_gain, lw.ln2_bias);
  std::vector<double> out(cfg.d_model, 0.0);
  auto run = [&](const FfnWeights& w, double gate) {
    auto m = mat_vec(w.w1, x);
    for (double& v : m) v = act(cfg.nonlinearity, v);
    const auto y = mat_vec(w.w2, m);
    for (std::size_t i = 0; i < y.size(); ++i) out[i] += gate * y[i];
  };
  if (cfg.arch == Arch::Dense) {
    run(lw.ffn, 1.0);
    return out;
  }
  auto s = mat_vec(lw.router, x);
  const double mx = *std::max_element(s.begin(), s.end());
  double z = 0.0;
  for (double& v : s) z += (v = std::exp(v - mx));
  for (double& v : s) v /= z;
  const auto order = ranked(s);
  double sel = 0.0;
  for (std::size_t i = 0; i < cfg.top_k; ++i) sel += s[order[i]];
  for (std::size_t i = 0; i < cfg.top_k; ++i) run(lw.experts[order[i]], cfg.gate_renorm ? s[order[i]] / sel : s[order[i]]);
  return out;
}

// Attention block output for every position of one sequence.
inline std::vector<std::vector<double>> attn_out(const ModelConfig& cfg, const LayerWeights& lw,
                                                 const std::vector<std::vector<double>>& resid) {
  const std::size_t t = resid.size();
  std::vector<std::vector<double>> h(t), out(t, std::vector<double>(cfg.d_model, 0.0));
  for (std::size_t i = 0; i < t; ++i) h[i] = layer_norm(resid[i], lw.ln1_gain, lw.ln1_bias);
  for (const auto& hw : lw.heads) {
    std::vector<std::vector<double>> q(t), k(t), v(t);
    for (std::size_t i = 0; i < t; ++i) {
      q[i] = mat_vec(hw.wq, h[i]);
      k[i] = mat_vec(hw.wk, h[i]);
      v[i] = mat_vec(hw.wv, h[i]);
    }
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<double> a(i + 1);
      for (std::size_t p = 0; p <= i; ++p) {
        double d = 0.0;
        for (std::size_t c = 0; c < cfg.d_head; ++c) d += q[i][c] * k[p][c];
        a[p] = d / std::sqrt(static_cast<double>(cfg.d_head));
      }
      const double mx = *std::max_element(a.begin(), a.end());
      double z = 0.0;
      for (double& x : a) z += (x = std::exp(x - mx));
      std::vector<double> zz(cfg.d_head, 0.0);
      for (std::size_t p = 0; p <= i; ++p)
        for (std::size_t c = 0; c < cfg.d_head; ++c) zz[c] += a[p] / z * v[p][c];
      const auto o = mat_vec(hw.wo, zz);
      for (std::size_t c = 0; c < cfg.d_model; ++c) out[i][c] += o[c];
    }
  }
  return out;
}

// Full forward for one sequence with selected heads removed; returns logits
// per position.
inline std::vector<std::vector<double>> forward(const Checkpoint& ck, const std::vector<int>& tokens,
                                                bool drop_attention) {
  const auto& cfg = ck.config;
  const auto& w = ck.weights;
  std::vector<std::vector<double>> r(tokens.size(), std::vector<double>(cfg.d_model));
  for (std::size_t i = 0; i < tokens.size(); ++i)
    for (std::size_t c = 0; c < cfg.d_model; ++c)
      r[i][c] = w.tok_embed(static_cast<std::size_t>(tokens[i]), c) + w.pos_embed(i, c);
  for (const auto& lw : w.layers) {
    if (!drop_attention) {
      const auto a = attn_out(cfg, lw, r);
      for (std::size_t i = 0; i < r.size(); ++i)
        for (std::size_t c = 0; c < cfg.d_model; ++c) r[i][c] += a[i][c];
    }
    for (auto& row : r) {
      const auto f = ffn_out(cfg, lw, row);
      for (std::size_t c = 0; c < cfg.d_model; ++c) row[c] += f[c];
    }
  }
  std::vector<std::vector<double>> logits;
  for (auto& row : r) {
    const auto x = cfg.final_layernorm ? layer_norm(row, w.lnf_gain, w.lnf_bias) : row;
    logits.push_back(mat_vec(w.unembed, x));
  }
  return logits;
}

}  // namespace oracle

// ---------------------------------------------------------------------------
// Random instances

inline ModelConfig random_tiny_config(Rng& rng, Arch arch) {
  ModelConfig c;
  c.arch = arch;
  c.n_layers = 1 + rng.below(3);
  c.n_heads = 1 + rng.below(4);
  c.d_head = 1 + rng.below(4);
  c.d_model = c.n_heads * c.d_head;
  c.vocab = 3 + rng.below(18);
  c.max_seq = 8;
  c.nonlinearity = rng.below(2) ? Nonlinearity::SiLU : Nonlinearity::ReLU;
  c.final_layernorm = rng.below(4) != 0;
  if (arch == Arch::Dense) {
    c.ffn_dim = 1 + rng.below(16);
  } else {
    c.ffn_dim = 0;
    c.n_experts = 2 + rng.below(5);
    c.expert_dim = 1 + rng.below(8);
    c.top_k = 1 + rng.below(c.n_experts);
    c.gate_renorm = rng.below(4) != 0;
  }
  return c;
}

// Every tensor ~ N(0, scale^2); LayerNorm gains around 1.
inline Checkpoint random_checkpoint(const ModelConfig& cfg, Rng& rng, double scale = 0.5) {
  Checkpoint ck{0, cfg, zero_weights(cfg)};
  for_each_tensor(cfg, ck.weights, [&](TensorView t) {
    const bool gain = t.name.ends_with(".gain");
    for (double& x : t.values) x = (gain ? 1.0 : 0.0) + scale * rng.normal();
  });
  return ck;
}

inline std::vector<int> random_tokens(const ModelConfig& cfg, Rng& rng, std::size_t len) {
  std::vector<int> t(len);
  for (auto& x : t) x = static_cast<int>(rng.below(cfg.vocab));
  return t;
}

namespace detail {
inline double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}
inline std::string sci(double x) {
  char b[32];
  std::snprintf(b, sizeof b, "%.3g", x);
  return b;
}
}  // namespace detail

// Sum of neuron outputs vs the recorded layer output and vs an independent
// oracle forward, on `configs` random dense and moe models.
inline CheckResult check_decomposition(std::size_t configs, std::uint64_t seed, double tol = 1e-10) {
  const auto t0 = std::chrono::steady_clock::now();
  const Rng root(seed);
  double worst = 0.0;
  for (std::size_t c = 0; c < configs; ++c) {
    Rng rng = root.split(c);
    const auto cfg = random_tiny_config(rng, c % 2 ? Arch::Moe : Arch::Dense);
    const auto ck = random_checkpoint(cfg, rng);
    std::vector<std::vector<int>> seqs;
    for (std::size_t s = 0, n = 1 + rng.below(2); s < n; ++s) seqs.push_back(random_tokens(cfg, rng, 1 + rng.below(8)));
    const auto tr = forward_batch(ck, seqs);
    const auto neurons = enumerate_neurons(cfg);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      const std::size_t b = tr.offsets[s], e = tr.offsets[s + 1];
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        std::vector<std::vector<double>> resid;
        for (std::size_t r = b; r < e; ++r) resid.emplace_back(tr.resid_in[l].row(r).begin(), tr.resid_in[l].row(r).end());
        const auto attn_ref = oracle::attn_out(cfg, ck.weights.layers[l], resid);
        for (std::size_t r = b; r < e; ++r) {
          Vector fsum(cfg.d_model, 0.0), asum(cfg.d_model, 0.0);
          for (const auto& n : neurons) {
            if (n.layer != l) continue;
            const auto o = neuron_output(tr, ck, n, r);
            auto& acc = n.kind == NeuronKind::FFN ? fsum : asum;
            for (std::size_t i = 0; i < cfg.d_model; ++i) acc[i] += o[i];
          }
          const std::vector<double> mid(tr.resid_mid[l].row(r).begin(), tr.resid_mid[l].row(r).end());
          const auto ffn_ref = oracle::ffn_out(cfg, ck.weights.layers[l], mid);
          for (std::size_t i = 0; i < cfg.d_model; ++i) {
            worst = std::max({worst, std::abs(fsum[i] - tr.ffn[l].out(r, i)), std::abs(fsum[i] - ffn_ref[i]),
                              std::abs(asum[i] - tr.attn[l].out(r, i)), std::abs(asum[i] - attn_ref[r - b][i])});
          }
        }
      }
    }
  }
  return {"decomposition", worst < tol,
          std::to_string(configs) + " configs, max abs error " + detail::sci(worst) + " (tol " + detail::sci(tol) + ")",
          detail::since(t0)};
}

namespace detail {

inline ImportanceTable table_from_scores(std::size_t step, const std::vector<double>& scores, const Vector& profile) {
  ImportanceTable t;
  t.step = step;
  t.n_layers = profile.size();
  t.examples = 1;
  for (std::size_t i = 0; i < scores.size(); ++i) t.neurons.push_back({NeuronRef::ffn(0, 0, i), 0.0, scores[i], 0.0});
  t.ffn_profile = profile;
  t.attn_profile = Vector(profile.size(), 0.0);
  return t;
}

inline double draw_score(Rng& rng) {
  // A discrete pool half of the time so ties and zero gains occur often.
  static const double pool[] = {0.0, 0.25, 0.5, 1.0, 2.0};
  return rng.below(2) ? pool[rng.below(5)] : std::abs(rng.normal());
}

inline bool close(const std::optional<double>& a, const std::optional<double>& b, double tol) {
  if (a.has_value() != b.has_value()) return false;
  return !a || std::abs(*a - *b) <= tol;
}

}  // namespace detail

// J_stab, R_t, rho_avg, sigma_rel and HIT@10 against the oracles above.
inline CheckResult check_metric_oracles(std::size_t instances, std::uint64_t seed, double tol = 1e-12) {
  const auto t0 = std::chrono::steady_clock::now();
  const Rng root(seed);
  static const double fractions[] = {0.01, 0.02, 0.1, 0.25, 0.5, 1.0};
  std::size_t failures = 0;
  std::string first;
  auto fail = [&](std::size_t i, const std::string& what) {
    if (failures++ == 0) first = "instance " + std::to_string(i) + ": " + what;
  };
  for (std::size_t it = 0; it < instances; ++it) {
    Rng rng = root.split(it);
    const std::size_t n = 1 + rng.below(50), steps = 2 + rng.below(5), layers = 1 + rng.below(5);
    const double fraction = rng.below(3) ? fractions[rng.below(6)] : 0.005 + 0.995 * rng.uniform();
    std::vector<std::vector<double>> scores(steps), profiles(steps);
    std::vector<ImportanceTable> tables;
    const bool constant_profiles = rng.below(8) == 0;
    for (std::size_t s = 0; s < steps; ++s) {
      for (std::size_t i = 0; i < n; ++i) scores[s].push_back(detail::draw_score(rng));
      for (std::size_t l = 0; l < layers; ++l) profiles[s].push_back(constant_profiles ? 1.0 : std::round(4.0 * rng.normal()) / 4.0);
      tables.push_back(detail::table_from_scores(100 * s, scores[s], profiles[s]));
    }
    StabilityOptions opt;
    opt.fraction = fraction;
    const auto got = stability_for_scope(tables, NeuronKind::FFN, opt);
    if (std::abs(got.j_stab - oracle::j_stab(scores, fraction)) > tol) fail(it, "J_stab");
    for (std::size_t s = 1; s < steps; ++s)
      if (!detail::close(got.r_t[s - 1].value, oracle::r_t(scores[s - 1], scores[s], fraction), tol)) fail(it, "R_t");
    if (layers >= 2 && !detail::close(got.rho_avg, oracle::rho_avg(profiles), tol)) fail(it, "rho_avg");
    if (!detail::close(got.sigma_rel, oracle::sigma_rel(profiles), tol)) fail(it, "sigma_rel");

    const std::size_t vocab = 1 + rng.below(20), examples = 1 + rng.below(8);
    std::vector<Vector> logits(examples);
    std::vector<std::size_t> targets(examples);
    for (std::size_t e = 0; e < examples; ++e) {
      for (std::size_t v = 0; v < vocab; ++v) logits[e].push_back(static_cast<double>(rng.below(6)) - 2.5);
      targets[e] = rng.below(vocab);
    }
    if (std::abs(hit_at_k(logits, targets, 10) - oracle::hit10(logits, targets)) > tol) fail(it, "HIT@10");
  }
  return {"metric oracles", failures == 0,
          std::to_string(instances) + " instances, " + std::to_string(failures) + " mismatches" +
              (first.empty() ? "" : " (first: " + first + ")"),
          detail::since(t0)};
}

// The hand-evaluated cases.
inline std::vector<CheckResult> check_hand_values(double tol = 1e-9) {
  std::vector<CheckResult> out;
  auto add = [&](const std::string& name, double got, double want) {
    out.push_back({name, std::abs(got - want) <= tol, "got " + format_double(got) + " want " + format_double(want), 0.0});
  };
  {
    auto ts = [](std::size_t step, std::set<std::size_t> ids) {
      TopSet t{step, 0.01, NeuronKind::FFN, {}};
      for (auto i : ids) t.members.insert(NeuronRef::ffn(0, 0, i));
      return t;
    };
    add("J_stab example", jaccard_stability({ts(0, {1, 2, 3, 4}), ts(1, {3, 4, 5, 6}), ts(2, {5, 6, 7, 8})}).j_stab,
        1.0 / 3.0);
  }
  {
    std::vector<double> prev(100, 0.0), cur(100, 0.0);
    cur[0] = 5;
    cur[1] = 3;
    cur[2] = 1;
    cur[3] = 1;
    const auto a = detail::table_from_scores(0, prev, {0.0}), b = detail::table_from_scores(1, cur, {0.0});
    add("R_t example", positive_gain_concentration(a, b, 0.02, NeuronKind::FFN).value_or(-1.0), 0.8);
  }
  add("rho_avg example", layer_consistency({{1, 2, 3}, {1, 2, 3}, {1, 3, 2}}).rho_avg.value_or(-2.0), 2.0 / 3.0);
  add("sigma_rel example", cross_step_cv({{1}, {3}}).sigma_rel.value_or(-1.0), 0.5);
  {
    ModelConfig cfg;
    cfg.n_layers = 0;
    cfg.d_model = 2;
    cfg.n_heads = 1;
    cfg.d_head = 2;
    cfg.vocab = 2;
    cfg.final_layernorm = false;
    Checkpoint ck{0, cfg, zero_weights(cfg)};
    ck.weights.unembed(0, 0) = 1.0;
    ck.weights.unembed(1, 1) = 1.0;
    const double e = std::exp(1.0);
    add("I(v) example", direct_importance(Vector{0, 0}, Vector{1, 0}, 0, ck), std::log(e / (e + 1.0)) - std::log(0.5));
    add("I(v) antisymmetry example", direct_importance(Vector{0, 0}, Vector{1, 0}, 1, ck),
        std::log(1.0 / (e + 1.0)) - std::log(0.5));
  }
  return out;
}

inline CheckResult check_random_baseline(double tol = 0.002) {
  const auto t0 = std::chrono::steady_clock::now();
  const double m = random_jaccard_baseline(10000, 0.01, 1000, 0);
  return {"random baseline", std::abs(m - 0.005) <= tol,
          "mean Jaccard " + format_double(m) + " (want 0.005 +/- " + format_double(tol) + ")", detail::since(t0)};
}

// Empty mask gives drop 0 exactly; masking every head matches the oracle
// forward with attention removed.
inline CheckResult check_intervention(std::size_t configs, std::uint64_t seed, double tol = 1e-10) {
  const auto t0 = std::chrono::steady_clock::now();
  const Rng root(seed);
  double worst = 0.0;
  bool empty_ok = true;
  for (std::size_t c = 0; c < configs; ++c) {
    Rng rng = root.split(c);
    const auto cfg = random_tiny_config(rng, c % 2 ? Arch::Moe : Arch::Dense);
    const auto ck = random_checkpoint(cfg, rng);
    std::vector<EvalExample> ex;
    for (std::size_t i = 0; i < 6; ++i) ex.push_back({random_tokens(cfg, rng, 1 + rng.below(8)), rng.below(cfg.vocab), "r"});
    const auto r = ablation_drop(ck, ex, MaskSpec{});
    empty_ok = empty_ok && r.overall.drop_pct.value_or(0.0) == 0.0 && r.overall.baseline == r.overall.masked;
    MaskSpec all;
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      for (std::size_t j = 0; j < cfg.n_heads; ++j) all.heads.insert({l, j});
    for (const auto& e : ex) {
      const auto tr = masked_forward(e.prompt, ck, all);
      const auto ref = oracle::forward(ck, e.prompt, true);
      for (std::size_t i = 0; i < ref.size(); ++i)
        for (std::size_t v = 0; v < cfg.vocab; ++v) worst = std::max(worst, std::abs(ref[i][v] - tr.logits(i, v)));
    }
  }
  return {"intervention", empty_ok && worst < tol,
          std::string("empty-mask drop ") + (empty_ok ? "0" : "nonzero") + ", all-heads max abs error " +
              detail::sci(worst),
          detail::since(t0)};
}

inline std::vector<CheckResult> run_selftest(std::uint64_t seed = 0) {
  std::vector<CheckResult> out;
  out.push_back(check_decomposition(100, seed));
  out.push_back(check_metric_oracles(500, seed));
  for (auto& r : check_hand_values()) out.push_back(r);
  out.push_back(check_random_baseline());
  out.push_back(check_intervention(20, seed));
  return out;
}

}  // namespace glpi
