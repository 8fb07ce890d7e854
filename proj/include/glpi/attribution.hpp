#pragma once

// Gated log-probability-increase attribution.
//
// Every neuron writes coef * direction into the residual stream:
//   FFN neuron k of expert E:  coef = gate_E(x) * m_{E,k},  direction = col_k(W2_E)
//   dense FFN neuron k:        coef = m_k,                  direction = col_k(W2)
//   ATTN neuron k of head j:   coef = sum_p alpha_{i,j,p} (W^V_j h_p)_k,
//                              direction = col_k(W^O_j)
// Its importance for target w at the prediction position is
//   I(v) = log p(w | r + output_v) - log p(w | r)
// with r the final residual (direct effect), or with output_v injected at the
// neuron's own layer and the rest of the network re-run (propagate mode).

#include <algorithm>
#include <compare>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "glpi/io.hpp"
#include "glpi/model.hpp"

namespace glpi {

enum class NeuronKind { FFN = 0, ATTN = 1 };

inline std::string to_string(NeuronKind k) { return k == NeuronKind::FFN ? "FFN" : "ATTN"; }

// Canonical order: layer, kind (FFN before ATTN), unit (expert or head), column.
struct NeuronRef {
  std::size_t layer = 0;
  NeuronKind kind = NeuronKind::FFN;
  std::size_t unit = 0;  // expert index (moe FFN), 0 (dense FFN) or head index (ATTN)
  std::size_t column = 0;

  auto operator<=>(const NeuronRef&) const = default;

  static NeuronRef ffn(std::size_t layer, std::size_t expert, std::size_t column) {
    return {layer, NeuronKind::FFN, expert, column};
  }
  static NeuronRef attn(std::size_t layer, std::size_t head, std::size_t column) {
    return {layer, NeuronKind::ATTN, head, column};
  }
};

inline void validate_ref(const ModelConfig& cfg, const NeuronRef& n) {
  const bool ok = n.layer < cfg.n_layers &&
                  (n.kind == NeuronKind::FFN ? (n.unit < cfg.ffn_units() && n.column < cfg.inner_dim())
                                             : (n.unit < cfg.n_heads && n.column < cfg.d_head));
  if (!ok) {
    throw UsageError("neuron reference (" + std::to_string(n.layer) + "," + to_string(n.kind) + "," +
                     std::to_string(n.unit) + "," + std::to_string(n.column) + ") out of range");
  }
}

// All neurons of a model in canonical order.
inline std::vector<NeuronRef> enumerate_neurons(const ModelConfig& cfg) {
  std::vector<NeuronRef> out;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t u = 0; u < cfg.ffn_units(); ++u)
      for (std::size_t k = 0; k < cfg.inner_dim(); ++k) out.push_back(NeuronRef::ffn(l, u, k));
    for (std::size_t j = 0; j < cfg.n_heads; ++j)
      for (std::size_t k = 0; k < cfg.d_head; ++k) out.push_back(NeuronRef::attn(l, j, k));
  }
  return out;
}

inline Vector neuron_direction(const Checkpoint& ck, const NeuronRef& n) {
  validate_ref(ck.config, n);
  const auto& lw = ck.weights.layers[n.layer];
  const Matrix& w = n.kind == NeuronKind::ATTN ? lw.heads[n.unit].wo
                    : ck.config.arch == Arch::Dense ? lw.ffn.w2
                                                    : lw.experts[n.unit].w2;
  Vector col(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) col[r] = w(r, n.column);
  return col;
}

// Scalar multiplying the neuron's direction at a trace row; 0 for experts
// that were not routed.
inline double ffn_coefficient(const ForwardTrace& tr, const ModelConfig& cfg, const NeuronRef& n, std::size_t row) {
  const auto& ft = tr.ffn[n.layer];
  if (cfg.arch == Arch::Dense) return ft.act(row, n.column);
  for (const auto& rt : ft.routes[row]) {
    if (rt.expert == n.unit) return rt.gate * ft.expert_act[rt.expert](rt.slot, n.column);
  }
  return 0.0;
}

// sum_{p<=i} alpha_{i,j,p} (W^V_j h_p)_k
inline double attn_coefficient(const ForwardTrace& tr, const NeuronRef& n, std::size_t row) {
  const std::size_t seq = tr.seq_of_row(row);
  const std::size_t b = tr.offsets[seq];
  const Matrix& alpha = tr.attn[n.layer].alpha[seq][n.unit];
  const Matrix& v = tr.attn[n.layer].v[n.unit];
  double acc = 0.0;
  for (std::size_t p = 0; p <= row - b; ++p) acc += alpha(row - b, p) * v(b + p, n.column);
  return acc;
}

inline double neuron_coefficient(const ForwardTrace& tr, const ModelConfig& cfg, const NeuronRef& n, std::size_t row) {
  return n.kind == NeuronKind::FFN ? ffn_coefficient(tr, cfg, n, row) : attn_coefficient(tr, n, row);
}

inline Vector ffn_neuron_output(const ForwardTrace& tr, const Checkpoint& ck, const NeuronRef& n, std::size_t row) {
  if (n.kind != NeuronKind::FFN) throw UsageError("ffn_neuron_output: not an FFN neuron");
  validate_ref(ck.config, n);
  if (row >= tr.rows()) throw UsageError("ffn_neuron_output: position out of range");
  const double c = ffn_coefficient(tr, ck.config, n, row);
  Vector out = neuron_direction(ck, n);
  for (double& x : out) x *= c;
  return out;
}

inline Vector attn_neuron_output(const ForwardTrace& tr, const Checkpoint& ck, const NeuronRef& n, std::size_t row) {
  if (n.kind != NeuronKind::ATTN) throw UsageError("attn_neuron_output: not an ATTN neuron");
  validate_ref(ck.config, n);
  if (row >= tr.rows()) throw UsageError("attn_neuron_output: position out of range");
  const double c = attn_coefficient(tr, n, row);
  Vector out = neuron_direction(ck, n);
  for (double& x : out) x *= c;
  return out;
}

inline Vector neuron_output(const ForwardTrace& tr, const Checkpoint& ck, const NeuronRef& n, std::size_t row) {
  return n.kind == NeuronKind::FFN ? ffn_neuron_output(tr, ck, n, row) : attn_neuron_output(tr, ck, n, row);
}

enum class ScoreMode { Direct, Propagate };

// I(v) at trace row `row` (the prediction position of its sequence).
// logp(target | r_final + output) - logp(target | r_final).
inline double direct_importance(std::span<const double> r_final, std::span<const double> output, std::size_t target,
                                const Checkpoint& ck) {
  require_same_size(output.size(), r_final.size(), "direct_importance");
  Vector shifted(r_final.begin(), r_final.end());
  axpy(1.0, output, shifted);
  return unembed_logprob(shifted, target, ck) - unembed_logprob(r_final, target, ck);
}

inline double neuron_importance(const ForwardTrace& tr, const NeuronRef& n, std::size_t target, const Checkpoint& ck,
                                std::size_t row, ScoreMode mode = ScoreMode::Direct) {
  const Vector out = neuron_output(tr, ck, n, row);
  const auto r_final = tr.final_resid.row(row);
  if (mode == ScoreMode::Direct) return direct_importance(r_final, out, target, ck);
  const double base = unembed_logprob(r_final, target, ck);
  const auto site = n.kind == NeuronKind::ATTN ? InjectSite::AfterAttention : InjectSite::AfterFfn;
  const Vector fin = forward_with_injection(ck, tr, n.layer, site, row, out);
  return unembed_logprob(fin, target, ck) - base;
}

// ---------------------------------------------------------------------------
// Importance tables

enum class ProfileMode { SignedSum, SignedMean, AbsMean };

inline std::string to_string(ProfileMode m) {
  switch (m) {
    case ProfileMode::SignedSum: return "sum";
    case ProfileMode::SignedMean: return "mean";
    case ProfileMode::AbsMean: return "abs_mean";
  }
  return "";
}
inline ProfileMode parse_profile_mode(const std::string& s) {
  if (s == "sum") return ProfileMode::SignedSum;
  if (s == "mean") return ProfileMode::SignedMean;
  if (s == "abs_mean") return ProfileMode::AbsMean;
  throw UsageError("unknown profile mode '" + s + "' (expected sum|mean|abs_mean)");
}

struct NeuronStats {
  NeuronRef ref;
  double mean_I = 0.0;
  double mean_abs_I = 0.0;
  double mean_pos_I = 0.0;
  bool operator==(const NeuronStats&) const = default;
};

struct ImportanceTable {
  std::size_t step = 0;
  Arch arch = Arch::Dense;
  std::size_t n_layers = 0;
  std::size_t examples = 0;
  ProfileMode profile_mode = ProfileMode::SignedSum;
  std::vector<NeuronStats> neurons;  // canonical order
  Vector ffn_profile;                // per layer
  Vector attn_profile;               // per layer

  bool operator==(const ImportanceTable&) const = default;

  std::vector<const NeuronStats*> scope(NeuronKind kind) const {
    std::vector<const NeuronStats*> out;
    for (const auto& n : neurons)
      if (n.ref.kind == kind) out.push_back(&n);
    return out;
  }
  const Vector& profile(NeuronKind kind) const { return kind == NeuronKind::FFN ? ffn_profile : attn_profile; }
};

struct AttributionExample {
  std::vector<int> prompt;
  std::size_t target = 0;
};

struct AttributionOptions {
  ScoreMode mode = ScoreMode::Direct;
  ProfileMode profile = ProfileMode::SignedSum;
  // Re-checks that neuron outputs add up to the recorded layer outputs.
  bool check_decomposition = false;
};

namespace detail {

// Direct-effect scorer with per-checkpoint precomputation. For a neuron
// writing a * c into the final residual r, with a final LayerNorm
//   logits(r + a c) = (U diag(g) (r~ + a c~)) / s + U b,
//   s^2 = (|r~|^2 + 2a r~.c~ + a^2 |c~|^2) / d + eps
// where ~ denotes mean-centring; without it logits = U r + a U c.
// Scores cost O(vocab) per neuron instead of O(vocab * d).
class DirectScorer {
 public:
  DirectScorer(const Checkpoint& ck, const std::vector<NeuronRef>& neurons) : ck_(ck) {
    const auto& cfg = ck.config;
    const std::size_t d = cfg.d_model, n = neurons.size();
    ln_ = cfg.final_layernorm;
    Matrix dirs(n, d);
    centered_norm2_.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      Vector c = neuron_direction(ck, neurons[i]);
      if (ln_) center(c);
      std::copy(c.begin(), c.end(), dirs.row(i).begin());
      centered_norm2_[i] = dot(c, c);
    }
    // Ug = U diag(g) (or U without a final norm).
    ug_ = ck.weights.unembed;
    if (ln_) {
      for (std::size_t v = 0; v < cfg.vocab; ++v)
        for (std::size_t c = 0; c < d; ++c) ug_(v, c) *= ck.weights.lnf_gain[c];
      ub_ = matvec(ck.weights.unembed, ck.weights.lnf_bias);
    } else {
      ub_.assign(cfg.vocab, 0.0);
    }
    dirs_ = dirs;
    linear(dirs, ug_, proj_);  // n x vocab
  }

  struct Example {
    Vector r;       // centred residual (or raw without LN)
    Vector base;    // U diag(g) r~
    double rr = 0.0;
    double base_logprob = 0.0;
    std::size_t target = 0;
  };

  Example prepare(std::span<const double> residual, std::size_t target) const {
    Example ex;
    ex.target = target;
    ex.r.assign(residual.begin(), residual.end());
    if (ln_) center(ex.r);
    ex.rr = dot(ex.r, ex.r);
    ex.base = matvec(ug_, ex.r);
    ex.base_logprob = logprob(ex, std::nullopt, 0.0, 0.0);
    return ex;
  }

  double importance(const Example& ex, std::size_t neuron, double coef) const {
    if (coef == 0.0) return 0.0;
    const double rc = ln_ ? dot(ex.r, dirs_.row(neuron)) : 0.0;
    return logprob(ex, neuron, coef, rc) - ex.base_logprob;
  }

 private:
  static void center(Vector& v) {
    double mu = 0.0;
    for (double x : v) mu += x;
    mu /= static_cast<double>(v.size());
    for (double& x : v) x -= mu;
  }

  double logprob(const Example& ex, std::optional<std::size_t> neuron, double coef, double rc) const {
    const std::size_t vocab = ex.base.size();
    double inv_s = 1.0;
    if (ln_) {
      double ss = ex.rr;
      if (neuron) ss += 2.0 * coef * rc + coef * coef * centered_norm2_[*neuron];
      inv_s = 1.0 / std::sqrt(ss / static_cast<double>(ck_.config.d_model) + kLayerNormEps);
    }
    thread_local Vector logits;
    logits.resize(vocab);
    if (neuron) {
      const auto p = proj_.row(*neuron);
      for (std::size_t v = 0; v < vocab; ++v) logits[v] = (ex.base[v] + coef * p[v]) * inv_s + ub_[v];
    } else {
      for (std::size_t v = 0; v < vocab; ++v) logits[v] = ex.base[v] * inv_s + ub_[v];
    }
    return logits[ex.target] - logsumexp(logits);
  }

  const Checkpoint& ck_;
  bool ln_ = false;
  Matrix ug_;
  Vector ub_;
  Matrix dirs_;
  Matrix proj_;
  Vector centered_norm2_;
};

inline void check_layer_decomposition(const ForwardTrace& tr, const Checkpoint& ck, std::size_t row,
                                      const std::vector<NeuronRef>& neurons) {
  const auto& cfg = ck.config;
  std::vector<Vector> ffn_sum(cfg.n_layers, Vector(cfg.d_model, 0.0));
  std::vector<Vector> attn_sum(cfg.n_layers, Vector(cfg.d_model, 0.0));
  for (const auto& n : neurons) {
    const Vector out = neuron_output(tr, ck, n, row);
    axpy(1.0, out, n.kind == NeuronKind::FFN ? ffn_sum[n.layer] : attn_sum[n.layer]);
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t c = 0; c < cfg.d_model; ++c) {
      if (std::abs(ffn_sum[l][c] - tr.ffn[l].out(row, c)) > 1e-10 ||
          std::abs(attn_sum[l][c] - tr.attn[l].out(row, c)) > 1e-10) {
        throw NumericError("neuron decomposition does not reproduce layer " + std::to_string(l) + " output");
      }
    }
  }
}

}  // namespace detail

// Scores every neuron on every example at the final prompt position and
// aggregates in example order.
inline ImportanceTable attribute_checkpoint(const Checkpoint& ck, const std::vector<AttributionExample>& examples,
                                            const AttributionOptions& opt = {}) {
  if (examples.empty()) throw DataError("attribute_checkpoint: empty example list");
  const auto& cfg = ck.config;
  const auto neurons = enumerate_neurons(cfg);
  const std::size_t n = neurons.size();

  ImportanceTable table;
  table.step = ck.step;
  table.arch = cfg.arch;
  table.n_layers = cfg.n_layers;
  table.examples = examples.size();
  table.profile_mode = opt.profile;
  Vector sum_i(n, 0.0), sum_abs(n, 0.0), sum_pos(n, 0.0);
  Vector ffn_prof(cfg.n_layers, 0.0), attn_prof(cfg.n_layers, 0.0);

  std::optional<detail::DirectScorer> scorer;
  if (opt.mode == ScoreMode::Direct) scorer.emplace(ck, neurons);

  Vector scores(n);
  for (const auto& ex : examples) {
    if (ex.target >= cfg.vocab) throw DataError("attribute_checkpoint: target outside vocabulary");
    const ForwardTrace tr = model_forward(ex.prompt, ck);
    const std::size_t row = tr.last_row(0);
    if (opt.check_decomposition) detail::check_layer_decomposition(tr, ck, row, neurons);
    if (scorer) {
      const auto prepared = scorer->prepare(tr.final_resid.row(row), ex.target);
      for (std::size_t i = 0; i < n; ++i) {
        scores[i] = scorer->importance(prepared, i, neuron_coefficient(tr, cfg, neurons[i], row));
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) scores[i] = neuron_importance(tr, neurons[i], ex.target, ck, row, opt.mode);
    }
    Vector ffn_layer(cfg.n_layers, 0.0), attn_layer(cfg.n_layers, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double s = scores[i];
      sum_i[i] += s;
      sum_abs[i] += std::abs(s);
      sum_pos[i] += std::max(0.0, s);
      const double contrib = opt.profile == ProfileMode::AbsMean ? std::abs(s) : s;
      (neurons[i].kind == NeuronKind::FFN ? ffn_layer : attn_layer)[neurons[i].layer] += contrib;
    }
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      ffn_prof[l] += ffn_layer[l];
      attn_prof[l] += attn_layer[l];
    }
  }

  const double inv = 1.0 / static_cast<double>(examples.size());
  table.neurons.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    table.neurons[i] = {neurons[i], sum_i[i] * inv, sum_abs[i] * inv, sum_pos[i] * inv};
  }
  const double ffn_count = static_cast<double>(cfg.ffn_units() * cfg.inner_dim());
  const double attn_count = static_cast<double>(cfg.n_heads * cfg.d_head);
  table.ffn_profile = ffn_prof;
  table.attn_profile = attn_prof;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    table.ffn_profile[l] *= inv;
    table.attn_profile[l] *= inv;
    if (opt.profile != ProfileMode::SignedSum) {
      table.ffn_profile[l] /= ffn_count;
      table.attn_profile[l] /= attn_count;
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// Table files
//
// importance file (tab separated, '#' header line with metadata):
//   # step=<t> arch=<dense|moe> layers=<L> examples=<N> profile=<mode>
//   step layer kind expert head column mean_I mean_abs_I mean_pos_I
// expert is '-' for dense FFN and ATTN rows; head is '-' for FFN rows.
//
// profile file:
//   step layer kind value

inline std::string encode_importance(const ImportanceTable& t) {
  std::ostringstream s;
  s << "# step=" << t.step << " arch=" << to_string(t.arch) << " layers=" << t.n_layers << " examples=" << t.examples
    << " profile=" << to_string(t.profile_mode) << "\n";
  s << "step\tlayer\tkind\texpert\thead\tcolumn\tmean_I\tmean_abs_I\tmean_pos_I\n";
  for (const auto& n : t.neurons) {
    const bool ffn = n.ref.kind == NeuronKind::FFN;
    s << t.step << '\t' << n.ref.layer << '\t' << to_string(n.ref.kind) << '\t'
      << (ffn && t.arch == Arch::Moe ? std::to_string(n.ref.unit) : "-") << '\t'
      << (ffn ? "-" : std::to_string(n.ref.unit)) << '\t' << n.ref.column << '\t' << format_double(n.mean_I) << '\t'
      << format_double(n.mean_abs_I) << '\t' << format_double(n.mean_pos_I) << '\n';
  }
  return s.str();
}

inline std::string encode_profile(const ImportanceTable& t) {
  std::ostringstream s;
  s << "step\tlayer\tkind\tvalue\n";
  for (NeuronKind k : {NeuronKind::FFN, NeuronKind::ATTN}) {
    const auto& p = t.profile(k);
    for (std::size_t l = 0; l < p.size(); ++l)
      s << t.step << '\t' << l << '\t' << to_string(k) << '\t' << format_double(p[l]) << '\n';
  }
  return s.str();
}

namespace detail {
inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, '\t')) out.push_back(cur);
  return out;
}
inline double parse_double(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw DataError(what + ": bad number '" + s + "'");
  return v;
}
inline std::size_t parse_index(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(what + ": bad index '" + s + "'");
  }
}
}  // namespace detail

inline ImportanceTable decode_importance(const std::string& neuron_text, const std::string& profile_text,
                                         const std::string& what = "importance table") {
  ImportanceTable t;
  std::istringstream in(neuron_text);
  std::string line;
  if (!std::getline(in, line) || !line.starts_with("# ")) throw DataError(what + ": missing metadata line");
  {
    std::istringstream meta(line.substr(2));
    std::string kv;
    while (meta >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) continue;
      const auto key = kv.substr(0, eq), val = kv.substr(eq + 1);
      if (key == "step") t.step = detail::parse_index(val, what);
      else if (key == "arch") t.arch = parse_arch(val);
      else if (key == "layers") t.n_layers = detail::parse_index(val, what);
      else if (key == "examples") t.examples = detail::parse_index(val, what);
      else if (key == "profile") t.profile_mode = parse_profile_mode(val);
    }
  }
  std::getline(in, line);  // column header
  std::size_t line_no = 2;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::split_tabs(line);
    const std::string where = what + " line " + std::to_string(line_no);
    if (f.size() != 9) throw DataError(where + ": expected 9 columns");
    NeuronStats n;
    n.ref.layer = detail::parse_index(f[1], where);
    if (f[2] == "FFN") {
      n.ref.kind = NeuronKind::FFN;
      n.ref.unit = f[3] == "-" ? 0 : detail::parse_index(f[3], where);
    } else if (f[2] == "ATTN") {
      n.ref.kind = NeuronKind::ATTN;
      n.ref.unit = detail::parse_index(f[4], where);
    } else {
      throw DataError(where + ": unknown kind '" + f[2] + "'");
    }
    n.ref.column = detail::parse_index(f[5], where);
    n.mean_I = detail::parse_double(f[6], where);
    n.mean_abs_I = detail::parse_double(f[7], where);
    n.mean_pos_I = detail::parse_double(f[8], where);
    t.neurons.push_back(n);
  }
  t.ffn_profile.assign(t.n_layers, 0.0);
  t.attn_profile.assign(t.n_layers, 0.0);
  std::istringstream pin(profile_text);
  std::getline(pin, line);
  while (std::getline(pin, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_tabs(line);
    if (f.size() != 4) throw DataError(what + ": bad profile row");
    const auto l = detail::parse_index(f[1], what);
    if (l >= t.n_layers) throw DataError(what + ": profile layer out of range");
    (f[2] == "FFN" ? t.ffn_profile : t.attn_profile)[l] = detail::parse_double(f[3], what);
  }
  return t;
}

inline std::string importance_name(std::size_t step) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "importance_%08zu.tsv", step);
  return buf;
}
inline std::string profile_name(std::size_t step) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "profile_%08zu.tsv", step);
  return buf;
}

inline void save_importance(const fs::path& dir, const ImportanceTable& t) {
  atomic_write(dir / importance_name(t.step), encode_importance(t));
  atomic_write(dir / profile_name(t.step), encode_profile(t));
}

inline ImportanceTable load_importance(const fs::path& dir, std::size_t step) {
  const auto np = dir / importance_name(step), pp = dir / profile_name(step);
  if (!fs::exists(np) || !fs::exists(pp)) throw DataError("missing importance table for step " + std::to_string(step) + " in " + dir.string());
  return decode_importance(read_file(np), read_file(pp), np.string());
}

}  // namespace glpi
