#pragma once

// Decoder-only toy transformer, dense or mixture-of-experts.
//
// Block order is pre-norm:
//   h_mid = h + Attn(LN1(h))
//   h_out = h_mid + FFN(LN2(h_mid))        (or the routed MoE layer)
// followed by an optional final LayerNorm and an untied unembedding.
//
// Attention heads keep their own W^V_j (d_head x d) and W^O_j (d x d_head)
// blocks so that the k-th attention neuron of head j is simply column k of
// W^O_j paired with row k of W^V_j.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "glpi/numerics.hpp"
#include "glpi/random.hpp"

namespace glpi {

enum class Arch { Dense, Moe };
enum class Nonlinearity { SiLU, ReLU };

inline std::string to_string(Arch a) { return a == Arch::Dense ? "dense" : "moe"; }
inline Arch parse_arch(const std::string& s) {
  if (s == "dense") return Arch::Dense;
  if (s == "moe") return Arch::Moe;
  throw UsageError("unknown arch '" + s + "' (expected dense|moe)");
}
inline std::string to_string(Nonlinearity n) { return n == Nonlinearity::SiLU ? "silu" : "relu"; }
inline Nonlinearity parse_nonlinearity(const std::string& s) {
  if (s == "silu") return Nonlinearity::SiLU;
  if (s == "relu") return Nonlinearity::ReLU;
  throw UsageError("unknown nonlinearity '" + s + "' (expected silu|relu)");
}

struct ModelConfig {
  Arch arch = Arch::Dense;
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_head = 32;
  std::size_t ffn_dim = 512;     // dense only
  std::size_t n_experts = 0;     // moe only
  std::size_t expert_dim = 0;    // moe only
  std::size_t top_k = 0;         // moe only
  std::size_t vocab = 0;
  std::size_t max_seq = 32;
  Nonlinearity nonlinearity = Nonlinearity::SiLU;
  bool gate_renorm = true;
  bool final_layernorm = true;

  // Inner width of one FFN unit: the dense FFN or a single expert.
  std::size_t inner_dim() const { return arch == Arch::Dense ? ffn_dim : expert_dim; }
  // FFN units per layer: 1 for dense, E for moe.
  std::size_t ffn_units() const { return arch == Arch::Dense ? 1 : n_experts; }

  void validate() const {
    auto fail = [](const std::string& m) { throw DataError("invalid model config: " + m); };
    if (d_model == 0 || n_heads == 0 || d_head == 0) fail("d_model, n_heads, d_head must be positive");
    if (n_heads * d_head != d_model) fail("n_heads * d_head must equal d_model");
    if (vocab == 0) fail("vocab must be positive");
    if (max_seq == 0) fail("max_seq must be positive");
    if (arch == Arch::Dense) {
      if (ffn_dim == 0) fail("dense ffn_dim must be positive");
      if (n_experts != 0 || expert_dim != 0 || top_k != 0) fail("dense config must not set experts");
    } else {
      if (n_experts == 0 || expert_dim == 0) fail("moe needs n_experts and expert_dim");
      if (top_k < 1 || top_k > n_experts) fail("moe needs 1 <= top_k <= n_experts");
      if (ffn_dim != 0) fail("moe config must not set ffn_dim");
    }
  }

  bool operator==(const ModelConfig&) const = default;

  static ModelConfig default_dense(std::size_t vocab) {
    ModelConfig c;
    c.arch = Arch::Dense;
    c.n_layers = 4;
    c.d_model = 128;
    c.n_heads = 4;
    c.d_head = 32;
    c.ffn_dim = 512;
    c.vocab = vocab;
    return c;
  }
  static ModelConfig default_moe(std::size_t vocab) {
    ModelConfig c = default_dense(vocab);
    c.arch = Arch::Moe;
    c.ffn_dim = 0;
    c.n_experts = 8;
    c.expert_dim = 64;
    c.top_k = 2;
    return c;
  }
};

struct HeadWeights {
  Matrix wq, wk, wv;  // d_head x d
  Matrix wo;          // d x d_head
};

struct FfnWeights {
  Matrix w1;  // inner x d   (rows are subkeys)
  Matrix w2;  // d x inner   (columns are subvalues)
};

struct LayerWeights {
  Vector ln1_gain, ln1_bias;
  std::vector<HeadWeights> heads;
  Vector ln2_gain, ln2_bias;
  FfnWeights ffn;                    // dense
  Matrix router;                     // E x d (moe)
  std::vector<FfnWeights> experts;   // moe
};

struct ModelWeights {
  Matrix tok_embed;  // vocab x d
  Matrix pos_embed;  // max_seq x d
  std::vector<LayerWeights> layers;
  Vector lnf_gain, lnf_bias;  // present iff final_layernorm
  Matrix unembed;             // vocab x d
};

struct TensorView {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<double> values;
};
struct ConstTensorView {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<const double> values;
};

namespace detail {
template <typename W, typename Fn>
void visit_tensors(const ModelConfig& cfg, W& w, Fn&& fn) {
  auto mat = [&](const std::string& name, auto& m) { fn(name, std::vector<std::size_t>{m.rows(), m.cols()}, m.storage()); };
  auto vec = [&](const std::string& name, auto& v) { fn(name, std::vector<std::size_t>{v.size()}, v); };
  mat("tok_embed", w.tok_embed);
  mat("pos_embed", w.pos_embed);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto& lw = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    vec(p + "ln1.gain", lw.ln1_gain);
    vec(p + "ln1.bias", lw.ln1_bias);
    for (std::size_t j = 0; j < cfg.n_heads; ++j) {
      const std::string h = p + "attn.head." + std::to_string(j) + ".";
      mat(h + "wq", lw.heads[j].wq);
      mat(h + "wk", lw.heads[j].wk);
      mat(h + "wv", lw.heads[j].wv);
      mat(h + "wo", lw.heads[j].wo);
    }
    vec(p + "ln2.gain", lw.ln2_gain);
    vec(p + "ln2.bias", lw.ln2_bias);
    if (cfg.arch == Arch::Dense) {
      mat(p + "ffn.w1", lw.ffn.w1);
      mat(p + "ffn.w2", lw.ffn.w2);
    } else {
      mat(p + "moe.router", lw.router);
      for (std::size_t e = 0; e < cfg.n_experts; ++e) {
        const std::string x = p + "moe.expert." + std::to_string(e) + ".";
        mat(x + "w1", lw.experts[e].w1);
        mat(x + "w2", lw.experts[e].w2);
      }
    }
  }
  if (cfg.final_layernorm) {
    vec("ln_f.gain", w.lnf_gain);
    vec("ln_f.bias", w.lnf_bias);
  }
  mat("unembed", w.unembed);
}
}  // namespace detail

// Visits every parameter tensor in manifest order.
inline void for_each_tensor(const ModelConfig& cfg, ModelWeights& w,
                            const std::function<void(TensorView)>& fn) {
  detail::visit_tensors(cfg, w, [&](const std::string& n, std::vector<std::size_t> s, std::vector<double>& v) {
    fn(TensorView{n, std::move(s), std::span<double>(v)});
  });
}
inline void for_each_tensor(const ModelConfig& cfg, const ModelWeights& w,
                            const std::function<void(ConstTensorView)>& fn) {
  detail::visit_tensors(cfg, w, [&](const std::string& n, std::vector<std::size_t> s, const std::vector<double>& v) {
    fn(ConstTensorView{n, std::move(s), std::span<const double>(v)});
  });
}

// All-zero weights with the shapes implied by cfg; LayerNorm gains are 1.
inline ModelWeights zero_weights(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  ModelWeights w;
  w.tok_embed = Matrix(cfg.vocab, d);
  w.pos_embed = Matrix(cfg.max_seq, d);
  w.layers.resize(cfg.n_layers);
  for (auto& lw : w.layers) {
    lw.ln1_gain.assign(d, 1.0);
    lw.ln1_bias.assign(d, 0.0);
    lw.ln2_gain.assign(d, 1.0);
    lw.ln2_bias.assign(d, 0.0);
    lw.heads.resize(cfg.n_heads);
    for (auto& h : lw.heads) {
      h.wq = Matrix(cfg.d_head, d);
      h.wk = Matrix(cfg.d_head, d);
      h.wv = Matrix(cfg.d_head, d);
      h.wo = Matrix(d, cfg.d_head);
    }
    if (cfg.arch == Arch::Dense) {
      lw.ffn.w1 = Matrix(cfg.ffn_dim, d);
      lw.ffn.w2 = Matrix(d, cfg.ffn_dim);
    } else {
      lw.router = Matrix(cfg.n_experts, d);
      lw.experts.resize(cfg.n_experts);
      for (auto& e : lw.experts) {
        e.w1 = Matrix(cfg.expert_dim, d);
        e.w2 = Matrix(d, cfg.expert_dim);
      }
    }
  }
  if (cfg.final_layernorm) {
    w.lnf_gain.assign(d, 1.0);
    w.lnf_bias.assign(d, 0.0);
  }
  w.unembed = Matrix(cfg.vocab, d);
  return w;
}

// Same shapes as zero_weights with every entry 0, gains included; used for
// gradients and optimiser moments.
inline ModelWeights zero_tensors(const ModelConfig& cfg) {
  ModelWeights w = zero_weights(cfg);
  for_each_tensor(cfg, w, [](TensorView t) { std::fill(t.values.begin(), t.values.end(), 0.0); });
  return w;
}

// GPT-2 style initialisation: N(0, 0.02), residual output projections
// scaled by 1/sqrt(2L). LayerNorm parameters stay at (1, 0).
inline ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed, double std_dev = 0.02) {
  ModelWeights w = zero_weights(cfg);
  Rng rng(seed);
  const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg.n_layers, 1)));
  for_each_tensor(cfg, w, [&](TensorView t) {
    if (t.shape.size() != 2) return;
    const bool out_proj = t.name.ends_with(".wo") || t.name.ends_with(".w2");
    const double s = std_dev * (out_proj ? resid_scale : 1.0);
    for (double& x : t.values) x = s * rng.normal();
  });
  return w;
}

struct Checkpoint {
  std::size_t step = 0;
  ModelConfig config;
  ModelWeights weights;
};

// ---------------------------------------------------------------------------
// Elementwise pieces

inline double activate(Nonlinearity n, double u) {
  switch (n) {
    case Nonlinearity::SiLU:
      return u / (1.0 + std::exp(-u));
    case Nonlinearity::ReLU:
      return u > 0.0 ? u : 0.0;
  }
  return 0.0;
}

inline double activate_grad(Nonlinearity n, double u) {
  switch (n) {
    case Nonlinearity::SiLU: {
      const double s = 1.0 / (1.0 + std::exp(-u));
      return s * (1.0 + u * (1.0 - s));
    }
    case Nonlinearity::ReLU:
      return u > 0.0 ? 1.0 : 0.0;
  }
  return 0.0;
}

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise LayerNorm. Stores the normalised input and 1/std for backward.
inline void layernorm_rows(const Matrix& x, const Vector& gain, const Vector& bias, Matrix& y, Matrix* xhat,
                           Vector* rstd) {
  const std::size_t n = x.rows(), d = x.cols();
  require_same_size(gain.size(), d, "layernorm gain");
  require_same_size(bias.size(), d, "layernorm bias");
  y.resize(n, d);
  if (xhat) xhat->resize(n, d);
  if (rstd) rstd->assign(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    auto xr = x.row(r);
    double mu = 0.0;
    for (double v : xr) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xr) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (xr[c] - mu) * rs;
      if (xhat) (*xhat)(r, c) = h;
      y(r, c) = h * gain[c] + bias[c];
    }
    if (rstd) (*rstd)[r] = rs;
  }
}

inline Vector layernorm(std::span<const double> x, const Vector& gain, const Vector& bias) {
  Matrix in(1, x.size(), Vector(x.begin(), x.end()));
  Matrix out;
  layernorm_rows(in, gain, bias, out, nullptr, nullptr);
  return out.storage();
}

// Y = X W^T for X (n x in), W (out x in).
inline void linear(const Matrix& x, const Matrix& w, Matrix& y, bool accumulate = false) {
  require_same_size(x.cols(), w.cols(), "linear");
  thread_local Matrix wt;
  if (wt.rows() != w.cols() || wt.cols() != w.rows()) wt.resize(w.cols(), w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) wt(c, r) = w(r, c);
  gemm(x, wt, y, accumulate);
}

// ---------------------------------------------------------------------------
// Masks

struct HeadRef {
  std::size_t layer = 0;
  std::size_t head = 0;
  auto operator<=>(const HeadRef&) const = default;
};

// FFN neuron address used by masks: (layer, unit, column) where unit is the
// expert index for moe and 0 for dense.
struct FfnNeuron {
  std::size_t layer = 0;
  std::size_t unit = 0;
  std::size_t column = 0;
  auto operator<=>(const FfnNeuron&) const = default;
};

struct MaskSpec {
  std::set<HeadRef> heads;
  std::set<FfnNeuron> neurons;
  bool empty() const { return heads.empty() && neurons.empty(); }

  void validate(const ModelConfig& cfg) const {
    for (const auto& h : heads) {
      if (h.layer >= cfg.n_layers || h.head >= cfg.n_heads) {
        throw UsageError("mask: head (" + std::to_string(h.layer) + "," + std::to_string(h.head) + ") out of range");
      }
    }
    for (const auto& n : neurons) {
      if (n.layer >= cfg.n_layers || n.unit >= cfg.ffn_units() || n.column >= cfg.inner_dim()) {
        throw UsageError("mask: FFN neuron (" + std::to_string(n.layer) + "," + std::to_string(n.unit) + "," +
                         std::to_string(n.column) + ") out of range");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Traces

struct Route {
  std::size_t expert = 0;
  double gate = 0.0;   // weight applied to the expert output
  double prob = 0.0;   // router softmax probability before renormalisation
  std::size_t slot = 0;  // row of this token inside the expert's batch
};

struct AttentionTrace {
  Matrix ln_hat;  // normalised input before gain/bias
  Vector ln_rstd;
  Matrix ln_out;  // h_p fed to the projections
  std::vector<Matrix> q, k, v, z;           // per head, rows x d_head; v is W^V_j h_p
  std::vector<std::vector<Matrix>> alpha;   // [sequence][head], T x T, zero above diagonal
  Matrix out;                               // rows x d
};

struct FfnTrace {
  Matrix ln_hat;
  Vector ln_rstd;
  Matrix ln_out;  // x fed to the FFN / router
  // dense
  Matrix pre;  // W1 x
  Matrix act;  // m = sigma(W1 x), masked columns are zero
  // moe
  Matrix router_probs;                           // rows x E
  std::vector<std::vector<Route>> routes;        // [row] -> top-k, in rank order
  std::vector<std::vector<std::size_t>> expert_rows;  // [expert] -> rows, ascending
  std::vector<Matrix> expert_pre, expert_act, expert_out;  // [expert] slot x inner / slot x d (ungated)
  Matrix out;  // rows x d
};

// Everything recorded by one forward pass over a packed batch of sequences.
// Row r of every per-position matrix belongs to the sequence s with
// offsets[s] <= r < offsets[s+1].
struct ForwardTrace {
  std::vector<std::size_t> offsets;
  std::vector<int> tokens;
  std::vector<Matrix> resid_in;   // [layer] input residual
  std::vector<Matrix> resid_mid;  // [layer] residual after attention (FFN input before norm)
  std::vector<Matrix> resid_out;  // [layer] residual after the FFN / MoE
  std::vector<AttentionTrace> attn;
  std::vector<FfnTrace> ffn;
  Matrix final_resid;
  Matrix lnf_hat;
  Vector lnf_rstd;
  Matrix final_out;  // input to the unembedding
  Matrix logits;     // rows x vocab

  std::size_t sequences() const { return offsets.empty() ? 0 : offsets.size() - 1; }
  std::size_t rows() const { return tokens.size(); }
  std::size_t last_row(std::size_t seq) const { return offsets[seq + 1] - 1; }
  std::size_t seq_of_row(std::size_t row) const {
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
      if (row < offsets[s + 1]) return s;
    throw ShapeError("row out of range");
  }
};

// ---------------------------------------------------------------------------
// Single-vector operations

struct FfnResult {
  Vector output;
  Vector m;
};

// FFN(x) = W2 sigma(W1 x). `masked` columns get m = 0.
inline FfnResult expert_ffn(std::span<const double> x, const FfnWeights& w, Nonlinearity nl,
                            const std::vector<bool>* masked = nullptr) {
  require_same_size(x.size(), w.w1.cols(), "expert_ffn input");
  require_same_size(w.w2.cols(), w.w1.rows(), "expert_ffn inner");
  FfnResult r;
  r.m = matvec(w.w1, x);
  for (std::size_t k = 0; k < r.m.size(); ++k) {
    r.m[k] = (masked && (*masked)[k]) ? 0.0 : activate(nl, r.m[k]);
  }
  r.output = matvec(w.w2, r.m);
  return r;
}

struct RoutedExpert {
  std::size_t expert = 0;
  double gate = 0.0;
  Vector m;
};
struct MoeResult {
  Vector output;
  Vector router_probs;
  std::vector<RoutedExpert> routes;
};

inline std::vector<Route> route_token(std::span<const double> probs, const ModelConfig& cfg) {
  if (cfg.top_k > cfg.n_experts) throw DataError("moe: top_k exceeds n_experts");
  const auto sel = topk_indices(probs, cfg.top_k);
  std::vector<Route> routes;
  double total = 0.0;
  for (auto e : sel) total += probs[e];
  for (auto e : sel) {
    Route r;
    r.expert = e;
    r.prob = probs[e];
    r.gate = cfg.gate_renorm ? probs[e] / total : probs[e];
    routes.push_back(r);
  }
  return routes;
}

// MoE(x) = sum over the top-k experts of gate_E(x) * FFN_E(x).
inline MoeResult moe_layer_forward(std::span<const double> x, const LayerWeights& lw, const ModelConfig& cfg) {
  if (cfg.arch != Arch::Moe) throw UsageError("moe_layer_forward on a dense config");
  if (cfg.top_k > cfg.n_experts) throw DataError("moe: top_k exceeds n_experts");
  MoeResult res;
  res.router_probs = softmax(matvec(lw.router, x));
  res.output.assign(cfg.d_model, 0.0);
  for (const auto& r : route_token(res.router_probs, cfg)) {
    auto f = expert_ffn(x, lw.experts[r.expert], cfg.nonlinearity);
    axpy(r.gate, f.output, res.output);
    res.routes.push_back({r.expert, r.gate, std::move(f.m)});
  }
  return res;
}

struct AttentionResult {
  Matrix out;                    // T x d
  std::vector<Matrix> alpha;     // per head T x T
  std::vector<Matrix> values;    // per head T x d_head (W^V_j h_p)
};

namespace detail {
// Causal attention for one sequence given the normalised hidden states.
// Fills per-head q/k/v/z/alpha and accumulates the output rows.
inline void attention_sequence(const Matrix& hidden, const LayerWeights& lw, const ModelConfig& cfg,
                               const std::vector<bool>& head_masked, std::vector<Matrix>& q,
                               std::vector<Matrix>& k, std::vector<Matrix>& v, std::vector<Matrix>& z,
                               std::vector<Matrix>& alpha, Matrix& out) {
  const std::size_t t_len = hidden.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  q.resize(cfg.n_heads);
  k.resize(cfg.n_heads);
  v.resize(cfg.n_heads);
  z.resize(cfg.n_heads);
  alpha.resize(cfg.n_heads);
  out.resize(t_len, cfg.d_model);
  for (std::size_t j = 0; j < cfg.n_heads; ++j) {
    const auto& hw = lw.heads[j];
    linear(hidden, hw.wq, q[j]);
    linear(hidden, hw.wk, k[j]);
    linear(hidden, hw.wv, v[j]);
    Matrix& a = alpha[j];
    a.resize(t_len, t_len);
    z[j].resize(t_len, cfg.d_head);
    for (std::size_t i = 0; i < t_len; ++i) {
      Vector scores(i + 1);
      for (std::size_t p = 0; p <= i; ++p) scores[p] = dot(q[j].row(i), k[j].row(p)) * scale;
      const Vector w = softmax(scores);
      for (std::size_t p = 0; p <= i; ++p) {
        a(i, p) = w[p];
        axpy(w[p], v[j].row(p), z[j].row(i));
      }
    }
    if (!head_masked.empty() && head_masked[j]) continue;
    linear(z[j], hw.wo, out, /*accumulate=*/true);
  }
}
}  // namespace detail

// Attn(x)_i = sum_j sum_{p<=i} alpha_{i,j,p} W^O_j (W^V_j h_p).
inline AttentionResult attention_forward(const Matrix& hidden, const LayerWeights& lw, const ModelConfig& cfg) {
  if (hidden.rows() == 0) throw ShapeError("attention_forward: no positions");
  require_same_size(hidden.cols(), cfg.d_model, "attention_forward width");
  AttentionResult r;
  std::vector<Matrix> q, k, z;
  detail::attention_sequence(hidden, lw, cfg, {}, q, k, r.values, z, r.alpha, r.out);
  return r;
}

// ---------------------------------------------------------------------------
// Full forward pass

namespace detail {

struct LayerMask {
  std::vector<bool> heads;
  std::vector<std::vector<bool>> units;  // [unit][column]
  bool any_unit = false;
};

inline std::vector<LayerMask> expand_mask(const ModelConfig& cfg, const MaskSpec* mask) {
  std::vector<LayerMask> out(cfg.n_layers);
  if (!mask || mask->empty()) return out;
  mask->validate(cfg);
  for (auto& lm : out) {
    lm.heads.assign(cfg.n_heads, false);
    lm.units.assign(cfg.ffn_units(), std::vector<bool>(cfg.inner_dim(), false));
  }
  for (const auto& h : mask->heads) out[h.layer].heads[h.head] = true;
  for (const auto& n : mask->neurons) {
    out[n.layer].units[n.unit][n.column] = true;
    out[n.layer].any_unit = true;
  }
  return out;
}

inline void attention_block(const Matrix& resid, const std::vector<std::size_t>& offsets, const LayerWeights& lw,
                            const ModelConfig& cfg, const LayerMask& lm, AttentionTrace& tr) {
  layernorm_rows(resid, lw.ln1_gain, lw.ln1_bias, tr.ln_out, &tr.ln_hat, &tr.ln_rstd);
  const std::size_t n = resid.rows();
  tr.q.assign(cfg.n_heads, Matrix(n, cfg.d_head));
  tr.k = tr.q;
  tr.v = tr.q;
  tr.z = tr.q;
  tr.out.resize(n, cfg.d_model);
  tr.alpha.assign(offsets.size() - 1, {});
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t b = offsets[s], e = offsets[s + 1];
    Matrix hidden(e - b, cfg.d_model);
    for (std::size_t r = b; r < e; ++r) std::copy_n(tr.ln_out.row(r).data(), cfg.d_model, hidden.row(r - b).data());
    std::vector<Matrix> q, k, v, z;
    Matrix out;
    attention_sequence(hidden, lw, cfg, lm.heads, q, k, v, z, tr.alpha[s], out);
    for (std::size_t r = b; r < e; ++r) {
      for (std::size_t j = 0; j < cfg.n_heads; ++j) {
        std::copy_n(q[j].row(r - b).data(), cfg.d_head, tr.q[j].row(r).data());
        std::copy_n(k[j].row(r - b).data(), cfg.d_head, tr.k[j].row(r).data());
        std::copy_n(v[j].row(r - b).data(), cfg.d_head, tr.v[j].row(r).data());
        std::copy_n(z[j].row(r - b).data(), cfg.d_head, tr.z[j].row(r).data());
      }
      std::copy_n(out.row(r - b).data(), cfg.d_model, tr.out.row(r).data());
    }
  }
}

inline void apply_activation(const Matrix& pre, Matrix& act, Nonlinearity nl, const std::vector<bool>* masked) {
  act.resize(pre.rows(), pre.cols());
  for (std::size_t r = 0; r < pre.rows(); ++r)
    for (std::size_t c = 0; c < pre.cols(); ++c)
      act(r, c) = (masked && (*masked)[c]) ? 0.0 : activate(nl, pre(r, c));
}

inline void ffn_block(const Matrix& resid, const LayerWeights& lw, const ModelConfig& cfg, const LayerMask& lm,
                      FfnTrace& tr) {
  layernorm_rows(resid, lw.ln2_gain, lw.ln2_bias, tr.ln_out, &tr.ln_hat, &tr.ln_rstd);
  const std::size_t n = resid.rows();
  if (cfg.arch == Arch::Dense) {
    linear(tr.ln_out, lw.ffn.w1, tr.pre);
    apply_activation(tr.pre, tr.act, cfg.nonlinearity, lm.any_unit ? &lm.units[0] : nullptr);
    linear(tr.act, lw.ffn.w2, tr.out);
    return;
  }
  Matrix logits;
  linear(tr.ln_out, lw.router, logits);
  tr.router_probs.resize(n, cfg.n_experts);
  tr.routes.assign(n, {});
  tr.expert_rows.assign(cfg.n_experts, {});
  for (std::size_t r = 0; r < n; ++r) {
    const Vector p = softmax(logits.row(r));
    std::copy(p.begin(), p.end(), tr.router_probs.row(r).begin());
    tr.routes[r] = route_token(p, cfg);
    for (auto& route : tr.routes[r]) {
      route.slot = tr.expert_rows[route.expert].size();
      tr.expert_rows[route.expert].push_back(r);
    }
  }
  tr.expert_pre.assign(cfg.n_experts, {});
  tr.expert_act.assign(cfg.n_experts, {});
  tr.expert_out.assign(cfg.n_experts, {});
  for (std::size_t e = 0; e < cfg.n_experts; ++e) {
    const auto& rows = tr.expert_rows[e];
    if (rows.empty()) continue;
    Matrix in(rows.size(), cfg.d_model);
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy_n(tr.ln_out.row(rows[i]).data(), cfg.d_model, in.row(i).data());
    linear(in, lw.experts[e].w1, tr.expert_pre[e]);
    apply_activation(tr.expert_pre[e], tr.expert_act[e], cfg.nonlinearity,
                     lm.any_unit ? &lm.units[e] : nullptr);
    linear(tr.expert_act[e], lw.experts[e].w2, tr.expert_out[e]);
  }
  tr.out.resize(n, cfg.d_model);
  for (std::size_t r = 0; r < n; ++r)
    for (const auto& route : tr.routes[r]) axpy(route.gate, tr.expert_out[route.expert].row(route.slot), tr.out.row(r));
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  require_same_size(a.size(), b.size(), "residual add");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
  return c;
}

inline void finish(const ModelConfig& cfg, const ModelWeights& w, ForwardTrace& tr) {
  if (cfg.final_layernorm) {
    layernorm_rows(tr.final_resid, w.lnf_gain, w.lnf_bias, tr.final_out, &tr.lnf_hat, &tr.lnf_rstd);
  } else {
    tr.final_out = tr.final_resid;
  }
  linear(tr.final_out, w.unembed, tr.logits);
}

}  // namespace detail

inline void validate_tokens(const ModelConfig& cfg, const std::vector<int>& seq) {
  if (seq.empty()) throw DataError("model_forward: empty token sequence");
  if (seq.size() > cfg.max_seq) {
    throw DataError("model_forward: sequence length " + std::to_string(seq.size()) + " exceeds max_seq " +
                    std::to_string(cfg.max_seq));
  }
  for (int t : seq) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab) {
      throw DataError("model_forward: token id " + std::to_string(t) + " outside vocabulary");
    }
  }
}

// Forward over a packed batch; `mask` zeroes head outputs and FFN activations.
inline ForwardTrace forward_batch(const Checkpoint& ckpt, const std::vector<std::vector<int>>& seqs,
                                  const MaskSpec* mask = nullptr) {
  const auto& cfg = ckpt.config;
  const auto& w = ckpt.weights;
  const auto masks = detail::expand_mask(cfg, mask);
  ForwardTrace tr;
  tr.offsets.push_back(0);
  for (const auto& s : seqs) {
    validate_tokens(cfg, s);
    tr.tokens.insert(tr.tokens.end(), s.begin(), s.end());
    tr.offsets.push_back(tr.tokens.size());
  }
  const std::size_t n = tr.tokens.size();
  Matrix resid(n, cfg.d_model);
  for (std::size_t s = 0; s + 1 < tr.offsets.size(); ++s) {
    for (std::size_t r = tr.offsets[s]; r < tr.offsets[s + 1]; ++r) {
      const auto tok = static_cast<std::size_t>(tr.tokens[r]);
      const std::size_t pos = r - tr.offsets[s];
      for (std::size_t c = 0; c < cfg.d_model; ++c) resid(r, c) = w.tok_embed(tok, c) + w.pos_embed(pos, c);
    }
  }
  tr.attn.resize(cfg.n_layers);
  tr.ffn.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    tr.resid_in.push_back(resid);
    detail::attention_block(resid, tr.offsets, w.layers[l], cfg, masks[l], tr.attn[l]);
    resid = detail::add(resid, tr.attn[l].out);
    tr.resid_mid.push_back(resid);
    detail::ffn_block(resid, w.layers[l], cfg, masks[l], tr.ffn[l]);
    resid = detail::add(resid, tr.ffn[l].out);
    tr.resid_out.push_back(resid);
  }
  tr.final_resid = std::move(resid);
  detail::finish(cfg, w, tr);
  return tr;
}

inline ForwardTrace model_forward(const std::vector<int>& tokens, const Checkpoint& ckpt) {
  return forward_batch(ckpt, {tokens});
}

// Where an injected vector enters the residual stream.
enum class InjectSite { AfterAttention, AfterFfn };

// Adds `delta` to one residual row at (layer, site) and re-runs everything
// downstream. Returns the new final residual row for that position.
inline Vector forward_with_injection(const Checkpoint& ckpt, const ForwardTrace& base, std::size_t layer,
                                     InjectSite site, std::size_t row, std::span<const double> delta) {
  const auto& cfg = ckpt.config;
  const auto& w = ckpt.weights;
  const std::size_t seq = base.seq_of_row(row);
  const std::size_t b = base.offsets[seq];
  // Later positions cannot influence this row, so only the prefix is replayed.
  const std::vector<std::size_t> offsets{0, row - b + 1};
  auto slice = [&](const Matrix& m) {
    Matrix out(row - b + 1, m.cols());
    for (std::size_t r = b; r <= row; ++r) std::copy_n(m.row(r).data(), m.cols(), out.row(r - b).data());
    return out;
  };
  const detail::LayerMask no_mask;
  Matrix resid = slice(site == InjectSite::AfterAttention ? base.resid_mid[layer] : base.resid_out[layer]);
  axpy(1.0, delta, resid.row(row - b));
  std::size_t l = layer;
  if (site == InjectSite::AfterAttention) {
    FfnTrace ft;
    detail::ffn_block(resid, w.layers[l], cfg, no_mask, ft);
    resid = detail::add(resid, ft.out);
  }
  for (++l; l < cfg.n_layers; ++l) {
    AttentionTrace at;
    detail::attention_block(resid, offsets, w.layers[l], cfg, no_mask, at);
    resid = detail::add(resid, at.out);
    FfnTrace ft;
    detail::ffn_block(resid, w.layers[l], cfg, no_mask, ft);
    resid = detail::add(resid, ft.out);
  }
  auto last = resid.row(row - b);
  return Vector(last.begin(), last.end());
}

// Final norm (if enabled) + unembedding for one residual vector.
inline Vector unembed_logits(std::span<const double> residual, const Checkpoint& ckpt) {
  const auto& cfg = ckpt.config;
  require_same_size(residual.size(), cfg.d_model, "unembed residual");
  if (cfg.final_layernorm) {
    const Vector normed = layernorm(residual, ckpt.weights.lnf_gain, ckpt.weights.lnf_bias);
    return matvec(ckpt.weights.unembed, normed);
  }
  return matvec(ckpt.weights.unembed, residual);
}

inline double unembed_logprob(std::span<const double> residual, std::size_t target, const Checkpoint& ckpt) {
  if (target >= ckpt.config.vocab) throw DataError("unembed_logprob: target outside vocabulary");
  const Vector logits = unembed_logits(residual, ckpt);
  return logits[target] - logsumexp(logits);
}

}  // namespace glpi
