#pragma once

// Next-token trainer with a hand-written backward pass, Adam, and a
// checkpoint series writer.
//
// Top-k routing is treated as a hard selection: gradients reach the router
// only through the gates of the selected experts (plus the load-balance
// term, which sees every router probability).

#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "glpi/checkpoint.hpp"
#include "glpi/io.hpp"
#include "glpi/model.hpp"
#include "glpi/random.hpp"
#include "json.hpp"

namespace glpi {

// ---------------------------------------------------------------------------
// Configs and their JSON form

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["arch"] = to_string(c.arch);
  j["n_layers"] = c.n_layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["d_head"] = c.d_head;
  j["ffn_dim"] = c.ffn_dim;
  j["n_experts"] = c.n_experts;
  j["expert_dim"] = c.expert_dim;
  j["top_k"] = c.top_k;
  j["vocab"] = c.vocab;
  j["max_seq"] = c.max_seq;
  j["nonlinearity"] = to_string(c.nonlinearity);
  j["gate_renorm"] = c.gate_renorm;
  j["final_layernorm"] = c.final_layernorm;
  return j;
}

// Overlays keys present in `j` onto `c`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
  try {
    if (j.contains("arch")) c.arch = parse_arch(j["arch"].get<std::string>());
    auto num = [&](const char* k, std::size_t& dst) {
      if (j.contains(k)) dst = j[k].get<std::size_t>();
    };
    num("n_layers", c.n_layers);
    num("d_model", c.d_model);
    num("n_heads", c.n_heads);
    num("d_head", c.d_head);
    num("ffn_dim", c.ffn_dim);
    num("n_experts", c.n_experts);
    num("expert_dim", c.expert_dim);
    num("top_k", c.top_k);
    num("vocab", c.vocab);
    num("max_seq", c.max_seq);
    if (j.contains("nonlinearity")) c.nonlinearity = parse_nonlinearity(j["nonlinearity"].get<std::string>());
    if (j.contains("gate_renorm")) c.gate_renorm = j["gate_renorm"].get<bool>();
    if (j.contains("final_layernorm")) c.final_layernorm = j["final_layernorm"].get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
  return c;
}

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double lr = 3e-3;
  std::size_t warmup_steps = 100;
  double min_lr_fraction = 0.1;  // cosine decay floor
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global L2 norm, 0 disables
  double lambda_bal = 0.01;
  double init_std = 0.02;
  std::uint64_t seed = 0;
  std::vector<std::size_t> schedule;  // empty: step 0 plus every 5% of steps

  // Step 0 plus every 5% of the run, as a strictly increasing list.
  std::vector<std::size_t> effective_schedule() const {
    std::vector<std::size_t> s = schedule;
    if (s.empty()) {
      for (std::size_t i = 1; i <= 20; ++i) {
        const std::size_t st = (steps * i + 10) / 20;
        if (st >= 1 && (s.empty() || st > s.back())) s.push_back(st);
      }
    }
    std::vector<std::size_t> out{0};
    for (auto st : s)
      if (st > out.back()) out.push_back(st);
    return out;
  }

  void validate() const {
    if (batch_size == 0) throw DataError("train config: batch_size must be positive");
    if (!(lr > 0.0)) throw DataError("train config: lr must be positive");
    std::size_t prev = 0;
    bool first = true;
    for (auto st : schedule) {
      if (st > steps) throw DataError("train config: checkpoint step " + std::to_string(st) + " exceeds steps");
      if (!first && st <= prev) throw DataError("train config: checkpoint schedule must be strictly increasing");
      prev = st;
      first = false;
    }
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["warmup_steps"] = c.warmup_steps;
  j["min_lr_fraction"] = c.min_lr_fraction;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["weight_decay"] = c.weight_decay;
  j["grad_clip"] = c.grad_clip;
  j["lambda_bal"] = c.lambda_bal;
  j["init_std"] = c.init_std;
  j["seed"] = c.seed;
  j["schedule"] = c.effective_schedule();
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    auto num = [&](const char* k, auto& dst) {
      if (j.contains(k)) dst = j[k].get<std::remove_reference_t<decltype(dst)>>();
    };
    num("steps", c.steps);
    num("batch_size", c.batch_size);
    num("lr", c.lr);
    num("warmup_steps", c.warmup_steps);
    num("min_lr_fraction", c.min_lr_fraction);
    num("beta1", c.beta1);
    num("beta2", c.beta2);
    num("adam_eps", c.adam_eps);
    num("weight_decay", c.weight_decay);
    num("grad_clip", c.grad_clip);
    num("lambda_bal", c.lambda_bal);
    num("init_std", c.init_std);
    num("seed", c.seed);
    num("schedule", c.schedule);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("train config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Loss and gradients

struct LossParts {
  double ce = 0.0;       // mean next-token cross-entropy
  double balance = 0.0;  // mean over MoE layers of the load-balance penalty
  double total = 0.0;    // ce + lambda * balance
};

// Load-balance penalty for one layer: (1/E) sum_e (P_e - 1/E)^2 where P_e is
// the router probability mass of expert e averaged over the batch's tokens.
inline double balance_penalty(const Matrix& router_probs) {
  const std::size_t n = router_probs.rows(), e_count = router_probs.cols();
  const double target = 1.0 / static_cast<double>(e_count);
  double pen = 0.0;
  for (std::size_t e = 0; e < e_count; ++e) {
    double p = 0.0;
    for (std::size_t r = 0; r < n; ++r) p += router_probs(r, e);
    p /= static_cast<double>(n);
    pen += (p - target) * (p - target);
  }
  return pen / static_cast<double>(e_count);
}

inline std::size_t prediction_count(const ForwardTrace& tr) {
  return tr.rows() - tr.sequences();
}

inline LossParts loss_from_trace(const ModelConfig& cfg, const ForwardTrace& tr, double lambda_bal) {
  LossParts out;
  const std::size_t count = prediction_count(tr);
  if (count == 0) throw DataError("loss: batch has no next-token targets");
  for (std::size_t s = 0; s < tr.sequences(); ++s) {
    for (std::size_t r = tr.offsets[s]; r + 1 < tr.offsets[s + 1]; ++r) {
      const auto target = static_cast<std::size_t>(tr.tokens[r + 1]);
      out.ce -= tr.logits(r, target) - logsumexp(tr.logits.row(r));
    }
  }
  out.ce /= static_cast<double>(count);
  if (cfg.arch == Arch::Moe && cfg.n_layers > 0) {
    for (const auto& f : tr.ffn) out.balance += balance_penalty(f.router_probs);
    out.balance /= static_cast<double>(cfg.n_layers);
  }
  out.total = out.ce + lambda_bal * out.balance;
  return out;
}

inline LossParts batch_loss(const Checkpoint& ck, const std::vector<std::vector<int>>& seqs, double lambda_bal) {
  return loss_from_trace(ck.config, forward_batch(ck, seqs), lambda_bal);
}

namespace detail {

// dx for y = LN(x); accumulates gain/bias grads.
inline void layernorm_backward(const Matrix& dy, const Matrix& xhat, const Vector& rstd, const Vector& gain,
                               Vector& dgain, Vector& dbias, Matrix& dx) {
  const std::size_t n = dy.rows(), d = dy.cols();
  dx.resize(n, d);
  Vector dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dgain[c] += dy(r, c) * xhat(r, c);
      dbias[c] += dy(r, c);
      dxhat[c] = dy(r, c) * gain[c];
      m1 += dxhat[c];
      m2 += dxhat[c] * xhat(r, c);
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) dx(r, c) = rstd[r] * (dxhat[c] - m1 - xhat(r, c) * m2);
  }
}

inline void add_into(Matrix& a, const Matrix& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

// Backward through one FFN unit given its input rows, pre-activations,
// activations and the gradient of its (ungated) output.
inline void ffn_unit_backward(const Matrix& in, const Matrix& pre, const Matrix& act, const Matrix& dout,
                              const FfnWeights& w, FfnWeights& g, Nonlinearity nl, Matrix& din) {
  gemm_tn(dout, act, g.w2, /*accumulate=*/true);
  Matrix dact;
  gemm(dout, w.w2, dact);
  for (std::size_t i = 0; i < dact.size(); ++i) dact.data()[i] *= activate_grad(nl, pre.data()[i]);
  gemm_tn(dact, in, g.w1, /*accumulate=*/true);
  gemm(dact, w.w1, din);
}

}  // namespace detail

// Loss plus gradients of `total` w.r.t. every weight, accumulated into `grad`
// (which must have zero_tensors() shapes).
inline LossParts loss_and_grad(const Checkpoint& ck, const std::vector<std::vector<int>>& seqs, double lambda_bal,
                               ModelWeights& grad) {
  const auto& cfg = ck.config;
  const auto& w = ck.weights;
  const ForwardTrace tr = forward_batch(ck, seqs);
  const LossParts loss = loss_from_trace(cfg, tr, lambda_bal);
  const std::size_t n = tr.rows();
  const double inv_count = 1.0 / static_cast<double>(prediction_count(tr));

  Matrix dlogits(n, cfg.vocab);
  for (std::size_t s = 0; s < tr.sequences(); ++s) {
    for (std::size_t r = tr.offsets[s]; r + 1 < tr.offsets[s + 1]; ++r) {
      const Vector p = softmax(tr.logits.row(r));
      for (std::size_t v = 0; v < cfg.vocab; ++v) dlogits(r, v) = p[v] * inv_count;
      dlogits(r, static_cast<std::size_t>(tr.tokens[r + 1])) -= inv_count;
    }
  }
  gemm_tn(dlogits, tr.final_out, grad.unembed, true);
  Matrix dfinal;
  gemm(dlogits, w.unembed, dfinal);
  Matrix dresid;
  if (cfg.final_layernorm) {
    detail::layernorm_backward(dfinal, tr.lnf_hat, tr.lnf_rstd, w.lnf_gain, grad.lnf_gain, grad.lnf_bias, dresid);
  } else {
    dresid = std::move(dfinal);
  }

  const double bal_scale = cfg.n_layers > 0 ? lambda_bal / static_cast<double>(cfg.n_layers) : 0.0;
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));

  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const auto& lw = w.layers[li];
    auto& lg = grad.layers[li];
    const auto& ft = tr.ffn[li];
    const auto& at = tr.attn[li];

    // FFN / MoE
    Matrix dln2(n, cfg.d_model);
    if (cfg.arch == Arch::Dense) {
      detail::ffn_unit_backward(ft.ln_out, ft.pre, ft.act, dresid, lw.ffn, lg.ffn, cfg.nonlinearity, dln2);
    } else {
      const std::size_t ne = cfg.n_experts;
      Matrix dprobs(n, ne);
      std::vector<Matrix> dexp_out(ne);
      for (std::size_t e = 0; e < ne; ++e) dexp_out[e].resize(ft.expert_rows[e].size(), cfg.d_model);
      for (std::size_t r = 0; r < n; ++r) {
        const auto& routes = ft.routes[r];
        Vector dgate(routes.size());
        for (std::size_t i = 0; i < routes.size(); ++i) {
          const auto& rt = routes[i];
          dgate[i] = dot(dresid.row(r), ft.expert_out[rt.expert].row(rt.slot));
          axpy(rt.gate, dresid.row(r), dexp_out[rt.expert].row(rt.slot));
        }
        if (cfg.gate_renorm) {
          double total = 0.0, weighted = 0.0;
          for (std::size_t i = 0; i < routes.size(); ++i) {
            total += routes[i].prob;
            weighted += dgate[i] * routes[i].prob;
          }
          for (std::size_t i = 0; i < routes.size(); ++i)
            dprobs(r, routes[i].expert) += dgate[i] / total - weighted / (total * total);
        } else {
          for (std::size_t i = 0; i < routes.size(); ++i) dprobs(r, routes[i].expert) += dgate[i];
        }
      }
      if (bal_scale != 0.0) {
        const double target = 1.0 / static_cast<double>(ne);
        for (std::size_t e = 0; e < ne; ++e) {
          double p = 0.0;
          for (std::size_t r = 0; r < n; ++r) p += ft.router_probs(r, e);
          p /= static_cast<double>(n);
          const double g = bal_scale * 2.0 * (p - target) / static_cast<double>(ne) / static_cast<double>(n);
          for (std::size_t r = 0; r < n; ++r) dprobs(r, e) += g;
        }
      }
      Matrix dlogit(n, ne);
      for (std::size_t r = 0; r < n; ++r) {
        double inner = 0.0;
        for (std::size_t e = 0; e < ne; ++e) inner += dprobs(r, e) * ft.router_probs(r, e);
        for (std::size_t e = 0; e < ne; ++e) dlogit(r, e) = ft.router_probs(r, e) * (dprobs(r, e) - inner);
      }
      gemm_tn(dlogit, ft.ln_out, lg.router, true);
      gemm(dlogit, lw.router, dln2);
      for (std::size_t e = 0; e < ne; ++e) {
        const auto& rows = ft.expert_rows[e];
        if (rows.empty()) continue;
        Matrix in(rows.size(), cfg.d_model);
        for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(ft.ln_out.row(rows[i]).data(), cfg.d_model, in.row(i).data());
        Matrix din;
        detail::ffn_unit_backward(in, ft.expert_pre[e], ft.expert_act[e], dexp_out[e], lw.experts[e], lg.experts[e],
                                  cfg.nonlinearity, din);
        for (std::size_t i = 0; i < rows.size(); ++i) axpy(1.0, din.row(i), dln2.row(rows[i]));
      }
    }
    Matrix dx;
    detail::layernorm_backward(dln2, ft.ln_hat, ft.ln_rstd, lw.ln2_gain, lg.ln2_gain, lg.ln2_bias, dx);
    detail::add_into(dresid, dx);

    // Attention
    Matrix dln1(n, cfg.d_model);
    for (std::size_t j = 0; j < cfg.n_heads; ++j) {
      const auto& hw = lw.heads[j];
      auto& hg = lg.heads[j];
      gemm_tn(dresid, at.z[j], hg.wo, true);
      Matrix dz;
      gemm(dresid, hw.wo, dz);
      Matrix dq(n, cfg.d_head), dk(n, cfg.d_head), dv(n, cfg.d_head);
      for (std::size_t s = 0; s < tr.sequences(); ++s) {
        const std::size_t b = tr.offsets[s], t_len = tr.offsets[s + 1] - b;
        const Matrix& alpha = at.alpha[s][j];
        Vector dalpha(t_len);
        for (std::size_t i = 0; i < t_len; ++i) {
          double inner = 0.0;
          for (std::size_t p = 0; p <= i; ++p) {
            dalpha[p] = dot(dz.row(b + i), at.v[j].row(b + p));
            axpy(alpha(i, p), dz.row(b + i), dv.row(b + p));
            inner += dalpha[p] * alpha(i, p);
          }
          for (std::size_t p = 0; p <= i; ++p) {
            const double ds = alpha(i, p) * (dalpha[p] - inner) * scale;
            axpy(ds, at.k[j].row(b + p), dq.row(b + i));
            axpy(ds, at.q[j].row(b + i), dk.row(b + p));
          }
        }
      }
      gemm_tn(dq, at.ln_out, hg.wq, true);
      gemm_tn(dk, at.ln_out, hg.wk, true);
      gemm_tn(dv, at.ln_out, hg.wv, true);
      gemm(dq, hw.wq, dln1, true);
      gemm(dk, hw.wk, dln1, true);
      gemm(dv, hw.wv, dln1, true);
    }
    detail::layernorm_backward(dln1, at.ln_hat, at.ln_rstd, lw.ln1_gain, lg.ln1_gain, lg.ln1_bias, dx);
    detail::add_into(dresid, dx);
  }

  for (std::size_t s = 0; s < tr.sequences(); ++s) {
    for (std::size_t r = tr.offsets[s]; r < tr.offsets[s + 1]; ++r) {
      const auto tok = static_cast<std::size_t>(tr.tokens[r]);
      axpy(1.0, dresid.row(r), grad.tok_embed.row(tok));
      axpy(1.0, dresid.row(r), grad.pos_embed.row(r - tr.offsets[s]));
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_tensor;
  std::size_t probes = 0;
};

// Central differences (step 1e-5) on `probes_per_tensor` entries of every
// tensor (all entries when the tensor is smaller). Relative error is
// |a - n| / max(|a| + |n|, 1e-8).
inline GradCheckReport grad_check(const Checkpoint& ck, const std::vector<std::vector<int>>& seqs, double lambda_bal,
                                  std::size_t probes_per_tensor, std::uint64_t seed, double step = 1e-5) {
  ModelWeights grad = zero_tensors(ck.config);
  loss_and_grad(ck, seqs, lambda_bal, grad);
  Checkpoint probe = ck;
  GradCheckReport rep;
  Rng rng(seed);

  std::vector<std::span<double>> grad_tensors;
  for_each_tensor(ck.config, grad, [&](TensorView t) { grad_tensors.push_back(t.values); });
  std::size_t ti = 0;
  for_each_tensor(probe.config, probe.weights, [&](TensorView t) {
    const auto g = grad_tensors[ti++];
    std::vector<std::size_t> idx;
    if (t.values.size() <= probes_per_tensor) {
      for (std::size_t i = 0; i < t.values.size(); ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < probes_per_tensor; ++i) idx.push_back(rng.below(t.values.size()));
    }
    for (auto i : idx) {
      const double orig = t.values[i];
      t.values[i] = orig + step;
      const double up = batch_loss(probe, seqs, lambda_bal).total;
      t.values[i] = orig - step;
      const double down = batch_loss(probe, seqs, lambda_bal).total;
      t.values[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double abs_err = std::abs(numeric - g[i]);
      const double rel = abs_err / std::max(std::abs(numeric) + std::abs(g[i]), 1e-8);
      ++rep.probes;
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_tensor = t.name;
      }
    }
  });
  return rep;
}

// ---------------------------------------------------------------------------
// Optimiser state and resumable training

struct TrainState {
  std::size_t step = 0;
  ModelWeights weights;
  ModelWeights m;
  ModelWeights v;
};

// Sidecar "<ckpt>.state": magic "GLPS", u32 version, u64 step, the model
// config block, then weights, first and second Adam moments as binary64 in
// for_each_tensor order.
inline std::string encode_state(const ModelConfig& cfg, const TrainState& st) {
  ByteWriter w;
  w.bytes("GLPS");
  w.u32(1);
  w.u64(st.step);
  write_config_block(w, cfg);
  for (const ModelWeights* mw : {&st.weights, &st.m, &st.v}) {
    for_each_tensor(cfg, *mw, [&](ConstTensorView t) {
      for (double x : t.values) w.f64(x);
    });
  }
  return w.str();
}

inline TrainState decode_state(std::string_view bytes, const ModelConfig& expected_cfg, const std::string& what) {
  ByteReader r(bytes, what);
  if (r.bytes(4) != "GLPS") throw DataError(what + ": bad magic");
  if (r.u32() != 1) throw DataError(what + ": unsupported state version");
  TrainState st;
  st.step = r.u64();
  const ModelConfig cfg = read_config_block(r);
  if (!(cfg == expected_cfg)) throw DataError(what + ": model config differs from the requested one");
  st.weights = zero_weights(cfg);
  st.m = zero_weights(cfg);
  st.v = zero_weights(cfg);
  for (ModelWeights* mw : {&st.weights, &st.m, &st.v}) {
    for_each_tensor(cfg, *mw, [&](TensorView t) {
      for (double& x : t.values) x = r.f64();
    });
  }
  if (!r.at_end()) throw DataError(what + ": trailing bytes");
  return st;
}

inline double learning_rate(const TrainConfig& tc, std::size_t step) {
  if (tc.warmup_steps > 0 && step <= tc.warmup_steps) {
    return tc.lr * static_cast<double>(step) / static_cast<double>(tc.warmup_steps);
  }
  const std::size_t decay_steps = tc.steps > tc.warmup_steps ? tc.steps - tc.warmup_steps : 1;
  const double progress =
      std::min(1.0, static_cast<double>(step - std::min(step, tc.warmup_steps)) / static_cast<double>(decay_steps));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return tc.lr * (tc.min_lr_fraction + (1.0 - tc.min_lr_fraction) * cosine);
}

// The sentences of training step `step` (1-based): consecutive slices of an
// endless stream of per-epoch shuffles. Only depends on (seed, step), so a
// resumed run sees exactly the batches an uninterrupted run would.
inline std::vector<std::size_t> batch_indices(std::size_t corpus_size, std::size_t batch_size, std::uint64_t seed,
                                              std::size_t step) {
  std::vector<std::size_t> out;
  const Rng base(seed ^ 0x5eedda7aULL);
  std::size_t pos = (step - 1) * batch_size;
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> perm;
  for (std::size_t i = 0; i < batch_size; ++i, ++pos) {
    const std::size_t epoch = pos / corpus_size;
    if (epoch != cached_epoch) {
      perm.resize(corpus_size);
      for (std::size_t k = 0; k < corpus_size; ++k) perm[k] = k;
      Rng r = base.split(epoch);
      r.shuffle(perm);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % corpus_size]);
  }
  return out;
}

struct LossRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double balance = 0.0;
};

struct CheckpointEntry {
  std::size_t step = 0;
  std::string file;
  std::string hash;
};

struct CheckpointSeries {
  fs::path dir;
  ModelConfig config;
  TrainConfig train;
  std::vector<CheckpointEntry> checkpoints;
  std::vector<LossRecord> losses;

  fs::path path_of(const CheckpointEntry& e) const { return dir / e.file; }
};

inline std::string checkpoint_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_%08zu.glpi", step);
  return buf;
}

inline std::string config_hash(const ModelConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

inline std::string encode_loss_log(const std::vector<LossRecord>& log) {
  std::string s = "step\tloss\tbalance_loss\n";
  for (const auto& r : log) s += std::to_string(r.step) + "\t" + format_double(r.loss) + "\t" + format_double(r.balance) + "\n";
  return s;
}

inline std::vector<LossRecord> parse_loss_log(const std::string& text) {
  std::vector<LossRecord> out;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    LossRecord r;
    std::string a, b, c;
    std::getline(ls, a, '\t');
    std::getline(ls, b, '\t');
    std::getline(ls, c, '\t');
    r.step = std::stoull(a);
    r.loss = std::strtod(b.c_str(), nullptr);
    r.balance = std::strtod(c.c_str(), nullptr);
    out.push_back(r);
  }
  return out;
}

inline void write_series_manifest(const CheckpointSeries& s) {
  nlohmann::ordered_json j;
  j["model"] = to_json(s.config);
  j["config_hash"] = config_hash(s.config);
  j["train"] = to_json(s.train);
  j["seed"] = s.train.seed;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& c : s.checkpoints) arr.push_back({{"step", c.step}, {"file", c.file}, {"hash", c.hash}});
  j["checkpoints"] = arr;
  atomic_write(s.dir / "manifest.json", j.dump(2) + "\n");
}

inline CheckpointSeries load_series(const fs::path& dir) {
  const auto mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw DataError("no checkpoint manifest in " + dir.string());
  CheckpointSeries s;
  s.dir = dir;
  try {
    const auto j = nlohmann::json::parse(read_file(mpath));
    s.config = model_config_from_json(j.at("model"), ModelConfig{});
    s.train = train_config_from_json(j.at("train"), TrainConfig{});
    for (const auto& c : j.at("checkpoints")) {
      s.checkpoints.push_back({c.at("step").get<std::size_t>(), c.at("file").get<std::string>(), c.at("hash").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint manifest: " + std::string(e.what()));
  }
  for (std::size_t i = 1; i < s.checkpoints.size(); ++i) {
    if (s.checkpoints[i].step <= s.checkpoints[i - 1].step) throw DataError("checkpoint steps must strictly increase");
  }
  if (fs::exists(dir / "loss.tsv")) s.losses = parse_loss_log(read_file(dir / "loss.tsv"));
  return s;
}

// Loads a checkpoint of the series after checking its recorded hash.
inline Checkpoint load_series_checkpoint(const CheckpointSeries& s, const CheckpointEntry& e) {
  const auto path = s.path_of(e);
  if (!fs::exists(path)) throw DataError("missing checkpoint " + path.string());
  const std::string bytes = read_file(path);
  if (hex64(fnv1a64(bytes)) != e.hash) throw DataError("hash mismatch for " + path.string());
  Checkpoint ck = decode_checkpoint(bytes, path.string());
  if (!(ck.config == s.config)) throw DataError(path.string() + ": config differs from series manifest");
  if (ck.step != e.step) throw DataError(path.string() + ": step differs from series manifest");
  return ck;
}

struct TrainOptions {
  std::optional<fs::path> resume_state;  // a "<ckpt>.state" sidecar
  std::size_t log_every = 0;             // progress to stderr; 0 = quiet
  bool write_state = true;
  std::optional<std::size_t> stop_after;  // end early; the schedule still follows the full config
};

// Trains from scratch (or from a state sidecar) and writes the checkpoint
// series, one ".state" sidecar per checkpoint, loss.tsv and manifest.json to
// `out_dir`.
inline CheckpointSeries train(const ModelConfig& model_cfg, const TrainConfig& tc,
                              const std::vector<std::vector<int>>& corpus, const fs::path& out_dir,
                              const TrainOptions& opt = {}) {
  model_cfg.validate();
  tc.validate();
  if (corpus.empty()) throw DataError("train: empty corpus");
  for (const auto& s : corpus) validate_tokens(model_cfg, s);
  fs::create_directories(out_dir);

  CheckpointSeries series;
  series.dir = out_dir;
  series.config = model_cfg;
  series.train = tc;
  const auto schedule = tc.effective_schedule();

  TrainState st;
  if (opt.resume_state) {
    st = decode_state(read_file(*opt.resume_state), model_cfg, opt.resume_state->string());
    if (fs::exists(out_dir / "manifest.json")) {
      const auto prev = load_series(out_dir);
      for (const auto& c : prev.checkpoints)
        if (c.step <= st.step) series.checkpoints.push_back(c);
      for (const auto& r : prev.losses)
        if (r.step <= st.step) series.losses.push_back(r);
    }
  } else {
    st.weights = init_weights(model_cfg, tc.seed, tc.init_std);
    st.m = zero_tensors(model_cfg);
    st.v = zero_tensors(model_cfg);
  }

  auto emit = [&](std::size_t step) {
    Checkpoint ck{step, model_cfg, st.weights};
    const std::string bytes = encode_checkpoint(ck);
    const std::string name = checkpoint_name(step);
    atomic_write(out_dir / name, bytes);
    if (opt.write_state) atomic_write(out_dir / (name + ".state"), encode_state(model_cfg, st));
    series.checkpoints.push_back({step, name, hex64(fnv1a64(bytes))});
    atomic_write(out_dir / "loss.tsv", encode_loss_log(series.losses));
    write_series_manifest(series);
  };

  if (!opt.resume_state) emit(0);

  Checkpoint work{st.step, model_cfg, {}};
  const std::size_t last_step = opt.stop_after ? std::min(*opt.stop_after, tc.steps) : tc.steps;
  for (std::size_t step = st.step + 1; step <= last_step; ++step) {
    work.weights = st.weights;
    const auto idx = batch_indices(corpus.size(), tc.batch_size, tc.seed, step);
    std::vector<std::vector<int>> batch;
    for (auto i : idx) batch.push_back(corpus[i]);

    ModelWeights grad = zero_tensors(model_cfg);
    const LossParts loss = loss_and_grad(work, batch, tc.lambda_bal, grad);
    if (!std::isfinite(loss.total)) throw NumericError("non-finite loss at step " + std::to_string(step));
    series.losses.push_back({step, loss.ce, loss.balance});
    if (opt.log_every && step % opt.log_every == 0) {
      std::fprintf(stderr, "[%s] step %zu loss %.4f bal %.5f\n", to_string(model_cfg.arch).c_str(), step, loss.ce,
                   loss.balance);
    }

    double norm2 = 0.0;
    for_each_tensor(model_cfg, grad, [&](TensorView t) {
      for (double g : t.values) norm2 += g * g;
    });
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient at step " + std::to_string(step));
    const double clip = (tc.grad_clip > 0.0 && norm > tc.grad_clip) ? tc.grad_clip / norm : 1.0;

    const double lr = learning_rate(tc, step);
    const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(step));
    std::vector<std::span<double>> gs, ms, vs;
    for_each_tensor(model_cfg, grad, [&](TensorView t) { gs.push_back(t.values); });
    for_each_tensor(model_cfg, st.m, [&](TensorView t) { ms.push_back(t.values); });
    for_each_tensor(model_cfg, st.v, [&](TensorView t) { vs.push_back(t.values); });
    std::size_t ti = 0;
    for_each_tensor(model_cfg, st.weights, [&](TensorView t) {
      const bool decay = t.shape.size() == 2;
      auto g = gs[ti], m = ms[ti], v = vs[ti];
      ++ti;
      for (std::size_t i = 0; i < t.values.size(); ++i) {
        const double gi = g[i] * clip;
        m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * gi;
        v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * gi * gi;
        const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + tc.adam_eps);
        if (decay && tc.weight_decay > 0.0) t.values[i] -= lr * tc.weight_decay * t.values[i];
        t.values[i] -= lr * update;
      }
    });
    st.step = step;
    if (std::binary_search(schedule.begin(), schedule.end(), step)) emit(step);
  }
  if (series.checkpoints.empty() || series.checkpoints.back().step != st.step) {
    // Resumed past the last scheduled step or steps < first scheduled step.
    write_series_manifest(series);
    atomic_write(out_dir / "loss.tsv", encode_loss_log(series.losses));
  }
  return series;
}

}  // namespace glpi
