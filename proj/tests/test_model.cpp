#include <catch_amalgamated.hpp>

#include <cmath>

#include "glpi/model.hpp"
#include "glpi/selftest.hpp"

using namespace glpi;
using Catch::Approx;

namespace {

FfnWeights ffn_weights(std::size_t d, std::size_t inner, Rng& rng) {
  FfnWeights w{Matrix(inner, d), Matrix(d, inner)};
  for (double& x : w.w1.storage()) x = rng.normal();
  for (double& x : w.w2.storage()) x = rng.normal();
  return w;
}

ModelConfig moe_config(std::size_t d, std::size_t e, std::size_t k) {
  ModelConfig c;
  c.arch = Arch::Moe;
  c.n_layers = 1;
  c.d_model = d;
  c.n_heads = 1;
  c.d_head = d;
  c.ffn_dim = 0;
  c.n_experts = e;
  c.expert_dim = 3;
  c.top_k = k;
  c.vocab = 5;
  return c;
}

double max_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("expert_ffn examples") {
  SECTION("zero first layer") {
    Rng rng(1);
    auto w = ffn_weights(3, 4, rng);
    w.w1 = Matrix(4, 3);
    const auto r = expert_ffn(Vector{1, 2, 3}, w, Nonlinearity::SiLU);
    for (double m : r.m) CHECK(m == 0.0);  // silu(0) = 0
    for (double o : r.output) CHECK(o == 0.0);
    const auto rr = expert_ffn(Vector{1, 2, 3}, w, Nonlinearity::ReLU);
    for (double m : rr.m) CHECK(m == 0.0);
  }
  SECTION("1x1 relu") {
    FfnWeights w{Matrix(1, 1, Vector{1.0}), Matrix(1, 1, Vector{1.0})};
    const auto r = expert_ffn(Vector{2.0}, w, Nonlinearity::ReLU);
    CHECK(r.m == Vector{2.0});
    CHECK(r.output == Vector{2.0});
  }
  SECTION("random 2x2 against matrix products") {
    Rng rng(2);
    for (int t = 0; t < 20; ++t) {
      const auto w = ffn_weights(2, 2, rng);
      const Vector x{rng.normal(), rng.normal()};
      const auto r = expert_ffn(x, w, Nonlinearity::SiLU);
      for (std::size_t i = 0; i < 2; ++i) {
        double o = 0.0;
        for (std::size_t k = 0; k < 2; ++k) {
          const double u = w.w1(k, 0) * x[0] + w.w1(k, 1) * x[1];
          o += w.w2(i, k) * (u / (1.0 + std::exp(-u)));
        }
        CHECK(r.output[i] == Approx(o).margin(1e-12));
      }
    }
  }
  SECTION("shape mismatch") {
    Rng rng(3);
    const auto w = ffn_weights(3, 2, rng);
    CHECK_THROWS_AS(expert_ffn(Vector{1, 2}, w, Nonlinearity::SiLU), ShapeError);
  }
}

TEST_CASE("moe_layer_forward examples") {
  Rng rng(4);
  SECTION("equal router scores split evenly") {
    const auto cfg = moe_config(2, 2, 2);
    LayerWeights lw;
    lw.router = Matrix(2, 2);
    lw.experts = {ffn_weights(2, 3, rng), ffn_weights(2, 3, rng)};
    const Vector x{0.3, -0.7};
    const auto r = moe_layer_forward(x, lw, cfg);
    REQUIRE(r.routes.size() == 2);
    CHECK(r.routes[0].gate == 0.5);
    CHECK(r.routes[1].gate == 0.5);
    const auto f0 = expert_ffn(x, lw.experts[0], cfg.nonlinearity).output;
    const auto f1 = expert_ffn(x, lw.experts[1], cfg.nonlinearity).output;
    for (std::size_t i = 0; i < 2; ++i) CHECK(r.output[i] == Approx(0.5 * f0[i] + 0.5 * f1[i]).margin(1e-15));
  }
  SECTION("k=1 gives gate 1") {
    const auto cfg = moe_config(2, 4, 1);
    LayerWeights lw;
    lw.router = Matrix(4, 2);
    for (double& v : lw.router.storage()) v = rng.normal();
    for (int e = 0; e < 4; ++e) lw.experts.push_back(ffn_weights(2, 3, rng));
    const Vector x{1.0, 0.5};
    const auto r = moe_layer_forward(x, lw, cfg);
    REQUIRE(r.routes.size() == 1);
    CHECK(r.routes[0].gate == 1.0);
    const auto f = expert_ffn(x, lw.experts[r.routes[0].expert], cfg.nonlinearity).output;
    CHECK(max_diff(r.output, f) == 0.0);
  }
  SECTION("E=4, k=2 against direct evaluation") {
    const auto cfg = moe_config(3, 4, 2);
    for (int t = 0; t < 20; ++t) {
      LayerWeights lw;
      lw.router = Matrix(4, 3);
      for (double& v : lw.router.storage()) v = rng.normal();
      for (int e = 0; e < 4; ++e) lw.experts.push_back(ffn_weights(3, 3, rng));
      const Vector x{rng.normal(), rng.normal(), rng.normal()};
      const auto r = moe_layer_forward(x, lw, cfg);
      // softmax, top-2, renormalise by hand
      Vector s(4);
      double z = 0.0;
      for (std::size_t e = 0; e < 4; ++e) {
        s[e] = std::exp(lw.router(e, 0) * x[0] + lw.router(e, 1) * x[1] + lw.router(e, 2) * x[2]);
        z += s[e];
      }
      std::size_t a = 0;
      for (std::size_t e = 1; e < 4; ++e)
        if (s[e] > s[a]) a = e;
      std::size_t b = a == 0 ? 1 : 0;
      for (std::size_t e = 0; e < 4; ++e)
        if (e != a && s[e] > s[b]) b = e;
      const double ga = s[a] / (s[a] + s[b]), gb = s[b] / (s[a] + s[b]);
      const auto fa = expert_ffn(x, lw.experts[a], cfg.nonlinearity).output;
      const auto fb = expert_ffn(x, lw.experts[b], cfg.nonlinearity).output;
      for (std::size_t i = 0; i < 3; ++i) CHECK(r.output[i] == Approx(ga * fa[i] + gb * fb[i]).margin(1e-12));
      double gsum = 0.0;
      for (const auto& rt : r.routes) gsum += rt.gate;
      CHECK(gsum == Approx(1.0).margin(1e-9));
      CHECK(r.routes[0].expert == a);
      (void)z;
    }
  }
}

TEST_CASE("attention_forward examples") {
  Rng rng(5);
  ModelConfig cfg;
  cfg.d_model = 4;
  cfg.n_heads = 2;
  cfg.d_head = 2;
  cfg.n_layers = 1;
  cfg.vocab = 5;
  auto ck = random_checkpoint(cfg, rng);
  const auto& lw = ck.weights.layers[0];
  SECTION("single position") {
    Matrix h(1, 4, Vector{0.1, -0.4, 0.9, 0.2});
    const auto r = attention_forward(h, lw, cfg);
    Vector want(4, 0.0);
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(r.alpha[j](0, 0) == 1.0);
      const auto v = matvec(lw.heads[j].wv, h.row(0));
      axpy(1.0, matvec(lw.heads[j].wo, v), want);
    }
    CHECK(max_diff(r.out.row(0), want) < 1e-15);
  }
  SECTION("equal scores give uniform weights") {
    ModelConfig c1 = cfg;
    c1.n_heads = 1;
    c1.d_head = 4;
    auto ck1 = random_checkpoint(c1, rng);
    Matrix h(2, 4, Vector{1, 2, 3, 4, 1, 2, 3, 4});
    const auto r = attention_forward(h, ck1.weights.layers[0], c1);
    CHECK(r.alpha[0](1, 0) == Approx(0.5).margin(1e-15));
    CHECK(r.alpha[0](1, 1) == Approx(0.5).margin(1e-15));
  }
  SECTION("H=2, T=3 against the oracle") {
    for (int t = 0; t < 20; ++t) {
      std::vector<std::vector<double>> rows(3, std::vector<double>(4));
      for (auto& row : rows)
        for (double& x : row) x = rng.normal();
      // feed the LayerNorm output so both sides see identical inputs
      Matrix h(3, 4);
      for (std::size_t i = 0; i < 3; ++i) {
        const auto n = oracle::layer_norm(rows[i], lw.ln1_gain, lw.ln1_bias);
        std::copy(n.begin(), n.end(), h.row(i).begin());
      }
      const auto r = attention_forward(h, lw, cfg);
      const auto ref = oracle::attn_out(cfg, lw, rows);
      for (std::size_t i = 0; i < 3; ++i) CHECK(max_diff(r.out.row(i), ref[i]) < 1e-10);
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t i = 0; i < 3; ++i) {
          double s = 0.0;
          for (std::size_t p = 0; p < 3; ++p) {
            if (p > i) CHECK(r.alpha[j](i, p) == 0.0);
            s += r.alpha[j](i, p);
          }
          CHECK(s == Approx(1.0).margin(1e-9));
        }
    }
  }
}

TEST_CASE("model_forward matches the straight-line oracle") {
  Rng rng(6);
  for (Arch a : {Arch::Dense, Arch::Moe}) {
    for (int t = 0; t < 10; ++t) {
      auto cfg = random_tiny_config(rng, a);
      if (t == 0 && a == Arch::Dense) cfg.n_layers = 2;
      const auto ck = random_checkpoint(cfg, rng);
      const auto tokens = random_tokens(cfg, rng, 4);
      const auto tr = model_forward(tokens, ck);
      const auto ref = oracle::forward(ck, tokens, false);
      for (std::size_t i = 0; i < tokens.size(); ++i) CHECK(max_diff(tr.logits.row(i), ref[i]) < 1e-10);
      // recorded routing invariants
      if (a == Arch::Moe) {
        for (const auto& ft : tr.ffn)
          for (const auto& routes : ft.routes) {
            CHECK(routes.size() == cfg.top_k);
            if (cfg.gate_renorm) {
              double g = 0.0;
              for (const auto& r : routes) g += r.gate;
              CHECK(g == Approx(1.0).margin(1e-9));
            }
          }
      }
    }
  }
}

TEST_CASE("zero-layer model is unembed of normed embedding") {
  ModelConfig cfg;
  cfg.n_layers = 0;
  cfg.d_model = 4;
  cfg.n_heads = 1;
  cfg.d_head = 4;
  cfg.vocab = 6;
  Rng rng(7);
  const auto ck = random_checkpoint(cfg, rng);
  const std::vector<int> tokens{1, 4, 2};
  const auto tr = model_forward(tokens, ck);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    Vector e(4);
    for (std::size_t c = 0; c < 4; ++c) e[c] = ck.weights.tok_embed(tokens[i], c) + ck.weights.pos_embed(i, c);
    CHECK(max_diff(tr.logits.row(i), unembed_logits(e, ck)) == 0.0);
  }
}

TEST_CASE("batched forward equals per-sequence forward") {
  Rng rng(8);
  for (Arch a : {Arch::Dense, Arch::Moe}) {
    const auto cfg = random_tiny_config(rng, a);
    const auto ck = random_checkpoint(cfg, rng);
    const std::vector<std::vector<int>> seqs{random_tokens(cfg, rng, 3), random_tokens(cfg, rng, 5),
                                             random_tokens(cfg, rng, 1)};
    const auto batched = forward_batch(ck, seqs);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
      const auto single = model_forward(seqs[s], ck);
      for (std::size_t i = 0; i < seqs[s].size(); ++i)
        CHECK(max_diff(batched.logits.row(batched.offsets[s] + i), single.logits.row(i)) == 0.0);
    }
  }
}

TEST_CASE("forward is deterministic and validates tokens") {
  Rng rng(9);
  const auto cfg = random_tiny_config(rng, Arch::Moe);
  const auto ck = random_checkpoint(cfg, rng);
  const auto tokens = random_tokens(cfg, rng, 6);
  const auto a = model_forward(tokens, ck), b = model_forward(tokens, ck);
  CHECK(a.logits.storage() == b.logits.storage());
  CHECK_THROWS_AS(model_forward({static_cast<int>(cfg.vocab)}, ck), DataError);
  CHECK_THROWS_AS(model_forward({-1}, ck), DataError);
  CHECK_THROWS_AS(model_forward({}, ck), DataError);
  CHECK_THROWS_AS(model_forward(std::vector<int>(cfg.max_seq + 1, 0), ck), DataError);
}

TEST_CASE("unembed_logprob examples") {
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
  CHECK(unembed_logprob(Vector{0, 0}, 0, ck) == Approx(std::log(0.5)).margin(1e-15));
  CHECK(unembed_logprob(Vector{0, 0}, 0, ck) == Approx(-0.69315).margin(1e-5));
  CHECK(unembed_logprob(Vector{1, 0}, 0, ck) == Approx(std::log(e / (e + 1))).margin(1e-15));
  CHECK(unembed_logprob(Vector{1, 0}, 0, ck) == Approx(-0.31326).margin(1e-5));
  CHECK_THROWS_AS(unembed_logprob(Vector{1, 0}, 2, ck), DataError);
  Rng rng(10);
  for (int t = 0; t < 10; ++t) {
    const Vector r{rng.normal(), rng.normal()};
    const Vector lp{unembed_logprob(r, 0, ck), unembed_logprob(r, 1, ck)};
    CHECK(logsumexp(lp) == Approx(0.0).margin(1e-9));
    CHECK(lp[0] <= 0.0);
  }
}

TEST_CASE("config validation") {
  auto c = ModelConfig::default_dense(50);
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), DataError);
  auto m = ModelConfig::default_moe(50);
  CHECK_NOTHROW(m.validate());
  m.top_k = 9;
  CHECK_THROWS_AS(m.validate(), DataError);
  m.top_k = 2;
  m.ffn_dim = 4;
  CHECK_THROWS_AS(m.validate(), DataError);
}
