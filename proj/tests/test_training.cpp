#include <catch_amalgamated.hpp>

#include "glpi/selftest.hpp"
#include "glpi/training.hpp"
#include "helpers.hpp"

using namespace glpi;

namespace {

std::vector<std::vector<int>> random_corpus(const ModelConfig& cfg, Rng& rng, std::size_t n) {
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_tokens(cfg, rng, 2 + rng.below(cfg.max_seq - 1)));
  return out;
}

ModelConfig small(Arch a) {
  ModelConfig c;
  c.arch = a;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_head = 4;
  c.vocab = 12;
  c.max_seq = 6;
  if (a == Arch::Dense) {
    c.ffn_dim = 16;
  } else {
    c.ffn_dim = 0;
    c.n_experts = 4;
    c.expert_dim = 4;
    c.top_k = 2;
  }
  return c;
}

TrainConfig quick(std::size_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 4;
  t.warmup_steps = 5;
  t.seed = 3;
  return t;
}

}  // namespace

TEST_CASE("analytic gradients match finite differences") {
  for (Arch a : {Arch::Dense, Arch::Moe}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      Rng rng(seed);
      auto cfg = random_tiny_config(rng, a);
      cfg.max_seq = 6;
      const auto ck = random_checkpoint(cfg, rng, 0.4);
      const auto seqs = random_corpus(cfg, rng, 3);
      const auto rep = grad_check(ck, seqs, a == Arch::Moe ? 0.1 : 0.0, 6, seed);
      INFO(to_string(a) << " seed " << seed << " worst " << rep.worst_tensor);
      CHECK(rep.max_rel_error < 1e-4);
      CHECK(rep.probes > 0);
    }
  }
}

TEST_CASE("zero-weight model gradients") {
  const auto cfg = small(Arch::Dense);
  const Checkpoint ck{0, cfg, zero_weights(cfg)};
  Rng rng(4);
  const auto seqs = random_corpus(cfg, rng, 2);
  const auto rep = grad_check(ck, seqs, 0.0, 4, 4);
  CHECK(rep.max_abs_error < 1e-6);
}

TEST_CASE("balance penalty is zero for uniform routing") {
  Matrix probs(3, 4);
  for (double& p : probs.storage()) p = 0.25;
  CHECK(balance_penalty(probs) == 0.0);
  Matrix skew(2, 2, Vector{1, 0, 1, 0});
  CHECK(balance_penalty(skew) > 0.0);
}

TEST_CASE("learning rate schedule") {
  TrainConfig t;
  t.steps = 1000;
  t.warmup_steps = 100;
  CHECK(learning_rate(t, 50) == Catch::Approx(t.lr * 0.5));
  CHECK(learning_rate(t, 100) == Catch::Approx(t.lr));
  CHECK(learning_rate(t, 1000) == Catch::Approx(t.lr * t.min_lr_fraction));
  for (std::size_t s = 101; s < 1000; ++s) CHECK(learning_rate(t, s + 1) <= learning_rate(t, s));
}

TEST_CASE("checkpoint schedule") {
  TrainConfig t;
  t.steps = 2000;
  const auto s = t.effective_schedule();
  CHECK(s.size() == 21);
  CHECK(s.front() == 0);
  CHECK(s[1] == 100);
  CHECK(s.back() == 2000);
  t.steps = 0;
  CHECK(t.effective_schedule() == std::vector<std::size_t>{0});
  t.steps = 10;
  t.schedule = {5, 3};
  CHECK_THROWS_AS(t.validate(), DataError);
}

TEST_CASE("batch selection depends only on seed and step") {
  const auto a = batch_indices(10, 4, 1, 3), b = batch_indices(10, 4, 1, 3);
  CHECK(a == b);
  // every epoch is a permutation
  std::vector<std::size_t> seen;
  for (std::size_t step = 1; step <= 5; ++step) {
    const auto x = batch_indices(10, 2, 1, step);
    seen.insert(seen.end(), x.begin(), x.end());
  }
  std::sort(seen.begin(), seen.end());
  for (std::size_t i = 0; i < 10; ++i) CHECK(seen[i] == i);
}

TEST_CASE("steps = 0 writes only the initial checkpoint") {
  testing::TempDir dir("train");
  const auto cfg = small(Arch::Dense);
  Rng rng(5);
  const auto series = train(cfg, quick(0), random_corpus(cfg, rng, 8), dir.path());
  REQUIRE(series.checkpoints.size() == 1);
  CHECK(series.checkpoints[0].step == 0);
  const auto loaded = load_series(dir.path());
  CHECK(loaded.checkpoints.size() == 1);
  CHECK(load_series_checkpoint(loaded, loaded.checkpoints[0]).step == 0);
}

TEST_CASE("training is deterministic and reduces the loss") {
  testing::TempDir a("train"), b("train");
  for (Arch arch : {Arch::Dense, Arch::Moe}) {
    const auto cfg = small(arch);
    Rng rng(6);
    const auto corpus = random_corpus(cfg, rng, 6);
    const auto tc = quick(60);
    const auto sa = train(cfg, tc, corpus, a.path() / to_string(arch));
    const auto sb = train(cfg, tc, corpus, b.path() / to_string(arch));
    REQUIRE(sa.checkpoints.size() == sb.checkpoints.size());
    for (std::size_t i = 0; i < sa.checkpoints.size(); ++i) {
      CHECK(read_file(sa.path_of(sa.checkpoints[i])) == read_file(sb.path_of(sb.checkpoints[i])));
    }
    Checkpoint first = load_series_checkpoint(sa, sa.checkpoints.front());
    Checkpoint last = load_series_checkpoint(sa, sa.checkpoints.back());
    CHECK(batch_loss(last, corpus, 0.0).ce < batch_loss(first, corpus, 0.0).ce);
  }
}

TEST_CASE("resume from a state sidecar is bitwise identical") {
  testing::TempDir full("train"), part("train");
  for (Arch arch : {Arch::Dense, Arch::Moe}) {
    const auto cfg = small(arch);
    Rng rng(7);
    const auto corpus = random_corpus(cfg, rng, 9);
    auto tc = quick(40);
    tc.schedule = {10, 20, 30, 40};
    const auto ref = train(cfg, tc, corpus, full.path() / to_string(arch));

    const auto dir = part.path() / to_string(arch);
    TrainOptions stop;
    stop.stop_after = 20;
    train(cfg, tc, corpus, dir, stop);
    TrainOptions opt;
    opt.resume_state = dir / (checkpoint_name(20) + ".state");
    const auto resumed = train(cfg, tc, corpus, dir, opt);
    REQUIRE(resumed.checkpoints.size() == ref.checkpoints.size());
    for (std::size_t i = 0; i < ref.checkpoints.size(); ++i) {
      CHECK(resumed.checkpoints[i].hash == ref.checkpoints[i].hash);
      CHECK(read_file(resumed.path_of(resumed.checkpoints[i])) == read_file(ref.path_of(ref.checkpoints[i])));
    }
    CHECK(read_file(dir / "loss.tsv") == read_file(full.path() / to_string(arch) / "loss.tsv"));
  }
}

TEST_CASE("resume rejects a mismatched config") {
  testing::TempDir dir("train");
  const auto cfg = small(Arch::Dense);
  Rng rng(8);
  const auto corpus = random_corpus(cfg, rng, 4);
  train(cfg, quick(5), corpus, dir.path());
  auto other = cfg;
  other.ffn_dim = 8;
  TrainOptions opt;
  opt.resume_state = dir.path() / (checkpoint_name(5) + ".state");
  CHECK_THROWS_AS(train(other, quick(10), corpus, dir.path() / "x", opt), DataError);
}

TEST_CASE("config json round trip") {
  const auto m = ModelConfig::default_moe(77);
  CHECK(model_config_from_json(nlohmann::json::parse(to_json(m).dump()), ModelConfig{}) == m);
  auto t = quick(123);
  t.lambda_bal = 0.5;
  const auto back = train_config_from_json(nlohmann::json::parse(to_json(t).dump()), TrainConfig{});
  CHECK(back.lambda_bal == 0.5);
  CHECK(back.steps == 123);
}
