#include <catch_amalgamated.hpp>

#include "glpi/pipeline.hpp"
#include "helpers.hpp"
#include "tiny.hpp"

using namespace glpi;

namespace {

PipelineConfig tiny_pipeline(const fs::path& cfg_file) {
  PipelineConfig pc;
  pc.data.relations = {"country_capital_city", "country_language", "fruit_inside_color"};
  pc.data.entities_per_relation = 6;
  pc.data.seed = 3;
  pc.config_file = cfg_file;
  pc.top_heads = 2;
  pc.stability.fraction = 0.05;
  return pc;
}

}  // namespace

TEST_CASE("gen-data is deterministic") {
  testing::TempDir a("gen_a"), b("gen_b");
  SynthSpec spec;
  spec.seed = 7;
  gen_data(ExperimentLayout{a.path()}, spec);
  gen_data(ExperimentLayout{b.path()}, spec);
  CHECK(file_hash(a.path() / "data/facts.jsonl") == file_hash(b.path() / "data/facts.jsonl"));
  gen_data(ExperimentLayout{a.path()}, spec);
  CHECK(file_hash(a.path() / "data/facts.jsonl") == file_hash(b.path() / "data/facts.jsonl"));
  spec.seed = 8;
  gen_data(ExperimentLayout{b.path()}, spec);
  CHECK(file_hash(a.path() / "data/facts.jsonl") != file_hash(b.path() / "data/facts.jsonl"));
}

TEST_CASE("config resolution") {
  testing::TempDir dir("cfg");
  atomic_write(dir.path() / "c.json", kTinyConfig);
  const auto d = resolve_config(Arch::Dense, 50, dir.path() / "c.json");
  CHECK(d.model.d_model == 16);
  CHECK(d.model.ffn_dim == 32);
  CHECK(d.model.vocab == 50);
  CHECK(d.train.steps == 60);
  const auto m = resolve_config(Arch::Moe, 50, dir.path() / "c.json");
  CHECK(m.model.n_experts == 4);
  CHECK(m.model.ffn_dim == 0);
  const auto def = resolve_config(Arch::Moe, 50, std::nullopt);
  CHECK(def.model == ModelConfig::default_moe(50));
  atomic_write(dir.path() / "bad.json", "{\"model\": {\"n_heads\": 3}}");
  CHECK_THROWS_AS(resolve_config(Arch::Dense, 50, dir.path() / "bad.json"), DataError);
  atomic_write(dir.path() / "broken.json", "{");
  CHECK_THROWS_AS(resolve_config(Arch::Dense, 50, dir.path() / "broken.json"), DataError);
}

TEST_CASE("stability needs two checkpoints") {
  testing::TempDir dir("one");
  ExperimentLayout lay{dir.path()};
  SynthSpec spec;
  spec.relations = {"country_capital_city"};
  spec.entities_per_relation = 4;
  gen_data(lay, spec);
  atomic_write(dir.path() / "c.json", kTinyConfig);
  auto rc = resolve_config(Arch::Dense, prepare_data(lay.data_file()).tokenizer.size(), dir.path() / "c.json");
  rc.train.steps = 3;
  rc.train.schedule = {3};
  run_train(lay, Arch::Dense, lay.data_file(), rc, lay.ckpt_dir(Arch::Dense));
  run_attribute(lay, Arch::Dense, lay.data_file(), lay.ckpt_dir(Arch::Dense), {});
  CHECK_THROWS_WITH(run_stability(lay, Arch::Dense, lay.ckpt_dir(Arch::Dense), {}), "need ≥ 2 checkpoints");
  // with the initial checkpoint there are two
  CHECK_NOTHROW(run_stability(lay, Arch::Dense, lay.ckpt_dir(Arch::Dense), {}, true));
}

TEST_CASE("end-to-end pipeline on a tiny model") {
  testing::TempDir dir("e2e");
  atomic_write(dir.path() / "c.json", kTinyConfig);
  const auto root = dir.path() / "exp";
  const auto res = run_pipeline(root, tiny_pipeline(dir.path() / "c.json"));
  for (const char* a : {"dense", "moe"}) {
    const auto& s = res.summary["models"][a];
    INFO(a);
    for (const char* scope : {"ffn", "attn"}) {
      CHECK(s[scope].contains("j_stab"));
      CHECK(s[scope].contains("mean_r_t"));
      CHECK(s[scope].contains("rho_avg"));
      CHECK(s[scope].contains("sigma_rel"));
    }
    for (const char* m : {"top1_head", "top2_heads", "top_ffn"}) CHECK(s["ablation"]["mean_drop_pct"].contains(m));
  }
  for (Arch a : {Arch::Dense, Arch::Moe}) {
    const auto& st = res.stability.at(a);
    CHECK(st.ffn.j_stab >= 0.0);
    CHECK(st.ffn.j_stab <= 1.0);
    CHECK(st.ffn.jaccard.size() == 19);  // 20 checkpoints after step 0
  }
  CHECK(fs::exists(root / "summary.txt"));
  CHECK(fs::exists(root / "dense/stability/jaccard_ffn.tsv"));
  CHECK(fs::exists(root / "moe/ablation/ablation.tsv"));
  ExperimentLayout lay{root};
  CHECK_NOTHROW(run_report(lay));

  SECTION("report detects a modified artifact") {
    const auto f = root / "dense/attribution" / importance_name(60);
    auto text = read_file(f);
    text.back() = text.back() == '\n' ? ' ' : '\n';
    atomic_write(f, text);
    CHECK_THROWS_WITH(run_report(lay), Catch::Matchers::ContainsSubstring("hash mismatch"));
  }
  SECTION("report detects a missing artifact") {
    fs::remove(root / "moe/stability/report.json");
    CHECK_THROWS_WITH(run_report(lay), Catch::Matchers::ContainsSubstring("artifact missing"));
  }
}
