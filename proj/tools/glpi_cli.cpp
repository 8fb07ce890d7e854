// glpi: command-line driver for the attribution experiment.
//
//   glpi gen-data  --out exp --seed 7
//   glpi train     --out exp --arch dense [--config cfg.json] [--steps N]
//   glpi attribute --out exp --arch dense [--propagate]
//   glpi stability --out exp --arch dense [--fraction 0.01]
//   glpi ablate    --out exp --arch dense [--top-heads 10]
//   glpi report    --out exp
//   glpi selftest
//
// Exit codes: 0 ok, 1 usage error, 2 data/validation error, 3 numeric failure.

#include <cstdio>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "glpi/pipeline.hpp"
#include "glpi/selftest.hpp"

namespace {

using namespace glpi;

struct Flags {
  std::string out = "experiment";
  std::string arch = "dense";
  std::string config;
  std::string ckpts;
  std::string data;
  std::string profile = "sum";
  double fraction = 0.01;
  std::size_t top_heads = 10;
  std::size_t entities = 20;
  std::uint64_t seed = 0;
  std::optional<std::size_t> steps;
  std::string resume;
  bool propagate = false;
  bool include_init = false;
  bool check_decomposition = false;
  bool quiet = false;
};

fs::path data_path(const Flags& f, const ExperimentLayout& lay) { return f.data.empty() ? lay.data_file() : fs::path(f.data); }
fs::path ckpt_path(const Flags& f, const ExperimentLayout& lay, Arch a) {
  return f.ckpts.empty() ? lay.ckpt_dir(a) : fs::path(f.ckpts);
}

Arch arch_of(const Flags& f) { return parse_arch(f.arch); }

StabilityOptions stability_options(const Flags& f) {
  if (!(f.fraction > 0.0 && f.fraction <= 1.0)) throw UsageError("--fraction must be in (0, 1]");
  StabilityOptions o;
  o.fraction = f.fraction;
  return o;
}

int cmd_gen_data(const Flags& f) {
  ExperimentLayout lay{f.out};
  SynthSpec spec;
  if (!f.config.empty()) spec = SynthSpec::from_json(read_file(f.config));
  spec.seed = f.seed;
  if (f.config.empty()) spec.entities_per_relation = f.entities;
  gen_data(lay, spec);
  std::printf("%s\n", lay.data_file().string().c_str());
  return 0;
}

int cmd_train(const Flags& f) {
  ExperimentLayout lay{f.out};
  const Arch a = arch_of(f);
  const auto data_file = data_path(f, lay);
  const auto data = prepare_data(data_file);
  RunConfig rc = resolve_config(a, data.tokenizer.size(), f.config.empty() ? std::nullopt : std::optional<fs::path>(f.config));
  rc.train.seed = f.seed;
  if (f.steps) {
    rc.train.steps = *f.steps;
    rc.train.schedule.clear();
  }
  rc.train.validate();
  TrainOptions opt;
  opt.log_every = f.quiet ? 0 : 100;
  if (!f.resume.empty()) opt.resume_state = fs::path(f.resume);
  const auto series = run_train(lay, a, data_file, rc, ckpt_path(f, lay, a), opt);
  std::printf("%zu checkpoints in %s\n", series.checkpoints.size(), series.dir.string().c_str());
  return 0;
}

int cmd_attribute(const Flags& f) {
  ExperimentLayout lay{f.out};
  const Arch a = arch_of(f);
  AttributionOptions opt;
  opt.mode = f.propagate ? ScoreMode::Propagate : ScoreMode::Direct;
  opt.profile = parse_profile_mode(f.profile);
  opt.check_decomposition = f.check_decomposition;
  const auto tables = run_attribute(lay, a, data_path(f, lay), ckpt_path(f, lay, a), opt, !f.quiet);
  std::printf("%zu importance tables in %s\n", tables.size(), lay.attribution_dir(a).string().c_str());
  return 0;
}

int cmd_stability(const Flags& f) {
  ExperimentLayout lay{f.out};
  const Arch a = arch_of(f);
  const auto st = run_stability(lay, a, ckpt_path(f, lay, a), stability_options(f), f.include_init);
  std::printf("J_stab FFN %.4f ATTN %.4f (random %.4f)\n", st.ffn.j_stab, st.attn.j_stab, st.random_baseline);
  return 0;
}

int cmd_ablate(const Flags& f) {
  ExperimentLayout lay{f.out};
  const Arch a = arch_of(f);
  stability_options(f);
  if (f.top_heads < 1) throw UsageError("--top-heads must be >= 1");
  const auto ab = run_ablation(lay, a, data_path(f, lay), ckpt_path(f, lay, a), f.top_heads, f.fraction, f.include_init);
  for (const auto& [name, v] : ab.mean_drop) {
    if (v)
      std::printf("%s\t%.2f%%\n", name.c_str(), *v);
    else
      std::printf("%s\tNA\n", name.c_str());
  }
  return 0;
}

int cmd_report(const Flags& f) {
  ExperimentLayout lay{f.out};
  run_report(lay);
  std::fputs(read_file(lay.root / "summary.txt").c_str(), stdout);
  return 0;
}

int cmd_selftest(const Flags& f) {
  const auto results = run_selftest(f.seed);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%s %s: %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    ok = ok && r.pass;
  }
  return ok ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gated-LPI neuron attribution and stability analysis"};
  app.require_subcommand(1);
  Flags f;

  auto add_out = [&](CLI::App* s) { s->add_option("--out", f.out, "Experiment directory")->capture_default_str(); };
  auto add_arch = [&](CLI::App* s) {
    s->add_option("--arch", f.arch, "Architecture: dense or moe")->capture_default_str();
    s->add_option("--ckpts", f.ckpts, "Checkpoint directory (default <out>/<arch>/ckpts)");
  };
  auto add_data = [&](CLI::App* s) {
    s->add_option("--data", f.data, "Relation JSONL file (default <out>/data/facts.jsonl)");
  };
  auto add_quiet = [&](CLI::App* s) { s->add_flag("--quiet", f.quiet, "No progress output"); };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic relational facts");
  add_out(gen);
  gen->add_option("--seed", f.seed, "Generator seed")->capture_default_str();
  gen->add_option("--entities", f.entities, "Subjects per relation")->capture_default_str();
  gen->add_option("--config", f.config, "Generator spec JSON (relations, entities_per_relation)");

  auto* tr = app.add_subcommand("train", "Train one architecture and write its checkpoint series");
  add_out(tr);
  add_arch(tr);
  add_data(tr);
  add_quiet(tr);
  tr->add_option("--config", f.config, "JSON with \"model\" and/or \"train\" overrides");
  tr->add_option("--seed", f.seed, "Training seed")->capture_default_str();
  tr->add_option("--steps", f.steps, "Override the number of training steps");
  tr->add_option("--resume", f.resume, "Resume from a <checkpoint>.state sidecar");

  auto* at = app.add_subcommand("attribute", "Score every neuron at every checkpoint");
  add_out(at);
  add_arch(at);
  add_data(at);
  add_quiet(at);
  at->add_flag("--propagate", f.propagate, "Re-run downstream layers instead of the direct effect");
  at->add_option("--profile", f.profile, "Layer profile: sum, mean or abs_mean")->capture_default_str();
  at->add_flag("--check-decomposition", f.check_decomposition, "Verify neuron outputs sum to layer outputs");

  auto* st = app.add_subcommand("stability", "Neuron- and layer-level stability metrics");
  add_out(st);
  add_arch(st);
  st->add_option("--fraction", f.fraction, "Top-set fraction")->capture_default_str();
  st->add_flag("--include-init", f.include_init, "Include the step-0 checkpoint");

  auto* ab = app.add_subcommand("ablate", "Mask top heads and FFN neurons and measure the HIT@10 drop");
  add_out(ab);
  add_arch(ab);
  add_data(ab);
  ab->add_option("--fraction", f.fraction, "FFN top-set fraction")->capture_default_str();
  ab->add_option("--top-heads", f.top_heads, "Heads in the multi-head mask")->capture_default_str();
  ab->add_flag("--include-init", f.include_init, "Include the step-0 checkpoint");

  auto* rp = app.add_subcommand("report", "Verify artifact hashes and write summary.json / summary.txt");
  add_out(rp);

  auto* sf = app.add_subcommand("selftest", "Compare the library against brute-force oracles");
  sf->add_option("--seed", f.seed, "Seed for random instances")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }

  try {
    if (*gen) return cmd_gen_data(f);
    if (*tr) return cmd_train(f);
    if (*at) return cmd_attribute(f);
    if (*st) return cmd_stability(f);
    if (*ab) return cmd_ablate(f);
    if (*rp) return cmd_report(f);
    if (*sf) return cmd_selftest(f);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
