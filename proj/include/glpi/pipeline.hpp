#pragma once

// End-to-end experiment orchestration shared by the CLI and the acceptance
// suite.
//
// Experiment directory layout:
//   <root>/manifest.json                 experiment manifest (artifact hashes)
//   <root>/data/facts.jsonl              dataset
//   <root>/data/synth_spec.json          generator spec (synthetic data only)
//   <root>/data/vocab.txt                tokenizer vocabulary, one word per line
//   <root>/<arch>/ckpts/                 checkpoint series (+ loss.tsv, manifest.json)
//   <root>/<arch>/attribution/           importance_<step>.tsv, profile_<step>.tsv
//   <root>/<arch>/stability/             report.json + plot-data .tsv files
//   <root>/<arch>/ablation/              ablation.tsv, ablation_summary.json
//   <root>/summary.json, summary.txt     cross-architecture summary

#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "glpi/attribution.hpp"
#include "glpi/checkpoint.hpp"
#include "glpi/dataset.hpp"
#include "glpi/intervention.hpp"
#include "glpi/metrics.hpp"
#include "glpi/training.hpp"
#include "json.hpp"

namespace glpi {

inline constexpr const char* kToolVersion = "glpi 1.0.0";

using ojson = nlohmann::ordered_json;

inline ojson opt_json(const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); }

struct ExperimentLayout {
  fs::path root;
  fs::path data_dir() const { return root / "data"; }
  fs::path data_file() const { return data_dir() / "facts.jsonl"; }
  fs::path arch_dir(Arch a) const { return root / to_string(a); }
  fs::path ckpt_dir(Arch a) const { return arch_dir(a) / "ckpts"; }
  fs::path attribution_dir(Arch a) const { return arch_dir(a) / "attribution"; }
  fs::path stability_dir(Arch a) const { return arch_dir(a) / "stability"; }
  fs::path ablation_dir(Arch a) const { return arch_dir(a) / "ablation"; }
  fs::path manifest() const { return root / "manifest.json"; }
};

// ---------------------------------------------------------------------------
// Experiment manifest: every produced file with its content hash.

class ExperimentManifest {
 public:
  explicit ExperimentManifest(fs::path root) : root_(std::move(root)) {
    const auto p = root_ / "manifest.json";
    if (fs::exists(p)) {
      try {
        doc_ = ojson::parse(read_file(p));
      } catch (const nlohmann::json::exception& e) {
        throw DataError("experiment manifest: " + std::string(e.what()));
      }
    }
    doc_["tool_version"] = kToolVersion;
    if (!doc_.contains("artifacts")) doc_["artifacts"] = ojson::object();
  }

  ojson& doc() { return doc_; }

  void record(const fs::path& file) {
    doc_["artifacts"][fs::relative(file, root_).generic_string()] = file_hash(file);
  }
  void record_dir(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() != ".tmp") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) record(f);
  }

  // Throws DataError naming the first missing or changed artifact.
  void verify() const {
    for (const auto& [rel, hash] : doc_["artifacts"].items()) {
      const auto p = root_ / rel;
      if (!fs::exists(p)) throw DataError("artifact missing: " + rel);
      if (file_hash(p) != hash.get<std::string>()) throw DataError("hash mismatch: " + rel);
    }
  }

  void save() {
    // Keys in byte order so the file does not depend on command order.
    std::map<std::string, ojson> items, art;
    for (const auto& [k, v] : doc_["artifacts"].items()) art[k] = v;
    for (const auto& [k, v] : doc_.items()) items[k] = v;
    items["artifacts"] = ojson(art);
    ojson out = ojson::object();
    for (const auto& [k, v] : items) out[k] = v;
    atomic_write(root_ / "manifest.json", out.dump(2) + "\n");
  }

 private:
  fs::path root_;
  ojson doc_ = ojson::object();
};

// ---------------------------------------------------------------------------
// Data

struct PreparedData {
  std::vector<RelationExample> examples;
  Tokenizer tokenizer;
  std::vector<std::vector<int>> corpus;
  std::vector<EvalExample> eval;
  std::vector<AttributionExample> attribution;
};

inline PreparedData prepare_data(const fs::path& data_file) {
  PreparedData d;
  d.examples = load_relations(data_file);
  if (d.examples.empty()) throw DataError("dataset " + data_file.string() + " has no examples");
  d.tokenizer = build_tokenizer(d.examples);
  d.corpus = encode_corpus(d.examples, d.tokenizer);
  for (const auto& ex : d.examples) {
    const auto r = render_prompt(ex, d.tokenizer);
    d.eval.push_back({r.prompt, static_cast<std::size_t>(r.target), ex.relation});
    d.attribution.push_back({r.prompt, static_cast<std::size_t>(r.target)});
  }
  return d;
}

inline void gen_data(const ExperimentLayout& lay, const SynthSpec& spec) {
  const auto examples = synth_facts(spec);
  const auto tok = build_tokenizer(examples);
  save_relations(lay.data_file(), examples);
  atomic_write(lay.data_dir() / "synth_spec.json", spec.to_json());
  atomic_write(lay.data_dir() / "vocab.txt", tok.serialize());
  ExperimentManifest m(lay.root);
  m.doc()["dataset"] = {{"file", "data/facts.jsonl"},
                        {"hash", file_hash(lay.data_file())},
                        {"spec", ojson::parse(spec.to_json())},
                        {"examples", examples.size()},
                        {"vocab", tok.size()}};
  m.record(lay.data_file());
  m.record(lay.data_dir() / "synth_spec.json");
  m.record(lay.data_dir() / "vocab.txt");
  m.save();
}

// ---------------------------------------------------------------------------
// Configs

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

// Arch defaults, then overrides from an optional JSON file of the form
// {"model": {...}, "train": {...}} (or {"dense": {...}, "moe": {...}} with
// per-arch sections of that shape).
inline RunConfig resolve_config(Arch arch, std::size_t vocab, const std::optional<fs::path>& config_file) {
  RunConfig rc;
  rc.model = arch == Arch::Dense ? ModelConfig::default_dense(vocab) : ModelConfig::default_moe(vocab);
  if (config_file) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_file(*config_file));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("config file: " + std::string(e.what()));
    }
    auto apply = [&](const nlohmann::json& s) {
      if (s.contains("model")) rc.model = model_config_from_json(s["model"], rc.model);
      if (s.contains("train")) rc.train = train_config_from_json(s["train"], rc.train);
    };
    apply(j);
    if (j.contains(to_string(arch))) apply(j[to_string(arch)]);
  }
  rc.model.arch = arch;
  rc.model.vocab = vocab;
  rc.model.validate();
  rc.train.validate();
  return rc;
}

// ---------------------------------------------------------------------------
// Subcommands

inline CheckpointSeries run_train(const ExperimentLayout& lay, Arch arch, const fs::path& data_file,
                                  const RunConfig& rc, const fs::path& ckpt_dir, const TrainOptions& opt = {}) {
  const auto data = prepare_data(data_file);
  if (rc.model.vocab != data.tokenizer.size()) throw DataError("model vocab does not match the dataset");
  if (!opt.resume_state && fs::exists(ckpt_dir)) {
    for (const auto& e : fs::directory_iterator(ckpt_dir)) fs::remove_all(e.path());
  }
  auto series = train(rc.model, rc.train, data.corpus, ckpt_dir, opt);
  ExperimentManifest m(lay.root);
  m.doc()["models"][to_string(arch)] = to_json(rc.model);
  m.doc()["train"][to_string(arch)] = to_json(rc.train);
  auto steps = ojson::array();
  for (const auto& c : series.checkpoints) steps.push_back(c.step);
  m.doc()["checkpoints"][to_string(arch)] = steps;
  if (fs::exists(lay.data_file()) || fs::exists(data_file)) m.record(data_file);
  if (ckpt_dir.string().starts_with(lay.root.string())) m.record_dir(ckpt_dir);
  m.save();
  return series;
}

inline std::vector<ImportanceTable> run_attribute(const ExperimentLayout& lay, Arch arch, const fs::path& data_file,
                                                  const fs::path& ckpt_dir, const AttributionOptions& opt,
                                                  bool verbose = false) {
  const auto data = prepare_data(data_file);
  const auto series = load_series(ckpt_dir);
  const auto out_dir = lay.attribution_dir(arch);
  fs::create_directories(out_dir);
  std::vector<ImportanceTable> tables;
  for (const auto& e : series.checkpoints) {
    const Checkpoint ck = load_series_checkpoint(series, e);
    auto t = attribute_checkpoint(ck, data.attribution, opt);
    save_importance(out_dir, t);
    if (verbose) std::fprintf(stderr, "[%s] attributed step %zu\n", to_string(arch).c_str(), e.step);
    tables.push_back(std::move(t));
  }
  ExperimentManifest m(lay.root);
  m.record_dir(out_dir);
  m.save();
  return tables;
}

struct ArchStability {
  ScopeStability ffn;
  ScopeStability attn;
  std::size_t ffn_neurons = 0;
  double random_baseline = 0.0;  // expected Jaccard of random top sets of the FFN size
};

inline std::vector<ImportanceTable> load_tables(const ExperimentLayout& lay, Arch arch, const fs::path& ckpt_dir,
                                                bool include_init) {
  const auto series = load_series(ckpt_dir);
  std::vector<ImportanceTable> tables;
  for (const auto& e : series.checkpoints) {
    if (e.step == 0 && !include_init) continue;
    tables.push_back(load_importance(lay.attribution_dir(arch), e.step));
  }
  return tables;
}

inline std::string step_series_tsv(const std::vector<StepValue>& xs) {
  std::string s = "step\tvalue\n";
  for (const auto& x : xs) s += std::to_string(x.step) + "\t" + (x.value ? format_double(*x.value) : "NA") + "\n";
  return s;
}

inline ojson step_series_json(const std::vector<StepValue>& xs) {
  ojson a = ojson::array();
  for (const auto& x : xs) a.push_back({{"step", x.step}, {"value", opt_json(x.value)}});
  return a;
}

inline ojson scope_json(const ScopeStability& s) {
  ojson j;
  j["scope"] = to_string(s.scope);
  j["jaccard"] = step_series_json(s.jaccard);
  j["j_stab"] = s.j_stab;
  j["j_stab_early"] = opt_json(s.j_early);
  j["j_stab_late"] = opt_json(s.j_late);
  j["r_t"] = step_series_json(s.r_t);
  j["mean_r_t"] = opt_json(s.mean_r_t);
  j["rho_avg"] = opt_json(s.rho_avg);
  j["rho_excluded_pairs"] = s.rho_excluded_pairs;
  j["sigma_rel"] = opt_json(s.sigma_rel);
  j["sigma_excluded_layers"] = s.sigma_excluded_layers;
  return j;
}

inline ArchStability run_stability(const ExperimentLayout& lay, Arch arch, const fs::path& ckpt_dir,
                                   const StabilityOptions& opt, bool include_init = false) {
  const auto tables = load_tables(lay, arch, ckpt_dir, include_init);
  if (tables.size() < 2) throw DataError("need ≥ 2 checkpoints");
  ArchStability st;
  st.ffn = stability_for_scope(tables, NeuronKind::FFN, opt);
  st.attn = stability_for_scope(tables, NeuronKind::ATTN, opt);
  st.ffn_neurons = tables.front().scope(NeuronKind::FFN).size();
  st.random_baseline = random_jaccard_baseline(st.ffn_neurons, opt.fraction, 1000, 0);

  const auto dir = lay.stability_dir(arch);
  ojson j;
  j["arch"] = to_string(arch);
  j["fraction"] = opt.fraction;
  j["windows"] = {{"early_end_fraction", opt.early_end}, {"late_begin_fraction", opt.late_begin}};
  j["include_init"] = include_init;
  j["ffn"] = scope_json(st.ffn);
  j["attn"] = scope_json(st.attn);
  j["ffn_neurons"] = st.ffn_neurons;
  j["random_jaccard_baseline"] = st.random_baseline;
  atomic_write(dir / "report.json", j.dump(2) + "\n");
  for (const ScopeStability* s : {&st.ffn, &st.attn}) {
    const std::string k = s->scope == NeuronKind::FFN ? "ffn" : "attn";
    atomic_write(dir / ("jaccard_" + k + ".tsv"), step_series_tsv(s->jaccard));
    atomic_write(dir / ("rt_" + k + ".tsv"), step_series_tsv(s->r_t));
    std::string mean_tsv = "step\tmean_importance\n", layer_tsv = "step\tlayer\tvalue\n";
    for (const auto& [step, prof] : s->profiles) {
      mean_tsv += std::to_string(step) + "\t" + format_double(mean(prof)) + "\n";
      for (std::size_t l = 0; l < prof.size(); ++l)
        layer_tsv += std::to_string(step) + "\t" + std::to_string(l) + "\t" + format_double(prof[l]) + "\n";
    }
    atomic_write(dir / ("mean_importance_" + k + ".tsv"), mean_tsv);
    atomic_write(dir / ("layer_profile_" + k + ".tsv"), layer_tsv);
  }
  ExperimentManifest m(lay.root);
  m.record_dir(dir);
  m.save();
  return st;
}

struct AblationRow {
  std::size_t step = 0;
  std::string mask;
  std::string description;
  AblationOutcome outcome;
};

struct ArchAblation {
  std::vector<AblationRow> rows;
  std::map<std::string, std::optional<double>> mean_drop;  // mask name -> mean drop over checkpoints
  std::optional<double> final_hit;
};

inline ArchAblation run_ablation(const ExperimentLayout& lay, Arch arch, const fs::path& data_file,
                                 const fs::path& ckpt_dir, std::size_t top_heads, double fraction,
                                 bool include_init = false) {
  const auto data = prepare_data(data_file);
  const auto series = load_series(ckpt_dir);
  std::map<std::string, Category> category;
  for (const auto& ex : data.examples) category[ex.relation] = ex.category;
  const std::string heads_name = "top" + std::to_string(top_heads) + "_heads";
  const std::vector<std::string> names{"top1_head", heads_name, "top_ffn"};

  ArchAblation out;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& e : series.checkpoints) {
    if (e.step == 0 && !include_init) continue;
    const Checkpoint ck = load_series_checkpoint(series, e);
    const auto table = load_importance(lay.attribution_dir(arch), e.step);
    const auto masks = build_masks(table, top_heads, fraction);
    const MaskSpec* specs[] = {&masks.top1_head, &masks.top_heads, &masks.top_ffn};
    for (std::size_t i = 0; i < 3; ++i) {
      AblationRow row{e.step, names[i], describe(*specs[i]), ablation_drop(ck, data.eval, *specs[i])};
      if (row.outcome.overall.drop_pct) {
        acc[names[i]].first += *row.outcome.overall.drop_pct;
        acc[names[i]].second += 1;
      }
      out.final_hit = row.outcome.overall.baseline;
      out.rows.push_back(std::move(row));
    }
  }
  for (const auto& n : names) {
    auto it = acc.find(n);
    out.mean_drop[n] = (it == acc.end() || it->second.second == 0)
                           ? std::nullopt
                           : std::optional<double>(it->second.first / static_cast<double>(it->second.second));
  }

  auto fmt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("NA"); };
  std::string tsv = "step\tmask\tcategory\trelation\tbaseline_hit10\tmasked_hit10\tdrop_pct\tmask_members\n";
  for (const auto& r : out.rows) {
    tsv += std::to_string(r.step) + "\t" + r.mask + "\tALL\tALL\t" + format_double(r.outcome.overall.baseline) + "\t" +
           format_double(r.outcome.overall.masked) + "\t" + fmt(r.outcome.overall.drop_pct) + "\t" + r.description + "\n";
    for (const auto& [rel, res] : r.outcome.per_relation) {
      tsv += std::to_string(r.step) + "\t" + r.mask + "\t" + to_string(category[rel]) + "\t" + rel + "\t" +
             format_double(res.baseline) + "\t" + format_double(res.masked) + "\t" + fmt(res.drop_pct) + "\t-\n";
    }
  }
  const auto dir = lay.ablation_dir(arch);
  atomic_write(dir / "ablation.tsv", tsv);
  ojson j;
  j["arch"] = to_string(arch);
  j["top_heads"] = top_heads;
  j["fraction"] = fraction;
  for (const auto& n : names) j["mean_drop_pct"][n] = opt_json(out.mean_drop[n]);
  j["final_baseline_hit10"] = opt_json(out.final_hit);
  atomic_write(dir / "ablation_summary.json", j.dump(2) + "\n");
  ExperimentManifest m(lay.root);
  m.record_dir(dir);
  m.save();
  return out;
}

// ---------------------------------------------------------------------------
// Report

inline std::string pct(const nlohmann::json& v) {
  if (v.is_null()) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v.get<double>());
  return buf;
}
inline std::string num(const nlohmann::json& v, int prec = 3) {
  if (v.is_null()) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v.get<double>());
  return buf;
}

// Aggregates the per-arch stability and ablation outputs into summary.json
// and a plain-text table. Verifies every recorded artifact hash first.
inline ojson run_report(const ExperimentLayout& lay) {
  ExperimentManifest m(lay.root);
  if (!fs::exists(lay.manifest())) throw DataError("no experiment manifest in " + lay.root.string());
  m.verify();
  ojson summary;
  summary["tool_version"] = kToolVersion;
  if (m.doc().contains("dataset")) {
    summary["experiment_id"] = hex64(fnv1a64(m.doc()["dataset"].dump() + m.doc().value("models", ojson()).dump() +
                                             m.doc().value("train", ojson()).dump()));
    summary["dataset"] = m.doc()["dataset"];
  }
  std::ostringstream txt;
  txt << "Neuron-level stability (%)\n";
  txt << "model\tscope\tJ_stab\tJ_early\tJ_late\tmean_R_t\trandom_J\n";
  std::ostringstream layer_txt, abl_txt;
  layer_txt << "\nLayer-level stability\n";
  layer_txt << "model\tFFN_rho_avg\tFFN_sigma_rel\tATTN_rho_avg\tATTN_sigma_rel\n";
  abl_txt << "\nAblation: mean HIT@10 drop over checkpoints (%)\n";
  abl_txt << "model\ttop1_head\ttopN_heads\ttop_ffn\tfinal_hit10\n";
  for (Arch a : {Arch::Dense, Arch::Moe}) {
    const auto sp = lay.stability_dir(a) / "report.json";
    const auto ap = lay.ablation_dir(a) / "ablation_summary.json";
    if (!fs::exists(sp) && !fs::exists(ap)) continue;
    ojson entry;
    if (fs::exists(sp)) {
      const auto st = ojson::parse(read_file(sp));
      for (const char* scope : {"ffn", "attn"}) {
        const auto& s = st[scope];
        entry[scope] = {{"j_stab", s["j_stab"]},
                        {"j_stab_early", s["j_stab_early"]},
                        {"j_stab_late", s["j_stab_late"]},
                        {"mean_r_t", s["mean_r_t"]},
                        {"rho_avg", s["rho_avg"]},
                        {"sigma_rel", s["sigma_rel"]}};
        txt << to_string(a) << '\t' << scope << '\t' << pct(s["j_stab"]) << '\t' << pct(s["j_stab_early"]) << '\t'
            << pct(s["j_stab_late"]) << '\t' << pct(s["mean_r_t"]) << '\t' << pct(st["random_jaccard_baseline"])
            << '\n';
      }
      entry["random_jaccard_baseline"] = st["random_jaccard_baseline"];
      layer_txt << to_string(a) << '\t' << num(st["ffn"]["rho_avg"]) << '\t' << num(st["ffn"]["sigma_rel"]) << '\t'
                << num(st["attn"]["rho_avg"]) << '\t' << num(st["attn"]["sigma_rel"]) << '\n';
    }
    if (fs::exists(ap)) {
      const auto ab = ojson::parse(read_file(ap));
      entry["ablation"] = ab;
      const auto& md = ab["mean_drop_pct"];
      std::string heads_key;
      for (auto it = md.begin(); it != md.end(); ++it)
        if (it.key() != "top1_head" && it.key() != "top_ffn") heads_key = it.key();
      abl_txt << to_string(a) << '\t' << num(md["top1_head"], 2) << '\t'
              << (heads_key.empty() ? "NA" : num(md[heads_key], 2)) << '\t' << num(md["top_ffn"], 2) << '\t'
              << num(ab["final_baseline_hit10"]) << '\n';
    }
    summary["models"][to_string(a)] = entry;
  }
  const std::string text = txt.str() + layer_txt.str() + abl_txt.str();
  atomic_write(lay.root / "summary.json", summary.dump(2) + "\n");
  atomic_write(lay.root / "summary.txt", text);
  return summary;
}

// ---------------------------------------------------------------------------
// Whole pipeline

struct PipelineConfig {
  SynthSpec data;
  std::optional<fs::path> config_file;
  std::uint64_t train_seed = 0;
  std::optional<std::size_t> steps;  // overrides the train config
  std::optional<RunConfig> dense_override;
  std::optional<RunConfig> moe_override;
  AttributionOptions attribution;
  StabilityOptions stability;
  std::size_t top_heads = 10;
  bool write_state = true;  // optimiser sidecars for resuming
  bool verbose = false;
};

struct PipelineResult {
  std::map<Arch, ArchStability> stability;
  std::map<Arch, ArchAblation> ablation;
  ojson summary;
};

inline PipelineResult run_pipeline(const fs::path& root, const PipelineConfig& pc) {
  ExperimentLayout lay{root};
  gen_data(lay, pc.data);
  const auto data = prepare_data(lay.data_file());
  PipelineResult res;
  for (Arch a : {Arch::Dense, Arch::Moe}) {
    RunConfig rc = resolve_config(a, data.tokenizer.size(), pc.config_file);
    if (a == Arch::Dense && pc.dense_override) rc = *pc.dense_override;
    if (a == Arch::Moe && pc.moe_override) rc = *pc.moe_override;
    rc.model.vocab = data.tokenizer.size();
    rc.train.seed = pc.train_seed;
    if (pc.steps) {
      rc.train.steps = *pc.steps;
      rc.train.schedule.clear();
    }
    TrainOptions opt;
    opt.log_every = pc.verbose ? 250 : 0;
    opt.write_state = pc.write_state;
    run_train(lay, a, lay.data_file(), rc, lay.ckpt_dir(a), opt);
    run_attribute(lay, a, lay.data_file(), lay.ckpt_dir(a), pc.attribution, pc.verbose);
    res.stability[a] = run_stability(lay, a, lay.ckpt_dir(a), pc.stability);
    res.ablation[a] = run_ablation(lay, a, lay.data_file(), lay.ckpt_dir(a), pc.top_heads, pc.stability.fraction);
  }
  res.summary = run_report(lay);
  return res;
}

}  // namespace glpi
