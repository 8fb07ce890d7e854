#pragma once

// Relational-facts data: the record schema, a JSON-lines loader, a seeded
// synthetic generator and a closed-vocabulary word tokenizer.
//
// Dataset file: one JSON object per line with string fields
//   {"category": "Factual", "relation": "country_capital_city",
//    "subject": "France", "object": "Paris",
//    "template": "The capital of {} is the city of"}
// Blank lines are ignored. category is one of Linguistic, Commonsense,
// Factual, Bias. template holds exactly one "{}" for the subject; the prompt
// ends right before the object.
//
// Synthetic spec file: {"relations": [...names...], "entities_per_relation": N,
// "seed": S}; "relations" may be omitted to use all twelve built-in relations.

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "glpi/io.hpp"
#include "glpi/random.hpp"
#include "json.hpp"

namespace glpi {

enum class Category { Linguistic, Commonsense, Factual, Bias };

inline constexpr std::array<Category, 4> kCategories{Category::Linguistic, Category::Commonsense,
                                                     Category::Factual, Category::Bias};

inline std::string to_string(Category c) {
  switch (c) {
    case Category::Linguistic: return "Linguistic";
    case Category::Commonsense: return "Commonsense";
    case Category::Factual: return "Factual";
    case Category::Bias: return "Bias";
  }
  return "";
}

inline std::optional<Category> parse_category(const std::string& s) {
  for (auto c : kCategories)
    if (to_string(c) == s) return c;
  return std::nullopt;
}

struct RelationExample {
  Category category = Category::Factual;
  std::string relation;
  std::string subject;
  std::string object;
  std::string template_text;

  bool operator==(const RelationExample&) const = default;
};

inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream ss(text);
  std::vector<std::string> out;
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

inline std::size_t count_placeholders(const std::string& t) {
  std::size_t n = 0;
  for (auto pos = t.find("{}"); pos != std::string::npos; pos = t.find("{}", pos + 2)) ++n;
  return n;
}

// Template with the subject substituted, whitespace-normalised.
inline std::string fill_template(const std::string& templ, const std::string& subject) {
  std::string s = templ;
  s.replace(s.find("{}"), 2, subject);
  return join_words(split_words(s));
}

inline std::string validate_example(const RelationExample& ex) {
  if (ex.relation.empty()) return "empty relation";
  if (split_words(ex.subject).empty()) return "empty subject";
  if (split_words(ex.object).empty()) return "object has no tokens";
  const auto n = count_placeholders(ex.template_text);
  if (n == 0) return "template has no {} placeholder";
  if (n > 1) return "template has multiple {} placeholders";
  if (split_words(fill_template(ex.template_text, ex.subject)).empty()) return "empty prompt";
  return {};
}

inline RelationExample parse_relation_line(const std::string& line, std::size_t line_no) {
  const std::string where = "line " + std::to_string(line_no) + ": ";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(where + "malformed JSON record");
  }
  if (!j.is_object()) throw DataError(where + "record is not an object");
  auto field = [&](const char* name) {
    if (!j.contains(name)) throw DataError(where + "missing field '" + name + "'");
    if (!j[name].is_string()) throw DataError(where + "field '" + name + "' is not a string");
    return j[name].get<std::string>();
  };
  RelationExample ex;
  const auto cat = field("category");
  const auto parsed = parse_category(cat);
  if (!parsed) throw DataError(where + "unknown category '" + cat + "'");
  ex.category = *parsed;
  ex.relation = field("relation");
  ex.subject = field("subject");
  ex.object = field("object");
  ex.template_text = field("template");
  if (auto err = validate_example(ex); !err.empty()) throw DataError(where + err);
  return ex;
}

inline std::vector<RelationExample> parse_relations(const std::string& text) {
  std::vector<RelationExample> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (split_words(line).empty()) continue;
    out.push_back(parse_relation_line(line, line_no));
  }
  return out;
}

inline std::vector<RelationExample> load_relations(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("dataset file not found: " + path.string());
  return parse_relations(read_file(path));
}

inline std::map<Category, std::size_t> category_counts(const std::vector<RelationExample>& examples) {
  std::map<Category, std::size_t> counts;
  for (auto c : kCategories) counts[c] = 0;
  for (const auto& ex : examples) ++counts[ex.category];
  return counts;
}

inline std::string serialize_relations(const std::vector<RelationExample>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    nlohmann::ordered_json j;
    j["category"] = to_string(ex.category);
    j["relation"] = ex.relation;
    j["subject"] = ex.subject;
    j["object"] = ex.object;
    j["template"] = ex.template_text;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline void save_relations(const fs::path& path, const std::vector<RelationExample>& examples) {
  atomic_write(path, serialize_relations(examples));
}

// ---------------------------------------------------------------------------
// Synthetic generator

enum class ObjectKind { Unique, Pool, FirstLetter, LastLetter };

struct RelationSchema {
  std::string name;
  Category category;
  ObjectKind objects;
  std::size_t pool = 0;  // object pool size for ObjectKind::Pool
  std::vector<std::string> templates;
};

inline const std::vector<RelationSchema>& builtin_relations() {
  static const std::vector<RelationSchema> relations{
      {"adjective_antonym", Category::Linguistic, ObjectKind::Unique, 0,
       {"the opposite of {} is", "{} is the antonym of", "the antonym of {} is"}},
      {"word_first_letter", Category::Linguistic, ObjectKind::FirstLetter, 0,
       {"the word {} begins with the letter", "the first letter of {} is", "{} starts with the letter"}},
      {"word_last_letter", Category::Linguistic, ObjectKind::LastLetter, 0,
       {"the word {} ends with the letter", "the last letter of {} is", "{} finishes with the letter"}},
      {"object_superclass", Category::Commonsense, ObjectKind::Pool, 5,
       {"{} is a kind of", "a {} is a type of", "the category of {} is"}},
      {"fruit_inside_color", Category::Commonsense, ObjectKind::Pool, 4,
       {"the inside of a {} is colored", "when you cut a {} it is", "the flesh of a {} is"}},
      {"work_location", Category::Commonsense, ObjectKind::Pool, 6,
       {"a {} usually works in a", "the workplace of a {} is a", "a {} goes to work at a"}},
      {"country_language", Category::Factual, ObjectKind::Pool, 7,
       {"people in {} speak", "the official language of {} is", "in {} the language spoken is"}},
      {"country_capital_city", Category::Factual, ObjectKind::Unique, 0,
       {"the capital of {} is the city of", "the capital city of {} is", "{} has its capital in"}},
      {"name_religion", Category::Bias, ObjectKind::Pool, 4,
       {"{} is a follower of", "the religion of {} is", "{} worships according to"}},
      {"occupation_age", Category::Bias, ObjectKind::Pool, 3,
       {"a {} is typically", "the usual age of a {} is", "most people working as {} are"}},
      {"occupation_gender", Category::Bias, ObjectKind::Pool, 2,
       {"a {} is usually a", "most people who work as {} are", "the typical {} is a"}},
      {"name_birthplace", Category::Bias, ObjectKind::Pool, 6,
       {"{} was born in", "the birthplace of {} is", "{} grew up in"}},
  };
  return relations;
}

inline const RelationSchema& find_relation(const std::string& name) {
  for (const auto& r : builtin_relations())
    if (r.name == name) return r;
  throw DataError("unknown synthetic relation '" + name + "'");
}

struct SynthSpec {
  std::vector<std::string> relations;  // empty means all built-ins
  std::size_t entities_per_relation = 20;
  std::uint64_t seed = 0;

  std::string to_json() const {
    nlohmann::ordered_json j;
    j["relations"] = relations;
    j["entities_per_relation"] = entities_per_relation;
    j["seed"] = seed;
    return j.dump(2) + "\n";
  }
  static SynthSpec from_json(const std::string& text) {
    SynthSpec s;
    try {
      const auto j = nlohmann::json::parse(text);
      if (j.contains("relations")) s.relations = j.at("relations").get<std::vector<std::string>>();
      if (j.contains("entities_per_relation")) s.entities_per_relation = j.at("entities_per_relation").get<std::size_t>();
      if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("synthetic spec: ") + e.what());
    }
    return s;
  }
};

namespace detail {
class NameForge {
 public:
  explicit NameForge(Rng& rng) : rng_(rng) {}
  std::string fresh() {
    static constexpr std::string_view kOnset = "bcdfghjklmnprstvz";
    static constexpr std::string_view kVowel = "aeiou";
    static constexpr std::string_view kCoda = "nrlsk";
    for (;;) {
      const std::size_t syllables = 2 + rng_.below(2);
      std::string w;
      for (std::size_t s = 0; s < syllables; ++s) {
        w += kOnset[rng_.below(kOnset.size())];
        w += kVowel[rng_.below(kVowel.size())];
        if (rng_.below(3) == 0) w += kCoda[rng_.below(kCoda.size())];
      }
      w[0] = static_cast<char>(w[0] - 'a' + 'A');
      if (used_.insert(w).second) return w;
    }
  }

 private:
  Rng& rng_;
  std::set<std::string> used_;
};
}  // namespace detail

// Deterministic in (spec, seed). Subjects and objects are capitalised
// pseudo-words, letters are single upper-case characters, template words are
// lower case, so the three vocabularies never overlap.
inline std::vector<RelationExample> synth_facts(const SynthSpec& spec) {
  if (spec.entities_per_relation < 1) throw UsageError("synth_facts: entities_per_relation must be >= 1");
  std::vector<std::string> names = spec.relations;
  if (names.empty())
    for (const auto& r : builtin_relations()) names.push_back(r.name);
  Rng rng(spec.seed);
  detail::NameForge forge(rng);
  std::vector<RelationExample> out;
  for (const auto& name : names) {
    const auto& rel = find_relation(name);
    std::vector<std::string> pool;
    if (rel.objects == ObjectKind::Pool) {
      for (std::size_t i = 0; i < rel.pool; ++i) pool.push_back(forge.fresh());
    }
    for (std::size_t i = 0; i < spec.entities_per_relation; ++i) {
      RelationExample ex;
      ex.category = rel.category;
      ex.relation = rel.name;
      ex.subject = forge.fresh();
      switch (rel.objects) {
        case ObjectKind::Unique: ex.object = forge.fresh(); break;
        case ObjectKind::Pool: ex.object = pool[rng.below(pool.size())]; break;
        case ObjectKind::FirstLetter: ex.object = std::string(1, ex.subject.front()); break;
        case ObjectKind::LastLetter:
          ex.object = std::string(1, static_cast<char>(ex.subject.back() - 'a' + 'A'));
          break;
      }
      ex.template_text = rel.templates[rng.below(rel.templates.size())];
      out.push_back(std::move(ex));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tokenizer

enum class UnknownPolicy { Strict, MapToUnk };

class Tokenizer {
 public:
  static constexpr std::string_view kUnk = "<unk>";

  Tokenizer() : words_{std::string(kUnk)} { index_[std::string(kUnk)] = 0; }

  // Vocabulary: "<unk>" then every distinct word of `texts` in byte order.
  static Tokenizer from_texts(const std::vector<std::string>& texts, UnknownPolicy policy = UnknownPolicy::Strict) {
    std::set<std::string> words;
    for (const auto& t : texts)
      for (auto& w : split_words(t))
        if (w != kUnk) words.insert(w);
    Tokenizer tok;
    tok.policy_ = policy;
    for (const auto& w : words) {
      tok.index_[w] = static_cast<int>(tok.words_.size());
      tok.words_.push_back(w);
    }
    return tok;
  }

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  int unk_id() const { return 0; }
  static std::size_t special_count() { return 1; }

  std::optional<int> find(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : split_words(text)) {
      if (auto id = find(w)) {
        ids.push_back(*id);
      } else if (policy_ == UnknownPolicy::MapToUnk) {
        ids.push_back(unk_id());
      } else {
        throw DataError("tokenizer: out-of-vocabulary word '" + w + "'");
      }
    }
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw DataError("tokenizer: bad token id");
      out.push_back(words_[static_cast<std::size_t>(id)]);
    }
    return join_words(out);
  }

  std::string serialize() const {
    std::string s;
    for (const auto& w : words_) s += w + "\n";
    return s;
  }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
  UnknownPolicy policy_ = UnknownPolicy::Strict;
};

struct RenderedPrompt {
  std::vector<int> prompt;
  int target = 0;
  std::string text;
};

// Prompt = template with the subject filled in; target = first object token.
inline RenderedPrompt render_prompt(const RelationExample& ex, const Tokenizer& tok) {
  RenderedPrompt r;
  r.text = fill_template(ex.template_text, ex.subject);
  r.prompt = tok.encode(r.text);
  const auto obj = tok.encode(ex.object);
  if (obj.empty()) throw DataError("render_prompt: object has no tokens");
  r.target = obj.front();
  return r;
}

// Templates observed per relation, in first-appearance order.
inline std::map<std::string, std::vector<std::string>> relation_templates(const std::vector<RelationExample>& examples) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& ex : examples) {
    auto& list = out[ex.relation];
    if (std::find(list.begin(), list.end(), ex.template_text) == list.end()) list.push_back(ex.template_text);
  }
  return out;
}

// Fact sentences "prompt object": every example rendered with every template
// of its relation.
inline std::vector<std::string> corpus_sentences(const std::vector<RelationExample>& examples) {
  const auto templates = relation_templates(examples);
  std::vector<std::string> out;
  for (const auto& ex : examples) {
    for (const auto& t : templates.at(ex.relation)) {
      out.push_back(fill_template(t, ex.subject) + " " + join_words(split_words(ex.object)));
    }
  }
  return out;
}

inline Tokenizer build_tokenizer(const std::vector<RelationExample>& examples) {
  return Tokenizer::from_texts(corpus_sentences(examples));
}

inline std::vector<std::vector<int>> encode_corpus(const std::vector<RelationExample>& examples, const Tokenizer& tok) {
  std::vector<std::vector<int>> out;
  for (const auto& s : corpus_sentences(examples)) out.push_back(tok.encode(s));
  return out;
}

}  // namespace glpi
