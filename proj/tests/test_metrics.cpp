#include <catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "glpi/metrics.hpp"
#include "glpi/selftest.hpp"

using namespace glpi;
using Catch::Approx;
using glpi::detail::table_from_scores;

namespace {

TopSet ids(std::size_t step, std::initializer_list<std::size_t> xs) {
  TopSet t{step, 0.01, NeuronKind::FFN, {}};
  for (auto i : xs) t.members.insert(NeuronRef::ffn(0, 0, i));
  return t;
}

// Logits where `target` sits at 1-based rank `rank` in a vocabulary of 20.
Vector ranked_logits(std::size_t target, std::size_t rank) {
  Vector l(20);
  std::size_t next = 0;
  for (std::size_t v = 0; v < 20; ++v) {
    if (v == target) continue;
    if (next == rank - 1) ++next;
    l[v] = -static_cast<double>(next++);
  }
  l[target] = -static_cast<double>(rank - 1);
  return l;
}

}  // namespace

TEST_CASE("HIT@10 examples") {
  std::vector<Vector> logits;
  for (std::size_t r : {1, 10, 11}) logits.push_back(ranked_logits(3, r));
  CHECK(hit_at_10(logits, {3, 3, 3}) == Approx(2.0 / 3.0));
  CHECK(hit_at_10({ranked_logits(0, 1), ranked_logits(5, 1)}, {0, 5}) == 1.0);
  CHECK(hit_at_10({ranked_logits(0, 11), ranked_logits(5, 11)}, {0, 5}) == 0.0);
  // ties rank by ascending id
  CHECK(target_rank(Vector(20, 0.0), 9) == 9);
  CHECK(target_rank(Vector(20, 0.0), 10) == 10);
  CHECK(hit_at_10({Vector(5, 0.0)}, {4}) == 1.0);
  CHECK_THROWS_AS(hit_at_10({}, {}), DataError);
  CHECK_THROWS_AS(hit_at_10({Vector(3, 0.0)}, {3}), DataError);
}

TEST_CASE("top_set examples") {
  std::vector<double> s(100);
  for (std::size_t i = 0; i < 100; ++i) s[i] = 0.01 * static_cast<double>((i * 37) % 100);
  const auto t = table_from_scores(0, s, {0.0});
  const auto top = top_set(t, 0.01, NeuronKind::FFN);
  REQUIRE(top.members.size() == 1);
  CHECK(top.members.begin()->column == static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin()));

  const auto flat = top_set(table_from_scores(0, std::vector<double>(100, 1.0), {0.0}), 0.05, NeuronKind::FFN);
  std::set<NeuronRef> want;
  for (std::size_t i = 0; i < 5; ++i) want.insert(NeuronRef::ffn(0, 0, i));
  CHECK(flat.members == want);

  CHECK_THROWS_AS(top_set(t, 0.0, NeuronKind::FFN), UsageError);
  CHECK_THROWS_AS(top_set(t, 1.5, NeuronKind::FFN), UsageError);
  CHECK_THROWS_AS(top_set(t, 0.1, NeuronKind::ATTN), DataError);
}

TEST_CASE("top_set matches a full sort on 1000 scores") {
  Rng rng(1);
  std::vector<double> s(1000);
  for (auto& x : s) x = std::abs(rng.normal());
  for (double f : {0.01, 0.033, 0.5}) {
    const auto got = top_set(table_from_scores(0, s, {0.0}), f, NeuronKind::FFN);
    std::vector<std::size_t> order(1000);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return s[a] > s[b]; });
    std::set<NeuronRef> want;
    for (std::size_t i = 0; i < oracle::top_count(f, 1000); ++i) want.insert(NeuronRef::ffn(0, 0, order[i]));
    CHECK(got.members == want);
  }
}

TEST_CASE("Jaccard stability examples") {
  const auto r = jaccard_stability({ids(0, {1, 2, 3, 4}), ids(1, {3, 4, 5, 6}), ids(2, {5, 6, 7, 8})});
  REQUIRE(r.pairs.size() == 2);
  CHECK(r.pairs[0] == Approx(1.0 / 3.0));
  CHECK(r.pairs[1] == Approx(1.0 / 3.0));
  CHECK(r.j_stab == Approx(1.0 / 3.0));
  CHECK(jaccard_stability({ids(0, {1, 2}), ids(1, {1, 2}), ids(2, {1, 2})}).j_stab == 1.0);
  CHECK(jaccard_stability({ids(0, {1}), ids(1, {2}), ids(2, {1})}).j_stab == 0.0);
  CHECK_THROWS_AS(jaccard_stability({ids(0, {1})}), DataError);
  auto other = ids(1, {1});
  other.fraction = 0.02;
  CHECK_THROWS_AS(jaccard_stability({ids(0, {1}), other}), DataError);
}

TEST_CASE("positive gain concentration examples") {
  const std::vector<double> zero(100, 0.0);
  auto gain_at = [](std::vector<std::pair<std::size_t, double>> g) {
    std::vector<double> v(100, 0.0);
    for (auto [i, x] : g) v[i] = x;
    return v;
  };
  const auto base = table_from_scores(0, zero, {0.0});
  CHECK(positive_gain_concentration(base, table_from_scores(1, gain_at({{5, 2.0}}), {0.0}), 0.01, NeuronKind::FFN) ==
        1.0);
  CHECK(*positive_gain_concentration(base, table_from_scores(1, std::vector<double>(100, 0.3), {0.0}), 0.01,
                                     NeuronKind::FFN) == Approx(0.01));
  CHECK(*positive_gain_concentration(base, table_from_scores(1, gain_at({{0, 5}, {1, 3}, {2, 1}, {3, 1}}), {0.0}), 0.02,
                                     NeuronKind::FFN) == Approx(0.8));
  // losses only: no data point
  CHECK_FALSE(positive_gain_concentration(table_from_scores(0, std::vector<double>(100, 1.0), {0.0}), base, 0.01,
                                          NeuronKind::FFN));
  CHECK_FALSE(positive_gain_concentration(base, base, 0.01, NeuronKind::FFN));
}

TEST_CASE("gain-ranked and importance-ranked sets differ") {
  // Neuron 0 dominates |I| but neuron 1 gains most.
  std::vector<double> a(10, 0.0), b(10, 0.0);
  a[0] = 10;
  b[0] = 10.5;
  b[1] = 2;
  const auto ta = table_from_scores(0, a, {0.0}), tb = table_from_scores(1, b, {0.0});
  CHECK(top_set(tb, 0.1, NeuronKind::FFN).members.begin()->column == 0);
  CHECK(*positive_gain_concentration(ta, tb, 0.1, NeuronKind::FFN) == Approx(2.0 / 2.5));
}

TEST_CASE("layer consistency examples") {
  CHECK(*layer_consistency({{1, 2, 3}, {1, 2, 3}}).rho_avg == Approx(1.0));
  CHECK(*layer_consistency({{1, 2, 3}, {3, 2, 1}}).rho_avg == Approx(-1.0));
  CHECK(*layer_consistency({{1, 2, 3}, {1, 2, 3}, {1, 3, 2}}).rho_avg == Approx(2.0 / 3.0));
  const auto d = layer_consistency({{1, 2, 3}, {2, 2, 2}, {1, 2, 4}});
  CHECK(d.excluded_pairs.size() == 2);
  CHECK(d.pairs_used == 1);
  CHECK_FALSE(layer_consistency({{1, 1}, {2, 2}}).rho_avg);
  CHECK_THROWS_AS(layer_consistency({{1, 2}}), DataError);
  CHECK_THROWS_AS(layer_consistency({{1}, {2}}), DataError);
}

TEST_CASE("cross-step variation examples") {
  CHECK(*cross_step_cv({{1, 2}, {1, 2}, {1, 2}}).sigma_rel == 0.0);
  CHECK(*cross_step_cv({{1}, {3}}).sigma_rel == Approx(0.5));
  CHECK(*cross_step_cv({{7}, {21}}).sigma_rel == Approx(0.5));
  CHECK(*cross_step_cv({{-1}, {-3}}).sigma_rel == Approx(0.5));
  const auto z = cross_step_cv({{1, -1}, {3, 1}});
  CHECK(z.excluded_layers == std::vector<std::size_t>{1});
  CHECK(*z.sigma_rel == Approx(0.5));
  CHECK_FALSE(cross_step_cv({{0}, {0}}).sigma_rel);
}

TEST_CASE("random baseline") {
  CHECK(random_jaccard_baseline(50, 1.0, 10, 0) == 1.0);
  CHECK(random_jaccard_baseline(10000, 0.01, 1000, 0) == Approx(0.005).margin(0.002));
  // Two random half-sets of 200: E[J] is close to 1/3.
  CHECK(random_jaccard_baseline(200, 0.5, 20000, 3) == Approx(1.0 / 3.0).margin(0.005));
  CHECK(random_jaccard_baseline(300, 0.1, 50, 9) == random_jaccard_baseline(300, 0.1, 50, 9));
  CHECK_THROWS_AS(random_jaccard_baseline(10, 0.5, 0, 0), UsageError);
}

TEST_CASE("metrics are invariant to consistent relabeling") {
  Rng rng(4);
  for (int it = 0; it < 50; ++it) {
    const std::size_t n = 5 + rng.below(40), steps = 2 + rng.below(4);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<ImportanceTable> a, b;
    for (std::size_t s = 0; s < steps; ++s) {
      // distinct scores so relabeling cannot change tie-breaks
      std::vector<double> x(n), y(n);
      for (std::size_t i = 0; i < n; ++i) x[i] = std::abs(rng.normal()) + 1e-6 * static_cast<double>(i);
      for (std::size_t i = 0; i < n; ++i) y[perm[i]] = x[i];
      a.push_back(table_from_scores(s, x, {1.0, 2.0}));
      b.push_back(table_from_scores(s, y, {1.0, 2.0}));
    }
    StabilityOptions o;
    o.fraction = 0.1;
    const auto ra = stability_for_scope(a, NeuronKind::FFN, o), rb = stability_for_scope(b, NeuronKind::FFN, o);
    CHECK(ra.j_stab == Approx(rb.j_stab).margin(1e-15));
    for (std::size_t i = 0; i < ra.r_t.size(); ++i) {
      REQUIRE(ra.r_t[i].value.has_value() == rb.r_t[i].value.has_value());
      if (ra.r_t[i].value) CHECK(*ra.r_t[i].value == Approx(*rb.r_t[i].value).margin(1e-12));
    }
  }
}

TEST_CASE("metric oracles and ranges") {
  const auto r = check_metric_oracles(300, 21);
  INFO(r.detail);
  CHECK(r.pass);
}

TEST_CASE("stability windows") {
  std::vector<ImportanceTable> tables;
  for (std::size_t s = 0; s <= 100; s += 10) {
    std::vector<double> x(20, 0.0);
    x[s < 20 ? 0 : 1] = 1.0;
    tables.push_back(table_from_scores(s, x, {1.0, 1.0 + static_cast<double>(s)}));
  }
  StabilityOptions o;
  o.fraction = 0.05;
  const auto r = stability_for_scope(tables, NeuronKind::FFN, o);
  // pairs keyed by earlier step; early window (0, 12], late [17, 100]
  CHECK(*r.j_early == 0.0);  // pair (10, 20) is the only early one
  CHECK(*r.j_late == 1.0);
  CHECK(r.jaccard.size() == 10);
  CHECK(r.r_t.size() == 10);
  CHECK_THROWS_WITH(stability_for_scope({tables[0]}, NeuronKind::FFN, o), "need ≥ 2 checkpoints");
}
