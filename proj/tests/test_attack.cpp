#include <gtest/gtest.h>

#include <cmath>

#include "armd/attack.hpp"
#include "grad_cases.hpp"
#include "support.hpp"

using namespace armd;
using namespace armd::testing;

namespace {

LabelFunction constant_labels(int label) {
  return [label](std::span<const std::uint8_t>) { return label; };
}

// Malicious while the overlay length is even (a clean file has none).
LabelFunction overlay_parity_labels() {
  return [](std::span<const std::uint8_t> file) { return parse_texe(file).overlay.size() % 2 == 0 ? 1 : 0; };
}

// Flags the file unless it contains an overlay longer than `n` bytes.
LabelFunction overlay_length_labels(std::size_t n) {
  return [n](std::span<const std::uint8_t> file) { return parse_texe(file).overlay.size() > n ? 0 : 1; };
}

TexeFile sample_file(std::uint64_t seed) {
  return generate_sample(CorpusConfig{}, 1, Category::botnet, seed);
}

AttackBudget budget(AttackMode mode, std::size_t queries, std::uint64_t seed = 1, std::size_t bytes = 512) {
  AttackBudget b;
  b.mode = mode;
  b.max_queries = queries;
  b.max_payload_bytes = bytes;
  b.seed = seed;
  return b;
}

BenignPool small_pool() {
  BenignPool pool;
  for (std::uint64_t i = 0; i < 5; ++i) pool.add(generate_sample(CorpusConfig{}, 0, Category::none, 100 + i));
  return pool;
}

}  // namespace

TEST(AttackSample, UnbeatableOracleExhaustsBudget) {
  const TexeFile f = sample_file(1);
  const BenignPool pool = small_pool();
  for (AttackMode m : kAttackModes) {
    HardLabelOracle oracle(constant_labels(1));
    const AttackOutcome o = attack_sample(oracle, f, budget(m, 37), pool);
    EXPECT_TRUE(o.detected_before);
    EXPECT_FALSE(o.evaded);
    EXPECT_EQ(o.queries_used, 37u) << to_string(m);
    EXPECT_EQ(o.payload_size, 0u);
    EXPECT_EQ(oracle.queries(), 38u);
  }
}

TEST(AttackSample, AlwaysBenignOracleIsNotAttacked) {
  HardLabelOracle oracle(constant_labels(0));
  const AttackOutcome o = attack_sample(oracle, sample_file(2), budget(AttackMode::hillclimb, 50));
  EXPECT_FALSE(o.detected_before);
  EXPECT_FALSE(o.evaded);
  EXPECT_EQ(o.queries_used, 0u);
  EXPECT_EQ(oracle.queries(), 1u);
  const std::vector<AttackOutcome> outs{o};
  EXPECT_EQ(evasion_rate(outs).total.detected, 0u);
  EXPECT_FALSE(evasion_rate(outs).total.rate().has_value());
}

TEST(AttackSample, ParityModelEvadesInAboutTwoQueries) {
  // Payload lengths are uniform on [1, 512], half of them odd, so the number
  // of queries is geometric with p = 1/2: mean 2, variance 2. The bound
  // allows four standard errors of sampling noise over 1000 seeds.
  const TexeFile f = sample_file(3);
  double total = 0.0;
  const int runs = 1000;
  for (int s = 0; s < runs; ++s) {
    HardLabelOracle oracle(overlay_parity_labels());
    const AttackOutcome o = attack_sample(oracle, f, budget(AttackMode::append_random, 200, derive_seed(77, s)));
    ASSERT_TRUE(o.evaded);
    ASSERT_EQ(o.payload_size % 2, 1u);
    total += static_cast<double>(o.queries_used);
  }
  const double mean = total / runs;
  EXPECT_LE(mean, 2.0 + 4.0 * std::sqrt(2.0 / runs)) << mean;
  EXPECT_GE(mean, 2.0 - 4.0 * std::sqrt(2.0 / runs)) << mean;
}

TEST(AttackSample, QueryAccountingAndBudgetBounds) {
  Rng rng(81);
  const BenignPool pool = small_pool();
  for (int i = 0; i < 80; ++i) {
    const AttackMode m = kAttackModes[i % kAttackModes.size()];
    const std::size_t q = 1 + rng.below(60), bytes = 1 + rng.below(600);
    HardLabelOracle oracle(overlay_length_labels(rng.below(500)));
    const AttackOutcome o = attack_sample(oracle, sample_file(rng.next()), budget(m, q, rng.next(), bytes), pool);
    ASSERT_TRUE(o.detected_before);
    ASSERT_LE(o.queries_used, q);
    ASSERT_EQ(oracle.queries(), 1 + o.queries_used);
    ASSERT_LE(o.payload_size, bytes);
    if (!o.evaded) {
      ASSERT_EQ(o.queries_used, q);
    }
  }
}

TEST(AttackSample, EveryQueryPreservesOriginalSections) {
  const TexeFile f = sample_file(4);
  const BenignPool pool = small_pool();
  for (AttackMode m : kAttackModes) {
    std::size_t seen = 0;
    HardLabelOracle oracle([&](std::span<const std::uint8_t> bytes) {
      const TexeFile v = parse_texe(bytes);
      EXPECT_TRUE(sections_preserved(f, v));
      if (seen++ > 0) {
        EXPECT_FALSE(v.overlay.empty());
        EXPECT_LE(v.overlay.size(), 64u);
        EXPECT_EQ(v.sections.size(), f.sections.size() + (m == AttackMode::dual_view ? 1 : 0));
      }
      return 1;
    });
    attack_sample(oracle, f, budget(m, 30, 9, 64), pool);
    EXPECT_EQ(seen, 31u);
  }
}

TEST(AttackSample, DualViewStringsComeFromBenignBank) {
  const TexeFile f = sample_file(5);
  const auto& bank = dual_view_string_bank();
  HardLabelOracle oracle([&](std::span<const std::uint8_t> bytes) {
    const TexeFile v = parse_texe(bytes);
    if (v.sections.size() > f.sections.size()) {
      TexeFile only_new;
      only_new.sections.push_back(v.sections.back());
      EXPECT_FALSE(contains_category_string(only_new));
      const Bytes& p = v.sections.back().payload;
      std::size_t strings = 1;
      for (std::size_t i = 0, start = 0; i <= p.size(); ++i) {
        if (i == p.size() || p[i] == 0) {
          const std::string s(p.begin() + static_cast<std::ptrdiff_t>(start), p.begin() + static_cast<std::ptrdiff_t>(i));
          EXPECT_NE(std::find(bank.begin(), bank.end(), s), bank.end()) << s;
          if (i < p.size()) ++strings;
          start = i + 1;
        }
      }
      EXPECT_GE(strings, 1u);
      EXPECT_LE(strings, 5u);
    }
    return 1;
  });
  attack_sample(oracle, f, budget(AttackMode::dual_view, 40));
}

TEST(AttackSample, DualViewReusesAppendRandomOverlays) {
  const TexeFile f = sample_file(6);
  auto overlays = [&](AttackMode m) {
    std::vector<Bytes> out;
    HardLabelOracle oracle([&](std::span<const std::uint8_t> bytes) {
      out.push_back(parse_texe(bytes).overlay);
      return 1;
    });
    attack_sample(oracle, f, budget(m, 25, 1234));
    return out;
  };
  EXPECT_EQ(overlays(AttackMode::append_random), overlays(AttackMode::dual_view));
}

TEST(AttackSample, HillclimbMutatesTenPercentOfBase) {
  const TexeFile f = sample_file(7);
  std::vector<Bytes> overlays;
  HardLabelOracle oracle([&](std::span<const std::uint8_t> bytes) {
    overlays.push_back(parse_texe(bytes).overlay);
    return 1;
  });
  attack_sample(oracle, f, budget(AttackMode::hillclimb, 45, 3), small_pool());
  ASSERT_EQ(overlays.size(), 46u);
  // Query 1 draws a base and queries 2..20 mutate it; after those 20
  // failures query 21 restarts from a fresh base.
  const Bytes& base = overlays[1];
  const std::size_t expected = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.1 * base.size())));
  for (std::size_t q = 2; q <= 20; ++q) {
    ASSERT_EQ(overlays[q].size(), base.size());
    std::size_t diff = 0;
    for (std::size_t i = 0; i < base.size(); ++i) diff += overlays[q][i] != base[i];
    ASSERT_LE(diff, expected);
  }
  EXPECT_NE(overlays[21], base);
}

TEST(AttackSample, MonotoneInQueryBudget) {
  Rng rng(82);
  const BenignPool pool = small_pool();
  for (int i = 0; i < 40; ++i) {
    const TexeFile f = sample_file(rng.next());
    const AttackMode m = kAttackModes[i % kAttackModes.size()];
    const std::uint64_t seed = rng.next();
    const std::size_t threshold = 300 + rng.below(200);
    bool prev = false;
    for (std::size_t q : {1u, 5u, 20u, 60u}) {
      HardLabelOracle oracle(overlay_length_labels(threshold));
      const bool evaded = attack_sample(oracle, f, budget(m, q, seed), pool).evaded;
      ASSERT_TRUE(evaded || !prev) << "budget " << q;
      prev = evaded;
    }
  }
}

TEST(AttackSample, Deterministic) {
  const TexeFile f = sample_file(8);
  for (AttackMode m : kAttackModes) {
    HardLabelOracle a(overlay_length_labels(400)), b(overlay_length_labels(400));
    EXPECT_EQ(attack_sample(a, f, budget(m, 50, 5), small_pool()), attack_sample(b, f, budget(m, 50, 5), small_pool()));
  }
}

TEST(AttackSample, BudgetValidation) {
  HardLabelOracle oracle(constant_labels(1));
  const TexeFile f = sample_file(9);
  EXPECT_THROW(attack_sample(oracle, f, budget(AttackMode::append_random, 0)), ConfigError);
  EXPECT_THROW(attack_sample(oracle, f, budget(AttackMode::append_random, 5, 1, 0)), ConfigError);
  EXPECT_THROW(attack_sample(oracle, f, budget(AttackMode::append_benign, 5)), ConfigError);
  EXPECT_EQ(parse_attack_mode("dual-view"), AttackMode::dual_view);
  EXPECT_THROW(parse_attack_mode("rl"), ConfigError);
}

TEST(AttackCorpus, AttacksMaliciousRecordsWithPerSampleSeeds) {
  TempDir dir("attack");
  CorpusConfig c;
  c.seed = 11;
  c.n_benign = 4;
  c.n_malicious = 6;
  const CorpusManifest m = gen_corpus(c, dir.path());
  const AttackBudget b = budget(AttackMode::append_random, 10, 42);
  const auto outcomes = attack_corpus(overlay_length_labels(256), dir.path(), m.records, b);
  ASSERT_EQ(outcomes.size(), 6u);
  const BenignPool pool = load_benign_pool(dir.path(), m.records);
  EXPECT_EQ(pool.size(), 4u);
  for (std::size_t k = 0; k < outcomes.size(); ++k) {
    const std::size_t idx = 4 + k;
    EXPECT_EQ(outcomes[k].path, m.records[idx].path);
    EXPECT_EQ(outcomes[k].category, m.records[idx].category);
    AttackBudget bk = b;
    bk.seed = derive_seed(b.seed, idx);
    HardLabelOracle oracle(overlay_length_labels(256));
    AttackOutcome direct = attack_sample(oracle, parse_texe(read_bytes(dir / m.records[idx].path)), bk, pool);
    direct.path = outcomes[k].path;
    direct.category = outcomes[k].category;
    EXPECT_EQ(direct, outcomes[k]);
  }
  EXPECT_EQ(attack_corpus(overlay_length_labels(256), dir.path(), m.records, b), outcomes);
}

TEST(AttackCorpus, UnparseableFileIsDataErrorNamingPath) {
  TempDir dir("attack");
  write_bytes(dir / "bad.texe", Bytes{1, 2, 3});
  const std::vector<ManifestRecord> recs{{"bad.texe", 1, Category::virus}};
  try {
    attack_corpus(constant_labels(1), dir.path(), recs, budget(AttackMode::append_random, 3));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.texe"), std::string::npos);
  }
}

TEST(AttackCorpus, DetectorOracleOnlyExposesLabels) {
  // The oracle's label function is built from a trained-or-not model; it
  // returns a verdict in {0, 1} and nothing else.
  DetectorConfig c;
  const LabelFunction f = detector_labels(build(c));
  const int v = f(write_texe(sample_file(10)));
  EXPECT_TRUE(v == 0 || v == 1);
  static_assert(std::is_same_v<LabelFunction::result_type, int>);
}

TEST(EvasionRate, HandExamples) {
  std::vector<AttackOutcome> outs;
  for (int i = 0; i < 10; ++i) outs.push_back({"f", Category::virus, true, i < 3, 1, 1});
  const EvasionRates r = evasion_rate(outs, std::vector<Category>{Category::virus, Category::botnet});
  EXPECT_DOUBLE_EQ(*r.by_category.at(Category::virus).rate(), 0.3);
  EXPECT_EQ(format_rate(r.by_category.at(Category::virus).rate()), "0.300000");
  EXPECT_FALSE(r.by_category.at(Category::botnet).rate().has_value());
  EXPECT_EQ(format_rate(r.by_category.at(Category::botnet).rate()), "undefined");
}

TEST(EvasionRate, TotalIsDenominatorWeightedMeanOfCategories) {
  Rng rng(83);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<AttackOutcome> outs;
    const std::size_t n = 1 + rng.below(200);
    for (std::size_t i = 0; i < n; ++i) {
      AttackOutcome o;
      o.category = default_attack_categories()[rng.below(5)];
      o.detected_before = rng.bernoulli(0.8);
      o.evaded = o.detected_before && rng.bernoulli(0.4);
      outs.push_back(o);
    }
    const EvasionRates r = evasion_rate(outs);
    double weighted = 0.0;
    std::size_t den = 0;
    for (const auto& [cat, cell] : r.by_category) {
      if (!cell.rate()) continue;
      weighted += *cell.rate() * static_cast<double>(cell.detected);
      den += cell.detected;
    }
    ASSERT_EQ(den, r.total.detected);
    if (den) {
      ASSERT_NEAR(*r.total.rate(), weighted / static_cast<double>(den), 1e-12);
    }
  }
}

TEST(EvasionRate, OutcomesCsvSchema) {
  const std::vector<AttackOutcome> outs{{"m1.texe", Category::rootkit, true, true, 3, 120},
                                        {"m2.texe", Category::virus, false, false, 0, 0}};
  EXPECT_EQ(outcomes_csv(outs),
            "path,category,detected_before,evaded,queries_used,payload_size\n"
            "m1.texe,rootkit,1,1,3,120\n"
            "m2.texe,virus,0,0,0,0\n");
}

TEST(BenignPool, SlicesAreContiguousPieces) {
  const BenignPool pool = small_pool();
  Rng rng(84);
  for (int i = 0; i < 50; ++i) {
    const Bytes s = pool.slice(1 + rng.below(300), rng);
    ASSERT_FALSE(s.empty());
  }
  EXPECT_THROW(BenignPool{}.slice(4, rng), ConfigError);
}
