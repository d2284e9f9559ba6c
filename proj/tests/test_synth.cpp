#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sgg/dataset_io.hpp"
#include "sgg/synth.hpp"

using namespace sgg;

TEST_CASE("generation is deterministic from the seed") {
  WorldSpec w = tiny_world();
  Dataset a = generate(w, 40, 3);
  Dataset b = generate(w, 40, 3);
  const std::string p1 = "/tmp/sgg_gen1.jsonl", p2 = "/tmp/sgg_gen2.jsonl";
  save_dataset(a, p1);
  save_dataset(b, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  REQUIRE(s1.str() == s2.str());
}

TEST_CASE("generated datasets pass core validation and reference real objects") {
  WorldSpec w = bench_world();
  w.num_images = 25;
  Dataset ds = generate(w, 25, 4);
  validate_dataset(ds);  // throws on any invariant violation
  REQUIRE(ds.records.size() == 25);
  for (const auto& rec : ds.records) {
    REQUIRE(rec.objects.size() == 4);
    REQUIRE(!rec.gt_triplets.empty());
  }
}

TEST_CASE("zipf sampling: near-uniform at s->0, Zipf(1.5) at rank 1-5") {
  // sampling oracle over the same discrete sampler generate() uses
  const size_t N = 21;

  SECTION("s -> 0 gives a near-uniform histogram (chi-square sanity)") {
    auto w = synth_detail::zipf_weights(N, 1e-9);
    Rng rng(123);
    std::vector<size_t> counts(N, 0);
    const size_t trials = 10000;
    for (size_t i = 0; i < trials; ++i)
      counts[size_t(synth_detail::sample_discrete(rng, w))]++;
    REQUIRE(counts[0] == 0);  // background never sampled
    const double expect = double(trials) / double(N - 1);
    double chi2 = 0.0;
    for (size_t r = 1; r < N; ++r) {
      const double d = double(counts[r]) - expect;
      chi2 += d * d / expect;
    }
    // 19 dof: 99.9th percentile is ~43.8
    REQUIRE(chi2 < 43.8);
  }

  SECTION("s = 1.5 matches Zipf(1.5) within 5% relative on ranks 1-5") {
    auto w = synth_detail::zipf_weights(N, 1.5);
    double z = 0.0;
    for (size_t r = 1; r < N; ++r) z += w[r];
    Rng rng(321);
    std::vector<size_t> counts(N, 0);
    const size_t trials = 100000;
    for (size_t i = 0; i < trials; ++i)
      counts[size_t(synth_detail::sample_discrete(rng, w))]++;
    for (size_t rank = 1; rank <= 5; ++rank) {
      const double expected = w[rank] / z;
      const double got = double(counts[rank]) / double(trials);
      REQUIRE(std::fabs(got - expected) / expected < 0.05);
    }
  }

  SECTION("generated triplet histogram follows the same prior") {
    WorldSpec w = bench_world();
    w.num_images = 600;
    Dataset ds = generate(w, 600, 3);
    auto counts = predicate_histogram(ds);
    REQUIRE(counts[0] == 0);
    // head strictly dominates every tail, and the histogram is long-tailed
    for (size_t r = 2; r < counts.size(); ++r) REQUIRE(counts[1] > counts[r]);
    size_t tail_total = 0;
    for (size_t r = 2; r < counts.size(); ++r) tail_total += counts[r];
    REQUIRE(counts[1] > tail_total / 3);
  }
}

TEST_CASE("predicate_histogram: exact counting and additivity") {
  WorldSpec w = tiny_world();
  Dataset ds = generate(w, 30, 3);

  SECTION("single triplet") {
    Dataset one;
    one.class_names = ds.class_names;
    one.predicate_names = ds.predicate_names;
    one.records.push_back(ds.records[0]);
    one.records[0].gt_triplets = {RelationTriplet{0, 1, 3}};
    auto counts = predicate_histogram(one);
    for (size_t r = 0; r < counts.size(); ++r)
      REQUIRE(counts[r] == (r == 3 ? 1u : 0u));
  }

  SECTION("concatenated datasets add counts") {
    Dataset half1 = ds, half2 = ds;
    half1.records.assign(ds.records.begin(), ds.records.begin() + 15);
    half2.records.assign(ds.records.begin() + 15, ds.records.end());
    auto c1 = predicate_histogram(half1);
    auto c2 = predicate_histogram(half2);
    auto cc = predicate_histogram(ds);
    for (size_t r = 0; r < cc.size(); ++r) REQUIRE(cc[r] == c1[r] + c2[r]);
  }

  SECTION("recount oracle on a generated dataset") {
    auto counts = predicate_histogram(ds);
    std::vector<size_t> recount(ds.num_predicates(), 0);
    for (const auto& rec : ds.records)
      for (const auto& tr : rec.gt_triplets) recount[size_t(tr.predicate_id)]++;
    REQUIRE(counts == recount);
  }
}

TEST_CASE("infeasible world specs are rejected") {
  WorldSpec w = tiny_world();
  w.zipf_s = -1.0;
  REQUIRE_THROWS_AS(build_world(w), ValidationError);
  WorldSpec w2 = tiny_world();
  w2.num_predicates = 2;
  REQUIRE_THROWS_AS(build_world(w2), ValidationError);
  WorldSpec w3 = tiny_world();
  w3.num_classes = 1;
  REQUIRE_THROWS_AS(build_world(w3), ValidationError);
}

TEST_CASE("world spec round trips through key-value config text") {
  WorldSpec w = bench_world();
  w.cue_scale = 2.25;
  w.seed = 99;
  auto cfg = KvConfig::parse_text(world_to_config_text(w));
  WorldSpec back = world_from_config(cfg);
  REQUIRE(back.num_classes == w.num_classes);
  REQUIRE(back.num_predicates == w.num_predicates);
  REQUIRE(back.zipf_s == w.zipf_s);
  REQUIRE(back.seed == w.seed);
  REQUIRE(back.cue_scale == w.cue_scale);
  REQUIRE(back.objects_per_image == w.objects_per_image);
}

TEST_CASE("compat rows are probability distributions") {
  WorldSpec w = tiny_world();
  build_world(w);
  for (const auto& probs : w.compat_probs) {
    double s = 0.0;
    for (double p : probs) {
      REQUIRE(p > 0.0);
      s += p;
    }
    REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
  }
  // every support contains the head predicate plus 2-4 tail predicates
  for (const auto& sup : w.compat_support) {
    REQUIRE(sup.front() == 1);
    REQUIRE(sup.size() >= 3);
    REQUIRE(sup.size() <= 5);
  }
}
