#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include "sgg/dataset_io.hpp"
#include "sgg/embedding.hpp"
#include "sgg/synth.hpp"

using namespace sgg;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Dataset tiny_sample(size_t images, uint64_t seed = 3) {
  WorldSpec w = tiny_world();
  w.seed = seed;
  return generate(w, images, 3);
}

bool records_equal(const ImageRecord& a, const ImageRecord& b) {
  if (a.image_id != b.image_id || a.width != b.width || a.height != b.height)
    return false;
  if (a.objects.size() != b.objects.size()) return false;
  for (size_t i = 0; i < a.objects.size(); ++i) {
    const auto& x = a.objects[i];
    const auto& y = b.objects[i];
    if (x.class_id != y.class_id) return false;
    if (x.bbox.xmin != y.bbox.xmin || x.bbox.ymin != y.bbox.ymin ||
        x.bbox.xmax != y.bbox.xmax || x.bbox.ymax != y.bbox.ymax)
      return false;
    for (size_t j = 0; j < kFlatFeature; ++j)
      if (x.feature_map[j] != y.feature_map[j]) return false;
  }
  if (a.gt_triplets.size() != b.gt_triplets.size()) return false;
  for (size_t i = 0; i < a.gt_triplets.size(); ++i) {
    if (a.gt_triplets[i].subject_idx != b.gt_triplets[i].subject_idx ||
        a.gt_triplets[i].object_idx != b.gt_triplets[i].object_idx ||
        a.gt_triplets[i].predicate_id != b.gt_triplets[i].predicate_id)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("empty dataset round trips as header-only file") {
  Dataset ds;
  ds.class_names = {"a", "b"};
  ds.predicate_names = {"__background__", "on"};
  const std::string path = "/tmp/sgg_empty.jsonl";
  save_dataset(ds, path);
  const std::string text = slurp(path);
  REQUIRE(std::count(text.begin(), text.end(), '\n') == 1);
  Dataset back = load_dataset(path);
  REQUIRE(back.records.empty());
  REQUIRE(back.class_names == ds.class_names);
  REQUIRE(back.predicate_names == ds.predicate_names);
}

TEST_CASE("save is deterministic and save/load is the identity") {
  Dataset ds = tiny_sample(100);
  const std::string p1 = "/tmp/sgg_rt1.jsonl", p2 = "/tmp/sgg_rt2.jsonl";
  save_dataset(ds, p1);
  save_dataset(ds, p2);
  REQUIRE(slurp(p1) == slurp(p2));  // byte-identical saves

  Dataset back = load_dataset(p1);
  REQUIRE(back.class_names == ds.class_names);
  REQUIRE(back.predicate_names == ds.predicate_names);
  REQUIRE(back.records.size() == ds.records.size());
  for (size_t i = 0; i < ds.records.size(); ++i)
    REQUIRE(records_equal(back.records[i], ds.records[i]));

  // second generation pass from the same seed is structurally identical
  Dataset again = tiny_sample(100);
  save_dataset(again, p2);
  REQUIRE(slurp(p1) == slurp(p2));
}

TEST_CASE("validation rejects each violated invariant by name") {
  Dataset ds = tiny_sample(2);

  SECTION("bbox inversion") {
    ds.records[0].objects[0].bbox = BBox{10, 5, 3, 20};
    REQUIRE_THROWS_WITH(validate_dataset(ds),
                        Catch::Matchers::ContainsSubstring("xmin"));
  }
  SECTION("bbox outside image") {
    ds.records[0].objects[0].bbox.xmax = ds.records[0].width + 5;
    REQUIRE_THROWS_WITH(validate_dataset(ds),
                        Catch::Matchers::ContainsSubstring("outside"));
  }
  SECTION("class id out of range") {
    ds.records[1].objects[0].class_id = int(ds.num_classes());
    REQUIRE_THROWS_WITH(validate_dataset(ds),
                        Catch::Matchers::ContainsSubstring("class_id"));
  }
  SECTION("self relation") {
    ds.records[0].gt_triplets[0].object_idx = ds.records[0].gt_triplets[0].subject_idx;
    REQUIRE_THROWS_WITH(validate_dataset(ds),
                        Catch::Matchers::ContainsSubstring("self-relation"));
  }
  SECTION("dangling triplet index") {
    ds.records[0].gt_triplets[0].object_idx = int(ds.records[0].objects.size());
    REQUIRE_THROWS_WITH(validate_dataset(ds),
                        Catch::Matchers::ContainsSubstring("out of range"));
  }
  SECTION("predicate out of range") {
    ds.records[0].gt_triplets[0].predicate_id = int(ds.num_predicates());
    REQUIRE_THROWS_WITH(validate_dataset(ds),
                        Catch::Matchers::ContainsSubstring("predicate_id"));
  }
  SECTION("bad feature map shape") {
    ds.records[0].objects[0].feature_map = Tensor<float>({8, 8});
    REQUIRE_THROWS_WITH(validate_dataset(ds),
                        Catch::Matchers::ContainsSubstring("feature_map"));
  }
}

TEST_CASE("malformed lines report their line number") {
  const std::string path = "/tmp/sgg_bad.jsonl";
  {
    std::ofstream out(path);
    out << R"({"classes":["a"],"predicates":["bg","on"]})" << "\n";
    out << "{not json\n";
  }
  try {
    load_dataset(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    REQUIRE(std::string(e.what()).find(":2:") != std::string::npos);
  }
}

TEST_CASE("fuzz: random structural mutations are caught by validation") {
  Dataset ds = tiny_sample(30, 11);
  Rng rng(99);
  int rejected = 0;
  for (int trial = 0; trial < 60; ++trial) {
    Dataset mutant = ds;
    auto& rec = mutant.records[rng.below(mutant.records.size())];
    const int kind = int(rng.below(5));
    bool corrupted = false;
    switch (kind) {
      case 0:
        if (!rec.objects.empty()) {
          auto& b = rec.objects[rng.below(rec.objects.size())].bbox;
          b.xmin = b.xmax + 1.0;
          corrupted = true;
        }
        break;
      case 1:
        if (!rec.objects.empty()) {
          rec.objects[rng.below(rec.objects.size())].class_id = -1;
          corrupted = true;
        }
        break;
      case 2:
        if (!rec.gt_triplets.empty()) {
          rec.gt_triplets[rng.below(rec.gt_triplets.size())].predicate_id = 1000;
          corrupted = true;
        }
        break;
      case 3:
        if (!rec.gt_triplets.empty()) {
          auto& tr = rec.gt_triplets[rng.below(rec.gt_triplets.size())];
          tr.subject_idx = tr.object_idx;
          corrupted = true;
        }
        break;
      case 4:
        rec.width = 0;
        corrupted = true;
        break;
    }
    if (!corrupted) continue;
    ++rejected;
    REQUIRE_THROWS_AS(validate_dataset(mutant), ValidationError);
  }
  REQUIRE(rejected > 30);
  validate_dataset(ds);  // unmutated dataset stays valid
}

TEST_CASE("export_dot emits one node per object and one edge per triplet") {
  Dataset ds = tiny_sample(1);
  const auto& rec = ds.records[0];

  SECTION("two objects one edge") {
    ImageRecord small;
    small.image_id = "x";
    small.width = small.height = 100;
    small.objects.resize(2);
    for (auto& o : small.objects) {
      o.bbox = BBox{1, 1, 50, 50};
      o.feature_map = Tensor<float>({kFeatureSide, kFeatureSide});
    }
    small.objects[0].class_id = 0;
    small.objects[1].class_id = 1;
    auto dot = export_dot(small, {RelationTriplet{0, 1, 1}}, ds.class_names,
                          ds.predicate_names);
    REQUIRE(dot.find("digraph") != std::string::npos);
    REQUIRE(dot.find("o0 -> o1") != std::string::npos);
    REQUIRE(dot.find(ds.predicate_names[1]) != std::string::npos);
  }

  SECTION("no triplets gives nodes only") {
    auto dot = export_dot(rec, {}, ds.class_names, ds.predicate_names);
    REQUIRE(dot.find("->") == std::string::npos);
    for (size_t i = 0; i < rec.objects.size(); ++i)
      REQUIRE(dot.find(cat("o", i, " ")) != std::string::npos);
  }

  SECTION("counts match input counts") {
    // 5 objects, 6 predictions: count oracle over emitted lines
    ImageRecord five;
    five.image_id = "five";
    five.width = five.height = 100;
    five.objects.resize(5);
    for (auto& o : five.objects) {
      o.bbox = BBox{1, 1, 50, 50};
      o.class_id = 0;
      o.feature_map = Tensor<float>({kFeatureSide, kFeatureSide});
    }
    std::vector<RelationTriplet> preds;
    for (int i = 0; i < 6; ++i) preds.push_back(RelationTriplet{i % 5, (i + 1) % 5, 1});
    auto dot = export_dot(five, preds, ds.class_names, ds.predicate_names);
    size_t nodes = 0, edges = 0, pos = 0;
    std::istringstream ss(dot);
    std::string line;
    while (std::getline(ss, line)) {
      if (line.find("label=") == std::string::npos) continue;
      if (line.find("->") != std::string::npos)
        ++edges;
      else
        ++nodes;
    }
    (void)pos;
    REQUIRE(nodes == 5);
    REQUIRE(edges == 6);
  }

  SECTION("dangling index is a validation error") {
    REQUIRE_THROWS_AS(
        export_dot(rec, {RelationTriplet{0, int(rec.objects.size()), 1}},
                   ds.class_names, ds.predicate_names),
        ValidationError);
  }
}

TEST_CASE("embedding table: determinism, dimension, file fixture") {
  std::vector<std::string> names = {"cat", "dog", "sofa"};
  auto tab = ClassEmbeddingTable::built_in(names);
  auto tab2 = ClassEmbeddingTable::built_in(names);
  for (int c = 0; c < 3; ++c)
    for (size_t j = 0; j < kClassEmbedDim; ++j)
      REQUIRE(tab.row(c)[j] == tab2.row(c)[j]);
  REQUIRE_THROWS_AS(tab.row(3), ValidationError);
  REQUIRE_THROWS_AS(tab.row(-1), ValidationError);

  // file fixture: known row is returned exactly
  const std::string path = "/tmp/sgg_vecs.txt";
  {
    std::ofstream out(path);
    Rng rng(5);
    for (const auto& n : names) {
      out << n;
      for (size_t j = 0; j < kClassEmbedDim; ++j) out << ' ' << rng.uniform(-1, 1);
      out << '\n';
    }
  }
  auto filetab = ClassEmbeddingTable::from_file(path, names);
  Rng rng(5);
  for (const auto& n : names) {
    (void)n;
    static int c = 0;
    for (size_t j = 0; j < kClassEmbedDim; ++j)
      REQUIRE(filetab.row(c)[j] == Catch::Approx(rng.uniform(-1, 1)).margin(1e-5));
    ++c;
  }
  REQUIRE_THROWS_AS(ClassEmbeddingTable::from_file(path, {"cat", "zebra"}),
                    ValidationError);
}
