#include <catch2/catch_amalgamated.hpp>

#include "sgg/ablation.hpp"
#include "sgg/eval.hpp"
#include "sgg/synth.hpp"

using namespace sgg;

namespace {

// Independent brute-force evaluator: given per-image ranked candidates,
// count hits per predicate by explicit enumeration. Written from scratch
// against the metric definition, not sharing code with eval.hpp.
struct BruteImage {
  const ImageRecord* rec;
  std::vector<CandidateTriplet> ranked;
};

std::vector<double> brute_mean_recall(const std::vector<BruteImage>& images,
                                      const std::vector<size_t>& ks, size_t N,
                                      TaskProtocol task, double iou_thr) {
  std::vector<double> result;
  for (size_t K : ks) {
    std::vector<size_t> hits(N, 0), total(N, 0);
    for (const auto& im : images) {
      for (const auto& g : im.rec->gt_triplets) total[size_t(g.predicate_id)]++;
      std::vector<bool> used(im.rec->gt_triplets.size(), false);
      size_t considered = 0;
      for (const auto& cand : im.ranked) {
        if (considered++ >= K) break;
        for (size_t gi = 0; gi < im.rec->gt_triplets.size(); ++gi) {
          if (used[gi]) continue;
          const auto& g = im.rec->gt_triplets[gi];
          if (g.predicate_id != cand.predicate) continue;
          const auto& so = im.rec->objects[size_t(g.subject_idx)];
          const auto& oo = im.rec->objects[size_t(g.object_idx)];
          if (so.class_id != cand.subject_class || oo.class_id != cand.object_class)
            continue;
          bool loc_ok;
          if (task == TaskProtocol::SGDet) {
            loc_ok = iou(cand.subject_box, so.bbox) >= iou_thr &&
                     iou(cand.object_box, oo.bbox) >= iou_thr;
          } else {
            loc_ok = cand.subject == g.subject_idx && cand.object == g.object_idx;
          }
          if (!loc_ok) continue;
          used[gi] = true;
          hits[size_t(g.predicate_id)]++;
          break;
        }
      }
    }
    double sum = 0;
    size_t n = 0;
    for (size_t p = 0; p < N; ++p) {
      if (total[p] == 0) continue;
      sum += double(hits[p]) / double(total[p]);
      ++n;
    }
    result.push_back(n == 0 ? 0.0 : sum / double(n));
  }
  return result;
}

ImageRecord micro_record(Rng& rng, size_t max_objects, size_t num_classes,
                         size_t num_predicates) {
  ImageRecord rec;
  rec.image_id = cat("micro_", rng.next_u64() % 1000);
  rec.width = rec.height = 50;
  const size_t M = 2 + rng.below(max_objects - 1);
  for (size_t i = 0; i < M; ++i) {
    ObjectInstance o;
    o.class_id = int(rng.below(num_classes));
    const double x0 = rng.uniform(0, 30), y0 = rng.uniform(0, 30);
    o.bbox = BBox{x0, y0, x0 + rng.uniform(5, 19), y0 + rng.uniform(5, 19)};
    o.feature_map = Tensor<float>({kFeatureSide, kFeatureSide});
    rec.objects.push_back(std::move(o));
  }
  const size_t T = 1 + rng.below(4);
  for (size_t ti = 0; ti < T; ++ti) {
    const int s = int(rng.below(M));
    int o = int(rng.below(M));
    if (o == s) o = (s + 1) % int(M);
    rec.gt_triplets.push_back(
        RelationTriplet{s, o, int(1 + rng.below(num_predicates - 1))});
  }
  return rec;
}

}  // namespace

TEST_CASE("rank_triplets: ordering and stable ties") {
  CandidateTriplet a, b, c;
  a.subject = 0; a.object = 1; a.confidence = 0.9;
  b.subject = 1; b.object = 0; b.confidence = 0.2;
  c.subject = 0; c.object = 2; c.confidence = 0.9;

  SECTION("single pair") {
    auto r = rank_triplets({a});
    REQUIRE(r.size() == 1);
  }
  SECTION("two pairs ordered by confidence") {
    auto r = rank_triplets({b, a});
    REQUIRE(r[0].confidence == 0.9);
    REQUIRE(r[1].confidence == 0.2);
  }
  SECTION("ties break by (subject, object)") {
    auto r = rank_triplets({c, b, a});
    REQUIRE(r[0].subject == 0);
    REQUIRE(r[0].object == 1);  // (0,1) before (0,2) at equal confidence
    REQUIRE(r[1].object == 2);
  }
  SECTION("random lists match a sort oracle") {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<CandidateTriplet> cands;
      for (int i = 0; i < 6; ++i) {
        CandidateTriplet t;
        t.subject = int(rng.below(3));
        t.object = int(rng.below(3));
        t.confidence = double(rng.below(3)) * 0.25;  // force ties
        cands.push_back(t);
      }
      auto ranked = rank_triplets(cands);
      for (size_t i = 1; i < ranked.size(); ++i) {
        const auto& p = ranked[i - 1];
        const auto& q = ranked[i];
        const bool ok = p.confidence > q.confidence ||
                        (p.confidence == q.confidence &&
                         (p.subject < q.subject ||
                          (p.subject == q.subject && p.object <= q.object)));
        REQUIRE(ok);
      }
    }
  }
}

TEST_CASE("match_triplets: forced cases") {
  Rng rng(5);
  ImageRecord rec = micro_record(rng, 4, 3, 5);

  SECTION("perfect predictions hit everything at K >= |GT|") {
    std::vector<CandidateTriplet> cands;
    for (const auto& g : rec.gt_triplets) {
      CandidateTriplet c;
      c.subject = g.subject_idx;
      c.object = g.object_idx;
      c.predicate = g.predicate_id;
      c.subject_class = rec.objects[size_t(g.subject_idx)].class_id;
      c.object_class = rec.objects[size_t(g.object_idx)].class_id;
      c.subject_box = rec.objects[size_t(g.subject_idx)].bbox;
      c.object_box = rec.objects[size_t(g.object_idx)].bbox;
      c.confidence = 0.5;
      cands.push_back(c);
    }
    auto hits = match_triplets(rec, rank_triplets(cands), 20, TaskProtocol::PredCls,
                               0.5, 5);
    size_t total = 0;
    for (size_t h : hits) total += h;
    REQUIRE(total == rec.gt_triplets.size());
  }

  SECTION("no predictions, no hits") {
    auto hits = match_triplets(rec, {}, 20, TaskProtocol::PredCls, 0.5, 5);
    for (size_t h : hits) REQUIRE(h == 0);
  }

  SECTION("top-K truncation counts only what fits") {
    ImageRecord two;
    two.image_id = "two";
    two.width = two.height = 50;
    for (int i = 0; i < 3; ++i) {
      ObjectInstance o;
      o.class_id = i;
      o.bbox = BBox{double(i) * 10, 5, double(i) * 10 + 8, 15};
      o.feature_map = Tensor<float>({kFeatureSide, kFeatureSide});
      two.objects.push_back(std::move(o));
    }
    two.gt_triplets = {RelationTriplet{0, 1, 1}, RelationTriplet{1, 2, 2}};
    CandidateTriplet good1, filler, good2;
    auto fill = [&](CandidateTriplet& c, int s, int o, int p, double conf) {
      c.subject = s;
      c.object = o;
      c.predicate = p;
      c.subject_class = two.objects[size_t(s)].class_id;
      c.object_class = two.objects[size_t(o)].class_id;
      c.confidence = conf;
    };
    fill(good1, 0, 1, 1, 0.9);
    fill(filler, 2, 0, 3, 0.8);
    fill(good2, 1, 2, 2, 0.7);
    auto ranked = rank_triplets({good1, filler, good2});
    auto hits = match_triplets(two, ranked, 2, TaskProtocol::PredCls, 0.5, 5);
    REQUIRE(hits[1] == 1);
    REQUIRE(hits[2] == 0);  // fell outside top-2
  }
}

TEST_CASE("mean recall: trivial values") {
  EvalReport rep;
  rep.ks = {50};
  rep.gt_counts = {0, 4, 2, 0};
  rep.hits_at[50] = {0, 4, 0, 0};
  REQUIRE(rep.recall(50, 1) == 1.0);
  REQUIRE(rep.recall(50, 2) == 0.0);
  REQUIRE(rep.mean_recall(50) == 0.5);  // predicates 1 and 2 only

  EvalReport eq;
  eq.ks = {50};
  eq.gt_counts = {0, 4, 8};
  eq.hits_at[50] = {0, 1, 2};
  REQUIRE(eq.mean_recall(50) == 0.25);  // all recalls equal r -> mR = r
}

TEST_CASE("metric oracle: 100 randomized micro-datasets, all protocols") {
  Rng rng(11);
  const size_t N = 5;
  const std::vector<size_t> ks = {20, 50, 100};
  for (int ds_trial = 0; ds_trial < 100; ++ds_trial) {
    const TaskProtocol task = TaskProtocol(ds_trial % 3);
    std::vector<ImageRecord> recs;
    std::vector<BruteImage> brute;
    const size_t images = 2 + rng.below(4);
    for (size_t im = 0; im < images; ++im) recs.push_back(micro_record(rng, 4, 3, N));

    // synthesize ranked candidates with class/box noise
    std::vector<std::vector<CandidateTriplet>> per_image;
    for (auto& rec : recs) {
      std::vector<CandidateTriplet> cands;
      for (size_t i = 0; i < rec.objects.size(); ++i) {
        for (size_t j = 0; j < rec.objects.size(); ++j) {
          if (i == j || rng.uniform() < 0.25) continue;
          CandidateTriplet c;
          c.subject = int(i);
          c.object = int(j);
          c.predicate = int(1 + rng.below(N - 1));
          c.subject_class = rng.uniform() < 0.8
                                ? rec.objects[i].class_id
                                : int(rng.below(3));
          c.object_class = rng.uniform() < 0.8 ? rec.objects[j].class_id
                                               : int(rng.below(3));
          c.subject_box = rec.objects[i].bbox;
          c.object_box = rec.objects[j].bbox;
          if (task == TaskProtocol::SGDet && rng.uniform() < 0.5) {
            c.subject_box.xmin += rng.uniform(0, 12);  // may break the IoU match
            c.subject_box.xmax += rng.uniform(0, 12);
          }
          c.confidence = rng.uniform(0, 1);
          cands.push_back(c);
        }
      }
      per_image.push_back(rank_triplets(cands));
    }

    // pipeline-side aggregation
    EvalReport rep;
    rep.ks = ks;
    rep.gt_counts.assign(N, 0);
    for (size_t K : ks) rep.hits_at[K].assign(N, 0);
    for (size_t im = 0; im < recs.size(); ++im) {
      for (const auto& g : recs[im].gt_triplets) rep.gt_counts[size_t(g.predicate_id)]++;
      for (size_t K : ks) {
        auto hits = match_triplets(recs[im], per_image[im], K, task, 0.5, N);
        for (size_t p = 0; p < N; ++p) rep.hits_at[K][p] += hits[p];
      }
      brute.push_back(BruteImage{&recs[im], per_image[im]});
    }
    auto oracle = brute_mean_recall(brute, ks, N, task, 0.5);
    for (size_t ki = 0; ki < ks.size(); ++ki)
      REQUIRE(rep.mean_recall(ks[ki]) == oracle[ki]);  // exact

    // recall is monotone non-decreasing in K per predicate
    for (size_t p = 0; p < N; ++p) {
      REQUIRE(rep.hits_at[20][p] <= rep.hits_at[50][p]);
      REQUIRE(rep.hits_at[50][p] <= rep.hits_at[100][p]);
    }
  }
}

TEST_CASE("SGDet with IoU 1.0 and exact boxes reduces to SGCls hits") {
  Rng rng(17);
  for (int trial = 0; trial < 25; ++trial) {
    ImageRecord rec = micro_record(rng, 4, 3, 5);
    std::vector<CandidateTriplet> cands;
    for (size_t i = 0; i < rec.objects.size(); ++i)
      for (size_t j = 0; j < rec.objects.size(); ++j) {
        if (i == j) continue;
        CandidateTriplet c;
        c.subject = int(i);
        c.object = int(j);
        c.predicate = int(1 + rng.below(4));
        c.subject_class = rec.objects[i].class_id;
        c.object_class = rec.objects[j].class_id;
        c.subject_box = rec.objects[i].bbox;  // exact boxes
        c.object_box = rec.objects[j].bbox;
        c.confidence = rng.uniform(0, 1);
        cands.push_back(c);
      }
    auto ranked = rank_triplets(cands);
    auto sgcls = match_triplets(rec, ranked, 50, TaskProtocol::SGCls, 0.5, 5);
    auto sgdet = match_triplets(rec, ranked, 50, TaskProtocol::SGDet, 1.0, 5);
    REQUIRE(sgcls == sgdet);
  }
}

TEST_CASE("protocol inputs: determinism and PredCls passthrough") {
  WorldSpec w = tiny_world();
  Dataset ds = generate(w, 4, 3);
  EvalOptions opt;
  opt.seed = 9;

  opt.task = TaskProtocol::PredCls;
  auto a = protocol_inputs(ds.records[0], 0, ds.num_classes(), opt);
  for (size_t i = 0; i < a.input_classes.size(); ++i) {
    REQUIRE(a.input_classes[i] == ds.records[0].objects[i].class_id);
    REQUIRE(a.boxes[i].xmin == ds.records[0].objects[i].bbox.xmin);
  }

  opt.task = TaskProtocol::SGDet;
  auto b1 = protocol_inputs(ds.records[1], 1, ds.num_classes(), opt);
  auto b2 = protocol_inputs(ds.records[1], 1, ds.num_classes(), opt);
  for (size_t i = 0; i < b1.boxes.size(); ++i) {
    REQUIRE(b1.boxes[i].xmin == b2.boxes[i].xmin);
    REQUIRE(b1.input_classes[i] == b2.input_classes[i]);
    // jittered boxes stay valid
    REQUIRE(b1.boxes[i].xmin < b1.boxes[i].xmax);
    REQUIRE(b1.boxes[i].ymin < b1.boxes[i].ymax);
    REQUIRE(b1.boxes[i].xmin >= 0);
    REQUIRE(b1.boxes[i].xmax <= ds.records[1].width);
  }

  // class corruption happens at roughly the configured rate
  opt.task = TaskProtocol::SGCls;
  opt.det_class_error = 0.5;
  size_t flips = 0, total = 0;
  for (size_t i = 0; i < ds.records.size(); ++i) {
    auto s = protocol_inputs(ds.records[i], i, ds.num_classes(), opt);
    for (size_t k = 0; k < s.input_classes.size(); ++k) {
      ++total;
      if (s.input_classes[k] != ds.records[i].objects[k].class_id) ++flips;
    }
  }
  REQUIRE(flips > 0);
  REQUIRE(flips < total);
}

TEST_CASE("TDE-only and LBL agree on every sample the gate calls certain") {
  WorldSpec w = tiny_world();
  w.num_classes = 4;
  w.num_predicates = 6;
  w.tail_support_max = 3;
  Dataset ds = generate(w, 6, 3);
  ModelConfig mc;
  mc.num_classes = 4;
  mc.num_predicates = 6;
  mc.use_oem = false;
  mc.init_seed = 3;
  SggModel<float> M(mc, ClassEmbeddingTable::built_in(ds.class_names));
  auto base = compute_baselines(M, ds);
  LblConfig lbl;
  lbl.k = 3;
  lbl.v_threshold = 0.0;  // gate always certain
  lbl.baselines = base;
  std::vector<size_t> idx = {0, 1, 2, 3, 4, 5};
  EvalOptions opt;
  opt.task = TaskProtocol::PredCls;
  auto reports = evaluate_strategies(M, ds, idx, lbl, opt,
                                     {Strategy::Tde, Strategy::Lbl});
  for (size_t K : {20ul, 50ul, 100ul}) {
    REQUIRE(reports[0].hits_at.at(K) == reports[1].hits_at.at(K));
  }
}
