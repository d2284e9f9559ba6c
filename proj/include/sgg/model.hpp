#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "sgg/common.hpp"
#include "sgg/tensor.hpp"

namespace sgg {

// Object visual features are fixed-size square grids.
constexpr size_t kFeatureSide = 64;
constexpr size_t kPatchSide = 8;
constexpr size_t kPatchCount = (kFeatureSide / kPatchSide) * (kFeatureSide / kPatchSide);
constexpr size_t kPatchDim = kPatchSide * kPatchSide;
constexpr size_t kFlatFeature = kFeatureSide * kFeatureSide;  // 4096

constexpr size_t kClassEmbedDim = 300;
constexpr size_t kEnhancedDim = 4096;
constexpr size_t kObjectDim = 2048;

struct BBox {
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
};

inline double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin));
  const double iy = std::max(0.0, std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline BBox union_box(const BBox& a, const BBox& b) {
  return BBox{std::min(a.xmin, b.xmin), std::min(a.ymin, b.ymin),
              std::max(a.xmax, b.xmax), std::max(a.ymax, b.ymax)};
}

struct ObjectInstance {
  int class_id = 0;
  BBox bbox;
  Tensor<float> feature_map;  // [kFeatureSide, kFeatureSide]
};

struct RelationTriplet {
  int subject_idx = 0;
  int object_idx = 0;
  int predicate_id = 0;
};

struct ImageRecord {
  std::string image_id;
  double width = 0, height = 0;
  std::vector<ObjectInstance> objects;
  std::vector<RelationTriplet> gt_triplets;
};

struct Dataset {
  std::vector<ImageRecord> records;
  std::vector<std::string> class_names;
  std::vector<std::string> predicate_names;  // index 0 is the background class

  size_t num_classes() const { return class_names.size(); }
  size_t num_predicates() const { return predicate_names.size(); }
};

// Invariant checks. Errors name the offending record and field.
inline void validate_record(const ImageRecord& rec, size_t num_classes,
                            size_t num_predicates) {
  auto fail = [&](const std::string& what) {
    throw ValidationError(cat("record '", rec.image_id, "': ", what));
  };
  if (!(rec.width > 0) || !(rec.height > 0))
    fail(cat("width/height must be positive, got ", rec.width, "x", rec.height));
  for (size_t i = 0; i < rec.objects.size(); ++i) {
    const auto& obj = rec.objects[i];
    const auto& b = obj.bbox;
    if (!(b.xmin < b.xmax))
      fail(cat("object ", i, ": bbox xmin (", b.xmin, ") must be < xmax (", b.xmax, ")"));
    if (!(b.ymin < b.ymax))
      fail(cat("object ", i, ": bbox ymin (", b.ymin, ") must be < ymax (", b.ymax, ")"));
    if (b.xmin < 0 || b.ymin < 0 || b.xmax > rec.width || b.ymax > rec.height)
      fail(cat("object ", i, ": bbox outside image bounds"));
    if (obj.class_id < 0 || size_t(obj.class_id) >= num_classes)
      fail(cat("object ", i, ": class_id ", obj.class_id, " out of [0,", num_classes, ")"));
    if (!obj.feature_map.defined() ||
        obj.feature_map.shape() != std::vector<size_t>{kFeatureSide, kFeatureSide})
      fail(cat("object ", i, ": feature_map must be ", kFeatureSide, "x", kFeatureSide));
  }
  for (size_t i = 0; i < rec.gt_triplets.size(); ++i) {
    const auto& tr = rec.gt_triplets[i];
    if (tr.subject_idx < 0 || size_t(tr.subject_idx) >= rec.objects.size())
      fail(cat("triplet ", i, ": subject index ", tr.subject_idx, " out of range"));
    if (tr.object_idx < 0 || size_t(tr.object_idx) >= rec.objects.size())
      fail(cat("triplet ", i, ": object index ", tr.object_idx, " out of range"));
    if (tr.subject_idx == tr.object_idx)
      fail(cat("triplet ", i, ": self-relation on object ", tr.subject_idx));
    if (tr.predicate_id < 0 || size_t(tr.predicate_id) >= num_predicates)
      fail(cat("triplet ", i, ": predicate_id ", tr.predicate_id, " out of [0,",
               num_predicates, ")"));
  }
}

inline void validate_dataset(const Dataset& ds) {
  require<ValidationError>(!ds.class_names.empty(), "dataset has no class names");
  require<ValidationError>(!ds.predicate_names.empty(), "dataset has no predicate names");
  for (const auto& rec : ds.records)
    validate_record(rec, ds.num_classes(), ds.num_predicates());
}

}  // namespace sgg
