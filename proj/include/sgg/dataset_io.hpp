#pragma once

#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "sgg/base64.hpp"
#include "sgg/model.hpp"

namespace sgg {

// JSON-lines dataset format. Line 1 is a header naming the label spaces:
//   {"classes":[...],"predicates":[...]}
// Every following line is one image record:
//   {"image_id":"...","width":W,"height":H,
//    "objects":[{"class_id":c,"bbox":[x0,y0,x1,y1],"feature_b64":"..."}],
//    "triplets":[{"s":i,"o":j,"p":k}]}
// feature_b64 holds the 64x64 feature map as base64 of little-endian
// float32 in row-major order. Serialization uses nlohmann's sorted object
// keys and shortest-round-trip floats, so saving the same dataset twice
// produces byte-identical files.

namespace io_detail {

inline std::string encode_feature(const Tensor<float>& fm) {
  static_assert(sizeof(float) == 4);
  return base64_encode(reinterpret_cast<const uint8_t*>(fm.data()), fm.size() * 4);
}

inline Tensor<float> decode_feature(const std::string& b64) {
  const auto bytes = base64_decode(b64);
  require<ParseError>(bytes.size() == kFlatFeature * 4, "feature_b64 decodes to ",
                      bytes.size(), " bytes, expected ", kFlatFeature * 4);
  Tensor<float> fm({kFeatureSide, kFeatureSide});
  std::memcpy(fm.data(), bytes.data(), bytes.size());
  return fm;
}

}  // namespace io_detail

inline nlohmann::json record_to_json(const ImageRecord& rec) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : rec.objects) {
    objs.push_back({{"class_id", o.class_id},
                    {"bbox", {o.bbox.xmin, o.bbox.ymin, o.bbox.xmax, o.bbox.ymax}},
                    {"feature_b64", io_detail::encode_feature(o.feature_map)}});
  }
  nlohmann::json trips = nlohmann::json::array();
  for (const auto& t : rec.gt_triplets)
    trips.push_back({{"s", t.subject_idx}, {"o", t.object_idx}, {"p", t.predicate_id}});
  return {{"image_id", rec.image_id}, {"width", rec.width},   {"height", rec.height},
          {"objects", objs},          {"triplets", trips}};
}

inline ImageRecord record_from_json(const nlohmann::json& j) {
  ImageRecord rec;
  rec.image_id = j.at("image_id").get<std::string>();
  rec.width = j.at("width").get<double>();
  rec.height = j.at("height").get<double>();
  for (const auto& jo : j.at("objects")) {
    ObjectInstance o;
    o.class_id = jo.at("class_id").get<int>();
    const auto& bb = jo.at("bbox");
    require<ParseError>(bb.is_array() && bb.size() == 4, "bbox must have 4 entries");
    o.bbox = BBox{bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(),
                  bb[3].get<double>()};
    o.feature_map = io_detail::decode_feature(jo.at("feature_b64").get<std::string>());
    rec.objects.push_back(std::move(o));
  }
  for (const auto& jt : j.at("triplets")) {
    rec.gt_triplets.push_back(RelationTriplet{jt.at("s").get<int>(),
                                              jt.at("o").get<int>(),
                                              jt.at("p").get<int>()});
  }
  return rec;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
  validate_dataset(ds);
  std::ofstream out(path, std::ios::binary);
  require<IoError>(bool(out), "cannot open '", path, "' for writing");
  nlohmann::json header = {{"classes", ds.class_names},
                           {"predicates", ds.predicate_names}};
  out << header.dump() << '\n';
  for (const auto& rec : ds.records) out << record_to_json(rec).dump() << '\n';
  require<IoError>(bool(out), "short write to '", path, "'");
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require<IoError>(bool(in), "cannot open dataset '", path, "'");
  Dataset ds;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(cat(path, ":", lineno, ": malformed JSON line: ", e.what()));
    }
    try {
      if (lineno == 1) {
        ds.class_names = j.at("classes").get<std::vector<std::string>>();
        ds.predicate_names = j.at("predicates").get<std::vector<std::string>>();
      } else {
        ds.records.push_back(record_from_json(j));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(cat(path, ":", lineno, ": ", e.what()));
    }
  }
  require<ParseError>(lineno >= 1, "dataset '", path, "' is empty (missing header line)");
  require<ValidationError>(!ds.class_names.empty() && !ds.predicate_names.empty(),
                           "dataset header names no classes/predicates");
  validate_dataset(ds);
  return ds;
}

// DOT digraph of one scene: one node per object labeled with its class name,
// one labeled edge per predicted triplet.
inline std::string export_dot(const ImageRecord& rec,
                              const std::vector<RelationTriplet>& predictions,
                              const std::vector<std::string>& class_names,
                              const std::vector<std::string>& predicate_names) {
  auto escape = [](const std::string& s) {
    std::string out;
    for (char c : s) {
      if (c == '"' || c == '\\') out.push_back('\\');
      out.push_back(c);
    }
    return out;
  };
  for (size_t i = 0; i < predictions.size(); ++i) {
    const auto& p = predictions[i];
    require<ValidationError>(
        p.subject_idx >= 0 && size_t(p.subject_idx) < rec.objects.size() &&
            p.object_idx >= 0 && size_t(p.object_idx) < rec.objects.size(),
        "prediction ", i, ": dangling object index");
    require<ValidationError>(p.predicate_id >= 0 &&
                                 size_t(p.predicate_id) < predicate_names.size(),
                             "prediction ", i, ": predicate id out of range");
  }
  std::string out = "digraph scene {\n";
  for (size_t i = 0; i < rec.objects.size(); ++i) {
    const int cid = rec.objects[i].class_id;
    require<ValidationError>(cid >= 0 && size_t(cid) < class_names.size(),
                             "object ", i, ": class id out of range");
    out += cat("  o", i, " [label=\"", escape(class_names[cid]), " #", i, "\"];\n");
  }
  for (const auto& p : predictions) {
    out += cat("  o", p.subject_idx, " -> o", p.object_idx, " [label=\"",
               escape(predicate_names[p.predicate_id]), "\"];\n");
  }
  out += "}\n";
  return out;
}

}  // namespace sgg
