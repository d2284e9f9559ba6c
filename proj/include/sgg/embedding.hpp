#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sgg/common.hpp"
#include "sgg/model.hpp"
#include "sgg/random.hpp"
#include "sgg/tensor.hpp"

namespace sgg {

// 300-d class word embeddings. The default table is deterministic: each row
// is drawn from a stream seeded by a stable hash of the class-name string,
// so it depends on nothing but the names. A loader for text-format vector
// files ("word v1 ... v300") covers externally trained embeddings.
class ClassEmbeddingTable {
 public:
  enum class Source { BuiltIn, File };

  static ClassEmbeddingTable built_in(const std::vector<std::string>& class_names) {
    ClassEmbeddingTable tab;
    tab.source_ = Source::BuiltIn;
    tab.rows_ = Tensor<float>({class_names.size(), kClassEmbedDim});
    for (size_t c = 0; c < class_names.size(); ++c) {
      Rng rng(fnv1a64(class_names[c]));
      for (size_t j = 0; j < kClassEmbedDim; ++j)
        tab.rows_[c * kClassEmbedDim + j] = float(rng.uniform(-0.5, 0.5));
    }
    return tab;
  }

  static ClassEmbeddingTable from_file(const std::string& path,
                                       const std::vector<std::string>& class_names) {
    std::ifstream in(path);
    require<IoError>(bool(in), "cannot open embedding file '", path, "'");
    std::map<std::string, std::vector<float>> vecs;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string word;
      ss >> word;
      std::vector<float> v;
      double x;
      while (ss >> x) v.push_back(float(x));
      require<ParseError>(v.size() == kClassEmbedDim, path, ":", lineno, ": word '",
                          word, "' has ", v.size(), " values, expected ",
                          kClassEmbedDim);
      vecs[word] = std::move(v);
    }
    ClassEmbeddingTable tab;
    tab.source_ = Source::File;
    tab.rows_ = Tensor<float>({class_names.size(), kClassEmbedDim});
    for (size_t c = 0; c < class_names.size(); ++c) {
      auto it = vecs.find(class_names[c]);
      require<ValidationError>(it != vecs.end(), "embedding file '", path,
                               "' has no vector for class '", class_names[c], "'");
      for (size_t j = 0; j < kClassEmbedDim; ++j)
        tab.rows_[c * kClassEmbedDim + j] = it->second[j];
    }
    return tab;
  }

  size_t num_classes() const { return rows_.dim(0); }
  Source source() const { return source_; }

  // Row lookup; the spec-level embed_class operation.
  const float* row(int class_id) const {
    require<ValidationError>(class_id >= 0 && size_t(class_id) < num_classes(),
                             "embed_class: class id ", class_id, " out of [0,",
                             num_classes(), ")");
    return rows_.data() + size_t(class_id) * kClassEmbedDim;
  }

 private:
  Source source_ = Source::BuiltIn;
  Tensor<float> rows_;
};

}  // namespace sgg
