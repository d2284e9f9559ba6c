#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sgg/common.hpp"
#include "sgg/random.hpp"
#include "sgg/tensor.hpp"

namespace sgg {

enum class Init { XavierUniform, Zero, One };

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;  // accumulated over one step, zeroed afterwards
  Tensor<T> m, v;  // AdamW moment slots, allocated on first optimizer step
  bool trainable = true;
};

// Owns every learned tensor of a model. Initialization streams are keyed by
// (seed, parameter name) so values do not depend on creation order.
template <class T>
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed = 0) : seed_(seed) {}

  Parameter<T>& create(const std::string& name, std::vector<size_t> shape,
                       Init init = Init::XavierUniform, size_t fan_in = 0,
                       size_t fan_out = 0) {
    require<ValidationError>(!index_.count(name), "duplicate parameter '", name, "'");
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->value = Tensor<T>(std::move(shape));
    p->grad = Tensor<T>(p->value.shape());
    switch (init) {
      case Init::Zero:
        break;
      case Init::One:
        std::fill(p->value.data(), p->value.data() + p->value.size(), T(1));
        break;
      case Init::XavierUniform: {
        if (fan_in == 0 || fan_out == 0) {
          // Default for [in, out] matrices; vectors fall back to their length.
          if (p->value.ndim() >= 2) {
            fan_in = p->value.dim(0);
            fan_out = p->value.size() / p->value.dim(0);
          } else {
            fan_in = fan_out = p->value.size();
          }
        }
        const double a = std::sqrt(6.0 / double(fan_in + fan_out));
        Rng rng(seed_ ^ fnv1a64(name));
        for (size_t i = 0; i < p->value.size(); ++i)
          p->value[i] = T(rng.uniform(-a, a));
        break;
      }
    }
    Parameter<T>* raw = p.get();
    index_[name] = items_.size();
    items_.push_back(std::move(p));
    return *raw;
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
  }

  size_t size() const { return items_.size(); }
  Parameter<T>& at(size_t i) { return *items_[i]; }
  const Parameter<T>& at(size_t i) const { return *items_[i]; }

  size_t total_values() const {
    size_t n = 0;
    for (const auto& p : items_) n += p->value.size();
    return n;
  }

  void zero_grads() {
    for (auto& p : items_)
      std::fill(p->grad.data(), p->grad.data() + p->grad.size(), T(0));
  }

  // Checkpoint: flat binary of (name, shape, little-endian float32 data)
  // records plus a text manifest of names and shapes at <path>.manifest.
  void save(const std::string& path) const {
    static_assert(std::endian::native == std::endian::little,
                  "checkpoint writer assumes a little-endian host");
    std::ofstream out(path, std::ios::binary);
    require<IoError>(bool(out), "cannot open '", path, "' for writing");
    const char magic[8] = {'S', 'G', 'C', 'K', 'P', 'T', '1', '\n'};
    out.write(magic, 8);
    write_u64(out, items_.size());
    for (const auto& p : items_) {
      write_u64(out, p->name.size());
      out.write(p->name.data(), std::streamsize(p->name.size()));
      write_u64(out, p->value.ndim());
      for (size_t d : p->value.shape()) write_u64(out, d);
      std::vector<float> buf(p->value.size());
      for (size_t i = 0; i < buf.size(); ++i) buf[i] = float(p->value[i]);
      out.write(reinterpret_cast<const char*>(buf.data()),
                std::streamsize(buf.size() * sizeof(float)));
    }
    require<IoError>(bool(out), "short write to '", path, "'");
    std::ofstream man(path + ".manifest");
    require<IoError>(bool(man), "cannot open '", path, ".manifest' for writing");
    for (const auto& p : items_) {
      man << p->name;
      for (size_t d : p->value.shape()) man << ' ' << d;
      man << '\n';
    }
  }

  // Loads values into already-created parameters; names and shapes must
  // match exactly.
  void load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require<IoError>(bool(in), "cannot open checkpoint '", path, "'");
    char magic[8];
    in.read(magic, 8);
    require<IoError>(in && std::memcmp(magic, "SGCKPT1\n", 8) == 0,
                     "'", path, "' is not a checkpoint file");
    const uint64_t count = read_u64(in, path);
    require<IoError>(count == items_.size(), "checkpoint '", path, "' has ",
                     count, " parameters, model has ", items_.size());
    for (uint64_t i = 0; i < count; ++i) {
      const uint64_t name_len = read_u64(in, path);
      std::string name(name_len, '\0');
      in.read(name.data(), std::streamsize(name_len));
      Parameter<T>* p = find(name);
      require<IoError>(p != nullptr, "checkpoint parameter '", name,
                       "' not present in model");
      const uint64_t ndim = read_u64(in, path);
      std::vector<size_t> shape(ndim);
      for (auto& d : shape) d = read_u64(in, path);
      require<IoError>(shape == p->value.shape(), "checkpoint shape mismatch for '",
                       name, "'");
      std::vector<float> buf(p->value.size());
      in.read(reinterpret_cast<char*>(buf.data()),
              std::streamsize(buf.size() * sizeof(float)));
      require<IoError>(bool(in), "truncated checkpoint '", path, "'");
      for (size_t j = 0; j < buf.size(); ++j) p->value[j] = T(buf[j]);
    }
  }

  uint64_t seed() const { return seed_; }

 private:
  static void write_u64(std::ofstream& out, uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  static uint64_t read_u64(std::ifstream& in, const std::string& path) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    require<IoError>(bool(in), "truncated checkpoint '", path, "'");
    return v;
  }

  uint64_t seed_;
  std::vector<std::unique_ptr<Parameter<T>>> items_;
  std::map<std::string, size_t> index_;
};

}  // namespace sgg
