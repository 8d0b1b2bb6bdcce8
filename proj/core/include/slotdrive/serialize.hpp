#pragma once

// Binary checkpoint container: magic "SDC1", a JSON config echo, and named
// dtype-tagged n-d arrays. Little-endian throughout. Model weights, optimizer
// state, and codebooks all travel in this one format.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "slotdrive/common.hpp"
#include "slotdrive/layers.hpp"
#include "slotdrive/tensor.hpp"

namespace slotdrive::ser {

enum class DType : uint8_t { kF32 = 0, kF64 = 1, kI32 = 2, kI64 = 3, kU8 = 4 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::kF32; }
template <>
constexpr DType dtype_of<double>() { return DType::kF64; }
template <>
constexpr DType dtype_of<int32_t>() { return DType::kI32; }
template <>
constexpr DType dtype_of<int64_t>() { return DType::kI64; }
template <>
constexpr DType dtype_of<uint8_t>() { return DType::kU8; }

inline size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kI32: return 4;
    case DType::kI64: return 8;
    case DType::kU8: return 1;
  }
  return 0;
}

struct NamedArray {
  std::string name;
  DType dtype = DType::kF32;
  std::vector<int64_t> dims;
  std::vector<uint8_t> bytes;

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : dims) n *= d;
    return n;
  }
};

struct Checkpoint {
  nlohmann::json config;
  std::vector<NamedArray> arrays;  // insertion order preserved on disk

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }

  template <typename T>
  void add(const std::string& name, const nn::Tensor<T>& t) {
    SD_CHECK(find(name) == nullptr, ConfigError,
             "duplicate checkpoint array '" << name << "'");
    NamedArray a;
    a.name = name;
    a.dtype = dtype_of<T>();
    a.dims.assign(t.shape.begin(), t.shape.end());
    a.bytes.resize(t.data.size() * sizeof(T));
    std::memcpy(a.bytes.data(), t.data.data(), a.bytes.size());
    arrays.push_back(std::move(a));
  }

  // Exact-dtype fetch.
  template <typename T>
  nn::Tensor<T> get(const std::string& name) const {
    const NamedArray* a = find(name);
    SD_CHECK(a != nullptr, IoError, "checkpoint array '" << name << "' missing");
    SD_CHECK(a->dtype == dtype_of<T>(), IoError,
             "checkpoint array '" << name << "' dtype mismatch");
    nn::Tensor<T> t(nn::Shape(a->dims.begin(), a->dims.end()));
    SD_CHECK(t.data.size() * sizeof(T) == a->bytes.size(), IoError,
             "checkpoint array '" << name << "' size mismatch");
    std::memcpy(t.data.data(), a->bytes.data(), a->bytes.size());
    return t;
  }

  // Float fetch with f32<->f64 conversion (checkpoints record the trained
  // dtype; readers may run at either precision).
  template <typename T>
  nn::Tensor<T> get_floating(const std::string& name) const {
    const NamedArray* a = find(name);
    SD_CHECK(a != nullptr, IoError, "checkpoint array '" << name << "' missing");
    if (a->dtype == dtype_of<T>()) return get<T>(name);
    nn::Tensor<T> t(nn::Shape(a->dims.begin(), a->dims.end()));
    if (a->dtype == DType::kF32) {
      const float* src = reinterpret_cast<const float*>(a->bytes.data());
      for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<T>(src[i]);
    } else if (a->dtype == DType::kF64) {
      const double* src = reinterpret_cast<const double*>(a->bytes.data());
      for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<T>(src[i]);
    } else {
      SD_CHECK(false, IoError, "checkpoint array '" << name << "' is not floating");
    }
    return t;
  }
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Registry adapters: parameters in, parameters back out (strict name match).
template <typename T>
void add_params(Checkpoint& ck, const nn::ParamRegistry<T>& reg,
                const std::string& prefix = "") {
  for (const auto& [name, p] : reg.named) ck.add(prefix + name, p->value);
}

template <typename T>
void load_params(const Checkpoint& ck, nn::ParamRegistry<T>& reg,
                 const std::string& prefix = "") {
  for (auto& [name, p] : reg.named) {
    nn::Tensor<T> t = ck.get_floating<T>(prefix + name);
    SD_CHECK(t.shape == p->value.shape, ShapeMismatch,
             "checkpoint array '" << prefix + name << "' shape mismatch");
    p->value = std::move(t);
  }
}

}  // namespace slotdrive::ser
