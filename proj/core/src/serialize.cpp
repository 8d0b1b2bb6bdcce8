#include "slotdrive/serialize.hpp"

#include <cstring>
#include <fstream>

namespace slotdrive::ser {

namespace {

constexpr char kMagic[4] = {'S', 'D', 'C', '1'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const uint8_t*& p, const uint8_t* end) {
  SD_CHECK(p + sizeof(T) <= end, IoError, "truncated checkpoint");
  T v;
  std::memcpy(&v, p, sizeof(T));
  p += sizeof(T);
  return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::string out;
  out.append(kMagic, 4);
  put<uint32_t>(out, kVersion);

  const std::string cfg = ck.config.dump();
  put<uint64_t>(out, cfg.size());
  out += cfg;

  put<uint32_t>(out, static_cast<uint32_t>(ck.arrays.size()));
  for (const auto& a : ck.arrays) {
    SD_CHECK(a.name.size() < 65536, ConfigError, "array name too long");
    put<uint16_t>(out, static_cast<uint16_t>(a.name.size()));
    out += a.name;
    put<uint8_t>(out, static_cast<uint8_t>(a.dtype));
    put<uint8_t>(out, static_cast<uint8_t>(a.dims.size()));
    for (int64_t d : a.dims) put<int64_t>(out, d);
    SD_CHECK(a.bytes.size() ==
                 static_cast<size_t>(a.numel()) * dtype_size(a.dtype),
             ConfigError, "array '" << a.name << "' byte size mismatch");
    put<uint64_t>(out, a.bytes.size());
    out.append(reinterpret_cast<const char*>(a.bytes.data()), a.bytes.size());
  }

  std::ofstream os(path, std::ios::binary);
  SD_CHECK(os.good(), IoError, "cannot write " << path);
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  SD_CHECK(os.good(), IoError, "short write to " << path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  SD_CHECK(is.good(), IoError, "cannot read " << path);
  const auto size = static_cast<size_t>(is.tellg());
  is.seekg(0);
  std::vector<uint8_t> buf(size);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  SD_CHECK(is.good(), IoError, "short read from " << path);

  const uint8_t* p = buf.data();
  const uint8_t* end = p + buf.size();
  SD_CHECK(size >= 8 && std::memcmp(p, kMagic, 4) == 0, IoError,
           "bad checkpoint magic in " << path);
  p += 4;
  const auto version = take<uint32_t>(p, end);
  SD_CHECK(version == kVersion, IoError, "unsupported checkpoint version "
                                             << version);

  Checkpoint ck;
  const auto cfg_len = take<uint64_t>(p, end);
  SD_CHECK(p + cfg_len <= end, IoError, "truncated checkpoint config");
  if (cfg_len > 0) {
    ck.config = nlohmann::json::parse(p, p + cfg_len);
    p += cfg_len;
  } else {
    ck.config = nlohmann::json::object();
  }

  const auto n_arrays = take<uint32_t>(p, end);
  ck.arrays.reserve(n_arrays);
  for (uint32_t i = 0; i < n_arrays; ++i) {
    NamedArray a;
    const auto name_len = take<uint16_t>(p, end);
    SD_CHECK(p + name_len <= end, IoError, "truncated array name");
    a.name.assign(reinterpret_cast<const char*>(p), name_len);
    p += name_len;
    const auto dt = take<uint8_t>(p, end);
    SD_CHECK(dt <= static_cast<uint8_t>(DType::kU8), IoError,
             "bad dtype tag " << int(dt));
    a.dtype = static_cast<DType>(dt);
    const auto rank = take<uint8_t>(p, end);
    a.dims.resize(rank);
    for (auto& d : a.dims) {
      d = take<int64_t>(p, end);
      SD_CHECK(d >= 0, IoError, "negative dim in array '" << a.name << "'");
    }
    const auto nbytes = take<uint64_t>(p, end);
    SD_CHECK(nbytes == static_cast<uint64_t>(a.numel()) * dtype_size(a.dtype),
             IoError, "array '" << a.name << "' byte size mismatch");
    SD_CHECK(p + nbytes <= end, IoError, "truncated array data");
    a.bytes.assign(p, p + nbytes);
    p += nbytes;
    ck.arrays.push_back(std::move(a));
  }
  SD_CHECK(p == end, IoError, "trailing bytes in " << path);
  return ck;
}

}  // namespace slotdrive::ser
