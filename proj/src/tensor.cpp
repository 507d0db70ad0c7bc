#include "swm/tensor.hpp"

#include <cstdio>
#include <memory>

namespace swm {

namespace {

constexpr char kMagic[4] = {'M', 'D', 'T', 'N'};
constexpr unsigned char kVersion = 0x01;

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

void put_u64_le(unsigned char* p, uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
}
uint64_t get_u64_le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void save_mdtn_raw(const std::string& path, const std::vector<int64_t>& shape, int dtype,
                   const void* payload, size_t payload_bytes) {
  if (shape.empty() || shape.size() > 255)
    throw IoError("mdtn: unsupported rank " + std::to_string(shape.size()) + " for " + path);
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("mdtn: cannot open " + path + " for writing");
  unsigned char head[7];
  std::memcpy(head, kMagic, 4);
  head[4] = kVersion;
  head[5] = static_cast<unsigned char>(dtype);
  head[6] = static_cast<unsigned char>(shape.size());
  if (std::fwrite(head, 1, 7, f.get()) != 7) throw IoError("mdtn: short write to " + path);
  for (int64_t d : shape) {
    unsigned char ext[8];
    put_u64_le(ext, static_cast<uint64_t>(d));
    if (std::fwrite(ext, 1, 8, f.get()) != 8) throw IoError("mdtn: short write to " + path);
  }
  if (payload_bytes &&
      std::fwrite(payload, 1, payload_bytes, f.get()) != payload_bytes)
    throw IoError("mdtn: short write to " + path);
}

void load_mdtn_raw(const std::string& path, std::vector<int64_t>& shape, int& dtype,
                   std::vector<unsigned char>& payload) {
  std::unique_ptr<std::FILE, FileCloser> f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("mdtn: cannot open " + path);
  unsigned char head[7];
  if (std::fread(head, 1, 7, f.get()) != 7) throw IoError("mdtn: truncated header in " + path);
  if (std::memcmp(head, kMagic, 4) != 0) throw IoError("mdtn: bad magic in " + path);
  if (head[4] != kVersion)
    throw IoError("mdtn: unsupported version " + std::to_string(head[4]) + " in " + path);
  dtype = head[5];
  if (dtype != 1 && dtype != 2)
    throw IoError("mdtn: unknown dtype byte " + std::to_string(dtype) + " in " + path);
  int ndim = head[6];
  if (ndim == 0) throw IoError("mdtn: zero rank in " + path);
  shape.clear();
  uint64_t n = 1;
  for (int i = 0; i < ndim; ++i) {
    unsigned char ext[8];
    if (std::fread(ext, 1, 8, f.get()) != 8) throw IoError("mdtn: truncated extents in " + path);
    uint64_t d = get_u64_le(ext);
    if (d == 0 || d > (1ull << 32)) throw IoError("mdtn: bad extent in " + path);
    shape.push_back(static_cast<int64_t>(d));
    n *= d;
  }
  size_t elem = dtype == 1 ? 4 : 8;
  if (n > (1ull << 31)) throw IoError("mdtn: payload too large in " + path);
  payload.resize(static_cast<size_t>(n) * elem);
  if (std::fread(payload.data(), 1, payload.size(), f.get()) != payload.size())
    throw IoError("mdtn: truncated payload in " + path);
}

namespace {

template <class S>
constexpr int dtype_byte() {
  return sizeof(S) == 4 ? 1 : 2;
}

// Values are stored little-endian; this code targets little-endian hosts.
static_assert(static_cast<unsigned char>(0x0102 & 0xff) == 0x02, "little-endian host expected");

}  // namespace

template <class S>
void save_mdtn(const std::string& path, const TensorT<S>& t) {
  if (t.numel() == 0) throw IoError("mdtn: refusing to write empty tensor to " + path);
  save_mdtn_raw(path, t.shape, dtype_byte<S>(), t.data.data(), t.data.size() * sizeof(S));
}

template <class S>
TensorT<S> load_mdtn(const std::string& path) {
  std::vector<int64_t> shape;
  int dtype = 0;
  std::vector<unsigned char> payload;
  load_mdtn_raw(path, shape, dtype, payload);
  TensorT<S> out;
  out.shape = shape;
  int64_t n = TensorT<S>::count(shape);
  out.data.resize(static_cast<size_t>(n));
  if (dtype == dtype_byte<S>()) {
    std::memcpy(out.data.data(), payload.data(), payload.size());
  } else if (dtype == 1) {
    const float* src = reinterpret_cast<const float*>(payload.data());
    for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = static_cast<S>(src[i]);
  } else {
    const double* src = reinterpret_cast<const double*>(payload.data());
    for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = static_cast<S>(src[i]);
  }
  return out;
}

template void save_mdtn<float>(const std::string&, const TensorT<float>&);
template void save_mdtn<double>(const std::string&, const TensorT<double>&);
template TensorT<float> load_mdtn<float>(const std::string&);
template TensorT<double> load_mdtn<double>(const std::string&);

}  // namespace swm
