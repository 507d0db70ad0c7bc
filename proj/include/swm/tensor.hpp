#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace swm {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ValueError : std::runtime_error {
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dense row-major N-d array over float or double.
template <class S>
struct TensorT {
  std::vector<int64_t> shape;
  std::vector<S> data;

  TensorT() = default;
  explicit TensorT(std::vector<int64_t> dims, S fill = S(0)) : shape(std::move(dims)) {
    for (size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] <= 0)
        throw ShapeError("tensor: extent of axis " + std::to_string(i) +
                         " must be positive, got " + std::to_string(shape[i]));
    }
    data.assign(static_cast<size_t>(count(shape)), fill);
  }

  static int64_t count(const std::vector<int64_t>& dims) {
    int64_t n = 1;
    for (int64_t d : dims) n *= d;
    return n;
  }

  static TensorT zeros(std::vector<int64_t> dims) { return TensorT(std::move(dims), S(0)); }
  static TensorT full(std::vector<int64_t> dims, S v) { return TensorT(std::move(dims), v); }
  static TensorT scalar(S v) { return TensorT({1}, v); }
  static TensorT from(std::vector<int64_t> dims, std::vector<S> values) {
    TensorT t;
    t.shape = std::move(dims);
    if (count(t.shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                       shape_str(t.shape));
    t.data = std::move(values);
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  /// Multi-index accessor; slow, meant for tests and small tensors.
  S& at(std::initializer_list<int64_t> idx) { return data[offset(idx)]; }
  S at(std::initializer_list<int64_t> idx) const { return data[offset(idx)]; }

  size_t offset(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != ndim())
      throw ShapeError("tensor: index rank " + std::to_string(idx.size()) +
                       " does not match tensor rank " + std::to_string(ndim()));
    size_t off = 0;
    int i = 0;
    for (int64_t v : idx) {
      if (v < 0 || v >= shape[static_cast<size_t>(i)])
        throw ShapeError("tensor: index " + std::to_string(v) + " out of range on axis " +
                         std::to_string(i) + " (extent " +
                         std::to_string(shape[static_cast<size_t>(i)]) + ")");
      off = off * static_cast<size_t>(shape[static_cast<size_t>(i)]) + static_cast<size_t>(v);
      ++i;
    }
    return off;
  }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  static std::string shape_str(const std::vector<int64_t>& dims) {
    std::string s = "[";
    for (size_t i = 0; i < dims.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(dims[i]);
    }
    return s + "]";
  }
  std::string shape_str() const { return shape_str(shape); }

  template <class T2>
  TensorT<T2> cast() const {
    TensorT<T2> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T2>(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

/// splitmix64 generator; deterministic across platforms, unlike the
/// distributions in <random>.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97f4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0,1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Inclusive integer range.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw ValueError("rng: empty integer range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  /// Standard normal via Box-Muller (pair cached).
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  template <class S>
  void fill_normal(TensorT<S>& t, double stddev = 1.0, double mean = 0.0) {
    for (auto& v : t.data) v = static_cast<S>(mean + stddev * normal());
  }
  template <class S>
  void fill_uniform(TensorT<S>& t, double lo, double hi) {
    for (auto& v : t.data) v = static_cast<S>(uniform(lo, hi));
  }

 private:
  uint64_t state_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

/// FNV-1a over (seed, name); used to derive per-parameter init streams so
/// identically named parameters get identical values across model variants.
inline uint64_t name_seed(uint64_t seed, std::string_view name) {
  uint64_t h = 14695981039346656037ULL ^ seed;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  h ^= seed * 0x9E3779B97f4A7C15ULL;
  return h;
}

// --- MDTN tensor file format -------------------------------------------------
// magic "MDTN", version 0x01, dtype byte (1=f32, 2=f64), ndim byte,
// ndim little-endian u64 extents, then row-major little-endian payload.

void save_mdtn_raw(const std::string& path, const std::vector<int64_t>& shape, int dtype,
                   const void* payload, size_t payload_bytes);
void load_mdtn_raw(const std::string& path, std::vector<int64_t>& shape, int& dtype,
                   std::vector<unsigned char>& payload);

template <class S>
void save_mdtn(const std::string& path, const TensorT<S>& t);
template <class S>
TensorT<S> load_mdtn(const std::string& path);

extern template void save_mdtn<float>(const std::string&, const TensorT<float>&);
extern template void save_mdtn<double>(const std::string&, const TensorT<double>&);
extern template TensorT<float> load_mdtn<float>(const std::string&);
extern template TensorT<double> load_mdtn<double>(const std::string&);

}  // namespace swm
