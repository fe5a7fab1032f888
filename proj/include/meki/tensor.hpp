#pragma once
// Dense row-major tensors over float or double, plus the fp16 codec used
// by the bank file format. Shapes are runtime vectors; all shape checks
// throw rather than assert so they hold in release builds too.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace meki {

using Shape = std::vector<int64_t>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

enum class Dtype : uint8_t { f32 = 0, f16 = 1, f64 = 2 };

inline size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::f32: return 4;
    case Dtype::f16: return 2;
    case Dtype::f64: return 8;
  }
  throw FormatError("unknown dtype code");
}

inline const char* dtype_name(Dtype d) {
  switch (d) {
    case Dtype::f32: return "f32";
    case Dtype::f16: return "f16";
    case Dtype::f64: return "f64";
  }
  return "?";
}

template <class S>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr Dtype value = Dtype::f32;
};
template <>
struct dtype_of<double> {
  static constexpr Dtype value = Dtype::f64;
};

template <class S>
struct Tensor {
  static_assert(std::is_floating_point_v<S>);

  Shape shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(Shape sh) : shape(std::move(sh)), data(checked_numel(shape), S(0)) {}
  Tensor(Shape sh, std::vector<S> values) : shape(std::move(sh)), data(std::move(values)) {
    if ((int64_t)data.size() != checked_numel(shape))
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape sh) { return Tensor(std::move(sh)); }
  static Tensor full(Shape sh, S v) {
    Tensor t(std::move(sh));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  int64_t numel() const { return (int64_t)data.size(); }
  int ndim() const { return (int)shape.size(); }

  int64_t dim(int i) const {
    if (i < 0) i += ndim();
    if (i < 0 || i >= ndim())
      throw ShapeError("dim index out of range for shape " + shape_str(shape));
    return shape[i];
  }

  // 2-d helpers; most kernels treat tensors as row-major matrices.
  int64_t rows() const { return dim(0); }
  int64_t cols() const { return dim(1); }

  S* row(int64_t r) { return data.data() + r * cols(); }
  const S* row(int64_t r) const { return data.data() + r * cols(); }

  S& at(int64_t r, int64_t c) {
    check_rc(r, c);
    return data[r * cols() + c];
  }
  S at(int64_t r, int64_t c) const {
    check_rc(r, c);
    return data[r * cols() + c];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

 private:
  static int64_t checked_numel(const Shape& s) {
    for (int64_t d : s)
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
    return shape_numel(s);
  }
  void check_rc(int64_t r, int64_t c) const {
    if (ndim() != 2) throw ShapeError("at(r,c) on non-2d shape " + shape_str(shape));
    if (r < 0 || r >= rows() || c < 0 || c >= cols())
      throw std::out_of_range("index (" + std::to_string(r) + "," + std::to_string(c) +
                              ") out of range for shape " + shape_str(shape));
  }
};

template <class S, class T>
Tensor<T> cast_tensor(const Tensor<S>& x) {
  Tensor<T> out(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) out.data[i] = (T)x.data[i];
  return out;
}

// ---- IEEE binary16 codec (round to nearest even) ----------------------
//
// Software conversion so bank files are reproducible across compilers and
// flags. Covers normals, subnormals, infinities and NaN.

inline uint16_t f32_to_f16(float f) {
  uint32_t x = std::bit_cast<uint32_t>(f);
  uint32_t sign = (x >> 16) & 0x8000u;
  uint32_t exp = (x >> 23) & 0xFFu;
  uint32_t mant = x & 0x7FFFFFu;

  if (exp == 0xFF) {  // inf or nan
    uint32_t m = mant ? 0x200u | (mant >> 13) : 0;
    if (mant && m == 0) m = 1;  // keep nan a nan
    return (uint16_t)(sign | 0x7C00u | m);
  }

  int e = (int)exp - 127 + 15;
  if (e >= 31) return (uint16_t)(sign | 0x7C00u);  // overflow -> inf
  if (e <= 0) {
    if (e < -10) return (uint16_t)sign;  // underflows to signed zero
    // subnormal: shift in the implicit leading 1, round to nearest even
    uint32_t m = mant | 0x800000u;
    int shift = 14 - e;
    uint32_t half = m >> shift;
    uint32_t rem = m & ((1u << shift) - 1);
    uint32_t mid = 1u << (shift - 1);
    if (rem > mid || (rem == mid && (half & 1))) half++;
    return (uint16_t)(sign | half);
  }

  uint32_t half = mant >> 13;
  uint32_t rem = mant & 0x1FFFu;
  if (rem > 0x1000u || (rem == 0x1000u && (half & 1))) {
    half++;
    if (half == 0x400u) {  // mantissa rollover bumps the exponent
      half = 0;
      if (++e >= 31) return (uint16_t)(sign | 0x7C00u);
    }
  }
  return (uint16_t)(sign | ((uint32_t)e << 10) | half);
}

inline float f16_to_f32(uint16_t h) {
  uint32_t sign = ((uint32_t)h & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1Fu;
  uint32_t mant = h & 0x3FFu;

  if (exp == 0x1F) return std::bit_cast<float>(sign | 0x7F800000u | (mant << 13));
  if (exp == 0) {
    if (mant == 0) return std::bit_cast<float>(sign);
    // normalize the subnormal
    int e = -1;
    do {
      mant <<= 1;
      e++;
    } while (!(mant & 0x400u));
    mant &= 0x3FFu;
    return std::bit_cast<float>(sign | ((uint32_t)(127 - 15 - e) << 23) | (mant << 13));
  }
  return std::bit_cast<float>(sign | ((exp + 127 - 15) << 23) | (mant << 13));
}

inline float round_to_f16(float f) { return f16_to_f32(f32_to_f16(f)); }

// ---- deterministic RNG -------------------------------------------------
//
// splitmix64 core. Self-contained so initialization and data generation are
// bit-reproducible across standard library implementations.

struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // uniform in [0,1) with 53 bits
  double u01() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw std::invalid_argument("uniform_int needs n > 0");
    // rejection sampling to avoid modulo bias
    uint64_t un = (uint64_t)n;
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return (int64_t)(x % un);
  }

  // standard normal via Box-Muller; caches the second draw
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = u01(), u2 = u01();
    while (u1 <= 0.0) u1 = u01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // derive an independent stream; distinct tags give distinct streams
  Rng fork(uint64_t tag) const {
    Rng r(state ^ (0xA5A5A5A5DEADBEEFull + tag * 0x9E3779B97F4A7C15ull));
    r.next_u64();
    return r;
  }

 private:
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <class S>
Tensor<S> random_normal(Rng& rng, Shape sh, double stddev) {
  Tensor<S> t(std::move(sh));
  for (auto& v : t.data) v = (S)(rng.normal() * stddev);
  return t;
}

}  // namespace meki
