#include <atomic>
#include <bit>
#include <cstdint>

#include "sslkit/kernels.hpp"

namespace sslkit::kernels {

namespace {

struct Table {
  double (*dot)(const double*, const double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  double (*sum)(const double*, std::size_t);
  void (*gemm_nn)(std::size_t, std::size_t, std::size_t, const double*,
                  const double*, double*, bool);
  void (*gemm_nt)(std::size_t, std::size_t, std::size_t, const double*,
                  const double*, double*, bool);
  void (*gemm_tn)(std::size_t, std::size_t, std::size_t, const double*,
                  const double*, double*, bool);
  void (*round_to_half)(double*, std::size_t);
};

constexpr Table kScalarTable{scalar::dot,     scalar::axpy,    scalar::sum,
                             scalar::gemm_nn, scalar::gemm_nt, scalar::gemm_tn,
                             scalar::round_to_half};
#if defined(SSLKIT_HAVE_AVX2)
constexpr Table kAvx2Table{avx2::dot,     avx2::axpy,    avx2::sum,
                           avx2::gemm_nn, avx2::gemm_nt, avx2::gemm_tn,
                           avx2::round_to_half};
#endif

Isa probe() {
#if defined(SSLKIT_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma") &&
      __builtin_cpu_supports("f16c")) {
    return Isa::kAvx2;
  }
#endif
  return Isa::kScalar;
}

const Table* table_for(Isa isa) {
#if defined(SSLKIT_HAVE_AVX2)
  if (isa == Isa::kAvx2) return &kAvx2Table;
#endif
  (void)isa;
  return &kScalarTable;
}

std::atomic<const Table*> g_table{nullptr};
std::atomic<Isa> g_isa{Isa::kScalar};

const Table& table() {
  const Table* t = g_table.load(std::memory_order_acquire);
  if (t == nullptr) {
    const Isa isa = detected_isa();
    g_isa.store(isa);
    t = table_for(isa);
    g_table.store(t, std::memory_order_release);
  }
  return *t;
}

}  // namespace

Isa detected_isa() {
  static const Isa isa = probe();
  return isa;
}

Isa active_isa() {
  table();
  return g_isa.load();
}

Isa set_isa(Isa isa) {
  if (isa == Isa::kAvx2 && detected_isa() != Isa::kAvx2) isa = Isa::kScalar;
  g_isa.store(isa);
  g_table.store(table_for(isa), std::memory_order_release);
  return isa;
}

std::string_view isa_name(Isa isa) {
  return isa == Isa::kAvx2 ? "avx2" : "scalar";
}

bool has_f16c() { return detected_isa() == Isa::kAvx2; }

double dot(const double* a, const double* b, std::size_t n) {
  return table().dot(a, b, n);
}
void axpy(double alpha, const double* x, double* y, std::size_t n) {
  table().axpy(alpha, x, y, n);
}
double sum(const double* x, std::size_t n) { return table().sum(x, n); }
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate) {
  table().gemm_nn(m, n, k, a, b, c, accumulate);
}
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate) {
  table().gemm_nt(m, n, k, a, b, c, accumulate);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate) {
  table().gemm_tn(m, n, k, a, b, c, accumulate);
}
void round_to_half(double* x, std::size_t n) { table().round_to_half(x, n); }

// Round-to-nearest-even conversion using the float-add trick for subnormals.
std::uint16_t float_to_half_bits(float f) {
  std::uint32_t u = std::bit_cast<std::uint32_t>(f);
  const std::uint32_t sign = u & 0x80000000u;
  u ^= sign;
  std::uint16_t out;
  constexpr std::uint32_t kF32Inf = 255u << 23;
  constexpr std::uint32_t kF16Max = (127u + 16u) << 23;
  constexpr std::uint32_t kDenormMagic = ((127u - 15u) + (23u - 10u) + 1u) << 23;
  if (u >= kF16Max) {
    out = u > kF32Inf ? 0x7e00 : 0x7c00;
  } else if (u < (113u << 23)) {
    const float magic = std::bit_cast<float>(kDenormMagic);
    const float shifted = std::bit_cast<float>(u) + magic;
    out = static_cast<std::uint16_t>(std::bit_cast<std::uint32_t>(shifted) -
                                     kDenormMagic);
  } else {
    const std::uint32_t mant_odd = (u >> 13) & 1u;
    u += (static_cast<std::uint32_t>(15 - 127) << 23) + 0xfffu;
    u += mant_odd;
    out = static_cast<std::uint16_t>(u >> 13);
  }
  return static_cast<std::uint16_t>(out | (sign >> 16));
}

float half_bits_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  const std::uint32_t mant = h & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      // subnormal: value = mant * 2^-24
      const float v = static_cast<float>(mant) * 5.9604644775390625e-8f;
      bits = sign | std::bit_cast<std::uint32_t>(v);
    }
  } else if (exp == 31) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 112u) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

}  // namespace sslkit::kernels
