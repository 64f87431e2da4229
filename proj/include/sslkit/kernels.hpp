#pragma once

// Dense arithmetic kernels used by the autograd ops.
//
// Every kernel has a portable scalar reference implementation and an AVX2/FMA
// variant. The variant is picked once at startup from CPUID and can be pinned
// with set_isa() (tests use this to run both paths on the same inputs).

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace sslkit::kernels {

enum class Isa { kScalar, kAvx2 };

/// Best instruction set supported by the running CPU.
Isa detected_isa();
Isa active_isa();
/// Pins the kernel table. Requests above detected_isa() are clamped down.
Isa set_isa(Isa isa);
std::string_view isa_name(Isa isa);

/// True when the CPU converts to/from IEEE binary16 in hardware (F16C).
bool has_f16c();

double dot(const double* a, const double* b, std::size_t n);
/// y += alpha * x
void axpy(double alpha, const double* x, double* y, std::size_t n);
double sum(const double* x, std::size_t n);

// Row-major products. `accumulate` adds into C instead of overwriting it.
// C[m,n] = A[m,k] * B[k,n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate);
// C[m,n] = A[m,k] * B[n,k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate);
// C[m,n] = A[k,m]^T * B[k,n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate);

/// Rounds each value to the nearest binary16 (ties to even) and back.
void round_to_half(double* x, std::size_t n);

std::uint16_t float_to_half_bits(float f);
float half_bits_to_float(std::uint16_t h);

namespace scalar {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
double sum(const double* x, std::size_t n);
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate);
void round_to_half(double* x, std::size_t n);
}  // namespace scalar

namespace avx2 {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
double sum(const double* x, std::size_t n);
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             const double* b, double* c, bool accumulate);
void round_to_half(double* x, std::size_t n);
}  // namespace avx2

}  // namespace sslkit::kernels
