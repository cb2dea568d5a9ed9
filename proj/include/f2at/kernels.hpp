#pragma once
// Data-parallel double-precision inner loops shared by every numeric module.
//
// Each kernel has a scalar reference implementation and, where the CPU allows,
// a vector variant (AVX2 on x86-64, NEON on AArch64). The variant is chosen
// once at first use from the CPU feature flags; the F2AT_KERNELS environment
// variable (scalar|avx2|neon) or set_backend() overrides the choice.
//
// Elementwise kernels (axpy, add, mul, scale) are bit-identical across
// backends: no FMA, one rounding per lane exactly like the scalar loop.
// Reductions (dot, sum) reorder additions and agree to rounding error only.

#include <cstddef>
#include <span>
#include <string_view>

namespace f2at::kernels {

enum class Backend { kScalar, kAvx2, kNeon };

struct KernelTable {
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*sum)(const double* x, std::size_t n);
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  void (*add)(const double* x, double* y, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  void (*scale)(double alpha, double* x, std::size_t n);
};

bool backend_supported(Backend backend);
std::string_view backend_name(Backend backend);
Backend active_backend();
// Throws std::invalid_argument if the backend is not available on this CPU.
void set_backend(Backend backend);
Backend parse_backend(std::string_view name);

// Kernel table of a specific backend, for equivalence testing.
const KernelTable& table(Backend backend);

double dot(std::span<const double> a, std::span<const double> b);
double sum(std::span<const double> x);
// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
// y += x
void add(std::span<const double> x, std::span<double> y);
// out = a * b (elementwise)
void mul(std::span<const double> a, std::span<const double> b, std::span<double> out);
// x *= alpha
void scale(double alpha, std::span<double> x);

namespace scalar {
const KernelTable& table();
}
#if defined(F2AT_HAVE_AVX2)
namespace avx2 {
const KernelTable& table();
}
#endif
#if defined(F2AT_HAVE_NEON)
namespace neon {
const KernelTable& table();
}
#endif

}  // namespace f2at::kernels
