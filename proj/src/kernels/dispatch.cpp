#include <atomic>
#include <cassert>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "f2at/kernels.hpp"

namespace f2at::kernels {
namespace {

Backend detect_backend() {
#if defined(F2AT_HAVE_AVX2)
  __builtin_cpu_init();
  if (__builtin_cpu_supports("avx2")) return Backend::kAvx2;
#endif
#if defined(F2AT_HAVE_NEON)
  return Backend::kNeon;
#endif
  return Backend::kScalar;
}

Backend initial_backend() {
  if (const char* forced = std::getenv("F2AT_KERNELS"); forced != nullptr && *forced != '\0') {
    Backend b = parse_backend(forced);
    if (!backend_supported(b)) {
      throw std::invalid_argument("F2AT_KERNELS=" + std::string(forced) +
                                  " is not supported on this CPU");
    }
    return b;
  }
  return detect_backend();
}

struct Active {
  explicit Active(Backend b) : backend(b), table(&kernels::table(b)) {}
  std::atomic<Backend> backend;
  std::atomic<const KernelTable*> table;
};

Active& active() {
  static Active state(initial_backend());
  return state;
}

inline const KernelTable& current() { return *active().table.load(std::memory_order_relaxed); }

}  // namespace

bool backend_supported(Backend backend) {
  switch (backend) {
    case Backend::kScalar:
      return true;
    case Backend::kAvx2:
#if defined(F2AT_HAVE_AVX2)
      __builtin_cpu_init();
      return __builtin_cpu_supports("avx2");
#else
      return false;
#endif
    case Backend::kNeon:
#if defined(F2AT_HAVE_NEON)
      return true;
#else
      return false;
#endif
  }
  return false;
}

std::string_view backend_name(Backend backend) {
  switch (backend) {
    case Backend::kScalar:
      return "scalar";
    case Backend::kAvx2:
      return "avx2";
    case Backend::kNeon:
      return "neon";
  }
  return "unknown";
}

Backend parse_backend(std::string_view name) {
  if (name == "scalar") return Backend::kScalar;
  if (name == "avx2") return Backend::kAvx2;
  if (name == "neon") return Backend::kNeon;
  throw std::invalid_argument("unknown kernel backend '" + std::string(name) + "'");
}

const KernelTable& table(Backend backend) {
  if (!backend_supported(backend)) {
    throw std::invalid_argument("kernel backend '" + std::string(backend_name(backend)) +
                                "' is not supported on this CPU");
  }
  switch (backend) {
#if defined(F2AT_HAVE_AVX2)
    case Backend::kAvx2:
      return avx2::table();
#endif
#if defined(F2AT_HAVE_NEON)
    case Backend::kNeon:
      return neon::table();
#endif
    default:
      return scalar::table();
  }
}

Backend active_backend() { return active().backend.load(); }

void set_backend(Backend backend) {
  const KernelTable& t = table(backend);
  active().backend.store(backend);
  active().table.store(&t);
}

double dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  return current().dot(a.data(), b.data(), a.size());
}

double sum(std::span<const double> x) { return current().sum(x.data(), x.size()); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  assert(x.size() == y.size());
  current().axpy(alpha, x.data(), y.data(), x.size());
}

void add(std::span<const double> x, std::span<double> y) {
  assert(x.size() == y.size());
  current().add(x.data(), y.data(), x.size());
}

void mul(std::span<const double> a, std::span<const double> b, std::span<double> out) {
  assert(a.size() == b.size() && a.size() == out.size());
  current().mul(a.data(), b.data(), out.data(), a.size());
}

void scale(double alpha, std::span<double> x) { current().scale(alpha, x.data(), x.size()); }

}  // namespace f2at::kernels
