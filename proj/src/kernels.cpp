#include "pfl/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace pfl::kernels {

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

Backend initial_backend() {
  const bool avx2_ok = avx2::compiled() && cpu_has_avx2();
  if (const char* env = std::getenv("PFL_KERNELS")) {
    const std::string choice(env);
    if (choice == "scalar") return Backend::scalar;
    if (choice == "avx2" && avx2_ok) return Backend::avx2;
  }
  return avx2_ok ? Backend::avx2 : Backend::scalar;
}

std::atomic<Backend>& backend_slot() {
  static std::atomic<Backend> slot{initial_backend()};
  return slot;
}

void check_sizes(std::size_t a, std::size_t b) {
  if (a != b) throw std::invalid_argument("kernel operand length mismatch");
}

}  // namespace

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::scalar:
      return "scalar";
    case Backend::avx2:
      return "avx2";
  }
  return "unknown";
}

Backend active_backend() { return backend_slot().load(std::memory_order_relaxed); }

bool backend_available(Backend b) {
  if (b == Backend::scalar) return true;
  return avx2::compiled() && cpu_has_avx2();
}

void set_backend(Backend b) {
  if (!backend_available(b)) {
    throw std::invalid_argument("kernel backend not available: " + std::string(backend_name(b)));
  }
  backend_slot().store(b, std::memory_order_relaxed);
}

double dot(std::span<const double> a, std::span<const double> b) {
  check_sizes(a.size(), b.size());
  if (active_backend() == Backend::avx2) return avx2::dot(a.data(), b.data(), a.size());
  return scalar::dot(a.data(), b.data(), a.size());
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  check_sizes(x.size(), y.size());
  if (active_backend() == Backend::avx2) {
    avx2::axpy(alpha, x.data(), y.data(), x.size());
  } else {
    scalar::axpy(alpha, x.data(), y.data(), x.size());
  }
}

void scale_add(double beta, std::span<const double> x, std::span<double> y) {
  check_sizes(x.size(), y.size());
  if (active_backend() == Backend::avx2) {
    avx2::scale_add(beta, x.data(), y.data(), x.size());
  } else {
    scalar::scale_add(beta, x.data(), y.data(), x.size());
  }
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  check_sizes(a.size(), b.size());
  if (active_backend() == Backend::avx2) return avx2::squared_distance(a.data(), b.data(), a.size());
  return scalar::squared_distance(a.data(), b.data(), a.size());
}

}  // namespace pfl::kernels
