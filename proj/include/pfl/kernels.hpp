#pragma once

// Dense vector kernels used by every numeric inner loop (model forward and
// backward passes, aggregation, SGD steps, kNN distances).
//
// Each kernel has a scalar reference implementation and, where the CPU
// supports it, an AVX2 variant. The active backend is chosen once at startup
// (override with PFL_KERNELS=scalar|avx2) and can be switched for testing.
//
// Element-wise kernels (axpy, scale_add) give bitwise identical results on
// every backend. Reductions (dot, squared_distance) reassociate the sum on
// SIMD backends and agree with the scalar path to rounding only.

#include <cstddef>
#include <span>
#include <string_view>

namespace pfl::kernels {

enum class Backend { scalar, avx2 };

std::string_view backend_name(Backend b);

/// Backend currently used by the free functions below.
Backend active_backend();

/// True when `b` can run on this CPU.
bool backend_available(Backend b);

/// Switches the active backend. Throws std::invalid_argument when the
/// backend is not available on this CPU.
void set_backend(Backend b);

double dot(std::span<const double> a, std::span<const double> b);

/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

/// y = beta * y + x
void scale_add(double beta, std::span<const double> x, std::span<double> y);

double squared_distance(std::span<const double> a, std::span<const double> b);

// Direct entry points, used by the equivalence tests.
namespace scalar {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void scale_add(double beta, const double* x, double* y, std::size_t n);
double squared_distance(const double* a, const double* b, std::size_t n);
}  // namespace scalar

namespace avx2 {
bool compiled();
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void scale_add(double beta, const double* x, double* y, std::size_t n);
double squared_distance(const double* a, const double* b, std::size_t n);
}  // namespace avx2

}  // namespace pfl::kernels
