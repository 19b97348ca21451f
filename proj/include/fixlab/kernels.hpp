#pragma once

#include <cstddef>
#include <span>

// Dense float32 kernels used by the forward pass. Each parallel kernel has a
// serial twin with identical per-element arithmetic; results are bitwise
// equal regardless of thread count because every output element is reduced
// by one thread in a fixed order.
namespace fixlab::kernels {

/// Fixed-order dot product (8 interleaved partial sums, then a fixed tree).
float dot(const float* a, const float* b, std::size_t n);

/// y[r, o] = bias[o] + dot(x[r, :], w[o, :]); w is [out, in] row-major.
/// `bias` may be empty.
void linear(std::span<const float> x, std::size_t rows, std::size_t in, std::span<const float> w,
            std::size_t out, std::span<const float> bias, std::span<float> y);
void linear_serial(std::span<const float> x, std::size_t rows, std::size_t in,
                   std::span<const float> w, std::size_t out, std::span<const float> bias,
                   std::span<float> y);

/// y[v] = sum_d x[d] * w[d, v]; w is [in, out] row-major (the unembedding layout).
void project(std::span<const float> x, std::span<const float> w, std::size_t out,
             std::span<float> y);
void project_serial(std::span<const float> x, std::span<const float> w, std::size_t out,
                    std::span<float> y);

/// Number of threads the parallel kernels will use (1 without OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace fixlab::kernels
