#include "fixlab/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdint>

namespace fixlab::kernels {

namespace {

// Below this many multiply-adds the fork/join cost dominates.
constexpr std::size_t kParallelThreshold = 1 << 15;

constexpr std::size_t kProjectBlock = 256;

void project_block(const float* x, std::size_t in, const float* w, std::size_t out,
                   std::size_t begin, std::size_t end, float* y) {
  std::fill(y + begin, y + end, 0.0f);
  for (std::size_t d = 0; d < in; ++d) {
    const float xd = x[d];
    const float* row = w + d * out;
    for (std::size_t v = begin; v < end; ++v) y[v] += xd * row[v];
  }
}

}  // namespace

float dot(const float* a, const float* b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += a[i] * b[i];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

void linear(std::span<const float> x, std::size_t rows, std::size_t in, std::span<const float> w,
            std::size_t out, std::span<const float> bias, std::span<float> y) {
  const float* xp = x.data();
  const float* wp = w.data();
  const float* bp = bias.empty() ? nullptr : bias.data();
  float* yp = y.data();
  const auto total = static_cast<std::int64_t>(rows * out);
  const bool par = rows * out * in >= kParallelThreshold && !omp_in_parallel();
#pragma omp parallel for schedule(static) if (par)
  for (std::int64_t idx = 0; idx < total; ++idx) {
    const std::size_t r = static_cast<std::size_t>(idx) / out;
    const std::size_t o = static_cast<std::size_t>(idx) % out;
    const float v = dot(xp + r * in, wp + o * in, in);
    yp[idx] = bp ? v + bp[o] : v;
  }
}

void linear_serial(std::span<const float> x, std::size_t rows, std::size_t in,
                   std::span<const float> w, std::size_t out, std::span<const float> bias,
                   std::span<float> y) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out; ++o) {
      const float v = dot(x.data() + r * in, w.data() + o * in, in);
      y[r * out + o] = bias.empty() ? v : v + bias[o];
    }
  }
}

void project(std::span<const float> x, std::span<const float> w, std::size_t out,
             std::span<float> y) {
  const std::size_t in = x.size();
  const auto blocks = static_cast<std::int64_t>((out + kProjectBlock - 1) / kProjectBlock);
  const bool par = in * out >= kParallelThreshold && !omp_in_parallel();
#pragma omp parallel for schedule(static) if (par)
  for (std::int64_t b = 0; b < blocks; ++b) {
    const std::size_t begin = static_cast<std::size_t>(b) * kProjectBlock;
    const std::size_t end = std::min(out, begin + kProjectBlock);
    project_block(x.data(), in, w.data(), out, begin, end, y.data());
  }
}

void project_serial(std::span<const float> x, std::span<const float> w, std::size_t out,
                    std::span<float> y) {
  project_block(x.data(), x.size(), w.data(), out, 0, out, y.data());
}

int max_threads() { return omp_get_max_threads(); }

void set_threads(int n) { omp_set_num_threads(std::max(1, n)); }

}  // namespace fixlab::kernels
