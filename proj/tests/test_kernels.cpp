#include <doctest.h>

#include <cstring>
#include <vector>

#include "fixlab/kernels.hpp"
#include "fixlab/rng.hpp"

using namespace fixlab;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform() * 2.0 - 1.0);
  return v;
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("dot matches a double-precision sum") {
  for (std::size_t n : {1u, 7u, 8u, 9u, 63u, 257u}) {
    auto a = random_vec(n, n);
    auto b = random_vec(n, n + 100);
    double ref = 0.0;
    for (std::size_t i = 0; i < n; ++i) ref += static_cast<double>(a[i]) * b[i];
    CHECK(kernels::dot(a.data(), b.data(), n) == doctest::Approx(ref).epsilon(1e-5));
  }
}

TEST_CASE("parallel linear is bitwise equal to the serial reference at any thread count") {
  const std::size_t rows = 37, in = 96, out = 211;
  auto x = random_vec(rows * in, 1);
  auto w = random_vec(out * in, 2);
  auto b = random_vec(out, 3);
  std::vector<float> serial(rows * out), par(rows * out);
  kernels::linear_serial(x, rows, in, w, out, b, serial);
  const int previous = kernels::max_threads();
  for (int threads : {1, 2, 8}) {
    kernels::set_threads(threads);
    std::fill(par.begin(), par.end(), 0.0f);
    kernels::linear(x, rows, in, w, out, b, par);
    CHECK(bitwise_equal(serial, par));
  }
  kernels::set_threads(previous);

  // Without bias.
  kernels::linear_serial(x, rows, in, w, out, {}, serial);
  kernels::linear(x, rows, in, w, out, {}, par);
  CHECK(bitwise_equal(serial, par));
}

TEST_CASE("parallel projection is bitwise equal to the serial reference") {
  const std::size_t in = 64, out = 5003;
  auto x = random_vec(in, 4);
  auto w = random_vec(in * out, 5);
  std::vector<float> serial(out), par(out);
  kernels::project_serial(x, w, out, serial);
  const int previous = kernels::max_threads();
  for (int threads : {1, 3, 8}) {
    kernels::set_threads(threads);
    kernels::project(x, w, out, par);
    CHECK(bitwise_equal(serial, par));
  }
  kernels::set_threads(previous);
  double ref = 0.0;
  for (std::size_t d = 0; d < in; ++d) ref += static_cast<double>(x[d]) * w[d * out + 17];
  CHECK(serial[17] == doctest::Approx(ref).epsilon(1e-5));
}

TEST_CASE("counter-based rng is reproducible and bounded") {
  Rng a(42, 7), b(42, 7), c(42, 8);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    CHECK(x == b.next());
    differs = differs || x != c.next();
  }
  CHECK(differs);
  Rng r(1);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 5000; ++i) ++counts[static_cast<std::size_t>(r.below(5))];
  for (int n : counts) CHECK(n > 800);
}
