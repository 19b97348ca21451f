#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fixlab/error.hpp"
#include "fixlab/weights.hpp"
#include "support/toy_models.hpp"

using namespace fixlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("fixlab_test_" + name); }

std::string error_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("weight bundle round-trips through FXB1") {
  const auto cfg = testing::toy_neox();
  const auto w = make_random_model(cfg, 11);
  const auto path = temp_file("roundtrip.fxb");
  save_weights(w, path);
  const auto back = load_weights(path);
  CHECK(back.config().n_layers == 4);
  CHECK(back.config().n_heads == 4);
  CHECK(back.config().d_model == 64);
  CHECK(back.config().residual == ResidualVariant::parallel);
  REQUIRE(back.tensors().size() == w.tensors().size());
  for (const auto& [name, t] : w.tensors()) CHECK(back.tensor(name).data == t.data);

  // Payloads start on 64-byte boundaries.
  std::ifstream in(path, std::ios::binary);
  char head[8];
  in.read(head, 8);
  CHECK(std::string(head, 4) == "FXB1");
  fs::remove(path);
}

TEST_CASE("f16 storage is up-converted on load") {
  const auto cfg = testing::toy_llama();
  const auto w = make_random_model(cfg, 12);
  const auto path = temp_file("f16.fxb");
  save_weights(w, path, DType::f16);
  const auto back = load_weights(path);
  CHECK(back.config().rope_scaling.has_value());
  CHECK(back.config().n_kv_heads == 2);
  for (const auto& [name, t] : w.tensors()) {
    const auto& b = back.tensor(name).data;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      CHECK(std::abs(b[i] - t.data[i]) <= std::abs(t.data[i]) * 1e-3f + 1e-7f);
    }
  }
  fs::remove(path);
}

TEST_CASE("half conversion handles specials and rounding") {
  CHECK(half_to_float(float_to_half(1.0f)) == 1.0f);
  CHECK(half_to_float(float_to_half(-2.5f)) == -2.5f);
  CHECK(half_to_float(float_to_half(65504.0f)) == 65504.0f);
  CHECK(std::isinf(half_to_float(float_to_half(1e6f))));
  CHECK(std::isnan(half_to_float(float_to_half(NAN))));
  CHECK(half_to_float(float_to_half(5.9604645e-8f)) == 5.9604645e-8f);  // smallest subnormal
  CHECK(half_to_float(float_to_half(0.0f)) == 0.0f);
}

TEST_CASE("truncated file names the incomplete tensor") {
  const auto cfg = testing::toy_neox(2);
  const auto w = make_random_model(cfg, 13);
  const auto path = temp_file("trunc.fxb");
  save_weights(w, path);
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 100);
  const auto msg = error_of([&] { (void)load_weights(path); });
  CHECK(msg.find("truncated inside tensor 'unembed'") != std::string::npos);
  fs::remove(path);
}

TEST_CASE("malformed header is rejected") {
  const auto path = temp_file("bad.fxb");
  {
    std::ofstream out(path, std::ios::binary);
    out << "GGUF\x04\0\0\0{}  ";
  }
  CHECK(error_of([&] { (void)load_weights(path); }).find("malformed header") != std::string::npos);
  {
    std::ofstream out(path, std::ios::binary);
    out.write("FXB1\x05\0\0\0{bad}", 13);
  }
  CHECK(error_of([&] { (void)load_weights(path); }).find("malformed header JSON") != std::string::npos);
  fs::remove(path);
}

TEST_CASE("shape mismatch and non-finite values name the tensor") {
  const auto cfg = testing::toy_neox(1);
  auto base = make_random_model(cfg, 14);
  auto copy_tensors = [&] { return std::map<std::string, Tensor>(base.tensors()); };

  auto bad_shape = copy_tensors();
  bad_shape["layers.0.attn.q.weight"] = Tensor({64, 63});
  CHECK(error_of([&] { (void)WeightBundle::from_tensors(cfg, bad_shape); })
            .find("shape mismatch for 'layers.0.attn.q.weight'") != std::string::npos);

  auto nonfinite = copy_tensors();
  nonfinite["layers.0.mlp.in.weight"].data[37] = INFINITY;
  CHECK(error_of([&] { (void)WeightBundle::from_tensors(cfg, nonfinite); }) ==
        "weights: non-finite value in 'layers.0.mlp.in.weight' at index 37");

  auto missing = copy_tensors();
  missing.erase("unembed");
  CHECK(error_of([&] { (void)WeightBundle::from_tensors(cfg, missing); }).find("missing tensor 'unembed'") !=
        std::string::npos);

  auto optional_gone = copy_tensors();
  optional_gone.erase("layers.0.attn.o.bias");
  CHECK_NOTHROW((void)WeightBundle::from_tensors(cfg, optional_gone));
}

TEST_CASE("config invariants are enforced") {
  auto cfg = testing::toy_neox();
  cfg.d_model = 60;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = testing::toy_neox();
  cfg.n_kv_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = testing::toy_neox();
  cfg.rotary_fraction = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = testing::toy_neox();
  cfg.n_layers = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}
