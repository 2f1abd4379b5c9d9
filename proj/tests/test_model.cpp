#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "skyfill/model.hpp"
#include "skyfill/unet.hpp"

using namespace skyfill;
namespace tt = skyfill::testing;
namespace fs = std::filesystem;

namespace {

Tensor random_input(Rng& rng, int n, int h, int w) {
  Tensor x(n, 3, h, w);
  for (auto& v : x.data) v = static_cast<float>(rng.uniform(-1.5, 1.5));
  return x;
}

std::map<std::string, Tensor> param_copy(SegmentationModel& model) {
  std::map<std::string, Tensor> out;
  for (const auto& p : model.parameters()) out[p.name] = *p.value;
  return out;
}

bool is_head(const SegmentationModel& model, const std::string& name) {
  return name.rfind(model.final_layer_prefix(), 0) == 0;
}

}  // namespace

TEST_CASE("unet output matches input resolution for every head width") {
  Rng rng(3);
  for (int k : {1, 3}) {
    ToyUNet model(k, 77);
    for (int side : {8, 16, 32}) {
      auto x = random_input(rng, 2, side, side);
      const auto y = model.forward(x, false);
      CHECK(y.n == 2);
      CHECK(y.c == k);
      CHECK(y.h == side);
      CHECK(y.w == side);
    }
  }

  SUBCASE("eval-mode forward is deterministic") {
    ToyUNet model(1, 5);
    auto x = random_input(rng, 1, 16, 16);
    const auto a = model.forward(x, false);
    const auto b = model.forward(x, false);
    CHECK(a.data == b.data);
  }

  SUBCASE("indivisible input dims are rejected") {
    ToyUNet model(1, 5);
    CHECK_THROWS_AS(
        {
          Tensor bad(1, 3, 10, 12);
          model.forward(bad, false);
        },
        Error);
  }
}

TEST_CASE("parameter names are unique and the head prefix is real") {
  ToyUNet model(1, 9);
  std::set<std::string> names;
  int head_params = 0;
  for (const auto& p : model.parameters()) {
    CHECK(names.insert(p.name).second);
    CHECK(p.value != nullptr);
    CHECK(p.grad != nullptr);
    CHECK(p.value->size() == p.grad->size());
    head_params += is_head(model, p.name);
  }
  CHECK(head_params == 2);  // weight + bias
  CHECK(names.size() == 22);  // 11 convolutions
}

TEST_CASE("whole-model gradient agrees with finite differences") {
  // the end-to-end check that catches mis-wired skip connections
  Rng rng(41);
  ToyUNet model(2, 21);
  auto x = random_input(rng, 1, 8, 8);
  Tensor probe(1, 2, 8, 8);
  for (auto& v : probe.data) v = static_cast<float>(rng.uniform(-1, 1));

  auto loss = [&] {
    const auto y = model.forward(x, true);
    double s = 0.0;
    for (std::size_t i = 0; i < y.data.size(); ++i)
      s += static_cast<double>(y.data[i]) * probe.data[i];
    return s;
  };
  loss();
  model.backward(probe);

  // spot-check a few parameters from every depth of the network
  for (const char* name :
       {"enc1a.weight", "enc2b.bias", "bott_a.weight", "dec2a.weight",
        "dec1b.weight", "head.weight"}) {
    Tensor* value = nullptr;
    Tensor* grad = nullptr;
    for (const auto& p : model.parameters())
      if (p.name == name) {
        value = p.value;
        grad = p.grad;
      }
    REQUIRE(value != nullptr);

    Rng pick(fnv1a64(name));
    for (int probe_i = 0; probe_i < 4; ++probe_i) {
      const std::size_t idx = pick.uniform_index(value->size());
      const float saved = value->data[idx];
      auto central = [&](float eps) {
        value->data[idx] = saved + eps;
        const double hi = loss();
        value->data[idx] = saved - eps;
        const double lo = loss();
        value->data[idx] = saved;
        return (hi - lo) / (2.0 * static_cast<double>(eps));
      };
      // small step: relu/pool switch points contaminate wide stencils
      const double fd = central(2e-3f);
      const double scale = std::max({std::abs(fd),
                                     std::abs(static_cast<double>(grad->data[idx])),
                                     1e-2});
      CHECK(std::abs(grad->data[idx] - fd) / scale < 5e-2);
    }
  }
}

TEST_CASE("head swaps leave every non-head parameter bit-identical") {
  for (auto mode : {HeadMode::replace, HeadMode::extend}) {
    CAPTURE(to_string(mode));
    ToyUNet model(1, 31);
    const auto before = param_copy(model);
    const auto head_before = before.at("head.weight");

    Rng swap_rng(99);
    to_inpainting_head(model, mode, swap_rng);
    CHECK(model.inpainting_config());
    CHECK(model.out_channels() == (mode == HeadMode::replace ? 3 : 4));
    CHECK(model.rgb_channel_offset() == (mode == HeadMode::replace ? 0 : 1));

    for (const auto& p : model.parameters()) {
      if (is_head(model, p.name)) continue;
      REQUIRE(p.value->data == before.at(p.name).data);
    }
    if (mode == HeadMode::extend) {
      // the original K filters survive in front of the appended RGB ones
      Tensor* head = nullptr;
      for (const auto& p : model.parameters())
        if (p.name == "head.weight") head = p.value;
      REQUIRE(head != nullptr);
      for (std::size_t i = 0; i < head_before.size(); ++i)
        REQUIRE(head->data[i] == head_before.data[i]);
    }

    to_segmentation_head(model, 1, swap_rng);
    CHECK_FALSE(model.inpainting_config());
    CHECK(model.out_channels() == 1);
    for (const auto& p : model.parameters()) {
      if (is_head(model, p.name)) continue;
      REQUIRE(p.value->data == before.at(p.name).data);
    }
  }
}

TEST_CASE("pre-head activations survive a full swap cycle") {
  Rng rng(53);
  ToyUNet model(1, 61);
  auto x = random_input(rng, 1, 16, 16);
  const auto before = model.forward(x, false);
  const auto head_weights = param_copy(model);

  Rng swap_rng(7);
  to_inpainting_head(model, HeadMode::replace, swap_rng);
  to_segmentation_head(model, 1, swap_rng);

  // restore the original head; if everything upstream of it is intact,
  // the full output must reproduce bit-for-bit
  for (const auto& p : model.parameters())
    if (is_head(model, p.name)) *p.value = head_weights.at(p.name);
  const auto after = model.forward(x, false);
  CHECK(before.data == after.data);
}

TEST_CASE("checkpoints round-trip losslessly") {
  const auto dir = fs::temp_directory_path() / "skyfill_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto path = (dir / "model.ckpt").string();

  ToyUNet model(3, 71);
  auto bundle = snapshot(model, "step3", "digest123");
  bundle.epoch = 4;
  const auto digest = save_checkpoint(path, bundle);
  CHECK(digest == checkpoint_digest(path));

  const auto back = read_checkpoint(path);
  CHECK(back.step_tag == "step3");
  CHECK(back.head_channels == 3);
  CHECK(back.config_digest == "digest123");
  CHECK(back.epoch == 4);
  REQUIRE(back.parameters.size() == bundle.parameters.size());
  for (const auto& [name, tensor] : bundle.parameters) {
    REQUIRE(back.parameters.count(name) == 1);
    REQUIRE(back.parameters.at(name).data == tensor.data);
  }

  SUBCASE("loading restores the exact forward pass") {
    Rng rng(81);
    auto x = random_input(rng, 1, 8, 8);
    const auto want = model.forward(x, false);
    ToyUNet fresh(3, 999);
    Rng reinit(1);
    const auto report = load_checkpoint_file(path, fresh, reinit);
    CHECK(report.reinitialized.empty());
    CHECK(report.matched.size() == bundle.parameters.size());
    const auto got = fresh.forward(x, false);
    CHECK(got.data == want.data);
  }

  SUBCASE("a swapped head is reinitialized and reported") {
    ToyUNet narrow(1, 999);
    Rng reinit(1);
    const auto report = load_checkpoint(bundle, narrow, reinit);
    std::set<std::string> reinit_names(report.reinitialized.begin(),
                                       report.reinitialized.end());
    CHECK(reinit_names ==
          std::set<std::string>{"head.weight", "head.bias"});
    CHECK_FALSE(report.warnings.empty());
  }

  SUBCASE("zero parameter overlap is incompatible") {
    CheckpointBundle alien;
    alien.parameters["elsewhere.weight"] = Tensor(1, 1, 1, 1);
    alien.step_tag = "step1";
    ToyUNet target(1, 1);
    Rng reinit(1);
    CHECK(tt::thrown_kind([&] { load_checkpoint(alien, target, reinit); }) ==
          ErrorKind::incompatible_checkpoint);
  }

  SUBCASE("non-finite parameters refuse to serialize") {
    auto poisoned = bundle;
    poisoned.parameters.begin()->second.data[0] =
        std::numeric_limits<float>::quiet_NaN();
    CHECK(tt::thrown_kind([&] {
            save_checkpoint((dir / "bad.ckpt").string(), poisoned);
          }) == ErrorKind::corrupt_state);
  }

  SUBCASE("truncated files are corrupt") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes(std::istreambuf_iterator<char>(in), {});
    in.close();
    const auto cut = (dir / "cut.ckpt").string();
    std::ofstream out(cut, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    CHECK(tt::thrown_kind([&] { read_checkpoint(cut); }) ==
          ErrorKind::corrupt_state);
  }

  SUBCASE("describe lists the head configuration") {
    const auto text = describe_checkpoint(bundle);
    CHECK(text.find("step3") != std::string::npos);
    CHECK(text.find("head.weight") != std::string::npos);
  }

  fs::remove_all(dir);
}

TEST_CASE("head mode names round-trip") {
  CHECK(head_mode_from_string(to_string(HeadMode::replace)) ==
        HeadMode::replace);
  CHECK(head_mode_from_string(to_string(HeadMode::extend)) == HeadMode::extend);
  CHECK(tt::thrown_kind([] { head_mode_from_string("fold"); }) ==
        ErrorKind::config);
}
