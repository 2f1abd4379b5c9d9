#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "skyfill/data.hpp"
#include "skyfill/synth.hpp"

using namespace skyfill;
namespace tt = skyfill::testing;
namespace fs = std::filesystem;

namespace {

// Independent rasterization: point-to-segment distance per pixel.
BinaryMask rasterize_roads_oracle(int canvas,
                                  const std::vector<RoadPath>& roads) {
  BinaryMask mask(canvas, canvas, 0);
  for (int h = 0; h < canvas; ++h)
    for (int w = 0; w < canvas; ++w) {
      bool on_road = false;
      for (const auto& road : roads) {
        const double half = (road.width - 1) / 2.0 + 1e-9;
        for (std::size_t i = 1; i + 0 < road.points.size() && !on_road; ++i) {
          const auto [r0, c0] = road.points[i - 1];
          const auto [r1, c1] = road.points[i];
          const double dr = r1 - r0, dc = c1 - c0;
          const double len2 = dr * dr + dc * dc;
          double t = 0.0;
          if (len2 > 0.0)
            t = std::clamp(((h - r0) * dr + (w - c0) * dc) / len2, 0.0, 1.0);
          const double dist = std::hypot(h - (r0 + t * dr), w - (c0 + t * dc));
          if (dist <= half) on_road = true;
        }
        if (on_road) break;
      }
      if (on_road) mask.at(h, w) = 1;
    }
  return mask;
}

}  // namespace

TEST_CASE("thick segment rasterization covers the documented band") {
  SUBCASE("odd width at an integer row") {
    BinaryMask mask(32, 32, 0);
    rasterize_thick_segment(mask, 10.0, 0.0, 10.0, 31.0, 7);
    for (int h = 0; h < 32; ++h)
      for (int w = 0; w < 32; ++w)
        REQUIRE(mask.at(h, w) == (h >= 7 && h <= 13 ? 1 : 0));
  }

  SUBCASE("even width at a half-integer row covers width rows") {
    BinaryMask mask(32, 32, 0);
    rasterize_thick_segment(mask, 10.5, 0.0, 10.5, 31.0, 8);
    for (int h = 0; h < 32; ++h)
      for (int w = 0; w < 32; ++w)
        REQUIRE(mask.at(h, w) == (h >= 7 && h <= 14 ? 1 : 0));
  }

  SUBCASE("column extent respects the endpoints") {
    BinaryMask mask(16, 16, 0);
    rasterize_thick_segment(mask, 8.0, 4.0, 8.0, 11.0, 1);
    for (int w = 0; w < 16; ++w)
      REQUIRE(mask.at(8, w) == (w >= 4 && w <= 11 ? 1 : 0));
  }
}

TEST_CASE("scene roads match the independent distance rasterizer") {
  for (std::uint64_t seed : {0ull, 1ull, 2ull, 3ull}) {
    SyntheticSceneSpec spec;
    spec.canvas = 64;
    spec.road_count = 3;
    spec.background_texture_seed = seed;
    spec.style = static_cast<SceneStyle>(seed % 4);
    const auto scene = generate_synthetic_scene(spec);
    const auto oracle = rasterize_roads_oracle(64, sample_road_paths(spec));
    REQUIRE(scene.roads.values == oracle.values);
  }
}

TEST_CASE("scenes are deterministic and labels are non-degenerate") {
  SyntheticSceneSpec spec;
  spec.canvas = 64;
  spec.background_texture_seed = 17;
  const auto a = generate_synthetic_scene(spec);
  const auto b = generate_synthetic_scene(spec);
  CHECK(a.image.values == b.image.values);
  CHECK(a.roads.values == b.roads.values);

  const double frac = masked_fraction(a.roads);
  // masked_fraction counts zeros, so road coverage is 1 - frac
  CHECK(1.0 - frac > 0.01);
  CHECK(1.0 - frac < 0.9);

  SUBCASE("zero roads leave an empty mask") {
    SyntheticSceneSpec none = spec;
    none.road_count = 0;
    const auto empty = generate_synthetic_scene(none);
    CHECK(masked_fraction(empty.roads) == 1.0);
  }

  SUBCASE("styles change the rendering but not the geometry") {
    SyntheticSceneSpec other = spec;
    other.style = SceneStyle::d;
    const auto styled = generate_synthetic_scene(other);
    CHECK(styled.image.values != a.image.values);
    CHECK(styled.roads.values == a.roads.values);
  }
}

TEST_CASE("style names round-trip") {
  for (auto style : {SceneStyle::a, SceneStyle::b, SceneStyle::c,
                     SceneStyle::d})
    CHECK(style_from_string(to_string(style)) == style);
  CHECK(tt::thrown_kind([] { style_from_string("E"); }) == ErrorKind::config);
}

TEST_CASE("dataset emission writes a consistent split tree") {
  const auto root = fs::temp_directory_path() / "skyfill_synth_ds";
  fs::remove_all(root);

  SyntheticDatasetSpec spec;
  spec.out_dir = root.string();
  spec.canvas = 32;
  spec.train_count = 6;
  spec.val_count = 3;
  spec.seed = 5;
  const auto ds = emit_synthetic_dataset(spec);

  CHECK(ds.manifest.records.size() == 9);
  CHECK(fs::exists(ds.manifest_path));
  CHECK(fs::exists(ds.train_manifest_path));
  CHECK(fs::exists(ds.val_manifest_path));
  CHECK(fs::exists(ds.stats_path));

  const auto train = read_manifest(ds.train_manifest_path);
  const auto val = read_manifest(ds.val_manifest_path);
  CHECK(train.records.size() == 6);
  CHECK(val.records.size() == 3);

  for (const auto& r : train.records) {
    CHECK(fs::exists(r.image_path));
    CHECK(fs::exists(r.label_path));
    CHECK(r.split == Split::train);
  }

  // labels decode to sparse road masks, never all-road or all-background
  for (const auto& r : val.records) {
    const auto sample = load_sample(r, 0);
    REQUIRE(sample.label.has_value());
    const double road = 1.0 - masked_fraction(*sample.label);
    CHECK(road > 0.0);
    CHECK(road < 0.95);
  }

  SUBCASE("stats are valid and styles tag the records") {
    const auto stats = read_stats_file(ds.stats_path);
    REQUIRE(stats.mean.size() == 3);
    for (double s : stats.std) CHECK(s > 0.0);
    std::set<std::string> styles;
    for (const auto& r : ds.manifest.records) styles.insert(r.city);
    CHECK(styles.size() > 1);
  }

  SUBCASE("re-emission is byte-stable across directories") {
    const auto other = fs::temp_directory_path() / "skyfill_synth_ds2";
    fs::remove_all(other);
    SyntheticDatasetSpec again = spec;
    again.out_dir = other.string();
    const auto ds2 = emit_synthetic_dataset(again);

    auto slurp = [](const std::string& p) {
      std::ifstream in(p, std::ios::binary);
      return std::string(std::istreambuf_iterator<char>(in), {});
    };
    CHECK(slurp(ds.manifest_path) == slurp(ds2.manifest_path));
    CHECK(slurp(ds.stats_path) == slurp(ds2.stats_path));
    // the images themselves are identical too
    CHECK(slurp(ds.manifest.records[0].image_path) ==
          slurp(ds2.manifest.records[0].image_path));
    fs::remove_all(other);
  }

  SUBCASE("style-restricted emission keeps the requested styles") {
    const auto other = fs::temp_directory_path() / "skyfill_synth_ds3";
    fs::remove_all(other);
    SyntheticDatasetSpec shifted = spec;
    shifted.out_dir = other.string();
    shifted.train_styles = {SceneStyle::a, SceneStyle::b, SceneStyle::c};
    shifted.val_styles = {SceneStyle::d};
    const auto ds3 = emit_synthetic_dataset(shifted);
    for (const auto& r : ds3.manifest.records) {
      if (r.split == Split::train)
        CHECK((r.city == "A" || r.city == "B" || r.city == "C"));
      else
        CHECK(r.city == "D");
    }
    fs::remove_all(other);
  }

  fs::remove_all(root);
}

TEST_CASE("channel stats match direct averaging") {
  const auto dir = fs::temp_directory_path() / "skyfill_stats";
  fs::remove_all(dir);
  fs::create_directories(dir);

  ImagePlane a(4, 4, 3, 0.0, PixelDomain::raw8);
  ImagePlane b(4, 4, 3, 0.0, PixelDomain::raw8);
  for (int h = 0; h < 4; ++h)
    for (int w = 0; w < 4; ++w)
      for (int c = 0; c < 3; ++c) {
        a.at(h, w, c) = 51.0 * (c + 1);   // unit values 0.2, 0.4, 0.6
        b.at(h, w, c) = 51.0 * (c + 2);   // unit values 0.4, 0.6, 0.8
      }
  write_png((dir / "a.png").string(), a);
  write_png((dir / "b.png").string(), b);

  const auto stats = compute_channel_stats(
      {(dir / "a.png").string(), (dir / "b.png").string()});
  REQUIRE(stats.mean.size() == 3);
  CHECK(stats.mean[0] == doctest::Approx(0.3).epsilon(1e-6));
  CHECK(stats.mean[1] == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(stats.mean[2] == doctest::Approx(0.7).epsilon(1e-6));
  // each channel is half 0.2-below, half 0.2-above its mean
  for (double s : stats.std) CHECK(s == doctest::Approx(0.1).epsilon(1e-2));
  fs::remove_all(dir);
}
