#include <filesystem>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "skyfill/mask.hpp"

using namespace skyfill;
namespace tt = skyfill::testing;

TEST_CASE("default schedule reproduces the published milestone table") {
  const auto& rows = default_mask_schedule().milestones();
  REQUIRE(rows.size() == 6);
  const ScheduleMilestone expected[] = {{0, 100, 10}, {10, 70, 12},
                                        {20, 52, 14}, {30, 50, 15},
                                        {40, 25, 20}, {50, 11, 30}};
  for (int i = 0; i < 6; ++i) {
    CHECK(rows[i].epoch == expected[i].epoch);
    CHECK(rows[i].cluster_count == expected[i].cluster_count);
    CHECK(rows[i].cluster_size == expected[i].cluster_size);
  }
}

TEST_CASE("schedule_at holds each milestone until the next one") {
  const auto& sched = default_mask_schedule();
  CHECK(schedule_at(sched, 0) == std::pair(100, 10));
  CHECK(schedule_at(sched, 9) == std::pair(100, 10));
  CHECK(schedule_at(sched, 10) == std::pair(70, 12));
  CHECK(schedule_at(sched, 19) == std::pair(70, 12));
  CHECK(schedule_at(sched, 45) == std::pair(25, 20));
  CHECK(schedule_at(sched, 50) == std::pair(11, 30));
  CHECK(schedule_at(sched, 500) == std::pair(11, 30));

  SUBCASE("piecewise constant over every epoch") {
    auto prev = schedule_at(sched, 0);
    for (int e = 1; e <= 120; ++e) {
      const auto cur = schedule_at(sched, e);
      bool is_milestone = false;
      for (const auto& m : sched.milestones())
        if (m.epoch == e) is_milestone = true;
      if (!is_milestone) CHECK(cur == prev);
      prev = cur;
    }
  }

  SUBCASE("count never increases and size never decreases") {
    for (int e = 1; e <= 120; ++e) {
      const auto [c0, s0] = schedule_at(sched, e - 1);
      const auto [c1, s1] = schedule_at(sched, e);
      CHECK(c1 <= c0);
      CHECK(s1 >= s0);
    }
  }
}

TEST_CASE("schedule text forms round-trip") {
  const auto& sched = default_mask_schedule();
  const auto back = MaskSchedule::parse(sched.serialize());
  REQUIRE(back.milestones().size() == sched.milestones().size());
  for (std::size_t i = 0; i < back.milestones().size(); ++i) {
    CHECK(back.milestones()[i].epoch == sched.milestones()[i].epoch);
    CHECK(back.milestones()[i].cluster_count ==
          sched.milestones()[i].cluster_count);
    CHECK(back.milestones()[i].cluster_size ==
          sched.milestones()[i].cluster_size);
  }

  SUBCASE("compact comma form") {
    const auto parsed = MaskSchedule::parse("0:4:2,3:2:5");
    REQUIRE(parsed.milestones().size() == 2);
    CHECK(parsed.milestones()[1].epoch == 3);
    CHECK(parsed.milestones()[1].cluster_count == 2);
    CHECK(parsed.milestones()[1].cluster_size == 5);
  }

  SUBCASE("file form with comments") {
    const auto parsed = MaskSchedule::parse("# schedule\n0 4 2\n3 2 5\n");
    REQUIRE(parsed.milestones().size() == 2);
    CHECK(parsed.milestones()[0].cluster_count == 4);
  }
}

TEST_CASE("scaled_epochs rescales milestone epochs with a floor of 1") {
  const auto scaled = default_mask_schedule().scaled_epochs(0.1);
  REQUIRE(scaled.milestones().size() == 6);
  CHECK(scaled.milestones()[0].epoch == 0);
  CHECK(scaled.milestones()[1].epoch == 1);
  CHECK(scaled.milestones()[5].epoch == 5);
  // masking geometry is untouched
  CHECK(scaled.milestones()[5].cluster_count == 11);
  CHECK(scaled.milestones()[5].cluster_size == 30);
}

TEST_CASE("generate_mask basics") {
  SUBCASE("zero clusters leave the mask all ones") {
    const auto mask = generate_mask(512, 512, {0, 10, 7});
    CHECK(masked_fraction(mask) == 0.0);
  }

  SUBCASE("one square masks exactly size^2 pixels") {
    const auto mask = generate_mask(512, 512, {1, 10, 3});
    long long zeros = 0;
    for (auto v : mask.values) zeros += v == 0;
    CHECK(zeros == 100);
  }

  SUBCASE("identical specs give identical masks") {
    const MaskSpec spec{7, 9, 12345};
    const auto a = generate_mask(64, 64, spec);
    const auto b = generate_mask(64, 64, spec);
    CHECK(a.values == b.values);
  }

  SUBCASE("different seeds change the mask") {
    const auto a = generate_mask(64, 64, {7, 9, 1});
    const auto b = generate_mask(64, 64, {7, 9, 2});
    CHECK(a.values != b.values);
  }

  SUBCASE("cluster larger than the grid is rejected") {
    CHECK(tt::thrown_kind([] { generate_mask(8, 8, {1, 9, 0}); }) ==
          ErrorKind::invalid_spec);
  }
}

TEST_CASE("generated masks match the per-pixel rasterization oracle") {
  Rng rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 8 + static_cast<int>(rng.uniform_index(57));
    const int w = 8 + static_cast<int>(rng.uniform_index(57));
    const int size = 1 + static_cast<int>(rng.uniform_index(
                             static_cast<std::uint64_t>(std::min(h, w))));
    const MaskSpec spec{static_cast<int>(rng.uniform_index(30)), size,
                        rng.next_u64()};
    const auto mask = generate_mask(h, w, spec);
    const auto oracle = tt::rasterize_mask_oracle(h, w, spec);
    REQUIRE(mask.values == oracle.values);
  }
}

TEST_CASE("mask fraction respects the n*s^2 bound, equality iff no overlap") {
  Rng rng(9);
  for (int trial = 0; trial < 300; ++trial) {
    const int h = 16 + static_cast<int>(rng.uniform_index(49));
    const int w = 16 + static_cast<int>(rng.uniform_index(49));
    const int size = 1 + static_cast<int>(rng.uniform_index(10));
    const int count = static_cast<int>(rng.uniform_index(20));
    const MaskSpec spec{count, size, rng.next_u64()};
    const auto mask = generate_mask(h, w, spec);

    long long zeros = 0;
    for (auto v : mask.values) zeros += v == 0;
    const long long budget = static_cast<long long>(count) * size * size;
    REQUIRE(zeros <= budget);

    // overlap detection straight from the corner list
    const auto corners = sample_corners(h, w, spec);
    bool overlaps = false;
    for (std::size_t i = 0; i < corners.size() && !overlaps; ++i)
      for (std::size_t j = i + 1; j < corners.size() && !overlaps; ++j) {
        const bool apart = corners[i].first + size <= corners[j].first ||
                           corners[j].first + size <= corners[i].first ||
                           corners[i].second + size <= corners[j].second ||
                           corners[j].second + size <= corners[i].second;
        overlaps = !apart;
      }
    if (overlaps)
      REQUIRE(zeros < budget);
    else
      REQUIRE(zeros == budget);
  }
}

TEST_CASE("corners always keep squares fully inside the grid") {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 8 + static_cast<int>(rng.uniform_index(40));
    const int w = 8 + static_cast<int>(rng.uniform_index(40));
    const int size = 1 + static_cast<int>(rng.uniform_index(8));
    const MaskSpec spec{25, size, rng.next_u64()};
    for (const auto& [ch, cw] : sample_corners(h, w, spec)) {
      REQUIRE(ch >= 0);
      REQUIRE(cw >= 0);
      REQUIRE(ch + size <= h);
      REQUIRE(cw + size <= w);
    }
  }
}

TEST_CASE("masked_fraction counts zeros") {
  CHECK(masked_fraction(BinaryMask(8, 8, 1)) == 0.0);
  CHECK(masked_fraction(BinaryMask(8, 8, 0)) == 1.0);
  BinaryMask half(2, 2, 1);
  half.at(0, 0) = 0;
  half.at(1, 1) = 0;
  CHECK(masked_fraction(half) == 0.5);
}

TEST_CASE("apply_mask gates every channel") {
  ImagePlane image(2, 2, 3, 0.5, PixelDomain::normalized);
  BinaryMask mask(2, 2, 1);
  mask.at(0, 1) = 0;
  mask.at(1, 0) = 0;
  const auto out = apply_mask(image, mask);
  for (int c = 0; c < 3; ++c) {
    CHECK(out.at(0, 0, c) == 0.5);
    CHECK(out.at(1, 1, c) == 0.5);
    CHECK(out.at(0, 1, c) == 0.0);
    CHECK(out.at(1, 0, c) == 0.0);
  }

  SUBCASE("all-ones mask is the identity") {
    const auto same = apply_mask(image, BinaryMask(2, 2, 1));
    CHECK(tt::max_abs_diff(same, image) == 0.0);
  }

  SUBCASE("idempotent") {
    const auto once = apply_mask(image, mask);
    const auto twice = apply_mask(once, mask);
    CHECK(tt::max_abs_diff(once, twice) == 0.0);
  }

  SUBCASE("shape mismatch is an error") {
    CHECK(tt::thrown_kind([&] { apply_mask(image, BinaryMask(3, 2, 1)); }) ==
          ErrorKind::shape_mismatch);
  }
}

TEST_CASE("mask png round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "skyfill_mask_png";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "m.png").string();
  const auto mask = generate_mask(33, 47, {6, 5, 99});
  write_mask_png(path, mask);
  const auto back = read_mask_png(path);
  CHECK(back.height == mask.height);
  CHECK(back.width == mask.width);
  CHECK(back.values == mask.values);
  std::filesystem::remove_all(dir);
}
