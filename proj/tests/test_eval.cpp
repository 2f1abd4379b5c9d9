#include <algorithm>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "skyfill/eval.hpp"
#include "skyfill/synth.hpp"
#include "skyfill/unet.hpp"

using namespace skyfill;
namespace tt = skyfill::testing;
namespace fs = std::filesystem;

namespace {

ImagePlane class_map(std::initializer_list<std::initializer_list<int>> rows) {
  const int h = static_cast<int>(rows.size());
  const int w = static_cast<int>(rows.begin()->size());
  ImagePlane map(h, w, 1, 0.0, PixelDomain::raw8);
  int r = 0;
  for (const auto& row : rows) {
    int c = 0;
    for (int v : row) map.at(r, c++, 0) = static_cast<double>(v);
    ++r;
  }
  return map;
}

ImagePlane random_classes(Rng& rng, int h, int w, int k) {
  ImagePlane map(h, w, 1, 0.0, PixelDomain::raw8);
  for (auto& v : map.values)
    v = static_cast<double>(rng.uniform_index(static_cast<std::uint64_t>(k)));
  return map;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("skyfill_" + tag)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("single-pair iou matches hand-counted examples") {
  const auto pred = class_map({{1, 1, 0}, {0, 1, 0}});
  const auto label = class_map({{1, 0, 0}, {1, 1, 0}});
  // class 1: intersection {(0,0),(1,1)} = 2, union = 4
  CHECK(iou(pred, label, 1) == doctest::Approx(0.5));
  // class 0: intersection {(0,2),(1,2)} = 2, union = 4
  CHECK(iou(pred, label, 0) == doctest::Approx(0.5));

  SUBCASE("a class absent from both sides is an error") {
    CHECK(tt::thrown_kind([&] { iou(pred, label, 2); }) ==
          ErrorKind::empty_input);
  }

  SUBCASE("mismatched dims are rejected") {
    const auto small = class_map({{1, 1}, {0, 1}});
    CHECK(tt::thrown_kind([&] { iou(pred, small, 1); }) ==
          ErrorKind::shape_mismatch);
  }
}

TEST_CASE("accumulator matches the brute-force counts on random maps") {
  Rng rng(401);
  const int k = 3;
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 1 + static_cast<int>(rng.uniform_index(4));
    const int w = 1 + static_cast<int>(rng.uniform_index(4));
    const int n = 1 + static_cast<int>(rng.uniform_index(3));

    IoUAccumulator acc(k);
    std::vector<ImagePlane> preds, labels;
    for (int i = 0; i < n; ++i) {
      preds.push_back(random_classes(rng, h, w, k));
      labels.push_back(random_classes(rng, h, w, k));
      acc.add(preds.back(), labels.back());
    }
    const auto report = acc.report();
    REQUIRE(report.n_images == n);

    for (int c = 0; c < k; ++c) {
      const auto total = tt::iou_counts_oracle(preds, labels, c);
      double image_sum = 0.0;
      int image_n = 0;
      for (int i = 0; i < n; ++i) {
        const auto one = tt::iou_counts_oracle({preds[i]}, {labels[i]}, c);
        if (one.unions > 0) {
          image_sum += static_cast<double>(one.intersection) /
                       static_cast<double>(one.unions);
          ++image_n;
        }
      }
      CHECK(report.counts[c].intersection == total.intersection);
      CHECK(report.counts[c].unions == total.unions);
      CHECK(report.defined[c] == (total.unions > 0));
      if (total.unions > 0) {
        CHECK(report.per_class_iou[c] ==
              doctest::Approx(static_cast<double>(total.intersection) /
                              static_cast<double>(total.unions))
                  .epsilon(1e-12));
        CHECK(report.per_image_mean_iou[c] ==
              doctest::Approx(image_sum / image_n).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("absent classes are flagged and skipped by the foreground mean") {
  IoUAccumulator acc(3);
  // only classes 0 and 1 ever appear; class 2 must stay undefined
  acc.add(class_map({{0, 1}}), class_map({{1, 1}}));
  const auto report = acc.report();
  CHECK(report.defined[0]);
  CHECK(report.defined[1]);
  CHECK_FALSE(report.defined[2]);
  // foreground mean covers defined classes >= 1 only: class 1 = 1/2
  CHECK(report.foreground_mean() == doctest::Approx(0.5));

  SUBCASE("no defined foreground class yields zero") {
    IoUAccumulator empty_fg(2);
    empty_fg.add(class_map({{0, 0}}), class_map({{0, 0}}));
    const auto r = empty_fg.report();
    CHECK_FALSE(r.defined[1]);
    CHECK(r.foreground_mean() == 0.0);
  }
}

TEST_CASE("logit maps convert to class maps by threshold or argmax") {
  SUBCASE("single channel: sigmoid against the threshold") {
    ImagePlane logits(1, 4, 1, 0.0, PixelDomain::unit);
    logits.at(0, 0, 0) = -2.0;  // sigmoid 0.12
    logits.at(0, 1, 0) = 0.0;   // sigmoid 0.50, tie -> road
    logits.at(0, 2, 0) = 2.0;   // sigmoid 0.88
    logits.at(0, 3, 0) = -0.1;
    const auto classes = predict_to_classes(logits, 0.5);
    CHECK(classes.channels == 1);
    CHECK(classes.at(0, 0, 0) == 0.0);
    CHECK(classes.at(0, 1, 0) == 1.0);
    CHECK(classes.at(0, 2, 0) == 1.0);
    CHECK(classes.at(0, 3, 0) == 0.0);

    // a higher threshold flips the borderline pixels
    const auto strict = predict_to_classes(logits, 0.9);
    CHECK(strict.at(0, 2, 0) == 0.0);
  }

  SUBCASE("multi channel: argmax with first-wins ties") {
    ImagePlane logits(1, 2, 3, 0.0, PixelDomain::unit);
    logits.at(0, 0, 0) = 0.3;
    logits.at(0, 0, 1) = 0.9;
    logits.at(0, 0, 2) = 0.1;
    logits.at(0, 1, 0) = 0.7;
    logits.at(0, 1, 1) = 0.7;  // tie with class 0
    logits.at(0, 1, 2) = 0.2;
    const auto classes = predict_to_classes(logits, 0.5);
    CHECK(classes.at(0, 0, 0) == 1.0);
    CHECK(classes.at(0, 1, 0) == 0.0);
  }

  SUBCASE("batched variant agrees with the per-image one") {
    Rng rng(7);
    Tensor logits(3, 2, 4, 4);
    for (auto& v : logits.data) v = static_cast<float>(rng.uniform(-2, 2));
    const auto batch = predict_batch_to_classes(logits, 0.5);
    REQUIRE(batch.size() == 3);
    for (int n = 0; n < 3; ++n) {
      ImagePlane single(4, 4, 2, 0.0, PixelDomain::unit);
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w)
          for (int c = 0; c < 2; ++c)
            single.at(h, w, c) = logits.at(n, c, h, w);
      const auto expect = predict_to_classes(single, 0.5);
      CHECK(tt::max_abs_diff(batch[n], expect) == 0.0);
    }
  }
}

TEST_CASE("model and checkpoint evaluation agree") {
  TempDir dir("eval_ds");
  SyntheticDatasetSpec spec;
  spec.out_dir = (dir.path / "ds").string();
  spec.canvas = 16;
  spec.train_count = 4;
  spec.val_count = 4;
  spec.road_count_min = 1;
  spec.road_count_max = 2;
  spec.road_width_min = 2;
  spec.road_width_max = 4;
  spec.seed = 15;
  const auto ds = emit_synthetic_dataset(spec);
  const auto val = read_manifest(ds.val_manifest_path);
  const auto stats = read_stats_file(ds.stats_path);

  ToyUNet model(1, 77);
  const auto direct = evaluate_model(model, val, stats, 0.5);
  CHECK(direct.n_images == 4);
  REQUIRE(direct.counts.size() == 2);
  CHECK(direct.foreground_mean() >= 0.0);
  CHECK(direct.foreground_mean() <= 1.0);

  const auto ckpt_path = (dir.path / "model.ckpt").string();
  save_checkpoint(ckpt_path, snapshot(model, "step3", "digest"));
  const auto via_ckpt = evaluate_checkpoint(ckpt_path, val, stats, 1, 0.5);
  CHECK(via_ckpt.n_images == direct.n_images);
  for (std::size_t c = 0; c < direct.counts.size(); ++c) {
    CHECK(via_ckpt.counts[c].intersection == direct.counts[c].intersection);
    CHECK(via_ckpt.counts[c].unions == direct.counts[c].unions);
  }
}

TEST_CASE("matrix tables round-trip and reject duplicate cells") {
  ExperimentMatrix matrix;
  MatrixRow a;
  a.variant = "full";
  a.arm = "full_method";
  a.train_records = 2304;
  a.iou = 0.7312345678901234;
  a.iou_per_image = 0.7012;
  a.metrics.per_class_iou = {0.9, 0.7312345678901234};
  a.metrics.defined = {true, true};
  a.metrics.counts.resize(2);
  a.metrics.per_image_mean_iou = {0.9, 0.7};
  a.checkpoint_path = "runs/full/step3_final.ckpt";
  MatrixRow b;
  b.variant = "quarter";
  b.arm = "baseline";
  b.train_records = 576;
  b.failed = true;
  b.note = "checkpoint missing";
  matrix.rows = {a, b};
  matrix.validate();

  const auto text = serialize_matrix(matrix);
  const auto back = parse_matrix(text);
  REQUIRE(back.rows.size() == 2);
  CHECK(back.rows[0].variant == "full");
  CHECK(back.rows[0].arm == "full_method");
  CHECK(back.rows[0].train_records == 2304);
  CHECK_FALSE(back.rows[0].failed);
  CHECK(back.rows[0].iou == a.iou);  // exact: %.17g round-trips doubles
  CHECK(back.rows[0].iou_per_image == a.iou_per_image);
  CHECK(back.rows[0].metrics.per_class_iou[1] == a.metrics.per_class_iou[1]);
  CHECK(back.rows[0].checkpoint_path == a.checkpoint_path);
  CHECK(back.rows[1].failed);
  CHECK(back.rows[1].note == "checkpoint missing");

  SUBCASE("file round trip is byte-stable") {
    TempDir dir("matrix_rt");
    const auto path = (dir.path / "matrix.tsv").string();
    write_matrix(matrix, path);
    const auto reread = read_matrix(path);
    CHECK(serialize_matrix(reread) == text);
  }

  SUBCASE("duplicate (variant, domain, arm) is rejected") {
    auto dup = matrix;
    dup.rows.push_back(a);
    CHECK(tt::thrown_kind([&] { dup.validate(); }) == ErrorKind::invalid_spec);
  }

  SUBCASE("garbage text is a corrupt-state error") {
    CHECK(tt::thrown_kind([&] { parse_matrix("not a matrix\n"); }) ==
          ErrorKind::corrupt_state);
  }
}

TEST_CASE("matrix evaluation marks missing checkpoints failed") {
  TempDir dir("run_matrix");
  SyntheticDatasetSpec spec;
  spec.out_dir = (dir.path / "ds").string();
  spec.canvas = 16;
  spec.train_count = 2;
  spec.val_count = 2;
  spec.road_count_min = 1;
  spec.road_count_max = 1;
  spec.road_width_min = 2;
  spec.road_width_max = 3;
  spec.seed = 21;
  const auto ds = emit_synthetic_dataset(spec);

  ToyUNet model(1, 5);
  const auto ckpt_path = (dir.path / "ok.ckpt").string();
  save_checkpoint(ckpt_path, snapshot(model, "step3", "d"));

  MatrixSpec mspec;
  mspec.val_manifest_path = ds.val_manifest_path;
  mspec.stats_path = ds.stats_path;
  mspec.cells = {{"full", "in_domain", "full_method", 2, ckpt_path},
                 {"full", "in_domain", "baseline", 2,
                  (dir.path / "missing.ckpt").string()}};
  const auto matrix = run_matrix(mspec);
  REQUIRE(matrix.rows.size() == 2);
  CHECK_FALSE(matrix.rows[0].failed);
  CHECK(matrix.rows[1].failed);
  CHECK_FALSE(matrix.rows[1].note.empty());

  const auto val = read_manifest(ds.val_manifest_path);
  const auto stats = read_stats_file(ds.stats_path);
  const auto direct = evaluate_checkpoint(ckpt_path, val, stats, 1, 0.5);
  CHECK(matrix.rows[0].iou == doctest::Approx(direct.foreground_mean()));
}

TEST_CASE("report bundle ties the plot to the table and draws the masks") {
  ExperimentMatrix matrix;
  for (const auto& [variant, records, iou_value] :
       {std::tuple{"full", std::size_t{2304}, 0.74},
        std::tuple{"half", std::size_t{1152}, 0.70},
        std::tuple{"quarter", std::size_t{576}, 0.62}}) {
    for (const auto& [arm, delta] :
         {std::pair{"baseline", -0.1}, std::pair{"full_method", 0.0}}) {
      MatrixRow row;
      row.variant = variant;
      row.arm = arm;
      row.train_records = records;
      row.iou = iou_value + delta;
      row.iou_per_image = row.iou;
      matrix.rows.push_back(row);
    }
  }

  TempDir dir("report");
  const auto schedule = MaskSchedule::parse("0:10:4,3:5:6,6:2:8");
  const auto files = emit_report(matrix, dir.path.string(), schedule);
  REQUIRE(fs::exists(files.table_path));
  REQUIRE(fs::exists(files.plot_path));
  REQUIRE(fs::exists(files.mask_figure_path));

  SUBCASE("every plotted point's iou matches a table row exactly") {
    const auto table = read_matrix(files.table_path);
    const auto svg = slurp(files.plot_path);
    const std::regex point_re(
        "data-variant=\"([^\"]*)\" data-x=\"([0-9]+)\" data-iou=\"([^\"]*)\"");
    int points = 0;
    for (std::sregex_iterator it(svg.begin(), svg.end(), point_re), end;
         it != end; ++it) {
      ++points;
      const std::string variant = (*it)[1];
      const std::size_t x = std::stoull((*it)[2]);
      const double y = std::strtod((*it)[3].str().c_str(), nullptr);
      const auto row = std::find_if(
          table.rows.begin(), table.rows.end(), [&](const MatrixRow& r) {
            return r.variant == variant && r.train_records == x && r.iou == y;
          });
      CHECK(row != table.rows.end());
    }
    CHECK(points == 6);
  }

  SUBCASE("mask figure has one cell per epoch with separators") {
    const auto strip = read_png(files.mask_figure_path);
    CHECK(strip.height == 128);
    CHECK(strip.width == 3 * 128 + 2 * 4);
    CHECK(strip.channels == 1);
    // separator columns keep their neutral gray
    CHECK(strip.at(0, 128, 0) == 128.0);
    // mask cells are strictly black or white
    int black = 0, white = 0;
    for (int h = 0; h < strip.height; ++h)
      for (int w = 0; w < 128; ++w) {
        if (strip.at(h, w, 0) == 0.0) ++black;
        if (strip.at(h, w, 0) == 255.0) ++white;
      }
    CHECK(black + white == 128 * 128);
    CHECK(black > 0);
    CHECK(white > 0);
  }

  SUBCASE("an empty matrix cannot be reported") {
    CHECK(tt::thrown_kind([&] {
            emit_report(ExperimentMatrix{}, dir.path.string(), schedule);
          }) == ErrorKind::empty_input);
  }
}
