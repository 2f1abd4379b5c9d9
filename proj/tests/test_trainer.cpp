#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "skyfill/synth.hpp"
#include "skyfill/trainer.hpp"
#include "skyfill/unet.hpp"

using namespace skyfill;
namespace tt = skyfill::testing;
namespace fs = std::filesystem;

namespace {

// one tiny on-disk dataset shared by the trainer tests
struct Fixture {
  SyntheticDataset ds;
  DatasetManifest train;
  DatasetManifest val;
  ChannelStats stats;
};

const Fixture& fixture() {
  static Fixture fix = [] {
    SyntheticDatasetSpec spec;
    spec.out_dir =
        (fs::temp_directory_path() / "skyfill_trainer_fixture").string();
    fs::remove_all(spec.out_dir);
    spec.canvas = 16;
    spec.train_count = 8;
    spec.val_count = 4;
    spec.road_count_min = 1;
    spec.road_count_max = 2;
    spec.road_width_min = 2;
    spec.road_width_max = 4;
    spec.seed = 123;
    Fixture f;
    f.ds = emit_synthetic_dataset(spec);
    f.train = read_manifest(f.ds.train_manifest_path);
    f.val = read_manifest(f.ds.val_manifest_path);
    f.stats = read_stats_file(f.ds.stats_path);
    return f;
  }();
  return fix;
}

StepConfig tiny_step(StepKind kind) {
  StepConfig config;
  config.step = kind;
  config.epochs = 2;
  config.lr = 0.01;
  config.lr_milestones = {1};
  config.batch_size = 4;
  config.mask_schedule = MaskSchedule::parse("0:4:3,1:2:4");
  return config;
}

TrainContext make_ctx(const std::string& out_dir, std::uint64_t seed = 0,
                      bool with_val = true) {
  TrainContext ctx;
  ctx.seed = seed;
  ctx.out_dir = out_dir;
  ctx.stats = fixture().stats;
  if (with_val) ctx.val_manifest = &fixture().val;
  return ctx;
}

struct LogRow {
  std::string kind, step;
  int epoch = 0;
  std::string batch;
  double lr = 0, l_id = 0, l_fill = 0, loss = 0, mask_frac = 0;
  std::string val;
};

std::vector<LogRow> parse_log(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<LogRow> rows;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header) {
      CHECK(line ==
            "kind\tstep\tepoch\tbatch\tlr\tl_id\tl_fill\tloss\tmask_frac\tval");
      header = false;
      continue;
    }
    std::istringstream row(line);
    LogRow r;
    std::string lr_s, id_s, fill_s, loss_s, frac_s;
    row >> r.kind >> r.step >> r.epoch >> r.batch >> lr_s >> id_s >> fill_s >>
        loss_s >> frac_s >> r.val;
    r.lr = std::stod(lr_s);
    if (id_s != "-") r.l_id = std::stod(id_s);
    if (fill_s != "-") r.l_fill = std::stod(fill_s);
    r.loss = std::stod(loss_s);
    if (frac_s != "-") r.mask_frac = std::stod(frac_s);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
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

}  // namespace

TEST_CASE("binary cross-entropy matches the direct formula and its fd grad") {
  Rng rng(91);
  Tensor logits(2, 1, 3, 3), labels(2, 1, 3, 3);
  for (auto& v : logits.data) v = static_cast<float>(rng.uniform(-4.0, 4.0));
  for (auto& v : labels.data) v = rng.coin() ? 1.f : 0.f;

  Tensor grad;
  const double got = bce_logits_loss(logits, labels, grad);

  double want = 0.0;
  for (std::size_t i = 0; i < logits.data.size(); ++i) {
    const double z = logits.data[i], y = labels.data[i];
    want += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  want /= static_cast<double>(logits.data.size());
  CHECK(got == doctest::Approx(want).epsilon(1e-10));

  const auto fd = tt::fd_gradient_tensor(
      logits,
      [&] {
        Tensor g;
        return bce_logits_loss(logits, labels, g);
      },
      1e-3f);
  for (std::size_t i = 0; i < grad.data.size(); ++i)
    CHECK(grad.data[i] == doctest::Approx(fd.data[i]).epsilon(2e-2));
}

TEST_CASE("softmax cross-entropy matches the direct formula and its fd grad") {
  Rng rng(93);
  const int k = 3;
  Tensor logits(2, k, 2, 2), labels(2, 1, 2, 2);
  for (auto& v : logits.data) v = static_cast<float>(rng.uniform(-3.0, 3.0));
  for (auto& v : labels.data)
    v = static_cast<float>(rng.uniform_index(k));

  Tensor grad;
  const double got = softmax_ce_loss(logits, labels, grad);

  double want = 0.0;
  for (int n = 0; n < 2; ++n)
    for (int h = 0; h < 2; ++h)
      for (int w = 0; w < 2; ++w) {
        double mx = -1e30;
        for (int c = 0; c < k; ++c)
          mx = std::max(mx, static_cast<double>(logits.at(n, c, h, w)));
        double denom = 0.0;
        for (int c = 0; c < k; ++c)
          denom += std::exp(logits.at(n, c, h, w) - mx);
        const int y = static_cast<int>(labels.at(n, 0, h, w));
        want -= logits.at(n, y, h, w) - mx - std::log(denom);
      }
  want /= 8.0;
  CHECK(got == doctest::Approx(want).epsilon(1e-10));

  const auto fd = tt::fd_gradient_tensor(
      logits,
      [&] {
        Tensor g;
        return softmax_ce_loss(logits, labels, g);
      },
      1e-3f);
  for (std::size_t i = 0; i < grad.data.size(); ++i)
    CHECK(grad.data[i] == doctest::Approx(fd.data[i]).epsilon(2e-2).scale(1.0));

  SUBCASE("labels outside the class range are rejected") {
    labels.data[0] = 7.f;
    Tensor g;
    CHECK(tt::thrown_kind([&] { softmax_ce_loss(logits, labels, g); }) ==
          ErrorKind::label_domain);
  }
}

TEST_CASE("gradient clipping rescales only above the threshold") {
  Tensor w(1, 1, 1, 2), g(1, 1, 1, 2);
  g.data = {3.f, 4.f};  // norm 5
  std::vector<nn::ParamRef> params{{"p", &w, &g}};

  SUBCASE("above the cap") {
    CHECK(clip_gradients(params, 1.0) == doctest::Approx(5.0));
    CHECK(g.data[0] == doctest::Approx(0.6));
    CHECK(g.data[1] == doctest::Approx(0.8));
  }

  SUBCASE("below the cap: untouched") {
    CHECK(clip_gradients(params, 10.0) == doctest::Approx(5.0));
    CHECK(g.data[0] == 3.f);
  }

  SUBCASE("disabled with max_norm 0") {
    CHECK(clip_gradients(params, 0.0) == doctest::Approx(5.0));
    CHECK(g.data[0] == 3.f);
  }
}

TEST_CASE("a single batch can be overfit in a few hundred steps") {
  const auto& fix = fixture();
  ToyUNet model(1, 7);

  // two fixed samples from the dataset
  Tensor x(2, 3, 16, 16), y(2, 1, 16, 16);
  for (int i = 0; i < 2; ++i) {
    const auto sample = load_sample(fix.train.records[i], 0);
    const auto norm = normalize(sample.image, fix.stats);
    REQUIRE(sample.label.has_value());
    for (int h = 0; h < 16; ++h)
      for (int w = 0; w < 16; ++w) {
        y.at(i, 0, h, w) = static_cast<float>(sample.label->at(h, w));
        for (int c = 0; c < 3; ++c)
          x.at(i, c, h, w) = static_cast<float>(norm.at(h, w, c));
      }
  }

  nn::Adam opt(0.9, 0.999, 1e-8, 0.0);
  double first = 0.0, last = 0.0;
  for (int iter = 0; iter < 200; ++iter) {
    auto logits = model.forward(x, true);
    Tensor grad;
    last = bce_logits_loss(logits, y, grad);
    if (iter == 0) first = last;
    model.backward(grad);
    opt.step(model.parameters(), 0.01);
  }
  CHECK(last < 0.1 * first);
}

TEST_CASE("pretraining step writes logs, checkpoints, and sane schedules") {
  const auto& fix = fixture();
  TempDir dir("step1_run");
  ToyUNet model(1, 40);
  Rng head_rng(1);
  to_inpainting_head(model, HeadMode::replace, head_rng);

  const auto config = tiny_step(StepKind::inpaint);
  const auto result =
      run_step1(config, fix.train, model, make_ctx(dir.path.string()));

  CHECK(fs::exists(result.checkpoint_path));
  CHECK(fs::exists(result.log_path));
  CHECK(std::isfinite(result.final_train_loss));
  REQUIRE(result.final_val_metric.has_value());
  CHECK(std::isfinite(*result.final_val_metric));

  const auto bundle = read_checkpoint(result.checkpoint_path);
  CHECK(bundle.step_tag == "step1");
  CHECK(bundle.epoch == -1);
  CHECK(bundle.head_channels == 3);
  CHECK(bundle.config_digest == result.config_digest);

  const auto rows = parse_log(result.log_path);
  REQUIRE_FALSE(rows.empty());

  SUBCASE("logged lr follows the multistep schedule") {
    for (const auto& r : rows)
      CHECK(r.lr == doctest::Approx(nn::lr_at(config.lr, config.lr_milestones,
                                              config.lr_gamma, r.epoch)));
  }

  SUBCASE("logged mask fraction stays within the schedule bound") {
    for (const auto& r : rows) {
      if (r.kind != "batch") continue;
      const auto [count, size] = schedule_at(config.mask_schedule, r.epoch);
      CHECK(r.mask_frac <=
            doctest::Approx(static_cast<double>(count) * size * size /
                            (16.0 * 16.0)));
      CHECK(r.mask_frac > 0.0);
    }
  }

  SUBCASE("epoch rows carry a validation value") {
    int epoch_rows = 0;
    for (const auto& r : rows)
      if (r.kind == "epoch") {
        ++epoch_rows;
        CHECK(r.val != "-");
      }
    CHECK(epoch_rows == config.epochs);
  }

  SUBCASE("milestone checkpoint appears at the configured epoch") {
    CHECK(fs::exists(dir.path / "checkpoints" / "step1_epoch001.ckpt"));
  }
}

TEST_CASE("same-seed runs produce identical logs, different seeds differ") {
  const auto& fix = fixture();
  const auto config = tiny_step(StepKind::inpaint);

  auto run_once = [&](const std::string& tag, std::uint64_t seed) {
    TempDir dir(tag);
    ToyUNet model(1, 40);
    Rng head_rng(1);
    to_inpainting_head(model, HeadMode::replace, head_rng);
    const auto result =
        run_step1(config, fix.train, model, make_ctx(dir.path.string(), seed));
    return slurp(result.log_path);
  };

  const auto a = run_once("det_a", 5);
  const auto b = run_once("det_b_longer_name", 5);
  CHECK(a == b);
  const auto c = run_once("det_c", 6);
  CHECK(a != c);
}

TEST_CASE("guided step demands labels and accepts labeled data") {
  const auto& fix = fixture();

  SUBCASE("unlabeled record is a hard error") {
    auto unlabeled = fix.train;
    unlabeled.records[0].label_path.clear();
    TempDir dir("step2_unlabeled");
    ToyUNet model(1, 40);
    Rng head_rng(1);
    to_inpainting_head(model, HeadMode::replace, head_rng);
    CHECK(tt::thrown_kind([&] {
            run_step2(tiny_step(StepKind::guided_inpaint), unlabeled, model,
                      make_ctx(dir.path.string()));
          }) == ErrorKind::missing_label);
  }

  SUBCASE("labeled run succeeds and freezes the mask geometry") {
    TempDir dir("step2_ok");
    ToyUNet model(1, 40);
    Rng head_rng(1);
    to_inpainting_head(model, HeadMode::replace, head_rng);
    const auto config = tiny_step(StepKind::guided_inpaint);
    const auto result =
        run_step2(config, fix.train, model, make_ctx(dir.path.string()));
    CHECK(read_checkpoint(result.checkpoint_path).step_tag == "step2");

    // every batch row uses the schedule's final milestone geometry
    const auto rows = parse_log(result.log_path);
    for (const auto& r : rows) {
      if (r.kind != "batch") continue;
      CHECK(r.mask_frac <= doctest::Approx(2.0 * 4 * 4 / 256.0));
    }
  }
}

TEST_CASE("all-background labels warn and leave parameters untouched") {
  TempDir data_dir("step2_zero_labels");
  SyntheticDatasetSpec spec;
  spec.out_dir = (data_dir.path / "ds").string();
  spec.canvas = 16;
  spec.train_count = 4;
  spec.val_count = 1;
  spec.road_count_min = 0;
  spec.road_count_max = 0;  // no roads anywhere
  spec.road_width_min = 2;
  spec.road_width_max = 3;
  spec.seed = 9;
  const auto ds = emit_synthetic_dataset(spec);
  const auto train = read_manifest(ds.train_manifest_path);

  ToyUNet model(1, 40);
  Rng head_rng(1);
  to_inpainting_head(model, HeadMode::replace, head_rng);
  std::map<std::string, Tensor> before;
  for (const auto& p : model.parameters()) before[p.name] = *p.value;

  auto config = tiny_step(StepKind::guided_inpaint);
  config.epochs = 1;
  config.lr_milestones.clear();
  config.weight_decay = 0.0;  // so zero gradient means zero update
  TrainContext ctx;
  ctx.seed = 0;
  ctx.out_dir = (data_dir.path / "run").string();
  ctx.stats = read_stats_file(ds.stats_path);

  const auto result = run_step2(config, train, model, ctx);
  CHECK(result.final_train_loss == 0.0);
  for (const auto& p : model.parameters())
    REQUIRE(p.value->data == before.at(p.name).data);

  const auto text = slurp(result.log_path);
  CHECK(text.find("all labels are empty") != std::string::npos);
}

TEST_CASE("fine-tuning reports validation iou and threads the checkpoint") {
  const auto& fix = fixture();
  TempDir dir("step3_run");
  ToyUNet model(1, 40);
  auto config = tiny_step(StepKind::segmentation);
  const auto result = run_step3(config, fix.train, model, 1,
                                make_ctx(dir.path.string()));
  CHECK(fs::exists(result.checkpoint_path));
  REQUIRE(result.final_val_metric.has_value());
  CHECK(*result.final_val_metric >= 0.0);
  CHECK(*result.final_val_metric <= 1.0);
  CHECK(read_checkpoint(result.checkpoint_path).step_tag == "step3");
}

TEST_CASE("resuming from a milestone reproduces the uninterrupted run") {
  const auto& fix = fixture();
  auto config = tiny_step(StepKind::inpaint);
  config.epochs = 4;
  config.lr_milestones = {1};

  TempDir dir_a("resume_full");
  std::string full_digest;
  {
    ToyUNet model(1, 40);
    Rng head_rng(1);
    to_inpainting_head(model, HeadMode::replace, head_rng);
    const auto result =
        run_step1(config, fix.train, model, make_ctx(dir_a.path.string(), 3));
    full_digest = result.checkpoint_digest;
  }

  TempDir dir_b("resume_half");
  {
    ToyUNet model(1, 40);
    Rng head_rng(1);
    to_inpainting_head(model, HeadMode::replace, head_rng);
    RunOptions options;
    options.resume_from =
        (dir_a.path / "checkpoints" / "step1_epoch001.ckpt").string();
    const auto result = run_step1(config, fix.train, model,
                                  make_ctx(dir_b.path.string(), 3), options);
    CHECK(result.checkpoint_digest == full_digest);
  }

  SUBCASE("a finished checkpoint cannot seed a resume") {
    ToyUNet model(1, 40);
    Rng head_rng(1);
    to_inpainting_head(model, HeadMode::replace, head_rng);
    RunOptions options;
    options.resume_from =
        (dir_a.path / "checkpoints" / "step1_final.ckpt").string();
    TempDir dir_c("resume_final");
    CHECK(tt::thrown_kind([&] {
            run_step1(config, fix.train, model,
                      make_ctx(dir_c.path.string(), 3), options);
          }) == ErrorKind::incompatible_checkpoint);
  }

  SUBCASE("a different configuration cannot seed a resume") {
    ToyUNet model(1, 40);
    Rng head_rng(1);
    to_inpainting_head(model, HeadMode::replace, head_rng);
    auto other = config;
    other.lr = 0.5;
    RunOptions options;
    options.resume_from =
        (dir_a.path / "checkpoints" / "step1_epoch001.ckpt").string();
    TempDir dir_c("resume_badcfg");
    CHECK(tt::thrown_kind([&] {
            run_step1(other, fix.train, model,
                      make_ctx(dir_c.path.string(), 3), options);
          }) == ErrorKind::incompatible_checkpoint);
  }
}

TEST_CASE("baseline and pretrained configs differ only in their source") {
  auto ours = tiny_step(StepKind::segmentation);
  ours.init_from = "/somewhere/step2_final.ckpt";
  auto baseline = ours;
  baseline.init_from.clear();
  CHECK(step_config_digest(ours, false) ==
        step_config_digest(baseline, false));
  CHECK(step_config_digest(ours, true) !=
        step_config_digest(baseline, true));
}

TEST_CASE("lineage files round-trip and enforce step order") {
  TempDir dir("lineage");
  const auto path = (dir.path / "lineage.tsv").string();
  RunLineage lineage{{"step1", "a.ckpt", "d1", "c1"},
                     {"step3", "b.ckpt", "d3", "c3"}};
  write_lineage(lineage, path);
  const auto back = read_lineage(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].step_tag == "step1");
  CHECK(back[1].checkpoint_digest == "d3");

  SUBCASE("out-of-order steps are rejected") {
    std::ofstream out(path);
    out << "# skyfill-lineage 1\n";
    out << "step2\ta.ckpt\td\tc\n";
    out << "step1\tb.ckpt\td\tc\n";
    out.close();
    CHECK(tt::thrown_kind([&] { read_lineage(path); }) ==
          ErrorKind::corrupt_state);
  }
}

TEST_CASE("pipeline variants produce the documented lineages") {
  const auto& fix = fixture();

  auto base_config = [&](const std::string& out_dir) {
    PipelineConfig config;
    config.seed = 11;
    config.out_dir = out_dir;
    config.train_manifest = fix.ds.train_manifest_path;
    config.val_manifest = fix.ds.val_manifest_path;
    config.stats_path = fix.ds.stats_path;
    config.step1 = tiny_step(StepKind::inpaint);
    config.step2 = tiny_step(StepKind::guided_inpaint);
    config.step3 = tiny_step(StepKind::segmentation);
    config.step1.epochs = config.step2.epochs = config.step3.epochs = 1;
    config.step1.lr_milestones.clear();
    config.step2.lr_milestones.clear();
    config.step3.lr_milestones.clear();
    return config;
  };

  SUBCASE("full pipeline: step1 -> step2 -> step3") {
    TempDir dir("pipe_full");
    const auto result = run_pipeline(base_config(dir.path.string()));
    REQUIRE(result.lineage.size() == 3);
    CHECK(result.lineage[0].step_tag == "step1");
    CHECK(result.lineage[1].step_tag == "step2");
    CHECK(result.lineage[2].step_tag == "step3");
    CHECK(fs::exists(result.lineage_path));
    const auto back = read_lineage(result.lineage_path);
    CHECK(back.size() == 3);
    CHECK(read_checkpoint(result.final_checkpoint).step_tag == "step3");

    // each step's checkpoint feeds the next one's config
    for (const auto& e : result.lineage)
      CHECK(checkpoint_digest(e.checkpoint_path) == e.checkpoint_digest);
  }

  SUBCASE("skip-guided drops step2") {
    TempDir dir("pipe_skip");
    auto config = base_config(dir.path.string());
    config.skip_guided = true;
    const auto result = run_pipeline(config);
    REQUIRE(result.lineage.size() == 2);
    CHECK(result.lineage[0].step_tag == "step1");
    CHECK(result.lineage[1].step_tag == "step3");
  }

  SUBCASE("scratch runs step3 only") {
    TempDir dir("pipe_scratch");
    auto config = base_config(dir.path.string());
    config.scratch = true;
    const auto result = run_pipeline(config);
    REQUIRE(result.lineage.size() == 1);
    CHECK(result.lineage[0].step_tag == "step3");
  }
}
