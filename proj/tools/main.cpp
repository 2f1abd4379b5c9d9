// skyfill command-line entry point: data tools, the three training
// steps, evaluation, and mask diagnostics behind one binary.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "skyfill/common.hpp"
#include "skyfill/config.hpp"
#include "skyfill/data.hpp"
#include "skyfill/eval.hpp"
#include "skyfill/mask.hpp"
#include "skyfill/rng.hpp"
#include "skyfill/synth.hpp"
#include "skyfill/trainer.hpp"
#include "skyfill/unet.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool g_json = false;

void emit_status(const json& payload, const std::string& text) {
  if (g_json)
    std::cout << payload.dump() << "\n";
  else
    std::cout << text;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_list(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  for (const auto& item : split_list(text, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      skyfill::fail(skyfill::ErrorKind::config,
                    "'" + item + "' is not an integer");
    }
  }
  return out;
}

std::vector<skyfill::SceneStyle> parse_style_list(const std::string& text) {
  std::vector<skyfill::SceneStyle> out;
  for (const auto& item : split_list(text, ','))
    out.push_back(skyfill::style_from_string(item));
  return out;
}

skyfill::MaskSchedule load_schedule(const std::string& inline_spec,
                                    const std::string& file_path) {
  if (!inline_spec.empty() && !file_path.empty())
    skyfill::fail(skyfill::ErrorKind::config,
                  "give either --schedule or --schedule-file, not both");
  if (!inline_spec.empty()) return skyfill::MaskSchedule::parse(inline_spec);
  if (!file_path.empty()) {
    std::ifstream in(file_path, std::ios::binary);
    if (!in)
      skyfill::fail(skyfill::ErrorKind::io, "cannot read " + file_path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return skyfill::MaskSchedule::parse(buf.str());
  }
  return skyfill::default_mask_schedule();
}

// ------------------------------------------------------------- data

struct DataSynthArgs {
  std::string out_dir;
  int scenes = 256;
  int val_scenes = -1;  // default: scenes / 4
  int canvas = 128;
  std::uint64_t seed = 0;
  std::string styles = "A,B,C,D";
  std::string val_styles;
  int road_min = 2, road_max = 4;
  int width_min = 4, width_max = 10;
  double density = 0.5;
};

int run_data_synth(const DataSynthArgs& args) {
  skyfill::SyntheticDatasetSpec spec;
  spec.out_dir = args.out_dir;
  spec.canvas = args.canvas;
  spec.train_count = args.scenes;
  spec.val_count = args.val_scenes >= 0 ? args.val_scenes
                                        : std::max(1, args.scenes / 4);
  spec.train_styles = parse_style_list(args.styles);
  spec.val_styles = args.val_styles.empty()
                        ? spec.train_styles
                        : parse_style_list(args.val_styles);
  spec.road_count_min = args.road_min;
  spec.road_count_max = args.road_max;
  spec.road_width_min = args.width_min;
  spec.road_width_max = args.width_max;
  spec.building_density = args.density;
  spec.seed = args.seed;
  const skyfill::SyntheticDataset ds = skyfill::emit_synthetic_dataset(spec);
  emit_status(
      json{{"status", "ok"},
           {"root", ds.root},
           {"manifest", ds.manifest_path},
           {"train_manifest", ds.train_manifest_path},
           {"val_manifest", ds.val_manifest_path},
           {"stats", ds.stats_path},
           {"train_records", spec.train_count},
           {"val_records", spec.val_count}},
      "wrote " + std::to_string(spec.train_count) + " train + " +
          std::to_string(spec.val_count) + " val scenes under " + ds.root +
          "\ntrain manifest: " + ds.train_manifest_path +
          "\nval manifest: " + ds.val_manifest_path +
          "\nstats: " + ds.stats_path + "\n");
  return 0;
}

struct DataManifestArgs {
  std::string images_dir;
  std::string out_path;
  int crop = 0;
  int overlap = 0;
  std::string split = "train";
  bool cities = false;
  double gsd = 0.0;
};

int run_data_manifest(const DataManifestArgs& args) {
  const std::vector<skyfill::SourceEntry> sources =
      args.cities ? skyfill::scan_city_folders(args.images_dir)
                  : skyfill::scan_pair_folder(args.images_dir);
  const skyfill::Split split = skyfill::split_from_string(args.split);
  skyfill::DatasetManifest manifest;
  if (args.crop == 0) {
    // Whole-image records, no tiling.
    if (sources.empty())
      skyfill::fail(skyfill::ErrorKind::empty_input,
                    "no image/label pairs found in " + args.images_dir);
    manifest.crop_size = 0;
    manifest.overlap = 0;
    manifest.class_names = {"background", "road"};
    for (const auto& src : sources) {
      skyfill::SampleRecord rec;
      rec.image_path = src.image_path;
      rec.label_path = src.label_path;
      rec.split = split;
      rec.source_id = src.source_id;
      rec.city = src.city;
      rec.row = 0;
      rec.col = 0;
      manifest.records.push_back(std::move(rec));
    }
  } else {
    manifest = skyfill::build_manifest_from_files(sources, args.crop,
                                                  args.overlap, split);
  }
  manifest.ground_sampling_distance = args.gsd;
  skyfill::write_manifest(manifest, args.out_path);
  emit_status(json{{"status", "ok"},
                   {"manifest", args.out_path},
                   {"sources", sources.size()},
                   {"records", manifest.records.size()}},
              "wrote " + std::to_string(manifest.records.size()) +
                  " records (" + std::to_string(sources.size()) +
                  " sources) to " + args.out_path + "\n");
  return 0;
}

struct DataSubsetArgs {
  std::string manifest_path;
  std::string level = "half";
  std::string out_path;
  std::uint64_t seed = 0;
};

int run_data_subset(const DataSubsetArgs& args) {
  const skyfill::DatasetManifest manifest =
      skyfill::read_manifest(args.manifest_path);
  const skyfill::SubsetLevel level =
      skyfill::subset_level_from_string(args.level);
  const skyfill::DatasetManifest subset =
      skyfill::subset_halving(manifest, level, args.seed);
  skyfill::write_manifest(subset, args.out_path);
  emit_status(json{{"status", "ok"},
                   {"manifest", args.out_path},
                   {"level", args.level},
                   {"records", subset.records.size()}},
              "wrote " + std::to_string(subset.records.size()) + " of " +
                  std::to_string(manifest.records.size()) + " records to " +
                  args.out_path + "\n");
  return 0;
}

// ------------------------------------------------------------- train

struct TrainArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string manifest;
  std::string unlabeled_manifest;
  std::string val_manifest;
  std::string stats;
  std::optional<int> classes;
  std::optional<double> threshold;
  std::string resume;
  bool skip_guided = false;
  bool scratch = false;
  bool verbose = false;
};

skyfill::PipelineConfig resolve_train_config(const TrainArgs& args) {
  const skyfill::ConfigValues file_values =
      args.config_path.empty() ? skyfill::ConfigValues{}
                               : skyfill::read_config_file(args.config_path);
  std::vector<std::string> overrides = args.sets;
  // Dedicated flags rank above --set so the most specific spelling wins.
  if (!args.profile.empty()) overrides.push_back("profile=" + args.profile);
  if (args.seed) overrides.push_back("seed=" + std::to_string(*args.seed));
  if (!args.out_dir.empty()) overrides.push_back("out_dir=" + args.out_dir);
  if (!args.manifest.empty())
    overrides.push_back("train_manifest=" + args.manifest);
  if (!args.unlabeled_manifest.empty())
    overrides.push_back("unlabeled_manifest=" + args.unlabeled_manifest);
  if (!args.val_manifest.empty())
    overrides.push_back("val_manifest=" + args.val_manifest);
  if (!args.stats.empty()) overrides.push_back("stats=" + args.stats);
  if (args.classes)
    overrides.push_back("num_classes=" + std::to_string(*args.classes));
  if (args.threshold)
    overrides.push_back("threshold=" + format_double(*args.threshold));
  if (args.skip_guided) overrides.push_back("skip_guided=true");
  if (args.scratch) overrides.push_back("scratch=true");
  return skyfill::resolve_pipeline_config(file_values, overrides);
}

json step_result_json(const std::string& step,
                      const skyfill::StepResult& result) {
  json j{{"status", "ok"},
         {"step", step},
         {"checkpoint", result.checkpoint_path},
         {"checkpoint_digest", result.checkpoint_digest},
         {"config_digest", result.config_digest},
         {"log", result.log_path},
         {"final_train_loss", result.final_train_loss}};
  if (result.final_val_metric) j["final_val_metric"] = *result.final_val_metric;
  return j;
}

std::string step_result_text(const std::string& step,
                             const skyfill::StepResult& result) {
  std::string text = step + " finished: loss " +
                     format_double(result.final_train_loss);
  if (result.final_val_metric)
    text += ", val " + format_double(*result.final_val_metric);
  text += "\ncheckpoint: " + result.checkpoint_path +
          "\nlog: " + result.log_path + "\n";
  return text;
}

int run_train(const std::string& step_name, const TrainArgs& args) {
  const skyfill::PipelineConfig cfg = resolve_train_config(args);
  skyfill::RunOptions options;
  options.resume_from = args.resume;
  options.verbose = args.verbose;

  if (step_name == "pipeline") {
    if (!args.resume.empty())
      skyfill::fail(skyfill::ErrorKind::config,
                    "--resume applies to single-step commands; rerun the "
                    "individual step instead");
    const skyfill::PipelineResult result = skyfill::run_pipeline(cfg, options);
    json lineage = json::array();
    std::string text = "pipeline finished\n";
    for (const auto& entry : result.lineage) {
      lineage.push_back({{"step", entry.step_tag},
                         {"checkpoint", entry.checkpoint_path},
                         {"checkpoint_digest", entry.checkpoint_digest},
                         {"config_digest", entry.config_digest}});
      text += "  " + entry.step_tag + ": " + entry.checkpoint_path + "\n";
    }
    text += "lineage: " + result.lineage_path + "\n";
    emit_status(json{{"status", "ok"},
                     {"lineage", lineage},
                     {"lineage_path", result.lineage_path},
                     {"final_checkpoint", result.final_checkpoint}},
                text);
    return 0;
  }

  if (cfg.out_dir.empty())
    skyfill::fail(skyfill::ErrorKind::config, "out_dir must be set");
  if (cfg.train_manifest.empty())
    skyfill::fail(skyfill::ErrorKind::config, "train_manifest must be set");
  if (cfg.stats_path.empty())
    skyfill::fail(skyfill::ErrorKind::config,
                  "stats must point to a channel-stats file");

  const skyfill::DatasetManifest train =
      skyfill::read_manifest(cfg.train_manifest);
  const skyfill::DatasetManifest unlabeled =
      cfg.unlabeled_manifest.empty()
          ? train
          : skyfill::read_manifest(cfg.unlabeled_manifest);
  std::optional<skyfill::DatasetManifest> val;
  if (!cfg.val_manifest.empty())
    val = skyfill::read_manifest(cfg.val_manifest);

  skyfill::TrainContext ctx;
  ctx.seed = cfg.seed;
  ctx.out_dir = cfg.out_dir;
  ctx.stats = skyfill::read_stats_file(cfg.stats_path);
  ctx.val_manifest = val ? &*val : nullptr;
  ctx.threshold = cfg.threshold;

  skyfill::ToyUNet model(cfg.num_classes,
                         skyfill::derive_seed(cfg.seed, {"model-init"}));
  skyfill::Rng head_rng = skyfill::derive_rng(cfg.seed, {"head-adapt"});
  skyfill::StepResult result;

  if (step_name == "step1") {
    skyfill::to_inpainting_head(model, skyfill::HeadMode::replace, head_rng);
    if (!cfg.step1.init_from.empty())
      skyfill::initialize_from_checkpoint(
          model, skyfill::read_checkpoint(cfg.step1.init_from),
          skyfill::StepKind::inpaint, cfg.num_classes, head_rng);
    result = skyfill::run_step1(cfg.step1, unlabeled, model, ctx, options);
  } else if (step_name == "step2") {
    skyfill::to_inpainting_head(model, skyfill::HeadMode::replace, head_rng);
    if (!cfg.step2.init_from.empty()) {
      skyfill::initialize_from_checkpoint(
          model, skyfill::read_checkpoint(cfg.step2.init_from),
          skyfill::StepKind::guided_inpaint, cfg.num_classes, head_rng);
    } else {
      std::fprintf(stderr,
                   "warning: step2 has no init_from; guided inpainting "
                   "starts from random weights\n");
    }
    result = skyfill::run_step2(cfg.step2, train, model, ctx, options);
  } else {  // step3
    skyfill::StepConfig c3 = cfg.step3;
    if (args.scratch) c3.init_from.clear();
    if (!c3.init_from.empty())
      skyfill::initialize_from_checkpoint(
          model, skyfill::read_checkpoint(c3.init_from),
          skyfill::StepKind::segmentation, cfg.num_classes, head_rng);
    result =
        skyfill::run_step3(c3, train, model, cfg.num_classes, ctx, options);
  }
  emit_status(step_result_json(step_name, result),
              step_result_text(step_name, result));
  return 0;
}

// -------------------------------------------------------------- eval

std::string iou_report_text(const skyfill::IoUReport& report) {
  std::ostringstream out;
  out << "# skyfill-iou 1\n";
  out << "n_images\t" << report.n_images << "\n";
  out << "foreground_mean\t" << format_double(report.foreground_mean())
      << "\n";
  out << "class\tintersection\tunion\tiou\tdefined\tper_image_mean\n";
  for (std::size_t c = 0; c < report.per_class_iou.size(); ++c) {
    out << c << '\t' << report.counts[c].intersection << '\t'
        << report.counts[c].unions << '\t'
        << format_double(report.per_class_iou[c]) << '\t'
        << (report.defined[c] ? "yes" : "no") << '\t'
        << format_double(report.per_image_mean_iou[c]) << '\n';
  }
  return out.str();
}

json iou_report_json(const skyfill::IoUReport& report) {
  json classes = json::array();
  for (std::size_t c = 0; c < report.per_class_iou.size(); ++c)
    classes.push_back({{"class", c},
                       {"intersection", report.counts[c].intersection},
                       {"union", report.counts[c].unions},
                       {"iou", report.per_class_iou[c]},
                       {"defined", static_cast<bool>(report.defined[c])},
                       {"per_image_mean", report.per_image_mean_iou[c]}});
  return json{{"status", "ok"},
              {"n_images", report.n_images},
              {"foreground_mean", report.foreground_mean()},
              {"classes", classes}};
}

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string stats;
  int classes = 1;
  double threshold = 0.5;
  std::string out_path;
};

int run_eval_evaluate(const EvalArgs& args) {
  const skyfill::DatasetManifest val = skyfill::read_manifest(args.manifest);
  const skyfill::ChannelStats stats = skyfill::read_stats_file(args.stats);
  const skyfill::IoUReport report = skyfill::evaluate_checkpoint(
      args.checkpoint, val, stats, args.classes, args.threshold);
  const std::string text = iou_report_text(report);
  if (!args.out_path.empty()) {
    std::ofstream out(args.out_path, std::ios::binary);
    if (!out)
      skyfill::fail(skyfill::ErrorKind::io, "cannot write " + args.out_path);
    out << text;
    if (!out)
      skyfill::fail(skyfill::ErrorKind::io,
                    "write failed for " + args.out_path);
  }
  emit_status(iou_report_json(report), text);
  return 0;
}

skyfill::MatrixSpec parse_matrix_spec(const std::string& text) {
  skyfill::MatrixSpec spec;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      skyfill::fail(skyfill::ErrorKind::config,
                    "matrix spec line " + std::to_string(line_no) +
                        ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "val_manifest") {
      spec.val_manifest_path = value;
    } else if (key == "stats") {
      spec.stats_path = value;
    } else if (key == "num_classes") {
      spec.num_classes = std::stoi(value);
    } else if (key == "threshold") {
      spec.threshold = std::strtod(value.c_str(), nullptr);
    } else if (key == "cell") {
      const std::vector<std::string> parts = split_list(value, ',');
      if (parts.size() != 5)
        skyfill::fail(skyfill::ErrorKind::config,
                      "matrix spec line " + std::to_string(line_no) +
                          ": cell needs variant,domain,arm,train_records,"
                          "checkpoint");
      skyfill::MatrixCellSpec cell;
      cell.variant = parts[0];
      cell.domain = parts[1];
      cell.arm = parts[2];
      cell.train_records = std::stoull(parts[3]);
      cell.checkpoint_path = parts[4];
      spec.cells.push_back(std::move(cell));
    } else {
      skyfill::fail(skyfill::ErrorKind::config,
                    "matrix spec line " + std::to_string(line_no) +
                        ": unknown key " + key);
    }
  }
  if (spec.val_manifest_path.empty() || spec.stats_path.empty())
    skyfill::fail(skyfill::ErrorKind::config,
                  "matrix spec needs val_manifest and stats");
  return spec;
}

int run_eval_matrix(const std::string& spec_path, const std::string& out_path) {
  std::ifstream in(spec_path, std::ios::binary);
  if (!in) skyfill::fail(skyfill::ErrorKind::io, "cannot read " + spec_path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const skyfill::MatrixSpec spec = parse_matrix_spec(buf.str());
  const skyfill::ExperimentMatrix matrix = skyfill::run_matrix(spec);
  skyfill::write_matrix(matrix, out_path);
  int failed = 0;
  json rows = json::array();
  for (const auto& row : matrix.rows) {
    if (row.failed) ++failed;
    rows.push_back({{"variant", row.variant},
                    {"domain", row.domain},
                    {"arm", row.arm},
                    {"train_records", row.train_records},
                    {"failed", row.failed},
                    {"iou", row.iou},
                    {"note", row.note}});
  }
  emit_status(json{{"status", "ok"},
                   {"matrix", out_path},
                   {"rows", rows},
                   {"failed_rows", failed}},
              "wrote " + std::to_string(matrix.rows.size()) + " rows (" +
                  std::to_string(failed) + " failed) to " + out_path + "\n");
  return 0;
}

int run_eval_report(const std::string& matrix_path, const std::string& out_dir,
                    const std::string& schedule_spec,
                    const std::string& schedule_file,
                    const std::string& epochs_spec) {
  const skyfill::ExperimentMatrix matrix = skyfill::read_matrix(matrix_path);
  const skyfill::MaskSchedule schedule =
      load_schedule(schedule_spec, schedule_file);
  std::vector<int> epochs;
  if (!epochs_spec.empty()) epochs = parse_int_list(epochs_spec);
  const skyfill::ReportFiles files =
      skyfill::emit_report(matrix, out_dir, schedule, epochs);
  emit_status(json{{"status", "ok"},
                   {"table", files.table_path},
                   {"plot", files.plot_path},
                   {"mask_figure", files.mask_figure_path}},
              "table: " + files.table_path + "\nplot: " + files.plot_path +
                  "\nmask figure: " + files.mask_figure_path + "\n");
  return 0;
}

// -------------------------------------------------------------- mask

int run_mask_preview(const std::string& out_path, const std::string& epochs_spec,
                     std::uint64_t seed, int size,
                     const std::string& schedule_spec,
                     const std::string& schedule_file) {
  const skyfill::MaskSchedule schedule =
      load_schedule(schedule_spec, schedule_file);
  const std::vector<int> epochs = parse_int_list(epochs_spec);
  if (epochs.empty())
    skyfill::fail(skyfill::ErrorKind::config, "--epochs list is empty");
  skyfill::write_mask_evolution_figure(out_path, schedule, epochs, size, size,
                                       seed);
  json panels = json::array();
  std::string text;
  for (int e : epochs) {
    const auto [count, cluster] = skyfill::schedule_at(schedule, e);
    panels.push_back(
        {{"epoch", e}, {"cluster_count", count}, {"cluster_size", cluster}});
    text += "epoch " + std::to_string(e) + ": " + std::to_string(count) +
            " clusters of " + std::to_string(cluster) + "x" +
            std::to_string(cluster) + "\n";
  }
  emit_status(json{{"status", "ok"}, {"figure", out_path}, {"panels", panels}},
              text + "figure: " + out_path + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "skyfill: three-step training toolkit for aerial road extraction\n"
      "(inpainting pretraining, guided inpainting, segmentation "
      "fine-tuning)"};
  app.require_subcommand(1);
  app.fallthrough(false);
  app.add_flag("--json", g_json, "machine-readable status output");

  // ----- data
  auto* data = app.add_subcommand("data", "dataset tools");
  data->require_subcommand(1);

  DataSynthArgs synth_args;
  auto* synth = data->add_subcommand("make-synthetic",
                                     "generate the synthetic desk-scale "
                                     "road dataset");
  synth->add_option("--out", synth_args.out_dir, "output directory")
      ->required();
  synth->add_option("--scenes", synth_args.scenes,
                    "training scenes (default 256)");
  synth->add_option("--val-scenes", synth_args.val_scenes,
                    "validation scenes (default scenes/4)");
  synth->add_option("--canvas", synth_args.canvas,
                    "scene side length in pixels (default 128)");
  synth->add_option("--seed", synth_args.seed, "master seed (default 0)");
  synth->add_option("--styles", synth_args.styles,
                    "comma list of training styles from A,B,C,D");
  synth->add_option("--val-styles", synth_args.val_styles,
                    "validation styles (default: same as --styles)");
  synth->add_option("--roads-min", synth_args.road_min,
                    "min roads per scene (default 2)");
  synth->add_option("--roads-max", synth_args.road_max,
                    "max roads per scene (default 4)");
  synth->add_option("--width-min", synth_args.width_min,
                    "min road width in pixels (default 4)");
  synth->add_option("--width-max", synth_args.width_max,
                    "max road width in pixels (default 10)");
  synth->add_option("--density", synth_args.density,
                    "building density in [0,1] (default 0.5)");

  DataManifestArgs manifest_args;
  auto* build = data->add_subcommand("build-manifest",
                                     "scan an image/label folder into a "
                                     "manifest, optionally tiling");
  build->add_option("--images", manifest_args.images_dir,
                    "folder of <stem>.png images with <stem>_mask.png labels")
      ->required();
  build->add_option("--out", manifest_args.out_path, "manifest output path")
      ->required();
  build->add_option("--crop", manifest_args.crop,
                    "tile side length; 0 keeps whole images (default 0)");
  build->add_option("--overlap", manifest_args.overlap,
                    "tile overlap in pixels (default 0)");
  build->add_option("--split", manifest_args.split,
                    "split tag: train | val | test (default train)");
  build->add_flag("--cities", manifest_args.cities,
                  "treat --images as a root of per-city folders");
  build->add_option("--gsd", manifest_args.gsd,
                    "ground sampling distance in m/px (metadata only)");

  DataSubsetArgs subset_args;
  auto* subset = data->add_subcommand("subset",
                                      "halve a manifest's sources (half or "
                                      "quarter level)");
  subset->add_option("--manifest", subset_args.manifest_path,
                     "input manifest")
      ->required();
  subset->add_option("--level", subset_args.level,
                     "full | half | quarter (default half)");
  subset->add_option("--out", subset_args.out_path, "output manifest path")
      ->required();
  subset->add_option("--seed", subset_args.seed,
                     "source-shuffle seed (default 0)");

  // ----- train
  auto* train = app.add_subcommand("train", "training steps and pipeline");
  train->require_subcommand(1);
  TrainArgs train_args;
  std::vector<CLI::App*> train_subs;
  for (const char* name : {"step1", "step2", "step3", "pipeline"}) {
    const std::string desc =
        std::string(name) == "step1"
            ? "self-supervised inpainting pretraining"
            : std::string(name) == "step2"
                ? "guided inpainting (road-gated loss)"
                : std::string(name) == "step3"
                      ? "segmentation fine-tuning"
                      : "run the configured steps in order";
    auto* sub = train->add_subcommand(name, desc);
    sub->add_option("--config", train_args.config_path,
                    "config file ([pipeline]/[step1..3] sections)");
    sub->add_option("--set", train_args.sets,
                    "override 'section.key=value' (repeatable; flags beat "
                    "config, config beats defaults)");
    sub->add_option("--profile", train_args.profile,
                    "defaults profile: paper | desk");
    sub->add_option("--seed", train_args.seed, "global run seed");
    sub->add_option("--out", train_args.out_dir,
                    "run directory for logs and checkpoints");
    sub->add_option("--manifest", train_args.manifest,
                    "labeled training manifest");
    sub->add_option("--unlabeled-manifest", train_args.unlabeled_manifest,
                    "pretraining manifest (default: --manifest)");
    sub->add_option("--val-manifest", train_args.val_manifest,
                    "validation manifest");
    sub->add_option("--stats", train_args.stats, "channel-stats file");
    sub->add_option("--classes", train_args.classes,
                    "segmentation classes (default 1)");
    sub->add_option("--threshold", train_args.threshold,
                    "binary prediction threshold (default 0.5)");
    sub->add_flag("--verbose", train_args.verbose,
                  "echo epoch summaries to stderr");
    if (std::string(name) != "pipeline")
      sub->add_option("--resume", train_args.resume,
                      "resume from an in-progress checkpoint of this step");
    if (std::string(name) == "step3" || std::string(name) == "pipeline")
      sub->add_flag("--scratch", train_args.scratch,
                    "baseline arm: ignore init_from, train from scratch");
    if (std::string(name) == "pipeline")
      sub->add_flag("--skip-guided", train_args.skip_guided,
                    "ablation arm: omit the guided inpainting step");
    train_subs.push_back(sub);
  }

  // ----- eval
  auto* eval = app.add_subcommand("eval", "evaluation and reports");
  eval->require_subcommand(1);

  EvalArgs eval_args;
  auto* evaluate = eval->add_subcommand("evaluate",
                                        "IoU of a checkpoint on a manifest");
  evaluate->add_option("--ckpt", eval_args.checkpoint, "checkpoint path")
      ->required();
  evaluate->add_option("--manifest", eval_args.manifest,
                       "labeled validation manifest")
      ->required();
  evaluate->add_option("--stats", eval_args.stats, "channel-stats file")
      ->required();
  evaluate->add_option("--classes", eval_args.classes,
                       "segmentation classes (default 1)");
  evaluate->add_option("--threshold", eval_args.threshold,
                       "binary prediction threshold (default 0.5)");
  evaluate->add_option("--out", eval_args.out_path,
                       "also write the report table here");

  std::string matrix_spec_path, matrix_out = "matrix.tsv";
  auto* matrix = eval->add_subcommand("matrix",
                                      "evaluate an ablation grid of "
                                      "checkpoints");
  matrix->add_option("--spec", matrix_spec_path,
                     "matrix spec file (val_manifest/stats/cell lines)")
      ->required();
  matrix->add_option("--out", matrix_out,
                     "matrix table output path (default matrix.tsv)");

  std::string report_matrix_path, report_out = "report";
  std::string report_schedule, report_schedule_file, report_epochs;
  auto* report = eval->add_subcommand("report",
                                      "render table, IoU-vs-size plot, and "
                                      "mask figure from a matrix table");
  report->add_option("--matrix", report_matrix_path, "matrix table path")
      ->required();
  report->add_option("--out", report_out,
                     "report directory (default report/)");
  report->add_option("--schedule", report_schedule,
                     "mask schedule 'epoch:count:size,...' for the figure");
  report->add_option("--schedule-file", report_schedule_file,
                     "mask schedule file for the figure");
  report->add_option("--epochs", report_epochs,
                     "figure epochs, comma list (default: schedule "
                     "first/middle/last)");

  // ----- mask
  auto* mask = app.add_subcommand("mask", "mask diagnostics");
  mask->require_subcommand(1);
  std::string preview_out = "mask_preview.png";
  std::string preview_epochs = "10,30,50";
  std::uint64_t preview_seed = 0;
  int preview_size = 128;
  std::string preview_schedule, preview_schedule_file;
  auto* preview = mask->add_subcommand("preview",
                                       "render schedule masks side by side");
  preview->add_option("--out", preview_out,
                      "output PNG (default mask_preview.png)");
  preview->add_option("--epochs", preview_epochs,
                      "comma list of epochs (default 10,30,50)");
  preview->add_option("--seed", preview_seed, "mask seed (default 0)");
  preview->add_option("--size", preview_size,
                      "panel side length in pixels (default 128)");
  preview->add_option("--schedule", preview_schedule,
                      "mask schedule 'epoch:count:size,...'");
  preview->add_option("--schedule-file", preview_schedule_file,
                      "mask schedule file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (synth->parsed()) return run_data_synth(synth_args);
    if (build->parsed()) return run_data_manifest(manifest_args);
    if (subset->parsed()) return run_data_subset(subset_args);
    for (std::size_t i = 0; i < train_subs.size(); ++i)
      if (train_subs[i]->parsed())
        return run_train(train_subs[i]->get_name(), train_args);
    if (evaluate->parsed()) return run_eval_evaluate(eval_args);
    if (matrix->parsed()) return run_eval_matrix(matrix_spec_path, matrix_out);
    if (report->parsed())
      return run_eval_report(report_matrix_path, report_out, report_schedule,
                             report_schedule_file, report_epochs);
    if (preview->parsed())
      return run_mask_preview(preview_out, preview_epochs, preview_seed,
                              preview_size, preview_schedule,
                              preview_schedule_file);
  } catch (const skyfill::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.user_error() ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::cerr << "error: no subcommand selected\n";
  return 1;
}
