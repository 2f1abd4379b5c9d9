#include "skyfill/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "skyfill/common.hpp"
#include "skyfill/trainer.hpp"
#include "skyfill/unet.hpp"

namespace fs = std::filesystem;

namespace skyfill {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int class_value(double v, int num_classes, const char* what) {
  const int c = static_cast<int>(v);
  if (v != static_cast<double>(c) || c < 0 || c >= num_classes)
    fail(ErrorKind::label_domain,
         std::string(what) + " value " + format_double(v) +
             " is not a class index in [0, " + std::to_string(num_classes) +
             ")");
  return c;
}

// Mean of per-image IoU over defined non-background classes.
double foreground_mean_per_image(const IoUReport& report) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t c = 1; c < report.per_image_mean_iou.size(); ++c) {
    if (!report.defined[c]) continue;
    sum += report.per_image_mean_iou[c];
    ++n;
  }
  return n > 0 ? sum / n : 0.0;
}

}  // namespace

// ----------------------------------------------------------------- IoU

double IoUReport::foreground_mean() const {
  double sum = 0.0;
  int n = 0;
  for (std::size_t c = 1; c < per_class_iou.size(); ++c) {
    if (!defined[c]) continue;
    sum += per_class_iou[c];
    ++n;
  }
  return n > 0 ? sum / n : 0.0;
}

IoUAccumulator::IoUAccumulator(int num_classes) : num_classes_(num_classes) {
  if (num_classes < 1)
    fail(ErrorKind::invalid_class_count, "need at least one class");
  totals_.resize(num_classes);
  per_image_sum_.resize(num_classes, 0.0);
  per_image_n_.resize(num_classes, 0);
}

void IoUAccumulator::add(const ImagePlane& prediction,
                         const ImagePlane& label) {
  if (prediction.height != label.height || prediction.width != label.width)
    fail(ErrorKind::shape_mismatch, "prediction and label dims differ");
  if (prediction.channels != 1 || label.channels != 1)
    fail(ErrorKind::shape_mismatch, "class maps must be single-channel");
  std::vector<long long> inter(num_classes_, 0), uni(num_classes_, 0);
  for (int h = 0; h < prediction.height; ++h) {
    for (int w = 0; w < prediction.width; ++w) {
      const int p = class_value(prediction.at(h, w, 0), num_classes_,
                                "prediction");
      const int l = class_value(label.at(h, w, 0), num_classes_, "label");
      if (p == l) {
        ++inter[p];
        ++uni[p];
      } else {
        ++uni[p];
        ++uni[l];
      }
    }
  }
  for (int c = 0; c < num_classes_; ++c) {
    totals_[c].intersection += inter[c];
    totals_[c].unions += uni[c];
    if (uni[c] > 0) {
      per_image_sum_[c] +=
          static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
      ++per_image_n_[c];
    }
  }
  ++n_images_;
}

IoUReport IoUAccumulator::report() const {
  IoUReport out;
  out.counts = totals_;
  out.n_images = n_images_;
  out.per_class_iou.resize(num_classes_, 0.0);
  out.defined.resize(num_classes_, false);
  out.per_image_mean_iou.resize(num_classes_, 0.0);
  for (int c = 0; c < num_classes_; ++c) {
    if (totals_[c].unions > 0) {
      out.defined[c] = true;
      out.per_class_iou[c] = static_cast<double>(totals_[c].intersection) /
                             static_cast<double>(totals_[c].unions);
    }
    if (per_image_n_[c] > 0)
      out.per_image_mean_iou[c] = per_image_sum_[c] / per_image_n_[c];
  }
  return out;
}

double iou(const ImagePlane& prediction, const ImagePlane& label,
           int class_id) {
  if (prediction.height != label.height || prediction.width != label.width)
    fail(ErrorKind::shape_mismatch, "prediction and label dims differ");
  if (prediction.channels != 1 || label.channels != 1)
    fail(ErrorKind::shape_mismatch, "class maps must be single-channel");
  if (class_id < 0)
    fail(ErrorKind::invalid_class_count, "negative class id");
  long long inter = 0, uni = 0;
  for (int h = 0; h < prediction.height; ++h) {
    for (int w = 0; w < prediction.width; ++w) {
      const bool p = static_cast<int>(prediction.at(h, w, 0)) == class_id;
      const bool l = static_cast<int>(label.at(h, w, 0)) == class_id;
      if (p && l) ++inter;
      if (p || l) ++uni;
    }
  }
  if (uni == 0)
    fail(ErrorKind::empty_input,
         "class " + std::to_string(class_id) +
             " appears in neither prediction nor label");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// ----------------------------------------------------------- predict

ImagePlane predict_to_classes(const ImagePlane& logits, double threshold) {
  if (logits.channels < 1)
    fail(ErrorKind::invalid_class_count, "logits need at least one channel");
  ImagePlane out(logits.height, logits.width, 1, 0.0, PixelDomain::raw8);
  if (logits.channels == 1) {
    for (int h = 0; h < logits.height; ++h)
      for (int w = 0; w < logits.width; ++w) {
        const double sig = 1.0 / (1.0 + std::exp(-logits.at(h, w, 0)));
        out.at(h, w, 0) = sig >= threshold ? 1.0 : 0.0;
      }
    return out;
  }
  for (int h = 0; h < logits.height; ++h) {
    for (int w = 0; w < logits.width; ++w) {
      int best = 0;
      double best_v = logits.at(h, w, 0);
      for (int c = 1; c < logits.channels; ++c) {
        const double v = logits.at(h, w, c);
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out.at(h, w, 0) = static_cast<double>(best);
    }
  }
  return out;
}

std::vector<ImagePlane> predict_batch_to_classes(const Tensor& logits,
                                                 double threshold) {
  std::vector<ImagePlane> out;
  out.reserve(static_cast<std::size_t>(logits.n));
  for (int n = 0; n < logits.n; ++n) {
    ImagePlane plane(logits.h, logits.w, logits.c, 0.0, PixelDomain::raw8);
    for (int c = 0; c < logits.c; ++c)
      for (int h = 0; h < logits.h; ++h)
        for (int w = 0; w < logits.w; ++w)
          plane.at(h, w, c) = static_cast<double>(logits.at(n, c, h, w));
    out.push_back(predict_to_classes(plane, threshold));
  }
  return out;
}

// ---------------------------------------------------------- evaluate

IoUReport evaluate_model(SegmentationModel& model,
                         const DatasetManifest& val_manifest,
                         const ChannelStats& stats, double threshold,
                         int eval_batch) {
  if (val_manifest.records.empty())
    fail(ErrorKind::empty_input, "validation manifest has no records");
  if (model.inpainting_config())
    fail(ErrorKind::contract_violation,
         "model must be in segmentation configuration to evaluate");
  if (eval_batch < 1)
    fail(ErrorKind::invalid_spec, "eval batch must be positive");
  const int k = model.out_channels();
  IoUAccumulator acc(k == 1 ? 2 : k);
  const std::size_t n = val_manifest.records.size();
  const std::size_t batch = static_cast<std::size_t>(eval_batch);
  for (std::size_t begin = 0; begin < n; begin += batch) {
    const std::size_t end = std::min(n, begin + batch);
    std::vector<LoadedSample> loaded;
    for (std::size_t i = begin; i < end; ++i) {
      const SampleRecord& rec = val_manifest.records[i];
      if (rec.label_path.empty())
        fail(ErrorKind::missing_label,
             "validation record " + rec.source_id + " has no label");
      loaded.push_back(load_sample(rec, val_manifest.crop_size));
    }
    const ImagePlane& first = loaded.front().image;
    Tensor input(static_cast<int>(loaded.size()), first.channels,
                 first.height, first.width);
    for (std::size_t i = 0; i < loaded.size(); ++i) {
      const ImagePlane norm = normalize(loaded[i].image, stats);
      if (norm.height != first.height || norm.width != first.width ||
          norm.channels != first.channels)
        fail(ErrorKind::heterogeneous_input,
             "validation batch mixes image shapes; lower the eval batch "
             "size or split the manifest");
      for (int c = 0; c < norm.channels; ++c)
        for (int h = 0; h < norm.height; ++h)
          for (int w = 0; w < norm.width; ++w)
            input.at(static_cast<int>(i), c, h, w) =
                static_cast<float>(norm.at(h, w, c));
    }
    const Tensor logits = model.forward(input, /*training=*/false);
    const std::vector<ImagePlane> preds =
        predict_batch_to_classes(logits, threshold);
    for (std::size_t i = 0; i < loaded.size(); ++i) {
      const BinaryMask& mask = *loaded[i].label;
      ImagePlane label(mask.height, mask.width, 1, 0.0, PixelDomain::raw8);
      for (int h = 0; h < mask.height; ++h)
        for (int w = 0; w < mask.width; ++w)
          label.at(h, w, 0) = static_cast<double>(mask.at(h, w));
      acc.add(preds[i], label);
    }
  }
  return acc.report();
}

IoUReport evaluate_checkpoint(const std::string& checkpoint_path,
                              const DatasetManifest& val_manifest,
                              const ChannelStats& stats, int num_classes,
                              double threshold, std::uint64_t model_seed) {
  const CheckpointBundle bundle = read_checkpoint(checkpoint_path);
  ToyUNet model(num_classes, derive_seed(model_seed, {"model-init"}));
  Rng rng = derive_rng(model_seed, {"eval-load"});
  initialize_from_checkpoint(model, bundle, StepKind::segmentation,
                             num_classes, rng);
  return evaluate_model(model, val_manifest, stats, threshold);
}

// ------------------------------------------------------------- matrix

void ExperimentMatrix::validate() const {
  std::set<std::string> seen;
  for (const auto& row : rows) {
    const std::string key = row.variant + "|" + row.domain + "|" + row.arm;
    if (!seen.insert(key).second)
      fail(ErrorKind::invalid_spec,
           "matrix cell (" + row.variant + ", " + row.domain + ", " +
               row.arm + ") appears more than once");
  }
}

ExperimentMatrix run_matrix(const MatrixSpec& spec) {
  if (spec.cells.empty())
    fail(ErrorKind::empty_input, "matrix spec has no cells");
  const DatasetManifest val = read_manifest(spec.val_manifest_path);
  const ChannelStats stats = read_stats_file(spec.stats_path);
  ExperimentMatrix matrix;
  for (const auto& cell : spec.cells) {
    MatrixRow row;
    row.variant = cell.variant;
    row.domain = cell.domain;
    row.arm = cell.arm;
    row.train_records = cell.train_records;
    row.checkpoint_path = cell.checkpoint_path;
    try {
      row.metrics = evaluate_checkpoint(cell.checkpoint_path, val, stats,
                                        spec.num_classes, spec.threshold);
      row.iou = row.metrics.foreground_mean();
      row.iou_per_image = foreground_mean_per_image(row.metrics);
    } catch (const std::exception& e) {
      row.failed = true;
      row.note = e.what();
    }
    matrix.rows.push_back(std::move(row));
  }
  matrix.validate();
  return matrix;
}

namespace {

std::string sanitize_field(const std::string& text) {
  std::string out = text;
  for (char& ch : out)
    if (ch == '\t' || ch == '\n' || ch == '\r') ch = ' ';
  return out.empty() ? "-" : out;
}

std::string classes_field(const IoUReport& metrics) {
  std::string out;
  for (std::size_t c = 0; c < metrics.per_class_iou.size(); ++c) {
    if (!metrics.defined[c]) continue;
    if (!out.empty()) out += ';';
    out += std::to_string(c) + ":" + format_double(metrics.per_class_iou[c]);
  }
  return out.empty() ? "-" : out;
}

}  // namespace

std::string serialize_matrix(const ExperimentMatrix& matrix) {
  std::ostringstream out;
  out << "# skyfill-matrix 1\n";
  out << "variant\tdomain\tarm\ttrain_records\tstatus\tiou\tiou_per_image\t"
         "classes\tcheckpoint\tnote\n";
  for (const auto& row : matrix.rows) {
    out << row.variant << '\t' << row.domain << '\t' << row.arm << '\t'
        << row.train_records << '\t' << (row.failed ? "failed" : "ok")
        << '\t' << (row.failed ? "-" : format_double(row.iou)) << '\t'
        << (row.failed ? "-" : format_double(row.iou_per_image)) << '\t'
        << (row.failed ? "-" : classes_field(row.metrics)) << '\t'
        << sanitize_field(row.checkpoint_path) << '\t'
        << sanitize_field(row.note) << '\n';
  }
  return out.str();
}

ExperimentMatrix parse_matrix(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "# skyfill-matrix 1")
    fail(ErrorKind::corrupt_state, "not a matrix table (missing magic line)");
  if (!std::getline(in, line) || line.rfind("variant\t", 0) != 0)
    fail(ErrorKind::corrupt_state, "matrix table missing column header");
  ExperimentMatrix matrix;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::istringstream row_in(line);
    std::string field;
    while (std::getline(row_in, field, '\t')) fields.push_back(field);
    if (fields.size() != 10)
      fail(ErrorKind::corrupt_state,
           "matrix row has " + std::to_string(fields.size()) +
               " fields, expected 10");
    MatrixRow row;
    row.variant = fields[0];
    row.domain = fields[1];
    row.arm = fields[2];
    try {
      row.train_records = static_cast<std::size_t>(std::stoull(fields[3]));
    } catch (const std::exception&) {
      fail(ErrorKind::corrupt_state,
           "bad train_records value " + fields[3]);
    }
    if (fields[4] != "ok" && fields[4] != "failed")
      fail(ErrorKind::corrupt_state, "bad status value " + fields[4]);
    row.failed = fields[4] == "failed";
    if (!row.failed) {
      row.iou = std::strtod(fields[5].c_str(), nullptr);
      row.iou_per_image = std::strtod(fields[6].c_str(), nullptr);
      if (fields[7] != "-") {
        std::size_t max_class = 0;
        std::istringstream classes_in(fields[7]);
        std::string entry;
        std::vector<std::pair<std::size_t, double>> parsed;
        while (std::getline(classes_in, entry, ';')) {
          const std::size_t colon = entry.find(':');
          if (colon == std::string::npos)
            fail(ErrorKind::corrupt_state, "bad classes entry " + entry);
          const std::size_t cls = std::stoull(entry.substr(0, colon));
          parsed.push_back(
              {cls, std::strtod(entry.c_str() + colon + 1, nullptr)});
          max_class = std::max(max_class, cls);
        }
        row.metrics.per_class_iou.resize(max_class + 1, 0.0);
        row.metrics.defined.resize(max_class + 1, false);
        row.metrics.per_image_mean_iou.resize(max_class + 1, 0.0);
        row.metrics.counts.resize(max_class + 1);
        for (const auto& [cls, value] : parsed) {
          row.metrics.per_class_iou[cls] = value;
          row.metrics.defined[cls] = true;
        }
      }
    }
    row.checkpoint_path = fields[8] == "-" ? "" : fields[8];
    row.note = fields[9] == "-" ? "" : fields[9];
    matrix.rows.push_back(std::move(row));
  }
  matrix.validate();
  return matrix;
}

void write_matrix(const ExperimentMatrix& matrix, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path);
  out << serialize_matrix(matrix);
  if (!out) fail(ErrorKind::io, "write failed for " + path);
}

ExperimentMatrix read_matrix(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot read " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_matrix(buf.str());
}

// ------------------------------------------------------------- report

namespace {

std::string xml_escape(const std::string& text) {
  std::string out;
  for (char ch : text) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += ch;
    }
  }
  return out;
}

void write_iou_plot(const ExperimentMatrix& matrix, const std::string& path) {
  struct Point {
    std::size_t x;
    double y;
    std::string variant;
  };
  // Series keyed by arm (plus domain when several are present), in
  // first-appearance order.
  std::set<std::string> domains;
  for (const auto& row : matrix.rows) domains.insert(row.domain);
  std::vector<std::pair<std::string, std::vector<Point>>> series;
  for (const auto& row : matrix.rows) {
    if (row.failed) continue;
    std::string key = row.arm;
    if (domains.size() > 1) key += " (" + row.domain + ")";
    auto it = std::find_if(series.begin(), series.end(),
                           [&](const auto& s) { return s.first == key; });
    if (it == series.end()) {
      series.push_back({key, {}});
      it = std::prev(series.end());
    }
    it->second.push_back({row.train_records, row.iou, row.variant});
  }
  for (auto& [key, points] : series)
    std::sort(points.begin(), points.end(),
              [](const Point& a, const Point& b) { return a.x < b.x; });

  std::size_t x_max = 1;
  for (const auto& [key, points] : series)
    for (const auto& p : points) x_max = std::max(x_max, p.x);

  const double width = 640, height = 420;
  const double left = 64, right = width - 170, top = 24, bottom = height - 52;
  const auto map_x = [&](std::size_t v) {
    return left + (right - left) * static_cast<double>(v) /
                      static_cast<double>(x_max);
  };
  const auto map_y = [&](double v) { return bottom - (bottom - top) * v; };
  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c",
                           "#9467bd", "#ff7f0e", "#8c564b"};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " "
      << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";
  // axes
  svg << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << right
      << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left
      << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = i / 5.0;
    const double y = map_y(v);
    svg << "<line x1=\"" << left - 4 << "\" y1=\"" << y << "\" x2=\"" << left
        << "\" y2=\"" << y << "\" stroke=\"black\"/>\n";
    char label[16];
    std::snprintf(label, sizeof(label), "%.1f", v);
    svg << "<text x=\"" << left - 8 << "\" y=\"" << y + 4
        << "\" text-anchor=\"end\" font-size=\"12\" "
           "font-family=\"sans-serif\">"
        << label << "</text>\n";
  }
  std::set<std::size_t> x_ticks;
  for (const auto& [key, points] : series)
    for (const auto& p : points) x_ticks.insert(p.x);
  for (std::size_t v : x_ticks) {
    const double x = map_x(v);
    svg << "<line x1=\"" << x << "\" y1=\"" << bottom << "\" x2=\"" << x
        << "\" y2=\"" << bottom + 4 << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << x << "\" y=\"" << bottom + 18
        << "\" text-anchor=\"middle\" font-size=\"12\" "
           "font-family=\"sans-serif\">"
        << v << "</text>\n";
  }
  svg << "<text x=\"" << (left + right) / 2 << "\" y=\"" << height - 16
      << "\" text-anchor=\"middle\" font-size=\"13\" "
         "font-family=\"sans-serif\">labeled training records</text>\n";
  svg << "<text x=\"18\" y=\"" << (top + bottom) / 2
      << "\" text-anchor=\"middle\" font-size=\"13\" "
         "font-family=\"sans-serif\" transform=\"rotate(-90 18 "
      << (top + bottom) / 2 << ")\">road IoU</text>\n";

  int color_idx = 0;
  for (const auto& [key, points] : series) {
    const char* color = palette[color_idx % 6];
    if (points.size() > 1) {
      svg << "<polyline fill=\"none\" stroke=\"" << color
          << "\" stroke-width=\"2\" points=\"";
      for (const auto& p : points)
        svg << map_x(p.x) << "," << map_y(p.y) << " ";
      svg << "\"/>\n";
    }
    for (const auto& p : points) {
      svg << "<circle cx=\"" << map_x(p.x) << "\" cy=\"" << map_y(p.y)
          << "\" r=\"4\" fill=\"" << color << "\" data-arm=\""
          << xml_escape(key) << "\" data-variant=\"" << xml_escape(p.variant)
          << "\" data-x=\"" << p.x << "\" data-iou=\"" << format_double(p.y)
          << "\"/>\n";
    }
    const double ly = top + 18.0 * color_idx;
    svg << "<rect x=\"" << right + 12 << "\" y=\"" << ly - 9
        << "\" width=\"12\" height=\"12\" fill=\"" << color << "\"/>\n";
    svg << "<text x=\"" << right + 30 << "\" y=\"" << ly + 2
        << "\" font-size=\"12\" font-family=\"sans-serif\">"
        << xml_escape(key) << "</text>\n";
    ++color_idx;
  }
  svg << "</svg>\n";

  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path);
  out << svg.str();
  if (!out) fail(ErrorKind::io, "write failed for " + path);
}

}  // namespace

void write_mask_evolution_figure(const std::string& path,
                                 const MaskSchedule& schedule,
                                 const std::vector<int>& epochs, int height,
                                 int width, std::uint64_t seed) {
  if (epochs.empty()) fail(ErrorKind::empty_input, "no epochs to render");
  if (height < 1 || width < 1)
    fail(ErrorKind::invalid_spec, "figure cell dims must be positive");
  const int sep = 4;
  const int cols = static_cast<int>(epochs.size());
  ImagePlane strip(height, cols * width + (cols - 1) * sep, 1, 128.0,
                   PixelDomain::raw8);
  for (int i = 0; i < cols; ++i) {
    const auto [count, size] = schedule_at(schedule, epochs[i]);
    const BinaryMask mask = generate_mask(
        height, width,
        MaskSpec{count, size,
                 derive_seed(seed, {"figure",
                                    std::to_string(epochs[i])})});
    const int x0 = i * (width + sep);
    for (int h = 0; h < height; ++h)
      for (int w = 0; w < width; ++w)
        strip.at(h, x0 + w, 0) = mask.at(h, w) ? 255.0 : 0.0;
  }
  write_png(path, strip);
}

ReportFiles emit_report(const ExperimentMatrix& matrix,
                        const std::string& out_dir,
                        const MaskSchedule& schedule,
                        std::vector<int> figure_epochs) {
  if (matrix.rows.empty())
    fail(ErrorKind::empty_input, "cannot report an empty matrix");
  matrix.validate();
  fs::create_directories(out_dir);
  ReportFiles files;
  files.table_path = (fs::path(out_dir) / "report.tsv").string();
  files.plot_path = (fs::path(out_dir) / "iou_vs_size.svg").string();
  files.mask_figure_path = (fs::path(out_dir) / "mask_evolution.png").string();
  write_matrix(matrix, files.table_path);
  write_iou_plot(matrix, files.plot_path);
  if (figure_epochs.empty()) {
    const auto& ms = schedule.milestones();
    if (ms.empty())
      fail(ErrorKind::invalid_spec,
           "mask schedule is empty; cannot pick figure epochs");
    figure_epochs = {ms.front().epoch, ms[ms.size() / 2].epoch,
                     ms.back().epoch};
  }
  write_mask_evolution_figure(files.mask_figure_path, schedule, figure_epochs,
                              128, 128, /*seed=*/0);
  return files;
}

// --------------------------------------------------- desk experiment

DeskExperimentResult run_desk_experiment(const DeskExperimentSpec& spec) {
  if (spec.train_manifest.empty() || spec.val_manifest.empty() ||
      spec.stats_path.empty() || spec.out_dir.empty())
    fail(ErrorKind::config,
         "train manifest, val manifest, stats, and out_dir are required");
  if (spec.levels.empty() || spec.arms.empty() || spec.seeds.empty())
    fail(ErrorKind::config, "levels, arms, and seeds must be non-empty");
  for (const auto& arm : spec.arms)
    if (arm != "baseline" && arm != "no_guided" && arm != "full_method")
      fail(ErrorKind::config, "unknown arm " + arm);
  spec.step1.validate();
  spec.step2.validate();
  spec.step3.validate();

  const DatasetManifest train = read_manifest(spec.train_manifest);
  const DatasetManifest unlabeled = spec.unlabeled_manifest.empty()
                                        ? train
                                        : read_manifest(spec.unlabeled_manifest);
  const DatasetManifest val = read_manifest(spec.val_manifest);
  const ChannelStats stats = read_stats_file(spec.stats_path);

  const bool need_step1 =
      std::any_of(spec.arms.begin(), spec.arms.end(),
                  [](const std::string& a) { return a != "baseline"; });

  DeskExperimentResult result;
  for (const std::uint64_t seed : spec.seeds) {
    const fs::path seed_dir =
        fs::path(spec.out_dir) / ("seed" + std::to_string(seed));
    RunOptions options;
    options.verbose = spec.verbose;

    // Shared self-supervised pretraining for this seed.
    std::string step1_checkpoint;
    if (need_step1) {
      ToyUNet model(spec.num_classes, derive_seed(seed, {"model-init"}));
      Rng head_rng = derive_rng(seed, {"head-adapt"});
      to_inpainting_head(model, HeadMode::replace, head_rng);
      TrainContext ctx;
      ctx.seed = seed;
      ctx.out_dir = (seed_dir / "shared").string();
      ctx.stats = stats;
      ctx.threshold = spec.threshold;
      const StepResult r1 =
          run_step1(spec.step1, unlabeled, model, ctx, options);
      step1_checkpoint = r1.checkpoint_path;
    }

    ExperimentMatrix matrix;
    for (const SubsetLevel level : spec.levels) {
      const DatasetManifest labeled =
          subset_halving(train, level, spec.subset_seed);
      for (const std::string& arm : spec.arms) {
        const fs::path arm_dir = seed_dir / to_string(level) / arm;
        TrainContext ctx;
        ctx.seed = seed;
        ctx.out_dir = arm_dir.string();
        ctx.stats = stats;
        ctx.val_manifest = &val;
        ctx.threshold = spec.threshold;

        ToyUNet model(spec.num_classes, derive_seed(seed, {"model-init"}));
        Rng head_rng = derive_rng(seed, {"head-adapt"});
        StepConfig c3 = spec.step3;
        if (arm != "baseline") {
          const CheckpointBundle b1 = read_checkpoint(step1_checkpoint);
          if (arm == "full_method") {
            initialize_from_checkpoint(model, b1, StepKind::guided_inpaint,
                                       spec.num_classes, head_rng);
            StepConfig c2 = spec.step2;
            c2.init_from = step1_checkpoint;
            const StepResult r2 = run_step2(c2, labeled, model, ctx, options);
            to_segmentation_head(model, spec.num_classes, head_rng);
            c3.init_from = r2.checkpoint_path;
          } else {
            initialize_from_checkpoint(model, b1, StepKind::segmentation,
                                       spec.num_classes, head_rng);
            c3.init_from = step1_checkpoint;
          }
        }
        const StepResult r3 =
            run_step3(c3, labeled, model, spec.num_classes, ctx, options);

        MatrixRow row;
        row.variant = to_string(level);
        row.domain = spec.domain;
        row.arm = arm;
        row.train_records = labeled.records.size();
        row.checkpoint_path = r3.checkpoint_path;
        row.metrics = evaluate_checkpoint(r3.checkpoint_path, val, stats,
                                          spec.num_classes, spec.threshold);
        row.iou = row.metrics.foreground_mean();
        row.iou_per_image = foreground_mean_per_image(row.metrics);
        matrix.rows.push_back(std::move(row));
      }
    }
    matrix.validate();
    write_matrix(matrix, (seed_dir / "matrix.tsv").string());
    result.per_seed.push_back({seed, matrix});
  }

  // Seed-averaged view for reporting; rows follow the first seed's order.
  const ExperimentMatrix& first = result.per_seed.front().second;
  for (std::size_t i = 0; i < first.rows.size(); ++i) {
    MatrixRow mean = first.rows[i];
    mean.checkpoint_path.clear();
    mean.metrics = IoUReport{};
    double iou_sum = 0.0, per_image_sum = 0.0;
    for (const auto& [seed, m] : result.per_seed) {
      const MatrixRow& r = m.rows[i];
      if (r.variant != mean.variant || r.arm != mean.arm ||
          r.domain != mean.domain)
        fail(ErrorKind::contract_violation,
             "per-seed matrices disagree on row order");
      iou_sum += r.iou;
      per_image_sum += r.iou_per_image;
    }
    mean.iou = iou_sum / static_cast<double>(result.per_seed.size());
    mean.iou_per_image =
        per_image_sum / static_cast<double>(result.per_seed.size());
    mean.note = "mean of " + std::to_string(result.per_seed.size()) + " seeds";
    result.mean_matrix.rows.push_back(std::move(mean));
  }
  write_matrix(result.mean_matrix,
               (fs::path(spec.out_dir) / "matrix_mean.tsv").string());
  return result;
}

}  // namespace skyfill
