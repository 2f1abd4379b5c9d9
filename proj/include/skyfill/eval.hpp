#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "skyfill/config.hpp"
#include "skyfill/data.hpp"
#include "skyfill/image.hpp"
#include "skyfill/mask.hpp"
#include "skyfill/model.hpp"
#include "skyfill/tensor.hpp"

namespace skyfill {

struct IoUClassCounts {
  long long intersection = 0;
  long long unions = 0;
};

// Dataset-level IoU sums pixel counts across all images before
// dividing; the per-image mean is reported alongside. Classes that
// never appear (zero union) are flagged instead of entering means.
struct IoUReport {
  std::vector<IoUClassCounts> counts;       // per class
  std::vector<double> per_class_iou;        // 0 where undefined
  std::vector<bool> defined;                // union > 0
  std::vector<double> per_image_mean_iou;   // mean over images with union > 0
  int n_images = 0;

  // Mean of dataset-level IoU over defined non-background classes
  // (class 0 is background by convention).
  double foreground_mean() const;
};

class IoUAccumulator {
 public:
  explicit IoUAccumulator(int num_classes);

  // Class-index maps, H x W x 1, same dims.
  void add(const ImagePlane& prediction, const ImagePlane& label);
  IoUReport report() const;

 private:
  int num_classes_;
  int n_images_ = 0;
  std::vector<IoUClassCounts> totals_;
  std::vector<double> per_image_sum_;  // per class, over images with union>0
  std::vector<int> per_image_n_;
};

// Single-pair IoU for one class: |pred=c and label=c| / |pred=c or label=c|.
// A zero union fails with an empty-input error; batch paths use the
// accumulator's flagging instead.
double iou(const ImagePlane& prediction, const ImagePlane& label, int class_id);

// H x W x K logits -> H x W x 1 class indices. K=1: sigmoid >= threshold
// maps to class 1 (ties to foreground). K>1: argmax over channels
// (first max wins).
ImagePlane predict_to_classes(const ImagePlane& logits, double threshold);

// Batched variant used by the training loop; returns one class map per
// batch sample.
std::vector<ImagePlane> predict_batch_to_classes(const Tensor& logits,
                                                 double threshold);

// Forward the whole validation manifest through the model (eval mode)
// and accumulate dataset-level IoU. K=1 heads score classes
// {background, road}.
IoUReport evaluate_model(SegmentationModel& model,
                         const DatasetManifest& val_manifest,
                         const ChannelStats& stats, double threshold,
                         int eval_batch = 8);

IoUReport evaluate_checkpoint(const std::string& checkpoint_path,
                              const DatasetManifest& val_manifest,
                              const ChannelStats& stats, int num_classes,
                              double threshold, std::uint64_t model_seed = 0);

// ------------------------------------------------------------- matrix

// One evaluated arm of the ablation/baseline grid. `variant` names the
// labeled-subset level ("full" | "half" | "quarter"); `domain` is
// "in_domain" or "holdout" (validation style never seen in training).
// `iou` is the headline dataset-level foreground IoU and is what the
// table and plot carry; `metrics` holds the full breakdown for rows
// produced by a live evaluation.
struct MatrixRow {
  std::string variant;
  std::string domain = "in_domain";
  std::string arm;  // baseline | no_guided | full_method
  std::size_t train_records = 0;
  std::string checkpoint_path;
  bool failed = false;
  std::string note;
  double iou = 0.0;
  double iou_per_image = 0.0;
  IoUReport metrics;
};

struct ExperimentMatrix {
  std::vector<MatrixRow> rows;
  // Each (variant, domain, arm) combination may appear at most once.
  void validate() const;
};

// What to evaluate: each entry names a trained checkpoint plus the
// grid cell it belongs to.
struct MatrixCellSpec {
  std::string variant;
  std::string domain = "in_domain";
  std::string arm;
  std::size_t train_records = 0;
  std::string checkpoint_path;
};

struct MatrixSpec {
  std::string val_manifest_path;
  std::string stats_path;
  int num_classes = 1;
  double threshold = 0.5;
  std::vector<MatrixCellSpec> cells;
};

// Evaluates every cell's checkpoint on the validation manifest. A
// missing or unreadable checkpoint marks its row failed; the matrix is
// still produced.
ExperimentMatrix run_matrix(const MatrixSpec& spec);

// Tab-separated matrix table; parse reads back what serialize wrote
// (headline numbers round-trip exactly; per-class breakdown is
// re-parsed into the `note`-level fields only).
std::string serialize_matrix(const ExperimentMatrix& matrix);
ExperimentMatrix parse_matrix(const std::string& text);
void write_matrix(const ExperimentMatrix& matrix, const std::string& path);
ExperimentMatrix read_matrix(const std::string& path);

// ------------------------------------------------------------- report

struct ReportFiles {
  std::string table_path;        // delimited table, one row per matrix row
  std::string plot_path;         // IoU vs training-set size, one series/arm
  std::string mask_figure_path;  // mask evolution strip across epochs
};

// Writes the report bundle into out_dir. The plot embeds each point's
// y-value verbatim (data-iou attribute) so it can be cross-checked
// against the table. The mask figure renders the schedule's mask at
// the given epochs (early/mid/late defaults when empty).
ReportFiles emit_report(const ExperimentMatrix& matrix,
                        const std::string& out_dir,
                        const MaskSchedule& schedule,
                        std::vector<int> figure_epochs = {});

// Renders one mask per epoch into a single horizontal PNG strip
// (white = kept, black = removed) at the schedule's values for that
// epoch; used by the report and the mask-preview command.
void write_mask_evolution_figure(const std::string& path,
                                 const MaskSchedule& schedule,
                                 const std::vector<int>& epochs, int height,
                                 int width, std::uint64_t seed);

// --------------------------------------------------- desk experiment

// Small-scale ablation grid: arms x labeled-subset levels x seeds on
// the synthetic dataset. Pretraining (step 1) is self-supervised, so
// it always runs on the full unlabeled corpus and is shared across
// arms and levels within a seed; the labeled subset applies to the
// guided and fine-tuning steps.
struct DeskExperimentSpec {
  std::string train_manifest;
  std::string unlabeled_manifest;  // empty -> reuse train_manifest
  std::string val_manifest;
  std::string stats_path;
  std::string out_dir;
  StepConfig step1, step2, step3;
  int num_classes = 1;
  double threshold = 0.5;
  std::string domain = "in_domain";
  std::vector<SubsetLevel> levels = {SubsetLevel::full, SubsetLevel::quarter};
  std::vector<std::string> arms = {"baseline", "no_guided", "full_method"};
  std::vector<std::uint64_t> seeds = {0};
  std::uint64_t subset_seed = 0;
  bool verbose = false;
};

struct DeskExperimentResult {
  // One matrix per seed, in the spec's seed order.
  std::vector<std::pair<std::uint64_t, ExperimentMatrix>> per_seed;
  // Rows averaged over seeds, for reporting.
  ExperimentMatrix mean_matrix;
};

DeskExperimentResult run_desk_experiment(const DeskExperimentSpec& spec);

}  // namespace skyfill
