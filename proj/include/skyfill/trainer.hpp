#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "skyfill/config.hpp"
#include "skyfill/data.hpp"
#include "skyfill/model.hpp"

namespace skyfill {

struct LineageEntry {
  std::string step_tag;  // step1 | step2 | step3
  std::string checkpoint_path;
  std::string checkpoint_digest;
  std::string config_digest;
};
using RunLineage = std::vector<LineageEntry>;

void write_lineage(const RunLineage& lineage, const std::string& path);
RunLineage read_lineage(const std::string& path);

// Shared run environment: the global seed every stream derives from,
// where logs/checkpoints land, normalization stats, and the optional
// validation manifest (reconstruction loss each epoch in the masking
// steps, road IoU each epoch in the segmentation step).
struct TrainContext {
  std::uint64_t seed = 0;
  std::string out_dir;
  ChannelStats stats;
  const DatasetManifest* val_manifest = nullptr;
  double threshold = 0.5;  // binary prediction cutoff for validation IoU
};

struct RunOptions {
  std::string resume_from;  // checkpoint written by the same step config
  bool verbose = false;     // echo epoch summaries to stderr
};

struct StepResult {
  std::string checkpoint_path;  // final checkpoint
  std::string checkpoint_digest;
  std::string config_digest;
  std::string log_path;
  double final_train_loss = 0.0;
  // Mean reconstruction loss on the held-out batch (masking steps) or
  // validation road IoU (segmentation step) at the last epoch.
  std::optional<double> final_val_metric;
};

// Self-supervised inpainting over possibly label-free records. Masks
// follow the epoch schedule; the optimizer steps per batch on the
// weighted identity+fill loss.
StepResult run_step1(const StepConfig& config, const DatasetManifest& unlabeled,
                     SegmentationModel& model, const TrainContext& ctx,
                     const RunOptions& options = {});

// Guided inpainting: every record must carry a road label; the road
// mask gates the loss. Mask geometry stays fixed at the schedule's
// final milestone.
StepResult run_step2(const StepConfig& config, const DatasetManifest& labeled,
                     SegmentationModel& model, const TrainContext& ctx,
                     const RunOptions& options = {});

// Supervised segmentation fine-tuning: binary cross-entropy for a
// 1-channel head, softmax cross-entropy otherwise.
StepResult run_step3(const StepConfig& config, const DatasetManifest& labeled,
                     SegmentationModel& model, int num_classes,
                     const TrainContext& ctx, const RunOptions& options = {});

struct PipelineResult {
  RunLineage lineage;
  std::string lineage_path;
  std::string final_checkpoint;
};

// Runs the configured steps in order on a fresh model, threading the
// checkpoints: all three by default, step1 -> step3 with --skip-guided,
// step3 only with --scratch. Completed checkpoints survive a later
// step's failure.
PipelineResult run_pipeline(const PipelineConfig& config,
                            const RunOptions& options = {});

// Restores a model from a bundle for the given target step: the bundle
// is loaded in its own head configuration, then the head is adapted,
// so everything before the final layer transfers bit-exact.
void initialize_from_checkpoint(SegmentationModel& model,
                                const CheckpointBundle& bundle,
                                StepKind target, int num_classes, Rng& rng);

// Segmentation losses (mean over N*H*W pixels); grad is resized to the
// logits' shape. Labels are (N,1,H,W): {0,1} for the binary form, class
// indices for the softmax form (values >= K are label-domain errors).
double bce_logits_loss(const Tensor& logits, const Tensor& labels,
                       Tensor& grad);
double softmax_ce_loss(const Tensor& logits, const Tensor& labels,
                       Tensor& grad);

// Global-norm gradient clipping; no-op when max_norm <= 0. Returns the
// pre-clip norm.
double clip_gradients(const std::vector<nn::ParamRef>& params,
                      double max_norm);

}  // namespace skyfill
