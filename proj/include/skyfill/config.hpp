#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "skyfill/loss.hpp"
#include "skyfill/mask.hpp"

namespace skyfill {

enum class StepKind { inpaint, guided_inpaint, segmentation };
enum class OptimizerKind { sgd_momentum, adam };
enum class Profile { paper, desk };

std::string to_string(StepKind step);
StepKind step_kind_from_string(const std::string& text);
std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string& text);
std::string to_string(Profile profile);
Profile profile_from_string(const std::string& text);

struct StepConfig {
  StepKind step = StepKind::inpaint;
  int epochs = 1;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double lr = 0.01;
  std::vector<int> lr_milestones;
  double lr_gamma = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int batch_size = 32;
  LossWeights loss_weights;     // reconstruction steps only
  MaskSchedule mask_schedule;   // reconstruction steps only
  std::string init_from;        // checkpoint path; empty = from scratch
  double grad_clip = 0.0;       // max gradient norm; 0 disables clipping

  void validate() const;
};

struct PipelineConfig {
  Profile profile = Profile::desk;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string train_manifest;
  std::string unlabeled_manifest;  // empty = reuse train_manifest
  std::string val_manifest;
  std::string stats_path;
  int num_classes = 1;
  double threshold = 0.5;  // binary prediction cutoff
  bool skip_guided = false;
  bool scratch = false;
  StepConfig step1;
  StepConfig step2;
  StepConfig step3;

  void validate() const;
};

// Profile defaults. paper: 120/40/120 epochs, milestones {50,90,110} /
// {10,20,30} / {50,90,110}, batch 32, the standard masking schedule.
// desk: epochs and milestones scaled to 12/4/12 for single-CPU runs,
// masking schedule epochs scaled by the same 0.1 factor, batch 8.
PipelineConfig default_pipeline_config(Profile profile);

// Raw parsed config: "section.key" -> value, top-level keys under
// "pipeline.". Lines are `key = value`, sections `[step1]`; '#' starts
// a comment line.
using ConfigValues = std::map<std::string, std::string>;

ConfigValues parse_config_text(const std::string& text);
ConfigValues read_config_file(const std::string& path);

// Defaults <- file <- overrides, later wins. Unknown keys are errors.
// Override strings use the same "section.key=value" form.
PipelineConfig resolve_pipeline_config(const ConfigValues& file_values,
                                       const std::vector<std::string>& overrides);

// Canonical key=value rendering of one step's hyperparameters.
// include_init_from=false lets baseline and pretrained arms show they
// differ only in initialization.
std::string serialize_step_config(const StepConfig& config,
                                  bool include_init_from = true);
std::string step_config_digest(const StepConfig& config,
                               bool include_init_from = true);

std::string serialize_pipeline_config(const PipelineConfig& config);
std::string pipeline_config_digest(const PipelineConfig& config);

}  // namespace skyfill
