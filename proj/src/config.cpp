#include "skyfill/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "skyfill/common.hpp"

namespace skyfill {

std::string to_string(StepKind step) {
  switch (step) {
    case StepKind::inpaint: return "inpaint";
    case StepKind::guided_inpaint: return "guided_inpaint";
    case StepKind::segmentation: return "segmentation";
  }
  fail(ErrorKind::contract_violation, "unknown step kind");
}

StepKind step_kind_from_string(const std::string& text) {
  if (text == "inpaint") return StepKind::inpaint;
  if (text == "guided_inpaint") return StepKind::guided_inpaint;
  if (text == "segmentation") return StepKind::segmentation;
  fail(ErrorKind::config, "unknown step kind '" + text + "'");
}

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::sgd_momentum: return "sgd_momentum";
    case OptimizerKind::adam: return "adam";
  }
  fail(ErrorKind::contract_violation, "unknown optimizer kind");
}

OptimizerKind optimizer_from_string(const std::string& text) {
  if (text == "sgd_momentum") return OptimizerKind::sgd_momentum;
  if (text == "adam") return OptimizerKind::adam;
  fail(ErrorKind::config, "unknown optimizer '" + text + "'");
}

std::string to_string(Profile profile) {
  switch (profile) {
    case Profile::paper: return "paper";
    case Profile::desk: return "desk";
  }
  fail(ErrorKind::contract_violation, "unknown profile");
}

Profile profile_from_string(const std::string& text) {
  if (text == "paper") return Profile::paper;
  if (text == "desk") return Profile::desk;
  fail(ErrorKind::config, "unknown profile '" + text + "'");
}

void StepConfig::validate() const {
  if (epochs < 1) fail(ErrorKind::config, "epochs must be positive");
  if (!(lr > 0.0)) fail(ErrorKind::config, "lr must be positive");
  int prev = -1;
  for (int m : lr_milestones) {
    if (m < 0 || m >= epochs)
      fail(ErrorKind::config, "lr milestone " + std::to_string(m) +
                                  " outside [0, epochs)");
    if (m <= prev)
      fail(ErrorKind::config, "lr milestones must be strictly increasing");
    prev = m;
  }
  if (!(lr_gamma > 0.0) || lr_gamma > 1.0)
    fail(ErrorKind::config, "lr_gamma must be in (0, 1]");
  if (momentum < 0.0 || momentum >= 1.0)
    fail(ErrorKind::config, "momentum must be in [0, 1)");
  if (weight_decay < 0.0)
    fail(ErrorKind::config, "weight_decay must be >= 0");
  if (batch_size < 1) fail(ErrorKind::config, "batch_size must be positive");
  if (grad_clip < 0.0) fail(ErrorKind::config, "grad_clip must be >= 0");
  if (step != StepKind::segmentation) {
    skyfill::validate(loss_weights);
    if (mask_schedule.milestones().empty())
      fail(ErrorKind::config,
           to_string(step) + " step needs a mask schedule");
  }
}

void PipelineConfig::validate() const {
  if (num_classes < 1)
    fail(ErrorKind::invalid_class_count, "num_classes must be >= 1");
  if (!(threshold > 0.0) || !(threshold < 1.0))
    fail(ErrorKind::config, "threshold must be in (0, 1)");
  if (step1.step != StepKind::inpaint ||
      step2.step != StepKind::guided_inpaint ||
      step3.step != StepKind::segmentation)
    fail(ErrorKind::contract_violation, "pipeline steps are out of order");
  step1.validate();
  step2.validate();
  step3.validate();
}

PipelineConfig default_pipeline_config(Profile profile) {
  PipelineConfig cfg;
  cfg.profile = profile;

  cfg.step1.step = StepKind::inpaint;
  cfg.step1.optimizer = OptimizerKind::sgd_momentum;
  cfg.step1.lr = 0.01;
  cfg.step1.lr_gamma = 0.1;
  cfg.step1.momentum = 0.9;
  cfg.step1.weight_decay = 0.0005;
  cfg.step1.loss_weights = LossWeights{};
  cfg.step1.mask_schedule = default_mask_schedule();

  cfg.step2 = cfg.step1;
  cfg.step2.step = StepKind::guided_inpaint;
  cfg.step2.lr = 0.001;

  cfg.step3 = cfg.step1;
  cfg.step3.step = StepKind::segmentation;

  if (profile == Profile::paper) {
    cfg.step1.epochs = 120;
    cfg.step1.lr_milestones = {50, 90, 110};
    cfg.step1.batch_size = 32;
    cfg.step2.epochs = 40;
    cfg.step2.lr_milestones = {10, 20, 30};
    cfg.step2.batch_size = 32;
    cfg.step3.epochs = 120;
    cfg.step3.lr_milestones = {50, 90, 110};
    cfg.step3.batch_size = 32;
  } else {
    const double factor = 12.0 / 120.0;
    cfg.step1.epochs = 12;
    cfg.step1.lr_milestones = {5, 9, 11};
    cfg.step1.batch_size = 8;
    cfg.step1.mask_schedule = default_mask_schedule().scaled_epochs(factor);
    cfg.step2.epochs = 4;
    cfg.step2.lr_milestones = {1, 2, 3};
    cfg.step2.batch_size = 8;
    cfg.step2.mask_schedule = cfg.step1.mask_schedule;
    cfg.step3.epochs = 12;
    cfg.step3.lr_milestones = {5, 9, 11};
    cfg.step3.batch_size = 8;
  }
  return cfg;
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0;
  std::size_t b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

double parse_double_value(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::config, key + ": cannot parse '" + value + "' as a number");
  }
}

int parse_int_value(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long v = std::stol(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return static_cast<int>(v);
  } catch (const std::exception&) {
    fail(ErrorKind::config,
         key + ": cannot parse '" + value + "' as an integer");
  }
}

std::uint64_t parse_u64_value(const std::string& key,
                              const std::string& value) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    fail(ErrorKind::config,
         key + ": cannot parse '" + value + "' as an unsigned integer");
  }
}

bool parse_bool_value(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  fail(ErrorKind::config, key + ": cannot parse '" + value + "' as a boolean");
}

std::vector<int> parse_int_list(const std::string& key,
                                const std::string& value) {
  std::vector<int> out;
  if (trim(value).empty() || value == "none") return out;
  std::istringstream in(value);
  std::string item;
  while (std::getline(in, item, ','))
    out.push_back(parse_int_value(key, trim(item)));
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_int_list(const std::vector<int>& v) {
  if (v.empty()) return "none";
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

// Returns true if the key belongs to StepConfig and was applied.
bool apply_step_key(StepConfig& step, const std::string& full_key,
                    const std::string& key, const std::string& value) {
  if (key == "step") {
    // the section fixes the step kind; accept a matching value so
    // serialized configs resolve back, reject an attempt to change it
    if (step_kind_from_string(value) != step.step)
      fail(ErrorKind::config,
           "'" + full_key + "' cannot change the section's step kind");
  } else if (key == "epochs") {
    step.epochs = parse_int_value(full_key, value);
  } else if (key == "optimizer") {
    step.optimizer = optimizer_from_string(value);
  } else if (key == "lr") {
    step.lr = parse_double_value(full_key, value);
  } else if (key == "lr_milestones") {
    step.lr_milestones = parse_int_list(full_key, value);
  } else if (key == "lr_gamma") {
    step.lr_gamma = parse_double_value(full_key, value);
  } else if (key == "momentum") {
    step.momentum = parse_double_value(full_key, value);
  } else if (key == "weight_decay") {
    step.weight_decay = parse_double_value(full_key, value);
  } else if (key == "batch_size") {
    step.batch_size = parse_int_value(full_key, value);
  } else if (key == "w_id") {
    step.loss_weights.w_id = parse_double_value(full_key, value);
  } else if (key == "w_fill") {
    step.loss_weights.w_fill = parse_double_value(full_key, value);
  } else if (key == "mask_schedule") {
    step.mask_schedule = MaskSchedule::parse(value);
  } else if (key == "mask_schedule_file") {
    std::ifstream in(value);
    if (!in) fail(ErrorKind::io, "cannot read mask schedule file " + value);
    std::ostringstream buf;
    buf << in.rdbuf();
    step.mask_schedule = MaskSchedule::parse(buf.str());
  } else if (key == "init_from") {
    step.init_from = value == "none" ? "" : value;
  } else if (key == "grad_clip") {
    step.grad_clip = parse_double_value(full_key, value);
  } else {
    return false;
  }
  return true;
}

void apply_pipeline_key(PipelineConfig& cfg, const std::string& full_key,
                        const std::string& key, const std::string& value) {
  if (key == "profile") {
    cfg.profile = profile_from_string(value);  // already applied via defaults
  } else if (key == "seed") {
    cfg.seed = parse_u64_value(full_key, value);
  } else if (key == "out_dir") {
    cfg.out_dir = value;
  } else if (key == "train_manifest") {
    cfg.train_manifest = value;
  } else if (key == "unlabeled_manifest") {
    cfg.unlabeled_manifest = value;
  } else if (key == "val_manifest") {
    cfg.val_manifest = value;
  } else if (key == "stats") {
    cfg.stats_path = value;
  } else if (key == "num_classes") {
    cfg.num_classes = parse_int_value(full_key, value);
  } else if (key == "threshold") {
    cfg.threshold = parse_double_value(full_key, value);
  } else if (key == "skip_guided") {
    cfg.skip_guided = parse_bool_value(full_key, value);
  } else if (key == "scratch") {
    cfg.scratch = parse_bool_value(full_key, value);
  } else {
    fail(ErrorKind::config, "unknown config key '" + full_key + "'");
  }
}

}  // namespace

ConfigValues parse_config_text(const std::string& text) {
  ConfigValues values;
  std::istringstream in(text);
  std::string line;
  std::string section = "pipeline";
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        fail(ErrorKind::config,
             "config line " + std::to_string(line_no) + ": unclosed section");
      section = trim(t.substr(1, t.size() - 2));
      if (section != "pipeline" && section != "step1" && section != "step2" &&
          section != "step3")
        fail(ErrorKind::config, "config line " + std::to_string(line_no) +
                                    ": unknown section [" + section + "]");
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::config, "config line " + std::to_string(line_no) +
                                  ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      fail(ErrorKind::config,
           "config line " + std::to_string(line_no) + ": empty key");
    const std::string full_key = section + "." + key;
    if (values.count(full_key))
      fail(ErrorKind::config, "config line " + std::to_string(line_no) +
                                  ": duplicate key '" + full_key + "'");
    values[full_key] = value;
  }
  return values;
}

ConfigValues read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot read config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

PipelineConfig resolve_pipeline_config(
    const ConfigValues& file_values, const std::vector<std::string>& overrides) {
  ConfigValues merged = file_values;
  for (const auto& override_text : overrides) {
    const std::size_t eq = override_text.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::config,
           "override '" + override_text + "' must look like key=value");
    std::string key = trim(override_text.substr(0, eq));
    const std::string value = trim(override_text.substr(eq + 1));
    if (key.find('.') == std::string::npos) key = "pipeline." + key;
    merged[key] = value;
  }

  Profile profile = Profile::desk;
  if (auto it = merged.find("pipeline.profile"); it != merged.end())
    profile = profile_from_string(it->second);
  PipelineConfig cfg = default_pipeline_config(profile);

  for (const auto& [full_key, value] : merged) {
    const std::size_t dot = full_key.find('.');
    const std::string section = full_key.substr(0, dot);
    const std::string key = full_key.substr(dot + 1);
    if (section == "pipeline") {
      apply_pipeline_key(cfg, full_key, key, value);
    } else {
      StepConfig& step = section == "step1"   ? cfg.step1
                         : section == "step2" ? cfg.step2
                                              : cfg.step3;
      if (!apply_step_key(step, full_key, key, value))
        fail(ErrorKind::config, "unknown config key '" + full_key + "'");
    }
  }
  cfg.validate();
  return cfg;
}

std::string serialize_step_config(const StepConfig& config,
                                  bool include_init_from) {
  std::string out;
  out += "step = " + to_string(config.step) + "\n";
  out += "epochs = " + std::to_string(config.epochs) + "\n";
  out += "optimizer = " + to_string(config.optimizer) + "\n";
  out += "lr = " + format_double(config.lr) + "\n";
  out += "lr_milestones = " + format_int_list(config.lr_milestones) + "\n";
  out += "lr_gamma = " + format_double(config.lr_gamma) + "\n";
  out += "momentum = " + format_double(config.momentum) + "\n";
  out += "weight_decay = " + format_double(config.weight_decay) + "\n";
  out += "batch_size = " + std::to_string(config.batch_size) + "\n";
  if (config.step != StepKind::segmentation) {
    out += "w_id = " + format_double(config.loss_weights.w_id) + "\n";
    out += "w_fill = " + format_double(config.loss_weights.w_fill) + "\n";
    out += "mask_schedule = " + config.mask_schedule.serialize() + "\n";
  }
  out += "grad_clip = " + format_double(config.grad_clip) + "\n";
  if (include_init_from)
    out += "init_from = " +
           (config.init_from.empty() ? std::string("none") : config.init_from) +
           "\n";
  return out;
}

std::string step_config_digest(const StepConfig& config,
                               bool include_init_from) {
  return hex64(fnv1a64(serialize_step_config(config, include_init_from)));
}

std::string serialize_pipeline_config(const PipelineConfig& config) {
  std::string out;
  out += "profile = " + to_string(config.profile) + "\n";
  out += "seed = " + std::to_string(config.seed) + "\n";
  out += "num_classes = " + std::to_string(config.num_classes) + "\n";
  out += "threshold = " + format_double(config.threshold) + "\n";
  out += "skip_guided = " + std::string(config.skip_guided ? "true" : "false") +
         "\n";
  out += "scratch = " + std::string(config.scratch ? "true" : "false") + "\n";
  out += "[step1]\n" + serialize_step_config(config.step1);
  out += "[step2]\n" + serialize_step_config(config.step2);
  out += "[step3]\n" + serialize_step_config(config.step3);
  return out;
}

std::string pipeline_config_digest(const PipelineConfig& config) {
  return hex64(fnv1a64(serialize_pipeline_config(config)));
}

}  // namespace skyfill
