#include "skyfill/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "skyfill/common.hpp"

namespace skyfill {

std::string to_string(HeadMode mode) {
  return mode == HeadMode::replace ? "replace" : "extend";
}

HeadMode head_mode_from_string(const std::string& s) {
  if (s == "replace") return HeadMode::replace;
  if (s == "extend") return HeadMode::extend;
  fail(ErrorKind::config, "unknown head mode: " + s);
}

void to_inpainting_head(SegmentationModel& model, HeadMode mode, Rng& rng) {
  model.set_inpainting_head(mode, rng);
}

void to_segmentation_head(SegmentationModel& model, int num_classes, Rng& rng) {
  model.set_segmentation_head(num_classes, rng);
}

CheckpointBundle snapshot(SegmentationModel& model, const std::string& step_tag,
                          const std::string& config_digest) {
  CheckpointBundle bundle;
  bundle.step_tag = step_tag;
  bundle.config_digest = config_digest;
  bundle.head_channels = model.out_channels();
  bundle.head_mode = model.head_mode();
  for (const auto& p : model.parameters()) bundle.parameters[p.name] = *p.value;
  return bundle;
}

std::string save_checkpoint(const std::string& path,
                            const CheckpointBundle& bundle) {
  for (const auto& [name, tensor] : bundle.parameters)
    for (float v : tensor.data)
      if (!std::isfinite(v))
        fail(ErrorKind::corrupt_state,
             "refusing to save non-finite parameter " + name);

  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write checkpoint " + path);
  out << "skyfill-ckpt 1\n";
  out << "step_tag " << bundle.step_tag << "\n";
  out << "head_channels " << bundle.head_channels << "\n";
  out << "head_mode " << to_string(bundle.head_mode) << "\n";
  out << "config_digest " << (bundle.config_digest.empty() ? "-" : bundle.config_digest) << "\n";
  out << "epoch " << bundle.epoch << "\n";
  out << "tensors " << bundle.parameters.size() << "\n";
  for (const auto& [name, tensor] : bundle.parameters) {
    out << "tensor " << name << " " << tensor.n << " " << tensor.c << " "
        << tensor.h << " " << tensor.w << "\n";
    out.write(reinterpret_cast<const char*>(tensor.data.data()),
              static_cast<std::streamsize>(tensor.data.size() * sizeof(float)));
  }
  out.close();
  if (!out) fail(ErrorKind::io, "write failed for checkpoint " + path);
  return checkpoint_digest(path);
}

CheckpointBundle read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open checkpoint " + path);
  std::string line;
  if (!std::getline(in, line) || line != "skyfill-ckpt 1")
    fail(ErrorKind::incompatible_checkpoint,
         path + ": not a skyfill checkpoint (or unsupported version)");

  CheckpointBundle bundle;
  std::size_t tensor_count = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "step_tag") ls >> bundle.step_tag;
    else if (key == "head_channels") ls >> bundle.head_channels;
    else if (key == "head_mode") {
      std::string m;
      ls >> m;
      bundle.head_mode = head_mode_from_string(m);
    } else if (key == "config_digest") {
      ls >> bundle.config_digest;
      if (bundle.config_digest == "-") bundle.config_digest.clear();
    } else if (key == "epoch") ls >> bundle.epoch;
    else if (key == "tensors") {
      ls >> tensor_count;
      break;
    } else
      fail(ErrorKind::incompatible_checkpoint, path + ": bad header key " + key);
  }

  for (std::size_t i = 0; i < tensor_count; ++i) {
    if (!std::getline(in, line))
      fail(ErrorKind::corrupt_state, path + ": truncated tensor table");
    std::istringstream ls(line);
    std::string tag, name;
    int n, c, h, w;
    if (!(ls >> tag >> name >> n >> c >> h >> w) || tag != "tensor")
      fail(ErrorKind::corrupt_state, path + ": bad tensor header: " + line);
    Tensor t(n, c, h, w);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(t.data.size() * sizeof(float)))
      fail(ErrorKind::corrupt_state, path + ": truncated tensor payload");
    bundle.parameters[name] = std::move(t);
  }
  return bundle;
}

std::string checkpoint_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0)
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  return hex64(h);
}

LoadReport load_checkpoint(const CheckpointBundle& bundle,
                           SegmentationModel& model, Rng& reinit_rng) {
  LoadReport report;
  const std::string head_prefix = model.final_layer_prefix();
  auto params = model.parameters();

  for (const auto& p : params) {
    auto it = bundle.parameters.find(p.name);
    const bool is_final = p.name.rfind(head_prefix, 0) == 0;
    if (it == bundle.parameters.end()) {
      report.reinitialized.push_back(p.name);
      continue;
    }
    if (!it->second.same_shape(*p.value)) {
      if (!is_final)
        fail(ErrorKind::incompatible_checkpoint,
             "shape conflict on " + p.name + " outside the final layer");
      report.reinitialized.push_back(p.name);
      report.warnings.push_back("head shape mismatch on " + p.name +
                                "; final layer reinitialized");
      continue;
    }
    *p.value = it->second;
    report.matched.push_back(p.name);
  }

  if (report.matched.empty())
    fail(ErrorKind::incompatible_checkpoint,
         "checkpoint shares no parameters with the target model");

  // Fresh Kaiming init for whatever did not transfer (the swapped head).
  for (const auto& name : report.reinitialized)
    for (const auto& p : params)
      if (p.name == name && p.name.rfind(head_prefix, 0) == 0) {
        if (p.name.size() >= 7 &&
            p.name.compare(p.name.size() - 7, 7, ".weight") == 0) {
          const int fan_in = p.value->c * p.value->h * p.value->w;
          nn::kaiming_init(*p.value, fan_in, reinit_rng);
        } else {
          p.value->zero();
        }
      }
  return report;
}

LoadReport load_checkpoint_file(const std::string& path,
                                SegmentationModel& model, Rng& reinit_rng) {
  return load_checkpoint(read_checkpoint(path), model, reinit_rng);
}

std::string describe_checkpoint(const CheckpointBundle& bundle) {
  std::ostringstream out;
  out << "step_tag: " << bundle.step_tag << "\n";
  out << "head_channels: " << bundle.head_channels << "\n";
  out << "head_mode: " << to_string(bundle.head_mode) << "\n";
  out << "config_digest: "
      << (bundle.config_digest.empty() ? "-" : bundle.config_digest) << "\n";
  out << "epoch: " << bundle.epoch << "\n";
  long long total = 0;
  out << "parameters:\n";
  for (const auto& [name, t] : bundle.parameters) {
    if (name.rfind("opt.", 0) == 0) continue;
    out << "  " << name << "  [" << t.n << " " << t.c << " " << t.h << " "
        << t.w << "]\n";
    total += static_cast<long long>(t.size());
  }
  out << "parameter_count: " << total << "\n";
  return out.str();
}

}  // namespace skyfill
