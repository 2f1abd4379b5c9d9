#include "skyfill/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>

#include "skyfill/common.hpp"
#include "skyfill/eval.hpp"
#include "skyfill/loss.hpp"
#include "skyfill/unet.hpp"

namespace fs = std::filesystem;

namespace skyfill {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------- cache

// Training sets are re-read every epoch, so decoded samples are held in
// memory as raw bytes (a desk-scale set is a few tens of MB).
class SampleCache {
 public:
  SampleCache(const DatasetManifest& manifest, bool require_labels)
      : crop_(manifest.crop_size) {
    if (manifest.records.empty())
      fail(ErrorKind::empty_input, "manifest has no records");
    for (const auto& rec : manifest.records) {
      if (require_labels && rec.label_path.empty())
        fail(ErrorKind::missing_label,
             "record " + rec.source_id + " has no label");
      const LoadedSample loaded = load_sample(rec, crop_);
      if (height_ == 0) {
        height_ = loaded.image.height;
        width_ = loaded.image.width;
        channels_ = loaded.image.channels;
      } else if (loaded.image.height != height_ ||
                 loaded.image.width != width_ ||
                 loaded.image.channels != channels_) {
        fail(ErrorKind::heterogeneous_input,
             rec.image_path + " does not match the first sample's shape");
      }
      Entry entry;
      entry.image.resize(loaded.image.size());
      for (std::size_t i = 0; i < entry.image.size(); ++i) {
        const double v = loaded.image.values[i];
        entry.image[i] = static_cast<std::uint8_t>(
            std::lround(std::min(255.0, std::max(0.0, v))));
      }
      if (loaded.label) {
        entry.label = loaded.label->values;
        for (std::uint8_t v : entry.label) label_ones_ += v;
        entry.has_label = true;
      }
      entries_.push_back(std::move(entry));
    }
  }

  std::size_t size() const { return entries_.size(); }
  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  long long label_ones() const { return label_ones_; }
  bool has_label(std::size_t i) const { return entries_[i].has_label; }
  std::uint8_t max_label_value() const {
    std::uint8_t m = 0;
    for (const auto& e : entries_)
      for (std::uint8_t v : e.label) m = std::max(m, v);
    return m;
  }

  ImagePlane image(std::size_t i) const {
    ImagePlane out(height_, width_, channels_, 0.0, PixelDomain::raw8);
    const auto& bytes = entries_[i].image;
    for (std::size_t j = 0; j < bytes.size(); ++j)
      out.values[j] = static_cast<double>(bytes[j]);
    return out;
  }

  BinaryMask label(std::size_t i) const {
    const auto& e = entries_[i];
    if (!e.has_label)
      fail(ErrorKind::missing_label, "sample has no label");
    BinaryMask mask(height_, width_);
    mask.values = e.label;
    return mask;
  }

 private:
  struct Entry {
    std::vector<std::uint8_t> image;
    std::vector<std::uint8_t> label;
    bool has_label = false;
  };
  int crop_ = 0;
  int height_ = 0, width_ = 0, channels_ = 0;
  long long label_ones_ = 0;
  std::vector<Entry> entries_;
};

// ------------------------------------------------------------- tensors

void fill_image(Tensor& t, int n, const ImagePlane& plane) {
  for (int c = 0; c < plane.channels; ++c)
    for (int h = 0; h < plane.height; ++h)
      for (int w = 0; w < plane.width; ++w)
        t.at(n, c, h, w) = static_cast<float>(plane.at(h, w, c));
}

void fill_masked_image(Tensor& t, int n, const ImagePlane& plane,
                       const BinaryMask& mask) {
  for (int c = 0; c < plane.channels; ++c)
    for (int h = 0; h < plane.height; ++h)
      for (int w = 0; w < plane.width; ++w)
        t.at(n, c, h, w) =
            mask.at(h, w) ? static_cast<float>(plane.at(h, w, c)) : 0.f;
}

void fill_mask(Tensor& t, int n, const BinaryMask& mask) {
  for (int h = 0; h < mask.height; ++h)
    for (int w = 0; w < mask.width; ++w)
      t.at(n, 0, h, w) = static_cast<float>(mask.at(h, w));
}

Tensor slice_channels_block(const Tensor& x, int offset, int count) {
  if (offset == 0 && count == x.c) return x;
  Tensor out(x.n, count, x.h, x.w);
  for (int n = 0; n < x.n; ++n)
    for (int c = 0; c < count; ++c)
      std::copy_n(x.sample(n) + (offset + c) * x.plane(), x.plane(),
                  out.sample(n) + c * out.plane());
  return out;
}

Tensor embed_channels_block(const Tensor& g, int total, int offset) {
  if (offset == 0 && total == g.c) return g;
  Tensor out(g.n, total, g.h, g.w, 0.f);
  for (int n = 0; n < g.n; ++n)
    for (int c = 0; c < g.c; ++c)
      std::copy_n(g.sample(n) + c * g.plane(), g.plane(),
                  out.sample(n) + (offset + c) * out.plane());
  return out;
}

// ------------------------------------------------------------ plumbing

std::unique_ptr<nn::Optimizer> make_optimizer(const StepConfig& config) {
  if (config.optimizer == OptimizerKind::adam)
    return std::make_unique<nn::Adam>(0.9, 0.999, 1e-8, config.weight_decay);
  return std::make_unique<nn::SgdMomentum>(config.momentum,
                                           config.weight_decay);
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed,
                                           const std::string& tag, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(derive_seed(seed, {"order", tag}),
                      {static_cast<std::uint64_t>(epoch)}));
  for (std::size_t i = n; i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_index(i)]);
  return order;
}

struct CheckpointPaths {
  std::string dir;
  std::string last;
  std::string final;
  std::string milestone(int epoch) const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "_epoch%03d.ckpt", epoch);
    return stem + buf;
  }
  std::string stem;
};

CheckpointPaths checkpoint_paths(const std::string& out_dir,
                                 const std::string& tag) {
  CheckpointPaths p;
  p.dir = (fs::path(out_dir) / "checkpoints").string();
  p.stem = (fs::path(p.dir) / tag).string();
  p.last = p.stem + "_last.ckpt";
  p.final = p.stem + "_final.ckpt";
  return p;
}

std::pair<std::string, std::string> save_with_state(
    SegmentationModel& model, nn::Optimizer& optimizer,
    const std::string& tag, const std::string& config_digest, int epoch,
    const std::string& path) {
  CheckpointBundle bundle = snapshot(model, tag, config_digest);
  bundle.epoch = epoch;
  for (auto& [key, value] : optimizer.state())
    bundle.parameters["opt." + key] = std::move(value);
  const std::string digest = save_checkpoint(path, bundle);
  return {path, digest};
}

std::map<std::string, Tensor> extract_optimizer_state(
    const std::map<std::string, Tensor>& params) {
  std::map<std::string, Tensor> state;
  for (const auto& [key, value] : params)
    if (key.rfind("opt.", 0) == 0) state[key.substr(4)] = value;
  return state;
}

int resume_step(const RunOptions& options, const std::string& tag,
                const std::string& config_digest, SegmentationModel& model,
                nn::Optimizer& optimizer, std::uint64_t seed) {
  if (options.resume_from.empty()) return 0;
  const CheckpointBundle bundle = read_checkpoint(options.resume_from);
  if (bundle.step_tag != tag)
    fail(ErrorKind::incompatible_checkpoint,
         options.resume_from + " was written by " + bundle.step_tag +
             ", cannot resume " + tag);
  if (bundle.config_digest != config_digest)
    fail(ErrorKind::incompatible_checkpoint,
         options.resume_from + " was written under a different configuration");
  if (bundle.epoch < 0)
    fail(ErrorKind::incompatible_checkpoint,
         options.resume_from + " is a finished-step checkpoint");
  Rng rng = derive_rng(seed, {"resume"});
  const LoadReport report = load_checkpoint(bundle, model, rng);
  if (!report.reinitialized.empty())
    fail(ErrorKind::incompatible_checkpoint,
         "resume checkpoint does not cover parameter " +
             report.reinitialized.front());
  optimizer.load_state(extract_optimizer_state(bundle.parameters));
  return bundle.epoch + 1;
}

// ------------------------------------------------------------ logging

class TrainLog {
 public:
  TrainLog(const std::string& path, bool append) : path_(path) {
    fs::create_directories(fs::path(path).parent_path());
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) fail(ErrorKind::io, "cannot open log file " + path);
    if (!append)
      out_ << "kind\tstep\tepoch\tbatch\tlr\tl_id\tl_fill\tloss\tmask_frac\t"
              "val\n";
  }

  void row(const std::string& kind, const std::string& tag, int epoch,
           const std::string& batch, double lr, const std::string& l_id,
           const std::string& l_fill, double loss,
           const std::string& mask_frac, const std::string& val) {
    out_ << kind << '\t' << tag << '\t' << epoch << '\t' << batch << '\t'
         << format_double(lr) << '\t' << l_id << '\t' << l_fill << '\t'
         << format_double(loss) << '\t' << mask_frac << '\t' << val << '\n';
    if (!out_) fail(ErrorKind::io, "write failed for log " + path_);
  }

  void comment(const std::string& text) { out_ << "# " << text << '\n'; }
  void flush() { out_.flush(); }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

// -------------------------------------------------- reconstruction step

struct ReconBatch {
  Tensor input;   // masked normalized image
  Tensor target;  // unmasked normalized image
  Tensor mask;    // N x 1 x H x W
  Tensor road;    // N x 1 x H x W, n == 0 when unguided
  std::vector<std::uint64_t> mask_seeds;
};

ReconBatch build_recon_batch(const SampleCache& cache,
                             const std::vector<std::size_t>& order,
                             std::size_t begin, std::size_t end,
                             const TrainContext& ctx, const std::string& tag,
                             int epoch, int cluster_count, int cluster_size,
                             bool guided, bool augmented) {
  const int n = static_cast<int>(end - begin);
  const int h = cache.height(), w = cache.width(), c = cache.channels();
  ReconBatch batch;
  batch.input = Tensor(n, c, h, w);
  batch.target = Tensor(n, c, h, w);
  batch.mask = Tensor(n, 1, h, w);
  if (guided) batch.road = Tensor(n, 1, h, w);
  const std::uint64_t aug_base = derive_seed(ctx.seed, {"augment", tag});
  const std::uint64_t mask_base = derive_seed(ctx.seed, {"mask", tag});
  for (std::size_t i = begin; i < end; ++i) {
    const std::size_t idx = order[i];
    const int slot = static_cast<int>(i - begin);
    ImagePlane img = cache.image(idx);
    std::optional<BinaryMask> label;
    if (guided) label = cache.label(idx);
    if (augmented) {
      const std::uint64_t aug_seed =
          derive_seed(aug_base, {static_cast<std::uint64_t>(epoch),
                                 static_cast<std::uint64_t>(idx)});
      auto [aug_img, aug_label] = augment(img, label, aug_seed);
      img = std::move(aug_img);
      label = std::move(aug_label);
    }
    const ImagePlane norm = normalize(img, ctx.stats);
    const std::uint64_t mask_seed =
        derive_seed(mask_base, {static_cast<std::uint64_t>(epoch),
                                static_cast<std::uint64_t>(idx)});
    const BinaryMask mask =
        generate_mask(h, w, MaskSpec{cluster_count, cluster_size, mask_seed});
    fill_masked_image(batch.input, slot, norm, mask);
    fill_image(batch.target, slot, norm);
    fill_mask(batch.mask, slot, mask);
    if (guided) fill_mask(batch.road, slot, *label);
    batch.mask_seeds.push_back(mask_seed);
  }
  return batch;
}

// Mean reconstruction loss on the fixed held-out batch; eval-mode
// forward, no augmentation, masks drawn from a validation-only stream.
double recon_val_loss(SegmentationModel& model, const SampleCache& val_cache,
                      const TrainContext& ctx, const std::string& tag,
                      const StepConfig& config, int cluster_count,
                      int cluster_size, bool guided) {
  const std::size_t n = val_cache.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Validation masks depend on the sample index only, so epochs sharing
  // schedule values see identical masks.
  ReconBatch batch =
      build_recon_batch(val_cache, order, 0, n, ctx, tag + "-val", /*epoch=*/0,
                        cluster_count, cluster_size, guided,
                        /*augmented=*/false);
  Tensor out_full = model.forward(batch.input, /*training=*/false);
  const Tensor out_rgb =
      slice_channels_block(out_full, model.rgb_channel_offset(), 3);
  Tensor grad;
  const LossReport report =
      inpaint_loss_batch(out_rgb, batch.target, batch.mask, batch.road,
                         config.loss_weights, grad);
  return report.l_total;
}

StepResult run_reconstruction_step(const StepConfig& config,
                                   const DatasetManifest& manifest,
                                   SegmentationModel& model,
                                   const TrainContext& ctx,
                                   const RunOptions& options, bool guided) {
  config.validate();
  if (config.step != (guided ? StepKind::guided_inpaint : StepKind::inpaint))
    fail(ErrorKind::contract_violation, "step config kind mismatch");
  if (ctx.out_dir.empty())
    fail(ErrorKind::config, "out_dir must be set before training");
  if (!model.inpainting_config())
    fail(ErrorKind::contract_violation,
         "model must be in inpainting configuration for masking steps");
  const std::string tag = guided ? "step2" : "step1";
  const std::string config_digest = step_config_digest(config);

  SampleCache cache(manifest, /*require_labels=*/guided);
  if (static_cast<int>(model.in_channels()) != cache.channels())
    fail(ErrorKind::shape_mismatch,
         "model expects " + std::to_string(model.in_channels()) +
             " input channels, dataset has " +
             std::to_string(cache.channels()));

  const CheckpointPaths ckpt = checkpoint_paths(ctx.out_dir, tag);
  fs::create_directories(ckpt.dir);
  auto optimizer = make_optimizer(config);
  const int start_epoch =
      resume_step(options, tag, config_digest, model, *optimizer, ctx.seed);

  TrainLog log((fs::path(ctx.out_dir) / "logs" / (tag + ".tsv")).string(),
               /*append=*/start_epoch > 0);
  if (start_epoch > 0)
    log.comment("resumed at epoch " + std::to_string(start_epoch));
  if (guided && cache.label_ones() == 0) {
    log.comment("warning: all labels are empty; guided loss is identically 0");
    std::fprintf(stderr,
                 "[%s] warning: all road labels are empty; the guided loss "
                 "is identically zero and no parameter will change\n",
                 tag.c_str());
  }

  // Guided training keeps the mask geometry at the schedule's terminal
  // values instead of following the epoch ramp.
  const ScheduleMilestone final_ms = config.mask_schedule.final_milestone();

  std::unique_ptr<SampleCache> val_cache;
  bool val_guided = false;
  if (ctx.val_manifest && !ctx.val_manifest->records.empty()) {
    DatasetManifest val_head = *ctx.val_manifest;
    const std::size_t keep = std::min<std::size_t>(
        val_head.records.size(), static_cast<std::size_t>(config.batch_size));
    val_head.records.resize(keep);
    val_guided = guided;
    for (const auto& rec : val_head.records)
      if (rec.label_path.empty()) val_guided = false;
    val_cache = std::make_unique<SampleCache>(val_head, val_guided);
  }

  const std::vector<nn::ParamRef> params = model.parameters();
  const std::size_t n = cache.size();
  const std::size_t batch_size = static_cast<std::size_t>(config.batch_size);
  double last_epoch_loss = 0.0;
  std::optional<double> last_val;

  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const auto [count, size] =
        guided ? std::pair<int, int>{final_ms.cluster_count,
                                     final_ms.cluster_size}
               : schedule_at(config.mask_schedule, epoch);
    const double lr =
        nn::lr_at(config.lr, config.lr_milestones, config.lr_gamma, epoch);
    const auto order = epoch_permutation(n, ctx.seed, tag, epoch);

    double loss_sum = 0.0, id_sum = 0.0, fill_sum = 0.0;
    long long masked_sum = 0;
    std::size_t sample_sum = 0;

    for (std::size_t begin = 0, batch_idx = 0; begin < n;
         begin += batch_size, ++batch_idx) {
      const std::size_t end = std::min(n, begin + batch_size);
      ReconBatch batch =
          build_recon_batch(cache, order, begin, end, ctx, tag, epoch, count,
                            size, guided, /*augmented=*/true);
      Tensor out_full = model.forward(batch.input, /*training=*/true);
      const Tensor out_rgb =
          slice_channels_block(out_full, model.rgb_channel_offset(), 3);
      Tensor grad_rgb;
      const LossReport report =
          inpaint_loss_batch(out_rgb, batch.target, batch.mask, batch.road,
                             config.loss_weights, grad_rgb);
      if (!std::isfinite(report.l_total))
        fail(ErrorKind::non_finite,
             tag + " loss became non-finite at epoch " +
                 std::to_string(epoch) + ", batch " +
                 std::to_string(batch_idx) + ", first mask seed " +
                 std::to_string(batch.mask_seeds.front()));
      model.backward(
          embed_channels_block(grad_rgb, out_full.c, model.rgb_channel_offset()));
      clip_gradients(params, config.grad_clip);
      optimizer->step(params, lr);

      const std::size_t batch_n = end - begin;
      const double mask_frac =
          static_cast<double>(report.masked_pixel_count) /
          (static_cast<double>(batch_n) * cache.height() * cache.width());
      log.row("batch", tag, epoch, std::to_string(batch_idx), lr,
              format_double(report.l_id), format_double(report.l_fill),
              report.l_total, format_double(mask_frac), "-");
      loss_sum += report.l_total * static_cast<double>(batch_n);
      id_sum += report.l_id * static_cast<double>(batch_n);
      fill_sum += report.l_fill * static_cast<double>(batch_n);
      masked_sum += report.masked_pixel_count;
      sample_sum += batch_n;
    }

    const double epoch_loss = loss_sum / static_cast<double>(sample_sum);
    const double epoch_frac =
        static_cast<double>(masked_sum) /
        (static_cast<double>(sample_sum) * cache.height() * cache.width());
    std::optional<double> val;
    if (val_cache)
      val = recon_val_loss(model, *val_cache, ctx, tag, config, count, size,
                           val_guided);
    log.row("epoch", tag, epoch, "-", lr,
            format_double(id_sum / static_cast<double>(sample_sum)),
            format_double(fill_sum / static_cast<double>(sample_sum)),
            epoch_loss, format_double(epoch_frac),
            val ? format_double(*val) : "-");
    log.flush();
    if (options.verbose)
      std::fprintf(stderr, "[%s] epoch %d loss %.6f%s\n", tag.c_str(), epoch,
                   epoch_loss,
                   val ? (" val " + format_double(*val)).c_str() : "");

    save_with_state(model, *optimizer, tag, config_digest, epoch, ckpt.last);
    if (std::find(config.lr_milestones.begin(), config.lr_milestones.end(),
                  epoch) != config.lr_milestones.end())
      save_with_state(model, *optimizer, tag, config_digest, epoch,
                      ckpt.milestone(epoch));
    last_epoch_loss = epoch_loss;
    last_val = val;
  }

  const auto [final_path, final_digest] = save_with_state(
      model, *optimizer, tag, config_digest, /*epoch=*/-1, ckpt.final);
  StepResult result;
  result.checkpoint_path = final_path;
  result.checkpoint_digest = final_digest;
  result.config_digest = config_digest;
  result.log_path = log.path();
  result.final_train_loss = last_epoch_loss;
  result.final_val_metric = last_val;
  return result;
}

}  // namespace

// ------------------------------------------------------------- losses

double bce_logits_loss(const Tensor& logits, const Tensor& labels,
                       Tensor& grad) {
  if (logits.c != 1)
    fail(ErrorKind::shape_mismatch, "binary loss expects 1-channel logits");
  if (!labels.same_shape(logits))
    fail(ErrorKind::shape_mismatch, "labels do not match logits shape");
  grad = Tensor(logits.n, logits.c, logits.h, logits.w);
  const std::size_t total = logits.size();
  double sum = 0.0;
  for (std::size_t i = 0; i < total; ++i) {
    const double z = logits.data[i];
    const double y = labels.data[i];
    sum += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    const double sig = 1.0 / (1.0 + std::exp(-z));
    grad.data[i] = static_cast<float>((sig - y) / static_cast<double>(total));
  }
  return sum / static_cast<double>(total);
}

double softmax_ce_loss(const Tensor& logits, const Tensor& labels,
                       Tensor& grad) {
  if (logits.c < 2)
    fail(ErrorKind::shape_mismatch,
         "softmax loss expects >= 2 channels; use the binary loss for 1");
  if (labels.n != logits.n || labels.c != 1 || labels.h != logits.h ||
      labels.w != logits.w)
    fail(ErrorKind::shape_mismatch, "labels must be N x 1 x H x W");
  grad = Tensor(logits.n, logits.c, logits.h, logits.w);
  const double count =
      static_cast<double>(logits.n) * logits.h * logits.w;
  double sum = 0.0;
  for (int n = 0; n < logits.n; ++n) {
    for (int h = 0; h < logits.h; ++h) {
      for (int w = 0; w < logits.w; ++w) {
        const double yf = labels.at(n, 0, h, w);
        const int y = static_cast<int>(yf);
        if (yf != static_cast<double>(y) || y < 0 || y >= logits.c)
          fail(ErrorKind::label_domain,
               "label value " + std::to_string(yf) + " outside [0, " +
                   std::to_string(logits.c) + ")");
        double zmax = logits.at(n, 0, h, w);
        for (int c = 1; c < logits.c; ++c)
          zmax = std::max(zmax, static_cast<double>(logits.at(n, c, h, w)));
        double expsum = 0.0;
        for (int c = 0; c < logits.c; ++c)
          expsum += std::exp(logits.at(n, c, h, w) - zmax);
        const double lse = zmax + std::log(expsum);
        sum += lse - logits.at(n, y, h, w);
        for (int c = 0; c < logits.c; ++c) {
          const double p = std::exp(logits.at(n, c, h, w) - lse);
          grad.at(n, c, h, w) =
              static_cast<float>((p - (c == y ? 1.0 : 0.0)) / count);
        }
      }
    }
  }
  return sum / count;
}

double clip_gradients(const std::vector<nn::ParamRef>& params,
                      double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (float g : p.grad->data) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / norm);
    for (const auto& p : params)
      for (float& g : p.grad->data) g *= scale;
  }
  return norm;
}

// -------------------------------------------------------------- steps

StepResult run_step1(const StepConfig& config, const DatasetManifest& unlabeled,
                     SegmentationModel& model, const TrainContext& ctx,
                     const RunOptions& options) {
  return run_reconstruction_step(config, unlabeled, model, ctx, options,
                                 /*guided=*/false);
}

StepResult run_step2(const StepConfig& config, const DatasetManifest& labeled,
                     SegmentationModel& model, const TrainContext& ctx,
                     const RunOptions& options) {
  return run_reconstruction_step(config, labeled, model, ctx, options,
                                 /*guided=*/true);
}

StepResult run_step3(const StepConfig& config, const DatasetManifest& labeled,
                     SegmentationModel& model, int num_classes,
                     const TrainContext& ctx, const RunOptions& options) {
  config.validate();
  if (config.step != StepKind::segmentation)
    fail(ErrorKind::contract_violation, "step config kind mismatch");
  if (ctx.out_dir.empty())
    fail(ErrorKind::config, "out_dir must be set before training");
  if (model.inpainting_config())
    fail(ErrorKind::contract_violation,
         "model must be in segmentation configuration for fine-tuning");
  if (model.out_channels() != num_classes)
    fail(ErrorKind::invalid_class_count,
         "model head has " + std::to_string(model.out_channels()) +
             " channels, expected " + std::to_string(num_classes));
  const std::string tag = "step3";
  const std::string config_digest = step_config_digest(config);

  SampleCache cache(labeled, /*require_labels=*/true);
  if (num_classes > 1 && cache.max_label_value() >= num_classes)
    fail(ErrorKind::label_domain,
         "labels contain class " + std::to_string(cache.max_label_value()) +
             " but the head has " + std::to_string(num_classes) + " classes");

  const CheckpointPaths ckpt = checkpoint_paths(ctx.out_dir, tag);
  fs::create_directories(ckpt.dir);
  auto optimizer = make_optimizer(config);
  const int start_epoch =
      resume_step(options, tag, config_digest, model, *optimizer, ctx.seed);

  TrainLog log((fs::path(ctx.out_dir) / "logs" / (tag + ".tsv")).string(),
               /*append=*/start_epoch > 0);
  if (start_epoch > 0)
    log.comment("resumed at epoch " + std::to_string(start_epoch));

  const std::vector<nn::ParamRef> params = model.parameters();
  const std::size_t n = cache.size();
  const std::size_t batch_size = static_cast<std::size_t>(config.batch_size);
  const std::uint64_t aug_base = derive_seed(ctx.seed, {"augment", tag});
  double last_epoch_loss = 0.0;
  std::optional<double> last_val;

  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const double lr =
        nn::lr_at(config.lr, config.lr_milestones, config.lr_gamma, epoch);
    const auto order = epoch_permutation(n, ctx.seed, tag, epoch);
    double loss_sum = 0.0;
    std::size_t sample_sum = 0;

    for (std::size_t begin = 0, batch_idx = 0; begin < n;
         begin += batch_size, ++batch_idx) {
      const std::size_t end = std::min(n, begin + batch_size);
      const int bn = static_cast<int>(end - begin);
      Tensor input(bn, cache.channels(), cache.height(), cache.width());
      Tensor labels(bn, 1, cache.height(), cache.width());
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t idx = order[i];
        const int slot = static_cast<int>(i - begin);
        ImagePlane img = cache.image(idx);
        std::optional<BinaryMask> label = cache.label(idx);
        const std::uint64_t aug_seed =
            derive_seed(aug_base, {static_cast<std::uint64_t>(epoch),
                                   static_cast<std::uint64_t>(idx)});
        auto [aug_img, aug_label] = augment(img, label, aug_seed);
        const ImagePlane norm = normalize(aug_img, ctx.stats);
        fill_image(input, slot, norm);
        fill_mask(labels, slot, *aug_label);
      }
      Tensor logits = model.forward(input, /*training=*/true);
      Tensor grad;
      const double loss = num_classes == 1
                              ? bce_logits_loss(logits, labels, grad)
                              : softmax_ce_loss(logits, labels, grad);
      if (!std::isfinite(loss))
        fail(ErrorKind::non_finite,
             tag + " loss became non-finite at epoch " +
                 std::to_string(epoch) + ", batch " +
                 std::to_string(batch_idx));
      model.backward(grad);
      clip_gradients(params, config.grad_clip);
      optimizer->step(params, lr);

      log.row("batch", tag, epoch, std::to_string(batch_idx), lr, "-", "-",
              loss, "-", "-");
      loss_sum += loss * bn;
      sample_sum += static_cast<std::size_t>(bn);
    }

    const double epoch_loss = loss_sum / static_cast<double>(sample_sum);
    std::optional<double> val;
    if (ctx.val_manifest && !ctx.val_manifest->records.empty()) {
      const IoUReport report =
          evaluate_model(model, *ctx.val_manifest, ctx.stats, ctx.threshold);
      val = report.foreground_mean();
    }
    log.row("epoch", tag, epoch, "-", lr, "-", "-", epoch_loss, "-",
            val ? format_double(*val) : "-");
    log.flush();
    if (options.verbose)
      std::fprintf(stderr, "[%s] epoch %d loss %.6f%s\n", tag.c_str(), epoch,
                   epoch_loss,
                   val ? (" IoU " + format_double(*val)).c_str() : "");

    save_with_state(model, *optimizer, tag, config_digest, epoch, ckpt.last);
    if (std::find(config.lr_milestones.begin(), config.lr_milestones.end(),
                  epoch) != config.lr_milestones.end())
      save_with_state(model, *optimizer, tag, config_digest, epoch,
                      ckpt.milestone(epoch));
    last_epoch_loss = epoch_loss;
    last_val = val;
  }

  const auto [final_path, final_digest] = save_with_state(
      model, *optimizer, tag, config_digest, /*epoch=*/-1, ckpt.final);
  StepResult result;
  result.checkpoint_path = final_path;
  result.checkpoint_digest = final_digest;
  result.config_digest = config_digest;
  result.log_path = log.path();
  result.final_train_loss = last_epoch_loss;
  result.final_val_metric = last_val;
  return result;
}

// ------------------------------------------------------------ pipeline

void initialize_from_checkpoint(SegmentationModel& model,
                                const CheckpointBundle& bundle,
                                StepKind target, int num_classes, Rng& rng) {
  // Enter the bundle's own head configuration first so every stored
  // parameter lands, then adapt the head for the target step.
  if (bundle.step_tag == "step1" || bundle.step_tag == "step2")
    to_inpainting_head(model, bundle.head_mode, rng);
  else
    to_segmentation_head(model, bundle.head_channels, rng);
  load_checkpoint(bundle, model, rng);
  if (target == StepKind::segmentation) {
    if (model.inpainting_config() || model.out_channels() != num_classes)
      to_segmentation_head(model, num_classes, rng);
  } else {
    if (!model.inpainting_config())
      to_inpainting_head(model, HeadMode::replace, rng);
  }
}

void write_lineage(const RunLineage& lineage, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path);
  out << "# skyfill-lineage 1\n";
  for (const auto& e : lineage)
    out << e.step_tag << '\t' << e.checkpoint_path << '\t'
        << e.checkpoint_digest << '\t' << e.config_digest << '\n';
  if (!out) fail(ErrorKind::io, "write failed for " + path);
}

RunLineage read_lineage(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot read " + path);
  RunLineage lineage;
  std::string line;
  int last_rank = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream row(line);
    LineageEntry e;
    if (!(std::getline(row, e.step_tag, '\t') &&
          std::getline(row, e.checkpoint_path, '\t') &&
          std::getline(row, e.checkpoint_digest, '\t') &&
          std::getline(row, e.config_digest)))
      fail(ErrorKind::corrupt_state, path + ": malformed lineage row");
    const int rank = e.step_tag == "step1"   ? 1
                     : e.step_tag == "step2" ? 2
                     : e.step_tag == "step3" ? 3
                                             : 0;
    if (rank == 0)
      fail(ErrorKind::corrupt_state,
           path + ": unknown step tag " + e.step_tag);
    if (rank <= last_rank)
      fail(ErrorKind::corrupt_state, path + ": steps out of order");
    last_rank = rank;
    lineage.push_back(std::move(e));
  }
  return lineage;
}

PipelineResult run_pipeline(const PipelineConfig& config,
                            const RunOptions& options) {
  config.validate();
  if (config.out_dir.empty())
    fail(ErrorKind::config, "out_dir must be set");
  if (config.train_manifest.empty())
    fail(ErrorKind::config, "train_manifest must be set");
  if (config.stats_path.empty())
    fail(ErrorKind::config, "stats must point to a channel-stats file");

  const DatasetManifest train = read_manifest(config.train_manifest);
  const DatasetManifest unlabeled =
      config.unlabeled_manifest.empty()
          ? train
          : read_manifest(config.unlabeled_manifest);
  std::optional<DatasetManifest> val;
  if (!config.val_manifest.empty())
    val = read_manifest(config.val_manifest);

  TrainContext ctx;
  ctx.seed = config.seed;
  ctx.out_dir = config.out_dir;
  ctx.stats = read_stats_file(config.stats_path);
  ctx.val_manifest = val ? &*val : nullptr;
  ctx.threshold = config.threshold;
  fs::create_directories(config.out_dir);

  ToyUNet model(config.num_classes, derive_seed(config.seed, {"model-init"}));
  Rng head_rng = derive_rng(config.seed, {"head-adapt"});
  RunOptions sub_options;
  sub_options.verbose = options.verbose;

  PipelineResult result;
  result.lineage_path = (fs::path(config.out_dir) / "lineage.tsv").string();
  const auto checkpoint_lineage = [&]() {
    write_lineage(result.lineage, result.lineage_path);
  };

  try {
    std::string prev_checkpoint;
    StepConfig c3 = config.step3;
    if (!config.scratch) {
      to_inpainting_head(model, HeadMode::replace, head_rng);
      StepConfig c1 = config.step1;
      if (!c1.init_from.empty())
        initialize_from_checkpoint(model, read_checkpoint(c1.init_from),
                                   StepKind::inpaint, config.num_classes,
                                   head_rng);
      const StepResult r1 = run_step1(c1, unlabeled, model, ctx, sub_options);
      result.lineage.push_back({"step1", r1.checkpoint_path,
                                r1.checkpoint_digest, r1.config_digest});
      prev_checkpoint = r1.checkpoint_path;

      if (!config.skip_guided) {
        StepConfig c2 = config.step2;
        c2.init_from = prev_checkpoint;
        const StepResult r2 = run_step2(c2, train, model, ctx, sub_options);
        result.lineage.push_back({"step2", r2.checkpoint_path,
                                  r2.checkpoint_digest, r2.config_digest});
        prev_checkpoint = r2.checkpoint_path;
      }
      c3.init_from = prev_checkpoint;
      to_segmentation_head(model, config.num_classes, head_rng);
    }
    const StepResult r3 =
        run_step3(c3, train, model, config.num_classes, ctx, sub_options);
    result.lineage.push_back({"step3", r3.checkpoint_path,
                              r3.checkpoint_digest, r3.config_digest});
    result.final_checkpoint = r3.checkpoint_path;
  } catch (...) {
    checkpoint_lineage();
    throw;
  }
  checkpoint_lineage();
  return result;
}

}  // namespace skyfill
