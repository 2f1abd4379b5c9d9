#pragma once

#include <map>
#include <string>
#include <vector>

#include "skyfill/rng.hpp"
#include "skyfill/tensor.hpp"

namespace skyfill::nn {

struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

// Kaiming fan-in normal init, std = sqrt(2 / fan_in).
void kaiming_init(Tensor& weight, int fan_in, Rng& rng);

// 2D convolution, stride 1, square kernel, zero padding. im2col + GEMM.
// weight is (out_ch, in_ch, k, k), bias (1, out_ch, 1, 1).
class Conv2d {
 public:
  Conv2d(std::string name, int in_ch, int out_ch, int ksize, int pad);

  void init(Rng& rng);
  Tensor forward(const Tensor& x, bool training);
  // Accumulates into weight/bias grads, returns grad wrt input.
  Tensor backward(const Tensor& dy);
  void collect(std::vector<ParamRef>& out);

  const std::string& name() const { return name_; }
  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  void im2col(const float* x, float* col, int h, int w) const;
  void col2im(const float* col, float* dx, int h, int w) const;

  std::string name_;
  int in_ch_, out_ch_, k_, pad_;
  Tensor weight_, bias_;
  Tensor weight_grad_, bias_grad_;
  Tensor x_cache_;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x, bool training);
  Tensor backward(const Tensor& dy) const;

 private:
  Tensor y_cache_;
};

// 2x2 max pooling, stride 2. Input dims must be even.
class MaxPool2 {
 public:
  Tensor forward(const Tensor& x, bool training);
  Tensor backward(const Tensor& dy) const;

 private:
  int in_h_ = 0, in_w_ = 0;
  std::vector<std::uint32_t> argmax_;
};

// Nearest-neighbour 2x upsampling.
class UpsampleNearest2 {
 public:
  Tensor forward(const Tensor& x) const;
  Tensor backward(const Tensor& dy) const;
};

Tensor concat_channels(const Tensor& a, const Tensor& b);
// Splits dy of concat_channels(a, b) back into the two operand grads.
void split_channels(const Tensor& dy, int a_channels, Tensor& da, Tensor& db);

// Effective LR under the multistep schedule: base * gamma^(#milestones <= epoch).
double lr_at(double base_lr, const std::vector<int>& milestones, double gamma,
             int epoch);

// Optimizers keep per-parameter state keyed by name so state survives
// checkpointing. step() applies grads and zeroes them.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(const std::vector<ParamRef>& params, double lr) = 0;
  // State exported as named tensors ("opt." prefix added by the caller).
  virtual std::map<std::string, Tensor> state() const = 0;
  virtual void load_state(const std::map<std::string, Tensor>& state) = 0;
};

class SgdMomentum final : public Optimizer {
 public:
  SgdMomentum(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(const std::vector<ParamRef>& params, double lr) override;
  std::map<std::string, Tensor> state() const override;
  void load_state(const std::map<std::string, Tensor>& state) override;

 private:
  double momentum_, weight_decay_;
  std::map<std::string, Tensor> velocity_;
};

class Adam final : public Optimizer {
 public:
  Adam(double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}
  void step(const std::vector<ParamRef>& params, double lr) override;
  std::map<std::string, Tensor> state() const override;
  void load_state(const std::map<std::string, Tensor>& state) override;

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  long long t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace skyfill::nn
