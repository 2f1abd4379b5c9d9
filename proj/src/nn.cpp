#include "skyfill/nn.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>

#include "skyfill/common.hpp"

namespace skyfill::nn {

using RowMat =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void kaiming_init(Tensor& weight, int fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / fan_in);
  for (auto& v : weight.data) v = static_cast<float>(rng.normal() * std);
}

Conv2d::Conv2d(std::string name, int in_ch, int out_ch, int ksize, int pad)
    : name_(std::move(name)), in_ch_(in_ch), out_ch_(out_ch), k_(ksize),
      pad_(pad),
      weight_(out_ch, in_ch, ksize, ksize),
      bias_(1, out_ch, 1, 1),
      weight_grad_(out_ch, in_ch, ksize, ksize),
      bias_grad_(1, out_ch, 1, 1) {}

void Conv2d::init(Rng& rng) {
  kaiming_init(weight_, in_ch_ * k_ * k_, rng);
  bias_.zero();
}

void Conv2d::im2col(const float* x, float* col, int h, int w) const {
  // col is (in_ch*k*k) x (h*w); output dims equal input dims (stride 1,
  // pad = k/2 for the kernels used here)
  const int hw = h * w;
  for (int c = 0; c < in_ch_; ++c) {
    const float* xc = x + static_cast<std::size_t>(c) * hw;
    for (int kr = 0; kr < k_; ++kr) {
      for (int kc = 0; kc < k_; ++kc) {
        float* row = col + (static_cast<std::size_t>(c) * k_ * k_ +
                            kr * k_ + kc) * hw;
        const int dr = kr - pad_, dc = kc - pad_;
        for (int oh = 0; oh < h; ++oh) {
          const int ih = oh + dr;
          float* dst = row + static_cast<std::size_t>(oh) * w;
          if (ih < 0 || ih >= h) {
            std::memset(dst, 0, sizeof(float) * w);
            continue;
          }
          const float* src = xc + static_cast<std::size_t>(ih) * w;
          // valid output columns: ow in [max(0,-dc), min(w, w-dc))
          const int lo = dc < 0 ? -dc : 0;
          const int hi = dc > 0 ? w - dc : w;
          if (lo > 0) std::memset(dst, 0, sizeof(float) * lo);
          if (hi < w) std::memset(dst + hi, 0, sizeof(float) * (w - hi));
          if (hi > lo)
            std::memcpy(dst + lo, src + lo + dc, sizeof(float) * (hi - lo));
        }
      }
    }
  }
}

void Conv2d::col2im(const float* col, float* dx, int h, int w) const {
  const int hw = h * w;
  std::memset(dx, 0, sizeof(float) * static_cast<std::size_t>(in_ch_) * hw);
  for (int c = 0; c < in_ch_; ++c) {
    float* xc = dx + static_cast<std::size_t>(c) * hw;
    for (int kr = 0; kr < k_; ++kr) {
      for (int kc = 0; kc < k_; ++kc) {
        const float* row = col + (static_cast<std::size_t>(c) * k_ * k_ +
                                  kr * k_ + kc) * hw;
        const int dr = kr - pad_, dc = kc - pad_;
        for (int oh = 0; oh < h; ++oh) {
          const int ih = oh + dr;
          if (ih < 0 || ih >= h) continue;
          const float* src = row + static_cast<std::size_t>(oh) * w;
          float* dst = xc + static_cast<std::size_t>(ih) * w;
          const int lo = dc < 0 ? -dc : 0;
          const int hi = dc > 0 ? w - dc : w;
          for (int ow = lo; ow < hi; ++ow) dst[ow + dc] += src[ow];
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x, bool training) {
  if (x.c != in_ch_)
    fail(ErrorKind::shape_mismatch,
         name_ + ": expected " + std::to_string(in_ch_) + " input channels");
  const int hw = x.h * x.w;
  const int ckk = in_ch_ * k_ * k_;
  Tensor y(x.n, out_ch_, x.h, x.w);
  FloatBuffer col(static_cast<std::size_t>(ckk) * hw);

  ConstMapMat wmat(weight_.data.data(), out_ch_, ckk);
  Eigen::Map<const Eigen::VectorXf> bvec(bias_.data.data(), out_ch_);
  for (int n = 0; n < x.n; ++n) {
    im2col(x.sample(n), col.data(), x.h, x.w);
    ConstMapMat cmat(col.data(), ckk, hw);
    MapMat ymat(y.sample(n), out_ch_, hw);
    ymat.noalias() = wmat * cmat;
    ymat.colwise() += bvec;
  }
  if (training) x_cache_ = x;
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  const Tensor& x = x_cache_;
  if (x.n == 0) fail(ErrorKind::contract_violation, name_ + ": backward before forward");
  if (dy.n != x.n || dy.c != out_ch_ || dy.h != x.h || dy.w != x.w)
    fail(ErrorKind::shape_mismatch,
         name_ + ": upstream grad shape does not match the cached forward");
  const int hw = x.h * x.w;
  const int ckk = in_ch_ * k_ * k_;
  Tensor dx(x.n, in_ch_, x.h, x.w);
  FloatBuffer col(static_cast<std::size_t>(ckk) * hw);
  FloatBuffer dcol(static_cast<std::size_t>(ckk) * hw);

  ConstMapMat wmat(weight_.data.data(), out_ch_, ckk);
  MapMat dwmat(weight_grad_.data.data(), out_ch_, ckk);
  Eigen::Map<Eigen::VectorXf> dbvec(bias_grad_.data.data(), out_ch_);
  for (int n = 0; n < x.n; ++n) {
    im2col(x.sample(n), col.data(), x.h, x.w);
    ConstMapMat cmat(col.data(), ckk, hw);
    ConstMapMat dymat(dy.sample(n), out_ch_, hw);
    dwmat.noalias() += dymat * cmat.transpose();
    dbvec.noalias() += dymat.rowwise().sum();
    MapMat dcmat(dcol.data(), ckk, hw);
    dcmat.noalias() = wmat.transpose() * dymat;
    col2im(dcol.data(), dx.sample(n), x.h, x.w);
  }
  return dx;
}

void Conv2d::collect(std::vector<ParamRef>& out) {
  out.push_back({name_ + ".weight", &weight_, &weight_grad_});
  out.push_back({name_ + ".bias", &bias_, &bias_grad_});
}

Tensor ReLU::forward(const Tensor& x, bool training) {
  Tensor y = x;
  for (auto& v : y.data) v = v > 0.f ? v : 0.f;
  if (training) y_cache_ = y;
  return y;
}

Tensor ReLU::backward(const Tensor& dy) const {
  if (!dy.same_shape(y_cache_))
    fail(ErrorKind::shape_mismatch,
         "relu: upstream grad shape does not match the cached forward");
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.data.size(); ++i)
    if (y_cache_.data[i] <= 0.f) dx.data[i] = 0.f;
  return dx;
}

Tensor MaxPool2::forward(const Tensor& x, bool training) {
  if (x.h % 2 || x.w % 2)
    fail(ErrorKind::shape_mismatch, "maxpool needs even input dimensions");
  const int oh = x.h / 2, ow = x.w / 2;
  Tensor y(x.n, x.c, oh, ow);
  in_h_ = x.h;
  in_w_ = x.w;
  argmax_.assign(y.size(), 0);
  std::size_t oi = 0;
  for (int n = 0; n < x.n; ++n)
    for (int c = 0; c < x.c; ++c) {
      const float* xp = x.data.data() + (static_cast<std::size_t>(n) * x.c + c) * x.plane();
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j, ++oi) {
          std::uint32_t base = static_cast<std::uint32_t>(2 * i * x.w + 2 * j);
          std::uint32_t best = base;
          float bv = xp[base];
          const std::uint32_t cand[3] = {base + 1,
                                         base + static_cast<std::uint32_t>(x.w),
                                         base + static_cast<std::uint32_t>(x.w) + 1};
          for (auto idx : cand)
            if (xp[idx] > bv) { bv = xp[idx]; best = idx; }
          y.data[oi] = bv;
          argmax_[oi] = best;
        }
    }
  (void)training;
  return y;
}

Tensor MaxPool2::backward(const Tensor& dy) const {
  if (dy.size() != argmax_.size() || dy.h != in_h_ / 2 || dy.w != in_w_ / 2)
    fail(ErrorKind::shape_mismatch,
         "maxpool: upstream grad shape does not match the cached forward");
  Tensor dx(dy.n, dy.c, in_h_, in_w_);
  std::size_t oi = 0;
  const std::size_t in_plane = static_cast<std::size_t>(in_h_) * in_w_;
  for (int n = 0; n < dy.n; ++n)
    for (int c = 0; c < dy.c; ++c) {
      float* dxp = dx.data.data() + (static_cast<std::size_t>(n) * dy.c + c) * in_plane;
      const std::size_t count = dy.plane();
      for (std::size_t p = 0; p < count; ++p, ++oi) dxp[argmax_[oi]] += dy.data[oi];
    }
  return dx;
}

Tensor UpsampleNearest2::forward(const Tensor& x) const {
  Tensor y(x.n, x.c, x.h * 2, x.w * 2);
  for (int n = 0; n < x.n; ++n)
    for (int c = 0; c < x.c; ++c) {
      const float* xp = x.data.data() + (static_cast<std::size_t>(n) * x.c + c) * x.plane();
      float* yp = y.data.data() + (static_cast<std::size_t>(n) * x.c + c) * y.plane();
      for (int i = 0; i < x.h; ++i)
        for (int j = 0; j < x.w; ++j) {
          const float v = xp[i * x.w + j];
          float* base = yp + 2 * i * y.w + 2 * j;
          base[0] = v;
          base[1] = v;
          base[y.w] = v;
          base[y.w + 1] = v;
        }
    }
  return y;
}

Tensor UpsampleNearest2::backward(const Tensor& dy) const {
  if (dy.h % 2 || dy.w % 2)
    fail(ErrorKind::shape_mismatch,
         "upsample: upstream grad needs even dimensions");
  Tensor dx(dy.n, dy.c, dy.h / 2, dy.w / 2);
  for (int n = 0; n < dy.n; ++n)
    for (int c = 0; c < dy.c; ++c) {
      const float* dyp = dy.data.data() + (static_cast<std::size_t>(n) * dy.c + c) * dy.plane();
      float* dxp = dx.data.data() + (static_cast<std::size_t>(n) * dy.c + c) * dx.plane();
      for (int i = 0; i < dx.h; ++i)
        for (int j = 0; j < dx.w; ++j) {
          const float* base = dyp + 2 * i * dy.w + 2 * j;
          dxp[i * dx.w + j] = base[0] + base[1] + base[dy.w] + base[dy.w + 1];
        }
    }
  return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n != b.n || a.h != b.h || a.w != b.w)
    fail(ErrorKind::shape_mismatch, "concat operands must share N,H,W");
  Tensor y(a.n, a.c + b.c, a.h, a.w);
  for (int n = 0; n < a.n; ++n) {
    std::memcpy(y.sample(n), a.sample(n), sizeof(float) * a.sample_size());
    std::memcpy(y.sample(n) + a.sample_size(), b.sample(n),
                sizeof(float) * b.sample_size());
  }
  return y;
}

void split_channels(const Tensor& dy, int a_channels, Tensor& da, Tensor& db) {
  da = Tensor(dy.n, a_channels, dy.h, dy.w);
  db = Tensor(dy.n, dy.c - a_channels, dy.h, dy.w);
  for (int n = 0; n < dy.n; ++n) {
    std::memcpy(da.sample(n), dy.sample(n), sizeof(float) * da.sample_size());
    std::memcpy(db.sample(n), dy.sample(n) + da.sample_size(),
                sizeof(float) * db.sample_size());
  }
}

double lr_at(double base_lr, const std::vector<int>& milestones, double gamma,
             int epoch) {
  int hits = 0;
  for (int m : milestones) hits += (m <= epoch);
  return base_lr * std::pow(gamma, hits);
}

void SgdMomentum::step(const std::vector<ParamRef>& params, double lr) {
  for (const auto& p : params) {
    auto [it, inserted] = velocity_.try_emplace(p.name);
    if (inserted) *(&it->second) = Tensor(p.value->n, p.value->c, p.value->h, p.value->w);
    Tensor& vel = it->second;
    float* w = p.value->data.data();
    float* g = p.grad->data.data();
    float* v = vel.data.data();
    const float mom = static_cast<float>(momentum_);
    const float wd = static_cast<float>(weight_decay_);
    const float flr = static_cast<float>(lr);
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      const float grad = g[i] + wd * w[i];
      v[i] = mom * v[i] + grad;
      w[i] -= flr * v[i];
      g[i] = 0.f;
    }
  }
}

std::map<std::string, Tensor> SgdMomentum::state() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, vel] : velocity_) out["v." + name] = vel;
  return out;
}

void SgdMomentum::load_state(const std::map<std::string, Tensor>& state) {
  velocity_.clear();
  for (const auto& [name, t] : state)
    if (name.rfind("v.", 0) == 0) velocity_[name.substr(2)] = t;
}

void Adam::step(const std::vector<ParamRef>& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& p : params) {
    auto [mi, m_ins] = m_.try_emplace(p.name);
    if (m_ins) mi->second = Tensor(p.value->n, p.value->c, p.value->h, p.value->w);
    auto [vi, v_ins] = v_.try_emplace(p.name);
    if (v_ins) vi->second = Tensor(p.value->n, p.value->c, p.value->h, p.value->w);
    float* w = p.value->data.data();
    float* g = p.grad->data.data();
    float* m = mi->second.data.data();
    float* v = vi->second.data.data();
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      const double grad = g[i] + weight_decay_ * w[i];
      m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * grad);
      v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * grad * grad);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps_));
      g[i] = 0.f;
    }
  }
}

std::map<std::string, Tensor> Adam::state() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : m_) out["m." + name] = t;
  for (const auto& [name, t] : v_) out["v." + name] = t;
  Tensor step_count(1, 1, 1, 1);
  step_count.data[0] = static_cast<float>(t_);
  out["t"] = step_count;
  return out;
}

void Adam::load_state(const std::map<std::string, Tensor>& state) {
  m_.clear();
  v_.clear();
  t_ = 0;
  for (const auto& [name, t] : state) {
    if (name.rfind("m.", 0) == 0) m_[name.substr(2)] = t;
    else if (name.rfind("v.", 0) == 0) v_[name.substr(2)] = t;
    else if (name == "t") t_ = static_cast<long long>(t.data[0]);
  }
}

}  // namespace skyfill::nn
