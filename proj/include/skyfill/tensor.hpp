#pragma once

#include <algorithm>
#include <cstddef>
#include <new>
#include <vector>

namespace skyfill {

// 64-byte-aligned allocator for numeric buffers. Keeping every tensor
// allocation on the same alignment makes vectorized kernels split loops
// identically on every run, so results are bit-reproducible regardless
// of what the heap looked like beforehand.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
  template <typename U>
  bool operator!=(const AlignedAllocator<U>&) const {
    return false;
  }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

// Dense N x C x H x W float tensor, the working type of the network and
// the batched training losses. Row-major, contiguous.
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  FloatBuffer data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, float fill = 0.f)
      : n(n_), c(c_), h(h_), w(w_),
        data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }

  float& at(int in, int ic, int ih, int iw) {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw];
  }
  float at(int in, int ic, int ih, int iw) const {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw];
  }

  float* sample(int in) { return data.data() + in * sample_size(); }
  const float* sample(int in) const { return data.data() + in * sample_size(); }

  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  void zero() { std::fill(data.begin(), data.end(), 0.f); }
};

}  // namespace skyfill
