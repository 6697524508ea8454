#include "voxseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "gemm.hpp"

namespace voxseg {

using detail::gemm;
using detail::Trans;

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

template <typename T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Elements per channel past the first two axes.
std::size_t spatial_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 2; i < s.size(); ++i) n *= s[i];
  return n;
}

template <typename T>
void require_feature_map(const Tensor<T>& x, const char* op) {
  require(x.rank() >= 2, std::string(op) + ": expected (N, C, ...) input, got " +
                             shape_str(x.shape()));
}

template <typename T>
void require_volume(const Tensor<T>& x, const char* op) {
  require(x.rank() == 5, std::string(op) + ": expected (N, C, D, H, W) input, got " +
                             shape_str(x.shape()));
}

// Geometry shared by convolution and its transpose. The "image" side is the
// dense grid that taps are read from; the "column" side is the grid of kernel
// placements.
struct ConvGeometry {
  std::size_t channels = 0;
  std::array<std::size_t, 3> image{};
  std::array<std::size_t, 3> column{};
  std::array<std::size_t, 3> kernel{};
  std::array<int, 3> padding{};
  int dilation = 1;
  int stride = 1;

  std::size_t rows() const { return channels * kernel[0] * kernel[1] * kernel[2]; }
  std::size_t image_volume() const { return image[0] * image[1] * image[2]; }
  std::size_t column_plane() const { return column[1] * column[2]; }
  std::size_t column_volume() const { return column[0] * column_plane(); }
  bool pointwise() const {
    return kernel[0] == 1 && kernel[1] == 1 && kernel[2] == 1 && stride == 1 &&
           padding == std::array<int, 3>{0, 0, 0};
  }
  // Column-side depth planes per im2col chunk, bounding the scratch buffer.
  std::size_t planes_per_chunk() const {
    constexpr std::size_t kBudget = std::size_t{1} << 23;
    const std::size_t per_plane = std::max<std::size_t>(1, rows() * column_plane());
    return std::clamp<std::size_t>(kBudget / per_plane, 1, column[0]);
  }
};

std::size_t conv_out_extent(std::size_t in, std::size_t k, int dilation, int stride, int pad) {
  const long span = static_cast<long>((k - 1) * dilation + 1);
  const long padded = static_cast<long>(in) + 2L * pad;
  if (padded < span) return 0;
  return static_cast<std::size_t>((padded - span) / stride + 1);
}

// Gathers kernel taps for column depth planes [d0, d1) into `col`
// (rows x ((d1 - d0) * plane)).
template <typename T>
void im2col(const ConvGeometry& g, const T* image, std::size_t d0, std::size_t d1, T* col) {
  const std::size_t plane = g.column_plane();
  const std::size_t cols = (d1 - d0) * plane;
  const long in_d = static_cast<long>(g.image[0]);
  const long in_h = static_cast<long>(g.image[1]);
  const long in_w = static_cast<long>(g.image[2]);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* src = image + c * g.image_volume();
    for (std::size_t kd = 0; kd < g.kernel[0]; ++kd) {
      for (std::size_t kh = 0; kh < g.kernel[1]; ++kh) {
        for (std::size_t kw = 0; kw < g.kernel[2]; ++kw, ++row) {
          T* dst = col + row * cols;
          const long off_d = static_cast<long>(kd) * g.dilation - g.padding[0];
          const long off_h = static_cast<long>(kh) * g.dilation - g.padding[1];
          const long off_w = static_cast<long>(kw) * g.dilation - g.padding[2];
          for (std::size_t od = d0; od < d1; ++od) {
            const long id = static_cast<long>(od) * g.stride + off_d;
            for (std::size_t oh = 0; oh < g.column[1]; ++oh) {
              T* out = dst + ((od - d0) * g.column[1] + oh) * g.column[2];
              const long ih = static_cast<long>(oh) * g.stride + off_h;
              if (id < 0 || id >= in_d || ih < 0 || ih >= in_h) {
                std::fill(out, out + g.column[2], T(0));
                continue;
              }
              const T* in_row = src + (id * in_h + ih) * in_w;
              if (g.stride == 1) {
                const long cw = static_cast<long>(g.column[2]);
                const long lo = std::clamp(-off_w, 0L, cw);
                const long hi = std::clamp(in_w - off_w, lo, cw);
                std::fill(out, out + lo, T(0));
                std::copy(in_row + lo + off_w, in_row + hi + off_w, out + lo);
                std::fill(out + hi, out + cw, T(0));
                continue;
              }
              for (std::size_t ow = 0; ow < g.column[2]; ++ow) {
                const long iw = static_cast<long>(ow) * g.stride + off_w;
                out[ow] = (iw >= 0 && iw < in_w) ? in_row[iw] : T(0);
              }
            }
          }
        }
      }
    }
  }
}

// Scatter-adds columns back onto the image grid; the adjoint of im2col.
template <typename T>
void col2im(const ConvGeometry& g, const T* col, std::size_t d0, std::size_t d1, T* image) {
  const std::size_t plane = g.column_plane();
  const std::size_t cols = (d1 - d0) * plane;
  const long in_d = static_cast<long>(g.image[0]);
  const long in_h = static_cast<long>(g.image[1]);
  const long in_w = static_cast<long>(g.image[2]);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* dst = image + c * g.image_volume();
    for (std::size_t kd = 0; kd < g.kernel[0]; ++kd) {
      for (std::size_t kh = 0; kh < g.kernel[1]; ++kh) {
        for (std::size_t kw = 0; kw < g.kernel[2]; ++kw, ++row) {
          const T* src = col + row * cols;
          const long off_d = static_cast<long>(kd) * g.dilation - g.padding[0];
          const long off_h = static_cast<long>(kh) * g.dilation - g.padding[1];
          const long off_w = static_cast<long>(kw) * g.dilation - g.padding[2];
          for (std::size_t od = d0; od < d1; ++od) {
            const long id = static_cast<long>(od) * g.stride + off_d;
            if (id < 0 || id >= in_d) continue;
            for (std::size_t oh = 0; oh < g.column[1]; ++oh) {
              const long ih = static_cast<long>(oh) * g.stride + off_h;
              if (ih < 0 || ih >= in_h) continue;
              const T* in = src + ((od - d0) * g.column[1] + oh) * g.column[2];
              T* out_row = dst + (id * in_h + ih) * in_w;
              if (g.stride == 1) {
                const long cw = static_cast<long>(g.column[2]);
                const long lo = std::clamp(-off_w, 0L, cw);
                const long hi = std::clamp(in_w - off_w, lo, cw);
                for (long ow = lo; ow < hi; ++ow) out_row[ow + off_w] += in[ow];
                continue;
              }
              for (std::size_t ow = 0; ow < g.column[2]; ++ow) {
                const long iw = static_cast<long>(ow) * g.stride + off_w;
                if (iw >= 0 && iw < in_w) out_row[iw] += in[ow];
              }
            }
          }
        }
      }
    }
  }
}

// columns (out_channels x column_volume) += weight (out_channels x rows) * im2col(image)
template <typename T>
void conv_columns_forward(const ConvGeometry& g, std::size_t out_channels, const T* weight,
                          const T* image, T* columns, std::vector<T>& scratch) {
  const std::size_t ld = g.column_volume();
  if (g.pointwise()) {
    gemm<T>(Trans::kNo, Trans::kNo, out_channels, ld, g.rows(), T(1), weight, g.rows(), image,
            ld, T(1), columns, ld);
    return;
  }
  const std::size_t step = g.planes_per_chunk();
  for (std::size_t d0 = 0; d0 < g.column[0]; d0 += step) {
    const std::size_t d1 = std::min(g.column[0], d0 + step);
    const std::size_t cols = (d1 - d0) * g.column_plane();
    scratch.resize(g.rows() * cols);
    im2col(g, image, d0, d1, scratch.data());
    gemm<T>(Trans::kNo, Trans::kNo, out_channels, cols, g.rows(), T(1), weight, g.rows(),
            scratch.data(), cols, T(1), columns + d0 * g.column_plane(), ld);
  }
}

// Geometry and weights of the stride-1 adjoint written as a forward
// convolution: channels swap roles, taps are mirrored and the padding becomes
// dilation * (K - 1) - padding. Returns false when that padding is negative.
template <typename T>
bool mirrored_kernel(const ConvGeometry& g, std::size_t out_channels, const T* weight,
                     ConvGeometry& mg, std::vector<T>& mirrored) {
  if (g.stride != 1) return false;
  mg = g;
  mg.channels = out_channels;
  std::swap(mg.image, mg.column);
  for (int axis = 0; axis < 3; ++axis) {
    mg.padding[axis] = g.dilation * static_cast<int>(g.kernel[axis] - 1) - g.padding[axis];
    if (mg.padding[axis] < 0) return false;
  }
  const std::size_t taps = g.kernel[0] * g.kernel[1] * g.kernel[2];
  mirrored.resize(out_channels * g.channels * taps);
  for (std::size_t co = 0; co < out_channels; ++co) {
    for (std::size_t ci = 0; ci < g.channels; ++ci) {
      const T* src = weight + (co * g.channels + ci) * taps;
      T* dst = mirrored.data() + (ci * out_channels + co) * taps;
      for (std::size_t t = 0; t < taps; ++t) dst[taps - 1 - t] = src[t];
    }
  }
  return true;
}

template <typename T>
void conv_columns_forward(const ConvGeometry& g, std::size_t out_channels, const T* weight,
                          const T* image, T* columns, std::vector<T>& scratch);

// image += col2im(weight^T * columns)
template <typename T>
void conv_columns_adjoint(const ConvGeometry& g, std::size_t out_channels, const T* weight,
                          const T* columns, T* image, std::vector<T>& scratch) {
  const std::size_t ld = g.column_volume();
  ConvGeometry mg;
  std::vector<T> mirrored;
  if (!g.pointwise() && mirrored_kernel(g, out_channels, weight, mg, mirrored)) {
    conv_columns_forward(mg, g.channels, mirrored.data(), columns, image, scratch);
    return;
  }
  if (g.pointwise()) {
    gemm<T>(Trans::kYes, Trans::kNo, g.rows(), ld, out_channels, T(1), weight, g.rows(),
            columns, ld, T(1), image, ld);
    return;
  }
  const std::size_t step = g.planes_per_chunk();
  for (std::size_t d0 = 0; d0 < g.column[0]; d0 += step) {
    const std::size_t d1 = std::min(g.column[0], d0 + step);
    const std::size_t cols = (d1 - d0) * g.column_plane();
    scratch.resize(g.rows() * cols);
    gemm<T>(Trans::kYes, Trans::kNo, g.rows(), cols, out_channels, T(1), weight, g.rows(),
            columns + d0 * g.column_plane(), ld, T(0), scratch.data(), cols);
    col2im(g, scratch.data(), d0, d1, image);
  }
}

// weight_grad (out_channels x rows) += columns * im2col(image)^T
template <typename T>
void conv_weight_grad(const ConvGeometry& g, std::size_t out_channels, const T* columns,
                      const T* image, T* weight_grad, std::vector<T>& scratch) {
  const std::size_t ld = g.column_volume();
  if (g.pointwise()) {
    gemm<T>(Trans::kNo, Trans::kYes, out_channels, g.rows(), ld, T(1), columns, ld, image, ld,
            T(1), weight_grad, g.rows());
    return;
  }
  const std::size_t step = g.planes_per_chunk();
  for (std::size_t d0 = 0; d0 < g.column[0]; d0 += step) {
    const std::size_t d1 = std::min(g.column[0], d0 + step);
    const std::size_t cols = (d1 - d0) * g.column_plane();
    scratch.resize(g.rows() * cols);
    im2col(g, image, d0, d1, scratch.data());
    gemm<T>(Trans::kNo, Trans::kYes, out_channels, g.rows(), cols, T(1),
            columns + d0 * g.column_plane(), ld, scratch.data(), cols, T(1), weight_grad,
            g.rows());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Element-wise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  tape.record("add", {a, b}, out, [a, b](std::span<const T> g) mutable {
    if (a.requires_grad()) accumulate(a.grad_buffer(), g);
    if (b.requires_grad()) accumulate(b.grad_buffer(), g);
  });
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  tape.record("mul", {a, b}, out, [a, b](std::span<const T> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      auto y = b.data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      auto x = a.data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  tape.record("scale", {a}, out, [a, factor](std::span<const T> g) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * factor;
  });
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  tape.record("sum", {a}, out, [a](std::span<const T> g) mutable {
    for (auto& v : a.grad_buffer()) v += g[0];
  });
  return out;
}

template <typename T>
Tensor<T> scale_channels(Tape<T>& tape, const Tensor<T>& features, const Tensor<T>& weights) {
  require_feature_map(features, "scale_channels");
  const std::size_t n = features.dim(0);
  const std::size_t c = features.dim(1);
  const std::size_t s = spatial_size(features.shape());
  const bool shared = weights.rank() == 1;
  const bool ok = shared ? weights.dim(0) == c
                         : (weights.rank() == 2 && weights.dim(0) == n && weights.dim(1) == c);
  require(ok, "scale_channels: weights " + shape_str(weights.shape()) +
                  " do not match the channels of " + shape_str(features.shape()));

  Tensor<T> out(features.shape());
  auto f = features.data();
  auto a = weights.data();
  auto o = out.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T w = a[(shared ? 0 : b * c) + ch];
      const std::size_t base = (b * c + ch) * s;
      for (std::size_t i = 0; i < s; ++i) o[base + i] = f[base + i] * w;
    }
  }
  tape.record("scale_channels", {features, weights}, out,
              [features, weights, n, c, s, shared](std::span<const T> g) mutable {
                auto f = features.data();
                auto a = weights.data();
                if (features.requires_grad()) {
                  auto gf = features.grad_buffer();
                  for (std::size_t b = 0; b < n; ++b) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const T w = a[(shared ? 0 : b * c) + ch];
                      const std::size_t base = (b * c + ch) * s;
                      for (std::size_t i = 0; i < s; ++i) gf[base + i] += g[base + i] * w;
                    }
                  }
                }
                if (weights.requires_grad()) {
                  auto ga = weights.grad_buffer();
                  for (std::size_t b = 0; b < n; ++b) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const std::size_t base = (b * c + ch) * s;
                      T dot = 0;
                      for (std::size_t i = 0; i < s; ++i) dot += g[base + i] * f[base + i];
                      ga[(shared ? 0 : b * c) + ch] += dot;
                    }
                  }
                }
              });
  return out;
}

template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& lo, const Tensor<T>& hi) {
  require_feature_map(lo, "concat_channels");
  require_feature_map(hi, "concat_channels");
  Shape a = lo.shape();
  Shape b = hi.shape();
  a[1] = b[1] = 0;
  require(a == b, "concat_channels: non-channel extents differ: " + shape_str(lo.shape()) +
                      " vs " + shape_str(hi.shape()));
  const std::size_t n = lo.dim(0);
  const std::size_t c1 = lo.dim(1);
  const std::size_t c2 = hi.dim(1);
  const std::size_t s = spatial_size(lo.shape());
  Shape shape = lo.shape();
  shape[1] = c1 + c2;
  Tensor<T> out(shape);
  auto o = out.data();
  auto x = lo.data();
  auto y = hi.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.begin() + i * c1 * s, c1 * s, o.begin() + i * (c1 + c2) * s);
    std::copy_n(y.begin() + i * c2 * s, c2 * s, o.begin() + (i * (c1 + c2) + c1) * s);
  }
  tape.record("concat_channels", {lo, hi}, out,
              [lo, hi, n, c1, c2, s](std::span<const T> g) mutable {
                for (std::size_t i = 0; i < n; ++i) {
                  if (lo.requires_grad()) {
                    auto gl = lo.grad_buffer().subspan(i * c1 * s, c1 * s);
                    accumulate(gl, g.subspan(i * (c1 + c2) * s, c1 * s));
                  }
                  if (hi.requires_grad()) {
                    auto gh = hi.grad_buffer().subspan(i * c2 * s, c2 * s);
                    accumulate(gh, g.subspan((i * (c1 + c2) + c1) * s, c2 * s));
                  }
                }
              });
  return out;
}

template <typename T>
Tensor<T> slice_channels(Tape<T>& tape, const Tensor<T>& x, std::size_t begin,
                         std::size_t count) {
  require_feature_map(x, "slice_channels");
  const std::size_t n = x.dim(0);
  const std::size_t c = x.dim(1);
  require(count >= 1 && begin + count <= c,
          "slice_channels: range [" + std::to_string(begin) + ", " +
              std::to_string(begin + count) + ") outside " + std::to_string(c) + " channels");
  const std::size_t s = spatial_size(x.shape());
  Shape shape = x.shape();
  shape[1] = count;
  Tensor<T> out(shape);
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(in.begin() + (i * c + begin) * s, count * s, o.begin() + i * count * s);
  }
  tape.record("slice_channels", {x}, out, [x, n, c, s, begin, count](std::span<const T> g) mutable {
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      accumulate(gx.subspan((i * c + begin) * s, count * s), g.subspan(i * count * s, count * s));
    }
  });
  return out;
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] > T(0) ? in[i] : T(0);
  tape.record("relu", {x}, out, [x](std::span<const T> g) mutable {
    auto gx = x.grad_buffer();
    auto in = x.data();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (in[i] > T(0)) gx[i] += g[i];
    }
  });
  return out;
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = stable_sigmoid(in[i]);
  const Tensor<T> result = out;
  tape.record("sigmoid", {x}, out, [x, result](std::span<const T> g) mutable {
    auto gx = x.grad_buffer();
    auto s = result.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * s[i] * (T(1) - s[i]);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

int same_padding(int kernel, int dilation) {
  require(kernel >= 1, "kernel size must be positive");
  require(dilation >= 1, "dilation must be positive");
  require(kernel % 2 == 1, "\"same\" padding needs an odd kernel size, got " +
                               std::to_string(kernel));
  return (kernel - 1) * dilation / 2;
}

int effective_extent(int kernel, int dilation) { return (kernel - 1) * dilation + 1; }

template <typename T>
Conv3dKernel<T> Conv3dKernel<T>::same(Tensor<T> weight, Tensor<T> bias, int dilation) {
  require(weight.rank() == 5, "conv weight must be (C_out, C_in, L, M, N), got " +
                                  shape_str(weight.shape()));
  Conv3dKernel k;
  for (int axis = 0; axis < 3; ++axis) {
    k.padding[axis] = same_padding(static_cast<int>(weight.dim(2 + axis)), dilation);
  }
  k.weight = std::move(weight);
  k.bias = std::move(bias);
  k.dilation = dilation;
  k.stride = 1;
  return k;
}

template <typename T>
Tensor<T> conv3d(Tape<T>& tape, const Tensor<T>& input, const Conv3dKernel<T>& kernel) {
  require_volume(input, "conv3d");
  const Tensor<T>& weight = kernel.weight;
  const Tensor<T>& bias = kernel.bias;
  require(weight.rank() == 5, "conv3d: weight must be (C_out, C_in, L, M, N), got " +
                                  shape_str(weight.shape()));
  require(kernel.dilation >= 1, "conv3d: dilation must be positive, got " +
                                    std::to_string(kernel.dilation));
  require(kernel.stride >= 1, "conv3d: stride must be positive, got " +
                                  std::to_string(kernel.stride));
  require(input.dim(1) == weight.dim(1),
          "conv3d: input has " + std::to_string(input.dim(1)) + " channels, kernel expects " +
              std::to_string(weight.dim(1)));
  const std::size_t c_out = weight.dim(0);
  require(bias.rank() == 1 && bias.dim(0) == c_out,
          "conv3d: bias must have shape [" + std::to_string(c_out) + "], got " +
              shape_str(bias.shape()));

  ConvGeometry g;
  g.channels = input.dim(1);
  g.dilation = kernel.dilation;
  g.stride = kernel.stride;
  g.padding = kernel.padding;
  for (int axis = 0; axis < 3; ++axis) {
    require(kernel.padding[axis] >= 0, "conv3d: padding must be non-negative");
    g.image[axis] = input.dim(2 + axis);
    g.kernel[axis] = weight.dim(2 + axis);
    g.column[axis] = conv_out_extent(g.image[axis], g.kernel[axis], g.dilation, g.stride,
                                     g.padding[axis]);
    require(g.column[axis] > 0, "conv3d: kernel larger than padded input " +
                                    shape_str(input.shape()));
  }

  const std::size_t batch = input.dim(0);
  Tensor<T> out({batch, c_out, g.column[0], g.column[1], g.column[2]});
  const std::size_t out_vol = g.column_volume();
  std::vector<T> scratch;
  {
    auto o = out.data();
    auto x = input.data();
    auto w = weight.data();
    auto b = bias.data();
    for (std::size_t n = 0; n < batch; ++n) {
      T* dst = o.data() + n * c_out * out_vol;
      for (std::size_t co = 0; co < c_out; ++co) std::fill_n(dst + co * out_vol, out_vol, b[co]);
      conv_columns_forward(g, c_out, w.data(), x.data() + n * g.channels * g.image_volume(), dst,
                           scratch);
    }
  }

  tape.record("conv3d", {input, weight, bias}, out,
              [input, weight, bias, g, batch, c_out](std::span<const T> grad) mutable {
                const std::size_t out_vol = g.column_volume();
                const std::size_t in_vol = g.channels * g.image_volume();
                std::vector<T> scratch;
                if (bias.requires_grad()) {
                  auto gb = bias.grad_buffer();
                  for (std::size_t n = 0; n < batch; ++n) {
                    for (std::size_t co = 0; co < c_out; ++co) {
                      const T* row = grad.data() + (n * c_out + co) * out_vol;
                      T acc = 0;
                      for (std::size_t i = 0; i < out_vol; ++i) acc += row[i];
                      gb[co] += acc;
                    }
                  }
                }
                if (weight.requires_grad()) {
                  auto gw = weight.grad_buffer();
                  auto x = input.data();
                  for (std::size_t n = 0; n < batch; ++n) {
                    conv_weight_grad(g, c_out, grad.data() + n * c_out * out_vol,
                                     x.data() + n * in_vol, gw.data(), scratch);
                  }
                }
                if (input.requires_grad()) {
                  auto gx = input.grad_buffer();
                  auto w = weight.data();
                  for (std::size_t n = 0; n < batch; ++n) {
                    conv_columns_adjoint(g, c_out, w.data(), grad.data() + n * c_out * out_vol,
                                         gx.data() + n * in_vol, scratch);
                  }
                }
              });
  return out;
}

template <typename T>
Tensor<T> conv3d_transpose(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                           const Tensor<T>& bias, int stride) {
  require_volume(input, "conv3d_transpose");
  require(stride == 2, "conv3d_transpose: only stride 2 is supported, got " +
                           std::to_string(stride));
  require(weight.rank() == 5 && weight.dim(2) == 3 && weight.dim(3) == 3 && weight.dim(4) == 3,
          "conv3d_transpose: only 3x3x3 kernels are supported, got weight " +
              shape_str(weight.shape()));
  require(input.dim(1) == weight.dim(0),
          "conv3d_transpose: input has " + std::to_string(input.dim(1)) +
              " channels, weight expects " + std::to_string(weight.dim(0)));
  const std::size_t c_in = weight.dim(0);
  const std::size_t c_out = weight.dim(1);
  require(bias.rank() == 1 && bias.dim(0) == c_out,
          "conv3d_transpose: bias must have shape [" + std::to_string(c_out) + "]");

  // The strided convolution this is the adjoint of maps the (2D, 2H, 2W)
  // output grid onto the input grid.
  ConvGeometry g;
  g.channels = c_out;
  g.dilation = 1;
  g.stride = 2;
  g.padding = {1, 1, 1};
  g.kernel = {3, 3, 3};
  for (int axis = 0; axis < 3; ++axis) {
    g.column[axis] = input.dim(2 + axis);
    g.image[axis] = 2 * input.dim(2 + axis);
  }

  const std::size_t batch = input.dim(0);
  Tensor<T> out({batch, c_out, g.image[0], g.image[1], g.image[2]});
  const std::size_t in_vol = g.column_volume();
  const std::size_t out_vol = g.image_volume();
  std::vector<T> scratch;
  {
    auto o = out.data();
    auto x = input.data();
    auto w = weight.data();
    auto b = bias.data();
    for (std::size_t n = 0; n < batch; ++n) {
      T* dst = o.data() + n * c_out * out_vol;
      conv_columns_adjoint(g, c_in, w.data(), x.data() + n * c_in * in_vol, dst, scratch);
      for (std::size_t co = 0; co < c_out; ++co) {
        for (std::size_t i = 0; i < out_vol; ++i) dst[co * out_vol + i] += b[co];
      }
    }
  }

  tape.record("conv3d_transpose", {input, weight, bias}, out,
              [input, weight, bias, g, batch, c_in, c_out](std::span<const T> grad) mutable {
                const std::size_t in_vol = g.column_volume();
                const std::size_t out_vol = g.image_volume();
                std::vector<T> scratch;
                if (bias.requires_grad()) {
                  auto gb = bias.grad_buffer();
                  for (std::size_t n = 0; n < batch; ++n) {
                    for (std::size_t co = 0; co < c_out; ++co) {
                      const T* row = grad.data() + (n * c_out + co) * out_vol;
                      T acc = 0;
                      for (std::size_t i = 0; i < out_vol; ++i) acc += row[i];
                      gb[co] += acc;
                    }
                  }
                }
                if (weight.requires_grad()) {
                  auto gw = weight.grad_buffer();
                  auto x = input.data();
                  for (std::size_t n = 0; n < batch; ++n) {
                    conv_weight_grad(g, c_in, x.data() + n * c_in * in_vol,
                                     grad.data() + n * c_out * out_vol, gw.data(), scratch);
                  }
                }
                if (input.requires_grad()) {
                  auto gx = input.grad_buffer();
                  auto w = weight.data();
                  for (std::size_t n = 0; n < batch; ++n) {
                    conv_columns_forward(g, c_in, w.data(), grad.data() + n * c_out * out_vol,
                                         gx.data() + n * c_in * in_vol, scratch);
                  }
                }
              });
  return out;
}

template <typename T>
Tensor<T> max_pool3d(Tape<T>& tape, const Tensor<T>& input, int stride) {
  require_volume(input, "max_pool3d");
  require(stride == 2, "max_pool3d: only window 2 / stride 2 is supported");
  const std::size_t n = input.dim(0);
  const std::size_t c = input.dim(1);
  const std::size_t d = input.dim(2);
  const std::size_t h = input.dim(3);
  const std::size_t w = input.dim(4);
  require(d % 2 == 0 && h % 2 == 0 && w % 2 == 0,
          "max_pool3d: spatial extents must be even, got " + shape_str(input.shape()));
  const std::size_t od = d / 2;
  const std::size_t oh = h / 2;
  const std::size_t ow = w / 2;
  Tensor<T> out({n, c, od, oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  auto x = input.data();
  auto o = out.data();
  std::size_t k = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * d * h * w;
    for (std::size_t z = 0; z < od; ++z) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xw = 0; xw < ow; ++xw, ++k) {
          std::size_t best = base + ((2 * z) * h + 2 * y) * w + 2 * xw;
          for (std::size_t dz = 0; dz < 2; ++dz) {
            for (std::size_t dy = 0; dy < 2; ++dy) {
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t idx = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xw + dx;
                if (x[idx] > x[best]) best = idx;
              }
            }
          }
          argmax[k] = best;
          o[k] = x[best];
        }
      }
    }
  }
  tape.record("max_pool3d", {input}, out,
              [input, argmax = std::move(argmax)](std::span<const T> g) mutable {
                auto gx = input.grad_buffer();
                for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
              });
  return out;
}

// ---------------------------------------------------------------------------
// Normalisation, pooling, dense layers, loss
// ---------------------------------------------------------------------------

template <typename T>
BatchNormState<T>::BatchNormState(std::size_t channels)
    : gamma(Tensor<T>::full({channels}, T(1))),
      beta(Shape{channels}),
      running_mean(Shape{channels}),
      running_var(Tensor<T>::full({channels}, T(1))),
      tracked(Shape{1}) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <typename T>
Tensor<T> batch_norm3d(Tape<T>& tape, const Tensor<T>& input, BatchNormState<T>& state) {
  require_feature_map(input, "batch_norm3d");
  const std::size_t n = input.dim(0);
  const std::size_t c = input.dim(1);
  require(c == state.channels(), "batch_norm3d: input has " + std::to_string(c) +
                                     " channels, state has " +
                                     std::to_string(state.channels()));
  const std::size_t s = spatial_size(input.shape());
  const std::size_t count = n * s;
  auto x = input.data();
  Tensor<T> out(input.shape());
  auto o = out.data();
  auto gamma = state.gamma.data();
  auto beta = state.beta.data();

  if (state.mode == Mode::kEval) {
    if (!state.has_statistics()) {
      throw std::logic_error("batch_norm3d: eval mode before any running statistics exist");
    }
    std::vector<T> inv_std(c);
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T(1) / std::sqrt(rv[ch] + state.epsilon);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = (b * c + ch) * s;
        const T mul = gamma[ch] * inv_std[ch];
        const T add = beta[ch] - rm[ch] * mul;
        for (std::size_t i = 0; i < s; ++i) o[base + i] = x[base + i] * mul + add;
      }
    }
    tape.record("batch_norm3d_eval", {input, state.gamma, state.beta}, out,
                [input, gamma_t = state.gamma, beta_t = state.beta, mean = state.running_mean,
                 inv_std = std::move(inv_std), n, c, s](std::span<const T> g) mutable {
                  auto x = input.data();
                  auto gm = gamma_t.data();
                  auto rm = mean.data();
                  const bool want_x = input.requires_grad();
                  std::span<T> gx = want_x ? input.grad_buffer() : std::span<T>{};
                  std::vector<T> dgamma(c, T(0));
                  std::vector<T> dbeta(c, T(0));
                  for (std::size_t b = 0; b < n; ++b) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const std::size_t base = (b * c + ch) * s;
                      for (std::size_t i = 0; i < s; ++i) {
                        dbeta[ch] += g[base + i];
                        dgamma[ch] += g[base + i] * (x[base + i] - rm[ch]) * inv_std[ch];
                        if (want_x) gx[base + i] += g[base + i] * gm[ch] * inv_std[ch];
                      }
                    }
                  }
                  if (gamma_t.requires_grad()) accumulate<T>(gamma_t.grad_buffer(), dgamma);
                  if (beta_t.requires_grad()) accumulate<T>(beta_t.grad_buffer(), dbeta);
                });
    return out;
  }

  std::vector<T> mean(c, T(0));
  std::vector<T> var(c, T(0));
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = x.data() + (b * c + ch) * s;
      for (std::size_t i = 0; i < s; ++i) acc += p[i];
    }
    mean[ch] = acc / T(count);
    T sq = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = x.data() + (b * c + ch) * s;
      for (std::size_t i = 0; i < s; ++i) {
        const T dv = p[i] - mean[ch];
        sq += dv * dv;
      }
    }
    var[ch] = sq / T(count);
  }

  std::vector<T> inv_std(c);
  std::vector<T> xhat(x.size());
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T(1) / std::sqrt(var[ch] + state.epsilon);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * s;
      for (std::size_t i = 0; i < s; ++i) {
        xhat[base + i] = (x[base + i] - mean[ch]) * inv_std[ch];
        o[base + i] = gamma[ch] * xhat[base + i] + beta[ch];
      }
    }
  }

  {
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    const bool first = !state.has_statistics();
    for (std::size_t ch = 0; ch < c; ++ch) {
      if (first) {
        rm[ch] = mean[ch];
        rv[ch] = var[ch];
      } else {
        rm[ch] = state.momentum * rm[ch] + (T(1) - state.momentum) * mean[ch];
        rv[ch] = state.momentum * rv[ch] + (T(1) - state.momentum) * var[ch];
      }
    }
    state.tracked.data()[0] += T(1);
  }

  tape.record("batch_norm3d", {input, state.gamma, state.beta}, out,
              [input, gamma_t = state.gamma, beta_t = state.beta, xhat = std::move(xhat),
               inv_std = std::move(inv_std), n, c, s](std::span<const T> g) mutable {
                const T count = T(n * s);
                auto gm = gamma_t.data();
                std::vector<T> dgamma(c, T(0));
                std::vector<T> dbeta(c, T(0));
                for (std::size_t b = 0; b < n; ++b) {
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t base = (b * c + ch) * s;
                    for (std::size_t i = 0; i < s; ++i) {
                      dbeta[ch] += g[base + i];
                      dgamma[ch] += g[base + i] * xhat[base + i];
                    }
                  }
                }
                if (input.requires_grad()) {
                  auto gx = input.grad_buffer();
                  for (std::size_t b = 0; b < n; ++b) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const std::size_t base = (b * c + ch) * s;
                      // dxhat = g * gamma; sums of dxhat and dxhat * xhat follow from dbeta, dgamma.
                      const T k = gm[ch] * inv_std[ch] / count;
                      for (std::size_t i = 0; i < s; ++i) {
                        gx[base + i] +=
                            k * (count * g[base + i] - dbeta[ch] - xhat[base + i] * dgamma[ch]);
                      }
                    }
                  }
                }
                if (gamma_t.requires_grad()) accumulate<T>(gamma_t.grad_buffer(), dgamma);
                if (beta_t.requires_grad()) accumulate<T>(beta_t.grad_buffer(), dbeta);
              });
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& input) {
  require(input.rank() >= 3, "global_avg_pool: expected (N, C, spatial...) input, got " +
                                 shape_str(input.shape()));
  const std::size_t n = input.dim(0);
  const std::size_t c = input.dim(1);
  const std::size_t s = spatial_size(input.shape());
  Tensor<T> out({n, c});
  auto x = input.data();
  auto o = out.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < s; ++j) acc += x[i * s + j];
    o[i] = acc / T(s);
  }
  tape.record("global_avg_pool", {input}, out, [input, n, c, s](std::span<const T> g) mutable {
    auto gx = input.grad_buffer();
    for (std::size_t i = 0; i < n * c; ++i) {
      const T share = g[i] / T(s);
      for (std::size_t j = 0; j < s; ++j) gx[i * s + j] += share;
    }
  });
  return out;
}

template <typename T>
Tensor<T> fully_connected(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                          const Tensor<T>& bias) {
  require(weight.rank() == 2, "fully_connected: weight must be (out, in), got " +
                                  shape_str(weight.shape()));
  const std::size_t out_dim = weight.dim(0);
  const std::size_t in_dim = weight.dim(1);
  const bool vector_input = input.rank() == 1;
  require(vector_input || input.rank() == 2,
          "fully_connected: input must be (N, in) or (in), got " + shape_str(input.shape()));
  const std::size_t n = vector_input ? 1 : input.dim(0);
  const std::size_t got = vector_input ? input.dim(0) : input.dim(1);
  require(got == in_dim, "fully_connected: input length " + std::to_string(got) +
                             " does not match weight " + shape_str(weight.shape()));
  require(bias.rank() == 1 && bias.dim(0) == out_dim,
          "fully_connected: bias must have shape [" + std::to_string(out_dim) + "], got " +
              shape_str(bias.shape()));

  Tensor<T> out(vector_input ? Shape{out_dim} : Shape{n, out_dim});
  auto x = input.data();
  auto w = weight.data();
  auto b = bias.data();
  auto o = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < out_dim; ++r) {
      T acc = b[r];
      for (std::size_t k = 0; k < in_dim; ++k) acc += w[r * in_dim + k] * x[i * in_dim + k];
      o[i * out_dim + r] = acc;
    }
  }
  tape.record("fully_connected", {input, weight, bias}, out,
              [input, weight, bias, n, in_dim, out_dim](std::span<const T> g) mutable {
                auto x = input.data();
                auto w = weight.data();
                if (input.requires_grad()) {
                  auto gx = input.grad_buffer();
                  for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t r = 0; r < out_dim; ++r) {
                      const T gr = g[i * out_dim + r];
                      for (std::size_t k = 0; k < in_dim; ++k) {
                        gx[i * in_dim + k] += gr * w[r * in_dim + k];
                      }
                    }
                  }
                }
                if (weight.requires_grad()) {
                  auto gw = weight.grad_buffer();
                  for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t r = 0; r < out_dim; ++r) {
                      const T gr = g[i * out_dim + r];
                      for (std::size_t k = 0; k < in_dim; ++k) {
                        gw[r * in_dim + k] += gr * x[i * in_dim + k];
                      }
                    }
                  }
                }
                if (bias.requires_grad()) {
                  auto gb = bias.grad_buffer();
                  for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t r = 0; r < out_dim; ++r) gb[r] += g[i * out_dim + r];
                  }
                }
              });
  return out;
}

template <typename T>
Tensor<T> softmax_cross_entropy_masked(Tape<T>& tape, const Tensor<T>& logits,
                                       std::span<const std::int32_t> labels,
                                       std::span<const std::uint8_t> mask) {
  require(logits.rank() >= 2, "softmax_cross_entropy_masked: expected (N, K, ...) logits, got " +
                                  shape_str(logits.shape()));
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.dim(1);
  const std::size_t s = spatial_size(logits.shape());
  require(labels.size() == n * s && mask.size() == n * s,
          "softmax_cross_entropy_masked: labels/mask need " + std::to_string(n * s) +
              " entries, got " + std::to_string(labels.size()) + "/" +
              std::to_string(mask.size()));

  std::size_t m = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    ++m;
    if (labels[i] < 1 || static_cast<std::size_t>(labels[i]) > k) {
      throw std::invalid_argument("softmax_cross_entropy_masked: label " +
                                  std::to_string(labels[i]) + " at masked voxel " +
                                  std::to_string(i) + " outside 1.." + std::to_string(k));
    }
  }
  if (m == 0) throw std::invalid_argument("softmax_cross_entropy_masked: mask is empty");

  auto z = logits.data();
  T total = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t v = 0; v < s; ++v) {
      if (!mask[b * s + v]) continue;
      const T* base = z.data() + b * k * s + v;
      T peak = base[0];
      for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, base[j * s]);
      T denom = 0;
      for (std::size_t j = 0; j < k; ++j) denom += std::exp(base[j * s] - peak);
      const std::size_t y = static_cast<std::size_t>(labels[b * s + v]) - 1;
      total += std::log(denom) + peak - base[y * s];
    }
  }
  Tensor<T> out = Tensor<T>::scalar(total / T(m));
  tape.record("softmax_cross_entropy_masked", {logits}, out,
              [logits, labels = std::vector<std::int32_t>(labels.begin(), labels.end()),
               mask = std::vector<std::uint8_t>(mask.begin(), mask.end()), n, k, s,
               m](std::span<const T> g) mutable {
                auto z = logits.data();
                auto gz = logits.grad_buffer();
                const T factor = g[0] / T(m);
                std::vector<T> p(k);
                for (std::size_t b = 0; b < n; ++b) {
                  for (std::size_t v = 0; v < s; ++v) {
                    if (!mask[b * s + v]) continue;
                    const std::size_t off = b * k * s + v;
                    T peak = z[off];
                    for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, z[off + j * s]);
                    T denom = 0;
                    for (std::size_t j = 0; j < k; ++j) {
                      p[j] = std::exp(z[off + j * s] - peak);
                      denom += p[j];
                    }
                    const std::size_t y = static_cast<std::size_t>(labels[b * s + v]) - 1;
                    for (std::size_t j = 0; j < k; ++j) {
                      const T target = j == y ? T(1) : T(0);
                      gz[off + j * s] += factor * (p[j] / denom - target);
                    }
                  }
                }
              });
  return out;
}

#define VOXSEG_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                     \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                          \
  template Tensor<T> scale_channels(Tape<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> concat_channels(Tape<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> slice_channels(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);     \
  template Tensor<T> relu(Tape<T>&, const Tensor<T>&);                                         \
  template Tensor<T> sigmoid(Tape<T>&, const Tensor<T>&);                                      \
  template T stable_sigmoid(T);                                                                \
  template struct Conv3dKernel<T>;                                                             \
  template Tensor<T> conv3d(Tape<T>&, const Tensor<T>&, const Conv3dKernel<T>&);               \
  template Tensor<T> conv3d_transpose(Tape<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                      const Tensor<T>&, int);                                  \
  template Tensor<T> max_pool3d(Tape<T>&, const Tensor<T>&, int);                              \
  template struct BatchNormState<T>;                                                           \
  template Tensor<T> batch_norm3d(Tape<T>&, const Tensor<T>&, BatchNormState<T>&);             \
  template Tensor<T> global_avg_pool(Tape<T>&, const Tensor<T>&);                              \
  template Tensor<T> fully_connected(Tape<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                     const Tensor<T>&);                                        \
  template Tensor<T> softmax_cross_entropy_masked(Tape<T>&, const Tensor<T>&,                  \
                                                  std::span<const std::int32_t>,               \
                                                  std::span<const std::uint8_t>);

VOXSEG_INSTANTIATE_OPS(float)
VOXSEG_INSTANTIATE_OPS(double)

#undef VOXSEG_INSTANTIATE_OPS

}  // namespace voxseg
