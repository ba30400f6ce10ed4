#include "lidarflow/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>

namespace lidarflow {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

std::size_t as_size(int v) { return static_cast<std::size_t>(v); }

// Column buffer layout: row (c*k + kh)*k + kw, column oh*Wo + ow.
template <typename T>
void im2col(const T* in, std::size_t channels, std::size_t h, std::size_t w, const ConvSpec& s,
            std::size_t ho, std::size_t wo, T* col) {
  const int k = s.filter_size;
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h);
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = in + c * h * w;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        T* dst = col + ((c * as_size(k) + as_size(kh)) * as_size(k) + as_size(kw)) * ho * wo;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * s.stride - s.padding +
                                    static_cast<std::ptrdiff_t>(kh) * s.dilation;
          T* row = dst + oh * wo;
          if (ih < 0 || ih >= H) {
            std::fill(row, row + wo, T{0});
            continue;
          }
          const T* src_row = src + ih * W;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow) * s.stride - s.padding +
                                      static_cast<std::ptrdiff_t>(kw) * s.dilation;
            row[ow] = (iw >= 0 && iw < W) ? src_row[iw] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w,
                const ConvSpec& s, std::size_t ho, std::size_t wo, T* out) {
  const int k = s.filter_size;
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h);
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < channels; ++c) {
    T* dst = out + c * h * w;
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const T* src =
            col + ((c * as_size(k) + as_size(kh)) * as_size(k) + as_size(kw)) * ho * wo;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * s.stride - s.padding +
                                    static_cast<std::ptrdiff_t>(kh) * s.dilation;
          if (ih < 0 || ih >= H) continue;
          const T* row = src + oh * wo;
          T* dst_row = dst + ih * W;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow) * s.stride - s.padding +
                                      static_cast<std::ptrdiff_t>(kw) * s.dilation;
            if (iw >= 0 && iw < W) dst_row[iw] += row[ow];
          }
        }
      }
    }
  }
}

void check_conv_operands(const Shape& in, const Shape& weight, const Shape* bias,
                         const ConvSpec& spec) {
  spec.validate();
  if (in.c != as_size(spec.in_channels))
    throw DimensionError("conv2d input", "channels", as_size(spec.in_channels), in.c);
  const Shape ws = spec.weight_shape();
  if (weight.n != ws.n) throw DimensionError("conv2d weight", "out_channels", ws.n, weight.n);
  if (weight.c != ws.c) throw DimensionError("conv2d weight", "in_channels", ws.c, weight.c);
  if (weight.h != ws.h) throw DimensionError("conv2d weight", "filter_rows", ws.h, weight.h);
  if (weight.w != ws.w) throw DimensionError("conv2d weight", "filter_cols", ws.w, weight.w);
  if (spec.has_bias != (bias != nullptr)) {
    throw ParameterError(spec.has_bias ? "conv2d: spec requires a bias tensor"
                                       : "conv2d: bias given but spec.has_bias is false");
  }
  if (bias && bias->numel() != as_size(spec.out_channels))
    throw DimensionError("conv2d bias", "out_channels", as_size(spec.out_channels),
                         bias->numel());
  if (spec.output_extent(in.h) == 0) throw DimensionError("conv2d input", "rows", 1, 0);
  if (spec.output_extent(in.w) == 0) throw DimensionError("conv2d input", "cols", 1, 0);
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias,
                         const ConvSpec& spec) {
  const Shape& in = input.shape();
  check_conv_operands(in, weight.shape(), bias ? &bias->shape() : nullptr, spec);
  const std::size_t ho = spec.output_extent(in.h);
  const std::size_t wo = spec.output_extent(in.w);
  const std::size_t kdim = in.c * as_size(spec.filter_size * spec.filter_size);
  const std::size_t cout = as_size(spec.out_channels);
  Tensor<T> out(Shape{in.n, cout, ho, wo});
  AlignedVector<T> col(kdim * ho * wo);
  ConstMapMat<T> wm(weight.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kdim));
  for (std::size_t n = 0; n < in.n; ++n) {
    im2col(input.plane(n, 0), in.c, in.h, in.w, spec, ho, wo, col.data());
    ConstMapMat<T> cm(col.data(), static_cast<Eigen::Index>(kdim),
                      static_cast<Eigen::Index>(ho * wo));
    MapMat<T> om(out.plane(n, 0), static_cast<Eigen::Index>(cout),
                 static_cast<Eigen::Index>(ho * wo));
    om.noalias() = wm * cm;
    if (bias) {
      for (std::size_t o = 0; o < cout; ++o) om.row(static_cast<Eigen::Index>(o)).array() += (*bias)[o];
    }
  }
  return out;
}

// Accumulates gradients of a convolution given dL/dout.
template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, const ConvSpec& spec,
                     const Tensor<T>& grad_out, Tensor<T>* grad_input, Tensor<T>* grad_weight,
                     Tensor<T>* grad_bias) {
  const Shape& in = input.shape();
  const std::size_t ho = grad_out.shape().h;
  const std::size_t wo = grad_out.shape().w;
  const std::size_t kdim = in.c * as_size(spec.filter_size * spec.filter_size);
  const std::size_t cout = as_size(spec.out_channels);
  const auto P = static_cast<Eigen::Index>(ho * wo);
  const auto K = static_cast<Eigen::Index>(kdim);
  const auto O = static_cast<Eigen::Index>(cout);
  AlignedVector<T> col(kdim * ho * wo);
  ConstMapMat<T> wm(weight.data(), O, K);
  for (std::size_t n = 0; n < in.n; ++n) {
    ConstMapMat<T> gm(grad_out.plane(n, 0), O, P);
    if (grad_weight) {
      im2col(input.plane(n, 0), in.c, in.h, in.w, spec, ho, wo, col.data());
      ConstMapMat<T> cm(col.data(), K, P);
      MapMat<T> gw(grad_weight->data(), O, K);
      gw.noalias() += gm * cm.transpose();
    }
    if (grad_bias) {
      for (std::size_t o = 0; o < cout; ++o) (*grad_bias)[o] += gm.row(static_cast<Eigen::Index>(o)).sum();
    }
    if (grad_input) {
      MapMat<T> dcol(col.data(), K, P);
      dcol.noalias() = wm.transpose() * gm;
      col2im_add(col.data(), in.c, in.h, in.w, spec, ho, wo, grad_input->plane(n, 0));
    }
  }
}

// ---- GRU --------------------------------------------------------------------

template <typename T>
T sigmoid_scalar(T v) {
  return T{1} / (T{1} + std::exp(-v));
}

void check_gru_kernel(const char* name, const Shape& s, const ConvSpec& spec) {
  const Shape ws = spec.weight_shape();
  const std::string where = std::string("gru_cell ") + name;
  if (s.n != ws.n) throw DimensionError(where, "out_channels", ws.n, s.n);
  if (s.c != ws.c) throw DimensionError(where, "in_channels", ws.c, s.c);
  if (s.h != ws.h) throw DimensionError(where, "filter_rows", ws.h, s.h);
  if (s.w != ws.w) throw DimensionError(where, "filter_cols", ws.w, s.w);
}

void check_gru_operands(const Shape& x, const Shape& y, const Shape (&kernels)[6],
                        const GruSpec& spec) {
  spec.input_conv().validate();
  if (x.c != as_size(spec.in_channels))
    throw DimensionError("gru_cell x", "channels", as_size(spec.in_channels), x.c);
  if (y.c != as_size(spec.hidden_channels))
    throw DimensionError("gru_cell y_prev", "channels", as_size(spec.hidden_channels), y.c);
  if (y.n != x.n) throw DimensionError("gru_cell y_prev", "batch", x.n, y.n);
  if (y.h != x.h) throw DimensionError("gru_cell y_prev", "rows", x.h, y.h);
  if (y.w != x.w) throw DimensionError("gru_cell y_prev", "cols", x.w, y.w);
  const ConvSpec xs = spec.input_conv();
  const ConvSpec ys = spec.recurrent_conv();
  check_gru_kernel("W_xf", kernels[0], xs);
  check_gru_kernel("W_yf", kernels[1], ys);
  check_gru_kernel("W_xr", kernels[2], xs);
  check_gru_kernel("W_yr", kernels[3], ys);
  check_gru_kernel("W_xy", kernels[4], xs);
  check_gru_kernel("W_yy", kernels[5], ys);
}

// Row-stacks three kernels of identical shape into one (3*out, in*k*k) matrix.
template <typename T>
AlignedVector<T> stack3(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& c) {
  AlignedVector<T> out;
  out.reserve(a.size() * 3);
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  out.insert(out.end(), c.values().begin(), c.values().end());
  return out;
}

// Gate activations kept for the backward pass, each (n, hidden, h, w).
template <typename T>
struct GruSaved {
  Tensor<T> update, reset, recurrent_candidate, candidate;
};

template <typename T>
Tensor<T> gru_forward_impl(const Tensor<T>& x, const Tensor<T>& y, const AlignedVector<T>& wx,
                           const AlignedVector<T>& wy, const GruSpec& spec, GruSaved<T>* saved) {
  const Shape& xs = x.shape();
  const std::size_t hid = as_size(spec.hidden_channels);
  const std::size_t plane = xs.h * xs.w;
  const ConvSpec cx = spec.input_conv();
  const ConvSpec cy = spec.recurrent_conv();
  const std::size_t kx = xs.c * as_size(spec.filter_size * spec.filter_size);
  const std::size_t ky = hid * as_size(spec.filter_size * spec.filter_size);
  const auto P = static_cast<Eigen::Index>(plane);
  const Shape hs{xs.n, hid, xs.h, xs.w};
  Tensor<T> out(hs);
  if (saved) {
    saved->update = Tensor<T>(hs);
    saved->reset = Tensor<T>(hs);
    saved->recurrent_candidate = Tensor<T>(hs);
    saved->candidate = Tensor<T>(hs);
  }
  AlignedVector<T> colx(kx * plane), coly(ky * plane);
  RowMat<T> ax(static_cast<Eigen::Index>(3 * hid), P), ay(static_cast<Eigen::Index>(3 * hid), P);
  ConstMapMat<T> wxm(wx.data(), static_cast<Eigen::Index>(3 * hid), static_cast<Eigen::Index>(kx));
  ConstMapMat<T> wym(wy.data(), static_cast<Eigen::Index>(3 * hid), static_cast<Eigen::Index>(ky));
  for (std::size_t n = 0; n < xs.n; ++n) {
    im2col(x.plane(n, 0), xs.c, xs.h, xs.w, cx, xs.h, xs.w, colx.data());
    im2col(y.plane(n, 0), hid, xs.h, xs.w, cy, xs.h, xs.w, coly.data());
    ax.noalias() = wxm * ConstMapMat<T>(colx.data(), static_cast<Eigen::Index>(kx), P);
    ay.noalias() = wym * ConstMapMat<T>(coly.data(), static_cast<Eigen::Index>(ky), P);
    const T* yp = y.plane(n, 0);
    T* op = out.plane(n, 0);
    for (std::size_t ch = 0; ch < hid; ++ch) {
      const T* axf = ax.data() + ch * plane;
      const T* axr = ax.data() + (hid + ch) * plane;
      const T* axy = ax.data() + (2 * hid + ch) * plane;
      const T* ayf = ay.data() + ch * plane;
      const T* ayr = ay.data() + (hid + ch) * plane;
      const T* ayy = ay.data() + (2 * hid + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = ch * plane + p;
        const T f = sigmoid_scalar(axf[p] + ayf[p]);
        const T r = sigmoid_scalar(axr[p] + ayr[p]);
        const T u = ayy[p];
        const T cand = std::tanh(axy[p] + r * u);
        op[i] = f * yp[i] + (T{1} - f) * cand;
        if (saved) {
          const std::size_t o = n * hid * plane + i;
          saved->update[o] = f;
          saved->reset[o] = r;
          saved->recurrent_candidate[o] = u;
          saved->candidate[o] = cand;
        }
      }
    }
  }
  return out;
}

// ---- warp -------------------------------------------------------------------

void check_warp_operands(const Shape& src, const Shape& flow) {
  if (flow.c != 2) throw DimensionError("bilinear_warp flow", "channels", 2, flow.c);
  if (flow.n != src.n) throw DimensionError("bilinear_warp flow", "batch", src.n, flow.n);
  if (flow.h != src.h) throw DimensionError("bilinear_warp flow", "rows", src.h, flow.h);
  if (flow.w != src.w) throw DimensionError("bilinear_warp flow", "cols", src.w, flow.w);
}

// Bilinear corner indices and weights for one sampling location.
template <typename T>
struct Sample {
  std::ptrdiff_t x0, y0;
  T ax, ay;
};

template <typename T>
Sample<T> locate(std::size_t row, std::size_t col, T dx, T dy) {
  const T x = static_cast<T>(col) + dx;
  const T y = static_cast<T>(row) + dy;
  const T fx = std::floor(x);
  const T fy = std::floor(y);
  return Sample<T>{static_cast<std::ptrdiff_t>(fx), static_cast<std::ptrdiff_t>(fy), x - fx, y - fy};
}

template <typename T>
T at_or_zero(const T* plane, std::ptrdiff_t h, std::ptrdiff_t w, std::ptrdiff_t r,
             std::ptrdiff_t c) {
  return (r >= 0 && r < h && c >= 0 && c < w) ? plane[r * w + c] : T{0};
}

template <typename T>
Tensor<T> warp_forward(const Tensor<T>& source, const Tensor<T>& flow) {
  const Shape& s = source.shape();
  check_warp_operands(s, flow.shape());
  Tensor<T> out(s);
  const auto H = static_cast<std::ptrdiff_t>(s.h);
  const auto W = static_cast<std::ptrdiff_t>(s.w);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* fdx = flow.plane(n, 0);
    const T* fdy = flow.plane(n, 1);
    for (std::size_t i = 0; i < s.h; ++i) {
      for (std::size_t j = 0; j < s.w; ++j) {
        const std::size_t p = i * s.w + j;
        if (!std::isfinite(fdx[p]) || !std::isfinite(fdy[p]))
          throw NumericError("bilinear_warp: non-finite flow");
        const Sample<T> sm = locate<T>(i, j, fdx[p], fdy[p]);
        const T w00 = (T{1} - sm.ax) * (T{1} - sm.ay);
        const T w01 = sm.ax * (T{1} - sm.ay);
        const T w10 = (T{1} - sm.ax) * sm.ay;
        const T w11 = sm.ax * sm.ay;
        for (std::size_t c = 0; c < s.c; ++c) {
          const T* src = source.plane(n, c);
          out.plane(n, c)[p] = w00 * at_or_zero(src, H, W, sm.y0, sm.x0) +
                               w01 * at_or_zero(src, H, W, sm.y0, sm.x0 + 1) +
                               w10 * at_or_zero(src, H, W, sm.y0 + 1, sm.x0) +
                               w11 * at_or_zero(src, H, W, sm.y0 + 1, sm.x0 + 1);
        }
      }
    }
  }
  return out;
}

template <typename T>
void warp_backward(const Tensor<T>& source, const Tensor<T>& flow, const Tensor<T>& grad_out,
                   Tensor<T>* grad_source, Tensor<T>* grad_flow) {
  const Shape& s = source.shape();
  const auto H = static_cast<std::ptrdiff_t>(s.h);
  const auto W = static_cast<std::ptrdiff_t>(s.w);
  auto scatter = [&](T* plane, std::ptrdiff_t r, std::ptrdiff_t c, T v) {
    if (r >= 0 && r < H && c >= 0 && c < W) plane[r * W + c] += v;
  };
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* fdx = flow.plane(n, 0);
    const T* fdy = flow.plane(n, 1);
    for (std::size_t i = 0; i < s.h; ++i) {
      for (std::size_t j = 0; j < s.w; ++j) {
        const std::size_t p = i * s.w + j;
        const Sample<T> sm = locate<T>(i, j, fdx[p], fdy[p]);
        T gdx{0}, gdy{0};
        for (std::size_t c = 0; c < s.c; ++c) {
          const T g = grad_out.plane(n, c)[p];
          if (g == T{0}) continue;
          if (grad_source) {
            T* gs = grad_source->plane(n, c);
            scatter(gs, sm.y0, sm.x0, g * (T{1} - sm.ax) * (T{1} - sm.ay));
            scatter(gs, sm.y0, sm.x0 + 1, g * sm.ax * (T{1} - sm.ay));
            scatter(gs, sm.y0 + 1, sm.x0, g * (T{1} - sm.ax) * sm.ay);
            scatter(gs, sm.y0 + 1, sm.x0 + 1, g * sm.ax * sm.ay);
          }
          if (grad_flow) {
            const T* src = source.plane(n, c);
            const T v00 = at_or_zero(src, H, W, sm.y0, sm.x0);
            const T v01 = at_or_zero(src, H, W, sm.y0, sm.x0 + 1);
            const T v10 = at_or_zero(src, H, W, sm.y0 + 1, sm.x0);
            const T v11 = at_or_zero(src, H, W, sm.y0 + 1, sm.x0 + 1);
            gdx += g * ((T{1} - sm.ay) * (v01 - v00) + sm.ay * (v11 - v10));
            gdy += g * ((T{1} - sm.ax) * (v10 - v00) + sm.ax * (v11 - v01));
          }
        }
        if (grad_flow) {
          grad_flow->plane(n, 0)[p] += gdx;
          grad_flow->plane(n, 1)[p] += gdy;
        }
      }
    }
  }
}

// ---- gaussian ---------------------------------------------------------------

// Zero-padded separable correlation; with a symmetric kernel this is also
// its own adjoint, which the backward pass relies on.
template <typename T>
void separable_blur_add(const Tensor<T>& in, const std::vector<T>& taps, Tensor<T>& out) {
  const Shape& s = in.shape();
  const auto r = static_cast<std::ptrdiff_t>(taps.size() / 2);
  const auto H = static_cast<std::ptrdiff_t>(s.h);
  const auto W = static_cast<std::ptrdiff_t>(s.w);
  AlignedVector<T> tmp(s.plane());
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* src = in.plane(n, c);
      for (std::ptrdiff_t i = 0; i < H; ++i) {
        for (std::ptrdiff_t j = 0; j < W; ++j) {
          T acc{0};
          for (std::ptrdiff_t k = -r; k <= r; ++k) {
            const std::ptrdiff_t jj = j + k;
            if (jj >= 0 && jj < W) acc += taps[static_cast<std::size_t>(k + r)] * src[i * W + jj];
          }
          tmp[static_cast<std::size_t>(i * W + j)] = acc;
        }
      }
      T* dst = out.plane(n, c);
      for (std::ptrdiff_t i = 0; i < H; ++i) {
        for (std::ptrdiff_t j = 0; j < W; ++j) {
          T acc{0};
          for (std::ptrdiff_t k = -r; k <= r; ++k) {
            const std::ptrdiff_t ii = i + k;
            if (ii >= 0 && ii < H) acc += taps[static_cast<std::size_t>(k + r)] * tmp[static_cast<std::size_t>(ii * W + j)];
          }
          dst[i * W + j] += acc;
        }
      }
    }
  }
}

template <typename T>
std::vector<T> typed_taps(int filter_size) {
  const std::vector<double> taps = gaussian_taps(filter_size);
  return std::vector<T>(taps.begin(), taps.end());
}

void check_same(const char* where, const Shape& a, const Shape& b) {
  require_same_shape(where, a, b);
}

}  // namespace

// ---- ConvSpec ----------------------------------------------------------------

void ConvSpec::validate() const {
  if (filter_size < 1 || filter_size % 2 == 0)
    throw ParameterError("ConvSpec: filter_size must be odd and positive, got " +
                         std::to_string(filter_size));
  if (stride < 1) throw ParameterError("ConvSpec: stride must be positive");
  if (dilation < 1) throw ParameterError("ConvSpec: dilation must be positive");
  if (padding < 0) throw ParameterError("ConvSpec: padding must be non-negative");
  if (in_channels < 1 || out_channels < 1)
    throw ParameterError("ConvSpec: channel counts must be positive");
}

std::size_t ConvSpec::output_extent(std::size_t input_extent) const {
  const std::ptrdiff_t span =
      static_cast<std::ptrdiff_t>(input_extent) + 2 * padding - dilation * (filter_size - 1) - 1;
  if (span < 0) return 0;
  return static_cast<std::size_t>(span / stride + 1);
}

double gaussian_sigma(int filter_size) { return filter_size / 4.0; }

std::vector<double> gaussian_taps(int filter_size) {
  if (filter_size < 1 || filter_size % 2 == 0)
    throw ParameterError("gaussian_filter: filter size must be odd and >= 1, got " +
                         std::to_string(filter_size));
  if (filter_size == 1) return {1.0};
  const int r = filter_size / 2;
  const double sigma = gaussian_sigma(filter_size);
  std::vector<double> taps(static_cast<std::size_t>(filter_size));
  double sum = 0.0;
  for (int k = -r; k <= r; ++k) {
    const double v = std::exp(-(k * k) / (2.0 * sigma * sigma));
    taps[static_cast<std::size_t>(k + r)] = v;
    sum += v;
  }
  for (double& v : taps) v /= sum;
  return taps;
}

// ---- pure forward -------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias,
                 const ConvSpec& spec) {
  return conv2d_forward(input, weight, bias, spec);
}

template <typename T>
Tensor<T> gru_cell(const Tensor<T>& x, const Tensor<T>& y_prev, const GruKernels<T>& k,
                   const GruSpec& spec) {
  const Shape shapes[6] = {k.xf.shape(), k.yf.shape(), k.xr.shape(),
                           k.yr.shape(), k.xy.shape(), k.yy.shape()};
  check_gru_operands(x.shape(), y_prev.shape(), shapes, spec);
  return gru_forward_impl(x, y_prev, stack3(k.xf, k.xr, k.xy), stack3(k.yf, k.yr, k.yy), spec,
                          static_cast<GruSaved<T>*>(nullptr));
}

template <typename T>
Tensor<T> bilinear_warp(const Tensor<T>& source, const Tensor<T>& flow) {
  return warp_forward(source, flow);
}

template <typename T>
Tensor<T> gaussian_filter(const Tensor<T>& map, int filter_size) {
  const std::vector<T> taps = typed_taps<T>(filter_size);
  if (filter_size == 1) return map;
  Tensor<T> out(map.shape());
  separable_blur_add(map, taps, out);
  return out;
}

template <typename T>
T mse(const Tensor<T>& a, const Tensor<T>& b) {
  check_same("mse", a.shape(), b.shape());
  T acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T d = a[i] - b[i];
    acc += d * d;
  }
  return acc / static_cast<T>(a.size());
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid_scalar(x[i]);
  return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  return out;
}

// ---- taped ----------------------------------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const std::optional<Var<T>>& bias,
              const ConvSpec& spec) {
  Tape<T>& tape = input.tape();
  Tensor<T> out = conv2d_forward(input.value(), weight.value(), bias ? &bias->value() : nullptr,
                                 spec);
  const std::size_t in_id = input.id();
  const std::size_t w_id = weight.id();
  const std::optional<std::size_t> b_id =
      bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
  auto backward = [in_id, w_id, b_id, spec](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gi = t.requires_grad(in_id) ? &t.grad_accumulator(in_id) : nullptr;
    Tensor<T>* gw = t.requires_grad(w_id) ? &t.grad_accumulator(w_id) : nullptr;
    Tensor<T>* gb = (b_id && t.requires_grad(*b_id)) ? &t.grad_accumulator(*b_id) : nullptr;
    conv2d_backward(t.value(in_id), t.value(w_id), spec, g, gi, gw, gb);
  };
  if (bias) return tape.record(std::move(out), {input, weight, *bias}, backward);
  return tape.record(std::move(out), {input, weight}, backward);
}

template <typename T>
Var<T> gru_cell(const Var<T>& x, const Var<T>& y_prev, const GruVars<T>& k,
                const GruSpec& spec) {
  Tape<T>& tape = x.tape();
  const Shape shapes[6] = {k.xf.shape(), k.yf.shape(), k.xr.shape(),
                           k.yr.shape(), k.xy.shape(), k.yy.shape()};
  check_gru_operands(x.shape(), y_prev.shape(), shapes, spec);
  auto wx = std::make_shared<AlignedVector<T>>(stack3(k.xf.value(), k.xr.value(), k.xy.value()));
  auto wy = std::make_shared<AlignedVector<T>>(stack3(k.yf.value(), k.yr.value(), k.yy.value()));
  auto saved = std::make_shared<GruSaved<T>>();
  Tensor<T> out = gru_forward_impl(x.value(), y_prev.value(), *wx, *wy, spec, saved.get());

  const std::size_t x_id = x.id();
  const std::size_t y_id = y_prev.id();
  const std::size_t wid[6] = {k.xf.id(), k.yf.id(), k.xr.id(), k.yr.id(), k.xy.id(), k.yy.id()};
  auto backward = [=](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(x_id);
    const Tensor<T>& yv = t.value(y_id);
    const Shape& xs = xv.shape();
    const std::size_t hid = static_cast<std::size_t>(spec.hidden_channels);
    const std::size_t plane = xs.h * xs.w;
    const auto P = static_cast<Eigen::Index>(plane);
    const ConvSpec cx = spec.input_conv();
    const ConvSpec cy = spec.recurrent_conv();
    const std::size_t kk = static_cast<std::size_t>(spec.filter_size * spec.filter_size);
    const std::size_t kx = xs.c * kk;
    const std::size_t ky = hid * kk;
    const bool need_x = t.requires_grad(x_id);
    const bool need_y = t.requires_grad(y_id);
    bool need_w[6];
    for (int i = 0; i < 6; ++i) need_w[i] = t.requires_grad(wid[i]);
    const bool need_wx = need_w[0] || need_w[2] || need_w[4];
    const bool need_wy = need_w[1] || need_w[3] || need_w[5];

    RowMat<T> dax(static_cast<Eigen::Index>(3 * hid), P), day(static_cast<Eigen::Index>(3 * hid), P);
    RowMat<T> gwx = RowMat<T>::Zero(static_cast<Eigen::Index>(3 * hid), static_cast<Eigen::Index>(kx));
    RowMat<T> gwy = RowMat<T>::Zero(static_cast<Eigen::Index>(3 * hid), static_cast<Eigen::Index>(ky));
    AlignedVector<T> colx(kx * plane), coly(ky * plane);
    ConstMapMat<T> wxm(wx->data(), static_cast<Eigen::Index>(3 * hid), static_cast<Eigen::Index>(kx));
    ConstMapMat<T> wym(wy->data(), static_cast<Eigen::Index>(3 * hid), static_cast<Eigen::Index>(ky));
    Tensor<T>* gx = need_x ? &t.grad_accumulator(x_id) : nullptr;
    Tensor<T>* gy = need_y ? &t.grad_accumulator(y_id) : nullptr;

    for (std::size_t n = 0; n < xs.n; ++n) {
      const T* yp = yv.plane(n, 0);
      const T* gp = g.plane(n, 0);
      const std::size_t base = n * hid * plane;
      for (std::size_t ch = 0; ch < hid; ++ch) {
        T* daf = dax.data() + ch * plane;
        T* dar = dax.data() + (hid + ch) * plane;
        T* dah = dax.data() + (2 * hid + ch) * plane;
        T* dyf = day.data() + ch * plane;
        T* dyr = day.data() + (hid + ch) * plane;
        T* dyu = day.data() + (2 * hid + ch) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t i = ch * plane + p;
          const T f = saved->update[base + i];
          const T r = saved->reset[base + i];
          const T u = saved->recurrent_candidate[base + i];
          const T c = saved->candidate[base + i];
          const T go = gp[i];
          const T d_cand_pre = go * (T{1} - f) * (T{1} - c * c);
          const T d_f_pre = go * (yp[i] - c) * f * (T{1} - f);
          const T d_r_pre = d_cand_pre * u * r * (T{1} - r);
          daf[p] = d_f_pre;
          dar[p] = d_r_pre;
          dah[p] = d_cand_pre;
          dyf[p] = d_f_pre;
          dyr[p] = d_r_pre;
          dyu[p] = d_cand_pre * r;
          if (gy) gy->plane(n, 0)[i] += go * f;
        }
      }
      if (need_wx || gx) {
        if (need_wx) {
          im2col(xv.plane(n, 0), xs.c, xs.h, xs.w, cx, xs.h, xs.w, colx.data());
          gwx.noalias() += dax * ConstMapMat<T>(colx.data(), static_cast<Eigen::Index>(kx), P).transpose();
        }
        if (gx) {
          MapMat<T> dcol(colx.data(), static_cast<Eigen::Index>(kx), P);
          dcol.noalias() = wxm.transpose() * dax;
          col2im_add(colx.data(), xs.c, xs.h, xs.w, cx, xs.h, xs.w, gx->plane(n, 0));
        }
      }
      if (need_wy || gy) {
        if (need_wy) {
          im2col(yv.plane(n, 0), hid, xs.h, xs.w, cy, xs.h, xs.w, coly.data());
          gwy.noalias() += day * ConstMapMat<T>(coly.data(), static_cast<Eigen::Index>(ky), P).transpose();
        }
        if (gy) {
          MapMat<T> dcol(coly.data(), static_cast<Eigen::Index>(ky), P);
          dcol.noalias() = wym.transpose() * day;
          col2im_add(coly.data(), hid, xs.h, xs.w, cy, xs.h, xs.w, gy->plane(n, 0));
        }
      }
    }
    // Split stacked gradients back into the six kernels: x rows are
    // (f, r, y) and y rows are (f, r, y).
    const std::size_t bx = hid * kx;
    const std::size_t by = hid * ky;
    const int x_order[3] = {0, 2, 4};
    const int y_order[3] = {1, 3, 5};
    for (int part = 0; part < 3; ++part) {
      if (need_w[x_order[part]]) {
        Tensor<T>& dst = t.grad_accumulator(wid[x_order[part]]);
        const T* src = gwx.data() + static_cast<std::size_t>(part) * bx;
        for (std::size_t i = 0; i < bx; ++i) dst[i] += src[i];
      }
      if (need_w[y_order[part]]) {
        Tensor<T>& dst = t.grad_accumulator(wid[y_order[part]]);
        const T* src = gwy.data() + static_cast<std::size_t>(part) * by;
        for (std::size_t i = 0; i < by; ++i) dst[i] += src[i];
      }
    }
  };
  return tape.record(std::move(out), {x, y_prev, k.xf, k.yf, k.xr, k.yr, k.xy, k.yy}, backward);
}

template <typename T>
Var<T> bilinear_warp(const Var<T>& source, const Var<T>& flow) {
  Tensor<T> out = warp_forward(source.value(), flow.value());
  const std::size_t s_id = source.id();
  const std::size_t f_id = flow.id();
  return source.tape().record(std::move(out), {source, flow}, [s_id, f_id](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>* gs = t.requires_grad(s_id) ? &t.grad_accumulator(s_id) : nullptr;
    Tensor<T>* gf = t.requires_grad(f_id) ? &t.grad_accumulator(f_id) : nullptr;
    warp_backward(t.value(s_id), t.value(f_id), g, gs, gf);
  });
}

template <typename T>
Var<T> gaussian_filter(const Var<T>& map, int filter_size) {
  const std::vector<T> taps = typed_taps<T>(filter_size);
  Tensor<T> out(map.shape());
  if (filter_size == 1) {
    out = map.value();
  } else {
    separable_blur_add(map.value(), taps, out);
  }
  const std::size_t id = map.id();
  return map.tape().record(std::move(out), {map}, [id, taps](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gi = t.grad_accumulator(id);
    if (taps.size() == 1) {
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    } else {
      separable_blur_add(g, taps, gi);
    }
  });
}

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  const T value = mse(a.value(), b.value());
  const std::size_t a_id = a.id();
  const std::size_t b_id = b.id();
  return a.tape().record(Tensor<T>::scalar(value), {a, b}, [a_id, b_id](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& av = t.value(a_id);
    const Tensor<T>& bv = t.value(b_id);
    const T k = T{2} * g[0] / static_cast<T>(av.size());
    if (t.requires_grad(a_id)) {
      Tensor<T>& ga = t.grad_accumulator(a_id);
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += k * (av[i] - bv[i]);
    }
    if (t.requires_grad(b_id)) {
      Tensor<T>& gb = t.grad_accumulator(b_id);
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= k * (av[i] - bv[i]);
    }
  });
}

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Var<T>& target) {
  const Tensor<T>& z = logits.value();
  const Tensor<T>& y = target.value();
  check_same("bce_with_logits", z.shape(), y.shape());
  T acc{0};
  for (std::size_t i = 0; i < z.size(); ++i) {
    // softplus(z) - y z, evaluated stably
    const T zi = z[i];
    const T softplus = std::max(zi, T{0}) + std::log1p(std::exp(-std::abs(zi)));
    acc += softplus - y[i] * zi;
  }
  const T value = acc / static_cast<T>(z.size());
  const std::size_t z_id = logits.id();
  const std::size_t y_id = target.id();
  return logits.tape().record(Tensor<T>::scalar(value), {logits, target}, [z_id, y_id](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& zv = t.value(z_id);
    const Tensor<T>& yv = t.value(y_id);
    const T k = g[0] / static_cast<T>(zv.size());
    if (t.requires_grad(z_id)) {
      Tensor<T>& gz = t.grad_accumulator(z_id);
      for (std::size_t i = 0; i < zv.size(); ++i) gz[i] += k * (sigmoid_scalar(zv[i]) - yv[i]);
    }
    if (t.requires_grad(y_id)) {
      Tensor<T>& gy = t.grad_accumulator(y_id);
      for (std::size_t i = 0; i < zv.size(); ++i) gy[i] -= k * zv[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = sigmoid(x.value());
  const std::size_t id = x.id();
  Tape<T>& tape = x.tape();
  const std::size_t out_id = tape.size();
  return tape.record(std::move(out), {x}, [id, out_id](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& s = t.value(out_id);
    Tensor<T>& gi = t.grad_accumulator(id);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * s[i] * (T{1} - s[i]);
  });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  Tensor<T> out = tanh(x.value());
  const std::size_t id = x.id();
  Tape<T>& tape = x.tape();
  const std::size_t out_id = tape.size();
  return tape.record(std::move(out), {x}, [id, out_id](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& s = t.value(out_id);
    Tensor<T>& gi = t.grad_accumulator(id);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * (T{1} - s[i] * s[i]);
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same("add", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  const std::size_t a_id = a.id();
  const std::size_t b_id = b.id();
  return a.tape().record(std::move(out), {a, b}, [a_id, b_id](Tape<T>& t, const Tensor<T>& g) {
    for (std::size_t id : {a_id, b_id}) {
      if (!t.requires_grad(id)) continue;
      Tensor<T>& gi = t.grad_accumulator(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same("sub", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  const std::size_t a_id = a.id();
  const std::size_t b_id = b.id();
  return a.tape().record(std::move(out), {a, b}, [a_id, b_id](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(a_id)) {
      Tensor<T>& ga = t.grad_accumulator(a_id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b_id)) {
      Tensor<T>& gb = t.grad_accumulator(b_id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same("mul", a.shape(), b.shape());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  const std::size_t a_id = a.id();
  const std::size_t b_id = b.id();
  return a.tape().record(std::move(out), {a, b}, [a_id, b_id](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& av = t.value(a_id);
    const Tensor<T>& bv = t.value(b_id);
    if (t.requires_grad(a_id)) {
      Tensor<T>& ga = t.grad_accumulator(a_id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b_id)) {
      Tensor<T>& gb = t.grad_accumulator(b_id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * factor;
  const std::size_t id = a.id();
  return a.tape().record(std::move(out), {a}, [id, factor](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gi = t.grad_accumulator(id);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts) {
  if (parts.empty()) throw UsageError("concat_channels: no inputs");
  const Shape first = parts.front().shape();
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.n != first.n) throw DimensionError("concat_channels", "batch", first.n, s.n);
    if (s.h != first.h) throw DimensionError("concat_channels", "rows", first.h, s.h);
    if (s.w != first.w) throw DimensionError("concat_channels", "cols", first.w, s.w);
    channels += s.c;
  }
  Tensor<T> out(Shape{first.n, channels, first.h, first.w});
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor<T>& v = p.value();
    for (std::size_t n = 0; n < first.n; ++n) {
      std::copy_n(v.plane(n, 0), v.shape().c * first.plane(), out.plane(n, off));
    }
    ids.push_back(p.id());
    offsets.push_back(off);
    off += v.shape().c;
  }
  const std::size_t plane = first.plane();
  return parts.front().tape().record_range(std::move(out), parts, [ids, offsets, plane](Tape<T>& t, const Tensor<T>& g) {
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor<T>& gi = t.grad_accumulator(ids[k]);
      const std::size_t c = gi.shape().c;
      for (std::size_t n = 0; n < gi.shape().n; ++n) {
        const T* src = g.plane(n, offsets[k]);
        T* dst = gi.plane(n, 0);
        for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  const Shape& s = x.shape();
  if (begin + count > s.c) throw DimensionError("slice_channels", "channels", s.c, begin + count);
  Tensor<T> out(Shape{s.n, count, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n)
    std::copy_n(x.value().plane(n, begin), count * s.plane(), out.plane(n, 0));
  const std::size_t id = x.id();
  return x.tape().record(std::move(out), {x}, [id, begin, count](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& gi = t.grad_accumulator(id);
    const std::size_t plane = gi.shape().plane();
    for (std::size_t n = 0; n < gi.shape().n; ++n) {
      const T* src = g.plane(n, 0);
      T* dst = gi.plane(n, begin);
      for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> mean_of(std::span<const Var<T>> scalars) {
  if (scalars.empty()) throw UsageError("mean_of: no inputs");
  T acc{0};
  std::vector<std::size_t> ids;
  for (const auto& s : scalars) {
    if (s.value().size() != 1) throw UsageError("mean_of: inputs must be scalars");
    acc += s.value()[0];
    ids.push_back(s.id());
  }
  const T inv = T{1} / static_cast<T>(scalars.size());
  return scalars.front().tape().record_range(Tensor<T>::scalar(acc * inv), scalars, [ids, inv](Tape<T>& t, const Tensor<T>& g) {
    for (std::size_t id : ids) {
      if (t.requires_grad(id)) t.grad_accumulator(id)[0] += g[0] * inv;
    }
  });
}

#define LIDARFLOW_INSTANTIATE_OPS(T)                                                           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,              \
                            const ConvSpec&);                                                  \
  template Tensor<T> gru_cell(const Tensor<T>&, const Tensor<T>&, const GruKernels<T>&,        \
                              const GruSpec&);                                                 \
  template Tensor<T> bilinear_warp(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> gaussian_filter(const Tensor<T>&, int);                                   \
  template T mse(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> tanh(const Tensor<T>&);                                                   \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&,           \
                         const ConvSpec&);                                                     \
  template Var<T> gru_cell(const Var<T>&, const Var<T>&, const GruVars<T>&, const GruSpec&);   \
  template Var<T> bilinear_warp(const Var<T>&, const Var<T>&);                                 \
  template Var<T> gaussian_filter(const Var<T>&, int);                                         \
  template Var<T> mse(const Var<T>&, const Var<T>&);                                           \
  template Var<T> bce_with_logits(const Var<T>&, const Var<T>&);                               \
  template Var<T> sigmoid(const Var<T>&);                                                      \
  template Var<T> tanh(const Var<T>&);                                                         \
  template Var<T> add(const Var<T>&, const Var<T>&);                                           \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                           \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                           \
  template Var<T> scale(const Var<T>&, T);                                                     \
  template Var<T> concat_channels(std::span<const Var<T>>);                                    \
  template Var<T> slice_channels(const Var<T>&, std::size_t, std::size_t);                     \
  template Var<T> mean_of(std::span<const Var<T>>);

LIDARFLOW_INSTANTIATE_OPS(float)
LIDARFLOW_INSTANTIATE_OPS(double)

#undef LIDARFLOW_INSTANTIATE_OPS

}  // namespace lidarflow
