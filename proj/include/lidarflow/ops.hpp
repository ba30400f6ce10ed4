#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "lidarflow/tape.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

// Geometry of a square-kernel 2-D convolution.
struct ConvSpec {
  int filter_size = 3;
  int stride = 1;
  int dilation = 1;
  int padding = 1;
  int in_channels = 1;
  int out_channels = 1;
  bool has_bias = false;

  // Stride 1 with padding chosen so the output keeps the input's spatial size.
  static ConvSpec same(int in_channels, int out_channels, int filter_size, int dilation,
                       bool has_bias) {
    return ConvSpec{filter_size, 1, dilation, dilation * (filter_size - 1) / 2,
                    in_channels, out_channels, has_bias};
  }

  void validate() const;
  std::size_t output_extent(std::size_t input_extent) const;
  Shape weight_shape() const {
    return Shape{static_cast<std::size_t>(out_channels), static_cast<std::size_t>(in_channels),
                 static_cast<std::size_t>(filter_size), static_cast<std::size_t>(filter_size)};
  }
  Shape bias_shape() const { return Shape{1, static_cast<std::size_t>(out_channels), 1, 1}; }
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

// A convolutional GRU layer: input and recurrent kernels share filter size
// and dilation, stride is 1 and padding preserves the spatial size.
struct GruSpec {
  int in_channels = 16;
  int hidden_channels = 16;
  int filter_size = 3;
  int dilation = 1;

  ConvSpec input_conv() const {
    return ConvSpec::same(in_channels, hidden_channels, filter_size, dilation, false);
  }
  ConvSpec recurrent_conv() const {
    return ConvSpec::same(hidden_channels, hidden_channels, filter_size, dilation, false);
  }
};

// Update gate (f), reset gate (r) and candidate (y) kernels for the input x
// and the previous output y. No biases.
template <typename T>
struct GruKernels {
  Tensor<T> xf, yf, xr, yr, xy, yy;
};

template <typename T>
struct GruVars {
  Var<T> xf, yf, xr, yr, xy, yy;
};

// ---- pure forward functions -------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias,
                 const ConvSpec& spec);

template <typename T>
Tensor<T> gru_cell(const Tensor<T>& x, const Tensor<T>& y_prev, const GruKernels<T>& kernels,
                   const GruSpec& spec);

// output(n,c,i,j) = source(n,c) sampled bilinearly at (row i + dy, col j + dx)
// with flow channel 0 = dx, channel 1 = dy. Samples outside the grid read 0.
template <typename T>
Tensor<T> bilinear_warp(const Tensor<T>& source, const Tensor<T>& flow);

// Separable, normalized, zero-padded Gaussian blur with f x f support.
template <typename T>
Tensor<T> gaussian_filter(const Tensor<T>& map, int filter_size);

template <typename T>
T mse(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

template <typename T>
Tensor<T> tanh(const Tensor<T>& x);

// Standard deviation (in cells) used for a Gaussian of support f.
double gaussian_sigma(int filter_size);

// 1-D taps of length f, summing to 1. Throws ParameterError unless f is odd and >= 1.
std::vector<double> gaussian_taps(int filter_size);

// ---- taped operations -------------------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const std::optional<Var<T>>& bias,
              const ConvSpec& spec);

template <typename T>
Var<T> gru_cell(const Var<T>& x, const Var<T>& y_prev, const GruVars<T>& kernels,
                const GruSpec& spec);

template <typename T>
Var<T> bilinear_warp(const Var<T>& source, const Var<T>& flow);

template <typename T>
Var<T> gaussian_filter(const Var<T>& map, int filter_size);

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b);

// Mean over cells of the binary cross entropy between sigmoid(logits) and target.
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Var<T>& target);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

template <typename T>
Var<T> tanh(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, T factor);

// Stacks along the channel axis; all parts share batch and spatial dims.
template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts);

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count);

// Mean of scalar nodes.
template <typename T>
Var<T> mean_of(std::span<const Var<T>> scalars);

}  // namespace lidarflow
