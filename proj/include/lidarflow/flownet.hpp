#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lidarflow/grid.hpp"
#include "lidarflow/ops.hpp"
#include "lidarflow/tape.hpp"
#include "lidarflow/tensor.hpp"

namespace lidarflow {

// flow: 4 output channels (backward dx, dy, forward dx, dy).
// occupancy: 1 logit channel for the direct next-map baseline.
enum class HeadKind : std::uint8_t { flow = 0, occupancy = 1 };

std::string to_string(HeadKind kind);

inline constexpr int kGruLayers = 3;

struct Architecture {
  int input_channels = 2;   // O and V
  int hidden_channels = 16;
  int filter_size = 3;
  std::array<int, kGruLayers> dilations{1, 2, 4};
  HeadKind head = HeadKind::flow;

  int head_channels() const { return head == HeadKind::flow ? 4 : 1; }
  ConvSpec conv0() const {
    return ConvSpec::same(input_channels, hidden_channels, filter_size, 1, true);
  }
  GruSpec gru(int layer) const {
    return GruSpec{hidden_channels, hidden_channels, filter_size,
                   dilations[static_cast<std::size_t>(layer)]};
  }
  ConvSpec head_conv() const {
    return ConvSpec::same(hidden_channels, head_channels(), filter_size, 1, true);
  }
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

template <typename T>
struct ModelParams {
  Architecture arch;
  Tensor<T> conv0_weight;
  Tensor<T> conv0_bias;
  std::array<GruKernels<T>, kGruLayers> gru;
  Tensor<T> head_weight;
  Tensor<T> head_bias;

  // Stable names ("conv0.weight", "gru1.W_xr", "conv_flow.bias", ...) in a
  // fixed order; the checkpoint and optimizer state follow this order.
  std::vector<std::pair<std::string, Tensor<T>*>> named();
  std::vector<std::pair<std::string, const Tensor<T>*>> named() const;
  std::size_t parameter_count() const;
  bool all_finite() const;

  template <typename U>
  ModelParams<U> cast() const;

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.arch == b.arch && a.conv0_weight == b.conv0_weight && a.conv0_bias == b.conv0_bias &&
           a.head_weight == b.head_weight && a.head_bias == b.head_bias && gru_equal(a, b);
  }

 private:
  static bool gru_equal(const ModelParams& a, const ModelParams& b) {
    for (int l = 0; l < kGruLayers; ++l) {
      const auto& x = a.gru[static_cast<std::size_t>(l)];
      const auto& y = b.gru[static_cast<std::size_t>(l)];
      if (!(x.xf == y.xf && x.yf == y.yf && x.xr == y.xr && x.yr == y.yr && x.xy == y.xy &&
            x.yy == y.yy))
        return false;
    }
    return true;
  }
};

// Uniform in +-1/sqrt(fan_in) per kernel, zero biases; deterministic in seed.
template <typename T>
ModelParams<T> init_params(std::uint64_t seed, const Architecture& arch = Architecture{});

// All-zero parameters of the given architecture.
template <typename T>
ModelParams<T> zero_params(const Architecture& arch = Architecture{});

template <typename T>
struct HiddenState {
  std::array<Tensor<T>, kGruLayers> y;
};

template <typename T>
HiddenState<T> init_hidden(int rows, int cols, std::size_t batch = 1,
                           const Architecture& arch = Architecture{});

// Stacks O and V of each batch member into an N x 2 x H x W tensor.
template <typename T>
Tensor<T> stack_input(const std::vector<const GridPair*>& frames);

template <typename T>
Tensor<T> stack_input(const GridPair& frame) {
  return stack_input<T>(std::vector<const GridPair*>{&frame});
}

template <typename T>
Tensor<T> occupancy_tensor(const BinaryGrid& grid);

template <typename T>
struct StepOutput {
  Tensor<T> output;  // N x head_channels x H x W
  HiddenState<T> hidden;
};

// input: N x 2 x H x W. conv0 -> gru0 (d=1) -> gru1 (d=2) -> gru2 (d=4) -> head.
template <typename T>
StepOutput<T> forward_step(const Tensor<T>& input, const HiddenState<T>& hidden,
                           const ModelParams<T>& params);

// Runs the model over `frames` from a zero hidden state; returns the head
// output of every step.
template <typename T>
std::vector<Tensor<T>> run_sequence(const ModelParams<T>& params, const std::vector<GridPair>& frames);

// ---- taped model ---------------------------------------------------------

template <typename T>
struct ModelVars {
  Var<T> conv0_weight, conv0_bias;
  std::array<GruVars<T>, kGruLayers> gru;
  Var<T> head_weight, head_bias;

  // Same order as ModelParams::named().
  std::vector<Var<T>> list() const;
};

// Registers every parameter as a requires_grad leaf.
template <typename T>
ModelVars<T> bind_params(Tape<T>& tape, const ModelParams<T>& params);

template <typename T>
struct HiddenVars {
  std::array<Var<T>, kGruLayers> y;
};

template <typename T>
HiddenVars<T> bind_hidden(Tape<T>& tape, const HiddenState<T>& hidden);

template <typename T>
struct StepVars {
  Var<T> output;
  HiddenVars<T> hidden;
};

template <typename T>
StepVars<T> forward_step(const Var<T>& input, const HiddenVars<T>& hidden,
                         const ModelVars<T>& params, const Architecture& arch);

// Backward flow (channels 0-1) and forward flow (2-3) of a flow-head output.
template <typename T>
Tensor<T> backward_flow(const Tensor<T>& output);
template <typename T>
Tensor<T> forward_flow(const Tensor<T>& output);

}  // namespace lidarflow
