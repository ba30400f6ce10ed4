#include "lidarflow/flownet.hpp"

#include <cmath>
#include <random>

namespace lidarflow {
namespace {

const char* kGruNames[6] = {"W_xf", "W_yf", "W_xr", "W_yr", "W_xy", "W_yy"};

template <typename K>
auto gru_members(K& k) {
  return std::array{&k.xf, &k.yf, &k.xr, &k.yr, &k.xy, &k.yy};
}

std::string head_name(HeadKind kind) {
  return kind == HeadKind::flow ? "conv_flow" : "conv_occupancy";
}

template <typename T>
Tensor<T> uniform_kernel(const Shape& shape, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape.c * shape.h * shape.w));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
ModelParams<T> shaped_params(const Architecture& arch) {
  ModelParams<T> p;
  p.arch = arch;
  p.conv0_weight = Tensor<T>(arch.conv0().weight_shape());
  p.conv0_bias = Tensor<T>(arch.conv0().bias_shape());
  for (int l = 0; l < kGruLayers; ++l) {
    const GruSpec g = arch.gru(l);
    auto& k = p.gru[static_cast<std::size_t>(l)];
    for (Tensor<T>* t : {&k.xf, &k.xr, &k.xy}) *t = Tensor<T>(g.input_conv().weight_shape());
    for (Tensor<T>* t : {&k.yf, &k.yr, &k.yy}) *t = Tensor<T>(g.recurrent_conv().weight_shape());
  }
  p.head_weight = Tensor<T>(arch.head_conv().weight_shape());
  p.head_bias = Tensor<T>(arch.head_conv().bias_shape());
  return p;
}

void check_arch(const Architecture& arch) {
  if (arch.input_channels <= 0 || arch.hidden_channels <= 0)
    throw ParameterError("Architecture: channel counts must be positive");
  arch.conv0().validate();
  arch.head_conv().validate();
  for (int l = 0; l < kGruLayers; ++l) arch.gru(l).input_conv().validate();
}

template <typename T>
Tensor<T> channel_slice(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const Shape s = x.shape();
  if (begin + count > s.c) throw DimensionError("channel_slice", "channels", begin + count, s.c);
  Tensor<T> out(Shape{s.n, count, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n)
    std::copy_n(x.plane(n, begin), count * s.plane(), out.plane(n, 0));
  return out;
}

}  // namespace

std::string to_string(HeadKind kind) { return kind == HeadKind::flow ? "flow" : "occupancy"; }

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ModelParams<T>::named() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  out.emplace_back("conv0.weight", &conv0_weight);
  out.emplace_back("conv0.bias", &conv0_bias);
  for (int l = 0; l < kGruLayers; ++l) {
    auto members = gru_members(gru[static_cast<std::size_t>(l)]);
    for (int m = 0; m < 6; ++m)
      out.emplace_back("gru" + std::to_string(l) + "." + kGruNames[m], members[static_cast<std::size_t>(m)]);
  }
  out.emplace_back(head_name(arch.head) + ".weight", &head_weight);
  out.emplace_back(head_name(arch.head) + ".bias", &head_bias);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> ModelParams<T>::named() const {
  auto mut = const_cast<ModelParams*>(this)->named();
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  out.reserve(mut.size());
  for (auto& [name, t] : mut) out.emplace_back(name, t);
  return out;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t->size();
  return n;
}

template <typename T>
bool ModelParams<T>::all_finite() const {
  for (const auto& [name, t] : named())
    for (T v : t->values())
      if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out = shaped_params<U>(arch);
  auto dst = out.named();
  auto src = named();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<U>();
  return out;
}

template <typename T>
ModelParams<T> init_params(std::uint64_t seed, const Architecture& arch) {
  check_arch(arch);
  ModelParams<T> p = shaped_params<T>(arch);
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : p.named()) {
    if (name.ends_with(".bias")) continue;
    *t = uniform_kernel<T>(t->shape(), rng);
  }
  return p;
}

template <typename T>
ModelParams<T> zero_params(const Architecture& arch) {
  check_arch(arch);
  return shaped_params<T>(arch);
}

template <typename T>
HiddenState<T> init_hidden(int rows, int cols, std::size_t batch, const Architecture& arch) {
  if (rows <= 0 || cols <= 0) throw ParameterError("init_hidden: dimensions must be positive");
  HiddenState<T> h;
  for (auto& y : h.y)
    y = Tensor<T>(Shape{batch, static_cast<std::size_t>(arch.hidden_channels),
                        static_cast<std::size_t>(rows), static_cast<std::size_t>(cols)});
  return h;
}

template <typename T>
Tensor<T> stack_input(const std::vector<const GridPair*>& frames) {
  if (frames.empty()) throw ParameterError("stack_input: no frames");
  const int rows = frames.front()->occupancy.rows;
  const int cols = frames.front()->occupancy.cols;
  Tensor<T> out(Shape{frames.size(), 2, static_cast<std::size_t>(rows), static_cast<std::size_t>(cols)});
  for (std::size_t n = 0; n < frames.size(); ++n) {
    const GridPair& f = *frames[n];
    if (f.occupancy.rows != rows || f.visibility.rows != rows)
      throw DimensionError("stack_input", "rows", static_cast<std::size_t>(rows),
                           static_cast<std::size_t>(f.occupancy.rows));
    if (f.occupancy.cols != cols || f.visibility.cols != cols)
      throw DimensionError("stack_input", "cols", static_cast<std::size_t>(cols),
                           static_cast<std::size_t>(f.occupancy.cols));
    T* o = out.plane(n, 0);
    T* v = out.plane(n, 1);
    for (std::size_t i = 0; i < f.occupancy.size(); ++i) {
      o[i] = static_cast<T>(f.occupancy.cells[i]);
      v[i] = static_cast<T>(f.visibility.cells[i]);
    }
  }
  return out;
}

template <typename T>
Tensor<T> occupancy_tensor(const BinaryGrid& grid) {
  Tensor<T> out(Shape{1, 1, static_cast<std::size_t>(grid.rows), static_cast<std::size_t>(grid.cols)});
  for (std::size_t i = 0; i < grid.size(); ++i) out[i] = static_cast<T>(grid.cells[i]);
  return out;
}

template <typename T>
StepOutput<T> forward_step(const Tensor<T>& input, const HiddenState<T>& hidden,
                           const ModelParams<T>& params) {
  const Architecture& arch = params.arch;
  if (input.shape().c != static_cast<std::size_t>(arch.input_channels))
    throw DimensionError("forward_step", "channels", static_cast<std::size_t>(arch.input_channels),
                         input.shape().c);
  StepOutput<T> out;
  Tensor<T> x = conv2d(input, params.conv0_weight, &params.conv0_bias, arch.conv0());
  for (int l = 0; l < kGruLayers; ++l) {
    const auto i = static_cast<std::size_t>(l);
    x = gru_cell(x, hidden.y[i], params.gru[i], arch.gru(l));
    out.hidden.y[i] = x;
  }
  out.output = conv2d(x, params.head_weight, &params.head_bias, arch.head_conv());
  return out;
}

template <typename T>
std::vector<Tensor<T>> run_sequence(const ModelParams<T>& params, const std::vector<GridPair>& frames) {
  std::vector<Tensor<T>> outputs;
  if (frames.empty()) return outputs;
  HiddenState<T> h = init_hidden<T>(frames.front().occupancy.rows, frames.front().occupancy.cols, 1,
                                    params.arch);
  outputs.reserve(frames.size());
  for (const GridPair& f : frames) {
    StepOutput<T> step = forward_step(stack_input<T>(f), h, params);
    h = std::move(step.hidden);
    outputs.push_back(std::move(step.output));
  }
  return outputs;
}

template <typename T>
std::vector<Var<T>> ModelVars<T>::list() const {
  std::vector<Var<T>> out{conv0_weight, conv0_bias};
  for (const auto& g : gru) {
    for (const Var<T>& v : {g.xf, g.yf, g.xr, g.yr, g.xy, g.yy}) out.push_back(v);
  }
  out.push_back(head_weight);
  out.push_back(head_bias);
  return out;
}

template <typename T>
ModelVars<T> bind_params(Tape<T>& tape, const ModelParams<T>& params) {
  auto leaf = [&](const Tensor<T>& t) {
    Tensor<T> copy = t;
    copy.set_requires_grad(true);
    return tape.leaf(std::move(copy));
  };
  ModelVars<T> v;
  v.conv0_weight = leaf(params.conv0_weight);
  v.conv0_bias = leaf(params.conv0_bias);
  for (std::size_t l = 0; l < v.gru.size(); ++l) {
    const auto& k = params.gru[l];
    v.gru[l] = GruVars<T>{leaf(k.xf), leaf(k.yf), leaf(k.xr), leaf(k.yr), leaf(k.xy), leaf(k.yy)};
  }
  v.head_weight = leaf(params.head_weight);
  v.head_bias = leaf(params.head_bias);
  return v;
}

template <typename T>
HiddenVars<T> bind_hidden(Tape<T>& tape, const HiddenState<T>& hidden) {
  HiddenVars<T> h;
  for (std::size_t l = 0; l < h.y.size(); ++l) h.y[l] = tape.constant(hidden.y[l]);
  return h;
}

template <typename T>
StepVars<T> forward_step(const Var<T>& input, const HiddenVars<T>& hidden,
                         const ModelVars<T>& params, const Architecture& arch) {
  if (input.shape().c != static_cast<std::size_t>(arch.input_channels))
    throw DimensionError("forward_step", "channels", static_cast<std::size_t>(arch.input_channels),
                         input.shape().c);
  StepVars<T> out;
  Var<T> x = conv2d(input, params.conv0_weight, std::optional<Var<T>>(params.conv0_bias), arch.conv0());
  for (int l = 0; l < kGruLayers; ++l) {
    const auto i = static_cast<std::size_t>(l);
    x = gru_cell(x, hidden.y[i], params.gru[i], arch.gru(l));
    out.hidden.y[i] = x;
  }
  out.output = conv2d(x, params.head_weight, std::optional<Var<T>>(params.head_bias), arch.head_conv());
  return out;
}

template <typename T>
Tensor<T> backward_flow(const Tensor<T>& output) {
  return channel_slice(output, 0, 2);
}

template <typename T>
Tensor<T> forward_flow(const Tensor<T>& output) {
  return channel_slice(output, 2, 2);
}

#define LIDARFLOW_INSTANTIATE_FLOWNET(T)                                                        \
  template struct ModelParams<T>;                                                               \
  template ModelParams<T> init_params<T>(std::uint64_t, const Architecture&);                   \
  template ModelParams<T> zero_params<T>(const Architecture&);                                  \
  template HiddenState<T> init_hidden<T>(int, int, std::size_t, const Architecture&);           \
  template Tensor<T> stack_input<T>(const std::vector<const GridPair*>&);                       \
  template Tensor<T> occupancy_tensor<T>(const BinaryGrid&);                                    \
  template StepOutput<T> forward_step<T>(const Tensor<T>&, const HiddenState<T>&,               \
                                         const ModelParams<T>&);                                \
  template std::vector<Tensor<T>> run_sequence<T>(const ModelParams<T>&,                     \
                                                 const std::vector<GridPair>&);                \
  template struct ModelVars<T>;                                                                 \
  template ModelVars<T> bind_params<T>(Tape<T>&, const ModelParams<T>&);                        \
  template HiddenVars<T> bind_hidden<T>(Tape<T>&, const HiddenState<T>&);                       \
  template StepVars<T> forward_step<T>(const Var<T>&, const HiddenVars<T>&, const ModelVars<T>&, \
                                       const Architecture&);                                    \
  template Tensor<T> backward_flow<T>(const Tensor<T>&);                                        \
  template Tensor<T> forward_flow<T>(const Tensor<T>&);

LIDARFLOW_INSTANTIATE_FLOWNET(float)
LIDARFLOW_INSTANTIATE_FLOWNET(double)

template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;

}  // namespace lidarflow
