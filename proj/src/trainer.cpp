#include "lidarflow/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <type_traits>

#include "lidarflow/ops.hpp"
#include "lidarflow/parallel.hpp"

namespace lidarflow {
namespace {

void check_frames(const std::vector<GridPair>& frames, int warmup_frames) {
  if (warmup_frames < 0) throw ParameterError("sequence loss: warmup_frames must be >= 0");
  if (static_cast<int>(frames.size()) < warmup_frames + 2)
    throw ParameterError("sequence loss: " + std::to_string(frames.size()) +
                         " frames leave no supervised step after " + std::to_string(warmup_frames) +
                         " warm-up frames");
}

template <typename T>
std::vector<Var<T>> occupancy_constants(Tape<T>& tape, const std::vector<GridPair>& frames) {
  std::vector<Var<T>> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(tape.constant(occupancy_tensor<T>(f.occupancy)));
  return out;
}

// Runs the taped model over every frame; returns each step's head output.
template <typename T>
std::vector<Var<T>> taped_outputs(Tape<T>& tape, const ModelVars<T>& params, const Architecture& arch,
                                  const std::vector<GridPair>& frames) {
  const int rows = frames.front().occupancy.rows;
  const int cols = frames.front().occupancy.cols;
  HiddenVars<T> h = bind_hidden(tape, init_hidden<T>(rows, cols, 1, arch));
  std::vector<Var<T>> outputs;
  outputs.reserve(frames.size());
  for (const auto& f : frames) {
    StepVars<T> step = forward_step(tape.constant(stack_input<T>(f)), h, params, arch);
    h = step.hidden;
    outputs.push_back(step.output);
  }
  return outputs;
}

template <typename T>
T global_norm(const std::vector<Tensor<T>>& grads) {
  double sq = 0;
  for (const auto& g : grads)
    for (T v : g.values()) sq += static_cast<double>(v) * static_cast<double>(v);
  return static_cast<T>(std::sqrt(sq));
}

}  // namespace

double Schedule::learning_rate(int epoch) const {
  return lr0 * std::ldexp(1.0, -(epoch / period));
}

int Schedule::filter_size(int epoch) const {
  if (!anneal) return 1;
  return std::max(1, f0 - f_step * (epoch / period));
}

void Schedule::validate() const {
  if (!(lr0 > 0)) throw ParameterError("schedule: lr0 must be positive");
  if (period < 1) throw ParameterError("schedule: period must be at least 1 epoch");
  if (f0 < 1 || f0 % 2 == 0) throw ParameterError("schedule: gaussian_f0 must be odd and >= 1");
  if (f_step < 0 || f_step % 2 != 0) throw ParameterError("schedule: gaussian_step must be even and >= 0");
}

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adam ? "adam" : "sgd_momentum";
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd_momentum" || name == "sgd") return OptimizerKind::sgd_momentum;
  if (name == "adam") return OptimizerKind::adam;
  throw ParameterError("unknown optimizer '" + name + "'");
}

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.epochs = 50;
  c.batch_size = 4;
  c.schedule.period = 6;
  c.optimizer = OptimizerKind::adam;
  return c;
}

void TrainConfig::validate() const {
  schedule.validate();
  if (epochs < 1) throw ParameterError("train: epochs must be positive");
  if (batch_size < 1) throw ParameterError("train: batch_size must be positive");
  if (warmup_frames < 0) throw ParameterError("train: warmup_frames must be >= 0");
  if (momentum < 0 || momentum >= 1) throw ParameterError("train: momentum must lie in [0, 1)");
}

TrainLog schedule_dry_run(const TrainConfig& config) {
  config.validate();
  TrainLog log;
  for (int e = 0; e < config.epochs; ++e) {
    EpochRecord r;
    r.epoch = e;
    r.lr = config.schedule.learning_rate(e);
    r.filter_size = config.schedule.filter_size(e);
    log.epochs.push_back(r);
  }
  return log;
}

template <typename T>
Var<T> sequence_loss(Tape<T>& tape, const ModelVars<T>& params, const Architecture& arch,
                     const std::vector<GridPair>& frames, int filter_size, int warmup_frames) {
  check_frames(frames, warmup_frames);
  gaussian_taps(filter_size);  // rejects bad f before any work
  const std::vector<Var<T>> out = taped_outputs(tape, params, arch, frames);
  const std::vector<Var<T>> occ = occupancy_constants(tape, frames);
  std::vector<Var<T>> terms;
  for (std::size_t t = static_cast<std::size_t>(warmup_frames); t + 1 < frames.size(); ++t) {
    const Var<T> b = slice_channels(out[t], 0, 2);
    const Var<T> f = slice_channels(out[t], 2, 2);
    const Var<T> fwd = mse(occ[t], bilinear_warp(gaussian_filter(occ[t + 1], filter_size), f));
    const Var<T> bwd = mse(occ[t + 1], bilinear_warp(gaussian_filter(occ[t], filter_size), b));
    terms.push_back(add(fwd, bwd));
  }
  return mean_of(std::span<const Var<T>>(terms));
}

template <typename T>
T sequence_loss(const std::vector<GridPair>& frames, const ModelParams<T>& params, int filter_size,
                int warmup_frames) {
  check_frames(frames, warmup_frames);
  gaussian_taps(filter_size);
  const std::vector<Tensor<T>> out = run_sequence(params, frames);
  T acc{0};
  std::size_t n = 0;
  for (std::size_t t = static_cast<std::size_t>(warmup_frames); t + 1 < frames.size(); ++t) {
    const Tensor<T> ot = occupancy_tensor<T>(frames[t].occupancy);
    const Tensor<T> on = occupancy_tensor<T>(frames[t + 1].occupancy);
    const T fwd = mse(ot, bilinear_warp(gaussian_filter(on, filter_size), forward_flow(out[t])));
    const T bwd = mse(on, bilinear_warp(gaussian_filter(ot, filter_size), backward_flow(out[t])));
    acc += fwd + bwd;
    ++n;
  }
  return acc * (T{1} / static_cast<T>(n));
}

template <typename T>
T sequence_loss_unfiltered(const std::vector<GridPair>& frames, const ModelParams<T>& params,
                           int warmup_frames) {
  check_frames(frames, warmup_frames);
  const std::vector<Tensor<T>> out = run_sequence(params, frames);
  T acc{0};
  std::size_t n = 0;
  for (std::size_t t = static_cast<std::size_t>(warmup_frames); t + 1 < frames.size(); ++t) {
    const Tensor<T> ot = occupancy_tensor<T>(frames[t].occupancy);
    const Tensor<T> on = occupancy_tensor<T>(frames[t + 1].occupancy);
    const T fwd = mse(ot, bilinear_warp(on, forward_flow(out[t])));
    const T bwd = mse(on, bilinear_warp(ot, backward_flow(out[t])));
    acc += fwd + bwd;
    ++n;
  }
  return acc * (T{1} / static_cast<T>(n));
}

template <typename T>
Var<T> direct_sequence_loss(Tape<T>& tape, const ModelVars<T>& params, const Architecture& arch,
                            const std::vector<GridPair>& frames, int warmup_frames) {
  check_frames(frames, warmup_frames);
  if (arch.head != HeadKind::occupancy)
    throw ParameterError("direct_sequence_loss: architecture has a " + to_string(arch.head) + " head");
  const std::vector<Var<T>> out = taped_outputs(tape, params, arch, frames);
  const std::vector<Var<T>> occ = occupancy_constants(tape, frames);
  std::vector<Var<T>> terms;
  for (std::size_t t = static_cast<std::size_t>(warmup_frames); t + 1 < frames.size(); ++t)
    terms.push_back(bce_with_logits(out[t], occ[t + 1]));
  return mean_of(std::span<const Var<T>>(terms));
}

template <typename T>
LossAndGrad<T> loss_and_grad(const std::vector<GridPair>& frames, const ModelParams<T>& params,
                             int filter_size, int warmup_frames) {
  Tape<T> tape;
  const ModelVars<T> vars = bind_params(tape, params);
  const Var<T> loss = params.arch.head == HeadKind::flow
                          ? sequence_loss(tape, vars, params.arch, frames, filter_size, warmup_frames)
                          : direct_sequence_loss(tape, vars, params.arch, frames, warmup_frames);
  tape.backward(loss);
  LossAndGrad<T> out;
  out.loss = loss.value()[0];
  for (const Var<T>& v : vars.list()) out.grads.push_back(tape.grad(v));
  return out;
}

template <typename T>
void Optimizer<T>::step(ModelParams<T>& params, const std::vector<Tensor<T>>& grads, double lr) {
  auto named = params.named();
  if (grads.size() != named.size())
    throw DimensionError("Optimizer::step", "parameters", named.size(), grads.size());
  if (m_.empty()) {
    for (const auto& [name, p] : named) {
      m_.emplace_back(p->shape());
      if (config_.optimizer == OptimizerKind::adam) v_.emplace_back(p->shape());
    }
  }
  ++steps_;
  const T lr_t = static_cast<T>(lr);
  if (config_.optimizer == OptimizerKind::sgd_momentum) {
    const T mu = static_cast<T>(config_.momentum);
    for (std::size_t k = 0; k < named.size(); ++k) {
      Tensor<T>& p = *named[k].second;
      Tensor<T>& m = m_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = mu * m[i] + grads[k][i];
        p[i] -= lr_t * m[i];
      }
    }
    return;
  }
  const double b1 = config_.adam_beta1, b2 = config_.adam_beta2;
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(b1, static_cast<double>(steps_))));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(b2, static_cast<double>(steps_))));
  const T eps = static_cast<T>(config_.adam_epsilon);
  for (std::size_t k = 0; k < named.size(); ++k) {
    Tensor<T>& p = *named[k].second;
    Tensor<T>& m = m_[k];
    Tensor<T>& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T g = grads[k][i];
      m[i] = static_cast<T>(b1) * m[i] + static_cast<T>(1 - b1) * g;
      v[i] = static_cast<T>(b2) * v[i] + static_cast<T>(1 - b2) * g * g;
      p[i] -= lr_t * (m[i] * c1) / (std::sqrt(v[i] * c2) + eps);
    }
  }
}

template <typename T>
TrainResult<T> train(const std::vector<SequenceSample>& data, const TrainConfig& config,
                     const TrainHooks& hooks, std::optional<ModelParams<T>> initial) {
  config.validate();
  if (data.empty()) throw ParameterError("train: empty dataset");
  Architecture arch;
  arch.head = config.head;
  TrainResult<T> result{initial ? std::move(*initial) : init_params<T>(config.seed, arch), {}};
  ModelParams<T>& params = result.params;
  if (params.arch.head != config.head) throw CompatibilityError("train: initial parameters have the wrong head");
  Optimizer<T> opt(config);
  std::mt19937_64 shuffle_rng(derive_seed(config.seed, 0x5eed));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t workers = config.workers ? config.workers : worker_count();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = config.schedule.learning_rate(epoch);
    const int f = config.schedule.filter_size(epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<LossAndGrad<T>> parts(end - begin);
      parallel_for(parts.size(), [&](std::size_t k) {
        parts[k] = loss_and_grad(data[order[begin + k]].frames, params, f, config.warmup_frames);
      }, workers);
      std::vector<Tensor<T>> grads = std::move(parts.front().grads);
      double batch_loss = static_cast<double>(parts.front().loss);
      for (std::size_t k = 1; k < parts.size(); ++k) {
        batch_loss += static_cast<double>(parts[k].loss);
        for (std::size_t p = 0; p < grads.size(); ++p) {
          auto dst = grads[p].values();
          auto src = parts[k].grads[p].values();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
      }
      if (!std::isfinite(batch_loss))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index));
      const T inv = T{1} / static_cast<T>(parts.size());
      for (auto& g : grads)
        for (T& v : g.values()) v *= inv;
      if (config.clip_norm > 0) {
        const T norm = global_norm(grads);
        if (norm > static_cast<T>(config.clip_norm)) {
          const T s = static_cast<T>(config.clip_norm) / norm;
          for (auto& g : grads)
            for (T& v : g.values()) v *= s;
        }
      }
      opt.step(params, grads, lr);
      loss_sum += batch_loss;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(data.size());
    rec.lr = lr;
    rec.filter_size = f;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!params.all_finite())
      throw NumericError("train: parameters became non-finite at epoch " + std::to_string(epoch));
    if (hooks.on_epoch) hooks.on_epoch(rec, epoch);
    if (hooks.on_snapshot && hooks.snapshot_every > 0 && (epoch + 1) % hooks.snapshot_every == 0) {
      if constexpr (std::is_same_v<T, float>) hooks.on_snapshot(params, epoch);
      else hooks.on_snapshot(params.template cast<float>(), epoch);
    }
    result.log.epochs.push_back(rec);
  }
  return result;
}

std::vector<GradientSample> gradient_support_demo(int filter_size, const std::vector<double>& flows,
                                                  int i, int j, int width) {
  if (width < 1 || i < 0 || i >= width || j < 0 || j >= width)
    throw ParameterError("gradient_support_demo: cells must lie inside the row");
  const Shape row{1, 1, 1, static_cast<std::size_t>(width)};
  Tensor<double> target(row), source(row);
  target[static_cast<std::size_t>(i)] = 1.0;
  source[static_cast<std::size_t>(j)] = 1.0;
  Tensor<double> mask(row);
  mask[static_cast<std::size_t>(i)] = 1.0;
  std::vector<GradientSample> out;
  out.reserve(flows.size());
  for (double b : flows) {
    Tape<double> tape;
    Tensor<double> flow(Shape{1, 2, 1, static_cast<std::size_t>(width)});
    flow[static_cast<std::size_t>(i)] = b;
    flow.set_requires_grad(true);
    const Var<double> fv = tape.leaf(std::move(flow));
    const Var<double> blurred = gaussian_filter(tape.constant(source), filter_size);
    // Squared error of cell i alone; the rest of the row does not depend on B_i.
    const Var<double> at_i = mul(bilinear_warp(blurred, fv), tape.constant(mask));
    const Var<double> loss = scale(mse(tape.constant(target), at_i), static_cast<double>(width));
    tape.backward(loss);
    out.push_back({b, loss.value()[0], tape.grad(fv)[static_cast<std::size_t>(i)]});
  }
  return out;
}

std::vector<double> interval_midpoints(int lo, int hi) {
  std::vector<double> out;
  for (int k = lo; k < hi; ++k) out.push_back(k + 0.5);
  return out;
}

SupportInterval gradient_support(const std::vector<GradientSample>& profile) {
  SupportInterval s;
  for (const auto& g : profile) {
    if (g.gradient == 0.0) continue;
    const double lo = std::floor(g.flow);
    const double hi = std::floor(g.flow) + 1.0;
    if (s.empty) {
      s = {lo, hi, false};
    } else {
      s.lo = std::min(s.lo, lo);
      s.hi = std::max(s.hi, hi);
    }
  }
  return s;
}

#define LIDARFLOW_INSTANTIATE_TRAINER(T)                                                          \
  template Var<T> sequence_loss<T>(Tape<T>&, const ModelVars<T>&, const Architecture&,            \
                                   const std::vector<GridPair>&, int, int);                       \
  template T sequence_loss<T>(const std::vector<GridPair>&, const ModelParams<T>&, int, int);     \
  template T sequence_loss_unfiltered<T>(const std::vector<GridPair>&, const ModelParams<T>&, int); \
  template Var<T> direct_sequence_loss<T>(Tape<T>&, const ModelVars<T>&, const Architecture&,     \
                                          const std::vector<GridPair>&, int);                     \
  template LossAndGrad<T> loss_and_grad<T>(const std::vector<GridPair>&, const ModelParams<T>&,   \
                                           int, int);                                             \
  template class Optimizer<T>;                                                                    \
  template TrainResult<T> train<T>(const std::vector<SequenceSample>&, const TrainConfig&,        \
                                   const TrainHooks&, std::optional<ModelParams<T>>);

LIDARFLOW_INSTANTIATE_TRAINER(float)
LIDARFLOW_INSTANTIATE_TRAINER(double)

}  // namespace lidarflow
