#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lidarflow/flownet.hpp"
#include "lidarflow/grid.hpp"
#include "lidarflow/tape.hpp"
#include "lidarflow/world.hpp"

namespace lidarflow {

// Step schedules: both change every `period` epochs.
struct Schedule {
  double lr0 = 0.01;
  int period = 25;
  int f0 = 9;
  int f_step = 2;
  bool anneal = true;  // false: filter size 1 from the first epoch

  double learning_rate(int epoch) const;
  int filter_size(int epoch) const;
  void validate() const;
};

enum class OptimizerKind : std::uint8_t { sgd_momentum = 0, adam = 1 };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
  int epochs = 200;
  std::size_t batch_size = 32;
  Schedule schedule;
  int warmup_frames = 10;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double clip_norm = 10.0;  // <= 0 disables clipping
  HeadKind head = HeadKind::flow;
  std::size_t workers = 0;  // 0: worker_count()

  // Full-size values: batch 32, lr 0.01 halved every 25 epochs, f from 9
  // down by 2 every 25 epochs, 200 epochs.
  static TrainConfig paper();
  // 50 epochs, batch 4, schedule period 6 epochs, Adam.
  static TrainConfig desk();
  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0;
  double lr = 0;
  int filter_size = 1;
  double seconds = 0;
  std::optional<double> val_f1;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

// Schedule values for every epoch without touching data.
TrainLog schedule_dry_run(const TrainConfig& config);

// Mean over supervised steps t = warmup .. T-2 of
//   MSE(O^t, W(G(O^{t+1}, f), F^t)) + MSE(O^{t+1}, W(G(O^t, f), B^t)).
template <typename T>
Var<T> sequence_loss(Tape<T>& tape, const ModelVars<T>& params, const Architecture& arch,
                     const std::vector<GridPair>& frames, int filter_size, int warmup_frames);

template <typename T>
T sequence_loss(const std::vector<GridPair>& frames, const ModelParams<T>& params, int filter_size,
                int warmup_frames = 10);

// The unfiltered objective, evaluated without any Gaussian step.
template <typename T>
T sequence_loss_unfiltered(const std::vector<GridPair>& frames, const ModelParams<T>& params,
                           int warmup_frames = 10);

// Direct-prediction baseline: mean over supervised steps of the per-cell
// binary cross entropy between sigmoid(head) and O^{t+1}.
template <typename T>
Var<T> direct_sequence_loss(Tape<T>& tape, const ModelVars<T>& params, const Architecture& arch,
                            const std::vector<GridPair>& frames, int warmup_frames);

// Loss and gradients (same order as ModelParams::named()) for one sequence.
template <typename T>
struct LossAndGrad {
  T loss{};
  std::vector<Tensor<T>> grads;
};

template <typename T>
LossAndGrad<T> loss_and_grad(const std::vector<GridPair>& frames, const ModelParams<T>& params,
                             int filter_size, int warmup_frames);

template <typename T>
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& config) : config_(config) {}
  void step(ModelParams<T>& params, const std::vector<Tensor<T>>& grads, double lr);
  OptimizerKind kind() const { return config_.optimizer; }

 private:
  TrainConfig config_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::uint64_t steps_ = 0;
};

template <typename T>
struct TrainResult {
  ModelParams<T> params;
  TrainLog log;
};

struct TrainHooks {
  // Called after every epoch; may fill record.val_f1.
  std::function<void(EpochRecord&, int epoch)> on_epoch;
  // Called after every `snapshot_every` epochs with the current parameters.
  int snapshot_every = 0;
  std::function<void(const ModelParams<float>&, int epoch)> on_snapshot;
};

// Mini-batch training over `data`. Each batch member gets its own tape;
// gradients are summed in batch order, so results do not depend on the
// number of workers. Throws NumericError on a non-finite loss.
template <typename T>
TrainResult<T> train(const std::vector<SequenceSample>& data, const TrainConfig& config,
                     const TrainHooks& hooks = TrainHooks{},
                     std::optional<ModelParams<T>> initial = std::nullopt);

// ---- gradient support on a one-row toy -----------------------------------

struct GradientSample {
  double flow = 0;
  double loss = 0;
  double gradient = 0;
};

struct SupportInterval {
  double lo = 0;
  double hi = 0;
  bool empty = true;
  double width() const { return empty ? 0.0 : hi - lo; }
};

// One-row maps of `width` cells: target O^{t+1} has a 1 at column i, source
// O^t a 1 at column j. Only B_i varies; returns the squared error of cell i,
// (O^{t+1}_i - W(G(O^t, f), B)_i)^2, and its derivative in B_i at each trial flow.
std::vector<GradientSample> gradient_support_demo(int filter_size, const std::vector<double>& flows,
                                                  int i = 3, int j = 7, int width = 24);

// Trial flows at the centre of every unit interval in [lo, hi).
std::vector<double> interval_midpoints(int lo, int hi);

// Smallest integer-bounded interval holding every nonzero-gradient sample.
SupportInterval gradient_support(const std::vector<GradientSample>& profile);

}  // namespace lidarflow
