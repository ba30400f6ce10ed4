#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "lidarflow/flownet.hpp"
#include "lidarflow/grid.hpp"
#include "lidarflow/tensor.hpp"
#include "lidarflow/world.hpp"

namespace lidarflow {

inline constexpr double kDefaultThreshold = 0.4;

struct PredictionResult {
  RealGrid soft_map;
  BinaryGrid binary_map;  // soft > threshold
  double threshold = kDefaultThreshold;
};

PredictionResult binarize(RealGrid soft, double threshold = kDefaultThreshold);

// soft = bilinear_warp(O_t, flow), flow given as 1 x 2 x H x W (dx, dy).
template <typename T>
PredictionResult predict_next(const BinaryGrid& occupancy, const Tensor<T>& backward_flow,
                              double threshold = kDefaultThreshold);

// Same, with a FlowField. A cell without defined backward flow has no
// material arriving at t+1 and is predicted empty.
PredictionResult predict_next(const BinaryGrid& occupancy, const FlowField& backward_flow,
                              double threshold = kDefaultThreshold);

PredictionResult persistence_baseline(const BinaryGrid& occupancy);

struct Counts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  Counts& operator+=(const Counts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  // No predicted positives: precision 1. No actual positives: recall 1.
  double precision() const;
  double recall() const;
  // 2TP / (2TP + FP + FN); both maps empty gives 1.
  double f1() const;
};

// Cells with mask == 0 are skipped when a mask is given.
Counts count_cells(const BinaryGrid& pred, const BinaryGrid& gt, const BinaryGrid* mask = nullptr);

double f1_score(const BinaryGrid& pred, const BinaryGrid& gt);

struct PrPoint {
  double threshold = 0;
  double precision = 0;
  double recall = 0;
  double f1() const;
};

struct PrCurve {
  std::vector<PrPoint> points;
  double f1_best = 0;
};

// 101 values 0.00, 0.01, ..., 1.00.
std::vector<double> default_thresholds();

// Micro-averaged over every cell of every map.
PrCurve pr_curve(const std::vector<RealGrid>& soft_maps, const std::vector<BinaryGrid>& gts,
                 const std::vector<double>& thresholds = default_thresholds(),
                 const std::vector<BinaryGrid>* masks = nullptr);

// Mean Euclidean error over cells where gt is defined.
// Throws UndefinedResultError when no cell is defined.
template <typename T>
double flow_epe(const Tensor<T>& pred, const FlowField& gt);
double flow_epe(const FlowField& pred, const FlowField& gt);

struct EpeSum {
  double total = 0;
  std::uint64_t cells = 0;
  double mean() const;
};
template <typename T>
EpeSum flow_error_sum(const Tensor<T>& pred, const FlowField& gt);

// Sigmoid of the occupancy head after running it over every frame.
template <typename T>
RealGrid direct_head_baseline(const std::vector<GridPair>& frames, const ModelParams<T>& params);

// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct RgbImage {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> rgb;

  RgbImage() = default;
  RgbImage(int r, int c, std::uint8_t fill = 0)
      : rows(r), cols(c), rgb(static_cast<std::size_t>(r) * static_cast<std::size_t>(c) * 3, fill) {}
  std::uint8_t* pixel(int r, int c) {
    return rgb.data() + 3 * (static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) +
                             static_cast<std::size_t>(c));
  }
  const std::uint8_t* pixel(int r, int c) const {
    return rgb.data() + 3 * (static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) +
                             static_cast<std::size_t>(c));
  }
  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

inline constexpr double kDefaultMaxFlow = 5.0;

// Optical-flow color wheel: hue from direction, saturation from magnitude
// relative to max_flow. Zero flow is white; beyond max_flow is darkened.
std::array<std::uint8_t, 3> flow_color(double dx, double dy, double max_flow = kDefaultMaxFlow);
RgbImage flow_to_color(const FlowField& flow, double max_flow = kDefaultMaxFlow);
template <typename T>
RgbImage flow_to_color(const Tensor<T>& flow, double max_flow = kDefaultMaxFlow);
// Radial field covering magnitudes up to 1.2 * max_flow.
RgbImage flow_legend(int size, double max_flow = kDefaultMaxFlow);

// Red = prediction, green = ground truth; correct cells are yellow.
RgbImage overlay(const BinaryGrid& pred, const BinaryGrid& gt);

// ---- dataset evaluation --------------------------------------------------

struct EvalOptions {
  int warmup_frames = 10;
  double threshold = kDefaultThreshold;
  bool keep_soft_maps = true;
};

struct EvalReport {
  Counts model;
  Counts persistence;
  Counts model_visible;        // restricted to V^{t+1} = 1
  Counts persistence_visible;
  std::optional<Counts> direct;
  EpeSum epe;                  // backward flow vs simulator ground truth
  std::size_t steps = 0;
  std::vector<RealGrid> soft_maps;
  std::vector<BinaryGrid> targets;
};

// Predicts frame t+1 from the flow at step t for t = warmup .. seq_len-1
// (the last step targets gt_next), micro-averaging counts over all steps.
template <typename T>
EvalReport evaluate(const std::vector<SequenceSample>& data, const ModelParams<T>& params,
                    const EvalOptions& options = EvalOptions{},
                    const ModelParams<T>* direct = nullptr);

}  // namespace lidarflow
