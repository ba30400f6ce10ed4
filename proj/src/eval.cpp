#include "lidarflow/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "lidarflow/ops.hpp"
#include "lidarflow/parallel.hpp"

namespace lidarflow {
namespace {

void check_dims(const char* where, int rows_a, int cols_a, int rows_b, int cols_b) {
  if (rows_a != rows_b)
    throw DimensionError(where, "rows", static_cast<std::size_t>(rows_a), static_cast<std::size_t>(rows_b));
  if (cols_a != cols_b)
    throw DimensionError(where, "cols", static_cast<std::size_t>(cols_a), static_cast<std::size_t>(cols_b));
}

template <typename T>
void check_flow_tensor(const char* where, const Tensor<T>& flow, int rows, int cols) {
  const Shape& s = flow.shape();
  if (s.n != 1) throw DimensionError(where, "batch", 1, s.n);
  if (s.c != 2) throw DimensionError(where, "channels", 2, s.c);
  check_dims(where, static_cast<int>(s.h), static_cast<int>(s.w), rows, cols);
}

Tensor<double> flow_field_tensor(const FlowField& flow) {
  Tensor<double> t(Shape{1, 2, static_cast<std::size_t>(flow.rows), static_cast<std::size_t>(flow.cols)});
  double* dx = t.plane(0, 0);
  double* dy = t.plane(0, 1);
  for (std::size_t i = 0; i < flow.size(); ++i) {
    if (!flow.defined[i]) continue;
    dx[i] = flow.dx[i];
    dy[i] = flow.dy[i];
  }
  return t;
}

// Middlebury color wheel: RY, YG, GC, CB, BM, MR segments.
const std::vector<std::array<double, 3>>& color_wheel() {
  static const std::vector<std::array<double, 3>> wheel = [] {
    std::vector<std::array<double, 3>> w;
    const int ry = 15, yg = 6, gc = 4, cb = 11, bm = 13, mr = 6;
    for (int i = 0; i < ry; ++i) w.push_back({255, 255.0 * i / ry, 0});
    for (int i = 0; i < yg; ++i) w.push_back({255 - 255.0 * i / yg, 255, 0});
    for (int i = 0; i < gc; ++i) w.push_back({0, 255, 255.0 * i / gc});
    for (int i = 0; i < cb; ++i) w.push_back({0, 255 - 255.0 * i / cb, 255});
    for (int i = 0; i < bm; ++i) w.push_back({255.0 * i / bm, 0, 255});
    for (int i = 0; i < mr; ++i) w.push_back({255, 0, 255 - 255.0 * i / mr});
    return w;
  }();
  return wheel;
}

}  // namespace

PredictionResult binarize(RealGrid soft, double threshold) {
  PredictionResult out;
  out.binary_map = BinaryGrid(soft.rows, soft.cols, 0);
  for (std::size_t i = 0; i < soft.size(); ++i) out.binary_map.cells[i] = soft.cells[i] > threshold ? 1 : 0;
  out.soft_map = std::move(soft);
  out.threshold = threshold;
  return out;
}

template <typename T>
PredictionResult predict_next(const BinaryGrid& occupancy, const Tensor<T>& backward_flow,
                              double threshold) {
  check_flow_tensor("predict_next", backward_flow, occupancy.rows, occupancy.cols);
  const Tensor<T> warped = bilinear_warp(occupancy_tensor<T>(occupancy), backward_flow);
  RealGrid soft(occupancy.rows, occupancy.cols, 0.0);
  for (std::size_t i = 0; i < soft.size(); ++i) soft.cells[i] = static_cast<double>(warped[i]);
  return binarize(std::move(soft), threshold);
}

PredictionResult predict_next(const BinaryGrid& occupancy, const FlowField& backward_flow,
                              double threshold) {
  check_dims("predict_next", backward_flow.rows, backward_flow.cols, occupancy.rows, occupancy.cols);
  PredictionResult out = predict_next(occupancy, flow_field_tensor(backward_flow), threshold);
  for (std::size_t i = 0; i < out.soft_map.size(); ++i) {
    if (backward_flow.defined[i]) continue;
    out.soft_map.cells[i] = 0.0;
    out.binary_map.cells[i] = 0;
  }
  return out;
}

PredictionResult persistence_baseline(const BinaryGrid& occupancy) {
  RealGrid soft(occupancy.rows, occupancy.cols, 0.0);
  for (std::size_t i = 0; i < soft.size(); ++i) soft.cells[i] = occupancy.cells[i];
  PredictionResult out;
  out.soft_map = std::move(soft);
  out.binary_map = occupancy;
  return out;
}

double Counts::precision() const {
  return tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
}

double Counts::recall() const {
  return tp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
}

double Counts::f1() const {
  const std::uint64_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

Counts count_cells(const BinaryGrid& pred, const BinaryGrid& gt, const BinaryGrid* mask) {
  check_dims("count_cells", pred.rows, pred.cols, gt.rows, gt.cols);
  if (mask) check_dims("count_cells", mask->rows, mask->cols, gt.rows, gt.cols);
  Counts c;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (mask && !mask->cells[i]) continue;
    const bool p = pred.cells[i] != 0;
    const bool g = gt.cells[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double f1_score(const BinaryGrid& pred, const BinaryGrid& gt) { return count_cells(pred, gt).f1(); }

double PrPoint::f1() const {
  return precision + recall == 0 ? 0.0 : 2 * precision * recall / (precision + recall);
}

std::vector<double> default_thresholds() {
  std::vector<double> t(101);
  for (int k = 0; k <= 100; ++k) t[static_cast<std::size_t>(k)] = k / 100.0;
  return t;
}

PrCurve pr_curve(const std::vector<RealGrid>& soft_maps, const std::vector<BinaryGrid>& gts,
                 const std::vector<double>& thresholds, const std::vector<BinaryGrid>* masks) {
  if (soft_maps.size() != gts.size())
    throw ParameterError("pr_curve: " + std::to_string(soft_maps.size()) + " soft maps but " +
                         std::to_string(gts.size()) + " ground-truth maps");
  if (masks && masks->size() != gts.size()) throw ParameterError("pr_curve: mask count mismatch");
  if (!std::is_sorted(thresholds.begin(), thresholds.end()))
    throw ParameterError("pr_curve: thresholds must be ascending");
  for (std::size_t m = 0; m < gts.size(); ++m)
    check_dims("pr_curve", soft_maps[m].rows, soft_maps[m].cols, gts[m].rows, gts[m].cols);

  // Sorting positives and negatives by score gives every threshold's counts
  // by binary search.
  std::vector<double> pos, neg;
  for (std::size_t m = 0; m < gts.size(); ++m) {
    for (std::size_t i = 0; i < gts[m].size(); ++i) {
      if (masks && !(*masks)[m].cells[i]) continue;
      (gts[m].cells[i] ? pos : neg).push_back(soft_maps[m].cells[i]);
    }
  }
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  PrCurve curve;
  for (double t : thresholds) {
    Counts c;
    c.tp = static_cast<std::uint64_t>(pos.end() - std::upper_bound(pos.begin(), pos.end(), t));
    c.fn = pos.size() - c.tp;
    c.fp = static_cast<std::uint64_t>(neg.end() - std::upper_bound(neg.begin(), neg.end(), t));
    c.tn = neg.size() - c.fp;
    PrPoint p{t, c.precision(), c.recall()};
    curve.f1_best = std::max(curve.f1_best, p.f1());
    curve.points.push_back(p);
  }
  return curve;
}

double EpeSum::mean() const {
  if (cells == 0) throw UndefinedResultError("flow_epe: ground truth defines no cells");
  return total / static_cast<double>(cells);
}

template <typename T>
EpeSum flow_error_sum(const Tensor<T>& pred, const FlowField& gt) {
  check_flow_tensor("flow_epe", pred, gt.rows, gt.cols);
  EpeSum s;
  const T* dx = pred.plane(0, 0);
  const T* dy = pred.plane(0, 1);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!gt.defined[i]) continue;
    s.total += std::hypot(static_cast<double>(dx[i]) - gt.dx[i], static_cast<double>(dy[i]) - gt.dy[i]);
    ++s.cells;
  }
  return s;
}

template <typename T>
double flow_epe(const Tensor<T>& pred, const FlowField& gt) {
  return flow_error_sum(pred, gt).mean();
}

double flow_epe(const FlowField& pred, const FlowField& gt) {
  check_dims("flow_epe", pred.rows, pred.cols, gt.rows, gt.cols);
  Tensor<double> t(Shape{1, 2, static_cast<std::size_t>(pred.rows), static_cast<std::size_t>(pred.cols)});
  for (std::size_t i = 0; i < pred.size(); ++i) {
    t.plane(0, 0)[i] = pred.dx[i];
    t.plane(0, 1)[i] = pred.dy[i];
  }
  return flow_epe(t, gt);
}

template <typename T>
RealGrid direct_head_baseline(const std::vector<GridPair>& frames, const ModelParams<T>& params) {
  if (params.arch.head != HeadKind::occupancy)
    throw ParameterError("direct_head_baseline: parameters have a " + to_string(params.arch.head) + " head");
  if (frames.empty()) throw ParameterError("direct_head_baseline: no frames");
  const std::vector<Tensor<T>> out = run_sequence(params, frames);
  const Tensor<T> prob = sigmoid(out.back());
  RealGrid soft(frames.front().occupancy.rows, frames.front().occupancy.cols, 0.0);
  for (std::size_t i = 0; i < soft.size(); ++i) soft.cells[i] = static_cast<double>(prob[i]);
  return soft;
}

std::array<std::uint8_t, 3> flow_color(double dx, double dy, double max_flow) {
  if (dx == 0 && dy == 0) return {255, 255, 255};
  const auto& wheel = color_wheel();
  const double ncols = static_cast<double>(wheel.size());
  const double rad = std::hypot(dx, dy) / max_flow;
  const double a = std::atan2(-dy, -dx) / std::numbers::pi;
  const double fk = (a + 1) / 2 * (ncols - 1);
  const auto k0 = static_cast<std::size_t>(std::floor(fk));
  const std::size_t k1 = (k0 + 1) % wheel.size();
  const double f = fk - std::floor(fk);
  std::array<std::uint8_t, 3> out{};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double col = ((1 - f) * wheel[k0][ch] + f * wheel[k1][ch]) / 255.0;
    col = rad <= 1 ? 1 - rad * (1 - col) : col * 0.75;
    out[ch] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(col, 0.0, 1.0)));
  }
  return out;
}

RgbImage flow_to_color(const FlowField& flow, double max_flow) {
  RgbImage img(flow.rows, flow.cols, 255);
  for (int r = 0; r < flow.rows; ++r) {
    for (int c = 0; c < flow.cols; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * static_cast<std::size_t>(flow.cols) +
                            static_cast<std::size_t>(c);
      if (!flow.defined[i]) continue;
      const auto rgb = flow_color(flow.dx[i], flow.dy[i], max_flow);
      std::copy(rgb.begin(), rgb.end(), img.pixel(r, c));
    }
  }
  return img;
}

template <typename T>
RgbImage flow_to_color(const Tensor<T>& flow, double max_flow) {
  const Shape& s = flow.shape();
  if (s.c != 2) throw DimensionError("flow_to_color", "channels", 2, s.c);
  const int rows = static_cast<int>(s.h), cols = static_cast<int>(s.w);
  RgbImage img(rows, cols);
  const T* dx = flow.plane(0, 0);
  const T* dy = flow.plane(0, 1);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * s.w + static_cast<std::size_t>(c);
      if (!std::isfinite(dx[i]) || !std::isfinite(dy[i]))
        throw NumericError("flow_to_color: non-finite flow at row " + std::to_string(r) +
                           ", col " + std::to_string(c));
      const auto rgb = flow_color(dx[i], dy[i], max_flow);
      std::copy(rgb.begin(), rgb.end(), img.pixel(r, c));
    }
  }
  return img;
}

RgbImage flow_legend(int size, double max_flow) {
  if (size <= 0) throw ParameterError("flow_legend: size must be positive");
  RgbImage img(size, size);
  const double centre = (size - 1) / 2.0;
  const double scale = size > 1 ? 1.2 * max_flow / centre : 0.0;
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const auto rgb = flow_color((c - centre) * scale, (r - centre) * scale, max_flow);
      std::copy(rgb.begin(), rgb.end(), img.pixel(r, c));
    }
  }
  return img;
}

RgbImage overlay(const BinaryGrid& pred, const BinaryGrid& gt) {
  check_dims("overlay", pred.rows, pred.cols, gt.rows, gt.cols);
  RgbImage img(gt.rows, gt.cols);
  for (int r = 0; r < gt.rows; ++r) {
    for (int c = 0; c < gt.cols; ++c) {
      std::uint8_t* px = img.pixel(r, c);
      px[0] = pred.at(r, c) ? 255 : 0;
      px[1] = gt.at(r, c) ? 255 : 0;
    }
  }
  return img;
}

template <typename T>
EvalReport evaluate(const std::vector<SequenceSample>& data, const ModelParams<T>& params,
                    const EvalOptions& options, const ModelParams<T>* direct) {
  if (params.arch.head != HeadKind::flow) throw ParameterError("evaluate: model needs a flow head");
  struct Partial {
    EvalReport report;
  };
  std::vector<Partial> parts(data.size());
  parallel_for(data.size(), [&](std::size_t s) {
    const SequenceSample& seq = data[s];
    const int steps = static_cast<int>(seq.frames.size());
    if (options.warmup_frames < 0 || options.warmup_frames >= steps)
      throw ParameterError("evaluate: warmup_frames must be below the sequence length");
    EvalReport& rep = parts[s].report;
    rep.direct = direct ? std::optional<Counts>(Counts{}) : std::nullopt;
    const std::vector<Tensor<T>> outputs = run_sequence(params, seq.frames);
    std::vector<Tensor<T>> direct_out;
    if (direct) direct_out = run_sequence(*direct, seq.frames);
    for (int t = options.warmup_frames; t < steps; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      const GridPair& next = ti + 1 < seq.frames.size() ? seq.frames[ti + 1] : seq.gt_next;
      const Tensor<T> flow = backward_flow(outputs[ti]);
      PredictionResult pred = predict_next(seq.frames[ti].occupancy, flow, options.threshold);
      const BinaryGrid& current = seq.frames[ti].occupancy;
      rep.model += count_cells(pred.binary_map, next.occupancy);
      rep.persistence += count_cells(current, next.occupancy);
      rep.model_visible += count_cells(pred.binary_map, next.occupancy, &next.visibility);
      rep.persistence_visible += count_cells(current, next.occupancy, &next.visibility);
      if (direct) {
        const Tensor<T> prob = sigmoid(direct_out[ti]);
        BinaryGrid bin(current.rows, current.cols, 0);
        for (std::size_t i = 0; i < bin.size(); ++i) bin.cells[i] = prob[i] > options.threshold ? 1 : 0;
        *rep.direct += count_cells(bin, next.occupancy);
      }
      if (ti < seq.gt_flow_backward.size()) {
        const EpeSum e = flow_error_sum(flow, seq.gt_flow_backward[ti]);
        rep.epe.total += e.total;
        rep.epe.cells += e.cells;
      }
      ++rep.steps;
      if (options.keep_soft_maps) {
        rep.soft_maps.push_back(std::move(pred.soft_map));
        rep.targets.push_back(next.occupancy);
      }
    }
  });
  // Fixed merge order keeps the report independent of the worker count.
  EvalReport out;
  if (direct) out.direct = Counts{};
  for (auto& p : parts) {
    out.model += p.report.model;
    out.persistence += p.report.persistence;
    out.model_visible += p.report.model_visible;
    out.persistence_visible += p.report.persistence_visible;
    if (direct) *out.direct += *p.report.direct;
    out.epe.total += p.report.epe.total;
    out.epe.cells += p.report.epe.cells;
    out.steps += p.report.steps;
    for (auto& m : p.report.soft_maps) out.soft_maps.push_back(std::move(m));
    for (auto& m : p.report.targets) out.targets.push_back(std::move(m));
  }
  return out;
}

#define LIDARFLOW_INSTANTIATE_EVAL(T)                                                            \
  template PredictionResult predict_next<T>(const BinaryGrid&, const Tensor<T>&, double);        \
  template EpeSum flow_error_sum<T>(const Tensor<T>&, const FlowField&);                         \
  template double flow_epe<T>(const Tensor<T>&, const FlowField&);                               \
  template RealGrid direct_head_baseline<T>(const std::vector<GridPair>&, const ModelParams<T>&); \
  template RgbImage flow_to_color<T>(const Tensor<T>&, double);                                  \
  template EvalReport evaluate<T>(const std::vector<SequenceSample>&, const ModelParams<T>&,     \
                                  const EvalOptions&, const ModelParams<T>*);

LIDARFLOW_INSTANTIATE_EVAL(float)
LIDARFLOW_INSTANTIATE_EVAL(double)

}  // namespace lidarflow
