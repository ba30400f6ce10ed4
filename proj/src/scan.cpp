#include "lidarflow/scan.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace lidarflow {
namespace {

constexpr double kTieTolerance = 1e-9;

// Amanatides-Woo walk in continuous map coordinates (u = column, v = row).
// `limit` is in cells; `strict` excludes cells entered exactly at the limit.
std::vector<Cell> walk(Cell origin, double angle, double limit, const GridSpec& grid,
                       bool strict) {
  std::vector<Cell> cells;
  if (origin.row < 0 || origin.row >= grid.rows || origin.col < 0 || origin.col >= grid.cols)
    return cells;
  const double du = std::cos(angle);
  const double dv = -std::sin(angle);
  const double u = origin.col + 0.5;
  const double v = origin.row + 0.5;
  int col = origin.col;
  int row = origin.row;
  const int step_c = du > 0 ? 1 : (du < 0 ? -1 : 0);
  const int step_r = dv > 0 ? 1 : (dv < 0 ? -1 : 0);
  const double inf = std::numeric_limits<double>::infinity();
  double t_next_u = du > 0 ? (col + 1 - u) / du : (du < 0 ? (u - col) / -du : inf);
  double t_next_v = dv > 0 ? (row + 1 - v) / dv : (dv < 0 ? (v - row) / -dv : inf);
  const double t_delta_u = du != 0 ? 1.0 / std::abs(du) : inf;
  const double t_delta_v = dv != 0 ? 1.0 / std::abs(dv) : inf;

  auto inside = [&](int r, int c) { return r >= 0 && r < grid.rows && c >= 0 && c < grid.cols; };
  auto beyond = [&](double t) { return strict ? t >= limit : t > limit; };

  cells.push_back(Cell{row, col});
  while (true) {
    const double t = std::min(t_next_u, t_next_v);
    if (!std::isfinite(t) || beyond(t)) break;
    const double scale = std::max(1.0, std::abs(t));
    if (std::abs(t_next_u - t_next_v) <= kTieTolerance * scale) {
      const Cell a{row, col + step_c};
      const Cell b{row + step_r, col};
      const Cell side = (a.row * grid.cols + a.col) < (b.row * grid.cols + b.col) ? a : b;
      if (inside(side.row, side.col)) cells.push_back(side);
      col += step_c;
      row += step_r;
      t_next_u += t_delta_u;
      t_next_v += t_delta_v;
    } else if (t_next_u < t_next_v) {
      col += step_c;
      t_next_u += t_delta_u;
    } else {
      row += step_r;
      t_next_v += t_delta_v;
    }
    if (!inside(row, col)) break;
    cells.push_back(Cell{row, col});
  }
  return cells;
}

}  // namespace

void Scan::validate() const {
  if (ranges.empty()) throw ParameterError("Scan: no ranges");
  constexpr double eps = 1e-9;
  if (angle_min < -eps || angle_max > std::numbers::pi + eps || angle_max < angle_min)
    throw ParameterError("Scan: field of view must lie within [0, pi]");
  if (!(range_max > 0)) throw ParameterError("Scan: range_max must be positive");
  for (std::size_t k = 0; k < ranges.size(); ++k) {
    const double r = ranges[k];
    if (is_no_return(r)) continue;
    if (!(r > 0) || r > range_max)
      throw ParameterError("Scan: beam " + std::to_string(k) + " range " + std::to_string(r) +
                           " outside (0, range_max]");
  }
}

double GridSpec::max_extent() const noexcept {
  const double u_far = std::max(sensor_u(), cols - sensor_u());
  const double v_far = sensor_v();
  return std::hypot(u_far, v_far) * cell_size;
}

void GridSpec::validate() const {
  if (rows <= 0 || cols <= 0) throw ParameterError("GridSpec: rows and cols must be positive");
  if (!(cell_size > 0)) throw ParameterError("GridSpec: cell_size must be positive");
}

std::vector<Cell> ray_traverse(Cell origin, double angle, double max_distance,
                               const GridSpec& grid) {
  grid.validate();
  return walk(origin, angle, max_distance / grid.cell_size, grid, false);
}

Cell endpoint_cell(double angle, double distance, const GridSpec& grid) {
  const double t = distance / grid.cell_size;
  const double u = grid.sensor_u() + t * std::cos(angle);
  const double v = grid.sensor_v() - t * std::sin(angle);
  return Cell{static_cast<int>(std::floor(v)), static_cast<int>(std::floor(u))};
}

GridPair scan_to_maps(const Scan& scan, const GridSpec& grid) {
  scan.validate();
  grid.validate();
  GridPair maps{BinaryGrid(grid.rows, grid.cols, 0), BinaryGrid(grid.rows, grid.cols, 0)};
  const Cell sensor = grid.sensor_cell();
  for (std::size_t k = 0; k < scan.ranges.size(); ++k) {
    const double angle = scan.beam_angle(k);
    const double r = scan.ranges[k];
    if (Scan::is_no_return(r)) {
      for (const Cell& c : walk(sensor, angle, scan.range_max / grid.cell_size, grid, false))
        maps.visibility.at(c.row, c.col) = 1;
      continue;
    }
    std::vector<Cell> cells = walk(sensor, angle, r / grid.cell_size, grid, true);
    const Cell end = endpoint_cell(angle, r, grid);
    if (!cells.empty() && !(cells.back() == end) && grid.rows > 0 &&
        maps.occupancy.contains(end.row, end.col) &&
        std::abs(cells.back().row - end.row) + std::abs(cells.back().col - end.col) == 1) {
      // Endpoint exactly on the boundary of the next cell.
      cells.push_back(end);
    }
    for (const Cell& c : cells) maps.visibility.at(c.row, c.col) = 1;
    if (maps.occupancy.contains(end.row, end.col)) {
      maps.occupancy.at(end.row, end.col) = 1;
      maps.visibility.at(end.row, end.col) = 1;
    }
  }
  return maps;
}

}  // namespace lidarflow
