#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "lidarflow/grid.hpp"

namespace lidarflow {

// One LiDAR sweep. Beam k points at angle_min + k * (angle_max - angle_min) /
// (count - 1), measured counter-clockwise from the map's bottom edge, so pi/2
// is straight ahead. A one-beam scan uses angle_min.
struct Scan {
  static constexpr double kNoReturn = std::numeric_limits<double>::infinity();

  std::vector<double> ranges;
  double angle_min = 0.0;
  double angle_max = std::numbers::pi;
  double range_max = 10.0;
  double timestamp = 0.0;

  static bool is_no_return(double range) noexcept { return std::isinf(range) && range > 0; }
  double beam_angle(std::size_t k) const noexcept {
    if (ranges.size() < 2) return angle_min;
    return angle_min + static_cast<double>(k) * (angle_max - angle_min) /
                           static_cast<double>(ranges.size() - 1);
  }
  // Throws ParameterError on an empty scan, a field of view outside
  // [0, pi], or ranges outside (0, range_max] that are not kNoReturn.
  void validate() const;
};

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct GridSpec {
  int rows = 100;
  int cols = 100;
  double cell_size = 0.1;

  // Bottom row, middle column.
  Cell sensor_cell() const noexcept { return Cell{rows - 1, cols / 2}; }
  // Sensor location in continuous map coordinates (u = column, v = row, in
  // cells); the sensor sits at the centre of its cell.
  double sensor_u() const noexcept { return sensor_cell().col + 0.5; }
  double sensor_v() const noexcept { return sensor_cell().row + 0.5; }
  // Distance from the sensor to the farthest grid corner, in meters.
  double max_extent() const noexcept;
  void validate() const;
  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

// Cells whose interior the ray from the centre of `origin` passes through,
// in order of increasing distance, up to `max_distance` meters or the grid
// border. When the ray crosses a cell corner exactly, the side cell with the
// lower row-major index is included before the diagonal cell.
std::vector<Cell> ray_traverse(Cell origin, double angle, double max_distance,
                               const GridSpec& grid);

// Occupancy: beam endpoint cells. Visibility: every cell traversed from the
// sensor up to and including the endpoint; no-return beams mark visibility
// out to range_max.
GridPair scan_to_maps(const Scan& scan, const GridSpec& grid);

// Cell containing the point at `distance` meters along `angle` from the sensor.
Cell endpoint_cell(double angle, double distance, const GridSpec& grid);

}  // namespace lidarflow
