#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "lidarflow/error.hpp"

namespace lidarflow {

// Row-major H x W grid of cells.
template <typename V>
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<V> cells;

  Grid() = default;
  Grid(int r, int c, V fill = V{})
      : rows(r), cols(c), cells(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {
    if (r < 0 || c < 0) throw ParameterError("Grid: negative dimensions");
  }

  bool contains(int r, int c) const noexcept { return r >= 0 && r < rows && c >= 0 && c < cols; }
  std::size_t index(int r, int c) const noexcept {
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) +
           static_cast<std::size_t>(c);
  }
  V& at(int r, int c) noexcept { return cells[index(r, c)]; }
  const V& at(int r, int c) const noexcept { return cells[index(r, c)]; }
  std::size_t size() const noexcept { return cells.size(); }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using BinaryGrid = Grid<std::uint8_t>;
using RealGrid = Grid<double>;

// Occupancy O and visibility V of one scan.
struct GridPair {
  BinaryGrid occupancy;
  BinaryGrid visibility;

  friend bool operator==(const GridPair&, const GridPair&) = default;
};

// Per-cell displacement in cell units (dx = column offset, dy = row offset).
// Cells with `defined == 0` carry no flow.
struct FlowField {
  int rows = 0;
  int cols = 0;
  std::vector<float> dx;
  std::vector<float> dy;
  std::vector<std::uint8_t> defined;

  FlowField() = default;
  FlowField(int r, int c)
      : rows(r),
        cols(c),
        dx(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0f),
        dy(dx.size(), 0.0f),
        defined(dx.size(), 0) {}

  std::size_t size() const noexcept { return dx.size(); }
  std::size_t defined_count() const noexcept {
    std::size_t n = 0;
    for (auto d : defined) n += d ? 1 : 0;
    return n;
  }

  friend bool operator==(const FlowField&, const FlowField&) = default;
};

}  // namespace lidarflow
