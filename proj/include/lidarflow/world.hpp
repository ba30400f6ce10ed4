#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lidarflow/grid.hpp"
#include "lidarflow/scan.hpp"

namespace lidarflow {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline Vec2 rotate(Vec2 p, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * p.x - s * p.y, s * p.x + c * p.y};
}

// World-frame pose; heading is the direction of the sensor's forward axis.
struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double heading = std::numbers::pi / 2;

  Vec2 position() const { return {x, y}; }
  friend bool operator==(const Pose2&, const Pose2&) = default;
};

struct Segment {
  Vec2 a;
  Vec2 b;
};

enum class ShapeKind : std::uint8_t { disc, box };

struct Object {
  int id = 0;
  ShapeKind shape = ShapeKind::disc;
  Vec2 center;
  double heading = 0.0;
  double radius = 0.25;          // disc
  Vec2 half_extents{0.2, 0.2};   // box, in its own frame
  Vec2 velocity;                 // m/s
  double angular_velocity = 0.0; // rad/s
};

// Axis-aligned rectangle objects bounce off. Disabled arenas let objects
// move freely.
struct Arena {
  bool enabled = false;
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
};

struct WorldState {
  std::vector<Segment> segments;
  std::vector<Object> objects;
  Pose2 ego_pose;
  double ego_speed = 0.0;     // forward, m/s
  double ego_turn_rate = 0.0; // rad/s
  double time = 0.0;
  Arena arena;
  // Moving objects are kept at least this far (plus their radius) from the sensor.
  double sensor_clearance = 0.15;
};

struct ScanSpec {
  int beam_count = 541;
  double range_max = 10.0;
  double angle_min = 0.0;
  double angle_max = std::numbers::pi;
  double range_noise_std = 0.0;
};

// Object id for returns from static segments, and for no return.
inline constexpr int kStaticId = -1;
inline constexpr int kNoHitId = -2;

struct BeamHit {
  double range = Scan::kNoReturn;
  int object_id = kNoHitId;
};

// Continuous map coordinates (u = column, v = row, in cells) of a world point
// seen from `ego`.
Vec2 world_to_map(const Pose2& ego, Vec2 p, const GridSpec& grid);
Vec2 map_to_world(const Pose2& ego, Vec2 uv, const GridSpec& grid);
// Sensor-frame coordinates: x forward, y left.
Vec2 world_to_ego(const Pose2& ego, Vec2 p);

// Advances objects by velocity*dt and heading by angular_velocity*dt, integrates
// the ego twist, and reflects objects off the arena and the sensor clearance.
WorldState step_world(const WorldState& world, double dt);

std::vector<BeamHit> cast_beams(const WorldState& world, const ScanSpec& spec);

// Nearest analytic intersection per beam; kNoReturn beyond range_max.
Scan sense(const WorldState& world, const ScanSpec& spec, std::mt19937_64* noise = nullptr);

// Occupancy with object labels per cell, derived from cast_beams. Cells hit by
// several objects take the label with the most hits (ties: smallest id).
Grid<int> label_map(const WorldState& world, const std::vector<BeamHit>& hits,
                    const ScanSpec& spec, const GridSpec& grid);

struct FlowPair {
  FlowField backward;
  FlowField forward;
};

// Backward flow on cells occupied at t+1 (O^{t+1}_i = O^t_{i+B_i}); forward flow
// on cells occupied at t. Displacements follow the rigid motion of the
// object that produced the return, composed with ego motion.
FlowPair ground_truth_flow(const WorldState& world_t, const WorldState& world_t1,
                           const GridSpec& grid, const ScanSpec& spec);

enum class Scenario : std::uint8_t { static_platform = 0, dynamic_platform = 1, single_disc = 2 };

std::string to_string(Scenario s);
// Throws ParameterError on an unknown name.
Scenario parse_scenario(const std::string& name);

struct ScenarioConfig {
  Scenario scenario = Scenario::static_platform;
  int seq_len = 20;
  GridSpec grid{32, 32, 0.1};
  double fps = 15.0;
  int beam_count = 541;
  double range_max = 0.0;  // 0: reach the farthest grid corner
  double range_noise_std = 0.0;
  int disc_count_min = 1;
  int disc_count_max = 3;
  double disc_radius_min = 0.15;
  double disc_radius_max = 0.3;
  double speed_min = 0.5;  // walking people, m/s
  double speed_max = 1.5;
  int static_box_count_max = 2;
  double ego_speed_min = 0.0;  // dynamic platform only
  double ego_speed_max = 1.0;
  double ego_turn_rate_max = 0.5;
  bool walls = true;
  bool has_gt_flow = true;

  ScanSpec scan_spec() const;
  void validate() const;
};

struct SequenceSample {
  std::vector<GridPair> frames;               // seq_len frames
  GridPair gt_next;                           // frame seq_len
  std::vector<FlowField> gt_flow_backward;    // between frame t and t+1, t < seq_len
  std::vector<FlowField> gt_flow_forward;
  std::vector<Pose2> ego_poses;               // seq_len + 1 poses

  friend bool operator==(const SequenceSample& a, const SequenceSample& b) {
    return a.frames == b.frames && a.gt_next == b.gt_next &&
           a.gt_flow_backward == b.gt_flow_backward && a.gt_flow_forward == b.gt_flow_forward;
  }
};

// Initial world of one sequence.
WorldState make_world(const ScenarioConfig& config, std::mt19937_64& rng);

// Simulates one sequence from an initial world.
SequenceSample simulate_sequence(const ScenarioConfig& config, WorldState world);

// Deterministic for a fixed seed; sequences are generated in parallel with
// per-sequence seeds derived from `seed`.
std::vector<SequenceSample> generate_dataset(const ScenarioConfig& config, std::size_t count,
                                             std::uint64_t seed);

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

}  // namespace lidarflow
