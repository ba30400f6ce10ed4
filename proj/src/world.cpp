#include "lidarflow/world.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "lidarflow/parallel.hpp"

namespace lidarflow {
namespace {

constexpr double kRayEpsilon = 1e-9;
constexpr double kPi = std::numbers::pi;

double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
double norm(Vec2 a) { return std::hypot(a.x, a.y); }

double intersect_segment(Vec2 origin, Vec2 dir, const Segment& s) {
  const Vec2 w = s.b - s.a;
  const double denom = cross(dir, w);
  if (std::abs(denom) < 1e-15) return Scan::kNoReturn;
  const Vec2 ao = s.a - origin;
  const double t = cross(ao, w) / denom;
  const double u = cross(ao, dir) / denom;
  if (t <= kRayEpsilon || u < 0.0 || u > 1.0) return Scan::kNoReturn;
  return t;
}

double intersect_disc(Vec2 origin, Vec2 dir, Vec2 center, double radius) {
  const Vec2 f = origin - center;
  const double b = dot(f, dir);
  const double c = dot(f, f) - radius * radius;
  const double disc = b * b - c;
  if (disc < 0) return Scan::kNoReturn;
  const double sq = std::sqrt(disc);
  const double t1 = -b - sq;
  const double t2 = -b + sq;
  if (t1 > kRayEpsilon) return t1;
  if (t2 > kRayEpsilon) return t2;
  return Scan::kNoReturn;
}

double intersect_box(Vec2 origin, Vec2 dir, const Object& box) {
  const Vec2 o = rotate(origin - box.center, -box.heading);
  const Vec2 d = rotate(dir, -box.heading);
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  const double oc[2] = {o.x, o.y};
  const double dc[2] = {d.x, d.y};
  const double half[2] = {box.half_extents.x, box.half_extents.y};
  for (int a = 0; a < 2; ++a) {
    if (std::abs(dc[a]) < 1e-15) {
      if (std::abs(oc[a]) > half[a]) return Scan::kNoReturn;
      continue;
    }
    double t0 = (-half[a] - oc[a]) / dc[a];
    double t1 = (half[a] - oc[a]) / dc[a];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
  }
  if (tmax < tmin) return Scan::kNoReturn;
  if (tmin > kRayEpsilon) return tmin;
  if (tmax > kRayEpsilon) return tmax;
  return Scan::kNoReturn;
}

double bounding_radius(const Object& o) {
  return o.shape == ShapeKind::disc ? o.radius : norm(o.half_extents);
}

bool is_moving(const Object& o) { return o.velocity.x != 0 || o.velocity.y != 0; }

Pose2 integrate_ego(const Pose2& p, double speed, double turn_rate, double dt) {
  Pose2 out = p;
  if (std::abs(turn_rate) < 1e-12) {
    out.x += speed * std::cos(p.heading) * dt;
    out.y += speed * std::sin(p.heading) * dt;
  } else {
    const double h1 = p.heading + turn_rate * dt;
    out.x += speed / turn_rate * (std::sin(h1) - std::sin(p.heading));
    out.y += speed / turn_rate * (std::cos(p.heading) - std::cos(h1));
    out.heading = h1;
  }
  return out;
}

// Moves a material point of `label` from its pose in `from` to its pose in `to`.
Vec2 carry_point(Vec2 p, int label, const WorldState& from, const WorldState& to) {
  if (label == kStaticId) return p;
  const Object& a = from.objects[static_cast<std::size_t>(label)];
  const Object& b = to.objects[static_cast<std::size_t>(label)];
  const Vec2 body = rotate(p - a.center, -a.heading);
  return b.center + rotate(body, b.heading);
}

FlowField flow_from_labels(const Grid<int>& labels, const WorldState& from,
                           const WorldState& to, const GridSpec& grid) {
  FlowField flow(grid.rows, grid.cols);
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const int label = labels.at(r, c);
      if (label == kNoHitId) continue;
      const Vec2 m{c + 0.5, r + 0.5};
      const Vec2 p = map_to_world(from.ego_pose, m, grid);
      const Vec2 q = carry_point(p, label, from, to);
      const Vec2 m2 = world_to_map(to.ego_pose, q, grid);
      const std::size_t i = labels.index(r, c);
      flow.dx[i] = static_cast<float>(m2.x - m.x);
      flow.dy[i] = static_cast<float>(m2.y - m.y);
      flow.defined[i] = 1;
    }
  }
  return flow;
}

void check_identities(const WorldState& a, const WorldState& b) {
  if (a.objects.size() != b.objects.size())
    throw ParameterError("ground_truth_flow: worlds hold different object sets");
  for (std::size_t k = 0; k < a.objects.size(); ++k) {
    if (a.objects[k].id != b.objects[k].id || a.objects[k].id != static_cast<int>(k))
      throw ParameterError("ground_truth_flow: object identity mismatch at index " +
                           std::to_string(k));
  }
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  if (hi <= lo) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  if (hi <= lo) return lo;
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// World rectangle covered by the grid when the ego sits at the origin facing +y.
struct Footprint {
  double x_lo, x_hi, y_lo, y_hi;
};

Footprint footprint(const GridSpec& g) {
  return Footprint{-g.sensor_u() * g.cell_size, (g.cols - g.sensor_u()) * g.cell_size,
                   (g.sensor_v() - g.rows) * g.cell_size, g.sensor_v() * g.cell_size};
}

Object random_disc(std::mt19937_64& rng, const ScenarioConfig& cfg, int id) {
  Object o;
  o.id = id;
  o.shape = ShapeKind::disc;
  o.radius = uniform(rng, cfg.disc_radius_min, cfg.disc_radius_max);
  const double speed = uniform(rng, cfg.speed_min, cfg.speed_max);
  const double dir = uniform(rng, 0.0, 2 * kPi);
  o.velocity = {speed * std::cos(dir), speed * std::sin(dir)};
  return o;
}

bool overlaps_any(Vec2 c, double r, const std::vector<Object>& objects) {
  for (const auto& o : objects) {
    if (norm(c - o.center) < r + bounding_radius(o)) return true;
  }
  return false;
}

}  // namespace

Vec2 world_to_ego(const Pose2& ego, Vec2 p) {
  const Vec2 d = p - ego.position();
  const double c = std::cos(ego.heading), s = std::sin(ego.heading);
  return {d.x * c + d.y * s, -d.x * s + d.y * c};
}

Vec2 world_to_map(const Pose2& ego, Vec2 p, const GridSpec& grid) {
  const Vec2 e = world_to_ego(ego, p);
  return {grid.sensor_u() - e.y / grid.cell_size, grid.sensor_v() - e.x / grid.cell_size};
}

Vec2 map_to_world(const Pose2& ego, Vec2 uv, const GridSpec& grid) {
  const double forward = (grid.sensor_v() - uv.y) * grid.cell_size;
  const double left = (grid.sensor_u() - uv.x) * grid.cell_size;
  const double c = std::cos(ego.heading), s = std::sin(ego.heading);
  return {ego.x + forward * c - left * s, ego.y + forward * s + left * c};
}

WorldState step_world(const WorldState& world, double dt) {
  WorldState out = world;
  out.time += dt;
  out.ego_pose = integrate_ego(world.ego_pose, world.ego_speed, world.ego_turn_rate, dt);
  const Vec2 ego = out.ego_pose.position();
  for (auto& o : out.objects) {
    o.center = o.center + dt * o.velocity;
    o.heading += o.angular_velocity * dt;
    if (!is_moving(o)) continue;
    const double r = bounding_radius(o);
    if (world.arena.enabled) {
      const Arena& a = world.arena;
      if (o.center.x - r < a.xmin) {
        o.center.x = 2 * (a.xmin + r) - o.center.x;
        o.velocity.x = std::abs(o.velocity.x);
      } else if (o.center.x + r > a.xmax) {
        o.center.x = 2 * (a.xmax - r) - o.center.x;
        o.velocity.x = -std::abs(o.velocity.x);
      }
      if (o.center.y - r < a.ymin) {
        o.center.y = 2 * (a.ymin + r) - o.center.y;
        o.velocity.y = std::abs(o.velocity.y);
      } else if (o.center.y + r > a.ymax) {
        o.center.y = 2 * (a.ymax - r) - o.center.y;
        o.velocity.y = -std::abs(o.velocity.y);
      }
    }
    const Vec2 d = o.center - ego;
    const double dist = norm(d);
    const double min_dist = r + world.sensor_clearance;
    if (dist < min_dist && dist > 0) {
      const Vec2 n = (1.0 / dist) * d;
      const double vn = dot(o.velocity, n);
      if (vn < 0) o.velocity = o.velocity - (2 * vn) * n;
      o.center = ego + min_dist * n;
    }
  }
  return out;
}

std::vector<BeamHit> cast_beams(const WorldState& world, const ScanSpec& spec) {
  if (spec.beam_count < 1) throw ParameterError("ScanSpec: beam_count must be positive");
  std::vector<BeamHit> hits(static_cast<std::size_t>(spec.beam_count));
  const Vec2 origin = world.ego_pose.position();
  for (int k = 0; k < spec.beam_count; ++k) {
    const double a = spec.beam_count > 1
                         ? spec.angle_min + k * (spec.angle_max - spec.angle_min) / (spec.beam_count - 1)
                         : spec.angle_min;
    const Vec2 dir{std::sin(a + world.ego_pose.heading), -std::cos(a + world.ego_pose.heading)};
    BeamHit best;
    for (const auto& s : world.segments) {
      const double t = intersect_segment(origin, dir, s);
      if (t < best.range) best = {t, kStaticId};
    }
    for (const auto& o : world.objects) {
      const double t = o.shape == ShapeKind::disc ? intersect_disc(origin, dir, o.center, o.radius)
                                                  : intersect_box(origin, dir, o);
      if (t < best.range) best = {t, o.id};
    }
    if (best.range > spec.range_max) best = BeamHit{};
    hits[static_cast<std::size_t>(k)] = best;
  }
  return hits;
}

Scan sense(const WorldState& world, const ScanSpec& spec, std::mt19937_64* noise) {
  const std::vector<BeamHit> hits = cast_beams(world, spec);
  Scan scan;
  scan.angle_min = spec.angle_min;
  scan.angle_max = spec.angle_max;
  scan.range_max = spec.range_max;
  scan.timestamp = world.time;
  scan.ranges.reserve(hits.size());
  std::normal_distribution<double> jitter(0.0, spec.range_noise_std);
  for (const auto& h : hits) {
    double r = h.range;
    if (!Scan::is_no_return(r) && noise && spec.range_noise_std > 0) {
      r = std::clamp(r + jitter(*noise), 1e-3, spec.range_max);
    }
    scan.ranges.push_back(r);
  }
  return scan;
}

Grid<int> label_map(const WorldState& world, const std::vector<BeamHit>& hits,
                    const ScanSpec& spec, const GridSpec& grid) {
  (void)world;
  Grid<int> labels(grid.rows, grid.cols, kNoHitId);
  std::map<std::size_t, std::map<int, int>> votes;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    if (hits[k].object_id == kNoHitId) continue;
    const double a = hits.size() > 1
                         ? spec.angle_min + static_cast<double>(k) * (spec.angle_max - spec.angle_min) /
                                                static_cast<double>(hits.size() - 1)
                         : spec.angle_min;
    const Cell c = endpoint_cell(a, hits[k].range, grid);
    if (!labels.contains(c.row, c.col)) continue;
    ++votes[labels.index(c.row, c.col)][hits[k].object_id];
  }
  for (const auto& [cell, tally] : votes) {
    int best_id = kNoHitId, best_count = -1;
    for (const auto& [id, count] : tally) {
      if (count > best_count) {
        best_id = id;
        best_count = count;
      }
    }
    labels.cells[cell] = best_id;
  }
  return labels;
}

FlowPair ground_truth_flow(const WorldState& world_t, const WorldState& world_t1,
                           const GridSpec& grid, const ScanSpec& spec) {
  check_identities(world_t, world_t1);
  const Grid<int> labels_t = label_map(world_t, cast_beams(world_t, spec), spec, grid);
  const Grid<int> labels_t1 = label_map(world_t1, cast_beams(world_t1, spec), spec, grid);
  return FlowPair{flow_from_labels(labels_t1, world_t1, world_t, grid),
                  flow_from_labels(labels_t, world_t, world_t1, grid)};
}

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::static_platform: return "static_platform";
    case Scenario::dynamic_platform: return "dynamic_platform";
    case Scenario::single_disc: return "single_disc";
  }
  return "unknown";
}

Scenario parse_scenario(const std::string& name) {
  if (name == "static_platform") return Scenario::static_platform;
  if (name == "dynamic_platform") return Scenario::dynamic_platform;
  if (name == "single_disc") return Scenario::single_disc;
  throw ParameterError("unknown scenario '" + name + "'");
}

ScanSpec ScenarioConfig::scan_spec() const {
  ScanSpec spec;
  spec.beam_count = beam_count;
  spec.range_max = range_max > 0 ? range_max : grid.max_extent();
  spec.range_noise_std = range_noise_std;
  return spec;
}

void ScenarioConfig::validate() const {
  grid.validate();
  if (seq_len < 1) throw ParameterError("scenario: seq_len must be positive");
  if (!(fps > 0)) throw ParameterError("scenario: fps must be positive");
  if (beam_count < 2) throw ParameterError("scenario: beam_count must be at least 2");
  if (range_max < 0) throw ParameterError("scenario: range_max must be non-negative");
  if (disc_count_min < 0 || disc_count_max < disc_count_min)
    throw ParameterError("scenario: invalid disc count range");
  if (!(disc_radius_min > 0) || disc_radius_max < disc_radius_min)
    throw ParameterError("scenario: invalid disc radius range");
  if (speed_min < 0 || speed_max < speed_min)
    throw ParameterError("scenario: invalid speed range");
  // Per-frame displacement must stay representable on the grid.
  const double span = std::min(grid.rows, grid.cols) * grid.cell_size;
  if (speed_max / fps > 0.5 * span || ego_speed_max / fps > 0.5 * span)
    throw ParameterError("scenario: speeds exceed half the grid span per frame");
  if (ego_speed_min < 0 || ego_speed_max < ego_speed_min)
    throw ParameterError("scenario: invalid ego speed range");
  if (ego_turn_rate_max < 0) throw ParameterError("scenario: ego_turn_rate_max must be >= 0");
  if (static_box_count_max < 0) throw ParameterError("scenario: static_box_count_max must be >= 0");
}

WorldState make_world(const ScenarioConfig& cfg, std::mt19937_64& rng) {
  const Footprint fp = footprint(cfg.grid);
  const double dt = 1.0 / cfg.fps;
  WorldState world;
  world.ego_pose = Pose2{0.0, 0.0, kPi / 2};
  const Vec2 ego = world.ego_pose.position();
  constexpr int kMaxTries = 2000;

  if (cfg.scenario == Scenario::single_disc) {
    // One disc at constant velocity that stays inside the footprint, ahead
    // of the sensor, for the whole sequence.
    const int frames = cfg.seq_len + 1;
    for (int attempt = 0; attempt < kMaxTries; ++attempt) {
      Object d = random_disc(rng, cfg, 0);
      const double margin = d.radius + cfg.grid.cell_size;
      const Vec2 start{uniform(rng, fp.x_lo + margin, fp.x_hi - margin),
                       uniform(rng, 0.3 + margin, fp.y_hi - margin)};
      bool ok = true;
      for (int k = 0; k < frames && ok; ++k) {
        const Vec2 p = start + (k * dt) * d.velocity;
        ok = p.x >= fp.x_lo + margin && p.x <= fp.x_hi - margin && p.y >= 0.3 + margin &&
             p.y <= fp.y_hi - margin && norm(p - ego) > d.radius + world.sensor_clearance + 0.2;
      }
      if (!ok) continue;
      d.center = start;
      world.objects.push_back(d);
      return world;
    }
    throw ParameterError("single_disc: no trajectory fits the grid at the configured speeds");
  }

  const bool dynamic = cfg.scenario == Scenario::dynamic_platform;
  std::vector<Pose2> ego_path{world.ego_pose};
  if (dynamic) {
    world.ego_speed = uniform(rng, cfg.ego_speed_min, cfg.ego_speed_max);
    world.ego_turn_rate = uniform(rng, -cfg.ego_turn_rate_max, cfg.ego_turn_rate_max);
    for (int k = 0; k < cfg.seq_len; ++k)
      ego_path.push_back(integrate_ego(ego_path.back(), world.ego_speed, world.ego_turn_rate, dt));
  }
  const double margin = dynamic ? 1.5 : 0.0;
  const double inset = 0.15;
  const double left = fp.x_lo - margin + inset;
  const double right = fp.x_hi + margin - inset;
  const double top = fp.y_hi + margin - inset;
  const double bottom = dynamic ? fp.y_lo - 0.5 : 0.25;
  if (cfg.walls) {
    world.segments.push_back({{left, fp.y_lo - margin}, {left, top}});
    world.segments.push_back({{right, fp.y_lo - margin}, {right, top}});
    world.segments.push_back({{left, top}, {right, top}});
  }
  world.arena = Arena{true, left, right, bottom, top};

  auto near_ego_path = [&](Vec2 c, double r) {
    for (const auto& p : ego_path) {
      if (norm(c - p.position()) < r + 0.4) return true;
    }
    return false;
  };

  int next_id = 0;
  const int boxes = dynamic ? 2 + uniform_int(rng, 0, cfg.static_box_count_max)
                            : uniform_int(rng, 0, cfg.static_box_count_max);
  for (int b = 0; b < boxes; ++b) {
    for (int attempt = 0; attempt < kMaxTries; ++attempt) {
      Object o;
      o.shape = ShapeKind::box;
      o.half_extents = {uniform(rng, 0.1, 0.25), uniform(rng, 0.1, 0.25)};
      o.heading = uniform(rng, 0.0, kPi);
      const double r = bounding_radius(o);
      o.center = {uniform(rng, left + r, right - r), uniform(rng, std::max(bottom, 0.3) + r, top - r)};
      if (near_ego_path(o.center, r + 0.2) || overlaps_any(o.center, r, world.objects)) continue;
      o.id = next_id++;
      world.objects.push_back(o);
      break;
    }
  }
  const int discs = uniform_int(rng, cfg.disc_count_min, cfg.disc_count_max);
  // Discs start inside the visible footprint.
  for (int k = 0; k < discs; ++k) {
    for (int attempt = 0; attempt < kMaxTries; ++attempt) {
      Object d = random_disc(rng, cfg, 0);
      const double r = d.radius;
      d.center = {uniform(rng, std::max(left, fp.x_lo) + r, std::min(right, fp.x_hi) - r),
                  uniform(rng, 0.3 + r, std::min(top, fp.y_hi) - r)};
      if (norm(d.center - ego) < r + world.sensor_clearance + 0.3) continue;
      bool clash = false;
      for (const auto& o : world.objects) {
        if (!is_moving(o) && norm(d.center - o.center) < r + bounding_radius(o)) clash = true;
      }
      if (clash) continue;
      d.id = next_id++;
      world.objects.push_back(d);
      break;
    }
  }
  return world;
}

SequenceSample simulate_sequence(const ScenarioConfig& cfg, WorldState world) {
  const double dt = 1.0 / cfg.fps;
  const ScanSpec spec = cfg.scan_spec();
  const std::size_t frames = static_cast<std::size_t>(cfg.seq_len) + 1;
  std::vector<WorldState> worlds;
  worlds.reserve(frames);
  for (std::size_t k = 0; k < frames; ++k) {
    worlds.push_back(world);
    world = step_world(world, dt);
  }
  std::mt19937_64 noise(static_cast<std::uint64_t>(worlds.front().objects.size()) * 7919u + 17u);
  SequenceSample sample;
  std::vector<Grid<int>> labels;
  for (std::size_t k = 0; k < frames; ++k) {
    const std::vector<BeamHit> hits = cast_beams(worlds[k], spec);
    Scan scan;
    scan.angle_min = spec.angle_min;
    scan.angle_max = spec.angle_max;
    scan.range_max = spec.range_max;
    scan.timestamp = worlds[k].time;
    std::normal_distribution<double> jitter(0.0, spec.range_noise_std);
    for (const auto& h : hits) {
      double r = h.range;
      if (!Scan::is_no_return(r) && spec.range_noise_std > 0)
        r = std::clamp(r + jitter(noise), 1e-3, spec.range_max);
      scan.ranges.push_back(r);
    }
    GridPair maps = scan_to_maps(scan, cfg.grid);
    if (k + 1 < frames) {
      sample.frames.push_back(std::move(maps));
    } else {
      sample.gt_next = std::move(maps);
    }
    sample.ego_poses.push_back(worlds[k].ego_pose);
    if (cfg.has_gt_flow) labels.push_back(label_map(worlds[k], hits, spec, cfg.grid));
  }
  if (cfg.has_gt_flow) {
    for (std::size_t k = 0; k + 1 < frames; ++k) {
      sample.gt_flow_backward.push_back(flow_from_labels(labels[k + 1], worlds[k + 1], worlds[k], cfg.grid));
      sample.gt_flow_forward.push_back(flow_from_labels(labels[k], worlds[k], worlds[k + 1], cfg.grid));
    }
  }
  return sample;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  // splitmix64 over the combined key
  std::uint64_t z = master + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::vector<SequenceSample> generate_dataset(const ScenarioConfig& config, std::size_t count,
                                             std::uint64_t seed) {
  config.validate();
  if (count == 0) throw ParameterError("generate_dataset: count must be positive");
  std::vector<SequenceSample> out(count);
  parallel_for(count, [&](std::size_t k) {
    std::mt19937_64 rng(derive_seed(seed, k));
    out[k] = simulate_sequence(config, make_world(config, rng));
  });
  return out;
}

}  // namespace lidarflow
