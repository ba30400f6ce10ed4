#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "lidarflow/ops.hpp"
#include "lidarflow/world.hpp"

using namespace lidarflow;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kDt = 1.0 / 15.0;

Object disc(int id, Vec2 c, double r, Vec2 v = {}) {
  Object o;
  o.id = id;
  o.shape = ShapeKind::disc;
  o.center = c;
  o.radius = r;
  o.velocity = v;
  return o;
}

Object box(int id, Vec2 c, Vec2 half, double heading, double omega = 0.0) {
  Object o;
  o.id = id;
  o.shape = ShapeKind::box;
  o.center = c;
  o.half_extents = half;
  o.heading = heading;
  o.angular_velocity = omega;
  return o;
}

ScanSpec odd_fan(int beams = 361, double range_max = 10.0) {
  ScanSpec s;
  s.beam_count = beams;
  s.range_max = range_max;
  return s;
}

bool inside(const Object& o, Vec2 p) {
  if (o.shape == ShapeKind::disc) {
    const Vec2 d = p - o.center;
    return dot(d, d) <= o.radius * o.radius;
  }
  const Vec2 q = rotate(p - o.center, -o.heading);
  return std::abs(q.x) <= o.half_extents.x && std::abs(q.y) <= o.half_extents.y;
}

double side(const Segment& s, Vec2 p) {
  const Vec2 d = s.b - s.a, e = p - s.a;
  return d.x * e.y - d.y * e.x;
}

// March the beam in 1 mm steps until it enters a shape or crosses a segment.
double march_range(const WorldState& w, double world_angle, double range_max) {
  const Vec2 o = w.ego_pose.position();
  const Vec2 dir{std::cos(world_angle), std::sin(world_angle)};
  Vec2 prev = o;
  for (int k = 1; k * 1e-3 <= range_max; ++k) {
    const Vec2 p = o + (k * 1e-3) * dir;
    for (const Object& ob : w.objects)
      if (inside(ob, p)) return k * 1e-3;
    for (const Segment& s : w.segments) {
      const double a = side(s, prev), b = side(s, p);
      if ((a <= 0 && b >= 0) || (a >= 0 && b <= 0)) {
        // Crossing the line: also within the segment's extent?
        const Vec2 d = s.b - s.a;
        const double t = dot(p - s.a, d) / dot(d, d);
        if (t >= -1e-3 && t <= 1 + 1e-3) return k * 1e-3;
      }
    }
    prev = p;
  }
  return Scan::kNoReturn;
}

std::size_t occupied(const BinaryGrid& g) {
  std::size_t n = 0;
  for (auto c : g.cells) n += c;
  return n;
}

}  // namespace

TEST(StepWorld, ZeroVelocitiesOnlyAdvanceTime) {
  WorldState w;
  w.objects = {disc(0, {1, 2}, 0.3), box(1, {-1, 2}, {0.2, 0.1}, 0.3)};
  const WorldState n = step_world(w, kDt);
  EXPECT_DOUBLE_EQ(n.time, kDt);
  ASSERT_EQ(n.objects.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(n.objects[k].center, w.objects[k].center);
    EXPECT_EQ(n.objects[k].heading, w.objects[k].heading);
  }
  EXPECT_EQ(n.ego_pose, w.ego_pose);
}

TEST(StepWorld, DiscAdvancesByVelocity) {
  WorldState w;
  w.objects = {disc(0, {2, 2}, 0.3, {1.5, 0})};
  const WorldState n = step_world(w, kDt);
  EXPECT_NEAR(n.objects[0].center.x, 2.1, 1e-12);
  EXPECT_NEAR(n.objects[0].center.y, 2.0, 1e-12);
}

TEST(StepWorld, EgoMotionShiftsObjectsInEgoFrame) {
  WorldState w;
  w.ego_speed = 1.5;
  w.objects = {disc(0, {0.5, 3}, 0.3), disc(1, {-2, 1}, 0.2)};
  const WorldState n = step_world(w, kDt);
  for (std::size_t k = 0; k < 2; ++k) {
    const Vec2 before = world_to_ego(w.ego_pose, w.objects[k].center);
    const Vec2 after = world_to_ego(n.ego_pose, n.objects[k].center);
    EXPECT_NEAR(after.x - before.x, -0.1, 1e-12);
    EXPECT_NEAR(after.y - before.y, 0.0, 1e-12);
  }
}

TEST(StepWorld, ArcIntegrationForTurningEgo) {
  WorldState w;
  w.ego_speed = 1.0;
  w.ego_turn_rate = 0.5;
  w.ego_pose = Pose2{0, 0, 0};
  WorldState n = w;
  for (int k = 0; k < 15; ++k) n = step_world(n, kDt);
  // One second on a circle of radius 2 about (0, 2).
  EXPECT_NEAR(n.ego_pose.heading, 0.5, 1e-12);
  EXPECT_NEAR(n.ego_pose.x, 2 * std::sin(0.5), 1e-12);
  EXPECT_NEAR(n.ego_pose.y, 2 - 2 * std::cos(0.5), 1e-12);
}

TEST(StepWorld, ReflectsOffArena) {
  WorldState w;
  w.arena = Arena{true, -1, 1, 0.5, 3};
  w.objects = {disc(0, {0.75, 2}, 0.2, {3, 0})};
  const WorldState n = step_world(w, kDt);
  EXPECT_LE(n.objects[0].center.x + 0.2, 1.0 + 1e-12);
  EXPECT_LT(n.objects[0].velocity.x, 0.0);
}

TEST(Sense, EmptyWorldHasNoReturns) {
  const Scan s = sense(WorldState{}, odd_fan());
  ASSERT_EQ(s.ranges.size(), 361u);
  for (double r : s.ranges) EXPECT_TRUE(Scan::is_no_return(r));
}

TEST(Sense, DiscStraightAhead) {
  WorldState w;
  w.objects = {disc(0, {0, 3}, 0.5)};
  const Scan s = sense(w, odd_fan());
  EXPECT_NEAR(s.ranges[180], 2.5, 1e-12);
  EXPECT_NEAR(s.beam_angle(180), kPi / 2, 1e-15);
}

TEST(Sense, RandomScenesMatchMarchingOracle) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> px(-3, 3), py(0.6, 4), rad(0.1, 0.5), ang(0, kPi);
  for (int trial = 0; trial < 4; ++trial) {
    WorldState w;
    w.ego_pose = Pose2{0, 0, kPi / 2 + (trial - 2) * 0.3};
    for (int k = 0; k < 3; ++k) w.objects.push_back(disc(k, {px(rng), py(rng)}, rad(rng)));
    for (int k = 3; k < 5; ++k) w.objects.push_back(box(k, {px(rng), py(rng)}, {rad(rng), rad(rng)}, ang(rng)));
    w.segments = {Segment{{-4, 4.5}, {4, 4.5}}, Segment{{-4, -1}, {-4, 4.5}}, Segment{{4.2, -1}, {3.5, 5}}};
    const ScanSpec spec = odd_fan(91, 8.0);
    const Scan s = sense(w, spec);
    for (std::size_t b = 0; b < s.ranges.size(); ++b) {
      const double world_angle = s.beam_angle(b) + w.ego_pose.heading - kPi / 2;
      const double want = march_range(w, world_angle, spec.range_max);
      if (Scan::is_no_return(want)) {
        EXPECT_TRUE(Scan::is_no_return(s.ranges[b])) << "beam " << b;
      } else {
        EXPECT_NEAR(s.ranges[b], want, 2e-3) << "trial " << trial << " beam " << b;
      }
    }
  }
}

TEST(Sense, NoiseIsSeededAndClamped) {
  WorldState w;
  w.objects = {disc(0, {0, 3}, 0.5)};
  ScanSpec spec = odd_fan(181, 5.0);
  spec.range_noise_std = 0.01;
  std::mt19937_64 a(5), b(5);
  const Scan s1 = sense(w, spec, &a), s2 = sense(w, spec, &b);
  EXPECT_EQ(s1.ranges, s2.ranges);
  EXPECT_NE(s1.ranges[90], 2.5);
  for (double r : s1.ranges) EXPECT_TRUE(Scan::is_no_return(r) || (r > 0 && r <= 5.0));
}

TEST(GroundTruthFlow, StaticWorldIsZero) {
  WorldState w;
  w.objects = {disc(0, {0.3, 1.5}, 0.3), box(1, {-0.8, 2}, {0.2, 0.3}, 0.4)};
  w.segments = {Segment{{-2, 2.8}, {2, 2.8}}};
  const GridSpec g{32, 32, 0.1};
  const FlowPair f = ground_truth_flow(w, step_world(w, kDt), g, odd_fan(541, 5.0));
  ASSERT_GT(f.backward.defined_count(), 10u);
  for (std::size_t i = 0; i < f.backward.size(); ++i) {
    if (!f.backward.defined[i]) continue;
    EXPECT_NEAR(f.backward.dx[i], 0.0, 1e-5);
    EXPECT_NEAR(f.backward.dy[i], 0.0, 1e-5);
  }
}

TEST(GroundTruthFlow, TranslatingDiscSamplesOneCellBack) {
  WorldState w;
  w.objects = {disc(0, {0.2, 1.5}, 0.3, {1.5, 0})};
  const GridSpec g{32, 32, 0.1};
  const FlowPair f = ground_truth_flow(w, step_world(w, kDt), g, odd_fan(541, 5.0));
  ASSERT_GT(f.backward.defined_count(), 3u);
  for (std::size_t i = 0; i < f.backward.size(); ++i) {
    if (f.backward.defined[i]) {
      EXPECT_NEAR(f.backward.dx[i], -1.0, 1e-5);
      EXPECT_NEAR(f.backward.dy[i], 0.0, 1e-5);
    }
    if (f.forward.defined[i]) {
      EXPECT_NEAR(f.forward.dx[i], 1.0, 1e-5);
      EXPECT_NEAR(f.forward.dy[i], 0.0, 1e-5);
    }
  }
}

TEST(GroundTruthFlow, RotatingBoxFlowGrowsWithRadius) {
  WorldState w;
  const double omega = 3.0;
  w.objects = {box(0, {0.0, 1.6}, {0.6, 0.4}, 0.2, omega)};
  const GridSpec g{40, 40, 0.1};
  const WorldState n = step_world(w, kDt);
  const FlowPair f = ground_truth_flow(w, n, g, odd_fan(721, 5.0));
  ASSERT_GT(f.backward.defined_count(), 5u);
  // Rigid rotation by theta moves a point at radius r by 2 r sin(theta / 2).
  const double chord = 2 * std::sin(omega * kDt / 2);
  for (int r = 0; r < g.rows; ++r)
    for (int c = 0; c < g.cols; ++c) {
      const std::size_t i = static_cast<std::size_t>(r * g.cols + c);
      if (!f.backward.defined[i]) continue;
      const Vec2 p = map_to_world(n.ego_pose, Vec2{c + 0.5, r + 0.5}, g);
      const Vec2 d = p - n.objects[0].center;
      const double radius = std::sqrt(dot(d, d));
      const double mag = std::hypot(f.backward.dx[i], f.backward.dy[i]) * g.cell_size;
      EXPECT_NEAR(mag, chord * radius, 1e-5) << r << "," << c;
    }
}

TEST(GroundTruthFlow, IdentityMismatchIsRejected) {
  WorldState a;
  a.objects = {disc(0, {0, 2}, 0.3)};
  WorldState b = a;
  b.objects[0].id = 7;
  EXPECT_THROW(ground_truth_flow(a, b, GridSpec{32, 32, 0.1}, odd_fan()), ParameterError);
  WorldState c = a;
  c.objects.push_back(disc(1, {1, 2}, 0.3));
  EXPECT_THROW(ground_truth_flow(a, c, GridSpec{32, 32, 0.1}, odd_fan()), ParameterError);
}

TEST(MapFrame, RoundTripAndOrientation) {
  const GridSpec g{32, 32, 0.1};
  const Pose2 ego{1.0, -2.0, 0.7};
  const Vec2 p{1.3, -1.1};
  const Vec2 back = map_to_world(ego, world_to_map(ego, p, g), g);
  EXPECT_NEAR(back.x, p.x, 1e-12);
  EXPECT_NEAR(back.y, p.y, 1e-12);
  // Default heading: world +y is up (smaller row), world +x is right.
  const Pose2 up;
  const Vec2 ahead = world_to_map(up, Vec2{0, 1}, g), right = world_to_map(up, Vec2{1, 0}, g);
  EXPECT_NEAR(ahead.y, g.sensor_v() - 10, 1e-12);
  EXPECT_NEAR(right.x, g.sensor_u() + 10, 1e-12);
}

TEST(GenerateDataset, DeterministicPerSeed) {
  ScenarioConfig sc;
  sc.scenario = Scenario::dynamic_platform;
  sc.seq_len = 8;
  const auto a = generate_dataset(sc, 3, 42);
  const auto b = generate_dataset(sc, 3, 42);
  const auto c = generate_dataset(sc, 3, 43);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
}

TEST(GenerateDataset, CountsFramesAndFlows) {
  ScenarioConfig sc;
  const auto d = generate_dataset(sc, 10, 1);
  ASSERT_EQ(d.size(), 10u);
  for (const auto& s : d) {
    EXPECT_EQ(s.frames.size() + 1, 21u);
    EXPECT_EQ(s.gt_flow_backward.size(), 20u);
    EXPECT_EQ(s.gt_flow_forward.size(), 20u);
    EXPECT_EQ(s.ego_poses.size(), 21u);
  }
}

TEST(GenerateDataset, StaticPlatformKeepsEgoPose) {
  ScenarioConfig sc;
  sc.scenario = Scenario::static_platform;
  for (const auto& s : generate_dataset(sc, 4, 2))
    for (const auto& p : s.ego_poses) EXPECT_EQ(p, s.ego_poses.front());
}

TEST(GenerateDataset, DynamicPlatformMoves) {
  ScenarioConfig sc;
  sc.scenario = Scenario::dynamic_platform;
  std::size_t moving = 0;
  for (const auto& s : generate_dataset(sc, 6, 3)) moving += !(s.ego_poses.back() == s.ego_poses.front());
  EXPECT_GT(moving, 0u);
}

TEST(GenerateDataset, UnknownScenarioRejected) {
  EXPECT_THROW(parse_scenario("sideways"), ParameterError);
  EXPECT_EQ(parse_scenario("static_platform"), Scenario::static_platform);
  EXPECT_EQ(parse_scenario(to_string(Scenario::single_disc)), Scenario::single_disc);
}

TEST(GenerateDataset, TooFastObjectsRejected) {
  ScenarioConfig sc;
  sc.speed_max = 60.0;  // 4 m per frame against a 3.2 m grid
  EXPECT_THROW(sc.validate(), ParameterError);
}

TEST(GenerateDataset, ObjectsKeepClearOfSensor) {
  ScenarioConfig sc;
  sc.scenario = Scenario::dynamic_platform;
  std::mt19937_64 rng(9);
  for (int k = 0; k < 5; ++k) {
    WorldState w = make_world(sc, rng);
    for (int t = 0; t <= sc.seq_len; ++t) {
      for (const Object& o : w.objects) {
        const Vec2 d = o.center - w.ego_pose.position();
        const double reach = o.shape == ShapeKind::disc ? o.radius : std::hypot(o.half_extents.x, o.half_extents.y);
        EXPECT_GT(std::sqrt(dot(d, d)), reach);
      }
      w = step_world(w, 1.0 / sc.fps);
    }
  }
}

namespace {

Tensor<double> as_tensor(const BinaryGrid& g) {
  Tensor<double> t(Shape{1, 1, static_cast<std::size_t>(g.rows), static_cast<std::size_t>(g.cols)});
  for (std::size_t i = 0; i < g.size(); ++i) t[i] = g.cells[i];
  return t;
}

Tensor<double> as_tensor(const FlowField& b, bool zero = false) {
  Tensor<double> t(Shape{1, 2, static_cast<std::size_t>(b.rows), static_cast<std::size_t>(b.cols)});
  for (std::size_t i = 0; i < b.size(); ++i) {
    t[i] = b.defined[i] && !zero ? b.dx[i] : 0.0;
    t[b.size() + i] = b.defined[i] && !zero ? b.dy[i] : 0.0;
  }
  return t;
}

}  // namespace

TEST(GroundTruthFlow, WarpingReproducesNextFrameOnWholeCellMotion) {
  // One cell per frame sideways: the true flow is integral, so the warp
  // copies O^t cells and only the changing silhouette can disagree.
  const GridSpec g{32, 32, 0.1};
  const ScanSpec spec = odd_fan(541, g.max_extent());
  WorldState w;
  w.objects = {disc(0, {-0.8, 1.6}, 0.3, {g.cell_size / kDt, 0.0})};
  auto maps = [&](const WorldState& s) {
    Scan sc = sense(s, spec);
    sc.range_max = spec.range_max;
    return scan_to_maps(sc, g);
  };
  std::size_t checked = 0, within = 0;
  for (int k = 0; k < 12; ++k) {
    const WorldState n = step_world(w, kDt);
    const FlowPair fp = ground_truth_flow(w, n, g, spec);
    const auto warped = bilinear_warp(as_tensor(maps(w).occupancy), as_tensor(fp.backward));
    const BinaryGrid next = maps(n).occupancy;
    for (std::size_t i = 0; i < next.size(); ++i) {
      if (!fp.backward.defined[i]) continue;
      EXPECT_NEAR(fp.backward.dx[i], -1.0, 1e-4);
      EXPECT_NEAR(fp.backward.dy[i], 0.0, 1e-4);
      ++checked;
      within += std::abs(warped[i] - next.cells[i]) <= 0.5;
    }
    w = n;
  }
  ASSERT_GT(checked, 50u);
  EXPECT_GE(static_cast<double>(within), 0.9 * static_cast<double>(checked));
}

TEST(GroundTruthFlow, WarpingTracksNextFrameOnSubCellMotion) {
  // Surfaces are one cell thick and re-rasterize as the view angle changes,
  // so single cells can flip; on aggregate the warp stays inside the 0.5
  // discretization bound and beats standing still.
  ScenarioConfig sc;
  sc.scenario = Scenario::single_disc;
  sc.speed_min = 0.5;
  sc.speed_max = 1.2;  // < 0.8 cells per frame
  double err = 0, err_zero = 0;
  std::size_t checked = 0;
  for (const auto& s : generate_dataset(sc, 6, 4)) {
    for (std::size_t t = 0; t + 1 < s.frames.size(); ++t) {
      const FlowField& b = s.gt_flow_backward[t];
      const auto src = as_tensor(s.frames[t].occupancy);
      const auto warped = bilinear_warp(src, as_tensor(b));
      const auto still = bilinear_warp(src, as_tensor(b, true));
      const BinaryGrid& on = s.frames[t + 1].occupancy;
      for (std::size_t i = 0; i < b.size(); ++i) {
        if (!b.defined[i]) continue;
        ++checked;
        err += std::abs(warped[i] - on.cells[i]);
        err_zero += std::abs(still[i] - on.cells[i]);
      }
    }
  }
  ASSERT_GT(checked, 100u);
  EXPECT_LE(err / static_cast<double>(checked), 0.5);
  EXPECT_LT(err, err_zero);
}

TEST(GroundTruthFlow, ForwardAndBackwardOpposeOnTranslation) {
  ScenarioConfig sc;
  sc.scenario = Scenario::single_disc;
  for (const auto& s : generate_dataset(sc, 4, 5)) {
    for (std::size_t t = 0; t < s.gt_flow_backward.size(); ++t) {
      const FlowField& b = s.gt_flow_backward[t];
      const FlowField& f = s.gt_flow_forward[t];
      double bx = 0, by = 0, fx = 0, fy = 0;
      std::size_t nb = 0, nf = 0;
      for (std::size_t i = 0; i < b.size(); ++i) {
        if (b.defined[i]) bx += b.dx[i], by += b.dy[i], ++nb;
        if (f.defined[i]) fx += f.dx[i], fy += f.dy[i], ++nf;
      }
      if (nb == 0 || nf == 0) continue;
      EXPECT_LE(std::hypot(bx / nb + fx / nf, by / nb + fy / nf), 1.0);
    }
  }
}

TEST(GroundTruthFlow, DefinedFlowLandsNearOccupiedCells) {
  ScenarioConfig sc;
  sc.scenario = Scenario::dynamic_platform;
  sc.seq_len = 10;
  std::size_t checked = 0, hits = 0;
  for (const auto& s : generate_dataset(sc, 3, 6)) {
    for (std::size_t t = 0; t + 1 < s.frames.size(); ++t) {
      const FlowField& b = s.gt_flow_backward[t];
      const BinaryGrid& prev = s.frames[t].occupancy;
      for (int r = 0; r < b.rows; ++r)
        for (int c = 0; c < b.cols; ++c) {
          const std::size_t i = static_cast<std::size_t>(r * b.cols + c);
          if (!b.defined[i]) continue;
          const int tr = static_cast<int>(std::lround(r + b.dy[i]));
          const int tc = static_cast<int>(std::lround(c + b.dx[i]));
          bool near = false;
          for (int dr = -1; dr <= 1 && !near; ++dr)
            for (int dc = -1; dc <= 1 && !near; ++dc)
              near = prev.contains(tr + dr, tc + dc) && prev.at(tr + dr, tc + dc);
          // Material points may come from outside the previous field of view.
          if (prev.contains(tr, tc) && s.frames[t].visibility.at(tr, tc)) {
            ++checked;
            hits += near;
          }
        }
    }
  }
  // A handful of points were hidden behind another object at t.
  ASSERT_GT(checked, 200u);
  EXPECT_GE(static_cast<double>(hits), 0.98 * static_cast<double>(checked));
}

TEST(Sense, StaticWorldMapsRepeat) {
  WorldState w;
  w.objects = {box(0, {0.4, 2.0}, {0.3, 0.2}, 0.1), disc(1, {-0.7, 1.2}, 0.25)};
  w.segments = {Segment{{-1.6, 3.0}, {1.6, 3.0}}};
  const GridSpec g{32, 32, 0.1};
  const ScanSpec spec = odd_fan(541, g.max_extent());
  auto maps = [&](const WorldState& s) {
    Scan sc = sense(s, spec);
    sc.range_max = spec.range_max;
    return scan_to_maps(sc, g);
  };
  const GridPair first = maps(w);
  EXPECT_GT(occupied(first.occupancy), 10u);
  WorldState n = w;
  for (int k = 0; k < 5; ++k) {
    n = step_world(n, kDt);
    EXPECT_EQ(maps(n), first);
  }
}
