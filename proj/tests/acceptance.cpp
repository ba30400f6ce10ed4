// Acceptance runner. Prints one PASS/FAIL line per criterion; exit status is
// nonzero when any selected criterion fails.
//
//   lidarflow_acceptance [--only 1,2,6,8]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "gradient_suite.hpp"
#include "lidarflow/eval.hpp"
#include "lidarflow/io.hpp"
#include "lidarflow/ops.hpp"
#include "lidarflow/trainer.hpp"
#include "lidarflow/world.hpp"

using namespace lidarflow;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ScenarioConfig desk_scenario(Scenario s) {
  ScenarioConfig sc;
  sc.scenario = s;
  sc.grid = {32, 32, 0.1};
  return sc;
}

template <typename T>
double mean_unfiltered_loss(const std::vector<SequenceSample>& data, const ModelParams<T>& params) {
  double sum = 0;
  for (const auto& s : data) sum += static_cast<double>(sequence_loss_unfiltered(s.frames, params));
  return sum / static_cast<double>(data.size());
}

// ---- 1 ---------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = oracle::run_gradient_suite(100, 1);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = secs < 120.0 && !entries.empty();
  double worst = 0;
  std::string failed;
  for (const auto& e : entries) {
    worst = std::max(worst, e.worst_rel);
    if (!e.ok()) {
      ok = false;
      failed += " " + e.name + fmt("(%zu/%zu)", e.passed, e.configs);
    }
  }
  return {ok, fmt("%zu checks x 100 configs, worst rel err %.3g, %.1fs", entries.size(), worst, secs) +
                  (failed.empty() ? "" : ", failing:" + failed)};
}

// ---- 2 ---------------------------------------------------------------------

template <typename T>
bool exact_identities(std::string& why) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor<T> x(Shape{2, 3, 9, 11});
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = static_cast<T>(u(rng));
  const Tensor<T> zero_flow(Shape{2, 2, 9, 11});
  if (!(bilinear_warp(x, zero_flow) == x)) {
    why = "zero-flow warp";
    return false;
  }
  if (!(gaussian_filter(x, 1) == x)) {
    why = "gaussian_filter(., 1)";
    return false;
  }
  const auto data = generate_dataset(desk_scenario(Scenario::single_disc), 3, 11);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto params = init_params<T>(seed);
    for (const auto& s : data) {
      const T a = sequence_loss(s.frames, params, 1);
      const T b = sequence_loss_unfiltered(s.frames, params);
      if (std::memcmp(&a, &b, sizeof(T)) != 0) {
        why = fmt("sequence loss f=1 %.17g vs unfiltered %.17g", static_cast<double>(a), static_cast<double>(b));
        return false;
      }
    }
  }
  return true;
}

Outcome identities() {
  std::string why;
  const bool d = exact_identities<double>(why);
  const bool f = d && exact_identities<float>(why);
  return {d && f, d && f ? "warp(x, 0) == x, G(x, 1) == x, loss(f=1) bit-equal to unfiltered (double, float)"
                         : "broken: " + why};
}

// ---- 3 ---------------------------------------------------------------------

Outcome gradient_support_widening() {
  const auto flows = interval_midpoints(-8, 18);
  std::string detail;
  bool ok = true;
  double prev = -1;
  for (int f : {1, 3, 5, 7, 9}) {
    const SupportInterval s = gradient_support(gradient_support_demo(f, flows));
    detail += fmt("f=%d (%g,%g) ", f, s.lo, s.hi);
    if (f == 1 && (s.empty || s.lo != 3.0 || s.hi != 5.0)) ok = false;
    if (!(s.width() > prev)) ok = false;
    prev = s.width();
  }
  return {ok, detail + (ok ? "strictly widening" : "not as required")};
}

// ---- 4 ---------------------------------------------------------------------

Outcome schedule_conformance() {
  const TrainConfig c = TrainConfig::paper();
  const TrainLog log = schedule_dry_run(c);
  bool ok = c.epochs == 200 && log.epochs.size() == 200;
  int bad = 0;
  for (std::size_t i = 0; i < log.epochs.size(); ++i) {
    const int e = static_cast<int>(i);
    const double lr = 0.01 * std::pow(2.0, -static_cast<double>(e / 25));
    const int f = std::max(1, 9 - 2 * (e / 25));
    const auto& r = log.epochs[i];
    if (r.epoch != e || r.lr != lr || r.filter_size != f) ++bad;
  }
  ok = ok && bad == 0;
  return {ok, fmt("%zu epochs logged, %d mismatches", log.epochs.size(), bad)};
}

// ---- 5 ---------------------------------------------------------------------

Outcome overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = generate_dataset(desk_scenario(Scenario::single_disc), 1, 1);
  TrainConfig tc = TrainConfig::desk();
  tc.seed = 1;
  tc.batch_size = 1;
  tc.epochs = 300;  // one update per epoch
  tc.schedule.period = 36;
  const double before = mean_unfiltered_loss(data, init_params<float>(tc.seed));
  const auto res = train<float>(data, tc);
  const double after = mean_unfiltered_loss(data, res.params);
  const EvalReport rep = evaluate(data, res.params);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double drop = before / after;
  const bool ok = drop >= 10.0 && rep.model.f1() >= 0.90 && secs < 600.0;
  return {ok, fmt("loss %.4g -> %.4g (%.1fx), F1 %.4f at 0.4 (persistence %.4f), %.0fs", before, after, drop,
                  rep.model.f1(), rep.persistence.f1(), secs)};
}

// ---- 6 and 8 ---------------------------------------------------------------

struct StaticRun {
  EvalReport val;
  EvalReport disc;
  double secs = 0;
};

const StaticRun& static_run() {
  static const StaticRun run = [] {
    const auto t0 = std::chrono::steady_clock::now();
    const ScenarioConfig sc = desk_scenario(Scenario::static_platform);
    const auto train_set = generate_dataset(sc, 64, 1001);
    const auto val = generate_dataset(sc, 16, 2001);
    const auto disc = generate_dataset(desk_scenario(Scenario::single_disc), 16, 3001);
    TrainConfig tc = TrainConfig::desk();
    tc.seed = 1;
    const auto res = train<float>(train_set, tc);
    StaticRun r;
    r.val = evaluate(val, res.params);
    r.disc = evaluate(disc, res.params);
    r.secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
  }();
  return run;
}

Outcome beats_persistence() {
  const StaticRun& r = static_run();
  const double m = r.val.model.f1(), p = r.val.persistence.f1();
  return {m > p && r.secs < 1800.0,
          fmt("val F1 model %.4f vs persistence %.4f (visible cells %.4f vs %.4f), %.0fs", m, p,
              r.val.model_visible.f1(), r.val.persistence_visible.f1(), r.secs)};
}

Outcome flow_quality() {
  const StaticRun& r = static_run();
  const double epe = r.disc.epe.mean();
  return {r.disc.epe.cells > 0 && epe <= 1.0,
          fmt("single-disc masked EPE %.3f cells over %zu cells", epe, static_cast<std::size_t>(r.disc.epe.cells))};
}

// ---- 7 ---------------------------------------------------------------------

Outcome annealing_ablation() {
  const auto t0 = std::chrono::steady_clock::now();
  const ScenarioConfig sc = desk_scenario(Scenario::dynamic_platform);
  double with = 0, without = 0;
  std::string detail;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto train_set = generate_dataset(sc, 8, 1000 + seed);
    const auto val = generate_dataset(sc, 16, 2000 + seed);
    for (bool anneal : {true, false}) {
      TrainConfig tc = TrainConfig::desk();
      tc.seed = seed;
      tc.schedule.anneal = anneal;
      const double f1 = evaluate(val, train<float>(train_set, tc).params).model.f1();
      (anneal ? with : without) += f1 / 3.0;
      detail += fmt("s%d/%s %.4f ", static_cast<int>(seed), anneal ? "on" : "off", f1);
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {with >= without && secs < 5400.0,
          fmt("mean val F1 annealed %.4f vs unannealed %.4f [", with, without) + detail + fmt("] %.0fs", secs)};
}

// ---- 9 ---------------------------------------------------------------------

Outcome round_trips() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / fmt("lidarflow_acceptance_%d", static_cast<int>(::getpid()));
  fs::create_directories(dir);
  std::string why;

  const Scenario scen = Scenario::dynamic_platform;
  Dataset d;
  d.sequences = generate_dataset(desk_scenario(scen), 4, 5);
  d.header = make_header(d.sequences, scen);
  const auto bytes = encode_dataset(d);
  save_dataset(dir / "d.lfd", d);
  const Dataset back = load_dataset(dir / "d.lfd");
  if (read_file(dir / "d.lfd") != bytes) why += " dataset file bytes differ;";
  if (encode_dataset(back) != bytes) why += " dataset re-encode differs;";
  if (!(back.sequences == d.sequences)) why += " dataset contents differ;";

  TrainConfig tc = TrainConfig::desk();
  tc.epochs = 2;
  tc.seed = 3;
  const auto params = train<float>(d.sequences, tc).params;
  CheckpointMeta meta;
  meta.epoch = 2;
  meta.grid_rows = meta.grid_cols = 32;
  const auto cbytes = encode_checkpoint(params, meta);
  save_checkpoint(dir / "m.lfw", params, meta);
  const Checkpoint ck = load_checkpoint(dir / "m.lfw");
  if (read_file(dir / "m.lfw") != cbytes) why += " checkpoint file bytes differ;";
  if (encode_checkpoint(ck.params, ck.meta) != cbytes) why += " checkpoint re-encode differs;";
  if (!(ck.meta == meta)) why += " checkpoint meta differs;";

  const double l0 = mean_unfiltered_loss(back.sequences, params);
  const double l1 = mean_unfiltered_loss(back.sequences, ck.params);
  if (std::memcmp(&l0, &l1, sizeof l0) != 0) why += fmt(" validation loss %.17g vs %.17g;", l0, l1);
  fs::remove_all(dir);
  return {why.empty(), why.empty() ? fmt("dataset %zu bytes, checkpoint %zu bytes, reloaded val loss %.9g exact",
                                         bytes.size(), cbytes.size(), l1)
                                   : "mismatch:" + why};
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria = {
      {1, {"gradient suite", gradient_suite}},
      {2, {"exactness identities", identities}},
      {3, {"gradient support widening", gradient_support_widening}},
      {4, {"schedule conformance", schedule_conformance}},
      {5, {"overfit one sequence", overfit}},
      {6, {"beats persistence", beats_persistence}},
      {7, {"annealing ablation direction", annealing_ablation}},
      {8, {"flow quality", flow_quality}},
      {9, {"format round trips", round_trips}},
  };

  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) {
        const int n = std::atoi(item.c_str());
        if (!criteria.count(n)) {
          std::fprintf(stderr, "unknown criterion '%s'\n", item.c_str());
          return 2;
        }
        selected.insert(n);
      }
    } else {
      std::fprintf(stderr, "usage: %s [--only N[,N...]]\n", argv[0]);
      return 2;
    }
  }
  if (selected.empty())
    for (const auto& [n, c] : criteria) selected.insert(n);

  int failed = 0;
  for (int n : selected) {
    const auto& [name, run] = criteria.at(n);
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("criterion %d %-30s %s  %s\n", n, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
