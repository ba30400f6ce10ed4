#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "lidarflow/eval.hpp"
#include "lidarflow/io.hpp"
#include "lidarflow/trainer.hpp"
#include "lidarflow/world.hpp"

namespace fs = std::filesystem;
using namespace lidarflow;

namespace {

enum ExitCode { kOk = 0, kIoFailure = 1, kConfigError = 2, kNumericFailure = 3, kCompatibility = 4 };

struct Options {
  std::string config;
  std::string dataset;
  std::string checkpoint;
  std::string out;
  std::string preset = "desk";
  std::string direct;
  std::string log;
  std::optional<std::uint64_t> seed;
  int sequence = 0;
  int step = -1;
  int checkpoint_every = 0;
  double max_flow = kDefaultMaxFlow;
};

Config load_config(const std::string& path) {
  return path.empty() ? Config::parse("", "<none>") : Config::load(path);
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) { write_file_atomic(path, bytes); }

std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

int run_simulate(const Options& o) {
  if (o.out.empty()) throw UsageError("simulate: --out is required");
  const Config cfg = load_config(o.config);
  const ScenarioConfig sc = scenario_from_config(cfg);
  const int count = cfg.get_int("count", 16);
  if (count < 1) cfg.fail("count", "must be positive");
  const std::uint64_t seed = o.seed ? *o.seed : cfg.get_u64("seed", 0);
  cfg.reject_unused();
  sc.validate();
  Dataset d;
  d.sequences = generate_dataset(sc, static_cast<std::size_t>(count), seed);
  d.header = make_header(d.sequences, sc.scenario);
  save_dataset(o.out, d);
  std::uint64_t occupied = 0, cells = 0;
  for (const auto& s : d.sequences)
    for (const auto& f : s.frames) {
      for (auto c : f.occupancy.cells) occupied += c;
      cells += f.occupancy.size();
    }
  std::cout << "sequences " << d.header.seq_count << "\n"
            << "frames " << static_cast<std::uint64_t>(d.header.seq_count) * (d.header.seq_len + 1u) << "\n"
            << "occupancy_rate " << fixed(static_cast<double>(occupied) / static_cast<double>(cells)) << "\n"
            << "bytes " << d.header.file_bytes() << "\n";
  return kOk;
}

int run_train(const Options& o) {
  if (o.dataset.empty() || o.out.empty()) throw UsageError("train: --dataset and --out are required");
  TrainConfig base;
  if (o.preset == "desk") base = TrainConfig::desk();
  else if (o.preset == "paper") base = TrainConfig::paper();
  else throw ParameterError("train: unknown preset '" + o.preset + "' (desk or paper)");
  const Config cfg = load_config(o.config);
  TrainConfig tc = train_from_config(cfg, base);
  const int every = cfg.get_int("checkpoint_every", o.checkpoint_every);
  if (every < 0) cfg.fail("checkpoint_every", "must be >= 0");
  if (o.seed) tc.seed = *o.seed;
  cfg.reject_unused();
  tc.validate();
  const Dataset d = load_dataset(o.dataset);
  CheckpointMeta meta;
  meta.optimizer = to_string(tc.optimizer);
  meta.grid_rows = d.header.rows;
  meta.grid_cols = d.header.cols;
  const fs::path out(o.out);
  TrainHooks hooks;
  hooks.on_epoch = [&](EpochRecord& r, int epoch) {
    std::cout << "epoch " << epoch << " loss " << r.loss << " lr " << r.lr << " f " << r.filter_size << " seconds "
              << fixed(r.seconds, 3) << std::endl;
  };
  if (every > 0) {
    hooks.snapshot_every = every;
    hooks.on_snapshot = [&](const ModelParams<float>& params, int epoch) {
      CheckpointMeta m = meta;
      m.epoch = static_cast<std::uint32_t>(epoch + 1);
      const fs::path path = o.out + ".e" + std::to_string(epoch + 1);
      save_checkpoint(path, params, m);
      std::cout << "snapshot " << path.string() << std::endl;
    };
  }
  const TrainResult<float> result = train<float>(d.sequences, tc, hooks);
  meta.epoch = static_cast<std::uint32_t>(tc.epochs);
  save_checkpoint(out, result.params, meta);
  const fs::path log = o.log.empty() ? fs::path(o.out + ".csv") : fs::path(o.log);
  write_text_atomic(log, train_log_csv(result.log));
  std::cout << "checkpoint " << out.string() << "\nlog " << log.string() << "\nfinal_f "
            << result.log.epochs.back().filter_size << std::endl;
  return kOk;
}

struct Loaded {
  Dataset data;
  Checkpoint model;
};

Loaded load_pair(const Options& o, const char* cmd) {
  if (o.dataset.empty() || o.checkpoint.empty() || o.out.empty())
    throw UsageError(std::string(cmd) + ": --dataset, --checkpoint and --out are required");
  Loaded l{load_dataset(o.dataset), load_checkpoint(o.checkpoint)};
  check_compatible(l.model.meta, l.data.header);
  if (l.model.params.arch.head != HeadKind::flow)
    throw CompatibilityError(std::string(cmd) + ": checkpoint has an occupancy head, a flow head is required");
  return l;
}

const SequenceSample& pick_sequence(const Dataset& d, int index) {
  if (index < 0 || static_cast<std::size_t>(index) >= d.sequences.size())
    throw ParameterError("--sequence " + std::to_string(index) + " out of range (dataset has " +
                         std::to_string(d.sequences.size()) + ")");
  return d.sequences[static_cast<std::size_t>(index)];
}

int run_eval(const Options& o) {
  const Loaded l = load_pair(o, "eval");
  const Config cfg = load_config(o.config);
  EvalOptions eo;
  eo.warmup_frames = cfg.get_int("warmup_frames", eo.warmup_frames);
  eo.threshold = cfg.get_double("threshold", eo.threshold);
  cfg.reject_unused();
  std::optional<Checkpoint> direct;
  if (!o.direct.empty()) {
    direct = load_checkpoint(o.direct);
    check_compatible(direct->meta, l.data.header);
    if (direct->params.arch.head != HeadKind::occupancy)
      throw CompatibilityError("eval: --direct needs an occupancy-head checkpoint");
  }
  const fs::path dir(o.out);
  fs::create_directories(dir);
  const EvalReport rep = evaluate(l.data.sequences, l.model.params, eo, direct ? &direct->params : nullptr);
  const std::string scen = to_string(l.data.header.scenario);
  std::ostringstream f1;
  f1 << "# micro-averaged over all cells of " << rep.steps << " predicted maps; threshold " << eo.threshold << "\n";
  f1 << "scenario,method,f1,precision,recall,f1_visible\n";
  auto row = [&](const char* name, const Counts& all, const Counts& vis) {
    f1 << scen << ',' << name << ',' << fixed(all.f1()) << ',' << fixed(all.precision()) << ','
       << fixed(all.recall()) << ',' << fixed(vis.f1()) << '\n';
  };
  row("flownet", rep.model, rep.model_visible);
  row("persistence", rep.persistence, rep.persistence_visible);
  if (rep.direct) {
    f1 << scen << ",direct," << fixed(rep.direct->f1()) << ',' << fixed(rep.direct->precision()) << ','
       << fixed(rep.direct->recall()) << ",\n";
  }
  write_text_atomic(dir / "f1.csv", f1.str());
  write_text_atomic(dir / "pr.csv", pr_curve_csv(pr_curve(rep.soft_maps, rep.targets)));
  if (rep.epe.cells > 0) {
    write_text_atomic(dir / "flow_epe.csv", "scenario,cells,epe\n" + scen + "," + std::to_string(rep.epe.cells) +
                                                "," + fixed(rep.epe.mean()) + "\n");
  }
  // Overlays for the first sequence.
  const SequenceSample& s = pick_sequence(l.data, o.sequence);
  const auto outputs = run_sequence(l.model.params, s.frames);
  for (std::size_t t = static_cast<std::size_t>(eo.warmup_frames); t < s.frames.size(); ++t) {
    const GridPair& next = t + 1 < s.frames.size() ? s.frames[t + 1] : s.gt_next;
    const PredictionResult p = predict_next(s.frames[t].occupancy, backward_flow(outputs[t]), eo.threshold);
    write_bytes(dir / ("overlay_t" + std::to_string(t) + ".ppm"), encode_ppm(overlay(p.binary_map, next.occupancy)));
  }
  std::cout << "flownet_f1 " << fixed(rep.model.f1()) << "\npersistence_f1 " << fixed(rep.persistence.f1()) << "\n";
  if (rep.direct) std::cout << "direct_f1 " << fixed(rep.direct->f1()) << "\n";
  if (rep.epe.cells > 0) std::cout << "flow_epe " << fixed(rep.epe.mean()) << "\n";
  return kOk;
}

int run_predict(const Options& o) {
  const Loaded l = load_pair(o, "predict");
  const SequenceSample& s = pick_sequence(l.data, o.sequence);
  const int last = static_cast<int>(s.frames.size()) - 1;
  const int step = o.step < 0 ? last : o.step;
  if (step > last) throw ParameterError("--step beyond the sequence");
  std::vector<GridPair> prefix(s.frames.begin(), s.frames.begin() + step + 1);
  const auto outputs = run_sequence(l.model.params, prefix);
  const PredictionResult p = predict_next(prefix.back().occupancy, backward_flow(outputs.back()));
  const GridPair& next = step < last ? s.frames[static_cast<std::size_t>(step) + 1] : s.gt_next;
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_bytes(dir / "next_soft.pgm", encode_pgm(p.soft_map));
  write_bytes(dir / "next_binary.pgm", encode_pgm(p.binary_map));
  write_bytes(dir / "overlay.ppm", encode_ppm(overlay(p.binary_map, next.occupancy)));
  std::cout << "step " << step << "\nf1 " << fixed(f1_score(p.binary_map, next.occupancy)) << "\n";
  return kOk;
}

int run_flow_viz(const Options& o) {
  const Loaded l = load_pair(o, "flow-viz");
  if (!(o.max_flow > 0)) throw ParameterError("--max-flow must be positive");
  const SequenceSample& s = pick_sequence(l.data, o.sequence);
  const auto outputs = run_sequence(l.model.params, s.frames);
  const fs::path dir(o.out);
  fs::create_directories(dir);
  for (std::size_t t = 0; t < outputs.size(); ++t) {
    write_bytes(dir / ("backward_t" + std::to_string(t) + ".ppm"),
                encode_ppm(flow_to_color(backward_flow(outputs[t]), o.max_flow)));
    write_bytes(dir / ("forward_t" + std::to_string(t) + ".ppm"),
                encode_ppm(flow_to_color(forward_flow(outputs[t]), o.max_flow)));
  }
  write_bytes(dir / "legend.ppm", encode_ppm(flow_legend(129, o.max_flow)));
  std::cout << "frames " << outputs.size() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LiDAR occupancy flow: simulate, train, evaluate, predict"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key = value configuration file");
    sub->add_option("--out", o.out, "output file or directory");
  };
  auto* sim = app.add_subcommand("simulate", "generate a dataset from the world simulator");
  add_common(sim);
  sim->add_option("--seed", o.seed, "master seed (overrides the config)");

  auto* tr = app.add_subcommand("train", "train the flow network on a dataset");
  add_common(tr);
  tr->add_option("--dataset", o.dataset)->required();
  tr->add_option("--preset", o.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  tr->add_option("--seed", o.seed);
  tr->add_option("--log", o.log, "training log CSV (default <out>.csv)");
  tr->add_option("--checkpoint-every", o.checkpoint_every, "also write <out>.eN every N epochs");

  auto* ev = app.add_subcommand("eval", "F1, PR curve and overlays on a dataset");
  add_common(ev);
  ev->add_option("--dataset", o.dataset)->required();
  ev->add_option("--checkpoint", o.checkpoint)->required();
  ev->add_option("--direct", o.direct, "occupancy-head checkpoint to compare against");
  ev->add_option("--sequence", o.sequence, "sequence used for overlay images");

  auto* pr = app.add_subcommand("predict", "predict the next occupancy map of one sequence");
  add_common(pr);
  pr->add_option("--dataset", o.dataset)->required();
  pr->add_option("--checkpoint", o.checkpoint)->required();
  pr->add_option("--sequence", o.sequence);
  pr->add_option("--step", o.step, "frame index to predict from (default: last)");

  auto* fv = app.add_subcommand("flow-viz", "color-coded flow images of one sequence");
  add_common(fv);
  fv->add_option("--dataset", o.dataset)->required();
  fv->add_option("--checkpoint", o.checkpoint)->required();
  fv->add_option("--sequence", o.sequence);
  fv->add_option("--max-flow", o.max_flow, "flow magnitude (cells) at full saturation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*sim) return run_simulate(o);
    if (*tr) return run_train(o);
    if (*ev) return run_eval(o);
    if (*pr) return run_predict(o);
    if (*fv) return run_flow_viz(o);
  } catch (const CompatibilityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCompatibility;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCompatibility;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoFailure;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kConfigError;
}
