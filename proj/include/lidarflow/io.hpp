#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "lidarflow/eval.hpp"
#include "lidarflow/flownet.hpp"
#include "lidarflow/trainer.hpp"
#include "lidarflow/world.hpp"

namespace lidarflow {

// ---- dataset container ("LFD1") -------------------------------------------
//
// Little-endian. Header (18 bytes): magic "LFD1", version u16, rows u16,
// cols u16, seq_len u16, seq_count u32, flags u16 (bit 0: ground-truth flow
// present, bits 8-15: scenario id). Each sequence stores seq_len + 1 frames
// (the last is the frame to predict), each as occupancy then visibility,
// packed LSB-first in row-major order and padded to a whole byte. With flow,
// every sequence then holds seq_len steps of backward then forward flow as
// f32 (dx, dy) pairs per cell, NaN where undefined.

inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 18;

struct DatasetHeader {
  std::uint16_t version = kDatasetVersion;
  std::uint16_t rows = 0;
  std::uint16_t cols = 0;
  std::uint16_t seq_len = 0;
  std::uint32_t seq_count = 0;
  bool has_gt_flow = false;
  Scenario scenario = Scenario::static_platform;

  std::uint64_t map_bytes() const;
  std::uint64_t sequence_bytes() const;
  std::uint64_t file_bytes() const;
  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<SequenceSample> sequences;
};

// Header describing `sequences`. Throws DimensionError when they disagree in
// shape and ParameterError when empty or beyond the format's field widths.
DatasetHeader make_header(const std::vector<SequenceSample>& sequences, Scenario scenario);

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset);
// Throws FormatError on bad magic, unknown version or a length that does
// not match the header, before allocating anything sized by the header.
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
DatasetHeader decode_dataset_header(std::span<const std::uint8_t> bytes);

void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& path);

// ---- checkpoint ("LFW1") ---------------------------------------------------
//
// Little-endian. magic "LFW1", version u16, head kind u8, training grid rows
// and cols u16 (0: unspecified), architecture echo
// (u16 layer count, then per layer: name, filter, stride, dilation, padding,
// in, out as u16 and has_bias u8), optimizer name, epoch u32, then u32 block
// count and per block: name, rank u8, dims u32, f32 values. Strings are a u16
// length followed by bytes.

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string optimizer = "adam";
  std::uint32_t epoch = 0;
  std::uint16_t grid_rows = 0;
  std::uint16_t grid_cols = 0;
  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
  ModelParams<float> params;
  CheckpointMeta meta;
};

std::vector<std::uint8_t> encode_checkpoint(const ModelParams<float>& params, const CheckpointMeta& meta);
// Throws FormatError on malformed bytes and CompatibilityError when the
// stored blocks disagree with the echoed architecture.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params,
                     const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Throws CompatibilityError when the checkpoint was trained on another grid.
void check_compatible(const CheckpointMeta& meta, const DatasetHeader& header);

// ---- files -----------------------------------------------------------------

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

// ---- images ----------------------------------------------------------------

std::vector<std::uint8_t> encode_ppm(const RgbImage& image);
RgbImage decode_ppm(std::span<const std::uint8_t> bytes);
// Binary map as P5 with 255 for set cells.
std::vector<std::uint8_t> encode_pgm(const BinaryGrid& grid);
// Soft map in [0, 1] scaled to 0..255.
std::vector<std::uint8_t> encode_pgm(const RealGrid& grid);

// ---- reports -----------------------------------------------------------------

std::string train_log_csv(const TrainLog& log);
std::string pr_curve_csv(const PrCurve& curve);

// ---- key = value configuration ---------------------------------------------

class ConfigError : public ParameterError {
 public:
  ConfigError(const std::string& source, int line, const std::string& message)
      : ParameterError(source + ":" + std::to_string(line) + ": " + message), line_(line) {}
  int line() const noexcept { return line_; }

 private:
  int line_;
};

// `key = value` lines; '#' starts a comment. Duplicate keys are errors.
class Config {
 public:
  static Config parse(const std::string& text, const std::string& source = "<config>");
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  std::string get_string(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  // Throws ConfigError at the first key never read by a getter.
  void reject_unused() const;

  // Overrides or adds a value (line 0), e.g. from a command-line flag.
  void set(const std::string& key, const std::string& value);

  // Throws ConfigError pointing at the line of `key`.
  [[noreturn]] void fail(const std::string& key, const std::string& message) const;

 private:
  struct Entry {
    std::string value;
    int line = 0;
  };
  const Entry* find(const std::string& key) const;

  std::string source_;
  std::map<std::string, Entry> entries_;
  mutable std::set<std::string> used_;
};

// Scenario keys: scenario, count, seq_len, grid (N or RxC), cell_size, fps,
// beams, range_max, range_noise, discs_min, discs_max, disc_radius_min,
// disc_radius_max, speed_min, speed_max, static_boxes_max, ego_speed_min,
// ego_speed_max, ego_turn_rate_max, walls, gt_flow.
ScenarioConfig scenario_from_config(const Config& config, ScenarioConfig base = ScenarioConfig{});

// Training keys: epochs, batch_size, lr0, period, gaussian_f0, gaussian_step,
// anneal, warmup_frames, optimizer, momentum, clip_norm, seed, head.
TrainConfig train_from_config(const Config& config, TrainConfig base);

}  // namespace lidarflow
