#include "lidarflow/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <system_error>

namespace lidarflow {
namespace {

constexpr char kDatasetMagic[4] = {'L', 'F', 'D', '1'};
constexpr char kCheckpointMagic[4] = {'L', 'F', 'W', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int k = 0; k < 2; ++k) out_.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  void u32(std::uint32_t v) {
    for (int k = 0; k < 4; ++k) out_.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    if (s.size() > 0xFFFF) throw ParameterError("string too long for the file format");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void reserve(std::size_t n) { out_.reserve(n); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> b, const char* what) : b_(b), what_(what) {}
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n)
      throw FormatError(std::string(what_) + ": truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(b_[pos_] | (b_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(b_[pos_ + static_cast<std::size_t>(k)]) << (8 * k);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint16_t n = u16();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> b_;
  const char* what_;
  std::size_t pos_ = 0;
};

void pack_map(Writer& w, const BinaryGrid& g) {
  std::uint8_t acc = 0;
  int bit = 0;
  for (std::uint8_t c : g.cells) {
    if (c) acc = static_cast<std::uint8_t>(acc | (1u << bit));
    if (++bit == 8) {
      w.u8(acc);
      acc = 0;
      bit = 0;
    }
  }
  if (bit) w.u8(acc);
}

BinaryGrid unpack_map(std::span<const std::uint8_t> bytes, int rows, int cols) {
  BinaryGrid g(rows, cols, 0);
  for (std::size_t i = 0; i < g.size(); ++i) g.cells[i] = (bytes[i / 8] >> (i % 8)) & 1u;
  // Padding bits must be zero so that re-encoding is byte-identical.
  const std::size_t used = g.size() % 8;
  if (used && (bytes[g.size() / 8] >> used) != 0) throw FormatError("dataset: nonzero padding bits");
  return g;
}

void write_flow(Writer& w, const FlowField& f) {
  const float nan = std::numeric_limits<float>::quiet_NaN();
  for (std::size_t i = 0; i < f.size(); ++i) {
    w.f32(f.defined[i] ? f.dx[i] : nan);
    w.f32(f.defined[i] ? f.dy[i] : nan);
  }
}

FlowField read_flow(Reader& r, int rows, int cols) {
  FlowField f(rows, cols);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const float dx = r.f32();
    const float dy = r.f32();
    if (std::isnan(dx) != std::isnan(dy)) throw FormatError("dataset: half-defined flow vector");
    if (std::isnan(dx)) continue;
    f.dx[i] = dx;
    f.dy[i] = dy;
    f.defined[i] = 1;
  }
  return f;
}

std::uint16_t checked_u16(std::size_t v, const char* what) {
  if (v > 0xFFFF) throw ParameterError(std::string(what) + " exceeds 65535");
  return static_cast<std::uint16_t>(v);
}

struct LayerEcho {
  std::string name;
  ConvSpec spec;
};

std::vector<LayerEcho> architecture_echo(const Architecture& a) {
  std::vector<LayerEcho> out{{"conv0", a.conv0()}};
  for (int l = 0; l < kGruLayers; ++l)
    out.push_back({"gru" + std::to_string(l), a.gru(l).input_conv()});
  out.push_back({a.head == HeadKind::flow ? "conv_flow" : "conv_occupancy", a.head_conv()});
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

// ---- dataset ---------------------------------------------------------------

std::uint64_t DatasetHeader::map_bytes() const {
  return (static_cast<std::uint64_t>(rows) * cols + 7) / 8;
}

std::uint64_t DatasetHeader::sequence_bytes() const {
  std::uint64_t n = (static_cast<std::uint64_t>(seq_len) + 1) * 2 * map_bytes();
  if (has_gt_flow) n += static_cast<std::uint64_t>(seq_len) * 2 * rows * cols * 2 * 4;
  return n;
}

std::uint64_t DatasetHeader::file_bytes() const {
  return kDatasetHeaderBytes + static_cast<std::uint64_t>(seq_count) * sequence_bytes();
}

DatasetHeader make_header(const std::vector<SequenceSample>& sequences, Scenario scenario) {
  if (sequences.empty()) throw ParameterError("dataset: no sequences");
  const SequenceSample& first = sequences.front();
  if (first.frames.empty()) throw ParameterError("dataset: empty sequence");
  DatasetHeader h;
  h.rows = checked_u16(static_cast<std::size_t>(first.frames.front().occupancy.rows), "rows");
  h.cols = checked_u16(static_cast<std::size_t>(first.frames.front().occupancy.cols), "cols");
  h.seq_len = checked_u16(first.frames.size(), "seq_len");
  if (sequences.size() > 0xFFFFFFFFu) throw ParameterError("dataset: too many sequences");
  h.seq_count = static_cast<std::uint32_t>(sequences.size());
  h.has_gt_flow = !first.gt_flow_backward.empty();
  h.scenario = scenario;
  auto check_grid = [&](const BinaryGrid& g) {
    if (g.rows != h.rows) throw DimensionError("dataset", "rows", h.rows, static_cast<std::size_t>(g.rows));
    if (g.cols != h.cols) throw DimensionError("dataset", "cols", h.cols, static_cast<std::size_t>(g.cols));
  };
  for (const auto& s : sequences) {
    if (s.frames.size() != h.seq_len) throw DimensionError("dataset", "seq_len", h.seq_len, s.frames.size());
    for (const auto& f : s.frames) {
      check_grid(f.occupancy);
      check_grid(f.visibility);
    }
    check_grid(s.gt_next.occupancy);
    check_grid(s.gt_next.visibility);
    const std::size_t flows = h.has_gt_flow ? h.seq_len : 0;
    if (s.gt_flow_backward.size() != flows || s.gt_flow_forward.size() != flows)
      throw DimensionError("dataset", "flow_steps", flows, s.gt_flow_backward.size());
    for (const auto* v : {&s.gt_flow_backward, &s.gt_flow_forward})
      for (const auto& f : *v)
        if (f.rows != h.rows || f.cols != h.cols) throw DimensionError("dataset", "flow_rows", h.rows, static_cast<std::size_t>(f.rows));
  }
  return h;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset) {
  const DatasetHeader expected = make_header(dataset.sequences, dataset.header.scenario);
  if (!(expected == dataset.header))
    throw ParameterError("dataset: header does not describe the sequences");
  const DatasetHeader& h = dataset.header;
  Writer w;
  w.reserve(static_cast<std::size_t>(h.file_bytes()));
  w.bytes(kDatasetMagic, 4);
  w.u16(h.version);
  w.u16(h.rows);
  w.u16(h.cols);
  w.u16(h.seq_len);
  w.u32(h.seq_count);
  w.u16(static_cast<std::uint16_t>((h.has_gt_flow ? 1u : 0u) | (static_cast<unsigned>(h.scenario) << 8)));
  for (const auto& s : dataset.sequences) {
    for (const auto& f : s.frames) {
      pack_map(w, f.occupancy);
      pack_map(w, f.visibility);
    }
    pack_map(w, s.gt_next.occupancy);
    pack_map(w, s.gt_next.visibility);
    if (h.has_gt_flow) {
      for (std::size_t t = 0; t < h.seq_len; ++t) {
        write_flow(w, s.gt_flow_backward[t]);
        write_flow(w, s.gt_flow_forward[t]);
      }
    }
  }
  return w.take();
}

DatasetHeader decode_dataset_header(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "dataset");
  const auto magic = r.take(4);
  if (std::memcmp(magic.data(), kDatasetMagic, 4) != 0) throw FormatError("dataset: bad magic (expected LFD1)");
  DatasetHeader h;
  h.version = r.u16();
  if (h.version != kDatasetVersion)
    throw FormatError("dataset: unsupported version " + std::to_string(h.version));
  h.rows = r.u16();
  h.cols = r.u16();
  h.seq_len = r.u16();
  h.seq_count = r.u32();
  const std::uint16_t flags = r.u16();
  if (flags & 0x00FEu) throw FormatError("dataset: unknown flag bits");
  h.has_gt_flow = flags & 1u;
  const unsigned scen = flags >> 8;
  if (scen > static_cast<unsigned>(Scenario::single_disc))
    throw FormatError("dataset: unknown scenario id " + std::to_string(scen));
  h.scenario = static_cast<Scenario>(scen);
  if (h.rows == 0 || h.cols == 0 || h.seq_len == 0 || h.seq_count == 0)
    throw FormatError("dataset: zero dimension in header");
  return h;
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  const DatasetHeader h = decode_dataset_header(bytes);
  if (bytes.size() != h.file_bytes())
    throw FormatError("dataset: " + std::to_string(bytes.size()) + " bytes, header implies " +
                      std::to_string(h.file_bytes()));
  Reader r(bytes, "dataset");
  r.take(kDatasetHeaderBytes);
  Dataset d;
  d.header = h;
  d.sequences.resize(h.seq_count);
  const auto mb = static_cast<std::size_t>(h.map_bytes());
  for (auto& s : d.sequences) {
    auto read_pair = [&] {
      GridPair p;
      p.occupancy = unpack_map(r.take(mb), h.rows, h.cols);
      p.visibility = unpack_map(r.take(mb), h.rows, h.cols);
      return p;
    };
    for (std::size_t t = 0; t < h.seq_len; ++t) s.frames.push_back(read_pair());
    s.gt_next = read_pair();
    if (h.has_gt_flow) {
      for (std::size_t t = 0; t < h.seq_len; ++t) {
        s.gt_flow_backward.push_back(read_flow(r, h.rows, h.cols));
        s.gt_flow_forward.push_back(read_flow(r, h.rows, h.cols));
      }
    }
  }
  return d;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  write_file_atomic(path, encode_dataset(dataset));
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> head(kDatasetHeaderBytes);
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  if (in.gcount() != static_cast<std::streamsize>(head.size()))
    throw FormatError(path.string() + ": shorter than a dataset header");
  const DatasetHeader h = decode_dataset_header(head);
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw IoError("cannot stat " + path.string() + ": " + ec.message());
  if (size != h.file_bytes())
    throw FormatError(path.string() + ": " + std::to_string(size) + " bytes, header implies " +
                      std::to_string(h.file_bytes()));
  return decode_dataset(read_file(path));
}

// ---- checkpoint ------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const ModelParams<float>& params, const CheckpointMeta& meta) {
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.u16(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(params.arch.head));
  w.u16(meta.grid_rows);
  w.u16(meta.grid_cols);
  const auto echo = architecture_echo(params.arch);
  w.u16(static_cast<std::uint16_t>(echo.size()));
  for (const auto& layer : echo) {
    w.str(layer.name);
    const ConvSpec& s = layer.spec;
    for (int v : {s.filter_size, s.stride, s.dilation, s.padding, s.in_channels, s.out_channels})
      w.u16(checked_u16(static_cast<std::size_t>(v), "layer field"));
    w.u8(s.has_bias ? 1 : 0);
  }
  w.str(meta.optimizer);
  w.u32(meta.epoch);
  const auto named = params.named();
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    w.str(name);
    const Shape& s = t->shape();
    w.u8(4);
    for (std::size_t d : {s.n, s.c, s.h, s.w}) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t->values()) w.f32(v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "checkpoint");
  const auto magic = r.take(4);
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint: bad magic (expected LFW1)");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint8_t head = r.u8();
  if (head > static_cast<std::uint8_t>(HeadKind::occupancy))
    throw FormatError("checkpoint: unknown head kind " + std::to_string(head));
  const std::uint16_t grid_rows = r.u16();
  const std::uint16_t grid_cols = r.u16();
  const std::uint16_t layers = r.u16();
  std::vector<LayerEcho> echo;
  for (std::uint16_t l = 0; l < layers; ++l) {
    LayerEcho e;
    e.name = r.str();
    ConvSpec& s = e.spec;
    s.filter_size = r.u16();
    s.stride = r.u16();
    s.dilation = r.u16();
    s.padding = r.u16();
    s.in_channels = r.u16();
    s.out_channels = r.u16();
    s.has_bias = r.u8() != 0;
    echo.push_back(e);
  }
  if (echo.size() != 2 + kGruLayers)
    throw CompatibilityError("checkpoint: expected " + std::to_string(2 + kGruLayers) + " layers, found " +
                             std::to_string(echo.size()));
  Architecture arch;
  arch.head = static_cast<HeadKind>(head);
  arch.input_channels = echo[0].spec.in_channels;
  arch.hidden_channels = echo[0].spec.out_channels;
  arch.filter_size = echo[0].spec.filter_size;
  for (int l = 0; l < kGruLayers; ++l)
    arch.dilations[static_cast<std::size_t>(l)] = echo[static_cast<std::size_t>(l) + 1].spec.dilation;
  const auto expected = architecture_echo(arch);
  for (std::size_t l = 0; l < echo.size(); ++l) {
    if (echo[l].name != expected[l].name || !(echo[l].spec == expected[l].spec))
      throw CompatibilityError("checkpoint: layer '" + echo[l].name + "' does not match the supported architecture");
  }
  Checkpoint ck;
  ck.meta.optimizer = r.str();
  ck.meta.epoch = r.u32();
  ck.meta.grid_rows = grid_rows;
  ck.meta.grid_cols = grid_cols;
  ck.params = zero_params<float>(arch);
  auto named = ck.params.named();
  const std::uint32_t blocks = r.u32();
  if (blocks != named.size())
    throw CompatibilityError("checkpoint: " + std::to_string(blocks) + " parameter blocks, expected " +
                             std::to_string(named.size()));
  for (auto& [name, t] : named) {
    const std::string stored = r.str();
    if (stored != name) throw CompatibilityError("checkpoint: block '" + stored + "' where '" + name + "' was expected");
    const std::uint8_t rank = r.u8();
    if (rank != 4) throw FormatError("checkpoint: block '" + name + "' has rank " + std::to_string(rank));
    const Shape want = t->shape();
    const std::size_t dims[4] = {r.u32(), r.u32(), r.u32(), r.u32()};
    const std::size_t have[4] = {want.n, want.c, want.h, want.w};
    const char* axes[4] = {"batch", "channels", "rows", "cols"};
    for (int k = 0; k < 4; ++k)
      if (dims[k] != have[k]) throw DimensionError("checkpoint block " + name, axes[k], have[k], dims[k]);
    r.need(t->size() * 4);
    for (float& v : t->values()) v = r.f32();
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params,
                     const CheckpointMeta& meta) {
  write_file_atomic(path, encode_checkpoint(params, meta));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

void check_compatible(const CheckpointMeta& meta, const DatasetHeader& header) {
  if (meta.grid_rows == 0 && meta.grid_cols == 0) return;
  if (meta.grid_rows != header.rows || meta.grid_cols != header.cols)
    throw CompatibilityError("checkpoint trained on a " + std::to_string(meta.grid_rows) + "x" +
                             std::to_string(meta.grid_cols) + " grid, dataset is " +
                             std::to_string(header.rows) + "x" + std::to_string(header.cols));
}

// ---- files -----------------------------------------------------------------

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return out;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---- images ----------------------------------------------------------------

std::vector<std::uint8_t> encode_ppm(const RgbImage& image) {
  const std::string head = "P6\n" + std::to_string(image.cols) + " " + std::to_string(image.rows) + "\n255\n";
  std::vector<std::uint8_t> out(head.begin(), head.end());
  out.insert(out.end(), image.rgb.begin(), image.rgb.end());
  return out;
}

RgbImage decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto token = [&] {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  if (token() != "P6") throw FormatError("ppm: expected P6");
  int cols = 0, rows = 0, maxval = 0;
  try {
    cols = std::stoi(token());
    rows = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw FormatError("ppm: malformed header");
  }
  if (maxval != 255 || rows < 0 || cols < 0) throw FormatError("ppm: unsupported header");
  ++pos;
  RgbImage img(rows, cols);
  if (bytes.size() - std::min(pos, bytes.size()) != img.rgb.size()) throw FormatError("ppm: pixel data length mismatch");
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(), img.rgb.begin());
  return img;
}

std::vector<std::uint8_t> encode_pgm(const BinaryGrid& grid) {
  const std::string head = "P5\n" + std::to_string(grid.cols) + " " + std::to_string(grid.rows) + "\n255\n";
  std::vector<std::uint8_t> out(head.begin(), head.end());
  for (auto c : grid.cells) out.push_back(c ? 255 : 0);
  return out;
}

std::vector<std::uint8_t> encode_pgm(const RealGrid& grid) {
  const std::string head = "P5\n" + std::to_string(grid.cols) + " " + std::to_string(grid.rows) + "\n255\n";
  std::vector<std::uint8_t> out(head.begin(), head.end());
  for (double v : grid.cells) out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))));
  return out;
}

// ---- reports ---------------------------------------------------------------

std::string train_log_csv(const TrainLog& log) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,loss,lr,f,seconds\n";
  for (const auto& e : log.epochs) os << e.epoch << ',' << e.loss << ',' << e.lr << ',' << e.filter_size << ',' << e.seconds << '\n';
  return os.str();
}

std::string pr_curve_csv(const PrCurve& curve) {
  std::ostringstream os;
  os.precision(9);
  os << "threshold,precision,recall,f1\n";
  for (const auto& p : curve.points) os << p.threshold << ',' << p.precision << ',' << p.recall << ',' << p.f1() << '\n';
  return os.str();
}

// ---- config ----------------------------------------------------------------

Config Config::parse(const std::string& text, const std::string& source) {
  Config c;
  c.source_ = source;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string body = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(source, line, "expected 'key = value'");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (key.empty()) throw ConfigError(source, line, "missing key");
    if (value.empty()) throw ConfigError(source, line, "missing value for '" + key + "'");
    if (c.entries_.count(key)) throw ConfigError(source, line, "duplicate key '" + key + "'");
    c.entries_[key] = Entry{value, line};
  }
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse(std::string(bytes.begin(), bytes.end()), path.string());
}

const Config::Entry* Config::find(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) return nullptr;
  used_.insert(key);
  return &it->second;
}

void Config::fail(const std::string& key, const std::string& message) const {
  const auto it = entries_.find(key);
  throw ConfigError(source_, it == entries_.end() ? 0 : it->second.line, key + ": " + message);
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  const Entry* e = find(key);
  return e ? e->value : fallback;
}

int Config::get_int(const std::string& key, int fallback) const {
  const Entry* e = find(key);
  if (!e) return fallback;
  int v = 0;
  const auto [ptr, ec] = std::from_chars(e->value.data(), e->value.data() + e->value.size(), v);
  if (ec != std::errc() || ptr != e->value.data() + e->value.size()) fail(key, "expected an integer, got '" + e->value + "'");
  return v;
}

std::uint64_t Config::get_u64(const std::string& key, std::uint64_t fallback) const {
  const Entry* e = find(key);
  if (!e) return fallback;
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(e->value.data(), e->value.data() + e->value.size(), v);
  if (ec != std::errc() || ptr != e->value.data() + e->value.size())
    fail(key, "expected a non-negative integer, got '" + e->value + "'");
  return v;
}

double Config::get_double(const std::string& key, double fallback) const {
  const Entry* e = find(key);
  if (!e) return fallback;
  double v = 0;
  const auto [ptr, ec] = std::from_chars(e->value.data(), e->value.data() + e->value.size(), v);
  if (ec != std::errc() || ptr != e->value.data() + e->value.size() || !std::isfinite(v))
    fail(key, "expected a number, got '" + e->value + "'");
  return v;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  const Entry* e = find(key);
  if (!e) return fallback;
  if (e->value == "true" || e->value == "1" || e->value == "yes") return true;
  if (e->value == "false" || e->value == "0" || e->value == "no") return false;
  fail(key, "expected true or false, got '" + e->value + "'");
}

void Config::reject_unused() const {
  const Entry* first = nullptr;
  std::string first_key;
  for (const auto& [key, entry] : entries_) {
    if (used_.count(key)) continue;
    if (!first || entry.line < first->line) {
      first = &entry;
      first_key = key;
    }
  }
  if (first) throw ConfigError(source_, first->line, "unknown key '" + first_key + "'");
}

void Config::set(const std::string& key, const std::string& value) { entries_[key] = Entry{value, 0}; }

ScenarioConfig scenario_from_config(const Config& c, ScenarioConfig s) {
  if (c.has("scenario")) {
    try {
      s.scenario = parse_scenario(c.get_string("scenario", ""));
    } catch (const ParameterError& e) {
      c.fail("scenario", e.what());
    }
  }
  s.seq_len = c.get_int("seq_len", s.seq_len);
  if (c.has("grid")) {
    const std::string g = c.get_string("grid", "");
    const auto x = g.find('x');
    const std::string rows = g.substr(0, x);
    const std::string cols = x == std::string::npos ? g : g.substr(x + 1);
    int r = 0, k = 0;
    const auto [p1, e1] = std::from_chars(rows.data(), rows.data() + rows.size(), r);
    const auto [p2, e2] = std::from_chars(cols.data(), cols.data() + cols.size(), k);
    if (e1 != std::errc() || e2 != std::errc() || p1 != rows.data() + rows.size() ||
        p2 != cols.data() + cols.size() || r <= 0 || k <= 0)
      c.fail("grid", "expected N or RxC, got '" + g + "'");
    s.grid.rows = r;
    s.grid.cols = k;
  }
  s.grid.cell_size = c.get_double("cell_size", s.grid.cell_size);
  s.fps = c.get_double("fps", s.fps);
  s.beam_count = c.get_int("beams", s.beam_count);
  s.range_max = c.get_double("range_max", s.range_max);
  s.range_noise_std = c.get_double("range_noise", s.range_noise_std);
  s.disc_count_min = c.get_int("discs_min", s.disc_count_min);
  s.disc_count_max = c.get_int("discs_max", s.disc_count_max);
  s.disc_radius_min = c.get_double("disc_radius_min", s.disc_radius_min);
  s.disc_radius_max = c.get_double("disc_radius_max", s.disc_radius_max);
  s.speed_min = c.get_double("speed_min", s.speed_min);
  s.speed_max = c.get_double("speed_max", s.speed_max);
  s.static_box_count_max = c.get_int("static_boxes_max", s.static_box_count_max);
  s.ego_speed_min = c.get_double("ego_speed_min", s.ego_speed_min);
  s.ego_speed_max = c.get_double("ego_speed_max", s.ego_speed_max);
  s.ego_turn_rate_max = c.get_double("ego_turn_rate_max", s.ego_turn_rate_max);
  s.walls = c.get_bool("walls", s.walls);
  s.has_gt_flow = c.get_bool("gt_flow", s.has_gt_flow);
  return s;
}

TrainConfig train_from_config(const Config& c, TrainConfig t) {
  t.epochs = c.get_int("epochs", t.epochs);
  const int batch = c.get_int("batch_size", static_cast<int>(t.batch_size));
  if (batch < 1) c.fail("batch_size", "must be positive");
  t.batch_size = static_cast<std::size_t>(batch);
  t.schedule.lr0 = c.get_double("lr0", t.schedule.lr0);
  t.schedule.period = c.get_int("period", t.schedule.period);
  t.schedule.f0 = c.get_int("gaussian_f0", t.schedule.f0);
  t.schedule.f_step = c.get_int("gaussian_step", t.schedule.f_step);
  t.schedule.anneal = c.get_bool("anneal", t.schedule.anneal);
  t.warmup_frames = c.get_int("warmup_frames", t.warmup_frames);
  if (c.has("optimizer")) {
    try {
      t.optimizer = parse_optimizer(c.get_string("optimizer", ""));
    } catch (const ParameterError& e) {
      c.fail("optimizer", e.what());
    }
  }
  t.momentum = c.get_double("momentum", t.momentum);
  t.clip_norm = c.get_double("clip_norm", t.clip_norm);
  t.seed = c.get_u64("seed", t.seed);
  if (c.has("head")) {
    const std::string h = c.get_string("head", "");
    if (h == "flow") t.head = HeadKind::flow;
    else if (h == "occupancy") t.head = HeadKind::occupancy;
    else c.fail("head", "expected flow or occupancy, got '" + h + "'");
  }
  return t;
}

}  // namespace lidarflow
