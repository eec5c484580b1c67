#ifndef CAMLOSS_CLI_HPP_
#define CAMLOSS_CLI_HPP_

// Run configuration, file outputs and the command implementations behind the camloss tool.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "camloss/activation_maps.hpp"
#include "camloss/trainer.hpp"

namespace camloss {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ValueType { Int, Count, Real, Bool, Text, Choice, Blocks, Indices };

struct ConfigKey {
  const char* name;
  ValueType type;
  const char* fallback;  // empty: required by the commands that read it
  const char* choices = "";
};

// Every recognized key. Anything else in a file or an override is an error.
inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = {
      {"seed", ValueType::Count, "0"},
      {"out", ValueType::Text, "run"},
      {"data.source", ValueType::Choice, "shapes", "shapes|cifar10|cache"},
      {"data.path", ValueType::Text, ""},
      {"data.seed", ValueType::Count, "0"},
      {"data.train_count", ValueType::Count, "2000"},
      {"data.test_count", ValueType::Count, "500"},
      {"data.classes", ValueType::Count, "4"},
      {"data.size", ValueType::Count, "64"},
      {"data.clutter", ValueType::Count, "3"},
      {"net.blocks", ValueType::Blocks, "8:1,16:2,32:2,64:2"},
      {"train.loss", ValueType::Choice, "cam", "ce|cam"},
      {"train.epochs", ValueType::Int, "40"},
      {"train.batch", ValueType::Count, "64"},
      {"train.lr", ValueType::Real, "0.05"},
      {"train.momentum", ValueType::Real, "0.9"},
      {"train.weight_decay", ValueType::Real, "0.0005"},
      {"train.augment", ValueType::Bool, "true"},
      {"train.detach_cam_target", ValueType::Bool, "false"},
      {"alpha.c", ValueType::Real, "3"},
      {"alpha.t", ValueType::Int, "20"},
      {"alpha.adaptive", ValueType::Bool, "true"},
      {"distill.method", ValueType::Choice, "ccm", "kd|at|ccm"},
      {"distill.teacher", ValueType::Text, ""},
      {"distill.tau", ValueType::Real, "4"},
      {"distill.beta", ValueType::Real, "0.5"},
      {"distill.gamma", ValueType::Real, "1"},
      {"distill.at_metric", ValueType::Choice, "l2", "l1|l2"},
      {"checkpoint", ValueType::Text, ""},
      {"export.indices", ValueType::Indices, "0,1,2,3"},
      {"export.split", ValueType::Choice, "test", "train|test"},
      {"export.upscale", ValueType::Bool, "true"},
  };
  return keys;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return std::string(s.substr(b, s.find_last_not_of(" \t\r") - b + 1));
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream in(s);
  for (std::string p; std::getline(in, p, sep);) parts.push_back(trim(p));
  return parts;
}

template <typename I>
bool parse_integer(const std::string& s, I& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end && !s.empty();
}

inline bool parse_real(const std::string& s, double& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end && !s.empty() && std::isfinite(out);
}

inline bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes") return out = true, true;
  if (s == "false" || s == "0" || s == "no") return out = false, true;
  return false;
}

inline std::vector<BlockSpec> parse_blocks(const std::string& s) {
  std::vector<BlockSpec> blocks;
  for (const auto& item : split(s, ',')) {
    const auto colon = item.find(':');
    BlockSpec b;
    if (colon == std::string::npos || !parse_integer(trim(item.substr(0, colon)), b.out_channels) ||
        !parse_integer(trim(item.substr(colon + 1)), b.stride) || b.out_channels == 0 || (b.stride != 1 && b.stride != 2))
      throw ConfigError("expected channels:stride pairs with stride 1 or 2, got '" + s + "'");
    blocks.push_back(b);
  }
  if (blocks.empty()) throw ConfigError("expected at least one block");
  return blocks;
}

inline std::vector<std::size_t> parse_indices(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : split(s, ',')) {
    std::size_t v;
    if (!parse_integer(item, v)) throw ConfigError("expected a comma-separated index list, got '" + s + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("expected at least one index");
  return out;
}

inline const char* type_name(ValueType t) {
  switch (t) {
    case ValueType::Int: return "an integer";
    case ValueType::Count: return "a non-negative integer";
    case ValueType::Real: return "a finite number";
    case ValueType::Bool: return "true or false";
    case ValueType::Text: return "text";
    case ValueType::Choice: return "one of";
    case ValueType::Blocks: return "a block list";
    case ValueType::Indices: return "an index list";
  }
  return "";
}

inline void check_value(const ConfigKey& key, const std::string& value) {
  bool ok = true;
  long long i;
  std::uint64_t u;
  double r;
  bool b;
  switch (key.type) {
    case ValueType::Int: ok = parse_integer(value, i); break;
    case ValueType::Count: ok = parse_integer(value, u); break;
    case ValueType::Real: ok = parse_real(value, r); break;
    case ValueType::Bool: ok = parse_bool(value, b); break;
    case ValueType::Text: break;
    case ValueType::Choice: {
      const auto options = split(key.choices, '|');
      ok = std::find(options.begin(), options.end(), value) != options.end();
      break;
    }
    case ValueType::Blocks:
    case ValueType::Indices:
      try {
        key.type == ValueType::Blocks ? (void)parse_blocks(value) : (void)parse_indices(value);
      } catch (const ConfigError&) {
        ok = false;
      }
      break;
  }
  if (!ok) {
    std::string want = type_name(key.type);
    if (key.type == ValueType::Choice) want += std::string(" ") + key.choices;
    throw ConfigError("config: key '" + std::string(key.name) + "' expects " + want + ", got '" + value + "'");
  }
}

}  // namespace detail

/// Resolved key/value configuration. Every schema key has a value (possibly empty for keys
/// without a default); `require` rejects empty ones.
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_schema()) values_[k.name] = k.fallback;
  }

  /// Sets one key after checking that it exists and that the value has the right type.
  void set(const std::string& key, const std::string& value) {
    const auto& schema = config_schema();
    const auto it = std::find_if(schema.begin(), schema.end(), [&](const ConfigKey& k) { return key == k.name; });
    if (it == schema.end()) throw ConfigError("config: unknown key '" + key + "'");
    const auto v = detail::trim(value);
    if (!v.empty()) detail::check_value(*it, v);
    values_[key] = v;
  }

  /// `key=value` as given on the command line.
  void set_assignment(const std::string& assignment, const std::string& origin = "--set") {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ": expected key = value, got '" + assignment + "'");
    set(detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
  }

  /// Reads `key = value` lines; `#` starts a comment, blank lines are skipped.
  void merge_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    int line_no = 0;
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      line = detail::trim(line.substr(0, line.find('#')));
      if (line.empty()) continue;
      try {
        set_assignment(line, origin + ":" + std::to_string(line_no));
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    merge_text(buf.str(), path.string());
  }

  const std::string& text(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
    return it->second;
  }

  const std::string& require(const std::string& key) const {
    const auto& v = text(key);
    if (v.empty()) throw ConfigError("config: missing required key '" + key + "'");
    return v;
  }

  long long integer(const std::string& key) const {
    long long v = 0;
    detail::parse_integer(require(key), v);
    return v;
  }
  std::uint64_t count(const std::string& key) const {
    std::uint64_t v = 0;
    detail::parse_integer(require(key), v);
    return v;
  }
  double real(const std::string& key) const {
    double v = 0;
    detail::parse_real(require(key), v);
    return v;
  }
  bool flag(const std::string& key) const {
    bool v = false;
    detail::parse_bool(require(key), v);
    return v;
  }

  /// One `key = value` line per schema key, in schema order.
  std::string echo() const {
    std::ostringstream out;
    for (const auto& k : config_schema()) out << k.name << " = " << values_.at(k.name) << '\n';
    return out.str();
  }

  NetworkConfig network(std::size_t channels, std::size_t size, std::size_t classes) const {
    NetworkConfig c;
    c.input_channels = channels;
    c.input_size = size;
    c.class_count = classes;
    c.blocks = detail::parse_blocks(require("net.blocks"));
    return c;
  }

  TrainConfig training() const {
    TrainConfig c;
    c.epochs = static_cast<int>(integer("train.epochs"));
    c.batch_size = count("train.batch");
    c.lr = real("train.lr");
    c.momentum = real("train.momentum");
    c.weight_decay = real("train.weight_decay");
    c.augment = flag("train.augment");
    c.detach_cam_target = flag("train.detach_cam_target");
    c.mode = require("train.loss") == "ce" ? LossMode::CE : LossMode::CamLoss;
    c.alpha.c = real("alpha.c");
    c.alpha.t = static_cast<int>(integer("alpha.t"));
    c.alpha.adaptive = flag("alpha.adaptive");
    c.seed = count("seed");
    if (c.alpha.c < 0) throw ConfigError("config: alpha.c must be >= 0");
    c.validate();
    return c;
  }

  DistillConfig distillation() const {
    const auto& m = require("distill.method");
    DistillConfig c;
    c.method = m == "kd" ? DistillMethod::KD : m == "at" ? DistillMethod::AT : DistillMethod::CCM;
    c.tau = real("distill.tau");
    c.beta = real("distill.beta");
    c.gamma = real("distill.gamma");
    c.at_metric = require("distill.at_metric") == "l1" ? DistanceMetric::L1 : DistanceMetric::L2;
    c.validate();
    return c;
  }

  std::vector<std::size_t> indices(const std::string& key) const { return detail::parse_indices(require(key)); }
  std::filesystem::path path(const std::string& key) const { return require(key); }

 private:
  std::map<std::string, std::string> values_;
};

// ---- file outputs ----

inline const char* kMetricsHeader = "epoch,lr,alpha,loss_ce,loss_cam,train_acc,test_acc";

inline std::string format_metrics(const std::vector<EpochMetrics>& metrics) {
  std::ostringstream out;
  out << kMetricsHeader << '\n' << std::fixed << std::setprecision(6);
  for (const auto& m : metrics)
    out << m.epoch << ',' << m.lr << ',' << m.alpha << ',' << m.loss_ce << ',' << m.loss_cam << ',' << m.train_acc
        << ',' << m.test_acc << '\n';
  return out.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline void write_metrics(const std::vector<EpochMetrics>& metrics, const std::filesystem::path& path) {
  write_text(path, format_metrics(metrics));
}

inline std::vector<EpochMetrics> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError("metrics: bad header in " + path.string());
  std::vector<EpochMetrics> out;
  while (std::getline(in, line)) {
    const auto f = detail::split(line, ',');
    EpochMetrics m;
    double v[6];
    bool ok = f.size() == 7 && detail::parse_integer(f[0], m.epoch);
    for (int i = 0; ok && i < 6; ++i) ok = detail::parse_real(f[i + 1], v[i]);
    if (!ok) throw FormatError("metrics: malformed row '" + line + "'");
    m.lr = v[0], m.alpha = v[1], m.loss_ce = v[2], m.loss_cam = v[3], m.train_acc = v[4], m.test_acc = v[5];
    out.push_back(m);
  }
  return out;
}

/// Byte for a normalized value: round half away from zero of 255 v, clamped to [0, 255].
inline std::uint8_t pgm_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp<long>(std::lround(255.0 * v), 0, 255));
}

/// Binary greyscale PGM (P5, maxval 255) of a [H,W] map with values in [0,1].
template <typename T>
std::vector<unsigned char> encode_pgm(const Tensor<T>& map) {
  if (map.rank() != 2) throw std::invalid_argument("pgm: expected a [H,W] map, got " + shape_str(map.shape()));
  const std::string header =
      "P5\n" + std::to_string(map.extent(1)) + " " + std::to_string(map.extent(0)) + "\n255\n";
  std::vector<unsigned char> bytes(header.begin(), header.end());
  for (T v : map.values()) bytes.push_back(pgm_byte(static_cast<double>(v)));
  return bytes;
}

template <typename T>
void write_pgm(const std::filesystem::path& path, const Tensor<T>& map) {
  write_file_bytes(path, encode_pgm(map));
}

// ---- commands ----

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Checks that every path a command reads exists before any work starts.
inline void check_inputs(const std::string& command, const RunConfig& cfg) {
  namespace fs = std::filesystem;
  auto need = [](const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw ConfigError(what + " not found: " + p.string());
  };
  const auto& source = cfg.require("data.source");
  if (command != "gen-data") {
    if (source == "cifar10") {
      const auto dir = cfg.path("data.path");
      for (int b = 1; b <= 5; ++b) need(dir / ("data_batch_" + std::to_string(b) + ".bin"), "CIFAR-10 batch");
      need(dir / "test_batch.bin", "CIFAR-10 batch");
    } else if (source == "cache") {
      need(cfg.path("data.path") / "train.bin", "dataset cache");
      need(cfg.path("data.path") / "test.bin", "dataset cache");
    }
  }
  if (command == "distill") need(cfg.path("distill.teacher"), "teacher checkpoint");
  if (command == "eval" || command == "export-maps") need(cfg.path("checkpoint"), "checkpoint");
}

inline DataSplits load_data(const RunConfig& cfg) {
  const auto& source = cfg.require("data.source");
  if (source == "cifar10") return {load_cifar10(cfg.path("data.path"), true), load_cifar10(cfg.path("data.path"), false)};
  if (source == "cache")
    return {load_dataset(cfg.path("data.path") / "train.bin"), load_dataset(cfg.path("data.path") / "test.bin")};
  const auto seed = cfg.count("data.seed");
  const auto classes = cfg.count("data.classes"), size = cfg.count("data.size"), clutter = cfg.count("data.clutter");
  return {gen_shapes(cfg.count("data.train_count"), classes, size, clutter, stream_seed(seed, 1)),
          gen_shapes(cfg.count("data.test_count"), classes, size, clutter, stream_seed(seed, 2))};
}

inline void check_compatible(const NetworkConfig& nc, const Dataset& ds) {
  const auto shape = ds.image_shape();
  if (shape[0] != nc.input_channels || shape[1] != nc.input_size || shape[2] != nc.input_size)
    throw std::invalid_argument("network expects [" + std::to_string(nc.input_channels) + "," +
                                std::to_string(nc.input_size) + "," + std::to_string(nc.input_size) +
                                "] images, dataset has " + shape_str(shape));
  if (ds.class_count != nc.class_count)
    throw std::invalid_argument("network has " + std::to_string(nc.class_count) + " classes, dataset has " +
                                std::to_string(ds.class_count));
}

/// Writes final.ckpt after the last epoch and best.ckpt whenever test accuracy strictly improves.
class CheckpointWriter {
 public:
  explicit CheckpointWriter(std::filesystem::path dir) : dir_(std::move(dir)) {}

  void operator()(const EpochMetrics& m, const Network<float>& net) {
    if (m.test_acc > best_) {
      best_ = m.test_acc;
      net.save(dir_ / "best.ckpt");
    }
  }

 private:
  std::filesystem::path dir_;
  double best_ = -1;
};

inline void log_epoch(std::ostream& log, const EpochMetrics& m) {
  log << "epoch " << m.epoch << "  lr " << std::fixed << std::setprecision(4) << m.lr << "  alpha " << m.alpha
      << "  ce " << m.loss_ce << "  cam " << m.loss_cam << "  train " << m.train_acc << "  test " << m.test_acc
      << std::defaultfloat << std::endl;
}

inline void cmd_train(const RunConfig& cfg, std::ostream& log) {
  const auto out = cfg.path("out");
  const auto tc = cfg.training();
  auto data = load_data(cfg);
  const auto shape = data.train.image_shape();
  const auto nc = cfg.network(shape[0], shape[1], data.train.class_count);
  check_compatible(nc, data.test);
  auto net = Network<float>::build(nc, stream_seed(tc.seed, 3));
  CheckpointWriter best(out);
  const auto result = train(net, data.train, data.test, tc, [&](const EpochMetrics& m, const Network<float>& n) {
    log_epoch(log, m);
    best(m, n);
  });
  net.save(out / "final.ckpt");
  write_metrics(result.metrics, out / "metrics.csv");
  if (result.triggered_epoch) log << "alpha switched on at epoch " << *result.triggered_epoch << '\n';
}

inline void cmd_distill(const RunConfig& cfg, std::ostream& log) {
  const auto out = cfg.path("out");
  const auto tc = cfg.training();
  const auto dc = cfg.distillation();
  const auto teacher = Network<float>::load(cfg.path("distill.teacher"));
  auto data = load_data(cfg);
  check_compatible(teacher.config(), data.train);
  check_compatible(teacher.config(), data.test);
  const auto nc = cfg.network(teacher.config().input_channels, teacher.config().input_size, teacher.config().class_count);
  auto student = Network<float>::build(nc, stream_seed(tc.seed, 3));
  CheckpointWriter best(out);
  const auto result =
      distill_train(teacher, student, data.train, data.test, tc, dc, [&](const EpochMetrics& m, const Network<float>& n) {
        log_epoch(log, m);
        best(m, n);
      });
  student.save(out / "final.ckpt");
  write_metrics(result.metrics, out / "metrics.csv");
}

inline EvalResult cmd_eval(const RunConfig& cfg, std::ostream& log) {
  const auto net = Network<float>::load(cfg.path("checkpoint"));
  const auto data = load_data(cfg);
  check_compatible(net.config(), data.test);
  const auto r = evaluate(net, data.test);
  std::ostringstream s;
  s << std::fixed << std::setprecision(6) << "accuracy = " << r.accuracy << "\nloss_ce = " << r.loss_ce
    << "\nloss_cam = " << r.loss_cam << '\n';
  if (r.iou) s << "iou = " << *r.iou << '\n';
  write_text(cfg.path("out") / "eval.txt", s.str());
  log << s.str();
  return r;
}

/// Normalized CAAM, target-class CAM and their absolute difference for one sample, either at
/// feature resolution or bilinearly upscaled to the input size before normalization.
struct SampleMaps {
  Tensor<double> caam;
  Tensor<double> cam;
  Tensor<double> diff;
};

inline SampleMaps sample_maps(const Network<float>& net, const Dataset& ds, std::size_t index, bool upscale) {
  if (index >= ds.size())
    throw std::out_of_range("export: sample index " + std::to_string(index) + " out of range (dataset has " +
                            std::to_string(ds.size()) + ")");
  Tape<float> tape;
  const auto fw = net.forward(tape, stack_images<float>(ds, {index}), false);
  const auto features = fw.features.value().cast<double>();
  const auto head = net.head().cast<double>();
  auto prepare = [&](ActivationMap<double> m) {
    if (upscale) m.values = resize_bilinear(m.values, net.config().input_size, net.config().input_size);
    return minmax_normalize(m);
  };
  SampleMaps maps;
  maps.caam = prepare(compute_caam(features, 0)).values;
  maps.cam = prepare(compute_cam_for_class(features, head, ds.samples[index].label, 0)).values;
  maps.diff = maps.caam;
  for (std::size_t i = 0; i < maps.diff.size(); ++i) maps.diff[i] = std::abs(maps.caam[i] - maps.cam[i]);
  return maps;
}

inline void cmd_export_maps(const RunConfig& cfg, std::ostream& log) {
  const auto out = cfg.path("out");
  const auto net = Network<float>::load(cfg.path("checkpoint"));
  const auto data = load_data(cfg);
  const auto& ds = cfg.require("export.split") == "train" ? data.train : data.test;
  check_compatible(net.config(), ds);
  const auto indices = cfg.indices("export.indices");
  for (auto i : indices)
    if (i >= ds.size())
      throw std::out_of_range("export: sample index " + std::to_string(i) + " out of range (dataset has " +
                              std::to_string(ds.size()) + ")");
  for (auto i : indices) {
    const auto maps = sample_maps(net, ds, i, cfg.flag("export.upscale"));
    const auto stem = std::to_string(i);
    write_pgm(out / (stem + "_caam.pgm"), maps.caam);
    write_pgm(out / (stem + "_cam.pgm"), maps.cam);
    write_pgm(out / (stem + "_diff.pgm"), maps.diff);
    log << "wrote " << stem << "_{caam,cam,diff}.pgm\n";
  }
}

inline void cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
  const auto out = cfg.path("out");
  const auto data = load_data(cfg);
  save_dataset(data.train, out / "train.bin");
  save_dataset(data.test, out / "test.bin");
  log << "wrote " << data.train.size() << " train and " << data.test.size() << " test samples to " << out.string()
      << '\n';
}

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"train", "distill", "eval", "export-maps", "gen-data"};
  return names;
}

/// Validates inputs, creates the run directory, echoes the resolved config into it and runs
/// the command.
inline void run_command(const std::string& command, const RunConfig& cfg, std::ostream& log) {
  const auto& names = command_names();
  if (std::find(names.begin(), names.end(), command) == names.end())
    throw ConfigError("unknown command '" + command + "'");
  check_inputs(command, cfg);
  if (command == "train" || command == "distill") {
    cfg.training();
    if (command == "distill") cfg.distillation();
  }
  if (command == "export-maps") cfg.indices("export.indices");
  const auto out = cfg.path("out");
  std::filesystem::create_directories(out);
  write_text(out / "config.txt", cfg.echo());
  if (command == "train") cmd_train(cfg, log);
  else if (command == "distill") cmd_distill(cfg, log);
  else if (command == "eval") cmd_eval(cfg, log);
  else if (command == "export-maps") cmd_export_maps(cfg, log);
  else cmd_gen_data(cfg, log);
}

}  // namespace camloss

#endif  // CAMLOSS_CLI_HPP_
