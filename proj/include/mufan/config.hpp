#pragma once

// Experiment configuration.
//
// File grammar (one item per line):
//   # comment            (also after a value: "lr = 0.03  # note")
//   [section]
//   key = value
// Blank lines are ignored. Keys must belong to the current section and each
// may appear once. Lists are comma separated. Every key is optional; the
// defaults are the values in ExperimentConfig below.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mufan/encoder.hpp"
#include "mufan/losses.hpp"
#include "mufan/norm.hpp"
#include "mufan/replay.hpp"
#include "mufan/streams.hpp"

namespace mufan {

enum class HeadMode { single, multi };
enum class ReplayDrawMode { per_update, once };

inline std::string_view to_string(HeadMode m) { return m == HeadMode::single ? "single" : "multi"; }
inline std::string_view to_string(ReplayDrawMode m) { return m == ReplayDrawMode::per_update ? "per_update" : "once"; }
inline std::string_view to_string(EmbeddingKind k) { return k == EmbeddingKind::logits ? "logits" : "penultimate"; }

struct ExperimentConfig {
  StreamConfig stream;

  struct EncoderSection {
    std::array<std::size_t, 4> stage_channels{8, 16, 32, 64};
    AggregateMode aggregate_mode = AggregateMode::top_down;
    std::size_t aggregate_channels = 0;
    std::uint64_t seed = 0;
    std::string pyramid_file;
    bool operator==(const EncoderSection&) const = default;
  } encoder;

  struct ModelSection {
    NormKind norm_kind = NormKind::spn;
    std::size_t groups = 2;
    double momentum = 0.1;
    double epsilon = 1e-5;
    HeadMode head_mode = HeadMode::single;
    std::array<std::size_t, 2> widths{16, 32};
    EmbeddingKind embedding = EmbeddingKind::logits;
    bool operator==(const ModelSection&) const = default;
  } model;

  struct LossSection {
    LossWeights weights;
    PotentialMetric potential_metric = PotentialMetric::cosine;
    DistillVariant distill_variant = DistillVariant::csd;
    std::size_t n = 10;
    std::size_t s = 10;
    std::size_t n_s = 1;
    bool operator==(const LossSection&) const = default;
  } loss;

  struct ReplaySection {
    ReplayPolicy policy = ReplayPolicy::ring;
    std::size_t k = 50;
    std::size_t replay_batch = 64;
    bool operator==(const ReplaySection&) const = default;
  } replay;

  struct TrainSection {
    double lr = 0.03;
    std::size_t batch = 10;
    std::size_t inner_updates = 2;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    ReplayDrawMode replay_draw = ReplayDrawMode::per_update;
    AugmentScope augment_scope = AugmentScope::replay_only;
    AugmentOps augment_ops;
    bool operator==(const TrainSection&) const = default;
  } train;

  struct OutputSection {
    std::string directory = "results";
    bool operator==(const OutputSection&) const = default;
  } output;

  bool operator==(const ExperimentConfig&) const = default;

  bool task_free() const { return loss.distill_variant == DistillVariant::tf; }

  EncoderConfig encoder_config() const {
    EncoderConfig e;
    e.input_channels = stream.channels;
    e.stage_channels = encoder.stage_channels;
    e.width = stream.width;
    e.height = stream.height;
    e.mode = encoder.aggregate_mode;
    e.aggregate_channels = encoder.aggregate_channels;
    return e;
  }

  NormConfig norm_config() const {
    NormConfig n;
    n.kind = model.norm_kind;
    n.groups = model.groups;
    n.momentum = model.momentum;
    n.epsilon = model.epsilon;
    return n;
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    out.push_back(trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <class T>
T parse_number(const std::string& path, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = first + text.size();
  if (!text.empty() && text[0] == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || text.empty()) throw InvalidValue(path, "'" + text + "' is not a number");
  return v;
}

inline std::string format_number(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
  return std::string(buf, r.ptr);
}

template <class T>
std::string format_number(T v) {
  return std::to_string(v);
}

template <class E, class Parse>
E parse_enum(const std::string& path, const std::string& text, Parse parse, std::string_view choices) {
  auto v = parse(text);
  if (!v) throw InvalidValue(path, "'" + text + "' is not one of " + std::string(choices));
  return *v;
}

struct KeySpec {
  std::function<void(ExperimentConfig&, const std::string& path, const std::string& value)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

inline std::size_t positive(const std::string& path, const std::string& text) {
  auto v = parse_number<std::size_t>(path, text);
  if (v == 0) throw InvalidValue(path, "must be positive");
  return v;
}

inline double nonneg(const std::string& path, const std::string& text) {
  auto v = parse_number<double>(path, text);
  if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidValue(path, "must be a finite non-negative number");
  return v;
}

inline double positive_real(const std::string& path, const std::string& text) {
  auto v = parse_number<double>(path, text);
  if (!(v > 0.0) || !std::isfinite(v)) throw InvalidValue(path, "must be a finite positive number");
  return v;
}

template <class Range>
std::string join(const Range& r) {
  std::string out;
  for (const auto& x : r) {
    if (!out.empty()) out += ',';
    out += format_number(x);
  }
  return out;
}

inline std::string augment_ops_string(const AugmentOps& ops) {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += ',';
    out += name;
  };
  add(ops.crop_pad, "crop_pad");
  add(ops.hflip, "hflip");
  add(ops.resize, "resize");
  return out.empty() ? "none" : out;
}

// Ordered so that serialize() output is stable.
inline const std::vector<std::pair<std::string, KeySpec>>& key_table() {
  using C = ExperimentConfig;
  using S = std::string;
  static const std::vector<std::pair<std::string, KeySpec>> table = {
      // stream
      {"stream.kind",
       {[](C& c, const S& p, const S& v) {
          c.stream.kind = parse_enum<StreamKind>(p, v, parse_stream_kind, "gaussian_blobs, rotated_patterns, tiny_images");
        },
        [](const C& c) { return S(to_string(c.stream.kind)); }}},
      {"stream.tasks", {[](C& c, const S& p, const S& v) { c.stream.tasks = positive(p, v); },
                        [](const C& c) { return format_number(c.stream.tasks); }}},
      {"stream.classes_per_task",
       {[](C& c, const S& p, const S& v) {
          c.stream.classes_per_task = parse_number<std::size_t>(p, v);
          if (c.stream.classes_per_task < 2) throw InvalidValue(p, "must be at least 2");
        },
        [](const C& c) { return format_number(c.stream.classes_per_task); }}},
      {"stream.samples", {[](C& c, const S& p, const S& v) { c.stream.samples = positive(p, v); },
                          [](const C& c) { return format_number(c.stream.samples); }}},
      {"stream.test_samples", {[](C& c, const S& p, const S& v) { c.stream.test_samples = positive(p, v); },
                               [](const C& c) { return format_number(c.stream.test_samples); }}},
      {"stream.channels", {[](C& c, const S& p, const S& v) { c.stream.channels = positive(p, v); },
                           [](const C& c) { return format_number(c.stream.channels); }}},
      {"stream.width",
       {[](C& c, const S& p, const S& v) {
          c.stream.width = positive(p, v);
          if (c.stream.width % 16) throw InvalidValue(p, "must be a multiple of 16");
        },
        [](const C& c) { return format_number(c.stream.width); }}},
      {"stream.height",
       {[](C& c, const S& p, const S& v) {
          c.stream.height = positive(p, v);
          if (c.stream.height % 16) throw InvalidValue(p, "must be a multiple of 16");
        },
        [](const C& c) { return format_number(c.stream.height); }}},
      {"stream.noise", {[](C& c, const S& p, const S& v) { c.stream.noise = nonneg(p, v); },
                        [](const C& c) { return format_number(c.stream.noise); }}},
      {"stream.seed", {[](C& c, const S& p, const S& v) { c.stream.seed = parse_number<std::uint64_t>(p, v); },
                       [](const C& c) { return format_number(c.stream.seed); }}},
      {"stream.directory", {[](C& c, const S&, const S& v) { c.stream.directory = v; },
                            [](const C& c) { return c.stream.directory; }}},
      // encoder
      {"encoder.stage_channels",
       {[](C& c, const S& p, const S& v) {
          auto items = split_list(v);
          if (items.size() != 4) throw InvalidValue(p, "expected 4 comma-separated channel counts");
          for (std::size_t k = 0; k < 4; ++k) {
            c.encoder.stage_channels[k] = positive(p, items[k]);
            if (k && c.encoder.stage_channels[k] < c.encoder.stage_channels[k - 1])
              throw InvalidValue(p, "channel counts must be non-decreasing");
          }
        },
        [](const C& c) { return join(c.encoder.stage_channels); }}},
      {"encoder.aggregate_mode",
       {[](C& c, const S& p, const S& v) {
          c.encoder.aggregate_mode = parse_enum<AggregateMode>(p, v, parse_aggregate_mode, "standard, bottom_up, top_down");
        },
        [](const C& c) { return S(to_string(c.encoder.aggregate_mode)); }}},
      {"encoder.aggregate_channels",
       {[](C& c, const S& p, const S& v) { c.encoder.aggregate_channels = parse_number<std::size_t>(p, v); },
        [](const C& c) { return format_number(c.encoder.aggregate_channels); }}},
      {"encoder.seed", {[](C& c, const S& p, const S& v) { c.encoder.seed = parse_number<std::uint64_t>(p, v); },
                        [](const C& c) { return format_number(c.encoder.seed); }}},
      {"encoder.pyramid_file", {[](C& c, const S&, const S& v) { c.encoder.pyramid_file = v; },
                                [](const C& c) { return c.encoder.pyramid_file; }}},
      // model
      {"model.norm_kind",
       {[](C& c, const S& p, const S& v) {
          c.model.norm_kind = parse_enum<NormKind>(p, v, parse_norm_kind, "bn, in, ln, gn, sn, cn, spn");
        },
        [](const C& c) { return S(to_string(c.model.norm_kind)); }}},
      {"model.groups", {[](C& c, const S& p, const S& v) { c.model.groups = positive(p, v); },
                        [](const C& c) { return format_number(c.model.groups); }}},
      {"model.momentum",
       {[](C& c, const S& p, const S& v) {
          c.model.momentum = parse_number<double>(p, v);
          if (!(c.model.momentum >= 0.0 && c.model.momentum <= 1.0)) throw InvalidValue(p, "must lie in [0, 1]");
        },
        [](const C& c) { return format_number(c.model.momentum); }}},
      {"model.epsilon", {[](C& c, const S& p, const S& v) { c.model.epsilon = positive_real(p, v); },
                         [](const C& c) { return format_number(c.model.epsilon); }}},
      {"model.head_mode",
       {[](C& c, const S& p, const S& v) {
          if (v == "single") c.model.head_mode = HeadMode::single;
          else if (v == "multi") c.model.head_mode = HeadMode::multi;
          else throw InvalidValue(p, "'" + v + "' is not one of single, multi");
        },
        [](const C& c) { return S(to_string(c.model.head_mode)); }}},
      {"model.widths",
       {[](C& c, const S& p, const S& v) {
          auto items = split_list(v);
          if (items.size() != 2) throw InvalidValue(p, "expected 2 comma-separated widths");
          for (std::size_t k = 0; k < 2; ++k) c.model.widths[k] = positive(p, items[k]);
        },
        [](const C& c) { return join(c.model.widths); }}},
      {"model.embedding",
       {[](C& c, const S& p, const S& v) {
          if (v == "logits") c.model.embedding = EmbeddingKind::logits;
          else if (v == "penultimate") c.model.embedding = EmbeddingKind::penultimate;
          else throw InvalidValue(p, "'" + v + "' is not one of logits, penultimate");
        },
        [](const C& c) { return S(to_string(c.model.embedding)); }}},
      // loss
      {"loss.lambda_dctn", {[](C& c, const S& p, const S& v) { c.loss.weights.lambda_dctn = nonneg(p, v); },
                            [](const C& c) { return format_number(c.loss.weights.lambda_dctn); }}},
      {"loss.lambda_dcsd", {[](C& c, const S& p, const S& v) { c.loss.weights.lambda_dcsd = nonneg(p, v); },
                            [](const C& c) { return format_number(c.loss.weights.lambda_dcsd); }}},
      {"loss.tau_dctn", {[](C& c, const S& p, const S& v) { c.loss.weights.tau_dctn = positive_real(p, v); },
                         [](const C& c) { return format_number(c.loss.weights.tau_dctn); }}},
      {"loss.tau_teacher", {[](C& c, const S& p, const S& v) { c.loss.weights.tau_teacher = positive_real(p, v); },
                            [](const C& c) { return format_number(c.loss.weights.tau_teacher); }}},
      {"loss.tau_student", {[](C& c, const S& p, const S& v) { c.loss.weights.tau_student = positive_real(p, v); },
                            [](const C& c) { return format_number(c.loss.weights.tau_student); }}},
      {"loss.potential_metric",
       {[](C& c, const S& p, const S& v) {
          c.loss.potential_metric = parse_enum<PotentialMetric>(p, v, parse_potential_metric, "cosine, l2, arccos");
        },
        [](const C& c) { return S(to_string(c.loss.potential_metric)); }}},
      {"loss.distill_variant",
       {[](C& c, const S& p, const S& v) {
          c.loss.distill_variant = parse_enum<DistillVariant>(p, v, parse_distill_variant, "csd, fsd, lsd, tf, none");
        },
        [](const C& c) { return S(to_string(c.loss.distill_variant)); }}},
      {"loss.N", {[](C& c, const S& p, const S& v) { c.loss.n = positive(p, v); },
                  [](const C& c) { return format_number(c.loss.n); }}},
      {"loss.S", {[](C& c, const S& p, const S& v) { c.loss.s = positive(p, v); },
                  [](const C& c) { return format_number(c.loss.s); }}},
      {"loss.N_S", {[](C& c, const S& p, const S& v) { c.loss.n_s = positive(p, v); },
                    [](const C& c) { return format_number(c.loss.n_s); }}},
      // replay
      {"replay.policy",
       {[](C& c, const S& p, const S& v) {
          c.replay.policy = parse_enum<ReplayPolicy>(p, v, parse_replay_policy, "ring, reservoir, none");
        },
        [](const C& c) { return S(to_string(c.replay.policy)); }}},
      {"replay.K", {[](C& c, const S& p, const S& v) { c.replay.k = positive(p, v); },
                    [](const C& c) { return format_number(c.replay.k); }}},
      {"replay.replay_batch", {[](C& c, const S& p, const S& v) { c.replay.replay_batch = positive(p, v); },
                               [](const C& c) { return format_number(c.replay.replay_batch); }}},
      // train
      {"train.lr", {[](C& c, const S& p, const S& v) { c.train.lr = positive_real(p, v); },
                    [](const C& c) { return format_number(c.train.lr); }}},
      {"train.batch", {[](C& c, const S& p, const S& v) { c.train.batch = positive(p, v); },
                       [](const C& c) { return format_number(c.train.batch); }}},
      {"train.inner_updates",
       {[](C& c, const S& p, const S& v) { c.train.inner_updates = parse_number<std::size_t>(p, v); },
        [](const C& c) { return format_number(c.train.inner_updates); }}},
      {"train.seeds",
       {[](C& c, const S& p, const S& v) {
          std::vector<std::uint64_t> seeds;
          for (const auto& item : split_list(v)) seeds.push_back(parse_number<std::uint64_t>(p, item));
          if (seeds.empty()) throw InvalidValue(p, "need at least one seed");
          c.train.seeds = std::move(seeds);
        },
        [](const C& c) { return join(c.train.seeds); }}},
      {"train.replay_draw",
       {[](C& c, const S& p, const S& v) {
          if (v == "per_update") c.train.replay_draw = ReplayDrawMode::per_update;
          else if (v == "once") c.train.replay_draw = ReplayDrawMode::once;
          else throw InvalidValue(p, "'" + v + "' is not one of per_update, once");
        },
        [](const C& c) { return S(to_string(c.train.replay_draw)); }}},
      {"train.augment_scope",
       {[](C& c, const S& p, const S& v) {
          c.train.augment_scope = parse_enum<AugmentScope>(p, v, parse_augment_scope, "replay_only, all, none");
        },
        [](const C& c) { return S(to_string(c.train.augment_scope)); }}},
      {"train.augment_ops",
       {[](C& c, const S& p, const S& v) {
          AugmentOps ops{false, false, false, c.train.augment_ops.pad};
          if (v != "none") {
            for (const auto& item : split_list(v)) {
              if (item == "crop_pad") ops.crop_pad = true;
              else if (item == "hflip") ops.hflip = true;
              else if (item == "resize") ops.resize = true;
              else throw InvalidValue(p, "unknown augmentation '" + item + "'");
            }
          }
          c.train.augment_ops = ops;
        },
        [](const C& c) { return augment_ops_string(c.train.augment_ops); }}},
      {"train.augment_pad",
       {[](C& c, const S& p, const S& v) { c.train.augment_ops.pad = parse_number<std::size_t>(p, v); },
        [](const C& c) { return format_number(c.train.augment_ops.pad); }}},
      // output
      {"output.directory",
       {[](C& c, const S& p, const S& v) {
          if (v.empty()) throw InvalidValue(p, "must not be empty");
          c.output.directory = v;
        },
        [](const C& c) { return c.output.directory; }}},
  };
  return table;
}

inline const KeySpec* find_key(const std::string& path) {
  for (const auto& [name, entry] : key_table())
    if (name == path) return &entry;
  return nullptr;
}

}  // namespace detail

/// Every accepted key path, in serialization order.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [name, entry] : detail::key_table()) out.push_back(name);
  return out;
}

/// Sets one key by path ("section.key"). Throws UnknownKey / InvalidValue.
inline void set_config_value(ExperimentConfig& cfg, const std::string& path, const std::string& value) {
  const auto* entry = detail::find_key(path);
  if (!entry) throw UnknownKey(path);
  entry->set(cfg, path, value);
}

inline std::string get_config_value(const ExperimentConfig& cfg, const std::string& path) {
  const auto* entry = detail::find_key(path);
  if (!entry) throw UnknownKey(path);
  return entry->get(cfg);
}

/// Cross-key constraints that single-key setters cannot see.
inline void validate_config(const ExperimentConfig& c) {
  if (c.stream.kind == StreamKind::tiny_images && c.stream.directory.empty())
    throw InvalidValue("stream.directory", "required for tiny_images");
  if (c.model.norm_kind == NormKind::spn) {
    for (std::size_t w : c.model.widths)
      if (w % 2) throw InvalidValue("model.widths", "spn needs even widths");
  }
  if (c.model.norm_kind == NormKind::gn || c.model.norm_kind == NormKind::cn) {
    for (std::size_t w : c.model.widths)
      if (w % c.model.groups) throw InvalidValue("model.groups", "must divide every model width");
  }
  if (c.task_free() && c.model.head_mode == HeadMode::multi)
    throw InvalidValue("model.head_mode", "multi-head needs task ids, unavailable in task-free mode");
  if (c.task_free() && c.replay.policy == ReplayPolicy::ring)
    throw InvalidValue("replay.policy", "task-free mode has no task ids for ring buffers; use reservoir");
  if (c.replay.policy == ReplayPolicy::ring && c.loss.distill_variant != DistillVariant::none &&
      c.loss.distill_variant != DistillVariant::tf && c.loss.weights.lambda_dcsd > 0.0 && c.loss.n > c.replay.k)
    throw InvalidValue("loss.N", "exceeds the per-task buffer capacity replay.K");
}

/// Parses config text. Throws ParseError / UnknownKey / InvalidValue.
inline ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string raw, section;
  std::vector<std::string> seen;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(line_no, "unterminated section header");
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      const auto keys = config_keys();
      const bool known = std::any_of(keys.begin(), keys.end(),
                                     [&](const std::string& k) { return k.rfind(section + ".", 0) == 0; });
      if (!known) throw UnknownKey(section);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(line_no, "expected 'key = value'");
    if (section.empty()) throw ParseError(line_no, "key outside of any [section]");
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ParseError(line_no, "missing key");
    const std::string path = section + "." + key;
    if (std::find(seen.begin(), seen.end(), path) != seen.end()) throw ParseError(line_no, "duplicate key '" + path + "'");
    seen.push_back(path);
    set_config_value(cfg, path, value);
  }
  validate_config(cfg);
  return cfg;
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Full config in file grammar; parse_config_text(serialize_config(c)) == c.
inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out, section;
  for (const auto& [path, entry] : detail::key_table()) {
    const auto dot = path.find('.');
    const std::string sec = path.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out += '\n';
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += path.substr(dot + 1) + " = " + entry.get(cfg) + "\n";
  }
  return out;
}

inline bool same_config(const ExperimentConfig& a, const ExperimentConfig& b) {
  return serialize_config(a) == serialize_config(b);
}

}  // namespace mufan
