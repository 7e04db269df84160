#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mag/bench.hpp"
#include "mag/generator.hpp"
#include "mag/memory.hpp"
#include "mag/model.hpp"
#include "mag/synthworld.hpp"

namespace mag {

/// Everything a pipeline run needs. Sections: [run] [synth] [model]
/// [train_teacher] [train_memory] [train_generator] [bench] [stream].
struct PipelineConfig {
  std::uint64_t seed = 0;
  std::vector<std::string> phases = {"synth", "train-teacher", "train-memory", "train-generator", "bench"};

  DatasetConfig synth{};
  int n_train = 256;
  int n_test = 32;

  ModelConfig model{};

  TeacherTrainConfig teacher{};
  MemoryTrainConfig memory{};
  TrainSchedule generator{};

  BenchConfig bench{};
  int bench_cases = 176;
  int baseline_window_blocks = 2;

  std::string stream_mode = "mag";
  int stream_blocks = 30;

  /// Canonical key=value lines; the config hash is computed over these.
  std::map<std::string, std::string> canonical() const;
  std::string hash() const;
};

namespace detail {

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string fmt_double(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

/// Typed access with the failing field named in the error.
class IniReader {
 public:
  IniReader(const boost::property_tree::ptree& tree, std::string origin) : tree_(tree), origin_(std::move(origin)) {}

  template <class T>
  void get(const std::string& section, const std::string& key, T& out) {
    used_.insert(section + "." + key);
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return;
    const auto raw = sec->get_optional<std::string>(key);
    if (!raw) return;
    try {
      if constexpr (std::is_same_v<T, std::string>) {
        out = *raw;
      } else if constexpr (std::is_same_v<T, bool>) {
        if (*raw == "true" || *raw == "1") {
          out = true;
        } else if (*raw == "false" || *raw == "0") {
          out = false;
        } else {
          throw std::invalid_argument(*raw);
        }
      } else if constexpr (std::is_same_v<T, std::vector<int>>) {
        out.clear();
        std::stringstream ss(*raw);
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(item));
        if (out.empty()) throw std::invalid_argument(*raw);
      } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
        out.clear();
        std::stringstream ss(*raw);
        std::string item;
        while (std::getline(ss, item, ',')) {
          item.erase(0, item.find_first_not_of(" \t"));
          item.erase(item.find_last_not_of(" \t") + 1);
          if (!item.empty()) out.push_back(item);
        }
      } else {
        out = parse_number<T>(*raw);
      }
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": field [" + section + "] " + key + " has invalid value '" + *raw + "'");
    }
  }

  /// Rejects keys nobody asked for (likely typos).
  void check_unknown() const {
    for (const auto& [section, body] : tree_) {
      for (const auto& [key, value] : body) {
        if (!used_.count(section + "." + key)) {
          throw ConfigError(origin_ + ": unknown field [" + section + "] " + key);
        }
      }
    }
  }

 private:
  template <class T>
  static T parse_number(std::string s) {
    s.erase(0, s.find_first_not_of(" \t"));
    s.erase(s.find_last_not_of(" \t") + 1);
    std::size_t used = 0;
    T v{};
    if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!s.empty() && s[0] == '-') throw std::invalid_argument(s);
      v = std::stoull(s, &used);
    } else if constexpr (std::is_integral_v<T>) {
      v = static_cast<T>(std::stoll(s, &used));
    } else {
      v = static_cast<T>(std::stod(s, &used));
    }
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  }

  const boost::property_tree::ptree& tree_;
  std::string origin_;
  std::set<std::string> used_;
};

}  // namespace detail

inline const std::vector<std::string>& known_phases() {
  static const std::vector<std::string> p = {"synth", "train-teacher", "train-memory", "train-generator", "bench", "eval"};
  return p;
}

inline void validate_config(const PipelineConfig& c) {
  c.synth.validate();
  c.model.validate();
  c.generator.validate();
  if (c.n_train < 1 || c.n_test < 1) throw ConfigError("[synth] n_train and n_test must be >= 1");
  if (c.model.frame_h != c.synth.world.frame_h || c.model.frame_w != c.synth.world.frame_w ||
      c.model.channels != c.synth.world.channels) {
    throw ConfigError("[model] frame geometry must match [synth]");
  }
  if (c.model.scene_vocab < c.synth.world.families) throw ConfigError("[model] scene_vocab smaller than [synth] families");
  if (c.generator.clip_frames % c.model.block_frames != 0) {
    throw ConfigError("[train_generator] clip_frames must be divisible by [model] block_frames");
  }
  if (c.bench_cases < 1) throw ConfigError("[bench] n_cases must be >= 1");
  if (c.baseline_window_blocks < 1) throw ConfigError("[bench] baseline_window_blocks must be >= 1");
  BenchConfig b = c.bench;
  b.n_cases = c.bench_cases;
  b.validate();
  StreamMode::parse(c.stream_mode);
  if (c.stream_blocks < 1) throw ConfigError("[stream] blocks must be >= 1");
  for (const auto& p : c.phases) {
    bool ok = false;
    for (const auto& k : known_phases()) ok = ok || k == p;
    if (!ok) throw ConfigError("[run] unknown phase '" + p + "'");
  }
}

inline PipelineConfig parse_config(std::istream& in, const std::string& origin = "config") {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(origin + ": line " + std::to_string(e.line()) + ": " + e.message());
  }
  PipelineConfig c;
  detail::IniReader r(tree, origin);
  r.get("run", "seed", c.seed);
  r.get("run", "phases", c.phases);

  auto& w = c.synth.world;
  r.get("synth", "frame_h", w.frame_h);
  r.get("synth", "frame_w", w.frame_w);
  r.get("synth", "world_w", w.world_w);
  r.get("synth", "families", w.families);
  r.get("synth", "min_glyphs", w.min_glyphs);
  r.get("synth", "max_glyphs", w.max_glyphs);
  r.get("synth", "clip_frames", c.synth.clip_frames);
  r.get("synth", "p_pan", c.synth.p_pan);
  r.get("synth", "p_leave_return", c.synth.p_leave_return);
  r.get("synth", "p_static", c.synth.p_static);
  r.get("synth", "speeds", c.synth.speeds);
  r.get("synth", "n_train", c.n_train);
  r.get("synth", "n_test", c.n_test);

  auto& m = c.model;
  m.frame_h = w.frame_h;
  m.frame_w = w.frame_w;
  m.channels = w.channels;
  m.scene_vocab = w.families;
  r.get("model", "layers", m.layers);
  r.get("model", "d_model", m.d_model);
  r.get("model", "heads", m.heads);
  r.get("model", "patch_size", m.patch_size);
  r.get("model", "block_frames", m.block_frames);
  r.get("model", "time_dim", m.time_dim);
  r.get("model", "mlp_ratio", m.mlp_ratio);
  r.get("model", "rope_base", m.rope_base);

  r.get("train_teacher", "steps", c.teacher.steps);
  r.get("train_teacher", "batch", c.teacher.batch);
  r.get("train_teacher", "lr", c.teacher.adam.lr);

  r.get("train_memory", "steps", c.memory.steps);
  r.get("train_memory", "batch", c.memory.batch);
  r.get("train_memory", "lr", c.memory.adam.lr);
  r.get("train_memory", "max_start_offset", c.memory.batch_options.max_start_offset);

  auto& g = c.generator;
  r.get("train_generator", "steps", g.updates);
  r.get("train_generator", "k", g.k);
  r.get("train_generator", "lambda", g.lambda);
  r.get("train_generator", "ratio", g.student_per_generator);
  r.get("train_generator", "lr_generator", g.lr_generator);
  r.get("train_generator", "lr_student", g.lr_student);
  r.get("train_generator", "sample_steps", g.sample_steps);
  r.get("train_generator", "normalize_delta", g.dmd.normalize);
  r.get("train_generator", "checkpoint_every", g.checkpoint_every);
  g.clip_frames = c.synth.clip_frames;
  r.get("train_generator", "clip_frames", g.clip_frames);

  c.bench.world = w;
  c.bench.block_frames = m.block_frames;
  r.get("bench", "n_cases", c.bench_cases);
  r.get("bench", "memorize_frames", c.bench.memorize_frames);
  r.get("bench", "speeds", c.bench.speeds);
  r.get("bench", "baseline_window_blocks", c.baseline_window_blocks);
  c.bench.n_cases = c.bench_cases;

  r.get("stream", "mode", c.stream_mode);
  r.get("stream", "blocks", c.stream_blocks);
  r.check_unknown();

  validate_config(c);
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path.string());
  return parse_config(in, path.string());
}

inline std::map<std::string, std::string> PipelineConfig::canonical() const {
  using detail::fmt_double;
  using detail::join_ints;
  std::map<std::string, std::string> kv;
  kv["run.seed"] = std::to_string(seed);
  const auto& w = synth.world;
  kv["synth.frame_h"] = std::to_string(w.frame_h);
  kv["synth.frame_w"] = std::to_string(w.frame_w);
  kv["synth.world_w"] = std::to_string(w.world_w);
  kv["synth.families"] = std::to_string(w.families);
  kv["synth.min_glyphs"] = std::to_string(w.min_glyphs);
  kv["synth.max_glyphs"] = std::to_string(w.max_glyphs);
  kv["synth.clip_frames"] = std::to_string(synth.clip_frames);
  kv["synth.p_pan"] = fmt_double(synth.p_pan);
  kv["synth.p_leave_return"] = fmt_double(synth.p_leave_return);
  kv["synth.p_static"] = fmt_double(synth.p_static);
  kv["synth.speeds"] = join_ints(synth.speeds);
  kv["synth.n_train"] = std::to_string(n_train);
  kv["synth.n_test"] = std::to_string(n_test);
  kv["model.layers"] = std::to_string(model.layers);
  kv["model.d_model"] = std::to_string(model.d_model);
  kv["model.heads"] = std::to_string(model.heads);
  kv["model.patch_size"] = std::to_string(model.patch_size);
  kv["model.block_frames"] = std::to_string(model.block_frames);
  kv["model.time_dim"] = std::to_string(model.time_dim);
  kv["model.mlp_ratio"] = std::to_string(model.mlp_ratio);
  kv["model.rope_base"] = fmt_double(model.rope_base);
  kv["train_teacher.steps"] = std::to_string(teacher.steps);
  kv["train_teacher.batch"] = std::to_string(teacher.batch);
  kv["train_teacher.lr"] = fmt_double(teacher.adam.lr);
  kv["train_memory.steps"] = std::to_string(memory.steps);
  kv["train_memory.batch"] = std::to_string(memory.batch);
  kv["train_memory.lr"] = fmt_double(memory.adam.lr);
  kv["train_memory.max_start_offset"] = std::to_string(memory.batch_options.max_start_offset);
  kv["train_generator.steps"] = std::to_string(generator.updates);
  kv["train_generator.k"] = std::to_string(generator.k);
  kv["train_generator.lambda"] = fmt_double(generator.lambda);
  kv["train_generator.ratio"] = std::to_string(generator.student_per_generator);
  kv["train_generator.lr_generator"] = fmt_double(generator.lr_generator);
  kv["train_generator.lr_student"] = fmt_double(generator.lr_student);
  kv["train_generator.sample_steps"] = std::to_string(generator.sample_steps);
  kv["train_generator.normalize_delta"] = generator.dmd.normalize ? "true" : "false";
  kv["train_generator.clip_frames"] = std::to_string(generator.clip_frames);
  kv["bench.n_cases"] = std::to_string(bench_cases);
  kv["bench.memorize_frames"] = std::to_string(bench.memorize_frames);
  kv["bench.speeds"] = join_ints(bench.speeds);
  kv["bench.baseline_window_blocks"] = std::to_string(baseline_window_blocks);
  kv["stream.mode"] = stream_mode;
  kv["stream.blocks"] = std::to_string(stream_blocks);
  return kv;
}

/// 16 hex digits of FNV-1a over the canonical key=value listing.
inline std::string PipelineConfig::hash() const {
  std::string text;
  for (const auto& [k, v] : canonical()) text += k + "=" + v + "\n";
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(text)));
  return buf;
}

/// Canonical INI text (round-trips through parse_config).
inline std::string to_ini(const PipelineConfig& c) {
  std::map<std::string, std::map<std::string, std::string>> sections;
  for (const auto& [k, v] : c.canonical()) {
    const auto dot = k.find('.');
    sections[k.substr(0, dot)][k.substr(dot + 1)] = v;
  }
  std::string phases;
  for (std::size_t i = 0; i < c.phases.size(); ++i) phases += (i ? "," : "") + c.phases[i];
  sections["run"]["phases"] = phases;
  std::ostringstream out;
  for (const auto& [sec, body] : sections) {
    out << '[' << sec << "]\n";
    for (const auto& [k, v] : body) out << k << " = " << v << '\n';
    out << '\n';
  }
  return out.str();
}

}  // namespace mag
