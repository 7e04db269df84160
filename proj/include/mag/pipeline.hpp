#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "mag/bench.hpp"
#include "mag/clip_io.hpp"
#include "mag/config.hpp"
#include "mag/generator.hpp"
#include "mag/jsonl.hpp"
#include "mag/memory.hpp"
#include "mag/stream.hpp"

namespace mag {

namespace fs = std::filesystem;

/// Config sections each phase's artifacts depend on.
inline const std::set<std::string>& phase_sections(const std::string& phase) {
  static const std::map<std::string, std::set<std::string>> deps = {
      {"synth", {"run", "synth"}},
      {"train-teacher", {"run", "synth", "model", "train_teacher"}},
      {"train-memory", {"run", "synth", "model", "train_memory"}},
      {"eval", {"run", "synth", "model", "train_memory"}},
      {"train-generator", {"run", "synth", "model", "train_teacher", "train_memory", "train_generator"}},
      {"bench", {"run", "synth", "model", "train_teacher", "train_memory", "train_generator", "bench"}},
      {"stream", {"run", "synth", "model", "train_teacher", "train_memory", "train_generator", "stream"}},
  };
  const auto it = deps.find(phase);
  if (it == deps.end()) throw ConfigError("unknown phase '" + phase + "'");
  return it->second;
}

/// Content hash of the config fields a phase depends on.
inline std::string phase_hash(const PipelineConfig& cfg, const std::string& phase) {
  const auto& sections = phase_sections(phase);
  std::string text = "phase=" + phase + "\n";
  for (const auto& [k, v] : cfg.canonical()) {
    if (sections.count(k.substr(0, k.find('.')))) text += k + "=" + v + "\n";
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(text)));
  return buf;
}

inline std::uint64_t phase_seed(const PipelineConfig& cfg, const std::string& phase) { return derive_seed(cfg.seed, phase); }

class RunContext {
 public:
  RunContext(PipelineConfig cfg, fs::path out, std::ostream& log = std::cerr)
      : cfg_(std::move(cfg)), out_(std::move(out)), log_(&log) {
    fs::create_directories(out_);
  }

  const PipelineConfig& config() const { return cfg_; }
  const fs::path& out() const { return out_; }
  std::ostream& log() const { return *log_; }

  /// <out>/<12-hex phase hash>_<name>
  fs::path artifact(const std::string& phase, const std::string& name) const {
    return out_ / (phase_hash(cfg_, phase).substr(0, 12) + "_" + name);
  }

  fs::path require(const std::string& phase, const std::string& name) const {
    const fs::path p = artifact(phase, name);
    if (!fs::exists(p)) {
      throw DependencyError("missing prerequisite " + p.string() + " (run phase '" + phase + "' first)");
    }
    return p;
  }

  /// Merges a phase entry into <out>/manifest.json.
  void record_phase(const std::string& phase, const std::vector<fs::path>& artifacts, nlohmann::json extra = {}) const {
    const fs::path path = out_ / "manifest.json";
    nlohmann::json m = nlohmann::json::object();
    if (fs::exists(path)) {
      std::ifstream in(path);
      try {
        m = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception&) {
        m = nlohmann::json::object();
      }
    }
    m["config_hash"] = cfg_.hash();
    m["seed"] = cfg_.seed;
    nlohmann::json entry = {{"hash", phase_hash(cfg_, phase)}, {"seed", phase_seed(cfg_, phase)}};
    nlohmann::json names = nlohmann::json::array();
    for (const auto& a : artifacts) names.push_back(a.filename().string());
    entry["artifacts"] = names;
    if (!extra.is_null()) entry["summary"] = std::move(extra);
    m["phases"][phase] = entry;
    write_json(path, m);
  }

  static void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw DependencyError("cannot write " + path.string());
    out << j.dump(2) << '\n';
  }

 private:
  PipelineConfig cfg_;
  fs::path out_;
  std::ostream* log_;
};

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DependencyError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DependencyError("cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------
// Phases

inline nlohmann::json condition_json(const SceneCondition& c) {
  return {{"scene_id", c.scene_id}, {"motion_id", c.motion_id}, {"is_null", c.is_null}};
}

inline SceneCondition condition_from_json(const nlohmann::json& j) {
  return {j.at("scene_id").get<int>(), j.at("motion_id").get<int>(), j.at("is_null").get<bool>()};
}

inline void run_synth(const RunContext& ctx) {
  const auto& cfg = ctx.config();
  const std::uint64_t seed = phase_seed(cfg, "synth");
  const fs::path dir = ctx.artifact("synth", "data");
  fs::create_directories(dir);
  nlohmann::json index = {{"train", nlohmann::json::array()}, {"test", nlohmann::json::array()}};
  for (const auto& [split, n] : std::vector<std::pair<std::string, int>>{{"train", cfg.n_train}, {"test", cfg.n_test}}) {
    const auto clips = make_dataset(derive_seed(seed, split), n, cfg.synth);
    for (std::size_t i = 0; i < clips.size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof(name), "%s_%05zu.magv", split.c_str(), i);
      write_clip(dir / name, clips[i]);
      index[split].push_back({{"file", name},
                              {"condition", condition_json(clips[i].condition)},
                              {"kind", to_string(clips[i].trajectory ? clips[i].trajectory->kind : TrajectoryKind::pan)}});
    }
    if (!clips.empty()) write_gif(dir / (split + "_00000.gif"), clips.front());
  }
  RunContext::write_json(dir / "dataset.json", index);
  ctx.record_phase("synth", {dir}, {{"n_train", cfg.n_train}, {"n_test", cfg.n_test}});
  ctx.log() << "synth: wrote " << cfg.n_train << " train and " << cfg.n_test << " test clips to " << dir << '\n';
}

inline std::vector<VideoClip> load_dataset(const RunContext& ctx, const std::string& split) {
  const fs::path dir = ctx.require("synth", "data");
  const auto index = read_json(dir / "dataset.json");
  std::vector<VideoClip> clips;
  for (const auto& e : index.at(split)) {
    VideoClip c = read_clip(dir / e.at("file").get<std::string>());
    c.condition = condition_from_json(e.at("condition"));
    clips.push_back(std::move(c));
  }
  if (clips.empty()) throw DependencyError("dataset split '" + split + "' is empty in " + dir.string());
  return clips;
}

inline ModelConfig teacher_config(const PipelineConfig& c) {
  ModelConfig m = c.model;
  m.attention_mode = AttentionMode::bidirectional;
  return m;
}

inline ModelConfig causal_config(const PipelineConfig& c) {
  ModelConfig m = c.model;
  m.attention_mode = AttentionMode::block_causal;
  return m;
}

inline nlohmann::json loss_summary(const std::vector<double>& losses) {
  if (losses.empty()) return {{"steps", 0}};
  const std::size_t w = std::max<std::size_t>(1, losses.size() / 10);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < w; ++i) {
    head += losses[i];
    tail += losses[losses.size() - 1 - i];
  }
  return {{"steps", losses.size()}, {"first_window_mean", head / w}, {"last_window_mean", tail / w}};
}

inline void run_train_teacher(const RunContext& ctx) {
  const auto& cfg = ctx.config();
  const auto data = load_dataset(ctx, "train");
  DiffusionTransformer teacher(teacher_config(cfg), derive_seed(phase_seed(cfg, "train-teacher"), "init"));
  TeacherTrainConfig tc = cfg.teacher;
  tc.seed = phase_seed(cfg, "train-teacher");
  const fs::path metrics = ctx.artifact("train-teacher", "teacher_metrics.jsonl");
  JsonlWriter log(metrics);
  const auto res = train_teacher(teacher, data, tc, log.sink());
  const fs::path ckpt = ctx.artifact("train-teacher", "teacher.magc");
  teacher.save(ckpt);
  ctx.record_phase("train-teacher", {ckpt, metrics}, loss_summary(res.losses));
  ctx.log() << "train-teacher: " << res.steps << " steps, checkpoint " << ckpt << '\n';
}

inline void run_train_memory(const RunContext& ctx) {
  const auto& cfg = ctx.config();
  const auto data = load_dataset(ctx, "train");
  DiffusionTransformer memory(causal_config(cfg), derive_seed(phase_seed(cfg, "train-memory"), "init"));
  MemoryTrainConfig mc = cfg.memory;
  mc.seed = phase_seed(cfg, "train-memory");
  const fs::path metrics = ctx.artifact("train-memory", "memory_metrics.jsonl");
  JsonlWriter log(metrics);
  const auto res = train_memory(memory, data, mc, log.sink());
  const fs::path ckpt = ctx.artifact("train-memory", "memory.magc");
  memory.save(ckpt);
  auto summary = loss_summary(res.losses);
  summary["b"] = cfg.model.block_frames;
  ctx.record_phase("train-memory", {ckpt, metrics}, summary);
  ctx.log() << "train-memory: b=" << cfg.model.block_frames << ", " << res.steps << " steps, checkpoint " << ckpt << '\n';
}

inline DiffusionTransformer load_model(const fs::path& path, const ModelConfig& cfg) {
  DiffusionTransformer m(cfg, 0);
  m.load(path);
  return m;
}

inline nlohmann::json reconstruction_json(const ReconstructionReport& r) {
  return {{"b", r.b}, {"psnr", r.psnr}, {"ssim", r.ssim}, {"mse_x100", r.mse_x100}, {"n_clips", r.n_clips}};
}

inline void run_eval(const RunContext& ctx) {
  const auto& cfg = ctx.config();
  const auto test = load_dataset(ctx, "test");
  const auto memory = load_model(ctx.require("train-memory", "memory.magc"), causal_config(cfg));
  const auto rep = eval_reconstruction(memory, test, phase_seed(cfg, "eval"), cfg.generator.sample_steps);
  const fs::path out = ctx.artifact("eval", "memory_eval.json");
  RunContext::write_json(out, reconstruction_json(rep));
  ctx.record_phase("eval", {out}, reconstruction_json(rep));
  ctx.log() << "eval: b=" << rep.b << " psnr=" << rep.psnr << " ssim=" << rep.ssim << " mse_x100=" << rep.mse_x100 << '\n';
}

inline std::vector<SceneCondition> dataset_conditions(const std::vector<VideoClip>& clips) {
  std::vector<SceneCondition> out;
  for (const auto& c : clips) out.push_back(c.condition);
  return out;
}

inline void run_train_generator(const RunContext& ctx) {
  const auto& cfg = ctx.config();
  const auto data = load_dataset(ctx, "train");
  const auto teacher = load_model(ctx.require("train-teacher", "teacher.magc"), teacher_config(cfg));
  const auto memory = load_model(ctx.require("train-memory", "memory.magc"), causal_config(cfg));
  const DiffusionTransformer memory_before = memory.clone();
  DiffusionTransformer generator = init_generator_from_memory(memory);
  DiffusionTransformer student = teacher.clone();
  TrainSchedule s = cfg.generator;
  s.seed = phase_seed(cfg, "train-generator");
  const fs::path metrics = ctx.artifact("train-generator", "generator_metrics.jsonl");
  const fs::path ckpt = ctx.artifact("train-generator", "generator.magc");
  const fs::path student_ckpt = ctx.artifact("train-generator", "student.magc");
  JsonlWriter log(metrics);
  const auto res = train_generator(generator, student, teacher, memory, dataset_conditions(data), s, log.sink(),
                                   [&](int) { generator.save(ckpt); });
  if (!memory.weights_equal(memory_before)) throw TrainingFailure("train-generator: memory model weights changed");
  generator.save(ckpt);
  student.save(student_ckpt);
  nlohmann::json summary = {{"generator_updates", res.generator_updates},
                            {"student_updates", res.student_updates},
                            {"i_histogram", res.i_histogram},
                            {"null_draws", res.null_draws},
                            {"history_draws", res.history_draws},
                            {"student_loss", loss_summary(res.student_losses)}};
  ctx.record_phase("train-generator", {ckpt, student_ckpt, metrics}, summary);
  ctx.log() << "train-generator: " << res.generator_updates << " generator / " << res.student_updates
            << " student updates, checkpoint " << ckpt << '\n';
}

struct BenchRun {
  std::vector<EvalReport> reports;
  RankingTable table;
};

/// Writes bench cases, evaluates MAG and the window baseline in both modes,
/// plus the replay oracle and a noise generator for calibration.
inline std::vector<BenchCase> run_bench_build(const RunContext& ctx) {
  const auto& cfg = ctx.config();
  const std::uint64_t seed = phase_seed(cfg, "bench");
  BenchConfig bc = cfg.bench;
  bc.world = cfg.synth.world;
  bc.block_frames = cfg.model.block_frames;
  const auto cases = build_bench(seed, cfg.bench_cases, bc);
  const fs::path dir = ctx.artifact("bench", "cases");
  fs::create_directories(dir);
  for (const auto& c : cases) {
    char name[64];
    std::snprintf(name, sizeof(name), "case_%04d", c.case_id);
    write_clip(dir / (std::string(name) + "_memorize.magv"), c.memorize);
    write_clip(dir / (std::string(name) + "_target.magv"), c.target);
  }
  RunContext::write_json(dir / "manifest.json", bench_manifest(cases, seed));
  ctx.log() << "bench build: " << cases.size() << " cases in " << dir << '\n';
  return cases;
}

inline BenchRun run_bench(const RunContext& ctx) {
  const auto& cfg = ctx.config();
  const std::uint64_t seed = phase_seed(cfg, "bench");
  const auto cases = run_bench_build(ctx);
  const fs::path dir = ctx.artifact("bench", "cases");
  const auto memory = load_model(ctx.require("train-memory", "memory.magc"), causal_config(cfg));
  const auto generator = load_model(ctx.require("train-generator", "generator.magc"), causal_config(cfg));
  BenchRun run;
  const int steps = cfg.generator.sample_steps;
  const StreamMode window = StreamMode::window(cfg.baseline_window_blocks * cfg.model.block_frames);
  for (EvalMode mode : {EvalMode::history_context, EvalMode::ground_truth}) {
    run.reports.push_back(evaluate_model(generator, memory, cases, mode, {StreamMode::mag(), steps, seed, true}, "mag"));
    run.reports.push_back(evaluate_model(generator, memory, cases, mode, {window, steps, seed, true}, window.name()));
    run.reports.push_back(evaluate_cases(cases, mode, replay_oracle(), "replay_oracle"));
    run.reports.push_back(evaluate_cases(cases, mode, noise_predictor(seed), "noise"));
  }
  std::vector<fs::path> artifacts = {dir};
  for (const auto& r : run.reports) {
    std::string file = r.name;
    std::replace(file.begin(), file.end(), ':', '-');
    const fs::path p = ctx.artifact("bench", "report_" + file + "_" + to_string(r.mode) + ".json");
    RunContext::write_json(p, r.to_json());
    artifacts.push_back(p);
  }
  run.table = compare(run.reports);
  const fs::path csv = ctx.artifact("bench", "compare.csv");
  const fs::path txt = ctx.artifact("bench", "compare.txt");
  write_text(csv, run.table.csv);
  write_text(txt, run.table.text);
  artifacts.push_back(csv);
  artifacts.push_back(txt);
  ctx.record_phase("bench", artifacts, {{"n_cases", cases.size()}});
  ctx.log() << run.table.text;
  return run;
}

struct StreamRun {
  VideoClip frames;
  PerfReport perf;
};

inline StreamRun run_stream(const RunContext& ctx, const StreamMode& mode, int blocks, std::uint64_t seed,
                            const fs::path& out_dir) {
  const auto& cfg = ctx.config();
  const auto memory = load_model(ctx.require("train-memory", "memory.magc"), causal_config(cfg));
  const auto generator = load_model(ctx.require("train-generator", "generator.magc"), causal_config(cfg));
  StreamSession session(generator, memory, mode, cfg.generator.sample_steps);
  const SceneCondition cond{static_cast<int>(seed % static_cast<std::uint64_t>(cfg.synth.world.families)), kMotionPanRight, false};
  StreamRun run;
  run.frames = session.stream_generate(cond, blocks, seed);
  run.perf = session.perf();
  fs::create_directories(out_dir);
  write_clip(out_dir / "stream.magv", run.frames);
  write_gif(out_dir / "stream.gif", run.frames);
  auto perf = perf_to_json(run.perf);
  perf["mode"] = mode.name();
  perf["seed"] = seed;
  RunContext::write_json(out_dir / "perf.json", perf);
  ctx.log() << "stream: " << blocks << " blocks in mode " << mode.name() << " -> " << out_dir << '\n';
  return run;
}

/// Runs the configured phases in order.
inline void run_pipeline(const RunContext& ctx) {
  for (const auto& phase : ctx.config().phases) {
    ctx.log() << "== phase " << phase << '\n';
    if (phase == "synth") {
      run_synth(ctx);
    } else if (phase == "train-teacher") {
      run_train_teacher(ctx);
    } else if (phase == "train-memory") {
      run_train_memory(ctx);
    } else if (phase == "train-generator") {
      run_train_generator(ctx);
    } else if (phase == "bench") {
      run_bench(ctx);
    } else if (phase == "eval") {
      run_eval(ctx);
    } else {
      throw ConfigError("unknown phase '" + phase + "'");
    }
  }
}

}  // namespace mag
