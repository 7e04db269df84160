// Command-line entry point: synth, train-*, stream, bench, eval, report, pipeline.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mag/mag.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs/default";
};

void add_common(CLI::App* app, Common& c, bool with_seed = true) {
  app->add_option("--config", c.config, "INI config file (defaults when omitted)");
  if (with_seed) app->add_option("--seed", c.seed, "global seed (overrides [run] seed)");
  app->add_option("--out", c.out, "output directory");
}

mag::PipelineConfig load(const Common& c) {
  mag::PipelineConfig cfg;
  if (!c.config.empty()) {
    cfg = mag::load_config(c.config);
  } else {
    mag::validate_config(cfg);
  }
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

int exit_code(mag::ExitCode c) { return static_cast<int>(c); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Memorize-and-generate video toolkit"};
  app.require_subcommand(1);

  Common synth_c, teacher_c, memory_c, gen_c, eval_c, pipe_c, stream_c, bench_c;
  std::optional<int> teacher_steps, memory_steps, memory_b, gen_steps, gen_k, gen_ratio, eval_b;
  std::optional<double> gen_lambda;

  auto* synth = app.add_subcommand("synth", "render the synthetic dataset");
  add_common(synth, synth_c);

  auto* teacher = app.add_subcommand("train-teacher", "train the bidirectional teacher");
  add_common(teacher, teacher_c);
  teacher->add_option("--steps", teacher_steps, "training steps");

  auto* memory = app.add_subcommand("train-memory", "train the memory (compression) model");
  add_common(memory, memory_c);
  memory->add_option("--b", memory_b, "frames per block (compression rate)");
  memory->add_option("--steps", memory_steps, "training steps");

  auto* gen = app.add_subcommand("train-generator", "train the generator against the frozen memory model");
  add_common(gen, gen_c);
  gen->add_option("--k", gen_k, "clips per long video");
  gen->add_option("--lambda", gen_lambda, "null-condition probability for clips after the first");
  gen->add_option("--ratio", gen_ratio, "student updates per generator update");
  gen->add_option("--steps", gen_steps, "total updates (student + generator)");

  auto* eval = app.add_subcommand("eval", "reconstruction metrics of the memory model on the test split");
  add_common(eval, eval_c);
  eval->add_option("--b", eval_b, "frames per block");

  auto* stream = app.add_subcommand("stream", "stream blocks from the trained generator");
  add_common(stream, stream_c, false);
  std::string stream_mode = "mag";
  int stream_blocks = 10;
  std::uint64_t stream_seed = 0;
  std::string stream_run;
  stream->add_option("--mode", stream_mode, "mag | full | window:W (W in frames)");
  stream->add_option("--blocks", stream_blocks, "blocks to generate");
  stream->add_option("--seed", stream_seed, "noise seed");
  stream->add_option("--run", stream_run, "directory holding trained checkpoints (default: --out)");

  auto* bench = app.add_subcommand("bench", "leave-and-return benchmark");
  bench->require_subcommand(1);
  auto* bench_build = bench->add_subcommand("build", "write bench cases and manifest");
  auto* bench_run = bench->add_subcommand("run", "evaluate trained models on the bench");
  auto* bench_compare = bench->add_subcommand("compare", "rank stored bench reports");
  add_common(bench_build, bench_c);
  add_common(bench_run, bench_c);
  std::vector<std::string> compare_inputs;
  std::string compare_out = ".";
  bench_compare->add_option("reports", compare_inputs, "report JSON files (default: all in --out)");
  bench_compare->add_option("--out", compare_out, "directory for compare.csv / compare.txt");

  auto* rep = app.add_subcommand("report", "summarize a run directory");
  std::string report_dir = "runs/default";
  std::string report_against;
  rep->add_option("--out", report_dir, "run directory");
  rep->add_option("--against", report_against, "second run directory for deltas");

  auto* pipe = app.add_subcommand("pipeline", "run the configured phases in order");
  add_common(pipe, pipe_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code(mag::ExitCode::config);
  }

  try {
    if (synth->parsed()) {
      mag::run_synth(mag::RunContext(load(synth_c), synth_c.out));
    } else if (teacher->parsed()) {
      auto cfg = load(teacher_c);
      if (teacher_steps) cfg.teacher.steps = *teacher_steps;
      mag::validate_config(cfg);
      mag::run_train_teacher(mag::RunContext(cfg, teacher_c.out));
    } else if (memory->parsed()) {
      auto cfg = load(memory_c);
      if (memory_b) cfg.model.block_frames = cfg.bench.block_frames = *memory_b;
      if (memory_steps) cfg.memory.steps = *memory_steps;
      mag::validate_config(cfg);
      mag::run_train_memory(mag::RunContext(cfg, memory_c.out));
    } else if (gen->parsed()) {
      auto cfg = load(gen_c);
      if (gen_k) cfg.generator.k = *gen_k;
      if (gen_lambda) cfg.generator.lambda = *gen_lambda;
      if (gen_ratio) cfg.generator.student_per_generator = *gen_ratio;
      if (gen_steps) cfg.generator.updates = *gen_steps;
      mag::validate_config(cfg);
      mag::run_train_generator(mag::RunContext(cfg, gen_c.out));
    } else if (eval->parsed()) {
      auto cfg = load(eval_c);
      if (eval_b) cfg.model.block_frames = cfg.bench.block_frames = *eval_b;
      mag::validate_config(cfg);
      mag::run_eval(mag::RunContext(cfg, eval_c.out));
    } else if (stream->parsed()) {
      auto cfg = load(stream_c);
      const auto mode = mag::StreamMode::parse(stream_mode);
      cfg.stream_mode = stream_mode;
      cfg.stream_blocks = stream_blocks;
      if (stream_blocks < 1) throw mag::ConfigError("--blocks must be >= 1");
      const fs::path run_dir = stream_run.empty() ? fs::path(stream_c.out) : fs::path(stream_run);
      const auto run = mag::run_stream(mag::RunContext(cfg, run_dir), mode, stream_blocks, stream_seed, stream_c.out);
      std::cout << mag::perf_to_json(run.perf).dump(2) << '\n';
    } else if (bench_build->parsed()) {
      mag::run_bench_build(mag::RunContext(load(bench_c), bench_c.out));
    } else if (bench_run->parsed()) {
      mag::run_bench(mag::RunContext(load(bench_c), bench_c.out));
    } else if (bench_compare->parsed()) {
      std::vector<mag::EvalReport> reports;
      if (compare_inputs.empty()) {
        for (const auto& e : fs::directory_iterator(compare_out)) {
          const auto name = e.path().filename().string();
          if (e.path().extension() == ".json" && name.find("report_") != std::string::npos) {
            compare_inputs.push_back(e.path().string());
          }
        }
      }
      for (const auto& f : compare_inputs) reports.push_back(mag::EvalReport::from_json(mag::read_json(f)));
      const auto table = mag::compare(reports);
      mag::write_text(fs::path(compare_out) / "compare.csv", table.csv);
      mag::write_text(fs::path(compare_out) / "compare.txt", table.text);
      std::cout << table.text;
    } else if (rep->parsed()) {
      std::optional<fs::path> against;
      if (!report_against.empty()) against = report_against;
      std::cout << mag::report(report_dir, against);
    } else if (pipe->parsed()) {
      mag::run_pipeline(mag::RunContext(load(pipe_c), pipe_c.out));
    }
  } catch (const mag::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.exit_code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(mag::ExitCode::dependency);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(mag::ExitCode::numeric);
  }
  return 0;
}
