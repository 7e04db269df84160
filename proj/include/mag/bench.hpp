#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mag/metrics.hpp"
#include "mag/stream.hpp"

namespace mag {

struct BenchConfig {
  WorldConfig world{};
  int n_cases = 176;
  int memorize_frames = 12;  // also the target length
  std::vector<int> speeds = {3, 4};
  int block_frames = 3;

  void validate() const {
    world.validate();
    if (n_cases < 1) throw ConfigError("bench: n_cases must be >= 1");
    if (memorize_frames < 1 || block_frames < 1 || memorize_frames % block_frames != 0) {
      throw ConfigError("bench: memorize_frames must be a positive multiple of the block size");
    }
    if (speeds.empty()) throw ConfigError("bench: speeds must not be empty");
    for (int s : speeds) {
      if (s < 1 || s * (memorize_frames - 1) > world.world_w - world.frame_w) {
        throw ConfigError("bench: speed " + std::to_string(s) + " does not fit the world width");
      }
    }
  }
};

/// One leave-and-return case: the memorize leg pans away, the target leg is
/// its exact time reversal (the camera comes back over the same offsets).
struct BenchCase {
  int case_id = 0;
  std::uint64_t world_seed = 0;
  int switch_time = 0;  // index of the first target frame in memorize + target
  int speed = 0;
  VideoClip memorize;
  VideoClip target;
  SceneCondition condition;

  /// Memorize and target joined; frame switch_time + i mirrors switch_time - 1 - i.
  VideoClip full() const {
    VideoClip c = memorize;
    c.append(target);
    return c;
  }
};

inline bool bench_case_palindromic(const BenchCase& c) {
  const VideoClip all = c.full();
  for (int i = 0; c.switch_time + i < all.frames && c.switch_time - 1 - i >= 0; ++i) {
    if (!all.frames_equal(c.switch_time + i, all, c.switch_time - 1 - i)) return false;
  }
  return c.target.frames == c.memorize.frames;
}

inline std::vector<BenchCase> build_bench(std::uint64_t seed, int n_cases, BenchConfig cfg) {
  cfg.n_cases = n_cases;
  cfg.validate();
  std::vector<BenchCase> cases;
  const int M = cfg.memorize_frames;
  const int max_off = cfg.world.world_w - cfg.world.frame_w;
  for (int i = 0; i < n_cases; ++i) {
    const std::uint64_t h = hash_combine(seed, static_cast<std::uint64_t>(i));
    BenchCase c;
    c.case_id = i;
    c.world_seed = derive_seed(h, "world");
    c.speed = cfg.speeds[derive_seed(h, "speed") % cfg.speeds.size()];
    const bool rightward = (derive_seed(h, "dir") & 1u) == 0;
    const int travel = c.speed * (M - 1);
    const int start = static_cast<int>(derive_seed(h, "start") % static_cast<std::uint64_t>(max_off - travel + 1));
    const World world = build_world(c.world_seed, cfg.world);
    const CameraTrajectory away =
        rightward ? pan_trajectory(start, c.speed, M) : pan_trajectory(start + travel, -c.speed, M);
    c.memorize = render_clip(world, away, cfg.world.frame_w);
    c.target = c.memorize.reversed();
    c.switch_time = M;
    // The prompt describes the return leg.
    c.condition = SceneCondition{world.family, rightward ? kMotionPanLeft : kMotionPanRight, false};
    c.target.condition = c.condition;
    cases.push_back(std::move(c));
  }
  return cases;
}

inline nlohmann::json bench_manifest(const std::vector<BenchCase>& cases, std::uint64_t seed) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cases) {
    arr.push_back({{"case_id", c.case_id},
                   {"seed", c.world_seed},
                   {"switch_time", c.switch_time},
                   {"lengths", {c.memorize.frames, c.target.frames}}});
  }
  return {{"bench_seed", seed}, {"cases", arr}};
}

struct Alignment {
  std::vector<int> matching;       // gt index per predicted frame
  std::vector<double> distances;   // per predicted frame
};

/// Each predicted frame is matched to the ground-truth frame with the lowest
/// MSE (repeats allowed; ties go to the lower index).
inline Alignment best_match_align(const VideoClip& pred, const VideoClip& gt) {
  if (pred.frames == 0 || gt.frames == 0) throw ShapeError("best_match_align: empty clip");
  Alignment a;
  for (int p = 0; p < pred.frames; ++p) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int g = 0; g < gt.frames; ++g) {
      const double d = frame_mse(pred, p, gt, g);
      if (d < best_d) {
        best_d = d;
        best = g;
      }
    }
    a.matching.push_back(best);
    a.distances.push_back(best_d);
  }
  return a;
}

enum class EvalMode { history_context, ground_truth };

inline const char* to_string(EvalMode m) { return m == EvalMode::history_context ? "history_context" : "ground_truth"; }

struct CaseResult {
  int case_id = 0;
  bool failed = false;
  std::string error;
  double psnr = 0.0;
  double ssim = 0.0;
  double mse = 0.0;          // best-match
  double aligned_mse = 0.0;  // index-aligned
};

struct EvalReport {
  std::string name;
  EvalMode mode = EvalMode::history_context;
  std::vector<CaseResult> cases;
  double psnr = 0.0;
  double ssim = 0.0;
  double mse = 0.0;
  double aligned_mse = 0.0;
  int failed = 0;

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& c : cases) {
      nlohmann::json j = {{"case_id", c.case_id}, {"failed", c.failed}};
      if (c.failed) {
        j["error"] = c.error;
      } else {
        j["psnr"] = c.psnr;
        j["ssim"] = c.ssim;
        j["best_match_mse"] = c.mse;
        j["aligned_mse"] = c.aligned_mse;
      }
      per.push_back(j);
    }
    return {{"name", name},         {"mode", to_string(mode)},   {"psnr", psnr},
            {"ssim", ssim},         {"best_match_mse", mse},      {"aligned_mse", aligned_mse},
            {"failed", failed},     {"n_cases", cases.size()},    {"cases", per}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.name = j.at("name").get<std::string>();
    r.mode = j.at("mode").get<std::string>() == "ground_truth" ? EvalMode::ground_truth : EvalMode::history_context;
    r.psnr = j.at("psnr").get<double>();
    r.ssim = j.at("ssim").get<double>();
    r.mse = j.at("best_match_mse").get<double>();
    r.aligned_mse = j.at("aligned_mse").get<double>();
    r.failed = j.at("failed").get<int>();
    for (const auto& c : j.at("cases")) {
      CaseResult cr;
      cr.case_id = c.at("case_id").get<int>();
      cr.failed = c.at("failed").get<bool>();
      if (cr.failed) {
        cr.error = c.value("error", "");
      } else {
        cr.psnr = c.at("psnr").get<double>();
        cr.ssim = c.at("ssim").get<double>();
        cr.mse = c.at("best_match_mse").get<double>();
        cr.aligned_mse = c.at("aligned_mse").get<double>();
      }
      r.cases.push_back(cr);
    }
    return r;
  }
};

/// Best-match scores of a prediction against the target leg.
inline CaseResult score_case(int case_id, const VideoClip& pred, const VideoClip& target) {
  CaseResult r;
  r.case_id = case_id;
  const Alignment a = best_match_align(pred, target);
  QualityMetrics m;
  double aligned = 0.0;
  for (int p = 0; p < pred.frames; ++p) {
    m.accumulate(a.distances[static_cast<std::size_t>(p)], frame_ssim(pred, p, target, a.matching[static_cast<std::size_t>(p)]));
    aligned += frame_mse(pred, p, target, std::min(p, target.frames - 1));
  }
  const QualityMetrics avg = m.averaged();
  r.psnr = avg.psnr;
  r.ssim = avg.ssim;
  r.mse = avg.mse;
  r.aligned_mse = aligned / pred.frames;
  return r;
}

/// Produces the predicted target leg for one case.
using CasePredictor = std::function<VideoClip(const BenchCase&, EvalMode)>;

/// Failed cases are kept in the report but left out of the aggregates.
inline EvalReport evaluate_cases(const std::vector<BenchCase>& bench, EvalMode mode, const CasePredictor& predict,
                                 std::string name = "model") {
  EvalReport rep;
  rep.name = std::move(name);
  rep.mode = mode;
  int ok = 0;
  for (const auto& c : bench) {
    CaseResult r;
    try {
      const VideoClip pred = predict(c, mode);
      if (pred.frames != c.target.frames) throw ShapeError("prediction length differs from target");
      r = score_case(c.case_id, pred, c.target);
      rep.psnr += r.psnr;
      rep.ssim += r.ssim;
      rep.mse += r.mse;
      rep.aligned_mse += r.aligned_mse;
      ++ok;
    } catch (const Error& e) {
      r.case_id = c.case_id;
      r.failed = true;
      r.error = e.what();
      ++rep.failed;
    }
    rep.cases.push_back(r);
  }
  if (ok > 0) {
    rep.psnr /= ok;
    rep.ssim /= ok;
    rep.mse /= ok;
    rep.aligned_mse /= ok;
  }
  return rep;
}

struct ModelEvalOptions {
  StreamMode cache_mode = StreamMode::mag();
  int sample_steps = 4;
  std::uint64_t seed = 0;
  bool use_condition = true;  // false: null condition during the target leg
};

/// Memorize, then generate the target leg block by block. In ground_truth
/// mode the cache is extended with the true target blocks; in
/// history_context mode with the model's own predictions.
inline CasePredictor model_predictor(const DiffusionTransformer& generator, const DiffusionTransformer& memory,
                                     ModelEvalOptions opt = {}) {
  return [&generator, &memory, opt](const BenchCase& c, EvalMode mode) {
    const ModelConfig& cfg = memory.config();
    const int b = cfg.block_frames;
    if (c.target.frames % b != 0) throw ShapeError("bench target length not divisible by block size");
    StreamSession session(generator, memory, opt.cache_mode, opt.sample_steps);
    session.ingest_history(c.memorize);
    const SceneCondition cond = opt.use_condition ? c.condition : SceneCondition::null();
    VideoClip pred(c.target.frames, cfg.frame_h, cfg.frame_w, cfg.channels);
    Rng rng(hash_combine(opt.seed, static_cast<std::uint64_t>(c.case_id)));
    for (int j = 0; j < c.target.frames / b; ++j) {
      const Matrix x = session.generate_block(cond, gaussian_like(b * cfg.frame_tokens(), cfg.patch_dim(), rng));
      tokens_to_frames(x, pred, j * b, cfg);
      if (mode == EvalMode::ground_truth) {
        session.commit(frames_to_tokens(c.target, j * b, b, cfg));
      } else {
        session.commit(x);
      }
    }
    return pred;
  };
}

inline EvalReport evaluate_model(const DiffusionTransformer& generator, const DiffusionTransformer& memory,
                                 const std::vector<BenchCase>& bench, EvalMode mode, const ModelEvalOptions& opt = {},
                                 std::string name = "model") {
  return evaluate_cases(bench, mode, model_predictor(generator, memory, opt), std::move(name));
}

/// Replays the reversed memorize leg: the exact target.
inline CasePredictor replay_oracle() {
  return [](const BenchCase& c, EvalMode) { return c.memorize.reversed(); };
}

/// Uniform noise frames.
inline CasePredictor noise_predictor(std::uint64_t seed) {
  return [seed](const BenchCase& c, EvalMode) {
    VideoClip v(c.target.frames, c.target.height, c.target.width, c.target.channels);
    Rng rng(hash_combine(seed, static_cast<std::uint64_t>(c.case_id)));
    for (auto& x : v.data) x = static_cast<float>(rng.uniform());
    return v;
  };
}

/// Closed-form expected MSE between U(0,1) noise and a frame: mean(x^2 - x) + 1/3.
inline double noise_mse_baseline(const VideoClip& frames) {
  double acc = 0.0;
  for (float x : frames.data) acc += static_cast<double>(x) * x - x + 1.0 / 3.0;
  return acc / static_cast<double>(frames.data.size());
}

// ---------------------------------------------------------------------------

struct RankingRow {
  std::string name;
  bool has_history = false;
  bool has_ground_truth = false;
  EvalReport history;
  EvalReport ground_truth;
};

struct RankingTable {
  std::vector<RankingRow> rows;
  std::string csv;
  std::string text;
};

/// Groups reports by name and sorts by history_context PSNR (descending),
/// breaking ties by SSIM (descending), then best-match MSE (ascending), then name.
inline RankingTable compare(const std::vector<EvalReport>& reports) {
  if (reports.size() < 2) throw ConfigError("compare: at least two reports are required");
  std::map<std::string, RankingRow> by_name;
  for (const auto& r : reports) {
    auto& row = by_name[r.name];
    row.name = r.name;
    if (r.mode == EvalMode::history_context) {
      row.history = r;
      row.has_history = true;
    } else {
      row.ground_truth = r;
      row.has_ground_truth = true;
    }
  }
  RankingTable t;
  for (auto& [n, row] : by_name) t.rows.push_back(row);
  std::sort(t.rows.begin(), t.rows.end(), [](const RankingRow& a, const RankingRow& b) {
    if (a.has_history != b.has_history) return a.has_history;
    if (a.history.psnr != b.history.psnr) return a.history.psnr > b.history.psnr;
    if (a.history.ssim != b.history.ssim) return a.history.ssim > b.history.ssim;
    if (a.history.mse != b.history.mse) return a.history.mse < b.history.mse;
    return a.name < b.name;
  });

  auto num = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v;
    return s.str();
  };
  std::ostringstream csv;
  csv << "rank,name,hist_psnr,hist_ssim,hist_best_match_mse,gt_psnr,gt_ssim,gt_best_match_mse\n";
  std::vector<std::vector<std::string>> cells = {
      {"rank", "name", "hist_psnr", "hist_ssim", "hist_mse", "gt_psnr", "gt_ssim", "gt_mse"}};
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    std::vector<std::string> c = {std::to_string(i + 1), r.name};
    for (const auto* rep : {r.has_history ? &r.history : nullptr, r.has_ground_truth ? &r.ground_truth : nullptr}) {
      if (rep) {
        c.push_back(num(rep->psnr));
        c.push_back(num(rep->ssim));
        c.push_back(num(rep->mse));
      } else {
        c.insert(c.end(), {"", "", ""});
      }
    }
    for (std::size_t k = 0; k < c.size(); ++k) csv << (k ? "," : "") << c[k];
    csv << '\n';
    cells.push_back(std::move(c));
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& row : cells) {
    for (std::size_t k = 0; k < row.size(); ++k) width[k] = std::max(width[k], row[k].size());
  }
  std::ostringstream text;
  for (const auto& row : cells) {
    for (std::size_t k = 0; k < row.size(); ++k) {
      text << (k ? "  " : "") << std::left << std::setw(static_cast<int>(width[k])) << row[k];
    }
    text << '\n';
  }
  t.csv = csv.str();
  t.text = text.str();
  return t;
}

}  // namespace mag
