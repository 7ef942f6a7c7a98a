#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "r3l/checkpoint.hpp"
#include "r3l/loop.hpp"

namespace r3l {

// ---------------------------------------------------------------------------
// Configuration

struct HarnessConfig {
  int eval_rollout = 200;
  int matrix_seeds = 3;
  std::int64_t matrix_cap = 500000;
  double threshold = 0.15;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  bool eval_at_checkpoints = true;
};

struct ExperimentConfig {
  RunConfig run;
  HarnessConfig harness;
};

/// Parses the JSON config. Every key is optional and defaults to the value in
/// RunConfig/HarnessConfig; unknown keys and ill-typed values throw
/// ConfigError.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON of a config; parse_config(config_json(c)) == c.
std::string config_json(const ExperimentConfig& config);
/// Hash of the canonical JSON of the run section.
std::uint64_t config_digest(const RunConfig& config);
/// Applies R3L_SEED when set. Throws ConfigError on a malformed value.
void apply_seed_override(ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOutcome {
  env::EnvState init;
  bool success = false;
  double final_metric = 0.0;
};

struct EvalReport {
  env::TaskId task = env::TaskId::Valve;
  std::string variant;
  std::uint64_t seed = 0;
  std::int64_t epoch = 0;
  std::vector<EvalOutcome> outcomes;

  int successes() const;
  double success_rate() const;
  /// Mean final metric: pose distance for Reposition.
  double mean_metric() const;
};

using Policy = std::function<env::Action(const env::Observation&)>;

/// Rolls `policy` for `rollout_len` steps from every grid state of `task`,
/// judging success at the last step only.
EvalReport evaluate_policy(env::TaskId task, env::ObsMode obs_mode, const Policy& policy, int rollout_len);
/// Deterministic forward policy of a run.
EvalReport evaluate(const Run& run, int rollout_len);
/// Restores the run in `ckpt` under `config` and evaluates it. Throws
/// ConfigError when the checkpoint belongs to another task.
EvalReport evaluate(const Checkpoint& ckpt, const RunConfig& config, env::TaskId task, int rollout_len);

void write_eval_csv(std::ostream& os, const EvalReport& report);

// ---------------------------------------------------------------------------
// Outputs

inline constexpr const char* kMetricsHeader = "task,variant,seed,epoch,env_steps,metric,value";

struct CsvRow {
  std::string task;
  std::string variant;
  std::uint64_t seed = 0;
  std::int64_t epoch = 0;
  std::int64_t env_steps = 0;
  std::string metric;
  double value = 0.0;
  friend bool operator==(const CsvRow&, const CsvRow&) = default;
};

/// Shortest decimal text that reads back to the same double.
std::string format_number(double v);

std::vector<CsvRow> csv_rows(const Run& run);
void write_metrics_csv(std::ostream& os, const std::vector<CsvRow>& rows);
/// Throws std::runtime_error when the file cannot be written.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<CsvRow>& rows);
std::vector<CsvRow> read_metrics_csv(std::istream& is);
std::vector<CsvRow> read_metrics_csv(const std::filesystem::path& path);

/// Learning curve of `metric` against env steps: one line per seed and a
/// band of mean +/- one standard deviation across seeds.
std::string learning_curve_svg(const std::vector<CsvRow>& rows, const std::string& metric, const std::string& title);
void write_text_file(const std::filesystem::path& path, const std::string& text);

// ---------------------------------------------------------------------------
// Experiments

struct StepsToThreshold {
  std::int64_t steps = 0;
  bool censored = false;
};

/// Trains until a forward epoch's mean pose distance drops below
/// `threshold`, or `cap` env steps elapse (censored).
StepsToThreshold steps_to_threshold(RunConfig config, std::int64_t cap, double threshold);

struct MatrixCell {
  env::ObsMode obs = env::ObsMode::State;
  RewardMode reward = RewardMode::True;
  ResetMode resets = ResetMode::Episodic;
  std::vector<std::uint64_t> seeds;
  std::vector<StepsToThreshold> runs;
  /// Median steps; censored runs count as the cap.
  double median_steps() const;
  bool median_censored() const;
};

struct MatrixTable {
  std::int64_t cap = 0;
  double threshold = 0.0;
  std::vector<MatrixCell> cells;
  const MatrixCell& cell(env::ObsMode obs, RewardMode reward, ResetMode resets) const;
};

using Progress = std::function<void(const std::string&)>;

/// 2x2x2 grid over observation, reward and reset modes on Reposition.
MatrixTable run_matrix(const RunConfig& base, const HarnessConfig& harness, const Progress& progress = {});
std::string matrix_csv(const MatrixTable& table);

struct GapResult {
  std::uint64_t seed = 0;
  double train_metric = 0.0;  // final forward epoch
  double eval_metric = 0.0;   // grid mean pose distance
  double eval_success_rate = 0.0;
};

/// Final training pose distance next to grid-evaluation pose distance for a
/// reset-free state-based Reposition run.
GapResult train_eval_gap(const RunConfig& config, int rollout_len);

// ---------------------------------------------------------------------------
// Artifacts

/// PPM images (image mode) plus manifest.csv with one state per example.
void save_goal_pool(const std::filesystem::path& dir, const GoalPool& pool);
GoalPool load_goal_pool(const std::filesystem::path& dir, env::TaskId task, env::ObsMode mode);

Checkpoint vae_checkpoint(const VaeModel& model);
/// Throws CheckpointError unless the checkpoint holds a frozen VAE matching `config`.
VaeModel vae_from_checkpoint(const Checkpoint& ckpt, const VaeConfig& config);

}  // namespace r3l
