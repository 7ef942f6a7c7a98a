#include <algorithm>
#include <future>
#include <mutex>
#include <sstream>
#include <thread>

#include "r3l/harness.hpp"

namespace r3l {

StepsToThreshold steps_to_threshold(RunConfig config, std::int64_t cap, double threshold) {
  if (cap < 1) throw ConfigError("matrix cap must be positive");
  const std::int64_t per_pair = 2 * static_cast<std::int64_t>(config.horizon);
  config.epochs = static_cast<int>((cap + per_pair - 1) / per_pair) + 1;
  Run run(config);
  run.initial_exploration();
  while (!run.finished() && run.stats().env_steps < cap) {
    const std::size_t before = run.metrics().size();
    run.run_epoch();
    for (std::size_t i = before; i < run.metrics().size(); ++i) {
      const MetricRow& row = run.metrics()[i];
      if (row.metric == "train_metric" && row.value < threshold) return {std::min(row.env_steps, cap), false};
    }
  }
  return {cap, true};
}

double MatrixCell::median_steps() const {
  if (runs.empty()) return 0.0;
  std::vector<double> s;
  for (const auto& r : runs) s.push_back(static_cast<double>(r.steps));
  std::sort(s.begin(), s.end());
  const std::size_t n = s.size();
  return n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
}

bool MatrixCell::median_censored() const {
  // The median is censored when at least half the runs never reached the threshold.
  const auto censored = std::count_if(runs.begin(), runs.end(), [](const StepsToThreshold& r) { return r.censored; });
  return !runs.empty() && 2 * static_cast<std::size_t>(censored) >= runs.size() + (runs.size() % 2);
}

const MatrixCell& MatrixTable::cell(env::ObsMode obs, RewardMode reward, ResetMode resets) const {
  for (const auto& c : cells)
    if (c.obs == obs && c.reward == reward && c.resets == resets) return c;
  throw std::out_of_range("matrix cell not present");
}

MatrixTable run_matrix(const RunConfig& base, const HarnessConfig& harness, const Progress& progress) {
  if (base.task != env::TaskId::Reposition) throw ConfigError("the experiment matrix runs on Reposition");
  if (harness.matrix_seeds < 1) throw ConfigError("matrix_seeds must be positive");
  MatrixTable table;
  table.cap = harness.matrix_cap;
  table.threshold = harness.threshold;

  struct Job {
    std::size_t cell;
    std::size_t run;
    RunConfig config;
  };
  std::vector<Job> jobs;
  for (env::ObsMode obs : {env::ObsMode::State, env::ObsMode::Image})
    for (RewardMode reward : {RewardMode::True, RewardMode::Vice})
      for (ResetMode resets : {ResetMode::Episodic, ResetMode::Free}) {
        MatrixCell cell{obs, reward, resets, {}, {}};
        for (int s = 0; s < harness.matrix_seeds; ++s) {
          RunConfig c = base;
          c.obs_mode = obs;
          c.reward_mode = reward;
          c.resets = resets;
          c.seed = base.seed + static_cast<std::uint64_t>(s);
          validate(c);
          cell.seeds.push_back(c.seed);
          jobs.push_back({table.cells.size(), static_cast<std::size_t>(s), c});
        }
        cell.runs.resize(cell.seeds.size());
        table.cells.push_back(std::move(cell));
      }

  std::mutex report;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t j;
      {
        std::lock_guard lock(report);
        if (next == jobs.size()) return;
        j = next++;
      }
      const Job& job = jobs[j];
      const StepsToThreshold r = steps_to_threshold(job.config, harness.matrix_cap, harness.threshold);
      std::lock_guard lock(report);
      table.cells[job.cell].runs[job.run] = r;
      if (progress) {
        std::ostringstream os;
        os << env::to_string(job.config.obs_mode) << '/' << to_string(job.config.reward_mode) << '/'
           << to_string(job.config.resets) << " seed " << job.config.seed << ": " << r.steps
           << (r.censored ? " (censored)" : "");
        progress(os.str());
      }
    }
  };
  const unsigned workers =
      std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(), static_cast<unsigned>(jobs.size())));
  std::vector<std::future<void>> pool;
  for (unsigned w = 1; w < workers; ++w) pool.push_back(std::async(std::launch::async, worker));
  worker();
  for (auto& f : pool) f.get();
  return table;
}

std::string matrix_csv(const MatrixTable& table) {
  std::ostringstream os;
  os << "obs,reward,resets,seeds,median_steps,median_censored,runs\n";
  for (const MatrixCell& c : table.cells) {
    os << env::to_string(c.obs) << ',' << to_string(c.reward) << ',' << to_string(c.resets) << ',' << c.seeds.size()
       << ',' << format_number(c.median_steps()) << ',' << (c.median_censored() ? 1 : 0) << ',';
    for (std::size_t i = 0; i < c.runs.size(); ++i)
      os << (i ? ";" : "") << c.runs[i].steps << (c.runs[i].censored ? "+" : "");
    os << '\n';
  }
  return os.str();
}

GapResult train_eval_gap(const RunConfig& config, int rollout_len) {
  const Run run = run_training(config);
  GapResult g;
  g.seed = config.seed;
  g.train_metric = std::numeric_limits<double>::quiet_NaN();
  for (const MetricRow& r : run.metrics())
    if (r.metric == "train_metric") g.train_metric = r.value;
  const EvalReport report = evaluate(run, rollout_len);
  g.eval_metric = report.mean_metric();
  g.eval_success_rate = report.success_rate();
  return g;
}

}  // namespace r3l
