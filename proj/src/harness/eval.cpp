#include <algorithm>
#include <future>
#include <iostream>
#include <ostream>
#include <thread>

#include "r3l/harness.hpp"

namespace r3l {

namespace {

EvalOutcome rollout(env::TaskId task, env::ObsMode mode, const env::EnvState& init, const Policy& policy, int len) {
  const env::EnvState goal = env::goal_state(task);
  env::EnvState s = init;
  for (int t = 0; t < len; ++t) s = env::env_step(s, policy(env::observe(s, mode)));
  return {init, env::success(task, s, goal), env::final_metric(task, s, goal)};
}

}  // namespace

int EvalReport::successes() const {
  return static_cast<int>(std::count_if(outcomes.begin(), outcomes.end(), [](const EvalOutcome& o) { return o.success; }));
}

double EvalReport::success_rate() const {
  return outcomes.empty() ? 0.0 : static_cast<double>(successes()) / static_cast<double>(outcomes.size());
}

double EvalReport::mean_metric() const {
  if (outcomes.empty()) return 0.0;
  double total = 0.0;
  for (const auto& o : outcomes) total += o.final_metric;
  return total / static_cast<double>(outcomes.size());
}

EvalReport evaluate_policy(env::TaskId task, env::ObsMode obs_mode, const Policy& policy, int rollout_len) {
  if (rollout_len < 1) throw std::invalid_argument("rollout length must be positive");
  EvalReport report;
  report.task = task;
  for (const env::EnvState& init : env::eval_grid(task).inits)
    report.outcomes.push_back(rollout(task, obs_mode, init, policy, rollout_len));
  return report;
}

EvalReport evaluate(const Run& run, int rollout_len) {
  if (rollout_len < 1) throw std::invalid_argument("rollout length must be positive");
  const RunConfig& c = run.config();
  // Deterministic actions never draw from the generator.
  const Policy policy = [&run](const env::Observation& obs) {
    std::mt19937_64 unused(0);
    return run.act(obs, 0, true, unused);
  };
  const auto inits = env::eval_grid(c.task).inits;
  EvalReport report;
  report.task = c.task;
  report.variant = to_string(c.variant);
  report.seed = c.seed;
  report.epoch = run.epoch();
  report.outcomes.resize(inits.size());
  const unsigned workers = std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(),
                                                           static_cast<unsigned>(inits.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < inits.size(); ++i)
      report.outcomes[i] = rollout(c.task, c.obs_mode, inits[i], policy, rollout_len);
    return report;
  }
  std::vector<std::future<void>> jobs;
  for (unsigned w = 0; w < workers; ++w)
    jobs.push_back(std::async(std::launch::async, [&, w] {
      for (std::size_t i = w; i < inits.size(); i += workers)
        report.outcomes[i] = rollout(c.task, c.obs_mode, inits[i], policy, rollout_len);
    }));
  for (auto& j : jobs) j.get();
  return report;
}

EvalReport evaluate(const Checkpoint& ckpt, const RunConfig& config, env::TaskId task, int rollout_len) {
  if (config.task != task)
    throw ConfigError(std::string("checkpoint was trained on ") + env::to_string(config.task) + ", not " +
                      env::to_string(task));
  if (ckpt.config_digest != config_digest(config))
    std::clog << "warning: checkpoint was written under a different configuration\n";
  return evaluate(Run::restore(config, ckpt), rollout_len);
}

void write_eval_csv(std::ostream& os, const EvalReport& r) {
  os << "task,variant,seed,epoch,init,success,final_metric\n";
  for (std::size_t i = 0; i < r.outcomes.size(); ++i)
    os << env::to_string(r.task) << ',' << r.variant << ',' << r.seed << ',' << r.epoch << ',' << i << ','
       << (r.outcomes[i].success ? 1 : 0) << ',' << format_number(r.outcomes[i].final_metric) << '\n';
}

}  // namespace r3l
