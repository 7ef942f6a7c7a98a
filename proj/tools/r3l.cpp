// Command-line front end: pretrain-vae, collect-goals, train, eval, matrix,
// gap and plot. Exit codes: 0 success, 2 configuration error, 3 numeric abort.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "r3l/harness.hpp"
#include "r3l/runtime.hpp"

namespace fs = std::filesystem;
using namespace r3l;

namespace {

constexpr int kConfigExit = 2;
constexpr int kNumericExit = 3;

ExperimentConfig read_config(const std::string& path) {
  ExperimentConfig c = path.empty() ? parse_config("{}") : load_config(path);
  apply_seed_override(c);
  return c;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
}

fs::path pool_dir(const fs::path& root, std::size_t i) { return root / ("pool_" + std::to_string(i)); }

std::vector<GoalPool> read_pools(const fs::path& root, const RunConfig& c) {
  std::vector<GoalPool> pools;
  for (std::size_t i = 0; fs::exists(pool_dir(root, i)); ++i)
    pools.push_back(load_goal_pool(pool_dir(root, i), c.task, c.obs_mode));
  if (pools.empty()) throw ConfigError("no goal pools under " + root.string());
  return pools;
}

std::string eval_csv(const EvalReport& r) {
  std::ostringstream os;
  write_eval_csv(os, r);
  return os.str();
}

struct TrainOptions {
  std::string config;
  std::string out = "run";
  std::string resume;
  std::string vae;
  std::string goals;
};

int train(const TrainOptions& o) {
  const ExperimentConfig cfg = read_config(o.config);
  const RunConfig& c = cfg.run;
  const std::uint64_t digest = config_digest(c);
  const fs::path out(o.out);
  ensure_dir(out / "checkpoints");
  write_text_file(out / "config.json", config_json(cfg) + "\n");

  std::optional<Run> run;
  if (!o.resume.empty()) {
    const Checkpoint ckpt = load_checkpoint(o.resume);
    if (ckpt.config_digest != digest)
      std::clog << "warning: " << o.resume << " was written under a different configuration\n";
    run.emplace(Run::restore(c, ckpt));
    std::clog << "resumed at epoch " << run->epoch() << "\n";
  } else {
    RunResources res;
    if (!o.vae.empty()) res.vae = vae_from_checkpoint(load_checkpoint(o.vae), c.vae);
    if (!o.goals.empty()) res.goal_pools = read_pools(o.goals, c);
    run.emplace(c, std::move(res));
  }

  const auto save = [&] {
    const Checkpoint ckpt = run->checkpoint(digest);
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%06lld.r3l", static_cast<long long>(run->epoch()));
    save_checkpoint(out / "checkpoints" / name, ckpt);
    save_checkpoint(out / "checkpoints" / "latest.r3l", ckpt);
  };
  try {
    if (!run->explored()) run->initial_exploration();
    while (!run->finished()) {
      run->run_epoch();
      if (c.checkpoint_every > 0 && run->epoch() % c.checkpoint_every == 0) {
        if (cfg.harness.eval_at_checkpoints) {
          const EvalReport r = evaluate(*run, cfg.harness.eval_rollout);
          run->log("eval_success_rate", r.success_rate());
          run->log("eval_metric", r.mean_metric());
        }
        save();
        write_metrics_csv(out / "metrics.csv", csv_rows(*run));
        const auto& m = run->metrics();
        std::clog << "epoch " << run->epoch() << "/" << run->total_epochs() << "  env steps "
                  << run->stats().env_steps << (m.empty() ? "" : "  ") << (m.empty() ? "" : m.back().metric)
                  << (m.empty() ? "" : " " + format_number(m.back().value)) << "\n";
      }
    }
  } catch (const nn::NumericError& e) {
    write_metrics_csv(out / "metrics.csv", csv_rows(*run));
    write_text_file(out / "abort.txt", "numeric abort at epoch " + std::to_string(run->epoch()) + ": " + e.what() +
                                           " (" + e.name() + ")\n");
    throw;
  }
  save();
  const EvalReport final = evaluate(*run, cfg.harness.eval_rollout);
  write_metrics_csv(out / "metrics.csv", csv_rows(*run));
  write_text_file(out / "eval.csv", eval_csv(final));
  write_text_file(out / "train_metric.svg",
                  learning_curve_svg(csv_rows(*run), "train_metric",
                                     std::string(env::to_string(c.task)) + " " + to_string(c.variant)));
  const RunStats& s = run->stats();
  std::cout << "env_steps " << s.env_steps << "\ngradient_steps " << s.gradient_steps << "\nhidden_resets "
            << s.hidden_resets << "\neval_success " << final.successes() << "/" << final.outcomes.size()
            << "\neval_metric " << format_number(final.mean_metric()) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"Reset-free reinforcement learning with learned rewards and exploration"};
  app.require_subcommand(1);

  std::string config;
  std::string out;

  auto* pre = app.add_subcommand("pretrain-vae", "Pretrain and freeze the VAE on random task images");
  pre->add_option("-c,--config", config, "JSON config");
  pre->add_option("-o,--out", out, "Output checkpoint")->required();

  auto* goals = app.add_subcommand("collect-goals", "Write the goal example pools");
  goals->add_option("-c,--config", config, "JSON config");
  goals->add_option("-o,--out", out, "Output directory")->required();

  TrainOptions topt;
  auto* tr = app.add_subcommand("train", "Train one run, checkpointing every K epochs");
  tr->add_option("-c,--config", topt.config, "JSON config");
  tr->add_option("-o,--out", topt.out, "Run directory");
  tr->add_option("--resume", topt.resume, "Checkpoint to resume from");
  tr->add_option("--vae", topt.vae, "Pretrained VAE checkpoint");
  tr->add_option("--goals", topt.goals, "Goal pool directory from collect-goals");

  std::string checkpoint;
  std::string task;
  int rollout = 0;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the task's init grid");
  ev->add_option("-c,--config", config, "JSON config the checkpoint was trained with");
  ev->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--task", task, "Task to evaluate on (defaults to the config task)");
  ev->add_option("--rollout", rollout, "Rollout length (defaults to harness.eval_rollout)");
  ev->add_option("-o,--out", out, "CSV output (stdout when omitted)");

  auto* mx = app.add_subcommand("matrix", "Steps-to-threshold over observation, reward and reset modes");
  mx->add_option("-c,--config", config, "JSON base config");
  mx->add_option("-o,--out", out, "CSV output (stdout when omitted)");

  auto* gp = app.add_subcommand("gap", "Final training metric next to grid evaluation, per seed");
  gp->add_option("-c,--config", config, "JSON config");
  gp->add_option("-o,--out", out, "CSV output (stdout when omitted)");

  std::vector<std::string> inputs;
  std::string metric = "train_metric";
  std::string title;
  auto* pl = app.add_subcommand("plot", "Learning curves from one or more metrics CSVs");
  pl->add_option("metrics", inputs, "Metrics CSV files")->required();
  pl->add_option("-m,--metric", metric, "Metric to plot");
  pl->add_option("-t,--title", title, "Plot title");
  pl->add_option("-o,--out", out, "SVG output")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  const auto emit = [&](const std::string& text) {
    if (out.empty()) std::cout << text;
    else write_text_file(out, text);
  };

  try {
    if (*pre) {
      const RunConfig c = read_config(config).run;
      const VaeModel vae = pretrained_vae(c);
      save_checkpoint(out, vae_checkpoint(vae));
    } else if (*goals) {
      const RunConfig c = read_config(config).run;
      const auto pools = default_goal_pools(c);
      if (pools.empty()) throw ConfigError("this configuration uses no goal classifier");
      for (std::size_t i = 0; i < pools.size(); ++i) save_goal_pool(pool_dir(out, i), pools[i]);
    } else if (*tr) {
      return train(topt);
    } else if (*ev) {
      const ExperimentConfig c = read_config(config);
      const env::TaskId t = task.empty() ? c.run.task : env::parse_task(task);
      const EvalReport r = evaluate(load_checkpoint(checkpoint), c.run, t, rollout > 0 ? rollout : c.harness.eval_rollout);
      emit(eval_csv(r));
      std::clog << r.successes() << "/" << r.outcomes.size() << " successes, mean metric "
                << format_number(r.mean_metric()) << "\n";
    } else if (*mx) {
      const ExperimentConfig c = read_config(config);
      const MatrixTable t = run_matrix(c.run, c.harness, [](const std::string& line) { std::clog << line << "\n"; });
      emit(matrix_csv(t));
    } else if (*gp) {
      const ExperimentConfig c = read_config(config);
      std::ostringstream os;
      os << "seed,train_metric,eval_metric,eval_success_rate\n";
      for (std::uint64_t seed : c.harness.seeds) {
        RunConfig rc = c.run;
        rc.seed = seed;
        const GapResult g = train_eval_gap(rc, c.harness.eval_rollout);
        os << g.seed << ',' << format_number(g.train_metric) << ',' << format_number(g.eval_metric) << ','
           << format_number(g.eval_success_rate) << '\n';
      }
      emit(os.str());
    } else if (*pl) {
      std::vector<CsvRow> rows;
      for (const auto& f : inputs) {
        auto r = read_metrics_csv(fs::path(f));
        rows.insert(rows.end(), r.begin(), r.end());
      }
      write_text_file(out, learning_curve_svg(rows, metric, title.empty() ? metric : title));
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const env::InvalidState& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const nn::NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kNumericExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
