#include <cctype>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "r3l/harness.hpp"

namespace r3l {

namespace {

using nlohmann::json;

// Reads the keys of one JSON object and rejects any it did not consume.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <typename T>
  bool get(const char* key, T& out) {
    used_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return false;
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
    return true;
  }

  const json* raw(const char* key) {
    used_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  std::string path(const char* key) const { return name_.empty() ? key : name_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!used_.count(key)) throw ConfigError("unknown config key '" + (name_.empty() ? key : name_ + "." + key) + "'");
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> used_;
};

template <typename F>
auto wrap(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

std::vector<double> state_values(const env::EnvState& s) {
  switch (s.task) {
    case env::TaskId::Beads: return {s.beads[0], s.beads[1], s.beads[2], s.beads[3], s.pusher};
    case env::TaskId::Valve: return {s.valve_angle};
    case env::TaskId::Reposition: return {s.object.x, s.object.y, s.object.theta};
  }
  return {};
}

env::EnvState state_from_values(env::TaskId task, const std::vector<double>& v) {
  env::EnvState s = env::goal_state(task);
  auto need = [&](std::size_t n, const char* layout) {
    if (v.size() != n) throw ConfigError(std::string("reset state for this task must be ") + layout);
  };
  switch (task) {
    case env::TaskId::Beads:
      need(5, "[b0, b1, b2, b3, pusher]");
      for (int i = 0; i < 4; ++i) s.beads[static_cast<std::size_t>(i)] = v[static_cast<std::size_t>(i)];
      s.pusher = v[4];
      break;
    case env::TaskId::Valve:
      need(1, "[angle]");
      s.valve_angle = v[0];
      break;
    case env::TaskId::Reposition:
      need(3, "[x, y, theta]");
      s.object = {v[0], v[1], v[2]};
      break;
  }
  return s;
}

void read_sac(Section& s, SacConfig& c) {
  s.get("hidden", c.hidden);
  s.get("learning_rate", c.learning_rate);
  s.get("gamma", c.gamma);
  s.get("batch_size", c.batch_size);
  s.get("tau", c.tau);
  s.get("initial_temperature", c.initial_temperature);
  double te = 0.0;
  if (s.get("target_entropy", te)) c.target_entropy = te;
  s.get("log_std_min", c.log_std_min);
  s.get("log_std_max", c.log_std_max);
  s.get("encoder_filters", c.encoder_filters);
  s.get("encoder_features", c.encoder_features);
  s.finish();
}

void read_vice(Section& s, ViceConfig& c) {
  s.get("filters", c.filters);
  s.get("hidden", c.hidden);
  s.get("learning_rate", c.learning_rate);
  s.get("batch_size", c.batch_size);
  s.get("n_vice", c.n_vice);
  std::string mixup;
  if (s.get("mixup", mixup)) {
    if (mixup == "uniform") c.mixup = MixupMode::UniformLambda;
    else if (mixup == "beta") c.mixup = MixupMode::Beta;
    else throw ConfigError("vice.mixup must be 'uniform' or 'beta'");
  }
  s.get("mixup_alpha", c.mixup_alpha);
  s.get("use_mixup", c.use_mixup);
  s.get("goal_pool_size", c.goal_pool_size);
  s.finish();
}

void read_rnd(Section& s, RndConfig& c) {
  s.get("filters", c.filters);
  s.get("hidden", c.hidden);
  s.get("embedding_dim", c.embedding_dim);
  s.get("learning_rate", c.learning_rate);
  s.get("batch_size", c.batch_size);
  s.finish();
}

void read_vae(Section& s, VaeConfig& c) {
  s.get("filters", c.filters);
  s.get("latent_dim", c.latent_dim);
  s.get("beta", c.beta);
  s.get("learning_rate", c.learning_rate);
  s.get("batch_size", c.batch_size);
  s.get("n_samples", c.n_samples);
  s.get("epochs", c.epochs);
  s.finish();
}

void read_loop(Section& s, RunConfig& c) {
  s.get("N", c.epochs);
  s.get("H", c.horizon);
  s.get("c_vice", c.c_vice);
  s.get("c_rnd", c.c_rnd);
  s.get("seed", c.seed);
  s.get("train_steps_per_env_step", c.train_steps_per_env_step);
  s.get("initial_exploration", c.initial_exploration);
  s.get("checkpoint_every", c.checkpoint_every);
  s.get("replay_capacity", c.replay_capacity);
  std::string est;
  if (s.get("std_estimator", est)) {
    if (est == "ema") c.std_estimator = StdEstimator::Ema;
    else if (est == "welford") c.std_estimator = StdEstimator::Welford;
    else throw ConfigError("loop.std_estimator must be 'ema' or 'welford'");
  }
  s.get("std_decay", c.std_decay);
  int choice = 0;
  const bool has_choice = s.get("reset_choice", choice);
  std::vector<std::vector<double>> states;
  const bool has_states = s.get("reset_states", states);
  if (has_choice && has_states) throw ConfigError("give either loop.reset_choice or loop.reset_states");
  if (has_choice) {
    if (c.task != env::TaskId::Reposition) throw ConfigError("loop.reset_choice applies to the reposition task");
    const auto choices = reposition_reset_choices();
    if (choice < 1 || choice > static_cast<int>(choices.size())) throw ConfigError("loop.reset_choice must be 1, 2 or 3");
    c.reset_states = choices[static_cast<std::size_t>(choice - 1)];
  }
  for (const auto& v : states) c.reset_states.push_back(state_from_values(c.task, v));
  s.finish();
}

void read_harness(Section& s, HarnessConfig& c) {
  s.get("eval_rollout", c.eval_rollout);
  s.get("matrix_seeds", c.matrix_seeds);
  s.get("matrix_cap", c.matrix_cap);
  s.get("threshold", c.threshold);
  s.get("seeds", c.seeds);
  s.get("eval_at_checkpoints", c.eval_at_checkpoints);
  s.finish();
  if (c.eval_rollout < 1) throw ConfigError("harness.eval_rollout must be positive");
  if (c.matrix_seeds < 1) throw ConfigError("harness.matrix_seeds must be positive");
  if (c.matrix_cap < 1) throw ConfigError("harness.matrix_cap must be positive");
}

json run_json(const RunConfig& c) {
  json j;
  j["task"] = env::to_string(c.task);
  j["variant"] = to_string(c.variant);
  j["obs"] = env::to_string(c.obs_mode);
  j["reward"] = to_string(c.reward_mode);
  j["resets"] = to_string(c.resets);
  j["sac"] = {{"hidden", c.sac.hidden},
              {"learning_rate", c.sac.learning_rate},
              {"gamma", c.sac.gamma},
              {"batch_size", c.sac.batch_size},
              {"tau", c.sac.tau},
              {"initial_temperature", c.sac.initial_temperature},
              {"target_entropy", c.sac.target_entropy ? json(*c.sac.target_entropy) : json(nullptr)},
              {"log_std_min", c.sac.log_std_min},
              {"log_std_max", c.sac.log_std_max},
              {"encoder_filters", c.sac.encoder_filters},
              {"encoder_features", c.sac.encoder_features}};
  j["vice"] = {{"filters", c.vice.filters},
               {"hidden", c.vice.hidden},
               {"learning_rate", c.vice.learning_rate},
               {"batch_size", c.vice.batch_size},
               {"n_vice", c.vice.n_vice},
               {"mixup", c.vice.mixup == MixupMode::Beta ? "beta" : "uniform"},
               {"mixup_alpha", c.vice.mixup_alpha},
               {"use_mixup", c.vice.use_mixup},
               {"goal_pool_size", c.vice.goal_pool_size}};
  j["rnd"] = {{"filters", c.rnd.filters},
              {"hidden", c.rnd.hidden},
              {"embedding_dim", c.rnd.embedding_dim},
              {"learning_rate", c.rnd.learning_rate},
              {"batch_size", c.rnd.batch_size}};
  j["vae"] = {{"filters", c.vae.filters},
              {"latent_dim", c.vae.latent_dim},
              {"beta", c.vae.beta},
              {"learning_rate", c.vae.learning_rate},
              {"batch_size", c.vae.batch_size},
              {"n_samples", c.vae.n_samples},
              {"epochs", c.vae.epochs}};
  json resets = json::array();
  for (const auto& s : c.reset_states) resets.push_back(state_values(s));
  j["loop"] = {{"N", c.epochs},
               {"H", c.horizon},
               {"c_vice", c.c_vice},
               {"c_rnd", c.c_rnd},
               {"seed", c.seed},
               {"train_steps_per_env_step", c.train_steps_per_env_step},
               {"initial_exploration", c.initial_exploration},
               {"checkpoint_every", c.checkpoint_every},
               {"replay_capacity", c.replay_capacity},
               {"std_estimator", c.std_estimator == StdEstimator::Welford ? "welford" : "ema"},
               {"std_decay", c.std_decay},
               {"reset_states", resets}};
  return j;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  RunConfig& run = cfg.run;
  Section top(j, "");
  std::string s;
  if (top.get("task", s)) run.task = wrap("task", [&] { return env::parse_task(s); });
  if (top.get("variant", s)) run.variant = parse_variant(s);
  if (top.get("obs", s)) run.obs_mode = wrap("obs", [&] { return env::parse_obs_mode(s); });
  if (top.get("reward", s)) run.reward_mode = parse_reward_mode(s);
  if (top.get("resets", s)) run.resets = parse_reset_mode(s);
  if (const json* p = top.raw("sac")) {
    Section sec(*p, "sac");
    read_sac(sec, run.sac);
  }
  if (const json* p = top.raw("vice")) {
    Section sec(*p, "vice");
    read_vice(sec, run.vice);
  }
  if (const json* p = top.raw("rnd")) {
    Section sec(*p, "rnd");
    read_rnd(sec, run.rnd);
  }
  if (const json* p = top.raw("vae")) {
    Section sec(*p, "vae");
    read_vae(sec, run.vae);
  }
  if (const json* p = top.raw("loop")) {
    Section sec(*p, "loop");
    read_loop(sec, run);
  }
  if (const json* p = top.raw("harness")) {
    Section sec(*p, "harness");
    read_harness(sec, cfg.harness);
  }
  top.finish();
  validate(run);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string config_json(const ExperimentConfig& c) {
  json j = run_json(c.run);
  j["harness"] = {{"eval_rollout", c.harness.eval_rollout},
                  {"matrix_seeds", c.harness.matrix_seeds},
                  {"matrix_cap", c.harness.matrix_cap},
                  {"threshold", c.harness.threshold},
                  {"seeds", c.harness.seeds},
                  {"eval_at_checkpoints", c.harness.eval_at_checkpoints}};
  return j.dump(2);
}

std::uint64_t config_digest(const RunConfig& config) {
  const std::string text = run_json(config).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

void apply_seed_override(ExperimentConfig& config) {
  const char* v = std::getenv("R3L_SEED");
  if (!v || !*v) return;
  const std::string s(v);
  if (!std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); }) || s.size() > 19)
    throw ConfigError("R3L_SEED must be a non-negative integer, got '" + s + "'");
  config.run.seed = std::stoull(s);
}

}  // namespace r3l
