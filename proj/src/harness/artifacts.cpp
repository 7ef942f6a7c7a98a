#include <fstream>
#include <sstream>

#include "r3l/harness.hpp"
#include "r3l/nn/serialize.hpp"

namespace r3l {

namespace {

std::string image_name(std::size_t i) {
  std::ostringstream os;
  os << "goal_" << i << ".ppm";
  return os.str();
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) f.push_back(cell);
  return f;
}

std::string params_bytes(const nn::ParamSet& p) {
  std::ostringstream os(std::ios::binary);
  nn::write_params(os, p);
  return std::move(os).str();
}

std::string vae_config_bytes(const VaeConfig& c) {
  std::ostringstream os(std::ios::binary);
  nn::write_u32(os, static_cast<std::uint32_t>(c.filters.size()));
  for (int f : c.filters) nn::write_u32(os, static_cast<std::uint32_t>(f));
  nn::write_u32(os, static_cast<std::uint32_t>(c.latent_dim));
  return std::move(os).str();
}

}  // namespace

void save_goal_pool(const std::filesystem::path& dir, const GoalPool& pool) {
  if (pool.states().size() != pool.size()) throw std::invalid_argument("goal pool has no generating states to save");
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << env::state_csv_header() << ",image\n";
  for (std::size_t i = 0; i < pool.size(); ++i) {
    manifest << env::state_csv_row(pool.states()[i], static_cast<std::int64_t>(i)) << ',';
    if (pool[i].image) {
      const std::string name = image_name(i);
      std::ofstream os(dir / name, std::ios::binary);
      if (!os) throw std::runtime_error("cannot write " + (dir / name).string());
      env::write_ppm(os, *pool[i].image);
      manifest << name;
    }
    manifest << '\n';
  }
  write_text_file(dir / "manifest.csv", manifest.str());
}

GoalPool load_goal_pool(const std::filesystem::path& dir, env::TaskId task, env::ObsMode mode) {
  std::ifstream is(dir / "manifest.csv");
  if (!is) throw std::runtime_error("no goal manifest in " + dir.string());
  std::string line;
  if (!std::getline(is, line) || line.rfind(env::state_csv_header(), 0) != 0)
    throw std::runtime_error("goal manifest has an unexpected header");
  std::vector<env::Observation> items;
  std::vector<env::EnvState> states;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() < 11) throw std::runtime_error("malformed goal manifest row: " + line);
    env::EnvState s;
    s.task = env::parse_task(f[0]);
    if (s.task != task)
      throw ConfigError(std::string("goal pool holds ") + f[0] + " states, expected " + env::to_string(task));
    for (std::size_t b = 0; b < 4; ++b) s.beads[b] = std::stod(f[2 + b]);
    s.pusher = std::stod(f[6]);
    s.valve_angle = std::stod(f[7]);
    s.object = {std::stod(f[8]), std::stod(f[9]), std::stod(f[10])};
    env::validate(s);
    env::Observation obs = env::observe(s, mode);
    if (mode == env::ObsMode::Image && f.size() > 11 && !f[11].empty()) {
      std::ifstream img(dir / f[11], std::ios::binary);
      if (!img) throw std::runtime_error("missing goal image " + f[11]);
      obs.image = std::make_shared<const env::Image>(env::read_ppm(img));
    }
    items.push_back(std::move(obs));
    states.push_back(s);
  }
  if (items.empty()) throw std::runtime_error("goal manifest in " + dir.string() + " is empty");
  return GoalPool(std::move(items), std::move(states));
}

Checkpoint vae_checkpoint(const VaeModel& model) {
  Checkpoint c;
  c.tag = "vae";
  c.add("vae.config", vae_config_bytes(model.config));
  c.add("vae.encoder", params_bytes(model.encoder_params));
  c.add("vae.decoder", params_bytes(model.decoder_params));
  c.add("vae.frozen", model.frozen ? "1" : "0");
  return c;
}

VaeModel vae_from_checkpoint(const Checkpoint& ckpt, const VaeConfig& config) {
  if (ckpt.tag != "vae") throw CheckpointError("not a VAE checkpoint (tag '" + ckpt.tag + "')");
  if (ckpt.section("vae.config") != vae_config_bytes(config))
    throw CheckpointError("VAE checkpoint architecture differs from the configured one");
  if (ckpt.section("vae.frozen") != "1") throw CheckpointError("VAE checkpoint is not frozen");
  std::mt19937_64 unused(0);
  VaeModel m = make_vae(config, unused);
  for (auto [name, target] : {std::pair{"vae.encoder", &m.encoder_params}, std::pair{"vae.decoder", &m.decoder_params}}) {
    std::istringstream is(ckpt.section(name), std::ios::binary);
    nn::ParamSet p = nn::read_params(is);
    if (!p.same_layout(*target)) throw CheckpointError(std::string("section ") + name + " does not match the architecture");
    *target = std::move(p);
  }
  freeze(m);
  return m;
}

}  // namespace r3l
