#include "r3l/envsim.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace r3l::env {

namespace {

constexpr double kPi = std::numbers::pi;

double clamp_unit(float v) { return std::clamp(static_cast<double>(v), -1.0, 1.0); }

// Leftmost/rightmost feasible centre of bead i given that all four must fit.
double bead_lower(int i) { return kBeadMin + i * kBeadDiameter; }
double bead_upper(int i) { return kBeadMax - (3 - i) * kBeadDiameter; }

// Small tolerance for separation checks so that configurations built by
// adding the diameter in floating point are accepted.
constexpr double kSeparationSlack = 1e-9;

}  // namespace

const char* to_string(TaskId task) {
  switch (task) {
    case TaskId::Beads: return "beads";
    case TaskId::Valve: return "valve";
    case TaskId::Reposition: return "reposition";
  }
  return "?";
}

TaskId parse_task(const std::string& name) {
  if (name == "beads" || name == "Beads") return TaskId::Beads;
  if (name == "valve" || name == "Valve") return TaskId::Valve;
  if (name == "reposition" || name == "Reposition") return TaskId::Reposition;
  throw std::invalid_argument("unknown task: " + name);
}

const char* to_string(ObsMode mode) { return mode == ObsMode::State ? "state" : "image"; }

ObsMode parse_obs_mode(const std::string& name) {
  if (name == "state" || name == "State") return ObsMode::State;
  if (name == "image" || name == "Image") return ObsMode::Image;
  throw std::invalid_argument("unknown observation mode: " + name);
}

int action_dim(TaskId task) { return task == TaskId::Reposition ? 3 : 2; }

int state_dim(TaskId task) {
  switch (task) {
    case TaskId::Beads: return 4;
    case TaskId::Valve: return 2;
    case TaskId::Reposition: return 4;
  }
  return 0;
}

int proprio_dim(TaskId task) { return task == TaskId::Beads ? 1 : 0; }

double wrap_angle(double a) {
  double r = std::fmod(a + kPi, 2.0 * kPi);
  if (r <= 0.0) r += 2.0 * kPi;
  return r - kPi;
}

double angle_distance(double a, double b) {
  const double d = std::fmod(std::abs(a - b), 2.0 * kPi);
  return std::min(d, 2.0 * kPi - d);
}

void validate(const EnvState& s) {
  switch (s.task) {
    case TaskId::Beads:
      for (int i = 0; i < 4; ++i) {
        const double b = s.beads[static_cast<std::size_t>(i)];
        if (!std::isfinite(b) || b < kBeadMin - kSeparationSlack || b > kBeadMax + kSeparationSlack) {
          throw InvalidState("bead " + std::to_string(i) + " at " + std::to_string(b) +
                             " lies off the rod");
        }
        if (i > 0) {
          const double gap = b - s.beads[static_cast<std::size_t>(i - 1)];
          if (gap < kBeadDiameter - kSeparationSlack) {
            throw InvalidState("beads " + std::to_string(i - 1) + " and " + std::to_string(i) +
                               " separated by " + std::to_string(gap) + " < " +
                               std::to_string(kBeadDiameter));
          }
        }
      }
      if (!std::isfinite(s.pusher) || std::abs(s.pusher) > kRodHalf) {
        throw InvalidState("pusher off the rod");
      }
      break;
    case TaskId::Valve:
      if (!std::isfinite(s.valve_angle) || s.valve_angle <= -kPi || s.valve_angle > kPi) {
        throw InvalidState("valve angle outside (-pi, pi]");
      }
      break;
    case TaskId::Reposition:
      if (!std::isfinite(s.object.x) || !std::isfinite(s.object.y) ||
          std::abs(s.object.x) > kBoxHalf || std::abs(s.object.y) > kBoxHalf) {
        throw InvalidState("object pose outside the box");
      }
      if (!std::isfinite(s.object.theta) || s.object.theta <= -kPi || s.object.theta > kPi) {
        throw InvalidState("object angle outside (-pi, pi]");
      }
      break;
  }
}

EnvState goal_state(TaskId task) {
  EnvState s;
  s.task = task;
  switch (task) {
    case TaskId::Beads:
      s.beads = {kBeadMin, kBeadMin + kBeadDiameter, kBeadMax - kBeadDiameter, kBeadMax};
      break;
    case TaskId::Valve:
      s.valve_angle = kPi;
      break;
    case TaskId::Reposition:
      s.object = {0.0, 0.0, -kPi / 2};
      break;
  }
  return s;
}

EnvState canonical_start(TaskId task) {
  EnvState s;
  s.task = task;
  switch (task) {
    case TaskId::Beads:
      for (int i = 0; i < 4; ++i) s.beads[static_cast<std::size_t>(i)] = bead_lower(i);
      s.pusher = 0.0;
      break;
    case TaskId::Valve:
      s.valve_angle = 0.0;
      break;
    case TaskId::Reposition:
      s.object = {-0.12, -0.12, kPi / 2};
      break;
  }
  return s;
}

EnvState env_init(TaskId task, std::uint64_t /*seed*/, const std::optional<EnvState>& init) {
  if (!init) return canonical_start(task);
  if (init->task != task) throw InvalidState("initial state belongs to another task");
  validate(*init);
  return *init;
}

EnvState env_step(const EnvState& state, const Action& action) {
  if (action.size() != action_dim(state.task)) {
    throw std::invalid_argument("action has wrong dimension for task");
  }
  EnvState next = state;
  switch (state.task) {
    case TaskId::Beads: {
      const double velocity = clamp_unit(action[0]);
      const bool engaged = clamp_unit(action[1]) > 0.0;
      const double target = std::clamp(state.pusher + velocity * kPusherStep, -kRodHalf, kRodHalf);
      if (!engaged) {
        next.pusher = target;
        break;
      }
      // the finger drags the bead it rests on; neighbours are pushed along
      int grabbed = -1;
      double best = kBeadRadius;
      for (int i = 0; i < 4; ++i) {
        const double d = std::abs(state.beads[static_cast<std::size_t>(i)] - state.pusher);
        if (d < best) {
          best = d;
          grabbed = i;
        }
      }
      if (grabbed < 0) {
        next.pusher = target;
        break;
      }
      const auto g = static_cast<std::size_t>(grabbed);
      const double moved = std::clamp(state.beads[g] + (target - state.pusher),
                                      bead_lower(grabbed), bead_upper(grabbed));
      next.beads[g] = moved;
      for (std::size_t j = g + 1; j < 4; ++j) {
        next.beads[j] = std::max(next.beads[j], next.beads[j - 1] + kBeadDiameter);
      }
      for (std::size_t j = g; j-- > 0;) {
        next.beads[j] = std::min(next.beads[j], next.beads[j + 1] - kBeadDiameter);
      }
      next.pusher = std::clamp(state.pusher + (moved - state.beads[g]), -kRodHalf, kRodHalf);
      break;
    }
    case TaskId::Valve:
      if (clamp_unit(action[0]) > 0.0) {
        next.valve_angle = wrap_angle(state.valve_angle + clamp_unit(action[1]) * kValveStep);
      }
      break;
    case TaskId::Reposition:
      next.object.x = std::clamp(state.object.x + clamp_unit(action[0]) * kPoseStep, -kBoxHalf, kBoxHalf);
      next.object.y = std::clamp(state.object.y + clamp_unit(action[1]) * kPoseStep, -kBoxHalf, kBoxHalf);
      next.object.theta = wrap_angle(state.object.theta + clamp_unit(action[2]) * kTurnStep);
      break;
  }
  return next;
}

double true_reward(TaskId task, const EnvState& state, const EnvState& goal) {
  switch (task) {
    case TaskId::Valve:
      return -std::log(std::max(angle_distance(state.valve_angle, goal.valve_angle), kLogClamp));
    case TaskId::Reposition: {
      const double dxy = std::hypot(state.object.x - goal.object.x, state.object.y - goal.object.y);
      const double dth = angle_distance(state.object.theta, goal.object.theta);
      return -2.0 * std::log(std::max(dxy, kLogClamp)) - std::log(std::max(dth, kLogClamp));
    }
    case TaskId::Beads: {
      double sum = 0.0;
      for (std::size_t i = 0; i < 4; ++i) sum += std::abs(state.beads[i] - goal.beads[i]);
      return -sum / 4.0;
    }
  }
  return 0.0;
}

double pose_distance(const EnvState& state, const EnvState& goal) {
  if (state.task != TaskId::Reposition || goal.task != TaskId::Reposition) {
    throw std::invalid_argument("pose distance is defined for the reposition task only");
  }
  const double dxy = std::hypot(state.object.x - goal.object.x, state.object.y - goal.object.y);
  return dxy / 0.25 + angle_distance(state.object.theta, goal.object.theta) / kPi;
}

bool success(TaskId task, const EnvState& state, const EnvState& goal) {
  switch (task) {
    case TaskId::Valve:
      return angle_distance(state.valve_angle, goal.valve_angle) <= kValveSuccessAngle;
    case TaskId::Beads:
      for (std::size_t i = 0; i < 4; ++i) {
        if (std::abs(state.beads[i] - goal.beads[i]) > kBeadSuccessDistance) return false;
      }
      return true;
    case TaskId::Reposition:
      return pose_distance(state, goal) < kPoseSuccessDistance;
  }
  return false;
}

double final_metric(TaskId task, const EnvState& state, const EnvState& goal) {
  switch (task) {
    case TaskId::Valve: return angle_distance(state.valve_angle, goal.valve_angle);
    case TaskId::Beads: return -true_reward(task, state, goal);
    case TaskId::Reposition: return pose_distance(state, goal);
  }
  return 0.0;
}

EvalGrid eval_grid(TaskId task) {
  EvalGrid grid{task, {}, 0};
  const EnvState goal = goal_state(task);
  switch (task) {
    case TaskId::Valve:
      for (int k = 0; k < 8; ++k) {
        EnvState s = goal;
        s.valve_angle = wrap_angle(goal.valve_angle + k * kPi / 4);
        grid.inits.push_back(s);
      }
      break;
    case TaskId::Beads: {
      const double d = kBeadDiameter;
      const double spread = (kBeadMax - kBeadMin) / 3.0;
      const std::array<std::array<double, 4>, 8> configs = {{
          goal.beads,                                                   // two on each end
          {kBeadMin, kBeadMin + d, kBeadMin + 2 * d, kBeadMin + 3 * d},  // all left
          {kBeadMax - 3 * d, kBeadMax - 2 * d, kBeadMax - d, kBeadMax},  // all right
          {kBeadMin, kBeadMin + d, kBeadMin + 2 * d, kBeadMax},          // three left, one right
          {kBeadMin, kBeadMax - 2 * d, kBeadMax - d, kBeadMax},          // one left, three right
          {-1.5 * d, -0.5 * d, 0.5 * d, 1.5 * d},                        // centred
          {kBeadMin, kBeadMin + spread, kBeadMin + 2 * spread, kBeadMax},  // evenly spread
          {kBeadMin, kBeadMin + d, 0.0, d},                              // two left, two centre
      }};
      for (const auto& c : configs) {
        EnvState s = goal;
        s.beads = c;
        s.pusher = 0.0;
        grid.inits.push_back(s);
      }
      break;
    }
    case TaskId::Reposition: {
      const std::array<std::array<double, 2>, 5> xy = {{{0.0, 0.0}, {-0.1, -0.1}, {0.1, -0.1},
                                                        {-0.1, 0.1}, {0.1, 0.1}}};
      const std::array<double, 3> thetas = {-kPi / 2, 0.0, kPi / 2};
      for (const auto& p : xy) {
        for (double th : thetas) {
          EnvState s = goal;
          s.object = {p[0], p[1], th};
          grid.inits.push_back(s);
        }
      }
      break;
    }
  }
  for (std::size_t i = 0; i < grid.inits.size(); ++i) {
    if (grid.inits[i] == goal) grid.goal_index = i;
  }
  return grid;
}

EnvState sample_random_state(TaskId task, std::mt19937_64& rng) {
  EnvState s;
  s.task = task;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  switch (task) {
    case TaskId::Beads: {
      // Sorted uniforms on the slack interval, shifted by i diameters, are
      // uniform over separated sorted configurations.
      const double slack = (kBeadMax - kBeadMin) - 3 * kBeadDiameter;
      std::array<double, 4> u{};
      for (auto& v : u) v = unit(rng) * slack;
      std::sort(u.begin(), u.end());
      for (int i = 0; i < 4; ++i) {
        s.beads[static_cast<std::size_t>(i)] = kBeadMin + u[static_cast<std::size_t>(i)] + i * kBeadDiameter;
      }
      s.pusher = (2.0 * unit(rng) - 1.0) * kRodHalf;
      break;
    }
    case TaskId::Valve:
      s.valve_angle = wrap_angle((2.0 * unit(rng) - 1.0) * kPi);
      break;
    case TaskId::Reposition:
      s.object.x = (2.0 * unit(rng) - 1.0) * kBoxHalf;
      s.object.y = (2.0 * unit(rng) - 1.0) * kBoxHalf;
      s.object.theta = wrap_angle((2.0 * unit(rng) - 1.0) * kPi);
      break;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

struct Rgb {
  float r, g, b;
};

constexpr Rgb kBackground{0.12f, 0.12f, 0.14f};
constexpr Rgb kRod{0.55f, 0.55f, 0.55f};
constexpr Rgb kBead{0.95f, 0.65f, 0.15f};
constexpr Rgb kLobe{0.25f, 0.45f, 0.95f};
constexpr Rgb kMarkedLobe{0.95f, 0.2f, 0.2f};
constexpr Rgb kHub{0.85f, 0.85f, 0.85f};
constexpr Rgb kArena{0.2f, 0.22f, 0.2f};

constexpr int kSuper = 4;  // supersamples per pixel axis

struct Capsule {
  double ax, ay, bx, by, radius;
  Rgb color;
};
struct Disc {
  double cx, cy, radius;
  Rgb color;
};

bool in_capsule(const Capsule& c, double px, double py) {
  const double vx = c.bx - c.ax, vy = c.by - c.ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - c.ax) * vx + (py - c.ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (c.ax + t * vx), dy = py - (c.ay + t * vy);
  return dx * dx + dy * dy <= c.radius * c.radius;
}

bool in_disc(const Disc& d, double px, double py) {
  const double dx = px - d.cx, dy = py - d.cy;
  return dx * dx + dy * dy <= d.radius * d.radius;
}

// Scene in pixel coordinates; later shapes paint over earlier ones.
struct Scene {
  Rgb background = kBackground;
  std::vector<Capsule> capsules;
  std::vector<Disc> discs;  // painted after capsules

  Rgb shade(double px, double py) const {
    Rgb c = background;
    for (const auto& s : capsules) {
      if (in_capsule(s, px, py)) c = s.color;
    }
    for (const auto& d : discs) {
      if (in_disc(d, px, py)) c = d.color;
    }
    return c;
  }
};

void add_three_prongs(Scene& scene, double cx, double cy, double theta, double length, double width) {
  // marked lobe last so it stays on top where lobes overlap at the hub
  for (int k : {1, 2, 0}) {
    const double a = theta + k * 2.0 * kPi / 3.0;
    // image rows grow downwards, so world +y maps to -row
    scene.capsules.push_back({cx, cy, cx + length * std::cos(a), cy - length * std::sin(a), width,
                              k == 0 ? kMarkedLobe : kLobe});
  }
  scene.discs.push_back({cx, cy, width * 0.9, kHub});
}

Scene build_scene(const EnvState& s) {
  Scene scene;
  constexpr double c = Image::kSize / 2.0;
  switch (s.task) {
    case TaskId::Beads: {
      const double scale = (Image::kSize - 2.0) / kRodLength;
      scene.capsules.push_back({c - kRodHalf * scale, c, c + kRodHalf * scale, c, 0.6, kRod});
      for (double b : s.beads) scene.discs.push_back({c + b * scale, c, kBeadRadius * scale, kBead});
      break;
    }
    case TaskId::Valve:
      add_three_prongs(scene, c, c, s.valve_angle, 12.0, 2.2);
      break;
    case TaskId::Reposition: {
      const double scale = (Image::kSize - 4.0) / (2 * kBoxHalf);
      scene.background = kArena;
      add_three_prongs(scene, c + s.object.x * scale, c - s.object.y * scale, s.object.theta,
                       0.075 * scale, 1.6);
      break;
    }
  }
  return scene;
}

std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

void Image::to_floats(float* out) const {
  for (int i = 0; i < kNumValues; ++i) out[i] = value(i);
}

Image render(const EnvState& state) {
  const Scene scene = build_scene(state);
  Image img;
  constexpr float inv = 1.0f / (kSuper * kSuper);
  for (int y = 0; y < Image::kSize; ++y) {
    for (int x = 0; x < Image::kSize; ++x) {
      float r = 0, g = 0, b = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const Rgb c = scene.shade(x + (sx + 0.5) / kSuper, y + (sy + 0.5) / kSuper);
          r += c.r;
          g += c.g;
          b += c.b;
        }
      }
      const auto o = static_cast<std::size_t>((y * Image::kSize + x) * Image::kChannels);
      img.pixels[o] = quantize(r * inv);
      img.pixels[o + 1] = quantize(g * inv);
      img.pixels[o + 2] = quantize(b * inv);
    }
  }
  return img;
}

int Observation::core_size() const {
  return mode == ObsMode::Image ? Image::kNumValues : static_cast<int>(state.size());
}

void Observation::write_core(float* out) const {
  if (mode == ObsMode::Image) {
    image->to_floats(out);
  } else {
    for (Eigen::Index i = 0; i < state.size(); ++i) out[i] = state[i];
  }
}

VectorF Observation::flat() const {
  VectorF v(core_size() + proprio.size());
  write_core(v.data());
  v.tail(proprio.size()) = proprio;
  return v;
}

Observation observe(const EnvState& s, ObsMode mode) {
  Observation obs;
  obs.mode = mode;
  obs.proprio = VectorF(proprio_dim(s.task));
  if (s.task == TaskId::Beads) obs.proprio[0] = static_cast<float>(s.pusher / 0.1);
  if (mode == ObsMode::Image) {
    obs.image = std::make_shared<const Image>(render(s));
    return obs;
  }
  obs.state = VectorF(state_dim(s.task));
  switch (s.task) {
    case TaskId::Beads:
      for (int i = 0; i < 4; ++i) obs.state[i] = static_cast<float>(s.beads[static_cast<std::size_t>(i)] / 0.1);
      break;
    case TaskId::Valve:
      obs.state << static_cast<float>(std::cos(s.valve_angle)), static_cast<float>(std::sin(s.valve_angle));
      break;
    case TaskId::Reposition:
      obs.state << static_cast<float>(s.object.x / kBoxHalf), static_cast<float>(s.object.y / kBoxHalf),
          static_cast<float>(std::cos(s.object.theta)), static_cast<float>(std::sin(s.object.theta));
      break;
  }
  return obs;
}

GoalExamples goal_examples(TaskId task, const EnvState& goal, int n, ObsMode mode,
                           std::mt19937_64& rng, double width) {
  if (n < 1) throw std::invalid_argument("goal_examples needs n >= 1");
  if (width < 0.0 || width > 1.0) throw std::invalid_argument("goal sampling width must be in [0, 1]");
  // strictly inside the success region
  const double w = width * 0.999;
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  GoalExamples out;
  while (static_cast<int>(out.states.size()) < n) {
    EnvState s = goal;
    switch (task) {
      case TaskId::Valve:
        s.valve_angle = wrap_angle(goal.valve_angle + sym(rng) * kValveSuccessAngle * w);
        break;
      case TaskId::Beads:
        for (std::size_t i = 0; i < 4; ++i) s.beads[i] = goal.beads[i] + sym(rng) * kBeadSuccessDistance * w;
        break;
      case TaskId::Reposition: {
        // rejection sampling of the region pose_distance < threshold
        const double r = kPoseSuccessDistance * 0.25 * w;
        s.object.x = goal.object.x + sym(rng) * r;
        s.object.y = goal.object.y + sym(rng) * r;
        s.object.theta = wrap_angle(goal.object.theta + sym(rng) * kPoseSuccessDistance * kPi * w);
        break;
      }
    }
    try {
      validate(s);
    } catch (const InvalidState&) {
      continue;
    }
    if (!success(task, s, goal)) continue;
    out.observations.push_back(observe(s, mode));
    out.states.push_back(s);
  }
  return out;
}

void write_ppm(std::ostream& os, const Image& image) {
  os << "P6\n" << Image::kSize << " " << Image::kSize << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.pixels.data()), Image::kNumValues);
}

Image read_ppm(std::istream& is) {
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P6" || w != Image::kSize || h != Image::kSize || maxval != 255) {
    throw std::runtime_error("unsupported PPM image");
  }
  is.get();
  Image img;
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()), Image::kNumValues)) {
    throw std::runtime_error("truncated PPM image");
  }
  return img;
}

std::string state_csv_header() {
  return "task,step,bead0,bead1,bead2,bead3,pusher,valve_angle,x,y,theta";
}

std::string state_csv_row(const EnvState& s, std::int64_t step) {
  std::ostringstream os;
  os.precision(17);
  os << to_string(s.task) << "," << step;
  for (double b : s.beads) os << "," << b;
  os << "," << s.pusher << "," << s.valve_angle << "," << s.object.x << "," << s.object.y << ","
     << s.object.theta;
  return os.str();
}

}  // namespace r3l::env
