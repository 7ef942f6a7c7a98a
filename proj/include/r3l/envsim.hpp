#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace r3l::env {

using VectorF = Eigen::VectorXf;

enum class TaskId { Beads, Valve, Reposition };

const char* to_string(TaskId task);
TaskId parse_task(const std::string& name);

// Geometry and dynamics constants, SI units.
inline constexpr double kRodLength = 0.22;
inline constexpr double kRodHalf = kRodLength / 2;
inline constexpr double kBeadDiameter = 0.035;
inline constexpr double kBeadRadius = kBeadDiameter / 2;
inline constexpr double kBeadMin = -kRodHalf + kBeadRadius;  // extreme bead centres
inline constexpr double kBeadMax = kRodHalf - kBeadRadius;
inline constexpr double kBoxHalf = 0.15;
inline constexpr double kPusherStep = 0.01;
inline constexpr double kValveStep = 0.15;
inline constexpr double kPoseStep = 0.01;
inline constexpr double kTurnStep = 0.1;
inline constexpr double kLogClamp = 1e-3;

inline constexpr double kValveSuccessAngle = 15.0 * std::numbers::pi / 180.0;
inline constexpr double kBeadSuccessDistance = 0.02;
inline constexpr double kPoseSuccessDistance = 0.15;

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;

  friend bool operator==(const Pose&, const Pose&) = default;
};

/// Exact simulator state. Only the fields of `task` are meaningful.
struct EnvState {
  TaskId task = TaskId::Valve;
  std::array<double, 4> beads{};
  double valve_angle = 0.0;
  Pose object{};
  double pusher = 0.0;

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

class InvalidState : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Actions live in [-1, 1]^d.
using Action = VectorF;

int action_dim(TaskId task);
int state_dim(TaskId task);
int proprio_dim(TaskId task);

/// Wraps into (-pi, pi].
double wrap_angle(double a);
/// Shortest angular distance, in [0, pi]; symmetric in its arguments.
double angle_distance(double a, double b);

/// Throws InvalidState describing the first violated invariant.
void validate(const EnvState& s);

EnvState goal_state(TaskId task);
EnvState canonical_start(TaskId task);

/// Returns `init` (after validation) or the canonical start state.
EnvState env_init(TaskId task, std::uint64_t seed, const std::optional<EnvState>& init = {});

/// Deterministic kinematic step. The action is clamped to [-1, 1] first.
EnvState env_step(const EnvState& state, const Action& action);

double true_reward(TaskId task, const EnvState& state, const EnvState& goal);
double pose_distance(const EnvState& state, const EnvState& goal);
bool success(TaskId task, const EnvState& state, const EnvState& goal);

/// Task-specific scalar reported by evaluation: pose distance for
/// Reposition, wrapped angle error for Valve, mean bead error for Beads.
double final_metric(TaskId task, const EnvState& state, const EnvState& goal);

struct EvalGrid {
  TaskId task;
  std::vector<EnvState> inits;
  std::size_t goal_index = 0;
};

EvalGrid eval_grid(TaskId task);

EnvState sample_random_state(TaskId task, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Observations

enum class ObsMode { State, Image };

const char* to_string(ObsMode mode);
ObsMode parse_obs_mode(const std::string& name);

/// 32x32 RGB, channels-last, 8-bit. Float views are value / 255, so every
/// observation value lies in [0, 1].
struct Image {
  static constexpr int kSize = 32;
  static constexpr int kChannels = 3;
  static constexpr int kNumValues = kSize * kSize * kChannels;

  std::array<std::uint8_t, kNumValues> pixels{};

  float value(int i) const { return static_cast<float>(pixels[static_cast<std::size_t>(i)]) / 255.0f; }
  void to_floats(float* out) const;
  friend bool operator==(const Image&, const Image&) = default;
};

struct Observation {
  ObsMode mode = ObsMode::State;
  VectorF state;                        // empty in image mode
  std::shared_ptr<const Image> image;   // null in state mode
  VectorF proprio;                      // pusher position for Beads

  /// Size of the primary channel: state vector length or image size.
  int core_size() const;
  void write_core(float* out) const;
  /// core followed by proprio
  VectorF flat() const;
};

Image render(const EnvState& state);
Observation observe(const EnvState& state, ObsMode mode);

/// `n` observations rendered from states sampled uniformly inside the success
/// region of `goal`. `width` scales the sampling region; 0 yields `n` copies
/// of the goal itself.
struct GoalExamples {
  std::vector<EnvState> states;
  std::vector<Observation> observations;
};
GoalExamples goal_examples(TaskId task, const EnvState& goal, int n, ObsMode mode,
                           std::mt19937_64& rng, double width = 1.0);

/// Binary PPM (P6).
void write_ppm(std::ostream& os, const Image& image);
Image read_ppm(std::istream& is);

std::string state_csv_header();
std::string state_csv_row(const EnvState& s, std::int64_t step);

}  // namespace r3l::env
