#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "oawam/config.hpp"
#include "oawam/rng.hpp"

namespace oawam::sim {

using Vec2 = Eigen::Vector2d;

// All scene state is snapped to float32 after every update so that episode
// files (f32 blobs) round-trip losslessly and replay is exact.
// The volatile keeps GCC 11's SLP vectorizer from dropping the narrowing
// conversion when adjacent struct members are snapped back to back.
inline double snap(double v) {
  volatile float f = static_cast<float>(v);
  return static_cast<double>(f);
}

struct ObjectSpec {
  int label_id = 0;
  Vec2 position = Vec2::Zero();
  double angle = 0.0;
  // (width, height, area, aspect, convexity, centroid offset norm)
  std::array<double, 6> shape_desc{};
};

struct RobotState {
  Vec2 ee_position = Vec2::Zero();
  double ee_angle = 0.0;
  double gripper = -1.0;  // -1 open, +1 closed
};

struct Scene {
  std::vector<ObjectSpec> objects;
  RobotState robot;
  int attached = -1;  // object index carried by the closed gripper, -1 if none
};

struct Instruction {
  int verb_id = 0;  // two phrasings of "place target on reference"
  int target_label = 0;
  int reference_label = 0;
};

enum class PerturbAxis { CameraShift, RobotInit, Layout, FeatureNoise, Language };

struct PerturbationSpec {
  PerturbAxis axis = PerturbAxis::CameraShift;
  double strength = 0.0;  // clamped to [0,1]
  std::uint64_t seed = 0;
};

struct EpisodeRecord {
  std::vector<Scene> frames;
  std::vector<std::array<double, 3>> actions;  // (dx, dy, grip command)
  Instruction instruction;
  std::uint64_t seed = 0;
  int target_index = 0;
  int reference_index = 0;
  bool degenerate = false;
  bool expert_success = false;
  std::optional<PerturbationSpec> perturbation;
};

enum class SlotRole { Robot, Object, Padding };
enum class InstrRole { Target, Reference, Other, None };

struct RawSlot {
  Eigen::VectorXd feature;              // appearance signature, F-dim
  Eigen::Vector4d pose = Eigen::Vector4d::Zero();  // (x, y, cos, sin)
  std::array<double, 6> shape_desc{};
  int label_id = -1;
  SlotRole role = SlotRole::Padding;
  InstrRole instr_role = InstrRole::None;
};

std::array<double, 6> shape_desc_for_label(int label_id);

// Deterministic per-label appearance signature (the frozen-encoder analog);
// robot uses pseudo-label sim.label_vocab with the gripper in the last entry.
Eigen::VectorXd label_signature(int label_id, int feature_dim);

Scene step(const Scene& scene, const std::array<double, 3>& action, const SimConfig& cfg);

bool goal_reached(const Scene& scene, int target_index, int reference_index,
                  const SimConfig& cfg);

Scene sample_scene(const SimConfig& cfg, int n_objects, Rng& rng);

// Expert rollout on a given scene; resolves which instances the instruction
// binds to (nearest matching instance to the EE at t=0).
EpisodeRecord run_expert(const Scene& start, const Instruction& instr,
                         const SimConfig& cfg);

EpisodeRecord generate_episode(const SimConfig& cfg, std::uint64_t seed);

Scene apply_perturbation(const Scene& scene, const PerturbationSpec& spec,
                         const SimConfig& cfg);

// Instruction-level effect of the Language axis (scene state is untouched).
Instruction perturb_instruction(const Instruction& instr, const PerturbationSpec& spec);

// One code id per grid cell: 0 = empty, otherwise a deterministic hash of
// (occupancy level, dominant label) folded into [1, codebook).
std::vector<int> render_codes(const Scene& scene, int grid_size, int codebook,
                              const SimConfig& cfg);

// Slot perception with the t=0 binding rule: the target/reference flags go to
// the nearest instance carrying the instructed label.
std::vector<RawSlot> ground_truth_slots(const Scene& scene, const Instruction& instr,
                                        const SimConfig& cfg);

// Perception for a frame of an episode whose binding was fixed at t=0.
// `noise` (FeatureNoise axis) perturbs features of valid slots; frame_index
// seeds the per-frame draw.
std::vector<RawSlot> slots_for_frame(const Scene& scene, const Instruction& instr,
                                     int target_index, int reference_index,
                                     const SimConfig& cfg,
                                     const PerturbationSpec* noise = nullptr,
                                     int frame_index = 0);

void save_episode(const EpisodeRecord& ep, const std::string& path,
                  const std::string& config_hash);
EpisodeRecord load_episode(const std::string& path);

}  // namespace oawam::sim
