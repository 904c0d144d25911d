#pragma once

#include <optional>
#include <vector>

#include <Eigen/Core>

#include "oawam/config.hpp"
#include "oawam/rng.hpp"
#include "oawam/sequence.hpp"
#include "oawam/sim.hpp"

namespace oawam::data {

// One T-frame model input window plus (for training) its supervision targets.
struct Window {
  seq::WindowTokens tokens;
  std::vector<std::vector<sim::RawSlot>> frame_slots;  // T x (n_max+1)
  std::vector<sim::RawSlot> addr_source;  // episode-frame-0 slots (addr inputs)
  std::vector<Eigen::MatrixXd> geom;      // T of (n_max+1)^2 x 3 (dx, dy, dtheta)
  sim::Instruction instruction;
  int n_valid = 0;  // valid slots including the robot

  // Training supervision (absent on rollout windows).
  Eigen::MatrixXd chunk_target;         // H x act_dim
  std::vector<sim::RawSlot> next_slots; // pivot+1 perception
  std::vector<std::uint8_t> next_valid_obj;  // per slot: supervised by world loss
  int target_col = -1;  // slot column of the instruction target
  int ref_col = -1;
  bool has_supervision = false;
};

Eigen::MatrixXd geometry_tensor(const std::vector<sim::RawSlot>& slots, int n_max);

// Observation-side window assembly shared by training and rollout. `frames`
// is the full observed history up to and including the current frame;
// actions[i] joins frames[i] and frames[i+1]. Windows shorter than T are
// left-padded with the initial frame (and zero past-actions).
Window build_observation_window(const std::vector<sim::Scene>& frames,
                                const std::vector<std::array<double, 3>>& actions,
                                const sim::Instruction& instr, int target_idx,
                                int ref_idx, const Config& cfg,
                                const sim::PerturbationSpec* feature_noise = nullptr);

Window build_training_window(const sim::EpisodeRecord& ep, int pivot, const Config& cfg);

// Distractor permutation: applies `perm` (a permutation of the distractor
// slot columns) consistently to slots, addresses, geometry, and targets.
Window permute_window(const Window& win, const std::vector<int>& perm);

// Sample a permutation of the non-target, non-reference object slots.
// Returns an identity map when fewer than two distractors exist.
std::vector<int> sample_distractor_permutation(const Window& win, Rng& rng);

// Distractor insertion: grafts a donor object slot into the first padding
// column of every frame, recomputing geometry; the VQ stream is untouched
// (the augmentation operates on slot tokens, not on the rendered scene).
// Returns false when no padding slot is free.
bool insert_window(Window& win, const sim::RawSlot& donor);

// A donor distractor from another episode, or nullopt if none exists.
std::optional<sim::RawSlot> pick_donor(const sim::EpisodeRecord& ep, const Config& cfg,
                                       Rng& rng);

struct Dataset {
  std::vector<sim::EpisodeRecord> episodes;

  static Dataset generate(const Config& cfg, int count, std::uint64_t data_seed);
  const sim::EpisodeRecord& sample(Rng& rng, int& pivot_out) const;
};

}  // namespace oawam::data
