#pragma once

#include <optional>
#include <vector>

#include "oawam/model.hpp"

namespace oawam::eval {

using oawam::ad::Mat;

// An evaluation task: a start scene with its instruction binding and the
// expert's episode length (used to budget rollouts).
struct EvalTask {
  sim::Scene start;
  sim::Instruction instruction;
  int target_index = 0;
  int reference_index = 0;
  int expert_len = 0;
  std::uint64_t seed = 0;
};

inline EvalTask make_task(const Config& cfg, std::uint64_t seed) {
  const sim::EpisodeRecord ep = sim::generate_episode(cfg.sim, seed);
  EvalTask t;
  t.start = ep.frames.front();
  t.instruction = ep.instruction;
  t.target_index = ep.target_index;
  t.reference_index = ep.reference_index;
  t.expert_len = static_cast<int>(ep.actions.size());
  t.seed = seed;
  return t;
}

struct RolloutOptions {
  std::optional<sim::PerturbationSpec> perturbation;
  int max_steps = 80;
  int replan_every = 16;
  int euler_steps = 4;
  std::uint64_t sampler_seed = 7;
  bool stop_on_success = true;
  // Episode address cache override (interventions); (n_max+1) x addr_dim.
  const void* addr_override = nullptr;
};

struct RolloutResult {
  bool success = false;
  int steps = 0;
  std::vector<Eigen::Vector2d> ee_path;  // true-frame EE, includes start
  std::uint64_t input_hash = 0;  // non-address inputs + sampler stream id
};

namespace detail {

inline void hash_mix(std::uint64_t& h, std::uint64_t v) {
  h = Rng::splitmix(h ^ (v + 0x9e3779b97f4a7c15ull));
}

inline void hash_double(std::uint64_t& h, double d) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(d));
  std::memcpy(&bits, &d, sizeof(bits));
  hash_mix(h, bits);
}

inline std::uint64_t hash_window_inputs(const data::Window& win,
                                        std::uint64_t sampler_seed) {
  std::uint64_t h = 0x0a11ce5ull;
  for (const auto& frame : win.frame_slots) {
    for (const auto& slot : frame) {
      hash_mix(h, static_cast<std::uint64_t>(slot.label_id + 2));
      hash_mix(h, static_cast<std::uint64_t>(slot.role));
      hash_mix(h, static_cast<std::uint64_t>(slot.instr_role));
      for (Eigen::Index i = 0; i < slot.feature.size(); ++i) {
        hash_double(h, slot.feature[i]);
      }
      for (int i = 0; i < 4; ++i) hash_double(h, slot.pose[i]);
      for (const double s : slot.shape_desc) hash_double(h, s);
    }
  }
  for (const auto& g : win.geom) {
    for (Eigen::Index i = 0; i < g.size(); ++i) hash_double(h, g.data()[i]);
  }
  hash_mix(h, static_cast<std::uint64_t>(win.tokens.instruction[0]));
  hash_mix(h, static_cast<std::uint64_t>(win.tokens.instruction[1]));
  hash_mix(h, static_cast<std::uint64_t>(win.tokens.instruction[2]));
  for (const int b : win.tokens.state_bins) hash_mix(h, static_cast<std::uint64_t>(b));
  for (const auto& row : win.tokens.vq_codes) {
    for (const int c : row) hash_mix(h, static_cast<std::uint64_t>(c));
  }
  hash_mix(h, sampler_seed);
  return h;
}

}  // namespace detail

// Closed-loop rollout. Observations pass through the perturbation axis
// (camera shift transforms every reported frame; feature noise corrupts slot
// features; language swaps the instruction phrasing); the policy's planar
// action is interpreted in its observed frame, so a camera shift also maps
// the commanded delta back into the world frame. Addresses are computed once
// from the first observed frame and held for the whole episode.
template <typename S>
RolloutResult rollout(model::ModelParams<S>& mp, const Config& cfg, const EvalTask& task,
                      const RolloutOptions& opt) {
  sim::Scene world = task.start;
  sim::Instruction instr = task.instruction;

  const sim::PerturbationSpec* camera = nullptr;
  const sim::PerturbationSpec* noise = nullptr;
  if (opt.perturbation) {
    const auto& p = *opt.perturbation;
    switch (p.axis) {
      case sim::PerturbAxis::RobotInit:
      case sim::PerturbAxis::Layout:
        world = sim::apply_perturbation(world, p, cfg.sim);
        break;
      case sim::PerturbAxis::CameraShift:
        camera = &p;
        break;
      case sim::PerturbAxis::FeatureNoise:
        noise = &p;
        break;
      case sim::PerturbAxis::Language:
        instr = sim::perturb_instruction(instr, p);
        break;
    }
  }

  // Camera back-map for commanded deltas.
  double cam_angle = 0.0;
  if (camera != nullptr) {
    cam_angle = std::min(1.0, std::max(0.0, camera->strength)) * cfg.sim.camera_max_angle;
  }

  auto observe = [&](const sim::Scene& s) {
    return camera != nullptr ? sim::apply_perturbation(s, *camera, cfg.sim) : s;
  };

  std::vector<sim::Scene> observed{observe(world)};
  std::vector<std::array<double, 3>> observed_actions;

  // Episode address cache from the first observed frame.
  Mat<S> addr_cache;
  if (opt.addr_override != nullptr) {
    addr_cache = *static_cast<const Mat<S>*>(opt.addr_override);
  } else {
    ad::Tape<S> tape;
    const auto slots0 = sim::slots_for_frame(observed.front(), instr, task.target_index,
                                             task.reference_index, cfg.sim, noise, 0);
    addr_cache = tape.value(model::compute_addr(tape, mp, slots0, instr));
  }

  RolloutResult result;
  result.ee_path.push_back(world.robot.ee_position);

  Rng sampler(opt.sampler_seed, "sampler");
  bool hashed = false;
  int chunk_index = 0;
  while (result.steps < opt.max_steps) {
    data::Window win = data::build_observation_window(
        observed, observed_actions, instr, task.target_index, task.reference_index,
        cfg, noise);
    if (!hashed) {
      result.input_hash = detail::hash_window_inputs(win, opt.sampler_seed);
      hashed = true;
    }

    ad::Tape<S> tape;
    model::ForwardOptions fopt;
    fopt.want_vq = false;
    fopt.external_addr = &addr_cache;
    auto fwd = model::forward(tape, mp, win, fopt);

    Rng chunk_rng = sampler.child("chunk", static_cast<std::uint64_t>(chunk_index++));
    const Mat<S> noise0 = model::sample_chunk_noise(mp, chunk_rng);
    ad::Var<S> chunk = model::euler_decode(tape, mp, fwd.cond, noise0, opt.euler_steps);
    const Mat<S>& flat = tape.value(chunk);

    const int to_exec = std::min(opt.replan_every, cfg.model.chunk);
    for (int hstep = 0; hstep < to_exec && result.steps < opt.max_steps; ++hstep) {
      std::array<double, 3> act{};
      for (int d = 0; d < cfg.model.act_dim; ++d) {
        act[static_cast<std::size_t>(d)] = std::min(
            1.0, std::max(-1.0, static_cast<double>(flat(0, hstep * cfg.model.act_dim + d))));
      }
      std::array<double, 3> world_act = act;
      if (camera != nullptr) {
        // Observed-frame command -> world frame (inverse rotation).
        const double c = std::cos(-cam_angle), s = std::sin(-cam_angle);
        world_act[0] = c * act[0] - s * act[1];
        world_act[1] = s * act[0] + c * act[1];
      }
      world = sim::step(world, world_act, cfg.sim);
      result.ee_path.push_back(world.robot.ee_position);
      observed.push_back(observe(world));
      observed_actions.push_back(act);
      ++result.steps;

      if (sim::goal_reached(world, task.target_index, task.reference_index, cfg.sim)) {
        result.success = true;
        if (opt.stop_on_success) return result;
      }
    }
  }
  result.success = sim::goal_reached(world, task.target_index, task.reference_index,
                                     cfg.sim);
  return result;
}

// Mean task success over freshly sampled evaluation scenes.
template <typename S>
double success_rate(model::ModelParams<S>& mp, const Config& cfg,
                    const std::optional<sim::PerturbationSpec>& perturbation,
                    int episodes, std::uint64_t seed) {
  int wins = 0;
  for (int e = 0; e < episodes; ++e) {
    const EvalTask task = make_task(cfg, Rng::splitmix(seed ^ (0x51edull * (e + 1))));
    RolloutOptions opt;
    opt.perturbation = perturbation;
    if (opt.perturbation) {
      opt.perturbation->seed = Rng::splitmix(task.seed ^ 0xca11ull);
    }
    opt.max_steps = cfg.eval.max_rollout_steps;
    opt.replan_every = cfg.eval.replan_every;
    opt.euler_steps = cfg.eval.euler_steps;
    opt.sampler_seed = Rng::splitmix(task.seed ^ 0x5a3ull);
    wins += rollout(mp, cfg, task, opt).success ? 1 : 0;
  }
  return static_cast<double>(wins) / episodes;
}

}  // namespace oawam::eval
