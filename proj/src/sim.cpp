#include "oawam/sim.hpp"

#include <algorithm>
#include <cmath>

#include "oawam/container.hpp"
#include "oawam/errors.hpp"

namespace oawam::sim {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kSpawnRadius = 0.65;  // keeps camera-shifted coords inside [-1,1]

double wrap_angle(double a) {
  while (a > kPi) a -= 2.0 * kPi;
  while (a <= -kPi) a += 2.0 * kPi;
  return a;
}

void snap_scene(Scene& s) {
  for (auto& o : s.objects) {
    o.position.x() = snap(o.position.x());
    o.position.y() = snap(o.position.y());
    o.angle = snap(o.angle);
  }
  s.robot.ee_position.x() = snap(s.robot.ee_position.x());
  s.robot.ee_position.y() = snap(s.robot.ee_position.y());
  s.robot.ee_angle = snap(s.robot.ee_angle);
  s.robot.gripper = snap(s.robot.gripper);
}

double clampd(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

// Axis-aligned bounding box of an object's rotated w x h footprint.
void object_aabb(const ObjectSpec& o, double& x0, double& y0, double& x1, double& y1) {
  const double hw = o.shape_desc[0] * 0.5;
  const double hh = o.shape_desc[1] * 0.5;
  const double c = std::abs(std::cos(o.angle));
  const double s = std::abs(std::sin(o.angle));
  const double ex = hw * c + hh * s;
  const double ey = hw * s + hh * c;
  x0 = o.position.x() - ex;
  x1 = o.position.x() + ex;
  y0 = o.position.y() - ey;
  y1 = o.position.y() + ey;
}

}  // namespace

std::array<double, 6> shape_desc_for_label(int label_id) {
  // Three shape classes; color (label / 3) changes appearance only.
  const int shape = ((label_id % 3) + 3) % 3;
  double w = 0.10, h = 0.10, area = 0.0;
  switch (shape) {
    case 0:
      w = 0.10;
      h = 0.10;
      area = w * h;
      break;
    case 1:
      w = 0.14;
      h = 0.07;
      area = w * h;
      break;
    default:
      w = 0.09;
      h = 0.09;
      area = 0.25 * kPi * w * h;  // disc
      break;
  }
  return {w, h, area, w / h, 1.0, 0.0};
}

Eigen::VectorXd label_signature(int label_id, int feature_dim) {
  Eigen::VectorXd f(feature_dim);
  Rng rng(0x5107a11feull ^ (static_cast<std::uint64_t>(label_id + 1) * 0x9e3779b97f4a7c15ull));
  for (int i = 0; i < feature_dim; ++i) f[i] = snap(rng.uniform(-1.0, 1.0));
  return f;
}

Scene step(const Scene& scene, const std::array<double, 3>& action, const SimConfig& cfg) {
  Scene out = scene;
  const double dx = clampd(action[0], -1.0, 1.0);
  const double dy = clampd(action[1], -1.0, 1.0);
  out.robot.ee_position.x() = clampd(out.robot.ee_position.x() + dx, -1.0, 1.0);
  out.robot.ee_position.y() = clampd(out.robot.ee_position.y() + dy, -1.0, 1.0);

  const double grip_cmd = action[2] > 0.0 ? 1.0 : -1.0;
  if (grip_cmd > 0.0 && out.robot.gripper < 0.0) {
    // Closing: attach the nearest object within reach, snapped to the EE.
    int best = -1;
    double best_d = cfg.grasp_radius;
    for (std::size_t i = 0; i < out.objects.size(); ++i) {
      const double d = (out.objects[i].position - out.robot.ee_position).norm();
      if (d <= best_d) {
        best_d = d;
        best = static_cast<int>(i);
      }
    }
    out.attached = best;
  } else if (grip_cmd < 0.0) {
    out.attached = -1;
  }
  if (out.attached >= 0) {
    out.objects[static_cast<std::size_t>(out.attached)].position = out.robot.ee_position;
  }
  out.robot.gripper = grip_cmd;
  snap_scene(out);
  return out;
}

bool goal_reached(const Scene& scene, int target_index, int reference_index,
                  const SimConfig& cfg) {
  const auto& t = scene.objects[static_cast<std::size_t>(target_index)];
  const auto& r = scene.objects[static_cast<std::size_t>(reference_index)];
  return (t.position - r.position).norm() <= cfg.success_tol;
}

Scene sample_scene(const SimConfig& cfg, int n_objects, Rng& rng) {
  if (n_objects > cfg.n_max) {
    throw ConfigError("sim: object count " + std::to_string(n_objects) +
                      " exceeds slot capacity " + std::to_string(cfg.n_max));
  }
  Scene s;
  auto sample_pos = [&](const std::vector<Vec2>& taken) -> Vec2 {
    for (int attempt = 0; attempt < 100; ++attempt) {
      Vec2 p(rng.uniform(-kSpawnRadius, kSpawnRadius),
             rng.uniform(-kSpawnRadius, kSpawnRadius));
      if (p.norm() > kSpawnRadius) continue;
      bool ok = true;
      for (const auto& q : taken) {
        if ((p - q).norm() < cfg.min_separation) {
          ok = false;
          break;
        }
      }
      if (ok) return p;
    }
    throw RuntimeFailure("sim: placement failed after 100 resampling attempts");
  };

  std::vector<Vec2> taken;
  s.robot.ee_position = sample_pos(taken);
  s.robot.ee_angle = 0.0;
  s.robot.gripper = -1.0;
  taken.push_back(s.robot.ee_position);

  for (int i = 0; i < n_objects; ++i) {
    ObjectSpec o;
    o.label_id = rng.below_int(cfg.label_vocab);
    o.position = sample_pos(taken);
    o.angle = rng.uniform(-kPi, kPi);
    o.shape_desc = shape_desc_for_label(o.label_id);
    taken.push_back(o.position);
    s.objects.push_back(o);
  }
  snap_scene(s);
  return s;
}

namespace {

int nearest_with_label(const Scene& scene, int label, const Vec2& from, int exclude = -1) {
  int best = -1;
  double best_d = 1e18;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (static_cast<int>(i) == exclude) continue;
    if (scene.objects[i].label_id != label) continue;
    const double d = (scene.objects[i].position - from).norm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

}  // namespace

EpisodeRecord run_expert(const Scene& start, const Instruction& instr,
                         const SimConfig& cfg) {
  EpisodeRecord ep;
  ep.instruction = instr;

  const Vec2 ee0 = start.robot.ee_position;
  ep.target_index = nearest_with_label(start, instr.target_label, ee0);
  if (ep.target_index < 0) throw RuntimeFailure("sim: no object carries the target label");
  ep.reference_index =
      nearest_with_label(start, instr.reference_label, ee0, ep.target_index);
  if (ep.reference_index < 0) {
    throw RuntimeFailure("sim: no object carries the reference label");
  }

  ep.frames.push_back(start);
  auto emit = [&](const std::array<double, 3>& a) {
    std::array<double, 3> snapped{snap(a[0]), snap(a[1]), snap(a[2])};
    ep.actions.push_back(snapped);
    ep.frames.push_back(step(ep.frames.back(), snapped, cfg));
  };

  if (goal_reached(start, ep.target_index, ep.reference_index, cfg)) {
    // Already solved at spawn: single gripper toggle, flagged degenerate.
    emit({0.0, 0.0, -1.0});
    ep.degenerate = true;
    ep.expert_success = true;
    return ep;
  }

  auto toward = [&](const Vec2& goal, double stop_dist, double grip) -> bool {
    // Proportional controller, fixed step cap; returns false on step overrun.
    while ((goal - ep.frames.back().robot.ee_position).norm() > stop_dist) {
      if (static_cast<int>(ep.actions.size()) >= cfg.max_episode_len) return false;
      const Vec2 delta = goal - ep.frames.back().robot.ee_position;
      const double d = delta.norm();
      const Vec2 move = d <= cfg.action_step ? delta : Vec2(delta * (cfg.action_step / d));
      emit({move.x(), move.y(), grip});
    }
    return true;
  };

  const std::size_t ti = static_cast<std::size_t>(ep.target_index);
  const std::size_t ri = static_cast<std::size_t>(ep.reference_index);
  bool ok = toward(ep.frames.back().objects[ti].position, cfg.grasp_trigger, -1.0);
  if (ok) emit({0.0, 0.0, 1.0});
  if (ok && ep.frames.back().attached != ep.target_index) {
    throw RuntimeFailure("sim: expert grasp missed the target instance");
  }
  if (ok) ok = toward(ep.frames.back().objects[ri].position, cfg.place_tol, 1.0);
  if (ok) emit({0.0, 0.0, -1.0});
  if (!ok) throw RuntimeFailure("sim: expert exceeded max_episode_len");

  ep.expert_success = goal_reached(ep.frames.back(), ep.target_index,
                                   ep.reference_index, cfg);
  if (!ep.expert_success) throw RuntimeFailure("sim: expert failed the task");
  return ep;
}

EpisodeRecord generate_episode(const SimConfig& cfg, std::uint64_t seed) {
  Rng rng(seed, "episode");
  const int span = cfg.objects_max - cfg.objects_min + 1;
  const int n = cfg.objects_min + rng.below_int(span);

  for (int attempt = 0; attempt < 100; ++attempt) {
    Rng scene_rng = rng.child("scene", static_cast<std::uint64_t>(attempt));
    Scene s = sample_scene(cfg, n, scene_rng);

    // Two distinct labels must be present for an unambiguous instruction.
    Instruction instr;
    instr.verb_id = 0;
    const int t_obj = scene_rng.below_int(n);
    instr.target_label = s.objects[static_cast<std::size_t>(t_obj)].label_id;
    std::vector<int> ref_candidates;
    for (int i = 0; i < n; ++i) {
      if (s.objects[static_cast<std::size_t>(i)].label_id != instr.target_label) {
        ref_candidates.push_back(i);
      }
    }
    if (ref_candidates.empty()) continue;
    const int r_obj = ref_candidates[static_cast<std::size_t>(
        scene_rng.below_int(static_cast<int>(ref_candidates.size())))];
    instr.reference_label = s.objects[static_cast<std::size_t>(r_obj)].label_id;

    EpisodeRecord ep = run_expert(s, instr, cfg);
    ep.seed = seed;
    return ep;
  }
  throw RuntimeFailure("sim: episode generation failed after 100 attempts");
}

Scene apply_perturbation(const Scene& scene, const PerturbationSpec& spec,
                         const SimConfig& cfg) {
  const double strength = clampd(spec.strength, 0.0, 1.0);
  if (strength == 0.0) return scene;
  Scene out = scene;
  Rng rng(spec.seed, "perturb");

  switch (spec.axis) {
    case PerturbAxis::CameraShift: {
      const double a = strength * cfg.camera_max_angle;
      const double c = std::cos(a), s = std::sin(a);
      const double dir = rng.uniform(0.0, 2.0 * kPi);
      const Vec2 t(strength * cfg.camera_max_shift * std::cos(dir),
                   strength * cfg.camera_max_shift * std::sin(dir));
      auto xform = [&](const Vec2& p) {
        return Vec2(c * p.x() - s * p.y() + t.x(), s * p.x() + c * p.y() + t.y());
      };
      for (auto& o : out.objects) {
        o.position = xform(o.position);
        o.angle = wrap_angle(o.angle + a);
      }
      out.robot.ee_position = xform(out.robot.ee_position);
      out.robot.ee_angle = wrap_angle(out.robot.ee_angle + a);
      break;
    }
    case PerturbAxis::RobotInit: {
      const double r = strength * cfg.robot_init_radius * rng.uniform();
      const double dir = rng.uniform(0.0, 2.0 * kPi);
      Vec2 p = out.robot.ee_position + Vec2(r * std::cos(dir), r * std::sin(dir));
      const double n = p.norm();
      if (n > kSpawnRadius) p *= kSpawnRadius / n;
      out.robot.ee_position = p;
      break;
    }
    case PerturbAxis::Layout: {
      const int k = static_cast<int>(std::floor(strength * cfg.layout_k_max));
      if (static_cast<int>(out.objects.size()) + k > cfg.n_max) {
        throw RuntimeFailure("sim: layout perturbation exceeds slot capacity");
      }
      for (int j = 0; j < k; ++j) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
          Vec2 p(rng.uniform(-kSpawnRadius, kSpawnRadius),
                 rng.uniform(-kSpawnRadius, kSpawnRadius));
          if (p.norm() > kSpawnRadius) continue;
          bool ok = (p - out.robot.ee_position).norm() >= cfg.min_separation;
          for (const auto& o : out.objects) {
            ok = ok && (p - o.position).norm() >= cfg.min_separation;
          }
          if (!ok) continue;
          ObjectSpec o;
          o.label_id = rng.below_int(cfg.label_vocab);
          o.position = p;
          o.angle = rng.uniform(-kPi, kPi);
          o.shape_desc = shape_desc_for_label(o.label_id);
          out.objects.push_back(o);
          placed = true;
        }
        if (!placed) throw RuntimeFailure("sim: distractor placement failed");
      }
      break;
    }
    case PerturbAxis::FeatureNoise:
    case PerturbAxis::Language:
      // Perception-time / instruction-level axes: scene state unchanged.
      break;
  }
  // Perturbed scenes are evaluation-time observations, never persisted, so
  // they keep full double precision (the camera axis is rigid to 1e-12).
  return out;
}

Instruction perturb_instruction(const Instruction& instr, const PerturbationSpec& spec) {
  Instruction out = instr;
  if (spec.axis == PerturbAxis::Language && spec.strength > 0.0) {
    out.verb_id = instr.verb_id == 0 ? 1 : 0;
  }
  return out;
}

std::vector<int> render_codes(const Scene& scene, int grid_size, int codebook,
                              const SimConfig& cfg) {
  if (grid_size * grid_size > 64) {
    throw ConfigError("sim: render grid exceeds 64 cells at toy scale");
  }
  const int g = grid_size;
  std::vector<int> codes(static_cast<std::size_t>(g * g), 0);
  std::vector<double> best_area(static_cast<std::size_t>(g * g), 0.0);
  std::vector<int> dominant(static_cast<std::size_t>(g * g), -1);
  std::vector<double> coverage(static_cast<std::size_t>(g * g), 0.0);

  const double cell = 2.0 / g;
  auto splat = [&](double x0, double y0, double x1, double y1, int label) {
    const int cx0 = std::max(0, static_cast<int>(std::floor((x0 + 1.0) / cell)));
    const int cy0 = std::max(0, static_cast<int>(std::floor((y0 + 1.0) / cell)));
    const int cx1 = std::min(g - 1, static_cast<int>(std::floor((x1 + 1.0) / cell)));
    const int cy1 = std::min(g - 1, static_cast<int>(std::floor((y1 + 1.0) / cell)));
    for (int cy = cy0; cy <= cy1; ++cy) {
      for (int cx = cx0; cx <= cx1; ++cx) {
        const double gx0 = -1.0 + cx * cell, gx1 = gx0 + cell;
        const double gy0 = -1.0 + cy * cell, gy1 = gy0 + cell;
        const double ov = std::max(0.0, std::min(x1, gx1) - std::max(x0, gx0)) *
                          std::max(0.0, std::min(y1, gy1) - std::max(y0, gy0));
        if (ov <= 0.0) continue;
        const std::size_t idx = static_cast<std::size_t>(cy * g + cx);
        coverage[idx] += ov;
        if (ov > best_area[idx]) {
          best_area[idx] = ov;
          dominant[idx] = label;
        }
      }
    }
  };

  for (const auto& o : scene.objects) {
    double x0, y0, x1, y1;
    object_aabb(o, x0, y0, x1, y1);
    splat(x0, y0, x1, y1, o.label_id);
  }
  const double r = 0.03;  // EE marker
  splat(scene.robot.ee_position.x() - r, scene.robot.ee_position.y() - r,
        scene.robot.ee_position.x() + r, scene.robot.ee_position.y() + r,
        cfg.label_vocab);

  const double cell_area = cell * cell;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (dominant[i] < 0) continue;
    const double frac = std::min(1.0, coverage[i] / cell_area);
    const int occ_level = std::min(3, static_cast<int>(std::floor(frac * 4.0)));
    const std::uint64_t key =
        Rng::splitmix((static_cast<std::uint64_t>(dominant[i]) << 2) |
                      static_cast<std::uint64_t>(occ_level));
    codes[i] = 1 + static_cast<int>(key % static_cast<std::uint64_t>(codebook - 1));
  }
  return codes;
}

namespace {

std::vector<RawSlot> build_slots(const Scene& scene, int target_index,
                                 int reference_index, const SimConfig& cfg,
                                 const PerturbationSpec* noise, int frame_index) {
  const int n = static_cast<int>(scene.objects.size());
  if (n > cfg.n_max) {
    throw RuntimeFailure("sim: scene has more objects than slot capacity");
  }
  std::vector<RawSlot> slots(static_cast<std::size_t>(cfg.n_max + 1));

  RawSlot& robot = slots[0];
  robot.role = SlotRole::Robot;
  robot.instr_role = InstrRole::None;
  robot.label_id = cfg.label_vocab;
  robot.feature = label_signature(robot.label_id, cfg.feature_dim);
  robot.feature[cfg.feature_dim - 1] = scene.robot.gripper;
  robot.pose << scene.robot.ee_position.x(), scene.robot.ee_position.y(),
      std::cos(scene.robot.ee_angle), std::sin(scene.robot.ee_angle);
  robot.shape_desc = {0.06, 0.06, 0.0036, 1.0, 1.0, 0.0};

  for (int i = 0; i < n; ++i) {
    RawSlot& slot = slots[static_cast<std::size_t>(i + 1)];
    const auto& o = scene.objects[static_cast<std::size_t>(i)];
    slot.role = SlotRole::Object;
    slot.label_id = o.label_id;
    slot.feature = label_signature(o.label_id, cfg.feature_dim);
    slot.pose << o.position.x(), o.position.y(), std::cos(o.angle), std::sin(o.angle);
    slot.shape_desc = o.shape_desc;
    if (i == target_index) {
      slot.instr_role = InstrRole::Target;
    } else if (i == reference_index) {
      slot.instr_role = InstrRole::Reference;
    } else {
      slot.instr_role = InstrRole::Other;
    }
  }
  // Remaining entries stay zeroed padding with role Padding / None.
  for (int i = n; i < cfg.n_max; ++i) {
    slots[static_cast<std::size_t>(i + 1)].feature =
        Eigen::VectorXd::Zero(cfg.feature_dim);
  }

  if (noise != nullptr && noise->axis == PerturbAxis::FeatureNoise &&
      noise->strength > 0.0) {
    const double scale = clampd(noise->strength, 0.0, 1.0) * cfg.feature_noise_scale;
    for (int k = 0; k <= n; ++k) {
      Rng nrng(noise->seed, "feature_noise");
      Rng draw = nrng.child("slot", static_cast<std::uint64_t>(frame_index) * 64 +
                                        static_cast<std::uint64_t>(k));
      auto& f = slots[static_cast<std::size_t>(k)].feature;
      for (int i = 0; i < f.size(); ++i) f[i] += scale * draw.normal();
    }
  }
  return slots;
}

}  // namespace

std::vector<RawSlot> ground_truth_slots(const Scene& scene, const Instruction& instr,
                                        const SimConfig& cfg) {
  const Vec2 ee = scene.robot.ee_position;
  const int t = nearest_with_label(scene, instr.target_label, ee);
  if (t < 0) throw RuntimeFailure("sim: no object carries the target label");
  const int r = nearest_with_label(scene, instr.reference_label, ee, t);
  return build_slots(scene, t, r, cfg, nullptr, 0);
}

std::vector<RawSlot> slots_for_frame(const Scene& scene, const Instruction& instr,
                                     int target_index, int reference_index,
                                     const SimConfig& cfg,
                                     const PerturbationSpec* noise, int frame_index) {
  (void)instr;
  return build_slots(scene, target_index, reference_index, cfg, noise, frame_index);
}

void save_episode(const EpisodeRecord& ep, const std::string& path,
                  const std::string& config_hash) {
  io::Container c;
  const int T = static_cast<int>(ep.frames.size());
  const int n = static_cast<int>(ep.frames.front().objects.size());

  std::vector<float> pos(static_cast<std::size_t>(T * n * 2));
  std::vector<float> ang(static_cast<std::size_t>(T * n));
  std::vector<float> robot(static_cast<std::size_t>(T * 4));
  std::vector<std::int32_t> attached(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    const Scene& s = ep.frames[static_cast<std::size_t>(t)];
    for (int i = 0; i < n; ++i) {
      const auto& o = s.objects[static_cast<std::size_t>(i)];
      pos[static_cast<std::size_t>((t * n + i) * 2 + 0)] = static_cast<float>(o.position.x());
      pos[static_cast<std::size_t>((t * n + i) * 2 + 1)] = static_cast<float>(o.position.y());
      ang[static_cast<std::size_t>(t * n + i)] = static_cast<float>(o.angle);
    }
    robot[static_cast<std::size_t>(t * 4 + 0)] = static_cast<float>(s.robot.ee_position.x());
    robot[static_cast<std::size_t>(t * 4 + 1)] = static_cast<float>(s.robot.ee_position.y());
    robot[static_cast<std::size_t>(t * 4 + 2)] = static_cast<float>(s.robot.ee_angle);
    robot[static_cast<std::size_t>(t * 4 + 3)] = static_cast<float>(s.robot.gripper);
    attached[static_cast<std::size_t>(t)] = s.attached;
  }
  std::vector<float> actions(ep.actions.size() * 3);
  for (std::size_t i = 0; i < ep.actions.size(); ++i) {
    for (int d = 0; d < 3; ++d) {
      actions[i * 3 + static_cast<std::size_t>(d)] = static_cast<float>(ep.actions[i][static_cast<std::size_t>(d)]);
    }
  }
  std::vector<std::int32_t> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = ep.frames.front().objects[static_cast<std::size_t>(i)].label_id;
  }
  const std::int32_t instr[3] = {ep.instruction.verb_id, ep.instruction.target_label,
                                 ep.instruction.reference_label};

  c.put_f32("frames.positions", {T, n, 2}, pos.data());
  c.put_f32("frames.angles", {T, n}, ang.data());
  c.put_f32("frames.robot", {T, 4}, robot.data());
  c.put_i32("frames.attached", {T}, attached.data());
  c.put_f32("actions", {T - 1, 3}, actions.data());
  c.put_i32("labels", {n}, labels.data());
  c.put_i32("instruction", {3}, instr);

  c.meta["kind"] = "episode";
  c.meta["seed"] = ep.seed;
  c.meta["config_hash"] = config_hash;
  c.meta["code_version"] = kCodeVersion;
  c.meta["target_index"] = ep.target_index;
  c.meta["reference_index"] = ep.reference_index;
  c.meta["degenerate"] = ep.degenerate;
  c.meta["expert_success"] = ep.expert_success;
  c.save(path);
}

EpisodeRecord load_episode(const std::string& path) {
  const io::Container c = io::Container::load(path);
  EpisodeRecord ep;
  const auto shape = c.entry("frames.positions").shape;
  const int T = static_cast<int>(shape[0]);
  const int n = static_cast<int>(shape[1]);
  const auto pos = c.get_f32("frames.positions");
  const auto ang = c.get_f32("frames.angles");
  const auto robot = c.get_f32("frames.robot");
  const auto attached = c.get_i32("frames.attached");
  const auto actions = c.get_f32("actions");
  const auto labels = c.get_i32("labels");
  const auto instr = c.get_i32("instruction");

  ep.frames.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    Scene& s = ep.frames[static_cast<std::size_t>(t)];
    s.objects.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      auto& o = s.objects[static_cast<std::size_t>(i)];
      o.label_id = labels[static_cast<std::size_t>(i)];
      o.position.x() = pos[static_cast<std::size_t>((t * n + i) * 2 + 0)];
      o.position.y() = pos[static_cast<std::size_t>((t * n + i) * 2 + 1)];
      o.angle = ang[static_cast<std::size_t>(t * n + i)];
      o.shape_desc = shape_desc_for_label(o.label_id);
    }
    s.robot.ee_position.x() = robot[static_cast<std::size_t>(t * 4 + 0)];
    s.robot.ee_position.y() = robot[static_cast<std::size_t>(t * 4 + 1)];
    s.robot.ee_angle = robot[static_cast<std::size_t>(t * 4 + 2)];
    s.robot.gripper = robot[static_cast<std::size_t>(t * 4 + 3)];
    s.attached = attached[static_cast<std::size_t>(t)];
  }
  ep.actions.resize(static_cast<std::size_t>(T - 1));
  for (int t = 0; t < T - 1; ++t) {
    for (int d = 0; d < 3; ++d) {
      ep.actions[static_cast<std::size_t>(t)][static_cast<std::size_t>(d)] =
          actions[static_cast<std::size_t>(t * 3 + d)];
    }
  }
  ep.instruction.verb_id = instr[0];
  ep.instruction.target_label = instr[1];
  ep.instruction.reference_label = instr[2];
  ep.seed = c.meta.value("seed", std::uint64_t{0});
  ep.target_index = c.meta.value("target_index", 0);
  ep.reference_index = c.meta.value("reference_index", 0);
  ep.degenerate = c.meta.value("degenerate", false);
  ep.expert_success = c.meta.value("expert_success", false);
  return ep;
}

}  // namespace oawam::sim
