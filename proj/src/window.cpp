#include "oawam/window.hpp"

#include <algorithm>
#include <cmath>

#include "oawam/errors.hpp"

namespace oawam::data {

namespace {
constexpr double kPi = 3.14159265358979323846;

double wrap_angle(double a) {
  while (a > kPi) a -= 2.0 * kPi;
  while (a <= -kPi) a += 2.0 * kPi;
  return a;
}

double slot_theta(const sim::RawSlot& s) { return std::atan2(s.pose[3], s.pose[2]); }
}  // namespace

Eigen::MatrixXd geometry_tensor(const std::vector<sim::RawSlot>& slots, int n_max) {
  const int n = n_max + 1;
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n * n, 3);
  for (int i = 0; i < n; ++i) {
    if (slots[static_cast<std::size_t>(i)].role == sim::SlotRole::Padding) continue;
    for (int j = 0; j < n; ++j) {
      if (slots[static_cast<std::size_t>(j)].role == sim::SlotRole::Padding) continue;
      const auto& si = slots[static_cast<std::size_t>(i)];
      const auto& sj = slots[static_cast<std::size_t>(j)];
      g(i * n + j, 0) = sj.pose[0] - si.pose[0];
      g(i * n + j, 1) = sj.pose[1] - si.pose[1];
      g(i * n + j, 2) = wrap_angle(slot_theta(sj) - slot_theta(si));
    }
  }
  return g;
}

namespace {

std::vector<std::uint8_t> valid_mask(const std::vector<sim::RawSlot>& slots) {
  std::vector<std::uint8_t> m(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    m[i] = slots[i].role != sim::SlotRole::Padding ? 1 : 0;
  }
  return m;
}

}  // namespace

Window build_observation_window(const std::vector<sim::Scene>& frames,
                                const std::vector<std::array<double, 3>>& actions,
                                const sim::Instruction& instr, int target_idx,
                                int ref_idx, const Config& cfg,
                                const sim::PerturbationSpec* feature_noise) {
  if (frames.empty()) throw ContractError("window: empty frame history");
  const int T = cfg.model.frames;
  const int pivot = static_cast<int>(frames.size()) - 1;

  Window win;
  win.instruction = instr;
  win.target_col = target_idx + 1;
  win.ref_col = ref_idx + 1;

  // Left-pad with the initial frame when the history is shorter than T.
  std::vector<int> frame_idx(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    frame_idx[static_cast<std::size_t>(t)] = std::max(0, pivot - (T - 1) + t);
  }

  win.frame_slots.reserve(static_cast<std::size_t>(T));
  win.tokens.vq_codes.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    const int fi = frame_idx[static_cast<std::size_t>(t)];
    const auto& scene = frames[static_cast<std::size_t>(fi)];
    win.frame_slots.push_back(sim::slots_for_frame(scene, instr, target_idx, ref_idx,
                                                   cfg.sim, feature_noise, fi));
    win.tokens.vq_codes[static_cast<std::size_t>(t)] =
        sim::render_codes(scene, cfg.sim.grid_size, cfg.sim.codebook, cfg.sim);
    win.geom.push_back(geometry_tensor(win.frame_slots.back(), cfg.sim.n_max));
    win.tokens.valid_slot.push_back(valid_mask(win.frame_slots.back()));
  }
  win.addr_source = sim::slots_for_frame(frames.front(), instr, target_idx, ref_idx,
                                         cfg.sim, feature_noise, 0);
  win.n_valid = 0;
  for (const auto v : win.tokens.valid_slot.back()) win.n_valid += v;

  // Current proprioception (pivot frame).
  const auto& robot = frames.back().robot;
  win.tokens.state_bins = {
      seq::quantize(robot.ee_position.x(), cfg.model.state_bins, -1.0, 1.0),
      seq::quantize(robot.ee_position.y(), cfg.model.state_bins, -1.0, 1.0),
      seq::quantize(robot.ee_angle, cfg.model.state_bins, -kPi, kPi),
      seq::quantize(robot.gripper, cfg.model.state_bins, -1.0, 1.0)};

  // Past actions for window frames t < T-1; zero action in the padded region.
  win.tokens.past_actions.resize(static_cast<std::size_t>(T - 1));
  for (int t = 0; t + 1 < T; ++t) {
    const int a = frame_idx[static_cast<std::size_t>(t)];
    const int b = frame_idx[static_cast<std::size_t>(t + 1)];
    std::array<double, 3> act{0.0, 0.0, 0.0};
    if (b > a) act = actions[static_cast<std::size_t>(b - 1)];
    auto& bins = win.tokens.past_actions[static_cast<std::size_t>(t)];
    for (int d = 0; d < cfg.model.act_dim; ++d) {
      bins.push_back(seq::quantize(act[static_cast<std::size_t>(d)],
                                   cfg.model.action_bins, -1.0, 1.0));
    }
  }

  win.tokens.instruction = {instr.verb_id, instr.target_label, instr.reference_label};
  return win;
}

Window build_training_window(const sim::EpisodeRecord& ep, int pivot, const Config& cfg) {
  const int n_actions = static_cast<int>(ep.actions.size());
  if (pivot < 0 || pivot >= n_actions) {
    throw ContractError("window: pivot must leave at least one future action");
  }
  std::vector<sim::Scene> history(ep.frames.begin(),
                                  ep.frames.begin() + pivot + 1);
  std::vector<std::array<double, 3>> past(ep.actions.begin(),
                                          ep.actions.begin() + pivot);
  const sim::PerturbationSpec* noise = nullptr;
  if (ep.perturbation && ep.perturbation->axis == sim::PerturbAxis::FeatureNoise) {
    noise = &*ep.perturbation;
  }
  Window win = build_observation_window(history, past, ep.instruction, ep.target_index,
                                        ep.reference_index, cfg, noise);

  // Action chunk, right-padded with the terminal action.
  const int H = cfg.model.chunk;
  win.chunk_target.resize(H, cfg.model.act_dim);
  for (int h = 0; h < H; ++h) {
    const int idx = std::min(pivot + h, n_actions - 1);
    for (int d = 0; d < cfg.model.act_dim; ++d) {
      win.chunk_target(h, d) = ep.actions[static_cast<std::size_t>(idx)]
                                         [static_cast<std::size_t>(d)];
    }
  }

  win.next_slots = sim::slots_for_frame(ep.frames[static_cast<std::size_t>(pivot + 1)],
                                        ep.instruction, ep.target_index,
                                        ep.reference_index, cfg.sim, noise, pivot + 1);
  win.next_valid_obj.assign(win.next_slots.size(), 0);
  for (std::size_t i = 0; i < win.next_slots.size(); ++i) {
    win.next_valid_obj[i] = win.next_slots[i].role == sim::SlotRole::Object ? 1 : 0;
  }
  win.has_supervision = true;
  return win;
}

std::vector<int> sample_distractor_permutation(const Window& win, Rng& rng) {
  const int n = static_cast<int>(win.frame_slots.back().size());
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;

  std::vector<int> distractors;
  for (int c = 1; c < n; ++c) {
    const auto& slot = win.frame_slots.back()[static_cast<std::size_t>(c)];
    if (slot.role == sim::SlotRole::Object && c != win.target_col && c != win.ref_col) {
      distractors.push_back(c);
    }
  }
  if (distractors.size() < 2) return perm;

  std::vector<int> shuffled = distractors;
  rng.shuffle(shuffled.begin(), shuffled.end());
  for (std::size_t i = 0; i < distractors.size(); ++i) {
    perm[static_cast<std::size_t>(distractors[i])] = shuffled[i];
  }
  return perm;
}

Window permute_window(const Window& win, const std::vector<int>& perm) {
  // perm[new_col] = old_col over slot columns; robot/target/ref stay fixed.
  Window out = win;
  const int n = static_cast<int>(perm.size());
  const int nn = n;
  for (std::size_t t = 0; t < win.frame_slots.size(); ++t) {
    for (int c = 0; c < n; ++c) {
      out.frame_slots[t][static_cast<std::size_t>(c)] =
          win.frame_slots[t][static_cast<std::size_t>(perm[static_cast<std::size_t>(c)])];
    }
    for (int i = 0; i < nn; ++i) {
      for (int j = 0; j < nn; ++j) {
        out.geom[t].row(i * nn + j) =
            win.geom[t].row(perm[static_cast<std::size_t>(i)] * nn +
                            perm[static_cast<std::size_t>(j)]);
      }
    }
    for (int c = 0; c < n; ++c) {
      out.tokens.valid_slot[t][static_cast<std::size_t>(c)] =
          win.tokens.valid_slot[t][static_cast<std::size_t>(perm[static_cast<std::size_t>(c)])];
    }
  }
  for (int c = 0; c < n; ++c) {
    out.addr_source[static_cast<std::size_t>(c)] =
        win.addr_source[static_cast<std::size_t>(perm[static_cast<std::size_t>(c)])];
  }
  if (win.has_supervision) {
    for (int c = 0; c < n; ++c) {
      out.next_slots[static_cast<std::size_t>(c)] =
          win.next_slots[static_cast<std::size_t>(perm[static_cast<std::size_t>(c)])];
      out.next_valid_obj[static_cast<std::size_t>(c)] =
          win.next_valid_obj[static_cast<std::size_t>(perm[static_cast<std::size_t>(c)])];
    }
  }
  return out;
}

bool insert_window(Window& win, const sim::RawSlot& donor) {
  const int n = static_cast<int>(win.frame_slots.back().size());
  int col = -1;
  for (int c = 0; c < n; ++c) {
    if (win.frame_slots.back()[static_cast<std::size_t>(c)].role ==
        sim::SlotRole::Padding) {
      col = c;
      break;
    }
  }
  if (col < 0) return false;

  sim::RawSlot grafted = donor;
  grafted.role = sim::SlotRole::Object;
  grafted.instr_role = sim::InstrRole::Other;
  for (std::size_t t = 0; t < win.frame_slots.size(); ++t) {
    win.frame_slots[t][static_cast<std::size_t>(col)] = grafted;
    win.tokens.valid_slot[t][static_cast<std::size_t>(col)] = 1;
    win.geom[t] = geometry_tensor(win.frame_slots[t], n - 1);
  }
  win.addr_source[static_cast<std::size_t>(col)] = grafted;
  if (win.has_supervision) {
    win.next_slots[static_cast<std::size_t>(col)] = grafted;  // distractors are static
    win.next_valid_obj[static_cast<std::size_t>(col)] = 1;
  }
  win.n_valid += 1;
  return true;
}

std::optional<sim::RawSlot> pick_donor(const sim::EpisodeRecord& ep, const Config& cfg,
                                       Rng& rng) {
  const auto slots =
      sim::slots_for_frame(ep.frames.front(), ep.instruction, ep.target_index,
                           ep.reference_index, cfg.sim, nullptr, 0);
  std::vector<int> candidates;
  for (std::size_t i = 1; i < slots.size(); ++i) {
    if (slots[i].role == sim::SlotRole::Object &&
        slots[i].instr_role == sim::InstrRole::Other) {
      candidates.push_back(static_cast<int>(i));
    }
  }
  if (candidates.empty()) return std::nullopt;
  return slots[static_cast<std::size_t>(
      candidates[static_cast<std::size_t>(rng.below_int(static_cast<int>(candidates.size())))])];
}

Dataset Dataset::generate(const Config& cfg, int count, std::uint64_t data_seed) {
  Dataset ds;
  ds.episodes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t seed =
        Rng::splitmix(data_seed ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(i + 1)));
    ds.episodes.push_back(sim::generate_episode(cfg.sim, seed));
  }
  return ds;
}

const sim::EpisodeRecord& Dataset::sample(Rng& rng, int& pivot_out) const {
  const auto& ep =
      episodes[static_cast<std::size_t>(rng.below_int(static_cast<int>(episodes.size())))];
  pivot_out = rng.below_int(static_cast<int>(ep.actions.size()));
  return ep;
}

}  // namespace oawam::data
