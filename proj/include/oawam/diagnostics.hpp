#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "oawam/losses.hpp"
#include "oawam/policy.hpp"
#include "oawam/trainer.hpp"

namespace oawam::diag {

using oawam::ad::Mat;

// ---------------------------------------------------------------------------
// A2 swap-binding causal intervention
// ---------------------------------------------------------------------------

struct InterventionResult {
  double cosine = 0.0;         // per-step average (primary)
  double cosine_summed = 0.0;  // cosine of the summed residual (secondary)
  int target_col = -1;
  int donor_col = -1;
  bool degenerate = false;
  std::vector<Eigen::Vector2d> baseline_path;
  std::vector<Eigen::Vector2d> swapped_path;
  std::uint64_t baseline_hash = 0;
  std::uint64_t swapped_hash = 0;
};

// Residual = per-step EE displacement of the swapped rollout minus baseline;
// each step's residual is scored against the fixed unit vector from the
// initial EE position toward the donor object, then averaged. A residual
// trajectory with total norm < 1e-9 is defined as cosine 0.
template <typename RunFn, typename CacheT>
InterventionResult swap_binding_core(RunFn&& run, const CacheT& cache, int target_col,
                                     int donor_col, const Eigen::Vector2d& ee0,
                                     const Eigen::Vector2d& donor_pos) {
  InterventionResult res;
  res.target_col = target_col;
  res.donor_col = donor_col;

  CacheT swapped = cache;
  swapped.row(target_col).swap(swapped.row(donor_col));

  eval::RolloutResult base = run(cache);
  eval::RolloutResult swap = run(swapped);
  res.baseline_path = base.ee_path;
  res.swapped_path = swap.ee_path;
  res.baseline_hash = base.input_hash;
  res.swapped_hash = swap.input_hash;

  const Eigen::Vector2d dir = donor_pos - ee0;
  if (dir.norm() < 1e-12) {
    res.degenerate = true;
    return res;
  }
  const Eigen::Vector2d u = dir.normalized();

  const std::size_t n = std::min(base.ee_path.size(), swap.ee_path.size());
  double total_norm = 0.0, cos_acc = 0.0;
  int counted = 0;
  Eigen::Vector2d summed = Eigen::Vector2d::Zero();
  for (std::size_t t = 1; t < n; ++t) {
    const Eigen::Vector2d db = base.ee_path[t] - base.ee_path[t - 1];
    const Eigen::Vector2d ds = swap.ee_path[t] - swap.ee_path[t - 1];
    const Eigen::Vector2d r = ds - db;
    total_norm += r.norm();
    summed += r;
    if (r.norm() > 1e-12) {
      cos_acc += r.dot(u) / r.norm();
      ++counted;
    }
  }
  if (total_norm < 1e-9 || counted == 0) {
    res.degenerate = true;
    res.cosine = 0.0;
    res.cosine_summed = 0.0;
    return res;
  }
  res.cosine = cos_acc / counted;
  res.cosine_summed = summed.norm() > 1e-12 ? summed.dot(u) / summed.norm() : 0.0;
  return res;
}

// Default donor rule: the nearest other valid object slot to the target.
inline int nearest_donor(const sim::Scene& scene, int target_index) {
  int best = -1;
  double best_d = 1e18;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (static_cast<int>(i) == target_index) continue;
    const double d =
        (scene.objects[i].position -
         scene.objects[static_cast<std::size_t>(target_index)].position).norm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

template <typename S>
InterventionResult swap_binding(model::ModelParams<S>& mp, const Config& cfg,
                                const eval::EvalTask& task, int rollout_cap,
                                std::uint64_t sampler_seed) {
  if (task.start.objects.size() < 2) {
    throw ContractError("swap_binding: needs at least two objects");
  }
  const int donor_idx = nearest_donor(task.start, task.target_index);

  Mat<S> cache;
  {
    ad::Tape<S> tape;
    const auto slots0 = sim::slots_for_frame(task.start, task.instruction,
                                             task.target_index, task.reference_index,
                                             cfg.sim, nullptr, 0);
    cache = tape.value(model::compute_addr(tape, mp, slots0, task.instruction));
  }

  const int len = std::min(task.expert_len, rollout_cap);
  auto run = [&](const Mat<S>& c) {
    eval::RolloutOptions opt;
    opt.max_steps = len;
    opt.replan_every = cfg.eval.replan_every;
    opt.euler_steps = cfg.eval.euler_steps;
    opt.sampler_seed = sampler_seed;
    opt.stop_on_success = false;
    opt.addr_override = &c;
    return eval::rollout(mp, cfg, task, opt);
  };
  return swap_binding_core(run, cache, task.target_index + 1, donor_idx + 1,
                           task.start.robot.ee_position,
                           task.start.objects[static_cast<std::size_t>(donor_idx)].position);
}

// Hand-built validation policy: servoes toward whichever slot currently
// carries the (pre-swap) target address; no grasping, one action per step.
inline eval::RolloutResult oracle_servo_rollout(const Config& cfg,
                                                const eval::EvalTask& task,
                                                const Eigen::MatrixXd& cache,
                                                const Eigen::RowVectorXd& target_addr,
                                                int max_steps) {
  eval::RolloutResult res;
  sim::Scene world = task.start;
  res.ee_path.push_back(world.robot.ee_position);
  const int n_obj = static_cast<int>(world.objects.size());
  int best = 1;
  double best_d = 1e18;
  for (int c = 1; c <= n_obj; ++c) {
    const double d = (cache.row(c) - target_addr).norm();
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  for (int t = 0; t < max_steps; ++t) {
    const Eigen::Vector2d goal =
        world.objects[static_cast<std::size_t>(best - 1)].position;
    const Eigen::Vector2d delta = goal - world.robot.ee_position;
    const double d = delta.norm();
    Eigen::Vector2d move = delta;
    if (d > cfg.sim.action_step) move = delta * (cfg.sim.action_step / d);
    world = sim::step(world, {move.x(), move.y(), -1.0}, cfg.sim);
    res.ee_path.push_back(world.robot.ee_position);
    ++res.steps;
  }
  res.input_hash = 0;
  return res;
}

// ---------------------------------------------------------------------------
// Invariance metrics (Tab. A4 analogs)
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
Eigen::MatrixXd alpha_of(model::ModelParams<S>& mp, const data::Window& win) {
  ad::Tape<S> tape;
  model::ForwardOptions opt;
  opt.want_vq = false;
  auto fwd = model::forward(tape, mp, win, opt);
  return tape.value(fwd.alpha_steps).template cast<double>();
}

inline double rows_mean_kl(const Eigen::MatrixXd& p, const Eigen::MatrixXd& q) {
  double acc = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      const double pi = p(r, c);
      if (pi > 0.0) acc += pi * (std::log(pi) - std::log(std::max(q(r, c), 1e-30)));
    }
  }
  return acc / static_cast<double>(p.rows());
}

template <typename S>
Eigen::MatrixXd decode_chunk(model::ModelParams<S>& mp, const Config& cfg,
                             const data::Window& win, const Mat<S>& noise) {
  ad::Tape<S> tape;
  model::ForwardOptions opt;
  opt.want_vq = false;
  opt.want_role = false;
  auto fwd = model::forward(tape, mp, win, opt);
  ad::Var<S> chunk =
      model::euler_decode(tape, mp, fwd.cond, noise, cfg.eval.euler_steps);
  return tape.value(chunk).template cast<double>();
}

}  // namespace detail

// Mean KL between role attention under original and distractor-permuted
// inputs (permutation applied consistently, as in the compose loss).
template <typename S>
double permutation_kl(model::ModelParams<S>& mp, const Config& cfg, int episodes,
                      std::uint64_t seed) {
  double acc = 0.0;
  for (int e = 0; e < episodes; ++e) {
    const auto ep = sim::generate_episode(
        cfg.sim, Rng::splitmix(seed ^ (0xabcdull * (e + 1))));
    const int pivot = static_cast<int>(ep.actions.size()) / 2;
    const data::Window win = data::build_training_window(ep, pivot, cfg);
    Rng rng(seed, "perm_kl");
    Rng erng = rng.child("episode", static_cast<std::uint64_t>(e));
    const auto perm = data::sample_distractor_permutation(win, erng);
    bool nontrivial = false;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      nontrivial = nontrivial || perm[i] != static_cast<int>(i);
    }
    if (!nontrivial) continue;  // < 2 distractors contributes 0
    const auto p = detail::alpha_of(mp, win);
    const auto q = detail::alpha_of(mp, data::permute_window(win, perm));
    acc += detail::rows_mean_kl(p, q);
  }
  return acc / episodes;
}

// Mean L2 between decoded chunks before/after grafting a donor distractor,
// normalized by the mean chunk norm.
template <typename S>
double insertion_drift(model::ModelParams<S>& mp, const Config& cfg, int episodes,
                       std::uint64_t seed) {
  double drift = 0.0, norm = 0.0;
  int counted = 0;
  for (int e = 0; e < episodes; ++e) {
    const auto ep = sim::generate_episode(
        cfg.sim, Rng::splitmix(seed ^ (0xbeefull * (e + 1))));
    const auto donor_ep = sim::generate_episode(
        cfg.sim, Rng::splitmix(seed ^ (0xfeedull * (e + 1))));
    const int pivot = static_cast<int>(ep.actions.size()) / 2;
    data::Window win = data::build_training_window(ep, pivot, cfg);

    Rng rng = Rng(seed, "ins_drift").child("episode", static_cast<std::uint64_t>(e));
    const auto donor = data::pick_donor(donor_ep, cfg, rng);
    if (!donor.has_value()) continue;
    data::Window aug = win;
    if (!data::insert_window(aug, *donor)) continue;

    Mat<S> noise(1, cfg.model.chunk * cfg.model.act_dim);
    Rng nrng = rng.child("noise");
    for (Eigen::Index i = 0; i < noise.size(); ++i) {
      noise.data()[i] = static_cast<S>(nrng.normal());
    }
    const auto a = detail::decode_chunk(mp, cfg, win, noise);
    const auto b = detail::decode_chunk(mp, cfg, aug, noise);
    drift += (a - b).norm();
    norm += a.norm();
    ++counted;
  }
  if (counted == 0 || norm <= 0.0) return 0.0;
  return (drift / counted) / (norm / counted);
}

// Mean role-attention mass on the ground-truth target slot.
template <typename S>
double target_attention(model::ModelParams<S>& mp, const Config& cfg, int episodes,
                        std::uint64_t seed) {
  double acc = 0.0;
  for (int e = 0; e < episodes; ++e) {
    const auto ep = sim::generate_episode(
        cfg.sim, Rng::splitmix(seed ^ (0x7a47ull * (e + 1))));
    const int pivot = static_cast<int>(ep.actions.size()) / 2;
    const data::Window win = data::build_training_window(ep, pivot, cfg);
    const auto alpha = detail::alpha_of(mp, win);
    acc += alpha.col(win.target_col).mean();
  }
  return acc / episodes;
}

// ---------------------------------------------------------------------------
// Routing-capacity check
// ---------------------------------------------------------------------------

struct CapacityReport {
  int max_active = 0;
  double mean_active = 0.0;
  int addr_dim = 0;
  int capacity_proxy = 0;  // 2*A mutually separable directions (conservative)
  double utilization = 0.0;
};

inline CapacityReport routing_capacity(const data::Dataset& ds, int addr_dim) {
  CapacityReport rep;
  rep.addr_dim = addr_dim;
  rep.capacity_proxy = 2 * addr_dim;
  std::int64_t frames = 0, total = 0;
  for (const auto& ep : ds.episodes) {
    const int active = static_cast<int>(ep.frames.front().objects.size()) + 1;
    for (std::size_t t = 0; t < ep.frames.size(); ++t) {
      rep.max_active = std::max(rep.max_active, active);
      total += active;
      ++frames;
    }
  }
  rep.mean_active = frames > 0 ? static_cast<double>(total) / frames : 0.0;
  rep.utilization = static_cast<double>(rep.max_active) / rep.capacity_proxy;
  return rep;
}

// ---------------------------------------------------------------------------
// Robustness sweep and the A1 factorial
// ---------------------------------------------------------------------------

struct SweepPoint {
  double strength = 0.0;
  double success = 0.0;
};

template <typename S>
std::vector<SweepPoint> robustness_sweep(model::ModelParams<S>& mp, const Config& cfg,
                                         sim::PerturbAxis axis,
                                         const std::vector<double>& strengths,
                                         int episodes, std::uint64_t seed) {
  std::vector<SweepPoint> out;
  for (const double s : strengths) {
    std::optional<sim::PerturbationSpec> p;
    if (s > 0.0) p = sim::PerturbationSpec{axis, s, seed};
    out.push_back({s, eval::success_rate(mp, cfg, p, episodes, seed)});
  }
  return out;
}

struct AblationReport {
  std::vector<std::string> variants;
  std::vector<std::string> metrics;
  // values[variant][metric] = per-seed list
  std::map<std::string, std::map<std::string, std::vector<double>>> values;

  double mean(const std::string& v, const std::string& m) const {
    const auto& xs = values.at(v).at(m);
    double s = 0.0;
    for (const double x : xs) s += x;
    return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
  }
  double vmin(const std::string& v, const std::string& m) const {
    const auto& xs = values.at(v).at(m);
    return *std::min_element(xs.begin(), xs.end());
  }
  double vmax(const std::string& v, const std::string& m) const {
    const auto& xs = values.at(v).at(m);
    return *std::max_element(xs.begin(), xs.end());
  }
  // Super-additivity of the two OA switches on a metric:
  // (V0-V2) - [(V0-V3) + (V0-V1)].
  double interaction(const std::string& m) const {
    const double v0 = mean("v0", m), v1 = mean("v1", m), v2 = mean("v2", m),
                 v3 = mean("v3", m);
    return (v0 - v2) - ((v0 - v3) + (v0 - v1));
  }

  nlohmann::json json() const {
    nlohmann::json j;
    j["variants"] = variants;
    j["metrics"] = metrics;
    j["values"] = values;
    nlohmann::json inter;
    for (const auto& m : metrics) inter[m] = interaction(m);
    j["interaction"] = inter;
    return j;
  }
  static AblationReport from_json(const nlohmann::json& j) {
    AblationReport r;
    r.variants = j.at("variants").get<std::vector<std::string>>();
    r.metrics = j.at("metrics").get<std::vector<std::string>>();
    r.values = j.at("values")
                   .get<std::map<std::string, std::map<std::string, std::vector<double>>>>();
    return r;
  }
};

struct VariantEval {
  double in_dist = 0.0;
  double camera_shift = 0.0;
  double swap_binding = 0.0;
  double perm_kl = 0.0;
  double ins_drift = 0.0;
  double target_attn = 0.0;
};

template <typename S>
VariantEval evaluate_policy(model::ModelParams<S>& mp, const Config& cfg) {
  VariantEval ev;
  const std::uint64_t seed = cfg.eval.seed;
  ev.in_dist = eval::success_rate(mp, cfg, std::nullopt, cfg.eval.episodes, seed);
  const double max_strength = cfg.diagnostics.strengths.back();
  ev.camera_shift = eval::success_rate(
      mp, cfg,
      sim::PerturbationSpec{sim::PerturbAxis::CameraShift, max_strength, seed},
      cfg.eval.episodes, seed);
  double cosines = 0.0;
  int counted = 0;
  for (int e = 0; e < cfg.diagnostics.intervention_episodes; ++e) {
    const auto task =
        eval::make_task(cfg, Rng::splitmix(seed ^ (0x5eedull * (e + 1))));
    if (task.start.objects.size() < 2) continue;
    const auto res = swap_binding(mp, cfg, task, cfg.diagnostics.intervention_rollout,
                                  Rng::splitmix(task.seed ^ 0x77ull));
    cosines += res.cosine;
    ++counted;
  }
  ev.swap_binding = counted > 0 ? cosines / counted : 0.0;
  ev.perm_kl = permutation_kl(mp, cfg, cfg.diagnostics.intervention_episodes, seed + 3);
  ev.ins_drift = insertion_drift(mp, cfg, cfg.diagnostics.intervention_episodes, seed + 5);
  ev.target_attn = target_attention(mp, cfg, cfg.diagnostics.intervention_episodes,
                                    seed + 7);
  return ev;
}

// Trains (or reloads) every (variant, seed) cell and evaluates the factorial.
// Checkpoints land under out_dir as ckpt_<variant>_s<seed>.oaw; with
// reuse_cache the report is reproducible without retraining.
inline AblationReport run_ablation_matrix(
    const Config& base_cfg, const std::string& out_dir, int seeds, bool reuse_cache,
    const std::function<void(const std::string&)>& log = {}) {
  AblationReport rep;
  rep.variants = {"v0", "v1", "v2", "v3"};
  rep.metrics = {"in_dist",  "camera_shift", "swap_binding",
                 "perm_kl",  "ins_drift",    "target_attn"};
  std::filesystem::create_directories(out_dir);

  for (const auto& variant : rep.variants) {
    for (int s = 0; s < seeds; ++s) {
      Config cfg = base_cfg;
      apply_variant(cfg, variant);
      cfg.tree["train"]["seed"] = base_cfg.train.seed + static_cast<std::uint64_t>(s);
      cfg.train.seed = base_cfg.train.seed + static_cast<std::uint64_t>(s);

      const std::string ckpt =
          out_dir + "/ckpt_" + variant + "_s" + std::to_string(s) + ".oaw";
      auto mp = model::ModelParams<float>::build(cfg, cfg.train.seed);
      if (reuse_cache && std::filesystem::exists(ckpt)) {
        if (log) log("reusing " + ckpt);
        mp.load(ckpt, cfg.eval.use_ema);
      } else {
        if (log) log("training " + variant + " seed " + std::to_string(s));
        data::Dataset ds = data::Dataset::generate(
            cfg, cfg.train.episodes, Rng(cfg.train.seed, "data").next_u64());
        train::Trainer<float> trainer(cfg, std::move(ds));
        train::run_training(trainer);
        trainer.save_checkpoint(ckpt, cfg.train.total_steps);
        mp.load(ckpt, cfg.eval.use_ema);
      }
      const VariantEval ev = evaluate_policy(mp, cfg);
      rep.values[variant]["in_dist"].push_back(ev.in_dist);
      rep.values[variant]["camera_shift"].push_back(ev.camera_shift);
      rep.values[variant]["swap_binding"].push_back(ev.swap_binding);
      rep.values[variant]["perm_kl"].push_back(ev.perm_kl);
      rep.values[variant]["ins_drift"].push_back(ev.ins_drift);
      rep.values[variant]["target_attn"].push_back(ev.target_attn);
      if (log) {
        log(variant + " seed " + std::to_string(s) +
            ": in_dist=" + std::to_string(ev.in_dist) +
            " camera=" + std::to_string(ev.camera_shift) +
            " swap=" + std::to_string(ev.swap_binding));
      }
    }
  }
  return rep;
}

}  // namespace oawam::diag
