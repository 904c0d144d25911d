#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "oawam/model.hpp"

namespace oawam::losses {

using oawam::ad::Mat;
using oawam::ad::Tape;
using oawam::ad::Var;

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

// Linear warm-up of the compose weight over the first ramp fraction.
inline double lambda_compose_at(int step, const TrainConfig& tc) {
  const double ramp = tc.compose_ramp_frac * tc.total_steps;
  if (ramp <= 0.0) return tc.lambda_compose;
  const double f = std::min(1.0, static_cast<double>(step) / ramp);
  return tc.lambda_compose * f;
}

// Constant role weight, cut to zero after the configured fraction.
inline double lambda_role_at(int step, const TrainConfig& tc) {
  return static_cast<double>(step) < tc.role_cutoff_frac * tc.total_steps
             ? tc.lambda_role
             : 0.0;
}

// ---------------------------------------------------------------------------
// Pose normalization
// ---------------------------------------------------------------------------

struct NormalizedPose {
  Eigen::Vector4d value;  // (x, y, cos, sin)
  bool clamped = false;
};

inline NormalizedPose normalize_pose(double x, double y, double theta,
                                     double half_extent) {
  NormalizedPose out;
  double nx = x / half_extent;
  double ny = y / half_extent;
  if (nx < -1.0 || nx > 1.0 || ny < -1.0 || ny > 1.0) {
    out.clamped = true;
    nx = std::min(1.0, std::max(-1.0, nx));
    ny = std::min(1.0, std::max(-1.0, ny));
  }
  out.value << nx, ny, std::cos(theta), std::sin(theta);
  return out;
}

inline void denormalize_pose(const Eigen::Vector4d& pose, double half_extent,
                             double& x, double& y, double& theta) {
  x = pose[0] * half_extent;
  y = pose[1] * half_extent;
  theta = std::atan2(pose[3], pose[2]);
}

// ---------------------------------------------------------------------------
// Individual objectives
// ---------------------------------------------------------------------------

// Masked mean over valid object slots of ||cnt_err||^2 + lambda_p*||pose_err||^2.
// The robot slot never reaches this function (the forward gathers objects only).
template <typename S>
Var<S> world_loss(Tape<S>& tape, Var<S> cnt_pred, Var<S> pose_pred,
                  const Mat<S>& cnt_target, const Mat<S>& pose_target, double lambda_p,
                  bool* zero_slots_warn = nullptr) {
  const Eigen::Index n = tape.value(cnt_pred).rows();
  if (n == 0) {
    if (zero_slots_warn != nullptr) *zero_slots_warn = true;
    return tape.constant(Mat<S>::Zero(1, 1));
  }
  Var<S> dc = ad::sub(cnt_pred, tape.constant(cnt_target));
  Var<S> dp = ad::sub(pose_pred, tape.constant(pose_target));
  Var<S> sc = ad::sum_all(ad::cmul(dc, dc));
  Var<S> sp = ad::sum_all(ad::cmul(dp, dp));
  return ad::scale(ad::add(sc, ad::scale(sp, static_cast<S>(lambda_p))),
                   S(1) / static_cast<S>(n));
}

// World-head targets for a training window: next-frame content (a detached
// f_cnt pass over ground-truth slots) and next-frame normalized pose, in the
// forward's world_cols order.
template <typename S>
void world_targets(Tape<S>& tape, model::ModelParams<S>& mp, const data::Window& win,
                   const std::vector<int>& world_cols, Mat<S>& cnt_target,
                   Mat<S>& pose_target) {
  Var<S> cnt_next = model::compute_content(tape, mp, win.next_slots, win.instruction);
  const Mat<S> cnt_all = tape.value(cnt_next);  // detached: targets carry no grad
  cnt_target.resize(static_cast<Eigen::Index>(world_cols.size()), mp.cfg.cnt_dim);
  pose_target.resize(static_cast<Eigen::Index>(world_cols.size()), mp.cfg.pose_dim);
  for (std::size_t r = 0; r < world_cols.size(); ++r) {
    const int c = world_cols[r];
    cnt_target.row(static_cast<Eigen::Index>(r)) = cnt_all.row(c);
    const auto& pose = win.next_slots[static_cast<std::size_t>(c)].pose;
    for (int j = 0; j < mp.cfg.pose_dim; ++j) {
      pose_target(static_cast<Eigen::Index>(r), j) = static_cast<S>(pose[j]);
    }
  }
}

// Conditional flow matching: v_xi(A_tau, tau, c) regresses (A - eps),
// with A_tau = tau*A + (1-tau)*eps; mean squared error over all entries.
template <typename S>
Var<S> flow_matching_loss(Tape<S>& tape, model::ModelParams<S>& mp, Var<S> cond,
                          const Eigen::MatrixXd& chunk, double tau,
                          const Eigen::MatrixXd& eps) {
  const Eigen::Index flat = chunk.size();
  Mat<S> a_tau(1, flat), target(1, flat);
  for (Eigen::Index h = 0; h < chunk.rows(); ++h) {
    for (Eigen::Index d = 0; d < chunk.cols(); ++d) {
      const Eigen::Index c = h * chunk.cols() + d;
      a_tau(0, c) = static_cast<S>(tau * chunk(h, d) + (1.0 - tau) * eps(h, d));
      target(0, c) = static_cast<S>(chunk(h, d) - eps(h, d));
    }
  }
  Var<S> v = model::flow_velocity(tape, mp, tape.constant(a_tau), tau, cond);
  Var<S> d = ad::sub(v, tape.constant(target));
  return ad::mean_all(ad::cmul(d, d));
}

// Weighted next-frame code cross-entropy; weight depends on the target id
// range (the VQ block gets `vq_token_weight`, everything else 1).
template <typename S>
Var<S> vq_loss(Tape<S>& tape, Var<S> logits, const std::vector<int>& targets,
               const seq::Vocab& vocab, double vq_token_weight) {
  auto ids = std::make_shared<const std::vector<int>>(targets);
  std::vector<S> w(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const bool in_vq = targets[i] >= vocab.vq_base() && targets[i] < vocab.size();
    w[i] = static_cast<S>(in_vq ? vq_token_weight : 1.0);
  }
  return ad::cross_entropy_rows(logits, ids,
                                std::make_shared<const std::vector<S>>(std::move(w)));
}

// KL(onehot || alpha_row): -log(alpha[row, col]).
template <typename S>
Var<S> onehot_kl(Tape<S>& tape, Var<S> alpha, int row, int col) {
  (void)tape;
  return ad::scale(ad::log_guard(ad::entry(alpha, row, col), S(1e-30)), S(-1));
}

// Role hint: rows 0 and 1 of the per-step assignment against the target and
// reference one-hots (the cutoff schedule is applied by the total).
template <typename S>
Var<S> role_loss(Tape<S>& tape, Var<S> alpha_steps, int target_col, int ref_col) {
  return ad::add(onehot_kl(tape, alpha_steps, 0, target_col),
                 onehot_kl(tape, alpha_steps, 1, ref_col));
}

// Mean over rows of KL(P || Q) for a detached reference distribution P.
template <typename S>
Var<S> distribution_kl(Tape<S>& tape, const Mat<S>& p, Var<S> q) {
  double entropy = 0.0;  // sum P log P, with 0 log 0 = 0
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double pi = static_cast<double>(p.data()[i]);
    if (pi > 0.0) entropy += pi * std::log(pi);
  }
  auto w = std::make_shared<const Mat<S>>(p);
  Var<S> cross = ad::inner_const(ad::log_guard(q, S(1e-30)), w);
  Var<S> kl = ad::sub(tape.constant(Mat<S>::Constant(1, 1, static_cast<S>(entropy))),
                      cross);
  return ad::scale(kl, S(1) / static_cast<S>(p.rows()));
}

// ---------------------------------------------------------------------------
// Total objective
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double act = 0, world = 0, vq = 0, compose = 0, role = 0, total = 0;
  double lambda_c = 0, lambda_r = 0;
  double compose_kl = 0, compose_l2 = 0;
  bool world_warn = false;
  bool compose_applied = false;

  nlohmann::json json() const {
    return {{"act", act},          {"world", world},
            {"vq", vq},            {"compose", compose},
            {"role", role},        {"total", total},
            {"lambda_c", lambda_c},{"lambda_r", lambda_r}};
  }
};

// Per-item stochastic draws, sampled once so the same noise drives the
// original and the augmented pass (and so gradcheck can re-evaluate the
// objective as a deterministic function of the parameters).
struct LossDraw {
  double tau = 0.5;
  Eigen::MatrixXd eps;           // H x act_dim
  Eigen::MatrixXd decode_noise;  // 1 x H*act_dim, for the compose decode
  std::vector<int> perm;         // identity when no permutation applies
  bool try_insertion = false;
  std::optional<sim::RawSlot> donor;

  static LossDraw sample(const data::Window& win, const model::ModelConfig& mc,
                         Rng& rng, bool compose_active, Rng* donor_rng,
                         const data::Dataset* donor_pool, const Config* cfg) {
    LossDraw d;
    d.tau = rng.uniform();
    d.eps.resize(mc.chunk, mc.act_dim);
    for (Eigen::Index i = 0; i < d.eps.size(); ++i) d.eps.data()[i] = rng.normal();
    d.decode_noise.resize(1, mc.chunk * mc.act_dim);
    for (Eigen::Index i = 0; i < d.decode_noise.size(); ++i) {
      d.decode_noise.data()[i] = rng.normal();
    }
    if (compose_active) {
      // Alternate the two augmentations; each item draws one of them.
      d.try_insertion = rng.below(2) == 1;
      if (d.try_insertion && donor_pool != nullptr && donor_rng != nullptr) {
        int pivot = 0;
        const auto& ep = donor_pool->sample(*donor_rng, pivot);
        d.donor = data::pick_donor(ep, *cfg, *donor_rng);
      }
      if (!d.try_insertion) {
        d.perm = data::sample_distractor_permutation(win, rng);
      }
    }
    return d;
  }
};

template <typename S>
struct ItemLoss {
  Var<S> total;
  LossBreakdown bd;
};

// Detached targets recorded at a parameter point. Training recomputes them
// every step; the gradcheck harness pins them so that the objective it
// differences is exactly the function the analytic gradient differentiates.
template <typename S>
struct FrozenTargets {
  bool valid = false;
  Mat<S> cnt_target, pose_target;
  Mat<S> alpha_orig, chunk_orig;
};

// Assembles Eq.-style total = act + lw*world + lv*vq + lc(step)*compose
// + lr(step)*role for one training window.
template <typename S>
ItemLoss<S> item_loss(Tape<S>& tape, model::ModelParams<S>& mp, const data::Window& win,
                      const LossDraw& draw, int step, const TrainConfig& tc,
                      int euler_steps, int a_eff,
                      const FrozenTargets<S>* frozen = nullptr,
                      FrozenTargets<S>* record = nullptr) {
  if (!win.has_supervision) {
    throw ContractError("item_loss: window carries no supervision targets");
  }
  ItemLoss<S> out;
  out.bd.lambda_c = lambda_compose_at(step, tc);
  out.bd.lambda_r = lambda_role_at(step, tc);

  model::ForwardOptions opt;
  opt.a_eff = a_eff;
  auto fwd = model::forward(tape, mp, win, opt);

  Var<S> act = flow_matching_loss(tape, mp, fwd.cond, win.chunk_target, draw.tau,
                                  draw.eps);

  Mat<S> cnt_t, pose_t;
  if (frozen != nullptr && frozen->valid) {
    cnt_t = frozen->cnt_target;
    pose_t = frozen->pose_target;
  } else {
    world_targets(tape, mp, win, fwd.world_cols, cnt_t, pose_t);
  }
  if (record != nullptr) {
    record->cnt_target = cnt_t;
    record->pose_target = pose_t;
  }
  Var<S> world = world_loss(tape, fwd.world_cnt, fwd.world_pose, cnt_t, pose_t,
                            tc.lambda_pose, &out.bd.world_warn);

  Var<S> vq = fwd.vq_targets.empty()
                  ? tape.constant(Mat<S>::Zero(1, 1))
                  : vq_loss(tape, fwd.vq_logits, fwd.vq_targets, mp.vocab,
                            tc.vq_token_weight);

  Var<S> role = role_loss(tape, fwd.alpha_steps, win.target_col, win.ref_col);

  // Compose: invariance of role attention and decoded actions under
  // distractor permutation / insertion, originals detached.
  Var<S> compose = tape.constant(Mat<S>::Zero(1, 1));
  if (out.bd.lambda_c > 0.0) {
    bool have_aug = false;
    data::Window aug;
    if (draw.try_insertion) {
      if (draw.donor.has_value()) {
        aug = win;
        have_aug = data::insert_window(aug, *draw.donor);
      }
    } else if (!draw.perm.empty()) {
      bool nontrivial = false;
      for (std::size_t i = 0; i < draw.perm.size(); ++i) {
        nontrivial = nontrivial || draw.perm[i] != static_cast<int>(i);
      }
      // The identity permutation still exercises the loss (it must be 0).
      aug = data::permute_window(win, draw.perm);
      have_aug = true;
      (void)nontrivial;
    }
    if (have_aug) {
      const Mat<S> noise = draw.decode_noise.template cast<S>();
      Mat<S> alpha_orig, chunk_orig;
      if (frozen != nullptr && frozen->valid) {
        alpha_orig = frozen->alpha_orig;
        chunk_orig = frozen->chunk_orig;
      } else {
        Var<S> dec_orig = model::euler_decode(tape, mp, fwd.cond, noise, euler_steps);
        alpha_orig = tape.value(fwd.alpha_steps);
        chunk_orig = tape.value(dec_orig);
      }
      if (record != nullptr) {
        record->alpha_orig = alpha_orig;
        record->chunk_orig = chunk_orig;
      }

      model::ForwardOptions aug_opt;
      aug_opt.a_eff = a_eff;
      aug_opt.want_vq = false;
      auto fwd_aug = model::forward(tape, mp, aug, aug_opt);
      Var<S> dec_aug = model::euler_decode(tape, mp, fwd_aug.cond, noise, euler_steps);

      Var<S> kl = distribution_kl(tape, alpha_orig, fwd_aug.alpha_steps);
      Var<S> d = ad::sub(dec_aug, tape.constant(chunk_orig));
      Var<S> l2 = ad::mean_all(ad::cmul(d, d));
      compose = ad::add(kl, l2);
      out.bd.compose_kl = static_cast<double>(tape.value(kl)(0, 0));
      out.bd.compose_l2 = static_cast<double>(tape.value(l2)(0, 0));
      out.bd.compose_applied = true;
    }
  }
  if (record != nullptr) record->valid = true;

  Var<S> total = act;
  total = ad::add(total, ad::scale(world, static_cast<S>(tc.lambda_world)));
  total = ad::add(total, ad::scale(vq, static_cast<S>(tc.lambda_vq)));
  total = ad::add(total, ad::scale(compose, static_cast<S>(out.bd.lambda_c)));
  total = ad::add(total, ad::scale(role, static_cast<S>(out.bd.lambda_r)));

  out.bd.act = static_cast<double>(tape.value(act)(0, 0));
  out.bd.world = static_cast<double>(tape.value(world)(0, 0));
  out.bd.vq = static_cast<double>(tape.value(vq)(0, 0));
  out.bd.compose = static_cast<double>(tape.value(compose)(0, 0));
  out.bd.role = static_cast<double>(tape.value(role)(0, 0));
  out.bd.total = static_cast<double>(tape.value(total)(0, 0));
  out.total = total;
  return out;
}

}  // namespace oawam::losses
