#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "oawam/losses.hpp"
#include "oawam/model.hpp"

namespace oawam::train {

using oawam::ad::Mat;
using oawam::ad::Parameter;

// Linear warmup to the peak, cosine decay to lr_final_frac * peak at
// total_steps.
inline double lr_at(int step, const TrainConfig& tc) {
  const double warmup = std::max(1.0, std::round(tc.warmup_frac * tc.total_steps));
  if (step < warmup) return tc.lr_peak * static_cast<double>(step) / warmup;
  const double end = tc.lr_final_frac * tc.lr_peak;
  const double span = std::max(1.0, static_cast<double>(tc.total_steps) - warmup);
  const double t = std::min(1.0, (static_cast<double>(step) - warmup) / span);
  return end + 0.5 * (tc.lr_peak - end) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// Rescales all gradients so the global norm is at most `clip`; returns the
// pre-clip norm.
template <typename S>
double clip_global_norm(std::vector<Parameter<S>*>& params, double clip) {
  double sq = 0.0;
  for (const auto* p : params) {
    if (p->grad.size() == 0) continue;
    sq += static_cast<double>(p->grad.template cast<double>().squaredNorm());
  }
  const double norm = std::sqrt(sq);
  if (clip > 0.0 && norm > clip) {
    const S f = static_cast<S>(clip / norm);
    for (auto* p : params) {
      if (p->grad.size() > 0) p->grad *= f;
    }
  }
  return norm;
}

// Adaptive-moment update with decoupled weight decay: a zero-gradient
// parameter still shrinks by lr*wd each step.
template <typename S>
class AdamW {
 public:
  void init(const std::vector<Parameter<S>*>& params) {
    m_.clear();
    v_.clear();
    for (const auto* p : params) {
      m_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Mat<S>::Zero(p->value.rows(), p->value.cols()));
    }
    step_ = 0;
  }

  void step(std::vector<Parameter<S>*>& params, double lr, const TrainConfig& tc) {
    ++step_;
    const double b1 = tc.beta1, b2 = tc.beta2;
    const double bc1 = 1.0 - std::pow(b1, step_);
    const double bc2 = 1.0 - std::pow(b2, step_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<S>& p = *params[i];
      if (p.grad.size() == 0) p.zero_grad();
      m_[i] = static_cast<S>(b1) * m_[i] + static_cast<S>(1.0 - b1) * p.grad;
      v_[i] = static_cast<S>(b2) * v_[i].eval() +
              static_cast<S>(1.0 - b2) * p.grad.cwiseProduct(p.grad);
      p.value -= static_cast<S>(lr * tc.weight_decay) * p.value;
      const Mat<S> mhat = m_[i] / static_cast<S>(bc1);
      const Mat<S> vhat = v_[i] / static_cast<S>(bc2);
      p.value -= (static_cast<S>(lr) * mhat.array() /
                  (vhat.array().sqrt() + static_cast<S>(tc.adam_eps)))
                     .matrix();
    }
  }

  int step_count() const { return step_; }

 private:
  std::vector<Mat<S>> m_, v_;
  int step_ = 0;
};

// shadow = decay*shadow + (1-decay)*param after every optimizer step.
template <typename S>
class Ema {
 public:
  void init(const std::vector<Parameter<S>*>& params, double decay) {
    decay_ = decay;
    shadow_.clear();
    for (const auto* p : params) shadow_.push_back(p->value);
  }
  void update(const std::vector<Parameter<S>*>& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      shadow_[i] = static_cast<S>(decay_) * shadow_[i] +
                   static_cast<S>(1.0 - decay_) * params[i]->value;
    }
  }
  const std::vector<Mat<S>>& shadow() const { return shadow_; }
  void copy_to(std::vector<Parameter<S>*>& params) const {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = shadow_[i];
  }

 private:
  double decay_ = 0.999;
  std::vector<Mat<S>> shadow_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct StepRecord {
  int step = 0;
  double lr = 0.0;
  double grad_norm = 0.0;
  losses::LossBreakdown bd;
};

struct TrainResult {
  losses::LossBreakdown first;
  losses::LossBreakdown last;
  std::vector<double> total_curve;  // sampled at metrics_every
};

// Deterministic per-(step,item) streams make the run independent of the
// thread count: items are computed on worker threads but their gradients are
// reduced in batch-index order.
template <typename S>
class Trainer {
 public:
  Trainer(const Config& cfg, data::Dataset dataset)
      : cfg_(cfg),
        dataset_(std::move(dataset)),
        model_(model::ModelParams<S>::build(cfg, cfg.train.seed)) {
    adam_.init(model_.all);
    ema_.init(model_.all, cfg.train.ema_decay);
  }

  model::ModelParams<S>& model() { return model_; }
  const data::Dataset& dataset() const { return dataset_; }

  int anneal_steps() const {
    return static_cast<int>(
        std::llround(cfg_.train.mask_anneal_frac * cfg_.train.total_steps));
  }

  StepRecord train_step(int step) {
    const TrainConfig& tc = cfg_.train;
    const int a_eff = model::effective_addr_dim(step, cfg_.model.hidden,
                                                cfg_.model.addr_dim, anneal_steps());
    const bool compose_active = losses::lambda_compose_at(step, tc) > 0.0;
    const int B = tc.batch;

    struct ItemWork {
      data::Window win;
      losses::LossDraw draw;
      std::unique_ptr<ad::Tape<S>> tape;
      losses::LossBreakdown bd;
      std::string error;
    };
    std::vector<ItemWork> items(static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) {
      Rng item_rng = Rng(tc.seed, "train")
                         .child("item", static_cast<std::uint64_t>(step) *
                                            static_cast<std::uint64_t>(B) +
                                            static_cast<std::uint64_t>(i));
      int pivot = 0;
      const auto& ep = dataset_.sample(item_rng, pivot);
      items[static_cast<std::size_t>(i)].win =
          data::build_training_window(ep, pivot, cfg_);
      Rng donor_rng = item_rng.child("donor");
      items[static_cast<std::size_t>(i)].draw = losses::LossDraw::sample(
          items[static_cast<std::size_t>(i)].win, cfg_.model, item_rng,
          compose_active, &donor_rng, &dataset_, &cfg_);
    }

    auto run_item = [&](ItemWork& w) {
      try {
        w.tape = std::make_unique<ad::Tape<S>>();
        auto loss = losses::item_loss(*w.tape, model_, w.win, w.draw, step, tc,
                                      cfg_.eval.euler_steps, a_eff);
        w.tape->backward(loss.total);
        w.bd = loss.bd;
      } catch (const std::exception& e) {
        w.error = e.what();
      }
    };

    for (auto* p : model_.all) p->zero_grad();
    const int threads = std::max(1, tc.threads);
    for (int base = 0; base < B; base += threads) {
      const int count = std::min(threads, B - base);
      if (count == 1) {
        run_item(items[static_cast<std::size_t>(base)]);
      } else {
        std::vector<std::thread> pool;
        for (int k = 0; k < count; ++k) {
          pool.emplace_back(run_item, std::ref(items[static_cast<std::size_t>(base + k)]));
        }
        for (auto& th : pool) th.join();
      }
      // Fixed reduction order: batch index, one tape at a time.
      for (int k = 0; k < count; ++k) {
        auto& w = items[static_cast<std::size_t>(base + k)];
        if (!w.error.empty()) throw RuntimeFailure("train item failed: " + w.error);
        w.tape->accumulate_param_grads(static_cast<S>(1.0 / B));
        w.tape.reset();
      }
    }

    StepRecord rec;
    rec.step = step;
    for (const auto& w : items) {
      rec.bd.act += w.bd.act / B;
      rec.bd.world += w.bd.world / B;
      rec.bd.vq += w.bd.vq / B;
      rec.bd.compose += w.bd.compose / B;
      rec.bd.role += w.bd.role / B;
      rec.bd.total += w.bd.total / B;
    }
    rec.bd.lambda_c = items.front().bd.lambda_c;
    rec.bd.lambda_r = items.front().bd.lambda_r;
    if (!std::isfinite(rec.bd.total)) {
      throw RuntimeFailure("non-finite loss at step " + std::to_string(step) +
                           ": " + rec.bd.json().dump());
    }

    rec.lr = lr_at(step, tc);
    rec.grad_norm = clip_global_norm(model_.all, tc.clip_norm);
    adam_.step(model_.all, rec.lr, tc);
    ema_.update(model_.all);
    return rec;
  }

  void save_checkpoint(const std::string& path, int step) const {
    nlohmann::json meta;
    meta["config_hash"] = cfg_.hash();
    meta["seed"] = cfg_.train.seed;
    meta["step"] = step;
    meta["variant"] = nlohmann::json{{"oa_key_mask", cfg_.model.oa_key_mask},
                                     {"oa_reset_hook", cfg_.model.oa_reset_hook}};
    meta["config"] = cfg_.tree;
    io::Container c;
    c.meta = meta;
    c.meta["kind"] = "checkpoint";
    c.meta["code_version"] = kCodeVersion;
    const auto& shadow = ema_.shadow();
    for (std::size_t i = 0; i < model_.all.size(); ++i) {
      const Parameter<S>* p = model_.all[i];
      std::vector<float> buf(static_cast<std::size_t>(p->value.size()));
      for (Eigen::Index j = 0; j < p->value.size(); ++j) {
        buf[static_cast<std::size_t>(j)] = static_cast<float>(p->value.data()[j]);
      }
      c.put_f32(p->name, {p->value.rows(), p->value.cols()}, buf.data());
      for (Eigen::Index j = 0; j < p->value.size(); ++j) {
        buf[static_cast<std::size_t>(j)] = static_cast<float>(shadow[i].data()[j]);
      }
      c.put_f32("ema." + p->name, {p->value.rows(), p->value.cols()}, buf.data());
    }
    c.save(path);
  }

  const Config& config() const { return cfg_; }

 private:
  Config cfg_;
  data::Dataset dataset_;
  model::ModelParams<S> model_;
  AdamW<S> adam_;
  Ema<S> ema_;
};

// Runs the full schedule, streaming JSON-lines metrics via `sink` (may be
// null). Returns first/last breakdowns for smoke checks.
template <typename S>
TrainResult run_training(Trainer<S>& trainer,
                         const std::function<void(const StepRecord&)>& sink = {}) {
  TrainResult result;
  const int total = trainer.config().train.total_steps;
  const int every = std::max(1, trainer.config().train.metrics_every);
  for (int step = 0; step < total; ++step) {
    const StepRecord rec = trainer.train_step(step);
    if (step == 0) result.first = rec.bd;
    result.last = rec.bd;
    if (step % every == 0 || step + 1 == total) {
      result.total_curve.push_back(rec.bd.total);
      if (sink) sink(rec);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

struct GradCheckGroup {
  std::string name;
  double max_rel = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int coords = 0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel = 0.0;
  bool passed(double threshold) const { return max_rel < threshold; }
};

// Central differences (f(x+eps) - f(x-eps)) / 2eps against the tape gradient
// of the full training objective, on an fp64 model. Detached targets are
// frozen at the base point so both sides evaluate the same function.
inline GradCheckReport gradcheck_full(const Config& cfg, double eps, double tau,
                                      bool insertion, int coords_per_param,
                                      std::uint64_t seed) {
  auto mp = model::ModelParams<double>::build(cfg, seed);
  // Slightly larger random weights than the training init give logits real
  // structure to differentiate through.
  Rng wrng(seed, "gradcheck_weights");
  for (auto* p : mp.all) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      p->value.data()[i] += 0.05 * wrng.normal();
    }
  }

  data::Dataset ds = data::Dataset::generate(cfg, 2, seed + 17);
  const auto& ep = ds.episodes.front();
  const int pivot = std::min<int>(1, static_cast<int>(ep.actions.size()) - 1);
  data::Window win = data::build_training_window(ep, pivot, cfg);

  Rng drng(seed, "gradcheck_draw");
  Rng donor_rng = drng.child("donor");
  losses::LossDraw draw = losses::LossDraw::sample(win, cfg.model, drng, true,
                                                   &donor_rng, &ds, &cfg);
  draw.tau = tau;
  draw.try_insertion = insertion;
  if (!insertion && draw.perm.empty()) {
    draw.perm = data::sample_distractor_permutation(win, drng);
  }

  // Role and compose terms active; anneal complete.
  const int step = static_cast<int>(0.4 * cfg.train.total_steps);
  const int a_eff = cfg.model.addr_dim;

  losses::FrozenTargets<double> frozen;
  double base_value = 0.0;
  {
    ad::Tape<double> tape;
    auto loss = losses::item_loss(tape, mp, win, draw, step, cfg.train,
                                  cfg.eval.euler_steps, a_eff, nullptr, &frozen);
    tape.backward(loss.total);
    for (auto* p : mp.all) p->zero_grad();
    tape.accumulate_param_grads(1.0);
    base_value = loss.bd.total;
  }
  (void)base_value;

  auto eval_loss = [&]() {
    ad::Tape<double> tape;
    auto loss = losses::item_loss(tape, mp, win, draw, step, cfg.train,
                                  cfg.eval.euler_steps, a_eff, &frozen, nullptr);
    return static_cast<double>(tape.value(loss.total)(0, 0));
  };

  GradCheckReport report;
  for (auto* p : mp.all) {
    GradCheckGroup group;
    group.name = p->name;
    const Eigen::Index n = p->value.size();
    // Deterministic coordinate sample: the largest-|grad| entries plus an
    // even stride across the tensor.
    std::vector<Eigen::Index> picks;
    std::vector<std::pair<double, Eigen::Index>> by_mag;
    for (Eigen::Index i = 0; i < n; ++i) {
      by_mag.emplace_back(-std::abs(static_cast<double>(p->grad.data()[i])), i);
    }
    std::sort(by_mag.begin(), by_mag.end());
    const int top = std::min<int>(coords_per_param / 2 + 1, static_cast<int>(n));
    for (int i = 0; i < top; ++i) picks.push_back(by_mag[static_cast<std::size_t>(i)].second);
    const Eigen::Index stride = std::max<Eigen::Index>(1, n / std::max(1, coords_per_param / 2));
    for (Eigen::Index i = 0; i < n && static_cast<int>(picks.size()) < coords_per_param;
         i += stride) {
      picks.push_back(i);
    }
    std::sort(picks.begin(), picks.end());
    picks.erase(std::unique(picks.begin(), picks.end()), picks.end());

    for (const Eigen::Index i : picks) {
      const double analytic = static_cast<double>(p->grad.data()[i]);
      const double keep = static_cast<double>(p->value.data()[i]);
      p->value.data()[i] = keep + eps;
      const double up = eval_loss();
      p->value.data()[i] = keep - eps;
      const double dn = eval_loss();
      p->value.data()[i] = keep;
      const double numeric = (up - dn) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > group.max_rel) {
        group.max_rel = rel;
        group.worst_analytic = analytic;
        group.worst_numeric = numeric;
      }
      ++group.coords;
    }
    report.max_rel = std::max(report.max_rel, group.max_rel);
    report.groups.push_back(std::move(group));
  }
  return report;
}

}  // namespace oawam::train
