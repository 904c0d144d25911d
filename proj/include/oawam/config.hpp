#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace oawam {

struct SimConfig {
  int objects_min = 2;
  int objects_max = 4;
  int n_max = 8;          // object-slot capacity (robot is slot 0 on top)
  int label_vocab = 12;   // color x shape object labels
  int feature_dim = 12;
  int grid_size = 8;
  int codebook = 64;
  double action_step = 0.1;
  double grasp_trigger = 0.05;  // expert closes the gripper inside this radius
  double grasp_radius = 0.08;   // physics: attach range when closing
  double place_tol = 0.04;
  double success_tol = 0.10;
  int max_episode_len = 80;
  double min_separation = 0.18;
  double camera_max_angle = 1.0;
  double camera_max_shift = 0.25;
  double robot_init_radius = 0.5;
  int layout_k_max = 4;
  double feature_noise_scale = 0.5;
};

struct ModelConfig {
  int layers = 4;
  int hidden = 128;  // D
  int heads = 4;
  int addr_dim = 16;      // A
  int cnt_dim = 32;       // C
  int temporal_dim = 8;   // P
  int role_dim = 8;       // R
  int label_emb_dim = 16; // E
  int pose_dim = 4;       // (x, y, cos, sin)
  int act_dim = 3;
  int chunk = 16;  // H
  int frames = 2;  // T
  int state_bins = 64;
  int action_bins = 64;
  double rope_theta = 10000.0;
  int ffn_expansion = 2;
  int flow_blocks = 4;
  int flow_width = 128;
  int tau_emb_dim = 16;
  int role_queries = 4;
  bool oa_key_mask = true;
  bool oa_reset_hook = true;
  bool rope_share = true;
  bool geom_bias = true;

  int slot_dim() const { return addr_dim + cnt_dim + temporal_dim + role_dim; }
};

struct TrainConfig {
  int total_steps = 20000;
  int batch = 16;
  int episodes = 500;
  double lr_peak = 3e-4;
  double lr_final_frac = 0.1;
  double warmup_frac = 0.05;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  double ema_decay = 0.999;
  double adam_eps = 1e-8;
  double lambda_world = 0.5;
  double lambda_vq = 0.04;
  double lambda_compose = 0.1;
  double lambda_role = 0.05;
  double lambda_pose = 1.0;
  double vq_token_weight = 1.0;
  double compose_ramp_frac = 0.3;
  double role_cutoff_frac = 0.5;
  double mask_anneal_frac = 0.1;
  std::uint64_t seed = 1;
  int threads = 2;
  int ckpt_every = 0;  // 0: final checkpoint only
  int metrics_every = 25;
  double init_scale = 0.02;
};

struct EvalConfig {
  int episodes = 40;
  int max_rollout_steps = 80;
  int replan_every = 16;
  int euler_steps = 4;
  bool use_ema = true;
  std::uint64_t seed = 123;
};

struct DiagConfig {
  std::vector<double> strengths = {0.0, 0.25, 0.5, 0.75, 1.0};
  int intervention_episodes = 20;
  int intervention_rollout = 40;
  int seeds = 3;
};

struct Config {
  SimConfig sim;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  DiagConfig diagnostics;

  // The merged tree (defaults + file + overrides); source of the config hash.
  nlohmann::json tree;

  static Config defaults();
  static Config from_file(const std::string& path,
                          const std::vector<std::string>& overrides = {});
  static Config from_json(nlohmann::json j,
                          const std::vector<std::string>& overrides = {});

  // Dot-path override, e.g. "train.total_steps=2000".
  void apply_override(const std::string& assignment);

  // FNV-1a of the canonical (key-sorted) serialization.
  std::string hash() const;

  void validate() const;
};

// Ablation variants over the two OA switches: v0 both on, v1 mask off,
// v2 both off, v3 hook off.
void apply_variant(Config& cfg, const std::string& variant);

extern const char* kCodeVersion;

}  // namespace oawam
