#include "oawam/config.hpp"

#include <fstream>
#include <sstream>

#include "oawam/errors.hpp"
#include "oawam/rng.hpp"

namespace oawam {

const char* kCodeVersion = "oawam-0.1.0";

namespace {

nlohmann::json default_tree() {
  const Config c{};  // field defaults
  nlohmann::json j;
  j["sim"] = {
      {"objects_min", c.sim.objects_min},
      {"objects_max", c.sim.objects_max},
      {"n_max", c.sim.n_max},
      {"label_vocab", c.sim.label_vocab},
      {"feature_dim", c.sim.feature_dim},
      {"grid_size", c.sim.grid_size},
      {"codebook", c.sim.codebook},
      {"action_step", c.sim.action_step},
      {"grasp_trigger", c.sim.grasp_trigger},
      {"grasp_radius", c.sim.grasp_radius},
      {"place_tol", c.sim.place_tol},
      {"success_tol", c.sim.success_tol},
      {"max_episode_len", c.sim.max_episode_len},
      {"min_separation", c.sim.min_separation},
      {"camera_max_angle", c.sim.camera_max_angle},
      {"camera_max_shift", c.sim.camera_max_shift},
      {"robot_init_radius", c.sim.robot_init_radius},
      {"layout_k_max", c.sim.layout_k_max},
      {"feature_noise_scale", c.sim.feature_noise_scale},
  };
  j["model"] = {
      {"layers", c.model.layers},
      {"hidden", c.model.hidden},
      {"heads", c.model.heads},
      {"addr_dim", c.model.addr_dim},
      {"cnt_dim", c.model.cnt_dim},
      {"temporal_dim", c.model.temporal_dim},
      {"role_dim", c.model.role_dim},
      {"label_emb_dim", c.model.label_emb_dim},
      {"pose_dim", c.model.pose_dim},
      {"act_dim", c.model.act_dim},
      {"chunk", c.model.chunk},
      {"frames", c.model.frames},
      {"state_bins", c.model.state_bins},
      {"action_bins", c.model.action_bins},
      {"rope_theta", c.model.rope_theta},
      {"ffn_expansion", c.model.ffn_expansion},
      {"flow_blocks", c.model.flow_blocks},
      {"flow_width", c.model.flow_width},
      {"tau_emb_dim", c.model.tau_emb_dim},
      {"role_queries", c.model.role_queries},
      {"oa_key_mask", c.model.oa_key_mask},
      {"oa_reset_hook", c.model.oa_reset_hook},
      {"rope_share", c.model.rope_share},
      {"geom_bias", c.model.geom_bias},
  };
  j["train"] = {
      {"total_steps", c.train.total_steps},
      {"batch", c.train.batch},
      {"episodes", c.train.episodes},
      {"lr_peak", c.train.lr_peak},
      {"lr_final_frac", c.train.lr_final_frac},
      {"warmup_frac", c.train.warmup_frac},
      {"clip_norm", c.train.clip_norm},
      {"beta1", c.train.beta1},
      {"beta2", c.train.beta2},
      {"weight_decay", c.train.weight_decay},
      {"ema_decay", c.train.ema_decay},
      {"adam_eps", c.train.adam_eps},
      {"lambda_world", c.train.lambda_world},
      {"lambda_vq", c.train.lambda_vq},
      {"lambda_compose", c.train.lambda_compose},
      {"lambda_role", c.train.lambda_role},
      {"lambda_pose", c.train.lambda_pose},
      {"vq_token_weight", c.train.vq_token_weight},
      {"compose_ramp_frac", c.train.compose_ramp_frac},
      {"role_cutoff_frac", c.train.role_cutoff_frac},
      {"mask_anneal_frac", c.train.mask_anneal_frac},
      {"seed", c.train.seed},
      {"threads", c.train.threads},
      {"ckpt_every", c.train.ckpt_every},
      {"metrics_every", c.train.metrics_every},
      {"init_scale", c.train.init_scale},
  };
  j["eval"] = {
      {"episodes", c.eval.episodes},
      {"max_rollout_steps", c.eval.max_rollout_steps},
      {"replan_every", c.eval.replan_every},
      {"euler_steps", c.eval.euler_steps},
      {"use_ema", c.eval.use_ema},
      {"seed", c.eval.seed},
  };
  j["diagnostics"] = {
      {"strengths", c.diagnostics.strengths},
      {"intervention_episodes", c.diagnostics.intervention_episodes},
      {"intervention_rollout", c.diagnostics.intervention_rollout},
      {"seeds", c.diagnostics.seeds},
  };
  return j;
}

void merge_checked(nlohmann::json& base, const nlohmann::json& patch,
                   const std::string& prefix) {
  if (!patch.is_object()) {
    throw ConfigError("config: expected an object at '" +
                      (prefix.empty() ? std::string("<root>") : prefix) + "'");
  }
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) {
      throw ConfigError("config: unknown key '" + path + "'");
    }
    if (base[key].is_object()) {
      merge_checked(base[key], value, path);
    } else {
      if (value.is_object()) {
        throw ConfigError("config: key '" + path + "' is a scalar, got object");
      }
      base[key] = value;
    }
  }
}

template <typename T>
T at(const nlohmann::json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

void materialize(Config& c) {
  const auto& j = c.tree;
  const auto& s = j.at("sim");
  c.sim.objects_min = at<int>(s, "objects_min");
  c.sim.objects_max = at<int>(s, "objects_max");
  c.sim.n_max = at<int>(s, "n_max");
  c.sim.label_vocab = at<int>(s, "label_vocab");
  c.sim.feature_dim = at<int>(s, "feature_dim");
  c.sim.grid_size = at<int>(s, "grid_size");
  c.sim.codebook = at<int>(s, "codebook");
  c.sim.action_step = at<double>(s, "action_step");
  c.sim.grasp_trigger = at<double>(s, "grasp_trigger");
  c.sim.grasp_radius = at<double>(s, "grasp_radius");
  c.sim.place_tol = at<double>(s, "place_tol");
  c.sim.success_tol = at<double>(s, "success_tol");
  c.sim.max_episode_len = at<int>(s, "max_episode_len");
  c.sim.min_separation = at<double>(s, "min_separation");
  c.sim.camera_max_angle = at<double>(s, "camera_max_angle");
  c.sim.camera_max_shift = at<double>(s, "camera_max_shift");
  c.sim.robot_init_radius = at<double>(s, "robot_init_radius");
  c.sim.layout_k_max = at<int>(s, "layout_k_max");
  c.sim.feature_noise_scale = at<double>(s, "feature_noise_scale");

  const auto& m = j.at("model");
  c.model.layers = at<int>(m, "layers");
  c.model.hidden = at<int>(m, "hidden");
  c.model.heads = at<int>(m, "heads");
  c.model.addr_dim = at<int>(m, "addr_dim");
  c.model.cnt_dim = at<int>(m, "cnt_dim");
  c.model.temporal_dim = at<int>(m, "temporal_dim");
  c.model.role_dim = at<int>(m, "role_dim");
  c.model.label_emb_dim = at<int>(m, "label_emb_dim");
  c.model.pose_dim = at<int>(m, "pose_dim");
  c.model.act_dim = at<int>(m, "act_dim");
  c.model.chunk = at<int>(m, "chunk");
  c.model.frames = at<int>(m, "frames");
  c.model.state_bins = at<int>(m, "state_bins");
  c.model.action_bins = at<int>(m, "action_bins");
  c.model.rope_theta = at<double>(m, "rope_theta");
  c.model.ffn_expansion = at<int>(m, "ffn_expansion");
  c.model.flow_blocks = at<int>(m, "flow_blocks");
  c.model.flow_width = at<int>(m, "flow_width");
  c.model.tau_emb_dim = at<int>(m, "tau_emb_dim");
  c.model.role_queries = at<int>(m, "role_queries");
  c.model.oa_key_mask = at<bool>(m, "oa_key_mask");
  c.model.oa_reset_hook = at<bool>(m, "oa_reset_hook");
  c.model.rope_share = at<bool>(m, "rope_share");
  c.model.geom_bias = at<bool>(m, "geom_bias");

  const auto& t = j.at("train");
  c.train.total_steps = at<int>(t, "total_steps");
  c.train.batch = at<int>(t, "batch");
  c.train.episodes = at<int>(t, "episodes");
  c.train.lr_peak = at<double>(t, "lr_peak");
  c.train.lr_final_frac = at<double>(t, "lr_final_frac");
  c.train.warmup_frac = at<double>(t, "warmup_frac");
  c.train.clip_norm = at<double>(t, "clip_norm");
  c.train.beta1 = at<double>(t, "beta1");
  c.train.beta2 = at<double>(t, "beta2");
  c.train.weight_decay = at<double>(t, "weight_decay");
  c.train.ema_decay = at<double>(t, "ema_decay");
  c.train.adam_eps = at<double>(t, "adam_eps");
  c.train.lambda_world = at<double>(t, "lambda_world");
  c.train.lambda_vq = at<double>(t, "lambda_vq");
  c.train.lambda_compose = at<double>(t, "lambda_compose");
  c.train.lambda_role = at<double>(t, "lambda_role");
  c.train.lambda_pose = at<double>(t, "lambda_pose");
  c.train.vq_token_weight = at<double>(t, "vq_token_weight");
  c.train.compose_ramp_frac = at<double>(t, "compose_ramp_frac");
  c.train.role_cutoff_frac = at<double>(t, "role_cutoff_frac");
  c.train.mask_anneal_frac = at<double>(t, "mask_anneal_frac");
  c.train.seed = at<std::uint64_t>(t, "seed");
  c.train.threads = at<int>(t, "threads");
  c.train.ckpt_every = at<int>(t, "ckpt_every");
  c.train.metrics_every = at<int>(t, "metrics_every");
  c.train.init_scale = at<double>(t, "init_scale");

  const auto& e = j.at("eval");
  c.eval.episodes = at<int>(e, "episodes");
  c.eval.max_rollout_steps = at<int>(e, "max_rollout_steps");
  c.eval.replan_every = at<int>(e, "replan_every");
  c.eval.euler_steps = at<int>(e, "euler_steps");
  c.eval.use_ema = at<bool>(e, "use_ema");
  c.eval.seed = at<std::uint64_t>(e, "seed");

  const auto& d = j.at("diagnostics");
  c.diagnostics.strengths = at<std::vector<double>>(d, "strengths");
  c.diagnostics.intervention_episodes = at<int>(d, "intervention_episodes");
  c.diagnostics.intervention_rollout = at<int>(d, "intervention_rollout");
  c.diagnostics.seeds = at<int>(d, "seeds");
}

}  // namespace

Config Config::defaults() {
  Config c;
  c.tree = default_tree();
  materialize(c);
  return c;
}

Config Config::from_json(nlohmann::json j, const std::vector<std::string>& overrides) {
  Config c;
  c.tree = default_tree();
  merge_checked(c.tree, j, "");
  materialize(c);
  for (const auto& o : overrides) c.apply_override(o);
  c.validate();
  return c;
}

Config Config::from_file(const std::string& path,
                         const std::vector<std::string>& overrides) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: parse error in '" + path + "': " + e.what());
  }
  return from_json(std::move(j), overrides);
}

void Config::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("config: override must look like section.key=value, got '" +
                      assignment + "'");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;  // bare strings are allowed unquoted
  }

  nlohmann::json* node = &tree;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object()) {
      throw ConfigError("config: unknown key '" + path + "'");
    }
    node = &(*node)[parts[i]];
  }
  if (parts.empty() || !node->contains(parts.back()) ||
      (*node)[parts.back()].is_object()) {
    throw ConfigError("config: unknown key '" + path + "'");
  }
  (*node)[parts.back()] = value;
  materialize(*this);
  validate();
}

std::string Config::hash() const {
  const std::uint64_t h = Rng::fnv1a(tree.dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

void Config::validate() const {
  if (model.hidden % model.heads != 0) {
    throw ConfigError("config: model.hidden must be divisible by model.heads");
  }
  if (model.addr_dim >= model.hidden) {
    throw ConfigError("config: model.addr_dim must be < model.hidden");
  }
  if (sim.objects_min < 2 || sim.objects_max < sim.objects_min) {
    throw ConfigError("config: need 2 <= objects_min <= objects_max");
  }
  if (sim.objects_max > sim.n_max) {
    throw ConfigError("config: sim.objects_max exceeds slot capacity sim.n_max");
  }
  if (sim.grid_size * sim.grid_size > 64) {
    throw ConfigError("config: sim.grid_size^2 must be <= 64 at toy scale");
  }
  if (model.frames < 1 || model.chunk < 1) {
    throw ConfigError("config: model.frames and model.chunk must be >= 1");
  }
  if (model.state_bins < 2 || model.action_bins < 2) {
    throw ConfigError("config: quantizer bins must be >= 2");
  }
  auto frac_ok = [](double f) { return f >= 0.0 && f <= 1.0; };
  if (!frac_ok(train.warmup_frac) || !frac_ok(train.compose_ramp_frac) ||
      !frac_ok(train.role_cutoff_frac) || !frac_ok(train.mask_anneal_frac) ||
      !frac_ok(train.lr_final_frac)) {
    throw ConfigError("config: train schedule fractions must lie in [0,1]");
  }
  if (train.lambda_world < 0 || train.lambda_vq < 0 || train.lambda_compose < 0 ||
      train.lambda_role < 0 || train.lambda_pose < 0) {
    throw ConfigError("config: loss weights must be non-negative");
  }
}

void apply_variant(Config& cfg, const std::string& variant) {
  bool mask = true, hook = true;
  if (variant == "v0") {
    mask = true;
    hook = true;
  } else if (variant == "v1") {
    mask = false;
    hook = true;
  } else if (variant == "v2") {
    mask = false;
    hook = false;
  } else if (variant == "v3") {
    mask = true;
    hook = false;
  } else {
    throw ConfigError("unknown variant '" + variant + "' (expected v0|v1|v2|v3)");
  }
  cfg.tree["model"]["oa_key_mask"] = mask;
  cfg.tree["model"]["oa_reset_hook"] = hook;
  cfg.model.oa_key_mask = mask;
  cfg.model.oa_reset_hook = hook;
}

}  // namespace oawam
