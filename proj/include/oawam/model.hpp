#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "oawam/config.hpp"
#include "oawam/container.hpp"
#include "oawam/errors.hpp"
#include "oawam/rng.hpp"
#include "oawam/sequence.hpp"
#include "oawam/tape.hpp"
#include "oawam/window.hpp"

namespace oawam::model {

using oawam::ad::Mat;
using oawam::ad::Parameter;
using oawam::ad::Tape;
using oawam::ad::Var;

// Linear anneal of the key-mask threshold from the full hidden width down to
// the hard addr_dim form over the first anneal_steps steps.
inline int effective_addr_dim(int step, int hidden, int addr_dim, int anneal_steps) {
  if (anneal_steps <= 0 || step >= anneal_steps) return addr_dim;
  if (step <= 0) return hidden;
  const double f = static_cast<double>(step) / static_cast<double>(anneal_steps);
  return static_cast<int>(std::llround(hidden - (hidden - addr_dim) * f));
}

// Even coordinates sin, odd cos.
template <typename S>
Mat<S> sinusoid_row(double t, int dim, double base) {
  Mat<S> row(1, dim);
  for (int i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(base, -2.0 * i / dim);
    row(0, 2 * i) = static_cast<S>(std::sin(t * freq));
    row(0, 2 * i + 1) = static_cast<S>(std::cos(t * freq));
  }
  return row;
}

template <typename S>
Mat<S> tau_embedding(double tau, int dim) {
  Mat<S> row(1, dim);
  for (int i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(1000.0, static_cast<double>(i) / (dim / 2));
    row(0, 2 * i) = static_cast<S>(std::sin(tau * freq));
    row(0, 2 * i + 1) = static_cast<S>(std::cos(tau * freq));
  }
  return row;
}

template <typename S>
struct TrunkLayerParams {
  Parameter<S> attn_norm_g;
  Parameter<S> wq, wk, wv, wo;  // hidden x hidden, bias-free
  Parameter<S> ffn_norm_g;
  Parameter<S> w_gate, w_up, w_down;
  Parameter<S> geo_w1, geo_b1, geo_w2, geo_b2;  // 3 -> 16 -> heads
};

template <typename S>
struct ModelParams {
  ModelConfig cfg;
  seq::Vocab vocab;
  int feature_dim = 0;
  int raw_dim = 0;  // feature + pose + label_emb + shape_desc

  Parameter<S> embed;    // vocab x D (also holds the learnable [ACT_Q] row)
  Parameter<S> lm_head;  // vocab x D

  // Slot tokenizer: label table has one extra "unknown" row for distractors
  // and one robot row.
  Parameter<S> label_table;  // (label_vocab + 2) x E
  Parameter<S> role_table;   // 3 x role_dim
  Parameter<S> addr_w1, addr_b1, addr_w2, addr_b2;
  Parameter<S> cnt_w1, cnt_b1, cnt_w2, cnt_b2;
  Parameter<S> adapter_ln_g, adapter_ln_b;
  Parameter<S> adapter_w1, adapter_b1, adapter_w2, adapter_b2;

  std::vector<TrunkLayerParams<S>> layers;

  // World head: two parallel LN -> Linear -> GELU -> Linear branches.
  Parameter<S> world_ln_g, world_ln_b;
  Parameter<S> wcnt_w1, wcnt_b1, wcnt_w2, wcnt_b2;
  Parameter<S> wpose_w1, wpose_b1, wpose_w2, wpose_b2;

  // Flow-matching action head.
  Parameter<S> w_c;  // D x D conditioning projection
  Parameter<S> flow_in_w, flow_in_b;
  struct FlowBlock {
    Parameter<S> ln_g, ln_b, w1, b1, w2, b2;
  };
  std::vector<FlowBlock> flow_blocks;
  Parameter<S> flow_out_w, flow_out_b;

  // Role attention: learned role queries mixed per chunk step.
  Parameter<S> role_wq, role_wk;
  Parameter<S> role_queries;  // R x D
  Parameter<S> step_mix;      // H x R

  std::vector<Parameter<S>*> all;  // registration order is the optimizer order

  static ModelParams build(const Config& config, std::uint64_t init_seed);

  void save(const std::string& path, const nlohmann::json& meta) const;
  void load(const std::string& path, bool prefer_ema);

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto* p : all) n += p->value.size();
    return n;
  }

 private:
  void register_all();
  void init_values(std::uint64_t init_seed);
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

template <typename S>
void ModelParams<S>::register_all() {
  all.clear();
  auto reg = [&](Parameter<S>& p, std::string name, int rows, int cols) {
    p.name = std::move(name);
    p.value.setZero(rows, cols);
    all.push_back(&p);
  };
  const int D = cfg.hidden, A = cfg.addr_dim, C = cfg.cnt_dim, E = cfg.label_emb_dim;
  const int Sdim = cfg.slot_dim();
  const int W = cfg.flow_width;
  const int flat = cfg.chunk * cfg.act_dim;

  reg(embed, "embed.table", vocab.size(), D);
  reg(lm_head, "lm_head", vocab.size(), D);

  reg(label_table, "tok.label_table", vocab.label_vocab + 2, E);
  reg(role_table, "tok.role_table", 3, cfg.role_dim);
  reg(addr_w1, "tok.addr.w1", E + feature_dim, 2 * A);
  reg(addr_b1, "tok.addr.b1", 1, 2 * A);
  reg(addr_w2, "tok.addr.w2", 2 * A, A);
  reg(addr_b2, "tok.addr.b2", 1, A);
  reg(cnt_w1, "tok.cnt.w1", raw_dim, 2 * C);
  reg(cnt_b1, "tok.cnt.b1", 1, 2 * C);
  reg(cnt_w2, "tok.cnt.w2", 2 * C, C);
  reg(cnt_b2, "tok.cnt.b2", 1, C);
  reg(adapter_ln_g, "tok.adapter.ln.g", 1, Sdim);
  reg(adapter_ln_b, "tok.adapter.ln.b", 1, Sdim);
  reg(adapter_w1, "tok.adapter.w1", Sdim, D);
  reg(adapter_b1, "tok.adapter.b1", 1, D);
  reg(adapter_w2, "tok.adapter.w2", D, D);
  reg(adapter_b2, "tok.adapter.b2", 1, D);

  layers.resize(static_cast<std::size_t>(cfg.layers));
  for (int l = 0; l < cfg.layers; ++l) {
    auto& lp = layers[static_cast<std::size_t>(l)];
    const std::string p = "trunk.l" + std::to_string(l) + ".";
    reg(lp.attn_norm_g, p + "attn_norm.g", 1, D);
    reg(lp.wq, p + "wq", D, D);
    reg(lp.wk, p + "wk", D, D);
    reg(lp.wv, p + "wv", D, D);
    reg(lp.wo, p + "wo", D, D);
    reg(lp.ffn_norm_g, p + "ffn_norm.g", 1, D);
    reg(lp.w_gate, p + "w_gate", D, cfg.ffn_expansion * D);
    reg(lp.w_up, p + "w_up", D, cfg.ffn_expansion * D);
    reg(lp.w_down, p + "w_down", cfg.ffn_expansion * D, D);
    reg(lp.geo_w1, p + "geo.w1", 3, 16);
    reg(lp.geo_b1, p + "geo.b1", 1, 16);
    reg(lp.geo_w2, p + "geo.w2", 16, cfg.heads);
    reg(lp.geo_b2, p + "geo.b2", 1, cfg.heads);
  }

  reg(world_ln_g, "heads.world.ln.g", 1, D);
  reg(world_ln_b, "heads.world.ln.b", 1, D);
  reg(wcnt_w1, "heads.world.cnt.w1", D, 2 * C);
  reg(wcnt_b1, "heads.world.cnt.b1", 1, 2 * C);
  reg(wcnt_w2, "heads.world.cnt.w2", 2 * C, C);
  reg(wcnt_b2, "heads.world.cnt.b2", 1, C);
  reg(wpose_w1, "heads.world.pose.w1", D, 2 * cfg.pose_dim);
  reg(wpose_b1, "heads.world.pose.b1", 1, 2 * cfg.pose_dim);
  reg(wpose_w2, "heads.world.pose.w2", 2 * cfg.pose_dim, cfg.pose_dim);
  reg(wpose_b2, "heads.world.pose.b2", 1, cfg.pose_dim);

  reg(w_c, "heads.flow.w_c", D, D);
  reg(flow_in_w, "heads.flow.in.w", D + flat + cfg.tau_emb_dim, W);
  reg(flow_in_b, "heads.flow.in.b", 1, W);
  flow_blocks.resize(static_cast<std::size_t>(cfg.flow_blocks));
  for (int b = 0; b < cfg.flow_blocks; ++b) {
    auto& fb = flow_blocks[static_cast<std::size_t>(b)];
    const std::string p = "heads.flow.block" + std::to_string(b) + ".";
    reg(fb.ln_g, p + "ln.g", 1, W);
    reg(fb.ln_b, p + "ln.b", 1, W);
    reg(fb.w1, p + "w1", W, W);
    reg(fb.b1, p + "b1", 1, W);
    reg(fb.w2, p + "w2", W, W);
    reg(fb.b2, p + "b2", 1, W);
  }
  reg(flow_out_w, "heads.flow.out.w", W, flat);
  reg(flow_out_b, "heads.flow.out.b", 1, flat);

  reg(role_wq, "heads.role.wq", D, D);
  reg(role_wk, "heads.role.wk", D, D);
  reg(role_queries, "heads.role.queries", cfg.role_queries, D);
  reg(step_mix, "heads.role.step_mix", cfg.chunk, cfg.role_queries);
}

template <typename S>
void ModelParams<S>::init_values(std::uint64_t init_seed) {
  Rng rng(init_seed, "init");
  const double scale = 0.02;
  for (Parameter<S>* p : all) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      p->value.data()[i] = static_cast<S>(scale * rng.normal());
    }
  }
  // Norm gains start at one; biases at zero.
  auto ones = [](Parameter<S>& p) { p.value.setOnes(); };
  auto zeros = [](Parameter<S>& p) { p.value.setZero(); };
  ones(adapter_ln_g);
  zeros(adapter_ln_b);
  ones(world_ln_g);
  zeros(world_ln_b);
  zeros(addr_b1);
  zeros(addr_b2);
  zeros(cnt_b1);
  zeros(cnt_b2);
  zeros(adapter_b1);
  zeros(adapter_b2);
  for (auto& lp : layers) {
    ones(lp.attn_norm_g);
    ones(lp.ffn_norm_g);
    zeros(lp.geo_b1);
    zeros(lp.geo_w2);  // geometry bias starts neutral
    zeros(lp.geo_b2);
  }
  zeros(wcnt_b1);
  zeros(wcnt_b2);
  zeros(wpose_b1);
  zeros(wpose_b2);
  zeros(flow_in_b);
  for (auto& fb : flow_blocks) {
    ones(fb.ln_g);
    zeros(fb.ln_b);
    zeros(fb.b1);
    zeros(fb.b2);
  }
  zeros(flow_out_b);
}

template <typename S>
ModelParams<S> ModelParams<S>::build(const Config& config, std::uint64_t init_seed) {
  ModelParams<S> m;
  m.cfg = config.model;
  m.vocab = seq::Vocab::from_config(config);
  m.feature_dim = config.sim.feature_dim;
  m.raw_dim = m.feature_dim + m.cfg.pose_dim + m.cfg.label_emb_dim + 6;
  m.register_all();
  m.init_values(init_seed);
  return m;
}

template <typename S>
void ModelParams<S>::save(const std::string& path, const nlohmann::json& meta) const {
  io::Container c;
  c.meta = meta;
  c.meta["kind"] = "checkpoint";
  c.meta["code_version"] = kCodeVersion;
  for (const Parameter<S>* p : all) {
    std::vector<float> buf(static_cast<std::size_t>(p->value.size()));
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      buf[static_cast<std::size_t>(i)] = static_cast<float>(p->value.data()[i]);
    }
    c.put_f32(p->name, {p->value.rows(), p->value.cols()}, buf.data());
  }
  c.save(path);
}

template <typename S>
void ModelParams<S>::load(const std::string& path, bool prefer_ema) {
  const io::Container c = io::Container::load(path);
  for (Parameter<S>* p : all) {
    const std::string ema_name = "ema." + p->name;
    const std::string& name = (prefer_ema && c.has(ema_name)) ? ema_name : p->name;
    if (!c.has(name)) {
      throw ConfigError("checkpoint: missing tensor '" + p->name + "'");
    }
    const auto& e = c.entry(name);
    if (e.shape[0] != p->value.rows() || e.shape[1] != p->value.cols()) {
      throw ConfigError("checkpoint: shape mismatch for '" + p->name + "'");
    }
    const auto buf = c.get_f32(name);
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      p->value.data()[i] = static_cast<S>(buf[static_cast<std::size_t>(i)]);
    }
  }
}

// ---------------------------------------------------------------------------
// Slot tokenizer forward
// ---------------------------------------------------------------------------

template <typename S>
int label_row_for(const sim::RawSlot& slot, const sim::Instruction& instr,
                  int label_vocab) {
  if (slot.role == sim::SlotRole::Robot) return label_vocab + 1;
  if (slot.label_id == instr.target_label || slot.label_id == instr.reference_label) {
    return slot.label_id;  // instruction-named labels keep their embedding
  }
  return label_vocab;  // learned "unknown" row for distractors
}

// f_addr over the valid slots of the episode's first frame; padding rows are
// zero by construction (masked, not computed). Returns the (n_max+1) x A
// differentiable address block.
template <typename S>
Var<S> compute_addr(Tape<S>& tape, ModelParams<S>& mp,
                    const std::vector<sim::RawSlot>& frame0_slots,
                    const sim::Instruction& instr, int frame_index = 0) {
  if (frame_index != 0) {
    throw ContractError("compute_addr: addresses are computed only at t=0");
  }
  const int n_slots = static_cast<int>(frame0_slots.size());
  std::vector<int> valid_rows;
  std::vector<int> label_rows;
  for (int i = 0; i < n_slots; ++i) {
    const auto& s = frame0_slots[static_cast<std::size_t>(i)];
    if (s.role == sim::SlotRole::Padding) continue;
    valid_rows.push_back(i);
    label_rows.push_back(label_row_for<S>(s, instr, mp.vocab.label_vocab));
  }
  Mat<S> features(static_cast<Eigen::Index>(valid_rows.size()), mp.feature_dim);
  for (std::size_t r = 0; r < valid_rows.size(); ++r) {
    const auto& s = frame0_slots[static_cast<std::size_t>(valid_rows[r])];
    for (int j = 0; j < mp.feature_dim; ++j) {
      features(static_cast<Eigen::Index>(r), j) = static_cast<S>(s.feature[j]);
    }
  }
  auto label_idx = std::make_shared<const std::vector<int>>(label_rows);
  Var<S> lab = ad::rows_gather(tape.leaf(mp.label_table), label_idx);
  Var<S> in = ad::concat_cols<S>({lab, tape.constant(features)});
  Var<S> h = ad::gelu(ad::add_rowvec(ad::matmul(in, tape.leaf(mp.addr_w1)),
                                     tape.leaf(mp.addr_b1)));
  Var<S> addr_valid =
      ad::add_rowvec(ad::matmul(h, tape.leaf(mp.addr_w2)), tape.leaf(mp.addr_b2));

  Var<S> addr_full = tape.constant(Mat<S>::Zero(n_slots, mp.cfg.addr_dim));
  return ad::rows_scatter(addr_full, addr_valid,
                          std::make_shared<const std::vector<int>>(valid_rows));
}

// f_cnt over the valid slots of one frame; padding rows map to zero.
// `features_probe`, when given, receives the stacked feature block as a
// differentiable input node (used by gradient tests).
template <typename S>
Var<S> compute_content(Tape<S>& tape, ModelParams<S>& mp,
                       const std::vector<sim::RawSlot>& slots,
                       const sim::Instruction& instr,
                       Var<S>* features_probe = nullptr) {
  const int n_slots = static_cast<int>(slots.size());
  std::vector<int> valid_rows;
  std::vector<int> label_rows;
  for (int i = 0; i < n_slots; ++i) {
    if (slots[static_cast<std::size_t>(i)].role == sim::SlotRole::Padding) continue;
    valid_rows.push_back(i);
    label_rows.push_back(
        label_row_for<S>(slots[static_cast<std::size_t>(i)], instr, mp.vocab.label_vocab));
  }
  const int n_valid = static_cast<int>(valid_rows.size());
  Mat<S> rest(n_valid, mp.feature_dim + mp.cfg.pose_dim + 6);
  for (int r = 0; r < n_valid; ++r) {
    const auto& s = slots[static_cast<std::size_t>(valid_rows[static_cast<std::size_t>(r)])];
    int c = 0;
    for (int j = 0; j < mp.feature_dim; ++j) rest(r, c++) = static_cast<S>(s.feature[j]);
    for (int j = 0; j < mp.cfg.pose_dim; ++j) rest(r, c++) = static_cast<S>(s.pose[j]);
    for (int j = 0; j < 6; ++j) rest(r, c++) = static_cast<S>(s.shape_desc[static_cast<std::size_t>(j)]);
  }
  // raw = [feature || pose || label_emb || shape_desc]
  auto label_idx = std::make_shared<const std::vector<int>>(label_rows);
  Var<S> lab = ad::rows_gather(tape.leaf(mp.label_table), label_idx);
  Var<S> feat = features_probe != nullptr
                    ? tape.input(rest.leftCols(mp.feature_dim))
                    : tape.constant(rest.leftCols(mp.feature_dim));
  if (features_probe != nullptr) *features_probe = feat;
  Var<S> pose = tape.constant(rest.middleCols(mp.feature_dim, mp.cfg.pose_dim));
  Var<S> shape = tape.constant(rest.rightCols(6));
  Var<S> raw = ad::concat_cols<S>({feat, pose, lab, shape});
  Var<S> h = ad::gelu(
      ad::add_rowvec(ad::matmul(raw, tape.leaf(mp.cnt_w1)), tape.leaf(mp.cnt_b1)));
  Var<S> cnt_valid =
      ad::add_rowvec(ad::matmul(h, tape.leaf(mp.cnt_w2)), tape.leaf(mp.cnt_b2));

  Var<S> cnt_full = tape.constant(Mat<S>::Zero(n_slots, mp.cfg.cnt_dim));
  return ad::rows_scatter(cnt_full, cnt_valid,
                          std::make_shared<const std::vector<int>>(valid_rows));
}

// [addr || cnt || temporal || role_emb] for one frame (all slots).
template <typename S>
Var<S> assemble_slots(Tape<S>& tape, ModelParams<S>& mp, Var<S> addr, Var<S> cnt,
                      int frame_index, const std::vector<sim::RawSlot>& slots) {
  const int n_slots = static_cast<int>(slots.size());
  if (frame_index < 0) throw ContractError("assemble_slots: frame_index must be >= 0");
  Mat<S> temporal(n_slots, mp.cfg.temporal_dim);
  const Mat<S> row = sinusoid_row<S>(frame_index, mp.cfg.temporal_dim, 10000.0);
  for (int i = 0; i < n_slots; ++i) temporal.row(i) = row.row(0);

  std::vector<int> role_rows(static_cast<std::size_t>(n_slots));
  for (int i = 0; i < n_slots; ++i) {
    switch (slots[static_cast<std::size_t>(i)].role) {
      case sim::SlotRole::Robot: role_rows[static_cast<std::size_t>(i)] = 0; break;
      case sim::SlotRole::Object: role_rows[static_cast<std::size_t>(i)] = 1; break;
      case sim::SlotRole::Padding: role_rows[static_cast<std::size_t>(i)] = 2; break;
    }
  }
  Var<S> role = ad::rows_gather(tape.leaf(mp.role_table),
                                std::make_shared<const std::vector<int>>(role_rows));
  return ad::concat_cols<S>({addr, cnt, tape.constant(temporal), role});
}

// Slot adapter f_phi: LayerNorm -> Linear -> GELU -> Linear into trunk space.
template <typename S>
Var<S> adapt_slots(Tape<S>& tape, ModelParams<S>& mp, Var<S> slot_vectors) {
  if (tape.value(slot_vectors).cols() != mp.cfg.slot_dim()) {
    throw ContractError("adapt_slots: slot vector width != addr+cnt+temporal+role");
  }
  Var<S> normed = ad::layernorm_rows(slot_vectors, tape.leaf(mp.adapter_ln_g),
                                     tape.leaf(mp.adapter_ln_b), S(1e-10));
  Var<S> h = ad::gelu(ad::add_rowvec(ad::matmul(normed, tape.leaf(mp.adapter_w1)),
                                     tape.leaf(mp.adapter_b1)));
  return ad::add_rowvec(ad::matmul(h, tape.leaf(mp.adapter_w2)),
                        tape.leaf(mp.adapter_b2));
}

// ---------------------------------------------------------------------------
// Trunk
// ---------------------------------------------------------------------------

template <typename S>
struct TrunkTrace {
  // Per layer: stacked per-head attention probabilities (heads*L x L).
  std::vector<Mat<S>> attention;
  // Per layer: the residual stream after the full block (post reset).
  std::vector<Mat<S>> post_layer;
};

template <typename S>
struct ForwardOut {
  Var<S> hidden;            // L x D
  Var<S> cond;              // 1 x D
  Var<S> slot_hidden_last;  // (n_max+1) x D
  Var<S> world_cnt;         // n_obj x C
  Var<S> world_pose;        // n_obj x pose_dim
  std::vector<int> world_cols;  // slot columns covered by the world head
  Var<S> alpha_roles;       // R x (n_max+1)
  Var<S> alpha_steps;       // H x (n_max+1)
  Var<S> vq_logits;         // n_sup x vocab (invalid when not requested)
  std::vector<int> vq_targets;
  seq::SequenceLayout layout;
  std::shared_ptr<Mat<S>> addr_cache;  // (n_max+1) x A values used by the reset
  Var<S> addr_block;                   // differentiable addresses (adapter path)
};

struct ForwardOptions {
  int a_eff = -1;        // effective key-mask width; -1 means addr_dim (annealed out)
  bool want_vq = true;
  bool want_role = true;
  const void* external_addr = nullptr;  // Mat<S>*: episode cache for rollouts
  TrunkTrace<float>* trace_f32 = nullptr;
  TrunkTrace<double>* trace_f64 = nullptr;
};

template <typename S>
TrunkTrace<S>* trace_of(const ForwardOptions& opt);
template <>
inline TrunkTrace<float>* trace_of<float>(const ForwardOptions& opt) {
  return opt.trace_f32;
}
template <>
inline TrunkTrace<double>* trace_of<double>(const ForwardOptions& opt) {
  return opt.trace_f64;
}

// One block-causal trunk pass over a scattered input sequence.
// Per layer: norm -> slot-aware attention -> residual -> norm -> gated FFN
// -> residual -> address reset (when enabled).
template <typename S>
Var<S> trunk_forward(Tape<S>& tape, ModelParams<S>& mp, Var<S> x,
                     const seq::SequenceLayout& layout, const ad::MaskMat& mask,
                     const std::vector<Eigen::MatrixXd>& geom,
                     std::shared_ptr<const Mat<S>> addr_cache_rows, int a_eff,
                     TrunkTrace<S>* trace) {
  const int L = layout.length();
  const int D = mp.cfg.hidden;
  const int dh = D / mp.cfg.heads;
  auto slot_rows = seq::shared_slot_positions(layout);
  auto allow = std::make_shared<const ad::MaskMat>(mask);
  auto positions = std::make_shared<const std::vector<int>>(layout.position_ids);

  // Valid slot-slot pairs within each frame, and their geometry rows.
  std::vector<std::pair<int, int>> pairs;
  std::vector<std::pair<int, int>> pair_src;  // (frame, i*n+j) into geom
  if (mp.cfg.geom_bias) {
    const int n = layout.n_max + 1;
    for (int t = 0; t < layout.T; ++t) {
      const auto frame_positions = layout.slot_positions_of_frame(t);
      for (int i = 0; i < n; ++i) {
        if (!layout.valid_slot[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)]) continue;
        for (int j = 0; j < n; ++j) {
          if (!layout.valid_slot[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)]) continue;
          pairs.emplace_back(frame_positions[static_cast<std::size_t>(i)],
                             frame_positions[static_cast<std::size_t>(j)]);
          pair_src.emplace_back(t, i * n + j);
        }
      }
    }
  }
  Eigen::MatrixXd pair_geo(static_cast<Eigen::Index>(pairs.size()), 3);
  for (std::size_t p = 0; p < pair_src.size(); ++p) {
    pair_geo.row(static_cast<Eigen::Index>(p)) =
        geom[static_cast<std::size_t>(pair_src[p].first)].row(pair_src[p].second);
  }
  auto pair_list = std::make_shared<const std::vector<std::pair<int, int>>>(pairs);

  for (int l = 0; l < mp.cfg.layers; ++l) {
    auto& lp = mp.layers[static_cast<std::size_t>(l)];
    const std::string ctx = "trunk layer " + std::to_string(l);

    Var<S> normed = ad::rmsnorm_rows(x, tape.leaf(lp.attn_norm_g), S(1e-5));
    // The key branch masks the pre-norm residual, then norms the masked row:
    // at slot rows the key input is a function of x[0:a_eff] alone (the norm
    // of a masked row cannot leak the zeroed coordinates). Non-slot rows are
    // untouched, so with the mask off this is exactly the standard branch.
    Var<S> key_in = normed;
    if (mp.cfg.oa_key_mask && a_eff < D) {
      key_in = ad::rmsnorm_rows(ad::oa_mask_rows(x, slot_rows, a_eff),
                                tape.leaf(lp.attn_norm_g), S(1e-5));
    }
    Var<S> q = ad::matmul(normed, tape.leaf(lp.wq));
    Var<S> k = ad::matmul(key_in, tape.leaf(lp.wk));
    Var<S> v = ad::matmul(normed, tape.leaf(lp.wv));
    q = ad::rope(q, positions, dh, static_cast<S>(mp.cfg.rope_theta));
    k = ad::rope(k, positions, dh, static_cast<S>(mp.cfg.rope_theta));

    Var<S> bias{nullptr, -1};
    if (mp.cfg.geom_bias && !pairs.empty()) {
      Var<S> gin = tape.constant(pair_geo.template cast<S>());
      Var<S> gh = ad::gelu(ad::add_rowvec(ad::matmul(gin, tape.leaf(lp.geo_w1)),
                                          tape.leaf(lp.geo_b1)));
      Var<S> gout = ad::add_rowvec(ad::matmul(gh, tape.leaf(lp.geo_w2)),
                                   tape.leaf(lp.geo_b2));
      bias = ad::bias_scatter(gout, pair_list, L, mp.cfg.heads);
    }

    std::shared_ptr<Mat<S>> probs;
    Var<S> attn = ad::attention(q, k, v, allow, mp.cfg.heads, bias, ctx,
                                trace != nullptr ? &probs : nullptr);
    if (trace != nullptr) trace->attention.push_back(*probs);
    x = ad::add(x, ad::matmul(attn, tape.leaf(lp.wo)));

    Var<S> normed2 = ad::rmsnorm_rows(x, tape.leaf(lp.ffn_norm_g), S(1e-5));
    Var<S> gate = ad::silu(ad::matmul(normed2, tape.leaf(lp.w_gate)));
    Var<S> up = ad::matmul(normed2, tape.leaf(lp.w_up));
    Var<S> ffn = ad::matmul(ad::cmul(gate, up), tape.leaf(lp.w_down));
    x = ad::add(x, ffn);

    if (mp.cfg.oa_reset_hook) {
      // Cache rows repeat per frame in slot-position order.
      x = ad::addr_reset(x, slot_rows, addr_cache_rows);
    }
    if (trace != nullptr) trace->post_layer.push_back(tape.value(x));
  }
  return x;
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

template <typename S>
struct WorldOut {
  Var<S> cnt;
  Var<S> pose;
};

template <typename S>
WorldOut<S> world_head(Tape<S>& tape, ModelParams<S>& mp, Var<S> slot_hiddens) {
  Var<S> n = ad::layernorm_rows(slot_hiddens, tape.leaf(mp.world_ln_g),
                                tape.leaf(mp.world_ln_b), S(1e-10));
  Var<S> c1 = ad::gelu(
      ad::add_rowvec(ad::matmul(n, tape.leaf(mp.wcnt_w1)), tape.leaf(mp.wcnt_b1)));
  Var<S> cnt =
      ad::add_rowvec(ad::matmul(c1, tape.leaf(mp.wcnt_w2)), tape.leaf(mp.wcnt_b2));
  Var<S> p1 = ad::gelu(
      ad::add_rowvec(ad::matmul(n, tape.leaf(mp.wpose_w1)), tape.leaf(mp.wpose_b1)));
  Var<S> pose =
      ad::add_rowvec(ad::matmul(p1, tape.leaf(mp.wpose_w2)), tape.leaf(mp.wpose_b2));
  return {cnt, pose};
}

// Velocity field v(A_tau, tau, c): residual MLP over [c || A_tau || tau_emb].
template <typename S>
Var<S> flow_velocity(Tape<S>& tape, ModelParams<S>& mp, Var<S> a_tau_flat, double tau,
                     Var<S> cond) {
  if (tau < 0.0 || tau > 1.0) throw ContractError("flow_velocity: tau outside [0,1]");
  Var<S> temb = tape.constant(tau_embedding<S>(tau, mp.cfg.tau_emb_dim));
  Var<S> in = ad::concat_cols<S>({cond, a_tau_flat, temb});
  Var<S> h = ad::add_rowvec(ad::matmul(in, tape.leaf(mp.flow_in_w)),
                            tape.leaf(mp.flow_in_b));
  for (auto& fb : mp.flow_blocks) {
    Var<S> n = ad::layernorm_rows(h, tape.leaf(fb.ln_g), tape.leaf(fb.ln_b), S(1e-10));
    Var<S> b1 = ad::gelu(
        ad::add_rowvec(ad::matmul(n, tape.leaf(fb.w1)), tape.leaf(fb.b1)));
    Var<S> b2 = ad::add_rowvec(ad::matmul(b1, tape.leaf(fb.w2)), tape.leaf(fb.b2));
    h = ad::add(h, b2);
  }
  return ad::add_rowvec(ad::matmul(h, tape.leaf(mp.flow_out_w)),
                        tape.leaf(mp.flow_out_b));
}

// Forward Euler integration of the velocity field from tau=0 to 1.
// Differentiable in cond and the parameters; `noise` is the A^0 draw.
template <typename S>
Var<S> euler_decode(Tape<S>& tape, ModelParams<S>& mp, Var<S> cond,
                    const Mat<S>& noise_flat, int steps) {
  if (steps < 1) throw ContractError("euler_decode: steps must be >= 1");
  Var<S> a = tape.constant(noise_flat);
  const double dt = 1.0 / steps;
  for (int i = 0; i < steps; ++i) {
    Var<S> v = flow_velocity(tape, mp, a, dt * i, cond);
    a = ad::add(a, ad::scale(v, static_cast<S>(dt)));
  }
  return a;
}

template <typename S>
Mat<S> sample_chunk_noise(const ModelParams<S>& mp, Rng& rng) {
  Mat<S> noise(1, mp.cfg.chunk * mp.cfg.act_dim);
  for (Eigen::Index i = 0; i < noise.size(); ++i) {
    noise.data()[i] = static_cast<S>(rng.normal());
  }
  return noise;
}

template <typename S>
struct RoleOut {
  Var<S> roles;  // R x (n_max+1)
  Var<S> steps;  // H x (n_max+1)
};

// Soft slot assignment: learned role queries (offset by the conditioning
// vector) attend over final-frame slot hiddens; a learned per-step mixture
// turns the R role rows into the H x (N+1) per-step assignment.
template <typename S>
RoleOut<S> role_attention(Tape<S>& tape, ModelParams<S>& mp, Var<S> cond,
                          Var<S> slot_hiddens,
                          const std::vector<std::uint8_t>& valid) {
  bool any = false;
  for (const auto v : valid) any = any || (v != 0);
  if (!any) throw ContractError("role_attention: every slot is padding");

  Var<S> base = ad::matmul(cond, tape.leaf(mp.role_wq));  // 1 x D
  Var<S> queries = ad::add_rowvec(tape.leaf(mp.role_queries), base);
  Var<S> keys = ad::matmul(slot_hiddens, tape.leaf(mp.role_wk));
  Var<S> logits = ad::scale(ad::matmul_nt(queries, keys),
                            static_cast<S>(1.0 / std::sqrt(static_cast<double>(mp.cfg.hidden))));
  auto valid_ptr = std::make_shared<const std::vector<std::uint8_t>>(valid);
  Var<S> roles = ad::softmax_rows_masked(logits, valid_ptr);

  auto all_cols = std::make_shared<const std::vector<std::uint8_t>>(
      std::vector<std::uint8_t>(static_cast<std::size_t>(mp.cfg.role_queries), 1));
  Var<S> mix = ad::softmax_rows_masked(tape.leaf(mp.step_mix), all_cols);
  Var<S> steps = ad::matmul(mix, roles);
  return {roles, steps};
}

// ---------------------------------------------------------------------------
// Full single-window forward
// ---------------------------------------------------------------------------

template <typename S>
ForwardOut<S> forward(Tape<S>& tape, ModelParams<S>& mp, const data::Window& win,
                      const ForwardOptions& opt = {}) {
  const int T = static_cast<int>(win.frame_slots.size());
  const int n_max = static_cast<int>(win.frame_slots.front().size()) - 1;
  const int a_eff = opt.a_eff >= 0 ? opt.a_eff : mp.cfg.addr_dim;

  ForwardOut<S> out;
  out.layout = seq::build_layout(win.tokens, T, n_max, mp.vocab, mp.cfg.rope_share);
  const ad::MaskMat mask = seq::build_attention_mask(out.layout);

  // Addresses: either the episode cache (rollouts, interventions) or a fresh
  // differentiable computation from the episode's first frame.
  const Mat<S>* external = static_cast<const Mat<S>*>(opt.external_addr);
  if (external != nullptr) {
    out.addr_block = tape.constant(*external);
  } else {
    out.addr_block = compute_addr(tape, mp, win.addr_source, win.instruction);
  }
  out.addr_cache = std::make_shared<Mat<S>>(tape.value(out.addr_block));

  // Per-frame slot vectors -> adapter -> scatter into the token sequence.
  std::vector<Var<S>> frame_vecs;
  for (int t = 0; t < T; ++t) {
    Var<S> cnt = compute_content(tape, mp, win.frame_slots[static_cast<std::size_t>(t)],
                                 win.instruction);
    frame_vecs.push_back(assemble_slots(tape, mp, out.addr_block, cnt, t,
                                        win.frame_slots[static_cast<std::size_t>(t)]));
  }
  Var<S> slot_vectors = ad::concat_rows(frame_vecs);
  Var<S> slot_emb = adapt_slots(tape, mp, slot_vectors);

  auto ids = std::make_shared<const std::vector<int>>(out.layout.token_ids);
  Var<S> base = ad::rows_gather(tape.leaf(mp.embed), ids);
  Var<S> x = seq::scatter_slots(base, slot_emb, out.layout);

  // The reset hook reads the cache tiled over frames (slot-position order).
  auto cache_rows = std::make_shared<Mat<S>>(T * (n_max + 1), mp.cfg.addr_dim);
  for (int t = 0; t < T; ++t) {
    cache_rows->middleRows(t * (n_max + 1), n_max + 1) = *out.addr_cache;
  }
  out.hidden = trunk_forward(tape, mp, x, out.layout, mask, win.geom,
                             std::shared_ptr<const Mat<S>>(cache_rows), a_eff,
                             trace_of<S>(opt));

  // Readout positions.
  auto actq = std::make_shared<const std::vector<int>>(
      std::vector<int>{out.layout.act_q_pos});
  out.cond = ad::matmul(ad::rows_gather(out.hidden, actq), tape.leaf(mp.w_c));

  const auto last_slots = out.layout.slot_positions_of_frame(T - 1);
  out.slot_hidden_last =
      ad::rows_gather(out.hidden, std::make_shared<const std::vector<int>>(last_slots));

  // World head over valid non-robot slots of the final frame.
  std::vector<int> world_rows;
  for (int c = 1; c <= n_max; ++c) {
    if (win.frame_slots[static_cast<std::size_t>(T - 1)][static_cast<std::size_t>(c)]
            .role == sim::SlotRole::Object) {
      world_rows.push_back(c);
      out.world_cols.push_back(c);
    }
  }
  if (!world_rows.empty()) {
    Var<S> wh = ad::rows_gather(out.slot_hidden_last,
                                std::make_shared<const std::vector<int>>(world_rows));
    auto w = world_head(tape, mp, wh);
    out.world_cnt = w.cnt;
    out.world_pose = w.pose;
  }

  if (opt.want_role) {
    auto role = role_attention(tape, mp, out.cond, out.slot_hidden_last,
                               win.tokens.valid_slot.back());
    out.alpha_roles = role.roles;
    out.alpha_steps = role.steps;
  }

  if (opt.want_vq) {
    // Teacher-forced next-frame code prediction: the hidden right before each
    // VQ token of frames 1..T-1 predicts that token through lm_head.
    std::vector<int> predictor_rows;
    for (int p = 0; p + 1 < out.layout.length(); ++p) {
      if (out.layout.kinds[static_cast<std::size_t>(p + 1)] == seq::TokenKind::Vq &&
          out.layout.frame_group[static_cast<std::size_t>(p + 1)] >= 1) {
        predictor_rows.push_back(p);
        out.vq_targets.push_back(out.layout.token_ids[static_cast<std::size_t>(p + 1)]);
      }
    }
    if (!predictor_rows.empty()) {
      Var<S> rows = ad::rows_gather(
          out.hidden, std::make_shared<const std::vector<int>>(predictor_rows));
      out.vq_logits = ad::matmul_nt(rows, tape.leaf(mp.lm_head));
    }
  }
  return out;
}

}  // namespace oawam::model
