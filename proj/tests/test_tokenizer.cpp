#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "oawam/model.hpp"

using namespace oawam;
using MP = model::ModelParams<double>;
using M = ad::Mat<double>;

namespace {

Config toy_cfg() {
  Config c = Config::defaults();
  c.apply_override("model.hidden=32");
  c.apply_override("model.heads=2");
  c.apply_override("model.layers=2");
  return c;
}

std::vector<sim::RawSlot> sample_slots(const Config& cfg, std::uint64_t seed,
                                       sim::Instruction* instr_out = nullptr) {
  const auto ep = sim::generate_episode(cfg.sim, seed);
  if (instr_out != nullptr) *instr_out = ep.instruction;
  return sim::slots_for_frame(ep.frames.front(), ep.instruction, ep.target_index,
                              ep.reference_index, cfg.sim, nullptr, 0);
}

}  // namespace

TEST_CASE("compute_addr matches an independently coded two-layer MLP to 1e-12") {
  const Config cfg = toy_cfg();
  auto mp = MP::build(cfg, 5);
  sim::Instruction instr;
  const auto slots = sample_slots(cfg, 77, &instr);

  ad::Tape<double> tape;
  const M addr = tape.value(model::compute_addr(tape, mp, slots, instr));

  // Oracle: plain loops over the same weights.
  const int E = cfg.model.label_emb_dim, F = cfg.sim.feature_dim;
  const int A = cfg.model.addr_dim;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    if (slots[k].role == sim::SlotRole::Padding) {
      CHECK(addr.row(static_cast<Eigen::Index>(k)).norm() == 0.0);
      continue;
    }
    const int lrow = model::label_row_for<double>(slots[k], instr, cfg.sim.label_vocab);
    Eigen::VectorXd in(E + F);
    for (int j = 0; j < E; ++j) in[j] = mp.label_table.value(lrow, j);
    for (int j = 0; j < F; ++j) in[E + j] = slots[k].feature[j];
    Eigen::VectorXd h(2 * A);
    for (int o = 0; o < 2 * A; ++o) {
      double acc = mp.addr_b1.value(0, o);
      for (int j = 0; j < E + F; ++j) acc += in[j] * mp.addr_w1.value(j, o);
      h[o] = 0.5 * acc * (1.0 + std::erf(acc * 0.7071067811865475244));
    }
    for (int o = 0; o < A; ++o) {
      double acc = mp.addr_b2.value(0, o);
      for (int j = 0; j < 2 * A; ++j) acc += h[j] * mp.addr_w2.value(j, o);
      CHECK(std::abs(addr(static_cast<Eigen::Index>(k), o) - acc) < 1e-12);
    }
  }
}

TEST_CASE("all-zero addr parameters give a zero address") {
  const Config cfg = toy_cfg();
  auto mp = MP::build(cfg, 6);
  mp.addr_w1.value.setZero();
  mp.addr_b1.value.setZero();
  mp.addr_w2.value.setZero();
  mp.addr_b2.value.setZero();
  sim::Instruction instr;
  const auto slots = sample_slots(cfg, 78, &instr);
  ad::Tape<double> tape;
  const M addr = tape.value(model::compute_addr(tape, mp, slots, instr));
  CHECK(addr.norm() == 0.0);
}

TEST_CASE("compute_addr outside t=0 is a contract violation") {
  const Config cfg = toy_cfg();
  auto mp = MP::build(cfg, 7);
  sim::Instruction instr;
  const auto slots = sample_slots(cfg, 79, &instr);
  ad::Tape<double> tape;
  CHECK_THROWS_AS(model::compute_addr(tape, mp, slots, instr, 1), ContractError);
}

TEST_CASE("content: padding bypasses the MLP, gradient w.r.t. features checks") {
  const Config cfg = toy_cfg();
  auto mp = MP::build(cfg, 8);
  sim::Instruction instr;
  auto slots = sample_slots(cfg, 80, &instr);

  ad::Tape<double> tape;
  ad::Var<double> feat;
  ad::Var<double> cnt = model::compute_content(tape, mp, slots, instr, &feat);
  for (std::size_t k = 0; k < slots.size(); ++k) {
    if (slots[k].role == sim::SlotRole::Padding) {
      CHECK(tape.value(cnt).row(static_cast<Eigen::Index>(k)).norm() == 0.0);
    }
  }

  // Central differences on the feature block vs tape gradient, fp64.
  ad::Var<double> loss = ad::sum_all(ad::cmul(cnt, cnt));
  tape.backward(loss);
  const M analytic = tape.grad(feat);
  const M f0 = tape.value(feat);
  const double eps = 1e-6;
  int checked = 0;
  for (Eigen::Index i = 0; i < f0.size() && checked < 40; i += 3, ++checked) {
    auto eval = [&](double delta) {
      std::vector<sim::RawSlot> pert = slots;
      // Map the flat index back to (valid row, feature column).
      int vr = 0;
      for (auto& s : pert) {
        if (s.role == sim::SlotRole::Padding) continue;
        if (vr == static_cast<int>(i % f0.rows())) {
          s.feature[static_cast<int>(i / f0.rows())] += delta;
          break;
        }
        ++vr;
      }
      ad::Tape<double> t2;
      ad::Var<double> c2 = model::compute_content(t2, mp, pert, instr);
      return t2.value(ad::sum_all(ad::cmul(c2, c2)))(0, 0);
    };
    const double numeric = (eval(eps) - eval(-eps)) / (2 * eps);
    const double a = analytic.data()[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-4});
    CHECK(std::abs(a - numeric) / denom < 1e-6);
  }
}

TEST_CASE("assemble_slot layout and the t=0 sinusoid pattern") {
  const Config cfg = toy_cfg();
  auto mp = MP::build(cfg, 9);
  sim::Instruction instr;
  const auto slots = sample_slots(cfg, 81, &instr);
  const int A = cfg.model.addr_dim, C = cfg.model.cnt_dim, P = cfg.model.temporal_dim;

  ad::Tape<double> tape;
  ad::Var<double> addr = model::compute_addr(tape, mp, slots, instr);
  ad::Var<double> cnt = model::compute_content(tape, mp, slots, instr);
  ad::Var<double> vec = model::assemble_slots(tape, mp, addr, cnt, 0, slots);

  CHECK(tape.value(vec).cols() == cfg.model.slot_dim());
  // slot[0:A] is the address, bitwise.
  CHECK(tape.value(vec).leftCols(A) == tape.value(addr));
  CHECK(tape.value(vec).middleCols(A, C) == tape.value(cnt));
  // t=0 sinusoid: even coordinates sin(0)=0, odd cos(0)=1.
  for (int j = 0; j < P / 2; ++j) {
    CHECK(tape.value(vec)(0, A + C + 2 * j) == 0.0);
    CHECK(tape.value(vec)(0, A + C + 2 * j + 1) == 1.0);
  }
  CHECK_THROWS_AS(model::assemble_slots(tape, mp, addr, cnt, -1, slots), ContractError);
}

TEST_CASE("address immutability: every frame shares the t=0 address block") {
  const Config cfg = toy_cfg();
  auto mp = MP::build(cfg, 10);
  const auto ep = sim::generate_episode(cfg.sim, 82);
  const data::Window win = data::build_training_window(
      ep, static_cast<int>(ep.actions.size()) / 2, cfg);

  ad::Tape<float> tape;
  auto fwd = model::forward(tape, model::ModelParams<float>::build(cfg, 10), win);
  const auto& vecs = tape.value(fwd.addr_block);
  (void)vecs;
  // The forward assembles each frame from the same addr node; verify the
  // scattered slot vectors agree bitwise across frames on [0:A].
  // (Slot vectors are internal; the addr cache equals the addr block values.)
  CHECK(*fwd.addr_cache == tape.value(fwd.addr_block));
}

TEST_CASE("adapter: zero slot through zero second layer is a zero embedding") {
  const Config cfg = toy_cfg();
  auto mp = MP::build(cfg, 11);
  mp.adapter_w2.value.setZero();
  mp.adapter_b2.value.setZero();
  ad::Tape<double> tape;
  ad::Var<double> z = tape.constant(M::Zero(3, cfg.model.slot_dim()));
  const M out = tape.value(model::adapt_slots(tape, mp, z));
  CHECK(out.norm() == 0.0);
  CHECK(out.cols() == cfg.model.hidden);

  // Width mismatch is an error.
  ad::Var<double> bad = tape.constant(M::Zero(3, cfg.model.slot_dim() + 1));
  CHECK_THROWS_AS(model::adapt_slots(tape, mp, bad), ContractError);
}

TEST_CASE("pre-projection normalization has zero mean per vector") {
  const Config cfg = toy_cfg();
  auto mp = MP::build(cfg, 12);
  // At init gain=1, offset=0, so the adapter's LN output itself must have
  // zero row mean to 1e-10; recompute it directly.
  ad::Tape<double> tape;
  Rng rng(13);
  M x(5, cfg.model.slot_dim());
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal() * 3.0;
  ad::Var<double> n = ad::layernorm_rows(tape.constant(x), tape.leaf(mp.adapter_ln_g),
                                         tape.leaf(mp.adapter_ln_b), 1e-10);
  for (int r = 0; r < 5; ++r) {
    CHECK(std::abs(tape.value(n).row(r).mean()) < 1e-10);
  }
}

TEST_CASE("instruction-named labels keep their embedding; distractors go unknown") {
  const Config cfg = toy_cfg();
  sim::Instruction instr{0, 3, 7};
  sim::RawSlot named;
  named.role = sim::SlotRole::Object;
  named.label_id = 3;
  sim::RawSlot twin = named;  // same label as the target: also named
  sim::RawSlot other;
  other.role = sim::SlotRole::Object;
  other.label_id = 5;
  sim::RawSlot robot;
  robot.role = sim::SlotRole::Robot;
  robot.label_id = cfg.sim.label_vocab;

  CHECK(model::label_row_for<double>(named, instr, cfg.sim.label_vocab) == 3);
  CHECK(model::label_row_for<double>(twin, instr, cfg.sim.label_vocab) == 3);
  CHECK(model::label_row_for<double>(other, instr, cfg.sim.label_vocab) ==
        cfg.sim.label_vocab);  // unknown row
  CHECK(model::label_row_for<double>(robot, instr, cfg.sim.label_vocab) ==
        cfg.sim.label_vocab + 1);  // robot row
}

TEST_CASE("checkpoint save/load round-trips parameters") {
  const Config cfg = toy_cfg();
  auto mp = model::ModelParams<float>::build(cfg, 14);
  const std::string path =
      (std::filesystem::temp_directory_path() / "oawam_tok_ckpt.oaw").string();
  mp.save(path, {{"config_hash", cfg.hash()}});

  auto mp2 = model::ModelParams<float>::build(cfg, 99);
  CHECK((mp2.adapter_w1.value - mp.adapter_w1.value).norm() > 0.0f);
  mp2.load(path, false);
  for (std::size_t i = 0; i < mp.all.size(); ++i) {
    CHECK(mp.all[i]->value == mp2.all[i]->value);
  }
  std::filesystem::remove(path);
}
