#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oawam/rng.hpp"
#include "oawam/sequence.hpp"

using namespace oawam;
using namespace oawam::seq;

namespace {

Vocab toy_vocab() {
  Vocab v;
  v.label_vocab = 12;
  v.state_dims = 4;
  v.state_bins = 64;
  v.act_dims = 3;
  v.action_bins = 64;
  v.codebook = 64;
  return v;
}

WindowTokens random_window(int T, int n_max, int grid_cells, const Vocab& v, Rng& rng) {
  WindowTokens w;
  w.instruction = {rng.below_int(Vocab::kNumVerbs), rng.below_int(v.label_vocab),
                   rng.below_int(v.label_vocab)};
  for (int d = 0; d < v.state_dims; ++d) w.state_bins.push_back(rng.below_int(v.state_bins));
  for (int t = 0; t < T; ++t) {
    std::vector<int> codes;
    for (int c = 0; c < grid_cells; ++c) codes.push_back(rng.below_int(v.codebook));
    w.vq_codes.push_back(codes);
    std::vector<std::uint8_t> valid(static_cast<std::size_t>(n_max + 1), 0);
    valid[0] = 1;  // robot always valid
    for (int s = 1; s <= n_max; ++s) valid[static_cast<std::size_t>(s)] = rng.below(2) ? 1 : 0;
    w.valid_slot.push_back(valid);
  }
  for (int t = 0; t + 1 < T; ++t) {
    std::vector<int> a;
    for (int d = 0; d < v.act_dims; ++d) a.push_back(rng.below_int(v.action_bins));
    w.past_actions.push_back(a);
  }
  return w;
}

// Independent rule-by-rule visibility oracle, written directly from the
// four mask rules plus padded-slot exclusion; compared bit-for-bit against
// the production mask builder.
bool oracle_visible(const SequenceLayout& lay, int q, int k) {
  auto padded = [&](int p) {
    return lay.kinds[static_cast<std::size_t>(p)] == TokenKind::Slot &&
           lay.valid_slot[static_cast<std::size_t>(lay.frame_group[static_cast<std::size_t>(p)])]
                         [static_cast<std::size_t>(lay.slot_index[static_cast<std::size_t>(p)])] == 0;
  };
  // Padded slots are excluded from being attended-to, and never attend.
  if (padded(k) || padded(q)) return false;
  // Rule (iv): [ACT_Q] sees all.
  if (q == lay.act_q_pos) return true;
  // Nothing else may look at [ACT_Q] (it is the last position anyway).
  if (k == lay.act_q_pos) return false;
  const int gq = lay.frame_group[static_cast<std::size_t>(q)];
  const int gk = lay.frame_group[static_cast<std::size_t>(k)];
  // Rule (i): block-causal across frame groups; the prefix acts as the
  // earliest group.
  if (gk != gq) return gk < gq;
  // Rule (ii): slot<->slot bidirectional within a frame group.
  if (gq >= 0 && lay.kinds[static_cast<std::size_t>(q)] == TokenKind::Slot &&
      lay.kinds[static_cast<std::size_t>(k)] == TokenKind::Slot) {
    return true;
  }
  // Rule (iii) and the autoregressive default: within a group everything
  // else is causal, which gives slot/VQ -> action one-way by template order.
  return k <= q;
}

}  // namespace

TEST_CASE("layout length matches the closed-form count") {
  const Vocab v = toy_vocab();
  Rng rng(3);
  const int T = 2, n_max = 3, grid = 64;
  const WindowTokens w = random_window(T, n_max, grid, v, rng);
  const SequenceLayout lay = build_layout(w, T, n_max, v, true);
  // Token-count oracle: count what was emitted.
  CHECK(lay.length() == sequence_length(T, n_max, grid, v.state_dims, v.act_dims));
  const int expect = 1 + 3 + 4 + (1 + 64 + 1 + 4 + 1 + 3 + 1) + (1 + 64 + 1 + 4 + 1 + 1) + 1;
  CHECK(lay.length() == expect);
}

TEST_CASE("exactly one ACT_Q, last in sequence") {
  const Vocab v = toy_vocab();
  Rng rng(4);
  const WindowTokens w = random_window(2, 4, 16, v, rng);
  const SequenceLayout lay = build_layout(w, 2, 4, v, true);
  int count = 0;
  for (int i = 0; i < lay.length(); ++i) {
    if (lay.token_ids[static_cast<std::size_t>(i)] == Vocab::kActQ) ++count;
  }
  CHECK(count == 1);
  CHECK(lay.act_q_pos == lay.length() - 1);
  CHECK(lay.token_ids.back() == Vocab::kActQ);
}

TEST_CASE("kind partition and per-frame slot counts") {
  const Vocab v = toy_vocab();
  Rng rng(5);
  const int T = 3, n_max = 4;
  WindowTokens w = random_window(T, n_max, 9, v, rng);
  const SequenceLayout lay = build_layout(w, T, n_max, v, true);
  for (int t = 0; t < T; ++t) {
    CHECK(static_cast<int>(lay.slot_positions_of_frame(t).size()) == n_max + 1);
  }
  // Every position carries exactly one kind by construction; check the
  // token-id ranges agree with the kind tensor.
  for (int i = 0; i < lay.length(); ++i) {
    const int id = lay.token_ids[static_cast<std::size_t>(i)];
    switch (lay.kinds[static_cast<std::size_t>(i)]) {
      case TokenKind::Vq:
        CHECK(id >= v.vq_base());
        CHECK(id < v.size());
        break;
      case TokenKind::Text:
        CHECK(id >= v.text_base());
        CHECK(id < v.state_base());
        break;
      case TokenKind::State:
        CHECK(id >= v.state_base());
        CHECK(id < v.action_base());
        break;
      case TokenKind::Action:
        CHECK(id >= v.action_base());
        CHECK(id < v.vq_base());
        break;
      case TokenKind::Slot:
        CHECK(id == Vocab::kSlotPlaceholder);
        break;
      case TokenKind::Special:
        CHECK(id < Vocab::kNumSpecial);
        break;
    }
  }
}

TEST_CASE("position ids: shared slot positions, sequential non-slot scan") {
  const Vocab v = toy_vocab();
  Rng rng(6);
  const int T = 2, n_max = 3;
  const WindowTokens w = random_window(T, n_max, 4, v, rng);
  const SequenceLayout lay = build_layout(w, T, n_max, v, true);

  for (int t = 0; t < T; ++t) {
    const auto slots = lay.slot_positions_of_frame(t);
    for (const int p : slots) {
      CHECK(lay.position_ids[static_cast<std::size_t>(p)] ==
            lay.position_ids[static_cast<std::size_t>(slots.front())]);
    }
  }
  // Scan oracle: consecutive non-slot tokens advance by exactly one.
  int prev = -1;
  for (int i = 0; i < lay.length(); ++i) {
    if (lay.kinds[static_cast<std::size_t>(i)] == TokenKind::Slot) continue;
    if (prev >= 0) {
      CHECK(lay.position_ids[static_cast<std::size_t>(i)] == prev + 1);
    }
    prev = lay.position_ids[static_cast<std::size_t>(i)];
  }

  // rope_share off: strictly sequential everywhere.
  const SequenceLayout seq_lay = build_layout(w, T, n_max, v, false);
  for (int i = 0; i < seq_lay.length(); ++i) {
    CHECK(seq_lay.position_ids[static_cast<std::size_t>(i)] == i);
  }
}

TEST_CASE("attention mask equals the brute-force rule oracle on 120 fuzzed layouts") {
  const Vocab v = toy_vocab();
  Rng rng(123456);
  for (int trial = 0; trial < 120; ++trial) {
    const int T = 1 + rng.below_int(3);
    const int n_max = 1 + rng.below_int(4);
    const int grid = 1 + rng.below_int(2);
    const WindowTokens w = random_window(T, n_max, grid * grid, v, rng);
    const SequenceLayout lay = build_layout(w, T, n_max, v, true);
    const ad::MaskMat mask = build_attention_mask(lay);
    REQUIRE(mask.rows() == lay.length());
    for (int i = 0; i < lay.length(); ++i) {
      for (int j = 0; j < lay.length(); ++j) {
        if ((mask(i, j) != 0) != oracle_visible(lay, i, j)) {
          CAPTURE(trial);
          CAPTURE(i);
          CAPTURE(j);
          REQUIRE((mask(i, j) != 0) == oracle_visible(lay, i, j));
        }
      }
    }
  }
}

TEST_CASE("mask spot checks: ACT_Q row, causality, padded columns") {
  const Vocab v = toy_vocab();
  Rng rng(9);
  const int T = 3, n_max = 3;
  const WindowTokens w = random_window(T, n_max, 4, v, rng);
  const SequenceLayout lay = build_layout(w, T, n_max, v, true);
  const ad::MaskMat mask = build_attention_mask(lay);

  for (int j = 0; j < lay.length(); ++j) {
    CHECK((mask(lay.act_q_pos, j) != 0) == !lay.is_padded_slot(j));
  }
  // A slot token in group 1 cannot see anything in group 2.
  const int slot_g1 = lay.slot_positions_of_frame(1).front();
  for (int j = 0; j < lay.length(); ++j) {
    if (lay.frame_group[static_cast<std::size_t>(j)] == 2) CHECK(mask(slot_g1, j) == 0);
  }
  // Padded slot rows and columns are all false.
  for (int p = 0; p < lay.length(); ++p) {
    if (!lay.is_padded_slot(p)) continue;
    for (int j = 0; j < lay.length(); ++j) {
      CHECK(mask(p, j) == 0);
      CHECK(mask(j, p) == 0);
    }
  }
}

TEST_CASE("scatter_slots overwrites SLOT rows and nothing else") {
  const Vocab v = toy_vocab();
  Rng rng(10);
  const int T = 2, n_max = 2, D = 8;
  const WindowTokens w = random_window(T, n_max, 4, v, rng);
  const SequenceLayout lay = build_layout(w, T, n_max, v, true);
  const auto slots = lay.slot_positions();

  ad::Tape<double> tape;
  ad::Mat<double> base(lay.length(), D);
  Rng r2(11);
  for (Eigen::Index i = 0; i < base.size(); ++i) base.data()[i] = r2.normal();
  ad::Mat<double> emb(static_cast<Eigen::Index>(slots.size()), D);
  for (Eigen::Index i = 0; i < emb.size(); ++i) emb.data()[i] = r2.normal();

  auto out = scatter_slots(tape.constant(base), tape.constant(emb), lay);
  const auto& ov = tape.value(out);
  // Gather round-trip: SLOT rows carry the inputs bitwise.
  for (std::size_t s = 0; s < slots.size(); ++s) {
    CHECK(ov.row(slots[s]) == emb.row(static_cast<Eigen::Index>(s)));
  }
  // Non-slot rows bitwise untouched.
  for (int i = 0; i < lay.length(); ++i) {
    if (lay.kinds[static_cast<std::size_t>(i)] != TokenKind::Slot) {
      CHECK(ov.row(i) == base.row(i));
    }
  }
  // Zero slot embeddings zero exactly the SLOT rows.
  auto zeroed = scatter_slots(
      tape.constant(base),
      tape.constant(ad::Mat<double>::Zero(static_cast<Eigen::Index>(slots.size()), D)),
      lay);
  for (const int p : slots) CHECK(tape.value(zeroed).row(p).norm() == 0.0);

  // Count mismatch is an error.
  CHECK_THROWS_AS(
      scatter_slots(tape.constant(base),
                    tape.constant(ad::Mat<double>::Zero(2, D)), lay),
      ContractError);
}

TEST_CASE("quantize: edges, round-trip bound, clamping") {
  CHECK(quantize(-1.0, 64, -1.0, 1.0) == 0);
  CHECK(quantize(1.0, 64, -1.0, 1.0) == 63);
  CHECK(quantize(-5.0, 64, -1.0, 1.0) == 0);   // clamped
  CHECK(quantize(7.0, 64, -1.0, 1.0) == 63);   // clamped
  Rng rng(12);
  const int bins = 64;
  const double half_width = 2.0 / bins / 2.0;
  for (int i = 0; i < 10000; ++i) {
    const double x = rng.uniform(-1.0, 1.0);
    const double back = dequantize(quantize(x, bins, -1.0, 1.0), bins, -1.0, 1.0);
    CHECK(std::abs(x - back) <= half_width + 1e-12);
  }
  CHECK_THROWS_AS(quantize(0.0, 1, -1.0, 1.0), ContractError);
}

TEST_CASE("layout dump is parseable and complete") {
  const Vocab v = toy_vocab();
  Rng rng(13);
  const WindowTokens w = random_window(2, 2, 4, v, rng);
  const SequenceLayout lay = build_layout(w, 2, 2, v, true);
  const auto j = lay.dump();
  CHECK(static_cast<int>(j.size()) == lay.length());
  CHECK(j.back()["kind"] == "SPECIAL");
  CHECK(j.back()["pos"] == lay.length() - 1);
}
